#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mmrisk/data.hpp"
#include "mmrisk/gradcheck.hpp"
#include "mmrisk/metrics.hpp"
#include "mmrisk/objectives.hpp"
#include "mmrisk/rng.hpp"
#include "mmrisk/tensor.hpp"
#include "mmrisk/train.hpp"

namespace py = pybind11;
using namespace mmrisk;

namespace {

Tensor to_tensor(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = static_cast<int>(arr.shape(i));
  std::vector<double> values(arr.data(), arr.data() + arr.size());
  return Tensor(std::move(shape), std::move(values));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

ClipConfig make_clip_config(double temperature, double lambda, const std::string& denominator,
                            const std::string& reduction) {
  ClipConfig cfg;
  cfg.temperature = temperature;
  cfg.lambda = lambda;
  if (denominator == "literal") cfg.denominator = ClipDenominator::Literal;
  else if (denominator != "standard") throw std::invalid_argument("denominator must be standard|literal");
  if (reduction == "sum") cfg.reduction = LossReduction::Sum;
  else if (reduction != "mean") throw std::invalid_argument("reduction must be mean|sum");
  return cfg;
}

TabularSchema schema_from_kinds(const std::vector<int>& kinds) {
  TabularSchema schema;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    FeatureSpec f;
    f.name = "x" + std::to_string(i);
    if (kinds[i] == 0) {
      f.kind = FeatureKind::Continuous;
    } else if (kinds[i] >= 2) {
      f.kind = FeatureKind::Categorical;
      f.levels = kinds[i];
    } else {
      throw std::invalid_argument("kinds entries must be 0 (continuous) or >= 2 (levels)");
    }
    schema.features.push_back(f);
  }
  return schema;
}

std::vector<std::vector<double>> to_rows(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 2) throw std::invalid_argument("expected a 2D matrix");
  std::vector<std::vector<double>> rows(arr.shape(0), std::vector<double>(arr.shape(1)));
  for (py::ssize_t i = 0; i < arr.shape(0); ++i)
    for (py::ssize_t j = 0; j < arr.shape(1); ++j) rows[i][j] = arr.at(i, j);
  return rows;
}

py::array_t<double> rows_to_array(const std::vector<std::vector<double>>& rows) {
  py::array_t<double> out({static_cast<py::ssize_t>(rows.size()),
                           static_cast<py::ssize_t>(rows.empty() ? 0 : rows[0].size())});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      out.mutable_at(static_cast<py::ssize_t>(i), static_cast<py::ssize_t>(j)) = rows[i][j];
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Core operations of the multimodal stroke-risk pipeline";

  using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

  m.def("softmax",
        [](const Arr& x, int axis) { return to_array(softmax(to_tensor(x), axis)); },
        py::arg("x"), py::arg("axis") = -1);

  m.def("l2_normalize",
        [](const Arr& x, int axis, double eps) {
          return to_array(l2_normalize(to_tensor(x), axis, eps));
        },
        py::arg("x"), py::arg("axis") = -1, py::arg("eps") = 1e-12);

  m.def("conv3d",
        [](const Arr& input, const Arr& kernel, std::array<int, 3> stride,
           std::array<int, 3> padding) {
          return to_array(conv3d(to_tensor(input), to_tensor(kernel), stride, padding));
        },
        py::arg("input"), py::arg("kernel"), py::arg("stride") = std::array<int, 3>{1, 1, 1},
        py::arg("padding") = std::array<int, 3>{0, 0, 0});

  m.def("clip_loss",
        [](const Arr& z_img, const Arr& z_tab, double temperature, double lambda,
           const std::string& denominator, const std::string& reduction) {
          ClipResult r = clip_loss(to_tensor(z_img), to_tensor(z_tab),
                                   make_clip_config(temperature, lambda, denominator, reduction));
          return py::make_tuple(r.loss.item(), to_array(r.similarity));
        },
        py::arg("z_img"), py::arg("z_tab"), py::arg("temperature") = 0.1,
        py::arg("lambda_") = 0.5, py::arg("denominator") = "standard",
        py::arg("reduction") = "mean");

  m.def("ntxent_loss",
        [](const Arr& z1, const Arr& z2, double temperature) {
          return ntxent_loss(to_tensor(z1), to_tensor(z2), temperature).item();
        },
        py::arg("z_view1"), py::arg("z_view2"), py::arg("temperature") = 0.1);

  m.def("mine_hard_negatives",
        [](const Arr& similarity, double temperature, std::uint64_t seed) {
          Rng rng(seed);
          MinedNegatives r = mine_hard_negatives(to_tensor(similarity), temperature, rng);
          return py::make_tuple(r.tab_for_image, r.img_for_tab);
        },
        py::arg("similarity"), py::arg("temperature") = 0.1, py::arg("seed") = 0);

  m.def("itm_loss",
        [](const Arr& pos, const Arr& neg) {
          return itm_loss(to_tensor(pos), to_tensor(neg)).item();
        },
        py::arg("cls_logits_pos"), py::arg("cls_logits_neg"));

  m.def("total_loss", [](double clip, double itm) {
    return total_loss(Tensor::scalar(clip), Tensor::scalar(itm)).item();
  });

  m.def("roc_auc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
          return roc_auc(scores, labels).auc;
        },
        py::arg("scores"), py::arg("labels"));

  m.def("youden_threshold",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
          return youden_point(roc_auc(scores, labels).curve);
        },
        py::arg("scores"), py::arg("labels"));

  m.def("classification_metrics",
        [](const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
          EvalReport r = classification_metrics(scores, labels, threshold);
          py::dict d;
          d["auc"] = r.auc;
          d["threshold"] = r.threshold;
          d["balanced_accuracy"] = r.balanced_accuracy;
          d["f1"] = r.f1;
          d["sensitivity"] = r.sensitivity;
          d["specificity"] = r.specificity;
          d["tp"] = r.tp;
          d["fp"] = r.fp;
          d["tn"] = r.tn;
          d["fn"] = r.fn;
          return d;
        },
        py::arg("scores"), py::arg("labels"), py::arg("threshold"));

  m.def("mice_impute",
        [](const Arr& matrix, const std::vector<int>& kinds, int max_rounds, double tol) {
          return rows_to_array(mice_impute(to_rows(matrix), schema_from_kinds(kinds), max_rounds, tol));
        },
        py::arg("matrix"), py::arg("kinds"), py::arg("max_rounds") = 10, py::arg("tol") = 1e-6,
        "Chained-equations imputation; NaN marks missing entries. kinds: 0 for "
        "continuous, otherwise the number of categorical levels.");

  m.def("lr_at",
        [](int epoch, double base, int warmup_epochs, int total_epochs) {
          return lr_at(epoch, LrSchedule{base, warmup_epochs, total_epochs});
        },
        py::arg("epoch"), py::arg("base"), py::arg("warmup_epochs") = 10,
        py::arg("total_epochs") = 100);

  m.def("gradcheck_max_rel_error",
        [](std::uint64_t seed, int cases_per_op) {
          double worst = 0.0;
          for (const auto& c : primitive_gradient_suite(seed, cases_per_op))
            worst = std::max(worst, c.max_rel_err);
          return worst;
        },
        py::arg("seed") = 42, py::arg("cases_per_op") = 5);
}
