#include "mmrisk/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mmrisk/model.hpp"
#include "mmrisk/objectives.hpp"
#include "mmrisk/rng.hpp"

namespace mmrisk {

namespace {

double rel_err(double analytic, double numeric) {
  double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Values with pairwise separation well above the FD step and away from 0,
// for kinked ops (relu, max pooling).
Tensor rand_tensor_separated(Shape shape, Rng& rng) {
  std::size_t n = numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mag = 0.05 + 0.013 * static_cast<double>(i) + rng.uniform(0.0, 0.005);
    v[i] = rng.bernoulli(0.5) ? mag : -mag;
  }
  // deterministic shuffle decorrelates magnitude from position
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[rng.uniform_int(static_cast<int>(i))]);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

double fd_max_rel_error(const LossFn& f, const std::vector<Tensor>& inputs, double step) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (const Tensor& t : inputs) tracked.push_back(tape.leaf(t));
    Tensor loss = f(&tape, tracked);
    tape.backward(loss);
    for (const Tensor& t : inputs) analytic.push_back(tape.leaf_grad(t));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor probe = inputs[i].clone();
    std::vector<Tensor> args = inputs;
    args[i] = probe;
    for (std::size_t k = 0; k < probe.size(); ++k) {
      double orig = probe[k];
      probe.raw()[k] = orig + step;
      double up = f(nullptr, args).item();
      probe.raw()[k] = orig - step;
      double down = f(nullptr, args).item();
      probe.raw()[k] = orig;
      double numeric = (up - down) / (2.0 * step);
      worst = std::max(worst, rel_err(analytic[i][k], numeric));
    }
  }
  return worst;
}

namespace {

// random-weighted sum turns any op output into a scalar with non-uniform
// upstream gradients
LossFn weighted(const std::function<Tensor(Tape*, const std::vector<Tensor>&)>& op,
                const Tensor& weights) {
  return [op, weights](Tape* tape, const std::vector<Tensor>& in) {
    return sum_all(mul(op(tape, in), weights));
  };
}

struct SuiteRunner {
  Rng rng;
  int cases;
  std::vector<GradCheckCase> results;

  void run(const std::string& name,
           const std::function<std::vector<Tensor>(Rng&)>& make_inputs,
           const std::function<Tensor(Tape*, const std::vector<Tensor>&)>& op) {
    GradCheckCase c{name, 0.0, cases};
    for (int k = 0; k < cases; ++k) {
      std::vector<Tensor> inputs = make_inputs(rng);
      Tensor out;
      {
        // probe output shape with an untracked pass
        out = op(nullptr, inputs);
      }
      Tensor w = rand_tensor(out.shape(), rng, 0.1, 1.0);
      c.max_rel_err = std::max(c.max_rel_err, fd_max_rel_error(weighted(op, w), inputs));
    }
    results.push_back(c);
  }
};

}  // namespace

std::vector<GradCheckCase> primitive_gradient_suite(std::uint64_t seed, int cases_per_op) {
  SuiteRunner s{Rng(mix_seed(seed, 0x67636bULL)), cases_per_op, {}};

  s.run("relu", [](Rng& r) { return std::vector<Tensor>{rand_tensor_separated({3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return relu(in[0]); });
  s.run("gelu", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return gelu(in[0]); });
  s.run("sigmoid", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return sigmoid(in[0]); });
  s.run("scale", [](Rng& r) { return std::vector<Tensor>{rand_tensor({5}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return scale(in[0], 1.7); });
  s.run("add_scalar", [](Rng& r) { return std::vector<Tensor>{rand_tensor({5}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return add_scalar(in[0], 0.3); });

  s.run("add_broadcast",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 3, 4}, r), rand_tensor({3, 1}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return add(in[0], in[1]); });
  s.run("sub_broadcast",
        [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r), rand_tensor({4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return sub(in[0], in[1]); });
  s.run("mul_broadcast",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 3, 4}, r), rand_tensor({2, 1, 4}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return mul(in[0], in[1]); });

  s.run("matmul",
        [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r), rand_tensor({4, 2}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
  s.run("matmul_batched",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 3, 4}, r), rand_tensor({2, 4, 2}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
  s.run("matmul_shared_rhs",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 3, 4}, r), rand_tensor({4, 2}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
  s.run("permute", [](Rng& r) { return std::vector<Tensor>{rand_tensor({2, 3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return permute(in[0], {2, 0, 1}); });
  s.run("transpose_last", [](Rng& r) { return std::vector<Tensor>{rand_tensor({2, 3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return transpose_last(in[0]); });

  s.run("reshape", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return reshape(in[0], {2, 6}); });
  s.run("concat",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 3}, r), rand_tensor({2, 2}, r),
                                     rand_tensor({2, 1}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return concat({in[0], in[1], in[2]}, 1); });
  s.run("slice", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 5}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return slice(in[0], 1, 1, 3); });

  s.run("sum_all", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return reshape(sum_all(in[0]), {1}); });
  s.run("mean_all", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return reshape(mean_all(in[0]), {1}); });
  s.run("sum_axis", [](Rng& r) { return std::vector<Tensor>{rand_tensor({2, 3, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return sum_axis(in[0], 1); });
  s.run("logsumexp", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 5}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return logsumexp(in[0], 1); });
  s.run("diagonal2d", [](Rng& r) { return std::vector<Tensor>{rand_tensor({4, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return diagonal2d(in[0]); });

  s.run("softmax", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 5}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return softmax(in[0], 1); });
  s.run("softmax_axis0", [](Rng& r) { return std::vector<Tensor>{rand_tensor({3, 5}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return softmax(in[0], 0); });
  s.run("l2_normalize",
        [](Rng& r) {
          // rows bounded away from the eps guard
          Tensor t = rand_tensor({3, 5}, r);
          for (std::size_t i = 0; i < t.size(); ++i)
            if (std::abs(t[i]) < 0.2) t.raw()[i] = t[i] >= 0 ? 0.2 : -0.2;
          return std::vector<Tensor>{t};
        },
        [](Tape*, const std::vector<Tensor>& in) { return l2_normalize(in[0], 1); });
  s.run("layer_norm",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({3, 6}, r), rand_tensor({6}, r, 0.5, 1.5),
                                     rand_tensor({6}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); });
  s.run("channel_layer_norm",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 3, 2, 2, 2}, r),
                                     rand_tensor({3}, r, 0.5, 1.5), rand_tensor({3}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) {
          return channel_layer_norm(in[0], in[1], in[2]);
        });

  s.run("conv3d",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({1, 2, 4, 4, 4}, r),
                                     rand_tensor({3, 2, 2, 2, 2}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return conv3d(in[0], in[1], {1, 1, 1}, {0, 0, 0}); });
  s.run("conv3d_strided_padded",
        [](Rng& r) {
          return std::vector<Tensor>{rand_tensor({2, 1, 5, 5, 5}, r),
                                     rand_tensor({2, 1, 3, 3, 3}, r)};
        },
        [](Tape*, const std::vector<Tensor>& in) { return conv3d(in[0], in[1], {2, 2, 2}, {1, 1, 1}); });
  s.run("maxpool3d",
        [](Rng& r) { return std::vector<Tensor>{rand_tensor_separated({1, 2, 4, 4, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return maxpool3d(in[0], {2, 2, 2}, {2, 2, 2}); });
  s.run("avgpool3d",
        [](Rng& r) { return std::vector<Tensor>{rand_tensor({1, 2, 4, 4, 4}, r)}; },
        [](Tape*, const std::vector<Tensor>& in) { return avgpool3d(in[0], {2, 2, 2}, {2, 2, 2}); });
  s.run("bce_with_logits",
        [](Rng& r) {
          Tensor targets = rand_tensor({6}, r, 0.0, 1.0);
          for (std::size_t i = 0; i < targets.size(); ++i)
            targets.raw()[i] = targets[i] < 0.5 ? 0.0 : 1.0;
          return std::vector<Tensor>{rand_tensor({6}, r), targets};
        },
        [](Tape*, const std::vector<Tensor>& in) { return bce_with_logits(in[0], in[1]); });

  return s.results;
}

GradCheckCase composite_gradient_check(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x636f6d70ULL));

  ModelConfig cfg;
  cfg.trunk_widths = {2, 3};
  cfg.trunk_strides = {2, 2};
  cfg.image_embed_dim = 8;
  cfg.tabular_input_dim = 7;
  cfg.tabular_hidden = {8};
  cfg.tabular_embed_dim = 8;
  cfg.projection_dim = 6;
  cfg.projection_hidden = 8;
  cfg.interaction_dim = 8;
  cfg.interaction_heads = 2;
  cfg.interaction_layers = 2;
  cfg.interaction_ff_dim = 8;
  PretrainModel model(cfg, seed);

  // moderate input scale keeps the central-difference truncation error far
  // below the tolerance (the temperature-scaled softmax is steep)
  const int n = 4;
  Tensor vols = rand_tensor({n, 1, 8, 8, 8}, rng, -0.5, 0.5);
  Tensor tabs = rand_tensor({n, 7}, rng, -0.5, 0.5);

  ClipConfig clip_cfg;  // standard denominator, tau 0.1, lambda 0.5

  // negatives are sampled outside the differentiated graph; freeze them at
  // the base point so the loss is a smooth function of the parameters
  std::vector<int> neg_img_rows(n), neg_tab_rows(n);
  {
    Tensor z_img = model.img_proj.forward(nullptr, model.image_encoder.forward(nullptr, vols));
    Tensor z_tab = model.tab_proj.forward(nullptr, model.tabular_encoder.forward(nullptr, tabs));
    ClipResult base = clip_loss(z_img, z_tab, clip_cfg);
    Rng mine_rng(mix_seed(seed, 0x6d696e65ULL));
    MinedNegatives mined = mine_hard_negatives(base.similarity, clip_cfg.temperature, mine_rng);
    for (int j = 0; j < n; ++j) {
      if (j % 2 == 0) {
        neg_img_rows[j] = j;
        neg_tab_rows[j] = mined.tab_for_image[j];
      } else {
        neg_img_rows[j] = mined.img_for_tab[j];
        neg_tab_rows[j] = j;
      }
    }
  }

  auto gather = [](const Tensor& x, const std::vector<int>& rows) {
    int n2 = x.dim(0);
    std::vector<double> sel(rows.size() * static_cast<std::size_t>(n2), 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      sel[i * static_cast<std::size_t>(n2) + rows[i]] = 1.0;
    return matmul(Tensor({static_cast<int>(rows.size()), n2}, std::move(sel)), x);
  };

  auto forward = [&](Tape* tape) {
    Tensor z_img = model.img_proj.forward(tape, model.image_encoder.forward(tape, vols));
    Tensor z_tab = model.tab_proj.forward(tape, model.tabular_encoder.forward(tape, tabs));
    ClipResult clip = clip_loss(z_img, z_tab, clip_cfg);
    Tensor pos_cls = model.interaction.forward(tape, z_img, z_tab);
    Tensor neg_cls = model.interaction.forward(tape, gather(z_img, neg_img_rows),
                                               gather(z_tab, neg_tab_rows));
    Tensor itm = itm_loss(model.itm_head.forward(tape, pos_cls),
                          model.itm_head.forward(tape, neg_cls));
    return total_loss(clip.loss, itm);
  };

  ParamRefs params = model.parameters();
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Tensor loss = forward(&tape);
    tape.backward(loss);
    for (Param* p : params) analytic.push_back(tape.leaf_grad(p->value));
  }

  const double step = 1e-5;
  GradCheckCase result{"clip_itm_composite", 0.0, 0};
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i];
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      double orig = p->value[k];
      p->value.raw()[k] = orig + step;
      double up = forward(nullptr).item();
      p->value.raw()[k] = orig - step;
      double down = forward(nullptr).item();
      p->value.raw()[k] = orig;
      double numeric = (up - down) / (2.0 * step);
      result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic[i][k], numeric));
      ++result.cases;
    }
  }
  return result;
}

}  // namespace mmrisk
