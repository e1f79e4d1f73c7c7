#include "mmrisk/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace mmrisk {

RunMode parse_run_mode(const std::string& name) {
  if (name == "clip-itm") return RunMode::ClipItm;
  if (name == "clip") return RunMode::Clip;
  if (name == "simclr") return RunMode::SimClr;
  if (name == "scarf") return RunMode::Scarf;
  if (name == "supervised") return RunMode::Supervised;
  throw std::invalid_argument("unknown mode '" + name +
                              "' (expected clip-itm|clip|simclr|scarf|supervised)");
}

std::string run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::ClipItm: return "clip-itm";
    case RunMode::Clip: return "clip";
    case RunMode::SimClr: return "simclr";
    case RunMode::Scarf: return "scarf";
    case RunMode::Supervised: return "supervised";
  }
  return "?";
}

// ---- Adam --------------------------------------------------------------------

void Adam::step(const ParamRefs& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam: parameter/gradient count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param* p = params[i];
    if (!p->trainable) continue;
    auto& mom = moments_[p];
    if (mom.m.empty()) {
      mom.m.assign(p->value.size(), 0.0);
      mom.v.assign(p->value.size(), 0.0);
    }
    const double* g = grads[i].data();
    std::vector<double> next(p->value.size());
    const double* cur = p->value.data();
    for (std::size_t k = 0; k < next.size(); ++k) {
      mom.m[k] = cfg_.beta1 * mom.m[k] + (1.0 - cfg_.beta1) * g[k];
      mom.v[k] = cfg_.beta2 * mom.v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      double mhat = mom.m[k] / bc1;
      double vhat = mom.v[k] / bc2;
      double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
      next[k] = cur[k] - lr * upd - lr * cfg_.weight_decay * cur[k];
    }
    p->value = Tensor(p->value.shape(), std::move(next));
  }
}

void Adam::step(const ParamRefs& params, Tape& tape, double lr) {
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Param* p : params) grads.push_back(tape.leaf_grad(p->value));
  step(params, grads, lr);
}

// ---- schedule / stopping ---------------------------------------------------------

double lr_at(int epoch, const LrSchedule& s) {
  if (s.warmup_epochs <= 0 || s.warmup_epochs >= s.total_epochs)
    throw std::invalid_argument("lr schedule requires 0 < warmup < total epochs");
  if (epoch < 0 || epoch >= s.total_epochs)
    throw std::invalid_argument("lr_at: epoch out of range");
  if (epoch < s.warmup_epochs)
    return s.base * static_cast<double>(epoch + 1) / static_cast<double>(s.warmup_epochs);
  constexpr double pi = 3.14159265358979323846;
  double progress = static_cast<double>(epoch - s.warmup_epochs) /
                    static_cast<double>(s.total_epochs - s.warmup_epochs);
  return s.base * 0.5 * (1.0 + std::cos(pi * progress));
}

bool EarlyStopping::update(double val_loss) {
  if (best_ - val_loss > min_delta) {
    best_ = val_loss;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience;
}

// ---- checkpoint container -----------------------------------------------------------

namespace {

std::uint32_t crc32_bytes(const unsigned char* data, std::size_t n) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const unsigned char* p;
  std::size_t left;
  void need(std::size_t n) const {
    if (left < n) throw std::runtime_error("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors,
                     CheckpointDtype dtype) {
  std::string buf;
  buf.reserve(1 << 20);
  buf.append("SSMM");
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    put_u32(buf, static_cast<std::uint32_t>(nt.name.size()));
    buf.append(nt.name);
    put_u32(buf, static_cast<std::uint32_t>(dtype));
    put_u32(buf, static_cast<std::uint32_t>(nt.value.rank()));
    for (int a = 0; a < nt.value.rank(); ++a)
      put_u64(buf, static_cast<std::uint64_t>(nt.value.dim(a)));
    if (dtype == CheckpointDtype::F64) {
      for (std::size_t i = 0; i < nt.value.size(); ++i) {
        std::uint64_t bits;
        double v = nt.value[i];
        std::memcpy(&bits, &v, 8);
        put_u64(buf, bits);
      }
    } else {
      for (std::size_t i = 0; i < nt.value.size(); ++i) {
        float f = static_cast<float>(nt.value[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(buf, bits);
      }
    }
  }
  std::uint32_t crc = crc32_bytes(reinterpret_cast<const unsigned char*>(buf.data()), buf.size());
  put_u32(buf, crc);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw std::runtime_error("checkpoint too small: " + path);
  const unsigned char* raw = reinterpret_cast<const unsigned char*>(buf.data());
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(raw[buf.size() - 4 + i]) << (8 * i);
  if (crc32_bytes(raw, buf.size() - 4) != stored)
    throw std::runtime_error("checkpoint CRC mismatch: " + path);

  Reader r{raw, buf.size() - 4};
  if (r.bytes(4) != "SSMM") throw std::runtime_error("checkpoint bad magic (expected SSMM)");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    std::uint32_t tag = r.u32();
    if (tag != 0 && tag != 1)
      throw std::runtime_error("checkpoint version " + std::to_string(version) +
                               ": unknown dtype tag " + std::to_string(tag));
    std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t a = 0; a < rank; ++a) shape[a] = static_cast<int>(r.u64());
    std::size_t n = numel(shape);
    std::vector<double> vals(n);
    if (tag == 1) {
      for (std::size_t k = 0; k < n; ++k) {
        std::uint64_t bits = r.u64();
        double v;
        std::memcpy(&v, &bits, 8);
        vals[k] = v;
      }
    } else {
      for (std::size_t k = 0; k < n; ++k) {
        std::uint32_t bits = r.u32();
        float fv;
        std::memcpy(&fv, &bits, 4);
        vals[k] = static_cast<double>(fv);
      }
    }
    out.push_back(NamedTensor{std::move(name), Tensor(std::move(shape), std::move(vals))});
  }
  return out;
}

std::vector<NamedTensor> snapshot_params(const ParamRefs& params) {
  std::vector<NamedTensor> out;
  out.reserve(params.size());
  for (const Param* p : params) out.push_back(NamedTensor{p->name, p->value.clone()});
  return out;
}

int load_params(const std::vector<NamedTensor>& src, const ParamRefs& dst) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& nt : src) {
    if (!by_name.emplace(nt.name, &nt).second)
      throw std::runtime_error("checkpoint has duplicate tensor '" + nt.name + "'");
  }
  int loaded = 0;
  for (Param* p : dst) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) continue;
    if (it->second->value.shape() != p->value.shape())
      throw std::runtime_error("checkpoint/config architecture mismatch for '" + p->name +
                               "': " + shape_str(it->second->value.shape()) + " vs " +
                               shape_str(p->value.shape()));
    p->value = it->second->value.clone();
    ++loaded;
  }
  return loaded;
}

void require_prefix_loaded(const std::vector<NamedTensor>& src, const ParamRefs& dst,
                           const std::string& prefix) {
  std::map<std::string, bool> names;
  for (const auto& nt : src) names[nt.name] = true;
  for (const Param* p : dst) {
    if (p->name.rfind(prefix, 0) != 0) continue;
    if (!names.count(p->name))
      throw std::runtime_error("checkpoint is missing required parameter '" + p->name + "'");
  }
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "epoch,train_loss,val_loss,lr\n";
  char buf[128];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", h.epoch, h.train_loss, h.val_loss,
                  h.lr);
    f << buf;
  }
}

// ---- preprocessing ------------------------------------------------------------------

FittedPreprocess fit_preprocess(const Cohort& cohort, const std::vector<int>& train_indices) {
  if (train_indices.empty()) throw std::invalid_argument("fit_preprocess: empty training split");
  std::vector<std::vector<double>> train_rows;
  train_rows.reserve(train_indices.size());
  for (int i : train_indices) train_rows.push_back(cohort.tabular[i]);

  FittedPreprocess out;
  out.zstats = fit_zscore(train_rows, cohort.schema);
  auto all_norm = apply_zscore(cohort.tabular, cohort.schema, out.zstats);
  std::vector<std::vector<double>> train_norm;
  train_norm.reserve(train_indices.size());
  for (int i : train_indices) train_norm.push_back(all_norm[i]);
  out.imputer.fit(train_norm, cohort.schema);
  out.all_rows = out.imputer.apply(all_norm);
  std::vector<std::vector<double>> train_imputed;
  train_imputed.reserve(train_indices.size());
  for (int i : train_indices) train_imputed.push_back(out.all_rows[i]);
  out.marginals = fit_marginals(train_imputed);
  return out;
}

SplitIndices pretrain_partition(const PretrainConfig& cfg, int subjects) {
  if (cfg.val_fraction <= 0.0 || cfg.val_fraction >= 1.0)
    throw std::invalid_argument("pretrain val_fraction must be in (0,1)");
  std::vector<int> order(subjects);
  for (int i = 0; i < subjects; ++i) order[i] = i;
  Rng rng(mix_seed(cfg.seed, 0x70726573ULL));
  for (int i = subjects - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);
  int n_val = std::max(1, static_cast<int>(std::llround(cfg.val_fraction * subjects)));
  if (n_val >= subjects) n_val = subjects - 1;
  SplitIndices out;
  out.val.assign(order.begin(), order.begin() + n_val);
  out.train.assign(order.begin() + n_val, order.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

// ---- batch assembly -------------------------------------------------------------------

namespace {

// Stacks per-subject volumes into [N,1,D,H,W], augmenting when rng given.
Tensor make_volume_batch(const Cohort& cohort, const std::vector<int>& idx,
                         const AugmentationConfig* aug, Rng* rng) {
  const Tensor& first = cohort.volumes[idx[0]];
  const int D = first.dim(0), H = first.dim(1), W = first.dim(2);
  const std::size_t per = first.size();
  std::vector<double> out(idx.size() * per);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Tensor v = cohort.volumes[idx[i]];
    if (aug && rng) v = augment_image(v, *aug, *rng);
    std::copy(v.data(), v.data() + per, out.data() + i * per);
  }
  return Tensor({static_cast<int>(idx.size()), 1, D, H, W}, std::move(out));
}

Tensor make_tabular_batch(const std::vector<std::vector<double>>& rows, const TabularSchema& schema,
                          const std::vector<int>& idx, const Marginals* marginals, double rate,
                          Rng* rng) {
  std::vector<std::vector<double>> selected;
  selected.reserve(idx.size());
  for (int i : idx) {
    if (marginals && rng && rate > 0.0)
      selected.push_back(corrupt_tabular(rows[i], *marginals, rate, *rng));
    else
      selected.push_back(rows[i]);
  }
  return one_hot(selected, schema);
}

Tensor label_column(const Cohort& cohort, const std::vector<int>& idx) {
  std::vector<double> vals(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) vals[i] = cohort.labels[idx[i]];
  return Tensor({static_cast<int>(idx.size()), 1}, std::move(vals));
}

// Row gather as multiplication by a constant selection matrix, keeping the
// result differentiable through the source rows.
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
  int n = x.dim(0);
  std::vector<double> sel(rows.size() * static_cast<std::size_t>(n), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    sel[i * static_cast<std::size_t>(n) + rows[i]] = 1.0;
  return matmul(Tensor({static_cast<int>(rows.size()), n}, std::move(sel)), x);
}

struct PretrainStreams {
  Rng aug;
  Rng mine;
  Rng drop;
};

// One forward pass of the selected self-supervised objective over a batch.
Tensor pretrain_batch_loss(PretrainModel& model, Tape* tape, const Cohort& cohort,
                           const FittedPreprocess& prep, const std::vector<int>& idx,
                           const PretrainConfig& cfg, PretrainStreams& streams, bool augmented) {
  const AugmentationConfig* aug = augmented ? &cfg.augment : nullptr;
  switch (cfg.mode) {
    case RunMode::Clip:
    case RunMode::ClipItm: {
      Tensor vols = make_volume_batch(cohort, idx, aug, aug ? &streams.aug : nullptr);
      Tensor tabs = make_tabular_batch(prep.all_rows, cohort.schema, idx,
                                       aug ? &prep.marginals : nullptr,
                                       aug ? cfg.augment.corruption_rate : 0.0,
                                       aug ? &streams.aug : nullptr);
      Tensor img_emb = model.image_encoder.forward(tape, vols);
      Tensor tab_emb = model.tabular_encoder.forward(tape, tabs, augmented ? &streams.drop : nullptr);
      Tensor z_img = model.img_proj.forward(tape, img_emb);
      Tensor z_tab = model.tab_proj.forward(tape, tab_emb);
      ClipResult clip = clip_loss(z_img, z_tab, cfg.clip);
      if (cfg.mode == RunMode::Clip) return clip.loss;

      MinedNegatives mined =
          mine_hard_negatives(clip.similarity, cfg.clip.temperature, streams.mine);
      const int n = static_cast<int>(idx.size());
      // one mined pair per positive pair: alternate the mined side by anchor
      std::vector<int> neg_img_rows(n), neg_tab_rows(n);
      for (int j = 0; j < n; ++j) {
        if (j % 2 == 0) {
          neg_img_rows[j] = j;
          neg_tab_rows[j] = mined.tab_for_image[j];
        } else {
          neg_img_rows[j] = mined.img_for_tab[j];
          neg_tab_rows[j] = j;
        }
      }
      Tensor pos_cls = model.interaction.forward(tape, z_img, z_tab);
      Tensor neg_cls = model.interaction.forward(tape, gather_rows(z_img, neg_img_rows),
                                                 gather_rows(z_tab, neg_tab_rows));
      Tensor pos_logits = model.itm_head.forward(tape, pos_cls);
      Tensor neg_logits = model.itm_head.forward(tape, neg_cls);
      Tensor itm = itm_loss(pos_logits, neg_logits);
      return total_loss(clip.loss, itm);
    }
    case RunMode::SimClr: {
      // two independently augmented views of the volumes
      Tensor v1 = make_volume_batch(cohort, idx, &cfg.augment, &streams.aug);
      Tensor v2 = make_volume_batch(cohort, idx, &cfg.augment, &streams.aug);
      Tensor z1 = model.img_proj.forward(tape, model.image_encoder.forward(tape, v1));
      Tensor z2 = model.img_proj.forward(tape, model.image_encoder.forward(tape, v2));
      return ntxent_loss(z1, z2, cfg.clip.temperature);
    }
    case RunMode::Scarf: {
      // original row versus corrupted row
      Tensor t1 = make_tabular_batch(prep.all_rows, cohort.schema, idx, nullptr, 0.0, nullptr);
      Tensor t2 = make_tabular_batch(prep.all_rows, cohort.schema, idx, &prep.marginals,
                                     cfg.augment.corruption_rate, &streams.aug);
      Tensor z1 = model.tab_proj.forward(tape, model.tabular_encoder.forward(tape, t1));
      Tensor z2 = model.tab_proj.forward(tape, model.tabular_encoder.forward(tape, t2));
      return ntxent_loss(z1, z2, cfg.clip.temperature);
    }
    case RunMode::Supervised:
      throw std::invalid_argument("supervised mode has no pretraining stage");
  }
  throw std::logic_error("unreachable");
}

ParamRefs pretrain_mode_params(PretrainModel& model, RunMode mode) {
  ParamRefs out;
  switch (mode) {
    case RunMode::Clip:
      model.image_encoder.collect(out);
      model.tabular_encoder.collect(out);
      model.img_proj.collect(out);
      model.tab_proj.collect(out);
      break;
    case RunMode::ClipItm:
      model.image_encoder.collect(out);
      model.tabular_encoder.collect(out);
      model.img_proj.collect(out);
      model.tab_proj.collect(out);
      model.interaction.collect(out);
      model.itm_head.collect(out);
      break;
    case RunMode::SimClr:
      model.image_encoder.collect(out);
      model.img_proj.collect(out);
      break;
    case RunMode::Scarf:
      model.tabular_encoder.collect(out);
      model.tab_proj.collect(out);
      break;
    case RunMode::Supervised:
      throw std::invalid_argument("supervised mode has no pretraining stage");
  }
  return out;
}

}  // namespace

// ---- pretrain ----------------------------------------------------------------------------

PretrainResult pretrain(const ModelConfig& model_cfg, const PretrainConfig& cfg,
                        const Cohort& cohort, const EpochCallback& on_epoch) {
  if (cfg.mode == RunMode::Supervised)
    throw std::invalid_argument("supervised mode has no pretraining stage");
  if (cohort.size() < 4) throw std::invalid_argument("pretrain: cohort too small");
  if (cfg.batch_size < 2) throw std::invalid_argument("pretrain: batch size must be >= 2");

  SplitIndices part = pretrain_partition(cfg, static_cast<int>(cohort.size()));
  FittedPreprocess prep = fit_preprocess(cohort, part.train);

  PretrainModel model(model_cfg, cfg.seed);
  ParamRefs params = pretrain_mode_params(model, cfg.mode);

  Adam adam(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  LrSchedule schedule{cfg.learning_rate, cfg.warmup_epochs, cfg.epochs};

  PretrainStreams streams{Rng(mix_seed(cfg.seed, 11)), Rng(mix_seed(cfg.seed, 12)),
                          Rng(mix_seed(cfg.seed, 14))};
  Rng rng_batches(mix_seed(cfg.seed, 13));

  PretrainResult result;
  double best_val = 1e300;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at(epoch, schedule);
    auto batches = shuffled_batches(part.train, cfg.batch_size, rng_batches);
    double train_sum = 0.0;
    std::size_t train_count = 0;
    for (const auto& batch : batches) {
      Tape tape;
      Tensor loss = pretrain_batch_loss(model, &tape, cohort, prep, batch, cfg, streams, true);
      tape.backward(loss);
      adam.step(params, tape, lr);
      train_sum += loss.item();
      ++train_count;
    }

    // fixed validation stream: same batches and same views every epoch
    double val_sum = 0.0;
    std::size_t val_count = 0;
    {
      Rng val_batch_rng(mix_seed(cfg.seed, 101));
      PretrainStreams val_streams{Rng(mix_seed(cfg.seed, 102)), Rng(mix_seed(cfg.seed, 103)),
                                  Rng(mix_seed(cfg.seed, 104))};
      bool augmented_val = cfg.mode == RunMode::SimClr || cfg.mode == RunMode::Scarf;
      auto val_batches = shuffled_batches(part.val, cfg.batch_size, val_batch_rng);
      for (const auto& batch : val_batches) {
        Tensor loss =
            pretrain_batch_loss(model, nullptr, cohort, prep, batch, cfg, val_streams, augmented_val);
        val_sum += loss.item();
        ++val_count;
      }
    }
    double train_loss = train_count ? train_sum / train_count : 0.0;
    double val_loss = val_count ? val_sum / val_count : 0.0;
    result.history.push_back(EpochRecord{epoch, train_loss, val_loss, lr});
    if (on_epoch) on_epoch(result.history.back());
    if (val_loss < best_val) {
      best_val = val_loss;
      result.best_epoch = epoch;
      result.best_params = snapshot_params(model.parameters());
    }
  }
  return result;
}

// ---- finetune ----------------------------------------------------------------------------

HeadKind head_kind_for(RunMode mode, bool incorporate_other_modality) {
  switch (mode) {
    case RunMode::ClipItm:
    case RunMode::Supervised:
      return HeadKind::Ensemble;
    case RunMode::Clip:
      return HeadKind::FusedConcat;
    case RunMode::SimClr:
      return incorporate_other_modality ? HeadKind::FusedConcat : HeadKind::ImageOnly;
    case RunMode::Scarf:
      return incorporate_other_modality ? HeadKind::FusedConcat : HeadKind::TabularOnly;
  }
  throw std::logic_error("unreachable");
}

namespace {

// Loads the pretrained components for the given mode and marks them frozen
// when requested; freshly initialized parts always stay trainable.
void load_pretrained_into(DownstreamModel& model, const FinetuneConfig& cfg,
                          const std::vector<NamedTensor>& ckpt) {
  if (cfg.mode == RunMode::Supervised) {
    if (!ckpt.empty())
      throw std::invalid_argument("supervised fine-tuning does not take a checkpoint");
    return;
  }
  if (ckpt.empty()) throw std::invalid_argument("fine-tuning requires a pretraining checkpoint");
  ParamRefs all = model.parameters();
  load_params(ckpt, all);
  std::vector<std::string> prefixes;
  switch (cfg.mode) {
    case RunMode::ClipItm:
      prefixes = {"image_encoder.", "tabular_encoder.", "img_proj.", "tab_proj.", "interaction."};
      break;
    case RunMode::Clip:
      prefixes = {"image_encoder.", "tabular_encoder."};
      break;
    case RunMode::SimClr:
      prefixes = {"image_encoder."};
      break;
    case RunMode::Scarf:
      prefixes = {"tabular_encoder."};
      break;
    default:
      break;
  }
  for (const auto& p : prefixes) require_prefix_loaded(ckpt, all, p);
  if (cfg.frozen) {
    for (Param* p : all) {
      for (const auto& prefix : prefixes)
        if (p->name.rfind(prefix, 0) == 0) {
          p->trainable = false;
          break;
        }
    }
  }
}

Tensor downstream_batch_loss(const DownstreamModel& model, Tape* tape, const Cohort& cohort,
                             const FittedPreprocess& prep, const std::vector<int>& idx,
                             const FinetuneConfig& cfg, Rng* aug_rng, Rng* drop_rng) {
  Tensor vols, tabs;
  if (model.head_kind != HeadKind::TabularOnly)
    vols = make_volume_batch(cohort, idx, aug_rng ? &cfg.augment : nullptr, aug_rng);
  if (model.head_kind != HeadKind::ImageOnly)
    tabs = make_tabular_batch(prep.all_rows, cohort.schema, idx,
                              aug_rng ? &prep.marginals : nullptr,
                              aug_rng ? cfg.augment.corruption_rate : 0.0, aug_rng);
  Tensor logits = model.forward(tape, vols, tabs, drop_rng);
  return mean_all(bce_with_logits(logits, label_column(cohort, idx)));
}

}  // namespace

std::vector<double> score_subjects(const DownstreamModel& model, const Cohort& cohort,
                                   const std::vector<std::vector<double>>& processed_rows,
                                   const std::vector<int>& indices, int batch_size) {
  std::vector<double> scores;
  scores.reserve(indices.size());
  for (std::size_t at = 0; at < indices.size(); at += batch_size) {
    std::vector<int> chunk(indices.begin() + at,
                           indices.begin() + std::min(indices.size(), at + batch_size));
    Tensor vols, tabs;
    if (model.head_kind != HeadKind::TabularOnly)
      vols = make_volume_batch(cohort, chunk, nullptr, nullptr);
    if (model.head_kind != HeadKind::ImageOnly)
      tabs = make_tabular_batch(processed_rows, cohort.schema, chunk, nullptr, 0.0, nullptr);
    Tensor logits = model.forward(nullptr, vols, tabs);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      double x = logits[i];
      scores.push_back(x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)));
    }
  }
  return scores;
}

FinetuneResult finetune(const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                        const std::vector<NamedTensor>& pretrain_ckpt, const Cohort& cohort,
                        const EpochCallback& on_epoch) {
  if (cfg.batch_size < 2 || cfg.batch_size % 2 != 0)
    throw std::invalid_argument("finetune: batch size must be even (balanced batches)");

  FinetuneResult result;
  result.split = stratified_split(cohort, cfg.split);
  if (result.split.train.empty() || result.split.val.empty())
    throw std::invalid_argument("finetune: split produced an empty train or val set");
  FittedPreprocess prep = fit_preprocess(cohort, result.split.train);

  DownstreamModel model(model_cfg, head_kind_for(cfg.mode, cfg.incorporate_other_modality),
                        cfg.seed);
  load_pretrained_into(model, cfg, pretrain_ckpt);
  ParamRefs params = model.parameters();

  Adam adam(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  EarlyStopping stopper;
  stopper.min_delta = cfg.min_delta;
  stopper.patience = cfg.patience;

  Rng rng_batches(mix_seed(cfg.seed, 21));
  Rng rng_aug(mix_seed(cfg.seed, 22));
  Rng rng_drop(mix_seed(cfg.seed, 23));

  double best_val = 1e300;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    auto batches =
        balanced_batches(result.split.train, cohort.labels, cfg.batch_size, rng_batches);
    double train_sum = 0.0;
    std::size_t train_count = 0;
    for (const auto& batch : batches) {
      Tape tape;
      Tensor loss = downstream_batch_loss(model, &tape, cohort, prep, batch, cfg, &rng_aug,
                                          model.cfg.dropout > 0 ? &rng_drop : nullptr);
      tape.backward(loss);
      adam.step(params, tape, cfg.learning_rate);
      train_sum += loss.item();
      ++train_count;
    }

    // clean balanced validation batches, identical every epoch
    double val_sum = 0.0;
    std::size_t val_count = 0;
    {
      Rng val_rng(mix_seed(cfg.seed, 201));
      auto val_batches = balanced_batches(result.split.val, cohort.labels, cfg.batch_size, val_rng);
      for (const auto& batch : val_batches) {
        Tensor loss =
            downstream_batch_loss(model, nullptr, cohort, prep, batch, cfg, nullptr, nullptr);
        val_sum += loss.item();
        ++val_count;
      }
    }
    double train_loss = train_count ? train_sum / train_count : 0.0;
    double val_loss = val_count ? val_sum / val_count : 0.0;
    result.history.push_back(EpochRecord{epoch, train_loss, val_loss, cfg.learning_rate});
    if (on_epoch) on_epoch(result.history.back());
    if (val_loss < best_val) {
      best_val = val_loss;
      result.best_epoch = epoch;
      result.best_params = snapshot_params(params);
    }
    if (stopper.update(val_loss)) break;
  }

  // restore the best snapshot before reporting validation scores
  load_params(result.best_params, params);
  std::vector<double> val_scores = score_subjects(model, cohort, prep.all_rows, result.split.val);
  std::vector<int> val_labels;
  for (int i : result.split.val) val_labels.push_back(cohort.labels[i]);
  result.val_roc = roc_auc(val_scores, val_labels);
  result.youden_threshold = youden_point(result.val_roc.curve);
  return result;
}

DownstreamModel build_downstream(const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                                 const std::vector<NamedTensor>& finetuned_ckpt) {
  DownstreamModel model(model_cfg, head_kind_for(cfg.mode, cfg.incorporate_other_modality),
                        cfg.seed);
  ParamRefs params = model.parameters();
  int loaded = load_params(finetuned_ckpt, params);
  if (loaded != static_cast<int>(params.size()))
    throw std::runtime_error("finetuned checkpoint does not cover the downstream model (" +
                             std::to_string(loaded) + "/" + std::to_string(params.size()) +
                             " parameters)");
  return model;
}

EvaluateResult evaluate_downstream(const ModelConfig& model_cfg, const FinetuneConfig& cfg,
                                   const std::vector<NamedTensor>& finetuned_ckpt,
                                   const Cohort& cohort) {
  SplitIndices split = stratified_split(cohort, cfg.split);
  FittedPreprocess prep = fit_preprocess(cohort, split.train);
  DownstreamModel model = build_downstream(model_cfg, cfg, finetuned_ckpt);

  auto labels_of = [&](const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(cohort.labels[i]);
    return out;
  };

  EvaluateResult out;
  std::vector<double> val_scores = score_subjects(model, cohort, prep.all_rows, split.val);
  RocResult val_roc = roc_auc(val_scores, labels_of(split.val));
  double threshold = youden_point(val_roc.curve);
  out.val_report = classification_metrics(val_scores, labels_of(split.val), threshold);
  out.val_report.auc = val_roc.auc;

  if (split.test.empty()) throw std::invalid_argument("evaluate: empty test split");
  std::vector<double> test_scores = score_subjects(model, cohort, prep.all_rows, split.test);
  RocResult test_roc = roc_auc(test_scores, labels_of(split.test));
  out.test_report = classification_metrics(test_scores, labels_of(split.test), threshold);
  out.test_report.auc = test_roc.auc;
  return out;
}

EncodedSplit encode_pretrain_split(const ModelConfig& model_cfg, const PretrainConfig& cfg,
                                   const std::vector<NamedTensor>& ckpt, const Cohort& cohort,
                                   bool validation_split) {
  SplitIndices part = pretrain_partition(cfg, static_cast<int>(cohort.size()));
  FittedPreprocess prep = fit_preprocess(cohort, part.train);
  PretrainModel model(model_cfg, cfg.seed);
  {
    ParamRefs params = model.parameters();
    load_params(ckpt, params);
  }
  const std::vector<int>& idx = validation_split ? part.val : part.train;
  if (idx.empty()) throw std::invalid_argument("encode_pretrain_split: empty split");

  EncodedSplit out;
  std::vector<Tensor> img_e, tab_e, img_z, tab_z;
  const int chunk_size = 16;
  for (std::size_t at = 0; at < idx.size(); at += chunk_size) {
    std::vector<int> chunk(idx.begin() + at, idx.begin() + std::min(idx.size(), at + chunk_size));
    Tensor vols = make_volume_batch(cohort, chunk, nullptr, nullptr);
    Tensor tabs = make_tabular_batch(prep.all_rows, cohort.schema, chunk, nullptr, 0.0, nullptr);
    Tensor ie = model.image_encoder.forward(nullptr, vols);
    Tensor te = model.tabular_encoder.forward(nullptr, tabs);
    img_e.push_back(ie);
    tab_e.push_back(te);
    img_z.push_back(model.img_proj.forward(nullptr, ie));
    tab_z.push_back(model.tab_proj.forward(nullptr, te));
  }
  for (int i : idx) out.ids.push_back(cohort.ids[i]);
  out.img_embeddings = concat(img_e, 0);
  out.tab_embeddings = concat(tab_e, 0);
  out.img_projections = concat(img_z, 0);
  out.tab_projections = concat(tab_z, 0);
  return out;
}

}  // namespace mmrisk
