#include "mmrisk/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mmrisk {

using nlohmann::json;

ConfigError::ConfigError(std::vector<std::string> issues)
    : std::runtime_error([&issues] {
        std::ostringstream os;
        os << "invalid configuration (" << issues.size() << " issue(s)):";
        for (const auto& s : issues) os << "\n  - " << s;
        return os.str();
      }()),
      issues_(std::move(issues)) {}

namespace {

// Tracks consumed keys of one JSON object and collects every problem
// instead of stopping at the first.
class Section {
 public:
  Section(const json* obj, std::string path, std::vector<std::string>* errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {}

  bool has(const std::string& key) const { return obj_ && obj_->contains(key); }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) return nullptr;
    const json& v = (*obj_)[key];
    if (!v.is_object()) {
      err(key, "must be an object");
      return nullptr;
    }
    return &v;
  }

  double num(const std::string& key, double fallback, double lo, double hi) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_number()) {
      err(key, "must be a number");
      return fallback;
    }
    double x = v.get<double>();
    if (x < lo || x > hi) {
      err(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
      return fallback;
    }
    return x;
  }

  int integer(const std::string& key, int fallback, int lo, int hi) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_number_integer()) {
      err(key, "must be an integer");
      return fallback;
    }
    long long x = v.get<long long>();
    if (x < lo || x > hi) {
      err(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
      return fallback;
    }
    return static_cast<int>(x);
  }

  std::uint64_t seed(const std::string& key, std::uint64_t fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      err(key, "must be a non-negative integer");
      return fallback;
    }
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_boolean()) {
      err(key, "must be a boolean");
      return fallback;
    }
    return v.get<bool>();
  }

  std::string str(const std::string& key, const std::string& fallback,
                  const std::set<std::string>& allowed = {}) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_string()) {
      err(key, "must be a string");
      return fallback;
    }
    std::string s = v.get<std::string>();
    if (!allowed.empty() && !allowed.count(s)) {
      std::string opts;
      for (const auto& a : allowed) opts += (opts.empty() ? "" : "|") + a;
      err(key, "must be one of " + opts);
      return fallback;
    }
    return s;
  }

  std::vector<double> num_array(const std::string& key, std::vector<double> fallback,
                                int exact_len = -1) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_array()) {
      err(key, "must be an array of numbers");
      return fallback;
    }
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) {
        err(key, "must contain only numbers");
        return fallback;
      }
      out.push_back(e.get<double>());
    }
    if (exact_len >= 0 && static_cast<int>(out.size()) != exact_len) {
      err(key, "must have exactly " + std::to_string(exact_len) + " entries");
      return fallback;
    }
    return out;
  }

  std::vector<int> int_array(const std::string& key, std::vector<int> fallback,
                             int exact_len = -1) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_array()) {
      err(key, "must be an array of integers");
      return fallback;
    }
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer()) {
        err(key, "must contain only integers");
        return fallback;
      }
      out.push_back(e.get<int>());
    }
    if (exact_len >= 0 && static_cast<int>(out.size()) != exact_len) {
      err(key, "must have exactly " + std::to_string(exact_len) + " entries");
      return fallback;
    }
    return out;
  }

  std::vector<std::string> str_array(const std::string& key, std::vector<std::string> fallback) {
    seen_.insert(key);
    if (!has(key)) return fallback;
    const json& v = (*obj_)[key];
    if (!v.is_array()) {
      err(key, "must be an array of strings");
      return fallback;
    }
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) {
        err(key, "must contain only strings");
        return fallback;
      }
      out.push_back(e.get<std::string>());
    }
    return out;
  }

  void finish() {
    if (!obj_) return;
    for (auto it = obj_->begin(); it != obj_->end(); ++it)
      if (!seen_.count(it.key())) err(it.key(), "unknown key");
  }

 private:
  void err(const std::string& key, const std::string& what) {
    errors_->push_back(path_ + "." + key + ": " + what);
  }
  const json* obj_;
  std::string path_;
  std::vector<std::string>* errors_;
  std::set<std::string> seen_;
};

AugmentationConfig parse_augment(Section& parent, const char* key, double default_image_rate,
                                 std::vector<std::string>* errors, const std::string& path) {
  AugmentationConfig a;
  a.image_augment_rate = default_image_rate;
  const json* obj = parent.sub(key);
  Section s(obj, path + "." + key, errors);
  a.image_augment_rate = s.num("image_augment_rate", a.image_augment_rate, 0.0, 1.0);
  a.corruption_rate = s.num("corruption_rate", a.corruption_rate, 0.0, 1.0);
  a.crop_min_fraction = s.num("crop_min_fraction", a.crop_min_fraction, 0.1, 1.0);
  a.max_rotation_deg = s.num("max_rotation_deg", a.max_rotation_deg, 0.0, 45.0);
  a.max_translation_fraction = s.num("max_translation_fraction", a.max_translation_fraction, 0.0, 0.5);
  std::vector<int> flips = s.int_array("flip_axes", {a.flip_axes[0], a.flip_axes[1], a.flip_axes[2]}, 3);
  for (int i = 0; i < 3; ++i) a.flip_axes[i] = flips[i] != 0;
  s.finish();
  return a;
}

}  // namespace

CliConfig parse_cli_config(const std::string& json_text) {
  std::vector<std::string> errors;
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("JSON parse error: ") + e.what()});
  }
  if (!doc.is_object()) throw ConfigError({"top level must be an object"});

  CliConfig cfg;
  Section root(&doc, "$", &errors);

  {
    Section s(root.sub("data"), "$.data", &errors);
    cfg.synthetic.seed = s.seed("seed", 42);
    cfg.pretrain_subjects = s.integer("pretrain_subjects", cfg.pretrain_subjects, 4, 1000000);
    cfg.downstream_subjects = s.integer("downstream_subjects", cfg.downstream_subjects, 8, 1000000);
    std::vector<int> dims = s.int_array("volume_dim", {24, 24, 24}, 3);
    for (int i = 0; i < 3; ++i) {
      if (dims[i] < 8) errors.push_back("$.data.volume_dim: dims must be >= 8 per axis");
      cfg.synthetic.volume_dim[i] = dims[i];
    }
    cfg.synthetic.latent_dim = s.integer("latent_dim", cfg.synthetic.latent_dim, 1, 64);
    cfg.synthetic.image_latents = s.integer("image_latents", cfg.synthetic.image_latents, 1, 12);
    cfg.synthetic.missing_rate = s.num("missing_rate", cfg.synthetic.missing_rate, 0.0, 0.99);
    cfg.synthetic.basis_amplitude = s.num("basis_amplitude", cfg.synthetic.basis_amplitude, 0.0, 100.0);
    cfg.synthetic.image_noise = s.num("image_noise", cfg.synthetic.image_noise, 0.0, 100.0);
    cfg.synthetic.tabular_noise = s.num("tabular_noise", cfg.synthetic.tabular_noise, 0.0, 100.0);
    cfg.synthetic.tabular_latent_scale =
        s.num_array("tabular_latent_scale", cfg.synthetic.tabular_latent_scale);
    cfg.synthetic.label_weights = s.num_array("label_weights", cfg.synthetic.label_weights);
    {
      Section b(s.sub("blob"), "$.data.blob", &errors);
      cfg.synthetic.blob_radius_min = b.num("radius_min", cfg.synthetic.blob_radius_min, 0.5, 64.0);
      cfg.synthetic.blob_radius_max = b.num("radius_max", cfg.synthetic.blob_radius_max, 0.5, 64.0);
      cfg.synthetic.blob_intensity_gain =
          b.num("intensity_gain", cfg.synthetic.blob_intensity_gain, 0.0, 100.0);
      cfg.synthetic.blob_center_jitter =
          b.num("center_jitter", cfg.synthetic.blob_center_jitter, 0.0, 16.0);
      b.finish();
    }
    if (cfg.synthetic.blob_radius_max < cfg.synthetic.blob_radius_min)
      errors.push_back("$.data.blob: radius_max must be >= radius_min");
    if (cfg.synthetic.image_latents > cfg.synthetic.latent_dim)
      errors.push_back("$.data.image_latents: must be <= latent_dim");
    s.finish();
  }

  {
    Section s(root.sub("model"), "$.model", &errors);
    cfg.model.trunk_widths = s.int_array("trunk_widths", cfg.model.trunk_widths);
    cfg.model.trunk_strides = s.int_array("trunk_strides", cfg.model.trunk_strides);
    if (cfg.model.trunk_widths.empty() ||
        cfg.model.trunk_widths.size() != cfg.model.trunk_strides.size())
      errors.push_back("$.model: trunk_widths and trunk_strides must be non-empty, equal length");
    cfg.model.image_embed_dim = s.integer("image_embed_dim", cfg.model.image_embed_dim, 1, 8192);
    cfg.model.tabular_hidden = s.int_array("tabular_hidden", cfg.model.tabular_hidden);
    cfg.model.tabular_embed_dim =
        s.integer("tabular_embed_dim", cfg.model.tabular_embed_dim, 1, 8192);
    cfg.model.projection_dim = s.integer("projection_dim", cfg.model.projection_dim, 1, 8192);
    cfg.model.projection_hidden =
        s.integer("projection_hidden", cfg.model.projection_hidden, 1, 8192);
    cfg.model.interaction_dim = s.integer("interaction_dim", cfg.model.interaction_dim, 2, 8192);
    cfg.model.interaction_heads = s.integer("interaction_heads", cfg.model.interaction_heads, 1, 64);
    cfg.model.interaction_layers =
        s.integer("interaction_layers", cfg.model.interaction_layers, 1, 16);
    cfg.model.interaction_ff_dim =
        s.integer("interaction_ff_dim", cfg.model.interaction_ff_dim, 1, 32768);
    cfg.model.dropout = s.num("dropout", cfg.model.dropout, 0.0, 0.95);
    if (cfg.model.interaction_dim % cfg.model.interaction_heads != 0)
      errors.push_back("$.model.interaction_dim: must be divisible by interaction_heads");
    s.finish();
  }

  {
    Section s(root.sub("pretrain"), "$.pretrain", &errors);
    cfg.pretrain.mode = RunMode::ClipItm;
    std::string mode = s.str("mode", "clip-itm", {"clip-itm", "clip", "simclr", "scarf"});
    try {
      cfg.pretrain.mode = parse_run_mode(mode);
    } catch (const std::invalid_argument& e) {
      errors.push_back(std::string("$.pretrain.mode: ") + e.what());
    }
    cfg.pretrain.epochs = s.integer("epochs", cfg.pretrain.epochs, 2, 10000);
    cfg.pretrain.batch_size = s.integer("batch_size", cfg.pretrain.batch_size, 2, 4096);
    cfg.pretrain.learning_rate = s.num("learning_rate", cfg.pretrain.learning_rate, 1e-8, 10.0);
    cfg.pretrain.warmup_epochs = s.integer("warmup_epochs", cfg.pretrain.warmup_epochs, 1, 10000);
    cfg.pretrain.val_fraction = s.num("val_fraction", cfg.pretrain.val_fraction, 0.01, 0.9);
    cfg.pretrain.clip.temperature = s.num("temperature", cfg.pretrain.clip.temperature, 1e-4, 100.0);
    cfg.pretrain.clip.lambda = s.num("lambda", cfg.pretrain.clip.lambda, 0.0, 1.0);
    std::string den = s.str("denominator_mode", "standard", {"standard", "literal"});
    cfg.pretrain.clip.denominator =
        den == "literal" ? ClipDenominator::Literal : ClipDenominator::Standard;
    std::string red = s.str("reduction", "mean", {"mean", "sum"});
    cfg.pretrain.clip.reduction = red == "sum" ? LossReduction::Sum : LossReduction::Mean;
    cfg.pretrain.weight_decay = s.num("weight_decay", cfg.pretrain.weight_decay, 0.0, 1.0);
    cfg.pretrain.seed = s.seed("seed", cfg.pretrain.seed);
    cfg.pretrain.augment = parse_augment(s, "augment", 0.95, &errors, "$.pretrain");
    if (cfg.pretrain.warmup_epochs >= cfg.pretrain.epochs)
      errors.push_back("$.pretrain.warmup_epochs: must be < epochs");
    s.finish();
  }

  {
    Section s(root.sub("finetune"), "$.finetune", &errors);
    std::string mode = s.str("mode", "clip-itm", {"clip-itm", "clip", "simclr", "scarf", "supervised"});
    try {
      cfg.finetune.mode = parse_run_mode(mode);
    } catch (const std::invalid_argument& e) {
      errors.push_back(std::string("$.finetune.mode: ") + e.what());
    }
    cfg.finetune.frozen = s.boolean("frozen", cfg.finetune.frozen);
    cfg.finetune.incorporate_other_modality =
        s.boolean("incorporate_other_modality", cfg.finetune.incorporate_other_modality);
    cfg.finetune.max_epochs = s.integer("max_epochs", cfg.finetune.max_epochs, 1, 10000);
    cfg.finetune.batch_size = s.integer("batch_size", cfg.finetune.batch_size, 2, 4096);
    cfg.finetune.learning_rate = s.num("learning_rate", cfg.finetune.learning_rate, 1e-8, 10.0);
    cfg.finetune.min_delta = s.num("min_delta", cfg.finetune.min_delta, 0.0, 1.0);
    cfg.finetune.patience = s.integer("patience", cfg.finetune.patience, 1, 10000);
    cfg.finetune.weight_decay = s.num("weight_decay", cfg.finetune.weight_decay, 0.0, 1.0);
    cfg.finetune.seed = s.seed("seed", cfg.finetune.seed);
    cfg.finetune.augment = parse_augment(s, "augment", 0.80, &errors, "$.finetune");
    {
      Section sp(s.sub("split"), "$.finetune.split", &errors);
      std::vector<double> ratios =
          sp.num_array("ratios", {cfg.finetune.split.ratios[0], cfg.finetune.split.ratios[1],
                                  cfg.finetune.split.ratios[2]},
                       3);
      for (int i = 0; i < 3; ++i) cfg.finetune.split.ratios[i] = ratios[i];
      cfg.finetune.split.stratify_features =
          sp.str_array("stratify", {"sex", "age"});
      cfg.finetune.split.quantile_bins = sp.integer("quantile_bins", 3, 2, 16);
      sp.finish();
      double sum = ratios[0] + ratios[1] + ratios[2];
      if (std::abs(sum - 1.0) > 1e-9)
        errors.push_back("$.finetune.split.ratios: must sum to 1");
    }
    cfg.finetune.split.seed = cfg.finetune.seed;
    s.finish();
  }

  {
    Section s(root.sub("eval"), "$.eval", &errors);
    cfg.gradcam_stage = s.integer("gradcam_stage", cfg.gradcam_stage, -1, 64);
    cfg.gradcam_subjects = s.integer("gradcam_subjects", cfg.gradcam_subjects, 1, 1024);
    cfg.probe_folds = s.integer("probe_folds", cfg.probe_folds, 2, 32);
    s.finish();
  }

  root.finish();
  if (!errors.empty()) throw ConfigError(std::move(errors));

  cfg.synthetic.subjects = cfg.pretrain_subjects;
  cfg.model.tabular_input_dim = TabularSchema::default_synthetic().one_hot_width();
  return cfg;
}

CliConfig load_cli_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError({"cannot read config file: " + path});
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_cli_config(text);
}

std::string resolved_config_json(const CliConfig& cfg) {
  json j;
  j["data"] = {
      {"seed", cfg.synthetic.seed},
      {"pretrain_subjects", cfg.pretrain_subjects},
      {"downstream_subjects", cfg.downstream_subjects},
      {"volume_dim", cfg.synthetic.volume_dim},
      {"latent_dim", cfg.synthetic.latent_dim},
      {"image_latents", cfg.synthetic.image_latents},
      {"missing_rate", cfg.synthetic.missing_rate},
      {"basis_amplitude", cfg.synthetic.basis_amplitude},
      {"image_noise", cfg.synthetic.image_noise},
      {"tabular_noise", cfg.synthetic.tabular_noise},
      {"tabular_latent_scale", cfg.synthetic.tabular_latent_scale},
      {"label_weights", cfg.synthetic.label_weights},
      {"blob",
       {{"radius_min", cfg.synthetic.blob_radius_min},
        {"radius_max", cfg.synthetic.blob_radius_max},
        {"intensity_gain", cfg.synthetic.blob_intensity_gain},
        {"center_jitter", cfg.synthetic.blob_center_jitter}}},
  };
  j["model"] = {
      {"trunk_widths", cfg.model.trunk_widths},
      {"trunk_strides", cfg.model.trunk_strides},
      {"image_embed_dim", cfg.model.image_embed_dim},
      {"tabular_hidden", cfg.model.tabular_hidden},
      {"tabular_embed_dim", cfg.model.tabular_embed_dim},
      {"projection_dim", cfg.model.projection_dim},
      {"projection_hidden", cfg.model.projection_hidden},
      {"interaction_dim", cfg.model.interaction_dim},
      {"interaction_heads", cfg.model.interaction_heads},
      {"interaction_layers", cfg.model.interaction_layers},
      {"interaction_ff_dim", cfg.model.interaction_ff_dim},
      {"dropout", cfg.model.dropout},
  };
  auto augment_json = [](const AugmentationConfig& a) {
    return json{{"image_augment_rate", a.image_augment_rate},
                {"corruption_rate", a.corruption_rate},
                {"crop_min_fraction", a.crop_min_fraction},
                {"max_rotation_deg", a.max_rotation_deg},
                {"max_translation_fraction", a.max_translation_fraction},
                {"flip_axes", std::vector<int>{a.flip_axes[0], a.flip_axes[1], a.flip_axes[2]}}};
  };
  j["pretrain"] = {
      {"mode", run_mode_name(cfg.pretrain.mode)},
      {"epochs", cfg.pretrain.epochs},
      {"batch_size", cfg.pretrain.batch_size},
      {"learning_rate", cfg.pretrain.learning_rate},
      {"warmup_epochs", cfg.pretrain.warmup_epochs},
      {"val_fraction", cfg.pretrain.val_fraction},
      {"temperature", cfg.pretrain.clip.temperature},
      {"lambda", cfg.pretrain.clip.lambda},
      {"denominator_mode",
       cfg.pretrain.clip.denominator == ClipDenominator::Literal ? "literal" : "standard"},
      {"reduction", cfg.pretrain.clip.reduction == LossReduction::Sum ? "sum" : "mean"},
      {"weight_decay", cfg.pretrain.weight_decay},
      {"seed", cfg.pretrain.seed},
      {"augment", augment_json(cfg.pretrain.augment)},
  };
  j["finetune"] = {
      {"mode", run_mode_name(cfg.finetune.mode)},
      {"frozen", cfg.finetune.frozen},
      {"incorporate_other_modality", cfg.finetune.incorporate_other_modality},
      {"max_epochs", cfg.finetune.max_epochs},
      {"batch_size", cfg.finetune.batch_size},
      {"learning_rate", cfg.finetune.learning_rate},
      {"min_delta", cfg.finetune.min_delta},
      {"patience", cfg.finetune.patience},
      {"weight_decay", cfg.finetune.weight_decay},
      {"seed", cfg.finetune.seed},
      {"augment", augment_json(cfg.finetune.augment)},
      {"split",
       {{"ratios", cfg.finetune.split.ratios},
        {"stratify", cfg.finetune.split.stratify_features},
        {"quantile_bins", cfg.finetune.split.quantile_bins}}},
  };
  j["eval"] = {
      {"gradcam_stage", cfg.gradcam_stage},
      {"gradcam_subjects", cfg.gradcam_subjects},
      {"probe_folds", cfg.probe_folds},
  };
  return j.dump(2) + "\n";
}

}  // namespace mmrisk
