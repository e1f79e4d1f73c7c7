#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mmrisk/config.hpp"
#include "mmrisk/explain.hpp"
#include "mmrisk/gradcheck.hpp"
#include "mmrisk/train.hpp"

namespace fs = std::filesystem;
using namespace mmrisk;

namespace {

// Timestamps live only in the log file so artifact bytes stay reproducible.
class RunLog {
 public:
  explicit RunLog(const std::string& out_dir) {
    fs::create_directories(out_dir);
    file_.open(fs::path(out_dir) / "run.log", std::ios::app);
  }

  void info(const std::string& msg) { line("INFO", msg); }
  void error(const std::string& msg) { line("ERROR", msg); }

 private:
  void line(const char* level, const std::string& msg) {
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    if (file_) file_ << stamp << " " << level << " " << msg << "\n" << std::flush;
    std::cout << msg << "\n";
  }
  std::ofstream file_;
};

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::string checkpoint_path;
  std::string mode;
  long long seed = -1;
  bool frozen = false;
  bool trainable = false;
};

CliConfig load_config(const CommonArgs& args) {
  if (args.config_path.empty()) throw ConfigError({"--config is required"});
  CliConfig cfg = load_cli_config(args.config_path);
  if (!args.mode.empty()) {
    RunMode m = parse_run_mode(args.mode);
    if (m != RunMode::Supervised) cfg.pretrain.mode = m;
    cfg.finetune.mode = m;
  }
  if (args.frozen && args.trainable)
    throw ConfigError({"--frozen and --trainable are mutually exclusive"});
  if (args.frozen) cfg.finetune.frozen = true;
  if (args.trainable) cfg.finetune.frozen = false;
  return cfg;
}

void echo_config(const CliConfig& cfg, const std::string& out_dir) {
  std::ofstream f(fs::path(out_dir) / "resolved_config.json");
  if (!f) throw std::runtime_error("cannot write resolved_config.json");
  f << resolved_config_json(cfg);
}

Cohort load_data(const CommonArgs& args) {
  if (args.data_dir.empty()) throw ConfigError({"--data is required"});
  return load_cohort(args.data_dir, TabularSchema::default_synthetic());
}

std::vector<NamedTensor> load_ckpt(const CommonArgs& args) {
  if (args.checkpoint_path.empty()) throw ConfigError({"--checkpoint is required"});
  return load_checkpoint(args.checkpoint_path);
}

int cmd_gen_data(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.synthetic.seed = static_cast<std::uint64_t>(args.seed);
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);

  SyntheticConfig pre = cfg.synthetic;
  pre.subjects = cfg.pretrain_subjects;
  log.info("generating pretraining cohort: " + std::to_string(pre.subjects) + " subjects");
  save_cohort(generate_synthetic(pre), (fs::path(args.out_dir) / "pretrain").string());

  SyntheticConfig down = cfg.synthetic;
  down.subjects = cfg.downstream_subjects;
  down.seed = mix_seed(cfg.synthetic.seed, 0x646f776eULL);
  log.info("generating downstream cohort: " + std::to_string(down.subjects) + " subjects");
  save_cohort(generate_synthetic(down), (fs::path(args.out_dir) / "downstream").string());
  log.info("done");
  return 0;
}

int cmd_preprocess(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);
  Cohort cohort = load_data(args);
  std::vector<int> all(cohort.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  FittedPreprocess prep = fit_preprocess(cohort, all);
  Tensor matrix = one_hot(prep.all_rows, cohort.schema);
  std::ofstream f(fs::path(args.out_dir) / "processed.csv");
  if (!f) throw std::runtime_error("cannot write processed.csv");
  f << "subject_id";
  for (int k = 0; k < matrix.dim(1); ++k) f << ",x" << k;
  f << "\n";
  char buf[48];
  for (int i = 0; i < matrix.dim(0); ++i) {
    f << cohort.ids[i];
    for (int k = 0; k < matrix.dim(1); ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g", matrix[static_cast<std::size_t>(i) * matrix.dim(1) + k]);
      f << "," << buf;
    }
    f << "\n";
  }
  log.info("wrote processed matrix for " + std::to_string(cohort.size()) + " subjects");
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.pretrain.seed = static_cast<std::uint64_t>(args.seed);
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);
  Cohort cohort = load_data(args);
  log.info("pretraining mode=" + run_mode_name(cfg.pretrain.mode) + " on " +
           std::to_string(cohort.size()) + " subjects");
  PretrainResult res = pretrain(cfg.model, cfg.pretrain, cohort, [&log](const EpochRecord& e) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %d train_loss=%.6f val_loss=%.6f lr=%.3g", e.epoch,
                  e.train_loss, e.val_loss, e.lr);
    log.info(buf);
  });
  save_checkpoint((fs::path(args.out_dir) / "checkpoint.ssmm").string(), res.best_params);
  write_history_csv((fs::path(args.out_dir) / "history.csv").string(), res.history);
  log.info("best epoch " + std::to_string(res.best_epoch) + "; checkpoint.ssmm written");
  return 0;
}

int cmd_finetune(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  if (args.seed >= 0) {
    cfg.finetune.seed = static_cast<std::uint64_t>(args.seed);
    cfg.finetune.split.seed = cfg.finetune.seed;
  }
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);
  Cohort cohort = load_data(args);
  std::vector<NamedTensor> ckpt;
  if (cfg.finetune.mode != RunMode::Supervised) ckpt = load_ckpt(args);
  log.info("fine-tuning mode=" + run_mode_name(cfg.finetune.mode) +
           (cfg.finetune.frozen ? " (frozen)" : " (trainable)"));
  FinetuneResult res = finetune(cfg.model, cfg.finetune, ckpt, cohort,
                                [&log](const EpochRecord& e) {
                                  char buf[160];
                                  std::snprintf(buf, sizeof(buf),
                                                "epoch %d train_loss=%.6f val_loss=%.6f", e.epoch,
                                                e.train_loss, e.val_loss);
                                  log.info(buf);
                                });
  save_checkpoint((fs::path(args.out_dir) / "finetuned.ssmm").string(), res.best_params);
  write_history_csv((fs::path(args.out_dir) / "history.csv").string(), res.history);

  EvaluateResult eval = evaluate_downstream(cfg.model, cfg.finetune, res.best_params, cohort);
  std::ofstream f(fs::path(args.out_dir) / "val_report.json");
  f << eval_report_json(eval.val_report);
  log.info("best epoch " + std::to_string(res.best_epoch) + "; validation AUC " +
           std::to_string(eval.val_report.auc));
  return 0;
}

int cmd_evaluate(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  if (args.seed >= 0) {
    cfg.finetune.seed = static_cast<std::uint64_t>(args.seed);
    cfg.finetune.split.seed = cfg.finetune.seed;
  }
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);
  Cohort cohort = load_data(args);
  EvaluateResult res = evaluate_downstream(cfg.model, cfg.finetune, load_ckpt(args), cohort);
  {
    std::ofstream f(fs::path(args.out_dir) / "eval_report.json");
    f << eval_report_json(res.test_report);
  }
  {
    std::ofstream f(fs::path(args.out_dir) / "val_report.json");
    f << eval_report_json(res.val_report);
  }
  log.info("test AUC " + std::to_string(res.test_report.auc) + " at threshold " +
           std::to_string(res.test_report.threshold));
  return 0;
}

int cmd_gradcam(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  if (args.seed >= 0) {
    cfg.finetune.seed = static_cast<std::uint64_t>(args.seed);
    cfg.finetune.split.seed = cfg.finetune.seed;
  }
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);
  Cohort cohort = load_data(args);
  DownstreamModel model = build_downstream(cfg.model, cfg.finetune, load_ckpt(args));
  SplitIndices split = stratified_split(cohort, cfg.finetune.split);
  FittedPreprocess prep = fit_preprocess(cohort, split.train);
  int count = std::min<int>(cfg.gradcam_subjects, static_cast<int>(split.test.size()));
  for (int k = 0; k < count; ++k) {
    int subject = split.test[k];
    HeatmapVolume heat = gradcam(model, cohort, prep.all_rows, subject, cfg.gradcam_stage);
    std::string dir = (fs::path(args.out_dir) / cohort.ids[subject]).string();
    export_heatmap(heat, cohort.volumes[subject], dir);
    log.info("subject " + cohort.ids[subject] + " logit " + std::to_string(heat.logit));
  }
  return 0;
}

int cmd_export_embeddings(const CommonArgs& args) {
  CliConfig cfg = load_config(args);
  if (args.seed >= 0) cfg.pretrain.seed = static_cast<std::uint64_t>(args.seed);
  RunLog log(args.out_dir);
  echo_config(cfg, args.out_dir);
  Cohort cohort = load_data(args);
  EncodedSplit enc = encode_pretrain_split(cfg.model, cfg.pretrain, load_ckpt(args), cohort);
  export_embeddings_csv(enc.ids, enc.img_embeddings, enc.tab_embeddings,
                        (fs::path(args.out_dir) / "embeddings.csv").string());
  AlignmentReport rep = alignment_report(enc.img_projections, enc.tab_projections);
  std::ofstream f(fs::path(args.out_dir) / "alignment.json");
  f << alignment_report_json(rep);
  log.info("exported " + std::to_string(enc.ids.size()) + " validation subjects per modality");
  return 0;
}

int cmd_gradcheck(long long seed, int cases) {
  std::uint64_t s = seed >= 0 ? static_cast<std::uint64_t>(seed) : 42;
  double worst = 0.0;
  for (const auto& c : primitive_gradient_suite(s, cases)) {
    std::printf("%-24s max_rel_err %.3e over %d cases\n", c.name.c_str(), c.max_rel_err, c.cases);
    worst = std::max(worst, c.max_rel_err);
  }
  GradCheckCase comp = composite_gradient_check(s);
  std::printf("%-24s max_rel_err %.3e over %d parameter elements\n", comp.name.c_str(),
              comp.max_rel_err, comp.cases);
  worst = std::max(worst, comp.max_rel_err);
  std::printf("max relative error: %.6e\n", worst);
  if (worst >= 1e-4) {
    std::fprintf(stderr, "gradient check failed (threshold 1e-4)\n");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal self-supervised stroke-risk pipeline"};
  app.require_subcommand(1);

  CommonArgs args;
  long long gc_seed = -1;
  int gc_cases = 100;

  auto add_common = [&](CLI::App* cmd, bool needs_data, bool needs_ckpt, bool mode_flags) {
    cmd->add_option("--config", args.config_path, "JSON configuration file")->required();
    cmd->add_option("--out", args.out_dir, "output directory")->required();
    cmd->add_option("--seed", args.seed, "stage seed override");
    if (needs_data) cmd->add_option("--data", args.data_dir, "cohort directory")->required();
    if (needs_ckpt) cmd->add_option("--checkpoint", args.checkpoint_path, "checkpoint path");
    if (mode_flags) {
      cmd->add_option("--mode", args.mode, "clip-itm|clip|simclr|scarf|supervised");
      cmd->add_flag("--frozen", args.frozen, "freeze pretrained encoders");
      cmd->add_flag("--trainable", args.trainable, "fine-tune pretrained encoders");
    }
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic cohorts");
  add_common(gen, false, false, false);
  CLI::App* prep = app.add_subcommand("preprocess", "normalize, impute and one-hot a cohort");
  add_common(prep, true, false, false);
  CLI::App* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  add_common(pre, true, false, true);
  CLI::App* fin = app.add_subcommand("finetune", "downstream fine-tuning");
  add_common(fin, true, true, true);
  CLI::App* eva = app.add_subcommand("evaluate", "test-set evaluation at the validation Youden point");
  add_common(eva, true, true, true);
  CLI::App* cam = app.add_subcommand("gradcam", "activation heatmaps for test subjects");
  add_common(cam, true, true, true);
  CLI::App* exp = app.add_subcommand("export-embeddings", "validation embeddings CSV");
  add_common(exp, true, true, true);
  CLI::App* gck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gck->add_option("--seed", gc_seed, "suite seed");
  gck->add_option("--cases", gc_cases, "random cases per primitive");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(args);
    if (prep->parsed()) return cmd_preprocess(args);
    if (pre->parsed()) return cmd_pretrain(args);
    if (fin->parsed()) return cmd_finetune(args);
    if (eva->parsed()) return cmd_evaluate(args);
    if (cam->parsed()) return cmd_gradcam(args);
    if (exp->parsed()) return cmd_export_embeddings(args);
    if (gck->parsed()) return cmd_gradcheck(gc_seed, gc_cases);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
