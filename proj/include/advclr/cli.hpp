#pragma once

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advclr/checkpoint.hpp"
#include "advclr/config.hpp"
#include "advclr/eval.hpp"
#include "advclr/model_check.hpp"
#include "advclr/train.hpp"

namespace advclr {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitIo = 5,
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// `--out` if given, otherwise <output_root>/<hash>-<command>-<utc time>,
/// with a numeric suffix when that already exists.
inline std::filesystem::path run_dir(const RunConfig& cfg, const std::string& command,
                                     const std::string& out_flag) {
  std::filesystem::path dir;
  if (!out_flag.empty()) {
    dir = out_flag;
  } else {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << config_hash(cfg).substr(0, 12) << '-' << command << '-'
       << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
    dir = cfg.output_root / os.str();
    for (int k = 1; std::filesystem::exists(dir); ++k) {
      dir = cfg.output_root / (os.str() + "-" + std::to_string(k));
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  std::optional<std::size_t> epochs;
  std::string epsilon;
  std::vector<std::string> set;
  std::string out;
};

inline RunConfig load_config(const CommonOptions& o, const std::string& stage) {
  ConfigSources src;
  if (o.seed) src.overrides.push_back("seed=" + std::to_string(*o.seed));
  if (!o.data_dir.empty()) src.overrides.push_back("data.dir=" + o.data_dir);
  if (o.epochs) src.overrides.push_back(stage + ".epochs=" + std::to_string(*o.epochs));
  if (!o.epsilon.empty()) {
    src.overrides.push_back((stage == "pretrain" ? "pretrain.epsilon=" : "attacks.epsilon=") +
                            o.epsilon);
  }
  for (const auto& s : o.set) src.overrides.push_back(s);
  return parse_config(o.config, src);
}

inline int ingest_check(const CommonOptions& o, std::ostream& out) {
  const RunConfig cfg = load_config(o, "data");
  const auto [train, test] = load_datasets(cfg.data);
  for (const Dataset* ds : {&train, &test}) {
    ds->validate();
    std::vector<std::size_t> counts(ds->num_classes(), 0);
    float lo = 1.0f, hi = 0.0f;
    for (const auto& im : ds->images) {
      ++counts[im.label];
      for (float v : im.pixels.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    out << (ds->split == Split::train ? "train" : "test") << ": " << ds->size() << " images, shape "
        << shape_str(ds->image_shape()) << ", " << ds->num_classes() << " classes, pixels ["
        << lo << ", " << hi << "]\n  per class:";
    for (std::size_t c = 0; c < counts.size(); ++c) out << ' ' << ds->class_names[c] << '=' << counts[c];
    out << '\n';
  }
  out << "ok\n";
  return kExitOk;
}

inline int pretrain(const CommonOptions& o, std::ostream& out) {
  const RunConfig cfg = load_config(o, "pretrain");
  require_stage(cfg, "pretrain");
  const auto [train, test] = load_datasets(cfg.data);
  const auto dir = run_dir(cfg, "pretrain", o.out);
  write_text(dir / "config.conf", config_to_text(cfg));
  PretrainConfig pc = cfg.pretrain;
  pc.checkpoint_dir = dir;
  const TrainResult res = act_pretrain(train, cfg.model, pc);
  write_text(dir / "pretrain_log.jsonl", res.log.to_jsonl());
  for (const auto& r : res.log.epochs) {
    out << "epoch " << r.epoch << " loss " << r.loss << " lr " << r.lr << " (" << std::fixed
        << std::setprecision(1) << r.seconds << "s)" << std::defaultfloat << std::setprecision(6)
        << '\n';
  }
  out << "checkpoint: " << (dir / "pretrain_final.ckpt").string() << '\n';
  return kExitOk;
}

inline int finetune_cmd(const CommonOptions& o, const std::string& checkpoint, std::ostream& out) {
  const RunConfig cfg = load_config(o, "finetune");
  require_stage(cfg, "finetune");
  const ModelParams<float> ckpt = load_checkpoint(checkpoint);
  const auto [train, test] = load_datasets(cfg.data);
  const auto dir = run_dir(cfg, "finetune", o.out);
  write_text(dir / "config.conf", config_to_text(cfg));
  const TrainResult res = finetune(train, ckpt, cfg.data.num_classes, cfg.finetune);
  save_checkpoint(dir / "finetune.ckpt", res.params);
  write_text(dir / "finetune_log.jsonl", res.log.to_jsonl());
  const double acc = clean_accuracy(res.params, test, cfg.eval.batch_size);
  out << "final loss " << res.log.epochs.back().loss << ", clean test accuracy " << acc << '\n';
  out << "checkpoint: " << (dir / "finetune.ckpt").string() << '\n';
  return kExitOk;
}

inline int evaluate(const CommonOptions& o, const std::vector<std::string>& model_args,
                    std::ostream& out) {
  const RunConfig cfg = load_config(o, "attacks");
  std::vector<std::string> ids;
  std::vector<ModelParams<float>> params;
  for (const auto& m : model_args) {
    const auto eq = m.find('=');
    const std::filesystem::path path = eq == std::string::npos ? m : m.substr(eq + 1);
    ids.push_back(eq == std::string::npos ? path.stem().string() : m.substr(0, eq));
    params.push_back(load_checkpoint(path));
  }
  const auto [train, test] = load_datasets(cfg.data);
  std::vector<NamedModel> models;
  for (std::size_t i = 0; i < params.size(); ++i) models.push_back({ids[i], &params[i]});
  const auto reports = eval_table(models, cfg.attacks.expand(), test, cfg.seed, cfg.eval.batch_size);
  const auto dir = run_dir(cfg, "evaluate", o.out);
  write_text(dir / "config.conf", config_to_text(cfg));
  write_text(dir / "report.json", serialize_reports(reports));
  write_text(dir / "report.csv", reports_to_csv(reports));
  out << render_table(reports);
  out << "report: " << (dir / "report.json").string() << '\n';
  return kExitOk;
}

inline int gradcheck(const CommonOptions& o, double tolerance, std::size_t coords,
                     std::ostream& out) {
  EncoderSpec spec;
  std::size_t classes = 10;
  std::uint64_t seed = o.seed.value_or(0);
  if (!o.config.empty()) {
    const RunConfig cfg = load_config(o, "model");
    spec = cfg.model;
    classes = cfg.data.num_classes;
    seed = cfg.seed;
  }
  const auto params = init_params<double>(spec, classes, seed);
  GradcheckOptions opt;
  opt.max_coords = coords;
  opt.seed = seed;
  const auto rep = gradcheck_model(params, opt);
  out << std::scientific << std::setprecision(3);
  for (const auto& t : rep.tensors) {
    out << "  " << std::left << std::setw(28) << t.name << std::right << std::setw(6) << t.coords
        << " coords  max rel err " << t.max_rel_err << '\n';
  }
  const bool pass = rep.max_rel_err <= tolerance;
  out << (pass ? "PASS" : "FAIL") << ": max relative error " << rep.max_rel_err
      << " (tolerance " << tolerance << ")\n";
  return pass ? kExitOk : kExitNumeric;
}

inline int report(const std::vector<std::string>& files, bool csv, std::ostream& out) {
  std::vector<EvalReport> all;
  for (const auto& f : files) {
    auto reps = parse_reports(read_text(f));
    all.insert(all.end(), reps.begin(), reps.end());
  }
  out << (csv ? reports_to_csv(all) : render_table(all));
  return kExitOk;
}

}  // namespace cli

/// Parses `args` (without the program name) and runs the chosen command.
/// Returns the process exit status; diagnostics go to `err`.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Adversarial contrastive pretraining, linear probing and robustness evaluation",
               "advclr"};
  app.require_subcommand(1);
  cli::CommonOptions o;
  std::string checkpoint;
  std::vector<std::string> models, reports;
  double tolerance = 1e-4;
  std::size_t coords = 24;
  bool csv = false;

  auto common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("-c,--config", o.config, "Run configuration file");
    if (config_required) c->required();
    sub->add_option("--seed", o.seed, "Override the global seed");
    sub->add_option("--data-dir", o.data_dir, "Override [data] dir");
    sub->add_option("--set", o.set, "Override any key: section.key=value")->take_all();
    sub->add_option("--out", o.out, "Output directory (default: <output_root>/<hash>-<time>)");
  };

  auto* ingest = app.add_subcommand("ingest-check", "Load and validate the dataset");
  common(ingest, true);
  auto* pre = app.add_subcommand("pretrain", "Adversarial contrastive pretraining");
  common(pre, true);
  pre->add_option("--epochs", o.epochs, "Override [pretrain] epochs");
  pre->add_option("--epsilon", o.epsilon, "Override [pretrain] epsilon");
  auto* fine = app.add_subcommand("finetune", "Linear probe on a frozen pretrained encoder");
  common(fine, true);
  fine->add_option("--checkpoint", checkpoint, "Pretrained checkpoint")->required();
  fine->add_option("--epochs", o.epochs, "Override [finetune] epochs");
  auto* eval = app.add_subcommand("evaluate", "Clean and robust accuracy report");
  common(eval, true);
  eval->add_option("-m,--model", models, "Checkpoint, optionally as id=path")->required();
  eval->add_option("--epsilon", o.epsilon, "Override [attacks] epsilon (comma list)");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of model gradients");
  common(grad, false);
  grad->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
  grad->add_option("--coords", coords, "Sampled coordinates per tensor (0 = all)")
      ->capture_default_str();
  auto* rep = app.add_subcommand("report", "Render report files as a table");
  rep->add_option("files", reports, "report.json files")->required();
  rep->add_flag("--csv", csv, "Print the CSV projection instead");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  try {
    if (*ingest) return cli::ingest_check(o, out);
    if (*pre) return cli::pretrain(o, out);
    if (*fine) return cli::finetune_cmd(o, checkpoint, out);
    if (*eval) return cli::evaluate(o, models, out);
    if (*grad) return cli::gradcheck(o, tolerance, coords, out);
    if (*rep) return cli::report(reports, csv, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const CheckpointError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    err << "io error: malformed report: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace advclr
