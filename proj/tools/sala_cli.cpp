// sala: train, evaluate and profile SALA networks from a config file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "sala/errors.hpp"
#include "sala/experiment.hpp"
#include "sala/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace sala;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> neighbor_select;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("sala");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");
  const char* env = std::getenv("SALA_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("SALA_LOG={} not recognized, using info", level);
  }
}

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig cfg;
  if (!f.config.empty()) {
    cfg = parse_config(f.config);
  } else if (!f.seed) {
    throw ConfigError("no config given and no --seed; run.seed is required");
  }
  if (f.seed) cfg.seed = *f.seed;
  if (f.workers) cfg.workers = *f.workers;
  if (f.neighbor_select) {
    cfg.geometry.select = *f.neighbor_select == "random" ? NeighborSelect::Random : NeighborSelect::Nearest;
  }
  derive_settings(cfg);
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  std::ofstream(cfg.output_dir / "resolved_config") << emit_config(cfg);
  spdlog::debug("resolved config:\n{}", emit_config(cfg));
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

int cmd_train(const ExperimentConfig& cfg) {
  const Datasets data = load_datasets(cfg);
  spdlog::info("training {} on {} scenes, validating on {}", family_name(cfg.aggregator.family), data.train.size(),
               data.val.size());
  auto model = build_model(cfg);
  spdlog::info("{} parameters", model->parameters().scalar_count());
  TrainOutputs out;
  out.dir = cfg.output_dir;
  out.on_epoch = [](const EpochLog& e) {
    spdlog::info("epoch {:3d}  step {:5d}  loss {:.5f}  val mIoU {:.4f}", e.epoch, e.step, e.loss, e.val_miou);
  };
  const TrainResult r = train(*model, data.train, data.val, cfg.geometry, cfg.training, out);
  std::cout << "best val mIoU " << r.best_val_miou << " at epoch " << r.best_epoch << "\n";
  std::cout << "checkpoints in " << cfg.output_dir.string() << "\n";
  return 0;
}

std::string iou_table(const IouResult& iou) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "class" << std::right << std::setw(10) << "IoU" << "\n";
  os << std::string(20, '-') << "\n";
  os << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < iou.per_class.size(); ++c) {
    os << std::left << std::setw(10) << c << std::right << std::setw(10);
    if (iou.valid[c]) os << iou.per_class[c];
    else os << "-";
    os << "\n";
  }
  os << std::string(20, '-') << "\n";
  os << std::left << std::setw(10) << "mIoU" << std::right << std::setw(10) << iou.mean << "\n";
  return os.str();
}

int cmd_eval(const ExperimentConfig& cfg) {
  const fs::path ckpt = eval_checkpoint(cfg);
  auto model = build_model(cfg);
  model->load(ckpt);
  const Datasets data = load_datasets(cfg);
  if (data.val.empty()) throw ConfigError("eval needs validation data (data.val or data.val_rooms)");
  spdlog::info("evaluating {} on {} scenes", ckpt.string(), data.val.size());
  std::vector<ConfusionMatrix> per_cat(cfg.network.num_heads, ConfusionMatrix(cfg.network.num_classes));
  ConfusionMatrix all(cfg.network.num_classes);
  for (const auto& s : data.val) {
    const ConfusionMatrix cm = evaluate(*model, std::span(&s, 1), cfg.geometry, cfg.eval);
    per_cat[s.category].merge(cm);
    all.merge(cm);
  }
  const IouResult iou = miou(all);
  std::string table = iou_table(iou);
  nlohmann::ordered_json j;
  j["checkpoint"] = ckpt.string();
  j["miou"] = iou.mean;
  auto per_class = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < iou.per_class.size(); ++c) {
    per_class.push_back(iou.valid[c] ? nlohmann::ordered_json(iou.per_class[c]) : nlohmann::ordered_json());
  }
  j["per_class_iou"] = per_class;
  if (cfg.network.num_heads > 1) {
    std::vector<ConfusionMatrix> seen;
    for (const auto& cm : per_cat)
      if (cm.total() > 0) seen.push_back(cm);
    const double mp = mpiou(seen);
    j["mpiou"] = mp;
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << std::left << std::setw(10) << "mpIoU" << std::right
       << std::setw(10) << mp << "\n";
    table += os.str();
  }
  auto confusion = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < all.classes(); ++t) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t p = 0; p < all.classes(); ++p) row.push_back(all.at(t, p));
    confusion.push_back(row);
  }
  j["confusion"] = confusion;
  write_text(cfg.output_dir / "eval_report.json", j.dump(2) + "\n");
  write_text(cfg.output_dir / "eval_report.txt", table);
  std::cout << table;
  return 0;
}

int cmd_profile(const ExperimentConfig& cfg) {
  const CostReport r = profile_model(cfg, cfg.output_dir / "profile_weights.salaw");
  write_text(cfg.output_dir / "cost_report.json", r.to_json());
  write_text(cfg.output_dir / "cost_report.txt", r.to_table());
  std::cout << r.to_table();
  return 0;
}

int cmd_gradcheck(const ExperimentConfig& cfg) {
  SuiteOptions opts;
  opts.seeds = cfg.gradcheck.seeds;
  opts.eps = cfg.gradcheck.eps;
  opts.tolerance = cfg.gradcheck.tolerance;
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  bool ok = true;
  run_gradcheck_suite(opts, [&](const OperatorCheck& c) {
    std::cout << std::left << std::setw(16) << c.name << (c.passed ? "PASS" : "FAIL") << "  max rel err "
              << std::scientific << std::setprecision(3) << c.max_rel_error << std::defaultfloat << "  ("
              << c.checked << " coords, " << c.skipped << " skipped at kinks, " << c.seeds << " seeds)"
              << std::endl;
    ok = ok && c.passed;
    j.push_back({{"operator", c.name},
                 {"passed", c.passed},
                 {"max_rel_error", c.max_rel_error},
                 {"seeds", c.seeds},
                 {"checked", c.checked},
                 {"skipped", c.skipped}});
  });
  write_text(cfg.output_dir / "gradcheck.json", j.dump(2) + "\n");
  return ok ? 0 : kExitFailure;
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.output_dir / "data";
  const auto paths = write_synthetic(cfg.data.synthetic, dir);
  spdlog::info("wrote {} rooms to {}", paths.size(), dir.string());
  for (const auto& p : paths) std::cout << p.string() << "\n";
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  nlohmann::ordered_json j{{"error", kind}, {"message", message}};
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"SALA point-cloud segmentation: training, evaluation and cost profiling"};
  app.require_subcommand(1);
  Flags flags;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "Train a model; writes metrics.csv, best.salaw and last.salaw"},
      {"eval", "Per-class IoU of a checkpoint on the validation scenes"},
      {"profile", "Parameter, MAC and weight-size report"},
      {"gradcheck", "Finite-difference check of every learnable operator"},
      {"gen-data", "Write the synthetic rooms as SPTC1 files"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", flags.config, "Experiment config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "Overrides run.seed");
    sub->add_option("--workers", flags.workers, "Worker threads (default: logical cores)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--neighbor-select", flags.neighbor_select, "Overrides geometry.neighbor_select")
        ->check(CLI::IsMember({"nearest", "random"}));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const ExperimentConfig cfg = resolve(flags);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "eval") return cmd_eval(cfg);
    if (cmd == "profile") return cmd_profile(cfg);
    if (cmd == "gradcheck") return cmd_gradcheck(cfg);
    return cmd_gen_data(cfg);
  } catch (const ConfigError& e) {
    return fail("ConfigError", e.what(), kExitConfig);
  } catch (const FormatError& e) {
    return fail("FormatError", e.what(), kExitFailure);
  } catch (const DivergenceError& e) {
    return fail("DivergenceError", e.what(), kExitFailure);
  } catch (const ValidationError& e) {
    return fail("ValidationError", e.what(), kExitFailure);
  } catch (const std::exception& e) {
    return fail("Error", e.what(), kExitFailure);
  }
}
