// computer: train, evaluate, gradient-check and ablate the query machine.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "computer/trainer.hpp"

using namespace computer;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kInvalid = 1, kNumeric = 2;
constexpr double kGradTolerance = 1e-5;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value config file");
  cmd->add_option("--set", c.sets, "override, key=value (repeatable)")->allow_extra_args(false);
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--out", c.out, "output directory");
}

RunConfig resolve(RunConfig cfg, const Common& c) {
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw MissingFileError("config not found: " + c.config);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str(), c.config);
  }
  for (const auto& s : c.sets) apply_setting(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string report_line(const EvalReport& r) {
  std::string s = std::string(metric_name(r.mode)) + "=" + detail::format_double(r.metric) +
                  " loss=" + detail::format_double(r.task_loss);
  if (r.alignment) s += " alignment=" + detail::format_double(*r.alignment);
  return s;
}

int cmd_train(const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = resolve(RunConfig{}, c);
  const fs::path out = c.out.empty() ? fs::path("run") : fs::path(c.out);
  const auto data = load_dataset(cfg);
  std::string metrics;
  auto res = train(cfg, data, [&](const EpochRecord& r) {
    const auto line = format_epoch(r);
    std::cout << line << "\n" << std::flush;
    metrics += line + "\n";
  });
  write_file(out / "metrics.txt", metrics);
  save_checkpoint(out / "checkpoint", cfg, res.params);
  std::cout << "final " << report_line(res.final_eval) << "\n";
  std::cout << "wall_clock_s=" << seconds_since(t0) << "\n";
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  auto ck = load_checkpoint(checkpoint);
  // The model comes from the checkpoint; only the data source may change.
  for (const auto& s : c.sets) {
    const auto key = detail::trim(s.substr(0, s.find('=')));
    if (!key.starts_with("data.") && key != "train_manifest" && key != "test_manifest")
      throw ConfigError("eval: only dataset keys may be overridden, got '" + key + "'");
  }
  if (!c.config.empty() || c.seed)
    throw ConfigError("eval: --config and --seed do not apply; the checkpoint holds the run config");
  RunConfig cfg = ck.config;
  for (const auto& s : c.sets) apply_setting(cfg, s);
  cfg.validate();
  const auto data = load_dataset(cfg);
  const auto videos = prepare(data.test.empty() ? data.train : data.test, cfg.model);
  const auto rep = evaluate_model(ck.params, cfg, videos);
  const auto line = report_line(rep);
  std::cout << line << "\n";
  if (!c.out.empty()) write_file(fs::path(c.out) / "eval.txt", line + "\n");
  std::cout << "wall_clock_s=" << seconds_since(t0) << "\n";
  return kOk;
}

int cmd_gradcheck(const Common& c, const std::string& corrupt_op, double corrupt_factor) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = resolve(gradcheck_config(), c);
  TapeOptions opts;
  opts.corrupt_op = corrupt_op;
  opts.corrupt_factor = corrupt_factor;
  const auto groups = run_gradcheck(cfg, opts);
  std::string report;
  double worst = 0;
  char buf[160];
  for (const auto& [g, err] : groups) {
    std::snprintf(buf, sizeof buf, "%-18s %.3e %s\n", g.c_str(), err,
                  err < kGradTolerance ? "ok" : "FAIL");
    report += buf;
    worst = std::max(worst, err);
  }
  std::snprintf(buf, sizeof buf, "max_rel_err %.3e\n", worst);
  report += buf;
  std::cout << report;
  if (!c.out.empty()) write_file(fs::path(c.out) / "gradcheck.txt", report);
  std::cout << "wall_clock_s=" << seconds_since(t0) << "\n";
  return worst < kGradTolerance ? kOk : kNumeric;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& only) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = resolve(RunConfig{}, c);
  auto cells = ablation_cells();
  if (!only.empty()) {
    std::vector<AblationCell> picked;
    for (const auto& name : only) {
      auto it = std::find_if(cells.begin(), cells.end(),
                             [&](const AblationCell& a) { return a.name == name; });
      if (it == cells.end()) throw ConfigError("ablate: unknown cell '" + name + "'");
      picked.push_back(*it);
    }
    cells = std::move(picked);
  }
  const auto data = load_dataset(cfg);
  const auto rows = run_ablation(cfg, data, cells, [](const std::string& s) {
    std::cerr << s << "\n";
  });
  const auto table = format_ablation(rows, cfg.model.mode);
  std::cout << table;
  if (!c.out.empty()) write_file(fs::path(c.out) / "ablation.tsv", table);
  std::cout << "wall_clock_s=" << seconds_since(t0) << "\n";
  return kOk;
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = resolve(RunConfig{}, c);
  if (c.out.empty()) throw ConfigError("gen-data: --out is required");
  const auto data = load_dataset(cfg);
  std::cout << save_manifest(c.out, "train", data.train).string() << "\n";
  if (!data.test.empty()) std::cout << save_manifest(c.out, "test", data.test).string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COMPUTER query machine on synthetic or manifest data"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, grad_opts, ablate_opts, gen_opts;
  auto* train_cmd = app.add_subcommand("train", "train one model; writes metrics.txt and checkpoint/");
  add_common(train_cmd, train_opts);

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
  add_common(eval_cmd, eval_opts);
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
  add_common(grad_cmd, grad_opts);
  std::string corrupt_op;
  double corrupt_factor = 1.0;
  grad_cmd->add_option("--corrupt-op", corrupt_op, "test hook: scale this op's backward");
  grad_cmd->add_option("--corrupt-factor", corrupt_factor, "scale for --corrupt-op");

  auto* ablate_cmd = app.add_subcommand("ablate", "component and modality ablation table");
  add_common(ablate_cmd, ablate_opts);
  std::vector<std::string> cells;
  ablate_cmd->add_option("--cell", cells, "run only this cell (repeatable)");

  auto* gen_cmd = app.add_subcommand("gen-data", "write the synthetic splits as manifests");
  add_common(gen_cmd, gen_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInvalid;
  }

  try {
    if (*train_cmd) return cmd_train(train_opts);
    if (*eval_cmd) return cmd_eval(eval_opts, checkpoint);
    if (*grad_cmd) return cmd_gradcheck(grad_opts, corrupt_op, corrupt_factor);
    if (*ablate_cmd) return cmd_ablate(ablate_opts, cells);
    if (*gen_cmd) return cmd_gen_data(gen_opts);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kInvalid;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return kInvalid;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kInvalid;
  }
  return kInvalid;
}
