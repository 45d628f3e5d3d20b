#pragma once

// Flat key=value run configuration with command-line style overrides.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "computer/data.hpp"
#include "computer/losses.hpp"
#include "computer/model.hpp"

namespace computer {

struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  SyntheticConfig data;  // used when no manifests are given
  std::string train_manifest, test_manifest;
  double lr = 3e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::size_t epochs = 12;
  std::size_t batch = 3;       // videos per mini-batch
  std::size_t eval_every = 0;  // 0: evaluate after the last epoch only
  std::size_t seeds = 3;       // repeats per ablation cell
  std::uint64_t seed = 0;

  RunConfig() {
    model.dim = data.dim;
    model.classes = data.classes;
    model.hidden = 16;
  }

  /// Synthetic generator settings with the model's D, C, task and input kind.
  SyntheticConfig synthetic() const {
    SyntheticConfig s = data;
    s.dim = model.dim;
    s.classes = model.classes;
    s.mode = model.mode;
    s.raw_keypoints = model.raw_keypoints;
    return s;
  }

  void validate() const {
    model.validate();
    loss.validate();
    if (!(lr >= 0)) throw ConfigError("config: lr must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw ConfigError("config: Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ConfigError("config: adam_eps must be > 0");
    if (batch == 0) throw ConfigError("config: batch must be >= 1");
    if (seeds == 0) throw ConfigError("config: seeds must be >= 1");
    if (train_manifest.empty()) synthetic().validate();
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class N>
N parse_number(const std::string& key, const std::string& s) {
  N v{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ConfigError("config: bad value '" + s + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: bad boolean '" + s + "' for " + key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") + 1 - b);
}

}  // namespace detail

struct ConfigField {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigField>& config_fields() {
  using detail::format_double;
  using detail::parse_bool;
  using detail::parse_number;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto size = [&f](std::string k, std::size_t& (*acc)(RunConfig&)) {
      f.push_back({k, [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); },
                   [acc, k](RunConfig& c, const std::string& s) {
                     acc(c) = parse_number<std::size_t>(k, s);
                   }});
    };
    auto u64 = [&f](std::string k, std::uint64_t& (*acc)(RunConfig&)) {
      f.push_back({k, [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); },
                   [acc, k](RunConfig& c, const std::string& s) {
                     acc(c) = parse_number<std::uint64_t>(k, s);
                   }});
    };
    auto real = [&f](std::string k, double& (*acc)(RunConfig&)) {
      f.push_back({k, [acc](const RunConfig& c) { return format_double(acc(const_cast<RunConfig&>(c))); },
                   [acc, k](RunConfig& c, const std::string& s) {
                     acc(c) = parse_number<double>(k, s);
                   }});
    };
    auto flag = [&f](std::string k, bool& (*acc)(RunConfig&)) {
      f.push_back({k, [acc](const RunConfig& c) { return acc(const_cast<RunConfig&>(c)) ? "true" : "false"; },
                   [acc, k](RunConfig& c, const std::string& s) { acc(c) = parse_bool(k, s); }});
    };
    auto text = [&f](std::string k, std::string& (*acc)(RunConfig&)) {
      f.push_back({k, [acc](const RunConfig& c) { return acc(const_cast<RunConfig&>(c)); },
                   [acc](RunConfig& c, const std::string& s) { acc(c) = s; }});
    };

    size("dim", [](RunConfig& c) -> std::size_t& { return c.model.dim; });
    size("classes", [](RunConfig& c) -> std::size_t& { return c.model.classes; });
    size("hidden", [](RunConfig& c) -> std::size_t& { return c.model.hidden; });
    size("kp_hidden", [](RunConfig& c) -> std::size_t& { return c.model.kp_hidden; });
    size("depth", [](RunConfig& c) -> std::size_t& { return c.model.depth; });
    size("attn_layers", [](RunConfig& c) -> std::size_t& { return c.model.hub.attn.layers; });
    size("heads", [](RunConfig& c) -> std::size_t& { return c.model.hub.attn.heads; });
    flag("share_channels", [](RunConfig& c) -> bool& { return c.model.hub.share_channels; });
    size("w", [](RunConfig& c) -> std::size_t& { return c.model.sel.w; });
    size("k", [](RunConfig& c) -> std::size_t& { return c.model.sel.k; });
    f.push_back({"task", [](const RunConfig& c) { return std::string(task_name(c.model.mode)); },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "stal") c.model.mode = TaskMode::stal;
                   else if (s == "gar") c.model.mode = TaskMode::gar;
                   else throw ConfigError("config: task must be stal or gar, got '" + s + "'");
                 }});
    flag("raw_keypoints", [](RunConfig& c) -> bool& { return c.model.raw_keypoints; });
    f.push_back({"hh_memory",
                 [](const RunConfig& c) {
                   return std::string(c.model.hh_memory == HhMemory::visual ? "visual" : "matched");
                 },
                 [](RunConfig& c, const std::string& s) {
                   if (s == "visual") c.model.hh_memory = HhMemory::visual;
                   else if (s == "matched") c.model.hh_memory = HhMemory::matched;
                   else throw ConfigError("config: hh_memory must be visual or matched");
                 }});
    flag("use_hierarchy", [](RunConfig& c) -> bool& { return c.model.flags.use_hierarchy; });
    flag("use_hh", [](RunConfig& c) -> bool& { return c.model.flags.use_hh; });
    flag("use_hc", [](RunConfig& c) -> bool& { return c.model.flags.use_hc; });
    flag("use_temporal", [](RunConfig& c) -> bool& { return c.model.flags.use_temporal; });
    flag("use_selection", [](RunConfig& c) -> bool& { return c.model.flags.use_selection; });
    flag("use_vis", [](RunConfig& c) -> bool& { return c.model.flags.use_vis; });
    flag("use_key", [](RunConfig& c) -> bool& { return c.model.flags.use_key; });
    flag("use_consistency", [](RunConfig& c) -> bool& { return c.model.flags.use_consistency; });
    real("tau", [](RunConfig& c) -> double& { return c.loss.temperature; });
    real("lambda", [](RunConfig& c) -> double& { return c.loss.consistency_weight; });
    flag("include_positive", [](RunConfig& c) -> bool& { return c.loss.include_positive_in_denominator; });
    flag("bidirectional", [](RunConfig& c) -> bool& { return c.loss.bidirectional; });
    real("lr", [](RunConfig& c) -> double& { return c.lr; });
    real("beta1", [](RunConfig& c) -> double& { return c.beta1; });
    real("beta2", [](RunConfig& c) -> double& { return c.beta2; });
    real("adam_eps", [](RunConfig& c) -> double& { return c.adam_eps; });
    size("epochs", [](RunConfig& c) -> std::size_t& { return c.epochs; });
    size("batch", [](RunConfig& c) -> std::size_t& { return c.batch; });
    size("eval_every", [](RunConfig& c) -> std::size_t& { return c.eval_every; });
    size("seeds", [](RunConfig& c) -> std::size_t& { return c.seeds; });
    u64("seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    text("train_manifest", [](RunConfig& c) -> std::string& { return c.train_manifest; });
    text("test_manifest", [](RunConfig& c) -> std::string& { return c.test_manifest; });
    u64("data.seed", [](RunConfig& c) -> std::uint64_t& { return c.data.seed; });
    size("data.videos", [](RunConfig& c) -> std::size_t& { return c.data.videos; });
    size("data.test_videos", [](RunConfig& c) -> std::size_t& { return c.data.test_videos; });
    size("data.clips", [](RunConfig& c) -> std::size_t& { return c.data.clips; });
    size("data.actors", [](RunConfig& c) -> std::size_t& { return c.data.actors; });
    size("data.tokens", [](RunConfig& c) -> std::size_t& { return c.data.tokens; });
    real("data.sigma", [](RunConfig& c) -> double& { return c.data.sigma; });
    real("data.rho", [](RunConfig& c) -> double& { return c.data.rho; });
    real("data.frac_vis", [](RunConfig& c) -> double& { return c.data.frac_vis; });
    real("data.frac_key", [](RunConfig& c) -> double& { return c.data.frac_key; });
    real("data.frac_joint", [](RunConfig& c) -> double& { return c.data.frac_joint; });
    real("data.signal", [](RunConfig& c) -> double& { return c.data.signal; });
    real("data.identity", [](RunConfig& c) -> double& { return c.data.identity; });
    real("data.scene", [](RunConfig& c) -> double& { return c.data.scene; });
    real("data.drift", [](RunConfig& c) -> double& { return c.data.drift; });
    real("data.context_signal", [](RunConfig& c) -> double& { return c.data.context_signal; });
    real("data.gar_flip", [](RunConfig& c) -> double& { return c.data.gar_flip; });
    return f;
  }();
  return fields;
}

/// Applies one "key=value" assignment.
inline void apply_setting(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: expected key=value, got '" + assignment + "'");
  const std::string key = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  for (const auto& f : config_fields())
    if (f.key == key) return f.set(cfg, value);
  throw ConfigError("config: unknown key '" + key + "'");
}

/// Parses key=value lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_setting(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("config not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, ss.str(), path.string());
  return cfg;
}

/// Every key, one "key = value" line each, in a fixed order.
inline std::string config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace computer
