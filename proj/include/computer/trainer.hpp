#pragma once

// Training, evaluation, checkpoints and the ablation matrix.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "computer/config.hpp"
#include "computer/grad_check.hpp"
#include "computer/metrics.hpp"

namespace computer {

/// A record ready for the model: features and targets at precision T.
template <std::floating_point T>
struct BasicPreparedVideo {
  VideoFeatures<T> features;
  Tensor<T> targets;       // STAL: (T N) x C
  std::size_t group = 0;   // GAR class
  std::size_t index = 0;   // position in its data set

  BasicPreparedVideo(const VideoRecord& r, std::size_t i)
      : features(r.features<T>()), index(i) {
    if (r.mode() == TaskMode::stal)
      targets = r.stal_targets<T>();
    else
      group = r.group_label();
  }
};

using PreparedVideo = BasicPreparedVideo<double>;

template <std::floating_point T = double>
std::vector<BasicPreparedVideo<T>> prepare(const std::vector<VideoRecord>& records,
                                           const ModelConfig& cfg) {
  std::vector<BasicPreparedVideo<T>> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.mode() != cfg.mode)
      throw ShapeMismatchError(r.id + ": labels are for " + task_name(r.mode()) +
                               ", config task is " + task_name(cfg.mode));
    if (r.dim() != cfg.dim || r.classes() != cfg.classes)
      throw ShapeMismatchError(r.id + ": D = " + std::to_string(r.dim()) + ", C = " +
                               std::to_string(r.classes()) + " vs config D = " +
                               std::to_string(cfg.dim) + ", C = " + std::to_string(cfg.classes));
    const bool raw = r.key.dim(2) == kKeypointWidth && r.dim() != kKeypointWidth;
    if (raw != cfg.raw_keypoints)
      throw ShapeMismatchError(r.id + ": keypoint input " + shape_str(r.key.shape()) +
                               (cfg.raw_keypoints ? " but config expects raw keypoints"
                                                  : " but config expects embedded features"));
    out.emplace_back(r, i);
  }
  return out;
}

struct Dataset {
  std::vector<VideoRecord> train, test;
};

/// Manifests when given, otherwise the synthetic generator.
inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.train_manifest.empty()) {
    auto s = generate_split(cfg.synthetic());
    return {std::move(s.train), std::move(s.test)};
  }
  Dataset d;
  d.train = load_manifest(cfg.train_manifest, cfg.model.dim);
  if (!cfg.test_manifest.empty()) d.test = load_manifest(cfg.test_manifest, cfg.model.dim);
  return d;
}

// ----------------------------------------------------------------- losses

template <std::floating_point T = double>
struct BatchLoss {
  Var<T> task;
  std::optional<Var<T>> consistency;
  Var<T> total;
};

/// Mean task loss over the batch plus lambda times the consistency loss.
/// The consistency term averages over clip indices t; each group holds every
/// actor of every batch video at clip t, identified by (video, actor).
template <std::floating_point T>
BatchLoss<T> batch_loss(Tape<T>& tape, std::span<const BasicPreparedVideo<T>* const> batch,
                        ComputerParams<T>& params, const RunConfig& cfg) {
  const auto& mc = cfg.model;
  std::vector<Var<T>> task;
  std::vector<VideoForward<T>> outs;
  for (const auto* v : batch) {
    outs.push_back(forward_video(tape, v->features, params, mc));
    if (mc.mode == TaskMode::stal) {
      task.push_back(bce_loss(outs.back().scores, v->targets));
    } else {
      const std::size_t g[1] = {v->group};
      task.push_back(ce_loss(outs.back().scores, std::span<const std::size_t>(g)));
    }
  }
  BatchLoss<T> out;
  out.task = average(std::span<const Var<T>>(task));
  out.total = out.task;
  if (!(mc.flags.use_vis && mc.flags.use_key)) return out;

  std::size_t max_t = 0;
  for (const auto* v : batch) max_t = std::max(max_t, v->features.clips());
  std::vector<Var<T>> groups;
  for (std::size_t t = 0; t < max_t; ++t) {
    std::vector<Var<T>> vis, key;
    std::vector<ActorId> ids;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& f = batch[b]->features;
      if (t >= f.clips()) continue;
      const std::size_t n = f.actors();
      vis.push_back(slice_rows(*outs[b].vis, t * n, n));
      key.push_back(slice_rows(*outs[b].key, t * n, n));
      for (std::size_t i = 0; i < n; ++i) ids.push_back({batch[b]->index, i});
    }
    if (ids.size() < 2) continue;
    groups.push_back(consistency_loss(concat_rows(std::span<const Var<T>>(vis)),
                                      concat_rows(std::span<const Var<T>>(key)),
                                      std::span<const ActorId>(ids), cfg.loss));
  }
  if (groups.empty()) return out;
  out.consistency = average(std::span<const Var<T>>(groups));
  if (mc.flags.use_consistency) out.total = total_loss(out.task, out.consistency, cfg.loss);
  return out;
}

// -------------------------------------------------------------- optimizer

/// Adam with bias correction.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::span<Parameter<double>* const> params) {
    if (m_.empty())
      for (auto* p : params) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
      }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g;
        v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g * g;
        p.value[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor<double>> m_, v_;
};

// ------------------------------------------------------------- evaluation

struct EvalReport {
  TaskMode mode = TaskMode::stal;
  double metric = 0;     // mAP (STAL) or accuracy (GAR)
  std::optional<double> alignment;
  double task_loss = 0;
};

inline const char* metric_name(TaskMode m) { return m == TaskMode::stal ? "map" : "accuracy"; }

/// Forward passes without gradients; parameters are not touched.
inline EvalReport evaluate_model(ComputerParams<double>& params, const RunConfig& cfg,
                                 const std::vector<PreparedVideo>& videos) {
  const auto& mc = cfg.model;
  EvalReport rep;
  rep.mode = mc.mode;
  if (videos.empty()) return rep;
  std::vector<std::vector<double>> score_rows, target_rows, vis_rows, key_rows;
  std::vector<std::size_t> groups;
  double loss = 0;
  for (const auto& v : videos) {
    TapeOptions opts;
    opts.grad_enabled = false;
    Tape<double> tape(opts);
    auto out = forward_video(tape, v.features, params, mc);
    const auto& s = out.scores.value();
    if (mc.mode == TaskMode::stal) {
      loss += bce_loss(out.scores, v.targets).item();
      for (std::size_t r = 0; r < s.rows(); ++r) {
        score_rows.emplace_back(s.row_span(r).begin(), s.row_span(r).end());
        target_rows.emplace_back(v.targets.row_span(r).begin(), v.targets.row_span(r).end());
      }
    } else {
      const std::size_t g[1] = {v.group};
      loss += ce_loss(out.scores, std::span<const std::size_t>(g)).item();
      score_rows.emplace_back(s.row_span(0).begin(), s.row_span(0).end());
      groups.push_back(v.group);
    }
    if (out.vis && out.key)
      for (std::size_t r = 0; r < out.vis->rows(); ++r) {
        vis_rows.emplace_back(out.vis->value().row_span(r).begin(), out.vis->value().row_span(r).end());
        key_rows.emplace_back(out.key->value().row_span(r).begin(), out.key->value().row_span(r).end());
      }
  }
  auto stack = [](const std::vector<std::vector<double>>& rows) {
    Tensor<double> t({rows.size(), rows.empty() ? 0 : rows[0].size()});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < rows[i].size(); ++j) t(i, j) = rows[i][j];
    return t;
  };
  rep.task_loss = loss / static_cast<double>(videos.size());
  rep.metric = mc.mode == TaskMode::stal
                   ? mean_average_precision(stack(score_rows), stack(target_rows))
                   : accuracy(stack(score_rows), groups);
  if (!vis_rows.empty()) rep.alignment = alignment(stack(vis_rows), stack(key_rows));
  return rep;
}

// --------------------------------------------------------------- training

struct EpochRecord {
  std::size_t epoch = 0;
  double task = 0, consistency = 0, total = 0;
  std::optional<EvalReport> eval;
};

/// One line per epoch, fixed key order, shortest round-trip numbers.
inline std::string format_epoch(const EpochRecord& r) {
  using detail::format_double;
  std::string s = "epoch=" + std::to_string(r.epoch) + " task=" + format_double(r.task) +
                  " consistency=" + format_double(r.consistency) +
                  " total=" + format_double(r.total);
  if (r.eval) {
    s += std::string(" eval_") + metric_name(r.eval->mode) + "=" + format_double(r.eval->metric);
    s += " eval_loss=" + format_double(r.eval->task_loss);
    if (r.eval->alignment) s += " alignment=" + format_double(*r.eval->alignment);
  }
  return s;
}

struct TrainResult {
  ComputerParams<double> params;
  std::vector<EpochRecord> epochs;
  EvalReport final_eval;
};

inline ComputerParams<double> initial_params(const RunConfig& cfg) {
  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(1);
  return init_params<double>(cfg.model, init_rng);
}

/// Deterministic given the config: parameter init and batch order derive
/// from `seed` only. Each finished epoch is passed to `on_epoch`.
inline TrainResult train(const RunConfig& cfg, const Dataset& data,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("train: empty training set");
  auto train_set = prepare(data.train, cfg.model);
  auto test_set = prepare(data.test.empty() ? data.train : data.test, cfg.model);

  Rng rng(cfg.seed);
  Rng init_rng = rng.fork(1);
  Rng order_rng = rng.fork(2);
  TrainResult res{init_params<double>(cfg.model, init_rng), {}, {}};
  auto plist = res.params.list();
  Adam adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++steps) {
      std::vector<const PreparedVideo*> batch;
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch); ++j)
        batch.push_back(&train_set[order[j]]);
      for (auto* p : plist) p->zero_grad();
      try {
        Tape<double> tape;
        auto loss = batch_loss<double>(tape, batch, res.params, cfg);
        if (!std::isfinite(loss.total.item())) throw NumericError("loss is not finite");
        tape.backward(loss.total);
        rec.task += loss.task.item();
        if (loss.consistency) rec.consistency += loss.consistency->item();
        rec.total += loss.total.item();
      } catch (const NumericError& e) {
        throw NumericError("train: epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps + 1) + ": " + e.what());
      }
      adam.step(plist);
    }
    rec.task /= static_cast<double>(steps);
    rec.consistency /= static_cast<double>(steps);
    rec.total /= static_cast<double>(steps);
    const bool last = epoch == cfg.epochs;
    if (last || (cfg.eval_every && epoch % cfg.eval_every == 0))
      rec.eval = evaluate_model(res.params, cfg, test_set);
    if (on_epoch) on_epoch(rec);
    res.epochs.push_back(rec);
  }
  res.final_eval = cfg.epochs ? *res.epochs.back().eval : evaluate_model(res.params, cfg, test_set);
  return res;
}

// ------------------------------------------------------------- checkpoints

/// Directory with config.txt, params.txt ("name group rows cols file" per
/// line) and one CTF file per parameter.
inline void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg,
                            ComputerParams<double>& params) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.txt");
    out << config_text(cfg);
    if (!out) throw IoError("cannot write " + (dir / "config.txt").string());
  }
  std::ofstream index(dir / "params.txt");
  for (auto* p : params.list()) {
    const std::string file = p->name + ".ctf";
    ctf::write(dir / file, p->value.cast<float>());
    index << p->name << ' ' << p->group << ' ' << p->value.rows() << ' ' << p->value.cols()
          << ' ' << file << '\n';
  }
  if (!index) throw IoError("cannot write " + (dir / "params.txt").string());
}

struct Checkpoint {
  RunConfig config;
  ComputerParams<double> params;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  ck.config = load_config(dir / "config.txt");
  ck.config.validate();
  ck.params = initial_params(ck.config);
  std::map<std::string, Parameter<double>*> by_name;
  for (auto* p : ck.params.list()) by_name[p->name] = p;
  std::ifstream index(dir / "params.txt");
  if (!index) throw MissingFileError("checkpoint index not found: " + (dir / "params.txt").string());
  std::string name, group, file;
  std::size_t rows = 0, cols = 0, loaded = 0;
  while (index >> name >> group >> rows >> cols >> file) {
    auto it = by_name.find(name);
    const auto path = dir / file;
    if (it == by_name.end())
      throw ShapeMismatchError(path.string() + ": parameter " + name + " not in the model");
    auto t = ctf::read<float>(path).cast<double>();
    if (t.shape() != it->second->value.shape())
      throw ShapeMismatchError(path.string() + ": shape " + shape_str(t.shape()) +
                               ", model expects " + shape_str(it->second->value.shape()));
    it->second->value = std::move(t);
    ++loaded;
  }
  if (loaded != by_name.size())
    throw ShapeMismatchError((dir / "params.txt").string() + ": lists " + std::to_string(loaded) +
                             " of " + std::to_string(by_name.size()) + " parameters");
  return ck;
}

// -------------------------------------------------------------- gradcheck

/// The toy setting for full-pipeline gradient checks: D = 4, T = 4, N = 2,
/// S = 3, B = 3, C = 3, raw keypoints through the embedder.
inline RunConfig gradcheck_config() {
  RunConfig c;
  c.model.dim = 4;
  c.model.classes = 3;
  c.model.hidden = 6;
  c.model.kp_hidden = 6;
  c.model.raw_keypoints = true;
  c.model.sel = {.w = 2, .k = 1};
  c.data.videos = 3;
  c.data.test_videos = 0;
  c.data.clips = 4;
  c.data.actors = 2;
  c.data.tokens = 3;
  c.batch = 3;
  c.loss.temperature = 0.5;
  return c;
}

/// Worst relative error per parameter group of the batch loss over the first
/// B training videos. Reverse mode runs in double; the central differences
/// are taken on the same objective in long double, so their rounding noise
/// stays far below the gradients being checked.
inline std::vector<std::pair<std::string, double>> run_gradcheck(const RunConfig& cfg,
                                                                 TapeOptions opts = {}) {
  using Wide = long double;
  cfg.validate();
  if (cfg.model.dim > 8) throw ConfigError("gradcheck: D must be <= 8");
  auto data = load_dataset(cfg);
  auto videos = prepare(data.train, cfg.model);
  auto wide_videos = prepare<Wide>(data.train, cfg.model);
  std::vector<const PreparedVideo*> batch;
  std::vector<const BasicPreparedVideo<Wide>*> wide_batch;
  for (std::size_t i = 0; i < std::min(cfg.batch, videos.size()); ++i) {
    batch.push_back(&videos[i]);
    wide_batch.push_back(&wide_videos[i]);
  }
  auto params = initial_params(cfg);
  auto plist = params.list();
  Rng unused(0);
  auto wide = init_params<Wide>(cfg.model, unused);
  auto wlist = wide.list();
  for (std::size_t k = 0; k < plist.size(); ++k) wlist[k]->value = plist[k]->value.cast<Wide>();

  Objective<double> f = [&](Tape<double>& t) {
    return batch_loss<double>(t, batch, params, cfg).total;
  };
  auto wide_eval = [&]() {
    TapeOptions o;
    o.grad_enabled = false;
    o.check_finite = false;
    Tape<Wide> tape(o);
    return batch_loss<Wide>(tape, wide_batch, wide, cfg).total.item();
  };
  NumericDerivative<double> numeric = [&](std::size_t k, std::size_t i, double h) {
    auto& v = wlist[k]->value[i];
    const Wide saved = v;
    v = saved + h;
    const Wide fp = wide_eval();
    v = saved - h;
    const Wide fm = wide_eval();
    v = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("gradcheck: objective is not finite");
    return static_cast<double>((fp - fm) / (2 * static_cast<Wide>(h)));
  };
  return grad_check<double>(f, plist, 1e-5, std::move(opts), numeric).by_group();
}

// --------------------------------------------------------------- ablation

struct AblationCell {
  std::string name;
  AblationFlags flags;
};

/// Component rows followed by modality rows.
inline std::vector<AblationCell> ablation_cells() {
  auto with = [](auto edit) {
    AblationFlags f;
    edit(f);
    return f;
  };
  return {
      {"full", {}},
      {"w/o hierarchy design", with([](AblationFlags& f) { f.use_hierarchy = false; })},
      {"w/o HC-HUB", with([](AblationFlags& f) { f.use_hc = false; })},
      {"w/o HH-HUB", with([](AblationFlags& f) { f.use_hh = false; })},
      {"w/o temporal modeling", with([](AblationFlags& f) { f.use_temporal = false; })},
      {"w/o pre-computed clip selection", with([](AblationFlags& f) { f.use_selection = false; })},
      {"skeleton only", with([](AblationFlags& f) {
         f.use_vis = false;
         f.use_consistency = false;
       })},
      {"rgb only", with([](AblationFlags& f) {
         f.use_key = false;
         f.use_consistency = false;
       })},
      {"skeleton + rgb", with([](AblationFlags& f) { f.use_consistency = false; })},
      {"skeleton + rgb + consistency", {}},
  };
}

struct CellResult {
  std::string name;
  AblationFlags flags;
  std::vector<double> metric, alignment;

  double mean() const { return mean_of(metric); }
  double sd() const { return sd_of(metric); }

  static double mean_of(const std::vector<double>& x) {
    if (x.empty()) return 0;
    double s = 0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
  }
  /// Sample standard deviation (n - 1); 0 for a single run.
  static double sd_of(const std::vector<double>& x) {
    if (x.size() < 2) return 0;
    const double m = mean_of(x);
    double s = 0;
    for (double v : x) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(x.size() - 1));
  }
};

/// Trains every cell over seeds seed, seed + 1, ...; cells with the same
/// flags share their runs.
inline std::vector<CellResult> run_ablation(const RunConfig& base, const Dataset& data,
                                            const std::vector<AblationCell>& cells,
                                            const std::function<void(const std::string&)>& log = {}) {
  std::vector<CellResult> out;
  for (const auto& cell : cells) {
    auto same = std::find_if(out.begin(), out.end(),
                             [&](const CellResult& r) { return r.flags == cell.flags; });
    if (same != out.end()) {
      CellResult copy = *same;
      copy.name = cell.name;
      out.push_back(std::move(copy));
      continue;
    }
    CellResult r{cell.name, cell.flags, {}, {}};
    for (std::size_t s = 0; s < base.seeds; ++s) {
      RunConfig cfg = base;
      cfg.model.flags = cell.flags;
      cfg.seed = base.seed + s;
      auto res = train(cfg, data);
      r.metric.push_back(res.final_eval.metric);
      if (res.final_eval.alignment) r.alignment.push_back(*res.final_eval.alignment);
      if (log)
        log(cell.name + " seed " + std::to_string(cfg.seed) + ": " +
            metric_name(cfg.model.mode) + " " + detail::format_double(res.final_eval.metric));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string format_ablation(const std::vector<CellResult>& rows, TaskMode mode) {
  std::string s = std::string("cell\tmean_") + metric_name(mode) + "\tsd\tmean_alignment\truns\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%s\t%zu\n", r.name.c_str(), r.mean(), r.sd(),
                  r.alignment.empty() ? "-" : detail::format_double(CellResult::mean_of(r.alignment)).c_str(),
                  r.metric.size());
    s += buf;
  }
  return s;
}

}  // namespace computer
