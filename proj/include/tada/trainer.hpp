#pragma once

// Regime controller: label visibility, paired batch sampling, the optimisation
// loop with optional adversarial adaptation, and the two-stage HeadFreeze
// schedule (source-only stage, freeze head, retrain trunk on all visible labels).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/adversarial.hpp"
#include "tada/batching.hpp"
#include "tada/losses.hpp"
#include "tada/metrics.hpp"
#include "tada/model.hpp"
#include "tada/optimizer.hpp"
#include "tada/regime.hpp"

namespace tada::train {

using Net = model::MultiTaskNet<float>;

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss went non-finite; the model has been restored to the last good snapshot.
class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, std::int64_t step) : TrainingError(what), step(step) {}
  std::int64_t step;
};

struct StageConfig {
  int max_steps = 1000;
  int patience = 5;         ///< evaluations without relative improvement before stopping
  double rel_tol = 1e-3;
  int eval_every = 50;      ///< steps between validation evaluations; 0 disables
  bool early_stop = true;   ///< stop on plateau (otherwise run to max_steps)
  bool select_best = true;  ///< restore the best-validation snapshot at stage end
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StageConfig, max_steps, patience, rel_tol, eval_every, early_stop,
                                                select_best)

struct RegimeConfig {
  Regime regime = Regime::baseline;
  DaMode da_mode = DaMode::none;
  LossWeights weights{};
  StageConfig single{};  ///< single-stage regimes
  StageConfig stage1{};  ///< HeadFreeze stage 1 (source only)
  StageConfig stage2{};  ///< HeadFreeze stage 2 (trunk only)
  optim::OptimizerConfig optimizer{};
  adv::DiscriminatorConfig discriminator{};
  int batch_size = 8;  ///< per domain
  std::uint64_t seed = 1;
  int log_every = 25;
  int health_window = 50;

  void validate() const {
    weights.validate();
    if (batch_size <= 0) throw std::invalid_argument("batch_size must be > 0");
    if (regime == Regime::headfreeze && stage1.max_steps < 0) throw std::invalid_argument("stage1.max_steps < 0");
  }
  [[nodiscard]] std::string name() const {
    return da_mode == DaMode::none ? to_string(regime) : to_string(regime) + "+" + to_string(da_mode);
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RegimeConfig, regime, da_mode, weights, single, stage1, stage2,
                                                optimizer, discriminator, batch_size, seed, log_every, health_window)

/// True once the tracked validation loss has failed to improve on the best earlier
/// value by more than `rel_tol` (relative) for the last `patience` evaluations.
inline bool stage_switch_criterion(const std::vector<double>& history, int patience, double rel_tol) {
  if (patience <= 0) return false;
  if (history.size() < static_cast<std::size_t>(patience) + 1) return false;
  const auto split = history.end() - patience;
  const double best_before = *std::min_element(history.begin(), split);
  const double best_recent = *std::min_element(split, history.end());
  return !(best_recent < best_before - rel_tol * std::abs(best_before));
}

/// Checks that a dataset can serve a regime before any step is taken.
inline void check_consistency(const RegimeConfig& cfg, const batch::PreparedData& pd) {
  cfg.validate();
  using data::Domain;
  using data::Split;
  if (pd.part(Domain::source, Split::train).empty()) throw TrainingError("source train split is empty");
  const Visibility v = visibility(cfg.regime);
  const bool needs_target = v.target_anchor || v.target_main || cfg.da_mode != DaMode::none;
  if (needs_target && pd.part(Domain::target, Split::train).empty()) {
    throw TrainingError("regime " + cfg.name() + " needs target train samples");
  }
  if (cfg.regime == Regime::headfreeze && !(v.source_anchor && v.target_anchor)) {
    throw TrainingError("headfreeze requires anchor labels on both domains");
  }
  if (pd.segmentation() && cfg.regime != Regime::baseline && pd.spec.n_classes < 2) {
    throw TrainingError("segmentation anchors need at least two classes");
  }
}

/// Concatenates per-domain gradient tensors; a missing side is zero-filled.
inline Tensor<float> concat_grads(const Tensor<float>& a, const Tensor<float>& b, int na, int nb, const Shape4& like) {
  if (a.empty() && b.empty()) return {};
  Shape4 sa = like, sb = like;
  sa.n = na;
  sb.n = nb;
  return Tensor<float>::concat_batch(a.empty() ? Tensor<float>(sa) : a, b.empty() ? Tensor<float>(sb) : b);
}

inline model::Outputs<float> slice_outputs(const model::Outputs<float>& o, int begin, int count) {
  model::Outputs<float> r;
  r.main = o.main.slice_batch(begin, count);
  r.anchor = o.anchor.slice_batch(begin, count);
  if (!o.depth.empty()) r.depth = o.depth.slice_batch(begin, count);
  r.features = o.features.slice_batch(begin, count);
  r.up1 = o.up1.slice_batch(begin, count);
  r.up2 = o.up2.slice_batch(begin, count);
  return r;
}

/// Forward over a whole split in chunks (main, anchor and depth only).
inline model::Outputs<float> forward_all(Net& net, const std::vector<batch::PreparedSample>& part, int size, int chunk = 32) {
  model::Outputs<float> all;
  const int n = static_cast<int>(part.size());
  if (n == 0) return all;
  std::vector<model::Outputs<float>> pieces;
  for (int b = 0; b < n; b += chunk) {
    std::vector<int> idx;
    for (int i = b; i < std::min(n, b + chunk); ++i) idx.push_back(i);
    pieces.push_back(net.forward(batch::images(part, idx, size)));
  }
  auto cat = [&](auto member) {
    Tensor<float> acc = pieces[0].*member;
    for (std::size_t i = 1; i < pieces.size(); ++i) acc = Tensor<float>::concat_batch(acc, pieces[i].*member);
    return acc;
  };
  all.main = cat(&model::Outputs<float>::main);
  all.anchor = cat(&model::Outputs<float>::anchor);
  if (!pieces[0].depth.empty()) all.depth = cat(&model::Outputs<float>::depth);
  return all;
}

/// Target-domain (or any split's) main-task metrics at output resolution.
inline metrics::MetricsReport evaluate(Net& net, const batch::PreparedData& pd, data::Domain d, data::Split s) {
  const auto& part = pd.part(d, s);
  if (part.empty()) throw TrainingError(std::string("refusing to evaluate: ") + data::to_string(d) + " " + data::to_string(s) + " split is empty");
  std::vector<int> idx(part.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto out = forward_all(net, part, pd.spec.image_size);
  const auto lab = batch::labels(pd, part, idx, true, false);
  const auto errs = metrics::angular_error_map(out.main, *lab.normals, lab.valid);
  return metrics::aggregate(std::span<const double>(errs));
}

struct TrainResult {
  std::vector<nlohmann::json> log;  ///< JSON-lines records
  double lambda_anchor = 0.0;
  std::int64_t steps = 0;
  std::int64_t stage1_steps = 0;
  std::uint64_t head_checksum_stage1_end = 0;
  std::uint64_t head_checksum_final = 0;
  std::optional<adv::AdaptHealth> health;
};

/// One training run. Owns the optimiser, discriminators, samplers and histories,
/// and can serialise all of it to resume a run mid-way.
class Trainer {
 public:
  Trainer(RegimeConfig cfg, const batch::PreparedData& pd, Net& net, std::ostream* log_stream = nullptr)
      : cfg_(std::move(cfg)), pd_(pd), net_(net), log_stream_(log_stream), optimizer_(cfg_.optimizer),
        sampler_(pd, cfg_.seed), health_(static_cast<std::size_t>(cfg_.health_window)) {
    check_consistency(cfg_, pd_);
    vis_ = visibility(cfg_.regime);
    lambda_ = cfg_.weights.lambda_anchor;
    const int width = net_.config().decoder_width;
    adv::DiscriminatorConfig dc = cfg_.discriminator;
    dc.init_seed = data::splitmix64(cfg_.seed ^ 0xD15Cu);
    switch (cfg_.da_mode) {
      case DaMode::none: break;
      case DaMode::feature: discs_.emplace_back(adv::DiscKind::feature, width, dc, "disc.features"); break;
      case DaMode::output: discs_.emplace_back(adv::DiscKind::output, 3, dc, "disc.output"); break;
      case DaMode::multi_level:
        discs_.emplace_back(adv::DiscKind::feature, width, dc, "disc.up1");
        dc.init_seed = data::splitmix64(dc.init_seed);
        discs_.emplace_back(adv::DiscKind::feature, width, dc, "disc.up2");
        break;
    }
    // With an empty stage 1 nothing is frozen and HeadFreeze is plain MTL+both.
    if (cfg_.regime == Regime::headfreeze && cfg_.stage1.max_steps > 0) stage_ = Stage::first;
  }

  /// Runs to completion (or resumes an interrupted run).
  TrainResult run() {
    if (!calibrated_) calibrate();
    while (!done_) step_once();
    result_.steps = step_;
    result_.head_checksum_final = net_.checksum(nn::Partition::head);
    result_.lambda_anchor = lambda_;
    if (!discs_.empty()) result_.health = health_;
    return result_;
  }

  /// Advances one optimisation step (plus any stage bookkeeping). Returns false when finished.
  bool step_once() {
    if (!calibrated_) calibrate();
    if (done_) return false;
    const StageConfig& sc = stage_config();
    if (stage_step_ >= sc.max_steps) {
      finish_stage();
      return !done_;
    }
    train_step();
    ++stage_step_;
    ++step_;
    if (sc.eval_every > 0 && stage_step_ % sc.eval_every == 0) {
      validate_and_track();
      if (sc.early_stop && stage_switch_criterion(stop_history_, sc.patience, sc.rel_tol)) finish_stage();
    }
    return !done_;
  }

  [[nodiscard]] Stage stage() const { return stage_; }
  [[nodiscard]] std::int64_t step() const { return step_; }
  [[nodiscard]] bool done() const { return done_; }
  [[nodiscard]] double lambda_anchor() const { return lambda_; }
  [[nodiscard]] const TrainResult& result() const { return result_; }
  [[nodiscard]] const adv::AdaptHealth& health() const { return health_; }
  std::vector<adv::Discriminator<float>>& discriminators() { return discs_; }

  // ---- resumable state ----------------------------------------------------

  [[nodiscard]] nlohmann::json state() const {
    nlohmann::json j;
    j["step"] = step_;
    j["stage_step"] = stage_step_;
    j["stage"] = static_cast<int>(stage_);
    j["done"] = done_;
    j["calibrated"] = calibrated_;
    j["lambda"] = lambda_;
    j["sampler"] = sampler_.state();
    j["stop_history"] = stop_history_;
    j["select_history"] = select_history_;
    j["best_score"] = best_score_;
    j["best_step"] = best_step_;
    j["best_snapshot"] = best_snapshot_;
    j["head_updates"] = net_.head_updates();
    j["head_frozen"] = net_.head_frozen();
    j["params"] = snapshot(const_cast<Net&>(net_).parameters());
    j["optimizer"] = slots_json(optimizer_);
    j["health"] = health_.history();
    j["result"] = {{"stage1_steps", result_.stage1_steps}, {"head_checksum_stage1_end", result_.head_checksum_stage1_end}};
    j["log"] = result_.log;
    nlohmann::json ds = nlohmann::json::array();
    for (auto& d : const_cast<std::vector<adv::Discriminator<float>>&>(discs_)) {
      ds.push_back({{"params", snapshot(d.parameters())}, {"optimizer", slots_json(d.optimizer())}});
    }
    j["discriminators"] = ds;
    j["config"] = cfg_;
    return j;
  }

  void restore(const nlohmann::json& j) {
    step_ = j.at("step");
    stage_step_ = j.at("stage_step");
    stage_ = static_cast<Stage>(j.at("stage").get<int>());
    done_ = j.at("done");
    calibrated_ = j.at("calibrated");
    lambda_ = j.at("lambda");
    sampler_.restore(j.at("sampler"));
    stop_history_ = j.at("stop_history").get<std::vector<double>>();
    select_history_ = j.at("select_history").get<std::vector<double>>();
    best_score_ = j.at("best_score").is_null() ? std::numeric_limits<double>::infinity() : j.at("best_score").get<double>();
    best_step_ = j.at("best_step");
    best_snapshot_ = j.at("best_snapshot");
    load_snapshot(net_.parameters(), j.at("params"));
    load_slots(optimizer_, j.at("optimizer"));
    for (double a : j.at("health")) health_.record(a);
    result_.stage1_steps = j.at("result").at("stage1_steps");
    result_.head_checksum_stage1_end = j.at("result").at("head_checksum_stage1_end");
    result_.log = j.at("log").get<std::vector<nlohmann::json>>();
    const auto& ds = j.at("discriminators");
    if (ds.size() != discs_.size()) throw TrainingError("run state discriminator count mismatch");
    for (std::size_t i = 0; i < discs_.size(); ++i) {
      load_snapshot(discs_[i].parameters(), ds[i].at("params"));
      load_slots(discs_[i].optimizer(), ds[i].at("optimizer"));
    }
    net_.restore_training_flags(j.at("head_frozen"), j.at("head_updates"));
  }

  void save_state(const std::filesystem::path& path) const {
    const auto bytes = nlohmann::json::to_cbor(state());
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw TrainingError("cannot write run state " + path.string());
  }
  void load_state(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TrainingError("cannot read run state " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    restore(nlohmann::json::from_cbor(bytes));
  }

 private:
  using Snapshot = std::map<std::string, std::vector<float>>;

  static Snapshot snapshot(const std::vector<nn::Param<float>*>& params) {
    Snapshot s;
    for (auto* p : params) s[p->name].assign(p->value.vec().begin(), p->value.vec().end());
    return s;
  }
  static void load_snapshot(const std::vector<nn::Param<float>*>& params, const nlohmann::json& j) {
    for (auto* p : params) {
      auto v = j.at(p->name).get<std::vector<float>>();
      if (v.size() != p->value.size()) throw TrainingError("snapshot size mismatch for " + p->name);
      p->value.vec().assign(v.begin(), v.end());
    }
  }
  static nlohmann::json slots_json(const optim::Optimizer<float>& opt) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, s] : opt.slots()) j[name] = {{"m", s.m}, {"v", s.v}, {"t", s.t}};
    return j;
  }
  static void load_slots(optim::Optimizer<float>& opt, const nlohmann::json& j) {
    opt.slots().clear();
    for (auto it = j.begin(); it != j.end(); ++it) {
      auto& s = opt.slots()[it.key()];
      s.m = it.value().at("m").get<std::vector<double>>();
      s.v = it.value().at("v").get<std::vector<double>>();
      s.t = it.value().at("t");
    }
  }

  [[nodiscard]] const StageConfig& stage_config() const {
    switch (stage_) {
      case Stage::single: return cfg_.regime == Regime::headfreeze ? cfg_.stage2 : cfg_.single;
      case Stage::first: return cfg_.stage1;
      case Stage::second: return cfg_.stage2;
    }
    return cfg_.single;
  }

  [[nodiscard]] bool target_forward_needed() const {
    if (cfg_.da_mode != DaMode::none && stage_ != Stage::first) return true;
    for (Term t : active_terms(cfg_.regime, stage_))
      if (t == Term::target_anchor || t == Term::target_main) return true;
    return false;
  }

  /// Label batch for one domain, restricted to what the regime may see.
  loss::BatchLabels<float> visible_labels(data::Domain d, const std::vector<batch::PreparedSample>& part,
                                          const std::vector<int>& idx) const {
    const bool src = d == data::Domain::source;
    const bool main = src ? vis_.source_main : vis_.target_main;
    const bool anchor = src ? vis_.source_anchor : vis_.target_anchor;
    return batch::labels(pd_, part, idx, main, anchor);
  }

  /// Lambda equalising the magnitude of the visible anchor losses with the main
  /// loss on one calibration batch at initialisation.
  void calibrate() {
    calibrated_ = true;
    if (!cfg_.weights.calibrate_lambda || !(vis_.source_anchor || vis_.target_anchor)) return;
    using data::Domain;
    using data::Split;
    batch::PairedSampler probe(pd_, data::splitmix64(cfg_.seed ^ 0xCA1Bu));
    const auto idx = probe.next(cfg_.batch_size);
    const auto& sp = pd_.part(Domain::source, Split::train);
    const auto sl = batch::labels(pd_, sp, idx.source, true, vis_.source_anchor);
    const auto so = net_.forward(batch::images(sp, idx.source, pd_.spec.image_size));
    const double main = loss::cosine_normal_loss(so.main, *sl.normals, sl.valid).value;
    double anchor_sum = 0.0;
    int anchor_n = 0;
    auto anchor_value = [&](const loss::BatchLabels<float>& l, const model::Outputs<float>& o) {
      const auto& a = *l.anchor;
      if (a.segmentation()) return loss::segmentation_loss(o.anchor, a.classes, a.mask).value;
      return loss::keypoint_loss(o.anchor, o.depth, a.heatmaps, a.depths, cfg_.weights.depth_weight).value;
    };
    if (vis_.source_anchor) {
      anchor_sum += anchor_value(sl, so);
      ++anchor_n;
    }
    if (vis_.target_anchor) {
      const auto& tp = pd_.part(Domain::target, Split::train);
      const auto tl = batch::labels(pd_, tp, idx.target, false, true);
      const auto to = net_.forward(batch::images(tp, idx.target, pd_.spec.image_size));
      anchor_sum += anchor_value(tl, to);
      ++anchor_n;
    }
    const double anchor = anchor_sum / anchor_n;
    if (anchor > 0.0 && std::isfinite(anchor) && std::isfinite(main)) lambda_ = cfg_.weights.main_scale * main / anchor;
    emit({{"event", "calibrate"}, {"lambda_anchor", lambda_}, {"main", main}, {"anchor", anchor}});
  }

  void train_step() {
    using data::Domain;
    using data::Split;
    const auto idx = sampler_.next(cfg_.batch_size);
    const auto& sp = pd_.part(Domain::source, Split::train);
    const auto& tp = pd_.part(Domain::target, Split::train);
    const int b = cfg_.batch_size;
    const bool with_target = target_forward_needed();

    Tensor<float> input = batch::images(sp, idx.source, pd_.spec.image_size);
    if (with_target) input = Tensor<float>::concat_batch(input, batch::images(tp, idx.target, pd_.spec.image_size));
    net_.zero_grad();
    const auto out = net_.forward(input);
    const auto so = with_target ? slice_outputs(out, 0, b) : out;
    const auto to = with_target ? slice_outputs(out, b, b) : model::Outputs<float>{};

    const auto sl = visible_labels(Domain::source, sp, idx.source);
    const auto tl = with_target ? visible_labels(Domain::target, tp, idx.target) : loss::BatchLabels<float>{};
    LossWeights w = cfg_.weights;
    w.lambda_anchor = lambda_;
    auto rl = loss::regime_loss(sl, tl, so, to, cfg_.regime, stage_, w);

    nlohmann::json adv_log;
    if (cfg_.da_mode != DaMode::none && stage_ != Stage::first) {
      auto run_disc = [&](adv::Discriminator<float>& d, const Tensor<float>& s, const Tensor<float>& t, Tensor<float>& gs,
                          Tensor<float>& gt) {
        adv::AdversarialResult<float> r;
        try {
          r = adv::adversarial_step(s, t, d, cfg_.weights.lambda_adv, health_);
        } catch (const adv::AdversarialError& e) {
          diverged(e.what());
        }
        if (!r.grad_source.empty()) loss::detail::add_into(gs, r.grad_source, 1.0);
        if (!r.grad_target.empty()) loss::detail::add_into(gt, r.grad_target, 1.0);
        rl.total += cfg_.weights.lambda_adv * r.gen_loss;
        adv_log.push_back({{"disc_loss", r.disc_loss}, {"gen_loss", r.gen_loss}, {"accuracy", r.accuracy}});
      };
      switch (cfg_.da_mode) {
        case DaMode::feature:
          run_disc(discs_[0], so.features, to.features, rl.source_grads.features, rl.target_grads.features);
          break;
        case DaMode::output:
          run_disc(discs_[0], so.main, to.main, rl.source_grads.main, rl.target_grads.main);
          break;
        case DaMode::multi_level:
          run_disc(discs_[0], so.up1, to.up1, rl.source_grads.up1, rl.target_grads.up1);
          run_disc(discs_[1], so.up2, to.up2, rl.source_grads.up2, rl.target_grads.up2);
          break;
        case DaMode::none: break;
      }
    }
    if (!std::isfinite(rl.total)) diverged("non-finite training loss");

    model::OutputGrads<float> g;
    if (with_target) {
      auto cg = [&](const Tensor<float>& a, const Tensor<float>& c, const Tensor<float>& like) {
        return concat_grads(a, c, b, b, like.shape());
      };
      g.main = cg(rl.source_grads.main, rl.target_grads.main, so.main);
      g.anchor = cg(rl.source_grads.anchor, rl.target_grads.anchor, so.anchor);
      if (!so.depth.empty()) g.depth = cg(rl.source_grads.depth, rl.target_grads.depth, so.depth);
      g.features = cg(rl.source_grads.features, rl.target_grads.features, so.features);
      g.up1 = cg(rl.source_grads.up1, rl.target_grads.up1, so.up1);
      g.up2 = cg(rl.source_grads.up2, rl.target_grads.up2, so.up2);
    } else {
      g = std::move(rl.source_grads);
    }
    net_.backward(g);
    optimizer_.step(net_.trainable_parameters());
    net_.record_update();
    last_good_ok_ = true;

    if (cfg_.log_every > 0 && (step_ + 1) % cfg_.log_every == 0) {
      nlohmann::json rec{{"step", step_ + 1}, {"stage", stage_name()}, {"total", rl.total}, {"terms", rl.terms}};
      if (!adv_log.is_null()) {
        rec["adversarial"] = adv_log;
        rec["adapt_health"] = health_.to_json();
      }
      emit(rec);
    }
  }

  [[nodiscard]] std::string stage_name() const {
    switch (stage_) {
      case Stage::single: return "single";
      case Stage::first: return "1";
      case Stage::second: return "2";
    }
    return "?";
  }

  struct ValSignals {
    double select = 0.0;  ///< model-selection score (active terms on validation labels)
    double stop = 0.0;    ///< plateau signal for this stage
    std::map<std::string, double> terms;
  };

  /// Validation losses. Target main labels are read only when the regime sees them.
  std::optional<ValSignals> validation() {
    using data::Domain;
    using data::Split;
    const auto& sv = pd_.part(Domain::source, Split::val);
    const auto& tv = pd_.part(Domain::target, Split::val);
    if (sv.empty()) return std::nullopt;
    ValSignals v;
    const auto terms = active_terms(cfg_.regime, stage_);
    auto has = [&](Term t) { return std::find(terms.begin(), terms.end(), t) != terms.end(); };
    std::vector<int> si(sv.size()), ti(tv.size());
    std::iota(si.begin(), si.end(), 0);
    std::iota(ti.begin(), ti.end(), 0);
    const auto so = forward_all(net_, sv, pd_.spec.image_size);
    const auto sl = visible_labels(Domain::source, sv, si);
    auto anchor_value = [&](const loss::BatchLabels<float>& l, const model::Outputs<float>& o) {
      const auto& a = *l.anchor;
      if (a.segmentation()) return loss::segmentation_loss(o.anchor, a.classes, a.mask).value;
      return loss::keypoint_loss(o.anchor, o.depth, a.heatmaps, a.depths, cfg_.weights.depth_weight).value;
    };
    v.terms["val_L_Sm"] = loss::cosine_normal_loss(so.main, *sl.normals, sl.valid).value;
    v.select = cfg_.weights.main_scale * v.terms["val_L_Sm"];
    if (has(Term::source_anchor)) {
      v.terms["val_L_Sa"] = anchor_value(sl, so);
      v.select += lambda_ * v.terms["val_L_Sa"];
    }
    const bool need_tv = has(Term::target_anchor) || has(Term::target_main);
    if (need_tv && !tv.empty()) {
      const auto to = forward_all(net_, tv, pd_.spec.image_size);
      const auto tl = visible_labels(Domain::target, tv, ti);
      if (has(Term::target_anchor)) {
        v.terms["val_L_Ta"] = anchor_value(tl, to);
        v.select += lambda_ * v.terms["val_L_Ta"];
      }
      if (has(Term::target_main)) {
        v.terms["val_L_Tm"] = loss::cosine_normal_loss(to.main, *tl.normals, tl.valid).value;
        v.select += cfg_.weights.main_scale * v.terms["val_L_Tm"];
      }
    }
    if (stage_ == Stage::first) {
      v.stop = v.terms["val_L_Sm"];
    } else if (stage_ == Stage::second && v.terms.count("val_L_Ta")) {
      v.stop = v.terms["val_L_Ta"];
    } else {
      v.stop = v.select;
    }
    return v;
  }

  void validate_and_track() {
    const auto v = validation();
    if (!v) return;
    if (!std::isfinite(v->select)) diverged("non-finite validation loss");
    stop_history_.push_back(v->stop);
    select_history_.push_back(v->select);
    if (v->select < best_score_) {
      best_score_ = v->select;
      best_snapshot_ = snapshot(net_.parameters());
      best_step_ = step_;
    }
    nlohmann::json rec{{"step", step_}, {"stage", stage_name()}, {"val", v->terms}, {"select", v->select}};
    emit(rec);
  }

  void finish_stage() {
    const StageConfig& sc = stage_config();
    if (sc.select_best && !best_snapshot_.empty()) {
      for (auto* p : net_.parameters()) {
        const auto& v = best_snapshot_.at(p->name);
        p->value.vec().assign(v.begin(), v.end());
      }
      emit({{"event", "restore_best"}, {"stage", stage_name()}, {"best_step", best_step_}, {"select", best_score_}});
    }
    if (stage_ == Stage::first) {
      result_.stage1_steps = step_;
      net_.set_frozen(nn::Partition::head);
      result_.head_checksum_stage1_end = net_.checksum(nn::Partition::head);
      emit({{"event", "freeze_head"}, {"step", step_}, {"head_checksum", result_.head_checksum_stage1_end}});
      stage_ = Stage::second;
      stage_step_ = 0;
      stop_history_.clear();
      select_history_.clear();
      best_snapshot_.clear();
      best_score_ = std::numeric_limits<double>::infinity();
      return;
    }
    done_ = true;
    emit({{"event", "done"}, {"step", step_}});
  }

  [[noreturn]] void diverged(const std::string& why) {
    if (!best_snapshot_.empty()) {
      for (auto* p : net_.parameters()) {
        const auto& v = best_snapshot_.at(p->name);
        p->value.vec().assign(v.begin(), v.end());
      }
    }
    emit({{"event", "diverged"}, {"step", step_}, {"reason", why}});
    throw DivergenceError(why + " at step " + std::to_string(step_) + "; model restored to last good snapshot", step_);
  }

  void emit(nlohmann::json rec) {
    if (log_stream_) *log_stream_ << rec.dump() << "\n";
    result_.log.push_back(std::move(rec));
  }

  RegimeConfig cfg_;
  const batch::PreparedData& pd_;
  Net& net_;
  std::ostream* log_stream_;
  optim::Optimizer<float> optimizer_;
  batch::PairedSampler sampler_;
  adv::AdaptHealth health_;
  std::vector<adv::Discriminator<float>> discs_;
  Visibility vis_{};
  double lambda_ = 1.0;
  Stage stage_ = Stage::single;
  std::int64_t step_ = 0, stage_step_ = 0, best_step_ = 0;
  bool done_ = false, calibrated_ = false, last_good_ok_ = false;
  std::vector<double> stop_history_, select_history_;
  double best_score_ = std::numeric_limits<double>::infinity();
  Snapshot best_snapshot_;
  TrainResult result_;
};

/// Convenience wrapper: trains `net` in place under `cfg`.
inline TrainResult train(const RegimeConfig& cfg, const batch::PreparedData& pd, Net& net, std::ostream* log = nullptr) {
  Trainer t(cfg, pd, net, log);
  return t.run();
}

/// Model configuration matching a dataset.
inline model::ModelConfig model_config_for(const data::ToyWorldSpec& spec, model::ModelConfig base, std::uint64_t seed) {
  base.image_size = spec.image_size;
  base.anchor_channels = spec.anchor_channels();
  base.depth_branch = spec.anchor_kind == data::AnchorKind::keypoints;
  base.init_seed = data::splitmix64(seed ^ 0x1417u);
  return base;
}

}  // namespace tada::train
