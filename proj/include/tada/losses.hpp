#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tada/model.hpp"
#include "tada/regime.hpp"
#include "tada/tensor.hpp"

namespace tada::loss {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a regime asks for a label its batch does not carry.
class LabelVisibilityError : public LossError {
 public:
  using LossError::LossError;
};

/// Scalar loss and its gradient w.r.t. the prediction it was computed on.
template <class T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;
};

/// Mean over valid pixels of (1 - <pred, gt>). `mask` has one entry per pixel ([N, h, w]).
template <class T>
LossResult<T> cosine_normal_loss(const Tensor<T>& pred, const Tensor<T>& gt, std::span<const std::uint8_t> mask) {
  pred.require_same(gt, "cosine_normal_loss");
  const Shape4 s = pred.shape();
  if (s.c != 3) throw LossError("cosine_normal_loss expects 3 channels");
  if (mask.size() != static_cast<std::size_t>(s.n) * s.plane()) throw LossError("cosine_normal_loss: mask size mismatch");
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw LossError("cosine_normal_loss: empty mask");
  LossResult<T> r{0.0, Tensor<T>(s)};
  const double inv = 1.0 / static_cast<double>(count);
  double acc = 0.0;
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        if (!mask[(static_cast<std::size_t>(n) * s.h + i) * s.w + j]) continue;
        double dot = 0.0;
        for (int c = 0; c < 3; ++c) {
          dot += static_cast<double>(pred(n, c, i, j)) * gt(n, c, i, j);
          r.grad(n, c, i, j) = static_cast<T>(-static_cast<double>(gt(n, c, i, j)) * inv);
        }
        acc += 1.0 - dot;
      }
  r.value = acc * inv;
  return r;
}

/// Heatmap MSE plus `depth_weight` times depth MSE. Depth tensors may both be empty.
template <class T>
struct KeypointLossResult {
  double value = 0.0;
  double heatmap = 0.0;
  double depth = 0.0;
  Tensor<T> grad_heatmaps;
  Tensor<T> grad_depths;
};

template <class T>
KeypointLossResult<T> keypoint_loss(const Tensor<T>& pred_heatmaps, const Tensor<T>& pred_depths,
                                    const Tensor<T>& gt_heatmaps, const Tensor<T>& gt_depths,
                                    double depth_weight = 1.0) {
  if (!(pred_heatmaps.shape() == gt_heatmaps.shape())) {
    throw LossError("keypoint_loss: heatmap shape " + pred_heatmaps.shape().str() + " vs " + gt_heatmaps.shape().str());
  }
  if (!(pred_depths.shape() == gt_depths.shape())) {
    throw LossError("keypoint_loss: depth shape " + pred_depths.shape().str() + " vs " + gt_depths.shape().str());
  }
  KeypointLossResult<T> r;
  r.grad_heatmaps = Tensor<T>(pred_heatmaps.shape());
  r.grad_depths = Tensor<T>(pred_depths.shape());
  auto mse = [](const Tensor<T>& p, const Tensor<T>& g, Tensor<T>& grad, double scale) {
    if (p.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(p.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double d = static_cast<double>(p[i]) - g[i];
      acc += d * d;
      grad[i] = static_cast<T>(2.0 * d * inv * scale);
    }
    return acc * inv;
  };
  r.heatmap = mse(pred_heatmaps, gt_heatmaps, r.grad_heatmaps, 1.0);
  r.depth = mse(pred_depths, gt_depths, r.grad_depths, depth_weight);
  r.value = r.heatmap + depth_weight * r.depth;
  return r;
}

/// Mean masked softmax cross-entropy. `classes` and `mask` are [N, h, w].
template <class T>
LossResult<T> segmentation_loss(const Tensor<T>& logits, std::span<const std::uint8_t> classes,
                                std::span<const std::uint8_t> mask) {
  const Shape4 s = logits.shape();
  const std::size_t npx = static_cast<std::size_t>(s.n) * s.plane();
  if (classes.size() != npx || mask.size() != npx) throw LossError("segmentation_loss: label size mismatch");
  for (auto c : classes)
    if (c >= s.c) throw LossError("segmentation_loss: class id " + std::to_string(c) + " >= C=" + std::to_string(s.c));
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw LossError("segmentation_loss: empty mask");
  LossResult<T> r{0.0, Tensor<T>(s)};
  const double inv = 1.0 / static_cast<double>(count);
  double acc = 0.0;
  std::vector<double> prob(s.c);
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        const std::size_t px = (static_cast<std::size_t>(n) * s.h + i) * s.w + j;
        if (!mask[px]) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(logits(n, c, i, j)));
        double z = 0.0;
        for (int c = 0; c < s.c; ++c) {
          prob[c] = std::exp(static_cast<double>(logits(n, c, i, j)) - mx);
          z += prob[c];
        }
        const int y = classes[px];
        acc += std::log(z) + mx - static_cast<double>(logits(n, y, i, j));
        for (int c = 0; c < s.c; ++c) {
          r.grad(n, c, i, j) = static_cast<T>((prob[c] / z - (c == y ? 1.0 : 0.0)) * inv);
        }
      }
  r.value = acc * inv;
  return r;
}

// ---------------------------------------------------------------------------
// Regime loss

/// Anchor targets for one batch: segmentation classes or keypoint heatmaps/depths.
template <class T>
struct AnchorTargets {
  std::vector<std::uint8_t> classes;  ///< [N, h, w], segmentation only
  std::vector<std::uint8_t> mask;     ///< [N, h, w], segmentation only
  Tensor<T> heatmaps;                 ///< [N, K, h, w], keypoints only
  Tensor<T> depths;                   ///< [N, K, 1, 1], keypoints only
  [[nodiscard]] bool segmentation() const { return heatmaps.empty(); }
};

/// Labels of one domain's batch. Absent optionals are labels hidden from the trainer.
template <class T>
struct BatchLabels {
  std::optional<Tensor<T>> normals;     ///< [N, 3, h, w]
  std::vector<std::uint8_t> valid;      ///< [N, h, w], accompanies normals
  std::optional<AnchorTargets<T>> anchor;
};

template <class T>
struct RegimeLossResult {
  double total = 0.0;
  std::map<std::string, double> terms;  ///< unweighted per-term values
  model::OutputGrads<T> source_grads;
  model::OutputGrads<T> target_grads;
};

namespace detail {

template <class T>
void add_into(Tensor<T>& acc, const Tensor<T>& g, double w) {
  if (acc.empty()) acc = Tensor<T>(g.shape());
  for (std::size_t i = 0; i < g.size(); ++i) acc[i] += static_cast<T>(w * static_cast<double>(g[i]));
}

template <class T>
double main_term(const BatchLabels<T>& labels, const model::Outputs<T>& out, model::OutputGrads<T>& grads,
                 double weight, const char* name) {
  if (!labels.normals) throw LabelVisibilityError(std::string(name) + " requested but main labels are hidden");
  auto r = cosine_normal_loss(out.main, *labels.normals, labels.valid);
  add_into(grads.main, r.grad, weight);
  return r.value;
}

template <class T>
double anchor_term(const BatchLabels<T>& labels, const model::Outputs<T>& out, model::OutputGrads<T>& grads,
                   double weight, double depth_weight, const char* name) {
  if (!labels.anchor) throw LabelVisibilityError(std::string(name) + " requested but anchor labels are hidden");
  const auto& a = *labels.anchor;
  if (a.segmentation()) {
    auto r = segmentation_loss(out.anchor, a.classes, a.mask);
    add_into(grads.anchor, r.grad, weight);
    return r.value;
  }
  auto r = keypoint_loss(out.anchor, out.depth, a.heatmaps, a.depths, depth_weight);
  add_into(grads.anchor, r.grad_heatmaps, weight);
  if (!r.grad_depths.empty()) add_into(grads.depth, r.grad_depths, weight);
  return r.value;
}

}  // namespace detail

/// Assembles the configured regime's supervised terms for one source/target batch pair:
/// L = main_scale * L_Sm + lambda (L_Sa + L_Ta) [+ main_scale * L_Tm], restricted to the active terms.
template <class T>
RegimeLossResult<T> regime_loss(const BatchLabels<T>& source, const BatchLabels<T>& target,
                                const model::Outputs<T>& source_out, const model::Outputs<T>& target_out,
                                Regime regime, Stage stage, const LossWeights& w) {
  RegimeLossResult<T> r;
  for (Term t : active_terms(regime, stage)) {
    double value = 0.0, weight = 0.0;
    switch (t) {
      case Term::source_main:
        weight = w.main_scale;
        value = detail::main_term(source, source_out, r.source_grads, weight, "L_Sm");
        break;
      case Term::source_anchor:
        weight = w.lambda_anchor;
        value = detail::anchor_term(source, source_out, r.source_grads, weight, w.depth_weight, "L_Sa");
        break;
      case Term::target_anchor:
        weight = w.lambda_anchor;
        value = detail::anchor_term(target, target_out, r.target_grads, weight, w.depth_weight, "L_Ta");
        break;
      case Term::target_main:
        weight = w.main_scale;
        value = detail::main_term(target, target_out, r.target_grads, weight, "L_Tm");
        break;
    }
    r.terms[to_string(t)] = value;
    r.total += weight * value;
  }
  return r;
}

}  // namespace tada::loss
