#pragma once

// Unsupervised adaptation add-ons: a gradient reversal layer with feature-level
// domain classifiers, and an output-space discriminator. Domain label 1 is
// source, 0 is target.

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/nn.hpp"
#include "tada/optimizer.hpp"
#include "tada/regime.hpp"

namespace tada::adv {

class AdversarialError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Identity on the forward pass.
template <class T>
Tensor<T> grad_reverse_forward(const Tensor<T>& x) { return x; }

/// Backward of the reversal layer: -lambda_adv times the upstream gradient.
template <class T>
Tensor<T> grad_reverse_backward(const Tensor<T>& upstream, double lambda_adv) {
  if (!(lambda_adv >= 0.0)) throw std::invalid_argument("lambda_adv must be >= 0");
  Tensor<T> g(upstream.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(-lambda_adv * static_cast<double>(upstream[i]));
  return g;
}

enum class DiscKind { feature, output };

/// Mean per-logit BCE beyond which a min-max game counts as diverged (chance is ln 2).
inline constexpr double kRunawayLoss = 1e4;

struct DiscriminatorConfig {
  int width = 64;
  double leaky_slope = 0.2;
  optim::OptimizerConfig optimizer{"adam", 1e-4, 0.99, 0.9, 0.99, 1e-8, 0.0};
  std::uint64_t init_seed = 7;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, width, leaky_slope, optimizer, init_seed)

/// Binary domain classifier. Feature kind: per-location MLP (1x1 convs) over
/// RMS-normalised feature vectors, so the trunk cannot win by rescaling. Output kind: three stride-2 3x3 convs over the output map.
/// Both emit one logit per spatial location.
template <class T = float>
class Discriminator {
 public:
  Discriminator(DiscKind kind, int in_channels, const DiscriminatorConfig& cfg, const std::string& name = "disc")
      : kind_(kind), optimizer_(cfg.optimizer) {
    const int k = kind == DiscKind::feature ? 1 : 3;
    const int stride = kind == DiscKind::feature ? 1 : 2;
    const auto part = nn::Partition::discriminator;
    layers_[0] = {name + ".l1", in_channels, cfg.width, k, stride, part};
    layers_[1] = {name + ".l2", cfg.width, cfg.width, k, stride, part};
    layers_[2] = {name + ".l3", cfg.width, 1, k, kind == DiscKind::feature ? 1 : 2, part};
    acts_ = {nn::LeakyRelu<T>(static_cast<T>(cfg.leaky_slope)), nn::LeakyRelu<T>(static_cast<T>(cfg.leaky_slope))};
    std::mt19937_64 rng(cfg.init_seed);
    layers_[0].init(rng);
    layers_[1].init(rng);
    layers_[2].init(rng, 1.0);
  }

  Tensor<T> forward(const Tensor<T>& x) {
    if (kind_ == DiscKind::feature) scaled_ = nn::rms_normalize(x, rms_);
    Tensor<T> h = acts_[0].forward(layers_[0].forward(kind_ == DiscKind::feature ? scaled_ : x));
    h = acts_[1].forward(layers_[1].forward(h));
    return layers_[2].forward(h);
  }

  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> g = layers_[2].backward(dlogits);
    g = layers_[1].backward(acts_[1].backward(std::move(g)));
    g = layers_[0].backward(acts_[0].backward(std::move(g)));
    return kind_ == DiscKind::feature ? nn::rms_normalize_backward(scaled_, rms_, g) : g;
  }

  std::vector<nn::Param<T>*> parameters() {
    std::vector<nn::Param<T>*> out;
    for (auto& l : layers_) l.collect(out);
    return out;
  }
  void zero_grad() {
    for (auto* p : parameters()) p->grad.zero();
  }
  void update() { optimizer_.step(parameters()); }
  [[nodiscard]] DiscKind kind() const { return kind_; }
  optim::Optimizer<T>& optimizer() { return optimizer_; }

 private:
  DiscKind kind_;
  std::array<nn::Conv2d<T>, 3> layers_;
  std::array<nn::LeakyRelu<T>, 2> acts_{};
  Tensor<T> scaled_;
  std::vector<double> rms_;
  optim::Optimizer<T> optimizer_;
};

/// Rolling discriminator accuracy.
class AdaptHealth {
 public:
  explicit AdaptHealth(std::size_t window = 50, double threshold = 0.55) : window_(window), threshold_(threshold) {}

  void record(double accuracy) {
    if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw AdversarialError("accuracy outside [0,1]");
    history_.push_back(accuracy);
    if (history_.size() > window_) history_.pop_front();
  }
  [[nodiscard]] double rolling_accuracy() const {
    if (history_.empty()) return 0.0;
    double s = 0.0;
    for (double a : history_) s += a;
    return s / static_cast<double>(history_.size());
  }
  /// Fraction of recent steps with accuracy below the threshold.
  [[nodiscard]] double fraction_below() const {
    if (history_.empty()) return 0.0;
    std::size_t n = 0;
    for (double a : history_) n += a < threshold_;
    return static_cast<double>(n) / static_cast<double>(history_.size());
  }
  [[nodiscard]] std::size_t size() const { return history_.size(); }
  [[nodiscard]] const std::deque<double>& history() const { return history_; }
  [[nodiscard]] nlohmann::json to_json() const {
    return {{"rolling_accuracy", rolling_accuracy()}, {"fraction_below_0.55", fraction_below()}, {"window", history_.size()}};
  }

 private:
  std::size_t window_;
  double threshold_;
  std::deque<double> history_;
};

/// Mean binary cross-entropy with logits against a constant domain label,
/// plus the gradient and the number of correctly classified locations.
template <class T>
struct BceResult {
  double loss = 0.0;
  std::size_t correct = 0;
  Tensor<T> grad;
};

template <class T>
BceResult<T> bce_with_logits(const Tensor<T>& logits, double label, double scale) {
  BceResult<T> r;
  r.grad = Tensor<T>(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    // log(1 + exp(-|z|)) + max(z, 0) - z * y
    r.loss += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * label;
    const double p = 1.0 / (1.0 + std::exp(-z));
    r.grad[i] = static_cast<T>((p - label) * scale);
    r.correct += (z > 0.0) == (label > 0.5);
  }
  return r;
}

template <class T>
struct AdversarialResult {
  double disc_loss = 0.0;  ///< discriminator BCE
  double gen_loss = 0.0;   ///< generator-side adversarial term (unweighted)
  double accuracy = 0.0;
  Tensor<T> grad_source;   ///< gradient into the generator's source tensor (may be empty)
  Tensor<T> grad_target;
};

/// One min-max step. Updates the discriminator and returns the generator-side
/// gradients (already scaled by lambda_adv) for the tensors it saw.
///
/// Feature kind: the discriminator classifies reversed features of both
/// domains; the reversal turns its gradient into a confusion signal.
/// Output kind: the generator is pushed so target outputs are classified as
/// source; the discriminator is then trained on detached outputs of both.
template <class T>
AdversarialResult<T> adversarial_step(const Tensor<T>& source, const Tensor<T>& target, Discriminator<T>& disc,
                                      double lambda_adv, AdaptHealth& health) {
  if (source.shape().n != target.shape().n) throw AdversarialError("source and target batches must have equal size");
  AdversarialResult<T> r;
  const int b = source.shape().n;
  const Tensor<T> both = Tensor<T>::concat_batch(grad_reverse_forward(source), grad_reverse_forward(target));
  if (disc.kind() == DiscKind::feature) {
    disc.zero_grad();
    const Tensor<T> logits = disc.forward(both);
    const Tensor<T> ls = logits.slice_batch(0, b), lt = logits.slice_batch(b, b);
    const double scale = 1.0 / static_cast<double>(logits.size());
    auto rs = bce_with_logits(ls, 1.0, scale);
    auto rt = bce_with_logits(lt, 0.0, scale);
    r.disc_loss = (rs.loss + rt.loss) * scale;
    r.gen_loss = -r.disc_loss;
    r.accuracy = static_cast<double>(rs.correct + rt.correct) / static_cast<double>(logits.size());
    const Tensor<T> dx = disc.backward(Tensor<T>::concat_batch(rs.grad, rt.grad));
    disc.update();
    const Tensor<T> rev = grad_reverse_backward(dx, lambda_adv);
    r.grad_source = rev.slice_batch(0, b);
    r.grad_target = rev.slice_batch(b, b);
  } else {
    // Generator side: fool the discriminator on target outputs.
    disc.zero_grad();
    const Tensor<T> lt = disc.forward(target);
    const double gscale = 1.0 / static_cast<double>(lt.size());
    auto g = bce_with_logits(lt, 1.0, gscale);
    r.gen_loss = g.loss * gscale;
    const Tensor<T> dx = disc.backward(g.grad);
    r.grad_target = Tensor<T>(dx.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) r.grad_target[i] = static_cast<T>(lambda_adv * static_cast<double>(dx[i]));
    // Discriminator side on detached outputs.
    disc.zero_grad();
    const Tensor<T> logits = disc.forward(both);
    const Tensor<T> ls = logits.slice_batch(0, b), lt2 = logits.slice_batch(b, b);
    const double scale = 1.0 / static_cast<double>(logits.size());
    auto rs = bce_with_logits(ls, 1.0, scale);
    auto rt = bce_with_logits(lt2, 0.0, scale);
    r.disc_loss = (rs.loss + rt.loss) * scale;
    r.accuracy = static_cast<double>(rs.correct + rt.correct) / static_cast<double>(logits.size());
    disc.backward(Tensor<T>::concat_batch(rs.grad, rt.grad));
    disc.update();
  }
  if (!std::isfinite(r.disc_loss) || !std::isfinite(r.gen_loss)) {
    throw AdversarialError("non-finite adversarial loss (disc " + std::to_string(r.disc_loss) + ", gen " +
                           std::to_string(r.gen_loss) + "); adversarial training diverged");
  }
  if (r.disc_loss > kRunawayLoss) {
    throw AdversarialError("runaway discriminator loss " + std::to_string(r.disc_loss) +
                           "; the generator is inflating its inputs to the discriminator");
  }
  health.record(r.accuracy);
  return r;
}

}  // namespace tada::adv
