#pragma once

// Converts generated samples into network-ready arrays at output resolution
// and assembles batches. Hidden labels are never copied into a batch.

#include <algorithm>
#include <array>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "tada/datagen.hpp"
#include "tada/losses.hpp"
#include "tada/model.hpp"

namespace tada::batch {

struct PreparedSample {
  std::vector<float> image;        ///< 3 x S x S (CHW)
  std::vector<float> normals;      ///< 3 x s x s at output resolution
  std::vector<std::uint8_t> valid; ///< s x s
  std::vector<std::uint8_t> classes;
  std::vector<float> heatmaps;     ///< K x s x s
  std::vector<float> depths;       ///< K
};

struct PreparedData {
  data::ToyWorldSpec spec;
  int out_size = 0;
  std::array<std::array<std::vector<PreparedSample>, 3>, 2> parts;

  [[nodiscard]] const std::vector<PreparedSample>& part(data::Domain d, data::Split s) const {
    return parts[static_cast<int>(d)][static_cast<int>(s)];
  }
  std::vector<PreparedSample>& part(data::Domain d, data::Split s) {
    return parts[static_cast<int>(d)][static_cast<int>(s)];
  }
  [[nodiscard]] bool segmentation() const { return spec.anchor_kind == data::AnchorKind::segmentation; }
};

inline PreparedSample prepare_sample(const data::DomainSample& s, const data::ToyWorldSpec& spec) {
  PreparedSample p;
  const int size = s.size, out = size / 2;
  p.image.resize(static_cast<std::size_t>(3) * size * size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j)
      for (int c = 0; c < 3; ++c)
        p.image[(static_cast<std::size_t>(c) * size + i) * size + j] = s.image[(static_cast<std::size_t>(i) * size + j) * 3 + c];
  std::vector<float> hwc;
  data::downsample_normals(s, hwc, p.valid);
  p.normals.resize(hwc.size());
  const std::size_t plane = static_cast<std::size_t>(out) * out;
  for (std::size_t px = 0; px < plane; ++px)
    for (int c = 0; c < 3; ++c) p.normals[c * plane + px] = hwc[px * 3 + c];
  if (const auto* seg = std::get_if<data::SegLabel>(&s.anchor)) {
    p.classes = data::downsample_segmentation(*seg);
  } else {
    const auto& kp = std::get<data::KeypointLabel>(s.anchor);
    p.heatmaps = data::render_keypoint_heatmaps(kp, out, spec.heatmap_sigma).maps;
    for (const auto& k : kp.points) p.depths.push_back(k.depth);
  }
  return p;
}

inline PreparedData prepare(const data::Dataset& ds) {
  PreparedData pd;
  pd.spec = ds.spec;
  pd.out_size = ds.spec.image_size / 2;
  for (auto d : data::kDomains)
    for (auto s : data::kSplits)
      for (const auto& smp : ds.part(d, s)) pd.part(d, s).push_back(prepare_sample(smp, ds.spec));
  return pd;
}

inline Tensor<float> images(const std::vector<PreparedSample>& part, const std::vector<int>& idx, int size) {
  Tensor<float> t({static_cast<int>(idx.size()), 3, size, size});
  const std::size_t per = static_cast<std::size_t>(3) * size * size;
  for (std::size_t n = 0; n < idx.size(); ++n)
    std::copy(part[idx[n]].image.begin(), part[idx[n]].image.end(), t.data() + n * per);
  return t;
}

/// Labels for the given samples. `with_main` / `with_anchor` implement label visibility.
inline loss::BatchLabels<float> labels(const PreparedData& pd, const std::vector<PreparedSample>& part,
                                       const std::vector<int>& idx, bool with_main, bool with_anchor) {
  loss::BatchLabels<float> b;
  const int n = static_cast<int>(idx.size()), s = pd.out_size;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  if (with_main) {
    Tensor<float> normals({n, 3, s, s});
    for (int k = 0; k < n; ++k) {
      const auto& src = part[idx[k]];
      std::copy(src.normals.begin(), src.normals.end(), normals.sample(k));
      b.valid.insert(b.valid.end(), src.valid.begin(), src.valid.end());
    }
    b.normals = std::move(normals);
  }
  if (with_anchor) {
    loss::AnchorTargets<float> a;
    if (pd.segmentation()) {
      for (int k = 0; k < n; ++k) a.classes.insert(a.classes.end(), part[idx[k]].classes.begin(), part[idx[k]].classes.end());
      a.mask.assign(a.classes.size(), 1);
    } else {
      const int kk = pd.spec.n_keypoints;
      a.heatmaps = Tensor<float>({n, kk, s, s});
      a.depths = Tensor<float>({n, kk, 1, 1});
      for (int k = 0; k < n; ++k) {
        std::copy(part[idx[k]].heatmaps.begin(), part[idx[k]].heatmaps.end(), a.heatmaps.data() + k * kk * plane);
        std::copy(part[idx[k]].depths.begin(), part[idx[k]].depths.end(), a.depths.data() + k * kk);
      }
    }
    b.anchor = std::move(a);
  }
  return b;
}

/// Reshuffled-epoch index stream over one split. Falls back to sampling with
/// replacement when a batch is larger than the split.
class EpochSampler {
 public:
  EpochSampler() = default;
  EpochSampler(int n, std::uint64_t seed) : n_(n), rng_(seed) {}

  std::vector<int> next(int batch) {
    if (n_ <= 0) throw std::invalid_argument("cannot sample from an empty split");
    std::vector<int> out;
    out.reserve(batch);
    if (batch > n_) {
      if (!warned_) {
        std::cerr << "warning: batch size " << batch << " exceeds split size " << n_ << "; sampling with replacement\n";
        warned_ = true;
      }
      std::uniform_int_distribution<int> pick(0, n_ - 1);
      for (int i = 0; i < batch; ++i) out.push_back(pick(rng_));
      return out;
    }
    while (static_cast<int>(out.size()) < batch) {
      if (pos_ >= perm_.size()) reshuffle();
      out.push_back(perm_[pos_++]);
    }
    return out;
  }

  [[nodiscard]] std::string state() const {
    std::ostringstream os;
    os << n_ << ' ' << pos_ << ' ' << warned_ << ' ' << perm_.size();
    for (int v : perm_) os << ' ' << v;
    os << ' ' << rng_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    std::size_t sz = 0;
    is >> n_ >> pos_ >> warned_ >> sz;
    perm_.resize(sz);
    for (auto& v : perm_) is >> v;
    is >> rng_;
    if (!is) throw std::runtime_error("corrupted sampler state");
  }

 private:
  void reshuffle() {
    perm_.resize(n_);
    std::iota(perm_.begin(), perm_.end(), 0);
    std::shuffle(perm_.begin(), perm_.end(), rng_);
    pos_ = 0;
  }

  int n_ = 0;
  std::size_t pos_ = 0;
  bool warned_ = false;
  std::vector<int> perm_;
  std::mt19937_64 rng_;
};

struct PairedIndices {
  std::vector<int> source;
  std::vector<int> target;
};

/// Equal-size batches from both training splits, independent streams per domain.
class PairedSampler {
 public:
  PairedSampler(const PreparedData& pd, std::uint64_t seed)
      : source_(static_cast<int>(pd.part(data::Domain::source, data::Split::train).size()), data::splitmix64(seed ^ 0x5u)),
        target_(static_cast<int>(pd.part(data::Domain::target, data::Split::train).size()), data::splitmix64(seed ^ 0x7u)) {}

  PairedIndices next(int batch) { return {source_.next(batch), target_.next(batch)}; }

  [[nodiscard]] std::string state() const { return source_.state() + "\n" + target_.state(); }
  void restore(const std::string& s) {
    const auto nl = s.find('\n');
    source_.restore(s.substr(0, nl));
    target_.restore(s.substr(nl + 1));
  }

 private:
  EpochSampler source_, target_;
};

}  // namespace tada::batch
