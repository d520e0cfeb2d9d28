#pragma once

// Encoder-decoder multitask network.
//
//   image (H) -> stem s2 (H/2) -> enc1 (H/4) -> enc2 (H/8) -> enc3 (H/16)
//   top-down: up1 (H/8, skip enc2) -> up2 (H/4, skip enc1) -> up3 (H/2, skip stem)
//   heads: main (3 ch, unit normals) and anchor (C logits or K heatmaps) on up3,
//          optional depth branch: GAP(up2) -> FC 256 -> FC K
//
// Everything after the second upsampling layer (up3 with its lateral skip
// weights, both output layers, the depth branch) is tagged `head`; the rest
// is `trunk`.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/nn.hpp"
#include "tada/tensor.hpp"

namespace tada::model {

using nn::Partition;

struct ModelConfig {
  int image_size = 64;
  int stem_width = 16;
  std::vector<int> encoder_widths{32, 64, 128};  ///< three downsampling stages
  int decoder_width = 64;
  int anchor_channels = 4;
  bool depth_branch = false;  ///< keypoint depth regression
  int fc_hidden = 256;
  std::uint64_t init_seed = 1;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_size, stem_width, encoder_widths,
                                                decoder_width, anchor_channels, depth_branch, fc_hidden,
                                                init_seed)

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct Outputs {
  Tensor<T> main;      ///< [N, 3, H/2, W/2] unit normals
  Tensor<T> anchor;    ///< [N, A, H/2, W/2] raw logits or heatmaps
  Tensor<T> depth;     ///< [N, K, 1, 1]; empty without a depth branch
  Tensor<T> features;  ///< second-to-last layer activations [N, D, H/2, W/2]
  Tensor<T> up1;       ///< first upsampling layer output
  Tensor<T> up2;       ///< second upsampling layer output
};

/// Upstream gradients; empty tensors contribute nothing.
template <class T>
struct OutputGrads {
  Tensor<T> main, anchor, depth, features, up1, up2;
};

/// Feature probe sample: one feature vector per requested location.
struct FeatureProbe {
  int feature_size = 0;
  std::vector<std::array<int, 2>> locations;  ///< (u, v) = (column, row) in feature coordinates
  std::vector<std::vector<float>> vectors;
};

template <class T = float>
class MultiTaskNet {
 public:
  explicit MultiTaskNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.encoder_widths.size() != 3) throw ModelError("encoder needs exactly three stages");
    if (cfg_.image_size < 16 || cfg_.image_size % 4 != 0) throw ModelError("image_size must be >=16 and divisible by 4");
    const int s = cfg_.stem_width, d = cfg_.decoder_width;
    const auto& e = cfg_.encoder_widths;
    const auto trunk = Partition::trunk, head = Partition::head;
    stem_ = {"stem", 3, s, 3, 2, trunk};
    enc_[0] = {"enc1.down", s, e[0], 3, 2, trunk};
    enc_[1] = {"enc1.conv", e[0], e[0], 3, 1, trunk};
    enc_[2] = {"enc2.down", e[0], e[1], 3, 2, trunk};
    enc_[3] = {"enc2.conv", e[1], e[1], 3, 1, trunk};
    enc_[4] = {"enc3.down", e[1], e[2], 3, 2, trunk};
    enc_[5] = {"enc3.conv", e[2], e[2], 3, 1, trunk};
    top_ = {"top.lateral", e[2], d, 1, 1, trunk};
    lat_[0] = {"up1.lateral", e[1], d, 1, 1, trunk};
    up_[0] = {"up1.conv", d, d, 3, 1, trunk};
    lat_[1] = {"up2.lateral", e[0], d, 1, 1, trunk};
    up_[1] = {"up2.conv", d, d, 3, 1, trunk};
    lat_[2] = {"up3.lateral", s, d, 1, 1, head};
    up_[2] = {"up3.conv", d, d, 3, 1, head};
    out_main_ = {"out.main", d, 3, 3, 1, head};
    out_anchor_ = {"out.anchor", d, cfg_.anchor_channels, 3, 1, head};
    if (cfg_.depth_branch) {
      fc1_ = nn::Linear<T>("depth.fc1", d, cfg_.fc_hidden, head);
      fc2_ = nn::Linear<T>("depth.fc2", cfg_.fc_hidden, cfg_.anchor_channels, head);
    }
    std::mt19937_64 rng(cfg_.init_seed);
    for (auto* c : convs()) c->init(rng);
    out_main_.init(rng, 1.0);
    out_anchor_.init(rng, 1.0);
    if (cfg_.depth_branch) {
      fc1_.init(rng);
      fc2_.init(rng, 1.0);
    }
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] int output_size() const { return cfg_.image_size / 2; }

  Outputs<T> forward(const Tensor<T>& images) {
    const Shape4 s = images.shape();
    if (s.c != 3 || s.h != cfg_.image_size || s.w != cfg_.image_size) {
      throw ShapeError("forward: expected [N,3," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + "] input, got " + s.str());
    }
    Outputs<T> o;
    x_stem_ = act_[0].forward(stem_.forward(images));
    Tensor<T> h = x_stem_;
    for (int i = 0; i < 6; ++i) {
      h = enc_act_[i].forward(enc_[i].forward(h));
      if (i == 1) x_e1_ = h;
      if (i == 3) x_e2_ = h;
    }
    const Tensor<T> e3 = h;
    top_out_ = top_.forward(e3);
    const Tensor<T>* skips[3] = {&x_e2_, &x_e1_, &x_stem_};
    Tensor<T> cur = top_out_;
    for (int k = 0; k < 3; ++k) {
      const Shape4 sk = skips[k]->shape();
      up_in_shape_[k] = cur.shape();
      Tensor<T> merged = nn::upsample2x(cur, sk.h, sk.w);
      merged += lat_[k].forward(*skips[k]);
      cur = up_act_[k].forward(up_[k].forward(merged));
      if (k == 0) o.up1 = cur;
      if (k == 1) o.up2 = cur;
    }
    o.features = cur;
    raw_main_ = out_main_.forward(cur);
    o.main = nn::normalize_channels(raw_main_);
    o.anchor = out_anchor_.forward(cur);
    if (cfg_.depth_branch) {
      up2_shape_ = o.up2.shape();
      o.depth = fc2_.forward(fc_act_.forward(fc1_.forward(nn::global_avg_pool(o.up2))));
    }
    return o;
  }

  /// Backpropagates through the most recent forward, accumulating into param grads.
  void backward(const OutputGrads<T>& g) {
    Tensor<T> d;  // gradient w.r.t. the up3 output
    auto accumulate = [](Tensor<T>& acc, const Tensor<T>& add) {
      if (add.empty()) return;
      if (acc.empty()) acc = add;
      else acc += add;
    };
    if (!g.main.empty()) accumulate(d, out_main_.backward(nn::normalize_channels_backward(raw_main_, g.main)));
    if (!g.anchor.empty()) accumulate(d, out_anchor_.backward(g.anchor));
    accumulate(d, g.features);
    Tensor<T> d_up2, d_up1;
    accumulate(d_up2, g.up2);
    accumulate(d_up1, g.up1);
    if (cfg_.depth_branch && !g.depth.empty()) {
      accumulate(d_up2, nn::global_avg_pool_backward(fc1_.backward(fc_act_.backward(fc2_.backward(g.depth))), up2_shape_));
    }
    Tensor<T> d_stem, d_e1, d_e2;
    Tensor<T>* skip_grads[3] = {&d_e2, &d_e1, &d_stem};
    Tensor<T>* level_grads[3] = {&d_up1, &d_up2, &d};
    Tensor<T> dcur;
    for (int k = 2; k >= 0; --k) {
      accumulate(dcur, *level_grads[k]);
      if (dcur.empty()) {
        // Nothing reaches this level from above; still let lower levels run.
        continue;
      }
      Tensor<T> dmerged = up_[k].backward(up_act_[k].backward(std::move(dcur)));
      accumulate(*skip_grads[k], lat_[k].backward(dmerged));
      dcur = nn::upsample2x_backward(dmerged, up_in_shape_[k]);
    }
    if (dcur.empty()) return;
    Tensor<T> dh = top_.backward(dcur);
    for (int i = 5; i >= 0; --i) {
      if (i == 3) dh += d_e2;
      if (i == 1) dh += d_e1;
      dh = enc_[i].backward(enc_act_[i].backward(std::move(dh)));
    }
    dh += d_stem;
    stem_.backward(act_[0].backward(std::move(dh)), false);
  }

  /// All learnable tensors in a fixed order.
  std::vector<nn::Param<T>*> parameters() {
    std::vector<nn::Param<T>*> out;
    for (auto* c : convs()) c->collect(out);
    out_main_.collect(out);
    out_anchor_.collect(out);
    if (cfg_.depth_branch) {
      fc1_.collect(out);
      fc2_.collect(out);
    }
    return out;
  }

  std::vector<nn::Param<T>*> parameters(Partition part) {
    std::vector<nn::Param<T>*> out;
    for (auto* p : parameters())
      if (p->part == part) out.push_back(p);
    return out;
  }

  /// Parameters the optimiser may update: everything, or the trunk once frozen.
  std::vector<nn::Param<T>*> trainable_parameters() {
    return head_frozen_ ? parameters(Partition::trunk) : parameters();
  }

  void zero_grad() {
    for (auto* p : parameters()) p->grad.zero();
  }

  /// Freezes the head. Refused until the head has received at least one update.
  void set_frozen(Partition group) {
    if (group != Partition::head) throw ModelError("only the head group can be frozen");
    if (head_updates_ == 0) throw ModelError("refusing to freeze an untrained head: run stage 1 first");
    head_frozen_ = true;
  }
  [[nodiscard]] bool head_frozen() const { return head_frozen_; }

  /// Called by the trainer after each optimiser step.
  void record_update() {
    if (!head_frozen_) ++head_updates_;
  }
  [[nodiscard]] std::int64_t head_updates() const { return head_updates_; }
  /// Used when resuming a run.
  void restore_training_flags(bool frozen, std::int64_t updates) {
    head_frozen_ = frozen;
    head_updates_ = updates;
  }

  [[nodiscard]] std::uint64_t checksum(Partition part) {
    std::uint64_t h = 1469598103934665603ULL;
    for (auto* p : parameters(part)) h = fnv1a(p->value.data(), p->value.size() * sizeof(T), h);
    return h;
  }

  FeatureProbe extract_features(const Tensor<T>& image, const std::vector<std::array<int, 2>>& locations) {
    if (image.shape().n != 1) throw ShapeError("extract_features expects a single image");
    const Outputs<T> o = forward(image);
    const Shape4 fs = o.features.shape();
    std::string bad;
    for (std::size_t i = 0; i < locations.size(); ++i) {
      const auto [u, v] = locations[i];
      if (u < 0 || v < 0 || u >= fs.w || v >= fs.h) bad += (bad.empty() ? "" : ",") + std::to_string(i);
    }
    if (!bad.empty()) throw ModelError("probe locations out of feature-map bounds at index " + bad);
    FeatureProbe probe;
    probe.feature_size = fs.h;
    probe.locations = locations;
    for (const auto& [u, v] : locations) {
      std::vector<float> vec(fs.c);
      for (int c = 0; c < fs.c; ++c) vec[c] = static_cast<float>(o.features(0, c, v, u));
      probe.vectors.push_back(std::move(vec));
    }
    return probe;
  }

  // ---- checkpoints -------------------------------------------------------
  // Layout: magic "TADACKPT", u32 version, u32 json length, json (config echo,
  // head_frozen, head_updates), u32 param count, then per param: u32 name
  // length, name bytes, u8 partition, i32 shape[4], value bytes (scalar type T).

  void save(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ModelError("cannot write checkpoint " + path.string());
    auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    out.write("TADACKPT", 8);
    put(kCheckpointVersion);
    const nlohmann::json meta{{"config", cfg_},
                              {"head_frozen", head_frozen_},
                              {"head_updates", head_updates_},
                              {"scalar_bytes", sizeof(T)}};
    const std::string js = meta.dump();
    put(static_cast<std::uint32_t>(js.size()));
    out.write(js.data(), static_cast<std::streamsize>(js.size()));
    const auto params = parameters();
    put(static_cast<std::uint32_t>(params.size()));
    for (auto* p : params) {
      put(static_cast<std::uint32_t>(p->name.size()));
      out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
      put(static_cast<std::uint8_t>(p->part));
      const Shape4 s = p->value.shape();
      for (int v : {s.n, s.c, s.h, s.w}) put(static_cast<std::int32_t>(v));
      out.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(T)));
    }
    if (!out) throw ModelError("checkpoint write failed: " + path.string());
  }

  static MultiTaskNet load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ModelError("cannot open checkpoint " + path.string());
    auto get = [&](auto& v) {
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      if (!in) throw ModelError("truncated checkpoint " + path.string());
    };
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "TADACKPT") throw ModelError("not a checkpoint: " + path.string());
    std::uint32_t version = 0, len = 0;
    get(version);
    if (version != kCheckpointVersion) throw ModelError("checkpoint version mismatch");
    get(len);
    std::string js(len, '\0');
    in.read(js.data(), len);
    const auto meta = nlohmann::json::parse(js);
    if (meta.at("scalar_bytes").get<std::size_t>() != sizeof(T)) throw ModelError("checkpoint scalar type mismatch");
    MultiTaskNet net(meta.at("config").get<ModelConfig>());
    std::uint32_t count = 0;
    get(count);
    auto params = net.parameters();
    if (count != params.size()) throw ModelError("checkpoint parameter count mismatch");
    for (auto* p : params) {
      std::uint32_t nlen = 0;
      get(nlen);
      std::string name(nlen, '\0');
      in.read(name.data(), nlen);
      std::uint8_t part = 0;
      get(part);
      std::int32_t dims[4];
      for (auto& d : dims) get(d);
      const Shape4 s{dims[0], dims[1], dims[2], dims[3]};
      if (name != p->name || !(s == p->value.shape()) || part != static_cast<std::uint8_t>(p->part)) {
        throw ModelError("checkpoint tensor '" + name + "' does not match model tensor '" + p->name + "' " +
                         p->value.shape().str());
      }
      in.read(reinterpret_cast<char*>(p->value.data()), static_cast<std::streamsize>(p->value.size() * sizeof(T)));
      if (!in) throw ModelError("truncated checkpoint " + path.string());
    }
    net.head_frozen_ = meta.at("head_frozen").get<bool>();
    net.head_updates_ = meta.at("head_updates").get<std::int64_t>();
    return net;
  }

  static constexpr std::uint32_t kCheckpointVersion = 1;

 private:
  std::vector<nn::Conv2d<T>*> convs() {
    std::vector<nn::Conv2d<T>*> out{&stem_};
    for (auto& c : enc_) out.push_back(&c);
    out.push_back(&top_);
    for (int k = 0; k < 3; ++k) {
      out.push_back(&lat_[k]);
      out.push_back(&up_[k]);
    }
    return out;
  }

  ModelConfig cfg_;
  nn::Conv2d<T> stem_;
  std::array<nn::Conv2d<T>, 6> enc_;
  nn::Conv2d<T> top_;
  std::array<nn::Conv2d<T>, 3> lat_, up_;
  nn::Conv2d<T> out_main_, out_anchor_;
  nn::Linear<T> fc1_, fc2_;
  std::array<nn::LeakyRelu<T>, 1> act_{};
  std::array<nn::LeakyRelu<T>, 6> enc_act_{};
  std::array<nn::LeakyRelu<T>, 3> up_act_{};
  nn::LeakyRelu<T> fc_act_{};

  Tensor<T> x_stem_, x_e1_, x_e2_, top_out_, raw_main_;
  std::array<Shape4, 3> up_in_shape_{};
  Shape4 up2_shape_{};
  bool head_frozen_ = false;
  std::int64_t head_updates_ = 0;
};

/// Packs HWC float images into an NCHW batch.
template <class T>
Tensor<T> images_to_batch(const std::vector<const std::vector<float>*>& images, int size) {
  Tensor<T> t({static_cast<int>(images.size()), 3, size, size});
  for (int n = 0; n < static_cast<int>(images.size()); ++n)
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j)
        for (int c = 0; c < 3; ++c)
          t(n, c, i, j) = static_cast<T>((*images[n])[(static_cast<std::size_t>(i) * size + j) * 3 + c]);
  return t;
}

}  // namespace tada::model
