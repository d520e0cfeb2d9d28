#pragma once

// Procedural paired-domain generator. Every scene is a height field built
// from compact primitives plus a global planar tilt; surface normals,
// segmentation and keypoint labels are computed analytically from the same
// geometry, and the two domains differ only in rendering style and tilt range.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "tada/tensor.hpp"

namespace tada::data {

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Domain { source = 0, target = 1 };
enum class Split { train = 0, val = 1, test = 2 };
enum class AnchorKind { segmentation, keypoints };
enum class PrimitiveKind { bump = 0, ramp = 1, ridge = 2 };

inline constexpr std::array<Domain, 2> kDomains{Domain::source, Domain::target};
inline constexpr std::array<Split, 3> kSplits{Split::train, Split::val, Split::test};

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }
inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}
inline const char* to_string(AnchorKind a) {
  return a == AnchorKind::segmentation ? "segmentation" : "keypoints";
}
inline const char* to_string(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::bump: return "bump";
    case PrimitiveKind::ramp: return "ramp";
    case PrimitiveKind::ridge: return "ridge";
  }
  return "?";
}

/// Rendering appearance of one domain.
struct Style {
  double texture_freq = 1.5;  ///< grating cycles per scene unit
  double texture_amp = 0.1;   ///< albedo modulation depth in [0, 1]
  double noise_sigma = 0.01;  ///< additive Gaussian pixel noise
  double light_elevation_min_deg = 45.0;
  double light_elevation_max_deg = 70.0;
  double light_azimuth_deg = 135.0;
  double light_azimuth_spread_deg = 30.0;  ///< half-width of the uniform azimuth range
  std::array<double, 3> tint{1.0, 1.0, 1.0};
  double ambient = 0.25;
};

/// Global tilt angle range, in degrees, drawn independently about both axes.
struct TiltRange {
  double min_deg = -10.0;
  double max_deg = 10.0;
};

struct PoseShift {
  TiltRange source{-40.0, 40.0};
  TiltRange target{-10.0, 10.0};
};

struct ToyWorldSpec {
  int image_size = 64;
  int n_train = 256;
  int n_val = 32;
  int n_test = 64;
  int primitives_min = 2;
  int primitives_max = 4;
  std::vector<PrimitiveKind> kinds{PrimitiveKind::bump, PrimitiveKind::ramp, PrimitiveKind::ridge};
  double amplitude_min = 0.15;
  double amplitude_max = 0.35;
  double radius_min = 0.2;
  double radius_max = 0.4;
  AnchorKind anchor_kind = AnchorKind::segmentation;
  int n_keypoints = 3;
  int n_classes = 4;
  double heatmap_sigma = 1.0;  ///< in output-map pixels
  Style source_style{};
  Style target_style{};
  PoseShift pose_shift{};
  int border = 1;                          ///< invalid frame width in pixels
  double target_dropout_fraction = 0.05;   ///< missing-depth blobs, target domain only
  double source_dropout_fraction = 0.0;
  std::uint64_t seed = 1;

  [[nodiscard]] int split_size(Split s) const {
    switch (s) {
      case Split::train: return n_train;
      case Split::val: return n_val;
      case Split::test: return n_test;
    }
    return 0;
  }
  [[nodiscard]] const Style& style(Domain d) const {
    return d == Domain::source ? source_style : target_style;
  }
  [[nodiscard]] const TiltRange& tilt(Domain d) const {
    return d == Domain::source ? pose_shift.source : pose_shift.target;
  }
  /// Channels of the anchor head output.
  [[nodiscard]] int anchor_channels() const {
    return anchor_kind == AnchorKind::segmentation ? n_classes : n_keypoints;
  }
};

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::bump;
  double cx = 0.0, cy = 0.0;
  double amplitude = 0.25;
  double radius = 0.3;  ///< support radius (across-axis radius for ridges)
  double length = 0.6;  ///< along-axis radius, ridges only
  double angle = 0.0;   ///< orientation of ramps and ridges, radians

  [[nodiscard]] double extent() const {
    return kind == PrimitiveKind::ridge ? std::max(radius, length) : radius;
  }
};

/// Height and analytic gradient of a scene point.
struct SurfacePoint {
  double z = 0.0;
  double dzdx = 0.0;
  double dzdy = 0.0;
};

/// Height-field scene: z(x,y) = sum of primitives + tilt_x * x + tilt_y * y.
/// Scene coordinates span [-1, 1] on both axes; y grows with the row index.
struct Scene {
  std::vector<Primitive> primitives;
  double tilt_x = 0.0;  ///< tan of the tilt angle about the y axis
  double tilt_y = 0.0;

  /// Contribution of primitive `p` and its gradient; zero outside its support.
  [[nodiscard]] static SurfacePoint evaluate(const Primitive& p, double x, double y) {
    const double dx = x - p.cx, dy = y - p.cy;
    const double c = std::cos(p.angle), s = std::sin(p.angle);
    SurfacePoint out;
    switch (p.kind) {
      case PrimitiveKind::bump: {
        // a (1 - r^2/R^2)^2
        const double r2 = p.radius * p.radius;
        const double q = (dx * dx + dy * dy) / r2;
        if (q >= 1.0) return out;
        const double w = 1.0 - q;
        out.z = p.amplitude * w * w;
        const double dq = -4.0 * p.amplitude * w / r2;  // d z / d(dx) = dq * dx
        out.dzdx = dq * dx;
        out.dzdy = dq * dy;
        return out;
      }
      case PrimitiveKind::ramp: {
        // a (1 + t)/2 (1 - r^2/R^2)^2 with t the offset along the ramp axis over R
        const double r2 = p.radius * p.radius;
        const double q = (dx * dx + dy * dy) / r2;
        if (q >= 1.0) return out;
        const double w = 1.0 - q;
        const double t = (c * dx + s * dy) / p.radius;
        const double lin = 0.5 * (1.0 + t);
        out.z = p.amplitude * lin * w * w;
        const double dlin_dx = 0.5 * c / p.radius, dlin_dy = 0.5 * s / p.radius;
        const double dw2 = -4.0 * w / r2;
        out.dzdx = p.amplitude * (dlin_dx * w * w + lin * dw2 * dx);
        out.dzdy = p.amplitude * (dlin_dy * w * w + lin * dw2 * dy);
        return out;
      }
      case PrimitiveKind::ridge: {
        // elliptical bump with semi-axes (length, radius)
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        const double l2 = p.length * p.length, r2 = p.radius * p.radius;
        const double q = u * u / l2 + v * v / r2;
        if (q >= 1.0) return out;
        const double w = 1.0 - q;
        out.z = p.amplitude * w * w;
        const double du = -4.0 * p.amplitude * w * u / l2;
        const double dv = -4.0 * p.amplitude * w * v / r2;
        out.dzdx = du * c - dv * s;
        out.dzdy = du * s + dv * c;
        return out;
      }
    }
    return out;
  }

  [[nodiscard]] SurfacePoint surface(double x, double y) const {
    SurfacePoint acc{tilt_x * x + tilt_y * y, tilt_x, tilt_y};
    for (const auto& p : primitives) {
      const SurfacePoint s = evaluate(p, x, y);
      acc.z += s.z;
      acc.dzdx += s.dzdx;
      acc.dzdy += s.dzdy;
    }
    return acc;
  }

  [[nodiscard]] double height(double x, double y) const { return surface(x, y).z; }

  /// normalize(-dz/dx, -dz/dy, 1).
  [[nodiscard]] std::array<double, 3> normal(double x, double y) const {
    const SurfacePoint s = surface(x, y);
    const double len = std::sqrt(s.dzdx * s.dzdx + s.dzdy * s.dzdy + 1.0);
    return {-s.dzdx / len, -s.dzdy / len, 1.0 / len};
  }

  /// Index of the primitive owning (x, y), or -1 for background. Ownership
  /// goes to the largest contribution among primitives whose support holds the point.
  [[nodiscard]] int owner(double x, double y) const {
    int best = -1;
    double best_z = 0.0;
    for (std::size_t i = 0; i < primitives.size(); ++i) {
      const Primitive& p = primitives[i];
      const double dx = x - p.cx, dy = y - p.cy;
      double q = 0.0;
      if (p.kind == PrimitiveKind::ridge) {
        const double c = std::cos(p.angle), s = std::sin(p.angle);
        const double u = c * dx + s * dy, v = -s * dx + c * dy;
        q = u * u / (p.length * p.length) + v * v / (p.radius * p.radius);
      } else {
        q = (dx * dx + dy * dy) / (p.radius * p.radius);
      }
      if (q >= 1.0) continue;
      const double z = evaluate(p, x, y).z;
      if (best < 0 || z > best_z) {
        best = static_cast<int>(i);
        best_z = z;
      }
    }
    return best;
  }

  /// Apex of a primitive in scene coordinates.
  [[nodiscard]] static std::array<double, 2> apex(const Primitive& p) {
    if (p.kind == PrimitiveKind::ramp) {
      // maximum of (1 + t)/2 (1 - t^2)^2 along the ramp axis is at t = 1/5
      return {p.cx + 0.2 * p.radius * std::cos(p.angle), p.cy + 0.2 * p.radius * std::sin(p.angle)};
    }
    return {p.cx, p.cy};
  }
};

inline double pixel_to_scene(double pix, int size) { return (pix + 0.5) / size * 2.0 - 1.0; }
inline double scene_to_pixel(double s, int size) { return (s + 1.0) * 0.5 * size - 0.5; }

struct SegLabel {
  int size = 0;
  std::vector<std::uint8_t> classes;  ///< row-major size x size
};

struct Keypoint {
  float u = 0.0f;  ///< column, pixel units (pixel centres at integers)
  float v = 0.0f;  ///< row
  float depth = 0.0f;  ///< apex height, scene units
};

struct KeypointLabel {
  int image_size = 0;
  std::vector<Keypoint> points;
};

using AnchorLabel = std::variant<SegLabel, KeypointLabel>;

struct DomainSample {
  int size = 0;
  std::vector<float> image;    ///< H x W x 3 in [0, 1]
  std::vector<float> normals;  ///< H x W x 3 unit vectors
  std::vector<std::uint8_t> valid;
  AnchorLabel anchor;
  Domain domain = Domain::source;
  Split split = Split::train;
  int index = 0;
  double tilt_x_deg = 0.0;
  double tilt_y_deg = 0.0;
  std::array<double, 3> light{0.0, 0.0, 1.0};
};

/// Both domains, all splits.
struct Dataset {
  ToyWorldSpec spec;
  std::array<std::array<std::vector<DomainSample>, 3>, 2> parts;

  std::vector<DomainSample>& part(Domain d, Split s) {
    return parts[static_cast<int>(d)][static_cast<int>(s)];
  }
  [[nodiscard]] const std::vector<DomainSample>& part(Domain d, Split s) const {
    return parts[static_cast<int>(d)][static_cast<int>(s)];
  }
  [[nodiscard]] std::size_t total() const {
    std::size_t n = 0;
    for (const auto& dom : parts)
      for (const auto& p : dom) n += p.size();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Validation

inline void validate_style(const Style& s, const char* domain) {
  const std::string where = std::string(domain) + " style: ";
  if (!(s.texture_amp >= 0.0 && s.texture_amp <= 1.0)) throw SpecError(where + "texture_amp outside [0,1]");
  if (!(s.noise_sigma >= 0.0)) throw SpecError(where + "noise_sigma must be >= 0");
  if (!(s.ambient >= 0.0 && s.ambient <= 1.0)) throw SpecError(where + "ambient outside [0,1]");
  if (s.light_elevation_min_deg > s.light_elevation_max_deg)
    throw SpecError(where + "light elevation range inverted");
  const bool no_texture = s.texture_amp == 0.0 || s.texture_freq == 0.0;
  const bool no_shading = s.ambient >= 1.0;
  const bool dark = std::all_of(s.tint.begin(), s.tint.end(), [](double t) { return t == 0.0; });
  if ((no_texture && no_shading && s.noise_sigma == 0.0) || (dark && s.noise_sigma == 0.0)) {
    throw SpecError(where + "degenerate style produces zero-variance images");
  }
}

inline void validate(const ToyWorldSpec& spec) {
  if (spec.image_size < 16 || spec.image_size % 4 != 0)
    throw SpecError("image_size must be >= 16 and divisible by 4");
  if (spec.n_train < 0 || spec.n_val < 0 || spec.n_test < 0)
    throw SpecError("split sizes must be non-negative");
  if (spec.kinds.empty()) throw SpecError("at least one primitive kind is required");
  if (spec.primitives_min < 0 || spec.primitives_max < spec.primitives_min)
    throw SpecError("invalid primitive count range");
  if (!(spec.amplitude_min > 0.0 && spec.amplitude_max >= spec.amplitude_min))
    throw SpecError("invalid amplitude range");
  if (!(spec.radius_min > 0.0 && spec.radius_max >= spec.radius_min && spec.radius_max <= 1.0))
    throw SpecError("invalid radius range");
  if (spec.anchor_kind == AnchorKind::keypoints) {
    if (spec.n_keypoints < 3) throw SpecError("keypoint anchors need K >= 3");
  } else if (spec.n_classes < 2) {
    throw SpecError("segmentation anchors need C >= 2");
  }
  if (!(spec.heatmap_sigma > 0.0)) throw SpecError("heatmap_sigma must be > 0");
  if (spec.border < 0 || 2 * spec.border >= spec.image_size) throw SpecError("invalid border");
  for (double f : {spec.target_dropout_fraction, spec.source_dropout_fraction})
    if (!(f >= 0.0 && f < 0.5)) throw SpecError("dropout fraction must be in [0, 0.5)");
  for (const TiltRange& t : {spec.pose_shift.source, spec.pose_shift.target})
    if (!(t.min_deg <= t.max_deg && t.min_deg > -80.0 && t.max_deg < 80.0))
      throw SpecError("tilt range must be ordered and within (-80, 80) degrees");
  validate_style(spec.source_style, "source");
  validate_style(spec.target_style, "target");
}

// ---------------------------------------------------------------------------
// Generation

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for one scene; independent of generation order.
inline std::uint64_t scene_seed(std::uint64_t seed, Domain d, Split s, int index) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ (static_cast<std::uint64_t>(d) + 1));
  h = splitmix64(h ^ (static_cast<std::uint64_t>(s) + 17));
  return splitmix64(h ^ static_cast<std::uint64_t>(index));
}

/// Segmentation class of a primitive kind; 0 is background.
inline int class_of(PrimitiveKind kind, int n_classes) {
  return static_cast<int>(kind) % (n_classes - 1) + 1;
}

inline Scene sample_geometry(const ToyWorldSpec& spec, Domain domain, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  Scene scene;
  const TiltRange& tilt = spec.tilt(domain);
  constexpr double deg = std::numbers::pi / 180.0;
  scene.tilt_x = std::tan(uniform(tilt.min_deg, tilt.max_deg) * deg);
  scene.tilt_y = std::tan(uniform(tilt.min_deg, tilt.max_deg) * deg);

  const bool keypoints = spec.anchor_kind == AnchorKind::keypoints;
  const int count = keypoints
                        ? spec.n_keypoints
                        : std::uniform_int_distribution<int>(spec.primitives_min, spec.primitives_max)(rng);
  const int nk = static_cast<int>(spec.kinds.size());
  for (int i = 0; i < count; ++i) {
    Primitive p;
    p.kind = keypoints ? spec.kinds[i % nk] : spec.kinds[std::uniform_int_distribution<int>(0, nk - 1)(rng)];
    p.amplitude = uniform(spec.amplitude_min, spec.amplitude_max);
    p.radius = uniform(spec.radius_min, spec.radius_max);
    p.angle = uniform(0.0, 2.0 * std::numbers::pi);
    if (p.kind == PrimitiveKind::ridge) {
      p.length = p.radius * uniform(1.6, 2.2);
      p.radius *= 0.6;
    }
    // Rejection-sample a non-overlapping centre, shrinking the primitive when crowded.
    bool placed = false;
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      if (attempt > 0 && attempt % 50 == 0) {
        p.radius *= 0.85;
        p.length *= 0.85;
      }
      p.cx = uniform(-0.7, 0.7);
      p.cy = uniform(-0.7, 0.7);
      placed = std::all_of(scene.primitives.begin(), scene.primitives.end(), [&](const Primitive& o) {
        const double d = std::hypot(o.cx - p.cx, o.cy - p.cy);
        return d > o.extent() + p.extent() + 0.02;
      });
    }
    if (placed) {
      scene.primitives.push_back(p);
    } else if (keypoints) {
      // Keypoint anchors need exactly K primitives; fall back to a tiny one.
      p.radius = p.length = 0.05;
      scene.primitives.push_back(p);
    }
  }
  if (keypoints) {
    // Channel order: by kind, then left to right.
    std::stable_sort(scene.primitives.begin(), scene.primitives.end(), [](const Primitive& a, const Primitive& b) {
      if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
      return a.cx < b.cx;
    });
  }
  return scene;
}

/// Light direction for one scene, unit vector in the camera frame.
inline std::array<double, 3> sample_light(const Style& style, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double deg = std::numbers::pi / 180.0;
  const double elev = (style.light_elevation_min_deg +
                       (style.light_elevation_max_deg - style.light_elevation_min_deg) * unit(rng)) * deg;
  const double az = (style.light_azimuth_deg + style.light_azimuth_spread_deg * (2.0 * unit(rng) - 1.0)) * deg;
  return {std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev)};
}

/// Rasterises the labels of a scene (normals, ownership, keypoints) at `size`.
inline void rasterize_labels(const Scene& scene, const ToyWorldSpec& spec, int size, DomainSample& out) {
  const std::size_t npx = static_cast<std::size_t>(size) * size;
  out.size = size;
  out.normals.assign(npx * 3, 0.0f);
  for (int i = 0; i < size; ++i) {
    const double y = pixel_to_scene(i, size);
    for (int j = 0; j < size; ++j) {
      const double x = pixel_to_scene(j, size);
      const auto n = scene.normal(x, y);
      const std::size_t px = static_cast<std::size_t>(i) * size + j;
      for (int c = 0; c < 3; ++c) out.normals[px * 3 + c] = static_cast<float>(n[c]);
    }
  }
  if (spec.anchor_kind == AnchorKind::segmentation) {
    SegLabel seg{size, std::vector<std::uint8_t>(npx, 0)};
    for (int i = 0; i < size; ++i) {
      const double y = pixel_to_scene(i, size);
      for (int j = 0; j < size; ++j) {
        const int o = scene.owner(pixel_to_scene(j, size), y);
        if (o >= 0) {
          seg.classes[static_cast<std::size_t>(i) * size + j] =
              static_cast<std::uint8_t>(class_of(scene.primitives[o].kind, spec.n_classes));
        }
      }
    }
    out.anchor = std::move(seg);
  } else {
    KeypointLabel kp{size, {}};
    for (const auto& p : scene.primitives) {
      const auto a = Scene::apex(p);
      kp.points.push_back({static_cast<float>(scene_to_pixel(a[0], size)),
                           static_cast<float>(scene_to_pixel(a[1], size)),
                           static_cast<float>(scene.height(a[0], a[1]))});
    }
    out.anchor = std::move(kp);
  }
}

/// Valid-pixel mask: border frame excluded, plus random dropout blobs.
inline std::vector<std::uint8_t> make_valid_mask(int size, int border, double dropout, std::mt19937_64& rng) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(size) * size, 0);
  for (int i = border; i < size - border; ++i)
    for (int j = border; j < size - border; ++j) mask[static_cast<std::size_t>(i) * size + j] = 1;
  if (dropout <= 0.0) return mask;
  const auto target = static_cast<std::size_t>(dropout * size * size);
  std::size_t dropped = 0;
  std::uniform_int_distribution<int> pos(0, size - 1);
  std::uniform_real_distribution<double> rad(1.5, std::max(2.0, size / 12.0));
  for (int guard = 0; dropped < target && guard < 10000; ++guard) {
    const int ci = pos(rng), cj = pos(rng);
    const double r = rad(rng);
    const int ri = static_cast<int>(std::ceil(r));
    for (int i = std::max(0, ci - ri); i <= std::min(size - 1, ci + ri) && dropped < target; ++i)
      for (int j = std::max(0, cj - ri); j <= std::min(size - 1, cj + ri) && dropped < target; ++j) {
        auto& m = mask[static_cast<std::size_t>(i) * size + j];
        if (m && (i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r) {
          m = 0;
          ++dropped;
        }
      }
  }
  return mask;
}

/// Shaded, textured, noisy RGB render of a labelled scene.
inline std::vector<float> render_image(const Scene& scene, const DomainSample& labels, const Style& style,
                                       const std::array<double, 3>& light, std::mt19937_64& rng) {
  const int size = labels.size;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double b1 = unit(rng) * std::numbers::pi, b2 = unit(rng) * std::numbers::pi;
  const double ph1 = unit(rng) * 2.0 * std::numbers::pi, ph2 = unit(rng) * 2.0 * std::numbers::pi;
  std::normal_distribution<double> noise(0.0, 1.0);
  const double k = 2.0 * std::numbers::pi * style.texture_freq;
  std::vector<float> img(static_cast<std::size_t>(size) * size * 3);
  for (int i = 0; i < size; ++i) {
    const double y = pixel_to_scene(i, size);
    for (int j = 0; j < size; ++j) {
      const double x = pixel_to_scene(j, size);
      const std::size_t px = static_cast<std::size_t>(i) * size + j;
      const float* n = &labels.normals[px * 3];
      const double shade = std::max(0.0, n[0] * light[0] + n[1] * light[1] + n[2] * light[2]);
      const double g1 = std::sin(k * (x * std::cos(b1) + y * std::sin(b1)) + ph1);
      const double g2 = std::sin(k * (x * std::cos(b2) + y * std::sin(b2)) + ph2);
      const double tex = 1.0 - style.texture_amp * 0.25 * (2.0 + g1 + g2);
      const double lit = style.ambient + (1.0 - style.ambient) * shade;
      for (int c = 0; c < 3; ++c) {
        const double v = style.tint[c] * tex * lit + style.noise_sigma * noise(rng);
        img[px * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  (void)scene;
  return img;
}

/// Fully generated sample for an explicit scene.
inline DomainSample render_sample(const Scene& scene, const ToyWorldSpec& spec, Domain domain, Split split,
                                  int index, std::mt19937_64& rng) {
  DomainSample s;
  s.domain = domain;
  s.split = split;
  s.index = index;
  constexpr double rad2deg = 180.0 / std::numbers::pi;
  s.tilt_x_deg = std::atan(scene.tilt_x) * rad2deg;
  s.tilt_y_deg = std::atan(scene.tilt_y) * rad2deg;
  rasterize_labels(scene, spec, spec.image_size, s);
  const double dropout = domain == Domain::target ? spec.target_dropout_fraction : spec.source_dropout_fraction;
  s.valid = make_valid_mask(spec.image_size, spec.border, dropout, rng);
  s.light = sample_light(spec.style(domain), rng);
  s.image = render_image(scene, s, spec.style(domain), s.light, rng);
  return s;
}

inline DomainSample generate_sample(const ToyWorldSpec& spec, Domain domain, Split split, int index) {
  std::mt19937_64 rng(scene_seed(spec.seed, domain, split, index));
  const Scene scene = sample_geometry(spec, domain, rng);
  return render_sample(scene, spec, domain, split, index, rng);
}

/// Scene geometry for a dataset sample (re-derived from the seed).
inline Scene regenerate_scene(const ToyWorldSpec& spec, Domain domain, Split split, int index) {
  std::mt19937_64 rng(scene_seed(spec.seed, domain, split, index));
  return sample_geometry(spec, domain, rng);
}

inline double pixel_variance(const std::vector<DomainSample>& samples) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples)
    for (float v : s.image) {
      sum += v;
      sq += static_cast<double>(v) * v;
      ++n;
    }
  if (n == 0) return 0.0;
  const double mean = sum / n;
  return sq / n - mean * mean;
}

inline Dataset generate_dataset(const ToyWorldSpec& spec) {
  validate(spec);
  Dataset ds;
  ds.spec = spec;
  for (Domain d : kDomains) {
    for (Split s : kSplits) {
      auto& part = ds.part(d, s);
      const int n = spec.split_size(s);
      part.reserve(n);
      for (int i = 0; i < n; ++i) part.push_back(generate_sample(spec, d, s, i));
    }
    std::vector<DomainSample> all;
    for (Split s : kSplits) all.insert(all.end(), ds.part(d, s).begin(), ds.part(d, s).end());
    if (!all.empty() && pixel_variance(all) < 1e-10) {
      throw SpecError(std::string("degenerate style: ") + to_string(d) + " images have zero variance");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Keypoint heatmaps

struct HeatmapSet {
  int size = 0;
  std::vector<float> maps;   ///< K x size x size
  std::vector<bool> clamped; ///< keypoints moved onto the nearest valid pixel
};

/// Unnormalised Gaussians, peak 1 at each keypoint rescaled to `out_size`.
inline HeatmapSet render_keypoint_heatmaps(const KeypointLabel& label, int out_size, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("heatmap sigma must be > 0");
  HeatmapSet hm;
  hm.size = out_size;
  const std::size_t plane = static_cast<std::size_t>(out_size) * out_size;
  hm.maps.assign(label.points.size() * plane, 0.0f);
  hm.clamped.assign(label.points.size(), false);
  const double scale = static_cast<double>(out_size) / label.image_size;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t k = 0; k < label.points.size(); ++k) {
    double u = (label.points[k].u + 0.5) * scale - 0.5;
    double v = (label.points[k].v + 0.5) * scale - 0.5;
    const double hi = out_size - 1.0;
    if (u < 0.0 || u > hi || v < 0.0 || v > hi) {
      u = std::clamp(std::round(u), 0.0, hi);
      v = std::clamp(std::round(v), 0.0, hi);
      hm.clamped[k] = true;
    }
    float* m = hm.maps.data() + k * plane;
    for (int i = 0; i < out_size; ++i)
      for (int j = 0; j < out_size; ++j) {
        const double d2 = (j - u) * (j - u) + (i - v) * (i - v);
        m[static_cast<std::size_t>(i) * out_size + j] = static_cast<float>(std::exp(-d2 * inv));
      }
  }
  return hm;
}

// ---------------------------------------------------------------------------
// Labels at network-output resolution (half the image size)

/// 2x2 block mean of the normals, renormalised; a block is valid only when all four pixels are.
inline void downsample_normals(const DomainSample& s, std::vector<float>& normals, std::vector<std::uint8_t>& valid) {
  const int out = s.size / 2;
  normals.assign(static_cast<std::size_t>(out) * out * 3, 0.0f);
  valid.assign(static_cast<std::size_t>(out) * out, 0);
  for (int i = 0; i < out; ++i)
    for (int j = 0; j < out; ++j) {
      double acc[3] = {0, 0, 0};
      bool ok = true;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj) {
          const std::size_t px = static_cast<std::size_t>(2 * i + di) * s.size + (2 * j + dj);
          ok = ok && s.valid[px];
          for (int c = 0; c < 3; ++c) acc[c] += s.normals[px * 3 + c];
        }
      const double len = std::sqrt(acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]);
      const std::size_t o = static_cast<std::size_t>(i) * out + j;
      for (int c = 0; c < 3; ++c) normals[o * 3 + c] = len > 0 ? static_cast<float>(acc[c] / len) : 0.0f;
      valid[o] = ok ? 1 : 0;
    }
}

/// 2x2 block majority; ties go to the smallest class id.
inline std::vector<std::uint8_t> downsample_segmentation(const SegLabel& seg) {
  const int out = seg.size / 2;
  std::vector<std::uint8_t> res(static_cast<std::size_t>(out) * out);
  for (int i = 0; i < out; ++i)
    for (int j = 0; j < out; ++j) {
      std::uint8_t v[4];
      for (int d = 0; d < 4; ++d) v[d] = seg.classes[static_cast<std::size_t>(2 * i + d / 2) * seg.size + 2 * j + d % 2];
      std::uint8_t best = v[0];
      int best_count = 0;
      for (int a = 0; a < 4; ++a) {
        const int cnt = static_cast<int>(std::count(v, v + 4, v[a]));
        if (cnt > best_count || (cnt == best_count && v[a] < best)) {
          best = v[a];
          best_count = cnt;
        }
      }
      res[static_cast<std::size_t>(i) * out + j] = best;
    }
  return res;
}

// ---------------------------------------------------------------------------
// JSON

NLOHMANN_JSON_SERIALIZE_ENUM(AnchorKind, {{AnchorKind::segmentation, "segmentation"},
                                          {AnchorKind::keypoints, "keypoints"}})
NLOHMANN_JSON_SERIALIZE_ENUM(PrimitiveKind, {{PrimitiveKind::bump, "bump"},
                                             {PrimitiveKind::ramp, "ramp"},
                                             {PrimitiveKind::ridge, "ridge"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Style, texture_freq, texture_amp, noise_sigma,
                                                light_elevation_min_deg, light_elevation_max_deg,
                                                light_azimuth_deg, light_azimuth_spread_deg, tint, ambient)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TiltRange, min_deg, max_deg)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PoseShift, source, target)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyWorldSpec, image_size, n_train, n_val, n_test,
                                                primitives_min, primitives_max, kinds, amplitude_min,
                                                amplitude_max, radius_min, radius_max, anchor_kind,
                                                n_keypoints, n_classes, heatmap_sigma, source_style,
                                                target_style, pose_shift, border, target_dropout_fraction,
                                                source_dropout_fraction, seed)

/// Stable hash of a spec (hash of its canonical JSON dump).
inline std::string spec_hash(const ToyWorldSpec& spec) {
  const std::string s = nlohmann::json(spec).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(s.data(), s.size())));
  return buf;
}

}  // namespace tada::data
