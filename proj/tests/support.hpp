#pragma once

// Independent oracles and fixtures shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>

#include <unistd.h>

#include "tada/datagen.hpp"

namespace tada::testing {

inline double angle_deg(const double* a, const double* b) {
  const double na = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
  const double nb = std::sqrt(b[0] * b[0] + b[1] * b[1] + b[2] * b[2]);
  const double d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
  return std::acos(std::clamp(d, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

/// Mean angle between analytic normals and normals from central differences of the height.
inline double finite_difference_error(const data::Scene& scene, int size) {
  const double h = 1e-5;
  double sum = 0.0;
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double x = data::pixel_to_scene(j, size), y = data::pixel_to_scene(i, size);
      const double zx = (scene.height(x + h, y) - scene.height(x - h, y)) / (2 * h);
      const double zy = (scene.height(x, y + h) - scene.height(x, y - h)) / (2 * h);
      const double fd[3] = {-zx, -zy, 1.0};
      const auto an = scene.normal(x, y);
      sum += angle_deg(fd, an.data());
    }
  return sum / (static_cast<double>(size) * size);
}

/// Same comparison with central differences of the height sampled on the pixel grid (interior pixels).
inline double grid_difference_error(const data::Scene& scene, int size) {
  const double step = 2.0 / size;
  double sum = 0.0;
  for (int i = 1; i < size - 1; ++i)
    for (int j = 1; j < size - 1; ++j) {
      const double x = data::pixel_to_scene(j, size), y = data::pixel_to_scene(i, size);
      const double zx = (scene.height(x + step, y) - scene.height(x - step, y)) / (2 * step);
      const double zy = (scene.height(x, y + step) - scene.height(x, y - step)) / (2 * step);
      const double fd[3] = {-zx, -zy, 1.0};
      const auto an = scene.normal(x, y);
      sum += angle_deg(fd, an.data());
    }
  return sum / (static_cast<double>(size - 2) * (size - 2));
}

struct Coherence {
  std::size_t boundary = 0;
  std::size_t coherent = 0;
  [[nodiscard]] double fraction() const { return boundary ? static_cast<double>(coherent) / boundary : 0.0; }
};

/// Class-boundary pixels whose 3x3 neighbourhood holds a normal jump above `threshold_deg`.
inline void boundary_coherence(const data::DomainSample& smp, double threshold_deg, Coherence& acc) {
  const auto& seg = std::get<data::SegLabel>(smp.anchor);
  const int n = smp.size;
  for (int i = 1; i < n - 1; ++i)
    for (int j = 1; j < n - 1; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * n + j;
      bool edge = false;
      double worst = 0.0;
      const double a[3] = {smp.normals[p * 3], smp.normals[p * 3 + 1], smp.normals[p * 3 + 2]};
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const std::size_t q = static_cast<std::size_t>(i + di) * n + (j + dj);
          edge = edge || seg.classes[q] != seg.classes[p];
          const double b[3] = {smp.normals[q * 3], smp.normals[q * 3 + 1], smp.normals[q * 3 + 2]};
          worst = std::max(worst, angle_deg(a, b));
        }
      if (!edge) continue;
      ++acc.boundary;
      acc.coherent += worst > threshold_deg;
    }
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tada_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace tada::testing
