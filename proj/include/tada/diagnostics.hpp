#pragma once

// Feature-space and label-space analyses of the two domains.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/batching.hpp"
#include "tada/datagen.hpp"
#include "tada/model.hpp"

namespace tada::diag {

class DiagnosticsError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PcaResult {
  std::array<std::vector<double>, 2> components;  ///< unit directions, largest variance first
  std::array<double, 2> variances{};
  std::vector<double> mean;
  std::vector<std::array<double, 2>> projections;  ///< one per input row
};

/// Top-two principal components of the rows of `x` (pooled, centred).
/// Each direction's largest-magnitude coordinate is made positive.
inline PcaResult pca2(const std::vector<std::vector<double>>& x) {
  if (x.size() < 2) throw DiagnosticsError("PCA needs at least two samples");
  const auto n = static_cast<Eigen::Index>(x.size());
  const auto d = static_cast<Eigen::Index>(x.front().size());
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(x[i].size()) != d) throw DiagnosticsError("PCA rows have different lengths");
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = x[i][j];
  }
  const Eigen::RowVectorXd mu = m.colwise().mean();
  m.rowwise() -= mu;
  const Eigen::MatrixXd cov = (m.transpose() * m) / static_cast<double>(n - 1);
  if (!(cov.trace() > 1e-18)) throw DiagnosticsError("degenerate features: all probed feature vectors are identical");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  PcaResult r;
  r.mean.assign(mu.data(), mu.data() + d);
  for (int k = 0; k < 2; ++k) {
    const Eigen::Index col = d - 1 - k;
    if (col < 0) {
      r.components[k].assign(d, 0.0);
      continue;
    }
    Eigen::VectorXd v = es.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    r.components[k].assign(v.data(), v.data() + d);
    r.variances[k] = std::max(0.0, es.eigenvalues()(col));
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    std::array<double, 2> p{};
    for (int k = 0; k < 2; ++k)
      for (Eigen::Index j = 0; j < d; ++j) p[k] += m(i, j) * r.components[k][j];
    r.projections.push_back(p);
  }
  return r;
}

struct ScatterRow {
  int location = 0;
  data::Domain domain = data::Domain::source;
  int sample = 0;
  double pc1 = 0.0, pc2 = 0.0;
};

/// Per-location feature samples: `locations[s][l]` is the (u, v) probe of
/// location l in sample s, in feature-map coordinates.
struct ProbeSet {
  std::vector<const batch::PreparedSample*> samples;
  std::vector<data::Domain> domains;
  std::vector<std::vector<std::array<int, 2>>> locations;
};

/// Probe locations per sample: keypoints scaled to the feature map, or a
/// fixed 3x3 grid for segmentation anchors.
inline std::vector<std::array<int, 2>> default_locations(const data::DomainSample& s, int feature_size) {
  std::vector<std::array<int, 2>> out;
  if (const auto* kp = std::get_if<data::KeypointLabel>(&s.anchor)) {
    const double scale = static_cast<double>(feature_size) / kp->image_size;
    for (const auto& p : kp->points) {
      const int u = std::clamp(static_cast<int>(std::lround((p.u + 0.5) * scale - 0.5)), 0, feature_size - 1);
      const int v = std::clamp(static_cast<int>(std::lround((p.v + 0.5) * scale - 0.5)), 0, feature_size - 1);
      out.push_back({u, v});
    }
    return out;
  }
  for (int a = 1; a <= 3; ++a)
    for (int b = 1; b <= 3; ++b) out.push_back({b * feature_size / 4, a * feature_size / 4});
  return out;
}

/// PCA of features pooled over both domains, fitted separately per location.
template <class T>
std::vector<ScatterRow> pca_feature_scatter(model::MultiTaskNet<T>& net, const ProbeSet& probes, int image_size) {
  int n_src = 0, n_tgt = 0;
  for (auto d : probes.domains) (d == data::Domain::source ? n_src : n_tgt)++;
  if (n_src < 2 || n_tgt < 2) throw DiagnosticsError("PCA scatter needs at least two samples per domain");
  if (probes.samples.size() != probes.domains.size() || probes.samples.size() != probes.locations.size())
    throw DiagnosticsError("probe set arrays differ in length");
  const std::size_t n_loc = probes.locations.front().size();
  std::vector<std::vector<std::vector<double>>> feats(n_loc);
  for (std::size_t s = 0; s < probes.samples.size(); ++s) {
    if (probes.locations[s].size() != n_loc) throw DiagnosticsError("every sample needs the same number of locations");
    const auto img = batch::images({*probes.samples[s]}, {0}, image_size);
    const auto probe = net.extract_features(img.template cast<T>(), probes.locations[s]);
    for (std::size_t l = 0; l < n_loc; ++l) feats[l].emplace_back(probe.vectors[l].begin(), probe.vectors[l].end());
  }
  std::vector<ScatterRow> rows;
  for (std::size_t l = 0; l < n_loc; ++l) {
    const PcaResult p = pca2(feats[l]);
    for (std::size_t s = 0; s < probes.samples.size(); ++s) {
      rows.push_back({static_cast<int>(l), probes.domains[s], static_cast<int>(s), p.projections[s][0], p.projections[s][1]});
    }
  }
  return rows;
}

inline void write_scatter_csv(std::ostream& os, const std::vector<ScatterRow>& rows) {
  os << "location,domain,sample,pc1,pc2\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g", r.pc1, r.pc2);
    os << r.location << ',' << data::to_string(r.domain) << ',' << r.sample << ',' << buf << '\n';
  }
}

// ---------------------------------------------------------------------------
// Label distributions

/// Exact 1-Wasserstein distance between two empirical distributions.
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw DiagnosticsError("wasserstein1 needs non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(a.front(), b.front()), dist = 0.0;
  while (i < a.size() || j < b.size()) {
    const double next = j >= b.size() || (i < a.size() && a[i] <= b[j]) ? a[i] : b[j];
    dist += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (next - prev);
    prev = next;
    while (i < a.size() && a[i] == next) ++i;
    while (j < b.size() && b[j] == next) ++j;
  }
  return dist;
}

struct Histogram {
  double lo = 0.0, hi = 1.0;
  std::vector<double> density;  ///< fraction of samples per bin
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Histogram, lo, hi, density)

inline Histogram histogram(const std::vector<double>& v, double lo, double hi, int bins) {
  Histogram h{lo, hi, std::vector<double>(bins, 0.0)};
  if (v.empty()) return h;
  for (double x : v) {
    const int b = std::clamp(static_cast<int>((x - lo) / (hi - lo) * bins), 0, bins - 1);
    h.density[b] += 1.0;
  }
  for (auto& d : h.density) d /= static_cast<double>(v.size());
  return h;
}

struct DistributionReport {
  std::array<double, 3> wasserstein{};  ///< per normal component x, y, z
  std::array<std::array<Histogram, 3>, 2> histograms;  ///< [domain][component]
  std::array<std::size_t, 2> n_pixels{};
  std::array<double, 2> mean_tilt_abs_deg{};
};

inline nlohmann::json to_json(const DistributionReport& r) {
  nlohmann::json j;
  j["wasserstein"] = {{"nx", r.wasserstein[0]}, {"ny", r.wasserstein[1]}, {"nz", r.wasserstein[2]}};
  for (int d = 0; d < 2; ++d) {
    const char* dn = data::to_string(static_cast<data::Domain>(d));
    j["n_pixels"][dn] = r.n_pixels[d];
    j["mean_abs_tilt_deg"][dn] = r.mean_tilt_abs_deg[d];
    j["histograms"][dn] = {{"nx", r.histograms[d][0]}, {"ny", r.histograms[d][1]}, {"nz", r.histograms[d][2]}};
  }
  return j;
}

/// Per-pixel normal-component distributions of both domains over the given
/// splits (valid pixels only), with exact 1-Wasserstein distances.
inline DistributionReport label_distribution_report(const data::Dataset& ds,
                                                    const std::vector<data::Split>& splits = {data::Split::train,
                                                                                              data::Split::val,
                                                                                              data::Split::test},
                                                    int bins = 20) {
  std::array<std::array<std::vector<double>, 3>, 2> comp;
  DistributionReport r;
  for (auto d : data::kDomains) {
    const int di = static_cast<int>(d);
    std::size_t n_samples = 0;
    for (auto s : splits)
      for (const auto& smp : ds.part(d, s)) {
        ++n_samples;
        r.mean_tilt_abs_deg[di] += 0.5 * (std::abs(smp.tilt_x_deg) + std::abs(smp.tilt_y_deg));
        for (std::size_t px = 0; px < smp.valid.size(); ++px) {
          if (!smp.valid[px]) continue;
          for (int c = 0; c < 3; ++c) comp[di][c].push_back(smp.normals[px * 3 + c]);
        }
      }
    if (n_samples > 0) r.mean_tilt_abs_deg[di] /= static_cast<double>(n_samples);
    r.n_pixels[di] = comp[di][2].size();
    for (int c = 0; c < 3; ++c) r.histograms[di][c] = histogram(comp[di][c], c == 2 ? 0.0 : -1.0, 1.0, bins);
  }
  for (int c = 0; c < 3; ++c) {
    r.wasserstein[c] = comp[0][c].empty() || comp[1][c].empty() ? 0.0 : wasserstein1(comp[0][c], comp[1][c]);
  }
  return r;
}

}  // namespace tada::diag
