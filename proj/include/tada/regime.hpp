#pragma once

#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace tada {

enum class Regime { baseline, mtl_src, mtl_tgt, mtl_both, headfreeze, oracle };
enum class DaMode { none, feature, output, multi_level };

/// Training stage. Single-stage regimes always run in `single`.
enum class Stage { single, first, second };

/// Supervised loss terms: {source, target} x {main, anchor}.
enum class Term { source_main, source_anchor, target_anchor, target_main };

NLOHMANN_JSON_SERIALIZE_ENUM(Regime, {{Regime::baseline, "baseline"},
                                      {Regime::mtl_src, "mtl_src"},
                                      {Regime::mtl_tgt, "mtl_tgt"},
                                      {Regime::mtl_both, "mtl_both"},
                                      {Regime::headfreeze, "headfreeze"},
                                      {Regime::oracle, "oracle"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DaMode, {{DaMode::none, "none"},
                                      {DaMode::feature, "feature"},
                                      {DaMode::output, "output"},
                                      {DaMode::multi_level, "multi_level"}})

inline std::string to_string(Regime r) { return nlohmann::json(r).get<std::string>(); }
inline std::string to_string(DaMode m) { return nlohmann::json(m).get<std::string>(); }
inline const char* to_string(Term t) {
  switch (t) {
    case Term::source_main: return "L_Sm";
    case Term::source_anchor: return "L_Sa";
    case Term::target_anchor: return "L_Ta";
    case Term::target_main: return "L_Tm";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  const Regime r = nlohmann::json(s).get<Regime>();
  if (to_string(r) != s) throw std::invalid_argument("unknown regime '" + s + "'");
  return r;
}
inline DaMode parse_da_mode(const std::string& s) {
  const DaMode m = nlohmann::json(s).get<DaMode>();
  if (to_string(m) != s) throw std::invalid_argument("unknown DA mode '" + s + "'");
  return m;
}

/// Which training labels a regime may read.
struct Visibility {
  bool source_main = true;
  bool source_anchor = false;
  bool target_anchor = false;
  bool target_main = false;
};

inline Visibility visibility(Regime r) {
  switch (r) {
    case Regime::baseline: return {true, false, false, false};
    case Regime::mtl_src: return {true, true, false, false};
    case Regime::mtl_tgt: return {true, false, true, false};
    case Regime::mtl_both:
    case Regime::headfreeze: return {true, true, true, false};
    case Regime::oracle: return {true, true, true, true};
  }
  return {};
}

inline bool visible(const Visibility& v, Term t) {
  switch (t) {
    case Term::source_main: return v.source_main;
    case Term::source_anchor: return v.source_anchor;
    case Term::target_anchor: return v.target_anchor;
    case Term::target_main: return v.target_main;
  }
  return false;
}

/// Loss terms active for a regime in a given stage.
inline std::vector<Term> active_terms(Regime r, Stage stage) {
  switch (r) {
    case Regime::baseline: return {Term::source_main};
    case Regime::mtl_src: return {Term::source_main, Term::source_anchor};
    case Regime::mtl_tgt: return {Term::source_main, Term::target_anchor};
    case Regime::mtl_both: return {Term::source_main, Term::source_anchor, Term::target_anchor};
    case Regime::headfreeze:
      if (stage == Stage::first) return {Term::source_main, Term::source_anchor};
      return {Term::source_main, Term::source_anchor, Term::target_anchor};
    case Regime::oracle:
      return {Term::source_main, Term::source_anchor, Term::target_anchor, Term::target_main};
  }
  return {};
}

struct LossWeights {
  double lambda_anchor = 1.0;  ///< weight of both anchor terms
  double lambda_adv = 0.0;     ///< adversarial term weight
  double main_scale = 1.0;     ///< applied to L_Sm and L_Tm
  double depth_weight = 1.0;   ///< depth MSE relative to heatmap MSE
  bool calibrate_lambda = true;  ///< replace lambda_anchor by magnitude matching at run start

  void validate() const {
    for (double v : {lambda_anchor, lambda_adv, main_scale, depth_weight}) {
      if (!(v >= 0.0) || v == std::numeric_limits<double>::infinity()) {
        throw std::invalid_argument("loss weights must be finite and non-negative");
      }
    }
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lambda_anchor, lambda_adv, main_scale,
                                                depth_weight, calibrate_lambda)

}  // namespace tada
