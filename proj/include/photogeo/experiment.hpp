#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "photogeo/fusion.hpp"
#include "photogeo/scenesim.hpp"
#include "photogeo/solver.hpp"

namespace photogeo {

enum class Method { geo_only, visual_icp, photogeoseq, photogeoseq_plus };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::geo_only: return "geo-only";
    case Method::visual_icp: return "visual+icp";
    case Method::photogeoseq: return "photogeoseq";
    case Method::photogeoseq_plus: return "photogeoseq+";
  }
  return "unknown";
}

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::geo_only, Method::visual_icp, Method::photogeoseq,
                                     Method::photogeoseq_plus};
  return m;
}

inline std::optional<Method> method_from_string(const std::string& s) {
  for (Method m : all_methods()) {
    if (s == to_string(m)) return m;
  }
  return std::nullopt;
}

inline bool is_sequential(Method m) { return m == Method::photogeoseq || m == Method::photogeoseq_plus; }

/// Success gate for rate reporting.
inline constexpr double kSuccessTranslation = 0.5;  // m
inline constexpr double kSuccessRotation = 0.1;     // rad

struct ScenarioSpec {
  SceneKind scene = SceneKind::room;
  std::uint64_t scene_seed = 7;
  int landmarks = 1200;
  int n_pairs = 10;
  std::vector<int> false_positive_pairs;
  NoiseSpec noise;
};

struct ExperimentSpec {
  ScenarioSpec scenario;
  std::string scenario_path;  // empty when the scenario is inline
  std::vector<Method> methods = all_methods();
  std::vector<Regime> regimes{Regime::easy, Regime::medium, Regime::hard};
  int trials = 50;
  std::uint64_t seed = 1;
  std::string output_dir = "out";
  FusionConfig fusion;
  /// Wall-clock times make outputs run-dependent, so they are recorded only on request.
  bool timing = false;
};

struct ConfigResult {
  std::optional<ExperimentSpec> spec;
  std::vector<std::string> errors;

  bool ok() const { return spec.has_value() && errors.empty(); }
};

namespace detail {

using Json = nlohmann::json;

struct NoiseField {
  const char* name;
  double NoiseSpec::*member;
  bool signed_ok;
};

inline const std::vector<NoiseField>& noise_fields() {
  static const std::vector<NoiseField> f{
      {"range_sigma", &NoiseSpec::range_sigma, false},
      {"pixel_sigma2", &NoiseSpec::pixel_sigma2, false},
      {"model_pixel_sigma2", &NoiseSpec::model_pixel_sigma2, false},
      {"time_offset_mean", &NoiseSpec::time_offset_mean, true},
      {"time_offset_sigma", &NoiseSpec::time_offset_sigma, false},
      {"extrinsic_rot_sigma", &NoiseSpec::extrinsic_rot_sigma, false},
      {"extrinsic_trans_sigma", &NoiseSpec::extrinsic_trans_sigma, false},
      {"mismatch_rate", &NoiseSpec::mismatch_rate, false},
      {"drift_rate_trans", &NoiseSpec::drift_rate_trans, false},
      {"drift_rate_rot", &NoiseSpec::drift_rate_rot, false},
      {"image_noise", &NoiseSpec::image_noise, false},
      {"depth_noise", &NoiseSpec::depth_noise, false},
      {"point_density", &NoiseSpec::point_density, false},
  };
  return f;
}

class SpecReader {
 public:
  explicit SpecReader(std::vector<std::string>& errors) : errors_(errors) {}

  void error(const std::string& field, const std::string& msg) { errors_.push_back(field + ": " + msg); }

  void unknown_keys(const Json& obj, const std::string& prefix, const std::vector<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
        error(prefix + it.key(), "unknown field");
      }
    }
  }

  void real(const Json& obj, const std::string& key, const std::string& field, double& out, bool signed_ok = false,
            bool positive = false) {
    if (!obj.contains(key)) return;
    const Json& v = obj.at(key);
    if (!v.is_number()) return error(field, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) return error(field, "must be finite");
    if (!signed_ok && x < 0.0) return error(field, "must be non-negative");
    if (positive && !(x > 0.0)) return error(field, "must be positive");
    out = x;
  }

  void integer(const Json& obj, const std::string& key, const std::string& field, int& out, int lo, int hi) {
    if (!obj.contains(key)) return;
    const Json& v = obj.at(key);
    if (!v.is_number_integer()) return error(field, "expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < lo || x > hi) {
      return error(field, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got " +
                              std::to_string(x));
    }
    out = static_cast<int>(x);
  }

  void seed(const Json& obj, const std::string& key, const std::string& field, std::uint64_t& out) {
    if (!obj.contains(key)) return;
    const Json& v = obj.at(key);
    if (v.is_number_unsigned()) {
      out = v.get<std::uint64_t>();
    } else if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) return error(field, "must be non-negative");
      out = static_cast<std::uint64_t>(v.get<std::int64_t>());
    } else {
      error(field, "expected an integer");
    }
  }

  void boolean(const Json& obj, const std::string& key, const std::string& field, bool& out) {
    if (!obj.contains(key)) return;
    if (!obj.at(key).is_boolean()) return error(field, "expected true or false");
    out = obj.at(key).get<bool>();
  }

  void string(const Json& obj, const std::string& key, const std::string& field, std::string& out) {
    if (!obj.contains(key)) return;
    if (!obj.at(key).is_string()) return error(field, "expected a string");
    out = obj.at(key).get<std::string>();
  }

 private:
  std::vector<std::string>& errors_;
};

inline std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

inline std::optional<Json> read_json_file(const std::filesystem::path& path, const std::string& field,
                                          std::vector<std::string>& errors) {
  std::ifstream f(path);
  if (!f) {
    errors.push_back(field + ": cannot read '" + path.string() + "'");
    return std::nullopt;
  }
  try {
    return Json::parse(f);
  } catch (const Json::parse_error& e) {
    errors.push_back(field + ": '" + path.string() + "' is not valid JSON (" + e.what() + ")");
    return std::nullopt;
  }
}

inline void parse_scenario(const Json& j, ScenarioSpec& sc, SpecReader& rd) {
  if (!j.is_object()) return rd.error("scenario", "expected an object or a file path");
  rd.unknown_keys(j, "scenario.", {"scene", "scene_seed", "landmarks", "n_pairs", "false_positive_pairs", "noise"});
  if (j.contains("scene")) {
    const Json& v = j.at("scene");
    const auto k = v.is_string() ? scene_kind_from_string(v.get<std::string>()) : std::nullopt;
    if (k) {
      sc.scene = *k;
    } else {
      rd.error("scenario.scene", "unknown scene kind; valid kinds: room, corridor, open-plane, cluttered");
    }
  }
  rd.seed(j, "scene_seed", "scenario.scene_seed", sc.scene_seed);
  rd.integer(j, "landmarks", "scenario.landmarks", sc.landmarks, 1, 100000);
  rd.integer(j, "n_pairs", "scenario.n_pairs", sc.n_pairs, 1, SimulationTimeline::kMaxPairs);
  if (j.contains("false_positive_pairs")) {
    const Json& v = j.at("false_positive_pairs");
    sc.false_positive_pairs.clear();
    if (!v.is_array()) {
      rd.error("scenario.false_positive_pairs", "expected an array of pair indices");
    } else {
      for (const Json& x : v) {
        if (!x.is_number_integer()) {
          rd.error("scenario.false_positive_pairs", "expected integer pair indices");
          continue;
        }
        sc.false_positive_pairs.push_back(x.get<int>());
      }
    }
  }
  if (j.contains("noise")) {
    const Json& n = j.at("noise");
    if (!n.is_object()) {
      rd.error("scenario.noise", "expected an object");
    } else {
      std::vector<std::string> allowed{"regime_units"};
      for (const auto& f : noise_fields()) allowed.emplace_back(f.name);
      rd.unknown_keys(n, "scenario.noise.", allowed);
      for (const auto& f : noise_fields()) {
        rd.real(n, f.name, std::string("scenario.noise.") + f.name, sc.noise.*f.member, f.signed_ok);
      }
      if (sc.noise.mismatch_rate > 1.0) rd.error("scenario.noise.mismatch_rate", "must be at most 1");
      if (n.contains("point_density") && !(sc.noise.point_density > 0.0)) {
        rd.error("scenario.noise.point_density", "must be positive");
      }
      if (n.contains("regime_units")) {
        const Json& u = n.at("regime_units");
        if (u == "deg_dm") {
          sc.noise.units = RegimeUnits::deg_dm;
        } else if (u == "rad_m") {
          sc.noise.units = RegimeUnits::rad_m;
        } else {
          rd.error("scenario.noise.regime_units", "valid values: deg_dm, rad_m");
        }
      }
    }
  }
  for (int f : sc.false_positive_pairs) {
    if (f < 0 || f >= sc.n_pairs) {
      rd.error("scenario.false_positive_pairs", "index " + std::to_string(f) + " outside [0, n_pairs)");
    }
  }
}

}  // namespace detail

/// Parses and validates an experiment spec; every problem is reported, not only the first.
/// Relative scenario paths resolve against `base_dir`.
inline ConfigResult parse_experiment_spec(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  ConfigResult res;
  ExperimentSpec spec;
  detail::SpecReader rd(res.errors);
  if (!j.is_object()) {
    res.errors.push_back("spec: expected a JSON object");
    return res;
  }
  rd.unknown_keys(j, "", {"scenario", "methods", "regimes", "trials", "seed", "output_dir", "fusion", "timing"});

  if (j.contains("scenario")) {
    const nlohmann::json& s = j.at("scenario");
    if (s.is_string()) {
      std::filesystem::path p = s.get<std::string>();
      if (p.is_relative()) p = base_dir / p;
      spec.scenario_path = p.string();
      if (auto sj = detail::read_json_file(p, "scenario", res.errors)) detail::parse_scenario(*sj, spec.scenario, rd);
    } else {
      detail::parse_scenario(s, spec.scenario, rd);
    }
  }

  if (j.contains("methods")) {
    const nlohmann::json& v = j.at("methods");
    spec.methods.clear();
    std::vector<std::string> valid;
    for (Method m : all_methods()) valid.emplace_back(to_string(m));
    if (!v.is_array()) {
      rd.error("methods", "expected an array; valid methods: " + detail::join(valid, ", "));
    } else {
      for (const nlohmann::json& x : v) {
        const auto m = x.is_string() ? method_from_string(x.get<std::string>()) : std::nullopt;
        if (!m) {
          rd.error("methods", "unknown method " + x.dump() + "; valid methods: " + detail::join(valid, ", "));
        } else if (std::find(spec.methods.begin(), spec.methods.end(), *m) == spec.methods.end()) {
          spec.methods.push_back(*m);
        }
      }
      if (v.empty()) rd.error("methods", "must not be empty; valid methods: " + detail::join(valid, ", "));
    }
  }

  if (j.contains("regimes")) {
    const nlohmann::json& v = j.at("regimes");
    spec.regimes.clear();
    if (!v.is_array() || v.empty()) {
      rd.error("regimes", "expected a non-empty array of Easy, Medium, Hard");
    } else {
      for (const nlohmann::json& x : v) {
        const auto r = x.is_string() ? regime_from_string(x.get<std::string>()) : std::nullopt;
        if (!r) {
          rd.error("regimes", "unknown regime " + x.dump() + "; valid regimes: Easy, Medium, Hard");
        } else if (std::find(spec.regimes.begin(), spec.regimes.end(), *r) == spec.regimes.end()) {
          spec.regimes.push_back(*r);
        }
      }
    }
  }

  rd.integer(j, "trials", "trials", spec.trials, 1, 1000000);
  rd.seed(j, "seed", "seed", spec.seed);
  rd.string(j, "output_dir", "output_dir", spec.output_dir);
  if (spec.output_dir.empty()) rd.error("output_dir", "must not be empty");
  rd.boolean(j, "timing", "timing", spec.timing);

  if (j.contains("fusion")) {
    const nlohmann::json& f = j.at("fusion");
    if (!f.is_object()) {
      rd.error("fusion", "expected an object");
    } else {
      rd.unknown_keys(f, "fusion.", {"theta_th", "max_pairs", "min_estimates", "confidence", "run_to_end"});
      rd.real(f, "theta_th", "fusion.theta_th", spec.fusion.theta_th, false, true);
      rd.integer(f, "max_pairs", "fusion.max_pairs", spec.fusion.max_pairs, 1, SimulationTimeline::kMaxPairs);
      rd.integer(f, "min_estimates", "fusion.min_estimates", spec.fusion.min_estimates, 1,
                 SimulationTimeline::kMaxPairs);
      rd.real(f, "confidence", "fusion.confidence", spec.fusion.confidence);
      if (!(spec.fusion.confidence > 0.0 && spec.fusion.confidence < 1.0)) {
        rd.error("fusion.confidence", "must be in (0, 1)");
      }
      rd.boolean(f, "run_to_end", "fusion.run_to_end", spec.fusion.run_to_end);
    }
  }
  if (spec.fusion.max_pairs > spec.scenario.n_pairs) {
    rd.error("fusion.max_pairs", "exceeds scenario.n_pairs (" + std::to_string(spec.scenario.n_pairs) + ")");
  }

  if (res.errors.empty()) res.spec = spec;
  return res;
}

/// Reads and validates a spec file.
inline ConfigResult validate_config(const std::filesystem::path& path) {
  ConfigResult res;
  auto j = detail::read_json_file(path, "spec", res.errors);
  if (!j) return res;
  return parse_experiment_spec(*j, path.parent_path());
}

/// Resolved spec with every default filled in.
inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json noise;
  for (const auto& f : detail::noise_fields()) noise[f.name] = s.scenario.noise.*f.member;
  noise["regime_units"] = s.scenario.noise.units == RegimeUnits::deg_dm ? "deg_dm" : "rad_m";
  nlohmann::json j;
  j["scenario"] = {{"scene", to_string(s.scenario.scene)},
                   {"scene_seed", s.scenario.scene_seed},
                   {"landmarks", s.scenario.landmarks},
                   {"n_pairs", s.scenario.n_pairs},
                   {"false_positive_pairs", s.scenario.false_positive_pairs},
                   {"noise", noise}};
  if (!s.scenario_path.empty()) j["scenario_path"] = s.scenario_path;
  for (Method m : s.methods) j["methods"].push_back(to_string(m));
  for (Regime r : s.regimes) j["regimes"].push_back(to_string(r));
  j["trials"] = s.trials;
  j["seed"] = s.seed;
  j["output_dir"] = s.output_dir;
  j["timing"] = s.timing;
  j["fusion"] = {{"theta_th", s.fusion.theta_th},
                 {"max_pairs", s.fusion.max_pairs},
                 {"min_estimates", s.fusion.min_estimates},
                 {"confidence", s.fusion.confidence},
                 {"run_to_end", s.fusion.run_to_end}};
  return j;
}

// ---------------------------------------------------------------------------
// Pipeline

inline SolverConfig solver_config(Method m) {
  SolverConfig c;
  if (m == Method::geo_only) {
    c.use_indirect = false;
    c.visual_seed = false;
  }
  c.use_semi_direct = m == Method::photogeoseq_plus;
  return c;
}

/// Surfel planarity gate scaled to the range noise; noise-free clouds keep only exact planes.
inline SurfelOptions surfel_options(const NoiseSpec& n) {
  SurfelOptions o;
  o.max_thickness = std::max(3.0 * n.range_sigma, 1e-6);
  return o;
}

struct PairSolve {
  AlignmentEstimate estimate;
  PlaceTransport transport;
  PairFrames frames;
};

/// Measures pair i and solves its alignment from `init` (pair frames).
inline PairSolve solve_pair(const LoopSimulation& sim, int i, const Pose& init, SolverConfig cfg) {
  const Trajectory& traj = sim.estimated_trajectory();
  const PlacePair& pair = sim.pairs().at(static_cast<std::size_t>(i));
  const PairMeasurements m = sim.measure(i, cfg.use_semi_direct);
  const SurfelOptions so = surfel_options(sim.noise());
  AlignmentInput in;
  in.pair_index = i;
  in.frames = pair_frames(traj, pair, sim.camera());
  if (cfg.use_geometry) {
    in.source_surfels = build_surfels(m.source_cloud, so);
    in.reference_surfels = build_surfels(m.reference_cloud, so);
  }
  in.features = m.features;
  if (cfg.use_semi_direct) {
    in.source_image = &m.source_image;
    in.reference_image = &m.reference_image;
    in.reference_depth = &m.reference_depth;
    in.reference_features = m.reference_features;
    in.semi_direct_sigma_p = sim.noise().model_pixel_sigma2;
  }
  PairSolve out;
  out.frames = in.frames;
  out.transport = place_transport(traj, sim.pairs().front(), pair);
  out.estimate = solve_alignment(in, init, cfg, sim.camera());
  return out;
}

struct PoseError {
  double translation = 0.0;  // m
  double rotation = 0.0;     // rad
};

inline PoseError pose_error(const Pose& est, const Pose& truth) {
  return {(est.translation - truth.translation).norm(), rotation_angle(est.rotation * truth.rotation.transpose())};
}

struct SequenceStep {
  FusionStep step;
  std::optional<PoseError> error;  // of the fused state after this step
  std::string failure;
};

struct SequenceResult {
  std::vector<SequenceStep> steps;
  FusedAlignment fused;
  int consumed = 0;
};

/// Pair solves of one simulation and one solver configuration, keyed on the
/// pair, the solver seed and the exact bits of the initial pose. Replaying a
/// sequence that reaches a pair from the same state reuses the solve.
class PairSolveCache {
 public:
  struct Entry {
    std::optional<PairSolve> solve;
    std::string failure;
  };
  using Key = std::tuple<int, std::uint64_t, std::array<std::uint64_t, 12>>;

  static Key key(int pair, std::uint64_t seed, const Pose& init) {
    std::array<std::uint64_t, 12> bits{};
    for (int k = 0; k < 9; ++k) bits[static_cast<std::size_t>(k)] = std::bit_cast<std::uint64_t>(init.rotation(k));
    for (int k = 0; k < 3; ++k) bits[static_cast<std::size_t>(9 + k)] = std::bit_cast<std::uint64_t>(init.translation(k));
    return {pair, seed, bits};
  }
  const Entry* find(const Key& k) const {
    const auto it = entries_.find(k);
    return it == entries_.end() ? nullptr : &it->second;
  }
  const Entry& insert(const Key& k, Entry e) { return entries_.insert_or_assign(k, std::move(e)).first->second; }

 private:
  std::map<Key, Entry> entries_;
};

/// Sequential estimation over the simulation's pairs, in `order` (all pairs by default).
/// A cache, if given, must only ever see this simulation and this configuration.
inline SequenceResult run_sequence(const LoopSimulation& sim, const SolverConfig& base, const FusionConfig& fcfg,
                                   std::uint64_t seed, std::vector<int> order = {},
                                   PairSolveCache* cache = nullptr) {
  if (order.empty()) {
    for (int i = 0; i < static_cast<int>(sim.pairs().size()); ++i) order.push_back(i);
  }
  const Trajectory& traj = sim.estimated_trajectory();
  const Pose& truth = sim.truth().first_alignment;
  SequentialFusion fusion(sim.camera(), fcfg);
  SequenceResult res;
  for (int i : order) {
    if (fusion.done() || (fcfg.run_to_end && fusion.consumed() >= fcfg.max_pairs)) break;
    const PlacePair& pair = sim.pairs().at(static_cast<std::size_t>(i));
    const PlaceTransport tr = place_transport(traj, sim.pairs().front(), pair);
    const Pose init = fusion.state().count > 0 ? transport_from_first(fusion.state().pose, tr)
                                               : initial_alignment(traj, pair);
    SolverConfig cfg = base;
    cfg.seed = stream_seed(seed, static_cast<std::uint64_t>(i) + 1, 0x501u);
    SequenceStep s;
    PairSolveCache::Entry fresh;
    const PairSolveCache::Key key = PairSolveCache::key(i, cfg.seed, init);
    const PairSolveCache::Entry* entry = cache ? cache->find(key) : nullptr;
    if (!entry) {
      try {
        fresh.solve = solve_pair(sim, i, init, cfg);
      } catch (const Error& e) {
        fresh.failure = e.what();
      }
      entry = cache ? &cache->insert(key, std::move(fresh)) : &fresh;
    }
    if (!entry->solve) {
      s.failure = entry->failure;
      s.step = fusion.fail(i);
    } else {
      try {
        const PairSolve& ps = *entry->solve;
        std::vector<EvidenceEntry> ev;
        ev.reserve(ps.estimate.inlier_features.size());
        for (const FeatureMatch& f : ps.estimate.inlier_features) ev.push_back({f, i, ps.transport, ps.frames});
        s.step = fusion.offer(i, transport_to_first(ps.estimate.pose, ps.transport),
                              transport_covariance(ps.estimate.covariance, ps.transport), ev);
      } catch (const Error& e) {
        s.failure = e.what();
        s.step = fusion.fail(i);
      }
    }
    if (fusion.state().count > 0) s.error = pose_error(fusion.state().pose, truth);
    res.steps.push_back(std::move(s));
  }
  res.fused = fusion.state();
  res.consumed = fusion.consumed();
  return res;
}

// ---------------------------------------------------------------------------
// Experiment grid

struct TrialRecord {
  Method method = Method::geo_only;
  Regime regime = Regime::easy;
  int trial = 0;
  std::uint64_t seed = 0;
  bool success = false;
  std::optional<PoseError> error;
  double time_s = 0.0;
  int i_n = 0;
  std::string status;
  std::string failure;
  std::vector<SequenceStep> steps;
};

struct ResultRow {
  Method method = Method::geo_only;
  Regime regime = Regime::easy;
  int trials = 0;
  double success_rate = 0.0;
  double et_rmse_m = 0.0;
  double er_rmse_rad = 0.0;
  double mean_time_s = 0.0;
  double mean_in = 0.0;
};

struct ResultTable {
  std::vector<ResultRow> rows;
  std::vector<TrialRecord> trials;  // method-major, then regime, then trial
};

inline std::uint64_t trial_seed(std::uint64_t base, Regime r, int trial) {
  return stream_seed(base, static_cast<std::uint64_t>(r) + 1, static_cast<std::uint64_t>(trial));
}

inline TrialRecord run_trial(const Scene& scene, const ExperimentSpec& spec, Method method, Regime regime,
                             int trial) {
  TrialRecord rec;
  rec.method = method;
  rec.regime = regime;
  rec.trial = trial;
  rec.seed = trial_seed(spec.seed, regime, trial);
  const auto t0 = std::chrono::steady_clock::now();
  NoiseSpec noise = spec.scenario.noise;
  noise.regime = regime;
  const LoopSimulation sim(scene, noise, spec.scenario.n_pairs, rec.seed, spec.scenario.false_positive_pairs);
  const Pose& truth = sim.truth().first_alignment;
  const SolverConfig cfg = solver_config(method);
  if (is_sequential(method)) {
    SequenceResult r = run_sequence(sim, cfg, spec.fusion, rec.seed);
    rec.i_n = r.consumed;
    rec.status = to_string(r.fused.status);
    if (r.fused.count > 0) rec.error = pose_error(r.fused.pose, truth);
    rec.steps = std::move(r.steps);
    rec.success = r.fused.status == FusionStatus::accepted;
  } else {
    rec.i_n = 1;
    try {
      SolverConfig c = cfg;
      c.seed = stream_seed(rec.seed, 1, 0x501u);
      const PairSolve ps = solve_pair(sim, 0, initial_alignment(sim.estimated_trajectory(), sim.pairs().front()), c);
      rec.error = pose_error(ps.estimate.pose, truth);
      rec.status = "solved";
      rec.success = true;
    } catch (const Error& e) {
      rec.status = "failed";
      rec.failure = e.what();
    }
  }
  rec.success = rec.success && rec.error && rec.error->translation < kSuccessTranslation &&
                rec.error->rotation < kSuccessRotation;
  if (spec.timing) rec.time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

/// Aggregates trial records of one (method, regime) cell in trial order.
inline ResultRow aggregate(Method m, Regime r, const std::vector<TrialRecord>& trials) {
  ResultRow row;
  row.method = m;
  row.regime = r;
  int succ = 0;
  double et = 0.0, er = 0.0, time = 0.0, in = 0.0;
  for (const TrialRecord& t : trials) {
    if (t.method != m || t.regime != r) continue;
    ++row.trials;
    time += t.time_s;
    in += t.i_n;
    if (!t.success) continue;
    ++succ;
    et += t.error->translation * t.error->translation;
    er += t.error->rotation * t.error->rotation;
  }
  if (row.trials == 0) return row;
  const double n = static_cast<double>(row.trials);
  row.success_rate = succ / n;
  row.et_rmse_m = succ ? std::sqrt(et / succ) : std::nan("");
  row.er_rmse_rad = succ ? std::sqrt(er / succ) : std::nan("");
  row.mean_time_s = time / n;
  row.mean_in = in / n;
  return row;
}

/// Runs the method x regime x trial grid on `jobs` workers (0: all cores). Output order and
/// values do not depend on `jobs`.
inline ResultTable run_experiment(const ExperimentSpec& spec, unsigned jobs = 1) {
  if (spec.trials < 1 || spec.methods.empty() || spec.regimes.empty()) {
    throw InvalidArgument("run_experiment: trials must be >= 1 and methods/regimes non-empty");
  }
  const Scene scene = build_scene(spec.scenario.scene, spec.scenario.scene_seed, spec.scenario.landmarks);
  struct Task {
    Method m;
    Regime r;
    int trial;
  };
  std::vector<Task> tasks;
  for (Method m : spec.methods) {
    for (Regime r : spec.regimes) {
      for (int t = 0; t < spec.trials; ++t) tasks.push_back({m, r, t});
    }
  }
  ResultTable table;
  table.trials.resize(tasks.size());
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min<unsigned>(jobs, static_cast<unsigned>(tasks.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < tasks.size(); k = next++) {
      try {
        table.trials[k] = run_trial(scene, spec, tasks[k].m, tasks[k].r, tasks[k].trial);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (Method m : spec.methods) {
    for (Regime r : spec.regimes) table.rows.push_back(aggregate(m, r, table.trials));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Output

inline constexpr const char* kCsvHeader = "method,regime,trials,success_rate,et_rmse_m,er_rmse_rad,mean_time_s,mean_in";

inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_csv(std::ostream& os, const ResultTable& t) {
  os << kCsvHeader << '\n';
  for (const ResultRow& r : t.rows) {
    os << to_string(r.method) << ',' << to_string(r.regime) << ',' << r.trials << ',' << format_number(r.success_rate)
       << ',' << format_number(r.et_rmse_m) << ',' << format_number(r.er_rmse_rad) << ','
       << format_number(r.mean_time_s) << ',' << format_number(r.mean_in) << '\n';
  }
}

inline nlohmann::json error_json(const std::optional<PoseError>& e, bool rotation) {
  if (!e) return nullptr;
  return rotation ? e->rotation : e->translation;
}

inline nlohmann::json to_json(const TrialRecord& t) {
  return {{"method", to_string(t.method)},
          {"regime", to_string(t.regime)},
          {"trial", t.trial},
          {"seed", t.seed},
          {"success", t.success},
          {"e_t", error_json(t.error, false)},
          {"e_r", error_json(t.error, true)},
          {"time_s", t.time_s},
          {"i_n", t.i_n},
          {"status", t.status},
          {"failure", t.failure}};
}

inline nlohmann::json to_json(const TrialRecord& t, const SequenceStep& s) {
  nlohmann::json j = to_json(s.step);
  j["method"] = to_string(t.method);
  j["regime"] = to_string(t.regime);
  j["trial"] = t.trial;
  j["e_t"] = error_json(s.error, false);
  j["e_r"] = error_json(s.error, true);
  if (!s.failure.empty()) j["failure"] = s.failure;
  return j;
}

struct OutputFiles {
  std::filesystem::path csv, trials, fusion;
};

/// Writes results.csv, trials.jsonl and fusion.jsonl into `dir`.
inline OutputFiles write_outputs(const ResultTable& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  OutputFiles f{dir / "results.csv", dir / "trials.jsonl", dir / "fusion.jsonl"};
  std::ofstream csv(f.csv, std::ios::binary), trials(f.trials, std::ios::binary), fusion(f.fusion, std::ios::binary);
  if (!csv || !trials || !fusion) throw Error("cannot write outputs to '" + dir.string() + "'");
  write_csv(csv, t);
  for (const TrialRecord& r : t.trials) {
    trials << to_json(r).dump() << '\n';
    for (const SequenceStep& s : r.steps) fusion << to_json(r, s).dump() << '\n';
  }
  return f;
}

// ---------------------------------------------------------------------------
// Fusion trace plots

struct TracePoint {
  int index = 0;
  int pair_index = 0;
  double e_t = std::nan("");
  double eigen_sum = 0.0;
  double statistic = 0.0;
  double threshold = 0.0;
  std::string decision;
};

/// Reads the first fused sequence of a fusion log.
inline std::vector<TracePoint> read_trace(std::istream& is) {
  std::vector<TracePoint> pts;
  std::string line;
  int lineno = 0;
  std::optional<std::string> key;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("decision") || !j.contains("eigen_sum") || !j.contains("statistic") ||
        !j.contains("threshold")) {
      throw ParseError("line " + std::to_string(lineno) + ": not a fusion step record");
    }
    const std::string k = j.value("method", "") + "/" + j.value("regime", "") + "/" +
                          std::to_string(j.value("trial", 0));
    if (!key) key = k;
    if (k != *key) continue;
    try {
      TracePoint p;
      p.index = static_cast<int>(pts.size());
      p.pair_index = j.value("pair_index", p.index);
      if (j.contains("e_t") && j["e_t"].is_number()) p.e_t = j["e_t"].get<double>();
      p.eigen_sum = j.at("eigen_sum").get<double>();
      p.statistic = j.at("statistic").get<double>();
      p.threshold = j.at("threshold").get<double>();
      p.decision = j.at("decision").get<std::string>();
      pts.push_back(p);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (pts.empty()) throw ParseError("fusion log is empty");
  return pts;
}

namespace detail {

class Svg {
 public:
  Svg(int w, int h) : w_(w), h_(h) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 "
        << w << ' ' << h << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  }
  static std::string num(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", x);
    return buf;
  }
  void line(double x0, double y0, double x1, double y1, const char* color, double width = 1.0) {
    os_ << "<line x1=\"" << num(x0) << "\" y1=\"" << num(y0) << "\" x2=\"" << num(x1) << "\" y2=\"" << num(y1)
        << "\" stroke=\"" << color << "\" stroke-width=\"" << num(width) << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& p, const char* color, bool dashed = false) {
    if (p.empty()) return;
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"" << (dashed ? " stroke-dasharray=\"6 4\"" : "")
        << " points=\"";
    for (const auto& [x, y] : p) os_ << num(x) << ',' << num(y) << ' ';
    os_ << "\"/>\n";
  }
  void circle(double x, double y, double r, const char* color) {
    os_ << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"" << num(r) << "\" fill=\"" << color
        << "\"/>\n";
  }
  void cross(double x, double y, double r, const char* color) {
    line(x - r, y - r, x + r, y + r, color, 2.5);
    line(x - r, y + r, x + r, y - r, color, 2.5);
  }
  void text(double x, double y, const std::string& s, const char* anchor = "start", int size = 12) {
    os_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-family=\"sans-serif\" font-size=\"" << size
        << "\" text-anchor=\"" << anchor << "\">" << s << "</text>\n";
  }
  std::string str() const { return os_.str() + "</svg>\n"; }

 private:
  int w_, h_;
  std::ostringstream os_;
};

struct Panel {
  double x0, y0, w, h;  // pixel box
  double lo, hi;        // value range
  int n;                // number of fusion indices

  double px(int i) const { return x0 + (n <= 1 ? 0.5 * w : w * i / (n - 1.0)); }
  double py(double v) const { return y0 + h - h * (v - lo) / (hi - lo); }
};

inline Panel make_panel(double x0, double y0, double w, double h, int n, std::vector<double> values) {
  double lo = 0.0, hi = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) hi = std::max(hi, v);
  }
  if (!(hi > lo)) hi = lo + 1.0;
  return {x0, y0, w, h, lo, hi * 1.1, n};
}

inline void axes(Svg& s, const Panel& p, const std::string& title) {
  s.line(p.x0, p.y0 + p.h, p.x0 + p.w, p.y0 + p.h, "black");
  s.line(p.x0, p.y0, p.x0, p.y0 + p.h, "black");
  s.text(p.x0, p.y0 - 6, title);
  s.text(p.x0 - 6, p.y0 + 4, Svg::num(p.hi), "end", 10);
  s.text(p.x0 - 6, p.y0 + p.h + 4, Svg::num(p.lo), "end", 10);
  for (int i = 0; i < p.n; ++i) s.text(p.px(i), p.y0 + p.h + 16, std::to_string(i), "middle", 10);
}

}  // namespace detail

/// Error and eigenvalue-sum panels over the fusion index.
inline std::string render_error_svg(const std::vector<TracePoint>& pts) {
  const int n = static_cast<int>(pts.size());
  detail::Svg s(640, 480);
  std::vector<double> e, g;
  for (const auto& p : pts) {
    e.push_back(p.e_t);
    g.push_back(p.eigen_sum);
  }
  const auto pe = detail::make_panel(80, 40, 520, 160, n, e);
  const auto pg = detail::make_panel(80, 270, 520, 160, n, g);
  detail::axes(s, pe, "translation error of fused pose [m]");
  detail::axes(s, pg, "covariance eigenvalue sum");
  std::vector<std::pair<double, double>> le, lg;
  for (int i = 0; i < n; ++i) {
    if (std::isfinite(e[static_cast<std::size_t>(i)])) le.emplace_back(pe.px(i), pe.py(e[static_cast<std::size_t>(i)]));
    if (pts[static_cast<std::size_t>(i)].eigen_sum > 0.0) lg.emplace_back(pg.px(i), pg.py(g[static_cast<std::size_t>(i)]));
  }
  s.polyline(le, "#1f4e9c");
  s.polyline(lg, "#2c7a2c");
  s.text(340, 465, "fusion index", "middle");
  return s.str();
}

/// Evidence statistic against its threshold with accept/reject markers.
inline std::string render_evidence_svg(const std::vector<TracePoint>& pts) {
  const int n = static_cast<int>(pts.size());
  detail::Svg s(640, 360);
  std::vector<double> v;
  for (const auto& p : pts) {
    v.push_back(p.statistic);
    v.push_back(p.threshold);
  }
  const auto pn = detail::make_panel(80, 40, 520, 260, n, v);
  detail::axes(s, pn, "evidence statistic (markers) and threshold (dashed)");
  std::vector<std::pair<double, double>> th;
  for (int i = 0; i < n; ++i) {
    const auto& p = pts[static_cast<std::size_t>(i)];
    if (p.threshold > 0.0) th.emplace_back(pn.px(i), pn.py(p.threshold));
  }
  s.polyline(th, "#888888", true);
  for (int i = 0; i < n; ++i) {
    const auto& p = pts[static_cast<std::size_t>(i)];
    const double x = pn.px(i), y = pn.py(std::isfinite(p.statistic) ? p.statistic : pn.hi);
    if (p.decision == "reject" || p.decision == "restart") {
      s.cross(x, y, 6, "#c0392b");
    } else if (p.decision == "accept") {
      s.circle(x, y, 5, "#1f4e9c");
    } else if (p.decision == "seed") {
      s.circle(x, y, 5, "black");
    } else {
      s.cross(x, y, 4, "#888888");
    }
  }
  s.text(340, 345, "fusion index", "middle");
  return s.str();
}

/// Renders the two trace plots of the first sequence in `log`; nothing is written on error.
inline std::vector<std::filesystem::path> plot_trace(const std::filesystem::path& log,
                                                     const std::filesystem::path& out_dir) {
  std::ifstream f(log);
  if (!f) throw Error("cannot read '" + log.string() + "'");
  const auto pts = read_trace(f);
  const std::string a = render_error_svg(pts), b = render_evidence_svg(pts);
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> out{out_dir / "fusion_error.svg", out_dir / "fusion_evidence.svg"};
  std::ofstream(out[0], std::ios::binary) << a;
  std::ofstream(out[1], std::ios::binary) << b;
  return out;
}

}  // namespace photogeo
