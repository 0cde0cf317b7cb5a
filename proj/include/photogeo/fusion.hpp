#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <nlohmann/json.hpp>

#include "photogeo/lie.hpp"
#include "photogeo/trajectory.hpp"
#include "photogeo/vision.hpp"

namespace photogeo {

enum class FusionStatus { collecting, accepted, aborted };

inline const char* to_string(FusionStatus s) {
  switch (s) {
    case FusionStatus::collecting: return "collecting";
    case FusionStatus::accepted: return "accepted";
    case FusionStatus::aborted: return "aborted";
  }
  return "unknown";
}

struct FusedAlignment {
  Pose pose;
  Covariance6 covariance = Covariance6::Zero();
  int count = 0;
  FusionStatus status = FusionStatus::collecting;
};

struct FuseOptions {
  int max_iterations = 20;
  double tolerance = 1e-10;
  double max_condition = 1e12;
};

/// Information matrix of a covariance; throws when it is not safely invertible.
inline Matrix6d information_of(const Covariance6& cov, double max_condition = 1e12) {
  Eigen::SelfAdjointEigenSolver<Matrix6d> es(0.5 * (cov + cov.transpose()));
  const double lmax = es.eigenvalues().maxCoeff(), lmin = es.eigenvalues().minCoeff();
  if (!(lmin > 0.0) || !std::isfinite(lmax) || lmax / lmin > max_condition) {
    throw DegenerateAlignment("covariance is not invertible");
  }
  return es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

/// Fuses a new estimate (already in first-place frames) into the current state.
/// Errors are xi_k = log(T_k T*^-1) with Jacobian J_l^-1(-xi_k) for T* <- exp(eps) T*.
inline FusedAlignment fuse(const FusedAlignment& current, const Pose& pose, const Covariance6& cov,
                           const FuseOptions& opt = {}) {
  const std::array<Pose, 2> poses{current.pose, pose};
  const std::array<Matrix6d, 2> info{information_of(current.covariance, opt.max_condition),
                                     information_of(cov, opt.max_condition)};
  Pose est = current.pose;
  Matrix6d a = Matrix6d::Zero();
  for (int it = 0; it < opt.max_iterations; ++it) {
    a.setZero();
    Vector6d b = Vector6d::Zero();
    for (std::size_t k = 0; k < 2; ++k) {
      const Twist xi = log(poses[k] * est.inverse());
      const Matrix6d g = inv_left_jacobian(Twist(-xi));
      a += g.transpose() * info[k] * g;
      b += g.transpose() * info[k] * xi;
    }
    const Twist step = a.ldlt().solve(b);
    est = (exp(step) * est).orthonormalized();
    if (step.norm() < opt.tolerance) break;
  }
  // Covariance at the converged point.
  a.setZero();
  for (std::size_t k = 0; k < 2; ++k) {
    const Matrix6d g = inv_left_jacobian(Twist(-log(poses[k] * est.inverse())));
    a += g.transpose() * info[k] * g;
  }
  FusedAlignment out = current;
  out.pose = est;
  out.covariance = information_of(a, std::numeric_limits<double>::infinity());
  out.count = current.count + 1;
  return out;
}

inline double eigenvalue_sum(const Covariance6& cov) { return cov.trace(); }

inline bool should_terminate(const FusedAlignment& f, double theta_th) {
  return eigenvalue_sum(f.covariance) < theta_th;
}

/// 0.95 (by default) quantile of the chi-square distribution with `dof` degrees of freedom.
inline double chi2_quantile(double dof, double confidence = 0.95) {
  if (!(dof > 0.0)) throw InvalidArgument("chi2_quantile: dof must be positive");
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), confidence);
}

/// One stored epipolar constraint plus what is needed to re-evaluate it at a
/// first-place candidate.
struct EvidenceEntry {
  FeatureMatch match;
  int place = 0;
  PlaceTransport transport;
  PairFrames frames;
};

struct EvidencePool {
  std::vector<EvidenceEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

/// Normalised squared residual e^2 / Sigma of one entry at a first-place candidate.
inline double evidence_statistic(const EvidenceEntry& e, const Pose& candidate, const Camera& cam) {
  const Pose at_place = transport_from_first(candidate, e.transport);
  const double r = epipolar_residual(e.match, Twist::Zero(), at_place, cam, e.frames).residual;
  const double var = propagate_covariance(e.match, Twist::Zero(), at_place, cam, e.frames);
  if (!(var > 0.0)) return r == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return r * r / var;
}

struct ValidationResult {
  double statistic = 0.0;
  double threshold = 0.0;
  std::size_t dof = 0;
  bool inlier = true;
};

inline ValidationResult validate_candidate(const EvidencePool& pool, const Pose& candidate, const Camera& cam,
                                           double confidence = 0.95) {
  ValidationResult v;
  v.dof = pool.size();
  if (pool.empty()) return v;
  for (const EvidenceEntry& e : pool.entries) v.statistic += evidence_statistic(e, candidate, cam);
  v.threshold = chi2_quantile(static_cast<double>(v.dof), confidence);
  v.inlier = v.statistic < v.threshold;
  return v;
}

struct EvidenceUpdate {
  std::size_t kept = 0;
  std::size_t total = 0;
  double inlier_rate = 1.0;
};

/// Appends `added` and evicts every entry whose own statistic fails the 1-DoF test
/// at the fused pose.
inline EvidenceUpdate update_evidence(EvidencePool& pool, const std::vector<EvidenceEntry>& added,
                                      const Pose& fused, const Camera& cam, double confidence = 0.95) {
  const double gate = chi2_quantile(1.0, confidence);
  std::vector<EvidenceEntry> all = pool.entries;
  all.insert(all.end(), added.begin(), added.end());
  EvidencePool next;
  for (const EvidenceEntry& e : all) {
    if (evidence_statistic(e, fused, cam) <= gate) next.entries.push_back(e);
  }
  EvidenceUpdate u;
  u.total = all.size();
  u.kept = next.size();
  u.inlier_rate = u.total == 0 ? 1.0 : static_cast<double>(u.kept) / static_cast<double>(u.total);
  pool = std::move(next);
  return u;
}

/// Fraction of pool entries passing the 1-DoF test at `pose`, without modifying the pool.
inline double inlier_rate(const EvidencePool& pool, const Pose& pose, const Camera& cam,
                          double confidence = 0.95) {
  if (pool.empty()) return 1.0;
  const double gate = chi2_quantile(1.0, confidence);
  std::size_t n = 0;
  for (const EvidenceEntry& e : pool.entries) n += evidence_statistic(e, pose, cam) <= gate;
  return static_cast<double>(n) / static_cast<double>(pool.size());
}

struct FusionConfig {
  double theta_th = 6 * 0.02 * 0.02;
  int max_pairs = 10;
  int min_estimates = 2;
  double confidence = 0.95;
  /// Keep consuming pairs after the threshold is met (trace runs).
  bool run_to_end = false;
  FuseOptions fuse;
};

enum class Decision { seed, accept, reject, restart, skipped, failed };

inline const char* to_string(Decision d) {
  switch (d) {
    case Decision::seed: return "seed";
    case Decision::accept: return "accept";
    case Decision::reject: return "reject";
    case Decision::restart: return "restart";
    case Decision::skipped: return "skipped";
    case Decision::failed: return "failed";
  }
  return "unknown";
}

/// One offered candidate and what the session did with it.
struct FusionStep {
  int pair_index = 0;
  Pose candidate;
  ValidationResult validation;
  Decision decision = Decision::seed;
  double eigen_sum = 0.0;
  double inlier_rate = 1.0;
  int fused_count = 0;
  FusionStatus status = FusionStatus::collecting;
};

/// Sequential fusion state machine over transported pair estimates.
class SequentialFusion {
 public:
  SequentialFusion(const Camera& cam, const FusionConfig& cfg) : cam_(cam), cfg_(cfg) {}

  const FusedAlignment& state() const { return state_; }
  const EvidencePool& pool() const { return pool_; }
  int consumed() const { return consumed_; }
  bool done() const { return state_.status != FusionStatus::collecting && !cfg_.run_to_end; }

  /// Offers a candidate (first-place pose and covariance) with its inlier evidence.
  FusionStep offer(int pair_index, const Pose& candidate, const Covariance6& cov,
                   const std::vector<EvidenceEntry>& evidence) {
    FusionStep step;
    step.pair_index = pair_index;
    step.candidate = candidate;
    if (done() || (cfg_.run_to_end && consumed_ >= cfg_.max_pairs)) {
      step.decision = Decision::skipped;
      return finish(step);
    }
    ++consumed_;

    if (state_.count == 0) {
      seed(candidate, cov, evidence);
      step.decision = Decision::seed;
      step.inlier_rate = last_rate_;
      return finish(step);
    }

    step.validation = validate_candidate(pool_, candidate, cam_, cfg_.confidence);
    if (step.validation.inlier) {
      FusedAlignment next = fuse(state_, candidate, cov, cfg_.fuse);
      const EvidenceUpdate u = update_evidence(pool_, evidence, next.pose, cam_, cfg_.confidence);
      next.status = state_.status;
      state_ = next;
      last_rate_ = u.inlier_rate;
      step.decision = Decision::accept;
    } else if (state_.count == 1) {
      // Only the bootstrap estimate speaks against the candidate; ask the reverse question.
      EvidencePool other;
      other.entries = evidence;
      const ValidationResult back = validate_candidate(other, state_.pose, cam_, cfg_.confidence);
      if (!back.inlier && !other.empty()) {
        state_ = FusedAlignment{};
        pool_ = EvidencePool{};
        step.decision = Decision::restart;
      } else {
        step.decision = Decision::reject;
      }
    } else {
      step.decision = Decision::reject;
    }
    step.inlier_rate = step.decision == Decision::reject ? inlier_rate(pool_, candidate, cam_, cfg_.confidence)
                                                         : last_rate_;
    return finish(step);
  }

  /// Records a pair whose alignment could not be solved; it still counts toward the cap.
  FusionStep fail(int pair_index) {
    FusionStep step;
    step.pair_index = pair_index;
    if (done() || (cfg_.run_to_end && consumed_ >= cfg_.max_pairs)) {
      step.decision = Decision::skipped;
      return finish(step);
    }
    ++consumed_;
    step.decision = Decision::failed;
    step.inlier_rate = last_rate_;
    return finish(step);
  }

 private:
  void seed(const Pose& candidate, const Covariance6& cov, const std::vector<EvidenceEntry>& evidence) {
    information_of(cov, cfg_.fuse.max_condition);
    state_.pose = candidate;
    state_.covariance = 0.5 * (cov + cov.transpose());
    state_.count = 1;
    state_.status = FusionStatus::collecting;
    pool_ = EvidencePool{};
    last_rate_ = update_evidence(pool_, evidence, candidate, cam_, cfg_.confidence).inlier_rate;
  }

  FusionStep finish(FusionStep& step) {
    if (state_.status == FusionStatus::collecting) {
      if (state_.count >= cfg_.min_estimates && should_terminate(state_, cfg_.theta_th)) {
        state_.status = FusionStatus::accepted;
      } else if (consumed_ >= cfg_.max_pairs) {
        state_.status = FusionStatus::aborted;
      }
    }
    step.eigen_sum = state_.count > 0 ? eigenvalue_sum(state_.covariance) : 0.0;
    step.fused_count = state_.count;
    step.status = state_.status;
    return step;
  }

  Camera cam_;
  FusionConfig cfg_;
  FusedAlignment state_;
  EvidencePool pool_;
  int consumed_ = 0;
  double last_rate_ = 1.0;
};

inline nlohmann::json pose_json(const Pose& p) {
  const Twist xi = log(p);
  return std::vector<double>(xi.data(), xi.data() + 6);
}

/// Fusion log record, one per offered candidate.
inline nlohmann::json to_json(const FusionStep& s) {
  return {{"pair_index", s.pair_index},
          {"candidate", pose_json(s.candidate)},
          {"statistic", s.validation.statistic},
          {"threshold", s.validation.threshold},
          {"dof", s.validation.dof},
          {"decision", to_string(s.decision)},
          {"eigen_sum", s.eigen_sum},
          {"inlier_rate", s.inlier_rate},
          {"fused_count", s.fused_count},
          {"status", to_string(s.status)}};
}

}  // namespace photogeo
