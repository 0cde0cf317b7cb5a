#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "photogeo/essential.hpp"
#include "photogeo/geometry.hpp"
#include "photogeo/image.hpp"
#include "photogeo/semidirect.hpp"
#include "photogeo/vision.hpp"

namespace photogeo {

/// t-distribution IRLS weight (nu + 1) / (nu + r^2 / sigma2).
inline double mestimator_weight(double r, double sigma2, double nu) {
  if (!(sigma2 > 0.0)) throw InvalidArgument("mestimator_weight: variance must be positive");
  return (nu + 1.0) / (nu + r * r / sigma2);
}

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

}  // namespace detail

/// Per-modality scale factors making both cost terms contribute comparable totals.
struct ModalityScales {
  double alpha = 0.0;  // geometric
  double beta = 0.0;   // photometric
};

/// Floor on the median whitened square. A modality fitted far below its noise model (exact
/// data, or a seed that already satisfies it) would otherwise swamp the other one.
inline constexpr double kMinWhitenedSquare = 1e-6;

/// Scale of one modality from its whitened squared residuals: 1 / (N * median).
inline double modality_scale(std::span<const double> whitened_sq) {
  if (whitened_sq.empty()) return 0.0;
  const double n = static_cast<double>(whitened_sq.size());
  const double m = detail::median(std::vector<double>(whitened_sq.begin(), whitened_sq.end()));
  return 1.0 / (n * std::max(m, kMinWhitenedSquare));
}

inline ModalityScales normalize_scales(std::span<const double> geo_whitened_sq,
                                       std::span<const double> photo_whitened_sq) {
  return {modality_scale(geo_whitened_sq), modality_scale(photo_whitened_sq)};
}

enum class NormalizationMode {
  initial,  // alpha, beta from the first iteration
  staged,   // provisional until a step falls below normalization_gate, then frozen
};

/// Floor on the per-modality residual variance used for the covariance.
inline constexpr double kMinResidualVariance = 1e-24;

struct SolverConfig {
  int max_iterations = 40;
  double step_tolerance = 1e-8;
  double nu = 5.0;
  bool use_geometry = true;
  bool use_indirect = true;
  bool use_semi_direct = false;
  int semi_direct_cadence = 3;
  double semi_direct_gate = 0.1;  // |dxi| below which re-warping starts
  double semi_direct_min_motion = 1e-5;  // skip re-warping when the pose has not moved
  NormalizationMode normalization = NormalizationMode::staged;
  double normalization_gate = 1e-2;
  int max_halvings = 5;
  double max_condition = 1e12;
  /// Essential-matrix rotation/direction seed with a scale sweep along the baseline.
  bool visual_seed = true;
  double seed_min_scale = 0.05;
  double seed_max_scale = 25.0;
  int seed_steps = 90;
  int min_surfel_matches = 10;
  int min_feature_matches = 8;
  /// Unit scale applied to point-to-plane rows.
  double geometric_scale = 1.0;
  MatchOptions match;
  EssentialRansacOptions ransac;
  RefineOptions refine;
  std::uint64_t seed = 1;
};

/// Per-pair measurements consumed by one alignment solve.
struct AlignmentInput {
  std::vector<Surfel> source_surfels;
  std::vector<Surfel> reference_surfels;
  std::vector<FeatureMatch> features;  // indirect, before the essential-matrix filter
  // Semi-direct resources; optional.
  const Image* source_image = nullptr;
  const Image* reference_image = nullptr;
  const DepthMap* reference_depth = nullptr;
  std::vector<Vector2d> reference_features;
  double semi_direct_sigma_p = 1.0;
  PairFrames frames;
  int pair_index = 0;
};

struct AlignmentEstimate {
  Pose pose;
  Covariance6 covariance = Covariance6::Identity();
  double final_geometric_cost = 0.0;    // r_I at convergence, unscaled
  double final_photometric_cost = 0.0;  // r_P at convergence, unscaled
  int iterations = 0;
  bool converged = false;
  double last_step = 0.0;
  double gradient_norm = 0.0;  // without alpha, beta, at the last linearisation point
  int normalization_iteration = -1;
  ModalityScales scales;
  std::size_t surfel_matches = 0;
  std::size_t indirect_inliers = 0;
  std::size_t indirect_total = 0;
  std::size_t semi_direct_matches = 0;
  bool seeded = false;
  /// Epipolar matches used in the final iteration (evidence candidates).
  std::vector<FeatureMatch> inlier_features;
};

/// Weighted stacked rows of the joint cost, with the per-row weight folded in.
struct StackedRows {
  Eigen::VectorXd residual;
  Eigen::Matrix<double, Eigen::Dynamic, 6> jacobian;
  Eigen::VectorXd weight;  // alpha/beta * information * robust weight
  std::size_t geometric_rows = 0;
};

/// The joint photogeometric least-squares problem for fixed correspondences
/// and frozen weights: F(xi) = alpha r_I + beta r_P.
class JointProblem {
 public:
  JointProblem(const Camera& cam, const PairFrames& frames, const Pose& init)
      : cam_(cam), frames_(frames), init_(init) {}

  void set_surfel_matches(std::vector<SurfelMatch> m) { surfels_ = std::move(m); }
  void set_features(std::vector<FeatureMatch> f) { features_ = std::move(f); }
  void set_scales(const ModalityScales& s) { scales_ = s; }
  void set_geometric_scale(double s) { geo_scale_ = s; }

  const std::vector<SurfelMatch>& surfel_matches() const { return surfels_; }
  const std::vector<FeatureMatch>& features() const { return features_; }
  const Pose& init() const { return init_; }

  /// Re-propagates the epipolar variances at `correction` and freezes them.
  void update_variances(const Twist& correction) {
    variances_.resize(features_.size());
    const VarianceModel model(correction, init_, cam_, frames_);
    for (std::size_t i = 0; i < features_.size(); ++i) variances_[i] = propagate_variance(features_[i], model).total();
  }

  void set_robust_weights(std::vector<double> geo, std::vector<double> photo) {
    geo_robust_ = std::move(geo);
    photo_robust_ = std::move(photo);
  }

  /// Unweighted information of each row (planarity / inverse propagated variance).
  std::vector<double> geometric_information() const {
    std::vector<double> out(surfels_.size());
    for (std::size_t i = 0; i < surfels_.size(); ++i) out[i] = surfels_[i].reference.weight;
    return out;
  }
  std::vector<double> photometric_information() const {
    std::vector<double> out(features_.size());
    for (std::size_t i = 0; i < features_.size(); ++i) {
      out[i] = variances_.size() == features_.size() && variances_[i] > 0.0 ? 1.0 / variances_[i] : 0.0;
    }
    return out;
  }

  ResidualRows geometric_rows(const Twist& correction) const {
    ResidualRows r = icp_residuals(surfels_, correction, init_);
    r.residual *= geo_scale_;
    r.jacobian *= geo_scale_;
    return r;
  }

  ResidualRows photometric_rows(const Twist& correction) const {
    ResidualRows r;
    const auto n = static_cast<Eigen::Index>(features_.size());
    r.residual.resize(n);
    r.jacobian.resize(n, 6);
    r.information = Eigen::VectorXd::Map(photometric_information().data(), n);
    const EpipolarModel model(correction, init_, cam_, frames_);
    for (Eigen::Index i = 0; i < n; ++i) {
      const EpipolarRow row = epipolar_residual(features_[static_cast<std::size_t>(i)], model);
      r.residual(i) = row.residual;
      r.jacobian.row(i) = row.jacobian;
      if (row.degenerate_baseline) r.information(i) = 0.0;
    }
    return r;
  }

  StackedRows stacked(const Twist& correction) const {
    return stack(geometric_rows(correction), photometric_rows(correction));
  }

  /// Stacks rows already evaluated by geometric_rows and photometric_rows.
  StackedRows stack(const ResidualRows& g, const ResidualRows& p) const {
    StackedRows s;
    const Eigen::Index ng = g.residual.size(), np = p.residual.size();
    s.geometric_rows = static_cast<std::size_t>(ng);
    s.residual.resize(ng + np);
    s.jacobian.resize(ng + np, 6);
    s.weight.resize(ng + np);
    s.residual << g.residual, p.residual;
    s.jacobian << g.jacobian, p.jacobian;
    for (Eigen::Index i = 0; i < ng; ++i) {
      const double rw = geo_robust_.empty() ? 1.0 : geo_robust_[static_cast<std::size_t>(i)];
      s.weight(i) = scales_.alpha * g.information(i) * rw;
    }
    for (Eigen::Index i = 0; i < np; ++i) {
      const double rw = photo_robust_.empty() ? 1.0 : photo_robust_[static_cast<std::size_t>(i)];
      s.weight(ng + i) = scales_.beta * p.information(i) * rw;
    }
    return s;
  }

  /// F(xi) = 1/2 sum w e^2.
  double cost(const Twist& correction) const {
    const StackedRows s = stacked(correction);
    return 0.5 * (s.weight.array() * s.residual.array().square()).sum();
  }

 private:
  Camera cam_;
  PairFrames frames_;
  Pose init_;
  std::vector<SurfelMatch> surfels_;
  std::vector<FeatureMatch> features_;
  std::vector<double> variances_;
  std::vector<double> geo_robust_;
  std::vector<double> photo_robust_;
  ModalityScales scales_{1.0, 1.0};
  double geo_scale_ = 1.0;
};

namespace detail {

/// t-distribution weights with a MAD scale estimate of the whitened residuals.
inline std::vector<double> robust_weights(const Eigen::VectorXd& residual, const Eigen::VectorXd& info,
                                          double nu) {
  const auto n = static_cast<std::size_t>(residual.size());
  std::vector<double> whitened(n), abs_w(n);
  for (std::size_t i = 0; i < n; ++i) {
    whitened[i] = residual(static_cast<Eigen::Index>(i)) * std::sqrt(info(static_cast<Eigen::Index>(i)));
    abs_w[i] = std::abs(whitened[i]);
  }
  const double mad = 1.4826 * median(abs_w);
  const double sigma2 = std::max(mad * mad, 1e-300);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = mestimator_weight(whitened[i], sigma2, nu);
  return w;
}

inline std::vector<double> whitened_squares(const ResidualRows& r) {
  std::vector<double> q(r.rows());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    q[i] = r.information(k) * r.residual(k) * r.residual(k);
  }
  return q;
}

/// Soft inlier count of surfel matches at a candidate pose.
inline double surfel_alignment_score(const SurfelIndex& ref, const std::vector<Surfel>& src, const Pose& pose) {
  const auto matches = ref.match(src, pose);
  double score = 0.0;
  for (const SurfelMatch& m : matches) {
    const double e = m.reference.normal.dot(m.reference.centroid - pose * m.source.centroid);
    const double tol = 0.1 * m.reference.voxel_size;
    score += m.reference.weight / (1.0 + (e * e) / (tol * tol));
  }
  return score;
}

inline std::vector<Surfel> coarse_levels(const std::vector<Surfel>& s) {
  std::vector<Surfel> out;
  for (const Surfel& x : s) {
    if (x.level >= 1) out.push_back(x);
  }
  return out.empty() ? s : out;
}

}  // namespace detail

/// LiDAR alignment (Lr <- Ls) for a camera relative pose (Cs <- Cr).
inline Pose lidar_alignment_from_camera(const Pose& cam_rel, const PairFrames& frames, const Camera& cam) {
  const Pose cs = frames.source.at_mean * cam.lidar_from_camera;
  const Pose cr = frames.reference.at_mean * cam.lidar_from_camera;
  return cr * cam_rel.inverse() * cs.inverse();
}

/// Joint Gauss-Newton alignment of one place pair, starting from `init`.
inline AlignmentEstimate solve_alignment(const AlignmentInput& in, const Pose& init, const SolverConfig& cfg,
                                         const Camera& cam) {
  if (!(cfg.step_tolerance > 0.0) || cfg.max_iterations < 1 || !(cfg.nu > 0.0)) {
    throw InvalidArgument("solve_alignment: tolerances and iteration limits must be positive");
  }
  std::mt19937_64 rng(cfg.seed);
  AlignmentEstimate est;
  const bool geo = cfg.use_geometry && !in.source_surfels.empty() && !in.reference_surfels.empty();
  std::optional<SurfelIndex> index;
  if (geo) index.emplace(in.reference_surfels, cfg.match);

  // Essential-matrix pre-filter of the indirect matches.
  std::vector<FeatureMatch> indirect;
  EssentialRansacResult ransac;
  if (cfg.use_indirect && in.features.size() >= 8) {
    ransac = essential_ransac(in.features, cam, rng, cfg.ransac);
    for (std::size_t i = 0; i < in.features.size(); ++i) {
      if (ransac.inlier[i]) indirect.push_back(in.features[i]);
    }
    est.indirect_total = in.features.size();
  }
  est.indirect_inliers = indirect.size();

  Pose pose = init;
  std::size_t init_matches = geo ? index->match(in.source_surfels, pose).size() : 0;

  if (cfg.visual_seed && geo && ransac.valid && indirect.size() >= static_cast<std::size_t>(cfg.min_feature_matches)) {
    const auto rel = decompose_essential(ransac.essential, in.features, ransac.inlier);
    if (rel) {
      const auto src = detail::coarse_levels(in.source_surfels);
      const auto ref = detail::coarse_levels(in.reference_surfels);
      const SurfelIndex coarse(ref, cfg.match);
      double best = detail::surfel_alignment_score(coarse, src, pose);
      const double ratio = std::pow(cfg.seed_max_scale / cfg.seed_min_scale, 1.0 / std::max(1, cfg.seed_steps - 1));
      double s = cfg.seed_min_scale;
      for (int k = 0; k < cfg.seed_steps; ++k, s *= ratio) {
        const Pose cand = lidar_alignment_from_camera(Pose(rel->rotation, s * rel->translation), in.frames, cam);
        const double sc = detail::surfel_alignment_score(coarse, src, cand);
        if (sc > best) {
          best = sc;
          pose = cand;
          est.seeded = true;
        }
      }
      if (est.seeded) init_matches = index->match(in.source_surfels, pose).size();
    }
  }

  if (init_matches < static_cast<std::size_t>(cfg.min_surfel_matches) &&
      indirect.size() < static_cast<std::size_t>(cfg.min_feature_matches)) {
    throw InsufficientConstraints("solve_alignment: too few surfel and feature matches");
  }

  const bool semi = cfg.use_semi_direct && in.source_image && in.reference_image && in.reference_depth &&
                    !in.reference_features.empty();
  std::vector<FeatureMatch> semi_matches;
  Pose last_warp_pose;
  bool warped = false;
  bool frozen = false;
  ModalityScales scales;
  double last_step = std::numeric_limits<double>::infinity();
  Matrix6d info_geo = Matrix6d::Zero(), info_photo = Matrix6d::Zero();
  double ssq_geo = 0.0, ssq_photo = 0.0;
  std::size_t n_geo = 0, n_photo = 0;

  for (int it = 0; it < cfg.max_iterations; ++it) {
    JointProblem problem(cam, in.frames, pose);
    problem.set_geometric_scale(cfg.geometric_scale);
    if (geo) problem.set_surfel_matches(index->match(in.source_surfels, pose));

    if (semi && it > 0 && it % cfg.semi_direct_cadence == 0 && last_step < cfg.semi_direct_gate &&
        (!warped || log(pose * last_warp_pose.inverse()).norm() > cfg.semi_direct_min_motion)) {
      const Pose rel = camera_relative(pose, in.frames, cam);
      auto tracked = track_semi_direct(in.reference_features, *in.reference_image, *in.reference_depth,
                                       *in.source_image, rel, cam, in.semi_direct_sigma_p, in.pair_index,
                                       cfg.refine);
      semi_matches.clear();
      if (tracked.size() >= 8) {
        const auto r = essential_ransac(tracked, cam, rng, cfg.ransac);
        for (std::size_t i = 0; i < tracked.size(); ++i) {
          if (r.inlier[i]) semi_matches.push_back(tracked[i]);
        }
      }
      last_warp_pose = pose;
      warped = true;
    }
    std::vector<FeatureMatch> feats = indirect;
    feats.insert(feats.end(), semi_matches.begin(), semi_matches.end());
    problem.set_features(feats);
    problem.update_variances(Twist::Zero());

    const ResidualRows g = problem.geometric_rows(Twist::Zero());
    const ResidualRows p = problem.photometric_rows(Twist::Zero());
    // Scales are provisional until the iterate settles, then frozen.
    const bool settle = cfg.normalization == NormalizationMode::initial ? it == 0
                                                                         : last_step < cfg.normalization_gate;
    if (!frozen) {
      scales = normalize_scales(detail::whitened_squares(g), detail::whitened_squares(p));
      frozen = settle;
    } else {
      // A modality that appears later (semi-direct only) gets its scale once.
      if (scales.alpha == 0.0 && g.rows() > 0) scales.alpha = modality_scale(detail::whitened_squares(g));
      if (scales.beta == 0.0 && p.rows() > 0) scales.beta = modality_scale(detail::whitened_squares(p));
    }
    est.normalization_iteration = frozen && est.normalization_iteration < 0 ? it : est.normalization_iteration;
    problem.set_scales(scales);
    const auto wg = detail::robust_weights(g.residual, g.information, cfg.nu);
    const auto wp = detail::robust_weights(p.residual, p.information, cfg.nu);
    problem.set_robust_weights(wg, wp);

    const StackedRows s = problem.stack(g, p);
    if (s.residual.size() < 6) throw InsufficientConstraints("solve_alignment: fewer than 6 rows");
    const Eigen::VectorXd& sw = s.weight;
    const Matrix6d h = s.jacobian.transpose() * sw.asDiagonal() * s.jacobian;
    const Vector6d grad = s.jacobian.transpose() * (sw.array() * s.residual.array()).matrix();

    // Per-modality information and residual scale for the covariance.
    info_geo.setZero();
    info_photo.setZero();
    Vector6d raw_grad = Vector6d::Zero();
    ssq_geo = ssq_photo = 0.0;
    n_geo = g.rows();
    n_photo = p.rows();
    if (n_geo > 0) {
      const Eigen::VectorXd w = g.information.cwiseProduct(Eigen::VectorXd::Map(wg.data(), g.residual.size()));
      info_geo = g.jacobian.transpose() * w.asDiagonal() * g.jacobian;
      raw_grad += g.jacobian.transpose() * w.cwiseProduct(g.residual);
      ssq_geo = w.dot(g.residual.cwiseAbs2());
    }
    if (n_photo > 0) {
      const Eigen::VectorXd w = p.information.cwiseProduct(Eigen::VectorXd::Map(wp.data(), p.residual.size()));
      info_photo = p.jacobian.transpose() * w.asDiagonal() * p.jacobian;
      raw_grad += p.jacobian.transpose() * w.cwiseProduct(p.residual);
      ssq_photo = w.dot(p.residual.cwiseAbs2());
    }
    est.final_geometric_cost = 0.5 * ssq_geo;
    est.final_photometric_cost = 0.5 * ssq_photo;
    est.surfel_matches = n_geo;
    est.semi_direct_matches = semi_matches.size();
    est.inlier_features = feats;
    est.gradient_norm = raw_grad.norm();

    Eigen::SelfAdjointEigenSolver<Matrix6d> es(h);
    const double lmax = es.eigenvalues().maxCoeff();
    const double lmin = es.eigenvalues().minCoeff();
    if (!(lmin > 0.0) || lmax / lmin > cfg.max_condition) {
      throw DegenerateAlignment("solve_alignment: normal equations condition number above limit");
    }
    Vector6d step = -h.ldlt().solve(grad);
    const double c0 = 0.5 * (sw.array() * s.residual.array().square()).sum();
    for (int k = 0; k < cfg.max_halvings && problem.cost(step) > c0; ++k) step *= 0.5;

    pose = (exp(step) * pose).orthonormalized();
    est.iterations = it + 1;
    last_step = step.norm();
    est.last_step = last_step;
    if (last_step < cfg.step_tolerance) {
      est.converged = true;
      break;
    }
  }

  est.pose = pose;
  est.scales = scales;
  // Sigma = (sum_m H_m / sigma_m^2)^-1 with sigma_m^2 the weighted mean squared residual.
  Matrix6d info = Matrix6d::Zero();
  if (n_geo > 0) info += info_geo / std::max(ssq_geo / static_cast<double>(n_geo), kMinResidualVariance);
  if (n_photo > 0) info += info_photo / std::max(ssq_photo / static_cast<double>(n_photo), kMinResidualVariance);
  Eigen::SelfAdjointEigenSolver<Matrix6d> ies(info);
  const double imax = ies.eigenvalues().maxCoeff(), imin = ies.eigenvalues().minCoeff();
  if (!(imin > 0.0) || imax / imin > cfg.max_condition) {
    throw DegenerateAlignment("solve_alignment: information matrix condition number above limit");
  }
  est.covariance = ies.eigenvectors() * ies.eigenvalues().cwiseInverse().asDiagonal() *
                   ies.eigenvectors().transpose();
  est.covariance = 0.5 * (est.covariance + est.covariance.transpose());
  return est;
}

/// Diagnostic record of one solve, one JSON object per line.
inline nlohmann::json to_json(const AlignmentEstimate& e) {
  Eigen::SelfAdjointEigenSolver<Matrix6d> es(e.covariance);
  std::vector<double> eig(es.eigenvalues().data(), es.eigenvalues().data() + 6);
  return {{"iterations", e.iterations},
          {"converged", e.converged},
          {"r_geometric", e.final_geometric_cost},
          {"r_photometric", e.final_photometric_cost},
          {"surfel_matches", e.surfel_matches},
          {"indirect_inliers", e.indirect_inliers},
          {"indirect_total", e.indirect_total},
          {"semi_direct_matches", e.semi_direct_matches},
          {"seeded", e.seeded},
          {"alpha", e.scales.alpha},
          {"beta", e.scales.beta},
          {"covariance_eigenvalues", eig}};
}

}  // namespace photogeo
