#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "photogeo/lie.hpp"
#include "photogeo/trajectory.hpp"

namespace photogeo {

/// Pinhole camera rigidly attached to the LiDAR.
struct Camera {
  double fx = 500.0, fy = 500.0, cx = 479.5, cy = 269.5;
  int width = 960, height = 540;
  Pose lidar_from_camera;                           // L <- C
  Covariance6 extrinsic_cov = Covariance6::Zero();  // Sigma_cali over left perturbations of L<-C
  double time_offset_mean = 0.0;                    // s
  double time_offset_var = 0.0;                     // s^2

  Matrix3d K() const {
    Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  Matrix3d K_inv() const {
    Matrix3d k;
    k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
    return k;
  }

  /// Normalised homogeneous ray of a pixel.
  Vector3d ray(const Vector2d& px) const {
    return {(px.x() - cx) / fx, (px.y() - cy) / fy, 1.0};
  }

  Vector2d pixel(const Vector3d& ray_or_point) const {
    return {fx * ray_or_point.x() / ray_or_point.z() + cx,
            fy * ray_or_point.y() / ray_or_point.z() + cy};
  }

  bool in_image(const Vector2d& px, double margin = 0.0) const {
    return px.x() >= margin && px.y() >= margin && px.x() <= width - 1 - margin &&
           px.y() <= height - 1 - margin;
  }

  bool valid() const { return fx > 0.0 && fy > 0.0 && width > 0 && height > 0; }
};

enum class FeatureKind { indirect, semi_direct };

inline const char* to_string(FeatureKind k) {
  return k == FeatureKind::indirect ? "indirect" : "semi-direct";
}

/// A correspondence between normalised rays of the source and reference images.
struct FeatureMatch {
  Vector3d u_s = Vector3d::UnitZ();
  Vector3d u_r = Vector3d::UnitZ();
  FeatureKind kind = FeatureKind::indirect;
  double sigma_p = 1.0;  // pixel noise variance, px^2
  int pair_index = 0;
};

/// Camera pose in the world at image time tau + dtau.
inline Pose camera_pose(const Trajectory& traj, const Camera& cam, double tau, double dtau) {
  return traj.pose_at(tau + dtau) * cam.lidar_from_camera;
}

/// LiDAR motion over the camera time offset, L(tau) <- L(tau + dtau), sampled at
/// the mean offset and at +-step for the temporal Jacobians.
struct OffsetMotion {
  Pose at_mean;
  Pose plus;
  Pose minus;
  double step = 1e-4;
};

inline OffsetMotion offset_motion(const Trajectory& traj, double tau, double mean, double step = 1e-4) {
  const Pose inv = traj.pose_at(tau).inverse();
  return {inv * traj.pose_at(tau + mean), inv * traj.pose_at(tau + mean + step),
          inv * traj.pose_at(tau + mean - step), step};
}

/// Everything a residual needs about the frames of one place pair besides the alignment.
struct PairFrames {
  OffsetMotion source;
  OffsetMotion reference;

  static PairFrames rigid() { return {}; }
};

inline PairFrames pair_frames(const Trajectory& traj, const PlacePair& pair, const Camera& cam,
                              double step = 1e-4) {
  return {offset_motion(traj, pair.source_time, cam.time_offset_mean, step),
          offset_motion(traj, pair.reference_time, cam.time_offset_mean, step)};
}

/// Source-from-reference camera transform (Cs <- Cr) for a LiDAR alignment Lr <- Ls.
inline Pose camera_relative(const Pose& lidar_alignment, const Pose& src_offset,
                            const Pose& ref_offset, const Pose& lidar_from_camera) {
  const Pose cs = src_offset * lidar_from_camera;
  const Pose cr = ref_offset * lidar_from_camera;
  return cs.inverse() * lidar_alignment.inverse() * cr;
}

inline Pose camera_relative(const Pose& lidar_alignment, const PairFrames& frames, const Camera& cam) {
  return camera_relative(lidar_alignment, frames.source.at_mean, frames.reference.at_mean,
                         cam.lidar_from_camera);
}

namespace detail {

/// e = u_s^T [t/|t|]x R u_r for the relative pose Cs <- Cr.
inline double epipolar_value(const Vector3d& u_s, const Vector3d& u_r, const Pose& s) {
  const double n = s.translation.norm();
  const Vector3d t = n < 1e-9 ? s.translation : Vector3d(s.translation / n);
  return u_s.dot(t.cross(s.rotation * u_r));
}

}  // namespace detail

struct EpipolarRow {
  double residual = 0.0;
  Eigen::Matrix<double, 1, 6> jacobian = Eigen::Matrix<double, 1, 6>::Zero();
  bool degenerate_baseline = false;
};

/// Pose-dependent part of the epipolar rows at one linearisation point.
struct EpipolarModel {
  EpipolarModel(const Twist& correction, const Pose& init, const Camera& cam,
                const PairFrames& frames = PairFrames::rigid()) {
    const Pose alignment = exp(correction) * init;
    const Pose cr = frames.reference.at_mean * cam.lidar_from_camera;
    const Pose s = camera_relative(alignment, frames.source.at_mean, frames.reference.at_mean,
                                   cam.lidar_from_camera);
    rotation = s.rotation;
    const double tn = s.translation.norm();
    degenerate_baseline = tn < 1e-9;
    that = degenerate_baseline ? s.translation : Vector3d(s.translation / tn);
    Matrix3d dthat_dt = Matrix3d::Identity();
    if (!degenerate_baseline) dthat_dt = (Matrix3d::Identity() - that * that.transpose()) / tn;
    dthat_dt_r = dthat_dt * s.rotation;
    skew_t_r = skew(that) * s.rotation;
    chain = -adjoint(cr.inverse()) * left_jacobian(correction);
  }

  Matrix3d rotation;
  Vector3d that;
  bool degenerate_baseline = false;
  Matrix3d dthat_dt_r;  // d(t/|t|)/dt R
  Matrix3d skew_t_r;    // [t/|t|]x R
  Matrix6d chain;       // right perturbation of S per unit correction
};

inline EpipolarRow epipolar_residual(const FeatureMatch& m, const EpipolarModel& model) {
  EpipolarRow row;
  row.degenerate_baseline = model.degenerate_baseline;
  const Vector3d w = model.rotation * m.u_r;
  row.residual = m.u_s.dot(model.that.cross(w));

  // Right perturbation S exp(eps): d/d eps_rho and d/d eps_phi.
  Eigen::Matrix<double, 1, 6> de;
  de.head<3>() = w.cross(m.u_s).transpose() * model.dthat_dt_r;
  de.tail<3>() = -(m.u_s.transpose() * model.skew_t_r * skew(m.u_r));
  row.jacobian = de * model.chain;
  return row;
}

/// Epipolar residual for a correction applied as exp(correction) * init, with
/// its analytic Jacobian.
inline EpipolarRow epipolar_residual(const FeatureMatch& m, const Twist& correction,
                                     const Pose& init, const Camera& cam,
                                     const PairFrames& frames = PairFrames::rigid()) {
  return epipolar_residual(m, EpipolarModel(correction, init, cam, frames));
}

/// Residual only, with explicit offsets and extrinsic; used for the
/// finite-difference uncertainty Jacobians.
inline double epipolar_value(const FeatureMatch& m, const Pose& alignment, const Pose& src_offset,
                             const Pose& ref_offset, const Pose& lidar_from_camera) {
  return detail::epipolar_value(
      m.u_s, m.u_r, camera_relative(alignment, src_offset, ref_offset, lidar_from_camera));
}

/// Variance breakdown of one epipolar residual.
struct ResidualVariance {
  double pixel_source = 0.0;
  double pixel_reference = 0.0;
  double temporal_source = 0.0;
  double temporal_reference = 0.0;
  double calibration = 0.0;

  double total() const {
    return pixel_source + pixel_reference + temporal_source + temporal_reference + calibration;
  }
};

/// Relative camera poses needed to propagate residual variance at one
/// alignment. Depends only on the pose, so it is shared by all matches.
struct VarianceModel {
  VarianceModel(const Twist& correction, const Pose& init, const Camera& cam,
                const PairFrames& frames = PairFrames::rigid())
      : sigma_time(cam.time_offset_var), extrinsic_cov(cam.extrinsic_cov) {
    const Pose alignment = exp(correction) * init;
    const Pose& c = cam.lidar_from_camera;
    const Pose s = camera_relative(alignment, frames.source.at_mean, frames.reference.at_mean, c);
    const double tn = s.translation.norm();
    const Vector3d that = tn < 1e-9 ? s.translation : Vector3d(s.translation / tn);
    e_mat = skew(that) * s.rotation;
    kinv2 = cam.K_inv().leftCols<2>();
    temporal = cam.time_offset_var > 0.0;
    if (temporal) {
      src_plus = camera_relative(alignment, frames.source.plus, frames.reference.at_mean, c);
      src_minus = camera_relative(alignment, frames.source.minus, frames.reference.at_mean, c);
      ref_plus = camera_relative(alignment, frames.source.at_mean, frames.reference.plus, c);
      ref_minus = camera_relative(alignment, frames.source.at_mean, frames.reference.minus, c);
      src_h2 = 2.0 * frames.source.step;
      ref_h2 = 2.0 * frames.reference.step;
    }
    calibration = !cam.extrinsic_cov.isZero(0.0);
    if (calibration) {
      for (int k = 0; k < 6; ++k) {
        Twist d = Twist::Zero();
        d(k) = kCalibrationStep;
        ext_plus[k] = camera_relative(alignment, frames.source.at_mean, frames.reference.at_mean, exp(d) * c);
        ext_minus[k] = camera_relative(alignment, frames.source.at_mean, frames.reference.at_mean, exp(-d) * c);
      }
    }
  }

  static constexpr double kCalibrationStep = 1e-6;
  double sigma_time;
  Covariance6 extrinsic_cov;
  Matrix3d e_mat;
  Eigen::Matrix<double, 3, 2> kinv2;
  bool temporal = false;
  bool calibration = false;
  Pose src_plus, src_minus, ref_plus, ref_minus;
  double src_h2 = 1.0, ref_h2 = 1.0;
  std::array<Pose, 6> ext_plus, ext_minus;
};

/// Pixel, time-offset and extrinsic uncertainty propagated to the residual.
/// The calibration term carries a factor of 2.
inline ResidualVariance propagate_variance(const FeatureMatch& m, const VarianceModel& model) {
  const Eigen::RowVector2d js = (model.e_mat * m.u_r).transpose() * model.kinv2;
  const Eigen::RowVector2d jr = (m.u_s.transpose() * model.e_mat) * model.kinv2;

  ResidualVariance v;
  v.pixel_source = m.sigma_p * js.squaredNorm();
  v.pixel_reference = m.sigma_p * jr.squaredNorm();

  if (model.temporal) {
    const double jt1 = (detail::epipolar_value(m.u_s, m.u_r, model.src_plus) -
                        detail::epipolar_value(m.u_s, m.u_r, model.src_minus)) /
                       model.src_h2;
    const double jt2 = (detail::epipolar_value(m.u_s, m.u_r, model.ref_plus) -
                        detail::epipolar_value(m.u_s, m.u_r, model.ref_minus)) /
                       model.ref_h2;
    v.temporal_source = model.sigma_time * jt1 * jt1;
    v.temporal_reference = model.sigma_time * jt2 * jt2;
  }

  if (model.calibration) {
    Eigen::Matrix<double, 1, 6> jc;
    for (std::size_t k = 0; k < 6; ++k) {
      const double ep = detail::epipolar_value(m.u_s, m.u_r, model.ext_plus[k]);
      const double em = detail::epipolar_value(m.u_s, m.u_r, model.ext_minus[k]);
      jc(static_cast<int>(k)) = (ep - em) / (2.0 * VarianceModel::kCalibrationStep);
    }
    v.calibration = 2.0 * (jc * model.extrinsic_cov * jc.transpose())(0, 0);
  }
  return v;
}

inline ResidualVariance propagate_variance(const FeatureMatch& m, const Twist& correction,
                                           const Pose& init, const Camera& cam,
                                           const PairFrames& frames = PairFrames::rigid()) {
  return propagate_variance(m, VarianceModel(correction, init, cam, frames));
}

inline double propagate_covariance(const FeatureMatch& m, const Twist& correction, const Pose& init,
                                   const Camera& cam, const PairFrames& frames = PairFrames::rigid()) {
  return propagate_variance(m, correction, init, cam, frames).total();
}

// Feature dumps: CSV with header "pair_index,kind,u_s_x,u_s_y,u_r_x,u_r_y,sigma_p",
// image coordinates in pixels.

inline void write_features_csv(std::ostream& os, const std::vector<FeatureMatch>& matches,
                               const Camera& cam) {
  os << "pair_index,kind,u_s_x,u_s_y,u_r_x,u_r_y,sigma_p\n";
  os << std::setprecision(12);
  for (const FeatureMatch& m : matches) {
    const Vector2d ps = cam.pixel(m.u_s), pr = cam.pixel(m.u_r);
    os << m.pair_index << ',' << to_string(m.kind) << ',' << ps.x() << ',' << ps.y() << ','
       << pr.x() << ',' << pr.y() << ',' << m.sigma_p << '\n';
  }
}

inline std::vector<FeatureMatch> read_features_csv(std::istream& is, const Camera& cam) {
  std::vector<FeatureMatch> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line.rfind("pair_index", 0) == 0) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 7) throw ParseError("features line " + std::to_string(lineno) + ": expected 7 fields");
    FeatureMatch m;
    try {
      m.pair_index = std::stoi(f[0]);
      if (f[1] == "indirect") {
        m.kind = FeatureKind::indirect;
      } else if (f[1] == "semi-direct") {
        m.kind = FeatureKind::semi_direct;
      } else {
        throw ParseError("features line " + std::to_string(lineno) + ": unknown kind " + f[1]);
      }
      m.u_s = cam.ray({std::stod(f[2]), std::stod(f[3])});
      m.u_r = cam.ray({std::stod(f[4]), std::stod(f[5])});
      m.sigma_p = std::stod(f[6]);
    } catch (const std::logic_error&) {
      throw ParseError("features line " + std::to_string(lineno) + ": bad number");
    }
    out.push_back(m);
  }
  return out;
}

}  // namespace photogeo
