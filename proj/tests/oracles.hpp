#pragma once

// Independent reference implementations shared by the unit and acceptance tests.

#include <random>
#include <vector>

#include "photogeo/fusion.hpp"

namespace oracle {

using namespace photogeo;

inline Twist random_twist(std::mt19937_64& rng, double rot, double trans) {
  std::normal_distribution<double> g(0.0, 1.0);
  Twist xi;
  xi << trans * g(rng), trans * g(rng), trans * g(rng), rot * g(rng), rot * g(rng), rot * g(rng);
  return xi;
}

/// Random SPD covariance with eigenvalues spread over [lo, hi].
inline Covariance6 random_covariance(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::Matrix<double, 6, 6> a;
  for (int i = 0; i < 36; ++i) a(i) = u(rng) - 0.5;
  const Eigen::HouseholderQR<Matrix6d> qr(a);
  const Matrix6d q = qr.householderQ();
  Vector6d ev;
  for (int i = 0; i < 6; ++i) ev(i) = lo * std::pow(hi / lo, u(rng));
  const Matrix6d c = q * ev.asDiagonal() * q.transpose();
  return 0.5 * (c + c.transpose());
}

/// Two-point geodesic mean by fixed-point iteration of the tangent-space average.
inline Pose geodesic_midpoint(const Pose& a, const Pose& b) {
  Pose m = a;
  for (int it = 0; it < 100; ++it) {
    const Twist step = 0.5 * (log(a * m.inverse()) + log(b * m.inverse()));
    m = exp(step) * m;
    if (step.norm() < 1e-15) break;
  }
  return m;
}

struct BatchResult {
  Pose pose;
  Covariance6 covariance;
};

/// Batch maximum-likelihood fusion of all estimates at once, with the exact
/// right-Jacobian inverse J_r^-1(xi) = J_l^-1(-xi).
inline BatchResult batch_fuse(const std::vector<Pose>& poses, const std::vector<Covariance6>& covs) {
  Pose est = poses.front();
  Matrix6d a;
  for (int it = 0; it < 100; ++it) {
    a.setZero();
    Vector6d b = Vector6d::Zero();
    for (std::size_t k = 0; k < poses.size(); ++k) {
      const Twist xi = log(poses[k] * est.inverse());
      const Matrix6d g = exact_inv_left_jacobian(Twist(-xi));
      const Matrix6d w = covs[k].inverse();
      a += g.transpose() * w * g;
      b += g.transpose() * w * xi;
    }
    const Vector6d step = a.ldlt().solve(b);
    est = exp(Twist(step)) * est;
    if (step.norm() < 1e-14) break;
  }
  a.setZero();
  for (std::size_t k = 0; k < poses.size(); ++k) {
    const Matrix6d g = exact_inv_left_jacobian(Twist(-log(poses[k] * est.inverse())));
    a += g.transpose() * covs[k].inverse() * g;
  }
  return {est, a.inverse()};
}

/// Camera with known intrinsics and extrinsic, and no temporal or calibration spread.
inline Camera plain_camera() {
  Camera c;
  Matrix3d r;
  r.col(0) = Vector3d(0, -1, 0);
  r.col(1) = Vector3d(0, 0, -1);
  r.col(2) = Vector3d(1, 0, 0);
  c.lidar_from_camera = Pose(r, Vector3d(0.06, 0.0, -0.08));
  c.time_offset_var = 0.0;
  c.extrinsic_cov = Covariance6::Zero();
  return c;
}

/// Random place transport, as if both passes moved by nearly the same motion.
inline PlaceTransport random_transport(std::mt19937_64& rng) {
  const Pose m = exp(random_twist(rng, 0.1, 1.5));
  PlaceTransport t;
  t.ref_first_from_ref_i = m;
  t.src_i_from_src_first = exp(random_twist(rng, 0.02, 0.1)) * m.inverse();
  return t;
}

/// Epipolar evidence generated at `truth_first` (first-place alignment), with
/// Gaussian pixel noise of variance sigma_p (px^2 per axis) on both image points.
inline std::vector<EvidenceEntry> evidence(std::mt19937_64& rng, const Pose& truth_first, const PlaceTransport& tr,
                                           int place, const Camera& cam, int n, double sigma_p,
                                           double mismatch_rate = 0.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, std::sqrt(sigma_p));
  const Pose at_place = transport_from_first(truth_first, tr);
  const PairFrames frames = PairFrames::rigid();
  const Pose rel = camera_relative(at_place, frames, cam);
  std::vector<EvidenceEntry> out;
  for (int attempt = 0; static_cast<int>(out.size()) < n; ++attempt) {
    if (attempt > 1000 * n) throw InvalidArgument("oracle::evidence: views do not overlap");
    const Vector3d x(1.8 * (u(rng) - 0.5), 1.0 * (u(rng) - 0.5), 1.0);
    const Vector3d pr = x * (2.0 + 6.0 * u(rng));
    const Vector3d ps = rel * pr;
    if (ps.z() < 0.5) continue;
    Vector2d px_r = cam.pixel(pr), px_s = cam.pixel(ps);
    if (!cam.in_image(px_r) || !cam.in_image(px_s)) continue;
    if (u(rng) < mismatch_rate) px_s = Vector2d(cam.width * u(rng), cam.height * u(rng));
    px_r += Vector2d(g(rng), g(rng));
    px_s += Vector2d(g(rng), g(rng));
    EvidenceEntry e;
    e.match.u_r = cam.ray(px_r);
    e.match.u_s = cam.ray(px_s);
    e.match.sigma_p = sigma_p;
    e.match.pair_index = place;
    e.place = place;
    e.transport = tr;
    e.frames = frames;
    out.push_back(e);
  }
  return out;
}

}  // namespace oracle
