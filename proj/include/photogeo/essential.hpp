#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/SVD>

#include "photogeo/vision.hpp"

namespace photogeo {

namespace detail {

// Similarity moving the points' centroid to the origin at mean distance sqrt(2).
inline Matrix3d conditioning(const std::vector<FeatureMatch>& matches, const std::vector<std::size_t>& idx,
                             Vector3d FeatureMatch::*side) {
  Eigen::Vector2d c = Eigen::Vector2d::Zero();
  for (std::size_t i : idx) c += ((matches[i].*side) / (matches[i].*side).z()).head<2>();
  c /= static_cast<double>(idx.size());
  double d = 0.0;
  for (std::size_t i : idx) d += (((matches[i].*side) / (matches[i].*side).z()).head<2>() - c).norm();
  d /= static_cast<double>(idx.size());
  const double k = d > 0.0 ? std::sqrt(2.0) / d : 1.0;
  Matrix3d t;
  t << k, 0.0, -k * c.x(), 0.0, k, -k * c.y(), 0.0, 0.0, 1.0;
  return t;
}

}  // namespace detail

/// Normalised linear eight-point estimate of E with u_s^T E u_r = 0, projected onto the
/// essential manifold. Needs at least 8 matches.
inline std::optional<Matrix3d> eight_point(const std::vector<FeatureMatch>& matches,
                                           const std::vector<std::size_t>& idx) {
  if (idx.size() < 8) return std::nullopt;
  const Matrix3d ts = detail::conditioning(matches, idx, &FeatureMatch::u_s);
  const Matrix3d tr = detail::conditioning(matches, idx, &FeatureMatch::u_r);
  Eigen::MatrixXd a(static_cast<Eigen::Index>(idx.size()), 9);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Vector3d s = ts * (matches[idx[r]].u_s / matches[idx[r]].u_s.z());
    const Vector3d q = tr * (matches[idx[r]].u_r / matches[idx[r]].u_r.z());
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) a(static_cast<Eigen::Index>(r), 3 * i + j) = s(i) * q(j);
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd e = svd.matrixV().col(8);
  Matrix3d f;
  f << e(0), e(1), e(2), e(3), e(4), e(5), e(6), e(7), e(8);
  const Matrix3d em = ts.transpose() * f * tr;
  Eigen::JacobiSVD<Matrix3d> es(em, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector3d sv(1.0, 1.0, 0.0);
  Matrix3d out = es.matrixU() * sv.asDiagonal() * es.matrixV().transpose();
  if (!out.allFinite()) return std::nullopt;
  return out;
}

/// Sampson distance of a match to E, in normalised image units.
inline double sampson_distance(const Matrix3d& e, const FeatureMatch& m) {
  const Vector3d er = e * m.u_r;
  const Vector3d ets = e.transpose() * m.u_s;
  const double num = m.u_s.dot(er);
  const double den = er.x() * er.x() + er.y() * er.y() + ets.x() * ets.x() + ets.y() * ets.y();
  if (den <= 0.0) return std::abs(num);
  return std::abs(num) / std::sqrt(den);
}

namespace detail {

inline double signed_sampson(const Matrix3d& e, const FeatureMatch& m) {
  const Vector3d er = e * m.u_r;
  const Vector3d ets = e.transpose() * m.u_s;
  const double den = er.x() * er.x() + er.y() * er.y() + ets.x() * ets.x() + ets.y() * ets.y();
  return den > 0.0 ? m.u_s.dot(er) / std::sqrt(den) : m.u_s.dot(er);
}

/// d signed_sampson / d E, as a 3x3 matrix contracted entrywise with a perturbation of E.
inline Matrix3d signed_sampson_gradient(const Matrix3d& e, const FeatureMatch& m) {
  const Vector3d er = e * m.u_r;
  const Vector3d ets = e.transpose() * m.u_s;
  const double den = er.x() * er.x() + er.y() * er.y() + ets.x() * ets.x() + ets.y() * ets.y();
  const Matrix3d ga = m.u_s * m.u_r.transpose();
  if (!(den > 0.0)) return ga;
  const double a = m.u_s.dot(er);
  Matrix3d gd = Matrix3d::Zero();
  gd.row(0) = 2.0 * er.x() * m.u_r.transpose();
  gd.row(1) = 2.0 * er.y() * m.u_r.transpose();
  gd.col(0) += 2.0 * ets.x() * m.u_s;
  gd.col(1) += 2.0 * ets.y() * m.u_s;
  const double sd = std::sqrt(den);
  return ga / sd - 0.5 * a / (den * sd) * gd;
}

}  // namespace detail

/// Levenberg-Marquardt on the summed squared Sampson distance of `idx`, with E = U diag(1,1,0) V^T
/// and both factors perturbed on the left. The linear estimate is biased under pixel noise.
inline Matrix3d refine_essential(const Matrix3d& e, const std::vector<FeatureMatch>& matches,
                                 const std::vector<std::size_t>& idx, int iterations = 8) {
  Eigen::JacobiSVD<Matrix3d> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3d u = svd.matrixU(), v = svd.matrixV();
  const Matrix3d d = Vector3d(1.0, 1.0, 0.0).asDiagonal();
  const auto n = static_cast<Eigen::Index>(idx.size());
  auto residuals = [&](const Matrix3d& uu, const Matrix3d& vv) {
    const Matrix3d em = uu * d * vv.transpose();
    Eigen::VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = detail::signed_sampson(em, matches[idx[static_cast<std::size_t>(i)]]);
    return r;
  };
  auto moved = [](const Matrix3d& m, const Eigen::Matrix<double, 6, 1>& x, int off) {
    return Matrix3d(so3::exp(Vector3d(x.segment<3>(off))) * m);
  };
  Eigen::VectorXd r = residuals(u, v);
  double cost = r.squaredNorm(), lambda = 1e-3;
  for (int it = 0; it < iterations && n >= 8; ++it) {
    // dE for a left rotation of U is [w]x E, of V it is -E [w]x.
    const Matrix3d em = u * d * v.transpose();
    std::array<Matrix3d, 6> de;
    for (int k = 0; k < 3; ++k) {
      de[static_cast<std::size_t>(k)] = skew(Vector3d::Unit(k)) * em;
      de[static_cast<std::size_t>(k + 3)] = -em * skew(Vector3d::Unit(k));
    }
    Eigen::Matrix<double, Eigen::Dynamic, 6> j(n, 6);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Matrix3d g = detail::signed_sampson_gradient(em, matches[idx[static_cast<std::size_t>(i)]]);
      for (int k = 0; k < 6; ++k) j(i, k) = g.cwiseProduct(de[static_cast<std::size_t>(k)]).sum();
    }
    const Matrix6d jtj = j.transpose() * j;
    const Vector6d g = j.transpose() * r;
    bool improved = false;
    for (int tries = 0; tries < 6 && !improved; ++tries) {
      Matrix6d a = jtj;
      a.diagonal() += lambda * (jtj.diagonal().array() + 1e-12).matrix();
      const Eigen::Matrix<double, 6, 1> step = -a.ldlt().solve(g);
      const Matrix3d nu = moved(u, step, 0), nv = moved(v, step, 3);
      const Eigen::VectorXd nr = residuals(nu, nv);
      if (nr.squaredNorm() < cost) {
        u = nu;
        v = nv;
        r = nr;
        cost = nr.squaredNorm();
        lambda = std::max(lambda * 0.1, 1e-9);
        improved = true;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  return u * d * v.transpose();
}

struct EssentialRansacResult {
  Matrix3d essential = Matrix3d::Zero();
  std::vector<bool> inlier;
  std::size_t inlier_count = 0;
  bool valid = false;
};

struct EssentialRansacOptions {
  double threshold_px = 1.5;
  int iterations = 300;
  /// Points per hypothesis. More than the minimal eight trades inlier-only draws for
  /// hypotheses that survive pixel noise.
  std::size_t sample_size = 12;
  /// Sampling stops early once an all-inlier sample has been drawn with this
  /// probability, judged from the best inlier share so far.
  double confidence = 0.999;
  int min_iterations = 50;
};

/// RANSAC over linear hypotheses from random samples, with local refits of improving ones.
inline EssentialRansacResult essential_ransac(const std::vector<FeatureMatch>& matches,
                                              const Camera& cam, std::mt19937_64& rng,
                                              const EssentialRansacOptions& opt = {}) {
  EssentialRansacResult best;
  best.inlier.assign(matches.size(), false);
  if (matches.size() < 8) return best;
  const double thr = opt.threshold_px / (0.5 * (cam.fx + cam.fy));
  std::vector<std::size_t> all(matches.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  auto score = [&](const Matrix3d& e, std::vector<bool>& mask) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < matches.size(); ++i) {
      mask[i] = sampson_distance(e, matches[i]) < thr;
      n += mask[i];
    }
    return n;
  };

  // Local optimisation: refit on a consensus set gathered at a threshold that shrinks to the
  // nominal one, keeping the result if its truncated cost at that threshold is the lowest so far.
  double best_polished = std::numeric_limits<double>::infinity();
  auto polish = [&](Matrix3d e) {
    for (double widen : {4.0, 2.0, 1.0, 1.0}) {
      std::vector<std::size_t> in;
      for (std::size_t i = 0; i < matches.size(); ++i) {
        if (sampson_distance(e, matches[i]) < widen * thr) in.push_back(i);
      }
      const auto lin = eight_point(matches, in);
      if (!lin) return;
      e = refine_essential(*lin, matches, in);
    }
    double c = 0.0;
    for (const FeatureMatch& x : matches) c += std::min(std::pow(sampson_distance(e, x), 2), thr * thr);
    if (!(c < best_polished)) return;
    best_polished = c;
    std::vector<bool> m(matches.size());
    best.inlier_count = score(e, m);
    best.inlier = m;
    best.essential = e;
    best.valid = true;
  };

  // Sampled hypotheses are noisy, so they are ranked by a truncated quadratic cost
  // at a wider threshold and only the improving ones are polished.
  const double wide2 = 9.0 * thr * thr;
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> sample(std::min(std::max<std::size_t>(opt.sample_size, 8), matches.size()));
  int needed = opt.iterations;
  for (int it = 0; it < std::min(opt.iterations, needed); ++it) {
    for (std::size_t k = 0; k < sample.size(); ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, all.size() - 1);
      std::swap(all[k], all[pick(rng)]);
      sample[k] = all[k];
    }
    const auto e = eight_point(matches, sample);
    if (!e) continue;
    double cost = 0.0;
    for (const FeatureMatch& m : matches) cost += std::min(std::pow(sampson_distance(*e, m), 2), wide2);
    if (cost < best_cost) {
      best_cost = cost;
      polish(*e);
      const double w = static_cast<double>(best.inlier_count) / static_cast<double>(matches.size());
      const double clean = std::pow(w, static_cast<double>(sample.size()));
      if (best.valid && clean > 0.0) {
        const double n = clean >= 1.0 ? 0.0 : std::log(1.0 - opt.confidence) / std::log1p(-clean);
        needed = std::max(opt.min_iterations, static_cast<int>(std::min(std::ceil(n), 1e9)));
      }
    }
  }
  return best;
}

/// Relative pose Cs <- Cr (unit translation) recovered from E by cheirality.
inline std::optional<Pose> decompose_essential(const Matrix3d& e,
                                               const std::vector<FeatureMatch>& matches,
                                               const std::vector<bool>& use) {
  Eigen::JacobiSVD<Matrix3d> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3d u = svd.matrixU(), v = svd.matrixV();
  if (u.determinant() < 0) u = -u;
  if (v.determinant() < 0) v = -v;
  Matrix3d w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const std::array<Matrix3d, 2> rots{u * w * v.transpose(), u * w.transpose() * v.transpose()};
  const Vector3d t0 = u.col(2);
  int best_count = -1;
  Pose best;
  for (const Matrix3d& r : rots) {
    for (double sign : {1.0, -1.0}) {
      const Vector3d t = sign * t0;
      int count = 0;
      for (std::size_t i = 0; i < matches.size(); ++i) {
        if (!use[i]) continue;
        // X_s = d_s u_s = d_r R u_r + t  -> least squares for (d_r, d_s).
        const Vector3d a = r * matches[i].u_r;
        const Vector3d b = matches[i].u_s;
        Eigen::Matrix<double, 3, 2> m;
        m.col(0) = a;
        m.col(1) = -b;
        const Eigen::Vector2d d = m.colPivHouseholderQr().solve(-t);
        if (d(0) > 0.0 && d(1) > 0.0) ++count;
      }
      if (count > best_count) {
        best_count = count;
        best = Pose(r, t);
      }
    }
  }
  if (best_count <= 0) return std::nullopt;
  return best;
}

}  // namespace photogeo
