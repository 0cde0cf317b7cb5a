#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "photogeo/errors.hpp"

namespace photogeo {

using Vector2d = Eigen::Vector2d;
using Vector3d = Eigen::Vector3d;
using Matrix3d = Eigen::Matrix3d;
using Matrix4d = Eigen::Matrix4d;
using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

/// se(3) coordinates ordered (translational rho, rotational phi).
using Twist = Vector6d;
/// Covariance over Twist coordinates, same ordering.
using Covariance6 = Matrix6d;

/// Rigid transform on SE(3); maps points of the child frame into the parent.
struct Pose {
  Matrix3d rotation = Matrix3d::Identity();
  Vector3d translation = Vector3d::Zero();

  Pose() = default;
  Pose(const Matrix3d& r, const Vector3d& t) : rotation(r), translation(t) {}

  static Pose Identity() { return {}; }

  Pose operator*(const Pose& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }

  Vector3d operator*(const Vector3d& p) const { return rotation * p + translation; }

  Pose inverse() const {
    Matrix3d rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  Matrix4d matrix() const {
    Matrix4d m = Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  /// Projects the rotation back onto SO(3) (polar decomposition).
  Pose orthonormalized() const {
    Eigen::JacobiSVD<Matrix3d> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
    if (r.determinant() < 0) {
      Matrix3d u = svd.matrixU();
      u.col(2) *= -1.0;
      r = u * svd.matrixV().transpose();
    }
    return {r, translation};
  }

  bool isFinite() const { return rotation.allFinite() && translation.allFinite(); }
};

inline Matrix3d skew(const Vector3d& v) {
  Matrix3d m;
  m << 0.0, -v.z(), v.y(),
       v.z(), 0.0, -v.x(),
       -v.y(), v.x(), 0.0;
  return m;
}

inline Vector3d unskew(const Matrix3d& m) {
  return {0.5 * (m(2, 1) - m(1, 2)), 0.5 * (m(0, 2) - m(2, 0)), 0.5 * (m(1, 0) - m(0, 1))};
}

/// 4x4 matrix form of a twist.
inline Matrix4d hat(const Twist& xi) {
  Matrix4d m = Matrix4d::Zero();
  m.topLeftCorner<3, 3>() = skew(xi.tail<3>());
  m.topRightCorner<3, 1>() = xi.head<3>();
  return m;
}

inline Twist vee(const Matrix4d& m) {
  Twist xi;
  xi.head<3>() = m.topRightCorner<3, 1>();
  xi.tail<3>() = unskew(m.topLeftCorner<3, 3>());
  return xi;
}

/// Adjoint of se(3): ad(xi) = [[phi^, rho^], [0, phi^]].
inline Matrix6d ad(const Twist& xi) {
  Matrix6d m = Matrix6d::Zero();
  m.topLeftCorner<3, 3>() = skew(xi.tail<3>());
  m.topRightCorner<3, 3>() = skew(xi.head<3>());
  m.bottomRightCorner<3, 3>() = skew(xi.tail<3>());
  return m;
}

/// Adjoint of SE(3): exp(Ad(T) xi) = T exp(xi) T^-1.
inline Matrix6d adjoint(const Pose& t) {
  Matrix6d m = Matrix6d::Zero();
  m.topLeftCorner<3, 3>() = t.rotation;
  m.topRightCorner<3, 3>() = skew(t.translation) * t.rotation;
  m.bottomRightCorner<3, 3>() = t.rotation;
  return m;
}

namespace so3 {

inline constexpr double kSmallAngle = 1e-8;

inline Matrix3d exp(const Vector3d& phi) {
  const double theta = phi.norm();
  const Matrix3d k = skew(phi);
  if (theta < kSmallAngle) {
    return Matrix3d::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Matrix3d::Identity() + a * k + b * k * k;
}

/// Rotation vector of R. Throws DegenerateRotation within `pi_margin` of pi.
inline Vector3d log(const Matrix3d& r, double pi_margin = 1e-6) {
  const Vector3d w = unskew(r);  // sin(theta) * axis
  const double s = w.norm();
  const double c = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(s, c);
  if (theta > std::numbers::pi - pi_margin) {
    throw DegenerateRotation("rotation angle too close to pi for log");
  }
  if (theta < 1e-5) {
    return (1.0 + theta * theta / 6.0) * w;
  }
  return (theta / s) * w;
}

/// Left Jacobian of SO(3).
inline Matrix3d left_jacobian(const Vector3d& phi) {
  const double theta = phi.norm();
  const Matrix3d k = skew(phi);
  if (theta < 1e-5) {
    return Matrix3d::Identity() + 0.5 * k + k * k / 6.0;
  }
  const double t2 = theta * theta;
  return Matrix3d::Identity() + (1.0 - std::cos(theta)) / t2 * k +
         (theta - std::sin(theta)) / (t2 * theta) * k * k;
}

inline Matrix3d inv_left_jacobian(const Vector3d& phi) {
  const double theta = phi.norm();
  const Matrix3d k = skew(phi);
  if (theta < 1e-5) {
    return Matrix3d::Identity() - 0.5 * k + k * k / 12.0;
  }
  const double t2 = theta * theta;
  const double coeff = 1.0 / t2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Matrix3d::Identity() - 0.5 * k + coeff * k * k;
}

}  // namespace so3

namespace detail {

inline void require_finite(const Twist& xi, const char* what) {
  if (!xi.allFinite()) throw InvalidArgument(std::string(what) + ": non-finite twist");
}

/// Q block of the SE(3) left Jacobian.
inline Matrix3d jacobian_q(const Vector3d& rho, const Vector3d& phi) {
  const double theta = phi.norm();
  const Matrix3d p = skew(phi);
  const Matrix3d r = skew(rho);
  double c1, c2, c3;
  if (theta < 1e-2) {
    const double t2 = theta * theta;
    c1 = 1.0 / 6.0 - t2 / 120.0;
    c2 = 1.0 / 24.0 - t2 / 720.0;
    c3 = 1.0 / 120.0 - t2 / 2520.0;
  } else {
    const double t2 = theta * theta;
    const double s = std::sin(theta), c = std::cos(theta);
    c1 = (theta - s) / (t2 * theta);
    c2 = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2);
    c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta);
  }
  const Matrix3d pr = p * r;
  const Matrix3d rp = r * p;
  const Matrix3d prp = pr * p;
  return 0.5 * r + c1 * (pr + rp + prp) + c2 * (p * pr + rp * p - 3.0 * prp) +
         c3 * (prp * p + p * prp);
}

}  // namespace detail

/// Exponential map se(3) -> SE(3).
inline Pose exp(const Twist& xi) {
  detail::require_finite(xi, "exp");
  const Vector3d phi = xi.tail<3>();
  return {so3::exp(phi), so3::left_jacobian(phi) * xi.head<3>()};
}

/// Logarithm SE(3) -> se(3); rejects rotations within 1e-6 of pi.
inline Twist log(const Pose& t) {
  if (!t.isFinite()) throw InvalidArgument("log: non-finite pose");
  const Vector3d phi = so3::log(t.rotation);
  Twist xi;
  xi.head<3>() = so3::inv_left_jacobian(phi) * t.translation;
  xi.tail<3>() = phi;
  return xi;
}

/// Geodesic interpolation T_k exp(alpha log(T_k^-1 T_k1)).
inline Pose interpolate(const Pose& tk, const Pose& tk1, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw OutOfRange("interpolate: alpha outside [0,1]");
  }
  if (alpha == 0.0) return tk;
  if (alpha == 1.0) return tk1;
  return tk * exp(alpha * log(tk.inverse() * tk1));
}

/// Closed-form left Jacobian of SE(3).
inline Matrix6d left_jacobian(const Twist& xi) {
  detail::require_finite(xi, "left_jacobian");
  const Matrix3d j = so3::left_jacobian(xi.tail<3>());
  Matrix6d m = Matrix6d::Zero();
  m.topLeftCorner<3, 3>() = j;
  m.bottomRightCorner<3, 3>() = j;
  m.topRightCorner<3, 3>() = detail::jacobian_q(xi.head<3>(), xi.tail<3>());
  return m;
}

/// Closed-form inverse of the SE(3) left Jacobian.
inline Matrix6d exact_inv_left_jacobian(const Twist& xi) {
  detail::require_finite(xi, "exact_inv_left_jacobian");
  const Matrix3d ji = so3::inv_left_jacobian(xi.tail<3>());
  const Matrix3d q = detail::jacobian_q(xi.head<3>(), xi.tail<3>());
  Matrix6d m = Matrix6d::Zero();
  m.topLeftCorner<3, 3>() = ji;
  m.bottomRightCorner<3, 3>() = ji;
  m.topRightCorner<3, 3>() = -ji * q * ji;
  return m;
}

/// Number of ad() terms kept in the BCH series used for pose fusion.
inline constexpr int kBchOrder = 2;

/// Inverse left Jacobian from the truncated BCH series I - ad/2 + ad^2/12.
inline Matrix6d inv_left_jacobian(const Twist& xi) {
  detail::require_finite(xi, "inv_left_jacobian");
  const Matrix6d a = ad(xi);
  return Matrix6d::Identity() - 0.5 * a + (1.0 / 12.0) * a * a;
}

/// Angle of the rotation part (rad).
inline double rotation_angle(const Matrix3d& r) {
  return std::atan2(unskew(r).norm(), 0.5 * (r.trace() - 1.0));
}

}  // namespace photogeo
