#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Geometry>

#include "photogeo/lie.hpp"

namespace photogeo {

/// A time-stamped control pose of the LiDAR-to-world trajectory.
struct Knot {
  double time = 0.0;
  Pose pose;
};

/// Piecewise-geodesic continuous-time trajectory (LiDAR frame in world).
class Trajectory {
 public:
  Trajectory() = default;

  explicit Trajectory(std::vector<Knot> knots, std::string frame = "world<-lidar")
      : knots_(std::move(knots)), frame_(std::move(frame)) {
    if (knots_.size() < 2) throw InvalidArgument("trajectory needs at least two knots");
    for (std::size_t i = 1; i < knots_.size(); ++i) {
      if (!(knots_[i].time > knots_[i - 1].time)) {
        throw InvalidArgument("trajectory timestamps must be strictly increasing");
      }
    }
  }

  const std::vector<Knot>& knots() const { return knots_; }
  const std::string& frame() const { return frame_; }
  double start() const { return knots_.front().time; }
  double end() const { return knots_.back().time; }
  bool contains(double tau) const { return tau >= start() && tau <= end(); }

  Pose pose_at(double tau) const {
    if (knots_.size() < 2) throw InvalidArgument("empty trajectory");
    if (!contains(tau)) {
      std::ostringstream os;
      os << "pose_at: time " << tau << " outside [" << start() << ", " << end() << "]";
      throw OutOfRange(os.str());
    }
    auto it = std::upper_bound(knots_.begin(), knots_.end(), tau,
                               [](double t, const Knot& k) { return t < k.time; });
    if (it == knots_.begin()) return knots_.front().pose;
    if (it == knots_.end()) return knots_.back().pose;
    const Knot& k1 = *it;
    const Knot& k0 = *(it - 1);
    if (tau == k0.time) return k0.pose;
    const double alpha = (tau - k0.time) / (k1.time - k0.time);
    return interpolate(k0.pose, k1.pose, alpha);
  }

 private:
  std::vector<Knot> knots_;
  std::string frame_ = "world<-lidar";
};

/// Source and reference times of one recognised place pair.
struct PlacePair {
  double source_time = 0.0;
  double reference_time = 0.0;
  int index = 0;

  /// Source/reference windows (+-5 s each) must not overlap.
  static constexpr double kMinSeparation = 10.0;

  bool separated() const { return std::abs(source_time - reference_time) > kMinSeparation; }
};

/// Drifted source-to-reference LiDAR transform T(tau_r)^-1 T(tau_s).
inline Pose initial_alignment(const Trajectory& traj, const PlacePair& pair) {
  if (pair.source_time == pair.reference_time) {
    traj.pose_at(pair.source_time);
    return Pose::Identity();
  }
  return traj.pose_at(pair.reference_time).inverse() * traj.pose_at(pair.source_time);
}

/// The two rigid hops that carry a pair-i alignment to the first place.
struct PlaceTransport {
  Pose ref_first_from_ref_i;  // L_r <- L_ri
  Pose src_i_from_src_first;  // L_si <- L_s
};

inline PlaceTransport place_transport(const Trajectory& traj, const PlacePair& first,
                                      const PlacePair& current) {
  PlaceTransport t;
  t.ref_first_from_ref_i =
      traj.pose_at(first.reference_time).inverse() * traj.pose_at(current.reference_time);
  t.src_i_from_src_first =
      traj.pose_at(current.source_time).inverse() * traj.pose_at(first.source_time);
  return t;
}

inline Pose transport_to_first(const Pose& pair_alignment, const PlaceTransport& t) {
  return t.ref_first_from_ref_i * pair_alignment * t.src_i_from_src_first;
}

inline Pose transport_from_first(const Pose& first_alignment, const PlaceTransport& t) {
  return t.ref_first_from_ref_i.inverse() * first_alignment * t.src_i_from_src_first.inverse();
}

/// Re-expresses the alignment of `current` in the frames of the first place pair.
inline Pose transport_to_first(const Pose& pair_alignment, const Trajectory& traj,
                               const PlacePair& first, const PlacePair& current) {
  return transport_to_first(pair_alignment, place_transport(traj, first, current));
}

/// Covariance of a left-perturbed alignment after transport to the first place.
inline Covariance6 transport_covariance(const Covariance6& cov, const PlaceTransport& t) {
  const Matrix6d a = adjoint(t.ref_first_from_ref_i);
  Covariance6 out = a * cov * a.transpose();
  return 0.5 * (out + out.transpose());
}

inline Covariance6 transport_covariance_from_first(const Covariance6& cov,
                                                   const PlaceTransport& t) {
  const Matrix6d a = adjoint(t.ref_first_from_ref_i.inverse());
  Covariance6 out = a * cov * a.transpose();
  return 0.5 * (out + out.transpose());
}

// Text I/O: one knot per line, "timestamp tx ty tz qw qx qy qz".

inline void write_trajectory(std::ostream& os, const Trajectory& traj) {
  os << std::setprecision(17);
  for (const Knot& k : traj.knots()) {
    Eigen::Quaterniond q(k.pose.rotation);
    q.normalize();
    const Vector3d& t = k.pose.translation;
    os << k.time << ' ' << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.w() << ' '
       << q.x() << ' ' << q.y() << ' ' << q.z() << '\n';
  }
}

inline Trajectory read_trajectory(std::istream& is) {
  std::vector<Knot> knots;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    double t, tx, ty, tz, qw, qx, qy, qz;
    if (!(ls >> t >> tx >> ty >> tz >> qw >> qx >> qy >> qz)) {
      throw ParseError("trajectory line " + std::to_string(lineno) + ": expected 8 numbers");
    }
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (q.norm() < 1e-12) {
      throw ParseError("trajectory line " + std::to_string(lineno) + ": zero quaternion");
    }
    q.normalize();
    knots.push_back({t, Pose(q.toRotationMatrix(), Vector3d(tx, ty, tz))});
  }
  try {
    return Trajectory(std::move(knots));
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("trajectory: ") + e.what());
  }
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open trajectory file " + path);
  return read_trajectory(in);
}

inline void save_trajectory(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write trajectory file " + path);
  write_trajectory(out, traj);
}

}  // namespace photogeo
