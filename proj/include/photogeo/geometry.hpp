#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Eigenvalues>

#include "photogeo/lie.hpp"
#include "photogeo/trajectory.hpp"

namespace photogeo {

/// Points in one frame, with optional per-point observation times.
struct PointCloud {
  std::vector<Vector3d> points;
  std::vector<double> times;  // empty, or one per point
  std::string frame = "lidar";

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_times() const { return !times.empty(); }
};

struct ExtractionOptions {
  double half_window = 5.0;  // s
  double radius = 10.0;      // m
};

/// Points observed within +-half_window of tau and within `radius` of the
/// sensor at tau, expressed in the LiDAR frame at tau.
inline PointCloud extract_cloud(const PointCloud& world, const Trajectory& traj, double tau,
                                const ExtractionOptions& opt = {}) {
  if (!traj.contains(tau - opt.half_window) || !traj.contains(tau + opt.half_window)) {
    throw OutOfRange("extract_cloud: trajectory does not cover the extraction window");
  }
  if (world.has_times() && world.times.size() != world.points.size()) {
    throw InvalidArgument("extract_cloud: times/points size mismatch");
  }
  const Pose sensor = traj.pose_at(tau);
  const Pose to_local = sensor.inverse();
  const double r2 = opt.radius * opt.radius;
  PointCloud out;
  out.frame = "lidar@" + std::to_string(tau);
  for (std::size_t i = 0; i < world.points.size(); ++i) {
    if (world.has_times() && std::abs(world.times[i] - tau) > opt.half_window) continue;
    const Vector3d& p = world.points[i];
    if ((p - sensor.translation).squaredNorm() > r2) continue;
    out.points.push_back(to_local * p);
    if (world.has_times()) out.times.push_back(world.times[i]);
  }
  if (out.empty()) throw InsufficientGeometry("extract_cloud: empty selection");
  return out;
}

/// Voxel-level planar patch.
struct Surfel {
  Vector3d centroid = Vector3d::Zero();
  Vector3d normal = Vector3d::UnitZ();
  double weight = 1.0;      // planarity (lambda2 - lambda1) / lambda3, in (0, 1]
  double voxel_size = 0.0;  // resolution level
  int level = 0;
  int count = 0;
};

struct SurfelOptions {
  std::vector<double> levels{0.3, 0.8, 1.5};
  int min_points = 5;
  /// Largest accepted out-of-plane RMS spread sqrt(lambda1), in metres.
  double max_thickness = 0.03;
  double min_weight = 1e-3;
};

namespace detail {

struct VoxelKey {
  std::int64_t x, y, z;
  bool operator==(const VoxelKey&) const = default;
  bool operator<(const VoxelKey& o) const {
    if (x != o.x) return x < o.x;
    if (y != o.y) return y < o.y;
    return z < o.z;
  }
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const {
    std::uint64_t h = static_cast<std::uint64_t>(k.x) * 73856093ULL;
    h ^= static_cast<std::uint64_t>(k.y) * 19349663ULL;
    h ^= static_cast<std::uint64_t>(k.z) * 83492791ULL;
    return static_cast<std::size_t>(h);
  }
};

inline VoxelKey voxel_key(const Vector3d& p, double size) {
  return {static_cast<std::int64_t>(std::floor(p.x() / size)),
          static_cast<std::int64_t>(std::floor(p.y() / size)),
          static_cast<std::int64_t>(std::floor(p.z() / size))};
}

}  // namespace detail

/// Multi-resolution surfel extraction. Normals face the frame origin (the sensor).
inline std::vector<Surfel> build_surfels(const PointCloud& cloud, const SurfelOptions& opt = {}) {
  if (cloud.empty()) throw InsufficientGeometry("build_surfels: empty cloud");
  std::vector<Surfel> out;
  for (std::size_t li = 0; li < opt.levels.size(); ++li) {
    const double size = opt.levels[li];
    if (!(size > 0.0)) throw InvalidArgument("build_surfels: voxel size must be positive");
    // Bucket the points by voxel into one flat array, keeping index order within a voxel.
    std::unordered_map<detail::VoxelKey, std::uint32_t, detail::VoxelKeyHash> ids;
    ids.reserve(cloud.size() / 4 + 1);
    std::vector<detail::VoxelKey> keys;
    std::vector<std::uint32_t> voxel_of(cloud.size()), counts;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const detail::VoxelKey k = detail::voxel_key(cloud.points[i], size);
      const auto [it, fresh] = ids.try_emplace(k, static_cast<std::uint32_t>(keys.size()));
      if (fresh) {
        keys.push_back(k);
        counts.push_back(0);
      }
      voxel_of[i] = it->second;
      ++counts[it->second];
    }
    std::vector<std::uint32_t> begin(keys.size() + 1, 0);
    for (std::size_t v = 0; v < keys.size(); ++v) begin[v + 1] = begin[v] + counts[v];
    std::vector<std::uint32_t> members(cloud.size());
    std::vector<std::uint32_t> fill(begin.begin(), begin.end() - 1);
    for (std::size_t i = 0; i < cloud.size(); ++i) members[fill[voxel_of[i]]++] = static_cast<std::uint32_t>(i);

    std::vector<std::uint32_t> ordered;
    for (std::uint32_t v = 0; v < keys.size(); ++v) {
      if (static_cast<int>(counts[v]) >= opt.min_points) ordered.push_back(v);
    }
    std::sort(ordered.begin(), ordered.end(), [&](auto a, auto b) { return keys[a] < keys[b]; });
    for (const std::uint32_t v : ordered) {
      const std::span<const std::uint32_t> idx(members.data() + begin[v], counts[v]);
      Vector3d mean = Vector3d::Zero();
      for (auto i : idx) mean += cloud.points[i];
      mean /= static_cast<double>(idx.size());
      Matrix3d scatter = Matrix3d::Zero();
      for (auto i : idx) {
        const Vector3d d = cloud.points[i] - mean;
        scatter += d * d.transpose();
      }
      scatter /= static_cast<double>(idx.size());
      Eigen::SelfAdjointEigenSolver<Matrix3d> es(scatter);
      const Vector3d lam = es.eigenvalues().cwiseMax(0.0);  // ascending
      if (!(lam(2) > 0.0)) continue;
      if (std::sqrt(lam(0)) > opt.max_thickness) continue;
      const double w = std::min(1.0, (lam(1) - lam(0)) / lam(2));
      if (!(w >= opt.min_weight)) continue;
      Surfel s;
      s.centroid = mean;
      s.normal = es.eigenvectors().col(0).normalized();
      if (s.normal.dot(-mean) < 0.0) s.normal = -s.normal;
      s.weight = w;
      s.voxel_size = size;
      s.level = static_cast<int>(li);
      s.count = static_cast<int>(idx.size());
      out.push_back(s);
    }
  }
  if (out.empty()) throw InsufficientGeometry("build_surfels: every voxel underpopulated");
  return out;
}

struct SurfelMatch {
  Surfel source;     // in the source frame
  Surfel reference;  // in the reference frame
  double weight = 1.0;
};

struct MatchOptions {
  /// Scale of the normal part of the joint (centroid, normal) metric.
  double normal_scale = 1.0;
  /// Centroid gate as a multiple of the voxel size.
  double gate_factor = 2.0;
};

/// Per-level grid over reference surfels (cell = gate), reusable across guesses.
class SurfelIndex {
 public:
  SurfelIndex(const std::vector<Surfel>& ref, const MatchOptions& opt = {}) : ref_(&ref), opt_(opt) {
    int max_level = -1;
    for (const Surfel& s : ref) max_level = std::max(max_level, s.level);
    levels_.resize(static_cast<std::size_t>(max_level + 1));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      Level& l = levels_[static_cast<std::size_t>(ref[i].level)];
      l.gate = opt.gate_factor * ref[i].voxel_size;
    }
    // Each cell lists the surfels of its 3x3x3 neighbourhood, so a query is one lookup.
    for (std::size_t i = 0; i < ref.size(); ++i) {
      Level& l = levels_[static_cast<std::size_t>(ref[i].level)];
      const detail::VoxelKey k = detail::voxel_key(ref[i].centroid, l.gate);
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        for (std::int64_t dy = -1; dy <= 1; ++dy) {
          for (std::int64_t dz = -1; dz <= 1; ++dz) {
            l.grid[{k.x + dx, k.y + dy, k.z + dz}].push_back(static_cast<std::uint32_t>(i));
          }
        }
      }
    }
  }

  /// One-directional nearest neighbour in (centroid, normal_scale * normal) space,
  /// level by level, gated on centroid distance.
  std::vector<SurfelMatch> match(const std::vector<Surfel>& src, const Pose& guess) const {
    if (!guess.isFinite()) throw InvalidArgument("match_surfels: non-finite guess");
    const std::vector<Surfel>& ref = *ref_;
    std::vector<SurfelMatch> matches;
    const double ns2 = opt_.normal_scale * opt_.normal_scale;
    for (std::size_t level = 0; level < levels_.size(); ++level) {
      const Level& l = levels_[level];
      if (l.grid.empty()) continue;
      const double gate2 = l.gate * l.gate;
      for (const Surfel& s : src) {
        if (s.level != static_cast<int>(level)) continue;
        const Vector3d c = guess * s.centroid;
        const Vector3d n = guess.rotation * s.normal;
        const detail::VoxelKey k = detail::voxel_key(c, l.gate);
        double best = std::numeric_limits<double>::infinity();
        std::int64_t best_idx = -1;
        const auto it = l.grid.find(k);
        if (it == l.grid.end()) continue;
        for (auto j : it->second) {
          const double dc2 = (ref[j].centroid - c).squaredNorm();
          if (dc2 >= gate2) continue;
          const double d2 = dc2 + ns2 * (ref[j].normal - n).squaredNorm();
          if (d2 < best || (d2 == best && static_cast<std::int64_t>(j) < best_idx)) {
            best = d2;
            best_idx = j;
          }
        }
        if (best_idx >= 0) matches.push_back({s, ref[static_cast<std::size_t>(best_idx)], 1.0});
      }
    }
    return matches;
  }

 private:
  struct Level {
    double gate = 0.0;
    std::unordered_map<detail::VoxelKey, std::vector<std::uint32_t>, detail::VoxelKeyHash> grid;
  };
  const std::vector<Surfel>* ref_;
  MatchOptions opt_;
  std::vector<Level> levels_;
};

inline std::vector<SurfelMatch> match_surfels(const std::vector<Surfel>& src,
                                              const std::vector<Surfel>& ref, const Pose& guess,
                                              const MatchOptions& opt = {}) {
  return SurfelIndex(ref, opt).match(src, guess);
}

/// Stacked point-to-plane rows: residual, d(residual)/d(correction), per-row information.
struct ResidualRows {
  Eigen::VectorXd residual;
  Eigen::Matrix<double, Eigen::Dynamic, 6> jacobian;
  Eigen::VectorXd information;

  std::size_t rows() const { return static_cast<std::size_t>(residual.size()); }
};

/// e = n_r^T (p_r - (R p_s + t)) with (R, t) = exp(correction) * init.
inline ResidualRows icp_residuals(const std::vector<SurfelMatch>& matches, const Twist& correction,
                                  const Pose& init) {
  const Pose t = exp(correction) * init;
  const Matrix6d jl = left_jacobian(correction);
  ResidualRows rows;
  const auto n = static_cast<Eigen::Index>(matches.size());
  rows.residual.resize(n);
  rows.jacobian.resize(n, 6);
  rows.information.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const SurfelMatch& m = matches[static_cast<std::size_t>(i)];
    const Vector3d& nr = m.reference.normal;
    const Vector3d q = t * m.source.centroid;
    rows.residual(i) = nr.dot(m.reference.centroid - q);
    Eigen::Matrix<double, 1, 6> d;
    d.head<3>() = -nr.transpose();
    d.tail<3>() = nr.cross(q).transpose();  // -n^T (-q^) = (n x q)^T
    rows.jacobian.row(i) = d * jl;
    rows.information(i) = m.reference.weight * m.weight;
  }
  return rows;
}

// Text I/O: one "x y z [t]" per line.

inline void write_point_cloud(std::ostream& os, const PointCloud& cloud) {
  os << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    const Vector3d& p = cloud.points[i];
    os << p.x() << ' ' << p.y() << ' ' << p.z();
    if (cloud.has_times()) os << ' ' << cloud.times[i];
    os << '\n';
  }
}

inline PointCloud read_point_cloud(std::istream& is) {
  PointCloud cloud;
  std::string line;
  int lineno = 0;
  int columns = -1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> v;
    double x;
    while (ls >> x) v.push_back(x);
    if (v.size() != 3 && v.size() != 4) {
      throw ParseError("point cloud line " + std::to_string(lineno) + ": expected 3 or 4 numbers");
    }
    if (columns < 0) columns = static_cast<int>(v.size());
    if (columns != static_cast<int>(v.size())) {
      throw ParseError("point cloud line " + std::to_string(lineno) + ": inconsistent columns");
    }
    cloud.points.emplace_back(v[0], v[1], v[2]);
    if (v.size() == 4) cloud.times.push_back(v[3]);
  }
  return cloud;
}

inline PointCloud load_point_cloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open point cloud " + path);
  return read_point_cloud(in);
}

inline void save_point_cloud(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write point cloud " + path);
  write_point_cloud(out, cloud);
}

}  // namespace photogeo
