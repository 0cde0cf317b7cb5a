#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "photogeo/geometry.hpp"
#include "photogeo/image.hpp"
#include "photogeo/semidirect.hpp"
#include "photogeo/trajectory.hpp"
#include "photogeo/vision.hpp"

namespace photogeo {

enum class SceneKind { room, corridor, open_plane, cluttered };

inline const char* to_string(SceneKind k) {
  switch (k) {
    case SceneKind::room: return "room";
    case SceneKind::corridor: return "corridor";
    case SceneKind::open_plane: return "open-plane";
    case SceneKind::cluttered: return "cluttered";
  }
  return "unknown";
}

inline std::optional<SceneKind> scene_kind_from_string(const std::string& s) {
  if (s == "room") return SceneKind::room;
  if (s == "corridor") return SceneKind::corridor;
  if (s == "open-plane") return SceneKind::open_plane;
  if (s == "cluttered") return SceneKind::cluttered;
  return std::nullopt;
}

/// Independent 64-bit stream seeds (splitmix64 over the key parts).
inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ (b * 0xD1B54A32D192ED03ULL));
}

/// Planar rectangle: center + s * axis_u + t * axis_v, |s| <= half_u, |t| <= half_v.
struct Quad {
  Vector3d center = Vector3d::Zero();
  Vector3d axis_u = Vector3d::UnitX();
  Vector3d axis_v = Vector3d::UnitY();
  double half_u = 1.0;
  double half_v = 1.0;
  int id = 0;
  double landmark_weight = 1.0;

  Vector3d normal() const { return axis_u.cross(axis_v); }
  double area() const { return 4.0 * half_u * half_v; }

  std::optional<double> intersect(const Vector3d& o, const Vector3d& d) const {
    const Vector3d n = normal();
    const double denom = n.dot(d);
    if (std::abs(denom) < 1e-14) return std::nullopt;
    const double t = n.dot(center - o) / denom;
    if (!(t > 1e-9)) return std::nullopt;
    const Vector3d q = o + t * d - center;
    if (std::abs(q.dot(axis_u)) > half_u || std::abs(q.dot(axis_v)) > half_v) return std::nullopt;
    return t;
  }
};

/// One traversal of the mapped region; poses are LiDAR (x forward, z up) in the world.
struct PassPath {
  Vector3d start = Vector3d::Zero();
  Vector3d end = Vector3d::UnitX();
  double yaw = 0.0;        // rad
  double yaw_amp = 0.0;    // rad
  double pitch_amp = 0.0;  // rad
  double roll_amp = 0.0;   // rad
  double phase = 0.0;

  Pose at(double u) const {
    const double tau = 2.0 * std::numbers::pi;
    const double yaw_u = yaw + yaw_amp * std::sin(tau * 1.5 * u + phase);
    const double pitch = pitch_amp * std::sin(tau * 2.3 * u + 0.5 * phase);
    const double roll = roll_amp * std::sin(tau * 1.7 * u + 1.3 * phase);
    const Matrix3d r = (Eigen::AngleAxisd(yaw_u, Vector3d::UnitZ()) *
                        Eigen::AngleAxisd(pitch, Vector3d::UnitY()) *
                        Eigen::AngleAxisd(roll, Vector3d::UnitX()))
                           .toRotationMatrix();
    const Vector3d dir = (end - start).normalized();
    const Vector3d lateral = Vector3d::UnitZ().cross(dir).normalized();
    const Vector3d p = start + u * (end - start) + 0.08 * std::sin(tau * 2.0 * u + phase) * lateral;
    return Pose(r, p);
  }
};

struct Hit {
  double t = 0.0;
  int surface = -1;
};

struct Scene {
  SceneKind kind = SceneKind::room;
  std::uint64_t seed = 0;
  std::vector<Quad> surfaces;
  std::vector<Vector3d> landmarks;
  std::vector<int> landmark_surface;
  PassPath reference_pass;
  PassPath source_pass;
  double texture_frequency = 3.0;  // 1/m, lowest octave

  std::optional<Hit> cast(const Vector3d& o, const Vector3d& d) const {
    Hit best;
    best.t = std::numeric_limits<double>::infinity();
    for (const Quad& q : surfaces) {
      const auto t = q.intersect(o, d);
      if (t && *t < best.t) best = {*t, q.id};
    }
    if (best.surface < 0) return std::nullopt;
    return best;
  }

  double intensity(const Vector3d& p, int surface) const;
};

namespace detail {

inline double lattice(std::int64_t x, std::int64_t y, std::int64_t z, std::uint64_t seed) {
  std::uint64_t h = seed;
  h ^= static_cast<std::uint64_t>(x) * 0x8CB92BA72F3D8DD7ULL;
  h ^= static_cast<std::uint64_t>(y) * 0x9E3779B97F4A7C15ULL;
  h ^= static_cast<std::uint64_t>(z) * 0xC2B2AE3D27D4EB4FULL;
  h ^= h >> 29;
  h *= 0xBF58476D1CE4E5B9ULL;
  h ^= h >> 32;
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

inline double fade(double t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

/// Smooth value noise in [0, 1].
inline double value_noise(const Vector3d& p, std::uint64_t seed) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto x = static_cast<std::int64_t>(fx), y = static_cast<std::int64_t>(fy),
             z = static_cast<std::int64_t>(fz);
  const double ax = fade(p.x() - fx), ay = fade(p.y() - fy), az = fade(p.z() - fz);
  double c[2][2];
  for (int j = 0; j < 2; ++j) {
    for (int k = 0; k < 2; ++k) {
      const double a = lattice(x, y + j, z + k, seed), b = lattice(x + 1, y + j, z + k, seed);
      c[j][k] = a + ax * (b - a);
    }
  }
  const double e0 = c[0][0] + ay * (c[1][0] - c[0][0]);
  const double e1 = c[0][1] + ay * (c[1][1] - c[0][1]);
  return e0 + az * (e1 - e0);
}

}  // namespace detail

inline double Scene::intensity(const Vector3d& p, int surface) const {
  const std::uint64_t s = stream_seed(seed, 0x7E47u, static_cast<std::uint64_t>(surface));
  double v = 0.0, amp = 0.5, norm = 0.0, f = texture_frequency;
  for (int o = 0; o < 4; ++o) {
    v += amp * detail::value_noise(p * f, s + static_cast<std::uint64_t>(o));
    norm += amp;
    amp *= 0.5;
    f *= 2.0;
  }
  return 30.0 + 195.0 * v / norm;
}

namespace detail {

inline void add_quad(Scene& s, const Vector3d& c, const Vector3d& u, const Vector3d& v, double hu, double hv,
                     double landmark_weight = 1.0) {
  Quad q;
  q.center = c;
  q.axis_u = u.normalized();
  q.axis_v = v.normalized();
  q.half_u = hu;
  q.half_v = hv;
  q.id = static_cast<int>(s.surfaces.size());
  q.landmark_weight = landmark_weight;
  s.surfaces.push_back(q);
}

/// Axis-aligned (up to yaw) box; normals face outward, or inward for rooms.
inline void add_box(Scene& s, const Vector3d& c, const Vector3d& half, double yaw, bool inward = false) {
  const Matrix3d r = Eigen::AngleAxisd(yaw, Vector3d::UnitZ()).toRotationMatrix();
  const Vector3d ex = r.col(0), ey = r.col(1), ez = r.col(2);
  const double sg = inward ? -1.0 : 1.0;
  // (u, v) ordered so that u x v is the outward normal.
  add_quad(s, c + half.x() * ex, ey, sg * ez, half.y(), half.z());
  add_quad(s, c - half.x() * ex, sg * ez, ey, half.z(), half.y());
  add_quad(s, c + half.y() * ey, sg * ez, ex, half.z(), half.x());
  add_quad(s, c - half.y() * ey, ex, sg * ez, half.x(), half.z());
  add_quad(s, c + half.z() * ez, ex, sg * ey, half.x(), half.y());
  add_quad(s, c - half.z() * ez, sg * ey, ex, half.y(), half.x());
}

/// Parameter window of a quad clipped to the square bounding a ball.
struct QuadWindow {
  double u0, u1, v0, v1;
  double area() const { return std::max(0.0, u1 - u0) * std::max(0.0, v1 - v0); }
};

inline QuadWindow clip_to_ball(const Quad& q, const Vector3d& c, double r) {
  const Vector3d d = c - q.center;
  const double pu = d.dot(q.axis_u), pv = d.dot(q.axis_v);
  return {std::max(-q.half_u, pu - r), std::min(q.half_u, pu + r), std::max(-q.half_v, pv - r),
          std::min(q.half_v, pv + r)};
}

inline void sample_landmarks(Scene& s, const Vector3d& center, double radius, int count, std::mt19937_64& rng) {
  std::vector<double> w;
  std::vector<QuadWindow> win;
  for (const Quad& q : s.surfaces) {
    win.push_back(clip_to_ball(q, center, radius));
    w.push_back(win.back().area() * q.landmark_weight);
  }
  std::discrete_distribution<int> pick(w.begin(), w.end());
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  int guard = 0;
  while (static_cast<int>(s.landmarks.size()) < count && guard++ < 100 * count) {
    const int k = pick(rng);
    const Quad& q = s.surfaces[static_cast<std::size_t>(k)];
    const QuadWindow& qw = win[static_cast<std::size_t>(k)];
    const double a = qw.u0 + uni(rng) * (qw.u1 - qw.u0);
    const double b = qw.v0 + uni(rng) * (qw.v1 - qw.v0);
    const Vector3d p = q.center + a * q.axis_u + b * q.axis_v;
    if ((p - center).norm() > radius) continue;
    s.landmarks.push_back(p);
    s.landmark_surface.push_back(k);
  }
}

inline double deg(double d) { return d * std::numbers::pi / 180.0; }

}  // namespace detail

/// Deterministic synthetic world for one scene kind.
inline Scene build_scene(SceneKind kind, std::uint64_t seed, int landmark_count = 1200) {
  using detail::deg;
  Scene s;
  s.kind = kind;
  s.seed = seed;
  std::mt19937_64 rng(stream_seed(seed, 0x5CE4Eu));
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);

  s.reference_pass = {{-4.5, -1.0, 1.3}, {3.5, -1.0, 1.3}, 0.0, deg(15), deg(3), deg(2), 0.0};
  s.source_pass = {{-4.2, -0.4, 1.55}, {3.8, -0.4, 1.55}, deg(6), deg(15), deg(3), deg(2), 0.7};
  Vector3d landmark_center(0.0, -0.7, 1.4);

  switch (kind) {
    case SceneKind::room:
    case SceneKind::cluttered: {
      detail::add_box(s, {0.0, 0.0, 1.5}, {6.0, 4.0, 1.5}, 0.0, true);
      const std::vector<std::pair<Vector3d, Vector3d>> furniture{{{-2.0, 2.8, 0.5}, {0.8, 0.6, 0.5}},
                                                                 {{2.5, 3.0, 0.9}, {0.5, 0.5, 0.9}},
                                                                 {{1.0, -3.2, 0.4}, {1.0, 0.4, 0.4}},
                                                                 {{4.8, 2.0, 0.6}, {0.4, 0.8, 0.6}}};
      for (const auto& [c, h] : furniture) {
        detail::add_box(s, c + Vector3d(0.3 * jitter(rng), 0.2 * jitter(rng), 0.0), h, deg(20) * jitter(rng));
      }
      if (kind == SceneKind::cluttered) {
        std::uniform_real_distribution<double> ux(-5.3, 5.3), uy(-3.4, 3.4), uh(0.15, 0.5), uz(0.3, 1.2);
        int placed = 0, guard = 0;
        while (placed < 12 && guard++ < 1000) {
          const bool pillar = placed % 4 == 0;
          const Vector3d half = pillar ? Vector3d(0.15, 0.15, 1.5) : Vector3d(uh(rng), uh(rng), uz(rng));
          const Vector3d c(ux(rng), uy(rng), half.z());
          // Keep the two passes clear.
          if (c.y() + half.norm() > -1.8 && c.y() - half.norm() < 0.4) continue;
          detail::add_box(s, c, half, deg(30) * jitter(rng));
          ++placed;
        }
      }
      break;
    }
    case SceneKind::corridor: {
      const double hx = 20.0, hy = 1.2, hz = 1.4;
      const double taper = deg(0.5);
      // Floor, ceiling, right wall, ends: axis aligned. The left wall is yawed by the taper.
      detail::add_quad(s, {0, 0.1, 0}, Vector3d::UnitX(), Vector3d::UnitY(), hx, hy + 0.3);
      detail::add_quad(s, {0, 0.1, 2 * hz}, Vector3d::UnitY(), Vector3d::UnitX(), hy + 0.3, hx);
      detail::add_quad(s, {0, -hy, hz}, Vector3d::UnitX(), Vector3d::UnitZ(), hx, hz);
      const Vector3d left_dir(std::cos(taper), std::sin(taper), 0.0);
      detail::add_quad(s, {0, hy, hz}, Vector3d::UnitZ(), left_dir, hz, hx);
      detail::add_quad(s, {hx, 0.1, hz}, Vector3d::UnitZ(), Vector3d::UnitY(), hz, hy + 0.3);
      detail::add_quad(s, {-hx, 0.1, hz}, Vector3d::UnitY(), Vector3d::UnitZ(), hy + 0.3, hz);
      s.reference_pass = {{-4.0, -0.35, 1.3}, {4.0, -0.35, 1.3}, 0.0, deg(4), deg(2), deg(1.5), 0.0};
      s.source_pass = {{-3.7, 0.3, 1.5}, {4.3, 0.3, 1.5}, deg(3), deg(4), deg(2), deg(1.5), 1.1};
      landmark_center = {4.0, 0.0, 1.4};
      break;
    }
    case SceneKind::open_plane: {
      detail::add_quad(s, {4.0, 0.0, 0.0}, Vector3d::UnitX(), Vector3d::UnitY(), 22.0, 22.0, 0.08);
      std::uniform_real_distribution<double> ux(-5.0, 13.0), uy(2.0, 8.0), uh(0.2, 0.6), uz(0.3, 1.0);
      for (int k = 0; k < 13; ++k) {
        const bool pole = k % 4 == 3;
        const Vector3d half = pole ? Vector3d(0.1, 0.1, 1.5) : Vector3d(uh(rng), uh(rng), uz(rng));
        const double side = k % 2 == 0 ? 1.0 : -1.0;
        const Vector3d c(ux(rng), side * uy(rng) - 0.7, half.z());
        detail::add_box(s, c, half, deg(40) * jitter(rng));
      }
      s.reference_pass = {{-4.0, -0.5, 1.4}, {4.0, -0.5, 1.4}, 0.0, deg(15), deg(3), deg(2), 0.0};
      s.source_pass = {{-3.7, 0.2, 1.75}, {4.3, 0.2, 1.75}, deg(6), deg(15), deg(3), deg(2), 0.7};
      landmark_center = {4.0, -0.3, 1.0};
      break;
    }
  }
  detail::sample_landmarks(s, landmark_center, 13.0, landmark_count, rng);
  return s;
}

struct RenderedView {
  Image image;
  DepthMap depth;
};

/// Ray-cast image and z-depth for a camera at `world_from_camera` (z forward).
inline RenderedView render_view(const Scene& scene, const Camera& cam, const Pose& world_from_camera) {
  RenderedView out{Image(cam.width, cam.height, 20.0f), DepthMap(cam.width, cam.height)};
  const Matrix3d& r = world_from_camera.rotation;
  const Vector3d& o = world_from_camera.translation;
  struct Pre {
    Vector3d n, c, u, v;
    double hu, hv, no;
    int id;
    int x0, x1, y0, y1;
  };
  std::vector<Pre> pre;
  const Pose cam_from_world = world_from_camera.inverse();
  for (const Quad& q : scene.surfaces) {
    Pre p{q.normal(), q.center, q.axis_u, q.axis_v, q.half_u, q.half_v, 0.0, q.id, 0, cam.width - 1, 0,
          cam.height - 1};
    p.no = p.n.dot(q.center - o);
    // Pixel bounding box when every corner is in front of the camera.
    bool front = true;
    double bx0 = 1e18, bx1 = -1e18, by0 = 1e18, by1 = -1e18;
    for (double a : {-1.0, 1.0}) {
      for (double b : {-1.0, 1.0}) {
        const Vector3d pc = cam_from_world * (q.center + a * q.half_u * q.axis_u + b * q.half_v * q.axis_v);
        if (pc.z() < 0.05) {
          front = false;
          continue;
        }
        const Vector2d px = cam.pixel(pc);
        bx0 = std::min(bx0, px.x());
        bx1 = std::max(bx1, px.x());
        by0 = std::min(by0, px.y());
        by1 = std::max(by1, px.y());
      }
    }
    if (front) {
      if (bx1 < -1 || by1 < -1 || bx0 > cam.width || by0 > cam.height) continue;
      p.x0 = std::max(0, static_cast<int>(std::floor(bx0)) - 1);
      p.x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(bx1)) + 1);
      p.y0 = std::max(0, static_cast<int>(std::floor(by0)) - 1);
      p.y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(by1)) + 1);
    }
    pre.push_back(p);
  }
  std::vector<double> best(static_cast<std::size_t>(cam.width) * cam.height,
                           std::numeric_limits<double>::infinity());
  std::vector<int> owner(best.size(), -1);
  for (const Pre& p : pre) {
    for (int y = p.y0; y <= p.y1; ++y) {
      for (int x = p.x0; x <= p.x1; ++x) {
        const Vector3d d = r * cam.ray(Vector2d(x, y));
        const double denom = p.n.dot(d);
        if (std::abs(denom) < 1e-14) continue;
        const double t = p.no / denom;
        const std::size_t k = static_cast<std::size_t>(y) * cam.width + x;
        if (!(t > 1e-9) || t >= best[k]) continue;
        const Vector3d q = o + t * d - p.c;
        if (std::abs(q.dot(p.u)) > p.hu || std::abs(q.dot(p.v)) > p.hv) continue;
        best[k] = t;
        owner[k] = p.id;
      }
    }
  }
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const std::size_t k = static_cast<std::size_t>(y) * cam.width + x;
      if (owner[k] < 0) continue;
      // ray has unit z, so t is the z-depth
      out.depth.at(x, y) = best[k];
      const Vector3d pw = o + best[k] * (r * cam.ray(Vector2d(x, y)));
      out.image.at(x, y) = static_cast<float>(scene.intensity(pw, owner[k]));
    }
  }
  return out;
}

enum class Regime { easy, medium, hard };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::easy: return "Easy";
    case Regime::medium: return "Medium";
    case Regime::hard: return "Hard";
  }
  return "unknown";
}

inline std::optional<Regime> regime_from_string(const std::string& s) {
  if (s == "Easy" || s == "easy") return Regime::easy;
  if (s == "Medium" || s == "medium") return Regime::medium;
  if (s == "Hard" || s == "hard") return Regime::hard;
  return std::nullopt;
}

/// Units of the regime table: degrees/decimetres (default) or radians/metres.
enum class RegimeUnits { deg_dm, rad_m };

struct NoiseSpec {
  double range_sigma = 0.01;          // m, along the ray
  double pixel_sigma2 = 1.0;          // px^2, applied to landmark projections
  double model_pixel_sigma2 = 1.0;    // px^2, what the solver is told
  double time_offset_mean = 0.0;      // s
  double time_offset_sigma = 0.002;   // s
  double extrinsic_rot_sigma = 0.002;    // rad
  double extrinsic_trans_sigma = 0.005;  // m
  double mismatch_rate = 0.1;
  double drift_rate_trans = 0.0;  // m/s
  double drift_rate_rot = 0.0;    // rad/s
  Regime regime = Regime::easy;
  RegimeUnits units = RegimeUnits::deg_dm;
  double image_noise = 2.0;  // grey levels
  double depth_noise = 0.0;  // m
  double point_density = 200.0;  // points / m^2

  /// sigma_theta (rad) and sigma_t (m) of the initial-guess perturbation.
  std::pair<double, double> regime_sigmas() const {
    double th = 0.1, t = 0.5;
    if (regime == Regime::medium) th = 1.0, t = 5.0;
    if (regime == Regime::hard) th = 10.0, t = 50.0;
    if (units == RegimeUnits::deg_dm) return {th * std::numbers::pi / 180.0, 0.1 * t};
    return {th, t};
  }

  Covariance6 extrinsic_cov() const {
    Covariance6 c = Covariance6::Zero();
    c.diagonal() << Vector3d::Constant(extrinsic_trans_sigma * extrinsic_trans_sigma),
        Vector3d::Constant(extrinsic_rot_sigma * extrinsic_rot_sigma);
    return c;
  }

  static NoiseSpec noise_free() {
    NoiseSpec n;
    n.range_sigma = 0.0;
    n.pixel_sigma2 = 0.0;
    n.time_offset_sigma = 0.0;
    n.extrinsic_rot_sigma = 0.0;
    n.extrinsic_trans_sigma = 0.0;
    n.mismatch_rate = 0.0;
    n.image_noise = 0.0;
    return n;
  }
};

struct GroundTruthRecord {
  Pose first_alignment;                // L_r0 <- L_s0
  std::vector<Pose> pair_alignments;   // L_ri <- L_si, as the data sees it
  Trajectory true_trajectory;
  std::vector<bool> false_positive;
  Pose init_error;       // init_0 = init_error * first_alignment
  Twist extrinsic_error = Twist::Zero();  // given = exp(error) * true
};

/// Everything one place pair contributes.
struct PairMeasurements {
  PointCloud source_cloud;     // local LiDAR frame at tau_s
  PointCloud reference_cloud;  // local LiDAR frame at tau_r
  std::vector<FeatureMatch> features;
  std::vector<bool> mismatched;
  Image source_image;
  Image reference_image;
  DepthMap reference_depth;
  std::vector<Vector2d> reference_features;
  double source_offset = 0.0;     // true camera time offsets, s
  double reference_offset = 0.0;
};

struct SimulationTimeline {
  static constexpr double kPass = 80.0;
  static constexpr double kSecondPassStart = 100.0;
  static constexpr double kKnotStep = 0.1;
  static constexpr double kFirstPlace = 10.0;
  static constexpr double kPlaceSpacing = 6.5;
  static constexpr double kAlongTrackLag = 3.0;
  static constexpr int kMaxPairs = 10;
};

/// A simulated revisit: true/estimated trajectories, place pairs and ground truth,
/// with per-pair measurements generated on demand from per-pair random streams.
class LoopSimulation {
 public:
  LoopSimulation(const Scene& scene, const NoiseSpec& noise, int n_pairs, std::uint64_t seed,
                 std::vector<int> false_positive_pairs = {})
      : scene_(scene), noise_(noise), seed_(seed) {
    using T = SimulationTimeline;
    if (n_pairs < 1 || n_pairs > T::kMaxPairs) throw InvalidArgument("simulate_loop: n_pairs must be in [1, 10]");
    std::vector<Knot> truth, est;
    std::mt19937_64 rng(stream_seed(seed, 0x5E0u));
    std::normal_distribution<double> g(0.0, 1.0);

    // Initial-guess error and extrinsic perturbation, once per sequence.
    const auto [sth, st] = noise.regime_sigmas();
    const Vector3d phi(sth * g(rng), sth * g(rng), sth * g(rng));
    const Vector3d rho(st * g(rng), st * g(rng), st * g(rng));
    truth_.init_error = Pose(so3::exp(phi), rho);
    Twist cali;
    cali << noise.extrinsic_trans_sigma * g(rng), noise.extrinsic_trans_sigma * g(rng),
        noise.extrinsic_trans_sigma * g(rng), noise.extrinsic_rot_sigma * g(rng),
        noise.extrinsic_rot_sigma * g(rng), noise.extrinsic_rot_sigma * g(rng);
    truth_.extrinsic_error = cali;
    Twist drift;
    Vector3d dt(g(rng), g(rng), g(rng)), dr(g(rng), g(rng), g(rng));
    drift << noise.drift_rate_trans * dt.normalized(), noise.drift_rate_rot * dr.normalized();

    const int steps = static_cast<int>(std::lround(T::kPass / T::kKnotStep));
    for (int k = 0; k <= steps; ++k) {
      const double t = k * T::kKnotStep;
      truth.push_back({t, scene.reference_pass.at(t / T::kPass)});
    }
    for (int k = 0; k <= steps; ++k) {
      const double t = T::kSecondPassStart + k * T::kKnotStep;
      truth.push_back({t, scene.source_pass.at((t - T::kSecondPassStart) / T::kPass)});
    }
    truth_.true_trajectory = Trajectory(truth);

    for (int i = 0; i < n_pairs; ++i) {
      PlacePair p;
      p.reference_time = T::kFirstPlace + T::kPlaceSpacing * i;
      p.source_time = T::kSecondPassStart + T::kFirstPlace + T::kPlaceSpacing * i + T::kAlongTrackLag;
      p.index = i;
      pairs_.push_back(p);
    }
    const PlacePair& first = pairs_.front();
    const Trajectory& tt = truth_.true_trajectory;
    const Pose ref0 = tt.pose_at(first.reference_time);
    drift_base_ = ref0 * truth_.init_error * ref0.inverse();
    drift_twist_ = drift;
    for (const Knot& k : truth) {
      est.push_back({k.time, k.time < T::kSecondPassStart ? k.pose : (drift_at(k.time) * k.pose).orthonormalized()});
    }
    est_ = Trajectory(est);

    truth_.false_positive.assign(static_cast<std::size_t>(n_pairs), false);
    for (int f : false_positive_pairs) {
      if (f < 0 || f >= n_pairs) throw InvalidArgument("simulate_loop: false-positive index out of range");
      truth_.false_positive[static_cast<std::size_t>(f)] = true;
    }
    for (int i = 0; i < n_pairs; ++i) {
      const PlacePair& p = pairs_[static_cast<std::size_t>(i)];
      truth_.pair_alignments.push_back((tt.pose_at(p.reference_time) * reference_displacement(i)).inverse() *
                                       tt.pose_at(p.source_time));
    }
    truth_.first_alignment = tt.pose_at(first.reference_time).inverse() * tt.pose_at(first.source_time);

    true_camera_.lidar_from_camera = Pose(default_rotation(), Vector3d(0.06, 0.0, -0.08));
    camera_ = true_camera_;
    camera_.lidar_from_camera = exp(cali) * true_camera_.lidar_from_camera;
    camera_.extrinsic_cov = noise.extrinsic_cov();
    camera_.time_offset_mean = noise.time_offset_mean;
    camera_.time_offset_var = noise.time_offset_sigma * noise.time_offset_sigma;
  }

  /// Camera z forward, x right, y down, mounted looking along the LiDAR x axis.
  static Matrix3d default_rotation() {
    Matrix3d r;
    r.col(0) = Vector3d(0, -1, 0);
    r.col(1) = Vector3d(0, 0, -1);
    r.col(2) = Vector3d(1, 0, 0);
    return r;
  }

  const Scene& scene() const { return scene_; }
  const NoiseSpec& noise() const { return noise_; }
  const Trajectory& estimated_trajectory() const { return est_; }
  const Trajectory& true_trajectory() const { return truth_.true_trajectory; }
  const std::vector<PlacePair>& pairs() const { return pairs_; }
  const GroundTruthRecord& truth() const { return truth_; }
  /// Camera as handed to the solver (perturbed extrinsic, stated uncertainties).
  const Camera& camera() const { return camera_; }
  const Camera& true_camera() const { return true_camera_; }

  /// Displacement of the reference sensor for false-positive pairs (identity otherwise).
  Pose reference_displacement(int i) const {
    if (!truth_.false_positive[static_cast<std::size_t>(i)]) return Pose::Identity();
    std::mt19937_64 rng(stream_seed(seed_, static_cast<std::uint64_t>(i) + 1, 0xFA15Eu));
    std::bernoulli_distribution coin(0.5);
    const double s1 = coin(rng) ? 1.0 : -1.0, s2 = coin(rng) ? 1.0 : -1.0;
    return Pose(Eigen::AngleAxisd(s2 * 8.0 * std::numbers::pi / 180.0, Vector3d::UnitZ()).toRotationMatrix(),
                Vector3d(1.5 * s1, 0.2 * s2, 0.0));
  }

  /// Measurements of pair i; deterministic in (seed, i) and independent of other pairs.
  PairMeasurements measure(int i, bool with_images) const {
    const PlacePair& p = pairs_.at(static_cast<std::size_t>(i));
    std::mt19937_64 rng(stream_seed(seed_, static_cast<std::uint64_t>(i) + 1, 0x3EA5u));
    std::normal_distribution<double> g(0.0, 1.0);
    const Pose disp = reference_displacement(i);
    PairMeasurements m;
    m.source_cloud = window_cloud(p.source_time, Pose::Identity(), rng);
    m.reference_cloud = window_cloud(p.reference_time, disp, rng);

    m.source_offset = noise_.time_offset_mean + noise_.time_offset_sigma * g(rng);
    m.reference_offset = noise_.time_offset_mean + noise_.time_offset_sigma * g(rng);
    const Trajectory& tt = truth_.true_trajectory;
    const Pose cam_s = tt.pose_at(p.source_time + m.source_offset) * true_camera_.lidar_from_camera;
    const Pose cam_r = tt.pose_at(p.reference_time + m.reference_offset) * disp * true_camera_.lidar_from_camera;

    // Landmark correspondences.
    struct Obs {
      Vector2d s, r;
    };
    std::vector<Obs> obs;
    const double sp = std::sqrt(std::max(0.0, noise_.pixel_sigma2));
    for (std::size_t k = 0; k < scene_.landmarks.size(); ++k) {
      const auto ps = project_visible(cam_s, k);
      const auto pr = project_visible(cam_r, k);
      if (!ps || !pr) continue;
      obs.push_back({*ps, *pr});
    }
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<Vector2d> src_px(obs.size());
    for (std::size_t k = 0; k < obs.size(); ++k) {
      src_px[k] = obs[k].s + sp * Vector2d(g(rng), g(rng));
      obs[k].r += sp * Vector2d(g(rng), g(rng));
    }
    m.mismatched.assign(obs.size(), false);
    if (obs.size() > 1) {
      for (std::size_t k = 0; k < obs.size(); ++k) {
        if (uni(rng) >= noise_.mismatch_rate) continue;
        std::uniform_int_distribution<std::size_t> other(0, obs.size() - 1);
        std::size_t j = other(rng);
        if (j == k) j = (k + 1) % obs.size();
        src_px[k] = obs[j].s + sp * Vector2d(g(rng), g(rng));
        m.mismatched[k] = (obs[j].s - obs[k].s).norm() > 3.0;
      }
    }
    for (std::size_t k = 0; k < obs.size(); ++k) {
      FeatureMatch f;
      f.u_s = camera_.ray(src_px[k]);
      f.u_r = camera_.ray(obs[k].r);
      f.kind = FeatureKind::indirect;
      f.sigma_p = noise_.model_pixel_sigma2;
      f.pair_index = i;
      m.features.push_back(f);
    }

    if (with_images) {
      RenderedView src = render_view(scene_, true_camera_, cam_s);
      RenderedView ref = render_view(scene_, true_camera_, cam_r);
      std::mt19937_64 irng(stream_seed(seed_, static_cast<std::uint64_t>(i) + 1, 0x1A6Eu));
      if (noise_.image_noise > 0.0) {
        for (float& v : src.image.data) v += static_cast<float>(noise_.image_noise * g(irng));
        for (float& v : ref.image.data) v += static_cast<float>(noise_.image_noise * g(irng));
      }
      if (noise_.depth_noise > 0.0) {
        for (double& d : ref.depth.depth) {
          if (d > 0.0) d = std::max(1e-3, d + noise_.depth_noise * g(irng));
        }
      }
      m.source_image = std::move(src.image);
      m.reference_image = std::move(ref.image);
      m.reference_depth = std::move(ref.depth);
      m.reference_features = select_reference_features(m.reference_image, m.reference_depth);
    }
    return m;
  }

  /// The drifted-to-true offset of the second pass at time t.
  Pose drift_at(double t) const {
    const double dt = t - pairs_.front().source_time;
    return drift_base_ * exp(Twist(drift_twist_ * dt));
  }

 private:
  /// World cloud observed over tau +- 5 s, stored in the estimated world frame,
  /// then cut out with the extraction rules.
  PointCloud window_cloud(double tau, const Pose& displacement, std::mt19937_64& rng) const {
    using T = SimulationTimeline;
    const Trajectory& tt = truth_.true_trajectory;
    constexpr int kSweeps = 101;
    std::vector<Pose> sensor(kSweeps), map_from_sensor(kSweeps);
    std::vector<double> times(kSweeps);
    for (int k = 0; k < kSweeps; ++k) {
      times[k] = tau - 5.0 + k * T::kKnotStep;
      sensor[k] = tt.pose_at(times[k]) * displacement;
      // est(t) * sensor_true(t)^-1 maps true world points into the map frame.
      map_from_sensor[k] = est_.pose_at(times[k]) * sensor[k].inverse();
    }
    const Vector3d centre = tt.pose_at(tau).translation;
    const double radius = 10.5;
    PointCloud world;
    world.frame = "map";
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<int> sweep(0, kSweeps - 1);
    std::normal_distribution<double> g(0.0, 1.0);
    for (const Quad& q : scene_.surfaces) {
      const detail::QuadWindow w = detail::clip_to_ball(q, centre, radius);
      const double area = w.area();
      if (area <= 0.0) continue;
      std::poisson_distribution<long> count(area * noise_.point_density);
      const long n = count(rng);
      for (long j = 0; j < n; ++j) {
        const double a = w.u0 + uni(rng) * (w.u1 - w.u0);
        const double b = w.v0 + uni(rng) * (w.v1 - w.v0);
        Vector3d pt = q.center + a * q.axis_u + b * q.axis_v;
        const int k = sweep(rng);
        const double noise = noise_.range_sigma > 0.0 ? noise_.range_sigma * g(rng) : 0.0;
        if ((pt - centre).squaredNorm() > radius * radius) continue;
        if (noise != 0.0) pt += noise * (pt - sensor[k].translation).normalized();
        world.points.push_back(map_from_sensor[k] * pt);
        world.times.push_back(times[k]);
      }
    }
    return extract_cloud(world, est_, tau);
  }

  std::optional<Vector2d> project_visible(const Pose& world_from_camera, std::size_t k) const {
    const Vector3d& lw = scene_.landmarks[k];
    const Vector3d pc = world_from_camera.inverse() * lw;
    if (pc.z() < 0.3) return std::nullopt;
    const Vector2d px = true_camera_.pixel(pc);
    if (!true_camera_.in_image(px, 12.0)) return std::nullopt;
    const Quad& q = scene_.surfaces[static_cast<std::size_t>(scene_.landmark_surface[k])];
    const Vector3d o = world_from_camera.translation;
    if (q.normal().dot(o - lw) <= 0.0) return std::nullopt;
    const Vector3d d = lw - o;
    const auto hit = scene_.cast(o, d);
    if (!hit || hit->t < 1.0 - 1e-6) return std::nullopt;
    return px;
  }

  Scene scene_;
  NoiseSpec noise_;
  std::uint64_t seed_;
  Trajectory est_;
  std::vector<PlacePair> pairs_;
  GroundTruthRecord truth_;
  Pose drift_base_;
  Twist drift_twist_ = Twist::Zero();
  Camera true_camera_;
  Camera camera_;
};

inline LoopSimulation simulate_loop(const Scene& scene, const NoiseSpec& noise, int n_pairs, std::uint64_t seed,
                                    std::vector<int> false_positive_pairs = {}) {
  return LoopSimulation(scene, noise, n_pairs, seed, std::move(false_positive_pairs));
}

/// Writes trajectories, clouds, feature CSVs, PGM images and a truth record.
inline void write_simulation(const LoopSimulation& sim, const std::filesystem::path& dir, bool with_images) {
  std::filesystem::create_directories(dir);
  save_trajectory((dir / "trajectory_true.txt").string(), sim.true_trajectory());
  save_trajectory((dir / "trajectory_est.txt").string(), sim.estimated_trajectory());
  nlohmann::json truth;
  auto pose_rows = [](const Pose& p) {
    const Matrix4d m = p.matrix();
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
    return rows;
  };
  truth["first_alignment"] = pose_rows(sim.truth().first_alignment);
  truth["init_error"] = pose_rows(sim.truth().init_error);
  truth["scene"] = to_string(sim.scene().kind);
  for (std::size_t i = 0; i < sim.pairs().size(); ++i) {
    const PlacePair& p = sim.pairs()[i];
    truth["pairs"].push_back({{"index", p.index},
                              {"source_time", p.source_time},
                              {"reference_time", p.reference_time},
                              {"false_positive", static_cast<bool>(sim.truth().false_positive[i])},
                              {"alignment", pose_rows(sim.truth().pair_alignments[i])}});
    const PairMeasurements m = sim.measure(static_cast<int>(i), with_images);
    const std::string stem = "pair_" + std::to_string(i);
    save_point_cloud((dir / (stem + "_source.xyz")).string(), m.source_cloud);
    save_point_cloud((dir / (stem + "_reference.xyz")).string(), m.reference_cloud);
    std::ofstream f(dir / (stem + "_features.csv"));
    write_features_csv(f, m.features, sim.camera());
    if (with_images) {
      save_pgm((dir / (stem + "_source.pgm")).string(), m.source_image);
      save_pgm((dir / (stem + "_reference.pgm")).string(), m.reference_image);
    }
  }
  std::ofstream(dir / "truth.json") << truth.dump(2) << '\n';
}

}  // namespace photogeo
