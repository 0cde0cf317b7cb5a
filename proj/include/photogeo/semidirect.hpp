#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "photogeo/image.hpp"
#include "photogeo/vision.hpp"

namespace photogeo {

inline constexpr int kPatchHalf = 10;
inline constexpr int kPatchSize = 2 * kPatchHalf + 1;  // 21 x 21

/// Zero-mean, unit-variance 21x21 intensity patch.
struct Patch {
  std::array<double, kPatchSize * kPatchSize> values{};
  Vector2d center = Vector2d::Zero();
  int image_id = 0;

  double& at(int dx, int dy) { return values[(dy + kPatchHalf) * kPatchSize + dx + kPatchHalf]; }
  double at(int dx, int dy) const { return values[(dy + kPatchHalf) * kPatchSize + dx + kPatchHalf]; }

  /// Returns false when the patch has no texture.
  bool normalize() {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= values.size();
    double var = 0.0;
    for (double& v : values) {
      v -= mean;
      var += v * v;
    }
    var /= values.size();
    if (var < 1e-12) return false;
    const double inv = 1.0 / std::sqrt(var);
    for (double& v : values) v *= inv;
    return true;
  }
};

/// Depth of a reference pixel back-projected to a camera-frame point.
inline std::optional<Vector3d> back_project(const Vector2d& px, const DepthMap& depth, const Camera& cam) {
  const int x = static_cast<int>(std::lround(px.x()));
  const int y = static_cast<int>(std::lround(px.y()));
  if (!depth.valid(x, y)) return std::nullopt;
  if (std::abs(px.x() - x) > 1e-9 || std::abs(px.y() - y) > 1e-9) {
    // bilinear on the four neighbours, all must be valid
    const int x0 = static_cast<int>(std::floor(px.x())), y0 = static_cast<int>(std::floor(px.y()));
    if (!depth.valid(x0, y0) || !depth.valid(x0 + 1, y0) || !depth.valid(x0, y0 + 1) ||
        !depth.valid(x0 + 1, y0 + 1)) {
      return std::nullopt;
    }
    const double ax = px.x() - x0, ay = px.y() - y0;
    const double d = (1 - ay) * ((1 - ax) * depth.at(x0, y0) + ax * depth.at(x0 + 1, y0)) +
                     ay * ((1 - ax) * depth.at(x0, y0 + 1) + ax * depth.at(x0 + 1, y0 + 1));
    return d * cam.ray(px);
  }
  return depth.at(x, y) * cam.ray(px);
}

/// u_s' = pi(K (R' p(u_r, D_r) + t')) for the relative pose Cs <- Cr.
inline std::optional<Vector2d> warp_feature(const Vector2d& u_r, const DepthMap& depth,
                                            const Pose& relpose, const Camera& cam) {
  const auto p = back_project(u_r, depth, cam);
  if (!p) return std::nullopt;
  const Vector3d q = relpose * *p;
  if (q.z() <= 1e-6) return std::nullopt;
  const Vector2d px = cam.pixel(q);
  if (!cam.in_image(px)) return std::nullopt;
  return px;
}

/// Local plane homography around one reference feature; maps pixels both ways.
class PlaneWarp {
 public:
  /// Fits the plane from depth samples `spacing` pixels around u_r.
  static std::optional<PlaneWarp> fit(const Vector2d& u_r, const DepthMap& depth, const Pose& relpose,
                                      const Camera& cam, int spacing = 2) {
    const auto p0 = back_project(u_r, depth, cam);
    const auto px = back_project(u_r + Vector2d(spacing, 0), depth, cam);
    const auto mx = back_project(u_r - Vector2d(spacing, 0), depth, cam);
    const auto py = back_project(u_r + Vector2d(0, spacing), depth, cam);
    const auto my = back_project(u_r - Vector2d(0, spacing), depth, cam);
    if (!p0 || !px || !mx || !py || !my) return std::nullopt;
    // Reject depth discontinuities: the centre must lie on both chords.
    const double scale = p0->z();
    if ((0.5 * (*px + *mx) - *p0).norm() > 0.01 * scale ||
        (0.5 * (*py + *my) - *p0).norm() > 0.01 * scale) {
      return std::nullopt;
    }
    Vector3d n = (*px - *mx).cross(*py - *my);
    if (n.norm() < 1e-12) return std::nullopt;
    n.normalize();
    double d = n.dot(*p0);
    if (d < 0) {
      n = -n;
      d = -d;
    }
    if (d < 1e-6) return std::nullopt;
    PlaneWarp w;
    const Matrix3d h = cam.K() * (relpose.rotation + relpose.translation * n.transpose() / d) * cam.K_inv();
    w.src_from_ref_ = h;
    w.ref_from_src_ = h.inverse();
    return w;
  }

  Vector2d to_source(const Vector2d& u_r) const { return apply(src_from_ref_, u_r); }
  Vector2d to_reference(const Vector2d& u_s) const { return apply(ref_from_src_, u_s); }

 private:
  static Vector2d apply(const Matrix3d& h, const Vector2d& u) {
    const Vector3d v = h * Vector3d(u.x(), u.y(), 1.0);
    return v.head<2>() / v.z();
  }

  Matrix3d src_from_ref_ = Matrix3d::Identity();
  Matrix3d ref_from_src_ = Matrix3d::Identity();
};

/// Reference intensities pulled through the inverse warp onto a 21x21 grid
/// around u_s' in the source image, normalised.
inline std::optional<Patch> warped_reference_patch(const Image& ref_image, const PlaneWarp& warp,
                                                   const Vector2d& u_s_prime, int image_id = 0) {
  Patch p;
  p.center = u_s_prime;
  p.image_id = image_id;
  for (int dy = -kPatchHalf; dy <= kPatchHalf; ++dy) {
    for (int dx = -kPatchHalf; dx <= kPatchHalf; ++dx) {
      const Vector2d r = warp.to_reference(u_s_prime + Vector2d(dx, dy));
      if (!ref_image.inside(r.x(), r.y())) return std::nullopt;
      p.at(dx, dy) = ref_image.bilinear(r.x(), r.y());
    }
  }
  if (!p.normalize()) return std::nullopt;
  return p;
}

struct RefineOptions {
  int search_radius = 10;        // coarse integer search, px
  int gauss_newton_iterations = 10;
  double rejection_score = 0.5;  // normalised SSD per pixel, = 2 (1 - NCC)
};

struct RefineResult {
  Vector2d delta_u = Vector2d::Zero();
  double score = std::numeric_limits<double>::infinity();
  bool accepted = false;
};

namespace detail {

inline double patch_ncc(const Patch& ref, const Image& img, double cx, double cy, bool integer) {
  std::array<double, kPatchSize * kPatchSize> v;
  double mean = 0.0;
  std::size_t k = 0;
  for (int dy = -kPatchHalf; dy <= kPatchHalf; ++dy) {
    for (int dx = -kPatchHalf; dx <= kPatchHalf; ++dx) {
      v[k] = integer ? img.at(static_cast<int>(cx) + dx, static_cast<int>(cy) + dy)
                     : img.bilinear(cx + dx, cy + dy);
      mean += v[k++];
    }
  }
  mean /= v.size();
  double var = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double c = v[i] - mean;
    var += c * c;
    dot += c * ref.values[i];
  }
  if (var < 1e-12) return -1.0;
  return dot / std::sqrt(var * static_cast<double>(v.size()));
}

}  // namespace detail

/// Two-stage patch alignment: integer NCC search, then sub-pixel Gauss-Newton on
/// the intensity difference with an affine brightness model.
inline RefineResult refine_patch(const Patch& ref_patch, const Image& src, const Vector2d& u_s_prime,
                                 const RefineOptions& opt = {}) {
  RefineResult res;
  const double margin = kPatchHalf + opt.search_radius + 1;
  if (!src.inside(u_s_prime.x(), u_s_prime.y(), margin)) return res;

  const int bx = static_cast<int>(std::lround(u_s_prime.x()));
  const int by = static_cast<int>(std::lround(u_s_prime.y()));
  const Vector2d frac(u_s_prime.x() - bx, u_s_prime.y() - by);
  double best = -2.0;
  int best_dx = 0, best_dy = 0;
  for (int dy = -opt.search_radius; dy <= opt.search_radius; ++dy) {
    for (int dx = -opt.search_radius; dx <= opt.search_radius; ++dx) {
      const double c = detail::patch_ncc(ref_patch, src, bx + dx, by + dy, true);
      if (c > best) {
        best = c;
        best_dx = dx;
        best_dy = dy;
      }
    }
  }
  // Integer search runs on the rounded grid; express the result relative to u_s'.
  Vector2d delta(best_dx - frac.x(), best_dy - frac.y());

  // Sub-pixel: minimise sum (a I_s(u + delta + du) + b - P(du))^2 over (delta, a, b).
  double a = 1.0, b = 0.0;
  {
    double ms = 0.0, vs = 0.0;
    for (int dy = -kPatchHalf; dy <= kPatchHalf; ++dy) {
      for (int dx = -kPatchHalf; dx <= kPatchHalf; ++dx) {
        ms += src.bilinear(u_s_prime.x() + delta.x() + dx, u_s_prime.y() + delta.y() + dy);
      }
    }
    ms /= kPatchSize * kPatchSize;
    for (int dy = -kPatchHalf; dy <= kPatchHalf; ++dy) {
      for (int dx = -kPatchHalf; dx <= kPatchHalf; ++dx) {
        const double c = src.bilinear(u_s_prime.x() + delta.x() + dx, u_s_prime.y() + delta.y() + dy) - ms;
        vs += c * c;
      }
    }
    vs /= kPatchSize * kPatchSize;
    if (vs < 1e-12) return res;
    a = 1.0 / std::sqrt(vs);
    b = -a * ms;
  }
  for (int it = 0; it < opt.gauss_newton_iterations; ++it) {
    Eigen::Matrix4d h = Eigen::Matrix4d::Zero();
    Eigen::Vector4d g = Eigen::Vector4d::Zero();
    const Vector2d c = u_s_prime + delta;
    if (!src.inside(c.x(), c.y(), kPatchHalf + 1.5)) return res;
    for (int dy = -kPatchHalf; dy <= kPatchHalf; ++dy) {
      for (int dx = -kPatchHalf; dx <= kPatchHalf; ++dx) {
        const double x = c.x() + dx, y = c.y() + dy;
        const double i0 = src.bilinear(x, y);
        const double gx = 0.5 * (src.bilinear(x + 1.0, y) - src.bilinear(x - 1.0, y));
        const double gy = 0.5 * (src.bilinear(x, y + 1.0) - src.bilinear(x, y - 1.0));
        const double r = a * i0 + b - ref_patch.at(dx, dy);
        const Eigen::Vector4d j(a * gx, a * gy, i0, 1.0);
        h += j * j.transpose();
        g += j * r;
      }
    }
    const Eigen::Vector4d step = -h.ldlt().solve(g);
    if (!step.allFinite()) return res;
    delta += step.head<2>();
    a += step(2);
    b += step(3);
    if (step.head<2>().norm() < 1e-4) break;
  }
  const Vector2d c = u_s_prime + delta;
  if (!src.inside(c.x(), c.y(), kPatchHalf)) return res;
  const double ncc = detail::patch_ncc(ref_patch, src, c.x(), c.y(), false);
  res.delta_u = delta;
  res.score = 2.0 * (1.0 - ncc);
  res.accepted = res.score <= opt.rejection_score && delta.norm() <= opt.search_radius + 1.0;
  return res;
}

/// Textured reference pixels with valid depth, one per grid cell.
inline std::vector<Vector2d> select_reference_features(const Image& img, const DepthMap& depth,
                                                       int cells_x = 12, int cells_y = 7,
                                                       int border = 24, double min_response = 4.0) {
  std::vector<Vector2d> out;
  const int w = img.width, h = img.height;
  for (int cy = 0; cy < cells_y; ++cy) {
    for (int cx = 0; cx < cells_x; ++cx) {
      const int x0 = std::max(border, cx * w / cells_x), x1 = std::min(w - border, (cx + 1) * w / cells_x);
      const int y0 = std::max(border, cy * h / cells_y), y1 = std::min(h - border, (cy + 1) * h / cells_y);
      double best = min_response;
      Vector2d best_px(-1, -1);
      for (int y = y0; y < y1; y += 3) {
        for (int x = x0; x < x1; x += 3) {
          if (!depth.valid(x, y)) continue;
          // Shi-Tomasi response over a 5x5 window.
          double sxx = 0, syy = 0, sxy = 0;
          for (int v = -2; v <= 2; ++v) {
            for (int u = -2; u <= 2; ++u) {
              const double gx = 0.5 * (img.at(x + u + 1, y + v) - img.at(x + u - 1, y + v));
              const double gy = 0.5 * (img.at(x + u, y + v + 1) - img.at(x + u, y + v - 1));
              sxx += gx * gx;
              syy += gy * gy;
              sxy += gx * gy;
            }
          }
          const double tr = 0.5 * (sxx + syy);
          const double lmin = tr - std::sqrt(std::max(0.0, tr * tr - (sxx * syy - sxy * sxy)));
          if (lmin > best) {
            best = lmin;
            best_px = Vector2d(x, y);
          }
        }
      }
      if (best_px.x() >= 0) out.push_back(best_px);
    }
  }
  return out;
}

/// Warp-and-refine correspondences for the given source-from-reference camera pose.
inline std::vector<FeatureMatch> track_semi_direct(const std::vector<Vector2d>& ref_features,
                                                   const Image& ref_image, const DepthMap& ref_depth,
                                                   const Image& src_image, const Pose& relpose,
                                                   const Camera& cam, double sigma_p, int pair_index,
                                                   const RefineOptions& opt = {}) {
  std::vector<FeatureMatch> out;
  for (const Vector2d& u_r : ref_features) {
    const auto u_s_prime = warp_feature(u_r, ref_depth, relpose, cam);
    if (!u_s_prime) continue;
    const auto warp = PlaneWarp::fit(u_r, ref_depth, relpose, cam);
    if (!warp) continue;
    const auto patch = warped_reference_patch(ref_image, *warp, *u_s_prime);
    if (!patch) continue;
    const RefineResult r = refine_patch(*patch, src_image, *u_s_prime, opt);
    if (!r.accepted) continue;
    FeatureMatch m;
    m.u_s = cam.ray(*u_s_prime + r.delta_u);
    m.u_r = cam.ray(u_r);
    m.kind = FeatureKind::semi_direct;
    m.sigma_p = sigma_p;
    m.pair_index = pair_index;
    out.push_back(m);
  }
  return out;
}

}  // namespace photogeo
