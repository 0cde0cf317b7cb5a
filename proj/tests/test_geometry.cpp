#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "photogeo/geometry.hpp"

using namespace photogeo;

namespace {

Pose random_pose(std::mt19937_64& rng, double rot, double trans) {
  std::normal_distribution<double> g(0.0, 1.0);
  Twist xi;
  xi << trans * g(rng), trans * g(rng), trans * g(rng), rot * g(rng), rot * g(rng), rot * g(rng);
  return exp(xi);
}

// Dense samples of the inside of an axis-aligned box (four walls, floor, ceiling).
PointCloud box_cloud(double step = 0.05) {
  PointCloud c;
  const double x = 4.0, y = 3.0, z = 1.5;
  for (double a = -x; a <= x; a += step) {
    for (double b = -y; b <= y; b += step) {
      c.points.emplace_back(a, b, -z);
      c.points.emplace_back(a, b, z);
    }
    for (double b = -z; b <= z; b += step) {
      c.points.emplace_back(a, -y, b);
      c.points.emplace_back(a, y, b);
    }
  }
  for (double a = -y; a <= y; a += step) {
    for (double b = -z; b <= z; b += step) {
      c.points.emplace_back(-x, a, b);
      c.points.emplace_back(x, a, b);
    }
  }
  return c;
}

Surfel random_surfel(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Surfel s;
  s.centroid = 3.0 * Vector3d(g(rng), g(rng), g(rng));
  s.normal = Vector3d(g(rng), g(rng), g(rng)).normalized();
  s.weight = 0.5 + 0.5 * std::abs(std::tanh(g(rng)));
  s.voxel_size = 0.3;
  return s;
}

}  // namespace

TEST(ExtractCloud, OriginAndRadius) {
  const Trajectory traj({{0.0, Pose(Matrix3d::Identity(), Vector3d(1, 2, 3))},
                         {20.0, Pose(Matrix3d::Identity(), Vector3d(1, 2, 3))}});
  PointCloud world;
  world.points = {Vector3d(1, 2, 3), Vector3d(12, 2, 3), Vector3d(1, 2, 12.5), Vector3d(1, 5, 3)};
  world.times = {10.0, 10.0, 10.0, 16.0};
  const PointCloud local = extract_cloud(world, traj, 10.0);
  // The point 11 m away and the one outside the time window are excluded.
  ASSERT_EQ(local.size(), 2u);
  EXPECT_LT(local.points[0].norm(), 1e-15);
  EXPECT_LT((local.points[1] - Vector3d(0, 0, 9.5)).norm(), 1e-15);
}

TEST(ExtractCloud, EmptySelectionIsError) {
  const Trajectory traj({{0.0, Pose()}, {20.0, Pose()}});
  PointCloud world;
  world.points = {Vector3d(30, 0, 0)};
  EXPECT_THROW(extract_cloud(world, traj, 10.0), InsufficientGeometry);
  EXPECT_THROW(extract_cloud(world, traj, 2.0), OutOfRange);
}

TEST(ExtractCloud, RoundTripToWorld) {
  std::mt19937_64 rng(2);
  std::vector<Knot> knots;
  for (int k = 0; k <= 40; ++k) knots.push_back({0.5 * k, random_pose(rng, 0.3, 2.0)});
  const Trajectory traj(knots);
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  PointCloud world;
  const Pose sensor = traj.pose_at(10.0);
  for (int i = 0; i < 2000; ++i) world.points.push_back(sensor * Vector3d(u(rng), u(rng), u(rng)));
  const PointCloud local = extract_cloud(world, traj, 10.0);
  EXPECT_GT(local.size(), 500u);
  for (const Vector3d& p : local.points) {
    const Vector3d w = sensor * p;
    double best = 1e9;
    for (const Vector3d& q : world.points) best = std::min(best, (q - w).norm());
    EXPECT_LT(best, 1e-9);
  }
}

TEST(BuildSurfels, ExactPlane) {
  PointCloud c;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 0.29);
  for (int i = 0; i < 100; ++i) c.points.emplace_back(u(rng), u(rng), 2.0);
  const auto s = build_surfels(c);
  ASSERT_FALSE(s.empty());
  for (const Surfel& x : s) {
    EXPECT_LT(std::abs(std::abs(x.normal.z()) - 1.0), 1e-6);
    EXPECT_NEAR(x.normal.norm(), 1.0, 1e-9);
    EXPECT_GT(x.weight, 0.5);
    EXPECT_LE(x.weight, 1.0);
  }
  // Normals face the sensor at the origin.
  for (const Surfel& x : s) EXPECT_GT(x.normal.dot(-x.centroid), 0.0);
}

TEST(BuildSurfels, IsotropicBlobHasLowWeight) {
  PointCloud c;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 0.01);
  for (int i = 0; i < 2000; ++i) c.points.emplace_back(0.15 + g(rng), 0.15 + g(rng), 0.15 + g(rng));
  SurfelOptions o;
  o.levels = {0.3};
  o.max_thickness = 1.0;
  o.min_weight = 0.0;
  const auto s = build_surfels(c, o);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_LT(s[0].weight, 0.2);
}

TEST(BuildSurfels, CornerBridgedOnlyAtCoarseLevel) {
  PointCloud c;
  for (double a = 0.0; a < 4.0; a += 0.04) {
    for (double z = 0.0; z < 3.0; z += 0.04) {
      c.points.emplace_back(a - 1.787, 2.217, z + 0.011);  // wall y = 2.217
      c.points.emplace_back(2.217, a - 1.787, z + 0.011);  // wall x = 2.217
    }
  }
  SurfelOptions o;
  o.max_thickness = 1e9;
  o.min_weight = 0.0;
  const auto s = build_surfels(c, o);
  auto aligned = [](const Surfel& x) {
    return std::max(std::abs(x.normal.x()), std::abs(x.normal.y())) > 1.0 - 1e-9;
  };
  int fine = 0, fine_aligned = 0, coarse_bridging = 0;
  for (const Surfel& x : s) {
    if (x.level == 0) {
      ++fine;
      fine_aligned += aligned(x);
    }
    if (x.level == 2 && std::abs(x.normal.x()) > 0.3 && std::abs(x.normal.y()) > 0.3) ++coarse_bridging;
  }
  EXPECT_GT(fine, 0);
  EXPECT_GT(static_cast<double>(fine_aligned) / fine, 0.9);
  EXPECT_GT(coarse_bridging, 0);
}

TEST(BuildSurfels, UnderpopulatedVoxelsDropped) {
  PointCloud c;
  for (int i = 0; i < 4; ++i) c.points.emplace_back(0.01 * i, 0.02 * i * i, 0.1);
  EXPECT_THROW(build_surfels(c), InsufficientGeometry);
  EXPECT_THROW(build_surfels(PointCloud{}), InsufficientGeometry);
}

TEST(MatchSurfels, IdenticalCloudsMatchThemselves) {
  const auto s = build_surfels(box_cloud());
  const auto m = match_surfels(s, s, Pose());
  ASSERT_EQ(m.size(), s.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(m[i].source.centroid, m[i].reference.centroid);
    EXPECT_EQ(m[i].source.level, m[i].reference.level);
  }
}

TEST(MatchSurfels, EquivariantUnderTrueAlignment) {
  std::mt19937_64 rng(5);
  const auto ref = build_surfels(box_cloud());
  const Pose t = random_pose(rng, 0.3, 1.0);
  std::vector<Surfel> src = ref;
  for (Surfel& s : src) {
    s.centroid = t.inverse() * s.centroid;
    s.normal = t.rotation.transpose() * s.normal;
  }
  const auto m0 = match_surfels(ref, ref, Pose());
  const auto m1 = match_surfels(src, ref, t);
  ASSERT_EQ(m0.size(), m1.size());
  for (std::size_t i = 0; i < m0.size(); ++i) {
    EXPECT_EQ(m0[i].reference.centroid, m1[i].reference.centroid);
    EXPECT_LT((t * m1[i].source.centroid - m0[i].source.centroid).norm(), 1e-9);
  }
}

TEST(MatchSurfels, GateRejectsFarSurfels) {
  Surfel a;
  a.voxel_size = 0.3;
  a.centroid = Vector3d(0, 0, 1);
  Surfel b = a;
  b.centroid = Vector3d(0.59, 0, 1);
  EXPECT_EQ(match_surfels({a}, {b}, Pose()).size(), 1u);
  b.centroid = Vector3d(0.61, 0, 1);
  EXPECT_TRUE(match_surfels({a}, {b}, Pose()).empty());
  // Different levels never match.
  b.centroid = a.centroid;
  b.level = 1;
  b.voxel_size = 0.8;
  EXPECT_TRUE(match_surfels({a}, {b}, Pose()).empty());
}

TEST(MatchSurfels, NonFiniteGuessRejected) {
  Surfel a;
  a.voxel_size = 0.3;
  Pose p;
  p.translation.x() = std::nan("");
  EXPECT_THROW(match_surfels({a}, {a}, p), InvalidArgument);
}

TEST(IcpResiduals, ZeroAtExactAlignment) {
  std::mt19937_64 rng(6);
  const Pose init = random_pose(rng, 0.2, 1.0), truth = random_pose(rng, 0.2, 1.0);
  std::vector<SurfelMatch> m;
  for (int i = 0; i < 50; ++i) {
    Surfel r = random_surfel(rng), s = r;
    s.centroid = truth.inverse() * r.centroid;
    s.normal = truth.rotation.transpose() * r.normal;
    m.push_back({s, r, 1.0});
  }
  const ResidualRows rows = icp_residuals(m, log(truth * init.inverse()), init);
  EXPECT_LT(rows.residual.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(IcpResiduals, TangentDisplacementIsInvisible) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 50; ++i) {
    Surfel r = random_surfel(rng), s = r;
    Vector3d tangent = r.normal.unitOrthogonal() * 0.7 + r.normal.cross(r.normal.unitOrthogonal()) * -0.4;
    s.centroid = r.centroid + tangent;
    const ResidualRows rows = icp_residuals({{s, r, 1.0}}, Twist::Zero(), Pose());
    EXPECT_LT(std::abs(rows.residual(0)), 1e-12);
  }
}

TEST(IcpResiduals, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 0.2);
  const double h = 1e-6;
  for (int i = 0; i < 100; ++i) {
    const SurfelMatch m{random_surfel(rng), random_surfel(rng), 1.0};
    const Pose init = random_pose(rng, 0.3, 1.0);
    Twist xi;
    xi << g(rng), g(rng), g(rng), g(rng), g(rng), g(rng);
    const ResidualRows rows = icp_residuals({m}, xi, init);
    Eigen::Matrix<double, 1, 6> fd;
    for (int k = 0; k < 6; ++k) {
      Twist e = Twist::Zero();
      e(k) = h;
      fd(k) = (icp_residuals({m}, Twist(xi + e), init).residual(0) -
               icp_residuals({m}, Twist(xi - e), init).residual(0)) / (2 * h);
    }
    EXPECT_LT((rows.jacobian.row(0) - fd).norm() / std::max(1.0, fd.norm()), 1e-5);
  }
}

TEST(IcpResiduals, InformationCarriesPlanarityAndRobustWeight) {
  std::mt19937_64 rng(9);
  Surfel r = random_surfel(rng);
  r.weight = 0.6;
  const ResidualRows rows = icp_residuals({{r, r, 0.5}}, Twist::Zero(), Pose());
  EXPECT_DOUBLE_EQ(rows.information(0), 0.3);
}

TEST(PointCloudIo, RoundTripWithTimes) {
  PointCloud c;
  c.points = {Vector3d(0.1, 0.2, 0.3), Vector3d(-1.0 / 3.0, 2.0, 1e-7)};
  c.times = {1.5, 2.25};
  std::stringstream ss;
  write_point_cloud(ss, c);
  const PointCloud back = read_point_cloud(ss);
  ASSERT_EQ(back.size(), 2u);
  ASSERT_TRUE(back.has_times());
  EXPECT_EQ(back.points[1], c.points[1]);
  EXPECT_EQ(back.times[1], 2.25);
}
