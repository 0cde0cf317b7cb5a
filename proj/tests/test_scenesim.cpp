#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "photogeo/essential.hpp"
#include "photogeo/fusion.hpp"
#include "photogeo/scenesim.hpp"

using namespace photogeo;

namespace {

const Scene& scene(SceneKind k) {
  static const Scene room = build_scene(SceneKind::room, 7);
  static const Scene corridor = build_scene(SceneKind::corridor, 7);
  static const Scene plane = build_scene(SceneKind::open_plane, 7);
  static const Scene clutter = build_scene(SceneKind::cluttered, 7);
  switch (k) {
    case SceneKind::room: return room;
    case SceneKind::corridor: return corridor;
    case SceneKind::open_plane: return plane;
    case SceneKind::cluttered: return clutter;
  }
  return room;
}

double distance_to_scene(const Scene& s, const Vector3d& p) {
  double best = std::numeric_limits<double>::infinity();
  for (const Quad& q : s.surfaces) {
    const Vector3d d = p - q.center;
    if (std::abs(d.dot(q.axis_u)) > q.half_u + 1e-9 || std::abs(d.dot(q.axis_v)) > q.half_v + 1e-9) continue;
    best = std::min(best, std::abs(d.dot(q.normal())));
  }
  return best;
}

// Point-to-plane information of the first pair at truth, from noise-free clouds.
Matrix6d geometric_information(SceneKind k) {
  const LoopSimulation sim(scene(k), NoiseSpec::noise_free(), 1, 3);
  const PairMeasurements m = sim.measure(0, false);
  SurfelOptions o;
  o.max_thickness = 1e-6;
  const auto src = build_surfels(m.source_cloud, o), ref = build_surfels(m.reference_cloud, o);
  const Pose truth = sim.truth().pair_alignments[0];
  const ResidualRows r = icp_residuals(match_surfels(src, ref, truth), Twist::Zero(), truth);
  Matrix6d h = Matrix6d::Zero();
  for (Eigen::Index i = 0; i < r.residual.size(); ++i) {
    h += r.information(i) * r.jacobian.row(i).transpose() * r.jacobian.row(i);
  }
  return h;
}

}  // namespace

TEST(BuildScene, DeterministicInSeed) {
  const Scene a = build_scene(SceneKind::cluttered, 42), b = build_scene(SceneKind::cluttered, 42);
  ASSERT_EQ(a.surfaces.size(), b.surfaces.size());
  for (std::size_t i = 0; i < a.surfaces.size(); ++i) {
    EXPECT_EQ(a.surfaces[i].center, b.surfaces[i].center);
    EXPECT_EQ(a.surfaces[i].axis_u, b.surfaces[i].axis_u);
  }
  ASSERT_EQ(a.landmarks.size(), b.landmarks.size());
  for (std::size_t i = 0; i < a.landmarks.size(); ++i) EXPECT_EQ(a.landmarks[i], b.landmarks[i]);
  const Scene c = build_scene(SceneKind::cluttered, 43);
  EXPECT_NE(a.landmarks[0], c.landmarks[0]);
}

TEST(BuildScene, LandmarksLieOnSurfaces) {
  for (SceneKind k : {SceneKind::room, SceneKind::corridor, SceneKind::open_plane, SceneKind::cluttered}) {
    const Scene& s = scene(k);
    EXPECT_EQ(s.landmarks.size(), 1200u) << to_string(k);
    for (const Vector3d& l : s.landmarks) EXPECT_LT(distance_to_scene(s, l), 1e-9);
  }
}

TEST(BuildScene, RoomIsWellConditioned) {
  Eigen::SelfAdjointEigenSolver<Matrix6d> es(geometric_information(SceneKind::room));
  EXPECT_LT(es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff(), 1e3);
}

TEST(BuildScene, CorridorHasAxisNullspace) {
  Eigen::SelfAdjointEigenSolver<Matrix6d> es(geometric_information(SceneKind::corridor));
  EXPECT_LT(es.eigenvalues()(0), 1e-3 * es.eigenvalues()(5));
  // The weak direction is a translation along the corridor (world x, seen from the reference frame).
  const LoopSimulation sim(scene(SceneKind::corridor), NoiseSpec::noise_free(), 1, 3);
  const Pose ref = sim.true_trajectory().pose_at(sim.pairs()[0].reference_time);
  const Vector3d axis = ref.rotation.transpose() * Vector3d::UnitX();
  const Vector6d v = es.eigenvectors().col(0);
  EXPECT_GT(std::abs(v.head<3>().normalized().dot(axis)), 0.95);
  EXPECT_GT(v.head<3>().norm(), 0.9);
}

TEST(SimulateLoop, RejectsBadArguments) {
  EXPECT_THROW(LoopSimulation(scene(SceneKind::room), NoiseSpec{}, 0, 1), InvalidArgument);
  EXPECT_THROW(LoopSimulation(scene(SceneKind::room), NoiseSpec{}, 11, 1), InvalidArgument);
  EXPECT_THROW(LoopSimulation(scene(SceneKind::room), NoiseSpec{}, 3, 1, {3}), InvalidArgument);
}

TEST(SimulateLoop, MeasurementsAreReproducibleAndPerPair) {
  const LoopSimulation a(scene(SceneKind::room), NoiseSpec{}, 3, 5), b(scene(SceneKind::room), NoiseSpec{}, 6, 5);
  const PairMeasurements ma = a.measure(1, false), mb = b.measure(1, false), mc = a.measure(1, false);
  ASSERT_EQ(ma.features.size(), mb.features.size());
  for (std::size_t i = 0; i < ma.features.size(); ++i) {
    EXPECT_EQ(ma.features[i].u_s, mb.features[i].u_s);
    EXPECT_EQ(ma.features[i].u_s, mc.features[i].u_s);
  }
  ASSERT_EQ(ma.source_cloud.size(), mb.source_cloud.size());
  for (std::size_t i = 0; i < ma.source_cloud.size(); i += 97) {
    EXPECT_EQ(ma.source_cloud.points[i], mb.source_cloud.points[i]);
  }
}

TEST(SimulateLoop, EnoughLandmarksPerPair) {
  for (SceneKind k : {SceneKind::room, SceneKind::cluttered}) {
    NoiseSpec n;
    n.mismatch_rate = 0.0;
    const LoopSimulation sim(scene(k), n, 10, 2);
    for (int i = 0; i < 10; ++i) EXPECT_GE(sim.measure(i, false).features.size(), 50u) << to_string(k) << " " << i;
  }
}

TEST(SimulateLoop, NoiseFreeMeasurementsSatisfyConstraints) {
  for (SceneKind k : {SceneKind::room, SceneKind::corridor, SceneKind::open_plane, SceneKind::cluttered}) {
    const LoopSimulation sim(scene(k), NoiseSpec::noise_free(), 3, 8);
    for (int i = 0; i < 3; ++i) {
      const PairMeasurements m = sim.measure(i, false);
      const Pose a = sim.truth().pair_alignments[static_cast<std::size_t>(i)];
      const PlacePair& p = sim.pairs()[static_cast<std::size_t>(i)];
      const PairFrames f = pair_frames(sim.estimated_trajectory(), p, sim.camera());
      for (const FeatureMatch& fm : m.features) {
        EXPECT_LT(std::abs(epipolar_residual(fm, Twist::Zero(), a, sim.camera(), f).residual), 1e-9);
      }
      const Pose world_from_ref = sim.true_trajectory().pose_at(p.reference_time);
      for (std::size_t j = 0; j < m.source_cloud.size(); j += 7) {
        EXPECT_LT(distance_to_scene(sim.scene(), world_from_ref * (a * m.source_cloud.points[j])), 1e-9);
      }
    }
  }
}

TEST(SimulateLoop, RigidTrajectoryTransportsToFirstTruth) {
  NoiseSpec n;
  n.regime = Regime::medium;
  const LoopSimulation sim(scene(SceneKind::room), n, 6, 4);
  for (std::size_t i = 0; i < 6; ++i) {
    const Pose t = transport_to_first(sim.truth().pair_alignments[i], sim.estimated_trajectory(), sim.pairs()[0],
                                      sim.pairs()[i]);
    EXPECT_LT(log(t * sim.truth().first_alignment.inverse()).norm(), 1e-9);
  }
  n.drift_rate_trans = 0.02;
  n.drift_rate_rot = 0.002;
  const LoopSimulation drifted(scene(SceneKind::room), n, 6, 4);
  const Pose last = transport_to_first(drifted.truth().pair_alignments[5], drifted.estimated_trajectory(),
                                       drifted.pairs()[0], drifted.pairs()[5]);
  EXPECT_GT(log(last * drifted.truth().first_alignment.inverse()).norm(), 1e-3);
}

TEST(SimulateLoop, InitialGuessFollowsRegime) {
  for (Regime r : {Regime::easy, Regime::medium, Regime::hard}) {
    NoiseSpec n;
    n.regime = r;
    const auto [sth, st] = n.regime_sigmas();
    double rot2 = 0.0, trans2 = 0.0;
    const int trials = 400;
    for (int s = 0; s < trials; ++s) {
      const LoopSimulation sim(scene(SceneKind::room), n, 1, static_cast<std::uint64_t>(s));
      const Pose init = initial_alignment(sim.estimated_trajectory(), sim.pairs()[0]);
      const Pose err = init * sim.truth().first_alignment.inverse();
      rot2 += std::pow(rotation_angle(err.rotation), 2);
      trans2 += log(sim.truth().init_error).head<3>().squaredNorm() * 0.0 + sim.truth().init_error.translation.squaredNorm();
    }
    EXPECT_NEAR(std::sqrt(rot2 / (3 * trials)), sth, 0.1 * sth) << to_string(r);
    EXPECT_NEAR(std::sqrt(trans2 / (3 * trials)), st, 0.1 * st) << to_string(r);
  }
}

TEST(NoiseSpec, RegimeUnits) {
  NoiseSpec n;
  n.regime = Regime::hard;
  EXPECT_NEAR(n.regime_sigmas().first, 10.0 * std::numbers::pi / 180.0, 1e-15);
  EXPECT_NEAR(n.regime_sigmas().second, 5.0, 1e-15);
  n.units = RegimeUnits::rad_m;
  EXPECT_EQ(n.regime_sigmas().first, 10.0);
  EXPECT_EQ(n.regime_sigmas().second, 50.0);
  n.regime = Regime::easy;
  n.units = RegimeUnits::deg_dm;
  EXPECT_NEAR(n.regime_sigmas().second, 0.05, 1e-15);
}

TEST(SimulateLoop, MismatchFractionRecoveredByEssentialFilter) {
  NoiseSpec n;
  n.pixel_sigma2 = 0.1;
  n.mismatch_rate = 0.2;
  const LoopSimulation sim(scene(SceneKind::room), n, 10, 6);
  std::size_t total = 0, rejected = 0;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    const PairMeasurements m = sim.measure(i, false);
    const EssentialRansacResult r = essential_ransac(m.features, sim.camera(), rng);
    total += m.features.size();
    rejected += m.features.size() - r.inlier_count;
  }
  EXPECT_NEAR(static_cast<double>(rejected) / static_cast<double>(total), 0.2, 0.02);
}

TEST(SimulateLoop, FalsePositivePairIsFlagged) {
  int flagged = 0;
  const int seeds = 100;
  for (int s = 0; s < seeds; ++s) {
    const LoopSimulation sim(scene(SceneKind::room), NoiseSpec{}, 3, static_cast<std::uint64_t>(s), {2});
    const Camera& cam = sim.camera();
    const Trajectory& est = sim.estimated_trajectory();
    EvidencePool pool;
    const PairMeasurements m0 = sim.measure(0, false);
    const PairFrames f0 = pair_frames(est, sim.pairs()[0], cam);
    const PlaceTransport t0 = place_transport(est, sim.pairs()[0], sim.pairs()[0]);
    for (std::size_t j = 0; j < m0.features.size(); ++j) {
      if (!m0.mismatched[j]) pool.entries.push_back({m0.features[j], 0, t0, f0});
    }
    const Pose candidate =
        transport_to_first(sim.truth().pair_alignments[2], est, sim.pairs()[0], sim.pairs()[2]);
    flagged += !validate_candidate(pool, candidate, cam).inlier;
  }
  EXPECT_GT(flagged, 90);
}

TEST(RenderView, FrontoParallelPlaneHasConstantDepth) {
  Scene s;
  detail::add_quad(s, {2.0, 0.0, 0.0}, Vector3d::UnitY(), Vector3d::UnitZ(), 10.0, 10.0);
  Camera cam;
  // Camera z along world x.
  const Pose wc(LoopSimulation::default_rotation(), Vector3d::Zero());
  const RenderedView v = render_view(s, cam, wc);
  for (int y = 0; y < cam.height; y += 7) {
    for (int x = 0; x < cam.width; x += 7) EXPECT_NEAR(v.depth.at(x, y), 2.0, 1e-9);
  }
  const RenderedView w = render_view(s, cam, wc);
  EXPECT_EQ(v.image.data, w.image.data);
  double mean = 0.0, var = 0.0;
  for (float p : v.image.data) mean += p;
  mean /= static_cast<double>(v.image.data.size());
  for (float p : v.image.data) var += (p - mean) * (p - mean);
  EXPECT_GT(var / static_cast<double>(v.image.data.size()), 100.0);
}

TEST(RenderView, DepthAtLandmarkPixelMatchesLandmark) {
  const LoopSimulation sim(scene(SceneKind::room), NoiseSpec::noise_free(), 1, 2);
  const PlacePair& p = sim.pairs()[0];
  const Pose wc = sim.true_trajectory().pose_at(p.reference_time) * sim.true_camera().lidar_from_camera;
  const RenderedView v = render_view(sim.scene(), sim.true_camera(), wc);
  const Camera& cam = sim.true_camera();
  int checked = 0, agree = 0;
  for (std::size_t k = 0; k < sim.scene().landmarks.size(); ++k) {
    const Vector3d& l = sim.scene().landmarks[k];
    const Vector3d pc = wc.inverse() * l;
    if (pc.z() < 0.3) continue;
    const Vector2d px = cam.pixel(pc);
    if (!cam.in_image(px, 2.0)) continue;
    const auto hit = sim.scene().cast(wc.translation, l - wc.translation);
    if (!hit || hit->t < 1.0 - 1e-6) continue;  // occluded
    ++checked;
    // Pixel-centre ray against the landmark's own plane.
    const int ix = static_cast<int>(std::lround(px.x())), iy = static_cast<int>(std::lround(px.y()));
    const Vector3d ray = cam.ray(Vector2d(ix, iy));
    const Quad& q = sim.scene().surfaces[static_cast<std::size_t>(sim.scene().landmark_surface[k])];
    const Vector3d n = wc.rotation.transpose() * q.normal();
    const double z = n.dot(wc.inverse() * q.center) / n.dot(ray) * ray.z();
    agree += std::abs(v.depth.at(ix, iy) - z) < 1e-6;
  }
  ASSERT_GT(checked, 30);
  EXPECT_GE(agree, checked * 9 / 10);
}

TEST(WriteSimulation, WritesEveryArtifact) {
  const LoopSimulation sim(scene(SceneKind::room), NoiseSpec{}, 2, 1);
  const auto dir = std::filesystem::temp_directory_path() / "photogeo_sim_test";
  std::filesystem::remove_all(dir);
  write_simulation(sim, dir, true);
  for (const char* f : {"trajectory_true.txt", "trajectory_est.txt", "truth.json", "pair_0_source.xyz",
                        "pair_1_reference.xyz", "pair_1_features.csv", "pair_0_source.pgm", "pair_1_reference.pgm"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  const Trajectory back = load_trajectory((dir / "trajectory_true.txt").string());
  EXPECT_EQ(back.knots().size(), sim.true_trajectory().knots().size());
  std::filesystem::remove_all(dir);
}
