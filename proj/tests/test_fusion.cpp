#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "photogeo/fusion.hpp"

using namespace photogeo;

namespace {

double pose_gap(const Pose& a, const Pose& b) { return log(a * b.inverse()).norm(); }

FusedAlignment seeded(const Pose& p, const Covariance6& c) {
  FusedAlignment f;
  f.pose = p;
  f.covariance = c;
  f.count = 1;
  return f;
}

Covariance6 diag_cov(double t, double r) {
  Covariance6 c = Covariance6::Zero();
  c.diagonal() << t, t, t, r, r, r;
  return c;
}

}  // namespace

TEST(Fuse, IdenticalEstimateHalvesCovariance) {
  std::mt19937_64 rng(1);
  const Pose p = exp(oracle::random_twist(rng, 0.5, 2.0));
  const Covariance6 c = oracle::random_covariance(rng, 1e-5, 1e-2);
  const FusedAlignment f = fuse(seeded(p, c), p, c);
  EXPECT_LT(pose_gap(f.pose, p), 1e-12);
  EXPECT_LT((f.covariance - 0.5 * c).norm() / c.norm(), 1e-9);
  EXPECT_EQ(f.count, 2);
}

TEST(Fuse, EqualCovariancesGiveGeodesicMidpoint) {
  // With a screw-aligned difference the truncated-series Jacobians are exactly balanced.
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Pose a = exp(oracle::random_twist(rng, 0.5, 2.0));
    Twist d = oracle::random_twist(rng, 0.1, 0.0);
    d.head<3>() = 2.0 * d.tail<3>();
    const Pose b = exp(d) * a;
    const Covariance6 c = diag_cov(1e-3, 1e-4);
    EXPECT_LT(pose_gap(fuse(seeded(a, c), b, c).pose, oracle::geodesic_midpoint(a, b)), 1e-6);
  }
}

TEST(Fuse, GeneralMidpointErrorIsSecondOrder) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const Pose a = exp(oracle::random_twist(rng, 0.5, 2.0));
    const Twist d = oracle::random_twist(rng, 0.03, 0.05);
    const Covariance6 c = diag_cov(1e-3, 1e-4);
    const double gap = pose_gap(fuse(seeded(a, c), exp(d) * a, c).pose, oracle::geodesic_midpoint(a, exp(d) * a));
    EXPECT_LT(gap, d.squaredNorm());
  }
}

TEST(Fuse, OrderDoesNotMatter) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const Pose a = exp(oracle::random_twist(rng, 0.5, 2.0));
    const Pose b = exp(oracle::random_twist(rng, 0.05, 0.1)) * a;
    const Covariance6 ca = oracle::random_covariance(rng, 1e-5, 1e-2);
    const Covariance6 cb = oracle::random_covariance(rng, 1e-5, 1e-2);
    const FusedAlignment ab = fuse(seeded(a, ca), b, cb), ba = fuse(seeded(b, cb), a, ca);
    EXPECT_LT(pose_gap(ab.pose, ba.pose), 1e-8);
    EXPECT_LT((ab.covariance - ba.covariance).norm() / ab.covariance.norm(), 1e-6);
  }
}

TEST(Fuse, SequentialMatchesBatchOracle) {
  std::mt19937_64 rng(5);
  for (int set = 0; set < 50; ++set) {
    const Pose truth = exp(oracle::random_twist(rng, 0.5, 2.0));
    std::vector<Pose> poses;
    std::vector<Covariance6> covs;
    for (int k = 0; k < 5; ++k) {
      covs.push_back(oracle::random_covariance(rng, 1e-6, 1e-3));
      const Eigen::LLT<Matrix6d> llt(covs.back());
      Twist z = oracle::random_twist(rng, 1.0, 1.0);
      poses.push_back(exp(Twist(llt.matrixL() * z)) * truth);
    }
    FusedAlignment f = seeded(poses[0], covs[0]);
    for (int k = 1; k < 5; ++k) f = fuse(f, poses[static_cast<std::size_t>(k)], covs[static_cast<std::size_t>(k)]);
    const oracle::BatchResult b = oracle::batch_fuse(poses, covs);
    EXPECT_LT(pose_gap(f.pose, b.pose), 1e-3);
    EXPECT_LT((f.covariance - b.covariance).norm() / b.covariance.norm(), 0.01);
  }
}

TEST(Fuse, EigenvalueSumStrictlyDecreases) {
  std::mt19937_64 rng(6);
  for (int run = 0; run < 20; ++run) {
    const Pose truth = exp(oracle::random_twist(rng, 0.5, 2.0));
    FusedAlignment f = seeded(truth, oracle::random_covariance(rng, 1e-6, 1e-3));
    double prev = eigenvalue_sum(f.covariance);
    for (int k = 0; k < 8; ++k) {
      const Covariance6 c = oracle::random_covariance(rng, 1e-6, 1e-2);
      f = fuse(f, exp(oracle::random_twist(rng, 0.01, 0.02)) * truth, c);
      const double s = eigenvalue_sum(f.covariance);
      EXPECT_LT(s, prev);
      prev = s;
    }
  }
}

TEST(Fuse, RejectsSingularCovariance) {
  Covariance6 c = diag_cov(1e-3, 1e-4);
  c(5, 5) = 0.0;
  EXPECT_THROW(fuse(seeded(Pose(), diag_cov(1e-3, 1e-4)), Pose(), c), DegenerateAlignment);
}

TEST(ShouldTerminate, EigenvalueSumBelowThreshold) {
  FusedAlignment f = seeded(Pose(), 1e-6 * Covariance6::Identity());
  EXPECT_TRUE(should_terminate(f, 1e-4));
  f.covariance = 1e-4 * Covariance6::Identity();
  EXPECT_FALSE(should_terminate(f, 1e-4));
}

TEST(ShouldTerminate, StaysTrueOnceTrue) {
  std::mt19937_64 rng(7);
  FusedAlignment f = seeded(Pose(), oracle::random_covariance(rng, 1e-4, 1e-2));
  bool reached = false;
  for (int k = 0; k < 30; ++k) {
    f = fuse(f, exp(oracle::random_twist(rng, 0.005, 0.01)), oracle::random_covariance(rng, 1e-4, 1e-2));
    const bool t = should_terminate(f, 2.4e-3);
    if (reached) EXPECT_TRUE(t);
    reached = reached || t;
  }
  EXPECT_TRUE(reached);
}

TEST(Chi2, StandardQuantiles) {
  EXPECT_NEAR(chi2_quantile(1.0), 3.841, 1e-3);
  EXPECT_NEAR(chi2_quantile(10.0), 18.307, 1e-3);
  EXPECT_NEAR(chi2_quantile(200.0), 233.994, 1e-3);
  EXPECT_THROW(chi2_quantile(0.0), InvalidArgument);
}

TEST(ValidateCandidate, EmptyPoolAcceptsEverything) {
  const ValidationResult v = validate_candidate(EvidencePool{}, Pose(), oracle::plain_camera());
  EXPECT_TRUE(v.inlier);
  EXPECT_EQ(v.dof, 0u);
}

TEST(ValidateCandidate, ConsistentEvidenceStatisticNearDof) {
  std::mt19937_64 rng(8);
  const Camera cam = oracle::plain_camera();
  double sum = 0.0, dof = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
    EvidencePool pool;
    for (int l = 0; l < 3; ++l) {
      const auto e = oracle::evidence(rng, truth, oracle::random_transport(rng), l, cam, 40, 1.0);
      pool.entries.insert(pool.entries.end(), e.begin(), e.end());
    }
    const ValidationResult v = validate_candidate(pool, truth, cam);
    sum += v.statistic;
    dof += static_cast<double>(v.dof);
  }
  EXPECT_NEAR(sum / dof, 1.0, 0.1);
}

TEST(ValidateCandidate, FalseRejectionRateNearNominal) {
  std::mt19937_64 rng(9);
  const Camera cam = oracle::plain_camera();
  int rejected = 0;
  const int trials = 1000;
  for (int trial = 0; trial < trials; ++trial) {
    const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
    EvidencePool pool;
    pool.entries = oracle::evidence(rng, truth, oracle::random_transport(rng), 0, cam, 30, 1.0);
    rejected += !validate_candidate(pool, truth, cam).inlier;
  }
  EXPECT_LE(rejected, 70);
  EXPECT_GE(rejected, 20);
}

TEST(ValidateCandidate, DisplacedCandidateIsOutlier) {
  std::mt19937_64 rng(10);
  const Camera cam = oracle::plain_camera();
  for (int trial = 0; trial < 20; ++trial) {
    const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
    EvidencePool pool;
    pool.entries = oracle::evidence(rng, truth, oracle::random_transport(rng), 0, cam, 200, 1.0);
    // Sideways in the reference camera, across the baseline.
    const Vector3d side = cam.lidar_from_camera.rotation * Vector3d::UnitX();
    const Pose moved(truth.rotation, truth.translation + side);
    const ValidationResult v = validate_candidate(pool, moved, cam);
    EXPECT_FALSE(v.inlier);
    EXPECT_EQ(v.dof, 200u);
    EXPECT_NEAR(v.threshold, chi2_quantile(200.0), 1e-12);
  }
}

TEST(UpdateEvidence, ConsistentEvidenceKeptWhole) {
  std::mt19937_64 rng(11);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  EvidencePool pool;
  const auto e = oracle::evidence(rng, truth, oracle::random_transport(rng), 0, cam, 100, 0.0);
  std::vector<EvidenceEntry> exact = e;
  for (auto& x : exact) x.match.sigma_p = 1.0;
  const EvidenceUpdate u = update_evidence(pool, exact, truth, cam);
  EXPECT_EQ(u.inlier_rate, 1.0);
  EXPECT_EQ(pool.size(), 100u);
}

TEST(UpdateEvidence, MismatchesAreEvicted) {
  std::mt19937_64 rng(12);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  const PlaceTransport tr = oracle::random_transport(rng);
  auto good = oracle::evidence(rng, truth, tr, 0, cam, 270, 0.0);
  auto bad = oracle::evidence(rng, truth, tr, 0, cam, 30, 0.0, 1.0);
  for (auto& x : good) x.match.sigma_p = 0.5;
  for (auto& x : bad) x.match.sigma_p = 0.5;
  std::vector<EvidenceEntry> all = good;
  all.insert(all.end(), bad.begin(), bad.end());
  EvidencePool pool;
  const EvidenceUpdate u = update_evidence(pool, all, truth, cam);
  EXPECT_LT(u.inlier_rate, 0.95);
  EXPECT_GE(u.kept, 270u);
  EXPECT_GT(inlier_rate(pool, truth, cam), 0.95);
}

TEST(UpdateEvidence, LargeErrorPoseDropsInlierRate) {
  std::mt19937_64 rng(13);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  EvidencePool pool;
  pool.entries = oracle::evidence(rng, truth, oracle::random_transport(rng), 0, cam, 200, 1.0);
  EXPECT_GT(inlier_rate(pool, truth, cam), 0.9);
  const Pose wrong = exp(oracle::random_twist(rng, 0.05, 0.5)) * truth;
  EXPECT_LT(inlier_rate(pool, wrong, cam), 0.5);
}

namespace {

struct Candidate {
  Pose pose;
  Covariance6 cov;
  std::vector<EvidenceEntry> evidence;
};

Candidate make_candidate(std::mt19937_64& rng, const Pose& truth, const Camera& cam, int place, double cov_scale) {
  Candidate c;
  c.cov = oracle::random_covariance(rng, 0.1 * cov_scale, cov_scale);
  const Eigen::LLT<Matrix6d> llt(c.cov);
  c.pose = exp(Twist(llt.matrixL() * oracle::random_twist(rng, 1.0, 1.0))) * truth;
  c.evidence = oracle::evidence(rng, truth, oracle::random_transport(rng), place, cam, 60, 1.0);
  return c;
}

}  // namespace

TEST(SequentialFusion, SeedThenAcceptNeedsTwoEstimates) {
  std::mt19937_64 rng(14);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  SequentialFusion s(cam, FusionConfig{});
  const Candidate a = make_candidate(rng, truth, cam, 0, 1e-8);
  const FusionStep s0 = s.offer(0, a.pose, a.cov, a.evidence);
  EXPECT_EQ(s0.decision, Decision::seed);
  EXPECT_LT(s0.eigen_sum, FusionConfig{}.theta_th);
  EXPECT_EQ(s0.status, FusionStatus::collecting);
  const Candidate b = make_candidate(rng, truth, cam, 1, 1e-8);
  const FusionStep s1 = s.offer(1, b.pose, b.cov, b.evidence);
  EXPECT_EQ(s1.decision, Decision::accept);
  EXPECT_EQ(s1.status, FusionStatus::accepted);
  EXPECT_EQ(s1.fused_count, 2);
  EXPECT_TRUE(s.done());
  EXPECT_EQ(s.offer(2, b.pose, b.cov, b.evidence).decision, Decision::skipped);
  EXPECT_EQ(s.consumed(), 2);
}

TEST(SequentialFusion, RejectionLeavesStateBitIdentical) {
  std::mt19937_64 rng(15);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  FusionConfig cfg;
  cfg.theta_th = 1e-30;
  SequentialFusion s(cam, cfg);
  for (int i = 0; i < 2; ++i) {
    const Candidate c = make_candidate(rng, truth, cam, i, 1e-6);
    s.offer(i, c.pose, c.cov, c.evidence);
  }
  const FusedAlignment before = s.state();
  const std::size_t pool_before = s.pool().size();
  const Pose wrong = Pose(so3::exp(Vector3d(0, 0, 0.14)), Vector3d(1.5, 0.2, 0.0)) * truth;
  Candidate bad = make_candidate(rng, wrong, cam, 2, 1e-6);
  const FusionStep step = s.offer(2, bad.pose, bad.cov, bad.evidence);
  EXPECT_EQ(step.decision, Decision::reject);
  EXPECT_LT(step.inlier_rate, 0.5);
  EXPECT_EQ(s.state().pose.rotation, before.pose.rotation);
  EXPECT_EQ(s.state().pose.translation, before.pose.translation);
  EXPECT_EQ(s.state().covariance, before.covariance);
  EXPECT_EQ(s.state().count, before.count);
  EXPECT_EQ(s.pool().size(), pool_before);
}

TEST(SequentialFusion, MutualRejectionRestarts) {
  std::mt19937_64 rng(16);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  const Pose wrong = Pose(so3::exp(Vector3d(0, 0, -0.14)), Vector3d(-1.5, 0.2, 0.0)) * truth;
  SequentialFusion s(cam, FusionConfig{});
  const Candidate bad = make_candidate(rng, wrong, cam, 0, 1e-6);
  s.offer(0, bad.pose, bad.cov, bad.evidence);
  const Candidate good = make_candidate(rng, truth, cam, 1, 1e-6);
  const FusionStep step = s.offer(1, good.pose, good.cov, good.evidence);
  EXPECT_EQ(step.decision, Decision::restart);
  EXPECT_EQ(s.state().count, 0);
  EXPECT_TRUE(s.pool().empty());
  const Candidate next = make_candidate(rng, truth, cam, 2, 1e-6);
  EXPECT_EQ(s.offer(2, next.pose, next.cov, next.evidence).decision, Decision::seed);
}

TEST(SequentialFusion, CapAbortsAndFailuresCount) {
  std::mt19937_64 rng(17);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  FusionConfig cfg;
  cfg.max_pairs = 3;
  cfg.theta_th = 1e-30;
  SequentialFusion s(cam, cfg);
  EXPECT_EQ(s.fail(0).decision, Decision::failed);
  const Candidate a = make_candidate(rng, truth, cam, 1, 1e-6);
  EXPECT_EQ(s.offer(1, a.pose, a.cov, a.evidence).status, FusionStatus::collecting);
  const Candidate b = make_candidate(rng, truth, cam, 2, 1e-6);
  const FusionStep last = s.offer(2, b.pose, b.cov, b.evidence);
  EXPECT_EQ(last.decision, Decision::accept);
  EXPECT_EQ(last.status, FusionStatus::aborted);
  EXPECT_EQ(s.fail(3).decision, Decision::skipped);
  EXPECT_EQ(s.consumed(), 3);
}

TEST(SequentialFusion, RunToEndKeepsFusingUntilCap) {
  std::mt19937_64 rng(18);
  const Camera cam = oracle::plain_camera();
  const Pose truth = exp(oracle::random_twist(rng, 0.05, 0.5));
  FusionConfig cfg;
  cfg.run_to_end = true;
  cfg.max_pairs = 4;
  SequentialFusion s(cam, cfg);
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 5; ++i) {
    const Candidate c = make_candidate(rng, truth, cam, i, 1e-8);
    const FusionStep step = s.offer(i, c.pose, c.cov, c.evidence);
    if (i < 4) {
      EXPECT_TRUE(step.decision == Decision::seed || step.decision == Decision::accept);
      EXPECT_LT(step.eigen_sum, prev);
      prev = step.eigen_sum;
    } else {
      EXPECT_EQ(step.decision, Decision::skipped);
    }
  }
  EXPECT_EQ(s.state().status, FusionStatus::accepted);
  EXPECT_EQ(s.state().count, 4);
}

TEST(FusionLog, RecordHasAllFields) {
  FusionStep s;
  s.decision = Decision::reject;
  s.validation.statistic = 12.0;
  const nlohmann::json j = to_json(s);
  for (const char* k : {"pair_index", "candidate", "statistic", "threshold", "dof", "decision", "eigen_sum",
                        "inlier_rate", "fused_count", "status"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(j.at("decision"), "reject");
  EXPECT_EQ(j.at("candidate").size(), 6u);
}
