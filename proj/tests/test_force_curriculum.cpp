#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "falcon/force_curriculum.hpp"
#include "test_util.hpp"

using namespace falcon;
using falcon::test::random_pose;

namespace {

bool torque_feasible(const Eigen::Matrix3Xd& jac, const Eigen::VectorXd& tau_limit,
                     const Eigen::VectorXd& tau_gravity, const Eigen::Vector3d& force,
                     double slack = 1e-9) {
  Eigen::VectorXd tau = tau_gravity + jac.transpose() * force;
  return (tau.array().abs() <= tau_limit.array() + slack).all();
}

// Independent per-axis oracle: grow an isolated axis force on a fine geometric
// grid and report the largest magnitude whose worst-case induced torque stays
// in budget. Worst case means each joint sees |J_ij| * f, the same
// rectification the bound formula applies.
double grid_scan_axis_bound(const Eigen::Matrix3Xd& jac, const Eigen::VectorXd& tau_limit,
                            const Eigen::VectorXd& tau_gravity, int axis, double sign) {
  Eigen::Matrix3Xd rectified = jac.cwiseAbs();
  double f = 1e-4;
  double last_ok = 0.0;
  while (f < 1e8) {
    Eigen::Vector3d force = Eigen::Vector3d::Zero();
    force[axis] = sign * f;
    if (!torque_feasible(rectified, tau_limit, tau_gravity, force, 0.0)) break;
    last_ok = f;
    f *= 1.002;
  }
  return last_ok;
}

Eigen::Matrix3Xd random_jacobian(Rng& rng, int joints) {
  Eigen::Matrix3Xd jac(3, joints);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < joints; ++j) jac(i, j) = rng.uniform(-2.0, 2.0);
  return jac;
}

}  // namespace

TEST_CASE("admissible bounds: single-joint lever") {
  const double eps = 1e-6;
  Eigen::Matrix3Xd jac(3, 1);
  jac << 1, 0, 0;  // unit force along x -> 1 N*m on the joint
  Eigen::VectorXd lim(1), grav(1);
  lim << 10;
  grav << 0;
  ForceEnvelope env = admissible_bounds(jac, lim, grav, eps, ClipBox::wide());
  REQUIRE(env.f_max[0] == Catch::Approx(10.0 / (1.0 + eps)));
  REQUIRE(env.f_min[0] == Catch::Approx(-10.0 / (1.0 + eps)));
  // y and z see only the epsilon guard, then the clip box takes over
  REQUIRE(env.f_max[1] == Catch::Approx(10.0 / eps));
  REQUIRE(env.clipped_max()[1] == 100.0);
  REQUIRE(env.clipped_min()[2] == -100.0);

  grav << 4;
  env = admissible_bounds(jac, lim, grav, eps, ClipBox::wide());
  REQUIRE(env.f_max[0] == Catch::Approx(6.0 / (1.0 + eps)));
  REQUIRE(env.f_min[0] == Catch::Approx(-14.0 / (1.0 + eps)));
}

TEST_CASE("admissible bounds match the grid-scan oracle on the mini-humanoid") {
  RobotModel model = *find_builtin("mini-humanoid");
  const ArmChain& arm = model.arm(0);
  ArmPose pose{0, arm.default_positions()};
  ArmKinematics fk = forward_kinematics(model, pose);
  Eigen::Matrix3Xd jac = point_jacobian(fk, fk.ee_distal_point);
  Eigen::VectorXd lim = arm.torque_limits();
  Eigen::VectorXd grav = gravity_torque(model, pose, Eigen::Vector3d(0, 0, -9.81));

  ForceEnvelope env = admissible_bounds(jac, lim, grav, 1e-6, ClipBox::wide());
  for (int axis = 0; axis < 3; ++axis) {
    double oracle_max = grid_scan_axis_bound(jac, lim, grav, axis, +1.0);
    double oracle_min = grid_scan_axis_bound(jac, lim, grav, axis, -1.0);
    REQUIRE(env.f_max[axis] == Catch::Approx(oracle_max).epsilon(0.01));
    REQUIRE(env.f_min[axis] == Catch::Approx(-oracle_min).epsilon(0.01));
  }
}

TEST_CASE("infeasible gravity torque violates the precondition") {
  Eigen::Matrix3Xd jac(3, 1);
  jac << 1, 0, 0;
  Eigen::VectorXd lim(1), grav(1);
  lim << 10;
  grav << 11;
  REQUIRE_THROWS_AS(admissible_bounds(jac, lim, grav, 1e-6, ClipBox::wide()),
                    std::domain_error);
  REQUIRE(!gravity_feasible(lim, grav));
}

TEST_CASE("envelope brackets zero whenever gravity is feasible") {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    int m = rng.uniform_int(1, 6);
    Eigen::Matrix3Xd jac = random_jacobian(rng, m);
    Eigen::VectorXd lim(m), grav(m);
    for (int j = 0; j < m; ++j) {
      lim[j] = rng.uniform(0.1, 30.0);
      grav[j] = rng.uniform(-lim[j], lim[j]);
    }
    ForceEnvelope env = admissible_bounds(jac, lim, grav, 1e-6, ClipBox::narrow());
    REQUIRE((env.f_min.array() <= 0.0).all());
    REQUIRE((env.f_max.array() >= 0.0).all());
    REQUIRE((env.clipped_min().array() >= env.clip_min.array()).all());
    REQUIRE((env.clipped_max().array() <= env.clip_max.array()).all());
    REQUIRE((env.clipped_min().array() <= env.clipped_max().array()).all());
  }
}

TEST_CASE("envelope monotonicity in the torque limits") {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    int m = rng.uniform_int(1, 5);
    Eigen::Matrix3Xd jac = random_jacobian(rng, m);
    Eigen::VectorXd lim(m), grav(m);
    for (int j = 0; j < m; ++j) {
      lim[j] = rng.uniform(0.1, 20.0);
      grav[j] = rng.uniform(-lim[j], lim[j]);
    }
    ForceEnvelope before = admissible_bounds(jac, lim, grav, 1e-6, ClipBox::wide());
    Eigen::VectorXd bigger = lim;
    bigger[rng.uniform_int(0, m - 1)] += rng.uniform(0.0, 10.0);
    ForceEnvelope after = admissible_bounds(jac, bigger, grav, 1e-6, ClipBox::wide());
    REQUIRE((after.f_max.array() >= before.f_max.array() - 1e-12).all());
    REQUIRE((after.f_min.array() <= before.f_min.array() + 1e-12).all());
  }
}

TEST_CASE("dirichlet ratios: simplex membership and marginal means") {
  Rng rng(23);
  const int n = 100000;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d r = sample_ratios(rng, Eigen::Vector3d::Ones());
    REQUIRE((r.array() >= 0.0).all());
    REQUIRE((r.array() <= 1.0).all());
    REQUIRE(std::abs(r.sum() - 1.0) < 1e-9);
    mean += r;
  }
  mean /= n;
  for (int i = 0; i < 3; ++i) REQUIRE(std::abs(mean[i] - 1.0 / 3.0) < 0.01);
}

TEST_CASE("dirichlet concentration limit") {
  Rng rng(29);
  for (int i = 0; i < 200; ++i) {
    Eigen::Vector3d r = sample_ratios(rng, Eigen::Vector3d(1e6, 1.0, 1.0));
    REQUIRE(r[0] > 0.99);
  }
  REQUIRE_THROWS_AS(sample_ratios(rng, Eigen::Vector3d(1.0, 0.0, 1.0)),
                    std::invalid_argument);
}

TEST_CASE("force sampling: degenerate ratios collapse axes") {
  Rng rng(31);
  ForceEnvelope env = naive_envelope({{-10, -10, -10}, {10, 10, 10}});
  for (int i = 0; i < 100; ++i) {
    Eigen::Vector3d f = sample_force(rng, env, Eigen::Vector3d(1, 0, 0));
    REQUIRE(f[1] == 0.0);
    REQUIRE(f[2] == 0.0);
    REQUIRE(f[0] >= -10.0);
    REQUIRE(f[0] <= 10.0);
  }
}

TEST_CASE("force sampling: interval scaling and uniform statistics") {
  Rng rng(37);
  ForceEnvelope env = naive_envelope({{-9, -9, -9}, {9, 9, 9}});
  Eigen::Vector3d ratios = Eigen::Vector3d::Constant(1.0 / 3.0);
  const int n = 100000;
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(1e9), hi = -lo, sum = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d f = sample_force(rng, env, ratios);
    REQUIRE((f.array().abs() <= 3.0).all());
    lo = lo.cwiseMin(f);
    hi = hi.cwiseMax(f);
    sum += f;
  }
  for (int i = 0; i < 3; ++i) {
    REQUIRE(lo[i] < -3.0 + 0.03);     // within 1% of interval endpoints
    REQUIRE(hi[i] > 3.0 - 0.03);
    REQUIRE(std::abs(sum[i] / n) < 0.03);  // midpoint
  }
}

TEST_CASE("feasibility projection: closed-form cases") {
  Eigen::Matrix3Xd jac(3, 2);
  jac << 0.5, 0.1, -0.2, 0.3, 0.05, -0.4;
  Eigen::VectorXd lim(2), grav(2);
  lim << 10, 10;
  grav << 1, -2;
  Eigen::Vector3d small(1.0, 0.5, -0.2);
  auto proj = project_feasible(jac, lim, grav, small);
  REQUIRE(proj.scale == 1.0);
  REQUIRE(proj.force == small);

  // single joint mapping force to torque 2*|F|
  Eigen::Vector3d f(10, 0, 0);
  Eigen::Matrix3Xd jac1(3, 1);
  jac1 << 2, 0, 0;
  Eigen::VectorXd lim1(1), grav1(1);
  lim1 << 10;
  grav1 << 0;
  proj = project_feasible(jac1, lim1, grav1, f);
  REQUIRE(proj.scale == Catch::Approx(0.5));
  REQUIRE(proj.force[0] == Catch::Approx(5.0));
}

TEST_CASE("feasibility projection: randomized constraint check") {
  Rng rng(41);
  for (int trial = 0; trial < 100000; ++trial) {
    int m = rng.uniform_int(1, 5);
    Eigen::Matrix3Xd jac = random_jacobian(rng, m);
    Eigen::VectorXd lim(m), grav(m);
    for (int j = 0; j < m; ++j) {
      lim[j] = rng.uniform(0.05, 15.0);
      grav[j] = rng.uniform(-lim[j], lim[j]);
    }
    Eigen::Vector3d force(rng.uniform(-80, 80), rng.uniform(-80, 80), rng.uniform(-80, 80));
    auto proj = project_feasible(jac, lim, grav, force);
    REQUIRE(proj.scale >= 0.0);
    REQUIRE(proj.scale <= 1.0);
    REQUIRE(torque_feasible(jac, lim, grav, proj.force));
  }
}

TEST_CASE("zero-gravity pipeline samples are feasible before projection") {
  Rng rng(43);
  for (int trial = 0; trial < 100000; ++trial) {
    int m = rng.uniform_int(1, 5);
    Eigen::Matrix3Xd jac = random_jacobian(rng, m);
    Eigen::VectorXd lim(m);
    for (int j = 0; j < m; ++j) lim[j] = rng.uniform(0.05, 25.0);
    Eigen::VectorXd grav = Eigen::VectorXd::Zero(m);
    ForceEnvelope env = admissible_bounds(jac, lim, grav, 1e-6, ClipBox::narrow());
    Eigen::Vector3d ratios = sample_ratios(rng, Eigen::Vector3d::Ones());
    Eigen::Vector3d force = sample_force(rng, env, ratios);
    REQUIRE(torque_feasible(jac, lim, grav, force));
    REQUIRE(project_feasible(jac, lim, grav, force).scale == 1.0);
  }
}

TEST_CASE("full pipeline with gravity is feasible after projection") {
  RobotModel model = *find_builtin("mini-humanoid");
  Rng rng(47);
  const Eigen::Vector3d g(0, 0, -9.81);
  int checked = 0;
  while (checked < 20000) {
    int arm_index = checked % 2;
    const ArmChain& arm = model.arm(arm_index);
    ArmPose pose = random_pose(rng, model, arm_index);
    Eigen::VectorXd lim = arm.torque_limits();
    Eigen::VectorXd grav = gravity_torque(model, pose, g);
    if (!gravity_feasible(lim, grav)) continue;  // env zeroes the force here
    ArmKinematics fk = forward_kinematics(model, pose);
    Eigen::Vector3d point = application_point(fk, rng.uniform01());
    Eigen::Matrix3Xd jac = point_jacobian(fk, point);
    ForceEnvelope env = admissible_bounds(jac, lim, grav, 1e-6, ClipBox::narrow());
    Eigen::Vector3d ratios = sample_ratios(rng, Eigen::Vector3d::Ones());
    Eigen::Vector3d force = sample_force(rng, env, ratios);
    auto proj = project_feasible(jac, lim, grav, force);
    REQUIRE(torque_feasible(jac, lim, grav, proj.force));
    // scaling down a feasible force keeps it feasible
    double alpha = rng.uniform01();
    REQUIRE(torque_feasible(jac, lim, grav, alpha * proj.force));
    ++checked;
  }
}

TEST_CASE("alpha schedule rises to one under constant success") {
  CurriculumConfig cfg;
  CurriculumState state;
  int promotions = 0;
  int guard = 0;
  while (state.alpha_g < 1.0 && guard < 100000) {
    double before = state.alpha_g;
    update_alpha(state, 0.0, cfg);
    if (state.alpha_g > before) ++promotions;
    REQUIRE(state.alpha_g >= 0.0);
    REQUIRE(state.alpha_g <= 1.0);
    ++guard;
  }
  REQUIRE(state.alpha_g == 1.0);
  REQUIRE(promotions == static_cast<int>(std::ceil(1.0 / cfg.step_size)));
}

TEST_CASE("alpha schedule pinned at zero under constant failure") {
  CurriculumConfig cfg;
  CurriculumState state;
  for (int i = 0; i < 5000; ++i) {
    update_alpha(state, 10.0, cfg);
    REQUIRE(state.alpha_g == 0.0);
  }
}

TEST_CASE("alternating promote/demote windows stay within one step") {
  CurriculumConfig cfg;
  CurriculumState state;
  state.alpha_g = 0.5;
  // direct simulation of the scheduler over alternating full windows
  for (int cycle = 0; cycle < 20; ++cycle) {
    double err = (cycle % 2 == 0) ? 0.0 : 10.0;
    for (int i = 0; i < cfg.window; ++i) update_alpha(state, err, cfg);
    REQUIRE(std::abs(state.alpha_g - 0.5) <= cfg.step_size + 1e-12);
  }
}

TEST_CASE("low-pass filter behavior") {
  Eigen::Vector3d state = Eigen::Vector3d::Zero();
  Eigen::Vector3d target(10, -4, 2);
  REQUIRE(filter_force(state, target, 0.0) == target);  // passthrough

  state.setZero();
  const double beta = 0.9;
  Eigen::Vector3d out;
  for (int k = 1; k <= 50; ++k) {
    out = filter_force(state, target, beta);
    double expected = 1.0 - std::pow(beta, k);
    REQUIRE(out[0] == Catch::Approx(10.0 * expected).margin(1e-12));
  }
  REQUIRE((out - target).cwiseAbs().maxCoeff() < 0.1);
}

TEST_CASE("walking projection") {
  Eigen::Vector3d out = walking_projection({6, 8, -3}, {1, 0});
  REQUIRE((out - Eigen::Vector3d(-10, 0, -3)).norm() < 1e-12);

  Eigen::Vector3d unchanged = walking_projection({6, 8, -3}, {0.01, 0.0});
  REQUIRE(unchanged == Eigen::Vector3d(6, 8, -3));

  Rng rng(53);
  for (int i = 0; i < 1000; ++i) {
    Eigen::Vector2d v(rng.uniform(-1, 1), rng.uniform(-1, 1));
    if (v.norm() <= 0.05) continue;
    Eigen::Vector3d f(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
    Eigen::Vector3d p = walking_projection(f, v);
    REQUIRE(p[2] == f[2]);
    REQUIRE(p.head<2>().norm() == Catch::Approx(f.head<2>().norm()).margin(1e-9));
    if (p.head<2>().norm() > 1e-9) {
      double cosine = p.head<2>().dot(v) / (p.head<2>().norm() * v.norm());
      REQUIRE(cosine == Catch::Approx(-1.0).margin(1e-9));
    }
  }
}

TEST_CASE("application point interpolation and distribution") {
  RobotModel model = *find_builtin("mini-humanoid");
  ArmPose pose{0, model.arm(0).default_positions()};
  ArmKinematics fk = forward_kinematics(model, pose);
  REQUIRE((application_point(fk, 0.0) - fk.wrist_origin()).norm() < 1e-12);
  REQUIRE((application_point(fk, 1.0) - fk.ee_distal_point).norm() < 1e-12);

  // Kolmogorov-Smirnov on the recovered interpolation parameter, 1% level
  Rng rng(59);
  const int n = 10000;
  std::vector<double> params;
  params.reserve(n);
  Eigen::Vector3d span = fk.ee_distal_point - fk.wrist_origin();
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d p = sample_application_point(rng, model, pose);
    params.push_back((p - fk.wrist_origin()).dot(span) / span.squaredNorm());
  }
  std::sort(params.begin(), params.end());
  double ks = 0.0;
  for (int i = 0; i < n; ++i) {
    double f = params[i];  // uniform CDF on [0,1]
    ks = std::max(ks, std::abs(f - static_cast<double>(i) / n));
    ks = std::max(ks, std::abs(static_cast<double>(i + 1) / n - f));
  }
  REQUIRE(ks < 1.63 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("naive envelope equals the clip box") {
  ForceEnvelope wide = naive_envelope(ClipBox::wide());
  REQUIRE(wide.clipped_min() == Eigen::Vector3d(-100, -100, -100));
  REQUIRE(wide.clipped_max() == Eigen::Vector3d(100, 100, 5));

  ForceEnvelope narrow = naive_envelope(ClipBox::narrow());
  REQUIRE(narrow.clipped_min() == Eigen::Vector3d(-50, -50, -60));
  REQUIRE(narrow.clipped_max() == Eigen::Vector3d(50, 50, 5));

  ForceEnvelope zero = naive_envelope(ClipBox::zero());
  REQUIRE(zero.clipped_min().norm() == 0.0);
  REQUIRE(zero.clipped_max().norm() == 0.0);
}
