#include <cmath>

#include <catch2/catch_amalgamated.hpp>

#include "falcon/kinematics.hpp"
#include "test_util.hpp"

using namespace falcon;
using falcon::test::random_pose;
using falcon::test::relative_error;

namespace {

// Reference FK path for the oracle: explicit 4x4 homogeneous products with a
// hand-written Rodrigues rotation, independent of FramePlacement::compose.
Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis, double angle) {
  Eigen::Matrix3d k;
  k << 0, -axis.z(), axis.y(), axis.z(), 0, -axis.x(), -axis.y(), axis.x(), 0;
  return Eigen::Matrix3d::Identity() + std::sin(angle) * k + (1 - std::cos(angle)) * k * k;
}

Eigen::Matrix4d homogeneous(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::Matrix4d h = Eigen::Matrix4d::Identity();
  h.topLeftCorner<3, 3>() = r;
  h.topRightCorner<3, 1>() = t;
  return h;
}

Eigen::Vector3d reference_ee_point(const RobotModel& model, const ArmPose& pose) {
  const ArmChain& arm = model.arm(pose.arm_index);
  Eigen::Matrix4d x = homogeneous(Eigen::Matrix3d::Identity(), arm.mount);
  for (int j = 0; j < arm.joint_count(); ++j) {
    const JointSpec& spec = arm.segments[j].joint;
    Eigen::Matrix3d origin = rodrigues(Eigen::Vector3d::UnitX(), spec.origin_rotation[0]) *
                             rodrigues(Eigen::Vector3d::UnitY(), spec.origin_rotation[1]) *
                             rodrigues(Eigen::Vector3d::UnitZ(), spec.origin_rotation[2]);
    x = x * homogeneous(origin, spec.origin_translation) *
        homogeneous(rodrigues(spec.axis, pose.joint_positions[j]), Eigen::Vector3d::Zero());
  }
  return (x * Eigen::Vector4d(arm.ee_distal_offset[0], arm.ee_distal_offset[1],
                              arm.ee_distal_offset[2], 1.0))
      .head<3>();
}

Eigen::Matrix3Xd finite_difference_jacobian(const RobotModel& model, const ArmPose& pose,
                                            const Eigen::Vector3d& local_point, double h) {
  const int n = model.arm(pose.arm_index).joint_count();
  Eigen::Matrix3Xd jac(3, n);
  for (int j = 0; j < n; ++j) {
    ArmPose hi = pose, lo = pose;
    hi.joint_positions[j] += h;
    lo.joint_positions[j] -= h;
    Eigen::Vector3d p_hi =
        forward_kinematics(model, hi).link_placements.back().apply(local_point);
    Eigen::Vector3d p_lo =
        forward_kinematics(model, lo).link_placements.back().apply(local_point);
    jac.col(j) = (p_hi - p_lo) / (2.0 * h);
  }
  return jac;
}

}  // namespace

TEST_CASE("toy-arm straight-out chain") {
  RobotModel model = *find_builtin("toy-arm");
  ArmPose pose{0, Eigen::Vector2d(0.0, 0.0)};
  ArmKinematics fk = forward_kinematics(model, pose);
  REQUIRE((fk.ee_distal_point - Eigen::Vector3d(0.6, 0, 0)).norm() < 1e-12);

  pose.joint_positions << M_PI / 2.0, 0.0;
  fk = forward_kinematics(model, pose);
  REQUIRE((fk.ee_distal_point - Eigen::Vector3d(0, 0, 0.6)).norm() < 1e-12);
}

TEST_CASE("forward kinematics matches the homogeneous-product reference") {
  RobotModel model = *find_builtin("mini-humanoid");
  Rng rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    for (int arm = 0; arm < 2; ++arm) {
      ArmPose pose = random_pose(rng, model, arm);
      Eigen::Vector3d mine = forward_kinematics(model, pose).ee_distal_point;
      Eigen::Vector3d ref = reference_ee_point(model, pose);
      REQUIRE((mine - ref).norm() < 1e-12);
    }
  }
}

TEST_CASE("forward kinematics handles nonzero origin rotations") {
  // custom chain exercising origin_rpy
  const char* text = R"(
[base]
name = bent
mass = 1
inertia = 0.1 0.1 0.1
default_height = 0
lower_dof_count = 0
[joint]
name = j1
parent = base
side = left
mount = 0.1 0 0.2
axis = 0 0 1
origin = 0 0 0
origin_rpy = 0.3 -0.2 0.5
limits = -3 3
torque_limit = 10
default = 0
kp = 10
kd = 1
inertia = 0.01
friction = 0.01
[link]
name = l1
mass = 0.5
com = 0.1 0 0
[joint]
name = j2
parent = l1
axis = 0 1 0
origin = 0.2 0 0.05
origin_rpy = -0.1 0.4 0.2
limits = -3 3
torque_limit = 10
default = 0
kp = 10
kd = 1
inertia = 0.01
friction = 0.01
[link]
name = l2
mass = 0.5
com = 0.1 0 0
distal = 0.25 0 0
)";
  RobotModel model = parse_model(text);
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    ArmPose pose = random_pose(rng, model, 0);
    Eigen::Vector3d mine = forward_kinematics(model, pose).ee_distal_point;
    Eigen::Vector3d ref = reference_ee_point(model, pose);
    REQUIRE((mine - ref).norm() < 1e-12);
  }
}

TEST_CASE("single revolute joint about z") {
  const char* text = R"(
[base]
name = one
mass = 1
inertia = 0.1 0.1 0.1
default_height = 0
lower_dof_count = 0
[joint]
name = j1
parent = base
side = left
mount = 0 0 0
axis = 0 0 1
origin = 0 0 0
origin_rpy = 0 0 0
limits = -3 3
torque_limit = 10
default = 0
kp = 10
kd = 1
inertia = 0.01
friction = 0.01
[link]
name = l1
mass = 1
com = 0.5 0 0
distal = 1 0 0
)";
  RobotModel model = parse_model(text);
  ArmPose pose{0, Eigen::VectorXd::Zero(1)};
  Eigen::Matrix3Xd jac = point_jacobian(model, pose, Eigen::Vector3d(1, 0, 0));
  REQUIRE((jac.col(0) - Eigen::Vector3d(0, 1, 0)).norm() < 1e-12);
}

TEST_CASE("toy-arm planar lever arms") {
  RobotModel model = *find_builtin("toy-arm");
  ArmPose pose{0, Eigen::Vector2d(0.0, 0.0)};
  Eigen::Matrix3Xd jac = point_jacobian(model, pose, Eigen::Vector3d(0.6, 0, 0));
  REQUIRE((jac.col(0) - Eigen::Vector3d(0, 0, 0.6)).norm() < 1e-12);
  REQUIRE((jac.col(1) - Eigen::Vector3d(0, 0, 0.3)).norm() < 1e-12);
}

TEST_CASE("point jacobian matches central finite differences") {
  RobotModel model = *find_builtin("mini-humanoid");
  Rng rng(77);
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    int arm = trial % 2;
    ArmPose pose = random_pose(rng, model, arm);
    Eigen::Vector3d local(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                          rng.uniform(-0.2, 0.2));
    ArmKinematics fk = forward_kinematics(model, pose);
    Eigen::Vector3d world = fk.link_placements.back().apply(local);
    Eigen::Matrix3Xd analytic = point_jacobian(fk, world);
    Eigen::Matrix3Xd fd = finite_difference_jacobian(model, pose, local, h);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < analytic.cols(); ++j)
        REQUIRE(relative_error(analytic(i, j), fd(i, j)) < 1e-5);
  }
}

TEST_CASE("jacobian-FK consistency converges quadratically") {
  RobotModel model = *find_builtin("mini-humanoid");
  Rng rng(31);
  ArmPose pose = random_pose(rng, model, 0);
  ArmKinematics fk = forward_kinematics(model, pose);
  Eigen::Vector3d point = fk.ee_distal_point;
  Eigen::Matrix3Xd jac = point_jacobian(fk, point);

  Eigen::VectorXd direction(4);
  for (int j = 0; j < 4; ++j) direction[j] = rng.uniform(-1.0, 1.0);
  direction.normalize();

  double prev = -1.0;
  for (double step = 1e-2; step > 1e-5; step /= 2.0) {
    ArmPose moved = pose;
    moved.joint_positions += step * direction;
    Eigen::Vector3d p_moved = forward_kinematics(model, moved)
                                  .link_placements.back()
                                  .apply(model.arm(0).ee_distal_offset);
    double residual = (p_moved - point - jac * (step * direction)).norm();
    if (prev > 0.0) {
      // halving the step should shrink the residual ~4x
      REQUIRE(residual < prev / 3.0);
    }
    prev = residual;
  }
}

TEST_CASE("gravity torque on a single horizontal link") {
  const char* text = R"(
[base]
name = swing
mass = 1
inertia = 0.1 0.1 0.1
default_height = 0
lower_dof_count = 0
[joint]
name = j1
parent = base
side = left
mount = 0 0 0
axis = 0 -1 0
origin = 0 0 0
origin_rpy = 0 0 0
limits = -3 3
torque_limit = 100
default = 0
kp = 10
kd = 1
inertia = 0.01
friction = 0.01
[link]
name = l1
mass = 1
com = 0.5 0 0
distal = 1 0 0
)";
  RobotModel model = parse_model(text);
  ArmPose pose{0, Eigen::VectorXd::Zero(1)};
  Eigen::VectorXd tau = gravity_torque(model, pose, Eigen::Vector3d(0, 0, -9.81));
  REQUIRE(std::abs(tau[0] - 4.905) < 1e-12);
}

TEST_CASE("gravity torque edge cases") {
  RobotModel model = *find_builtin("toy-arm");
  Rng rng(9);
  ArmPose pose = random_pose(rng, model, 0);
  REQUIRE(gravity_torque(model, pose, Eigen::Vector3d::Zero()).norm() == 0.0);

  ArmPose down{0, Eigen::Vector2d(-M_PI / 2.0, 0.0)};
  Eigen::VectorXd tau = gravity_torque(model, down, Eigen::Vector3d(0, 0, -9.81));
  REQUIRE(tau.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gravity torque equals potential-energy gradient") {
  RobotModel model = *find_builtin("mini-humanoid");
  Rng rng(55);
  const Eigen::Vector3d g(0, 0, -9.81);
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    int arm = trial % 2;
    ArmPose pose = random_pose(rng, model, arm);
    Eigen::VectorXd tau = gravity_torque(model, pose, g);
    for (int j = 0; j < tau.size(); ++j) {
      ArmPose hi = pose, lo = pose;
      hi.joint_positions[j] += h;
      lo.joint_positions[j] -= h;
      double grad =
          (potential_energy(model, hi, g) - potential_energy(model, lo, g)) / (2.0 * h);
      REQUIRE(relative_error(tau[j], grad, 1e-8) < 1e-5);
    }
  }
}

TEST_CASE("torque clamp") {
  RobotModel model = *find_builtin("mini-humanoid");
  Eigen::VectorXd torques(4);
  torques << 30, 30, 30, 30;
  Eigen::VectorXd clamped = clamp_to_torque_limits(model, 0, torques);
  REQUIRE(clamped == (Eigen::VectorXd(4) << 25, 25, 14, 5).finished());

  REQUIRE(clamp_to_torque_limits(model, 0, Eigen::VectorXd::Zero(4)).norm() == 0.0);

  torques << -6, 3, -20, 1;
  clamped = clamp_to_torque_limits(model, 0, torques);
  REQUIRE(clamped == (Eigen::VectorXd(4) << -6, 3, -14, 1).finished());
}

TEST_CASE("frames stay orthonormal through composition") {
  RobotModel model = *find_builtin("mini-humanoid");
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    ArmPose pose = random_pose(rng, model, trial % 2);
    FramePlacement base;
    base.rotation = Eigen::AngleAxisd(rng.uniform(-M_PI, M_PI), Eigen::Vector3d::UnitZ())
                        .toRotationMatrix();
    base.translation = Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.75);
    ArmKinematics fk = forward_kinematics(model, pose, base);
    for (const auto& placement : fk.link_placements) {
      REQUIRE(placement.orthonormal(1e-9));
    }
  }
}
