#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "falcon/robot_model.hpp"

namespace falcon {

/// Rigid placement of a frame in a reference frame.
struct FramePlacement {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();

  static FramePlacement identity() { return {}; }

  FramePlacement compose(const FramePlacement& child) const {
    return {translation + rotation * child.translation, rotation * child.rotation};
  }
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return translation + rotation * p;
  }
  bool orthonormal(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Eigen::Matrix3d::Identity())
                   .cwiseAbs()
                   .maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

/// Joint positions for one arm chain. Limit violations are flagged, not
/// rejected; the simulator may transiently exceed limits.
struct ArmPose {
  int arm_index = 0;
  Eigen::VectorXd joint_positions;

  bool within_limits(const RobotModel& model, double tol = 0.0) const {
    const ArmChain& arm = model.arm(arm_index);
    for (int j = 0; j < arm.joint_count(); ++j) {
      const JointSpec& spec = arm.segments[j].joint;
      if (joint_positions[j] < spec.position_lower - tol ||
          joint_positions[j] > spec.position_upper + tol)
        return false;
    }
    return true;
  }
};

inline Eigen::Matrix3d euler_xyz(const Eigen::Vector3d& rpy) {
  return (Eigen::AngleAxisd(rpy[0], Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(rpy[1], Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(rpy[2], Eigen::Vector3d::UnitZ()))
      .toRotationMatrix();
}

/// Forward-kinematics result for one arm, everything in the base's reference
/// frame (pass the world base placement to get world quantities).
struct ArmKinematics {
  std::vector<FramePlacement> link_placements;   // one per link, root to tip
  std::vector<Eigen::Vector3d> joint_origins;    // world joint origins
  std::vector<Eigen::Vector3d> joint_axes;       // world unit axes
  Eigen::Vector3d ee_distal_point;               // world distal force marker

  Eigen::Vector3d link_com(const RobotModel& model, int arm_index, int k) const {
    return link_placements[k].apply(model.arm(arm_index).segments[k].link.com_offset);
  }
  const Eigen::Vector3d& wrist_origin() const { return joint_origins.back(); }
};

inline ArmKinematics forward_kinematics(const RobotModel& model, const ArmPose& pose,
                                        const FramePlacement& base = FramePlacement::identity()) {
  const ArmChain& arm = model.arm(pose.arm_index);
  ArmKinematics out;
  out.link_placements.reserve(arm.segments.size());
  FramePlacement cursor = base.compose({arm.mount, Eigen::Matrix3d::Identity()});
  for (int j = 0; j < arm.joint_count(); ++j) {
    const JointSpec& spec = arm.segments[j].joint;
    FramePlacement joint_frame =
        cursor.compose({spec.origin_translation, euler_xyz(spec.origin_rotation)});
    out.joint_origins.push_back(joint_frame.translation);
    out.joint_axes.push_back(joint_frame.rotation * spec.axis);
    Eigen::Matrix3d spin =
        Eigen::AngleAxisd(pose.joint_positions[j], spec.axis).toRotationMatrix();
    cursor = joint_frame.compose({Eigen::Vector3d::Zero(), spin});
    out.link_placements.push_back(cursor);
  }
  out.ee_distal_point = cursor.apply(arm.ee_distal_offset);
  return out;
}

/// Linear-velocity Jacobian (3 rows) of a point rigidly attached to the arm's
/// final link. Column j is axis_j x (point - origin_j).
inline Eigen::Matrix3Xd point_jacobian(const ArmKinematics& fk, const Eigen::Vector3d& point) {
  const int n = static_cast<int>(fk.joint_origins.size());
  Eigen::Matrix3Xd jac(3, n);
  for (int j = 0; j < n; ++j) {
    jac.col(j) = fk.joint_axes[j].cross(point - fk.joint_origins[j]);
  }
  return jac;
}

inline Eigen::Matrix3Xd point_jacobian(const RobotModel& model, const ArmPose& pose,
                                       const Eigen::Vector3d& point,
                                       const FramePlacement& base = FramePlacement::identity()) {
  return point_jacobian(forward_kinematics(model, pose, base), point);
}

/// Jacobian of a point attached to an arbitrary link k (columns past k zero).
inline Eigen::Matrix3Xd link_point_jacobian(const ArmKinematics& fk, int link_index,
                                            const Eigen::Vector3d& point) {
  const int n = static_cast<int>(fk.joint_origins.size());
  Eigen::Matrix3Xd jac = Eigen::Matrix3Xd::Zero(3, n);
  for (int j = 0; j <= link_index; ++j) {
    jac.col(j) = fk.joint_axes[j].cross(point - fk.joint_origins[j]);
  }
  return jac;
}

/// Actuator torque required to statically hold the pose against gravity:
/// tau_g = -sum_k J_com_k^T m_k g. Equals dU/dq for potential energy U.
inline Eigen::VectorXd gravity_torque(const RobotModel& model, const ArmPose& pose,
                                      const Eigen::Vector3d& gravity,
                                      const FramePlacement& base = FramePlacement::identity()) {
  const ArmChain& arm = model.arm(pose.arm_index);
  ArmKinematics fk = forward_kinematics(model, pose, base);
  Eigen::VectorXd tau = Eigen::VectorXd::Zero(arm.joint_count());
  for (int k = 0; k < arm.joint_count(); ++k) {
    double mass = arm.segments[k].link.mass;
    if (mass == 0.0) continue;
    Eigen::Vector3d com = fk.link_com(model, pose.arm_index, k);
    Eigen::Matrix3Xd jac = link_point_jacobian(fk, k, com);
    tau -= jac.transpose() * (mass * gravity);
  }
  return tau;
}

/// Total gravitational potential energy of one arm (test oracle for tau_g).
inline double potential_energy(const RobotModel& model, const ArmPose& pose,
                               const Eigen::Vector3d& gravity,
                               const FramePlacement& base = FramePlacement::identity()) {
  const ArmChain& arm = model.arm(pose.arm_index);
  ArmKinematics fk = forward_kinematics(model, pose, base);
  double energy = 0.0;
  for (int k = 0; k < arm.joint_count(); ++k) {
    energy -= arm.segments[k].link.mass *
              gravity.dot(fk.link_com(model, pose.arm_index, k));
  }
  return energy;
}

inline Eigen::VectorXd clamp_to_torque_limits(const ArmChain& arm,
                                              const Eigen::VectorXd& torques) {
  Eigen::VectorXd out(torques.size());
  for (int j = 0; j < torques.size(); ++j) {
    double lim = arm.segments[static_cast<size_t>(j)].joint.torque_limit;
    out[j] = std::clamp(torques[j], -lim, lim);
  }
  return out;
}

inline Eigen::VectorXd clamp_to_torque_limits(const RobotModel& model, int arm_index,
                                              const Eigen::VectorXd& torques) {
  return clamp_to_torque_limits(model.arm(arm_index), torques);
}

}  // namespace falcon
