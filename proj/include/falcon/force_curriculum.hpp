#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>

#include <Eigen/Dense>

#include "falcon/kinematics.hpp"
#include "falcon/rng.hpp"

namespace falcon {

/// Per-axis clipping box applied on top of the torque-derived bounds.
struct ClipBox {
  Eigen::Vector3d lo;
  Eigen::Vector3d hi;

  // Presets from the force-range study: the narrow box is the training
  // default, the wide box is the ablation configuration.
  static ClipBox narrow() { return {{-50.0, -50.0, -60.0}, {50.0, 50.0, 5.0}}; }
  static ClipBox wide() { return {{-100.0, -100.0, -100.0}, {100.0, 100.0, 5.0}}; }
  static ClipBox zero() { return {Eigen::Vector3d::Zero(), Eigen::Vector3d::Zero()}; }

  bool contains_zero() const {
    return (lo.array() <= 0.0).all() && (hi.array() >= 0.0).all();
  }
};

/// Admissible per-axis force interval at one pose and application point,
/// before and after clipping.
struct ForceEnvelope {
  Eigen::Vector3d f_min;     // torque-derived lower bounds (<= 0)
  Eigen::Vector3d f_max;     // torque-derived upper bounds (>= 0)
  Eigen::Vector3d clip_min;  // clip box
  Eigen::Vector3d clip_max;

  Eigen::Vector3d clipped_min() const { return f_min.cwiseMax(clip_min); }
  Eigen::Vector3d clipped_max() const { return f_max.cwiseMin(clip_max); }
};

inline bool gravity_feasible(const Eigen::VectorXd& tau_limit,
                             const Eigen::VectorXd& tau_gravity) {
  return (tau_gravity.array().abs() <= tau_limit.array()).all();
}

/// Element-wise admissible force bounds from the joint torque budget:
///   f_max_i = min_j (tau_lim_j - tau_g_j) / (|J_ij| + eps)
///   f_min_i = max_j (-tau_lim_j - tau_g_j) / (|J_ij| + eps)
/// J is the 3 x m point Jacobian (rows x,y,z; columns joints).
inline ForceEnvelope admissible_bounds(const Eigen::Matrix3Xd& jacobian,
                                       const Eigen::VectorXd& tau_limit,
                                       const Eigen::VectorXd& tau_gravity,
                                       double epsilon, const ClipBox& clip) {
  if ((tau_limit.array() < 0.0).any()) {
    throw std::invalid_argument("torque limits must be nonnegative");
  }
  if (!gravity_feasible(tau_limit, tau_gravity)) {
    throw std::domain_error("gravity torque exceeds torque limits; pose infeasible");
  }
  ForceEnvelope env;
  env.clip_min = clip.lo;
  env.clip_max = clip.hi;
  for (int i = 0; i < 3; ++i) {
    double fmax = std::numeric_limits<double>::infinity();
    double fmin = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < jacobian.cols(); ++j) {
      double denom = std::abs(jacobian(i, j)) + epsilon;
      fmax = std::min(fmax, (tau_limit[j] - tau_gravity[j]) / denom);
      fmin = std::max(fmin, (-tau_limit[j] - tau_gravity[j]) / denom);
    }
    env.f_max[i] = fmax;
    env.f_min[i] = fmin;
  }
  return env;
}

/// Ablation envelope: the clip box itself, no torque awareness.
inline ForceEnvelope naive_envelope(const ClipBox& clip) {
  return {clip.lo, clip.hi, clip.lo, clip.hi};
}

/// Dirichlet axis-ratio sample; nonnegative, sums to one.
inline Eigen::Vector3d sample_ratios(Rng& rng, const Eigen::Vector3d& concentration) {
  if ((concentration.array() <= 0.0).any()) {
    throw std::invalid_argument("Dirichlet concentration must be strictly positive");
  }
  return rng.dirichlet3(concentration);
}

/// Per-axis uniform draw from the ratio-scaled clipped envelope.
inline Eigen::Vector3d sample_force(Rng& rng, const ForceEnvelope& envelope,
                                    const Eigen::Vector3d& ratios) {
  Eigen::Vector3d lo = envelope.clipped_min();
  Eigen::Vector3d hi = envelope.clipped_max();
  Eigen::Vector3d force;
  for (int i = 0; i < 3; ++i) {
    force[i] = rng.uniform(ratios[i] * lo[i], ratios[i] * hi[i]);
  }
  return force;
}

struct FeasibilityProjection {
  Eigen::Vector3d force;
  double scale = 1.0;
};

/// Largest s in [0, 1] with -tau_lim <= tau_g + s J^T F <= tau_lim, applied
/// to F. The per-axis bounds do not guarantee joint feasibility of a combined
/// force once tau_g is nonzero, so every applied force passes through here.
inline FeasibilityProjection project_feasible(const Eigen::Matrix3Xd& jacobian,
                                              const Eigen::VectorXd& tau_limit,
                                              const Eigen::VectorXd& tau_gravity,
                                              const Eigen::Vector3d& force) {
  Eigen::VectorXd induced = jacobian.transpose() * force;
  double s = 1.0;
  for (int j = 0; j < induced.size(); ++j) {
    double c = induced[j];
    if (c == 0.0) continue;
    double limit = (c > 0.0) ? (tau_limit[j] - tau_gravity[j]) / c
                             : (-tau_limit[j] - tau_gravity[j]) / c;
    s = std::min(s, std::max(0.0, limit));
  }
  return {s * force, s};
}

struct CurriculumConfig {
  double promote_threshold = 0.25;  // window-mean upper tracking error (rad)
  double demote_threshold = 0.5;
  double step_size = 0.05;
  int window = 50;                  // episodes
  double filter_beta = 0.9;
  double epsilon = 1e-6;            // Eq. 4 division guard
  Eigen::Vector3d dirichlet_concentration = Eigen::Vector3d::Ones();
  ClipBox clip = ClipBox::narrow();
  double resample_min_seconds = 2.0;
  double resample_max_seconds = 5.0;
  double walking_deadband = 0.05;   // m/s commanded speed
};

/// Training-wide curriculum state: the global force scale and the success
/// window that gates it. Filter states live with the environment instances.
struct CurriculumState {
  double alpha_g = 0.0;
  std::deque<double> success_window;
};

/// Success-gated schedule: promote when the window-mean tracking error is low,
/// demote when it is high, clamp to [0, 1]. The window is cleared after every
/// change so each decision uses fresh episodes.
inline void update_alpha(CurriculumState& state, double episode_error,
                         const CurriculumConfig& cfg) {
  state.success_window.push_back(episode_error);
  if (static_cast<int>(state.success_window.size()) > cfg.window) {
    state.success_window.pop_front();
  }
  if (static_cast<int>(state.success_window.size()) < cfg.window) return;
  double mean = 0.0;
  for (double e : state.success_window) mean += e;
  mean /= static_cast<double>(state.success_window.size());
  if (mean < cfg.promote_threshold) {
    state.alpha_g = std::min(1.0, state.alpha_g + cfg.step_size);
    state.success_window.clear();
  } else if (mean > cfg.demote_threshold) {
    state.alpha_g = std::max(0.0, state.alpha_g - cfg.step_size);
    state.success_window.clear();
  }
}

/// First-order low-pass: out = beta * previous + (1 - beta) * target.
inline Eigen::Vector3d filter_force(Eigen::Vector3d& state, const Eigen::Vector3d& target,
                                    double beta) {
  state = beta * state + (1.0 - beta) * target;
  return state;
}

/// During walking, planar force components are aimed opposite the commanded
/// velocity with unchanged planar magnitude; z passes through. Below the
/// dead-band the force is returned unchanged.
inline Eigen::Vector3d walking_projection(const Eigen::Vector3d& force,
                                          const Eigen::Vector2d& commanded_planar_velocity,
                                          double deadband = 0.05) {
  double speed = commanded_planar_velocity.norm();
  if (speed <= deadband) return force;
  Eigen::Vector2d dir = commanded_planar_velocity / speed;
  double planar_mag = force.head<2>().norm();
  Eigen::Vector3d out;
  out.head<2>() = -dir * planar_mag;
  out[2] = force[2];
  return out;
}

/// Point on the segment from the wrist joint origin to the distal marker.
inline Eigen::Vector3d application_point(const ArmKinematics& fk, double parameter) {
  return fk.wrist_origin() + parameter * (fk.ee_distal_point - fk.wrist_origin());
}

inline Eigen::Vector3d sample_application_point(Rng& rng, const RobotModel& model,
                                                const ArmPose& pose,
                                                const FramePlacement& base =
                                                    FramePlacement::identity()) {
  return application_point(forward_kinematics(model, pose, base), rng.uniform01());
}

}  // namespace falcon
