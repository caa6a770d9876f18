#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "falcon/force_curriculum.hpp"
#include "falcon/kinematics.hpp"
#include "falcon/rng.hpp"
#include "falcon/robot_model.hpp"

namespace falcon {

// ---------------------------------------------------------------------------
// Goals
// ---------------------------------------------------------------------------

struct GoalCommandLower {
  Eigen::Vector2d lin_vel_xy = Eigen::Vector2d::Zero();  // heading frame, m/s
  double ang_vel_yaw = 0.0;                              // rad/s
  bool stance = false;
  double root_height = 0.0;  // m
  double waist_yaw = 0.0;    // rad, offset on top of the integrated yaw ref
};

struct GoalCommandUpper {
  Eigen::VectorXd target_joints;  // n_u, rad
};

/// Minimum-jerk interpolation between two upper-body waypoints; position and
/// velocity boundary conditions are zero-velocity at both ends.
struct MinJerkSegment {
  Eigen::VectorXd q0, q1;
  double duration = 1.0;

  static double blend(double s) { return s * s * s * (10.0 + s * (-15.0 + 6.0 * s)); }
  static double blend_rate(double s) { return 30.0 * s * s * (1.0 - s) * (1.0 - s); }

  Eigen::VectorXd position(double t) const {
    double s = std::clamp(t / duration, 0.0, 1.0);
    return q0 + blend(s) * (q1 - q0);
  }
  Eigen::VectorXd velocity(double t) const {
    double s = std::clamp(t / duration, 0.0, 1.0);
    return (q1 - q0) * (blend_rate(s) / duration);
  }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Reward expressions and weights. The task rows carry the published
/// weights; the regularization set is artifact-added and kept separate so it
/// can be disabled.
struct RewardWeights {
  // penalties
  double hip_pos = -2.5;
  double negative_knee = -1.0;   // proxy: base-height undershoot indicator
  double stance_tap_feet = -5.0; // proxy: stance longitudinal drift
  double stance_root = -5.0;     // proxy: stance lateral drift
  double stand_still = -0.15;    // proxy: unloaded support
  double ankle_roll = -2.0;      // proxy: base roll magnitude
  // task rewards
  double lin_vel_x = 2.0;
  double lin_vel_y = 1.5;
  double ang_vel = 4.0;
  double walk_height = 2.0;
  double waist_dofs = 2.0;
  double upper_dofs = 4.0;
  // regularization (artifact-added)
  double action_rate = -0.01;
  double torque = -1e-5;
  double joint_limit = -5.0;
  double alive = 0.5;
};

enum class ForceMode { off, torque_aware, naive };

struct EnvConfig {
  double dt = 0.005;        // physics substep, s
  int decimation = 4;       // policy period = dt * decimation (50 Hz)
  double episode_seconds = 20.0;

  // command sampling
  Eigen::Vector2d max_lin_vel{1.0, 0.5};
  double max_ang_vel = 0.8;
  double stance_probability = 0.3;
  double waist_yaw_range = 0.6;
  double height_box_lo = 0.4, height_box_hi = 1.2;      // invariant box, x default
  double sample_height_lo = 0.8, sample_height_hi = 1.1;  // sampling range, x default
  double command_resample_min = 5.0, command_resample_max = 10.0;
  double waypoint_min_seconds = 1.0, waypoint_max_seconds = 3.0;

  // actions
  double action_scale_upper = 0.5;  // rad around default
  double action_scale_lin = 1.0;    // m/s
  double action_scale_yaw = 1.0;    // rad/s

  // surrogate base: twist-tracking wrench with limits, unilateral support
  double base_kv_xy = 300.0;          // N/(m/s)
  double base_kv_z = 400.0;
  double base_kw_yaw = 8.0;           // N*m/(rad/s)
  double base_force_limit_xy = 150.0; // N
  double base_force_limit_z = 420.0;  // N, support can only push
  double base_torque_limit_yaw = 20.0;
  double tilt_stiffness_scale = 2.2;  // x (m g h), must exceed 1
  double tilt_damping_ratio = 0.7;
  double ground_height = 0.05;

  // termination
  double fall_height_frac = 0.3;
  double fall_tilt = 1.0;  // rad on the roll/pitch proxy

  double reset_joint_noise = 0.05;
  Eigen::Vector3d gravity{0.0, 0.0, -9.81};

  // domain randomization and pushes
  bool domain_randomization = true;
  bool push_enabled = true;
  double push_interval = 5.0;  // s
  double push_speed = 1.0;     // m/s planar delta

  ForceMode force_mode = ForceMode::torque_aware;
  CurriculumConfig curriculum;

  bool proxy_penalties = true;  // surrogate-mapped penalty rows
  RewardWeights rewards;
};

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

constexpr int kHistory = 5;

/// Proprioceptive observation: five-step histories, oldest first.
struct Observation {
  std::array<Eigen::VectorXd, kHistory> joint_pos;
  std::array<Eigen::VectorXd, kHistory> joint_vel;
  std::array<Eigen::Vector3d, kHistory> root_ang_vel;
  std::array<Eigen::Vector3d, kHistory> projected_gravity;
  std::array<Eigen::VectorXd, kHistory> prev_action;

  Eigen::VectorXd flatten() const {
    const int n = static_cast<int>(joint_pos[0].size());
    Eigen::VectorXd out(kHistory * (3 * n + 6));
    int at = 0;
    for (int h = 0; h < kHistory; ++h) { out.segment(at, n) = joint_pos[h]; at += n; }
    for (int h = 0; h < kHistory; ++h) { out.segment(at, n) = joint_vel[h]; at += n; }
    for (int h = 0; h < kHistory; ++h) { out.segment(at, 3) = root_ang_vel[h]; at += 3; }
    for (int h = 0; h < kHistory; ++h) { out.segment(at, 3) = projected_gravity[h]; at += 3; }
    for (int h = 0; h < kHistory; ++h) { out.segment(at, n) = prev_action[h]; at += n; }
    return out;
  }
};

/// Critic-only state: exact, never fed to the actors.
struct PrivilegedObservation {
  Eigen::Vector3d root_lin_vel = Eigen::Vector3d::Zero();
  std::array<Eigen::Vector3d, 2> ee_forces = {Eigen::Vector3d::Zero(),
                                              Eigen::Vector3d::Zero()};

  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(9);
    out << root_lin_vel, ee_forces[0], ee_forces[1];
    return out;
  }
};

// ---------------------------------------------------------------------------
// Domain randomization
// ---------------------------------------------------------------------------

struct DomainRandomizationDraw {
  double friction_scale = 1.0;
  double base_mass_delta = 0.0;               // kg
  std::vector<double> link_mass_scale;        // per link, chain order
  std::vector<double> kp_scale, kd_scale;     // per joint, chain order
  int delay_substeps = 0;                     // control delay / dt

  static DomainRandomizationDraw identity(const RobotModel& model) {
    DomainRandomizationDraw d;
    int joints = model.upper_dof_count();
    d.link_mass_scale.assign(joints, 1.0);
    d.kp_scale.assign(joints, 1.0);
    d.kd_scale.assign(joints, 1.0);
    return d;
  }
};

inline DomainRandomizationDraw randomize(Rng& rng, const RobotModel& model,
                                         const EnvConfig& cfg) {
  DomainRandomizationDraw d = DomainRandomizationDraw::identity(model);
  d.friction_scale = rng.uniform(0.5, 1.25);
  for (auto& s : d.link_mass_scale) s = rng.uniform(0.9, 1.2);
  d.base_mass_delta = rng.uniform(-1.0, 3.0);
  for (auto& s : d.kp_scale) s = rng.uniform(0.9, 1.1);
  for (auto& s : d.kd_scale) s = rng.uniform(0.9, 1.1);
  double delay_ms = rng.uniform(0.0, 20.0);
  d.delay_substeps = static_cast<int>(delay_ms / (cfg.dt * 1000.0));  // floor
  return d;
}

// ---------------------------------------------------------------------------
// Goal sampling
// ---------------------------------------------------------------------------

inline GoalCommandLower sample_lower_command(Rng& rng, const EnvConfig& cfg,
                                             const RobotModel& model) {
  GoalCommandLower g;
  g.stance = rng.uniform01() < cfg.stance_probability;
  if (!g.stance && model.lower_dof_count > 0) {
    g.lin_vel_xy[0] = rng.uniform(-cfg.max_lin_vel[0], cfg.max_lin_vel[0]);
    g.lin_vel_xy[1] = rng.uniform(-cfg.max_lin_vel[1], cfg.max_lin_vel[1]);
    g.ang_vel_yaw = rng.uniform(-cfg.max_ang_vel, cfg.max_ang_vel);
  }
  g.root_height = model.base.default_height *
                  rng.uniform(cfg.sample_height_lo, cfg.sample_height_hi);
  g.waist_yaw = rng.uniform(-cfg.waist_yaw_range, cfg.waist_yaw_range);
  return g;
}

inline Eigen::VectorXd sample_upper_waypoint(Rng& rng, const RobotModel& model) {
  Eigen::VectorXd waypoint(model.upper_dof_count());
  int at = 0;
  for (const auto& arm : model.arms) {
    for (const auto& seg : arm.segments) {
      waypoint[at++] = rng.uniform(seg.joint.position_lower, seg.joint.position_upper);
    }
  }
  return waypoint;
}

/// Procedural upper-body reference: min-jerk segments between within-limit
/// waypoints (stands in for retargeted motion data).
class UpperGoalTrajectory {
 public:
  void start(Rng& rng, const EnvConfig& cfg, const RobotModel& model,
             const Eigen::VectorXd& initial) {
    segment_.q0 = initial;
    segment_.q1 = sample_upper_waypoint(rng, model);
    segment_.duration = rng.uniform(cfg.waypoint_min_seconds, cfg.waypoint_max_seconds);
    time_ = 0.0;
  }

  void advance(Rng& rng, const EnvConfig& cfg, const RobotModel& model, double dt) {
    time_ += dt;
    while (time_ >= segment_.duration) {
      time_ -= segment_.duration;
      segment_.q0 = segment_.q1;
      segment_.q1 = sample_upper_waypoint(rng, model);
      segment_.duration = rng.uniform(cfg.waypoint_min_seconds, cfg.waypoint_max_seconds);
    }
  }

  Eigen::VectorXd target() const { return segment_.position(time_); }
  const MinJerkSegment& segment() const { return segment_; }

 private:
  MinJerkSegment segment_;
  double time_ = 0.0;
};

/// One draw of the episodic goal pair.
inline std::pair<GoalCommandLower, UpperGoalTrajectory> sample_goals(
    Rng& rng, const EnvConfig& cfg, const RobotModel& model,
    const Eigen::VectorXd& initial_upper) {
  GoalCommandLower lower = sample_lower_command(rng, cfg, model);
  UpperGoalTrajectory upper;
  upper.start(rng, cfg, model, initial_upper);
  return {lower, upper};
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

struct RewardTerms {
  std::vector<std::pair<std::string, double>> lower;
  std::vector<std::pair<std::string, double>> upper;

  double sum_lower() const {
    double s = 0.0;
    for (const auto& [_, v] : lower) s += v;
    return s;
  }
  double sum_upper() const {
    double s = 0.0;
    for (const auto& [_, v] : upper) s += v;
    return s;
  }
  double term(const std::string& name) const {
    for (const auto& [k, v] : lower)
      if (k == name) return v;
    for (const auto& [k, v] : upper)
      if (k == name) return v;
    throw std::out_of_range("no reward term named " + name);
  }
};

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

struct StepResult {
  Observation obs;
  PrivilegedObservation priv;
  double reward_lower = 0.0;
  double reward_upper = 0.0;
  bool done = false;
  RewardTerms terms;
};

struct EpisodeSummary {
  double mean_upper_error = 0.0;     // rad, joint-averaged |q - q*|
  double mean_root_error = 0.0;      // combined lin (m/s) + ang (rad/s) channels
  double mean_root_lin_error = 0.0;  // m/s, planar channels only
  double mean_root_ang_error = 0.0;  // rad/s
  double mean_feasibility_scale = 1.0;
  bool fell = false;
  int steps = 0;
};

// The per-episode trajectory dump (attach_recorder) is a whitespace-columnar
// text format: one comment header carrying the config hash, one column-name
// row, then one row per control step.

class DeskEnv {
 public:
  DeskEnv(RobotModel model, EnvConfig cfg, std::uint64_t seed)
      : model_(std::move(model)), cfg_(cfg), rng_(seed) {
    if (cfg_.tilt_stiffness_scale <= 1.0) {
      throw std::invalid_argument("tilt_stiffness_scale must exceed 1 (upright stability)");
    }
    if (!cfg_.curriculum.clip.contains_zero()) {
      throw std::invalid_argument("force clip box must contain zero");
    }
    n_lower_ = model_.lower_dof_count;
    n_upper_ = model_.upper_dof_count();
    n_ = n_lower_ + n_upper_;
    draw_ = DomainRandomizationDraw::identity(model_);
    reset();
  }

  const RobotModel& model() const { return model_; }
  const EnvConfig& config() const { return cfg_; }
  int action_size() const { return n_; }
  int lower_action_size() const { return n_lower_; }
  int upper_action_size() const { return n_upper_; }

  void set_alpha(double a) { alpha_ = std::clamp(a, 0.0, 1.0); }
  double alpha() const { return alpha_; }

  Observation reset() {
    episode_steps_ = 0;
    upper_error_accum_ = 0.0;
    root_error_accum_ = 0.0;
    root_lin_error_accum_ = 0.0;
    root_ang_error_accum_ = 0.0;
    feasibility_accum_ = 0.0;
    fell_ = false;
    infeasible_pose_count_ = 0;

    draw_ = cfg_.domain_randomization ? randomize(rng_, model_, cfg_)
                                      : DomainRandomizationDraw::identity(model_);

    base_pos_ = Eigen::Vector3d(0.0, 0.0, model_.base.default_height);
    base_vel_.setZero();
    yaw_ = 0.0;
    yaw_rate_ = 0.0;
    tilt_.setZero();
    tilt_rate_.setZero();
    anchor_pos_ = base_pos_.head<2>();
    anchor_yaw_ = 0.0;
    yaw_ref_ = 0.0;

    for (int a = 0; a < arm_count(); ++a) {
      q_[a] = model_.arm(a).default_positions();
      for (int j = 0; j < q_[a].size(); ++j) {
        q_[a][j] += rng_.uniform(-cfg_.reset_joint_noise, cfg_.reset_joint_noise);
        q_[a][j] = std::clamp(q_[a][j], model_.arm(a).segments[j].joint.position_lower,
                              model_.arm(a).segments[j].joint.position_upper);
      }
      dq_[a].setZero(q_[a].size());
      tau_act_[a].setZero(q_[a].size());
      tau_ff_[a].setZero(q_[a].size());
    }
    upper_traj_pinned_ = false;

    lower_goal_ = sample_lower_command(rng_, cfg_, model_);
    command_timer_ = rng_.uniform(cfg_.command_resample_min, cfg_.command_resample_max);
    upper_traj_.start(rng_, cfg_, model_, upper_positions());
    upper_ref_now_ = upper_target();

    for (auto& ch : force_) {
      ch.resample_timer = 0.0;  // resample on the first step
      ch.ratios = Eigen::Vector3d::Constant(1.0 / 3.0);
      ch.raw_target.setZero();
      ch.application_parameter = 1.0;
      ch.filter_state.setZero();
      ch.applied.setZero();
      ch.point.setZero();
      ch.feasibility_scale = 1.0;
      ch.override.reset();
    }
    push_timer_ = cfg_.push_interval;

    prev_action_ = Eigen::VectorXd::Zero(n_);
    held_action_ = Eigen::VectorXd::Zero(n_);

    // histories filled with the initial measurement, actions zero
    Measurement m = measure();
    for (int h = 0; h < kHistory; ++h) {
      obs_.joint_pos[h] = m.joint_pos;
      obs_.joint_vel[h] = m.joint_vel;
      obs_.root_ang_vel[h] = m.root_ang_vel;
      obs_.projected_gravity[h] = m.projected_gravity;
      obs_.prev_action[h] = Eigen::VectorXd::Zero(n_);
    }
    return obs_;
  }

  StepResult step(const Eigen::VectorXd& action) {
    if (action.size() != n_ || !action.allFinite()) {
      throw std::runtime_error("DeskEnv::step: action must be finite with size " +
                               std::to_string(n_));
    }

    double dt_control = cfg_.dt * cfg_.decimation;

    // command resampling (also re-anchors the stance frame)
    command_timer_ -= dt_control;
    if (command_timer_ <= 0.0) {
      lower_goal_ = sample_lower_command(rng_, cfg_, model_);
      command_timer_ = rng_.uniform(cfg_.command_resample_min, cfg_.command_resample_max);
      anchor_pos_ = base_pos_.head<2>();
      anchor_yaw_ = yaw_;
      yaw_ref_ = yaw_;
    }
    if (!upper_traj_pinned_) upper_traj_.advance(rng_, cfg_, model_, dt_control);
    yaw_ref_ += lower_goal_.ang_vel_yaw * dt_control;

    update_forces(dt_control);

    // physics substeps; control delay holds the previous action
    upper_ref_now_ = upper_target();
    for (int sub = 0; sub < cfg_.decimation; ++sub) {
      const Eigen::VectorXd& a = (sub < draw_.delay_substeps) ? held_action_ : action;
      substep(a);
    }
    held_action_ = action;

    Measurement m = measure();
    push_history(m, action);

    RewardTerms terms = compute_rewards(action, prev_action_);
    prev_action_ = action;

    ++episode_steps_;
    upper_error_accum_ += (upper_positions() - upper_target()).cwiseAbs().mean();
    if (n_lower_ > 0) {
      Eigen::Vector2d v_heading = rotate_planar(base_vel_.head<2>(), -yaw_);
      double ex = std::abs(v_heading[0] - lower_goal_.lin_vel_xy[0]);
      double ey = std::abs(v_heading[1] - lower_goal_.lin_vel_xy[1]);
      double ew = std::abs(yaw_rate_ - lower_goal_.ang_vel_yaw);
      root_lin_error_accum_ += 0.5 * (ex + ey);
      root_ang_error_accum_ += ew;
      root_error_accum_ += (ex + ey + ew) / 3.0;
    }
    for (int a = 0; a < arm_count(); ++a) {
      feasibility_accum_ += force_[a].feasibility_scale / arm_count();
    }

    bool fall = false;
    if (n_lower_ > 0) {
      fall = base_pos_.z() < cfg_.fall_height_frac * model_.base.default_height ||
             tilt_.cwiseAbs().maxCoeff() > cfg_.fall_tilt;
    }
    bool timeout = episode_steps_ >= max_episode_steps();
    fell_ = fall;

    StepResult result;
    result.obs = obs_;
    result.priv = privileged();
    result.terms = terms;
    result.reward_lower = terms.sum_lower();
    result.reward_upper = terms.sum_upper();
    result.done = fall || timeout;
    if (recorder_) record_step(action, result);
    return result;
  }

  int max_episode_steps() const {
    return static_cast<int>(cfg_.episode_seconds / (cfg_.dt * cfg_.decimation));
  }

  EpisodeSummary episode_summary() const {
    EpisodeSummary s;
    s.steps = episode_steps_;
    s.fell = fell_;
    if (episode_steps_ > 0) {
      s.mean_upper_error = upper_error_accum_ / episode_steps_;
      s.mean_root_error = root_error_accum_ / episode_steps_;
      s.mean_root_lin_error = root_lin_error_accum_ / episode_steps_;
      s.mean_root_ang_error = root_ang_error_accum_ / episode_steps_;
      s.mean_feasibility_scale = feasibility_accum_ / episode_steps_;
    }
    return s;
  }

  // ---- state accessors -----------------------------------------------------

  const Observation& observation() const { return obs_; }
  PrivilegedObservation privileged() const {
    PrivilegedObservation p;
    p.root_lin_vel = base_vel_;
    for (int a = 0; a < arm_count(); ++a) p.ee_forces[a] = force_[a].applied;
    return p;
  }

  const Eigen::Vector3d& base_position() const { return base_pos_; }
  const Eigen::Vector3d& base_velocity() const { return base_vel_; }
  double base_yaw() const { return yaw_; }
  double base_yaw_rate() const { return yaw_rate_; }
  const Eigen::Vector2d& base_tilt() const { return tilt_; }
  const Eigen::VectorXd& arm_positions(int arm) const { return q_[arm]; }
  const Eigen::VectorXd& arm_velocities(int arm) const { return dq_[arm]; }
  const Eigen::VectorXd& arm_actuator_torques(int arm) const { return tau_act_[arm]; }
  Eigen::Vector3d applied_force(int arm) const { return force_[arm].applied; }
  double feasibility_scale(int arm) const { return force_[arm].feasibility_scale; }
  Eigen::Vector3d application_point_world(int arm) const { return force_[arm].point; }
  long infeasible_pose_count() const { return infeasible_pose_count_; }
  const GoalCommandLower& lower_goal() const { return lower_goal_; }
  Eigen::VectorXd upper_target() const {
    return upper_traj_pinned_ ? upper_traj_override_ : upper_traj_.target();
  }
  const UpperGoalTrajectory& upper_trajectory() const { return upper_traj_; }
  const DomainRandomizationDraw& randomization() const { return draw_; }
  int arm_count() const { return static_cast<int>(model_.arms.size()); }

  Eigen::VectorXd upper_positions() const {
    Eigen::VectorXd q(n_upper_);
    int at = 0;
    for (int a = 0; a < arm_count(); ++a) {
      q.segment(at, q_[a].size()) = q_[a];
      at += static_cast<int>(q_[a].size());
    }
    return q;
  }
  Eigen::VectorXd upper_velocities() const {
    Eigen::VectorXd dq(n_upper_);
    int at = 0;
    for (int a = 0; a < arm_count(); ++a) {
      dq.segment(at, dq_[a].size()) = dq_[a];
      at += static_cast<int>(dq_[a].size());
    }
    return dq;
  }

  double heading_error_for_waist() const { return yaw_ - (yaw_ref_ + lower_goal_.waist_yaw); }

  // ---- test and evaluation hooks --------------------------------------------

  void set_lower_command(const GoalCommandLower& goal) {
    lower_goal_ = goal;
    anchor_pos_ = base_pos_.head<2>();
    anchor_yaw_ = yaw_;
    yaw_ref_ = yaw_;
    command_timer_ = 1e9;  // pin until explicitly changed
  }
  void pin_upper_target(const Eigen::VectorXd& target) {
    upper_traj_pinned_ = true;
    upper_traj_override_ = target;
    upper_ref_now_ = target;
  }
  void override_applied_force(int arm, const Eigen::Vector3d& f) {
    force_[arm].override = f;
  }
  void clear_force_override(int arm) { force_[arm].override.reset(); }
  void debug_set_base_height(double z) { base_pos_.z() = z; }
  void debug_set_arm_velocity(int arm, const Eigen::VectorXd& dq) { dq_[arm] = dq; }
  void debug_feedforward(int arm, const Eigen::VectorXd& tau) { tau_ff_[arm] = tau; }

  /// Streams a columnar trajectory dump of every subsequent step.
  void attach_recorder(std::ostream* out, const std::string& config_hash) {
    recorder_ = out;
    recorder_hash_ = config_hash;
    recorder_header_done_ = false;
  }

  /// Exposed for the reward unit tests; step() uses exactly this.
  RewardTerms compute_rewards(const Eigen::VectorXd& action,
                              const Eigen::VectorXd& prev_action) const {
    const RewardWeights& w = cfg_.rewards;
    RewardTerms t;

    Eigen::VectorXd q_u = upper_positions();
    Eigen::VectorXd q_ref = upper_target();

    if (n_lower_ > 0) {
      Eigen::Vector2d v_heading = rotate_planar(base_vel_.head<2>(), -yaw_);
      double vx_err = std::abs(v_heading[0] - lower_goal_.lin_vel_xy[0]);
      double vy_err = std::abs(v_heading[1] - lower_goal_.lin_vel_xy[1]);
      double w_err = std::abs(yaw_rate_ - lower_goal_.ang_vel_yaw);
      double h_err = std::abs(lower_goal_.root_height - base_pos_.z());
      double waist_err = heading_error_for_waist();

      t.lower.emplace_back("lin_vel_x", w.lin_vel_x * std::exp(-4.0 * vx_err));
      t.lower.emplace_back("lin_vel_y", w.lin_vel_y * std::exp(-4.0 * vy_err));
      t.lower.emplace_back("ang_vel", w.ang_vel * std::exp(-4.0 * w_err));
      t.lower.emplace_back("walk_height", w.walk_height * std::exp(-h_err / 0.05));
      t.lower.emplace_back("waist_dofs",
                           w.waist_dofs * std::exp(-(waist_err * waist_err) / 0.05));

      if (cfg_.proxy_penalties) {
        t.lower.emplace_back("hip_pos", w.hip_pos * tilt_.norm());
        t.lower.emplace_back(
            "negative_knee",
            w.negative_knee * (base_pos_.z() < lower_goal_.root_height - 0.1 ? 1.0 : 0.0));
        Eigen::Vector2d drift =
            rotate_planar(base_pos_.head<2>() - anchor_pos_, -anchor_yaw_);
        double stance = lower_goal_.stance ? 1.0 : 0.0;
        t.lower.emplace_back("stance_tap_feet",
                             w.stance_tap_feet * stance * std::abs(drift[0]));
        t.lower.emplace_back("stance_root", w.stance_root * stance * std::abs(drift[1]));
        t.lower.emplace_back("stand_still",
                             w.stand_still * (last_support_force_ < 1.0 ? 1.0 : 0.0));
        t.lower.emplace_back("ankle_roll", w.ankle_roll * std::abs(tilt_[0]));
      }
      t.lower.emplace_back("alive", w.alive);
      Eigen::VectorXd da_l = action.head(n_lower_) - prev_action.head(n_lower_);
      t.lower.emplace_back("action_rate", w.action_rate * da_l.squaredNorm());
    }

    double upper_err2 = (q_u - q_ref).squaredNorm();
    t.upper.emplace_back("upper_dofs", w.upper_dofs * std::exp(-upper_err2 / 0.01));
    Eigen::VectorXd da_u = action.tail(n_upper_) - prev_action.tail(n_upper_);
    t.upper.emplace_back("action_rate", w.action_rate * da_u.squaredNorm());
    double tau2 = 0.0;
    for (int a = 0; a < arm_count(); ++a) tau2 += tau_act_[a].squaredNorm();
    t.upper.emplace_back("torque", w.torque * tau2);
    double limit_violation = 0.0;
    int at = 0;
    for (int a = 0; a < arm_count(); ++a) {
      for (int j = 0; j < q_[a].size(); ++j, ++at) {
        const JointSpec& spec = model_.arm(a).segments[j].joint;
        limit_violation += std::max(0.0, q_[a][j] - spec.position_upper) +
                           std::max(0.0, spec.position_lower - q_[a][j]);
      }
    }
    t.upper.emplace_back("joint_limit", w.joint_limit * limit_violation);
    return t;
  }

  Rng& rng() { return rng_; }

 private:
  struct ForceChannel {
    double resample_timer = 0.0;
    Eigen::Vector3d ratios = Eigen::Vector3d::Constant(1.0 / 3.0);
    Eigen::Vector3d raw_target = Eigen::Vector3d::Zero();
    double application_parameter = 1.0;
    Eigen::Vector3d filter_state = Eigen::Vector3d::Zero();
    Eigen::Vector3d applied = Eigen::Vector3d::Zero();
    Eigen::Vector3d point = Eigen::Vector3d::Zero();
    double feasibility_scale = 1.0;
    std::optional<Eigen::Vector3d> override;
  };

  struct Measurement {
    Eigen::VectorXd joint_pos, joint_vel;
    Eigen::Vector3d root_ang_vel, projected_gravity;
  };

  static Eigen::Vector2d rotate_planar(const Eigen::Vector2d& v, double angle) {
    double c = std::cos(angle), s = std::sin(angle);
    return {c * v[0] - s * v[1], s * v[0] + c * v[1]};
  }

  FramePlacement base_placement() const {
    FramePlacement p;
    p.translation = base_pos_;
    p.rotation = (Eigen::AngleAxisd(yaw_, Eigen::Vector3d::UnitZ()) *
                  Eigen::AngleAxisd(tilt_[1], Eigen::Vector3d::UnitY()) *
                  Eigen::AngleAxisd(tilt_[0], Eigen::Vector3d::UnitX()))
                     .toRotationMatrix();
    return p;
  }

  /// Force pipeline, run once per control step. Envelope and Jacobian use the
  /// nominal model (the controller's knowledge); dynamics use randomized
  /// masses.
  void update_forces(double dt_control) {
    for (int a = 0; a < arm_count(); ++a) {
      ForceChannel& ch = force_[a];
      ArmPose pose{a, q_[a]};
      ArmKinematics fk = forward_kinematics(model_, pose, base_placement());
      ch.point = application_point(fk, ch.application_parameter);

      if (ch.override) {
        ch.applied = *ch.override;
        ch.feasibility_scale = 1.0;
        continue;
      }
      if (cfg_.force_mode == ForceMode::off) {
        ch.applied.setZero();
        ch.feasibility_scale = 1.0;
        continue;
      }

      const ArmChain& arm = model_.arm(a);
      Eigen::VectorXd tau_lim = arm.torque_limits();
      Eigen::VectorXd tau_g = gravity_torque(model_, pose, cfg_.gravity, base_placement());
      bool feasible_pose = gravity_feasible(tau_lim, tau_g);

      ch.resample_timer -= dt_control;
      if (ch.resample_timer <= 0.0) {
        ch.resample_timer =
            rng_.uniform(cfg_.curriculum.resample_min_seconds,
                         cfg_.curriculum.resample_max_seconds);
        ch.ratios = sample_ratios(rng_, cfg_.curriculum.dirichlet_concentration);
        ch.application_parameter = rng_.uniform01();
        ch.point = application_point(fk, ch.application_parameter);
        if (cfg_.force_mode == ForceMode::naive) {
          ch.raw_target = sample_force(rng_, naive_envelope(cfg_.curriculum.clip), ch.ratios);
        } else if (feasible_pose) {
          Eigen::Matrix3Xd jac = point_jacobian(fk, ch.point);
          ForceEnvelope env =
              admissible_bounds(jac, tau_lim, tau_g, cfg_.curriculum.epsilon,
                                cfg_.curriculum.clip);
          ch.raw_target = sample_force(rng_, env, ch.ratios);
        } else {
          ch.raw_target.setZero();
        }
      }

      Eigen::Vector3d target = ch.raw_target;
      if (!lower_goal_.stance) {
        Eigen::Vector2d v_cmd_world = rotate_planar(lower_goal_.lin_vel_xy, yaw_);
        target = walking_projection(target, v_cmd_world, cfg_.curriculum.walking_deadband);
      }
      Eigen::Vector3d filtered =
          filter_force(ch.filter_state, target, cfg_.curriculum.filter_beta);
      Eigen::Vector3d scaled = alpha_ * filtered;

      if (cfg_.force_mode == ForceMode::naive) {
        ch.applied = scaled;  // no feasibility enforcement (ablation arm)
        ch.feasibility_scale = 1.0;
      } else if (!feasible_pose) {
        ch.applied.setZero();
        ch.feasibility_scale = 1.0;
        ++infeasible_pose_count_;
      } else {
        Eigen::Matrix3Xd jac = point_jacobian(fk, ch.point);
        auto proj = project_feasible(jac, tau_lim, tau_g, scaled);
        ch.applied = proj.force;
        ch.feasibility_scale = proj.scale;
      }
    }
  }

  void substep(const Eigen::VectorXd& action) {
    const double dt = cfg_.dt;
    FramePlacement base = base_placement();

    // ---- arms: diagonal-inertia chains with exact gravity and force torque
    int offset = n_lower_;
    for (int a = 0; a < arm_count(); ++a) {
      const ArmChain& arm = model_.arm(a);
      const int nj = arm.joint_count();
      ArmPose pose{a, q_[a]};
      ArmKinematics fk = forward_kinematics(model_, pose, base);
      Eigen::Vector3d point =
          application_point(fk, force_[a].application_parameter);
      force_[a].point = point;  // rigid attachment tracks the moving arm
      Eigen::Matrix3Xd jac = point_jacobian(fk, point);
      Eigen::VectorXd tau_ext = jac.transpose() * force_[a].applied;

      // true gravity load uses the randomized link masses
      Eigen::VectorXd tau_g = Eigen::VectorXd::Zero(nj);
      for (int k = 0; k < nj; ++k) {
        double mass = arm.segments[k].link.mass * link_mass_scale(a, k);
        if (mass == 0.0) continue;
        Eigen::Vector3d com = fk.link_com(model_, a, k);
        tau_g -= link_point_jacobian(fk, k, com).transpose() * (mass * cfg_.gravity);
      }

      for (int j = 0; j < nj; ++j) {
        const JointSpec& spec = arm.segments[j].joint;
        // residual on the commanded reference: zero action tracks the goal
        double target = upper_ref_now_[offset - n_lower_ + j] +
                        cfg_.action_scale_upper * action[offset + j];
        double kp = spec.kp * kp_scale(a, j);
        double kd = spec.kd * kd_scale(a, j);
        double tau_pd = kp * (target - q_[a][j]) - kd * dq_[a][j] + tau_ff_[a][j];
        double tau = std::clamp(tau_pd, -spec.torque_limit, spec.torque_limit);
        tau_act_[a][j] = tau;
        double friction = spec.viscous_friction * draw_.friction_scale;
        double ddq = (tau - tau_g[j] + tau_ext[j] - friction * dq_[a][j]) /
                     spec.effective_inertia;
        dq_[a][j] += ddq * dt;
        q_[a][j] += dq_[a][j] * dt;
      }
      offset += nj;
    }

    if (n_lower_ == 0) return;

    // ---- surrogate base: twist-tracked, force/torque-limited wrench
    Eigen::Vector2d v_cmd_heading(cfg_.action_scale_lin * action[0],
                                  cfg_.action_scale_lin * action[1]);
    Eigen::Vector2d v_cmd_world = rotate_planar(v_cmd_heading, yaw_);
    double vz_cmd = cfg_.action_scale_lin * action[2];
    double wz_cmd = cfg_.action_scale_yaw * action[3];

    double m_total = model_.base.mass + draw_.base_mass_delta;
    int li = 0;
    for (const auto& arm : model_.arms)
      for (const auto& seg : arm.segments) m_total += seg.link.mass * draw_.link_mass_scale[li++];
    double m_nominal = model_.base.mass + model_.total_arm_mass();

    Eigen::Vector2d f_xy = cfg_.base_kv_xy * (v_cmd_world - base_vel_.head<2>());
    if (f_xy.norm() > cfg_.base_force_limit_xy) {
      f_xy *= cfg_.base_force_limit_xy / f_xy.norm();
    }
    // unilateral support: feedforward on the nominal mass, push only
    double f_z = m_nominal * (-cfg_.gravity.z()) +
                 cfg_.base_kv_z * (vz_cmd - base_vel_.z());
    f_z = std::clamp(f_z, 0.0, cfg_.base_force_limit_z);
    last_support_force_ = f_z;

    double m_yaw = std::clamp(cfg_.base_kw_yaw * (wz_cmd - yaw_rate_),
                              -cfg_.base_torque_limit_yaw, cfg_.base_torque_limit_yaw);

    // disturbance wrench: transported EE forces plus their moments
    Eigen::Vector3d f_ext = Eigen::Vector3d::Zero();
    Eigen::Vector3d m_ext = Eigen::Vector3d::Zero();
    for (int a = 0; a < arm_count(); ++a) {
      f_ext += force_[a].applied;
      m_ext += (force_[a].point - base_pos_).cross(force_[a].applied);
    }

    Eigen::Vector3d accel =
        (Eigen::Vector3d(f_xy[0], f_xy[1], f_z) + f_ext) / m_total + cfg_.gravity;
    base_vel_ += accel * dt;
    base_pos_ += base_vel_ * dt;
    if (base_pos_.z() < cfg_.ground_height) {
      base_pos_.z() = cfg_.ground_height;
      base_vel_.z() = std::max(0.0, base_vel_.z());
    }

    double yaw_acc = (m_yaw + m_ext.z()) / model_.base.inertia_diag.z();
    yaw_rate_ += yaw_acc * dt;
    yaw_ += yaw_rate_ * dt;

    // passive roll/pitch proxy: ankle spring-damper against gravity tipping
    double h0 = model_.base.default_height;
    double k_tilt = cfg_.tilt_stiffness_scale * m_total * (-cfg_.gravity.z()) * h0;
    for (int axis = 0; axis < 2; ++axis) {
      double inertia = model_.base.inertia_diag[axis] + m_total * h0 * h0;
      double d_tilt = 2.0 * cfg_.tilt_damping_ratio * std::sqrt(k_tilt * inertia);
      double moment = m_ext[axis];
      double grav_tip = m_total * (-cfg_.gravity.z()) * h0 * std::sin(tilt_[axis]);
      double acc = (moment + grav_tip - k_tilt * tilt_[axis] - d_tilt * tilt_rate_[axis]) /
                   inertia;
      tilt_rate_[axis] += acc * dt;
      tilt_[axis] += tilt_rate_[axis] * dt;
    }

    // push randomization: planar velocity delta at fixed intervals
    if (cfg_.push_enabled) {
      push_timer_ -= dt;
      if (push_timer_ <= 0.0) {
        push_timer_ += cfg_.push_interval;
        base_vel_.head<2>() += cfg_.push_speed * rng_.unit_planar_direction();
      }
    }
  }

  Measurement measure() const {
    Measurement m;
    m.joint_pos.resize(n_);
    m.joint_vel.resize(n_);
    if (n_lower_ > 0) {
      Eigen::Vector2d rel = rotate_planar(base_pos_.head<2>() - anchor_pos_, -anchor_yaw_);
      m.joint_pos[0] = rel[0];
      m.joint_pos[1] = rel[1];
      m.joint_pos[2] = base_pos_.z();
      m.joint_pos[3] = yaw_ - anchor_yaw_;
      Eigen::Vector2d v_heading = rotate_planar(base_vel_.head<2>(), -yaw_);
      m.joint_vel[0] = v_heading[0];
      m.joint_vel[1] = v_heading[1];
      m.joint_vel[2] = base_vel_.z();
      m.joint_vel[3] = yaw_rate_;
    }
    int at = n_lower_;
    for (int a = 0; a < arm_count(); ++a) {
      m.joint_pos.segment(at, q_[a].size()) = q_[a];
      m.joint_vel.segment(at, dq_[a].size()) = dq_[a];
      at += static_cast<int>(q_[a].size());
    }
    m.root_ang_vel = Eigen::Vector3d(tilt_rate_[0], tilt_rate_[1], yaw_rate_);
    m.projected_gravity = base_placement().rotation.transpose() *
                          Eigen::Vector3d(0.0, 0.0, -1.0);
    return m;
  }

  void push_history(const Measurement& m, const Eigen::VectorXd& action) {
    for (int h = 0; h < kHistory - 1; ++h) {
      obs_.joint_pos[h] = obs_.joint_pos[h + 1];
      obs_.joint_vel[h] = obs_.joint_vel[h + 1];
      obs_.root_ang_vel[h] = obs_.root_ang_vel[h + 1];
      obs_.projected_gravity[h] = obs_.projected_gravity[h + 1];
      obs_.prev_action[h] = obs_.prev_action[h + 1];
    }
    obs_.joint_pos[kHistory - 1] = m.joint_pos;
    obs_.joint_vel[kHistory - 1] = m.joint_vel;
    obs_.root_ang_vel[kHistory - 1] = m.root_ang_vel;
    obs_.projected_gravity[kHistory - 1] = m.projected_gravity;
    obs_.prev_action[kHistory - 1] = action;
  }

  void record_step(const Eigen::VectorXd& action, const StepResult& r) {
    std::ostream& out = *recorder_;
    if (!recorder_header_done_) {
      out << "# falcon-trajectory v1 config_hash=" << recorder_hash_
          << " model=" << model_.name << "\n";
      out << "step time px py pz yaw roll pitch vx vy vz yaw_rate";
      for (int j = 0; j < n_upper_; ++j) out << " q" << j;
      for (int j = 0; j < n_upper_; ++j) out << " dq" << j;
      for (int j = 0; j < n_; ++j) out << " a" << j;
      out << " flx fly flz frx fry frz reward_lower reward_upper";
      for (const auto& [name, _] : r.terms.lower) out << " lower_" << name;
      for (const auto& [name, _] : r.terms.upper) out << " upper_" << name;
      out << " done\n";
      recorder_header_done_ = true;
    }
    char buf[32];
    auto put = [&](double v) {
      std::snprintf(buf, sizeof(buf), " %.9g", v);
      out << buf;
    };
    out << episode_steps_;
    put(episode_steps_ * cfg_.dt * cfg_.decimation);
    put(base_pos_[0]);
    put(base_pos_[1]);
    put(base_pos_[2]);
    put(yaw_);
    put(tilt_[0]);
    put(tilt_[1]);
    put(base_vel_[0]);
    put(base_vel_[1]);
    put(base_vel_[2]);
    put(yaw_rate_);
    Eigen::VectorXd q = upper_positions(), dq = upper_velocities();
    for (int j = 0; j < n_upper_; ++j) put(q[j]);
    for (int j = 0; j < n_upper_; ++j) put(dq[j]);
    for (int j = 0; j < n_; ++j) put(action[j]);
    for (int a = 0; a < 2; ++a) {
      Eigen::Vector3d f = a < arm_count() ? force_[a].applied : Eigen::Vector3d::Zero();
      put(f[0]);
      put(f[1]);
      put(f[2]);
    }
    put(r.reward_lower);
    put(r.reward_upper);
    for (const auto& [_, v] : r.terms.lower) put(v);
    for (const auto& [_, v] : r.terms.upper) put(v);
    out << " " << (r.done ? 1 : 0) << "\n";
  }

  double link_mass_scale(int arm, int j) const {
    int idx = 0;
    for (int a = 0; a < arm; ++a) idx += model_.arm(a).joint_count();
    return draw_.link_mass_scale[idx + j];
  }
  double kp_scale(int arm, int j) const {
    int idx = 0;
    for (int a = 0; a < arm; ++a) idx += model_.arm(a).joint_count();
    return draw_.kp_scale[idx + j];
  }
  double kd_scale(int arm, int j) const {
    int idx = 0;
    for (int a = 0; a < arm; ++a) idx += model_.arm(a).joint_count();
    return draw_.kd_scale[idx + j];
  }

  RobotModel model_;
  EnvConfig cfg_;
  Rng rng_;
  int n_lower_ = 0, n_upper_ = 0, n_ = 0;

  // base state
  Eigen::Vector3d base_pos_ = Eigen::Vector3d::Zero();
  Eigen::Vector3d base_vel_ = Eigen::Vector3d::Zero();
  double yaw_ = 0.0, yaw_rate_ = 0.0;
  Eigen::Vector2d tilt_ = Eigen::Vector2d::Zero();       // roll, pitch proxy
  Eigen::Vector2d tilt_rate_ = Eigen::Vector2d::Zero();
  double last_support_force_ = 0.0;

  // arm state (up to two chains)
  std::array<Eigen::VectorXd, 2> q_, dq_, tau_act_, tau_ff_;

  // goals
  GoalCommandLower lower_goal_;
  UpperGoalTrajectory upper_traj_;
  double command_timer_ = 0.0;
  Eigen::Vector2d anchor_pos_ = Eigen::Vector2d::Zero();
  double anchor_yaw_ = 0.0;
  double yaw_ref_ = 0.0;
  bool upper_traj_pinned_ = false;
  Eigen::VectorXd upper_traj_override_;
  Eigen::VectorXd upper_ref_now_;

  // forces
  std::array<ForceChannel, 2> force_;
  double alpha_ = 0.0;
  long infeasible_pose_count_ = 0;

  DomainRandomizationDraw draw_;
  double push_timer_ = 0.0;

  std::ostream* recorder_ = nullptr;
  std::string recorder_hash_;
  bool recorder_header_done_ = false;

  Observation obs_;
  Eigen::VectorXd prev_action_, held_action_;
  int episode_steps_ = 0;
  double upper_error_accum_ = 0.0;
  double root_error_accum_ = 0.0;
  double root_lin_error_accum_ = 0.0;
  double root_ang_error_accum_ = 0.0;
  double feasibility_accum_ = 0.0;
  bool fell_ = false;
};

}  // namespace falcon
