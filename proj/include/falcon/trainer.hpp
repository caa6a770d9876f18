#pragma once

#include <chrono>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "falcon/mlp.hpp"
#include "falcon/parallel.hpp"
#include "falcon/sim_env.hpp"
#include "falcon/text_format.hpp"

namespace falcon {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class TrainMode { falcon, monolithic, upper_pd, upper_pid, upper_pd_id };
enum class CurriculumSetting { on, off, naive };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::falcon: return "falcon";
    case TrainMode::monolithic: return "monolithic";
    case TrainMode::upper_pd: return "upper_pd";
    case TrainMode::upper_pid: return "upper_pid";
    case TrainMode::upper_pd_id: return "upper_pd_id";
  }
  return "?";
}
inline std::string to_string(CurriculumSetting c) {
  switch (c) {
    case CurriculumSetting::on: return "on";
    case CurriculumSetting::off: return "off";
    case CurriculumSetting::naive: return "naive";
  }
  return "?";
}
inline TrainMode train_mode_from_string(const std::string& s) {
  for (TrainMode m : {TrainMode::falcon, TrainMode::monolithic, TrainMode::upper_pd,
                      TrainMode::upper_pid, TrainMode::upper_pd_id}) {
    if (to_string(m) == s) return m;
  }
  throw ParseError("unknown mode '" + s + "'");
}
inline CurriculumSetting curriculum_from_string(const std::string& s) {
  for (CurriculumSetting c :
       {CurriculumSetting::on, CurriculumSetting::off, CurriculumSetting::naive}) {
    if (to_string(c) == s) return c;
  }
  throw ParseError("unknown force_curriculum '" + s + "'");
}

struct TrainerConfig {
  TrainMode mode = TrainMode::falcon;
  CurriculumSetting curriculum = CurriculumSetting::on;
  std::string model = "mini-humanoid";
  std::uint64_t seed = 1;

  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_ratio = 0.2;
  double entropy_coef = 0.005;
  double value_coef = 0.5;
  double learning_rate = 3e-4;
  bool lr_decay = true;
  int epochs = 5;
  int minibatches = 4;
  int num_envs = 256;
  int steps_per_rollout = 24;
  long total_steps = 2000000;
  std::vector<int> hidden = {512, 256, 128};
  std::vector<int> estimator_hidden = {256, 128};
  // the two agents explore on different scales (m/s targets vs rad residuals)
  double log_std_init = -1.0;
  double log_std_init_upper = -2.0;
  // lower/whole actors start near zero output (stable stand); the upper actor
  // starts with ordinary random residuals so training has tracking to earn
  double final_gain = 0.01;
  double final_gain_upper = 0.2;
  double max_grad_norm = 1.0;

  // fixed per-channel observation scaling (declared, not adapted)
  double obs_scale_pos = 1.0;
  double obs_scale_vel = 0.1;
  double obs_scale_ang_vel = 0.5;
  double obs_scale_gravity = 1.0;
  double obs_scale_action = 1.0;

  // upper-controller baselines
  double controller_ki = 15.0;          // N*m per rad*s
  double controller_integral_clamp = 6.0;  // N*m anti-windup

  EnvConfig env;

  std::string to_text() const {
    std::ostringstream out;
    out << "[train]\n";
    out << "mode = " << falcon::to_string(mode) << "\n";
    out << "force_curriculum = " << falcon::to_string(curriculum) << "\n";
    out << "model = " << model << "\n";
    out << "seed = " << seed << "\n";
    out << "gamma = " << format_double(gamma) << "\n";
    out << "gae_lambda = " << format_double(gae_lambda) << "\n";
    out << "clip_ratio = " << format_double(clip_ratio) << "\n";
    out << "entropy_coef = " << format_double(entropy_coef) << "\n";
    out << "value_coef = " << format_double(value_coef) << "\n";
    out << "learning_rate = " << format_double(learning_rate) << "\n";
    out << "lr_decay = " << (lr_decay ? "true" : "false") << "\n";
    out << "epochs = " << epochs << "\n";
    out << "minibatches = " << minibatches << "\n";
    out << "num_envs = " << num_envs << "\n";
    out << "steps_per_rollout = " << steps_per_rollout << "\n";
    out << "total_steps = " << total_steps << "\n";
    out << "hidden =";
    for (int h : hidden) out << " " << h;
    out << "\n";
    out << "estimator_hidden =";
    for (int h : estimator_hidden) out << " " << h;
    out << "\n";
    out << "log_std_init = " << format_double(log_std_init) << "\n";
    out << "log_std_init_upper = " << format_double(log_std_init_upper) << "\n";
    out << "final_gain = " << format_double(final_gain) << "\n";
    out << "final_gain_upper = " << format_double(final_gain_upper) << "\n";
    out << "max_grad_norm = " << format_double(max_grad_norm) << "\n";
    out << "obs_scale_pos = " << format_double(obs_scale_pos) << "\n";
    out << "obs_scale_vel = " << format_double(obs_scale_vel) << "\n";
    out << "obs_scale_ang_vel = " << format_double(obs_scale_ang_vel) << "\n";
    out << "obs_scale_gravity = " << format_double(obs_scale_gravity) << "\n";
    out << "obs_scale_action = " << format_double(obs_scale_action) << "\n";
    out << "controller_ki = " << format_double(controller_ki) << "\n";
    out << "controller_integral_clamp = " << format_double(controller_integral_clamp)
        << "\n";
    out << "clip_box = " << to_string(clip_preset()) << "\n";
    out << "episode_seconds = " << format_double(env.episode_seconds) << "\n";
    out << "stance_probability = " << format_double(env.stance_probability) << "\n";
    out << "curriculum_window = " << env.curriculum.window << "\n";
    out << "curriculum_step = " << format_double(env.curriculum.step_size) << "\n";
    out << "promote_threshold = " << format_double(env.curriculum.promote_threshold)
        << "\n";
    out << "demote_threshold = " << format_double(env.curriculum.demote_threshold)
        << "\n";
    out << "domain_randomization = " << (env.domain_randomization ? "true" : "false")
        << "\n";
    return out.str();
  }

  enum class ClipPreset { narrow, wide };
  ClipPreset clip_preset() const {
    return (env.curriculum.clip.hi[0] > 60.0) ? ClipPreset::wide : ClipPreset::narrow;
  }

  static std::string to_string(ClipPreset p) {
    return p == ClipPreset::wide ? "wide" : "narrow";
  }

  static TrainerConfig from_section(const Section& s) {
    TrainerConfig c;
    auto opt = [&](const std::string& key, auto&& setter) {
      if (s.has(key)) setter();
    };
    opt("mode", [&] { c.mode = train_mode_from_string(s.get_string("mode")); });
    opt("force_curriculum",
        [&] { c.curriculum = curriculum_from_string(s.get_string("force_curriculum")); });
    opt("model", [&] { c.model = s.get_string("model"); });
    opt("seed", [&] { c.seed = static_cast<std::uint64_t>(s.get_int("seed")); });
    opt("gamma", [&] { c.gamma = s.get_scalar("gamma"); });
    opt("gae_lambda", [&] { c.gae_lambda = s.get_scalar("gae_lambda"); });
    opt("clip_ratio", [&] { c.clip_ratio = s.get_scalar("clip_ratio"); });
    opt("entropy_coef", [&] { c.entropy_coef = s.get_scalar("entropy_coef"); });
    opt("value_coef", [&] { c.value_coef = s.get_scalar("value_coef"); });
    opt("learning_rate", [&] { c.learning_rate = s.get_scalar("learning_rate"); });
    opt("lr_decay", [&] { c.lr_decay = s.get_bool("lr_decay"); });
    opt("epochs", [&] { c.epochs = s.get_int("epochs"); });
    opt("minibatches", [&] { c.minibatches = s.get_int("minibatches"); });
    opt("num_envs", [&] { c.num_envs = s.get_int("num_envs"); });
    opt("steps_per_rollout", [&] { c.steps_per_rollout = s.get_int("steps_per_rollout"); });
    opt("total_steps", [&] { c.total_steps = static_cast<long>(s.get_scalar("total_steps")); });
    opt("hidden", [&] {
      c.hidden.clear();
      Eigen::VectorXd v = s.get_vector("hidden");
      for (int i = 0; i < v.size(); ++i) c.hidden.push_back(static_cast<int>(v[i]));
    });
    opt("estimator_hidden", [&] {
      c.estimator_hidden.clear();
      Eigen::VectorXd v = s.get_vector("estimator_hidden");
      for (int i = 0; i < v.size(); ++i) c.estimator_hidden.push_back(static_cast<int>(v[i]));
    });
    opt("log_std_init", [&] { c.log_std_init = s.get_scalar("log_std_init"); });
    opt("log_std_init_upper",
        [&] { c.log_std_init_upper = s.get_scalar("log_std_init_upper"); });
    opt("final_gain", [&] { c.final_gain = s.get_scalar("final_gain"); });
    opt("final_gain_upper", [&] { c.final_gain_upper = s.get_scalar("final_gain_upper"); });
    opt("max_grad_norm", [&] { c.max_grad_norm = s.get_scalar("max_grad_norm"); });
    opt("obs_scale_pos", [&] { c.obs_scale_pos = s.get_scalar("obs_scale_pos"); });
    opt("obs_scale_vel", [&] { c.obs_scale_vel = s.get_scalar("obs_scale_vel"); });
    opt("obs_scale_ang_vel", [&] { c.obs_scale_ang_vel = s.get_scalar("obs_scale_ang_vel"); });
    opt("obs_scale_gravity", [&] { c.obs_scale_gravity = s.get_scalar("obs_scale_gravity"); });
    opt("obs_scale_action", [&] { c.obs_scale_action = s.get_scalar("obs_scale_action"); });
    opt("controller_ki", [&] { c.controller_ki = s.get_scalar("controller_ki"); });
    opt("controller_integral_clamp",
        [&] { c.controller_integral_clamp = s.get_scalar("controller_integral_clamp"); });
    opt("clip_box", [&] {
      std::string p = s.get_string("clip_box");
      if (p == "wide") {
        c.env.curriculum.clip = ClipBox::wide();
      } else if (p == "narrow") {
        c.env.curriculum.clip = ClipBox::narrow();
      } else {
        throw ParseError("clip_box must be narrow or wide, got '" + p + "'");
      }
    });
    opt("episode_seconds", [&] { c.env.episode_seconds = s.get_scalar("episode_seconds"); });
    opt("stance_probability",
        [&] { c.env.stance_probability = s.get_scalar("stance_probability"); });
    opt("curriculum_window", [&] { c.env.curriculum.window = s.get_int("curriculum_window"); });
    opt("curriculum_step", [&] { c.env.curriculum.step_size = s.get_scalar("curriculum_step"); });
    opt("promote_threshold",
        [&] { c.env.curriculum.promote_threshold = s.get_scalar("promote_threshold"); });
    opt("demote_threshold",
        [&] { c.env.curriculum.demote_threshold = s.get_scalar("demote_threshold"); });
    opt("domain_randomization",
        [&] { c.env.domain_randomization = s.get_bool("domain_randomization"); });
    s.reject_unconsumed();
    c.apply_mode_to_env();
    return c;
  }

  void apply_mode_to_env() {
    switch (curriculum) {
      case CurriculumSetting::on: env.force_mode = ForceMode::torque_aware; break;
      case CurriculumSetting::off: env.force_mode = ForceMode::off; break;
      case CurriculumSetting::naive:
        env.force_mode = ForceMode::naive;
        env.curriculum.clip = ClipBox::wide();
        break;
    }
  }

  std::string hash() const { return hash_hex(to_text()); }
};

// ---------------------------------------------------------------------------
// Observation assembly
// ---------------------------------------------------------------------------

inline Eigen::VectorXd scaled_observation(const Observation& obs, const TrainerConfig& cfg) {
  Observation scaled = obs;
  for (int h = 0; h < kHistory; ++h) {
    scaled.joint_pos[h] *= cfg.obs_scale_pos;
    scaled.joint_vel[h] *= cfg.obs_scale_vel;
    scaled.root_ang_vel[h] *= cfg.obs_scale_ang_vel;
    scaled.projected_gravity[h] *= cfg.obs_scale_gravity;
    scaled.prev_action[h] *= cfg.obs_scale_action;
  }
  return scaled.flatten();
}

inline Eigen::VectorXd lower_goal_vector(const GoalCommandLower& g) {
  Eigen::VectorXd v(6);
  v << g.lin_vel_xy[0], g.lin_vel_xy[1], g.ang_vel_yaw, (g.stance ? 1.0 : 0.0),
      g.root_height, g.waist_yaw;
  return v;
}

/// Proprioception subset used by the force estimator: histories of joint
/// state, root angular velocity, gravity, and lower-body actions only.
inline Eigen::VectorXd estimator_input(const Observation& obs, int n_lower,
                                       const TrainerConfig& cfg) {
  const int n = static_cast<int>(obs.joint_pos[0].size());
  Eigen::VectorXd out(kHistory * (2 * n + 6 + n_lower));
  int at = 0;
  for (int h = 0; h < kHistory; ++h) {
    out.segment(at, n) = obs.joint_pos[h] * cfg.obs_scale_pos;
    at += n;
  }
  for (int h = 0; h < kHistory; ++h) {
    out.segment(at, n) = obs.joint_vel[h] * cfg.obs_scale_vel;
    at += n;
  }
  for (int h = 0; h < kHistory; ++h) {
    out.segment(at, 3) = obs.root_ang_vel[h] * cfg.obs_scale_ang_vel;
    at += 3;
  }
  for (int h = 0; h < kHistory; ++h) {
    out.segment(at, 3) = obs.projected_gravity[h] * cfg.obs_scale_gravity;
    at += 3;
  }
  for (int h = 0; h < kHistory; ++h) {
    out.segment(at, n_lower) = obs.prev_action[h].head(n_lower) * cfg.obs_scale_action;
    at += n_lower;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Agents
// ---------------------------------------------------------------------------

struct Agent {
  std::string name;     // lower | upper | whole
  int goal_dim = 0;
  int action_offset = 0;  // slice of the combined env action
  int action_dim = 0;
  GaussianPolicy<float> actor;
  Mlp<float> critic;
};

struct AgentStats {
  double loss_pg = 0.0, loss_value = 0.0, entropy = 0.0;
  double noise_std = 0.0, clip_fraction = 0.0, grad_norm = 0.0;
};

/// Per-agent experience buffer, laid out t-major (index = t * E + e).
struct AgentRollout {
  Eigen::MatrixXf actor_in, critic_in, actions;
  Eigen::VectorXf logp, value, reward, done, advantage, ret;

  void resize(int actor_dim, int critic_dim, int act_dim, int n) {
    actor_in.resize(actor_dim, n);
    critic_in.resize(critic_dim, n);
    actions.resize(act_dim, n);
    logp.resize(n);
    value.resize(n);
    reward.resize(n);
    done.resize(n);
    advantage.resize(n);
    ret.resize(n);
  }
};

// ---------------------------------------------------------------------------
// PPO loss (shared by the update path and the finite-difference check)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct PpoLossResult {
  Scalar total = 0;
  Scalar surrogate = 0;
  Scalar value = 0;
  Scalar entropy = 0;
  Scalar clip_fraction = 0;
};

/// Clipped-surrogate PPO loss with value and entropy terms, plus analytic
/// gradients. Advantages arrive already normalized; gradient clipping and the
/// optimizer live outside so the loss stays finite-difference checkable.
template <typename Scalar>
PpoLossResult<Scalar> ppo_loss(
    const GaussianPolicy<Scalar>& actor, const Mlp<Scalar>& critic,
    const typename Mlp<Scalar>::Mat& actor_in, const typename Mlp<Scalar>::Mat& critic_in,
    const typename Mlp<Scalar>::Mat& actions,
    const typename Mlp<Scalar>::Vec& logp_old,
    const typename Mlp<Scalar>::Vec& advantage, const typename Mlp<Scalar>::Vec& ret,
    double clip_ratio, double value_coef, double entropy_coef,
    typename Mlp<Scalar>::Vec* grad_actor = nullptr,
    typename Mlp<Scalar>::Vec* grad_log_std = nullptr,
    typename Mlp<Scalar>::Vec* grad_critic = nullptr) {
  using Mat = typename Mlp<Scalar>::Mat;
  using Vec = typename Mlp<Scalar>::Vec;
  const int batch = static_cast<int>(actor_in.cols());
  const int act_dim = actor.action_size();
  const Scalar inv_batch = Scalar(1) / Scalar(batch);

  typename Mlp<Scalar>::Workspace actor_ws, critic_ws;
  Mat mu = actor.mean.forward(actor_in, grad_actor ? &actor_ws : nullptr);
  Vec logp_new = actor.log_prob(mu, actions);
  Vec sigma = actor.std();

  PpoLossResult<Scalar> out;
  Mat d_mu = Mat::Zero(act_dim, batch);
  Vec d_log_std = Vec::Zero(act_dim);
  int clipped = 0;
  for (int c = 0; c < batch; ++c) {
    Scalar ratio = std::exp(logp_new[c] - logp_old[c]);
    Scalar a = advantage[c];
    Scalar unclipped = ratio * a;
    Scalar clipped_ratio =
        std::clamp(ratio, Scalar(1) - Scalar(clip_ratio), Scalar(1) + Scalar(clip_ratio));
    Scalar clipped_term = clipped_ratio * a;
    out.surrogate += -std::min(unclipped, clipped_term) * inv_batch;
    if (ratio != clipped_ratio) ++clipped;
    // Gradient flows through the selected min branch; the clipped branch
    // only passes gradient strictly inside the trust band. Ties select the
    // clipped branch, so a zero clip range freezes the policy mean.
    bool clipped_selected = !(unclipped < clipped_term);
    bool inside_band = ratio > Scalar(1) - Scalar(clip_ratio) &&
                       ratio < Scalar(1) + Scalar(clip_ratio);
    if (!clipped_selected || inside_band) {
      // d(-ratio*A)/dlogp = -ratio*A; chain through logp derivatives
      Scalar d_logp = -ratio * a * inv_batch;
      for (int i = 0; i < act_dim; ++i) {
        Scalar z = (actions(i, c) - mu(i, c)) / sigma[i];
        d_mu(i, c) += d_logp * z / sigma[i];
        d_log_std[i] += d_logp * (z * z - Scalar(1));
      }
    }
  }
  out.clip_fraction = Scalar(clipped) * inv_batch;

  // entropy bonus: depends only on log_std
  out.entropy = actor.entropy();
  d_log_std.array() -= Scalar(entropy_coef);

  // value loss: 0.5 * mean (v - ret)^2
  Mat v = critic.forward(critic_in, grad_critic ? &critic_ws : nullptr);
  Mat d_v(1, batch);
  for (int c = 0; c < batch; ++c) {
    Scalar err = v(0, c) - ret[c];
    out.value += Scalar(0.5) * err * err * inv_batch;
    d_v(0, c) = Scalar(value_coef) * err * inv_batch;
  }

  out.total = out.surrogate + Scalar(value_coef) * out.value -
              Scalar(entropy_coef) * out.entropy;

  if (grad_actor) {
    grad_actor->setZero(actor.mean.parameter_count());
    actor.mean.backward(actor_ws, d_mu, *grad_actor);
  }
  if (grad_log_std) *grad_log_std = d_log_std;
  if (grad_critic) {
    grad_critic->setZero(critic.parameter_count());
    critic.backward(critic_ws, d_v, *grad_critic);
  }
  return out;
}

/// In-place normalization to mean zero, unit standard deviation (double
/// accumulation so the batch statistics land well inside tolerance).
inline void normalize_advantages(Eigen::VectorXf& adv) {
  const int n = static_cast<int>(adv.size());
  if (n == 0) return;
  double mean = 0.0;
  for (int k = 0; k < n; ++k) mean += adv[k];
  mean /= n;
  double var = 0.0;
  for (int k = 0; k < n; ++k) var += (adv[k] - mean) * (adv[k] - mean);
  double stddev = std::sqrt(var / n) + 1e-8;
  for (int k = 0; k < n; ++k)
    adv[k] = static_cast<float>((adv[k] - mean) / stddev);
}

// ---------------------------------------------------------------------------
// Upper-body joint controllers (baseline modes)
// ---------------------------------------------------------------------------

/// PD / PID / PD-ID upper-body tracking expressed in action space: the env's
/// joint PD tracks `reference + scale * a`, so plain PD tracking is the zero
/// action and torque corrections divide by the nominal kp and action scale.
class UpperJointController {
 public:
  UpperJointController(TrainMode mode, const RobotModel& model, const TrainerConfig& cfg,
                       int num_envs)
      : mode_(mode), model_(&model), cfg_(&cfg) {
    integral_ = Eigen::MatrixXd::Zero(model.upper_dof_count(), num_envs);
  }

  void reset_env(int e) { integral_.col(e).setZero(); }

  /// force_estimate holds both EEs' world forces (6 values) for pd_id.
  Eigen::VectorXd action(const DeskEnv& env, int e, const Eigen::VectorXd& target,
                         const Eigen::VectorXd& force_estimate) {
    const RobotModel& m = *model_;
    const int n_u = m.upper_dof_count();
    Eigen::VectorXd q = env.upper_positions();
    Eigen::VectorXd a(n_u);
    double dt_control = env.config().dt * env.config().decimation;
    double scale = env.config().action_scale_upper;

    int at = 0;
    for (int arm = 0; arm < env.arm_count(); ++arm) {
      Eigen::VectorXd tau_comp = Eigen::VectorXd::Zero(m.arm(arm).joint_count());
      if (mode_ == TrainMode::upper_pd_id) {
        // inverse-dynamics compensation at the EE CoM (contact point unknown)
        ArmPose pose{arm, env.arm_positions(arm)};
        FramePlacement base;
        base.translation = env.base_position();
        base.rotation =
            Eigen::AngleAxisd(env.base_yaw(), Eigen::Vector3d::UnitZ()).toRotationMatrix();
        ArmKinematics fk = forward_kinematics(m, pose, base);
        int tip = m.arm(arm).joint_count() - 1;
        Eigen::Vector3d ee_com = fk.link_com(m, arm, tip);
        Eigen::Matrix3Xd jac = point_jacobian(fk, ee_com);
        tau_comp = -jac.transpose() * force_estimate.segment<3>(3 * arm);
      }
      for (int j = 0; j < m.arm(arm).joint_count(); ++j, ++at) {
        const JointSpec& spec = m.arm(arm).segments[j].joint;
        double correction = 0.0;
        if (mode_ == TrainMode::upper_pid) {
          integral_(at, e) += (target[at] - q[at]) * dt_control;
          double tau_i = cfg_->controller_ki * integral_(at, e);
          double clamp = cfg_->controller_integral_clamp;
          if (tau_i > clamp) {
            tau_i = clamp;
            integral_(at, e) = clamp / cfg_->controller_ki;
          } else if (tau_i < -clamp) {
            tau_i = -clamp;
            integral_(at, e) = -clamp / cfg_->controller_ki;
          }
          correction = tau_i / (spec.kp * scale);
        } else if (mode_ == TrainMode::upper_pd_id) {
          correction = tau_comp[j] / (spec.kp * scale);
        }
        a[at] = correction;
      }
    }
    return a;
  }

 private:
  TrainMode mode_;
  const RobotModel* model_;
  const TrainerConfig* cfg_;
  Eigen::MatrixXd integral_;
};

// ---------------------------------------------------------------------------
// Policy bundle: everything a checkpoint stores and evaluation needs
// ---------------------------------------------------------------------------

struct PolicyBundle {
  TrainerConfig config;
  RobotModel model;
  double alpha_g = 0.0;
  std::vector<Agent> agents;
  std::optional<Mlp<float>> estimator;

  int observation_dim() const { return kHistory * (3 * model.dof_count() + 6); }
  int privileged_dim() const { return 9; }
  int estimator_input_dim() const {
    return kHistory * (2 * model.dof_count() + 6 + model.lower_dof_count);
  }

  const Agent* agent(const std::string& name) const {
    for (const auto& a : agents)
      if (a.name == name) return &a;
    return nullptr;
  }
  Agent* agent(const std::string& name) {
    for (auto& a : agents)
      if (a.name == name) return &a;
    return nullptr;
  }
};

/// Builds freshly initialized networks for the configured mode.
inline PolicyBundle make_policy_bundle(const TrainerConfig& cfg) {
  PolicyBundle b;
  b.config = cfg;
  b.model = resolve_model(cfg.model);
  const int n = b.model.dof_count();
  const int n_l = b.model.lower_dof_count;
  const int n_u = b.model.upper_dof_count();
  const int obs = kHistory * (3 * n + 6);
  Rng rng(Rng::derive_seed(cfg.seed, 0xA11CE));

  auto make_sizes = [&](int in, int out) {
    std::vector<int> sizes{in};
    for (int h : cfg.hidden) sizes.push_back(h);
    sizes.push_back(out);
    return sizes;
  };
  auto add_agent = [&](const std::string& name, int goal_dim, int offset, int act_dim) {
    Agent a;
    a.name = name;
    a.goal_dim = goal_dim;
    a.action_offset = offset;
    a.action_dim = act_dim;
    bool is_upper = name == "upper";
    a.actor = GaussianPolicy<float>(
        make_sizes(obs + goal_dim, act_dim), rng,
        is_upper ? cfg.log_std_init_upper : cfg.log_std_init,
        is_upper ? cfg.final_gain_upper : cfg.final_gain);
    a.critic = Mlp<float>(make_sizes(obs + goal_dim + 9, 1), rng);
    b.agents.push_back(std::move(a));
  };

  switch (cfg.mode) {
    case TrainMode::falcon:
      if (n_l > 0) add_agent("lower", 6, 0, n_l);
      add_agent("upper", n_u, n_l, n_u);
      break;
    case TrainMode::monolithic:
      add_agent("whole", 6 + n_u, 0, n);
      break;
    case TrainMode::upper_pd:
    case TrainMode::upper_pid:
    case TrainMode::upper_pd_id:
      if (n_l == 0) {
        throw ValidationError("upper_* baselines need an actuated base (lower agent)");
      }
      add_agent("lower", 6, 0, n_l);
      break;
  }

  if (cfg.mode == TrainMode::upper_pd_id) {
    std::vector<int> sizes{kHistory * (2 * n + 6 + n_l)};
    for (int h : cfg.estimator_hidden) sizes.push_back(h);
    sizes.push_back(6);
    b.estimator = Mlp<float>(sizes, rng);
  }
  return b;
}

/// Deterministic (mean) combined action for evaluation and deployment.
/// The estimator argument of pd_id comes from the bundle itself.
inline Eigen::VectorXd bundle_action(const PolicyBundle& b, const DeskEnv& env, int e,
                                     UpperJointController* controller) {
  const TrainerConfig& cfg = b.config;
  Eigen::VectorXd obs = scaled_observation(env.observation(), cfg);
  Eigen::VectorXd action = Eigen::VectorXd::Zero(env.action_size());

  auto actor_mean = [&](const Agent& a, const Eigen::VectorXd& goal) {
    Eigen::VectorXf in(obs.size() + goal.size());
    in << obs.cast<float>(), goal.cast<float>();
    Eigen::MatrixXf mu = a.actor.mean.forward(in);
    return mu.col(0).cast<double>().eval();
  };

  switch (cfg.mode) {
    case TrainMode::falcon: {
      if (const Agent* lower = b.agent("lower")) {
        action.head(lower->action_dim) =
            actor_mean(*lower, lower_goal_vector(env.lower_goal()));
      }
      const Agent* upper = b.agent("upper");
      action.tail(upper->action_dim) = actor_mean(*upper, env.upper_target());
      break;
    }
    case TrainMode::monolithic: {
      const Agent& whole = b.agents.front();
      Eigen::VectorXd goal(6 + env.upper_action_size());
      goal << lower_goal_vector(env.lower_goal()), env.upper_target();
      action = actor_mean(whole, goal);
      break;
    }
    default: {
      const Agent& lower = b.agents.front();
      action.head(lower.action_dim) =
          actor_mean(lower, lower_goal_vector(env.lower_goal()));
      if (cfg.mode == TrainMode::upper_pd_id && !b.estimator) {
        throw std::runtime_error(
            "configuration error: upper_pd_id requires a force estimator");
      }
      Eigen::VectorXd f_est = Eigen::VectorXd::Zero(6);
      if (cfg.mode == TrainMode::upper_pd_id && b.estimator) {
        Eigen::VectorXf in =
            estimator_input(env.observation(), b.model.lower_dof_count, cfg).cast<float>();
        f_est = b.estimator->forward(in).col(0).cast<double>();
      }
      action.tail(env.upper_action_size()) =
          controller->action(env, e, env.upper_target(), f_est);
      break;
    }
  }
  return action;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace checkpoint_detail {

constexpr char kMagic[8] = {'F', 'L', 'C', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& buf, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}
inline void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(buf, bits);
}
inline void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<std::uint32_t>(s.size()));
  buf += s;
}

struct Reader {
  const std::string& buf;
  size_t at = 0;

  void need(size_t n) const {
    if (at + n > buf.size()) throw std::runtime_error("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at++])) << (8 * i);
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    std::uint32_t n = u32();
    need(n);
    std::string s = buf.substr(at, n);
    at += n;
    return s;
  }
};

}  // namespace checkpoint_detail

/// Checkpoint layout: magic, version, config text, model text, alpha_g, then
/// a tensor manifest (name + element count) followed by little-endian f32
/// data, closed by a 64-bit checksum over everything before it.
inline void checkpoint_save(const std::string& path, const PolicyBundle& bundle) {
  namespace cd = checkpoint_detail;
  std::string buf;
  buf.append(cd::kMagic, 8);
  cd::put_u32(buf, cd::kVersion);
  cd::put_str(buf, bundle.config.to_text());
  cd::put_str(buf, serialize_model(bundle.model));
  cd::put_f64(buf, bundle.alpha_g);

  std::vector<std::pair<std::string, const Eigen::VectorXf*>> tensors;
  std::vector<Eigen::VectorXf> owned;
  owned.reserve(bundle.agents.size() * 3 + 1);
  for (const auto& a : bundle.agents) {
    tensors.emplace_back(a.name + ".actor", &a.actor.mean.params());
    owned.push_back(a.actor.log_std);
    tensors.emplace_back(a.name + ".log_std", &owned.back());
    tensors.emplace_back(a.name + ".critic", &a.critic.params());
  }
  if (bundle.estimator) tensors.emplace_back("estimator", &bundle.estimator->params());

  cd::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, vec] : tensors) {
    cd::put_str(buf, name);
    cd::put_u64(buf, static_cast<std::uint64_t>(vec->size()));
  }
  for (const auto& [name, vec] : tensors) {
    for (int i = 0; i < vec->size(); ++i) cd::put_f32(buf, (*vec)[i]);
  }
  cd::put_u64(buf, fnv1a64(buf));
  write_file(path, buf);
}

inline PolicyBundle checkpoint_load(const std::string& path) {
  namespace cd = checkpoint_detail;
  std::string buf;
  try {
    buf = read_file(path);
  } catch (const ParseError& e) {
    throw std::runtime_error(e.what());  // missing checkpoint is a runtime failure
  }
  if (buf.size() < 24 || std::memcmp(buf.data(), cd::kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  // trailing checksum covers everything before it
  std::string body = buf.substr(0, buf.size() - 8);
  cd::Reader tail{buf, buf.size() - 8};
  if (tail.u64() != fnv1a64(body)) {
    throw std::runtime_error("checkpoint checksum mismatch (file corrupted): " + path);
  }

  cd::Reader r{buf, 8};
  std::uint32_t version = r.u32();
  if (version != cd::kVersion) {
    throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(cd::kVersion) + ")");
  }
  std::string config_text = r.str();
  std::string model_text = r.str();
  double alpha = r.f64();

  std::vector<Section> sections = parse_sections(config_text);
  if (sections.empty() || sections.front().name() != "train") {
    throw std::runtime_error("checkpoint carries no [train] config");
  }
  TrainerConfig cfg = TrainerConfig::from_section(sections.front());

  PolicyBundle bundle = make_policy_bundle(cfg);
  RobotModel stored_model = parse_model(model_text);
  if (!models_equal(stored_model, bundle.model)) {
    // config named a builtin that no longer matches the stored model
    bundle.model = stored_model;
  }
  bundle.alpha_g = alpha;

  std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, std::uint64_t>> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    std::uint64_t elems = r.u64();
    manifest.emplace_back(name, elems);
  }
  for (const auto& [name, elems] : manifest) {
    Eigen::VectorXf* dst = nullptr;
    auto dot = name.find('.');
    if (name == "estimator") {
      if (!bundle.estimator) throw std::runtime_error("unexpected estimator tensor");
      dst = &bundle.estimator->params();
    } else if (dot != std::string::npos) {
      Agent* a = bundle.agent(name.substr(0, dot));
      if (!a) throw std::runtime_error("checkpoint tensor for unknown agent: " + name);
      std::string part = name.substr(dot + 1);
      if (part == "actor") dst = &a->actor.mean.params();
      else if (part == "log_std") dst = &a->actor.log_std;
      else if (part == "critic") dst = &a->critic.params();
    }
    if (!dst) throw std::runtime_error("unknown checkpoint tensor: " + name);
    if (static_cast<std::uint64_t>(dst->size()) != elems) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has " +
                               std::to_string(elems) + " elements, expected " +
                               std::to_string(dst->size()));
    }
    for (int i = 0; i < dst->size(); ++i) (*dst)[i] = r.f32();
  }
  return bundle;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct UpdateLogRow {
  long update = 0;
  long env_steps = 0;
  double alpha = 0.0;
  std::vector<std::pair<std::string, AgentStats>> agents;
  double reward_lower = 0.0, reward_upper = 0.0;
  double upper_tracking_error = 0.0;
  double root_tracking_error = 0.0;
  double fall_rate = 0.0;
  double estimator_loss = 0.0;
  double wall_seconds = 0.0;
};

class Trainer {
 public:
  explicit Trainer(TrainerConfig cfg) : bundle_(make_policy_bundle(std::move(cfg))) {
    const TrainerConfig& c = bundle_.config;
    rng_ = std::make_unique<Rng>(Rng::derive_seed(c.seed, 0xB0B));
    envs_.reserve(c.num_envs);
    for (int e = 0; e < c.num_envs; ++e) {
      envs_.emplace_back(bundle_.model, c.env, Rng::derive_seed(c.seed, 1000 + e));
    }
    if (c.mode == TrainMode::upper_pd || c.mode == TrainMode::upper_pid ||
        c.mode == TrainMode::upper_pd_id) {
      controller_ = std::make_unique<UpperJointController>(c.mode, bundle_.model, c,
                                                           c.num_envs);
    }
    for (auto& a : bundle_.agents) {
      actor_opt_.emplace_back(a.actor.mean.parameter_count());
      log_std_opt_.emplace_back(static_cast<int>(a.actor.log_std.size()));
      critic_opt_.emplace_back(a.critic.parameter_count());
    }
    if (bundle_.estimator) {
      estimator_opt_ = Adam<float>(bundle_.estimator->parameter_count());
    }
    if (c.curriculum != CurriculumSetting::off) {
      curriculum_ = CurriculumState{};
    }
    reset_envs();
  }

  PolicyBundle& bundle() { return bundle_; }
  const PolicyBundle& bundle() const { return bundle_; }
  const std::vector<UpdateLogRow>& log() const { return log_; }
  double alpha() const { return curriculum_ ? curriculum_->alpha_g : 0.0; }

  /// Runs the configured budget; optionally streams the training log as CSV.
  void train(std::ostream* log_csv = nullptr, bool verbose = false) {
    const TrainerConfig& c = bundle_.config;
    const long batch_steps = static_cast<long>(c.num_envs) * c.steps_per_rollout;
    const long updates = std::max(1L, c.total_steps / batch_steps);
    if (log_csv) write_log_header(*log_csv);
    auto start = std::chrono::steady_clock::now();
    for (long u = 0; u < updates; ++u) {
      double lr_frac = c.lr_decay ? 1.0 - static_cast<double>(u) / updates : 1.0;
      UpdateLogRow row = run_update(static_cast<float>(c.learning_rate * lr_frac));
      row.update = u;
      row.env_steps = (u + 1) * batch_steps;
      row.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log_.push_back(row);
      if (log_csv) write_log_row(*log_csv, log_.back());
      if (verbose && (u % 10 == 0 || u + 1 == updates)) {
        std::printf("update %ld/%ld alpha=%.2f E_upper=%.3f fall=%.2f t=%.0fs\n", u,
                    updates, row.alpha, row.upper_tracking_error, row.fall_rate,
                    row.wall_seconds);
        std::fflush(stdout);
      }
    }
  }

  /// One rollout + PPO update; exposed for tests that need fine control.
  UpdateLogRow run_update(float lr) {
    collect_rollouts();
    UpdateLogRow row;
    row.alpha = alpha();
    for (size_t i = 0; i < bundle_.agents.size(); ++i) {
      AgentStats stats = ppo_update(static_cast<int>(i), lr);
      row.agents.emplace_back(bundle_.agents[i].name, stats);
    }
    if (bundle_.estimator) row.estimator_loss = train_estimator(lr);
    apply_curriculum();
    row.reward_lower = batch_stats_.reward_lower;
    row.reward_upper = batch_stats_.reward_upper;
    row.upper_tracking_error = batch_stats_.upper_error;
    row.root_tracking_error = batch_stats_.root_error;
    row.fall_rate = batch_stats_.fall_rate;
    return row;
  }

  DeskEnv& env(int e) { return envs_[e]; }
  int completed_episodes() const { return total_episodes_; }
  const std::vector<AgentRollout>& rollouts() const { return rollouts_; }

 private:
  struct BatchStats {
    double reward_lower = 0.0, reward_upper = 0.0;
    double upper_error = 0.0, root_error = 0.0, fall_rate = 0.0;
  };

  void reset_envs() {
    for (auto& env : envs_) env.reset();
    double a = alpha();
    for (auto& env : envs_) env.set_alpha(a);
    episode_reward_l_.assign(envs_.size(), 0.0);
    episode_reward_u_.assign(envs_.size(), 0.0);
  }

  void collect_rollouts() {
    const TrainerConfig& c = bundle_.config;
    const int E = c.num_envs;
    const int T = c.steps_per_rollout;
    const int N = E * T;
    const int obs_dim = bundle_.observation_dim();

    rollouts_.resize(bundle_.agents.size());
    for (size_t i = 0; i < bundle_.agents.size(); ++i) {
      const Agent& a = bundle_.agents[i];
      rollouts_[i].resize(obs_dim + a.goal_dim, obs_dim + a.goal_dim + 9, a.action_dim, N);
    }
    if (bundle_.estimator) {
      estimator_in_.resize(bundle_.estimator_input_dim(), N);
      estimator_target_.resize(6, N);
    }

    pending_episode_errors_.clear();
    double sum_rl = 0.0, sum_ru = 0.0;
    double ep_upper_err = 0.0, ep_root_err = 0.0;
    int ep_count = 0, fall_count = 0;

    std::vector<StepResult> results(E);
    std::vector<Eigen::VectorXd> actions(E);

    for (int t = 0; t < T; ++t) {
      // assemble per-agent inputs
      for (size_t i = 0; i < bundle_.agents.size(); ++i) {
        Agent& agent = bundle_.agents[i];
        AgentRollout& roll = rollouts_[i];
        for (int e = 0; e < E; ++e) {
          Eigen::VectorXd obs = scaled_observation(envs_[e].observation(), c);
          Eigen::VectorXd goal = goal_vector(agent, envs_[e]);
          int col = t * E + e;
          roll.actor_in.col(col).head(obs.size()) = obs.cast<float>();
          roll.actor_in.col(col).tail(goal.size()) = goal.cast<float>();
          roll.critic_in.col(col).head(obs.size() + goal.size()) =
              roll.actor_in.col(col);
          roll.critic_in.col(col).tail(9) =
              envs_[e].privileged().flatten().cast<float>();
        }
        // batched forward for means and values
        auto block_actor = roll.actor_in.middleCols(t * E, E);
        auto block_critic = roll.critic_in.middleCols(t * E, E);
        Eigen::MatrixXf mu = agent.actor.mean.forward(block_actor);
        Eigen::MatrixXf sampled = agent.actor.sample(mu, *rng_);
        Eigen::VectorXf logp = agent.actor.log_prob(mu, sampled);
        Eigen::MatrixXf value = agent.critic.forward(block_critic);
        roll.actions.middleCols(t * E, E) = sampled;
        roll.logp.segment(t * E, E) = logp;
        roll.value.segment(t * E, E) = value.row(0).transpose();
      }
      if (bundle_.estimator) {
        for (int e = 0; e < E; ++e) {
          estimator_in_.col(t * E + e) =
              estimator_input(envs_[e].observation(), bundle_.model.lower_dof_count, c)
                  .cast<float>();
        }
      }

      // combined env actions
      for (int e = 0; e < E; ++e) {
        Eigen::VectorXd action = Eigen::VectorXd::Zero(envs_[e].action_size());
        for (size_t i = 0; i < bundle_.agents.size(); ++i) {
          const Agent& agent = bundle_.agents[i];
          action.segment(agent.action_offset, agent.action_dim) =
              rollouts_[i].actions.col(t * E + e).cast<double>();
        }
        if (controller_) {
          Eigen::VectorXd f_est = Eigen::VectorXd::Zero(6);
          if (c.mode == TrainMode::upper_pd_id && bundle_.estimator) {
            Eigen::VectorXf in = estimator_in_.col(t * E + e);
            f_est = bundle_.estimator->forward(in).col(0).cast<double>();
          }
          action.tail(envs_[e].upper_action_size()) =
              controller_->action(envs_[e], e, envs_[e].upper_target(), f_est);
        }
        actions[e] = action;
      }

      parallel_for(E, [&](int e) { results[e] = envs_[e].step(actions[e]); }, 2);

      if (bundle_.estimator) {
        for (int e = 0; e < E; ++e) {
          estimator_target_.col(t * E + e).head<3>() =
              results[e].priv.ee_forces[0].cast<float>();
          estimator_target_.col(t * E + e).tail<3>() =
              results[e].priv.ee_forces[1].cast<float>();
        }
      }

      for (int e = 0; e < E; ++e) {
        double r_l = results[e].reward_lower;
        double r_u = results[e].reward_upper;
        sum_rl += r_l;
        sum_ru += r_u;
        episode_reward_l_[e] += r_l;
        episode_reward_u_[e] += r_u;
        for (size_t i = 0; i < bundle_.agents.size(); ++i) {
          int col = t * E + e;
          rollouts_[i].reward[col] = static_cast<float>(agent_reward(
              bundle_.agents[i], r_l, r_u));
          rollouts_[i].done[col] = results[e].done ? 1.0f : 0.0f;
        }
        if (results[e].done) {
          EpisodeSummary s = envs_[e].episode_summary();
          pending_episode_errors_.push_back(s.mean_upper_error);
          ep_upper_err += s.mean_upper_error;
          ep_root_err += s.mean_root_error;
          fall_count += s.fell ? 1 : 0;
          ++ep_count;
          ++total_episodes_;
          envs_[e].reset();
          if (controller_) controller_->reset_env(e);
          episode_reward_l_[e] = 0.0;
          episode_reward_u_[e] = 0.0;
        }
      }
    }

    // bootstrap values and GAE, per agent
    for (size_t i = 0; i < bundle_.agents.size(); ++i) {
      Agent& agent = bundle_.agents[i];
      AgentRollout& roll = rollouts_[i];
      Eigen::MatrixXf last_critic_in(roll.critic_in.rows(), E);
      for (int e = 0; e < E; ++e) {
        Eigen::VectorXd obs = scaled_observation(envs_[e].observation(), c);
        Eigen::VectorXd goal = goal_vector(agent, envs_[e]);
        last_critic_in.col(e).head(obs.size()) = obs.cast<float>();
        last_critic_in.col(e).segment(obs.size(), goal.size()) = goal.cast<float>();
        last_critic_in.col(e).tail(9) = envs_[e].privileged().flatten().cast<float>();
      }
      Eigen::MatrixXf boot = agent.critic.forward(last_critic_in);

      const float gamma = static_cast<float>(c.gamma);
      const float lam = static_cast<float>(c.gae_lambda);
      Eigen::VectorXf gae = Eigen::VectorXf::Zero(E);
      for (int t = T - 1; t >= 0; --t) {
        for (int e = 0; e < E; ++e) {
          int col = t * E + e;
          float not_done = 1.0f - roll.done[col];
          float next_value =
              (t == T - 1) ? boot(0, e) : roll.value[(t + 1) * E + e];
          // terminal bootstrap is zeroed via not_done
          float delta =
              roll.reward[col] + gamma * next_value * not_done - roll.value[col];
          gae[e] = delta + gamma * lam * not_done * gae[e];
          roll.advantage[col] = gae[e];
          roll.ret[col] = gae[e] + roll.value[col];
        }
      }
    }

    // episode stats carry over until fresh episodes complete
    batch_stats_.reward_lower = sum_rl / N;
    batch_stats_.reward_upper = sum_ru / N;
    if (ep_count > 0) {
      batch_stats_.upper_error = ep_upper_err / ep_count;
      batch_stats_.root_error = ep_root_err / ep_count;
      batch_stats_.fall_rate = static_cast<double>(fall_count) / ep_count;
    }
  }

  double agent_reward(const Agent& agent, double r_l, double r_u) const {
    if (agent.name == "lower") return r_l;
    if (agent.name == "upper") return r_u;
    return r_l + r_u;  // monolithic sum
  }

  Eigen::VectorXd goal_vector(const Agent& agent, const DeskEnv& env) const {
    if (agent.name == "lower") return lower_goal_vector(env.lower_goal());
    if (agent.name == "upper") return env.upper_target();
    Eigen::VectorXd g(6 + env.upper_action_size());
    g << lower_goal_vector(env.lower_goal()), env.upper_target();
    return g;
  }

  AgentStats ppo_update(int agent_index, float lr) {
    const TrainerConfig& c = bundle_.config;
    Agent& agent = bundle_.agents[agent_index];
    AgentRollout& roll = rollouts_[agent_index];
    const int N = static_cast<int>(roll.logp.size());
    const int mb_size = N / c.minibatches;

    std::vector<int> order(N);
    std::iota(order.begin(), order.end(), 0);

    AgentStats stats;
    stats.noise_std = agent.actor.std().mean();
    int loss_count = 0;

    Eigen::VectorXf grad_actor, grad_log_std, grad_critic;
    for (int epoch = 0; epoch < c.epochs; ++epoch) {
      // Fisher-Yates with the trainer stream keeps updates reproducible
      for (int i = N - 1; i > 0; --i) {
        int j = rng_->uniform_int(0, i);
        std::swap(order[i], order[j]);
      }
      for (int mb = 0; mb < c.minibatches; ++mb) {
        Eigen::MatrixXf actor_in(roll.actor_in.rows(), mb_size);
        Eigen::MatrixXf critic_in(roll.critic_in.rows(), mb_size);
        Eigen::MatrixXf actions(roll.actions.rows(), mb_size);
        Eigen::VectorXf logp(mb_size), adv(mb_size), ret(mb_size);
        for (int k = 0; k < mb_size; ++k) {
          int idx = order[mb * mb_size + k];
          actor_in.col(k) = roll.actor_in.col(idx);
          critic_in.col(k) = roll.critic_in.col(idx);
          actions.col(k) = roll.actions.col(idx);
          logp[k] = roll.logp[idx];
          adv[k] = roll.advantage[idx];
          ret[k] = roll.ret[idx];
        }
        normalize_advantages(adv);

        PpoLossResult<float> loss = ppo_loss<float>(
            agent.actor, agent.critic, actor_in, critic_in, actions, logp, adv, ret,
            c.clip_ratio, c.value_coef, c.entropy_coef, &grad_actor, &grad_log_std,
            &grad_critic);
        if (!std::isfinite(loss.total)) {
          throw std::runtime_error("ppo_update: non-finite loss for agent " + agent.name);
        }

        clip_gradients(grad_actor, grad_log_std, grad_critic,
                       static_cast<float>(c.max_grad_norm), &stats.grad_norm);
        actor_opt_[agent_index].step(agent.actor.mean.params(), grad_actor, lr);
        log_std_opt_[agent_index].step(agent.actor.log_std, grad_log_std, lr);
        agent.actor.clamp_log_std();
        critic_opt_[agent_index].step(agent.critic.params(), grad_critic, lr);

        stats.loss_pg += loss.surrogate;
        stats.loss_value += loss.value;
        stats.entropy += loss.entropy;
        stats.clip_fraction += loss.clip_fraction;
        ++loss_count;
      }
    }
    if (loss_count > 0) {
      stats.loss_pg /= loss_count;
      stats.loss_value /= loss_count;
      stats.entropy /= loss_count;
      stats.clip_fraction /= loss_count;
    }
    stats.noise_std = agent.actor.std().mean();
    if (!std::isfinite(stats.noise_std)) {
      throw std::runtime_error("ppo_update: non-finite action noise std");
    }
    return stats;
  }

  static void clip_gradients(Eigen::VectorXf& a, Eigen::VectorXf& b, Eigen::VectorXf& c,
                             float max_norm, double* observed) {
    double sq = a.squaredNorm() + b.squaredNorm() + c.squaredNorm();
    double norm = std::sqrt(sq);
    if (observed) *observed = std::max(*observed, norm);
    if (norm > max_norm && norm > 0.0) {
      float scale = static_cast<float>(max_norm / norm);
      a *= scale;
      b *= scale;
      c *= scale;
    }
  }

  double train_estimator(float lr) {
    Mlp<float>& est = *bundle_.estimator;
    const int N = static_cast<int>(estimator_in_.cols());
    const int mb_size = std::max(1, N / bundle_.config.minibatches);
    double last_loss = 0.0;
    for (int mb = 0; mb + mb_size <= N; mb += mb_size) {
      Mlp<float>::Workspace ws;
      auto in = estimator_in_.middleCols(mb, mb_size);
      auto target = estimator_target_.middleCols(mb, mb_size);
      Eigen::MatrixXf pred = est.forward(in, &ws);
      Eigen::MatrixXf err = pred - target;
      last_loss = err.squaredNorm() / (2.0 * mb_size);
      Eigen::MatrixXf d = err / static_cast<float>(mb_size);
      Eigen::VectorXf grad;
      est.backward(ws, d, grad);
      estimator_opt_.step(est.params(), grad, lr);
    }
    return last_loss;
  }

  void apply_curriculum() {
    if (!curriculum_) return;
    for (double err : pending_episode_errors_) {
      update_alpha(*curriculum_, err, bundle_.config.env.curriculum);
    }
    pending_episode_errors_.clear();
    bundle_.alpha_g = curriculum_->alpha_g;
    for (auto& env : envs_) env.set_alpha(curriculum_->alpha_g);
  }

  void write_log_header(std::ostream& out) const {
    out << "# falcon-training-log v1 config_hash=" << bundle_.config.hash()
        << " seed=" << bundle_.config.seed << "\n";
    out << "update,env_steps,alpha_g";
    for (const auto& a : bundle_.agents) {
      out << "," << a.name << "_loss_pg," << a.name << "_loss_value," << a.name
          << "_entropy," << a.name << "_noise_std," << a.name << "_clip_fraction";
    }
    out << ",reward_lower,reward_upper,upper_tracking_error,root_tracking_error,"
           "fall_rate,estimator_loss,wall_seconds\n";
  }

  void write_log_row(std::ostream& out, const UpdateLogRow& row) const {
    char buf[64];
    auto fmt = [&](double v) {
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      return std::string(buf);
    };
    out << row.update << "," << row.env_steps << "," << fmt(row.alpha);
    for (const auto& [_, s] : row.agents) {
      out << "," << fmt(s.loss_pg) << "," << fmt(s.loss_value) << "," << fmt(s.entropy)
          << "," << fmt(s.noise_std) << "," << fmt(s.clip_fraction);
    }
    out << "," << fmt(row.reward_lower) << "," << fmt(row.reward_upper) << ","
        << fmt(row.upper_tracking_error) << "," << fmt(row.root_tracking_error) << ","
        << fmt(row.fall_rate) << "," << fmt(row.estimator_loss) << ","
        << fmt(row.wall_seconds) << "\n";
  }

  PolicyBundle bundle_;
  std::unique_ptr<Rng> rng_;
  std::vector<DeskEnv> envs_;
  std::unique_ptr<UpperJointController> controller_;
  std::vector<Adam<float>> actor_opt_, log_std_opt_, critic_opt_;
  Adam<float> estimator_opt_;
  std::optional<CurriculumState> curriculum_;

  std::vector<AgentRollout> rollouts_;
  Eigen::MatrixXf estimator_in_, estimator_target_;
  std::vector<double> pending_episode_errors_;
  std::vector<double> episode_reward_l_, episode_reward_u_;
  BatchStats batch_stats_;
  std::vector<UpdateLogRow> log_;
  int total_episodes_ = 0;
};

}  // namespace falcon
