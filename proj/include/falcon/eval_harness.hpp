#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "falcon/trainer.hpp"

namespace falcon {

/// Mean absolute error over a series (the published metric reduces each step
/// to a joint- or channel-averaged absolute error first).
inline double mean_abs_error(const std::vector<double>& per_step) {
  if (per_step.empty()) return 0.0;
  double s = 0.0;
  for (double v : per_step) s += std::abs(v);
  return s / static_cast<double>(per_step.size());
}

struct MetricsRow {
  std::string mode;
  std::string curriculum;
  double force_level = 0.0;
  bool present = true;  // false when the checkpoint was missing

  int episodes = 0;            // completed (non-fallen) episodes
  int attempted = 0;
  double fall_rate = 0.0;
  double upper_error_mean = 0.0, upper_error_std = 0.0;
  double root_error_mean = 0.0, root_error_std = 0.0;
  double root_lin_error_mean = 0.0;
  double root_ang_error_mean = 0.0;
  double feasibility_scale_mean = 1.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::string config_hash;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  double alpha = 0.0;
  int episodes = 16;
  std::uint64_t seed = 7;
  std::ostream* trajectory_dump = nullptr;  // records the first episode
};

/// Deterministic-policy evaluation at a pinned force level. Forces always
/// run through the torque-aware pipeline regardless of how the policy was
/// trained; only alpha is taken from the requested level.
inline MetricsRow eval_policy(const PolicyBundle& bundle, const EvalOptions& opt) {
  if (opt.alpha < 0.0 || opt.alpha > 1.0) {
    throw std::invalid_argument("force level alpha must lie in [0, 1]");
  }
  TrainerConfig cfg = bundle.config;
  cfg.env.force_mode = ForceMode::torque_aware;
  cfg.env.curriculum.clip = bundle.config.env.curriculum.clip;

  MetricsRow row;
  row.mode = to_string(cfg.mode);
  row.curriculum = to_string(cfg.curriculum);
  row.force_level = opt.alpha;
  row.attempted = opt.episodes;

  std::vector<double> upper_errors, root_errors, lin_errors, ang_errors, feas;
  int falls = 0;

  UpperJointController controller(cfg.mode, bundle.model, cfg, 1);
  for (int ep = 0; ep < opt.episodes; ++ep) {
    DeskEnv env(bundle.model, cfg.env, Rng::derive_seed(opt.seed, 5000 + ep));
    env.reset();
    env.set_alpha(opt.alpha);
    if (ep == 0 && opt.trajectory_dump) {
      env.attach_recorder(opt.trajectory_dump, cfg.hash());
    }
    controller.reset_env(0);
    bool done = false;
    while (!done) {
      Eigen::VectorXd action = bundle_action(bundle, env, 0, &controller);
      done = env.step(action).done;
    }
    EpisodeSummary s = env.episode_summary();
    if (s.fell) {
      ++falls;
      continue;  // means accumulate over completed episodes only
    }
    upper_errors.push_back(s.mean_upper_error);
    root_errors.push_back(s.mean_root_error);
    lin_errors.push_back(s.mean_root_lin_error);
    ang_errors.push_back(s.mean_root_ang_error);
    feas.push_back(s.mean_feasibility_scale);
  }

  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  };
  auto stdev = [&](const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / (v.size() - 1));
  };

  row.episodes = static_cast<int>(upper_errors.size());
  row.fall_rate = static_cast<double>(falls) / opt.episodes;
  row.upper_error_mean = mean(upper_errors);
  row.upper_error_std = stdev(upper_errors);
  row.root_error_mean = mean(root_errors);
  row.root_error_std = stdev(root_errors);
  row.root_lin_error_mean = mean(lin_errors);
  row.root_ang_error_mean = mean(ang_errors);
  row.feasibility_scale_mean = mean(feas);
  return row;
}

/// Full grid over checkpoints x force levels. Missing checkpoints produce an
/// absent row and the sweep continues.
inline MetricsReport sweep(const std::vector<std::string>& checkpoint_paths,
                           const std::vector<double>& levels, int episodes,
                           std::uint64_t seed) {
  MetricsReport report;
  report.seed = seed;
  for (const std::string& path : checkpoint_paths) {
    std::optional<PolicyBundle> bundle;
    try {
      bundle = checkpoint_load(path);
    } catch (const std::exception&) {
      bundle.reset();
    }
    for (double level : levels) {
      if (!bundle) {
        MetricsRow row;
        row.present = false;
        row.mode = std::filesystem::path(path).stem().string();
        row.curriculum = "missing";
        row.force_level = level;
        report.rows.push_back(row);
        continue;
      }
      EvalOptions opt;
      opt.alpha = level;
      opt.episodes = episodes;
      opt.seed = seed;
      report.rows.push_back(eval_policy(*bundle, opt));
      if (report.config_hash.empty()) report.config_hash = bundle->config.hash();
    }
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const MetricsRow& a, const MetricsRow& b) {
                     if (a.mode != b.mode) return a.mode < b.mode;
                     if (a.curriculum != b.curriculum) return a.curriculum < b.curriculum;
                     return a.force_level < b.force_level;
                   });
  return report;
}

inline std::string metrics_csv(const MetricsReport& report) {
  std::ostringstream out;
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  out << "# falcon-metrics v1 config_hash=" << report.config_hash
      << " seed=" << report.seed << "\n";
  out << "mode,curriculum,force_level,present,episodes,attempted,fall_rate,"
         "upper_error_mean,upper_error_std,root_error_mean,root_error_std,"
         "root_lin_error_mean,root_ang_error_mean,feasibility_scale_mean\n";
  for (const MetricsRow& r : report.rows) {
    out << r.mode << "," << r.curriculum << "," << fmt(r.force_level) << ","
        << (r.present ? 1 : 0) << "," << r.episodes << "," << r.attempted << ","
        << fmt(r.fall_rate) << "," << fmt(r.upper_error_mean) << ","
        << fmt(r.upper_error_std) << "," << fmt(r.root_error_mean) << ","
        << fmt(r.root_error_std) << "," << fmt(r.root_lin_error_mean) << ","
        << fmt(r.root_ang_error_mean) << "," << fmt(r.feasibility_scale_mean) << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Envelope report
// ---------------------------------------------------------------------------

/// Samples random within-limit arm poses and reports the per-axis bounds
/// before and after clipping. Returns the CSV text.
inline std::string envelope_report(const RobotModel& model, int poses, std::uint64_t seed,
                                   const ClipBox& clip, double epsilon = 1e-6) {
  Rng rng(seed);
  std::ostringstream out;
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  out << "# falcon-envelope v1 config_hash=" << hash_hex(serialize_model(model))
      << " seed=" << seed << " format_version=1\n";
  out << "pose_id,axis,f_min,f_max,clip_min,clip_max\n";
  const char* axes = "xyz";
  const Eigen::Vector3d gravity(0.0, 0.0, -9.81);
  std::vector<double> widths;
  for (int p = 0; p < poses; ++p) {
    int arm_index = p % static_cast<int>(model.arms.size());
    const ArmChain& arm = model.arm(arm_index);
    ArmPose pose;
    pose.arm_index = arm_index;
    pose.joint_positions.resize(arm.joint_count());
    for (int j = 0; j < arm.joint_count(); ++j) {
      const JointSpec& spec = arm.segments[j].joint;
      pose.joint_positions[j] = rng.uniform(spec.position_lower, spec.position_upper);
    }
    Eigen::VectorXd tau_lim = arm.torque_limits();
    Eigen::VectorXd tau_g = gravity_torque(model, pose, gravity);
    if (!gravity_feasible(tau_lim, tau_g)) {
      for (int i = 0; i < 3; ++i) {
        out << p << "," << axes[i] << ",0,0," << fmt(clip.lo[i]) << ","
            << fmt(clip.hi[i]) << "\n";
      }
      continue;
    }
    ArmKinematics fk = forward_kinematics(model, pose);
    Eigen::Matrix3Xd jac = point_jacobian(fk, fk.ee_distal_point);
    ForceEnvelope env = admissible_bounds(jac, tau_lim, tau_g, epsilon, clip);
    for (int i = 0; i < 3; ++i) {
      out << p << "," << axes[i] << "," << fmt(env.f_min[i]) << "," << fmt(env.f_max[i])
          << "," << fmt(clip.lo[i]) << "," << fmt(clip.hi[i]) << "\n";
      widths.push_back(env.clipped_max()[i] - env.clipped_min()[i]);
    }
  }
  // summary quantiles of the clipped widths as trailing comment rows
  if (!widths.empty()) {
    std::sort(widths.begin(), widths.end());
    auto quantile = [&](double q) {
      size_t idx = static_cast<size_t>(q * (widths.size() - 1));
      return widths[idx];
    };
    out << "# clipped_width_quantiles p10=" << fmt(quantile(0.10))
        << " p50=" << fmt(quantile(0.50)) << " p90=" << fmt(quantile(0.90)) << "\n";
  }
  return out.str();
}

}  // namespace falcon
