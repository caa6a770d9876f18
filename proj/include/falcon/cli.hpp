#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "falcon/eval_harness.hpp"
#include "falcon/trainer.hpp"

namespace falcon {

namespace cli_detail {

inline TrainerConfig load_train_config(const std::string& path) {
  std::vector<Section> sections = parse_sections(read_file(path));
  for (const Section& s : sections) {
    if (s.name() == "train") return TrainerConfig::from_section(s);
  }
  throw ParseError("config file has no [train] section: " + path);
}

struct EvalFileConfig {
  int episodes = 16;
  std::vector<double> levels = {0.0, 0.5, 1.0};
  std::uint64_t seed = 7;
};

inline EvalFileConfig load_eval_config(const std::string& path) {
  EvalFileConfig cfg;
  std::vector<Section> sections = parse_sections(read_file(path));
  for (const Section& s : sections) {
    if (s.name() != "eval") continue;
    if (s.has("episodes")) cfg.episodes = s.get_int("episodes");
    if (s.has("seed")) cfg.seed = static_cast<std::uint64_t>(s.get_int("seed"));
    if (s.has("levels")) {
      Eigen::VectorXd v = s.get_vector("levels");
      cfg.levels.assign(v.data(), v.data() + v.size());
    }
    s.reject_unconsumed();
  }
  return cfg;
}

inline void print_model_info(const RobotModel& m, std::ostream& out) {
  out << "model: " << m.name << "\n";
  out << "  base: mass " << m.base.mass << " kg, default height "
      << m.base.default_height << " m, lower dof " << m.lower_dof_count << "\n";
  out << "  upper dof: " << m.upper_dof_count() << " (" << m.arms.size()
      << " arm chains)\n";
  for (const auto& arm : m.arms) {
    out << "  [" << arm.side << "] mount " << arm.mount.transpose() << "\n";
    for (const auto& seg : arm.segments) {
      const JointSpec& j = seg.joint;
      out << "    " << j.name << ": axis " << j.axis.transpose() << ", limits ["
          << j.position_lower << ", " << j.position_upper << "] rad, torque "
          << j.torque_limit << " N*m, kp " << j.kp << ", kd " << j.kd << "\n";
    }
    out << "    ee link: " << arm.ee_link_name() << ", distal "
        << arm.ee_distal_offset.transpose() << " m\n";
  }
}

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }
};

inline CsvTable read_csv(const std::string& path) {
  CsvTable table;
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  bool have_header = false;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!have_header) {
      table.columns = split(line);
      have_header = true;
    } else {
      table.rows.push_back(split(line));
    }
  }
  return table;
}

/// Emits the training-curve CSVs (force scale, tracking errors, action noise
/// std) for every training log found under run_dir.
inline int plot_data(const std::string& run_dir, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> logs;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "training_log.csv") {
      logs.push_back(entry.path());
    }
  }
  std::sort(logs.begin(), logs.end());
  if (logs.empty()) {
    std::cerr << "no training_log.csv found under " << run_dir << "\n";
    return 2;
  }
  fs::create_directories(out_dir);
  std::ofstream alpha_csv(fs::path(out_dir) / "alpha_curve.csv");
  std::ofstream err_csv(fs::path(out_dir) / "tracking_error_curve.csv");
  std::ofstream noise_csv(fs::path(out_dir) / "action_noise_std.csv");
  alpha_csv << "# falcon-plot-data v1 source=" << run_dir << "\n";
  alpha_csv << "run,update,alpha_g\n";
  err_csv << "# falcon-plot-data v1 source=" << run_dir << "\n";
  err_csv << "run,update,upper_tracking_error,root_tracking_error\n";
  noise_csv << "# falcon-plot-data v1 source=" << run_dir << "\n";
  noise_csv << "run,update,agent,noise_std\n";

  for (const auto& path : logs) {
    CsvTable t = read_csv(path.string());
    std::string run = path.parent_path().filename().string();
    int c_update = t.column("update");
    int c_alpha = t.column("alpha_g");
    int c_up = t.column("upper_tracking_error");
    int c_root = t.column("root_tracking_error");
    std::vector<std::pair<std::string, int>> noise_cols;
    for (size_t i = 0; i < t.columns.size(); ++i) {
      const std::string& name = t.columns[i];
      auto pos = name.find("_noise_std");
      if (pos != std::string::npos) {
        noise_cols.emplace_back(name.substr(0, pos), static_cast<int>(i));
      }
    }
    for (const auto& row : t.rows) {
      alpha_csv << run << "," << row[c_update] << "," << row[c_alpha] << "\n";
      err_csv << run << "," << row[c_update] << "," << row[c_up] << ","
              << row[c_root] << "\n";
      for (const auto& [agent, col] : noise_cols) {
        noise_csv << run << "," << row[c_update] << "," << agent << "," << row[col]
                  << "\n";
      }
    }
  }
  std::cout << "wrote " << out_dir << "/alpha_curve.csv, tracking_error_curve.csv, "
            << "action_noise_std.csv from " << logs.size() << " run(s)\n";
  return 0;
}

}  // namespace cli_detail

/// Command-line entry point. Returns 0 on success, 1 on usage/config errors,
/// 2 on runtime failures.
inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"force-adaptive dual-agent loco-manipulation testbed"};
  app.require_subcommand(1);

  // model-info
  auto* info = app.add_subcommand("model-info", "describe a robot model");
  std::string info_model;
  info->add_option("model", info_model, "builtin name or model file path")->required();

  // envelope
  auto* envelope = app.add_subcommand("envelope", "admissible-force envelope report");
  std::string env_model, env_out, env_clip = "narrow";
  int env_poses = 100;
  std::uint64_t env_seed = 7;
  envelope->add_option("model", env_model, "builtin name or model file path")->required();
  envelope->add_option("--poses", env_poses, "number of random poses");
  envelope->add_option("--out", env_out, "output CSV path (default stdout)");
  envelope->add_option("--seed", env_seed, "random seed");
  envelope->add_option("--clip", env_clip, "clip box preset: narrow|wide");

  // train
  auto* train = app.add_subcommand("train", "train a policy from a config file");
  std::string train_config, train_out = "run";
  std::int64_t train_seed = -1;
  bool train_quiet = false;
  train->add_option("config", train_config, "config file with a [train] section")
      ->required();
  train->add_option("--seed", train_seed, "override the config seed");
  train->add_option("--out", train_out, "output directory");
  train->add_flag("--quiet", train_quiet, "suppress progress lines");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at one force level");
  std::string eval_ckpt, eval_out, eval_dump;
  double eval_alpha = 0.0;
  int eval_episodes = 16;
  std::uint64_t eval_seed = 7;
  eval->add_option("checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--alpha", eval_alpha, "force level in [0,1]");
  eval->add_option("--episodes", eval_episodes, "evaluation episodes");
  eval->add_option("--seed", eval_seed, "evaluation seed");
  eval->add_option("--out", eval_out, "metrics CSV path (default stdout)");
  eval->add_option("--dump", eval_dump, "trajectory dump of the first episode");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "force-level sweep over checkpoints");
  std::string sweep_dir, sweep_out, sweep_config;
  int sweep_episodes = 16;
  std::uint64_t sweep_seed = 7;
  std::vector<double> sweep_levels = {0.0, 0.5, 1.0};
  sweep_cmd->add_option("run-dir", sweep_dir, "directory scanned for *.ckpt")->required();
  sweep_cmd->add_option("--episodes", sweep_episodes, "episodes per cell");
  sweep_cmd->add_option("--levels", sweep_levels, "force levels");
  sweep_cmd->add_option("--seed", sweep_seed, "evaluation seed");
  sweep_cmd->add_option("--config", sweep_config, "config file with an [eval] section");
  sweep_cmd->add_option("--out", sweep_out, "metrics CSV path (default stdout)");

  // plot-data
  auto* plot = app.add_subcommand("plot-data", "emit training-curve CSVs from run logs");
  std::string plot_dir, plot_out;
  plot->add_option("run-dir", plot_dir, "directory scanned for training_log.csv")
      ->required();
  plot->add_option("--out", plot_out, "output directory (default run-dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*info) {
      cli_detail::print_model_info(resolve_model(info_model), std::cout);
      return 0;
    }
    if (*envelope) {
      ClipBox clip;
      if (env_clip == "narrow") {
        clip = ClipBox::narrow();
      } else if (env_clip == "wide") {
        clip = ClipBox::wide();
      } else {
        std::cerr << "--clip must be narrow or wide\n";
        return 1;
      }
      std::string csv = envelope_report(resolve_model(env_model), env_poses, env_seed, clip);
      if (env_out.empty()) {
        std::cout << csv;
      } else {
        write_file(env_out, csv);
        std::cout << "wrote " << env_out << "\n";
      }
      return 0;
    }
    if (*train) {
      TrainerConfig cfg;
      try {
        cfg = cli_detail::load_train_config(train_config);
      } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
      }
      if (train_seed >= 0) cfg.seed = static_cast<std::uint64_t>(train_seed);
      std::filesystem::create_directories(train_out);
      write_file(train_out + "/config.txt", cfg.to_text());
      std::ofstream log_csv(train_out + "/training_log.csv");
      Trainer trainer(cfg);
      trainer.train(&log_csv, !train_quiet);
      trainer.bundle().alpha_g = trainer.alpha();
      checkpoint_save(train_out + "/checkpoint.ckpt", trainer.bundle());
      std::cout << "wrote " << train_out << "/checkpoint.ckpt (alpha_g="
                << trainer.alpha() << ", episodes=" << trainer.completed_episodes()
                << ")\n";
      return 0;
    }
    if (*eval) {
      PolicyBundle bundle = checkpoint_load(eval_ckpt);
      EvalOptions opt;
      opt.alpha = eval_alpha;
      opt.episodes = eval_episodes;
      opt.seed = eval_seed;
      std::ofstream dump_stream;
      if (!eval_dump.empty()) {
        dump_stream.open(eval_dump);
        opt.trajectory_dump = &dump_stream;
      }
      MetricsReport report;
      report.seed = eval_seed;
      report.config_hash = bundle.config.hash();
      report.rows.push_back(eval_policy(bundle, opt));
      std::string csv = metrics_csv(report);
      if (eval_out.empty()) {
        std::cout << csv;
      } else {
        write_file(eval_out, csv);
        std::cout << "wrote " << eval_out << "\n";
      }
      return 0;
    }
    if (*sweep_cmd) {
      if (!sweep_config.empty()) {
        cli_detail::EvalFileConfig file_cfg;
        try {
          file_cfg = cli_detail::load_eval_config(sweep_config);
        } catch (const std::exception& e) {
          std::cerr << "config error: " << e.what() << "\n";
          return 1;
        }
        sweep_episodes = file_cfg.episodes;
        sweep_levels = file_cfg.levels;
        sweep_seed = file_cfg.seed;
      }
      std::vector<std::string> checkpoints;
      for (const auto& entry : std::filesystem::directory_iterator(sweep_dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ckpt") {
          checkpoints.push_back(entry.path().string());
        }
      }
      std::sort(checkpoints.begin(), checkpoints.end());
      if (checkpoints.empty()) {
        std::cerr << "no .ckpt files under " << sweep_dir << "\n";
        return 2;
      }
      MetricsReport report = sweep(checkpoints, sweep_levels, sweep_episodes, sweep_seed);
      std::string csv = metrics_csv(report);
      if (sweep_out.empty()) {
        std::cout << csv;
      } else {
        write_file(sweep_out, csv);
        std::cout << "wrote " << sweep_out << "\n";
      }
      return 0;
    }
    if (*plot) {
      return cli_detail::plot_data(plot_dir, plot_out.empty() ? plot_dir : plot_out);
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace falcon
