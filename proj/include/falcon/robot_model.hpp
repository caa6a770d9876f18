#pragma once

#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "falcon/text_format.hpp"

namespace falcon {

struct JointSpec {
  std::string name;
  std::string parent;                 // parent link, or "base" for chain roots
  Eigen::Vector3d axis;               // unit, in the joint frame
  Eigen::Vector3d origin_translation; // from parent link frame (m)
  Eigen::Vector3d origin_rotation;    // intrinsic Euler XYZ (rad)
  double position_lower = 0.0;
  double position_upper = 0.0;
  double torque_limit = 0.0;          // N*m, symmetric
  double default_position = 0.0;
  double kp = 0.0;                    // N*m/rad
  double kd = 0.0;                    // N*m*s/rad
  double effective_inertia = 0.0;     // kg*m^2, diagonal arm dynamics
  double viscous_friction = 0.0;      // N*m*s/rad
};

struct LinkSpec {
  std::string name;
  double mass = 0.0;            // kg
  Eigen::Vector3d com_offset;   // in link frame (m)
};

struct BaseSpec {
  double mass = 0.0;                  // kg
  Eigen::Vector3d inertia_diag;       // kg*m^2
  double default_height = 0.0;        // m
};

/// One (joint, child link) pair of a serial arm chain.
struct ArmSegment {
  JointSpec joint;
  LinkSpec link;
};

struct ArmChain {
  std::string side;                    // "left" or "right"
  Eigen::Vector3d mount;               // shoulder mount offset in base frame
  std::vector<ArmSegment> segments;    // root to tip
  Eigen::Vector3d ee_distal_offset;    // distal force marker, tip link frame

  int joint_count() const { return static_cast<int>(segments.size()); }
  const std::string& ee_link_name() const { return segments.back().link.name; }

  Eigen::VectorXd default_positions() const {
    Eigen::VectorXd q(joint_count());
    for (int j = 0; j < joint_count(); ++j) q[j] = segments[j].joint.default_position;
    return q;
  }
  Eigen::VectorXd torque_limits() const {
    Eigen::VectorXd t(joint_count());
    for (int j = 0; j < joint_count(); ++j) t[j] = segments[j].joint.torque_limit;
    return t;
  }
};

/// Articulated robot description: a (possibly fixed) surrogate base plus one
/// or two serial arm chains. Immutable after load; all consumers share it.
struct RobotModel {
  std::string name;
  BaseSpec base;
  int lower_dof_count = 0;  // 0 (fixed base) or 4 (x, y, z, yaw)
  std::vector<ArmChain> arms;

  int upper_dof_count() const {
    int n = 0;
    for (const auto& a : arms) n += a.joint_count();
    return n;
  }
  int dof_count() const { return lower_dof_count + upper_dof_count(); }

  double total_arm_mass() const {
    double m = 0.0;
    for (const auto& a : arms)
      for (const auto& s : a.segments) m += s.link.mass;
    return m;
  }

  const ArmChain& arm(int index) const { return arms.at(index); }
};

namespace detail {

inline void check(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

}  // namespace detail

inline void validate_model(const RobotModel& m) {
  using detail::check;
  check(!m.name.empty(), "model name must not be empty");
  check(m.base.mass >= 0.0, "base mass must be >= 0");
  check(m.base.default_height >= 0.0, "base default_height must be >= 0");
  check(m.lower_dof_count == 0 || m.lower_dof_count == 4,
        "lower_dof_count must be 0 (fixed base) or 4 (x, y, z, yaw)");
  check(!m.arms.empty() && m.arms.size() <= 2, "model needs 1 or 2 arm chains");

  std::set<std::string> sides, joint_names, link_names;
  int joints_per_arm = m.arms.front().joint_count();
  for (const auto& arm : m.arms) {
    check(arm.side == "left" || arm.side == "right",
          "arm side must be left or right, got '" + arm.side + "'");
    check(sides.insert(arm.side).second, "duplicate arm side '" + arm.side + "'");
    check(!arm.segments.empty(), arm.side + " arm has no joints");
    check(arm.joint_count() == joints_per_arm,
          "arms must have equal joint counts (" + std::to_string(joints_per_arm) +
              " vs " + std::to_string(arm.joint_count()) + ")");

    std::string expected_parent = "base";
    for (const auto& seg : arm.segments) {
      const JointSpec& j = seg.joint;
      check(joint_names.insert(j.name).second, "duplicate joint name '" + j.name + "'");
      check(j.parent == expected_parent,
            "joint '" + j.name + "' parent must be '" + expected_parent + "', got '" +
                j.parent + "'");
      check(std::abs(j.axis.norm() - 1.0) <= 1e-9,
            "joint '" + j.name + "' axis must have unit norm");
      check(j.position_lower < j.position_upper,
            "joint '" + j.name + "' position limits must satisfy lower < upper");
      check(j.default_position >= j.position_lower && j.default_position <= j.position_upper,
            "joint '" + j.name + "' default_position outside position limits");
      check(j.torque_limit >= 0.0, "joint '" + j.name + "' torque_limit must be >= 0");
      check(j.effective_inertia > 0.0,
            "joint '" + j.name + "' effective_inertia must be > 0");
      check(j.viscous_friction >= 0.0,
            "joint '" + j.name + "' viscous_friction must be >= 0");
      check(j.kp >= 0.0 && j.kd >= 0.0, "joint '" + j.name + "' pd gains must be >= 0");

      const LinkSpec& l = seg.link;
      check(link_names.insert(l.name).second, "duplicate link name '" + l.name + "'");
      check(l.mass >= 0.0, "link '" + l.name + "' mass must be >= 0");
      expected_parent = l.name;
    }

    // Distal force marker lies at or beyond the CoM along the link axis.
    const LinkSpec& ee = arm.segments.back().link;
    double com_norm = ee.com_offset.norm();
    if (com_norm > 0.0) {
      double along = arm.ee_distal_offset.dot(ee.com_offset) / com_norm;
      check(along >= com_norm - 1e-12,
            "ee link '" + ee.name + "' distal marker must lie at or beyond the CoM");
    }
  }
}

// ---------------------------------------------------------------------------
// Model file format: one [base] section, then repeated [joint]/[link] pairs.
// Chain roots carry `parent = base` and a `mount` offset; each [link] binds to
// the [joint] immediately before it; the tip link carries `distal`.
// ---------------------------------------------------------------------------

inline RobotModel parse_model(const std::string& text) {
  std::vector<Section> sections = parse_sections(text);
  if (sections.empty() || sections.front().name() != "base") {
    throw ParseError("model file must start with a [base] section");
  }

  RobotModel m;
  const Section& base = sections.front();
  m.name = base.get_string("name");
  m.base.mass = base.get_scalar("mass");
  m.base.inertia_diag = base.get_vec3("inertia");
  m.base.default_height = base.get_scalar("default_height");
  m.lower_dof_count = base.get_int("lower_dof_count");
  base.reject_unconsumed();

  // link name -> (arm index, whether it already has a child joint)
  struct LinkRef {
    size_t arm;
    bool has_child = false;
  };
  std::map<std::string, LinkRef> links;
  std::map<size_t, std::string> distal_link;  // arm index -> link carrying `distal`

  for (size_t i = 1; i < sections.size(); ++i) {
    const Section& js = sections[i];
    if (js.name() != "joint") {
      throw ParseError("expected [joint] section at line " + std::to_string(js.line()) +
                       ", got [" + js.name() + "]");
    }
    if (i + 1 >= sections.size() || sections[i + 1].name() != "link") {
      throw ParseError("[joint] at line " + std::to_string(js.line()) +
                       " must be followed by its [link] section");
    }
    const Section& ls = sections[++i];

    ArmSegment seg;
    JointSpec& j = seg.joint;
    j.name = js.get_string("name");
    j.parent = js.get_string("parent");
    j.axis = js.get_vec3("axis");
    j.origin_translation = js.get_vec3("origin");
    j.origin_rotation = js.get_vec3("origin_rpy");
    auto limits = js.get_pair("limits");
    j.position_lower = limits.first;
    j.position_upper = limits.second;
    j.torque_limit = js.get_scalar("torque_limit");
    j.default_position = js.get_scalar("default");
    j.kp = js.get_scalar("kp");
    j.kd = js.get_scalar("kd");
    j.effective_inertia = js.get_scalar("inertia");
    j.viscous_friction = js.get_scalar("friction");

    size_t arm_index;
    if (j.parent == "base") {
      ArmChain arm;
      arm.side = js.get_string("side");
      arm.mount = js.get_vec3("mount");
      arm_index = m.arms.size();
      m.arms.push_back(arm);
    } else {
      auto it = links.find(j.parent);
      if (it == links.end()) {
        throw ParseError("joint '" + j.name + "' parent link '" + j.parent +
                         "' is not defined above it");
      }
      if (it->second.has_child) {
        throw ParseError("link '" + j.parent + "' already has a child joint (chains are serial)");
      }
      it->second.has_child = true;
      arm_index = it->second.arm;
    }
    js.reject_unconsumed();

    LinkSpec& l = seg.link;
    l.name = ls.get_string("name");
    l.mass = ls.get_scalar("mass");
    l.com_offset = ls.get_vec3("com");
    bool has_distal = ls.has("distal");
    Eigen::Vector3d distal = has_distal ? ls.get_vec3("distal") : Eigen::Vector3d::Zero();
    ls.reject_unconsumed();

    m.arms[arm_index].segments.push_back(seg);
    links[l.name] = LinkRef{arm_index, false};
    if (has_distal) {
      if (distal_link.count(arm_index)) {
        throw ParseError("arm '" + m.arms[arm_index].side +
                         "' has more than one distal marker");
      }
      distal_link[arm_index] = l.name;
      m.arms[arm_index].ee_distal_offset = distal;
    }
  }

  // The distal marker must sit on each arm's tip link, and only there.
  for (size_t a = 0; a < m.arms.size(); ++a) {
    auto it = distal_link.find(a);
    if (it == distal_link.end()) {
      throw ParseError("arm '" + m.arms[a].side +
                       "' tip link must carry a distal marker");
    }
    if (it->second != m.arms[a].ee_link_name()) {
      throw ParseError("distal marker on link '" + it->second +
                       "' which is not the tip of arm '" + m.arms[a].side + "'");
    }
  }

  validate_model(m);
  return m;
}

inline RobotModel load_model(const std::string& path) {
  return parse_model(read_file(path));
}

inline std::string serialize_model(const RobotModel& m) {
  std::ostringstream out;
  auto vec = [](const Eigen::Vector3d& v) {
    return format_double(v[0]) + " " + format_double(v[1]) + " " + format_double(v[2]);
  };
  out << "[base]\n";
  out << "name = " << m.name << "\n";
  out << "mass = " << format_double(m.base.mass) << "\n";
  out << "inertia = " << vec(m.base.inertia_diag) << "\n";
  out << "default_height = " << format_double(m.base.default_height) << "\n";
  out << "lower_dof_count = " << m.lower_dof_count << "\n";
  for (const auto& arm : m.arms) {
    for (size_t s = 0; s < arm.segments.size(); ++s) {
      const JointSpec& j = arm.segments[s].joint;
      const LinkSpec& l = arm.segments[s].link;
      out << "\n[joint]\n";
      out << "name = " << j.name << "\n";
      out << "parent = " << j.parent << "\n";
      if (j.parent == "base") {
        out << "side = " << arm.side << "\n";
        out << "mount = " << vec(arm.mount) << "\n";
      }
      out << "axis = " << vec(j.axis) << "\n";
      out << "origin = " << vec(j.origin_translation) << "\n";
      out << "origin_rpy = " << vec(j.origin_rotation) << "\n";
      out << "limits = " << format_double(j.position_lower) << " "
          << format_double(j.position_upper) << "\n";
      out << "torque_limit = " << format_double(j.torque_limit) << "\n";
      out << "default = " << format_double(j.default_position) << "\n";
      out << "kp = " << format_double(j.kp) << "\n";
      out << "kd = " << format_double(j.kd) << "\n";
      out << "inertia = " << format_double(j.effective_inertia) << "\n";
      out << "friction = " << format_double(j.viscous_friction) << "\n";
      out << "\n[link]\n";
      out << "name = " << l.name << "\n";
      out << "mass = " << format_double(l.mass) << "\n";
      out << "com = " << vec(l.com_offset) << "\n";
      if (s + 1 == arm.segments.size()) {
        out << "distal = " << vec(arm.ee_distal_offset) << "\n";
      }
    }
  }
  return out.str();
}

inline bool models_equal(const RobotModel& a, const RobotModel& b) {
  return serialize_model(a) == serialize_model(b);
}

// ---------------------------------------------------------------------------
// Builtin fixtures. The same text ships as files under models/.
// ---------------------------------------------------------------------------

inline const char* toy_arm_text() {
  return R"(# Fixed-base planar 2-DoF arm used by the analytic oracles.
[base]
name = toy-arm
mass = 1.0
inertia = 0.1 0.1 0.1
default_height = 0.0
lower_dof_count = 0

[joint]
name = shoulder
parent = base
side = left
mount = 0 0 0
axis = 0 -1 0
origin = 0 0 0
origin_rpy = 0 0 0
limits = -3.1 3.1
torque_limit = 10
default = 0
kp = 20
kd = 1.0
inertia = 0.02
friction = 0.05

[link]
name = upper_link
mass = 1.0
com = 0.15 0 0

[joint]
name = elbow
parent = upper_link
axis = 0 -1 0
origin = 0.3 0 0
origin_rpy = 0 0 0
limits = -3.1 3.1
torque_limit = 10
default = 0
kp = 20
kd = 1.0
inertia = 0.02
friction = 0.05

[link]
name = lower_link
mass = 1.0
com = 0.15 0 0
distal = 0.3 0 0
)";
}

inline const char* mini_humanoid_text() {
  return R"(# Desk-scale humanoid surrogate: floating 4-DoF base + two 4-DoF arms.
# Torque limits descend along each chain; the wrist is deliberately weak.
[base]
name = mini-humanoid
mass = 12.0
inertia = 0.35 0.30 0.20
default_height = 0.75
lower_dof_count = 4

[joint]
name = left_shoulder_pitch
parent = base
side = left
mount = 0 0.16 0.30
axis = 0 1 0
origin = 0 0 0
origin_rpy = 0 0 0
limits = -2.0 2.0
torque_limit = 25
default = 0.3
kp = 80
kd = 3.0
inertia = 0.05
friction = 0.05

[link]
name = left_shoulder_block
mass = 0.3
com = 0 0 -0.03

[joint]
name = left_shoulder_roll
parent = left_shoulder_block
axis = 1 0 0
origin = 0 0 -0.06
origin_rpy = 0 0 0
limits = -0.5 2.2
torque_limit = 25
default = 0.12
kp = 80
kd = 3.0
inertia = 0.05
friction = 0.05

[link]
name = left_upper_arm
mass = 0.8
com = 0 0 -0.10

[joint]
name = left_elbow
parent = left_upper_arm
axis = 0 1 0
origin = 0 0 -0.21
origin_rpy = 0 0 0
limits = -2.2 0.3
torque_limit = 14
default = -0.5
kp = 60
kd = 2.2
inertia = 0.03
friction = 0.04

[link]
name = left_forearm
mass = 0.6
com = 0 0 -0.09

[joint]
name = left_wrist
parent = left_forearm
axis = 1 0 0
origin = 0 0 -0.18
origin_rpy = 0 0 0
limits = -1.4 1.4
torque_limit = 5
default = 0
kp = 30
kd = 1.1
inertia = 0.01
friction = 0.02

[link]
name = left_hand
mass = 0.4
com = 0 0 -0.06
distal = 0 0 -0.13

[joint]
name = right_shoulder_pitch
parent = base
side = right
mount = 0 -0.16 0.30
axis = 0 1 0
origin = 0 0 0
origin_rpy = 0 0 0
limits = -2.0 2.0
torque_limit = 25
default = 0.3
kp = 80
kd = 3.0
inertia = 0.05
friction = 0.05

[link]
name = right_shoulder_block
mass = 0.3
com = 0 0 -0.03

[joint]
name = right_shoulder_roll
parent = right_shoulder_block
axis = 1 0 0
origin = 0 0 -0.06
origin_rpy = 0 0 0
limits = -2.2 0.5
torque_limit = 25
default = -0.12
kp = 80
kd = 3.0
inertia = 0.05
friction = 0.05

[link]
name = right_upper_arm
mass = 0.8
com = 0 0 -0.10

[joint]
name = right_elbow
parent = right_upper_arm
axis = 0 1 0
origin = 0 0 -0.21
origin_rpy = 0 0 0
limits = -2.2 0.3
torque_limit = 14
default = -0.5
kp = 60
kd = 2.2
inertia = 0.03
friction = 0.04

[link]
name = right_forearm
mass = 0.6
com = 0 0 -0.09

[joint]
name = right_wrist
parent = right_forearm
axis = 1 0 0
origin = 0 0 -0.18
origin_rpy = 0 0 0
limits = -1.4 1.4
torque_limit = 5
default = 0
kp = 30
kd = 1.1
inertia = 0.01
friction = 0.02

[link]
name = right_hand
mass = 0.4
com = 0 0 -0.06
distal = 0 0 -0.13
)";
}

inline std::vector<RobotModel> builtin_models() {
  return {parse_model(toy_arm_text()), parse_model(mini_humanoid_text())};
}

inline std::optional<RobotModel> find_builtin(const std::string& name) {
  if (name == "toy-arm") return parse_model(toy_arm_text());
  if (name == "mini-humanoid") return parse_model(mini_humanoid_text());
  return std::nullopt;
}

/// Resolves a model reference: builtin name first, then filesystem path.
inline RobotModel resolve_model(const std::string& name_or_path) {
  if (auto m = find_builtin(name_or_path)) return *m;
  return load_model(name_or_path);
}

}  // namespace falcon
