// Copyright 2026 The Balance Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "balance/config.h"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "balance/errors.h"

namespace balance {
namespace {

using Json = nlohmann::ordered_json;

constexpr double kPi = 3.14159265358979323846;

// ---------------------------------------------------------------------------
// Plant parameter tables

struct ParamRef {
  const char* name;
  double* value;
  bool may_be_zero;
};

std::vector<ParamRef> furuta_table(FurutaParams& p) {
  return {{"arm_mass", &p.arm_mass, false},
          {"arm_length", &p.arm_length, false},
          {"pendulum_mass", &p.pendulum_mass, false},
          {"pendulum_length", &p.pendulum_length, false},
          {"rotor_inertia", &p.rotor_inertia, true},
          {"arm_friction", &p.arm_friction, true},
          {"pendulum_friction", &p.pendulum_friction, true},
          {"gravity", &p.gravity, false}};
}

std::vector<std::string> leg_names() {
  std::vector<std::string> names;
  for (int i = 1; i <= 3; ++i) {
    for (const char* f : {"mass", "length", "com", "inertia", "friction"}) {
      names.push_back("link" + std::to_string(i) + "_" + f);
    }
  }
  names.push_back("actuator1_inertia");
  names.push_back("actuator2_inertia");
  names.push_back("gravity");
  return names;
}

double* leg_slot(LegParams& p, const std::string& name, bool* may_be_zero) {
  *may_be_zero = true;
  if (name == "gravity") {
    *may_be_zero = false;
    return &p.gravity;
  }
  if (name == "actuator1_inertia") return &p.actuator_inertia[0];
  if (name == "actuator2_inertia") return &p.actuator_inertia[1];
  if (name.size() > 6 && name.compare(0, 4, "link") == 0 && name[5] == '_') {
    const int i = name[4] - '1';
    if (i < 0 || i > 2) return nullptr;
    const std::string field = name.substr(6);
    LegLink& l = p.links[i];
    if (field == "inertia") return &l.inertia;
    if (field == "friction") return &l.friction;
    *may_be_zero = false;
    if (field == "mass") return &l.mass;
    if (field == "length") return &l.length;
    if (field == "com") return &l.com;
  }
  return nullptr;
}

void check_param_value(const std::string& field, double v, bool may_be_zero) {
  if (!std::isfinite(v) || v < 0.0 || (!may_be_zero && v == 0.0)) {
    throw ConfigError(field, may_be_zero ? "must be finite and >= 0" : "must be finite and > 0");
  }
}

// ---------------------------------------------------------------------------
// JSON helpers

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void reject_unknown(const Json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(join(path, it.key()), "unknown key");
  }
}

double get_double(const Json& j, const std::string& field) {
  if (!j.is_number()) throw ConfigError(field, "expected a number");
  return j.get<double>();
}

int get_int(const Json& j, const std::string& field) {
  if (!j.is_number_integer()) throw ConfigError(field, "expected an integer");
  return j.get<int>();
}

bool get_bool(const Json& j, const std::string& field) {
  if (!j.is_boolean()) throw ConfigError(field, "expected true or false");
  return j.get<bool>();
}

std::string get_string(const Json& j, const std::string& field) {
  if (!j.is_string()) throw ConfigError(field, "expected a string");
  return j.get<std::string>();
}

Vec get_vec(const Json& j, const std::string& field) {
  if (!j.is_array()) throw ConfigError(field, "expected an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    v(static_cast<Eigen::Index>(i)) = get_double(j[i], field + "[" + std::to_string(i) + "]");
  }
  return v;
}

Json vec_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

std::map<std::string, double> get_param_map(const Json& j, const std::string& field) {
  if (!j.is_object()) throw ConfigError(field, "expected an object of name: value");
  std::map<std::string, double> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    out[it.key()] = get_double(it.value(), join(field, it.key()));
  }
  return out;
}

Json param_map_json(const std::map<std::string, double>& m) {
  Json j = Json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

std::vector<std::vector<SineTerm>> get_sines(const Json& j, const std::string& field) {
  if (!j.is_array()) throw ConfigError(field, "expected one array of sine terms per joint");
  std::vector<std::vector<SineTerm>> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const std::string fi = field + "[" + std::to_string(i) + "]";
    if (!j[i].is_array()) throw ConfigError(fi, "expected an array of sine terms");
    std::vector<SineTerm> terms;
    for (std::size_t k = 0; k < j[i].size(); ++k) {
      const std::string fk = fi + "[" + std::to_string(k) + "]";
      const Json& t = j[i][k];
      reject_unknown(t, fk, {"amplitude", "omega", "phase"});
      SineTerm s;
      if (t.contains("amplitude")) s.amplitude = get_double(t["amplitude"], fk + ".amplitude");
      if (t.contains("omega")) s.omega = get_double(t["omega"], fk + ".omega");
      if (t.contains("phase")) s.phase = get_double(t["phase"], fk + ".phase");
      terms.push_back(s);
    }
    out.push_back(std::move(terms));
  }
  return out;
}

Json sines_json(const std::vector<std::vector<SineTerm>>& joints) {
  Json a = Json::array();
  for (const auto& terms : joints) {
    Json ja = Json::array();
    for (const auto& s : terms) {
      ja.push_back(Json{{"amplitude", s.amplitude}, {"omega", s.omega}, {"phase", s.phase}});
    }
    a.push_back(ja);
  }
  return a;
}

void read_schedule(const Json& j, const std::string& field, GainSchedule& g) {
  reject_unknown(j, field, {"kp_base", "kp_slope", "kd_base", "kd_slope", "k_low", "k_high"});
  if (j.contains("kp_base")) g.kp_base = get_double(j["kp_base"], field + ".kp_base");
  if (j.contains("kp_slope")) g.kp_slope = get_double(j["kp_slope"], field + ".kp_slope");
  if (j.contains("kd_base")) g.kd_base = get_double(j["kd_base"], field + ".kd_base");
  if (j.contains("kd_slope")) g.kd_slope = get_double(j["kd_slope"], field + ".kd_slope");
  if (j.contains("k_low")) g.k_low = get_double(j["k_low"], field + ".k_low");
  if (j.contains("k_high")) g.k_high = get_double(j["k_high"], field + ".k_high");
}

Json schedule_json(const GainSchedule& g) {
  return Json{{"kp_base", g.kp_base}, {"kp_slope", g.kp_slope}, {"kd_base", g.kd_base},
              {"kd_slope", g.kd_slope}, {"k_low", g.k_low},     {"k_high", g.k_high}};
}

RobotKind parse_robot(const std::string& s) {
  if (s == "furuta") return RobotKind::kFuruta;
  if (s == "leg3") return RobotKind::kLeg3;
  throw ConfigError("robot", "expected 'furuta' or 'leg3', got '" + s + "'");
}

ControllerKind parse_controller(const std::string& s) {
  if (s == "eic-model") return ControllerKind::kEicModel;
  if (s == "eic-gp") return ControllerKind::kEicGp;
  if (s == "peic-gp") return ControllerKind::kPeicGp;
  throw ConfigError("controller", "expected 'eic-model', 'eic-gp' or 'peic-gp', got '" + s + "'");
}

NominalKind parse_nominal(const std::string& s) {
  if (s == "s_n1") return NominalKind::kFurutaS1;
  if (s == "s_n2") return NominalKind::kFurutaS2;
  if (s == "leg-default") return NominalKind::kLegDefault;
  if (s == "custom") return NominalKind::kCustom;
  throw ConfigError("nominal", "expected 's_n1', 's_n2', 'leg-default' or 'custom', got '" + s + "'");
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field, what);
}

void check_schedule(const GainSchedule& g, const std::string& field) {
  require(std::isfinite(g.kp_base) && g.kp_base > 0.0, field + ".kp_base", "must be > 0");
  require(std::isfinite(g.kd_base) && g.kd_base > 0.0, field + ".kd_base", "must be > 0");
  require(std::isfinite(g.kp_slope) && g.kp_slope >= 0.0, field + ".kp_slope", "must be >= 0");
  require(std::isfinite(g.kd_slope) && g.kd_slope >= 0.0, field + ".kd_slope", "must be >= 0");
  require(std::isfinite(g.k_low) && g.k_low > 0.0, field + ".k_low", "must be > 0");
  require(std::isfinite(g.k_high) && g.k_high > g.k_low, field + ".k_high", "must exceed k_low");
}

void check_sines(const std::vector<std::vector<SineTerm>>& joints, int n, const std::string& field) {
  require(static_cast<int>(joints.size()) == n, field,
          "needs one entry per actuated joint (" + std::to_string(n) + ")");
  for (std::size_t i = 0; i < joints.size(); ++i) {
    for (std::size_t k = 0; k < joints[i].size(); ++k) {
      const SineTerm& s = joints[i][k];
      require(std::isfinite(s.amplitude) && std::isfinite(s.omega) && std::isfinite(s.phase),
              field + "[" + std::to_string(i) + "][" + std::to_string(k) + "]", "must be finite");
    }
  }
}

void check_vec(const Vec& v, Eigen::Index size, const std::string& field, bool allow_empty) {
  if (allow_empty && v.size() == 0) return;
  require(v.size() == size, field, "must have length " + std::to_string(size));
  require(v.allFinite(), field, "must be finite");
}

std::vector<SineTerm> sines(double amp, std::initializer_list<double> hz) {
  std::vector<SineTerm> out;
  for (double f : hz) out.push_back({amp, 2.0 * kPi * f, 0.0});
  return out;
}

ExperimentConfig furuta_base() {
  ExperimentConfig c;
  c.robot = RobotKind::kFuruta;
  c.controller = ControllerKind::kEicGp;
  c.nominal = NominalKind::kFurutaS1;
  c.outer = {10, 50, 3, 10, 1e-3, 1e6};
  c.inner = {1000, 500, 100, 200, 1e-3, 1e6};
  c.reference = {{{0.5, 1.0, 0.0}, {0.3, 1.5, 0.0}}};
  c.control_hz = 400.0;
  c.duration = 25.0;
  c.bem_cutoff_hz = 1.0;
  ExcitationSpec& ex = c.excitation;
  ex.torque = {sines(0.5, {0.5, 1.3, 2.1})};
  ex.duration = 20.0;
  ex.episode = 2.0;
  ex.control_hz = 400.0;
  ex.q_lo = Vec(2);
  ex.q_lo << -kPi, -0.6;
  ex.q_hi = -ex.q_lo;
  ex.init_lo = Vec(4);
  ex.init_lo << -0.5, -0.3, -1.0, -1.0;
  ex.init_hi = -ex.init_lo;
  return c;
}

ExperimentConfig leg_base() {
  ExperimentConfig c;
  c.robot = RobotKind::kLeg3;
  c.controller = ControllerKind::kPeicGp;
  c.nominal = NominalKind::kLegDefault;
  c.au_indices = {1};
  c.outer = {15, 20, 3, 10, 1e-3, 1e6};
  c.inner = {400, 20, 60, 10, 1e-3, 1e6};
  c.reference = {{{0.5, 1.0, 0.0}}, {{0.4, 3.0, 0.0}}};
  c.control_hz = 200.0;
  c.duration = 30.0;
  c.bem_cutoff_hz = 1.0;
  c.gp.input_spec = InputSpec{true, true, false};
  c.gp.accel_policy = AccelPolicy::kOmit;
  ExcitationSpec& ex = c.excitation;
  ex.torque = {sines(0.5, {0.5, 1.3, 2.1}), sines(0.5, {0.7, 1.7, 2.3})};
  ex.duration = 20.0;
  ex.episode = 2.0;
  ex.control_hz = 200.0;
  ex.q_lo = Vec(3);
  ex.q_lo << -1.2, -1.2, -0.8;
  ex.q_hi = -ex.q_lo;
  ex.init_lo = Vec(6);
  ex.init_lo << -0.6, -0.6, -0.3, -1.0, -1.0, -1.0;
  ex.init_hi = -ex.init_lo;
  return c;
}

ExperimentConfig from_json(const Json& j) {
  reject_unknown(j, "", {"base", "name", "robot", "plant", "controller", "model", "nominal",
                         "custom_nominal", "partition", "gains", "reference", "rates", "duration",
                         "seed", "sim", "gp", "excitation", "bound", "output"});
  ExperimentConfig c;
  if (j.contains("base")) {
    c = preset(get_string(j["base"], "base"));
  } else {
    const RobotKind robot = j.contains("robot") ? parse_robot(get_string(j["robot"], "robot"))
                                                : RobotKind::kFuruta;
    c = robot == RobotKind::kFuruta ? furuta_base() : leg_base();
  }
  if (j.contains("name")) c.name = get_string(j["name"], "name");
  if (j.contains("robot")) c.robot = parse_robot(get_string(j["robot"], "robot"));
  if (j.contains("plant")) c.plant = get_param_map(j["plant"], "plant");
  if (j.contains("controller")) c.controller = parse_controller(get_string(j["controller"], "controller"));
  if (j.contains("model")) {
    const Json& m = j["model"];
    reject_unknown(m, "model", {"overrides", "frictionless"});
    if (m.contains("overrides")) c.model = get_param_map(m["overrides"], "model.overrides");
    if (m.contains("frictionless")) c.model_frictionless = get_bool(m["frictionless"], "model.frictionless");
  }
  if (j.contains("nominal")) c.nominal = parse_nominal(get_string(j["nominal"], "nominal"));
  if (j.contains("custom_nominal")) {
    const Json& cn = j["custom_nominal"];
    reject_unknown(cn, "custom_nominal", {"D", "H"});
    if (cn.contains("D")) {
      const Json& rows = cn["D"];
      require(rows.is_array() && !rows.empty(), "custom_nominal.D", "expected an array of rows");
      Mat D(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const Vec row = get_vec(rows[r], "custom_nominal.D[" + std::to_string(r) + "]");
        require(row.size() == D.cols(), "custom_nominal.D", "rows must have equal length");
        D.row(static_cast<Eigen::Index>(r)) = row.transpose();
      }
      c.custom_D = D;
    }
    if (cn.contains("H")) c.custom_H = get_vec(cn["H"], "custom_nominal.H");
  }
  if (j.contains("partition")) {
    const Json& p = j["partition"];
    reject_unknown(p, "partition", {"au_indices"});
    if (p.contains("au_indices")) {
      const Json& a = p["au_indices"];
      require(a.is_array(), "partition.au_indices", "expected an array of integers");
      c.au_indices.clear();
      for (std::size_t i = 0; i < a.size(); ++i) {
        c.au_indices.push_back(get_int(a[i], "partition.au_indices[" + std::to_string(i) + "]"));
      }
    }
  }
  if (j.contains("gains")) {
    const Json& g = j["gains"];
    reject_unknown(g, "gains", {"outer", "inner"});
    if (g.contains("outer")) read_schedule(g["outer"], "gains.outer", c.outer);
    if (g.contains("inner")) read_schedule(g["inner"], "gains.inner", c.inner);
  }
  if (j.contains("reference")) c.reference = get_sines(j["reference"], "reference");
  if (j.contains("rates")) {
    const Json& r = j["rates"];
    reject_unknown(r, "rates", {"control_hz", "substeps"});
    if (r.contains("control_hz")) c.control_hz = get_double(r["control_hz"], "rates.control_hz");
    if (r.contains("substeps")) c.substeps = get_int(r["substeps"], "rates.substeps");
  }
  if (j.contains("duration")) c.duration = get_double(j["duration"], "duration");
  if (j.contains("seed")) {
    require(j["seed"].is_number_unsigned() || (j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0),
            "seed", "expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("sim")) {
    const Json& s = j["sim"];
    reject_unknown(s, "sim", {"bem_cutoff_hz", "condition_limit", "balance_limit", "speed_limit",
                              "torque_limit", "encoder_noise", "initial_q", "initial_qdot"});
    if (s.contains("bem_cutoff_hz")) c.bem_cutoff_hz = get_double(s["bem_cutoff_hz"], "sim.bem_cutoff_hz");
    if (s.contains("condition_limit")) c.condition_limit = get_double(s["condition_limit"], "sim.condition_limit");
    if (s.contains("balance_limit")) c.balance_limit = get_double(s["balance_limit"], "sim.balance_limit");
    if (s.contains("speed_limit")) c.speed_limit = get_double(s["speed_limit"], "sim.speed_limit");
    if (s.contains("torque_limit")) {
      if (s["torque_limit"].is_null()) c.torque_limit.reset();
      else c.torque_limit = get_double(s["torque_limit"], "sim.torque_limit");
    }
    if (s.contains("encoder_noise")) c.encoder_noise = get_double(s["encoder_noise"], "sim.encoder_noise");
    if (s.contains("initial_q")) c.initial_q = get_vec(s["initial_q"], "sim.initial_q");
    if (s.contains("initial_qdot")) c.initial_qdot = get_vec(s["initial_qdot"], "sim.initial_qdot");
  }
  if (j.contains("gp")) {
    const Json& g = j["gp"];
    reject_unknown(g, "gp", {"input_spec", "accel_policy", "N", "eta", "optimizer"});
    if (g.contains("input_spec")) c.gp.input_spec = InputSpec::parse(get_string(g["input_spec"], "gp.input_spec"));
    if (g.contains("accel_policy")) c.gp.accel_policy = parse_accel_policy(get_string(g["accel_policy"], "gp.accel_policy"));
    if (g.contains("N")) c.gp.N = get_int(g["N"], "gp.N");
    if (g.contains("eta")) c.gp.eta = get_double(g["eta"], "gp.eta");
    if (g.contains("optimizer")) {
      const Json& o = g["optimizer"];
      TrainOptions& t = c.gp.optimizer;
      reject_unknown(o, "gp.optimizer", {"restarts", "max_iters", "grad_tol", "rel_tol",
                                         "stall_window", "restart_spread", "min_noise_ratio"});
      if (o.contains("restarts")) t.restarts = get_int(o["restarts"], "gp.optimizer.restarts");
      if (o.contains("max_iters")) t.max_iters = get_int(o["max_iters"], "gp.optimizer.max_iters");
      if (o.contains("grad_tol")) t.grad_tol = get_double(o["grad_tol"], "gp.optimizer.grad_tol");
      if (o.contains("rel_tol")) t.rel_tol = get_double(o["rel_tol"], "gp.optimizer.rel_tol");
      if (o.contains("stall_window")) t.stall_window = get_int(o["stall_window"], "gp.optimizer.stall_window");
      if (o.contains("restart_spread")) t.restart_spread = get_double(o["restart_spread"], "gp.optimizer.restart_spread");
      if (o.contains("min_noise_ratio")) t.min_noise_ratio = get_double(o["min_noise_ratio"], "gp.optimizer.min_noise_ratio");
    }
  }
  if (j.contains("excitation")) {
    const Json& e = j["excitation"];
    ExcitationSpec& x = c.excitation;
    reject_unknown(e, "excitation", {"torque", "duration", "episode", "control_hz", "substeps", "q_lo",
                                     "q_hi", "speed_limit", "init_lo", "init_hi",
                                     "finite_difference_accel"});
    if (e.contains("torque")) x.torque = get_sines(e["torque"], "excitation.torque");
    if (e.contains("duration")) x.duration = get_double(e["duration"], "excitation.duration");
    if (e.contains("episode")) x.episode = get_double(e["episode"], "excitation.episode");
    if (e.contains("control_hz")) x.control_hz = get_double(e["control_hz"], "excitation.control_hz");
    if (e.contains("substeps")) x.substeps = get_int(e["substeps"], "excitation.substeps");
    if (e.contains("q_lo")) x.q_lo = get_vec(e["q_lo"], "excitation.q_lo");
    if (e.contains("q_hi")) x.q_hi = get_vec(e["q_hi"], "excitation.q_hi");
    if (e.contains("speed_limit")) x.speed_limit = get_double(e["speed_limit"], "excitation.speed_limit");
    if (e.contains("init_lo")) x.init_lo = get_vec(e["init_lo"], "excitation.init_lo");
    if (e.contains("init_hi")) x.init_hi = get_vec(e["init_hi"], "excitation.init_hi");
    if (e.contains("finite_difference_accel")) {
      x.finite_difference_accel = get_bool(e["finite_difference_accel"], "excitation.finite_difference_accel");
    }
  }
  if (j.contains("bound")) {
    const Json& b = j["bound"];
    reject_unknown(b, "bound", {"c1", "c2", "c3", "c4", "calibration_offset", "transient", "sweep_points"});
    auto opt = [&](const char* key, std::optional<double>& slot) {
      if (!b.contains(key)) return;
      if (b[key].is_null()) slot.reset();
      else slot = get_double(b[key], std::string("bound.") + key);
    };
    opt("c1", c.bound.c1);
    opt("c2", c.bound.c2);
    opt("c3", c.bound.c3);
    opt("c4", c.bound.c4);
    if (b.contains("calibration_offset")) c.bound.calibration_offset = get_double(b["calibration_offset"], "bound.calibration_offset");
    if (b.contains("transient")) c.bound.transient = get_double(b["transient"], "bound.transient");
    if (b.contains("sweep_points")) c.bound.sweep_points = get_int(b["sweep_points"], "bound.sweep_points");
  }
  if (j.contains("output")) c.output = get_string(j["output"], "output");
  return c;
}

}  // namespace

std::string to_string(RobotKind kind) { return kind == RobotKind::kFuruta ? "furuta" : "leg3"; }

std::string to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::kEicModel: return "eic-model";
    case ControllerKind::kEicGp: return "eic-gp";
    case ControllerKind::kPeicGp: return "peic-gp";
  }
  return "unknown";
}

std::string to_string(NominalKind kind) {
  switch (kind) {
    case NominalKind::kFurutaS1: return "s_n1";
    case NominalKind::kFurutaS2: return "s_n2";
    case NominalKind::kLegDefault: return "leg-default";
    case NominalKind::kCustom: return "custom";
  }
  return "unknown";
}

std::vector<std::string> plant_parameter_names(RobotKind robot) {
  if (robot == RobotKind::kLeg3) return leg_names();
  FurutaParams p;
  std::vector<std::string> names;
  for (const auto& r : furuta_table(p)) names.push_back(r.name);
  return names;
}

FurutaParams furuta_params(const std::map<std::string, double>& overrides) {
  FurutaParams p;
  auto table = furuta_table(p);
  for (const auto& [name, value] : overrides) {
    bool found = false;
    for (auto& r : table) {
      if (name != r.name) continue;
      check_param_value(name, value, r.may_be_zero);
      *r.value = value;
      found = true;
    }
    if (!found) throw ConfigError(name, "not a furuta parameter");
  }
  return p;
}

LegParams leg_params(const std::map<std::string, double>& overrides) {
  LegParams p;
  for (const auto& [name, value] : overrides) {
    bool may_be_zero = true;
    double* slot = leg_slot(p, name, &may_be_zero);
    if (!slot) throw ConfigError(name, "not a leg3 parameter");
    check_param_value(name, value, may_be_zero);
    *slot = value;
  }
  return p;
}

void ExperimentConfig::validate() const {
  require(!name.empty(), "name", "must not be empty");
  const int nn = n();
  const int mm = m();
  const int d = dof();
  auto check_params = [this](const std::map<std::string, double>& values, const std::string& prefix) {
    try {
      if (robot == RobotKind::kFuruta) furuta_params(values);
      else leg_params(values);
    } catch (const ConfigError& e) {
      throw ConfigError(prefix + e.field(), std::string(e.what()).substr(e.field().size() + 2));
    }
  };
  check_params(plant, "plant.");
  check_params(model, "model.overrides.");
  if (robot == RobotKind::kFuruta) {
    require(nominal == NominalKind::kFurutaS1 || nominal == NominalKind::kFurutaS2 ||
                nominal == NominalKind::kCustom,
            "nominal", "furuta takes s_n1, s_n2 or custom");
  } else {
    require(nominal == NominalKind::kLegDefault || nominal == NominalKind::kCustom, "nominal",
            "leg3 takes leg-default or custom");
  }
  if (nominal == NominalKind::kCustom) {
    require(custom_D.rows() == d && custom_D.cols() == d, "custom_nominal.D",
            "must be " + std::to_string(d) + "x" + std::to_string(d));
    require(custom_D.allFinite(), "custom_nominal.D", "must be finite");
    check_vec(custom_H, d, "custom_nominal.H", false);
  }
  if (!au_indices.empty()) {
    require(static_cast<int>(au_indices.size()) == mm, "partition.au_indices",
            "needs exactly " + std::to_string(mm) + " entries");
    try {
      Partition::make(nn, mm, au_indices);
    } catch (const Error& e) {
      throw ConfigError("partition.au_indices", e.what());
    }
  }
  if (controller == ControllerKind::kPeicGp) {
    require(nn >= mm, "controller", "peic-gp needs n >= m");
  }
  require(model.empty() || controller == ControllerKind::kEicModel, "model.overrides",
          "only used by eic-model");
  check_schedule(outer, "gains.outer");
  check_schedule(inner, "gains.inner");
  check_sines(reference, nn, "reference");
  require(std::isfinite(control_hz) && control_hz > 0.0, "rates.control_hz", "must be > 0");
  require(substeps >= 1, "rates.substeps", "must be >= 1");
  require(std::isfinite(duration) && duration > 0.0, "duration", "must be > 0");
  require(std::isfinite(bem_cutoff_hz) && bem_cutoff_hz > 0.0, "sim.bem_cutoff_hz", "must be > 0");
  require(condition_limit > 1.0, "sim.condition_limit", "must be > 1");
  require(balance_limit > 0.0, "sim.balance_limit", "must be > 0");
  require(speed_limit > 0.0, "sim.speed_limit", "must be > 0");
  require(!torque_limit || *torque_limit > 0.0, "sim.torque_limit", "must be > 0 when set");
  require(std::isfinite(encoder_noise) && encoder_noise >= 0.0, "sim.encoder_noise", "must be >= 0");
  check_vec(initial_q, d, "sim.initial_q", true);
  check_vec(initial_qdot, d, "sim.initial_qdot", true);
  require(gp.N >= 1, "gp.N", "must be >= 1");
  require(gp.eta > 0.0 && gp.eta < 1.0, "gp.eta", "must lie in (0, 1)");
  require(gp.optimizer.restarts >= 0, "gp.optimizer.restarts", "must be >= 0");
  require(gp.optimizer.max_iters >= 1, "gp.optimizer.max_iters", "must be >= 1");
  require(gp.optimizer.stall_window >= 1, "gp.optimizer.stall_window", "must be >= 1");
  require(gp.optimizer.min_noise_ratio >= 0.0, "gp.optimizer.min_noise_ratio", "must be >= 0");
  if (gp.accel_policy == AccelPolicy::kOmit) {
    require(!gp.input_spec.qddot, "gp.accel_policy", "omit needs an input_spec without qddot");
  }
  const ExcitationSpec& x = excitation;
  check_sines(x.torque, nn, "excitation.torque");
  require(x.duration > 0.0, "excitation.duration", "must be > 0");
  require(x.episode > 0.0, "excitation.episode", "must be > 0");
  require(x.control_hz > 0.0, "excitation.control_hz", "must be > 0");
  require(x.substeps >= 1, "excitation.substeps", "must be >= 1");
  require(x.speed_limit > 0.0, "excitation.speed_limit", "must be > 0");
  check_vec(x.q_lo, d, "excitation.q_lo", false);
  check_vec(x.q_hi, d, "excitation.q_hi", false);
  require((x.q_lo.array() < x.q_hi.array()).all(), "excitation.q_hi", "must exceed q_lo");
  check_vec(x.init_lo, 2 * d, "excitation.init_lo", false);
  check_vec(x.init_hi, 2 * d, "excitation.init_hi", false);
  require((x.init_lo.array() <= x.init_hi.array()).all(), "excitation.init_hi", "must not be below init_lo");
  require(bound.calibration_offset >= 0.0, "bound.calibration_offset", "must be >= 0");
  require(bound.transient >= 0.0, "bound.transient", "must be >= 0");
  require(bound.sweep_points >= 2, "bound.sweep_points", "must be >= 2");
  for (const auto* c : {&bound.c1, &bound.c2, &bound.c3, &bound.c4}) {
    require(!*c || (std::isfinite(**c) && **c >= 0.0), "bound", "c1..c4 must be >= 0 when set");
  }
  require(!output.empty(), "output", "must not be empty");
}

ExperimentConfig parse_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<document>", e.what());
  }
  ExperimentConfig c = from_json(j);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& c) {
  Json j;
  j["name"] = c.name;
  j["robot"] = to_string(c.robot);
  j["plant"] = param_map_json(c.plant);
  j["controller"] = to_string(c.controller);
  j["model"] = Json{{"overrides", param_map_json(c.model)}, {"frictionless", c.model_frictionless}};
  j["nominal"] = to_string(c.nominal);
  if (c.nominal == NominalKind::kCustom) {
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < c.custom_D.rows(); ++r) rows.push_back(vec_json(c.custom_D.row(r).transpose()));
    j["custom_nominal"] = Json{{"D", rows}, {"H", vec_json(c.custom_H)}};
  }
  j["partition"] = Json{{"au_indices", c.au_indices}};
  j["gains"] = Json{{"outer", schedule_json(c.outer)}, {"inner", schedule_json(c.inner)}};
  j["reference"] = sines_json(c.reference);
  j["rates"] = Json{{"control_hz", c.control_hz}, {"substeps", c.substeps}};
  j["duration"] = c.duration;
  j["seed"] = c.seed;
  Json sim;
  sim["bem_cutoff_hz"] = c.bem_cutoff_hz;
  sim["condition_limit"] = c.condition_limit;
  sim["balance_limit"] = c.balance_limit;
  sim["speed_limit"] = c.speed_limit;
  sim["torque_limit"] = c.torque_limit ? Json(*c.torque_limit) : Json(nullptr);
  sim["encoder_noise"] = c.encoder_noise;
  sim["initial_q"] = vec_json(c.initial_q);
  sim["initial_qdot"] = vec_json(c.initial_qdot);
  j["sim"] = sim;
  const TrainOptions& t = c.gp.optimizer;
  j["gp"] = Json{{"input_spec", c.gp.input_spec.to_string()},
                 {"accel_policy", to_string(c.gp.accel_policy)},
                 {"N", c.gp.N},
                 {"eta", c.gp.eta},
                 {"optimizer", Json{{"restarts", t.restarts},
                                    {"max_iters", t.max_iters},
                                    {"grad_tol", t.grad_tol},
                                    {"rel_tol", t.rel_tol},
                                    {"stall_window", t.stall_window},
                                    {"restart_spread", t.restart_spread},
                                    {"min_noise_ratio", t.min_noise_ratio}}}};
  const ExcitationSpec& x = c.excitation;
  j["excitation"] = Json{{"torque", sines_json(x.torque)},
                         {"duration", x.duration},
                         {"episode", x.episode},
                         {"control_hz", x.control_hz},
                         {"substeps", x.substeps},
                         {"q_lo", vec_json(x.q_lo)},
                         {"q_hi", vec_json(x.q_hi)},
                         {"speed_limit", x.speed_limit},
                         {"init_lo", vec_json(x.init_lo)},
                         {"init_hi", vec_json(x.init_hi)},
                         {"finite_difference_accel", x.finite_difference_accel}};
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  j["bound"] = Json{{"c1", opt(c.bound.c1)},
                    {"c2", opt(c.bound.c2)},
                    {"c3", opt(c.bound.c3)},
                    {"c4", opt(c.bound.c4)},
                    {"calibration_offset", c.bound.calibration_offset},
                    {"transient", c.bound.transient},
                    {"sweep_points", c.bound.sweep_points}};
  j["output"] = c.output;
  return j.dump(2) + "\n";
}

std::vector<std::string> preset_names() {
  return {"furuta-eic-model", "furuta-eic-gp-n1", "furuta-eic-gp-n2", "leg-eic", "leg-peic"};
}

ExperimentConfig preset(const std::string& name) {
  if (name == "furuta-eic-gp-n1") {
    ExperimentConfig c = furuta_base();
    c.name = name;
    return c;
  }
  if (name == "furuta-eic-gp-n2") {
    ExperimentConfig c = furuta_base();
    c.name = name;
    c.nominal = NominalKind::kFurutaS2;
    return c;
  }
  if (name == "furuta-eic-model") {
    // Model-based arm: physical model with 20% parameter errors.
    ExperimentConfig c = furuta_base();
    c.name = name;
    c.controller = ControllerKind::kEicModel;
    const FurutaParams p;
    c.model = {{"arm_mass", 1.2 * p.arm_mass},
               {"arm_length", 0.8 * p.arm_length},
               {"pendulum_mass", 1.2 * p.pendulum_mass},
               {"pendulum_length", 0.8 * p.pendulum_length},
               {"rotor_inertia", 1.2 * p.rotor_inertia}};
    c.model_frictionless = true;
    return c;
  }
  if (name == "leg-peic") {
    ExperimentConfig c = leg_base();
    c.name = name;
    return c;
  }
  if (name == "leg-eic") {
    ExperimentConfig c = leg_base();
    c.name = name;
    c.controller = ControllerKind::kEicModel;
    return c;
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("preset", "unknown preset '" + name + "' (known: " + known + ")");
}

std::unique_ptr<RobotModel> make_plant(const ExperimentConfig& c) {
  if (c.robot == RobotKind::kFuruta) return std::make_unique<FurutaPlant>(furuta_params(c.plant));
  return std::make_unique<LegPlant>(leg_params(c.plant));
}

std::unique_ptr<RobotModel> make_controller_model(const ExperimentConfig& c) {
  std::map<std::string, double> merged = c.plant;
  for (const auto& [k, v] : c.model) merged[k] = v;
  std::unique_ptr<RobotModel> model;
  if (c.robot == RobotKind::kFuruta) model = std::make_unique<FurutaPlant>(furuta_params(merged));
  else model = std::make_unique<LegPlant>(leg_params(merged));
  return c.model_frictionless ? model->frictionless() : std::move(model);
}

NominalModel make_nominal(const ExperimentConfig& c) {
  switch (c.nominal) {
    case NominalKind::kFurutaS1: return NominalModel::furuta_s1();
    case NominalKind::kFurutaS2: return NominalModel::furuta_s2();
    case NominalKind::kLegDefault: return NominalModel::leg_default();
    case NominalKind::kCustom: return NominalModel::custom(c.n(), c.m(), c.custom_D, c.custom_H);
  }
  throw ConfigError("nominal", "unsupported");
}

Partition make_partition(const ExperimentConfig& c) {
  return c.au_indices.empty() ? Partition::make(c.n(), c.m()) : Partition::make(c.n(), c.m(), c.au_indices);
}

Reference make_reference(const ExperimentConfig& c) { return Reference(c.reference); }

SimOptions make_sim_options(const ExperimentConfig& c) {
  SimOptions o;
  o.duration = c.duration;
  o.control_hz = c.control_hz;
  o.substeps = c.substeps;
  o.balance_limit = c.balance_limit;
  o.speed_limit = c.speed_limit;
  o.torque_limit = c.torque_limit;
  o.encoder_noise = c.encoder_noise;
  o.seed = c.seed;
  o.bem_cutoff_hz = c.bem_cutoff_hz;
  return o;
}

JointState make_initial_state(const ExperimentConfig& c) {
  const int d = c.dof();
  return JointState(c.initial_q.size() ? c.initial_q : Vec(Vec::Zero(d)),
                    c.initial_qdot.size() ? c.initial_qdot : Vec(Vec::Zero(d)));
}

}  // namespace balance
