#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "zonosafe/csv.hpp"
#include "zonosafe/simlab.hpp"
#include "zonosafe/trainer.hpp"

namespace zonosafe {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a command can be configured with.
struct Config {
  SimConfig sim;
  DataConfig data;
  TrainConfig train;
  FitOptions fit;
  double eps_translational = 0.05;  // budget half-width on positions and velocities
  double eps_rotational = 0.02;     // budget half-width on angles and rates
  std::vector<Scenario> scenarios = canonical_scenarios();

  /// Pushes the budget keys into the places that consume them.
  void apply_budget() {
    UncertaintyBudget b;
    b.eps.head<6>().setConstant(eps_translational);
    b.eps.tail<10>().setConstant(eps_rotational);
    sim.budget = b;
    train.budget = b;
  }

  void validate() const {
    auto wrap = [](const char* section, auto&& fn) {
      try {
        fn();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string(section) + ": " + e.what());
      }
    };
    if (!(eps_translational >= 0.0 && eps_rotational >= 0.0)) {
      throw ConfigError("budget.eps_translational / budget.eps_rotational: must be >= 0");
    }
    wrap("sim", [&] { sim.validate(); });
    wrap("data", [&] { data.validate(); });
    wrap("train", [&] { train.validate(); });
    if (!(fit.near_gate_window > 0.0)) throw ConfigError("fit.near_gate_window: must be > 0");
    if (!(fit.lookahead >= 0.0)) throw ConfigError("fit.lookahead: must be >= 0");
    for (const auto& s : scenarios) wrap("scenario", [&] { s.validate(); });
  }
};

struct ConfigKey {
  std::string key;
  std::string doc;
  bool reference_value = true;  // false: default chosen here, not taken from the reference method
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long to_integer(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return static_cast<long long>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<double> to_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& f : split_csv_line(v)) {
    std::string t = f;
    t.erase(0, t.find_first_not_of(" \t"));
    t.erase(t.find_last_not_of(" \t") + 1);
    out.push_back(to_double(key, t));
  }
  return out;
}

inline std::string list_string(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

template <typename Ref>
ConfigKey number(std::string key, std::string doc, bool reference, Ref ref) {
  ConfigKey k{key, std::move(doc), reference, {}, {}};
  k.set = [key, ref](Config& c, const std::string& v) { ref(c) = to_double(key, v); };
  k.get = [ref](const Config& c) { return format_double(ref(const_cast<Config&>(c))); };
  return k;
}

template <typename Ref>
ConfigKey degrees(std::string key, std::string doc, bool reference, Ref ref) {
  ConfigKey k{key, std::move(doc), reference, {}, {}};
  k.set = [key, ref](Config& c, const std::string& v) { ref(c) = deg2rad(to_double(key, v)); };
  k.get = [ref](const Config& c) {
    const double deg = ref(const_cast<Config&>(c)) * 180.0 / std::numbers::pi;
    return format_double(std::round(deg * 1e9) / 1e9);
  };
  return k;
}

template <typename T, typename Ref>
ConfigKey integer(std::string key, std::string doc, bool reference, Ref ref) {
  ConfigKey k{key, std::move(doc), reference, {}, {}};
  k.set = [key, ref](Config& c, const std::string& v) {
    const long long n = to_integer(key, v);
    if (n < 0) throw ConfigError(key + ": must be >= 0");
    ref(c) = static_cast<T>(n);
  };
  k.get = [ref](const Config& c) { return std::to_string(ref(const_cast<Config&>(c))); };
  return k;
}

}  // namespace detail

/// The documented key set, in the order print-config emits it.
inline std::vector<ConfigKey> config_keys() {
  using detail::degrees;
  using detail::integer;
  using detail::number;
  std::vector<ConfigKey> keys;
  auto add = [&](ConfigKey k) { keys.push_back(std::move(k)); };

  add(number("plant.m_q", "quadrotor mass [kg]", true, [](Config& c) -> double& { return c.sim.plant.m_quad; }));
  add(number("plant.m_L", "load mass [kg]", true, [](Config& c) -> double& { return c.sim.plant.m_load; }));
  add(number("plant.L_rod", "rod length [m]", true, [](Config& c) -> double& { return c.sim.plant.rod_length; }));
  add(number("plant.g", "gravity [m/s^2]", true, [](Config& c) -> double& { return c.sim.plant.gravity; }));
  add(number("plant.dt", "control and integration step [s] (50 Hz)", true,
             [](Config& c) -> double& { return c.sim.plant.dt; }));
  add(number("plant.att_kp", "attitude PD proportional gain [1/s^2]", false,
             [](Config& c) -> double& { return c.sim.plant.att_kp; }));
  add(number("plant.att_kd", "attitude PD derivative gain [1/s]", false,
             [](Config& c) -> double& { return c.sim.plant.att_kd; }));
  add(degrees("plant.tilt_max_deg", "tilt command limit [deg]", false,
              [](Config& c) -> double& { return c.sim.plant.tilt_max; }));
  add(number("plant.mu_max", "acceleration command limit per axis [m/s^2]", false,
             [](Config& c) -> double& { return c.sim.plant.mu_max; }));
  add(number("plant.r_quad", "quadrotor collision radius [m]", true,
             [](Config& c) -> double& { return c.sim.plant.r_quad; }));
  add(number("plant.r_load", "load collision radius [m]", true,
             [](Config& c) -> double& { return c.sim.plant.r_load; }));

  add(number("gate.x", "gate plane position [m]", true, [](Config& c) -> double& { return c.sim.gate.x_plane; }));
  add(number("gate.half_width", "half opening along y [m]", true,
             [](Config& c) -> double& { return c.sim.gate.half_width; }));
  add(number("gate.half_height", "half opening along z [m]", true,
             [](Config& c) -> double& { return c.sim.gate.half_height; }));
  add(number("gate.center_y", "opening center y [m]", false, [](Config& c) -> double& { return c.sim.gate.center_y; }));
  add(number("gate.center_z", "opening center z [m]", false, [](Config& c) -> double& { return c.sim.gate.center_z; }));

  add(number("nominal.beyond_gate", "waypoint distance past the gate [m]", false,
             [](Config& c) -> double& { return c.sim.nominal.beyond_gate; }));
  add(number("nominal.cruise_speed", "along-track speed cap [m/s]", false,
             [](Config& c) -> double& { return c.sim.nominal.cruise_speed; }));
  add(number("nominal.k_along", "along-track position gain [1/s]", false,
             [](Config& c) -> double& { return c.sim.nominal.k_along; }));
  add(number("nominal.k_cross", "cross-track position gain [1/s]", false,
             [](Config& c) -> double& { return c.sim.nominal.k_cross; }));
  add(number("nominal.cross_speed_max", "cross-track speed cap [m/s]", false,
             [](Config& c) -> double& { return c.sim.nominal.cross_speed_max; }));
  add(number("nominal.k_vel", "velocity gain [1/s]", false, [](Config& c) -> double& { return c.sim.nominal.k_vel; }));

  add(number("budget.eps_translational", "uncertainty half-width on positions and velocities", true,
             [](Config& c) -> double& { return c.eps_translational; }));
  add(number("budget.eps_rotational", "uncertainty half-width on angles and angular rates", true,
             [](Config& c) -> double& { return c.eps_rotational; }));

  add(number("cbf.alpha", "class-K gain [1/s]", false, [](Config& c) -> double& { return c.sim.cbf.alpha; }));
  add(number("cbf.fd_delta", "finite-difference step for L_g [m/s^2]", false,
             [](Config& c) -> double& { return c.sim.cbf.fd_delta; }));
  {
    ConfigKey k{"cbf.lg_source", "fd (finite differences through the plant) or learned (w^T B)", true, {}, {}};
    k.set = [](Config& c, const std::string& v) {
      if (v == "fd") c.sim.cbf.lg_source = LgSource::FiniteDifference;
      else if (v == "learned") c.sim.cbf.lg_source = LgSource::LearnedB;
      else throw ConfigError("cbf.lg_source: expected fd or learned, got '" + v + "'");
    };
    k.get = [](const Config& c) {
      return std::string(c.sim.cbf.lg_source == LgSource::FiniteDifference ? "fd" : "learned");
    };
    add(std::move(k));
  }
  {
    ConfigKey k{"cbf.joint_form", "minimise drift and barrier terms jointly over the latent set", false, {}, {}};
    k.set = [](Config& c, const std::string& v) { c.sim.cbf.joint_form = detail::to_bool("cbf.joint_form", v); };
    k.get = [](const Config& c) { return std::string(c.sim.cbf.joint_form ? "true" : "false"); };
    add(std::move(k));
  }
  add(number("cbf.margin_delta", "fixed margin for margin mode; < 0 uses the value calibrated into the model", true,
             [](Config& c) -> double& { return c.sim.margin_delta; }));

  add(number("sim.after_crossing", "time simulated after both bodies cross the gate [s]", false,
             [](Config& c) -> double& { return c.sim.after_crossing; }));
  add(number("sim.divergence_radius", "position norm treated as divergence [m]", false,
             [](Config& c) -> double& { return c.sim.divergence_radius; }));
  add(number("sim.duration", "scenario time limit [s]", false, [](Config& c) -> double& {
    return c.scenarios.front().duration;
  }));
  add(number("sim.vx0", "initial forward speed [m/s]", false, [](Config& c) -> double& {
    return c.scenarios.front().vx0;
  }));
  add(number("sim.start_z", "initial altitude [m]", false, [](Config& c) -> double& {
    return c.scenarios.front().start_z;
  }));

  add(integer<std::size_t>("data.samples", "number of transition samples", true,
                           [](Config& c) -> std::size_t& { return c.data.samples; }));
  {
    ConfigKey k{"data.mix", "snapshot,rollout,near_gate,boundary fractions (sum to 1)", true, {}, {}};
    k.set = [](Config& c, const std::string& v) {
      const auto l = detail::to_list("data.mix", v);
      if (l.size() != 4) throw ConfigError("data.mix: expected 4 comma-separated fractions");
      std::copy(l.begin(), l.end(), c.data.mix.begin());
    };
    k.get = [](const Config& c) { return detail::list_string({c.data.mix.begin(), c.data.mix.end()}); };
    add(std::move(k));
  }
  add(integer<std::uint64_t>("data.seed", "sampling seed", false, [](Config& c) -> std::uint64_t& { return c.data.seed; }));
  add(number("data.near_gate_window", "|x - gate.x| window for near-gate samples [m]", false,
             [](Config& c) -> double& { return c.data.near_gate_window; }));
  add(number("data.boundary_band", "|load clearance| band for boundary samples [m]", false,
             [](Config& c) -> double& { return c.data.boundary_band; }));
  add(integer<int>("data.rollout_segment", "steps per closed-loop rollout segment", false,
                   [](Config& c) -> int& { return c.data.rollout_segment; }));

  add(number("train.lambda_rec", "reconstruction weight", true, [](Config& c) -> double& { return c.train.lambda_rec; }));
  add(number("train.lambda_dyn", "latent dynamics weight", true, [](Config& c) -> double& { return c.train.lambda_dyn; }));
  add(number("train.lambda_tight", "latent set tightness weight", true,
             [](Config& c) -> double& { return c.train.lambda_tight; }));
  add(number("train.lambda_teach", "teacher feature weight", true,
             [](Config& c) -> double& { return c.train.lambda_teach; }));
  add(number("train.tau", "center/radius balance in the reconstruction loss", false,
             [](Config& c) -> double& { return c.train.tau; }));
  add(number("train.learning_rate", "Adam step size", true, [](Config& c) -> double& { return c.train.learning_rate; }));
  add(integer<std::size_t>("train.batch_size", "minibatch size", true,
                           [](Config& c) -> std::size_t& { return c.train.batch_size; }));
  add(integer<int>("train.epochs", "passes over the dataset", true, [](Config& c) -> int& { return c.train.epochs; }));
  add(integer<int>("train.latent_dim", "latent dimension", true, [](Config& c) -> int& { return c.train.latent_dim; }));
  {
    ConfigKey k{"train.hidden", "hidden layer widths of encoder and decoder", true, {}, {}};
    k.set = [](Config& c, const std::string& v) {
      c.train.hidden.clear();
      for (double w : detail::to_list("train.hidden", v)) {
        if (w != std::floor(w) || w <= 0) throw ConfigError("train.hidden: widths must be positive integers");
        c.train.hidden.push_back(static_cast<int>(w));
      }
    };
    k.get = [](const Config& c) {
      return detail::list_string({c.train.hidden.begin(), c.train.hidden.end()});
    };
    add(std::move(k));
  }
  add(integer<std::uint64_t>("train.seed", "initialisation and shuffling seed", false,
                             [](Config& c) -> std::uint64_t& { return c.train.seed; }));

  add(number("fit.near_gate_window", "|x - gate.x| window of the samples heads and bounds are fitted on [m]", false,
             [](Config& c) -> double& { return c.fit.near_gate_window; }));
  add(number("fit.energy_cap", "E_max of the energy head [J]; <= 0 selects the 40 deg / 1.5 rad/s swing", false,
             [](Config& c) -> double& { return c.fit.energy_cap; }));
  add(number("fit.lookahead", "T in the clearance targets: bodies extrapolated T seconds along their velocity [s]",
             false, [](Config& c) -> double& { return c.fit.lookahead; }));
  return keys;
}

/// Applies one `key = value` assignment.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys()) {
    if (k.key == key) {
      k.set(c, value);
      if (key == "sim.duration" || key == "sim.vx0" || key == "sim.start_z") {
        for (auto& s : c.scenarios) {
          s.duration = c.scenarios.front().duration;
          s.vx0 = c.scenarios.front().vx0;
          s.start_z = c.scenarios.front().start_z;
        }
      }
      if (key.rfind("budget.", 0) == 0) c.apply_budget();
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline Config parse_config(std::istream& in, const std::string& origin = "<config>") {
  Config c;
  c.apply_budget();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::ios_base::failure("cannot open config '" + path + "'");
  return parse_config(in, path);
}

inline Config default_config() {
  Config c;
  c.apply_budget();
  return c;
}

/// Every key with its current value and documentation.
inline std::string format_config(const Config& c) {
  std::ostringstream o;
  std::string section;
  for (const auto& k : config_keys()) {
    const auto s = k.key.substr(0, k.key.find('.'));
    if (s != section) {
      if (!section.empty()) o << '\n';
      section = s;
    }
    o << "# " << k.doc << (k.reference_value ? "" : "  # non-reference default") << '\n';
    o << k.key << " = " << k.get(c) << '\n';
  }
  return o.str();
}

}  // namespace zonosafe
