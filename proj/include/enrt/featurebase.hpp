#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "enrt/common.hpp"
#include "enrt/powersim.hpp"

#include <json.hpp>

namespace enrt {

// Expert nonlinear families extracted from the two-machine three-bus
// algebraic equations, plus the raw tag. Order is part of the schema
// contract (metrics index by it).
enum class Family : int {
  raw = 0,
  sin_delta,
  cos_delta,
  i_re,
  i_im,
  v2p,
  v2q,
  vp,
  vq,
};
constexpr int kExpertFamilyCount = 8;  // all but raw

inline const char* family_name(Family f) {
  switch (f) {
    case Family::raw: return "raw";
    case Family::sin_delta: return "sin_delta";
    case Family::cos_delta: return "cos_delta";
    case Family::i_re: return "i_re";
    case Family::i_im: return "i_im";
    case Family::v2p: return "v2p";
    case Family::v2q: return "v2q";
    case Family::vp: return "vp";
    case Family::vq: return "vq";
  }
  return "?";
}

// Equation-group membership for ablations: group 0 = the d-q rotation terms
// (sin/cos of the power angle), group 1 = the load power equation terms
// (current components), group 2 = the load characteristic terms.
inline int family_group(Family f) {
  switch (f) {
    case Family::sin_delta:
    case Family::cos_delta: return 0;
    case Family::i_re:
    case Family::i_im: return 1;
    default: return 2;
  }
}

enum class Signal : int {
  gen_delta = 0,
  gen_fdev,
  gen_pm,
  gen_pe,
  gen_pacc,
  gen_q,
  bus_v,
  bus_theta,
  bus_fdev,
  bus_pl,
  bus_ql,
  exp_sin,
  exp_cos,
  exp_ire,
  exp_iim,
  exp_v2p,
  exp_v2q,
  exp_vp,
  exp_vq,
};

struct FeatureDesc {
  Signal signal;
  int object;  // generator or bus index
  int step;    // snapshot index within the observation window
  std::string unit;
  Family family = Family::raw;
};

constexpr int kGenSignals = 6;
constexpr int kBusSignals = 5;
constexpr int kGenExpansion = 2;
constexpr int kBusExpansion = 6;

enum class TreeInputPolicy { flattened_window, final_snapshot };

// Which expert equation groups contribute expanded features.
struct ExpertGroups {
  bool dq_rotation = true;     // sin/cos of delta
  bool load_power = true;      // current components
  bool load_characteristic = true;  // V^2 P, V^2 Q, V P, V Q

  bool any() const { return dq_rotation || load_power || load_characteristic; }
  bool enabled(Family f) const {
    switch (family_group(f)) {
      case 0: return dq_rotation;
      case 1: return load_power;
      default: return load_characteristic;
    }
  }
  static ExpertGroups none() { return {false, false, false}; }
};

// Ordered feature descriptors. The raw block is step-major (all signals of
// snapshot 0, then snapshot 1, ...); the expanded block follows it with the
// same step-major layout. Descriptor order is identical across dataset,
// model and tree.
struct FeatureSchema {
  int n_gen = 0;
  int n_bus = 0;
  int window = 0;  // T snapshots
  std::vector<FeatureDesc> features;

  int raw_per_step() const { return kGenSignals * n_gen + kBusSignals * n_bus; }
  int expanded_per_step(const ExpertGroups& g = {}) const {
    int c = 0;
    if (g.dq_rotation) c += kGenExpansion * n_gen;
    if (g.load_power) c += 2 * n_bus;
    if (g.load_characteristic) c += 4 * n_bus;
    return c;
  }
  int size() const { return static_cast<int>(features.size()); }

  static FeatureSchema raw_window(int n_gen, int n_bus, int window) {
    FeatureSchema s;
    s.n_gen = n_gen;
    s.n_bus = n_bus;
    s.window = window;
    for (int t = 0; t < window; ++t) s.append_raw_step(t);
    return s;
  }

  // Raw window followed by the expert expansion; under the final-snapshot
  // policy only the last step of each block is kept.
  static FeatureSchema expanded(int n_gen, int n_bus, int window,
                                const ExpertGroups& groups = {},
                                TreeInputPolicy policy = TreeInputPolicy::flattened_window) {
    FeatureSchema s;
    s.n_gen = n_gen;
    s.n_bus = n_bus;
    s.window = window;
    int t0 = policy == TreeInputPolicy::final_snapshot ? window - 1 : 0;
    for (int t = t0; t < window; ++t) s.append_raw_step(t);
    for (int t = t0; t < window; ++t) s.append_expanded_step(t, groups);
    return s;
  }

  void append_raw_step(int t) {
    for (int g = 0; g < n_gen; ++g) {
      features.push_back({Signal::gen_delta, g, t, "rad", Family::raw});
      features.push_back({Signal::gen_fdev, g, t, "Hz", Family::raw});
      features.push_back({Signal::gen_pm, g, t, "p.u.", Family::raw});
      features.push_back({Signal::gen_pe, g, t, "p.u.", Family::raw});
      features.push_back({Signal::gen_pacc, g, t, "p.u.", Family::raw});
      features.push_back({Signal::gen_q, g, t, "p.u.", Family::raw});
    }
    for (int b = 0; b < n_bus; ++b) {
      features.push_back({Signal::bus_v, b, t, "p.u.", Family::raw});
      features.push_back({Signal::bus_theta, b, t, "rad", Family::raw});
      features.push_back({Signal::bus_fdev, b, t, "Hz", Family::raw});
      features.push_back({Signal::bus_pl, b, t, "p.u.", Family::raw});
      features.push_back({Signal::bus_ql, b, t, "p.u.", Family::raw});
    }
  }

  void append_expanded_step(int t, const ExpertGroups& groups) {
    if (groups.dq_rotation)
      for (int g = 0; g < n_gen; ++g) {
        features.push_back({Signal::exp_sin, g, t, "", Family::sin_delta});
        features.push_back({Signal::exp_cos, g, t, "", Family::cos_delta});
      }
    if (groups.load_power)
      for (int b = 0; b < n_bus; ++b) {
        features.push_back({Signal::exp_ire, b, t, "p.u.", Family::i_re});
        features.push_back({Signal::exp_iim, b, t, "p.u.", Family::i_im});
      }
    if (groups.load_characteristic)
      for (int b = 0; b < n_bus; ++b) {
        features.push_back({Signal::exp_v2p, b, t, "p.u.", Family::v2p});
        features.push_back({Signal::exp_v2q, b, t, "p.u.", Family::v2q});
        features.push_back({Signal::exp_vp, b, t, "p.u.", Family::vp});
        features.push_back({Signal::exp_vq, b, t, "p.u.", Family::vq});
      }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = kFormatVersion;
    j["n_gen"] = n_gen;
    j["n_bus"] = n_bus;
    j["window"] = window;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : features)
      arr.push_back({{"signal", static_cast<int>(f.signal)},
                     {"object", f.object},
                     {"step", f.step},
                     {"unit", f.unit},
                     {"family", family_name(f.family)}});
    j["features"] = arr;
    return j;
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    FeatureSchema s;
    s.n_gen = j.at("n_gen");
    s.n_bus = j.at("n_bus");
    s.window = j.at("window");
    for (const auto& e : j.at("features")) {
      FeatureDesc d;
      d.signal = static_cast<Signal>(e.at("signal").get<int>());
      d.object = e.at("object");
      d.step = e.at("step");
      d.unit = e.at("unit");
      std::string fam = e.at("family");
      d.family = Family::raw;
      for (int f = 0; f <= static_cast<int>(Family::vq); ++f)
        if (fam == family_name(static_cast<Family>(f))) d.family = static_cast<Family>(f);
      s.features.push_back(std::move(d));
    }
    return s;
  }
};

// Raw observation window: T snapshots spaced window_dt apart, starting at
// the clearing instant (snapped up to the trajectory grid). Rows follow the
// raw step layout of FeatureSchema.
inline Eigen::MatrixXd extract_window(const Trajectory& traj, double t_start, int window,
                                      double window_dt) {
  const int ng = static_cast<int>(traj.gen_delta.cols());
  const int nb = static_cast<int>(traj.bus_v.cols());
  const int stride =
      std::max(1, static_cast<int>(std::llround(window_dt / traj.dt)));
  int k0 = static_cast<int>(std::ceil(t_start / traj.dt - 1e-9));
  Eigen::MatrixXd out(window, kGenSignals * ng + kBusSignals * nb);
  for (int t = 0; t < window; ++t) {
    int k = k0 + t * stride;
    if (k >= traj.steps())
      throw IndexOutOfRange("observation window extends past the trajectory");
    int c = 0;
    for (int g = 0; g < ng; ++g) {
      out(t, c++) = traj.gen_delta(k, g);
      out(t, c++) = traj.gen_fdev(k, g);
      out(t, c++) = traj.gen_pm(k, g);
      out(t, c++) = traj.gen_pe(k, g);
      out(t, c++) = traj.gen_pm(k, g) - traj.gen_pe(k, g);
      out(t, c++) = traj.gen_q(k, g);
    }
    for (int b = 0; b < nb; ++b) {
      out(t, c++) = traj.bus_v(k, b);
      out(t, c++) = traj.bus_theta(k, b);
      out(t, c++) = traj.bus_fdev(k, b);
      out(t, c++) = traj.bus_p(k, b);
      out(t, c++) = traj.bus_q(k, b);
    }
  }
  return out;
}

constexpr double kVoltageEps = 1e-6;  // p.u., expansion division guard

// Expert expansion of one raw window, computed on unstandardized physical
// values. Returns the flattened [raw | expanded] vector matching
// FeatureSchema::expanded with the same groups and policy.
inline Eigen::VectorXd expand_expert(const Eigen::MatrixXd& raw, int n_gen, int n_bus,
                                     const ExpertGroups& groups = {},
                                     TreeInputPolicy policy = TreeInputPolicy::flattened_window) {
  const int window = static_cast<int>(raw.rows());
  const int per_step = static_cast<int>(raw.cols());
  if (per_step != kGenSignals * n_gen + kBusSignals * n_bus)
    throw SchemaMismatch("raw window width does not match the schema");

  const int t0 = policy == TreeInputPolicy::final_snapshot ? window - 1 : 0;
  const int kept = window - t0;

  int exp_per_step = 0;
  if (groups.dq_rotation) exp_per_step += kGenExpansion * n_gen;
  if (groups.load_power) exp_per_step += 2 * n_bus;
  if (groups.load_characteristic) exp_per_step += 4 * n_bus;

  Eigen::VectorXd out(kept * (per_step + exp_per_step));
  int c = 0;
  for (int t = t0; t < window; ++t)
    for (int j = 0; j < per_step; ++j) out[c++] = raw(t, j);

  for (int t = t0; t < window; ++t) {
    if (groups.dq_rotation)
      for (int g = 0; g < n_gen; ++g) {
        double delta = raw(t, kGenSignals * g + 0);
        out[c++] = std::sin(delta);
        out[c++] = std::cos(delta);
      }
    if (groups.load_power)
      for (int b = 0; b < n_bus; ++b) {
        int base = kGenSignals * n_gen + kBusSignals * b;
        double v = raw(t, base + 0);
        double th = raw(t, base + 1);
        double p = raw(t, base + 3);
        double q = raw(t, base + 4);
        if (v <= kVoltageEps) throw DivisionByZero("bus voltage at or below eps in expansion");
        out[c++] = (p * std::cos(th) + q * std::sin(th)) / v;
        out[c++] = (p * std::sin(th) - q * std::cos(th)) / v;
      }
    if (groups.load_characteristic)
      for (int b = 0; b < n_bus; ++b) {
        int base = kGenSignals * n_gen + kBusSignals * b;
        double v = raw(t, base + 0);
        double p = raw(t, base + 3);
        double q = raw(t, base + 4);
        out[c++] = v * v * p;
        out[c++] = v * v * q;
        out[c++] = v * p;
        out[c++] = v * q;
      }
  }
  return out;
}

// Per-column standardization fit on the training split only. Columns whose
// spread is below the floor are marked and map to exactly zero.
struct Standardizer {
  Eigen::VectorXd mean, stddev;
  std::vector<bool> floored;

  static Standardizer fit(const Eigen::MatrixXd& x, double floor_eps = 1e-8) {
    if (x.rows() == 0) throw EmptyInput("standardizer fit on empty data");
    Standardizer s;
    const auto n = static_cast<double>(x.rows());
    s.mean = x.colwise().mean();
    s.stddev.resize(x.cols());
    s.floored.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      double var = (x.col(j).array() - s.mean[j]).square().sum() / n;
      double sd = std::sqrt(var);
      s.floored[j] = sd < floor_eps;
      s.stddev[j] = s.floored[j] ? 1.0 : sd;
    }
    return s;
  }

  int size() const { return static_cast<int>(mean.size()); }

  double apply_one(Eigen::Index j, double v) const {
    return floored[j] ? 0.0 : (v - mean[j]) / stddev[j];
  }
  double invert_one(Eigen::Index j, double z) const {
    return floored[j] ? mean[j] : z * stddev[j] + mean[j];
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const {
    if (v.size() != mean.size()) throw LengthMismatch("standardizer width mismatch");
    Eigen::VectorXd out(v.size());
    for (Eigen::Index j = 0; j < v.size(); ++j) out[j] = apply_one(j, v[j]);
    return out;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    if (x.cols() != mean.size()) throw LengthMismatch("standardizer width mismatch");
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, j) = apply_one(j, x(i, j));
    return out;
  }

  Eigen::VectorXd invert(const Eigen::VectorXd& z) const {
    if (z.size() != mean.size()) throw LengthMismatch("standardizer width mismatch");
    Eigen::VectorXd out(z.size());
    for (Eigen::Index j = 0; j < z.size(); ++j) out[j] = invert_one(j, z[j]);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mean"] = std::vector<double>(mean.data(), mean.data() + mean.size());
    j["stddev"] = std::vector<double>(stddev.data(), stddev.data() + stddev.size());
    j["floored"] = floored;
    return j;
  }

  static Standardizer from_json(const nlohmann::json& j) {
    Standardizer s;
    auto m = j.at("mean").get<std::vector<double>>();
    auto d = j.at("stddev").get<std::vector<double>>();
    s.mean = Eigen::Map<Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
    s.stddev = Eigen::Map<Eigen::VectorXd>(d.data(), static_cast<Eigen::Index>(d.size()));
    s.floored = j.at("floored").get<std::vector<bool>>();
    return s;
  }
};

namespace detail {
inline std::string step_tag(int t) { return "@t" + std::to_string(t); }
}  // namespace detail

// Human-readable, injective feature label used in rendered rules.
inline std::string feature_name(int index, const FeatureSchema& schema) {
  if (index < 0 || index >= schema.size())
    throw IndexOutOfRange("feature index " + std::to_string(index));
  const FeatureDesc& d = schema.features[static_cast<std::size_t>(index)];
  const std::string g = "G" + std::to_string(d.object + 1);
  const std::string b = "bus" + std::to_string(d.object + 1);
  const std::string t = detail::step_tag(d.step);
  switch (d.signal) {
    case Signal::gen_delta: return "δ_" + g + t + " (deg)";
    case Signal::gen_fdev: return "f_" + g + ",SD" + t + " (Hz)";
    case Signal::gen_pm: return "P_" + g + ",MP" + t + " (p.u.)";
    case Signal::gen_pe: return "P_" + g + ",EP" + t + " (p.u.)";
    case Signal::gen_pacc: return "P_" + g + ",AP" + t + " (p.u.)";
    case Signal::gen_q: return "Q_" + g + ",RP" + t + " (p.u.)";
    case Signal::bus_v: return "V_" + b + ",PSV" + t + " (p.u.)";
    case Signal::bus_theta: return "θ_" + b + t + " (deg)";
    case Signal::bus_fdev: return "f_" + b + ",FD" + t + " (Hz)";
    case Signal::bus_pl: return "P_" + b + ",AL" + t + " (p.u.)";
    case Signal::bus_ql: return "Q_" + b + ",RL" + t + " (p.u.)";
    case Signal::exp_sin: return "sin(δ_" + g + ")" + t;
    case Signal::exp_cos: return "cos(δ_" + g + ")" + t;
    case Signal::exp_ire: return "I_re@" + b + t;
    case Signal::exp_iim: return "I_im@" + b + t;
    case Signal::exp_v2p: return "V²·P@" + b + t;
    case Signal::exp_v2q: return "V²·Q@" + b + t;
    case Signal::exp_vp: return "V·P@" + b + t;
    case Signal::exp_vq: return "V·Q@" + b + t;
  }
  throw IndexOutOfRange("unknown signal kind");
}

// Angles are stored in radians but rendered in degrees.
inline bool rendered_in_degrees(const FeatureDesc& d) { return d.unit == "rad"; }

inline double display_value(const FeatureDesc& d, double physical) {
  return rendered_in_degrees(d) ? physical * 180.0 / std::numbers::pi : physical;
}

}  // namespace enrt
