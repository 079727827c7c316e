#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "enrt/common.hpp"

namespace enrt {

using Complex = std::complex<double>;

// Classical-model synchronous machine: constant EMF magnitude behind the
// transient reactance, swing dynamics in (delta, speed deviation).
struct Machine {
  double inertia_h;   // s
  double damping_d;   // p.u. torque per rad/s of speed deviation
  double xd_prime;    // p.u.
  double emf;         // p.u., held constant
  int bus;
};

struct Line {
  int from;
  int to;
  double x;  // series reactance, p.u.
};

// Quadratic/linear/constant voltage mix of the load, normalized so the
// nominal power is consumed at V = 1.
struct ZipCoeffs {
  double a_p = 1.0, b_p = 0.0, c_p = 0.0;
  double a_q = 1.0, b_q = 0.0, c_q = 0.0;

  double kp(double v) const { return a_p * v * v + b_p * v + c_p; }
  double kq(double v) const { return a_q * v * v + b_q * v + c_q; }
  bool impedance_only() const {
    return b_p == 0.0 && c_p == 0.0 && b_q == 0.0 && c_q == 0.0;
  }
};

struct SystemSpec {
  std::vector<Machine> machines;
  std::vector<Line> lines;
  int load_bus = 2;
  ZipCoeffs zip;
  double p_load_nominal = 1.4;  // p.u.
  double q_load_nominal = 0.35;
  double dispatch_nominal = 0.75;  // machine-0 scheduled output, p.u.
  double frequency_hz = 50.0;
  double base_mva = 100.0;

  double omega_s() const { return 2.0 * std::numbers::pi * frequency_hz; }

  int bus_count() const {
    int n = load_bus;
    for (const auto& m : machines) n = std::max(n, m.bus);
    for (const auto& l : lines) n = std::max(n, std::max(l.from, l.to));
    return n + 1;
  }

  void validate() const {
    if (machines.empty()) throw std::invalid_argument("system has no machines");
    for (const auto& m : machines) {
      if (m.inertia_h <= 0.0) throw std::invalid_argument("inertia H must be > 0");
      if (m.xd_prime <= 0.0) throw std::invalid_argument("X'd must be > 0");
    }
    for (const auto& l : lines)
      if (l.x <= 0.0) throw std::invalid_argument("line reactance must be > 0");
    if (std::abs(zip.a_p + zip.b_p + zip.c_p - 1.0) > 1e-9 ||
        std::abs(zip.a_q + zip.b_q + zip.c_q - 1.0) > 1e-9)
      throw std::invalid_argument("ZIP coefficients must sum to 1 for P and Q");
  }

  // Desk-scale two-machine three-bus system: generators on buses 0 and 1,
  // the load on bus 2. Machine 0 exports over a double circuit (lines 0 and
  // 1); the reference contingency trips one circuit at fault clearing,
  // which is what makes late-cleared faults lose synchronism.
  static SystemSpec example() {
    SystemSpec s;
    s.machines = {{2.5, 0.01, 0.20, 1.10, 0}, {5.0, 0.01, 0.25, 1.08, 1}};
    s.lines = {{0, 2, 0.70}, {0, 2, 0.70}, {1, 2, 0.25}};
    s.load_bus = 2;
    s.p_load_nominal = 1.4;
    s.q_load_nominal = 0.35;
    s.dispatch_nominal = 0.8;
    return s;
  }

  // Single-machine-infinite-bus reduction: machine 1 is an ideal source
  // (huge inertia, near-zero reactance), no load, total series reactance
  // from machine 0's EMF to the infinite bus equal to x_total.
  static SystemSpec smib(double x_total = 1.0, double h = 3.0, double dispatch = 0.8) {
    SystemSpec s;
    const double xd0 = 0.3, x_line0 = 0.35, xd1 = 1e-4;
    s.machines = {{h, 0.0, xd0, 1.0, 0}, {1e8, 0.0, xd1, 1.0, 1}};
    s.lines = {{0, 2, x_line0}, {1, 2, x_total - xd0 - x_line0 - xd1}};
    s.load_bus = 2;
    s.p_load_nominal = 0.0;
    s.q_load_nominal = 0.0;
    s.dispatch_nominal = dispatch;
    return s;
  }
};

// One three-phase fault scenario. The fault is modeled as a large shunt
// conductance at fault_bus over [t_fault, t_clear); after clearing the
// pre-fault topology is restored unless trip_line names a line to drop.
// fault_bus = -1 leaves the network untouched (equilibrium replay).
struct ContingencySpec {
  int fault_bus = 2;
  double t_fault = 0.1;   // s
  double t_clear = 0.2;   // s
  int trip_line = -1;

  // Dataset-grade validity: faults clear within 150 ms. Simulation also
  // accepts never-cleared faults (t_clear past the horizon) for stress
  // studies; those do not pass this check.
  void validate() const {
    if (!(t_fault >= 0.0 && t_fault < t_clear))
      throw std::invalid_argument("require 0 <= t_fault < t_clear");
    if (t_clear - t_fault > 0.150 + 1e-12)
      throw std::invalid_argument("clearing time exceeds 150 ms");
  }
};

constexpr double kFaultConductance = 1e6;  // p.u., bolted fault shunt

// Instantaneous network configuration seen by the algebraic solve.
struct NetworkState {
  int fault_bus = -1;    // -1: no fault applied
  int tripped_line = -1; // -1: all lines in service
};

struct NetworkSolution {
  Eigen::VectorXcd v;       // bus voltages
  Eigen::VectorXd pe, qg;   // per-machine air-gap powers
  double p_load = 0.0, q_load = 0.0;
  int iterations = 0;
};

namespace detail {

inline void check_connected(const SystemSpec& sys, const NetworkState& st) {
  int n = sys.bus_count();
  std::vector<std::vector<int>> adj(n);
  for (std::size_t i = 0; i < sys.lines.size(); ++i) {
    if (static_cast<int>(i) == st.tripped_line) continue;
    adj[sys.lines[i].from].push_back(sys.lines[i].to);
    adj[sys.lines[i].to].push_back(sys.lines[i].from);
  }
  std::vector<char> seen(n, 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  while (!stack.empty()) {
    int b = stack.back();
    stack.pop_back();
    for (int nb : adj[b])
      if (!seen[nb]) {
        seen[nb] = 1;
        stack.push_back(nb);
      }
  }
  for (int b = 0; b < n; ++b)
    if (!seen[b]) throw SingularNetwork("bus " + std::to_string(b) + " is disconnected");
}

inline Eigen::MatrixXcd build_ybus(const SystemSpec& sys, const NetworkState& st,
                                   double load_scale) {
  int n = sys.bus_count();
  Eigen::MatrixXcd y = Eigen::MatrixXcd::Zero(n, n);
  for (std::size_t i = 0; i < sys.lines.size(); ++i) {
    if (static_cast<int>(i) == st.tripped_line) continue;
    const Line& l = sys.lines[i];
    Complex yl = 1.0 / Complex(0.0, l.x);
    y(l.from, l.from) += yl;
    y(l.to, l.to) += yl;
    y(l.from, l.to) -= yl;
    y(l.to, l.from) -= yl;
  }
  for (const auto& m : sys.machines) y(m.bus, m.bus) += 1.0 / Complex(0.0, m.xd_prime);
  if (st.fault_bus >= 0) y(st.fault_bus, st.fault_bus) += kFaultConductance;
  // Constant-impedance portion of the load folds into the matrix.
  double p0 = sys.p_load_nominal * load_scale;
  double q0 = sys.q_load_nominal * load_scale;
  y(sys.load_bus, sys.load_bus) += Complex(sys.zip.a_p * p0, -sys.zip.a_q * q0);
  return y;
}

}  // namespace detail

// Solves the algebraic network for given machine internal angles. The
// quadratic part of the ZIP load is folded into the admittance matrix; the
// linear and constant parts iterate as current injections on the load
// voltage (fixed point, warm-startable). Constant-power current injections
// roll off quadratically below v_floor so faulted-bus solves stay bounded.
inline NetworkSolution solve_network(const SystemSpec& sys, const Eigen::VectorXd& delta,
                                     double load_scale, const NetworkState& st = {},
                                     const Eigen::VectorXcd* warm = nullptr,
                                     double tol = 1e-8, int max_iter = 50,
                                     double v_floor = 0.05) {
  detail::check_connected(sys, st);
  const int n = sys.bus_count();
  const int nm = static_cast<int>(sys.machines.size());
  if (delta.size() != nm) throw ShapeMismatch("delta size != machine count");

  Eigen::MatrixXcd y = detail::build_ybus(sys, st, load_scale);
  Eigen::PartialPivLU<Eigen::MatrixXcd> lu(y);

  Eigen::VectorXcd igen = Eigen::VectorXcd::Zero(n);
  for (int m = 0; m < nm; ++m) {
    const Machine& mc = sys.machines[m];
    Complex e = std::polar(mc.emf, delta[m]);
    igen[mc.bus] += e / Complex(0.0, mc.xd_prime);
  }

  const double p0 = sys.p_load_nominal * load_scale;
  const double q0 = sys.q_load_nominal * load_scale;

  NetworkSolution out;
  Complex i_rem = 0.0;  // non-impedance load current at the solution
  if (sys.zip.impedance_only() || (p0 == 0.0 && q0 == 0.0)) {
    out.v = lu.solve(igen);
    out.iterations = 1;
  } else {
    Eigen::VectorXcd v = warm && warm->size() == n
                             ? *warm
                             : Eigen::VectorXcd::Constant(n, Complex(1.0, 0.0));
    bool converged = false;
    for (int it = 1; it <= max_iter; ++it) {
      Complex vl = v[sys.load_bus];
      double vm = std::abs(vl);
      double p_rem = p0 * (sys.zip.b_p * vm + sys.zip.c_p);
      double q_rem = q0 * (sys.zip.b_q * vm + sys.zip.c_q);
      if (vm < v_floor) {
        double roll = (vm / v_floor) * (vm / v_floor);
        p_rem *= roll;
        q_rem *= roll;
      }
      if (vm < 1e-9) throw DivisionByZero("load bus voltage collapsed to zero");
      i_rem = std::conj(Complex(p_rem, q_rem) / vl);
      Eigen::VectorXcd rhs = igen;
      rhs[sys.load_bus] -= i_rem;
      Eigen::VectorXcd v_new = lu.solve(rhs);
      double dv = (v_new - v).cwiseAbs().maxCoeff();
      v = v_new;
      out.iterations = it;
      if (dv < tol) {
        converged = true;
        break;
      }
    }
    if (!converged) throw NoConvergence("ZIP fixed point did not converge");
    out.v = v;
  }

  out.pe.resize(nm);
  out.qg.resize(nm);
  for (int m = 0; m < nm; ++m) {
    const Machine& mc = sys.machines[m];
    Complex e = std::polar(mc.emf, delta[m]);
    Complex ig = (e - out.v[mc.bus]) / Complex(0.0, mc.xd_prime);
    Complex sg = e * std::conj(ig);
    out.pe[m] = sg.real();
    out.qg[m] = sg.imag();
  }
  double vl = std::abs(out.v[sys.load_bus]);
  out.p_load = p0 * sys.zip.kp(vl);
  out.q_load = q0 * sys.zip.kq(vl);
  return out;
}

// Max bus current imbalance of a candidate solution; test and diagnostic
// hook for the algebraic equations.
inline double network_residual(const SystemSpec& sys, const Eigen::VectorXd& delta,
                               double load_scale, const NetworkState& st,
                               const Eigen::VectorXcd& v) {
  const int n = sys.bus_count();
  Eigen::MatrixXcd y = detail::build_ybus(sys, st, load_scale);
  Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(n);
  for (std::size_t m = 0; m < sys.machines.size(); ++m) {
    const Machine& mc = sys.machines[m];
    rhs[mc.bus] += std::polar(mc.emf, delta[m]) / Complex(0.0, mc.xd_prime);
  }
  Complex vl = v[sys.load_bus];
  double vm = std::abs(vl);
  double p0 = sys.p_load_nominal * load_scale;
  double q0 = sys.q_load_nominal * load_scale;
  if (vm > 0.0) {
    double p_rem = p0 * (sys.zip.b_p * vm + sys.zip.c_p);
    double q_rem = q0 * (sys.zip.b_q * vm + sys.zip.c_q);
    rhs[sys.load_bus] -= std::conj(Complex(p_rem, q_rem) / vl);
  }
  return (y * v - rhs).cwiseAbs().maxCoeff();
}

struct Loading {
  double dispatch;    // machine-0 mechanical power target, p.u.
  double load_scale;  // multiplier on the nominal load
};

struct SteadyState {
  Eigen::VectorXd delta;
  Eigen::VectorXcd v;
  Eigen::VectorXd pm, pe, qg;
};

// Pre-fault equilibrium. The last machine is the angle reference and picks
// up the slack power; machine 0's output is driven to the dispatch target
// with a 1-D Newton iteration on its internal angle.
inline SteadyState steady_state(const SystemSpec& sys, const Loading& loading) {
  sys.validate();
  const int nm = static_cast<int>(sys.machines.size());
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(nm);

  const double tol = 1e-12;
  const int max_iter = 50;
  auto pe0 = [&](double d0) {
    Eigen::VectorXd d = delta;
    d[0] = d0;
    return solve_network(sys, d, loading.load_scale, {}, nullptr, 1e-13, 200).pe[0];
  };

  double d0 = 0.0;
  bool converged = false;
  for (int it = 0; it < max_iter; ++it) {
    double g = pe0(d0) - loading.dispatch;
    if (std::abs(g) < tol) {
      converged = true;
      break;
    }
    const double h = 1e-7;
    double dg = (pe0(d0 + h) - pe0(d0 - h)) / (2.0 * h);
    if (!std::isfinite(dg) || std::abs(dg) < 1e-12) break;  // fall back to bisection
    double step = g / dg;
    if (step > 0.5) step = 0.5;
    if (step < -0.5) step = -0.5;
    d0 -= step;
  }

  if (!converged) {
    // Bracketed bisection over the rising branch of the power-angle curve.
    double lo = -0.5, hi = lo;
    double g_lo = pe0(lo) - loading.dispatch;
    bool bracketed = false;
    for (double d = lo + 0.05; d <= 1.6; d += 0.05) {
      double g = pe0(d) - loading.dispatch;
      if (g_lo <= 0.0 && g >= 0.0) {
        hi = d;
        bracketed = true;
        break;
      }
      lo = d;
      g_lo = g;
    }
    if (!bracketed) throw NoConvergence("steady state: dispatch outside the feasible range");
    for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
      double mid = 0.5 * (lo + hi);
      ((pe0(mid) - loading.dispatch) < 0.0 ? lo : hi) = mid;
    }
    d0 = 0.5 * (lo + hi);
    if (std::abs(pe0(d0) - loading.dispatch) > 1e-10)
      throw NoConvergence("steady state bisection did not reach the dispatch target");
    converged = true;
  }

  delta[0] = d0;
  NetworkSolution sol = solve_network(sys, delta, loading.load_scale, {}, nullptr, 1e-13, 200);
  SteadyState ss;
  ss.delta = delta;
  ss.v = sol.v;
  ss.pe = sol.pe;
  ss.qg = sol.qg;
  ss.pm = sol.pe;  // equilibrium: mechanical power balances electrical
  ss.pm[0] = loading.dispatch;
  return ss;
}

// Simulated swing trajectory on a uniform grid. Angles in radians,
// frequency deviations in Hz, powers in p.u.
struct Trajectory {
  double dt = 0.0;
  std::vector<double> t;
  Eigen::MatrixXd gen_delta, gen_fdev, gen_pm, gen_pe, gen_q;  // steps x machines
  Eigen::MatrixXd bus_v, bus_theta, bus_fdev, bus_p, bus_q;    // steps x buses

  int steps() const { return static_cast<int>(t.size()); }

  void validate() const {
    if (t.empty()) throw std::invalid_argument("empty trajectory");
    for (std::size_t k = 1; k < t.size(); ++k)
      if (!(t[k] > t[k - 1]) || std::abs((t[k] - t[k - 1]) - dt) > 1e-9)
        throw std::invalid_argument("time grid not uniform/increasing");
    if ((bus_v.array() <= 0.0).any()) throw std::invalid_argument("non-positive bus voltage");
    auto rows = static_cast<Eigen::Index>(t.size());
    for (const Eigen::MatrixXd* m :
         {&gen_delta, &gen_fdev, &gen_pm, &gen_pe, &gen_q, &bus_v, &bus_theta, &bus_fdev,
          &bus_p, &bus_q})
      if (m->rows() != rows) throw std::invalid_argument("trajectory array length mismatch");
  }
};

// Fixed-step RK4 integration of the classical swing equations
//   2H/w_s * d(dw)/dt = Pm - Pe - D*dw,   d(delta)/dt = dw
// with the algebraic network solved at every stage.
inline Trajectory simulate(const SystemSpec& sys, const ContingencySpec& cont, double dt,
                           double horizon, const Loading* loading_opt = nullptr) {
  sys.validate();
  if (!(cont.t_fault >= 0.0 && cont.t_fault < cont.t_clear))
    throw std::invalid_argument("require 0 <= t_fault < t_clear");
  if (!(dt > 0.0 && dt <= 0.02)) throw std::invalid_argument("dt must be in (0, 0.02]");
  if (cont.t_clear < horizon && horizon < cont.t_clear + 1.0)
    throw std::invalid_argument("horizon must cover the contingency plus 1 s");

  Loading loading{sys.dispatch_nominal, 1.0};
  if (loading_opt) loading = *loading_opt;
  SteadyState ss = steady_state(sys, loading);

  const int nm = static_cast<int>(sys.machines.size());
  const int nb = sys.bus_count();
  const double ws = sys.omega_s();
  const int nsteps = static_cast<int>(std::llround(horizon / dt));

  auto topo_at = [&](double time) {
    NetworkState st;
    if (cont.fault_bus >= 0 && time >= cont.t_fault && time < cont.t_clear)
      st.fault_bus = cont.fault_bus;
    if (time >= cont.t_clear) st.tripped_line = cont.trip_line;
    return st;
  };

  Eigen::VectorXd delta = ss.delta;
  Eigen::VectorXd domega = Eigen::VectorXd::Zero(nm);  // rad/s
  Eigen::VectorXcd warm = ss.v;

  Trajectory traj;
  traj.dt = dt;
  traj.t.resize(nsteps + 1);
  traj.gen_delta.resize(nsteps + 1, nm);
  traj.gen_fdev.resize(nsteps + 1, nm);
  traj.gen_pm.resize(nsteps + 1, nm);
  traj.gen_pe.resize(nsteps + 1, nm);
  traj.gen_q.resize(nsteps + 1, nm);
  traj.bus_v.resize(nsteps + 1, nb);
  traj.bus_theta.resize(nsteps + 1, nb);
  traj.bus_fdev.resize(nsteps + 1, nb);
  traj.bus_p.resize(nsteps + 1, nb);
  traj.bus_q.resize(nsteps + 1, nb);

  struct Deriv {
    Eigen::VectorXd ddelta, ddomega;
  };
  auto deriv = [&](const Eigen::VectorXd& d, const Eigen::VectorXd& w, double time,
                   NetworkSolution* sol_out) {
    NetworkSolution sol = solve_network(sys, d, loading.load_scale, topo_at(time), &warm);
    warm = sol.v;
    Deriv dv;
    dv.ddelta = w;
    dv.ddomega.resize(nm);
    for (int m = 0; m < nm; ++m) {
      const Machine& mc = sys.machines[m];
      dv.ddomega[m] =
          ws / (2.0 * mc.inertia_h) * (ss.pm[m] - sol.pe[m] - mc.damping_d * w[m]);
    }
    if (sol_out) *sol_out = std::move(sol);
    return dv;
  };

  auto record = [&](int k, double time, const NetworkSolution& sol) {
    traj.t[k] = time;
    for (int m = 0; m < nm; ++m) {
      traj.gen_delta(k, m) = delta[m];
      traj.gen_fdev(k, m) = domega[m] / (2.0 * std::numbers::pi);
      traj.gen_pm(k, m) = ss.pm[m];
      traj.gen_pe(k, m) = sol.pe[m];
      traj.gen_q(k, m) = sol.qg[m];
    }
    for (int b = 0; b < nb; ++b) {
      traj.bus_v(k, b) = std::abs(sol.v[b]);
      traj.bus_theta(k, b) = std::arg(sol.v[b]);
      traj.bus_p(k, b) = b == sys.load_bus ? sol.p_load : 0.0;
      traj.bus_q(k, b) = b == sys.load_bus ? sol.q_load : 0.0;
    }
  };

  for (int k = 0; k <= nsteps; ++k) {
    double time = k * dt;
    NetworkSolution sol;
    Deriv k1 = deriv(delta, domega, time, &sol);
    record(k, time, sol);
    if (k == nsteps) break;

    if (delta.cwiseAbs().maxCoeff() > 1e4)
      throw NumericalBlowup("rotor angle exceeded 1e4 rad");

    Deriv k2 = deriv(delta + 0.5 * dt * k1.ddelta, domega + 0.5 * dt * k1.ddomega,
                     time + 0.5 * dt, nullptr);
    Deriv k3 = deriv(delta + 0.5 * dt * k2.ddelta, domega + 0.5 * dt * k2.ddomega,
                     time + 0.5 * dt, nullptr);
    Deriv k4 = deriv(delta + dt * k3.ddelta, domega + dt * k3.ddomega, time + dt, nullptr);

    delta += dt / 6.0 * (k1.ddelta + 2.0 * k2.ddelta + 2.0 * k3.ddelta + k4.ddelta);
    domega += dt / 6.0 * (k1.ddomega + 2.0 * k2.ddomega + 2.0 * k3.ddomega + k4.ddomega);
  }

  // Bus frequency deviation: backward difference of the unwrapped phase.
  const double two_pi = 2.0 * std::numbers::pi;
  for (int b = 0; b < nb; ++b) {
    traj.bus_fdev(0, b) = 0.0;
    double prev = traj.bus_theta(0, b);
    double offset = 0.0;
    for (int k = 1; k <= nsteps; ++k) {
      double raw = traj.bus_theta(k, b);
      double jump = raw + offset - prev;
      while (jump > std::numbers::pi) {
        offset -= two_pi;
        jump -= two_pi;
      }
      while (jump < -std::numbers::pi) {
        offset += two_pi;
        jump += two_pi;
      }
      double cur = raw + offset;
      traj.bus_fdev(k, b) = (cur - prev) / (two_pi * dt);
      prev = cur;
    }
  }
  return traj;
}

enum class StabilityLabel { unstable = 0, stable = 1 };

// First-swing criterion: unstable iff any pairwise rotor-angle separation
// exceeds the threshold anywhere on the horizon.
inline StabilityLabel label_stability(const Trajectory& traj, double threshold_deg = 180.0) {
  const double thr = threshold_deg * std::numbers::pi / 180.0;
  const int nm = static_cast<int>(traj.gen_delta.cols());
  for (int k = 0; k < traj.steps(); ++k)
    for (int i = 0; i < nm; ++i)
      for (int j = i + 1; j < nm; ++j)
        if (std::abs(traj.gen_delta(k, i) - traj.gen_delta(k, j)) > thr)
          return StabilityLabel::unstable;
  return StabilityLabel::stable;
}

}  // namespace enrt
