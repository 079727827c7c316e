#pragma once

#include <atomic>
#include <mutex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>
#include <vector>

#include "enrt/featurebase.hpp"
#include "enrt/powersim.hpp"
#include "enrt/rng.hpp"

#include <json.hpp>

namespace enrt {

struct Provenance {
  std::uint64_t seed = 0;
  int index = 0;
  double dispatch_mult = 1.0;
  double load_mult = 1.0;
  double t_clear = 0.0;
};

struct Sample {
  Eigen::MatrixXd features;  // T x F_raw, physical units
  int label = 0;             // 1 = stable
  Provenance prov;
};

// Monte-Carlo draw ranges and simulation settings for dataset generation.
struct McSpec {
  double dispatch_lo = 0.6, dispatch_hi = 1.4;
  double load_lo = 0.7, load_hi = 1.3;
  double clear_lo = 0.05, clear_hi = 0.15;  // t_clear - t_fault, s
  double t_fault = 0.1;
  int fault_bus = 2;
  int trip_line = 0;  // drop one export circuit at clearing
  double dt = 0.005;
  double horizon = 3.0;
  int window = 10;
  double window_dt = 0.02;
  double threshold_deg = 180.0;
};

struct Dataset {
  FeatureSchema schema;  // raw window schema
  std::vector<Sample> samples;
  int train_count = 0;  // leading samples form the training split

  int test_count() const { return static_cast<int>(samples.size()) - train_count; }

  double stable_fraction() const {
    if (samples.empty()) return 0.0;
    double s = 0.0;
    for (const auto& smp : samples) s += smp.label;
    return s / static_cast<double>(samples.size());
  }
};

// Draws n independent scenarios and labels each by simulation. Every draw
// owns its RNG stream keyed by (seed, index), so generation order (and any
// parallel execution) cannot change the result; samples are emitted sorted
// by index.
inline Dataset generate_dataset(const SystemSpec& sys, const McSpec& mc, int n,
                                std::uint64_t seed, double train_ratio = 0.75,
                                int jobs = 1) {
  if (n < 1) throw EmptyInput("dataset size must be >= 1");
  sys.validate();

  const int ng = static_cast<int>(sys.machines.size());
  const int nb = sys.bus_count();

  Dataset ds;
  ds.schema = FeatureSchema::raw_window(ng, nb, mc.window);
  ds.samples.resize(static_cast<std::size_t>(n));
  ds.train_count = static_cast<int>(std::llround(train_ratio * n));

  auto make_one = [&](int i) {
    RngStream rng(seed, "mc-draw", static_cast<std::uint64_t>(i));
    Sample smp;
    smp.prov.seed = seed;
    smp.prov.index = i;
    smp.prov.dispatch_mult = rng.uniform(mc.dispatch_lo, mc.dispatch_hi);
    smp.prov.load_mult = rng.uniform(mc.load_lo, mc.load_hi);
    double dur = rng.uniform(mc.clear_lo, mc.clear_hi);
    smp.prov.t_clear = mc.t_fault + dur;

    ContingencySpec cont;
    cont.fault_bus = mc.fault_bus;
    cont.t_fault = mc.t_fault;
    cont.t_clear = smp.prov.t_clear;
    cont.trip_line = mc.trip_line;

    Loading loading{sys.dispatch_nominal * smp.prov.dispatch_mult, smp.prov.load_mult};
    Trajectory traj = simulate(sys, cont, mc.dt, mc.horizon, &loading);
    smp.label = label_stability(traj, mc.threshold_deg) == StabilityLabel::stable ? 1 : 0;
    smp.features = extract_window(traj, cont.t_clear, mc.window, mc.window_dt);
    ds.samples[static_cast<std::size_t>(i)] = std::move(smp);
  };

  if (jobs <= 1) {
    for (int i = 0; i < n; ++i) make_one(i);
  } else {
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) make_one(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        next.store(n);  // drain remaining work
      }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  double frac = ds.stable_fraction();
  if (frac == 0.0 || frac == 1.0)
    std::cerr << "warning: degenerate dataset, every label is "
              << (frac == 1.0 ? "stable" : "unstable") << "\n";
  return ds;
}

// On-disk layout: <dir>/schema.json describes the feature block and split;
// <dir>/records.bin holds one record per sample (u32 index, u32 label,
// then T*F little-endian binary64 values, row-major); <dir>/provenance.json
// records the generating draws.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  nlohmann::json schema = ds.schema.to_json();
  schema["n_samples"] = ds.samples.size();
  schema["train_count"] = ds.train_count;
  schema["record_layout"] = "u32 index, u32 label, window*width f64 row-major";
  schema["standardization"] = nullptr;  // fitted downstream, on the training split
  nlohmann::json names = nlohmann::json::array();
  for (int i = 0; i < ds.schema.size(); ++i) names.push_back(feature_name(i, ds.schema));
  schema["feature_names"] = names;
  std::ofstream(dir / "schema.json") << schema.dump(2) << "\n";

  std::ofstream rec(dir / "records.bin", std::ios::binary);
  for (const auto& s : ds.samples) {
    auto idx = static_cast<std::uint32_t>(s.prov.index);
    auto lab = static_cast<std::uint32_t>(s.label);
    rec.write(reinterpret_cast<const char*>(&idx), sizeof(idx));
    rec.write(reinterpret_cast<const char*>(&lab), sizeof(lab));
    for (Eigen::Index t = 0; t < s.features.rows(); ++t)
      for (Eigen::Index j = 0; j < s.features.cols(); ++j) {
        double v = s.features(t, j);
        rec.write(reinterpret_cast<const char*>(&v), sizeof(v));
      }
  }

  nlohmann::json prov = nlohmann::json::array();
  for (const auto& s : ds.samples)
    prov.push_back({{"index", s.prov.index},
                    {"seed", s.prov.seed},
                    {"dispatch_mult", s.prov.dispatch_mult},
                    {"load_mult", s.prov.load_mult},
                    {"t_clear", s.prov.t_clear}});
  std::ofstream(dir / "provenance.json") << prov.dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream sf(dir / "schema.json");
  if (!sf) throw std::runtime_error("missing schema.json in " + dir.string());
  nlohmann::json schema_json = nlohmann::json::parse(sf);

  Dataset ds;
  ds.schema = FeatureSchema::from_json(schema_json);
  ds.train_count = schema_json.at("train_count");
  const auto n = schema_json.at("n_samples").get<std::size_t>();
  const int window = ds.schema.window;
  const int width = ds.schema.raw_per_step();

  std::ifstream rec(dir / "records.bin", std::ios::binary);
  if (!rec) throw std::runtime_error("missing records.bin in " + dir.string());
  ds.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t idx = 0, lab = 0;
    rec.read(reinterpret_cast<char*>(&idx), sizeof(idx));
    rec.read(reinterpret_cast<char*>(&lab), sizeof(lab));
    Sample& s = ds.samples[i];
    s.prov.index = static_cast<int>(idx);
    s.label = static_cast<int>(lab);
    s.features.resize(window, width);
    for (int t = 0; t < window; ++t)
      for (int j = 0; j < width; ++j) {
        double v = 0.0;
        rec.read(reinterpret_cast<char*>(&v), sizeof(v));
        s.features(t, j) = v;
      }
    if (!rec) throw std::runtime_error("records.bin truncated");
  }

  std::ifstream pf(dir / "provenance.json");
  if (pf) {
    nlohmann::json prov = nlohmann::json::parse(pf);
    for (std::size_t i = 0; i < std::min(n, prov.size()); ++i) {
      ds.samples[i].prov.seed = prov[i].value("seed", 0ULL);
      ds.samples[i].prov.dispatch_mult = prov[i].value("dispatch_mult", 1.0);
      ds.samples[i].prov.load_mult = prov[i].value("load_mult", 1.0);
      ds.samples[i].prov.t_clear = prov[i].value("t_clear", 0.0);
    }
  }
  return ds;
}

// System specification file (JSON).
inline nlohmann::json system_to_json(const SystemSpec& s) {
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["machines"] = nlohmann::json::array();
  for (const auto& m : s.machines)
    j["machines"].push_back({{"inertia_h", m.inertia_h},
                             {"damping_d", m.damping_d},
                             {"xd_prime", m.xd_prime},
                             {"emf", m.emf},
                             {"bus", m.bus}});
  j["lines"] = nlohmann::json::array();
  for (const auto& l : s.lines) j["lines"].push_back({{"from", l.from}, {"to", l.to}, {"x", l.x}});
  j["load_bus"] = s.load_bus;
  j["zip"] = {{"a_p", s.zip.a_p}, {"b_p", s.zip.b_p}, {"c_p", s.zip.c_p},
              {"a_q", s.zip.a_q}, {"b_q", s.zip.b_q}, {"c_q", s.zip.c_q}};
  j["p_load_nominal"] = s.p_load_nominal;
  j["q_load_nominal"] = s.q_load_nominal;
  j["dispatch_nominal"] = s.dispatch_nominal;
  j["frequency_hz"] = s.frequency_hz;
  j["base_mva"] = s.base_mva;
  return j;
}

inline SystemSpec system_from_json(const nlohmann::json& j) {
  SystemSpec s;
  s.machines.clear();
  for (const auto& m : j.at("machines"))
    s.machines.push_back({m.at("inertia_h"), m.at("damping_d"), m.at("xd_prime"),
                          m.at("emf"), m.at("bus")});
  s.lines.clear();
  for (const auto& l : j.at("lines")) s.lines.push_back({l.at("from"), l.at("to"), l.at("x")});
  s.load_bus = j.at("load_bus");
  const auto& z = j.at("zip");
  s.zip = {z.at("a_p"), z.at("b_p"), z.at("c_p"), z.at("a_q"), z.at("b_q"), z.at("c_q")};
  s.p_load_nominal = j.at("p_load_nominal");
  s.q_load_nominal = j.at("q_load_nominal");
  s.dispatch_nominal = j.at("dispatch_nominal");
  s.frequency_hz = j.at("frequency_hz");
  s.base_mva = j.at("base_mva");
  s.validate();
  return s;
}

}  // namespace enrt
