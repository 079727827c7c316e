#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "enrt/dataset.hpp"
#include "enrt/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace enrt::cli {

namespace detail {

inline std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

// Fills a RunConfig from an optional JSON config file with explicit command
// line flags taking precedence.
struct TrainOptions {
  std::string config_file;
  std::string preset;
  RunConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON config file; flags override its values");
    cmd->add_option("--preset", preset, "architecture preset: desk or paper");
    cmd->add_option("--data", cfg.data_dir, "dataset directory");
    cmd->add_option("--out", cfg.out_dir, "output directory for run artifacts");
    cmd->add_option("--seed", cfg.seed, "master seed");
    cmd->add_option("--sigma-tree", cfg.sigma_tree, "tree regularization strength");
    cmd->add_option("--reg", reg_name, "regularization mode: tree|l1|l2|none");
    cmd->add_option("--epochs", cfg.epochs, "training epochs");
    cmd->add_option("--batch", cfg.batch, "minibatch size");
    cmd->add_option("--hidden", cfg.hidden, "recurrent hidden size");
    cmd->add_option("--layers", cfg.layers, "recurrent layer count");
    cmd->add_option("--s-leaf", cfg.s_leaf, "minimum samples per tree leaf");
    cmd->add_option("--max-depth", cfg.max_depth, "maximum tree depth");
    cmd->add_option("--sigma-surr", cfg.sigma_surr, "surrogate L2 coefficient");
    cmd->add_option("--surrogate-base", cfg.surrogate_base, "surrogate base sample size");
    cmd->add_option("--aug", aug_name, "surrogate augmentation: gaussian|dirichlet|none");
    cmd->add_flag("--aug-zero-mean", cfg.aug_zero_mean, "drop the mean shift in gaussian noise");
    cmd->add_flag("--no-reweight", no_reweight, "disable the two-group record weighting");
    cmd->add_flag("--no-expert", no_expert, "drop all expert nonlinear terms");
    cmd->add_flag("--no-expert-dq", no_dq, "drop the d-q rotation terms");
    cmd->add_flag("--no-expert-current", no_cur, "drop the load power equation terms");
    cmd->add_flag("--no-expert-load", no_load, "drop the load characteristic terms");
    cmd->add_option("--policy", policy_str, "tree input policy: flattened_window|final_snapshot");
    cmd->add_flag("--metrics-on-train", cfg.metrics_on_train,
                  "report fidelity/accuracy on the training split");
    owner = cmd;
  }

  RunConfig resolve() {
    RunConfig base;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw std::runtime_error("cannot read config file " + config_file);
      base = RunConfig::from_json(nlohmann::json::parse(in));
    }
    if (!preset.empty()) base.apply_preset(preset);

    auto given = [&](const std::string& flag) { return owner->count(flag) > 0; };
    if (given("--data")) base.data_dir = cfg.data_dir;
    if (given("--out")) base.out_dir = cfg.out_dir;
    if (given("--seed")) base.seed = cfg.seed;
    if (given("--sigma-tree")) base.sigma_tree = cfg.sigma_tree;
    if (given("--reg")) base.reg = reg_mode_from(reg_name);
    if (given("--epochs")) base.epochs = cfg.epochs;
    if (given("--batch")) base.batch = cfg.batch;
    if (given("--hidden")) base.hidden = cfg.hidden;
    if (given("--layers")) base.layers = cfg.layers;
    if (given("--s-leaf")) base.s_leaf = cfg.s_leaf;
    if (given("--max-depth")) base.max_depth = cfg.max_depth;
    if (given("--sigma-surr")) base.sigma_surr = cfg.sigma_surr;
    if (given("--surrogate-base")) base.surrogate_base = cfg.surrogate_base;
    if (given("--aug")) base.aug = aug_mode_from(aug_name);
    if (given("--aug-zero-mean")) base.aug_zero_mean = cfg.aug_zero_mean;
    if (no_reweight) base.reweight = false;
    if (no_expert) base.expert = ExpertGroups::none();
    if (no_dq) base.expert.dq_rotation = false;
    if (no_cur) base.expert.load_power = false;
    if (no_load) base.expert.load_characteristic = false;
    if (given("--policy")) base.policy = policy_from(policy_str);
    if (given("--metrics-on-train")) base.metrics_on_train = cfg.metrics_on_train;
    return base;
  }

 private:
  CLI::App* owner = nullptr;
  std::string reg_name = "tree";
  std::string aug_name = "gaussian";
  std::string policy_str = "flattened_window";
  bool no_reweight = false, no_expert = false, no_dq = false, no_cur = false, no_load = false;
};

inline void print_metrics(std::ostream& os, const EvalMetrics& m) {
  os << "nnem_acc " << fmt_double(m.nnem_acc) << "  tree_acc " << fmt_double(m.tree_acc)
     << "  fidelity " << fmt_double(m.fidelity) << "  mu_bar " << fmt_double(m.mu_bar) << "\n";
}

// Flattened raw window of one sample as a single row.
inline Eigen::MatrixXd flatten_one_row(const Dataset& ds, int row) {
  const int t = ds.schema.window;
  const int f = ds.schema.raw_per_step();
  Eigen::MatrixXd out(1, t * f);
  for (int step = 0; step < t; ++step)
    for (int j = 0; j < f; ++j)
      out(0, step * f + j) = ds.samples[static_cast<std::size_t>(row)].features(step, j);
  return out;
}

int selftest(std::uint64_t seed, const std::string& inject_fault);

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"transient stability lab: dataset generation, tree-regularized training, "
               "rule explanation"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a labeled Monte-Carlo dataset");
  std::string gen_system, gen_out = "data";
  int gen_n = 2000, gen_jobs = 1;
  std::uint64_t gen_seed = 42;
  double gen_split = 0.75;
  McSpec mc;
  gen->add_option("--system", gen_system, "system spec JSON (default: built-in example)");
  gen->add_option("--n", gen_n, "number of samples");
  gen->add_option("--seed", gen_seed, "master seed");
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--split", gen_split, "training fraction");
  gen->add_option("--jobs", gen_jobs, "parallel workers");
  gen->add_option("--t-fault", mc.t_fault, "fault application time, s");
  gen->add_option("--clear-lo", mc.clear_lo, "min clearing duration, s");
  gen->add_option("--clear-hi", mc.clear_hi, "max clearing duration, s");
  gen->add_option("--dispatch-lo", mc.dispatch_lo, "min dispatch multiplier");
  gen->add_option("--dispatch-hi", mc.dispatch_hi, "max dispatch multiplier");
  gen->add_option("--load-lo", mc.load_lo, "min load multiplier");
  gen->add_option("--load-hi", mc.load_hi, "max load multiplier");
  gen->add_option("--trip-line", mc.trip_line, "line index tripped at clearing (-1: none)");
  gen->add_option("--dt", mc.dt, "integration step, s");
  gen->add_option("--horizon", mc.horizon, "simulation horizon, s");
  gen->add_option("--window", mc.window, "observation window snapshots");
  gen->add_option("--window-dt", mc.window_dt, "snapshot spacing, s");
  gen->add_option("--threshold-deg", mc.threshold_deg, "instability threshold, degrees");

  // train
  auto* train = app.add_subcommand("train", "train the evaluation model and distill a tree");
  detail::TrainOptions topt;
  topt.attach(train);

  // eval
  auto* eval = app.add_subcommand("eval", "recompute metrics for a stored run");
  std::string eval_run, eval_data, eval_pred;
  bool eval_train = false;
  std::uint64_t eval_seed = 42;
  eval->add_option("--run", eval_run, "run directory")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_flag("--train", eval_train, "evaluate on the training split");
  eval->add_option("--predictions", eval_pred, "also export per-sample predictions (TSV)");
  eval->add_option("--seed", eval_seed, "accepted for interface uniformity");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "one full run per regularization strength");
  detail::TrainOptions sopt;
  sopt.attach(sweep_cmd);
  std::string sweep_grid = "1e-3,1e-2,1e-1,1,10";
  int sweep_jobs = 1;
  sweep_cmd->add_option("--grid", sweep_grid, "comma-separated sigma_tree grid");
  sweep_cmd->add_option("--jobs", sweep_jobs, "concurrent runs");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "toggle surrogate strategies or expert terms");
  detail::TrainOptions aopt;
  aopt.attach(ablate_cmd);
  std::string ablate_mode = "surrogate";
  int ablate_jobs = 1;
  ablate_cmd->add_option("--mode", ablate_mode, "surrogate | nonlinear");
  ablate_cmd->add_option("--jobs", ablate_jobs, "concurrent runs");

  // explain
  auto* explain = app.add_subcommand("explain", "render the decision rule for one sample");
  std::string ex_run, ex_data, ex_out;
  int ex_index = 0;
  bool ex_train = false;
  std::uint64_t ex_seed = 42;
  explain->add_option("--run", ex_run, "run directory")->required();
  explain->add_option("--data", ex_data, "dataset directory")->required();
  explain->add_option("--index", ex_index, "sample index within the dataset")->required();
  explain->add_flag("--train", ex_train, "index refers to the training split ordering");
  explain->add_option("--out", ex_out, "write the structured rule (JSON) here");
  explain->add_option("--seed", ex_seed, "accepted for interface uniformity");

  // selftest
  auto* self = app.add_subcommand("selftest", "fast built-in correctness checks");
  std::uint64_t self_seed = 42;
  std::string self_fault;
  self->add_option("--seed", self_seed, "seed for the randomized checks");
  self->add_option("--inject-fault", self_fault,
                   "corrupt a named computation to verify the checks can fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      SystemSpec sys = SystemSpec::example();
      if (!gen_system.empty()) {
        std::ifstream in(gen_system);
        if (!in) throw std::runtime_error("cannot read system file " + gen_system);
        sys = system_from_json(nlohmann::json::parse(in));
      }
      Dataset ds = generate_dataset(sys, mc, gen_n, gen_seed, gen_split, gen_jobs);
      save_dataset(ds, gen_out);
      std::ofstream(std::filesystem::path(gen_out) / "system.json")
          << system_to_json(sys).dump(2) << "\n";
      std::cout << "wrote " << ds.samples.size() << " samples to " << gen_out << " ("
                << ds.train_count << " train / " << ds.test_count() << " test, "
                << fmt_double(ds.stable_fraction()) << " stable)\n";
      return 0;
    }

    if (train->parsed()) {
      RunConfig cfg = topt.resolve();
      RunArtifacts art = run(cfg);
      std::cout << "run " << art.run_dir.string() << "\n";
      std::cout << "sigma_tree " << fmt_double(cfg.sigma_tree) << "  reg "
                << reg_mode_name(cfg.reg) << "  epochs " << cfg.epochs << "\n";
      detail::print_metrics(std::cout, art.final_eval);
      return 0;
    }

    if (eval->parsed()) {
      LoadedRun lr = load_run(eval_run);
      Dataset ds = load_dataset(eval_data);
      EvalMetrics m = evaluate(lr, ds, eval_train);
      nlohmann::json j = {{"format_version", kFormatVersion},
                          {"split", eval_train ? "train" : "test"},
                          {"nnem_acc", m.nnem_acc},
                          {"tree_acc", m.tree_acc},
                          {"fidelity", m.fidelity},
                          {"mu_bar", m.mu_bar}};
      for (int k = 0; k < kExpertFamilyCount; ++k) {
        Family fam = static_cast<Family>(k + 1);
        j["n_nonl"][family_name(fam)] = m.n_nonl[static_cast<std::size_t>(k)];
        if (m.l_nonl[static_cast<std::size_t>(k)].has_value())
          j["l_nonl"][family_name(fam)] = *m.l_nonl[static_cast<std::size_t>(k)];
        else
          j["l_nonl"][family_name(fam)] = nullptr;
      }
      std::ofstream(std::filesystem::path(eval_run) /
                    (eval_train ? "metrics_eval_train.json" : "metrics_eval_test.json"))
          << j.dump(2) << "\n";
      if (!eval_pred.empty()) export_predictions(lr, ds, eval_train, eval_pred);
      detail::print_metrics(std::cout, m);
      return 0;
    }

    if (sweep_cmd->parsed()) {
      RunConfig cfg = sopt.resolve();
      std::vector<double> grid = detail::parse_grid(sweep_grid);
      std::vector<SweepRow> rows = sweep(cfg, grid, nullptr, sweep_jobs);
      std::filesystem::create_directories(cfg.out_dir);
      std::ofstream tsv(std::filesystem::path(cfg.out_dir) / "sweep.tsv");
      write_eval_tsv_header(tsv, "sigma_tree");
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : rows) {
        write_eval_tsv_row(tsv, fmt_double(r.sigma_tree), r.metrics);
        j.push_back({{"sigma_tree", r.sigma_tree},
                     {"nnem_acc", r.metrics.nnem_acc},
                     {"tree_acc", r.metrics.tree_acc},
                     {"fidelity", r.metrics.fidelity},
                     {"mu_bar", r.metrics.mu_bar},
                     {"run_dir", r.run_dir}});
        std::cout << "sigma " << fmt_double(r.sigma_tree) << ": ";
        detail::print_metrics(std::cout, r.metrics);
      }
      std::ofstream(std::filesystem::path(cfg.out_dir) / "sweep.json")
          << nlohmann::json{{"format_version", kFormatVersion}, {"rows", j}}.dump(2) << "\n";
      return 0;
    }

    if (ablate_cmd->parsed()) {
      RunConfig cfg = aopt.resolve();
      std::vector<AblateRow> rows;
      if (ablate_mode == "surrogate")
        rows = ablate_surrogate(cfg, nullptr, ablate_jobs);
      else if (ablate_mode == "nonlinear")
        rows = ablate_nonlinear(cfg, nullptr, ablate_jobs);
      else
        throw std::runtime_error("unknown ablate mode: " + ablate_mode);
      std::filesystem::create_directories(cfg.out_dir);
      std::ofstream tsv(std::filesystem::path(cfg.out_dir) / ("ablate_" + ablate_mode + ".tsv"));
      write_eval_tsv_header(tsv, "variant");
      for (const auto& r : rows) {
        write_eval_tsv_row(tsv, r.label, r.metrics);
        std::cout << r.label << ": ";
        detail::print_metrics(std::cout, r.metrics);
      }
      return 0;
    }

    if (explain->parsed()) {
      LoadedRun lr = load_run(ex_run);
      Dataset ds = load_dataset(ex_data);
      const int n = static_cast<int>(ds.samples.size());
      const int lo = ex_train ? 0 : ds.train_count;
      const int hi = ex_train ? ds.train_count : n;
      if (ex_index < 0 || lo + ex_index >= hi)
        throw SampleNotFound("sample index " + std::to_string(ex_index) +
                             " outside the selected split");
      const int row = lo + ex_index;

      Eigen::MatrixXd raw = detail::flatten_one_row(ds, row);
      Eigen::VectorXd x = lr.raw_stats.apply(Eigen::VectorXd(raw.row(0).transpose()));
      Eigen::VectorXd expd = expand_expert(ds.samples[static_cast<std::size_t>(row)].features,
                                           ds.schema.n_gen, ds.schema.n_bus, lr.config.expert,
                                           lr.config.policy);
      Eigen::VectorXd z = lr.tree_stats.apply(expd);

      double nn_prob = forward_probs(lr.model, x.transpose(), ds.schema.window)[0];
      RuleDoc rule = render_rule(lr.tree, z, lr.tree_schema, &lr.tree_stats);
      int nn_hard = hard_label(nn_prob);
      bool agree = nn_hard == rule.hard;

      std::cout << "sample " << ds.samples[static_cast<std::size_t>(row)].prov.index
                << " (label " << ds.samples[static_cast<std::size_t>(row)].label << ")\n";
      std::cout << "model probability " << fmt_double(nn_prob) << " -> "
                << (nn_hard ? "stable" : "unstable") << "\n";
      std::cout << "tree probability  " << fmt_double(rule.probability) << " -> "
                << (rule.hard ? "stable" : "unstable") << "\n";
      std::cout << "agreement: " << (agree ? "yes" : "no") << "\n" << rule.to_text();
      if (!ex_out.empty()) {
        nlohmann::json j = rule.to_json();
        j["nn_prob"] = nn_prob;
        j["nn_hard"] = nn_hard;
        j["agreement"] = agree;
        j["sample_index"] = ds.samples[static_cast<std::size_t>(row)].prov.index;
        std::ofstream(ex_out) << j.dump(2) << "\n";
      }
      return 0;
    }

    if (self->parsed()) return detail::selftest(self_seed, self_fault);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

namespace detail {

// Fast bundled checks: reverse-mode gradients against finite differences,
// the tree fitter against a brute-force split search, the expansion
// identities, and equilibrium invariance of the simulator.
inline int selftest(std::uint64_t seed, const std::string& inject_fault) {
  using Clock = std::chrono::steady_clock;
  auto t0 = Clock::now();
  int failures = 0;
  auto report = [&](const std::string& name, bool ok) {
    std::cout << (ok ? "[pass] " : "[FAIL] ") << name << "\n";
    if (!ok) ++failures;
  };

  {  // gradient check on a recurrent cell loss
    RngStream rng(seed, "selftest-grad");
    const int in = 4, hid = 3, batch = 2;
    auto rm = [&](int r, int c) {
      ad::Matrix m(r, c);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-1.0, 1.0);
      return m;
    };
    ad::Matrix x = rm(batch, in), h0 = rm(batch, hid), wz = rm(in, hid), uz = rm(hid, hid),
               bz = rm(1, hid), target = rm(batch, hid);
    auto eval = [&](const ad::Matrix& w) {
      ad::Tape t;
      ad::Tensor z = t.sigmoid(
          t.add(t.add(t.matmul(t.leaf(x), t.leaf(w)), t.matmul(t.leaf(h0), t.leaf(uz))),
                t.leaf(bz)));
      return t.scalar(t.mean(t.square(t.sub(z, t.leaf(target)))));
    };
    ad::Tape t;
    ad::Tensor W = t.leaf(wz);
    ad::Tensor z = t.sigmoid(t.add(
        t.add(t.matmul(t.leaf(x), W), t.matmul(t.leaf(h0), t.leaf(uz))), t.leaf(bz)));
    ad::Tensor loss = t.mean(t.square(t.sub(z, t.leaf(target))));
    t.backward(loss);
    ad::Matrix g = t.grad(W);
    if (inject_fault == "adjoint") g(0, 0) += 0.5;
    double worst = 0.0;
    const double h = 1e-5;
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < hid; ++j) {
        ad::Matrix p = wz;
        p(i, j) += h;
        double fp = eval(p);
        p(i, j) = wz(i, j) - h;
        double fm = eval(p);
        double fd = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(fd - g(i, j)) /
                                    std::max({std::abs(fd), std::abs(g(i, j)), 1e-8}));
      }
    report("adjoint-vs-finite-difference", worst < 1e-4);
  }

  {  // tree fitter vs brute-force split search at the root
    RngStream rng(seed, "selftest-tree");
    bool ok = true;
    for (int trial = 0; trial < 5 && ok; ++trial) {
      const int n = 24, d = 3, s_leaf = 2;
      Eigen::MatrixXd x(n, d);
      Eigen::VectorXd y(n);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) x(i, j) = rng.uniform(-2.0, 2.0);
        y[i] = rng.uniform();
      }
      RegressionTree tree = fit_tree(x, y, s_leaf, 3);
      if (tree.nodes[0].is_leaf()) continue;
      // Exhaustive root search with direct SSE sums.
      double q = y.squaredNorm();
      double tie_band = 1e-10 * (1.0 + q);
      bool found = false;
      int bf = -1;
      double bthr = 0.0, bsse = 0.0;
      for (int fcol = 0; fcol < d; ++fcol) {
        std::vector<double> vals(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) vals[static_cast<std::size_t>(i)] = x(i, fcol);
        std::sort(vals.begin(), vals.end());
        for (int p = 1; p < n; ++p) {
          if (!(vals[p - 1] < vals[p])) continue;
          double thr = vals[p - 1] + 0.5 * (vals[p] - vals[p - 1]);
          std::vector<int> li, ri;
          for (int i = 0; i < n; ++i) (x(i, fcol) <= thr ? li : ri).push_back(i);
          if (static_cast<int>(li.size()) < s_leaf || static_cast<int>(ri.size()) < s_leaf)
            continue;
          auto sse = [&](const std::vector<int>& idx) {
            double m = 0.0;
            for (int i : idx) m += y[i];
            m /= static_cast<double>(idx.size());
            double s = 0.0;
            for (int i : idx) s += (y[i] - m) * (y[i] - m);
            return s;
          };
          double v = sse(li) + sse(ri);
          if (!found || v < bsse - tie_band) {
            found = true;
            bf = fcol;
            bthr = thr;
            bsse = v;
          }
        }
      }
      ok = found && tree.nodes[0].feature == bf &&
           std::abs(tree.nodes[0].threshold - bthr) < 1e-12;
      if (inject_fault == "tree-oracle") ok = false;
    }
    report("tree-fitter-vs-brute-force", ok);
  }

  {  // expansion identities
    RngStream rng(seed, "selftest-expand");
    bool ok = true;
    const int ng = 2, nb = 3, window = 3;
    Eigen::MatrixXd raw(window, kGenSignals * ng + kBusSignals * nb);
    for (int t = 0; t < window; ++t)
      for (int j = 0; j < raw.cols(); ++j) raw(t, j) = rng.uniform(0.3, 1.2);
    Eigen::VectorXd v = expand_expert(raw, ng, nb);
    FeatureSchema schema = FeatureSchema::expanded(ng, nb, window);
    int raw_block = schema.raw_per_step() * window;
    int per_step = schema.expanded_per_step();
    for (int t = 0; t < window && ok; ++t)
      for (int g = 0; g < ng && ok; ++g) {
        double s = v[raw_block + t * per_step + kGenExpansion * g];
        double c = v[raw_block + t * per_step + kGenExpansion * g + 1];
        ok = std::abs(s * s + c * c - 1.0) < 1e-12;
      }
    report("trig-identities", ok);
  }

  {  // equilibrium invariance
    SystemSpec sys = SystemSpec::example();
    ContingencySpec none;
    none.fault_bus = -1;
    Trajectory traj = simulate(sys, none, 0.005, 3.0);
    double drift = 0.0;
    for (int k = 0; k < traj.steps(); ++k)
      for (int m = 0; m < 2; ++m)
        drift = std::max(drift, std::abs(traj.gen_delta(k, m) - traj.gen_delta(0, m)));
    report("equilibrium-invariance", drift < 1e-6);
  }

  auto secs = std::chrono::duration<double>(Clock::now() - t0).count();
  std::cout << (failures == 0 ? "selftest passed" : "selftest FAILED") << " in "
            << fmt_double(secs) << " s\n";
  return failures == 0 ? 0 : 1;
}

}  // namespace detail

}  // namespace enrt::cli
