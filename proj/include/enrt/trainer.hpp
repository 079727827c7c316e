#pragma once

#include <Eigen/Dense>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "enrt/dataset.hpp"
#include "enrt/featurebase.hpp"
#include "enrt/nnem.hpp"
#include "enrt/regtree.hpp"
#include "enrt/rng.hpp"
#include "enrt/surrogate.hpp"

#include <json.hpp>

namespace enrt {

inline const char* policy_name(TreeInputPolicy p) {
  return p == TreeInputPolicy::flattened_window ? "flattened_window" : "final_snapshot";
}

inline TreeInputPolicy policy_from(const std::string& s) {
  if (s == "flattened_window") return TreeInputPolicy::flattened_window;
  if (s == "final_snapshot") return TreeInputPolicy::final_snapshot;
  throw std::invalid_argument("unknown tree input policy: " + s);
}

struct RunConfig {
  std::string data_dir;
  std::string out_dir = "runs";

  // Evaluation model. The input width always follows the dataset schema;
  // presets fix hidden size and depth ("desk" 32x1, "paper" 200x2).
  int hidden = 32;
  int layers = 1;

  double sigma_tree = 1.0;
  RegMode reg = RegMode::tree;
  int s_leaf = 10;
  int max_depth = 12;
  int epochs = 60;
  int batch = 32;
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.99;

  std::vector<int> surrogate_hidden{128, 25};
  int surrogate_base = 20;  // B
  double sigma_surr = 1e-2;
  AugMode aug = AugMode::gaussian;
  bool aug_zero_mean = false;
  bool reweight = true;
  int surrogate_max_steps = 500;
  double surrogate_rel_tol = 1e-4;
  int surrogate_tol_window = 20;

  ExpertGroups expert{};
  TreeInputPolicy policy = TreeInputPolicy::flattened_window;
  bool metrics_on_train = false;  // evaluate fidelity/accuracy on the training split instead
  std::uint64_t seed = 42;

  void apply_preset(const std::string& name) {
    if (name == "desk") {
      hidden = 32;
      layers = 1;
      surrogate_hidden = {128, 25};
    } else if (name == "paper") {
      hidden = 200;
      layers = 2;
      surrogate_hidden = {1000, 25};
    } else {
      throw std::invalid_argument("unknown architecture preset: " + name);
    }
  }

  void validate() const {
    if (sigma_tree < 0.0) throw std::invalid_argument("sigma_tree must be >= 0");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (s_leaf < 1) throw std::invalid_argument("s_leaf must be >= 1");
    if (surrogate_base < 1) throw std::invalid_argument("surrogate base size must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"format_version", kFormatVersion},
            {"data_dir", data_dir},
            {"out_dir", out_dir},
            {"hidden", hidden},
            {"layers", layers},
            {"sigma_tree", sigma_tree},
            {"reg", reg_mode_name(reg)},
            {"s_leaf", s_leaf},
            {"max_depth", max_depth},
            {"epochs", epochs},
            {"batch", batch},
            {"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"surrogate_hidden", surrogate_hidden},
            {"surrogate_base", surrogate_base},
            {"sigma_surr", sigma_surr},
            {"aug", aug_mode_name(aug)},
            {"aug_zero_mean", aug_zero_mean},
            {"reweight", reweight},
            {"surrogate_max_steps", surrogate_max_steps},
            {"surrogate_rel_tol", surrogate_rel_tol},
            {"surrogate_tol_window", surrogate_tol_window},
            {"expert_dq", expert.dq_rotation},
            {"expert_load_power", expert.load_power},
            {"expert_load_char", expert.load_characteristic},
            {"policy", policy_name(policy)},
            {"metrics_on_train", metrics_on_train},
            {"seed", seed}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.data_dir = j.value("data_dir", c.data_dir);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.hidden = j.value("hidden", c.hidden);
    c.layers = j.value("layers", c.layers);
    c.sigma_tree = j.value("sigma_tree", c.sigma_tree);
    if (j.contains("reg")) c.reg = reg_mode_from(j.at("reg"));
    c.s_leaf = j.value("s_leaf", c.s_leaf);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.epochs = j.value("epochs", c.epochs);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    if (j.contains("surrogate_hidden"))
      c.surrogate_hidden = j.at("surrogate_hidden").get<std::vector<int>>();
    c.surrogate_base = j.value("surrogate_base", c.surrogate_base);
    c.sigma_surr = j.value("sigma_surr", c.sigma_surr);
    if (j.contains("aug")) c.aug = aug_mode_from(j.at("aug"));
    c.aug_zero_mean = j.value("aug_zero_mean", c.aug_zero_mean);
    c.reweight = j.value("reweight", c.reweight);
    c.surrogate_max_steps = j.value("surrogate_max_steps", c.surrogate_max_steps);
    c.surrogate_rel_tol = j.value("surrogate_rel_tol", c.surrogate_rel_tol);
    c.surrogate_tol_window = j.value("surrogate_tol_window", c.surrogate_tol_window);
    c.expert.dq_rotation = j.value("expert_dq", c.expert.dq_rotation);
    c.expert.load_power = j.value("expert_load_power", c.expert.load_power);
    c.expert.load_characteristic = j.value("expert_load_char", c.expert.load_characteristic);
    if (j.contains("policy")) c.policy = policy_from(j.at("policy"));
    c.metrics_on_train = j.value("metrics_on_train", c.metrics_on_train);
    c.seed = j.value("seed", c.seed);
    return c;
  }

  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a(to_json().dump())));
    return std::string(buf, 16);
  }

  std::string run_name() const { return hash().substr(0, 12) + "-s" + std::to_string(seed); }
};

struct EpochRow {
  int epoch = 0;
  double train_mse = 0.0;
  double total_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;       // evaluation split (test by default)
  double tree_acc = 0.0;       // tree accuracy on the evaluation split
  double fidelity = 0.0;       // tree vs model hard labels on the evaluation split
  double mu_bar = 0.0;         // measured average tree depth (training split)
  double mu_hat = std::numeric_limits<double>::quiet_NaN();  // surrogate prediction
};

struct EvalMetrics {
  double nnem_acc = 0.0;
  double tree_acc = 0.0;
  double fidelity = 0.0;
  double mu_bar = 0.0;
  std::array<double, kExpertFamilyCount> n_nonl{};
  std::array<std::optional<double>, kExpertFamilyCount> l_nonl{};
};

struct RunArtifacts {
  std::filesystem::path run_dir;
  RunConfig config;
  std::vector<EpochRow> metrics;
  EvalModelState model;
  RegressionTree tree;
  FeatureSchema raw_schema;
  FeatureSchema tree_schema;
  Standardizer tree_stats;
  EvalMetrics final_eval;
};

namespace detail {

inline Eigen::MatrixXd flatten_raw(const Dataset& ds, int lo, int hi) {
  const int t = ds.schema.window;
  const int f = ds.schema.raw_per_step();
  Eigen::MatrixXd out(hi - lo, t * f);
  for (int i = lo; i < hi; ++i)
    for (int step = 0; step < t; ++step)
      for (int j = 0; j < f; ++j)
        out(i - lo, step * f + j) = ds.samples[static_cast<std::size_t>(i)].features(step, j);
  return out;
}

inline Eigen::MatrixXd expanded_matrix(const Dataset& ds, int lo, int hi,
                                       const ExpertGroups& groups, TreeInputPolicy policy) {
  const int ng = ds.schema.n_gen;
  const int nb = ds.schema.n_bus;
  Eigen::VectorXd first =
      expand_expert(ds.samples[static_cast<std::size_t>(lo)].features, ng, nb, groups, policy);
  Eigen::MatrixXd out(hi - lo, first.size());
  out.row(0) = first.transpose();
  for (int i = lo + 1; i < hi; ++i)
    out.row(i - lo) =
        expand_expert(ds.samples[static_cast<std::size_t>(i)].features, ng, nb, groups, policy)
            .transpose();
  return out;
}

inline double accuracy(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels) {
  double ok = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i)
    ok += hard_label(probs[i]) == static_cast<int>(labels[i]) ? 1.0 : 0.0;
  return ok / static_cast<double>(probs.size());
}

inline std::string metrics_header() {
  return "epoch\ttrain_mse\ttotal_loss\ttrain_acc\teval_acc\ttree_acc\tfidelity\tmu_bar\tmu_hat";
}

inline std::string metrics_line(const EpochRow& r) {
  return std::to_string(r.epoch) + "\t" + fmt_double(r.train_mse) + "\t" +
         fmt_double(r.total_loss) + "\t" + fmt_double(r.train_acc) + "\t" +
         fmt_double(r.eval_acc) + "\t" + fmt_double(r.tree_acc) + "\t" +
         fmt_double(r.fidelity) + "\t" + fmt_double(r.mu_bar) + "\t" + fmt_double(r.mu_hat);
}

}  // namespace detail

// Full training loop: per epoch, train the surrogate on the accumulated
// (parameters, depth) records, run one regularized training epoch, distill
// a fresh tree from the training-set probabilities, and record the new
// (parameters, depth) pair. Everything derives from config.seed.
inline RunArtifacts run(const RunConfig& config, const Dataset* preloaded = nullptr) {
  tune_allocator_for_numerics();
  config.validate();
  Dataset loaded;
  const Dataset* ds = preloaded;
  if (!ds) {
    loaded = load_dataset(config.data_dir);
    ds = &loaded;
  }
  if (ds->samples.empty()) throw EmptyInput("dataset is empty");
  const int n = static_cast<int>(ds->samples.size());
  const int n_tr = ds->train_count;
  if (n_tr < 1 || n_tr > n) throw std::invalid_argument("invalid train split");

  const int window = ds->schema.window;
  const int f_raw = ds->schema.raw_per_step();

  // Standardized model inputs (training statistics only).
  Eigen::MatrixXd raw_tr = detail::flatten_raw(*ds, 0, n_tr);
  Eigen::MatrixXd raw_te = detail::flatten_raw(*ds, n_tr, n);
  Standardizer raw_stats = Standardizer::fit(raw_tr);
  Eigen::MatrixXd x_tr = raw_stats.apply(raw_tr);
  Eigen::MatrixXd x_te = raw_stats.apply(raw_te);

  // Standardized tree inputs (raw + expert expansion on physical values).
  Eigen::MatrixXd exp_tr = detail::expanded_matrix(*ds, 0, n_tr, config.expert, config.policy);
  Eigen::MatrixXd exp_te = detail::expanded_matrix(*ds, n_tr, n, config.expert, config.policy);
  Standardizer tree_stats = Standardizer::fit(exp_tr);
  Eigen::MatrixXd z_tr = tree_stats.apply(exp_tr);
  Eigen::MatrixXd z_te = tree_stats.apply(exp_te);

  Eigen::VectorXd y_tr(n_tr), y_te(n - n_tr);
  for (int i = 0; i < n_tr; ++i) y_tr[i] = ds->samples[static_cast<std::size_t>(i)].label;
  for (int i = n_tr; i < n; ++i) y_te[i - n_tr] = ds->samples[static_cast<std::size_t>(i)].label;

  GruArch arch{f_raw, config.hidden, config.layers};
  RngStream init_rng(config.seed, "nnem-init");
  EvalModelState model = EvalModelState::init(arch, init_rng);
  model.standardizer = raw_stats;

  DepthContext depth_ctx;
  depth_ctx.arch = arch;
  depth_ctx.train_rows = &x_tr;
  depth_ctx.window = window;
  depth_ctx.tree_inputs = &z_tr;
  depth_ctx.tree = {config.s_leaf, config.max_depth};

  SurrogateTrainConfig scfg;
  scfg.hidden = config.surrogate_hidden;
  scfg.base_samples = config.surrogate_base;
  scfg.sigma_surr = config.sigma_surr;
  scfg.reweight = config.reweight;
  scfg.aug = config.aug;
  scfg.aug_zero_mean = config.aug_zero_mean;
  scfg.lr = config.lr;
  scfg.max_steps = config.surrogate_max_steps;
  scfg.rel_tol = config.surrogate_rel_tol;
  scfg.tol_window = config.surrogate_tol_window;

  // Record for the freshly initialized parameters, so the first epoch's
  // surrogate has one observed sample.
  std::vector<SurrogateRecord> records;
  {
    SurrogateRecord r;
    r.omega = flatten(model);
    r.depth = depth_for_params(r.omega, depth_ctx);
    r.epoch = 1;
    records.push_back(std::move(r));
  }

  TrainEpochConfig tcfg;
  tcfg.batch = config.batch;
  tcfg.sigma_tree = config.sigma_tree;
  tcfg.mode = config.reg;
  tcfg.adam = {config.lr, config.beta1, config.beta2, 1e-8};
  ad::AdamState opt;
  opt.init_like(model.params);

  const bool needs_surrogate = config.reg == RegMode::tree;
  const Eigen::MatrixXd& z_eval = config.metrics_on_train ? z_tr : z_te;
  const Eigen::MatrixXd& x_eval = config.metrics_on_train ? x_tr : x_te;
  const Eigen::VectorXd& y_eval = config.metrics_on_train ? y_tr : y_te;

  RunArtifacts art;
  art.config = config;
  art.raw_schema = ds->schema;
  art.tree_schema =
      FeatureSchema::expanded(ds->schema.n_gen, ds->schema.n_bus, window, config.expert,
                              config.policy);
  art.tree_stats = tree_stats;

  std::vector<std::string> surrogate_log;
  RegressionTree tree;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    MlpSurrogate surrogate;
    if (needs_surrogate)
      surrogate = train_surrogate(
          records, scfg, depth_ctx,
          RngStream(config.seed, "surr-init", static_cast<std::uint64_t>(epoch)),
          RngStream(config.seed, "surr-aug", static_cast<std::uint64_t>(epoch)));

    EpochStats stats = train_epoch(
        model, x_tr, y_tr, window, needs_surrogate ? &surrogate : nullptr, tcfg, opt,
        RngStream(config.seed, "order", static_cast<std::uint64_t>(epoch)));

    Eigen::VectorXd probs_tr = forward_probs(model, x_tr, window);
    tree = fit_tree(z_tr, probs_tr, config.s_leaf, config.max_depth);
    double mu_bar = average_depth(tree, z_tr);

    SurrogateRecord r;
    r.omega = flatten(model);
    r.depth = mu_bar;
    r.epoch = epoch + 1;
    double mu_hat = std::numeric_limits<double>::quiet_NaN();
    if (needs_surrogate) mu_hat = surrogate.predict_depth(r.omega);
    records.push_back(std::move(r));

    Eigen::VectorXd probs_eval = config.metrics_on_train ? probs_tr
                                                         : forward_probs(model, x_eval, window);
    Eigen::VectorXd tree_eval(z_eval.rows());
    for (Eigen::Index i = 0; i < z_eval.rows(); ++i)
      tree_eval[i] = tree.predict(z_eval.row(i).transpose());

    EpochRow row;
    row.epoch = epoch;
    row.train_mse = stats.mean_mse;
    row.total_loss = stats.mean_loss;
    row.train_acc = detail::accuracy(probs_tr, y_tr);
    row.eval_acc = detail::accuracy(probs_eval, y_eval);
    row.tree_acc = detail::accuracy(tree_eval, y_eval);
    row.fidelity = fidelity(probs_eval, tree_eval);
    row.mu_bar = mu_bar;
    row.mu_hat = mu_hat;
    art.metrics.push_back(row);

    surrogate_log.push_back(std::to_string(epoch) + "\t" + fmt_double(mu_bar) + "\t" +
                            fmt_double(mu_hat));
  }

  art.model = model;
  art.tree = tree;

  // Final evaluation on the configured split.
  {
    Eigen::VectorXd probs = forward_probs(model, x_eval, window);
    Eigen::VectorXd tree_probs(z_eval.rows());
    for (Eigen::Index i = 0; i < z_eval.rows(); ++i)
      tree_probs[i] = tree.predict(z_eval.row(i).transpose());
    art.final_eval.nnem_acc = detail::accuracy(probs, y_eval);
    art.final_eval.tree_acc = detail::accuracy(tree_probs, y_eval);
    art.final_eval.fidelity = fidelity(probs, tree_probs);
    art.final_eval.mu_bar = average_depth(tree, z_eval);
    art.final_eval.n_nonl = nonlinear_frequency(tree, z_eval, art.tree_schema);
    art.final_eval.l_nonl = nonlinear_layer_number(tree, art.tree_schema);
  }

  // Artifacts on disk.
  art.run_dir = std::filesystem::path(config.out_dir) / config.run_name();
  std::filesystem::create_directories(art.run_dir);
  save_checkpoint(model, art.run_dir,
                  {{"epoch", config.epochs},
                   {"sigma_tree", config.sigma_tree},
                   {"reg", reg_mode_name(config.reg)},
                   {"seed", config.seed}});
  save_tree(tree, art.run_dir / "tree.json");
  {
    nlohmann::json fs;
    fs["format_version"] = kFormatVersion;
    fs["raw"] = raw_stats.to_json();
    fs["tree"] = tree_stats.to_json();
    fs["tree_schema"] = art.tree_schema.to_json();
    std::ofstream(art.run_dir / "feature_stats.json") << fs.dump(2) << "\n";
  }
  {
    std::ofstream mf(art.run_dir / "metrics.tsv");
    mf << detail::metrics_header() << "\n";
    for (const auto& row : art.metrics) mf << detail::metrics_line(row) << "\n";
  }
  {
    std::ofstream sf(art.run_dir / "surrogate_log.tsv");
    sf << "epoch\tmu_bar\tmu_hat\n";
    for (const auto& line : surrogate_log) sf << line << "\n";
  }
  std::ofstream(art.run_dir / "config.json") << config.to_json().dump(2) << "\n";
  return art;
}

// Loads enough of a run directory to make predictions and render rules.
struct LoadedRun {
  EvalModelState model;
  RegressionTree tree;
  Standardizer raw_stats, tree_stats;
  FeatureSchema tree_schema;
  RunConfig config;
};

inline LoadedRun load_run(const std::filesystem::path& run_dir) {
  LoadedRun lr;
  lr.model = load_checkpoint(run_dir);
  lr.tree = load_tree(run_dir / "tree.json");
  std::ifstream fs(run_dir / "feature_stats.json");
  if (!fs) throw std::runtime_error("missing feature_stats.json in " + run_dir.string());
  nlohmann::json j = nlohmann::json::parse(fs);
  lr.raw_stats = Standardizer::from_json(j.at("raw"));
  lr.tree_stats = Standardizer::from_json(j.at("tree"));
  lr.tree_schema = FeatureSchema::from_json(j.at("tree_schema"));
  std::ifstream cf(run_dir / "config.json");
  if (cf) lr.config = RunConfig::from_json(nlohmann::json::parse(cf));
  return lr;
}

// Recomputes evaluation metrics for a stored run on a dataset split;
// side-effect free.
inline EvalMetrics evaluate(const LoadedRun& lr, const Dataset& ds, bool on_train) {
  const int n = static_cast<int>(ds.samples.size());
  const int lo = on_train ? 0 : ds.train_count;
  const int hi = on_train ? ds.train_count : n;
  if (hi <= lo) throw EmptyInput("requested split is empty");

  Eigen::MatrixXd raw = detail::flatten_raw(ds, lo, hi);
  Eigen::MatrixXd x = lr.raw_stats.apply(raw);
  Eigen::MatrixXd expd =
      detail::expanded_matrix(ds, lo, hi, lr.config.expert, lr.config.policy);
  Eigen::MatrixXd z = lr.tree_stats.apply(expd);
  Eigen::VectorXd y(hi - lo);
  for (int i = lo; i < hi; ++i) y[i - lo] = ds.samples[static_cast<std::size_t>(i)].label;

  Eigen::VectorXd probs = forward_probs(lr.model, x, ds.schema.window);
  Eigen::VectorXd tree_probs(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    tree_probs[i] = lr.tree.predict(z.row(i).transpose());

  EvalMetrics m;
  m.nnem_acc = detail::accuracy(probs, y);
  m.tree_acc = detail::accuracy(tree_probs, y);
  m.fidelity = fidelity(probs, tree_probs);
  m.mu_bar = average_depth(lr.tree, z);
  m.n_nonl = nonlinear_frequency(lr.tree, z, lr.tree_schema);
  m.l_nonl = nonlinear_layer_number(lr.tree, lr.tree_schema);
  return m;
}

// Writes per-sample predictions of a stored run, for external recomputation
// of the reported metrics.
inline void export_predictions(const LoadedRun& lr, const Dataset& ds, bool on_train,
                               const std::filesystem::path& file) {
  const int n = static_cast<int>(ds.samples.size());
  const int lo = on_train ? 0 : ds.train_count;
  const int hi = on_train ? ds.train_count : n;
  Eigen::MatrixXd x = lr.raw_stats.apply(detail::flatten_raw(ds, lo, hi));
  Eigen::MatrixXd z =
      lr.tree_stats.apply(detail::expanded_matrix(ds, lo, hi, lr.config.expert, lr.config.policy));
  Eigen::VectorXd probs = forward_probs(lr.model, x, ds.schema.window);

  std::ofstream out(file);
  out << "index\tlabel\tnn_prob\ttree_prob\tpath_len\n";
  for (int i = lo; i < hi; ++i) {
    DecisionPath p = lr.tree.decision_path(z.row(i - lo).transpose());
    out << ds.samples[static_cast<std::size_t>(i)].prov.index << "\t"
        << ds.samples[static_cast<std::size_t>(i)].label << "\t" << fmt_double(probs[i - lo])
        << "\t" << fmt_double(p.leaf_value) << "\t" << p.length() << "\n";
  }
}

struct SweepRow {
  double sigma_tree = 0.0;
  EvalMetrics metrics;
  std::string run_dir;
};

// One full run per grid point, seeds held fixed; independent runs may
// execute concurrently.
inline std::vector<SweepRow> sweep(const RunConfig& base, const std::vector<double>& grid,
                                   const Dataset* ds = nullptr, int jobs = 1) {
  if (grid.empty()) throw EmptyInput("sigma grid is empty");
  std::vector<SweepRow> rows(grid.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < grid.size(); i = next.fetch_add(1)) {
      RunConfig cfg = base;
      cfg.sigma_tree = grid[i];
      RunArtifacts art = run(cfg, ds);
      rows[i] = {grid[i], art.final_eval, art.run_dir.string()};
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

struct AblateRow {
  std::string label;
  RunConfig config;
  EvalMetrics metrics;
};

// Surrogate-strategy matrix: reweight x augmentation, six rows.
inline std::vector<AblateRow> ablate_surrogate(const RunConfig& base, const Dataset* ds = nullptr,
                                               int jobs = 1) {
  struct Combo {
    bool reweight;
    AugMode aug;
  };
  const std::vector<Combo> combos = {
      {false, AugMode::none},    {false, AugMode::dirichlet}, {false, AugMode::gaussian},
      {true, AugMode::none},     {true, AugMode::dirichlet},  {true, AugMode::gaussian},
  };
  std::vector<AblateRow> rows(combos.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < combos.size(); i = next.fetch_add(1)) {
      RunConfig cfg = base;
      cfg.reweight = combos[i].reweight;
      cfg.aug = combos[i].aug;
      RunArtifacts art = run(cfg, ds);
      rows[i] = {std::string(combos[i].reweight ? "reweight" : "plain") + "+" +
                     aug_mode_name(combos[i].aug),
                 cfg, art.final_eval};
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

// Expert-term matrix: all eight on/off combinations of the three equation
// groups.
inline std::vector<AblateRow> ablate_nonlinear(const RunConfig& base, const Dataset* ds = nullptr,
                                               int jobs = 1) {
  std::vector<AblateRow> rows(8);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < 8; i = next.fetch_add(1)) {
      RunConfig cfg = base;
      cfg.expert.dq_rotation = (i & 4) != 0;
      cfg.expert.load_power = (i & 2) != 0;
      cfg.expert.load_characteristic = (i & 1) != 0;
      RunArtifacts art = run(cfg, ds);
      rows[i] = {std::string(cfg.expert.dq_rotation ? "dq" : "--") + "+" +
                     (cfg.expert.load_power ? "ld" : "--") + "+" +
                     (cfg.expert.load_characteristic ? "lc" : "--"),
                 cfg, art.final_eval};
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

inline void write_eval_tsv_header(std::ofstream& out, const std::string& key) {
  out << key << "\tnnem_acc\ttree_acc\tfidelity\tmu_bar\n";
}

inline void write_eval_tsv_row(std::ofstream& out, const std::string& key,
                               const EvalMetrics& m) {
  out << key << "\t" << fmt_double(m.nnem_acc) << "\t" << fmt_double(m.tree_acc) << "\t"
      << fmt_double(m.fidelity) << "\t" << fmt_double(m.mu_bar) << "\n";
}

}  // namespace enrt
