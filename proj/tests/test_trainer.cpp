#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "enrt/cli.hpp"
#include "enrt/trainer.hpp"

using namespace enrt;

namespace {

// Small dataset shared across the trainer tests; generated once.
const Dataset& tiny_dataset() {
  static Dataset ds = [] {
    SystemSpec sys = SystemSpec::example();
    McSpec mc;
    Dataset d = generate_dataset(sys, mc, 80, 11);
    return d;
  }();
  return ds;
}

RunConfig tiny_config(const std::filesystem::path& out) {
  RunConfig cfg;
  cfg.out_dir = out.string();
  cfg.hidden = 8;
  cfg.epochs = 3;
  cfg.batch = 16;
  cfg.surrogate_hidden = {16};
  cfg.surrogate_base = 6;
  cfg.surrogate_max_steps = 60;
  cfg.s_leaf = 5;
  cfg.max_depth = 6;
  cfg.sigma_tree = 0.01;
  cfg.seed = 5;
  return cfg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("run produces one metrics row per epoch and complete artifacts") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_basic";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);
  RunArtifacts art = run(cfg, &tiny_dataset());

  CHECK(static_cast<int>(art.metrics.size()) == cfg.epochs);
  for (const auto& row : art.metrics) {
    CHECK(row.mu_bar >= 1.0);
    CHECK(std::isfinite(row.mu_hat));
    CHECK(row.fidelity >= 0.0);
    CHECK(row.fidelity <= 1.0);
  }
  CHECK(std::filesystem::exists(art.run_dir / "manifest.json"));
  CHECK(std::filesystem::exists(art.run_dir / "params.bin"));
  CHECK(std::filesystem::exists(art.run_dir / "tree.json"));
  CHECK(std::filesystem::exists(art.run_dir / "metrics.tsv"));
  CHECK(std::filesystem::exists(art.run_dir / "surrogate_log.tsv"));
  CHECK(std::filesystem::exists(art.run_dir / "feature_stats.json"));
  CHECK(std::filesystem::exists(art.run_dir / "config.json"));

  // Metrics table: header + epochs lines.
  std::string metrics = slurp(art.run_dir / "metrics.tsv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == cfg.epochs + 1);
  std::filesystem::remove_all(out);
}

TEST_CASE("identical config and seed reproduce byte-identical artifacts") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_det";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);

  RunArtifacts a = run(cfg, &tiny_dataset());
  std::string metrics_a = slurp(a.run_dir / "metrics.tsv");
  std::string params_a = slurp(a.run_dir / "params.bin");
  std::string tree_a = slurp(a.run_dir / "tree.json");
  std::string slog_a = slurp(a.run_dir / "surrogate_log.tsv");

  RunArtifacts b = run(cfg, &tiny_dataset());
  CHECK(slurp(b.run_dir / "metrics.tsv") == metrics_a);
  CHECK(slurp(b.run_dir / "params.bin") == params_a);
  CHECK(slurp(b.run_dir / "tree.json") == tree_a);
  CHECK(slurp(b.run_dir / "surrogate_log.tsv") == slog_a);
  std::filesystem::remove_all(out);
}

TEST_CASE("without regularization the updates match a bare training loop") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_none";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);
  cfg.reg = RegMode::none;
  cfg.sigma_tree = 0.0;
  RunArtifacts art = run(cfg, &tiny_dataset());

  // Bare loop: same dataset preparation and seed streams, no surrogate, no
  // tree anywhere.
  const Dataset& ds = tiny_dataset();
  const int n_tr = ds.train_count;
  Eigen::MatrixXd raw_tr = enrt::detail::flatten_raw(ds, 0, n_tr);
  Standardizer stats = Standardizer::fit(raw_tr);
  Eigen::MatrixXd x_tr = stats.apply(raw_tr);
  Eigen::VectorXd y_tr(n_tr);
  for (int i = 0; i < n_tr; ++i) y_tr[i] = ds.samples[static_cast<std::size_t>(i)].label;

  GruArch arch{ds.schema.raw_per_step(), cfg.hidden, cfg.layers};
  RngStream init(cfg.seed, "nnem-init");
  EvalModelState model = EvalModelState::init(arch, init);
  TrainEpochConfig tcfg;
  tcfg.batch = cfg.batch;
  tcfg.sigma_tree = 0.0;
  tcfg.mode = RegMode::none;
  tcfg.adam = {cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  ad::AdamState opt;
  opt.init_like(model.params);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch)
    train_epoch(model, x_tr, y_tr, ds.schema.window, nullptr, tcfg, opt,
                RngStream(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));

  CHECK(flatten(art.model) == flatten(model));
  std::filesystem::remove_all(out);
}

TEST_CASE("evaluate matches the run's own final metrics") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_eval";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);
  RunArtifacts art = run(cfg, &tiny_dataset());

  LoadedRun lr = load_run(art.run_dir);
  EvalMetrics m = evaluate(lr, tiny_dataset(), false);
  CHECK(m.nnem_acc == art.final_eval.nnem_acc);
  CHECK(m.tree_acc == art.final_eval.tree_acc);
  CHECK(m.fidelity == art.final_eval.fidelity);
  for (std::size_t k = 0; k < kExpertFamilyCount; ++k)
    CHECK(m.n_nonl[k] == art.final_eval.n_nonl[k]);

  // Idempotent: a second call gives the same numbers.
  EvalMetrics m2 = evaluate(lr, tiny_dataset(), false);
  CHECK(m2.fidelity == m.fidelity);
  std::filesystem::remove_all(out);
}

TEST_CASE("exported predictions recompute the reported metrics exactly") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_export";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);
  RunArtifacts art = run(cfg, &tiny_dataset());
  LoadedRun lr = load_run(art.run_dir);

  auto pred_file = out / "predictions.tsv";
  export_predictions(lr, tiny_dataset(), false, pred_file);

  // Naive recomputation from the exported text.
  std::ifstream in(pred_file);
  std::string header;
  std::getline(in, header);
  int n = 0, agree = 0, nn_ok = 0, tree_ok = 0;
  double path_sum = 0.0;
  int index, label, path_len;
  double nn_prob, tree_prob;
  while (in >> index >> label >> nn_prob >> tree_prob >> path_len) {
    ++n;
    int nn_hard = nn_prob >= 0.5 ? 1 : 0;
    int tree_hard = tree_prob >= 0.5 ? 1 : 0;
    agree += nn_hard == tree_hard;
    nn_ok += nn_hard == label;
    tree_ok += tree_hard == label;
    path_sum += path_len;
  }
  REQUIRE(n == tiny_dataset().test_count());
  EvalMetrics m = evaluate(lr, tiny_dataset(), false);
  CHECK(m.fidelity == static_cast<double>(agree) / n);
  CHECK(m.nnem_acc == static_cast<double>(nn_ok) / n);
  CHECK(m.tree_acc == static_cast<double>(tree_ok) / n);
  CHECK(m.mu_bar == average_depth(lr.tree, lr.tree_stats.apply(enrt::detail::expanded_matrix(
                        tiny_dataset(), tiny_dataset().train_count,
                        static_cast<int>(tiny_dataset().samples.size()), lr.config.expert,
                        lr.config.policy))));
  CHECK(m.mu_bar == path_sum / n);
  std::filesystem::remove_all(out);
}

TEST_CASE("sweep produces one row per grid point") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_sweep";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);
  cfg.epochs = 2;
  std::vector<double> grid{1e-3, 1e-1, 1.0};
  std::vector<SweepRow> rows = sweep(cfg, grid, &tiny_dataset(), 2);
  REQUIRE(rows.size() == 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].sigma_tree == grid[i]);
    CHECK(std::filesystem::exists(rows[i].run_dir));
  }
  CHECK_THROWS_AS(sweep(cfg, {}, &tiny_dataset()), EmptyInput);
  std::filesystem::remove_all(out);
}

TEST_CASE("nonlinear ablation covers all eight group combinations") {
  auto out = std::filesystem::temp_directory_path() / "enrt_trainer_ablate";
  std::filesystem::remove_all(out);
  RunConfig cfg = tiny_config(out);
  cfg.epochs = 1;
  cfg.surrogate_max_steps = 10;
  std::vector<AblateRow> rows = ablate_nonlinear(cfg, &tiny_dataset(), 2);
  REQUIRE(rows.size() == 8);
  std::set<std::string> labels;
  for (const auto& r : rows) labels.insert(r.label);
  CHECK(labels.size() == 8);
  // First row: all groups off; last: all on.
  CHECK(rows[0].label == "--+--+--");
  CHECK(rows[7].label == "dq+ld+lc");
  std::filesystem::remove_all(out);
}

TEST_CASE("config json round trip preserves every field") {
  RunConfig cfg = tiny_config("somewhere");
  cfg.reg = RegMode::l2;
  cfg.aug = AugMode::dirichlet;
  cfg.policy = TreeInputPolicy::final_snapshot;
  cfg.expert.load_power = false;
  cfg.reweight = false;
  cfg.metrics_on_train = true;
  RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.hash() == cfg.hash());
  RunConfig other = cfg;
  other.sigma_tree *= 2.0;
  CHECK(other.hash() != cfg.hash());
}

TEST_CASE("paper preset widens the architecture") {
  RunConfig cfg;
  cfg.apply_preset("paper");
  CHECK(cfg.hidden == 200);
  CHECK(cfg.layers == 2);
  CHECK(cfg.surrogate_hidden == std::vector<int>{1000, 25});
  cfg.apply_preset("desk");
  CHECK(cfg.hidden == 32);
  CHECK_THROWS_AS(cfg.apply_preset("huge"), std::invalid_argument);
}

TEST_CASE("invalid configs are rejected") {
  RunConfig cfg;
  cfg.sigma_tree = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = RunConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
