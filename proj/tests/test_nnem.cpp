#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <vector>

#include "enrt/nnem.hpp"
#include "enrt/rng.hpp"
#include "enrt/surrogate.hpp"

using namespace enrt;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Independent straight-line reimplementation of the recurrence with plain
// scalar loops; no shared code with the library forward path.
double gru_forward_naive(const EvalModelState& s, const Eigen::MatrixXd& seq) {
  const int hidden = s.arch.hidden;
  std::vector<std::vector<double>> h(static_cast<std::size_t>(s.arch.layers),
                                     std::vector<double>(static_cast<std::size_t>(hidden), 0.0));
  std::vector<double> x_in, z(hidden), r(hidden), hc(hidden);
  for (int t = 0; t < seq.rows(); ++t) {
    x_in.assign(seq.row(t).data(), seq.row(t).data() + 0);  // filled below
    x_in.resize(static_cast<std::size_t>(seq.cols()));
    for (int j = 0; j < seq.cols(); ++j) x_in[static_cast<std::size_t>(j)] = seq(t, j);
    for (int l = 0; l < s.arch.layers; ++l) {
      const int in = s.arch.layer_input(l);
      const int base = l * EvalModelState::kBlocksPerLayer;
      const auto& wz = s.params[base + 0];
      const auto& uz = s.params[base + 1];
      const auto& bz = s.params[base + 2];
      const auto& wr = s.params[base + 3];
      const auto& ur = s.params[base + 4];
      const auto& br = s.params[base + 5];
      const auto& wh = s.params[base + 6];
      const auto& uh = s.params[base + 7];
      const auto& bh = s.params[base + 8];
      auto& hp = h[static_cast<std::size_t>(l)];
      for (int j = 0; j < hidden; ++j) {
        double az = bz(0, j), ar = br(0, j);
        for (int i = 0; i < in; ++i) {
          az += x_in[static_cast<std::size_t>(i)] * wz(i, j);
          ar += x_in[static_cast<std::size_t>(i)] * wr(i, j);
        }
        for (int i = 0; i < hidden; ++i) {
          az += hp[static_cast<std::size_t>(i)] * uz(i, j);
          ar += hp[static_cast<std::size_t>(i)] * ur(i, j);
        }
        z[static_cast<std::size_t>(j)] = sigmoid_ref(az);
        r[static_cast<std::size_t>(j)] = sigmoid_ref(ar);
      }
      for (int j = 0; j < hidden; ++j) {
        double ah = bh(0, j);
        for (int i = 0; i < in; ++i) ah += x_in[static_cast<std::size_t>(i)] * wh(i, j);
        for (int i = 0; i < hidden; ++i)
          ah += r[static_cast<std::size_t>(i)] * hp[static_cast<std::size_t>(i)] * uh(i, j);
        hc[static_cast<std::size_t>(j)] = std::tanh(ah);
      }
      for (int j = 0; j < hidden; ++j) {
        auto ju = static_cast<std::size_t>(j);
        hp[ju] = (1.0 - z[ju]) * hp[ju] + z[ju] * hc[ju];
      }
      x_in.assign(hp.begin(), hp.end());
    }
  }
  double logit = s.bo()(0, 0);
  for (int j = 0; j < hidden; ++j)
    logit += h[static_cast<std::size_t>(s.arch.layers - 1)][static_cast<std::size_t>(j)] *
             s.wo()(j, 0);
  return sigmoid_ref(logit);
}

Eigen::MatrixXd random_seq(int t, int f, RngStream& rng) {
  Eigen::MatrixXd m(t, f);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < f; ++j) m(i, j) = rng.uniform(-2.0, 2.0);
  return m;
}

}  // namespace

TEST_CASE("zero parameters predict one half exactly") {
  GruArch arch{5, 4, 1};
  EvalModelState s = EvalModelState::zeros(arch);
  RngStream rng(1, "nn-zero");
  CHECK(forward(s, random_seq(6, 5, rng)) == 0.5);
}

TEST_CASE("probability is monotone in the output bias") {
  GruArch arch{3, 4, 1};
  RngStream rng(2, "nn-bias");
  EvalModelState s = EvalModelState::init(arch, rng);
  Eigen::MatrixXd seq = random_seq(5, 3, rng);
  double last = 0.0;
  bool first = true;
  for (double b : {-6.0, -2.0, 0.0, 2.0, 6.0, 20.0}) {
    s.params.back()(0, 0) = b;
    double p = forward(s, seq);
    CHECK(p > 0.0);
    CHECK(p < 1.0);
    if (!first) CHECK(p > last);
    last = p;
    first = false;
  }
}

TEST_CASE("forward matches an independent straight-line reimplementation") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    RngStream rng(seed, "nn-oracle");
    GruArch arch{4, 5, seed % 2 == 0 ? 1 : 2};
    EvalModelState s = EvalModelState::init(arch, rng);
    Eigen::MatrixXd seq = random_seq(7, 4, rng);
    CHECK(std::abs(forward(s, seq) - gru_forward_naive(s, seq)) < 1e-12);
  }
}

TEST_CASE("hard labels threshold at one half, tie counts stable") {
  CHECK(hard_label(0.7) == 1);
  CHECK(hard_label(0.3) == 0);
  CHECK(hard_label(0.5) == 1);
}

TEST_CASE("parameter count matches the closed form") {
  GruArch desk{27, 32, 1};
  CHECK(desk.param_count() == 3 * (27 * 32 + 32 * 32 + 32) + 32 + 1);
  CHECK(desk.param_count() == 5793);
  GruArch two{27, 32, 2};
  CHECK(two.param_count() == 5793 + 3 * (32 * 32 + 32 * 32 + 32));
  // Enumerated count: total sizes of all parameter blocks.
  RngStream rng(4, "nn-count");
  EvalModelState s = EvalModelState::init(two, rng);
  Eigen::Index total = 0;
  for (const auto& m : s.params) total += m.size();
  CHECK(total == two.param_count());
}

TEST_CASE("flatten and unflatten are inverse bijections") {
  GruArch arch{6, 5, 2};
  RngStream rng(5, "nn-flat");
  EvalModelState s = EvalModelState::init(arch, rng);
  Eigen::VectorXd v = flatten(s);
  REQUIRE(v.size() == arch.param_count());
  EvalModelState back = unflatten(v, arch);
  Eigen::VectorXd v2 = flatten(back);
  CHECK(v == v2);
  for (std::size_t i = 0; i < s.params.size(); ++i) CHECK(s.params[i] == back.params[i]);
  Eigen::VectorXd wrong = Eigen::VectorXd::Zero(arch.param_count() + 1);
  CHECK_THROWS_AS(unflatten(wrong, arch), LengthMismatch);
}

TEST_CASE("flatten order is stable across calls") {
  GruArch arch{3, 4, 1};
  RngStream rng(6, "nn-order");
  EvalModelState s = EvalModelState::init(arch, rng);
  CHECK(flatten(s) == flatten(s));
}

TEST_CASE("loss reduces to mean squared error without regularization") {
  GruArch arch{3, 4, 1};
  RngStream rng(7, "nn-loss");
  EvalModelState s = EvalModelState::init(arch, rng);
  const int n = 8, window = 4;
  Eigen::MatrixXd rows(n, window * 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < window * 3; ++j) rows(i, j) = rng.uniform(-1.0, 1.0);
    y[i] = i % 2;
  }
  LossBreakdown lb = loss_value(s, rows, y, window, nullptr, 0.0, RegMode::none);
  Eigen::VectorXd probs = forward_probs(s, rows, window);
  double mse = (probs - y).squaredNorm() / n;
  CHECK(lb.total == Catch::Approx(mse).margin(1e-12));
  CHECK(lb.mse == Catch::Approx(mse).margin(1e-12));
}

TEST_CASE("tree regularization adds sigma times the surrogate output") {
  GruArch arch{3, 3, 1};
  RngStream rng(8, "nn-treereg");
  EvalModelState s = EvalModelState::init(arch, rng);
  RngStream srng(9, "nn-treereg-s");
  MlpSurrogate surr = MlpSurrogate::init({arch.param_count(), 4, 1}, srng);

  const int n = 6, window = 3;
  Eigen::MatrixXd rows(n, window * 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < window * 3; ++j) rows(i, j) = rng.uniform(-1.0, 1.0);
    y[i] = i % 2;
  }
  double depth_hat = surr.predict_depth(flatten(s));
  LossBreakdown plain = loss_value(s, rows, y, window, nullptr, 0.0, RegMode::none);
  LossBreakdown reg = loss_value(s, rows, y, window, &surr, 1.0, RegMode::tree);
  CHECK(reg.total == Catch::Approx(plain.total + depth_hat).margin(1e-10));
  LossBreakdown reg3 = loss_value(s, rows, y, window, &surr, 3.0, RegMode::tree);
  CHECK(reg3.total == Catch::Approx(plain.total + 3.0 * depth_hat).margin(1e-10));
}

TEST_CASE("tree mode without a surrogate is rejected") {
  GruArch arch{3, 3, 1};
  RngStream rng(10, "nn-missing");
  EvalModelState s = EvalModelState::init(arch, rng);
  Eigen::MatrixXd rows(2, 9);
  rows.setZero();
  Eigen::VectorXd y(2);
  y << 0.0, 1.0;
  CHECK_THROWS_AS(loss_value(s, rows, y, 3, nullptr, 0.5, RegMode::tree), SurrogateMissing);
}

TEST_CASE("l1 and l2 penalties follow the parameter norms") {
  GruArch arch{2, 3, 1};
  RngStream rng(11, "nn-l12");
  EvalModelState s = EvalModelState::init(arch, rng);
  Eigen::MatrixXd rows(4, 6);
  Eigen::VectorXd y(4);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 6; ++j) rows(i, j) = rng.uniform(-1.0, 1.0);
    y[i] = i % 2;
  }
  Eigen::VectorXd w = flatten(s);
  LossBreakdown base = loss_value(s, rows, y, 3, nullptr, 0.0, RegMode::none);
  LossBreakdown l1 = loss_value(s, rows, y, 3, nullptr, 0.01, RegMode::l1);
  LossBreakdown l2 = loss_value(s, rows, y, 3, nullptr, 0.01, RegMode::l2);
  CHECK(l1.total == Catch::Approx(base.total + 0.01 * w.lpNorm<1>()).margin(1e-10));
  CHECK(l2.total == Catch::Approx(base.total + 0.01 * w.squaredNorm()).margin(1e-10));
}

TEST_CASE("full loss gradient matches finite differences through the surrogate") {
  GruArch arch{3, 3, 1};
  RngStream rng(12, "nn-fd");
  EvalModelState s = EvalModelState::init(arch, rng);
  RngStream srng(13, "nn-fd-s");
  MlpSurrogate surr = MlpSurrogate::init({arch.param_count(), 4, 1}, srng);

  const int n = 4, window = 3;
  Eigen::MatrixXd rows(n, window * 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < window * 3; ++j) rows(i, j) = rng.uniform(-1.0, 1.0);
    y[i] = i % 2;
  }

  std::vector<ad::Matrix> batch_x;
  for (int step = 0; step < window; ++step) {
    ad::Matrix xb(n, 3);
    for (int i = 0; i < n; ++i) xb.row(i) = rows.row(i).segment(step * 3, 3);
    batch_x.push_back(xb);
  }
  LossTape lt;
  build_loss(lt, s, batch_x, y, &surr, 0.7, RegMode::tree);
  lt.tape.backward(lt.loss);

  Eigen::VectorXd flat = flatten(s);
  double worst = 0.0;
  const double h = 1e-5;
  Eigen::VectorXd g_ad(flat.size());
  {
    Eigen::Index c = 0;
    for (std::size_t b = 0; b < s.params.size(); ++b) {
      ad::Matrix g = lt.tape.grad(lt.param_leaves[b]);
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g_ad[c++] = g(i, j);
    }
  }
  for (Eigen::Index k = 0; k < flat.size(); ++k) {
    Eigen::VectorXd pert = flat;
    pert[k] = flat[k] + h;
    double fp = loss_value(unflatten(pert, arch), rows, y, window, &surr, 0.7, RegMode::tree).total;
    pert[k] = flat[k] - h;
    double fm = loss_value(unflatten(pert, arch), rows, y, window, &surr, 0.7, RegMode::tree).total;
    double fd = (fp - fm) / (2.0 * h);
    double denom = std::max({std::abs(fd), std::abs(g_ad[k]), 1e-8});
    worst = std::max(worst, std::abs(fd - g_ad[k]) / denom);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("training separates a linear toy problem") {
  // Label is the sign of the first feature's trajectory mean.
  GruArch arch{3, 6, 1};
  RngStream rng(14, "nn-toy");
  EvalModelState s = EvalModelState::init(arch, rng);
  const int n = 60, window = 4;
  Eigen::MatrixXd rows(n, window * 3);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    double shift = i % 2 == 0 ? 0.8 : -0.8;
    for (int step = 0; step < window; ++step) {
      rows(i, step * 3 + 0) = shift + 0.3 * rng.uniform(-1.0, 1.0);
      rows(i, step * 3 + 1) = rng.uniform(-1.0, 1.0);
      rows(i, step * 3 + 2) = rng.uniform(-1.0, 1.0);
    }
    y[i] = i % 2 == 0 ? 1.0 : 0.0;
  }

  TrainEpochConfig cfg;
  cfg.batch = 16;
  ad::AdamState opt;
  opt.init_like(s.params);
  std::vector<double> losses;
  for (int epoch = 1; epoch <= 30; ++epoch) {
    EpochStats st = train_epoch(s, rows, y, window, nullptr, cfg, opt,
                                RngStream(14, "order", static_cast<std::uint64_t>(epoch)));
    losses.push_back(st.mean_loss);
  }
  Eigen::VectorXd probs = forward_probs(s, rows, window);
  int correct = 0;
  for (int i = 0; i < n; ++i) correct += hard_label(probs[i]) == static_cast<int>(y[i]);
  CHECK(correct >= static_cast<int>(0.95 * n));

  int violations = 0;
  for (int e = 1; e < 5; ++e)
    if (losses[static_cast<std::size_t>(e)] > losses[static_cast<std::size_t>(e - 1)]) ++violations;
  CHECK(violations <= 1);
}

TEST_CASE("training is deterministic given the seed") {
  GruArch arch{3, 4, 1};
  auto run = [&] {
    RngStream rng(15, "nn-det");
    EvalModelState s = EvalModelState::init(arch, rng);
    const int n = 20, window = 3;
    Eigen::MatrixXd rows(n, window * 3);
    Eigen::VectorXd y(n);
    RngStream drng(16, "nn-det-data");
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < window * 3; ++j) rows(i, j) = drng.uniform(-1.0, 1.0);
      y[i] = i % 2;
    }
    TrainEpochConfig cfg;
    cfg.batch = 8;
    ad::AdamState opt;
    opt.init_like(s.params);
    for (int epoch = 1; epoch <= 3; ++epoch)
      train_epoch(s, rows, y, window, nullptr, cfg, opt,
                  RngStream(15, "order", static_cast<std::uint64_t>(epoch)));
    return flatten(s);
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip is bit exact") {
  GruArch arch{4, 5, 2};
  RngStream rng(17, "nn-ckpt");
  EvalModelState s = EvalModelState::init(arch, rng);
  Eigen::MatrixXd stats_src(6, 3);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 3; ++j) stats_src(i, j) = rng.uniform(-2.0, 5.0);
  s.standardizer = Standardizer::fit(stats_src);

  auto dir = std::filesystem::temp_directory_path() / "enrt_ckpt_test";
  save_checkpoint(s, dir, {{"epoch", 7}, {"sigma_tree", 0.25}});
  EvalModelState back = load_checkpoint(dir);
  CHECK(flatten(back) == flatten(s));
  CHECK(back.standardizer.mean == s.standardizer.mean);
  CHECK(back.standardizer.stddev == s.standardizer.stddev);
  std::filesystem::remove_all(dir);
}
