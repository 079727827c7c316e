#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "enrt/surrogate.hpp"

using namespace enrt;

namespace {

// Small standardized fixture shared by the depth tests: 40 training rows of
// a 2-feature, 3-step window plus a 5-column tree input matrix.
struct Fixture {
  GruArch arch{2, 3, 1};
  int window = 3;
  Eigen::MatrixXd rows;
  Eigen::MatrixXd tree_inputs;
  DepthContext ctx;

  Fixture() {
    RngStream rng(100, "surr-fixture");
    const int n = 40;
    rows.resize(n, window * arch.input);
    tree_inputs.resize(n, 5);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < rows.cols(); ++j) rows(i, j) = rng.uniform(-1.0, 1.0);
      for (int j = 0; j < 5; ++j) tree_inputs(i, j) = rng.uniform(-1.0, 1.0);
    }
    ctx.arch = arch;
    ctx.train_rows = &rows;
    ctx.window = window;
    ctx.tree_inputs = &tree_inputs;
    ctx.tree = {4, 6};
  }
};

}  // namespace

TEST_CASE("zero-weight surrogate predicts its output bias") {
  RngStream rng(1, "surr-zero");
  MlpSurrogate m = MlpSurrogate::init({10, 4, 1}, rng);
  for (auto& p : m.params) p.setZero();
  m.bias(1)(0, 0) = 2.75;
  CHECK(m.predict_depth(Eigen::VectorXd::Random(10)) == 2.75);
}

TEST_CASE("identical inputs produce identical predictions") {
  RngStream rng(2, "surr-same");
  MlpSurrogate m = MlpSurrogate::init({8, 5, 1}, rng);
  Eigen::VectorXd w = Eigen::VectorXd::Random(8);
  CHECK(m.predict_depth(w) == m.predict_depth(w));
}

TEST_CASE("width mismatches are rejected") {
  RngStream rng(3, "surr-width");
  MlpSurrogate m = MlpSurrogate::init({8, 5, 1}, rng);
  CHECK_THROWS_AS(m.predict_depth(Eigen::VectorXd::Zero(9)), WidthMismatch);
}

TEST_CASE("surrogate gradient with respect to its input matches finite differences") {
  RngStream rng(4, "surr-fd");
  MlpSurrogate m = MlpSurrogate::init({12, 6, 4, 1}, rng);
  RngStream wrng(5, "surr-fd-w");
  Eigen::VectorXd w(12);
  for (int i = 0; i < 12; ++i) w[i] = wrng.uniform(-1.0, 1.0);

  ad::Tape tape;
  ad::Tensor x = tape.leaf(ad::Matrix(w.transpose()));
  ad::Tensor out = m.tape_forward(tape, x);
  tape.backward(out);
  ad::Matrix g = tape.grad(x);

  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 12; ++k) {
    Eigen::VectorXd p = w;
    p[k] = w[k] + h;
    double fp = m.predict_depth(p);
    p[k] = w[k] - h;
    double fm = m.predict_depth(p);
    double fd = (fp - fm) / (2.0 * h);
    double denom = std::max({std::abs(fd), std::abs(g(0, k)), 1e-8});
    worst = std::max(worst, std::abs(fd - g(0, k)) / denom);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gaussian augmentation noise has the documented moments") {
  Eigen::VectorXd w(2);
  w << 1.0, 3.0;
  // lambda is the arithmetic mean of the parameters.
  CHECK(w.mean() == 2.0);

  const int draws = 10000;
  RngStream rng(6, "surr-moments");
  double sum = 0.0, sumsq = 0.0;
  long count = 0;
  for (int d = 0; d < draws; ++d) {
    Eigen::VectorXd aug = augment(w, rng, AugMode::gaussian);
    Eigen::VectorXd noise = aug - w;
    for (int i = 0; i < noise.size(); ++i) {
      sum += noise[i];
      sumsq += noise[i] * noise[i];
      ++count;
    }
  }
  double mean = sum / count;
  double var = sumsq / count - mean * mean;
  double se = std::sqrt(kAugNoiseVariance / count);
  CHECK(std::abs(mean - 2.0) < 3.0 * se);          // E[noise] = lambda
  CHECK(std::abs(var - 0.01) < 0.1 * 0.01);        // variance within 10%
}

TEST_CASE("zero-mean gaussian mode drops the shift") {
  Eigen::VectorXd w = Eigen::VectorXd::Constant(50, 5.0);
  RngStream rng(7, "surr-zm");
  double acc = 0.0;
  long count = 0;
  for (int d = 0; d < 2000; ++d) {
    Eigen::VectorXd noise = augment(w, rng, AugMode::gaussian, true) - w;
    acc += noise.sum();
    count += noise.size();
  }
  double se = std::sqrt(kAugNoiseVariance / count);
  CHECK(std::abs(acc / count) < 3.0 * se);
}

TEST_CASE("dirichlet augmentation is centered with matched variance") {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(200);
  RngStream rng(8, "surr-dir");
  for (int d = 0; d < 20; ++d) {
    Eigen::VectorXd noise = augment(w, rng, AugMode::dirichlet) - w;
    CHECK(std::abs(noise.mean()) < 1e-12);  // centered by construction
    double var = noise.squaredNorm() / noise.size();
    CHECK(var == Catch::Approx(0.01).margin(1e-12));  // rescaled empirically
  }
}

TEST_CASE("augmentation is deterministic given the stream state") {
  Eigen::VectorXd w = Eigen::VectorXd::Random(30);
  RngStream r1(9, "surr-det"), r2(9, "surr-det");
  Eigen::VectorXd a = augment(w, r1, AugMode::gaussian);
  Eigen::VectorXd b = augment(w, r2, AugMode::gaussian);
  CHECK(a == b);
}

TEST_CASE("zero parameters collapse to a single-leaf tree of depth one") {
  Fixture fx;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(fx.arch.param_count());
  CHECK(depth_for_params(w, fx.ctx) == 1.0);
}

TEST_CASE("depth measurement is reproducible and equals manual composition") {
  Fixture fx;
  RngStream rng(10, "surr-comp");
  EvalModelState model = EvalModelState::init(fx.arch, rng);
  Eigen::VectorXd w = flatten(model);

  double a = depth_for_params(w, fx.ctx);
  double b = depth_for_params(w, fx.ctx);
  CHECK(a == b);

  Eigen::VectorXd probs = forward_probs(unflatten(w, fx.arch), fx.rows, fx.window);
  RegressionTree tree = fit_tree(fx.tree_inputs, probs, fx.ctx.tree.s_leaf, fx.ctx.tree.max_depth);
  CHECK(a == average_depth(tree, fx.tree_inputs));
}

TEST_CASE("record weights follow the split objective") {
  std::vector<SurrogateRecord> records;
  for (int k = 1; k <= 10; ++k) {
    SurrogateRecord r;
    r.omega = Eigen::VectorXd::Zero(4);
    r.depth = k;
    r.epoch = k;
    records.push_back(r);
  }
  auto w = detail::record_weights(records, 10, true);
  for (int k = 0; k < 5; ++k) CHECK(w[static_cast<std::size_t>(k)] == Catch::Approx(0.2 * 0.1));
  for (int k = 5; k < 10; ++k) CHECK(w[static_cast<std::size_t>(k)] == Catch::Approx(0.2));

  // Early group coefficients sum to 1/K, late observed group to 1.
  double early = 0.0, late = 0.0;
  for (int k = 0; k < 5; ++k) early += w[static_cast<std::size_t>(k)];
  for (int k = 5; k < 10; ++k) late += w[static_cast<std::size_t>(k)];
  CHECK(early == Catch::Approx(0.1));
  CHECK(late == Catch::Approx(1.0));

  // Augmented records join the late group.
  SurrogateRecord aug;
  aug.omega = Eigen::VectorXd::Zero(4);
  aug.depth = 2.0;
  aug.epoch = 10;
  aug.augmented = true;
  records.push_back(aug);
  auto w2 = detail::record_weights(records, 10, true);
  CHECK(w2.back() == Catch::Approx(0.2));

  auto flat = detail::record_weights(records, 10, false);
  for (double v : flat) CHECK(v == Catch::Approx(1.0 / 11.0));
}

TEST_CASE("training fills the record set to the base size") {
  Fixture fx;
  RngStream rng(11, "surr-fill");
  EvalModelState model = EvalModelState::init(fx.arch, rng);

  std::vector<SurrogateRecord> observed;
  for (int k = 1; k <= 3; ++k) {
    SurrogateRecord r;
    r.omega = flatten(model);
    r.depth = depth_for_params(r.omega, fx.ctx);
    r.epoch = k;
    observed.push_back(r);
  }

  SurrogateTrainConfig cfg;
  cfg.hidden = {8};
  cfg.base_samples = 20;
  cfg.max_steps = 5;  // augmentation count is what this test checks
  std::vector<SurrogateRecord> augmented;
  train_surrogate(observed, cfg, fx.ctx, RngStream(12, "surr-init"),
                  RngStream(13, "surr-aug"), &augmented);
  CHECK(augmented.size() == 17u);  // 3 observed + 17 augmented = B
  for (const auto& r : augmented) CHECK(r.depth >= 1.0);

  // K >= B: no augmentation.
  std::vector<SurrogateRecord> many = observed;
  while (static_cast<int>(many.size()) < 20) {
    SurrogateRecord r = observed.back();
    r.epoch = static_cast<int>(many.size()) + 1;
    many.push_back(r);
  }
  train_surrogate(many, cfg, fx.ctx, RngStream(12, "surr-init"), RngStream(13, "surr-aug"),
                  &augmented);
  CHECK(augmented.empty());
}

TEST_CASE("a single record can be memorized") {
  Fixture fx;
  RngStream rng(14, "surr-one");
  EvalModelState model = EvalModelState::init(fx.arch, rng);

  SurrogateRecord r;
  r.omega = flatten(model);
  r.depth = 4.0;
  r.epoch = 1;

  SurrogateTrainConfig cfg;
  cfg.hidden = {16};
  cfg.sigma_surr = 0.0;
  cfg.aug = AugMode::none;  // isolate the fit
  cfg.max_steps = 2000;
  cfg.rel_tol = 0.0;  // run the steps out
  MlpSurrogate m = train_surrogate({r}, cfg, fx.ctx, RngStream(15, "surr-one-init"),
                                   RngStream(16, "surr-one-aug"));
  CHECK(std::abs(m.predict_depth(r.omega) - 4.0) < 0.05);
}

TEST_CASE("empty training set is rejected") {
  Fixture fx;
  SurrogateTrainConfig cfg;
  CHECK_THROWS_AS(train_surrogate({}, cfg, fx.ctx, RngStream(1, "a"), RngStream(2, "b")),
                  EmptyTrainingSet);
}

TEST_CASE("surrogate training is deterministic") {
  Fixture fx;
  RngStream rng(17, "surr-det2");
  EvalModelState model = EvalModelState::init(fx.arch, rng);
  std::vector<SurrogateRecord> observed;
  for (int k = 1; k <= 2; ++k) {
    SurrogateRecord r;
    r.omega = flatten(model);
    r.depth = 1.0 + k;
    r.epoch = k;
    observed.push_back(r);
  }
  SurrogateTrainConfig cfg;
  cfg.hidden = {8};
  cfg.base_samples = 6;
  cfg.max_steps = 40;
  auto run = [&] {
    return train_surrogate(observed, cfg, fx.ctx, RngStream(18, "i"), RngStream(19, "a"));
  };
  MlpSurrogate a = run();
  MlpSurrogate b = run();
  for (std::size_t i = 0; i < a.params.size(); ++i) CHECK(a.params[i] == b.params[i]);
}

TEST_CASE("surrogate checkpoint round trip is bit exact") {
  RngStream rng(20, "surr-io");
  MlpSurrogate m = MlpSurrogate::init({40, 8, 3, 1}, rng);
  auto dir = std::filesystem::temp_directory_path() / "enrt_surr_ckpt";
  m.save(dir);
  MlpSurrogate back = MlpSurrogate::load(dir);
  REQUIRE(back.widths == m.widths);
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(back.params[i] == m.params[i]);
  std::filesystem::remove_all(dir);
}
