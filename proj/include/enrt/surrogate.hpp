#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "enrt/common.hpp"
#include "enrt/nnem.hpp"
#include "enrt/regtree.hpp"
#include "enrt/rng.hpp"
#include "enrt/surrogate_model.hpp"

namespace enrt {

enum class AugMode { gaussian, dirichlet, none };

inline const char* aug_mode_name(AugMode m) {
  switch (m) {
    case AugMode::gaussian: return "gaussian";
    case AugMode::dirichlet: return "dirichlet";
    case AugMode::none: return "none";
  }
  return "?";
}

inline AugMode aug_mode_from(const std::string& s) {
  if (s == "gaussian") return AugMode::gaussian;
  if (s == "dirichlet") return AugMode::dirichlet;
  if (s == "none") return AugMode::none;
  throw std::invalid_argument("unknown augmentation mode: " + s);
}

// One (parameters, measured average depth) pair.
struct SurrogateRecord {
  Eigen::VectorXd omega;
  double depth = 0.0;
  int epoch = 0;  // 1-based for observed records
  bool augmented = false;
};

constexpr double kAugNoiseVariance = 0.01;

// Parameter-space augmentation. Gaussian mode draws i.i.d. noise with mean
// equal to the mean of the parameter vector and variance 0.01; the
// zero-mean variant drops the mean shift. Dirichlet mode centers a
// symmetric Dirichlet draw and rescales it to the same empirical variance.
inline Eigen::VectorXd augment(const Eigen::VectorXd& omega, RngStream& rng,
                               AugMode mode = AugMode::gaussian, bool zero_mean = false) {
  const Eigen::Index n = omega.size();
  Eigen::VectorXd noise(n);
  if (mode == AugMode::dirichlet) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      noise[i] = rng.exponential();  // Gamma(1) draws normalize to Dirichlet(1)
      sum += noise[i];
    }
    noise /= sum;
    noise.array() -= 1.0 / static_cast<double>(n);
    double var = noise.squaredNorm() / static_cast<double>(n);
    double scale = var > 0.0 ? std::sqrt(kAugNoiseVariance / var) : 0.0;
    noise *= scale;
  } else {
    double lambda = zero_mean ? 0.0 : omega.mean();
    double sd = std::sqrt(kAugNoiseVariance);
    for (Eigen::Index i = 0; i < n; ++i) noise[i] = lambda + sd * rng.gaussian();
  }
  return omega + noise;
}

struct TreeFitConfig {
  int s_leaf = 10;
  int max_depth = 12;
};

// Everything needed to measure the true average depth of a parameter
// vector: the standardized training sequences feed the evaluation model,
// the expanded standardized matrix feeds the tree.
struct DepthContext {
  GruArch arch;
  const Eigen::MatrixXd* train_rows = nullptr;   // N x (window*input), standardized
  int window = 0;
  const Eigen::MatrixXd* tree_inputs = nullptr;  // N x F_exp, standardized
  TreeFitConfig tree;
};

// Loads the parameters, predicts training probabilities, distills a tree
// and returns its average decision-path length over the training set.
inline double depth_for_params(const Eigen::VectorXd& omega, const DepthContext& ctx) {
  EvalModelState model = unflatten(omega, ctx.arch);
  Eigen::VectorXd probs = forward_probs(model, *ctx.train_rows, ctx.window);
  RegressionTree tree = fit_tree(*ctx.tree_inputs, probs, ctx.tree.s_leaf, ctx.tree.max_depth);
  return average_depth(tree, *ctx.tree_inputs);
}

struct SurrogateTrainConfig {
  std::vector<int> hidden = {128, 25};
  int base_samples = 20;  // B
  double sigma_surr = 1e-2;
  bool reweight = true;
  AugMode aug = AugMode::gaussian;
  bool aug_zero_mean = false;
  double lr = 1e-3;
  int max_steps = 500;
  double rel_tol = 1e-4;
  int tol_window = 20;
};

namespace detail {

// Per-record objective coefficients. Observed records split at floor(K/2):
// the early half carries (1/floor(K/2)) * (1/K) each, the late half
// 1/(K - floor(K/2)) each; augmented records count as late. Without
// reweighting every record carries 1/total.
inline std::vector<double> record_weights(const std::vector<SurrogateRecord>& records,
                                          int observed_k, bool reweight) {
  std::vector<double> w(records.size());
  if (!reweight) {
    double c = 1.0 / static_cast<double>(records.size());
    for (auto& x : w) x = c;
    return w;
  }
  int half = observed_k / 2;
  double early = half > 0 ? 1.0 / (static_cast<double>(half) * observed_k) : 0.0;
  double late = 1.0 / static_cast<double>(observed_k - half);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.augmented && r.epoch <= half)
      w[i] = early;
    else
      w[i] = late;
  }
  return w;
}

}  // namespace detail

// Trains a fresh surrogate on the observed records, augmenting around the
// most recent parameters until base_samples records exist. Full-batch Adam
// until the relative loss change over tol_window steps drops below rel_tol
// or max_steps is hit.
inline MlpSurrogate train_surrogate(const std::vector<SurrogateRecord>& observed,
                                    const SurrogateTrainConfig& cfg, const DepthContext& ctx,
                                    RngStream init_rng, RngStream aug_rng,
                                    std::vector<SurrogateRecord>* augmented_out = nullptr) {
  tune_allocator_for_numerics();
  if (observed.empty()) throw EmptyTrainingSet("surrogate training set is empty");
  const int k = static_cast<int>(observed.size());
  const auto num_params = static_cast<int>(observed.front().omega.size());

  std::vector<SurrogateRecord> records = observed;
  if (cfg.aug != AugMode::none) {
    while (static_cast<int>(records.size()) < cfg.base_samples) {
      SurrogateRecord r;
      r.omega = augment(observed.back().omega, aug_rng, cfg.aug, cfg.aug_zero_mean);
      r.depth = depth_for_params(r.omega, ctx);
      r.epoch = observed.back().epoch;
      r.augmented = true;
      records.push_back(std::move(r));
    }
  }
  if (augmented_out) {
    augmented_out->clear();
    for (const auto& r : records)
      if (r.augmented) augmented_out->push_back(r);
  }

  std::vector<double> weights = detail::record_weights(records, k, cfg.reweight);

  const int total = static_cast<int>(records.size());
  ad::Matrix inputs(total, num_params);
  ad::Matrix targets(total, 1);
  ad::Matrix wcol(total, 1);
  for (int i = 0; i < total; ++i) {
    inputs.row(i) = records[static_cast<std::size_t>(i)].omega.transpose();
    targets(i, 0) = records[static_cast<std::size_t>(i)].depth;
    wcol(i, 0) = weights[static_cast<std::size_t>(i)];
  }

  std::vector<int> widths;
  widths.push_back(num_params);
  for (int h : cfg.hidden) widths.push_back(h);
  widths.push_back(1);
  MlpSurrogate model = MlpSurrogate::init(widths, init_rng);

  ad::AdamState opt;
  opt.init_like(model.params);
  ad::AdamConfig adam;
  adam.lr = cfg.lr;

  std::vector<double> history;
  for (int step = 0; step < cfg.max_steps; ++step) {
    ad::Tape tape;
    std::vector<ad::Tensor> leaves;
    ad::Tensor x = tape.constant_view(inputs);
    ad::Tensor pred = model.tape_forward_trainable(tape, x, leaves);
    ad::Tensor err = tape.sub(pred, tape.constant_view(targets));
    ad::Tensor fit_term = tape.sum(tape.mul(tape.constant_view(wcol), tape.square(err)));
    ad::Tensor reg{};
    bool first = true;
    for (const auto& leaf : leaves) {
      ad::Tensor t1 = tape.sum(tape.square(leaf));
      reg = first ? t1 : tape.add(reg, t1);
      first = false;
    }
    ad::Tensor loss = tape.add(fit_term, tape.scalar_mul(reg, cfg.sigma_surr));
    tape.backward(loss);

    std::vector<ad::Matrix> grads;
    grads.reserve(leaves.size());
    for (const auto& leaf : leaves) grads.push_back(tape.take_grad(leaf));
    ad::adam_step(model.params, grads, opt, adam);

    double lv = tape.scalar(loss);
    history.push_back(lv);
    if (static_cast<int>(history.size()) > cfg.tol_window) {
      double past = history[history.size() - 1 - cfg.tol_window];
      double rel = std::abs(past - lv) / std::max(std::abs(past), 1e-12);
      if (rel < cfg.rel_tol) break;
    }
  }
  return model;
}

}  // namespace enrt
