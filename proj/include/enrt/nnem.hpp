#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "enrt/autodiff.hpp"
#include "enrt/common.hpp"
#include "enrt/featurebase.hpp"
#include "enrt/rng.hpp"
#include "enrt/surrogate_model.hpp"

#include <json.hpp>

namespace enrt {

enum class RegMode { tree, l1, l2, none };

inline const char* reg_mode_name(RegMode m) {
  switch (m) {
    case RegMode::tree: return "tree";
    case RegMode::l1: return "l1";
    case RegMode::l2: return "l2";
    case RegMode::none: return "none";
  }
  return "?";
}

inline RegMode reg_mode_from(const std::string& s) {
  if (s == "tree") return RegMode::tree;
  if (s == "l1") return RegMode::l1;
  if (s == "l2") return RegMode::l2;
  if (s == "none") return RegMode::none;
  throw std::invalid_argument("unknown reg mode: " + s);
}

struct GruArch {
  int input = 27;
  int hidden = 32;
  int layers = 1;

  int layer_input(int l) const { return l == 0 ? input : hidden; }

  // 3 gates of (W + U + b) per layer, plus the scalar output head.
  int param_count() const {
    int c = 0;
    for (int l = 0; l < layers; ++l)
      c += 3 * (layer_input(l) * hidden + hidden * hidden + hidden);
    return c + hidden + 1;
  }
};

// Gated recurrent evaluation model regressing the stability probability.
// Parameters live in tape-ready blocks whose order defines the flattening:
// per layer Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh (row-major within a block),
// then the output head w_o, b_o. Flatten-order version 1.
struct EvalModelState {
  GruArch arch;
  std::vector<ad::Matrix> params;
  Standardizer standardizer;  // raw-window statistics used at inference

  static constexpr int kBlocksPerLayer = 9;

  const ad::Matrix& block(int layer, int which) const {
    return params[static_cast<std::size_t>(layer * kBlocksPerLayer + which)];
  }
  const ad::Matrix& wo() const { return params[params.size() - 2]; }
  const ad::Matrix& bo() const { return params.back(); }

  static EvalModelState init(const GruArch& arch, RngStream& rng) {
    EvalModelState s;
    s.arch = arch;
    double bound = 1.0 / std::sqrt(static_cast<double>(arch.hidden));
    auto uniform_block = [&](int r, int c) {
      ad::Matrix m(r, c);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(-bound, bound);
      return m;
    };
    for (int l = 0; l < arch.layers; ++l) {
      int in = arch.layer_input(l);
      for (int gate = 0; gate < 3; ++gate) {
        s.params.push_back(uniform_block(in, arch.hidden));          // W
        s.params.push_back(uniform_block(arch.hidden, arch.hidden)); // U
        s.params.push_back(ad::Matrix::Zero(1, arch.hidden));        // b
      }
    }
    s.params.push_back(uniform_block(arch.hidden, 1));  // w_o
    s.params.push_back(ad::Matrix::Zero(1, 1));         // b_o
    return s;
  }

  static EvalModelState zeros(const GruArch& arch) {
    EvalModelState s;
    s.arch = arch;
    for (int l = 0; l < arch.layers; ++l) {
      int in = arch.layer_input(l);
      for (int gate = 0; gate < 3; ++gate) {
        s.params.push_back(ad::Matrix::Zero(in, arch.hidden));
        s.params.push_back(ad::Matrix::Zero(arch.hidden, arch.hidden));
        s.params.push_back(ad::Matrix::Zero(1, arch.hidden));
      }
    }
    s.params.push_back(ad::Matrix::Zero(arch.hidden, 1));
    s.params.push_back(ad::Matrix::Zero(1, 1));
    return s;
  }
};

inline Eigen::VectorXd flatten(const EvalModelState& s) {
  Eigen::VectorXd out(s.arch.param_count());
  Eigen::Index c = 0;
  for (const auto& m : s.params)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) out[c++] = m(i, j);
  return out;
}

inline EvalModelState unflatten(const Eigen::VectorXd& v, const GruArch& arch) {
  if (v.size() != arch.param_count())
    throw LengthMismatch("parameter vector length " + std::to_string(v.size()) +
                         " != " + std::to_string(arch.param_count()));
  EvalModelState s = EvalModelState::zeros(arch);
  Eigen::Index c = 0;
  for (auto& m : s.params)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = v[c++];
  return s;
}

namespace detail {
inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

// Inference forward pass over one standardized sequence (rows are time
// steps). This is the canonical prediction path; training rebuilds the same
// recurrence on a tape.
inline double forward(const EvalModelState& s, const Eigen::MatrixXd& seq) {
  if (seq.cols() != s.arch.input) throw ShapeMismatch("sequence width != model input size");
  const int hidden = s.arch.hidden;
  Eigen::RowVectorXd h_prev, x_in;
  std::vector<Eigen::RowVectorXd> h(static_cast<std::size_t>(s.arch.layers),
                                    Eigen::RowVectorXd::Zero(hidden));
  for (Eigen::Index t = 0; t < seq.rows(); ++t) {
    x_in = seq.row(t);
    for (int l = 0; l < s.arch.layers; ++l) {
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
      Eigen::RowVectorXd& hp = h[static_cast<std::size_t>(l)];
      Eigen::RowVectorXd z = (x_in * wz + hp * uz + bz).unaryExpr(&detail::stable_sigmoid);
      Eigen::RowVectorXd r = (x_in * wr + hp * ur + br).unaryExpr(&detail::stable_sigmoid);
      Eigen::RowVectorXd hc =
          (x_in * wh + hp.cwiseProduct(r) * uh + bh).array().tanh().matrix();
      hp = hp + z.cwiseProduct(hc - hp);
      x_in = hp;
    }
  }
  double logit = (h.back() * s.wo())(0, 0) + s.bo()(0, 0);
  return detail::stable_sigmoid(logit);
}

// Probabilities over rows of a flattened sequence matrix (each row is one
// sample's T*F window, standardized).
inline Eigen::VectorXd forward_probs(const EvalModelState& s, const Eigen::MatrixXd& rows,
                                     int window) {
  Eigen::VectorXd out(rows.rows());
  const int f = s.arch.input;
  Eigen::MatrixXd seq(window, f);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (int step = 0; step < window; ++step) seq.row(step) = rows.row(i).segment(step * f, f);
    out[i] = forward(s, seq);
  }
  return out;
}

// A loss tape: the full objective for one minibatch, with parameter leaves
// exposed in flatten order for the optimizer and for gradient checks.
struct LossTape {
  ad::Tape tape;
  std::vector<ad::Tensor> param_leaves;
  ad::Tensor loss{};
  ad::Tensor mse{};
};

// Builds mean squared error over the batch plus the configured penalty.
// batch_x: per time step, a (batch x input) matrix; y: batch targets in
// {0,1}. With reg tree, sigma * S(flatten(params)) is added and gradients
// flow through the frozen surrogate into the parameters.
inline void build_loss(LossTape& lt, const EvalModelState& s,
                       const std::vector<ad::Matrix>& batch_x, const Eigen::VectorXd& y,
                       const MlpSurrogate* surrogate, double sigma_tree, RegMode mode) {
  if (mode == RegMode::tree && surrogate == nullptr)
    throw SurrogateMissing("tree regularization requires a trained surrogate");
  const int batch = static_cast<int>(y.size());
  const int hidden = s.arch.hidden;
  ad::Tape& t = lt.tape;

  for (const auto& p : s.params) lt.param_leaves.push_back(t.leaf_view(p));

  std::vector<ad::Tensor> h(static_cast<std::size_t>(s.arch.layers),
                            t.constant(ad::Matrix::Zero(batch, hidden)));
  std::vector<ad::Tensor> x_cache;
  for (const auto& xb : batch_x) x_cache.push_back(t.constant_view(xb));

  for (std::size_t step = 0; step < batch_x.size(); ++step) {
    ad::Tensor x = x_cache[step];
    for (int l = 0; l < s.arch.layers; ++l) {
      const int base = l * EvalModelState::kBlocksPerLayer;
      ad::Tensor wz = lt.param_leaves[base + 0], uz = lt.param_leaves[base + 1],
                 bz = lt.param_leaves[base + 2];
      ad::Tensor wr = lt.param_leaves[base + 3], ur = lt.param_leaves[base + 4],
                 br = lt.param_leaves[base + 5];
      ad::Tensor wh = lt.param_leaves[base + 6], uh = lt.param_leaves[base + 7],
                 bh = lt.param_leaves[base + 8];
      ad::Tensor hp = h[static_cast<std::size_t>(l)];
      ad::Tensor z = t.sigmoid(t.add(t.add(t.matmul(x, wz), t.matmul(hp, uz)), bz));
      ad::Tensor r = t.sigmoid(t.add(t.add(t.matmul(x, wr), t.matmul(hp, ur)), br));
      ad::Tensor hc =
          t.tanh(t.add(t.add(t.matmul(x, wh), t.matmul(t.mul(r, hp), uh)), bh));
      ad::Tensor hn = t.add(hp, t.mul(z, t.sub(hc, hp)));
      h[static_cast<std::size_t>(l)] = hn;
      x = hn;
    }
  }

  ad::Tensor wo = lt.param_leaves[lt.param_leaves.size() - 2];
  ad::Tensor bo = lt.param_leaves.back();
  ad::Tensor p = t.sigmoid(t.add(t.matmul(h.back(), wo), bo));
  ad::Tensor target = t.constant(ad::Matrix(y));
  lt.mse = t.mean(t.square(t.sub(p, target)));

  if (mode == RegMode::none || sigma_tree == 0.0) {
    lt.loss = mode == RegMode::none ? lt.mse : t.add(lt.mse, t.scalar_mul(t.leaf(0.0), sigma_tree));
    return;
  }

  if (mode == RegMode::tree) {
    ad::Tensor flat = t.reshape_row(lt.param_leaves[0]);
    for (std::size_t i = 1; i < lt.param_leaves.size(); ++i)
      flat = t.concat(flat, t.reshape_row(lt.param_leaves[i]));
    ad::Tensor depth = surrogate->tape_forward(t, flat);
    lt.loss = t.add(lt.mse, t.scalar_mul(depth, sigma_tree));
    return;
  }

  ad::Tensor penalty{};
  bool first = true;
  for (const auto& leaf : lt.param_leaves) {
    ad::Tensor term = mode == RegMode::l1 ? t.sum(t.abs(leaf)) : t.sum(t.square(leaf));
    penalty = first ? term : t.add(penalty, term);
    first = false;
  }
  lt.loss = t.add(lt.mse, t.scalar_mul(penalty, sigma_tree));
}

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;
};

// Loss of one batch of flattened sequences (rows), without touching the
// parameters.
inline LossBreakdown loss_value(const EvalModelState& s, const Eigen::MatrixXd& rows,
                                const Eigen::VectorXd& y, int window,
                                const MlpSurrogate* surrogate, double sigma_tree,
                                RegMode mode) {
  std::vector<ad::Matrix> batch_x;
  const int f = s.arch.input;
  for (int step = 0; step < window; ++step) {
    ad::Matrix xb(rows.rows(), f);
    for (Eigen::Index i = 0; i < rows.rows(); ++i)
      xb.row(i) = rows.row(i).segment(step * f, f);
    batch_x.push_back(std::move(xb));
  }
  LossTape lt;
  build_loss(lt, s, batch_x, y, surrogate, sigma_tree, mode);
  return {lt.tape.scalar(lt.loss), lt.tape.scalar(lt.mse)};
}

struct TrainEpochConfig {
  int batch = 32;
  double sigma_tree = 0.0;
  RegMode mode = RegMode::none;
  ad::AdamConfig adam;
};

struct EpochStats {
  double mean_mse = 0.0;
  double mean_loss = 0.0;
};

// One full pass over the training rows in a seed-derived minibatch order.
inline EpochStats train_epoch(EvalModelState& s, const Eigen::MatrixXd& rows,
                              const Eigen::VectorXd& y, int window,
                              const MlpSurrogate* surrogate, const TrainEpochConfig& cfg,
                              ad::AdamState& opt, RngStream order_rng) {
  const int n = static_cast<int>(rows.rows());
  const int f = s.arch.input;
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  order_rng.shuffle(perm);

  EpochStats stats;
  int batches = 0;
  for (int start = 0; start < n; start += cfg.batch) {
    int b = std::min(cfg.batch, n - start);
    std::vector<ad::Matrix> batch_x(static_cast<std::size_t>(window),
                                    ad::Matrix(b, f));
    Eigen::VectorXd yb(b);
    for (int i = 0; i < b; ++i) {
      int src = perm[static_cast<std::size_t>(start + i)];
      yb[i] = y[src];
      for (int step = 0; step < window; ++step)
        batch_x[static_cast<std::size_t>(step)].row(i) =
            rows.row(src).segment(step * f, f);
    }

    LossTape lt;
    build_loss(lt, s, batch_x, yb, surrogate, cfg.sigma_tree, cfg.mode);
    lt.tape.backward(lt.loss);

    std::vector<ad::Matrix> grads;
    grads.reserve(lt.param_leaves.size());
    for (const auto& leaf : lt.param_leaves) grads.push_back(lt.tape.take_grad(leaf));
    ad::adam_step(s.params, grads, opt, cfg.adam);

    stats.mean_mse += lt.tape.scalar(lt.mse);
    stats.mean_loss += lt.tape.scalar(lt.loss);
    ++batches;
  }
  stats.mean_mse /= batches;
  stats.mean_loss /= batches;
  return stats;
}

// Checkpoint: manifest plus raw little-endian binary64 parameter vector in
// flatten order. Round trips are bit-exact.
inline void save_checkpoint(const EvalModelState& s, const std::filesystem::path& dir,
                            const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["arch"] = {{"input", s.arch.input}, {"hidden", s.arch.hidden}, {"layers", s.arch.layers}};
  j["flatten_order_version"] = 1;
  j["param_count"] = s.arch.param_count();
  j["params_file"] = "params.bin";
  j["byte_order"] = "little";
  j["scalar"] = "f64";
  if (s.standardizer.size() > 0) j["standardizer"] = s.standardizer.to_json();
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";

  Eigen::VectorXd flat = flatten(s);
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  bin.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(sizeof(double) * flat.size()));
}

inline EvalModelState load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing checkpoint manifest in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(mf);
  GruArch arch{j.at("arch").at("input"), j.at("arch").at("hidden"), j.at("arch").at("layers")};
  Eigen::VectorXd flat(arch.param_count());
  std::ifstream bin(dir / j.at("params_file").get<std::string>(), std::ios::binary);
  bin.read(reinterpret_cast<char*>(flat.data()),
           static_cast<std::streamsize>(sizeof(double) * flat.size()));
  if (!bin) throw std::runtime_error("checkpoint parameter file truncated");
  EvalModelState s = unflatten(flat, arch);
  if (j.contains("standardizer") && !j.at("standardizer").is_null())
    s.standardizer = Standardizer::from_json(j.at("standardizer"));
  return s;
}

}  // namespace enrt
