#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <vector>

#include "enrt/autodiff.hpp"
#include "enrt/common.hpp"
#include "enrt/rng.hpp"

#include <json.hpp>

namespace enrt {

// MLP mapping a flattened evaluation-model parameter vector to an
// approximate average tree depth. Rectifier hidden layers, linear output.
// Parameters live in one block list (weight, bias per layer) so the
// optimizer can update them in place.
struct MlpSurrogate {
  std::vector<int> widths;        // {input, h1, ..., 1}
  std::vector<ad::Matrix> params; // w0, b0, w1, b1, ...

  int input_width() const { return widths.empty() ? 0 : widths.front(); }
  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
  ad::Matrix& weight(int l) { return params[static_cast<std::size_t>(2 * l)]; }
  ad::Matrix& bias(int l) { return params[static_cast<std::size_t>(2 * l + 1)]; }
  const ad::Matrix& weight(int l) const { return params[static_cast<std::size_t>(2 * l)]; }
  const ad::Matrix& bias(int l) const { return params[static_cast<std::size_t>(2 * l + 1)]; }

  static MlpSurrogate init(const std::vector<int>& widths, RngStream& rng) {
    MlpSurrogate m;
    m.widths = widths;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      double bound = 1.0 / std::sqrt(static_cast<double>(widths[l]));
      ad::Matrix w(widths[l], widths[l + 1]);
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
      m.params.push_back(std::move(w));
      m.params.push_back(ad::Matrix::Zero(1, widths[l + 1]));
    }
    return m;
  }

  // Deterministic forward value; row-wise over a batch of parameter vectors.
  ad::Matrix forward(const ad::Matrix& x) const {
    if (x.cols() != input_width())
      throw WidthMismatch("surrogate expects width " + std::to_string(input_width()) +
                          ", got " + std::to_string(x.cols()));
    ad::Matrix h = x;
    for (int l = 0; l < layer_count(); ++l) {
      h = ((h * weight(l)).rowwise() + bias(l).row(0)).eval();
      if (l + 1 < layer_count()) h = h.cwiseMax(0.0);
    }
    return h;
  }

  double predict_depth(const Eigen::VectorXd& omega) const {
    ad::Matrix row = omega.transpose();
    return forward(row)(0, 0);
  }

  // Same computation on a tape, with the surrogate parameters entering as
  // constants so gradients flow only to the input.
  ad::Tensor tape_forward(ad::Tape& tape, ad::Tensor x) const {
    if (tape.val(x).cols() != input_width())
      throw WidthMismatch("surrogate tape input width mismatch");
    ad::Tensor h = x;
    for (int l = 0; l < layer_count(); ++l) {
      h = tape.add(tape.matmul(h, tape.constant_view(weight(l))), tape.constant_view(bias(l)));
      if (l + 1 < layer_count()) h = tape.relu(h);
    }
    return h;
  }

  // Variant with the parameters as differentiable leaves; used by the
  // surrogate trainer. Leaf order matches the params block order.
  ad::Tensor tape_forward_trainable(ad::Tape& tape, ad::Tensor x,
                                    std::vector<ad::Tensor>& leaves) const {
    ad::Tensor h = x;
    for (int l = 0; l < layer_count(); ++l) {
      ad::Tensor w = tape.leaf_view(weight(l));
      ad::Tensor b = tape.leaf_view(bias(l));
      leaves.push_back(w);
      leaves.push_back(b);
      h = tape.add(tape.matmul(h, w), b);
      if (l + 1 < layer_count()) h = tape.relu(h);
    }
    return h;
  }

  nlohmann::json manifest() const {
    return {{"format_version", kFormatVersion}, {"widths", widths}, {"scalar", "f64"},
            {"byte_order", "little"}};
  }

  void save(const std::filesystem::path& dir, const std::string& stem = "surrogate") const {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / (stem + "_manifest.json")) << manifest().dump(2) << "\n";
    std::ofstream bin(dir / (stem + "_params.bin"), std::ios::binary);
    for (const auto& m : params)
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
          double v = m(i, j);
          bin.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
  }

  static MlpSurrogate load(const std::filesystem::path& dir,
                           const std::string& stem = "surrogate") {
    std::ifstream mf(dir / (stem + "_manifest.json"));
    if (!mf) throw std::runtime_error("missing surrogate manifest");
    nlohmann::json j = nlohmann::json::parse(mf);
    MlpSurrogate m;
    m.widths = j.at("widths").get<std::vector<int>>();
    std::ifstream bin(dir / (stem + "_params.bin"), std::ios::binary);
    auto read_block = [&](Eigen::Index r, Eigen::Index c) {
      ad::Matrix out(r, c);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index jj = 0; jj < c; ++jj) {
          double v = 0.0;
          bin.read(reinterpret_cast<char*>(&v), sizeof(v));
          out(i, jj) = v;
        }
      return out;
    };
    for (std::size_t l = 0; l + 1 < m.widths.size(); ++l) {
      m.params.push_back(read_block(m.widths[l], m.widths[l + 1]));
      m.params.push_back(read_block(1, m.widths[l + 1]));
    }
    if (!bin) throw std::runtime_error("surrogate parameter file truncated");
    return m;
  }
};

}  // namespace enrt
