#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "enrt/common.hpp"
#include "enrt/featurebase.hpp"

#include <json.hpp>

namespace enrt {

// 1e-12 floor on the sum-of-squares improvement a split must deliver;
// anything smaller is floating-point noise, not structure.
constexpr double kMinSseGain = 1e-12;

struct TreeNode {
  int feature = -1;       // internal nodes only
  double threshold = 0.0;
  int left = -1, right = -1;
  int count = 0;
  double mse = 0.0;
  double value = 0.0;     // mean of training targets reaching the node

  bool is_leaf() const { return left < 0; }
};

struct PathStep {
  int node = 0;
  int feature = -1;
  double threshold = 0.0;
  bool went_left = false;
};

// Root-to-leaf trace for one sample. Length counts nodes, so a bare leaf
// has length 1.
struct DecisionPath {
  std::vector<PathStep> internal_steps;
  int leaf_node = 0;
  double leaf_value = 0.0;

  int length() const { return static_cast<int>(internal_steps.size()) + 1; }
};

class RegressionTree {
 public:
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  int s_leaf = 10;
  int max_depth = 12;
  int n_features = 0;

  double predict(const Eigen::VectorXd& x) const {
    return nodes[static_cast<std::size_t>(descend(x))].value;
  }

  DecisionPath decision_path(const Eigen::VectorXd& x) const {
    check_width(x);
    DecisionPath path;
    int cur = 0;
    while (!nodes[static_cast<std::size_t>(cur)].is_leaf()) {
      const TreeNode& n = nodes[static_cast<std::size_t>(cur)];
      bool left = x[n.feature] <= n.threshold;
      path.internal_steps.push_back({cur, n.feature, n.threshold, left});
      cur = left ? n.left : n.right;
    }
    path.leaf_node = cur;
    path.leaf_value = nodes[static_cast<std::size_t>(cur)].value;
    return path;
  }

  int leaf_count() const {
    int c = 0;
    for (const auto& n : nodes) c += n.is_leaf();
    return c;
  }

 private:
  int descend(const Eigen::VectorXd& x) const {
    check_width(x);
    int cur = 0;
    while (!nodes[static_cast<std::size_t>(cur)].is_leaf()) {
      const TreeNode& n = nodes[static_cast<std::size_t>(cur)];
      cur = x[n.feature] <= n.threshold ? n.left : n.right;
    }
    return cur;
  }

  void check_width(const Eigen::VectorXd& x) const {
    if (static_cast<int>(x.size()) != n_features)
      throw SchemaMismatch("sample width " + std::to_string(x.size()) +
                           " != tree feature count " + std::to_string(n_features));
  }
};

namespace detail {

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  int left_count = 0;
  double sse = 0.0;  // weighted child SSE
};

}  // namespace detail

// Greedy top-down CART fit minimizing the summed child squared error.
// Thresholds sit at midpoints of consecutive distinct sorted values; a split
// must leave s_leaf samples on each side and strictly reduce the SSE. Ties
// break toward the lowest feature index, then the smallest threshold.
//
// Per-feature index arrays are sorted once at the root and kept sorted down
// the tree with stable partitions, so each level costs O(F*n).
inline RegressionTree fit_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                               int s_leaf = 10, int max_depth = 12) {
  const int n = static_cast<int>(x.rows());
  const int f = static_cast<int>(x.cols());
  if (n < 1 || y.size() != n) throw EmptyInput("tree fit requires matching nonempty x, y");
  if (s_leaf < 1) throw std::invalid_argument("s_leaf must be >= 1");

  RegressionTree tree;
  tree.s_leaf = s_leaf;
  tree.max_depth = max_depth;
  tree.n_features = f;

  // order[j] holds sample indices sorted by feature j, segment [lo, hi)
  // always lists the same node's samples in each column.
  std::vector<std::vector<int>> order(static_cast<std::size_t>(f), std::vector<int>(n));
  for (int j = 0; j < f; ++j) {
    auto& col = order[static_cast<std::size_t>(j)];
    for (int i = 0; i < n; ++i) col[i] = i;
    std::sort(col.begin(), col.end(), [&](int a, int b) {
      double va = x(a, j), vb = x(b, j);
      return va < vb || (va == vb && a < b);
    });
  }

  std::vector<char> go_left(static_cast<std::size_t>(n));
  std::vector<int> scratch(static_cast<std::size_t>(n));

  struct Frame {
    int node;
    int lo, hi;
    int depth;
  };
  std::vector<Frame> stack;

  auto node_stats = [&](int lo, int hi) {
    double sum = 0.0, sumsq = 0.0;
    const auto& col = order[0];
    for (int i = lo; i < hi; ++i) {
      double v = y[col[i]];
      sum += v;
      sumsq += v * v;
    }
    int cnt = hi - lo;
    double mean = sum / cnt;
    double sse = std::max(0.0, sumsq - sum * sum / cnt);
    return std::tuple<double, double, int>(mean, sse, cnt);
  };

  auto find_split = [&](int lo, int hi) {
    detail::SplitChoice best;
    const int cnt = hi - lo;
    double total_sum = 0.0, total_sumsq = 0.0;
    for (int i = lo; i < hi; ++i) {
      double v = y[order[0][i]];
      total_sum += v;
      total_sumsq += v * v;
    }
    // Candidates within this band of the best are ties and resolve to the
    // scan order (lowest feature, then smallest threshold). The band covers
    // the summation-order noise of the running sums, which otherwise breaks
    // exact ties arbitrarily.
    const double tie_band = 1e-10 * (1.0 + total_sumsq);
    for (int j = 0; j < f; ++j) {
      const auto& col = order[static_cast<std::size_t>(j)];
      double lsum = 0.0, lsumsq = 0.0;
      for (int p = 1; p < cnt; ++p) {
        int idx = col[lo + p - 1];
        double v = y[idx];
        lsum += v;
        lsumsq += v * v;
        double xv = x(idx, j);
        double xn = x(col[lo + p], j);
        if (!(xv < xn)) continue;  // split only between distinct values
        if (p < s_leaf || cnt - p < s_leaf) continue;
        double rsum = total_sum - lsum;
        double rsumsq = total_sumsq - lsumsq;
        double sse = std::max(0.0, lsumsq - lsum * lsum / p) +
                     std::max(0.0, rsumsq - rsum * rsum / (cnt - p));
        if (!best.found || sse < best.sse - tie_band) {
          best.found = true;
          best.feature = j;
          best.threshold = xv + 0.5 * (xn - xv);
          best.left_count = p;
          best.sse = sse;
        }
      }
    }
    return best;
  };

  tree.nodes.push_back({});
  stack.push_back({0, 0, n, 1});

  while (!stack.empty()) {
    Frame fr = stack.back();
    stack.pop_back();

    auto [mean, sse, cnt] = node_stats(fr.lo, fr.hi);
    TreeNode& nd = tree.nodes[static_cast<std::size_t>(fr.node)];
    nd.value = mean;
    nd.count = cnt;
    nd.mse = sse / cnt;

    if (fr.depth >= max_depth || cnt < 2 * s_leaf) continue;
    detail::SplitChoice split = find_split(fr.lo, fr.hi);
    if (!split.found || sse - split.sse <= kMinSseGain) continue;

    int left_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    int right_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({});
    {
      TreeNode& parent = tree.nodes[static_cast<std::size_t>(fr.node)];
      parent.feature = split.feature;
      parent.threshold = split.threshold;
      parent.left = left_id;
      parent.right = right_id;
    }

    for (int i = fr.lo; i < fr.hi; ++i) {
      int idx = order[static_cast<std::size_t>(split.feature)][i];
      go_left[idx] = x(idx, split.feature) <= split.threshold;
    }
    int mid = fr.lo + split.left_count;
    for (int j = 0; j < f; ++j) {
      auto& col = order[static_cast<std::size_t>(j)];
      int lpos = fr.lo, rpos = 0;
      for (int i = fr.lo; i < fr.hi; ++i) {
        int idx = col[i];
        if (go_left[idx])
          col[lpos++] = idx;
        else
          scratch[rpos++] = idx;
      }
      std::copy(scratch.begin(), scratch.begin() + rpos, col.begin() + lpos);
    }

    // Right child first so the left subtree is laid out before it (pure
    // cosmetics; ids are explicit).
    stack.push_back({right_id, mid, fr.hi, fr.depth + 1});
    stack.push_back({left_id, fr.lo, mid, fr.depth + 1});
  }
  return tree;
}

// Mean decision-path length over a sample set.
inline double average_depth(const RegressionTree& tree, const Eigen::MatrixXd& x) {
  if (x.rows() == 0) throw EmptyInput("average_depth over empty set");
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    total += tree.decision_path(x.row(i).transpose()).length();
  return total / static_cast<double>(x.rows());
}

// Fraction of samples whose hard labels agree between two probability
// vectors.
inline double fidelity(const Eigen::VectorXd& nn_probs, const Eigen::VectorXd& tree_probs) {
  if (nn_probs.size() != tree_probs.size() || nn_probs.size() == 0)
    throw LengthMismatch("fidelity requires equal nonempty prediction vectors");
  double agree = 0.0;
  for (Eigen::Index i = 0; i < nn_probs.size(); ++i)
    agree += hard_label(nn_probs[i]) == hard_label(tree_probs[i]) ? 1.0 : 0.0;
  return agree / static_cast<double>(nn_probs.size());
}

struct RulePredicate {
  int feature = -1;
  std::string name;
  Family family = Family::raw;
  bool expert = false;
  bool less_equal = true;     // direction the sample took
  double threshold_std = 0.0;
  double threshold_phys = 0.0;
  std::string display_unit;
};

struct RuleDoc {
  std::vector<RulePredicate> predicates;
  double probability = 0.0;
  int hard = 0;

  std::string to_text() const {
    std::string out;
    for (std::size_t i = 0; i < predicates.size(); ++i) {
      const auto& p = predicates[i];
      out += (i ? "AND " : "IF  ");
      if (p.expert) out += "[expert] ";
      out += p.name;
      out += p.less_equal ? " <= " : " > ";
      out += fmt_double(p.threshold_phys);
      if (!p.display_unit.empty()) out += " " + p.display_unit;
      out += "  (z " + std::string(p.less_equal ? "<= " : "> ") + fmt_double(p.threshold_std) + ")\n";
    }
    if (predicates.empty()) out += "IF  (always)\n";
    out += "THEN stability probability = " + fmt_double(probability) + " -> " +
           (hard ? "stable" : "unstable") + "\n";
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json preds = nlohmann::json::array();
    for (const auto& p : predicates)
      preds.push_back({{"feature", p.feature},
                       {"name", p.name},
                       {"family", family_name(p.family)},
                       {"expert", p.expert},
                       {"op", p.less_equal ? "<=" : ">"},
                       {"threshold_std", p.threshold_std},
                       {"threshold_phys", p.threshold_phys},
                       {"unit", p.display_unit}});
    return {{"format_version", kFormatVersion},
            {"predicates", preds},
            {"probability", probability},
            {"hard_label", hard}};
  }
};

// Renders the decision path of one (standardized) sample as a conjunction
// of predicates with thresholds in both standardized and physical units.
// Expert-family predicates are flagged.
inline RuleDoc render_rule(const RegressionTree& tree, const Eigen::VectorXd& x,
                           const FeatureSchema& schema,
                           const Standardizer* stats = nullptr) {
  if (schema.size() != tree.n_features)
    throw SchemaMismatch("schema width != tree feature count");
  DecisionPath path = tree.decision_path(x);
  RuleDoc doc;
  for (const auto& step : path.internal_steps) {
    const FeatureDesc& d = schema.features[static_cast<std::size_t>(step.feature)];
    RulePredicate p;
    p.feature = step.feature;
    p.name = feature_name(step.feature, schema);
    p.family = d.family;
    p.expert = d.family != Family::raw;
    p.less_equal = step.went_left;
    p.threshold_std = step.threshold;
    double phys = stats ? stats->invert_one(step.feature, step.threshold) : step.threshold;
    p.threshold_phys = display_value(d, phys);
    p.display_unit = rendered_in_degrees(d) ? "deg" : d.unit;
    doc.predicates.push_back(std::move(p));
  }
  doc.probability = path.leaf_value;
  doc.hard = hard_label(doc.probability);
  return doc;
}

// Per-family mean count of expert-term tests on the decision paths of X.
// Index i corresponds to Family(i+1).
inline std::array<double, kExpertFamilyCount> nonlinear_frequency(
    const RegressionTree& tree, const Eigen::MatrixXd& x, const FeatureSchema& schema) {
  if (schema.size() != tree.n_features)
    throw SchemaMismatch("schema width != tree feature count");
  std::array<double, kExpertFamilyCount> acc{};
  if (x.rows() == 0) return acc;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    DecisionPath path = tree.decision_path(x.row(i).transpose());
    for (const auto& step : path.internal_steps) {
      Family fam = schema.features[static_cast<std::size_t>(step.feature)].family;
      if (fam != Family::raw) acc[static_cast<std::size_t>(static_cast<int>(fam) - 1)] += 1.0;
    }
  }
  for (auto& v : acc) v /= static_cast<double>(x.rows());
  return acc;
}

// Per-family mean depth (root = 1) of the internal nodes testing that
// family; families absent from the tree report no value.
inline std::array<std::optional<double>, kExpertFamilyCount> nonlinear_layer_number(
    const RegressionTree& tree, const FeatureSchema& schema) {
  if (schema.size() != tree.n_features)
    throw SchemaMismatch("schema width != tree feature count");
  std::array<double, kExpertFamilyCount> depth_sum{};
  std::array<int, kExpertFamilyCount> counts{};

  struct Item {
    int node, depth;
  };
  std::vector<Item> stack{{0, 1}};
  while (!stack.empty()) {
    Item it = stack.back();
    stack.pop_back();
    const TreeNode& n = tree.nodes[static_cast<std::size_t>(it.node)];
    if (n.is_leaf()) continue;
    Family fam = schema.features[static_cast<std::size_t>(n.feature)].family;
    if (fam != Family::raw) {
      auto k = static_cast<std::size_t>(static_cast<int>(fam) - 1);
      depth_sum[k] += it.depth;
      counts[k] += 1;
    }
    stack.push_back({n.left, it.depth + 1});
    stack.push_back({n.right, it.depth + 1});
  }

  std::array<std::optional<double>, kExpertFamilyCount> out;
  for (std::size_t k = 0; k < kExpertFamilyCount; ++k)
    if (counts[k] > 0) out[k] = depth_sum[k] / counts[k];
  return out;
}

inline nlohmann::json tree_to_json(const RegressionTree& tree) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : tree.nodes) {
    if (n.is_leaf())
      nodes.push_back({{"value", n.value}, {"count", n.count}, {"mse", n.mse}});
    else
      nodes.push_back({{"feature", n.feature},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"value", n.value},
                       {"count", n.count},
                       {"mse", n.mse}});
  }
  return {{"format_version", kFormatVersion},
          {"s_leaf", tree.s_leaf},
          {"max_depth", tree.max_depth},
          {"n_features", tree.n_features},
          {"nodes", nodes}};
}

inline RegressionTree tree_from_json(const nlohmann::json& j) {
  RegressionTree t;
  t.s_leaf = j.at("s_leaf");
  t.max_depth = j.at("max_depth");
  t.n_features = j.at("n_features");
  for (const auto& e : j.at("nodes")) {
    TreeNode n;
    n.value = e.at("value");
    n.count = e.at("count");
    n.mse = e.at("mse");
    if (e.contains("feature")) {
      n.feature = e.at("feature");
      n.threshold = e.at("threshold");
      n.left = e.at("left");
      n.right = e.at("right");
    }
    t.nodes.push_back(n);
  }
  return t;
}

inline void save_tree(const RegressionTree& tree, const std::filesystem::path& file) {
  std::ofstream(file) << tree_to_json(tree).dump(2) << "\n";
}

inline RegressionTree load_tree(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("missing tree file " + file.string());
  return tree_from_json(nlohmann::json::parse(in));
}

}  // namespace enrt
