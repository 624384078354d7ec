#pragma once

// Area adjacency graphs and the ICAR precision Q = D - W.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hetsae/errors.hpp"

namespace hetsae {

class AdjacencyGraph {
 public:
  using Edge = std::pair<int, int>;

  AdjacencyGraph(int n_areas, std::vector<Edge> edges) : n_(n_areas) {
    if (n_areas <= 0) throw InvalidInput("AdjacencyGraph: n_areas must be positive");
    for (auto [i, j] : edges) {
      if (i < 0 || j < 0 || i >= n_ || j >= n_) {
        throw InvalidInput("AdjacencyGraph: edge (" + std::to_string(i) + ", " + std::to_string(j) +
                           ") has an index out of range for n=" + std::to_string(n_));
      }
      if (i == j) throw InvalidInput("AdjacencyGraph: self-loop at " + std::to_string(i));
      edges_.emplace_back(std::min(i, j), std::max(i, j));
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  }

  int n_areas() const { return n_; }
  const std::vector<Edge>& edges() const { return edges_; }

  std::vector<int> degrees() const {
    std::vector<int> deg(n_, 0);
    for (auto [i, j] : edges_) {
      ++deg[i];
      ++deg[j];
    }
    return deg;
  }

  /// Connected-component label per node, labels 0..k-1 in order of first node.
  std::vector<int> components() const {
    std::vector<int> parent(n_);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (auto [i, j] : edges_) parent[find(i)] = find(j);
    std::vector<int> label(n_, -1), root_label(n_, -1);
    int next = 0;
    for (int i = 0; i < n_; ++i) {
      const int r = find(i);
      if (root_label[r] < 0) root_label[r] = next++;
      label[i] = root_label[r];
    }
    return label;
  }

  int component_count() const {
    const auto c = components();
    return c.empty() ? 0 : *std::max_element(c.begin(), c.end()) + 1;
  }

  /// Rook-contiguity lattice, row-major numbering.
  static AdjacencyGraph grid(int rows, int cols) {
    std::vector<Edge> e;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const int k = r * cols + c;
        if (c + 1 < cols) e.emplace_back(k, k + 1);
        if (r + 1 < rows) e.emplace_back(k, k + cols);
      }
    }
    return AdjacencyGraph(rows * cols, std::move(e));
  }

  static AdjacencyGraph path(int n) {
    std::vector<Edge> e;
    for (int k = 0; k + 1 < n; ++k) e.emplace_back(k, k + 1);
    return AdjacencyGraph(n, std::move(e));
  }

 private:
  int n_;
  std::vector<Edge> edges_;
};

/// Edge-list text: a header line "n=<count>" followed by "i j" pairs, one per
/// line. Lines starting with '#' and blank lines are skipped.
inline AdjacencyGraph parse_adjacency(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  std::optional<int> n;
  std::vector<AdjacencyGraph::Edge> edges;

  auto trim = [](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return std::string_view{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  auto fail = [&](const std::string& msg) {
    throw InvalidInput("adjacency line " + std::to_string(line_no) + ": " + msg);
  };
  auto parse_int = [&](std::string_view tok) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) fail("not an integer: '" + std::string(tok) + "'");
    return v;
  };

  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view s = trim(line);
    if (s.empty() || s.front() == '#') continue;
    if (!n) {
      if (s.substr(0, 2) != "n=") fail("expected header 'n=<count>'");
      n = parse_int(trim(s.substr(2)));
      if (*n <= 0) fail("area count must be positive");
      continue;
    }
    std::istringstream fields{std::string(s)};
    std::string a, b, extra;
    if (!(fields >> a >> b) || (fields >> extra)) fail("expected two integers 'i j'");
    const int i = parse_int(a);
    const int j = parse_int(b);
    if (i < 0 || j < 0 || i >= *n || j >= *n) fail("index out of range (n=" + std::to_string(*n) + ")");
    if (i == j) fail("self-loop");
    edges.emplace_back(i, j);
  }
  if (!n) throw InvalidInput("adjacency: missing header 'n=<count>'");
  return AdjacencyGraph(*n, std::move(edges));
}

struct IcarStructure {
  Eigen::MatrixXd precision;      // Q = D - W
  Eigen::VectorXd degree;         // diag(D)
  double jitter = 0.0;            // epsilon in Q + eps I
  Eigen::VectorXd eigenvalues;    // of Q + eps I, ascending
  Eigen::MatrixXd eigenvectors;   // columns orthonormal
  Eigen::MatrixXd root;           // symmetric (Q + eps I)^{1/2}
  Eigen::MatrixXd inv_root;       // symmetric (Q + eps I)^{-1/2}; R R' = (Q + eps I)^{-1}
  int n_components = 1;
  std::vector<std::string> diagnostics;

  Eigen::Index size() const { return precision.rows(); }
  Eigen::MatrixXd regularized_precision() const {
    return precision + jitter * Eigen::MatrixXd::Identity(size(), size());
  }
};

inline double default_icar_jitter(const AdjacencyGraph& g) {
  const auto deg = g.degrees();
  const double mean = std::accumulate(deg.begin(), deg.end(), 0.0) / static_cast<double>(deg.size());
  return 1e-6 * mean;
}

inline IcarStructure build_icar(const AdjacencyGraph& graph, std::optional<double> jitter = std::nullopt) {
  if (graph.edges().empty()) {
    throw InvalidInput("build_icar: graph has no edges; ICAR prior is undefined (use a non-spatial model)");
  }
  const int n = graph.n_areas();
  IcarStructure s;
  s.jitter = jitter.value_or(default_icar_jitter(graph));
  if (!(s.jitter > 0.0)) throw InvalidInput("build_icar: jitter must be positive");

  s.precision = Eigen::MatrixXd::Zero(n, n);
  for (auto [i, j] : graph.edges()) {
    s.precision(i, j) = -1.0;
    s.precision(j, i) = -1.0;
    s.precision(i, i) += 1.0;
    s.precision(j, j) += 1.0;
  }
  s.degree = s.precision.diagonal();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s.regularized_precision());
  if (eig.info() != Eigen::Success) throw NumericalError("build_icar: eigendecomposition failed");
  s.eigenvalues = eig.eigenvalues();
  s.eigenvectors = eig.eigenvectors();
  const Eigen::ArrayXd lam = s.eigenvalues.array().max(s.jitter * 0.5);
  s.root = s.eigenvectors * lam.sqrt().matrix().asDiagonal() * s.eigenvectors.transpose();
  s.inv_root = s.eigenvectors * lam.rsqrt().matrix().asDiagonal() * s.eigenvectors.transpose();

  s.n_components = graph.component_count();
  if (s.n_components > 1) {
    s.diagnostics.push_back("graph has " + std::to_string(s.n_components) +
                            " connected components; each contributes a jitter-regularized null direction");
  }
  for (int i = 0; i < n; ++i) {
    if (s.degree[i] == 0.0) s.diagnostics.push_back("area " + std::to_string(i) + " has no neighbours");
  }
  return s;
}

}  // namespace hetsae
