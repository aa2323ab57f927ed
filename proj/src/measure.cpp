#include "mflab/measure.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace mflab {

namespace {
std::atomic<uint64_t> g_next_measure_id{1};
}

EmpiricalMeasure::EmpiricalMeasure(Mat atoms, Vec weights)
    : atoms_(std::move(atoms)), weights_(std::move(weights)),
      id_(g_next_measure_id.fetch_add(1)) {
  require(atoms_.rows() >= 1, "empirical measure needs at least one atom");
  require(atoms_.rows() == weights_.size(), "atom/weight count mismatch");
  require(atoms_.allFinite(), "non-finite atom coordinate");
  double total = 0.0;
  for (int i = 0; i < weights_.size(); ++i) {
    require(weights_[i] >= 0.0, "negative weight");
    total += weights_[i];
  }
  require(total > 0.0, "weights sum to zero");
  weights_ /= total;
}

EmpiricalMeasure make_empirical(const Mat& points, const std::optional<Vec>& weights) {
  if (weights) return EmpiricalMeasure(points, *weights);
  return EmpiricalMeasure(points, Vec::Constant(points.rows(), 1.0));
}

Vec integrate(const EmpiricalMeasure& m, const std::function<Vec(ConstVecRef)>& g) {
  Vec acc;
  for (int i = 0; i < m.size(); ++i) {
    Vec gi = g(m.atom(i));
    require(gi.allFinite(), "non-finite integrand value");
    if (i == 0)
      acc = m.weights()[0] * gi;
    else
      acc += m.weights()[i] * gi;
  }
  return acc;
}

double integrate_scalar(const EmpiricalMeasure& m,
                        const std::function<double(ConstVecRef)>& g) {
  double acc = 0.0;
  for (int i = 0; i < m.size(); ++i) {
    const double gi = g(m.atom(i));
    require(std::isfinite(gi), "non-finite integrand value");
    acc += m.weights()[i] * gi;
  }
  return acc;
}

double w2_sorted_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  require(mu.dim() == 1 && nu.dim() == 1, "w2_sorted_1d needs d=1");
  auto order = [](const EmpiricalMeasure& m) {
    std::vector<int> idx(static_cast<size_t>(m.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return m.atoms()(a, 0) < m.atoms()(b, 0); });
    return idx;
  };
  const auto ia = order(mu), ib = order(nu);
  // sweep the common refinement of both quantile partitions
  size_t a = 0, b = 0;
  double ra = mu.weights()[ia[0]], rb = nu.weights()[ib[0]];
  double acc = 0.0;
  while (true) {
    while (a < ia.size() && ra <= 0.0) {
      ++a;
      if (a < ia.size()) ra = mu.weights()[ia[a]];
    }
    while (b < ib.size() && rb <= 0.0) {
      ++b;
      if (b < ib.size()) rb = nu.weights()[ib[b]];
    }
    if (a >= ia.size() || b >= ib.size()) break;
    const double step = std::min(ra, rb);
    const double diff = mu.atoms()(ia[a], 0) - nu.atoms()(ib[b], 0);
    acc += step * diff * diff;
    ra -= step;
    rb -= step;
  }
  return std::sqrt(std::max(0.0, acc));
}

namespace {

// Transportation simplex (MODI) on the dense bipartite problem. Desk-scale
// instances only; optimality is certified through the final reduced costs.
class TransportSimplex {
public:
  TransportSimplex(const Mat& cost, Vec supply, Vec demand)
      : c_(cost), a_(std::move(supply)), b_(std::move(demand)),
        n_(static_cast<int>(c_.rows())), m_(static_cast<int>(c_.cols())) {}

  double solve() {
    build_initial_basis();
    const double eps = 1e-13 * std::max(1.0, c_.cwiseAbs().maxCoeff());
    const int max_pivots = 40 * (n_ + m_) * (n_ + m_) + 1000;
    for (int it = 0; it < max_pivots; ++it) {
      compute_potentials();
      int ei = -1, ej = -1;
      double best = -eps;
      for (int i = 0; i < n_; ++i)
        for (int j = 0; j < m_; ++j) {
          if (in_basis_(i, j)) continue;
          const double rc = c_(i, j) - u_[i] - v_[j];
          if (rc < best) {
            best = rc;
            ei = i;
            ej = j;
          }
        }
      if (ei < 0) break;
      pivot(ei, ej);
    }
    compute_potentials();
    // dual feasibility certificate
    for (int i = 0; i < n_; ++i)
      for (int j = 0; j < m_; ++j)
        if (c_(i, j) - u_[i] - v_[j] < -1e-7 * std::max(1.0, c_.cwiseAbs().maxCoeff()))
          throw std::runtime_error("transport solve failed optimality certificate");
    double total = 0.0;
    for (const auto& cell : basis_) total += flow_(cell.first, cell.second) * c_(cell.first, cell.second);
    return total;
  }

private:
  void build_initial_basis() {
    flow_ = Mat::Zero(n_, m_);
    in_basis_ = Eigen::MatrixXi::Zero(n_, m_);
    Vec ra = a_, rb = b_;
    int i = 0, j = 0;
    // northwest-corner staircase: exactly n+m-1 basic cells, zero-flow cells
    // allowed on degenerate ties
    while (true) {
      const double q = std::min(ra[i], rb[j]);
      flow_(i, j) = q;
      in_basis_(i, j) = 1;
      basis_.emplace_back(i, j);
      ra[i] -= q;
      rb[j] -= q;
      if (i == n_ - 1 && j == m_ - 1) break;
      if (i == n_ - 1)
        ++j;
      else if (j == m_ - 1)
        ++i;
      else if (ra[i] <= rb[j])
        ++i;
      else
        ++j;
    }
  }

  void compute_potentials() {
    u_.assign(static_cast<size_t>(n_), 0.0);
    v_.assign(static_cast<size_t>(m_), 0.0);
    std::vector<char> su(static_cast<size_t>(n_), 0), sv(static_cast<size_t>(m_), 0);
    su[0] = 1;
    // propagate along the basis tree
    bool progress = true;
    while (progress) {
      progress = false;
      for (const auto& [i, j] : basis_) {
        if (su[static_cast<size_t>(i)] && !sv[static_cast<size_t>(j)]) {
          v_[static_cast<size_t>(j)] = c_(i, j) - u_[static_cast<size_t>(i)];
          sv[static_cast<size_t>(j)] = 1;
          progress = true;
        } else if (!su[static_cast<size_t>(i)] && sv[static_cast<size_t>(j)]) {
          u_[static_cast<size_t>(i)] = c_(i, j) - v_[static_cast<size_t>(j)];
          su[static_cast<size_t>(i)] = 1;
          progress = true;
        }
      }
    }
  }

  // The basis is a spanning tree on row-nodes (0..n-1) and col-nodes
  // (n..n+m-1). Adding the entering cell closes a unique cycle: it is the
  // entering cell followed by the tree path from col ej back to row ei.
  bool find_cycle(int ei, int ej, std::vector<std::pair<int, int>>& cycle) {
    const int nodes = n_ + m_;
    std::vector<std::vector<std::pair<int, int>>> adj(static_cast<size_t>(nodes));
    for (int k = 0; k < static_cast<int>(basis_.size()); ++k) {
      const auto [i, j] = basis_[static_cast<size_t>(k)];
      adj[static_cast<size_t>(i)].emplace_back(n_ + j, k);
      adj[static_cast<size_t>(n_ + j)].emplace_back(i, k);
    }
    std::vector<int> prev_node(static_cast<size_t>(nodes), -1),
        prev_edge(static_cast<size_t>(nodes), -1);
    std::vector<char> seen(static_cast<size_t>(nodes), 0);
    std::vector<int> queue{n_ + ej};
    seen[static_cast<size_t>(n_ + ej)] = 1;
    for (size_t q = 0; q < queue.size(); ++q) {
      const int u = queue[q];
      for (const auto& [w, k] : adj[static_cast<size_t>(u)]) {
        if (seen[static_cast<size_t>(w)]) continue;
        seen[static_cast<size_t>(w)] = 1;
        prev_node[static_cast<size_t>(w)] = u;
        prev_edge[static_cast<size_t>(w)] = k;
        queue.push_back(w);
      }
    }
    if (!seen[static_cast<size_t>(ei)]) return false;
    cycle.clear();
    cycle.emplace_back(ei, ej);
    for (int u = ei; u != n_ + ej; u = prev_node[static_cast<size_t>(u)])
      cycle.push_back(basis_[static_cast<size_t>(prev_edge[static_cast<size_t>(u)])]);
    return true;
  }

  void pivot(int ei, int ej) {
    std::vector<std::pair<int, int>> cycle;
    if (!find_cycle(ei, ej, cycle))
      throw std::runtime_error("transport pivot: no cycle found");
    // odd positions lose flow
    double theta = std::numeric_limits<double>::infinity();
    int leave_pos = -1;
    for (size_t p = 1; p < cycle.size(); p += 2) {
      const double f = flow_(cycle[p].first, cycle[p].second);
      if (f < theta - 1e-18) {
        theta = f;
        leave_pos = static_cast<int>(p);
      }
    }
    for (size_t p = 0; p < cycle.size(); ++p) {
      const auto [i, j] = cycle[p];
      if (p % 2 == 0)
        flow_(i, j) += theta;
      else
        flow_(i, j) -= theta;
    }
    const auto leaving = cycle[static_cast<size_t>(leave_pos)];
    in_basis_(leaving.first, leaving.second) = 0;
    basis_.erase(std::find(basis_.begin(), basis_.end(), leaving));
    in_basis_(ei, ej) = 1;
    basis_.emplace_back(ei, ej);
    flow_(leaving.first, leaving.second) = 0.0;
  }

  Mat c_;
  Vec a_, b_;
  int n_, m_;
  Mat flow_;
  Eigen::MatrixXi in_basis_;
  std::vector<std::pair<int, int>> basis_;
  std::vector<double> u_, v_;
};

}  // namespace

double w2_transport(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  require(mu.dim() == nu.dim(), "w2: dimension mismatch");
  // strip zero-weight atoms; they carry no mass
  auto strip = [](const EmpiricalMeasure& m, Mat& pts, Vec& w) {
    std::vector<int> keep;
    for (int i = 0; i < m.size(); ++i)
      if (m.weights()[i] > 0.0) keep.push_back(i);
    pts.resize(static_cast<int>(keep.size()), m.dim());
    w.resize(static_cast<int>(keep.size()));
    for (int k = 0; k < static_cast<int>(keep.size()); ++k) {
      pts.row(k) = m.atoms().row(keep[static_cast<size_t>(k)]);
      w[k] = m.weights()[keep[static_cast<size_t>(k)]];
    }
  };
  Mat pa, pb;
  Vec wa, wb;
  strip(mu, pa, wa);
  strip(nu, pb, wb);
  Mat cost(pa.rows(), pb.rows());
  for (int i = 0; i < pa.rows(); ++i)
    for (int j = 0; j < pb.rows(); ++j)
      cost(i, j) = (pa.row(i) - pb.row(j)).squaredNorm();
  TransportSimplex solver(cost, wa, wb);
  return std::sqrt(std::max(0.0, solver.solve()));
}

double w2_distance(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  require(mu.dim() == nu.dim(), "w2: dimension mismatch");
  if (mu.dim() == 1) return w2_sorted_1d(mu, nu);
  return w2_transport(mu, nu);
}

EmpiricalMeasure mix(const EmpiricalMeasure& m, const EmpiricalMeasure& mp, double theta) {
  require(m.dim() == mp.dim(), "mix: dimension mismatch");
  Mat atoms(m.size() + mp.size(), m.dim());
  Vec w(m.size() + mp.size());
  atoms.topRows(m.size()) = m.atoms();
  atoms.bottomRows(mp.size()) = mp.atoms();
  w.head(m.size()) = (1.0 - theta) * m.weights();
  w.tail(mp.size()) = theta * mp.weights();
  return EmpiricalMeasure(std::move(atoms), std::move(w));
}

EmpiricalMeasure with_zero_weight_atom(const EmpiricalMeasure& m, ConstVecRef x) {
  require(x.size() == m.dim(), "probe atom dimension mismatch");
  Mat atoms(m.size() + 1, m.dim());
  Vec w(m.size() + 1);
  atoms.topRows(m.size()) = m.atoms();
  atoms.row(m.size()) = x.transpose();
  w.head(m.size()) = m.weights();
  w[m.size()] = 0.0;
  return EmpiricalMeasure(std::move(atoms), std::move(w));
}

EmpiricalMeasure load_measure_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open measure csv: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty measure csv: " + path);
  // header: x_1,...,x_d,weight
  int d = 0;
  {
    std::stringstream ss(line);
    std::string tok;
    std::vector<std::string> cols;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
    require(cols.size() >= 2 && cols.back() == "weight",
            "measure csv header must end with 'weight'");
    d = static_cast<int>(cols.size()) - 1;
  }
  std::vector<double> vals;
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    int got = 0;
    while (std::getline(ss, tok, ',')) {
      vals.push_back(std::stod(tok));
      ++got;
    }
    require(got == d + 1, "measure csv row width mismatch");
    ++rows;
  }
  Mat atoms(rows, d);
  Vec w(rows);
  for (int i = 0; i < rows; ++i) {
    for (int c = 0; c < d; ++c) atoms(i, c) = vals[static_cast<size_t>(i * (d + 1) + c)];
    w[i] = vals[static_cast<size_t>(i * (d + 1) + d)];
  }
  return EmpiricalMeasure(std::move(atoms), std::move(w));
}

void save_measure_csv(const EmpiricalMeasure& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write measure csv: " + path);
  out.precision(17);
  for (int c = 0; c < m.dim(); ++c) out << "x_" << (c + 1) << ",";
  out << "weight\n";
  for (int i = 0; i < m.size(); ++i) {
    for (int c = 0; c < m.dim(); ++c) out << m.atoms()(i, c) << ",";
    out << m.weights()[i] << "\n";
  }
}

}  // namespace mflab
