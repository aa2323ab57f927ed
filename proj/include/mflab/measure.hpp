#pragma once

#include <functional>
#include <optional>
#include <string>

#include "mflab/types.hpp"

namespace mflab {

// Weighted particle cloud on R^d. Weights are normalized to sum 1 at
// construction; individual zero weights are allowed (probe atoms ride along
// without mass).
class EmpiricalMeasure {
public:
  EmpiricalMeasure(Mat atoms, Vec weights);

  int size() const { return static_cast<int>(atoms_.rows()); }
  int dim() const { return static_cast<int>(atoms_.cols()); }
  const Mat& atoms() const { return atoms_; }
  const Vec& weights() const { return weights_; }
  Vec atom(int i) const { return atoms_.row(i).transpose(); }
  uint64_t id() const { return id_; }

  Vec mean() const { return atoms_.transpose() * weights_; }
  double second_moment() const { return weights_.dot(atoms_.rowwise().squaredNorm()); }

private:
  Mat atoms_;
  Vec weights_;
  uint64_t id_;
};

EmpiricalMeasure make_empirical(const Mat& points,
                                const std::optional<Vec>& weights = std::nullopt);

double w2_distance(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

// both routes exposed so they can be cross-checked
double w2_sorted_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);
double w2_transport(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

Vec integrate(const EmpiricalMeasure& m, const std::function<Vec(ConstVecRef)>& g);
double integrate_scalar(const EmpiricalMeasure& m,
                        const std::function<double(ConstVecRef)>& g);

EmpiricalMeasure load_measure_csv(const std::string& path);
void save_measure_csv(const EmpiricalMeasure& m, const std::string& path);

// m + theta (m' - m) as a particle cloud (atoms concatenated, no collapse)
EmpiricalMeasure mix(const EmpiricalMeasure& m, const EmpiricalMeasure& mp, double theta);

// m with one extra zero-weight atom appended (used to probe functions of the
// measure at off-support points without perturbing it)
EmpiricalMeasure with_zero_weight_atom(const EmpiricalMeasure& m, ConstVecRef x);

}  // namespace mflab
