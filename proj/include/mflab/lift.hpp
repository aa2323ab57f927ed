#pragma once

#include <functional>

#include "mflab/measure.hpp"
#include "mflab/rng.hpp"
#include "mflab/types.hpp"

namespace mflab {

// Random vector field sampled on outcomes x atoms. Deterministic fields use
// outcomes()==1 and broadcast. comps() is the value dimension: d for vector
// fields, d*d (row-major) for matrix-valued fields.
class LiftedField {
public:
  LiftedField() = default;
  LiftedField(int outcomes, int atoms, int comps, uint64_t measure_tag)
      : M_(outcomes), N_(atoms), d_(comps), tag_(measure_tag),
        v_(static_cast<size_t>(outcomes) * atoms * comps, 0.0) {}

  int outcomes() const { return M_; }
  int atoms() const { return N_; }
  int comps() const { return d_; }
  uint64_t measure_tag() const { return tag_; }

  double& operator()(int w, int i, int c) {
    return v_[(static_cast<size_t>(w) * N_ + i) * d_ + c];
  }
  double operator()(int w, int i, int c) const {
    return v_[(static_cast<size_t>(w) * N_ + i) * d_ + c];
  }

  Eigen::Map<const Vec> at(int w, int i) const {
    return Eigen::Map<const Vec>(v_.data() + (static_cast<size_t>(w) * N_ + i) * d_, d_);
  }
  Eigen::Map<Vec> at(int w, int i) {
    return Eigen::Map<Vec>(v_.data() + (static_cast<size_t>(w) * N_ + i) * d_, d_);
  }
  // matrix view for fields storing d x d values row-major
  Mat matrix_at(int w, int i, int d) const {
    Mat out(d, d);
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) out(a, b) = (*this)(w, i, a * d + b);
    return out;
  }
  void set_matrix_at(int w, int i, int d, const Mat& mat) {
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) (*this)(w, i, a * d + b) = mat(a, b);
  }

  // outcome index with M=1 broadcast
  int wrap(int w) const { return M_ == 1 ? 0 : w; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  size_t size() const { return v_.size(); }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

private:
  int M_ = 0, N_ = 0, d_ = 0;
  uint64_t tag_ = 0;
  std::vector<double> v_;
};

// deterministic field from a pointwise map applied to the atoms
LiftedField field_from_function(const EmpiricalMeasure& m,
                                const std::function<Vec(ConstVecRef)>& f);
LiftedField identity_field(const EmpiricalMeasure& m);
LiftedField constant_field(const EmpiricalMeasure& m, ConstVecRef a);

// i.i.d. N(0, I_d) per (outcome, atom), drawn from the field stream (disjoint
// from the Brownian stream); `slot` separates independent fields
LiftedField random_normal_field(const EmpiricalMeasure& m, int outcomes,
                                const CounterRng& rng, uint64_t slot);

// <X,Y> = (1/M) sum_w sum_i w_i X(w,i).Y(w,i); requires matching measure tags
double inner(const LiftedField& X, const LiftedField& Y, const EmpiricalMeasure& m);
double field_norm(const LiftedField& X, const EmpiricalMeasure& m);

LiftedField axpy(double a, const LiftedField& X, const LiftedField& Y);  // a*X + Y

// law of X over outcomes x atoms: M*N atoms with weights w_i/M
EmpiricalMeasure tensor(const LiftedField& X, const EmpiricalMeasure& m);

// pointwise composition (X o Y)(w,x) = X(w, Y(w,x)) with matched outcomes;
// the outer field is supplied as a function since it must be evaluable at
// arbitrary points
using FieldFunction = std::function<Vec(int /*outcome*/, ConstVecRef /*point*/)>;
LiftedField compose(const FieldFunction& X, const LiftedField& Y);

// M x d i.i.d. standard normal draws, independent of the Brownian stream
struct GaussianProbe {
  Mat samples;  // M x d
  uint64_t seed;

  static GaussianProbe draw(int outcomes, int d, const CounterRng& rng, uint64_t slot);
  // loose sanity bounds at 3/sqrt(M) on mean and covariance
  bool plausible() const;
};

// field N(w,x) = probe row w, constant across atoms
LiftedField probe_field(const GaussianProbe& probe, const EmpiricalMeasure& m);

void save_field_csv(const LiftedField& X, const std::string& path);

}  // namespace mflab
