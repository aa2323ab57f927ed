#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mflab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using ConstVecRef = Eigen::Ref<const Eigen::VectorXd>;
using ConstMatRef = Eigen::Ref<const Eigen::MatrixXd>;

// Symmetric rank-3 array T[a][b][c], stored as one d x d matrix per trailing
// index. contract(v) returns sum_c v[c] * slice(c).
class Tensor3 {
public:
  Tensor3() = default;
  explicit Tensor3(int d) : d_(d), slices_(static_cast<size_t>(d), Mat::Zero(d, d)) {}

  int dim() const { return d_; }
  Mat& slice(int c) { return slices_[static_cast<size_t>(c)]; }
  const Mat& slice(int c) const { return slices_[static_cast<size_t>(c)]; }

  Mat contract(ConstVecRef v) const {
    Mat out = Mat::Zero(d_, d_);
    for (int c = 0; c < d_; ++c) out += v[c] * slices_[static_cast<size_t>(c)];
    return out;
  }

  Tensor3& operator+=(const Tensor3& o) {
    for (int c = 0; c < d_; ++c) slices_[static_cast<size_t>(c)] += o.slice(c);
    return *this;
  }
  Tensor3& operator*=(double a) {
    for (auto& s : slices_) s *= a;
    return *this;
  }

private:
  int d_ = 0;
  std::vector<Mat> slices_;
};

inline bool is_finite(double x) { return std::isfinite(x); }

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace mflab
