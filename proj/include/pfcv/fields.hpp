/* Copyright 2026 The pfcv Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef PFCV_FIELDS_HPP_
#define PFCV_FIELDS_HPP_

#include <optional>

#include "pfcv/core.hpp"

namespace pfcv {

enum class FieldKind { linear, linear_normal, quadratic, mlp };

inline const char* to_string(FieldKind k) {
  switch (k) {
    case FieldKind::linear: return "linear";
    case FieldKind::linear_normal: return "linear_normal";
    case FieldKind::quadratic: return "quadratic";
    case FieldKind::mlp: return "mlp";
  }
  return "?";
}

// Hidden width of the MLP potential (3 -> 8 -> D').
inline constexpr int kMlpHidden = 8;
// Negative-side slope shared by every leaky ReLU in the library.
inline constexpr double kLeakySlope = 0.1;

// Stacked parameters of D' potential fields, one per output channel.
//
//   linear:        p_k(y)    = a_k . y + d_k
//   linear_normal: p_k(y, n) = a_k . (y + n) + d_k
//   quadratic:     p_k(y)    = a_k . y + b_k . (y * y) + d_k
//   mlp:           p(y)      = W2 lrelu(W1 y + c1) + c2
//
// A and bias are used by the three analytic kinds; B only by quadratic;
// W1/c1/W2/c2 only by mlp. Unused members are empty.
template <typename S>
struct FieldBank {
  FieldKind kind = FieldKind::linear;
  Mat<S> A;     // D' x 3
  Mat<S> B;     // D' x 3
  Vec<S> bias;  // D'
  Mat<S> W1;    // 8 x 3
  Vec<S> c1;    // 8
  Mat<S> W2;    // D' x 8
  Vec<S> c2;    // D'

  static FieldBank zeros(FieldKind kind, Eigen::Index fields) {
    FieldBank b;
    b.kind = kind;
    if (kind == FieldKind::mlp) {
      b.A.resize(0, 3);
      b.B.resize(0, 3);
      b.W1 = Mat<S>::Zero(kMlpHidden, 3);
      b.c1 = Vec<S>::Zero(kMlpHidden);
      b.W2 = Mat<S>::Zero(fields, kMlpHidden);
      b.c2 = Vec<S>::Zero(fields);
    } else {
      b.A = Mat<S>::Zero(fields, 3);
      b.B = kind == FieldKind::quadratic ? Mat<S>::Zero(fields, 3) : Mat<S>(0, 3);
      b.bias = Vec<S>::Zero(fields);
      b.W1.resize(0, 3);
      b.W2.resize(0, kMlpHidden);
    }
    return b;
  }

  Eigen::Index fields() const { return kind == FieldKind::mlp ? W2.rows() : A.rows(); }
  bool uses_normals() const { return kind == FieldKind::linear_normal; }

  void validate() const {
    const auto d = fields();
    if (kind == FieldKind::mlp) {
      if (W1.rows() != kMlpHidden || W1.cols() != 3 || c1.size() != kMlpHidden ||
          W2.cols() != kMlpHidden || c2.size() != d)
        throw InvalidArgument("mlp field bank has inconsistent shapes");
      if (A.size() != 0 || B.size() != 0)
        throw InvalidArgument("mlp field bank must not carry linear coefficients");
      if (!all_finite(W1) || !all_finite(c1) || !all_finite(W2) || !all_finite(c2))
        throw InvalidArgument("field bank has non-finite entries");
      return;
    }
    if (A.cols() != 3 || bias.size() != d)
      throw InvalidArgument("field bank has inconsistent shapes");
    const bool quad = kind == FieldKind::quadratic;
    if (quad != (B.size() != 0) || (quad && (B.rows() != d || B.cols() != 3)))
      throw InvalidArgument("quadratic coefficients present iff kind is quadratic");
    if (W1.size() != 0 || W2.size() != 0)
      throw InvalidArgument("only mlp field banks carry mlp parameters");
    if (!all_finite(A) || !all_finite(B) || !all_finite(bias))
      throw InvalidArgument("field bank has non-finite entries");
  }
};

template <typename S>
using Vec3T = Eigen::Matrix<S, 3, 1>;

namespace detail {
inline void require_kind(FieldKind have, FieldKind want) {
  if (have != want)
    throw InvalidArgument(std::string("field kind mismatch: bank is ") +
                          to_string(have) + ", operation expects " + to_string(want));
}
template <typename S>
S lrelu(S x) { return x > S(0) ? x : S(kLeakySlope) * x; }
template <typename S>
S lrelu_grad(S x) { return x > S(0) ? S(1) : S(kLeakySlope); }
}  // namespace detail

template <typename S>
Vec<S> eval_linear(const FieldBank<S>& bank, const Vec3T<S>& y) {
  detail::require_kind(bank.kind, FieldKind::linear);
  return bank.A * y + bank.bias;
}

template <typename S>
Vec<S> eval_linear_normal(const FieldBank<S>& bank, const Vec3T<S>& y,
                          const std::optional<Vec3T<S>>& n) {
  detail::require_kind(bank.kind, FieldKind::linear_normal);
  if (!n) throw InvalidArgument("linear_normal field needs a normal");
  return bank.A * (y + *n) + bank.bias;
}

template <typename S>
Vec<S> eval_quadratic(const FieldBank<S>& bank, const Vec3T<S>& y) {
  detail::require_kind(bank.kind, FieldKind::quadratic);
  return bank.A * y + bank.B * y.cwiseProduct(y) + bank.bias;
}

template <typename S>
Vec<S> eval_mlp(const FieldBank<S>& bank, const Vec3T<S>& y) {
  detail::require_kind(bank.kind, FieldKind::mlp);
  Vec<S> hidden = bank.W1 * y + bank.c1;
  for (auto& v : hidden) v = detail::lrelu(v);
  return bank.W2 * hidden + bank.c2;
}

template <typename S>
Vec<S> eval_potential(const FieldBank<S>& bank, const Vec3T<S>& y,
                      const std::optional<Vec3T<S>>& n = std::nullopt) {
  switch (bank.kind) {
    case FieldKind::linear: return eval_linear(bank, y);
    case FieldKind::linear_normal: return eval_linear_normal(bank, y, n);
    case FieldKind::quadratic: return eval_quadratic(bank, y);
    case FieldKind::mlp: return eval_mlp(bank, y);
  }
  throw InvalidArgument("unknown field kind");
}

// Gaussian correlation with sigma = 1/sqrt(2), mu = 0 and the normalizing
// coefficient dropped: h(p) = exp(-p^2).
template <typename S>
S correlation(S p) { return std::exp(-p * p); }

template <typename S>
S correlation_grad(S p) { return S(-2) * p * std::exp(-p * p); }

// Potential values for K local points at once. `hidden` receives the MLP
// pre-activations (K x 8) when the bank is an mlp bank.
template <typename S>
Mat<S> potentials_batched(const FieldBank<S>& bank, const Mat<S>& Y,
                          const Mat<S>* normals = nullptr, Mat<S>* hidden = nullptr) {
  if (Y.cols() != 3) throw InvalidArgument("local coordinates must be K x 3");
  const Eigen::Index k = Y.rows();
  switch (bank.kind) {
    case FieldKind::linear:
      return (Y * bank.A.transpose()).rowwise() + bank.bias.transpose();
    case FieldKind::linear_normal: {
      if (normals == nullptr) throw InvalidArgument("linear_normal field needs normals");
      if (normals->rows() != k || normals->cols() != 3)
        throw InvalidArgument("normals must match local coordinates");
      return ((Y + *normals) * bank.A.transpose()).rowwise() + bank.bias.transpose();
    }
    case FieldKind::quadratic:
      return (Y * bank.A.transpose() + Y.cwiseProduct(Y) * bank.B.transpose()).rowwise() +
             bank.bias.transpose();
    case FieldKind::mlp: {
      Mat<S> z = (Y * bank.W1.transpose()).rowwise() + bank.c1.transpose();
      Mat<S> act = z.unaryExpr([](S v) { return detail::lrelu(v); });
      if (hidden) *hidden = std::move(z);
      return (act * bank.W2.transpose()).rowwise() + bank.c2.transpose();
    }
  }
  throw InvalidArgument("unknown field kind");
}

// H[i, k] = h(p_k(y_i)), the correlation matrix of K points against D' fields.
template <typename S>
Mat<S> eval_batched(const FieldBank<S>& bank, const Mat<S>& Y,
                    const Mat<S>* normals = nullptr) {
  const Mat<S> p = potentials_batched(bank, Y, normals);
  return (-p.array().square()).exp().matrix();
}

// Index of the most correlated field per point; ties go to the lowest index.
template <typename S>
std::vector<Eigen::Index> argmax_field(const FieldBank<S>& bank, const Mat<S>& Y,
                                       const Mat<S>* normals = nullptr) {
  const Mat<S> h = eval_batched(bank, Y, normals);
  std::vector<Eigen::Index> out(static_cast<std::size_t>(h.rows()), 0);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < h.cols(); ++k)
      if (h(i, k) > h(i, best)) best = k;
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// Accumulates dLoss/d(bank) given dLoss/dP for the K x D' potential matrix.
template <typename S>
void potentials_backward(const FieldBank<S>& bank, const Mat<S>& Y, const Mat<S>* normals,
                         const Mat<S>& hidden, const Mat<S>& dP, FieldBank<S>& grad) {
  switch (bank.kind) {
    case FieldKind::linear:
      grad.A.noalias() += dP.transpose() * Y;
      grad.bias += dP.colwise().sum().transpose();
      return;
    case FieldKind::linear_normal:
      grad.A.noalias() += dP.transpose() * (Y + *normals);
      grad.bias += dP.colwise().sum().transpose();
      return;
    case FieldKind::quadratic:
      grad.A.noalias() += dP.transpose() * Y;
      grad.B.noalias() += dP.transpose() * Y.cwiseProduct(Y);
      grad.bias += dP.colwise().sum().transpose();
      return;
    case FieldKind::mlp: {
      const Mat<S> act = hidden.unaryExpr([](S v) { return detail::lrelu(v); });
      grad.W2.noalias() += dP.transpose() * act;
      grad.c2 += dP.colwise().sum().transpose();
      Mat<S> dz = (dP * bank.W2).cwiseProduct(
          hidden.unaryExpr([](S v) { return detail::lrelu_grad(v); }));
      grad.W1.noalias() += dz.transpose() * Y;
      grad.c1 += dz.colwise().sum().transpose();
      return;
    }
  }
}

}  // namespace pfcv

#endif  // PFCV_FIELDS_HPP_
