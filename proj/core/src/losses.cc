#include "dualfed/losses.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dualfed/errors.h"

namespace dualfed {

void LossConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("loss.tau", "must be > 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss.lambda", "must be >= 0");
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes) {
  Tensor y(labels.size(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw LabelError("one_hot: label " + std::to_string(labels[i]) + " out of range [0, " +
                       std::to_string(num_classes) + ")");
    }
    y(i, labels[i]) = 1.0;
  }
  return y;
}

std::vector<std::size_t> labels_from_one_hot(const Tensor& y) {
  std::vector<std::size_t> labels(y.rows());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    std::size_t hot = y.cols();
    for (std::size_t c = 0; c < y.cols(); ++c) {
      const double v = y(i, c);
      if (v == 1.0 && hot == y.cols()) {
        hot = c;
      } else if (v != 0.0) {
        throw LabelError("row " + std::to_string(i) + " is not one-hot");
      }
    }
    if (hot == y.cols()) throw LabelError("row " + std::to_string(i) + " is not one-hot");
    labels[i] = hot;
  }
  return labels;
}

LossValue cross_entropy(const Tensor& pred, const Tensor& y) {
  if (!pred.same_shape(y) || pred.rows() == 0) {
    throw DimensionError("cross_entropy: prediction and label shapes differ or batch is empty");
  }
  const std::vector<std::size_t> labels = labels_from_one_hot(y);
  const double batch = static_cast<double>(pred.rows());
  LossValue out;
  out.grad = Tensor(pred.rows(), pred.cols());
  for (std::size_t i = 0; i < pred.rows(); ++i) {
    const double p = std::clamp(pred(i, labels[i]), kProbabilityFloor, 1.0);
    out.value -= std::log(p);
    for (std::size_t c = 0; c < pred.cols(); ++c) out.grad(i, c) = (pred(i, c) - y(i, c)) / batch;
  }
  out.value /= batch;
  check_finite(out.grad, "cross_entropy");
  return out;
}

LossValue sup_con_loss(const Tensor& u, std::span<const std::size_t> labels, double tau) {
  const std::size_t batch = u.rows();
  if (labels.size() != batch) throw DimensionError("sup_con_loss: label count != batch size");
  if (batch < 2) throw BatchTooSmallError("sup_con_loss: needs at least 2 rows");
  if (!(tau > 0.0)) throw Error("sup_con_loss: tau must be > 0");

  const std::size_t dim = u.cols();
  Tensor n(batch, dim);
  std::vector<double> norms(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    norms[i] = l2_norm(u.row(i));
    if (norms[i] == 0.0) {
      throw DegenerateVectorError("sup_con_loss: representation " + std::to_string(i) +
                                  " has zero norm");
    }
    for (std::size_t k = 0; k < dim; ++k) n(i, k) = u(i, k) / norms[i];
  }

  std::vector<std::size_t> positives(batch, 0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < batch; ++j)
      if (j != i && labels[j] == labels[i]) ++positives[i];
    if (positives[i] > 0) ++anchors;
  }

  LossValue out;
  out.grad = Tensor(batch, dim);
  if (anchors == 0) return out;

  Tensor s = matmul_nt(n, n);
  scale_inplace(s, 1.0 / tau);

  // g(i, a) = dL/ds_ia where s_ia = cos(u_i, u_a) / tau.
  Tensor g(batch, batch);
  const double inv_anchors = 1.0 / static_cast<double>(anchors);
  std::vector<double> weights(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    if (positives[i] == 0) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < batch; ++a)
      if (a != i) mx = std::max(mx, s(i, a));
    double denom = 0.0;
    for (std::size_t a = 0; a < batch; ++a) {
      if (a == i) continue;
      weights[a] = std::exp(s(i, a) - mx);
      denom += weights[a];
    }
    const double log_denom = mx + std::log(denom);
    const double inv_pos = 1.0 / static_cast<double>(positives[i]);
    double term = 0.0;
    for (std::size_t a = 0; a < batch; ++a) {
      if (a == i) continue;
      const bool positive = labels[a] == labels[i];
      if (positive) term += log_denom - s(i, a);
      g(i, a) = (weights[a] / denom - (positive ? inv_pos : 0.0)) * inv_anchors;
    }
    out.value += term * inv_pos;
  }
  out.value *= inv_anchors;

  // dL/dn_i = sum_a (g_ia + g_ai) n_a / tau
  Tensor sym(batch, batch);
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t a = 0; a < batch; ++a) sym(i, a) = (g(i, a) + g(a, i)) / tau;
  const Tensor dn = matmul(sym, n);

  for (std::size_t i = 0; i < batch; ++i) {
    const double radial = dot(n.row(i), dn.row(i));
    for (std::size_t k = 0; k < dim; ++k) {
      out.grad(i, k) = (dn(i, k) - n(i, k) * radial) / norms[i];
    }
  }
  check_finite(out.grad, "sup_con_loss");
  if (!std::isfinite(out.value)) throw NumericError("sup_con_loss: non-finite value");
  return out;
}

Stage1Loss stage1_loss(const ForwardTrace& trace, const Tensor& y,
                       std::span<const std::size_t> labels, const LossConfig& config) {
  config.validate();
  if (trace.y_p.empty()) throw Error("stage1_loss: trace lacks the personal head output");
  LossValue ce = cross_entropy(trace.y_p, y);
  Stage1Loss out;
  out.cross_entropy = ce.value;
  out.d_personal_logits = std::move(ce.grad);
  out.total = ce.value;
  if (config.lambda != 0.0) {
    LossValue con = sup_con_loss(trace.u, labels, config.tau);
    out.contrastive = con.value;
    out.total += config.lambda * con.value;
    scale_inplace(con.grad, config.lambda);
    out.d_u = std::move(con.grad);
  }
  return out;
}

}  // namespace dualfed
