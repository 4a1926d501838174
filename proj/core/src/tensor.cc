#include "dualfed/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "dualfed/errors.h"

namespace dualfed {

namespace {

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << t.rows() << "x" << t.cols();
  return os.str();
}

[[noreturn]] void shape_mismatch(std::string_view op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                       shape_str(b));
}

void require_row_vector(std::string_view op, const Tensor& v, std::size_t cols) {
  if (v.rows() != 1 || v.cols() != cols) {
    throw DimensionError(std::string(op) + ": expected 1x" + std::to_string(cols) + ", got " +
                         shape_str(v));
  }
}

}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Tensor: payload of " + std::to_string(data_.size()) +
                         " values does not fit " + std::to_string(rows) + "x" +
                         std::to_string(cols));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Tensor::from_rows: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(values));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void check_finite(const Tensor& t, std::string_view op) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_mismatch("matmul", a, b);
  Tensor out(a.rows(), b.cols());
  const std::size_t n = a.cols();
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out_row = &out(i, 0);
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* b_row = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) shape_mismatch("matmul_tn", a, b);
  Tensor out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* a_row = a.row(r).data();
    const double* b_row = b.row(r).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a_row[i];
      if (ari == 0.0) continue;
      double* out_row = &out(i, 0);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += ari * b_row[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) shape_mismatch("matmul_nt", a, b);
  Tensor out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ai = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(ai, b.row(j));
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) shape_mismatch("add", dst, src);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void scale_inplace(Tensor& dst, double s) {
  for (double& v : dst.values()) v *= s;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (begin > end || end > t.rows()) throw DimensionError("slice_rows: range out of bounds");
  std::vector<double> values(t.values().begin() + static_cast<std::ptrdiff_t>(begin * t.cols()),
                             t.values().begin() + static_cast<std::ptrdiff_t>(end * t.cols()));
  return Tensor(end - begin, t.cols(), std::move(values));
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.rows()) throw DimensionError("gather_rows: index out of bounds");
    std::copy_n(t.row(rows[i]).data(), t.cols(), out.row(i).data());
  }
  return out;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows()) shape_mismatch("linear_forward", x, w);
  require_row_vector("linear_forward bias", b, w.cols());
  Tensor y = matmul(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto row = y.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  }
  check_finite(y, "linear_forward");
  return y;
}

Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dw,
                       Tensor* db) {
  if (dy.rows() != x.rows() || dy.cols() != w.cols()) shape_mismatch("linear_backward", x, dy);
  if (dw != nullptr) {
    *dw = matmul_tn(x, dy);
    check_finite(*dw, "linear_backward dW");
  }
  if (db != nullptr) {
    *db = Tensor(1, dy.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) (*db)[j] += dy(i, j);
    check_finite(*db, "linear_backward db");
  }
  Tensor dx = matmul_nt(dy, w);
  check_finite(dx, "linear_backward dx");
  return dx;
}

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  check_finite(y, "relu_forward");
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  if (!x.same_shape(dy)) shape_mismatch("relu_backward", x, dy);
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(x[i] > 0.0)) dx[i] = 0.0;
  check_finite(dx, "relu_backward");
  return dx;
}

BatchNormState BatchNormState::identity(std::size_t features, BatchNormConfig config) {
  return BatchNormState{Tensor(1, features, 1.0), Tensor(1, features, 0.0),
                        Tensor(1, features, 0.0), Tensor(1, features, 1.0), config};
}

Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const Tensor& running_mean, const Tensor& running_var, Mode mode,
                         const BatchNormConfig& config, BatchNormCache& cache) {
  const std::size_t batch = x.rows();
  const std::size_t features = x.cols();
  require_row_vector("batchnorm gamma", gamma, features);
  require_row_vector("batchnorm beta", beta, features);
  require_row_vector("batchnorm running_mean", running_mean, features);
  require_row_vector("batchnorm running_var", running_var, features);
  if (!(config.epsilon > 0.0)) throw Error("batchnorm: epsilon must be positive");

  cache.mode = mode;
  cache.inv_std.assign(features, 0.0);
  cache.batch_mean.clear();
  cache.batch_var.clear();

  std::vector<double> mean(features);
  std::vector<double> var(features);
  if (mode == Mode::kTrain) {
    if (batch < 2) {
      throw BatchTooSmallError("batchnorm_forward: train mode needs at least 2 rows, got " +
                               std::to_string(batch));
    }
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t f = 0; f < features; ++f) mean[f] += x(i, f);
    for (double& m : mean) m /= static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t f = 0; f < features; ++f) {
        const double d = x(i, f) - mean[f];
        var[f] += d * d;
      }
    }
    for (double& v : var) v /= static_cast<double>(batch);
    cache.batch_mean = mean;
    cache.batch_var = var;
  } else {
    for (std::size_t f = 0; f < features; ++f) {
      mean[f] = running_mean[f];
      var[f] = running_var[f];
    }
  }

  for (std::size_t f = 0; f < features; ++f) {
    if (var[f] < 0.0) throw NumericError("batchnorm_forward: negative variance");
    cache.inv_std[f] = 1.0 / std::sqrt(var[f] + config.epsilon);
  }

  cache.x_hat = Tensor(batch, features);
  Tensor y(batch, features);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t f = 0; f < features; ++f) {
      const double xh = (x(i, f) - mean[f]) * cache.inv_std[f];
      cache.x_hat(i, f) = xh;
      y(i, f) = gamma[f] * xh + beta[f];
    }
  }
  check_finite(y, "batchnorm_forward");
  return y;
}

Tensor batchnorm_forward(const Tensor& x, BatchNormState& s, Mode mode, BatchNormCache* cache) {
  BatchNormCache local;
  BatchNormCache& c = cache != nullptr ? *cache : local;
  Tensor y = batchnorm_forward(x, s.gamma, s.beta, s.running_mean, s.running_var, mode, s.config,
                               c);
  if (mode == Mode::kTrain) {
    batchnorm_update_running(c, s.config.momentum, s.running_mean, s.running_var);
  }
  return y;
}

void batchnorm_update_running(const BatchNormCache& cache, double momentum, Tensor& running_mean,
                              Tensor& running_var) {
  if (cache.mode != Mode::kTrain) return;
  if (!(momentum > 0.0 && momentum < 1.0)) throw Error("batchnorm: momentum must be in (0,1)");
  const std::size_t features = cache.batch_mean.size();
  require_row_vector("batchnorm running_mean", running_mean, features);
  require_row_vector("batchnorm running_var", running_var, features);
  for (std::size_t f = 0; f < features; ++f) {
    running_mean[f] = (1.0 - momentum) * running_mean[f] + momentum * cache.batch_mean[f];
    running_var[f] = (1.0 - momentum) * running_var[f] + momentum * cache.batch_var[f];
  }
}

Tensor batchnorm_backward(const BatchNormCache& cache, const Tensor& gamma, const Tensor& dy,
                          Tensor* dgamma, Tensor* dbeta) {
  const Tensor& x_hat = cache.x_hat;
  if (!x_hat.same_shape(dy)) shape_mismatch("batchnorm_backward", x_hat, dy);
  const std::size_t batch = dy.rows();
  const std::size_t features = dy.cols();

  std::vector<double> sum_dy(features, 0.0);
  std::vector<double> sum_dy_xhat(features, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t f = 0; f < features; ++f) {
      sum_dy[f] += dy(i, f);
      sum_dy_xhat[f] += dy(i, f) * x_hat(i, f);
    }
  }
  if (dgamma != nullptr) *dgamma = Tensor(1, features, sum_dy_xhat);
  if (dbeta != nullptr) *dbeta = Tensor(1, features, sum_dy);

  Tensor dx(batch, features);
  if (cache.mode == Mode::kTrain) {
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t f = 0; f < features; ++f) {
        dx(i, f) = gamma[f] * cache.inv_std[f] * inv_b *
                   (static_cast<double>(batch) * dy(i, f) - sum_dy[f] -
                    x_hat(i, f) * sum_dy_xhat[f]);
      }
    }
  } else {
    // Running statistics are constants in eval mode.
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t f = 0; f < features; ++f) dx(i, f) = dy(i, f) * gamma[f] * cache.inv_std[f];
  }
  check_finite(dx, "batchnorm_backward");
  return dx;
}

Tensor softmax_forward(const Tensor& x) {
  Tensor y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    auto out = y.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      out[j] = std::exp(in[j] - mx);
      total += out[j];
    }
    for (double& v : out) v /= total;
  }
  check_finite(y, "softmax_forward");
  return y;
}

Tensor softmax_backward(const Tensor& y, const Tensor& dy) {
  if (!y.same_shape(dy)) shape_mismatch("softmax_backward", y, dy);
  Tensor dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double inner = dot(y.row(i), dy.row(i));
    for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (dy(i, j) - inner);
  }
  check_finite(dx, "softmax_backward");
  return dx;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  const double nu = l2_norm(u);
  const double nv = l2_norm(v);
  if (nu == 0.0 || nv == 0.0) throw DegenerateVectorError("cosine_similarity: zero-norm vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

double cosine_similarity(const Tensor& u, const Tensor& v) {
  if (u.rows() != 1 || !u.same_shape(v)) shape_mismatch("cosine_similarity", u, v);
  return cosine_similarity(u.values(), v.values());
}

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  Tensor grad(x.rows(), x.cols());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  if (!analytic.same_shape(numeric)) shape_mismatch("max_relative_error", analytic, numeric);
  double max_diff = 0.0;
  double scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return max_diff / scale;
}

}  // namespace dualfed
