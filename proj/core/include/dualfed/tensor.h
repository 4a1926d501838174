#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace dualfed {

enum class Mode { kTrain, kEval };

// Dense row-major float64 matrix. Vectors are 1 x n.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);

  // Tensor::from_rows({{1, 2}, {3, 4}})
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Tensor& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  void fill(double v);

  // Bitwise equality of shape and payload.
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Throws NumericError naming `op` if any entry is NaN or Inf.
void check_finite(const Tensor& t, std::string_view op);

Tensor matmul(const Tensor& a, const Tensor& b);
// a^T b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
// a b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
void add_inplace(Tensor& dst, const Tensor& src);
void scale_inplace(Tensor& dst, double s);
// Rows [begin, end) copied into a new tensor.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows);

// ---- layers -----------------------------------------------------------------

// y = x W + b with b broadcast over rows. x: B x in, W: in x out, b: 1 x out.
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b);
// Returns dL/dx. dW and db are overwritten when non-null.
Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dw,
                       Tensor* db);

Tensor relu_forward(const Tensor& x);
// Subgradient at x == 0 is 0.
Tensor relu_backward(const Tensor& x, const Tensor& dy);

struct BatchNormConfig {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

struct BatchNormState {
  Tensor gamma;         // 1 x F, trainable
  Tensor beta;          // 1 x F, trainable
  Tensor running_mean;  // 1 x F, never receives gradient
  Tensor running_var;   // 1 x F, never receives gradient
  BatchNormConfig config;

  static BatchNormState identity(std::size_t features, BatchNormConfig config = {});
};

// Everything the backward pass needs from a forward call.
struct BatchNormCache {
  Mode mode = Mode::kEval;
  Tensor x_hat;                 // normalized input, B x F
  std::vector<double> inv_std;  // per feature
  // Batch statistics (train mode only); biased variance.
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
};

// Pure form: never touches running statistics. In train mode the batch
// statistics are returned through the cache so the caller decides whether and
// where to fold them into the running averages.
Tensor batchnorm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const Tensor& running_mean, const Tensor& running_var, Mode mode,
                         const BatchNormConfig& config, BatchNormCache& cache);

// Stateful form: train mode folds the batch statistics into s.running_*.
Tensor batchnorm_forward(const Tensor& x, BatchNormState& s, Mode mode,
                         BatchNormCache* cache = nullptr);

// running <- (1 - momentum) * running + momentum * batch
void batchnorm_update_running(const BatchNormCache& cache, double momentum, Tensor& running_mean,
                              Tensor& running_var);

Tensor batchnorm_backward(const BatchNormCache& cache, const Tensor& gamma, const Tensor& dy,
                          Tensor* dgamma, Tensor* dbeta);

// Row-wise softmax with max subtraction.
Tensor softmax_forward(const Tensor& x);
// Vector-Jacobian product given the forward output y.
Tensor softmax_backward(const Tensor& y, const Tensor& dy);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);
// Throws DegenerateVectorError if either argument has zero norm.
double cosine_similarity(std::span<const double> u, std::span<const double> v);
double cosine_similarity(const Tensor& u, const Tensor& v);

// ---- gradient oracle ----------------------------------------------------------

using ScalarFn = std::function<double(const Tensor&)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h = 1e-5);

// max_i |a_i - b_i| / max(max|a|, max|b|, floor). Norm-wise so entries near
// zero do not dominate through cancellation noise.
double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-8);

}  // namespace dualfed
