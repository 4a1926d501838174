#include "dualfed/data.h"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "dualfed/errors.h"
#include "dualfed/serialize.h"

namespace dualfed {

LabeledBatch Dataset::batch(std::span<const std::size_t> rows) const {
  LabeledBatch b;
  b.x = gather_rows(x, rows);
  b.indices.assign(rows.begin(), rows.end());
  b.labels.reserve(rows.size());
  for (std::size_t r : rows) b.labels.push_back(labels.at(r));
  b.y = one_hot(b.labels, num_classes);
  return b;
}

LabeledBatch Dataset::all() const {
  std::vector<std::size_t> rows(size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return batch(rows);
}

void Dataset::validate() const {
  if (x.rows() != labels.size()) throw DataError("dataset: feature rows != label count");
  if (num_classes < 2) throw DataError("dataset: need at least 2 classes");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw LabelError("dataset: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " out of range [0, " + std::to_string(num_classes) +
                       ")");
    }
  }
  check_finite(x, "dataset");
}

void SyntheticSpec::validate() const {
  if (num_domains < 1) throw ConfigError("data.num_domains", "must be >= 1");
  if (num_classes < 2) throw ConfigError("data.num_classes", "must be >= 2");
  if (input_dim < 1) throw ConfigError("data.input_dim", "must be >= 1");
  if (train_per_client < num_classes)
    throw ConfigError("data.train_per_client", "must be >= data.num_classes");
  if (test_per_client < 1) throw ConfigError("data.test_per_client", "must be >= 1");
  if (!(prototype_sigma > 0.0)) throw ConfigError("data.prototype_sigma", "must be > 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma", "must be >= 0");
  if (!(domain_shift >= 0.0)) throw ConfigError("data.domain_shift", "must be >= 0");
  if (!(bias_sigma >= 0.0)) throw ConfigError("data.bias_sigma", "must be >= 0");
  if (!difficulty.empty() && difficulty.size() != num_domains)
    throw ConfigError("data.difficulty", "needs one entry per domain");
  for (double d : difficulty)
    if (!(d >= 0.0)) throw ConfigError("data.difficulty", "entries must be >= 0");
}

namespace {

// Q from the QR factorization of I + shift * G / sqrt(n), signs fixed so that
// R has a positive diagonal. shift = 0 yields the identity exactly.
Tensor orthogonal_transform(std::size_t n, double shift, Rng& rng) {
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                                static_cast<Eigen::Index>(n));
  const double scale = shift / std::sqrt(static_cast<double>(n));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) += scale * rng.normal();
  Tensor out(n, n);
  if (shift == 0.0) {
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

Dataset sample_domain(const DomainSpec& domain, const Tensor& prototypes, std::size_t count,
                      Rng& rng) {
  const std::size_t n = prototypes.cols();
  const std::size_t classes = prototypes.rows();
  const double sigma = domain.noise_sigma * domain.difficulty;
  Dataset d;
  d.num_classes = classes;
  d.x = Tensor(count, n);
  d.labels.resize(count);
  std::vector<double> latent(n);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = i % classes;
    d.labels[i] = c;
    for (std::size_t k = 0; k < n; ++k) latent[k] = prototypes(c, k) + sigma * rng.normal();
    for (std::size_t r = 0; r < n; ++r) {
      double v = domain.bias[r];
      for (std::size_t k = 0; k < n; ++k) v += domain.transform(r, k) * latent[k];
      d.x(i, r) = v;
    }
  }
  return d;
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? comma : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed, /*stream_id=*/0xda7a);
  const std::size_t n = spec.input_dim;

  SyntheticData out;
  out.prototypes = Tensor(spec.num_classes, n);
  for (double& v : out.prototypes.values()) v = spec.prototype_sigma * rng.normal();

  for (std::size_t m = 0; m < spec.num_domains; ++m) {
    DomainSpec d;
    d.domain_id = m;
    d.transform = orthogonal_transform(n, spec.domain_shift, rng);
    d.bias = Tensor(1, n);
    for (double& v : d.bias.values()) v = spec.bias_sigma * rng.normal();
    d.noise_sigma = spec.noise_sigma;
    d.difficulty = spec.difficulty.empty() ? 1.0 : spec.difficulty[m];
    out.domains.push_back(std::move(d));
  }

  std::vector<Dataset> probes;
  for (const DomainSpec& d : out.domains) {
    // Each domain gets its own stream so changing one count does not reshuffle
    // every other domain's samples.
    Rng domain_rng(spec.seed, 0x5a3e0000ULL + d.domain_id);
    ClientData c;
    c.train = sample_domain(d, out.prototypes, spec.train_per_client, domain_rng);
    c.test = sample_domain(d, out.prototypes, spec.test_per_client, domain_rng);
    if (spec.probe_per_domain > 0) {
      probes.push_back(sample_domain(d, out.prototypes, spec.probe_per_domain, domain_rng));
    }
    out.clients.push_back(std::move(c));
  }
  if (!probes.empty()) out.probe = concat(probes);
  out.probe.num_classes = spec.num_classes;
  return out;
}

Dataset concat(std::span<const Dataset> parts) {
  Dataset out;
  if (parts.empty()) return out;
  const std::size_t n = parts.front().input_dim();
  std::size_t rows = 0;
  for (const Dataset& p : parts) {
    if (p.input_dim() != n) throw DimensionError("concat: feature widths differ");
    rows += p.size();
    out.num_classes = std::max(out.num_classes, p.num_classes);
  }
  std::vector<double> values;
  values.reserve(rows * n);
  for (const Dataset& p : parts) {
    values.insert(values.end(), p.x.values().begin(), p.x.values().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.x = Tensor(rows, n, std::move(values));
  return out;
}

Dataset load_flatfile(const std::filesystem::path& path, std::optional<std::size_t> num_classes) {
  std::ifstream in(path);
  if (!in) throw IoError("load_flatfile: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  const auto header = split_commas(trim(line));
  if (header.size() < 2 || trim(header[0]) != "label") {
    throw ParseError(path.string() + ": header must be 'label,f0,...,f{n-1}'");
  }
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (trim(header[c]) != "f" + std::to_string(c - 1)) {
      throw ParseError(path.string() + ": header column " + std::to_string(c + 1) +
                       " should be 'f" + std::to_string(c - 1) + "'");
    }
  }
  const std::size_t n = header.size() - 1;

  Dataset d;
  std::vector<double> values;
  std::size_t row = 1;
  std::size_t max_label = 0;
  while (std::getline(in, line)) {
    ++row;
    const std::string_view t = trim(line);
    if (t.empty()) continue;
    const auto cells = split_commas(t);
    if (cells.size() != n + 1) {
      throw ParseError(path.string() + ": row " + std::to_string(row) + " has " +
                       std::to_string(cells.size()) + " columns, expected " +
                       std::to_string(n + 1));
    }
    const std::string_view lc = trim(cells[0]);
    std::size_t label = 0;
    const auto lr = std::from_chars(lc.data(), lc.data() + lc.size(), label);
    if (lr.ec != std::errc() || lr.ptr != lc.data() + lc.size()) {
      throw ParseError(path.string() + ": row " + std::to_string(row) +
                       ", column 1 (label): not a non-negative integer");
    }
    if (num_classes && label >= *num_classes) {
      throw LabelError(path.string() + ": row " + std::to_string(row) + ": label " +
                       std::to_string(label) + " out of range [0, " +
                       std::to_string(*num_classes) + ")");
    }
    max_label = std::max(max_label, label);
    d.labels.push_back(label);
    for (std::size_t c = 1; c <= n; ++c) {
      const std::string_view cell = trim(cells[c]);
      double v = 0.0;
      const auto r = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (r.ec != std::errc() || r.ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw ParseError(path.string() + ": row " + std::to_string(row) + ", column " +
                         std::to_string(c + 1) + " (f" + std::to_string(c - 1) +
                         "): not a finite number: '" + std::string(cell) + "'");
      }
      values.push_back(v);
    }
  }
  d.x = Tensor(d.labels.size(), n, std::move(values));
  d.num_classes = num_classes ? *num_classes : max_label + 1;
  if (d.num_classes < 2) d.num_classes = 2;
  return d;
}

void write_flatfile(const std::filesystem::path& path, const Dataset& dataset) {
  std::ostringstream out;
  out << "label";
  for (std::size_t k = 0; k < dataset.input_dim(); ++k) out << ",f" << k;
  out << '\n';
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    out << dataset.labels[i];
    for (double v : dataset.x.row(i)) out << ',' << format_double(v);
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

BatchIterator::BatchIterator(const Dataset& dataset, std::size_t batch_size, Rng& rng)
    : dataset_(dataset) {
  if (batch_size < 2) throw Error("BatchIterator: batch_size must be >= 2");
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (end - start < 2) break;
    batches_.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                          order.begin() + static_cast<std::ptrdiff_t>(end));
  }
}

std::optional<LabeledBatch> BatchIterator::next() {
  if (cursor_ >= batches_.size()) return std::nullopt;
  return dataset_.batch(batches_[cursor_++]);
}

}  // namespace dualfed
