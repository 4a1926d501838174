#include "dualfed/metrics.h"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "dualfed/errors.h"
#include "dualfed/serialize.h"

namespace dualfed {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

Tensor center_columns(const Tensor& x) {
  Tensor c = x;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) mean += x(i, j);
    mean /= static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= mean;
  }
  return c;
}

double frobenius_sq(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return s;
}

}  // namespace

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: length mismatch");
  if (predicted.empty()) throw Error("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double class_separation(const Tensor& reps, std::span<const std::size_t> labels) {
  const std::size_t n = reps.rows();
  if (labels.size() != n) throw DimensionError("class_separation: label count != rows");
  if (n < 2) throw Error("class_separation: needs at least 2 points");

  Tensor unit(n, reps.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = l2_norm(reps.row(i));
    if (norm == 0.0) throw DegenerateVectorError("class_separation: zero-norm representation");
    for (std::size_t k = 0; k < reps.cols(); ++k) unit(i, k) = reps(i, k) / norm;
  }

  double within = 0.0;
  double total = 0.0;
  std::size_t within_pairs = 0;
  std::size_t total_pairs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = 1.0 - std::clamp(dot(unit.row(i), unit.row(j)), -1.0, 1.0);
      total += d;
      ++total_pairs;
      if (labels[i] == labels[j]) {
        within += d;
        ++within_pairs;
      }
    }
  }
  if (within_pairs == 0) throw Error("class_separation: no class has two samples");
  if (total == 0.0) throw DegenerateVectorError("class_separation: all points coincide in angle");
  return 1.0 - (within / static_cast<double>(within_pairs)) /
                   (total / static_cast<double>(total_pairs));
}

double linear_cka(const Tensor& x, const Tensor& y) {
  if (x.rows() != y.rows()) throw DimensionError("linear_cka: row counts differ");
  if (x.rows() < 2) throw Error("linear_cka: needs at least 2 rows");
  const Tensor xc = center_columns(x);
  const Tensor yc = center_columns(y);
  const double cross = frobenius_sq(matmul_tn(yc, xc));
  const double xx = std::sqrt(frobenius_sq(matmul_tn(xc, xc)));
  const double yy = std::sqrt(frobenius_sq(matmul_tn(yc, yc)));
  if (xx == 0.0 || yy == 0.0) throw DegenerateVectorError("linear_cka: zero-variance input");
  return cross / (xx * yy);
}

Representations representations(const ModelParams& params, const Tensor& x) {
  ForwardTrace t = forward(params, x, Mode::kEval, {.personal = true, .global = false});
  return {std::move(t.z), std::move(t.u)};
}

double mean_pairwise_cka(std::span<const Tensor> reps) {
  if (reps.size() < 2) throw Error("mean_pairwise_cka: needs at least 2 matrices");
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < reps.size(); ++a) {
    for (std::size_t b = a + 1; b < reps.size(); ++b) {
      total += linear_cka(reps[a], reps[b]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

double cross_client_cka(std::span<const ModelParams* const> models, const Tensor& probe,
                        RepStage stage) {
  if (models.size() < 2) throw Error("cross_client_cka: needs at least 2 clients");
  std::vector<Tensor> reps;
  reps.reserve(models.size());
  for (const ModelParams* m : models) {
    Representations r = representations(*m, probe);
    reps.push_back(stage == RepStage::kPre ? std::move(r.z) : std::move(r.u));
  }
  return mean_pairwise_cka(reps);
}

ClientEval evaluate_client(const ModelParams& params, const Dataset& data) {
  ForwardTrace t = forward(params, data.x, Mode::kEval);
  ClientEval e;
  const auto personal = argmax_rows(t.y_p);
  e.acc_personal = accuracy(personal, data.labels);
  if (t.y_s.empty()) {
    e.acc_global = e.acc_personal;
    e.acc_ensemble = e.acc_personal;
  } else {
    e.acc_global = accuracy(argmax_rows(t.y_s), data.labels);
    e.acc_ensemble = accuracy(combine_predictions(t.y_s, t.y_p).labels, data.labels);
  }
  e.separation_z = class_separation(t.z, data.labels);
  e.separation_u = class_separation(t.u, data.labels);
  return e;
}

void MetricsRow::finalize_means() {
  mean_acc_global = mean_acc_personal = mean_acc_ensemble = 0.0;
  mean_separation_z = mean_separation_u = 0.0;
  if (clients.empty()) return;
  for (const ClientEval& c : clients) {
    mean_acc_global += c.acc_global;
    mean_acc_personal += c.acc_personal;
    mean_acc_ensemble += c.acc_ensemble;
    mean_separation_z += c.separation_z;
    mean_separation_u += c.separation_u;
  }
  const double m = static_cast<double>(clients.size());
  mean_acc_global /= m;
  mean_acc_personal /= m;
  mean_acc_ensemble /= m;
  mean_separation_z /= m;
  mean_separation_u /= m;
}

std::string metrics_csv_header(std::size_t num_clients) {
  std::string h =
      "round,mean_acc_global,mean_acc_personal,mean_acc_ensemble,mean_sep_z,mean_sep_u,cka_z,"
      "cka_u,comm_bytes";
  for (std::size_t m = 0; m < num_clients; ++m) {
    const std::string s = std::to_string(m);
    h += ",acc_global_" + s + ",acc_personal_" + s + ",acc_ensemble_" + s + ",sep_z_" + s +
         ",sep_u_" + s;
  }
  return h;
}

std::string metrics_csv_row(const MetricsRow& row) {
  std::string line = std::to_string(row.round) + "," + num(row.mean_acc_global) + "," +
                     num(row.mean_acc_personal) + "," + num(row.mean_acc_ensemble) + "," +
                     num(row.mean_separation_z) + "," + num(row.mean_separation_u) + "," +
                     num(row.cka_z) + "," + num(row.cka_u) + "," + std::to_string(row.comm_bytes);
  for (const ClientEval& c : row.clients) {
    line += "," + num(c.acc_global) + "," + num(c.acc_personal) + "," + num(c.acc_ensemble) +
            "," + num(c.separation_z) + "," + num(c.separation_u);
  }
  return line;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t num_clients) {
  std::string out = metrics_csv_header(num_clients) + "\n";
  for (const MetricsRow& r : rows) out += metrics_csv_row(r) + "\n";
  return out;
}

void dump_representations(const ModelParams& params, const Dataset& data,
                          const std::filesystem::path& path) {
  const Representations r = representations(params, data.x);
  std::ostringstream out;
  out << "N=" << data.size() << ",k=" << r.z.cols() << ",d=" << r.u.cols()
      << ",C=" << data.num_classes << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (double v : r.z.row(i)) out << ',' << num(v);
    for (double v : r.u.row(i)) out << ',' << num(v);
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

RepresentationDump load_representations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_representations: cannot open " + path.string());
  std::string header;
  std::getline(in, header);
  std::size_t n = 0, k = 0, d = 0, c = 0;
  if (std::sscanf(header.c_str(), "N=%zu,k=%zu,d=%zu,C=%zu", &n, &k, &d, &c) != 4) {
    throw ParseError(path.string() + ": bad representation header");
  }
  RepresentationDump dump;
  dump.num_classes = c;
  dump.z = Tensor(n, k);
  dump.u = Tensor(n, d);
  dump.labels.resize(n);
  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(in, line)) throw ParseError(path.string() + ": truncated dump");
    std::istringstream cells(line);
    std::string cell;
    std::vector<std::string> parts;
    while (std::getline(cells, cell, ',')) parts.push_back(cell);
    if (parts.size() != 1 + k + d) {
      throw ParseError(path.string() + ": row " + std::to_string(i + 2) + " has wrong width");
    }
    dump.labels[i] = std::stoul(parts[0]);
    for (std::size_t j = 0; j < k; ++j) {
      std::from_chars(parts[1 + j].data(), parts[1 + j].data() + parts[1 + j].size(), dump.z(i, j));
    }
    for (std::size_t j = 0; j < d; ++j) {
      const std::string& p = parts[1 + k + j];
      std::from_chars(p.data(), p.data() + p.size(), dump.u(i, j));
    }
  }
  return dump;
}

}  // namespace dualfed
