#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dualfed/data.h"
#include "dualfed/model.h"

namespace dualfed {

// Fraction of equal entries. Throws on empty or unequal-length input.
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

// R = 1 - mean_within / mean_total with d(a, b) = 1 - cos(a, b); mean_within
// runs over same-class pairs, mean_total over all distinct pairs. Throws
// DegenerateVectorError when every pair is at distance 0 and Error when no
// class has two samples.
double class_separation(const Tensor& reps, std::span<const std::size_t> labels);

// ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centered inputs.
double linear_cka(const Tensor& x, const Tensor& y);

enum class RepStage { kPre, kPost };

struct Representations {
  Tensor z;
  Tensor u;
};

// Eval-mode z and u for every row of x.
Representations representations(const ModelParams& params, const Tensor& x);

// Mean linear CKA over all unordered pairs of matrices (same row count).
double mean_pairwise_cka(std::span<const Tensor> reps);

// Runs the probe through every model in eval mode and averages linear CKA of z
// (kPre) or u (kPost) over all client pairs. Needs at least two models.
double cross_client_cka(std::span<const ModelParams* const> models, const Tensor& probe,
                        RepStage stage);

struct ClientEval {
  double acc_global = 0.0;
  double acc_personal = 0.0;
  double acc_ensemble = 0.0;
  double separation_z = 0.0;
  double separation_u = 0.0;
};

// Eval-mode accuracies and separation on one dataset. For single-classifier
// models all three accuracies are those of the one head.
ClientEval evaluate_client(const ModelParams& params, const Dataset& data);

struct MetricsRow {
  std::size_t round = 0;
  std::vector<ClientEval> clients;
  double mean_acc_global = 0.0;
  double mean_acc_personal = 0.0;
  double mean_acc_ensemble = 0.0;
  double mean_separation_z = 0.0;
  double mean_separation_u = 0.0;
  double cka_z = 0.0;  // NaN with a single client
  double cka_u = 0.0;
  std::uint64_t comm_bytes = 0;  // cumulative

  // Fills the mean_* fields from `clients`.
  void finalize_means();
};

// Column order: round, mean_acc_global, mean_acc_personal, mean_acc_ensemble,
// mean_sep_z, mean_sep_u, cka_z, cka_u, comm_bytes, then for each client m:
// acc_global_m, acc_personal_m, acc_ensemble_m, sep_z_m, sep_u_m.
std::string metrics_csv_header(std::size_t num_clients);
std::string metrics_csv_row(const MetricsRow& row);
std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t num_clients);

struct RepresentationDump {
  std::size_t num_classes = 0;
  std::vector<std::size_t> labels;
  Tensor z;
  Tensor u;
};

// First line "N=<rows>,k=<z width>,d=<u width>,C=<classes>", then one line per
// sample: label, z values, u values.
void dump_representations(const ModelParams& params, const Dataset& data,
                          const std::filesystem::path& path);
RepresentationDump load_representations(const std::filesystem::path& path);

}  // namespace dualfed
