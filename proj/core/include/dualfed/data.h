#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "dualfed/losses.h"
#include "dualfed/rng.h"
#include "dualfed/tensor.h"

namespace dualfed {

struct Dataset {
  Tensor x;                         // N x n
  std::vector<std::size_t> labels;  // N entries in [0, num_classes)
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t input_dim() const { return x.cols(); }
  LabeledBatch batch(std::span<const std::size_t> rows) const;
  LabeledBatch all() const;
  // Throws DataError on inconsistent shapes or labels.
  void validate() const;
};

struct ClientData {
  Dataset train;
  Dataset test;
};

// One client's input distribution: x = transform * (prototype + noise) + bias.
struct DomainSpec {
  std::size_t domain_id = 0;
  Tensor transform;  // n x n orthogonal
  Tensor bias;       // 1 x n
  double noise_sigma = 0.0;
  double difficulty = 1.0;  // multiplies noise_sigma
};

struct SyntheticSpec {
  std::size_t num_domains = 4;
  std::size_t num_classes = 7;
  std::size_t input_dim = 64;
  std::size_t train_per_client = 500;
  std::size_t test_per_client = 210;
  std::size_t probe_per_domain = 50;
  double prototype_sigma = 1.0;
  double noise_sigma = 2.0;
  // 0 gives identity transforms; larger values rotate domains further apart.
  double domain_shift = 0.5;
  double bias_sigma = 0.5;
  // Per-domain noise multipliers; empty means 1 everywhere.
  std::vector<double> difficulty;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  Tensor prototypes;  // C x n, shared by all domains
  std::vector<DomainSpec> domains;
  std::vector<ClientData> clients;  // one per domain
  Dataset probe;                    // probe_per_domain samples from every domain
};

// Labels cycle through the classes, so every class count is within one of
// every other (exactly equal when the count is divisible by C). Train, test
// and probe samples are separate draws.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

// CSV: header "label,f0,...,f{n-1}", one sample per row. Labels must lie in
// [0, num_classes); when num_classes is omitted it is max label + 1.
Dataset load_flatfile(const std::filesystem::path& path,
                      std::optional<std::size_t> num_classes = std::nullopt);
// Shortest round-trip float text; load_flatfile(write_flatfile(d)) == d.
void write_flatfile(const std::filesystem::path& path, const Dataset& dataset);

Dataset concat(std::span<const Dataset> parts);

// One epoch of shuffled mini-batches. The final batch is dropped when it would
// hold a single sample (batch norm needs two).
class BatchIterator {
 public:
  BatchIterator(const Dataset& dataset, std::size_t batch_size, Rng& rng);

  std::optional<LabeledBatch> next();
  std::size_t num_batches() const { return batches_.size(); }
  const std::vector<std::vector<std::size_t>>& plan() const { return batches_; }

 private:
  const Dataset& dataset_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t cursor_ = 0;
};

}  // namespace dualfed
