#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dualfed/data.h"
#include "dualfed/model.h"
#include "dualfed/protocol.h"
#include "dualfed/rng.h"
#include "dualfed/tensor.h"

namespace dualfed::testsupport {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0);
// Entries with |v| in [0.05, 1.05] and random sign, so no ReLU kink sits
// within a finite-difference step.
Tensor random_nonzero(Rng& rng, std::size_t rows, std::size_t cols);

// Direct evaluation of the contrastive loss: every cosine, exponential and
// log computed separately per term.
double brute_supcon(const Tensor& u, std::span<const std::size_t> labels, double tau);

// CKA through the HSIC estimator on Gram matrices, HSIC(K, L) = tr(KHLH)/(n-1)^2.
double hsic_cka(const Tensor& x, const Tensor& y);

struct OpCheck {
  std::string op;
  std::size_t trials = 0;
  double max_error = 0.0;  // worst max_relative_error over trials and inputs
};

// Analytic backward versus central differences for every layer, loss and the
// composed model paths.
std::vector<OpCheck> gradient_suite(std::size_t trials, std::uint64_t seed);

struct OracleSweep {
  std::size_t cases = 0;
  double max_abs_diff = 0.0;
};

// Every label pattern for B in [2, 6] and 2 or 3 classes, d in [1, 4].
OracleSweep supcon_oracle_sweep(double tau, std::uint64_t seed);
OracleSweep cka_oracle_sweep(std::size_t instances, std::uint64_t seed);

// Small architecture for fast protocol tests.
ArchConfig tiny_arch(HeadPlacement head = HeadPlacement::kPreProjection, bool encoder_bn = true);
SyntheticSpec tiny_data_spec(std::size_t clients = 3);
std::vector<std::shared_ptr<const ClientData>> shared_clients(SyntheticData data);
FederationSetup tiny_setup(const MethodVariant& variant, std::size_t rounds, std::uint64_t seed,
                           std::size_t clients = 3);

}  // namespace dualfed::testsupport
