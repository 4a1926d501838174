#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dualfed/model.h"
#include "dualfed/tensor.h"

namespace dualfed {

struct LossConfig {
  double tau = 0.5;     // contrastive temperature, > 0
  double lambda = 1.0;  // weight of the contrastive term, >= 0

  void validate() const;
};

// Lower bound applied to probabilities before taking the log.
inline constexpr double kProbabilityFloor = 1e-12;

struct LabeledBatch {
  Tensor x;                           // B x n
  Tensor y;                           // B x C one-hot
  std::vector<std::size_t> labels;    // class index per row
  std::vector<std::size_t> indices;   // sample ids in the source dataset
};

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);
// Throws LabelError unless every row is exactly one-hot.
std::vector<std::size_t> labels_from_one_hot(const Tensor& y);

struct LossValue {
  double value = 0.0;
  Tensor grad;
};

// Mean over the batch of -log p(true class). `pred` is a softmax output; the
// returned gradient is with respect to the logits that produced it,
// (pred - y) / B.
LossValue cross_entropy(const Tensor& pred, const Tensor& y);

// Supervised contrastive loss over the mini-batch under cosine similarity.
// For every anchor i with at least one same-class partner,
//   l_i = mean_{j in P(i)} -log( exp(s_ij / tau) / sum_{a != i} exp(s_ia / tau) )
// and the loss is the mean of l_i over those anchors. Anchors without a
// partner are skipped; if all are skipped the loss and gradient are zero.
// Gradient is with respect to u.
LossValue sup_con_loss(const Tensor& u, std::span<const std::size_t> labels, double tau);

struct Stage1Loss {
  double total = 0.0;
  double cross_entropy = 0.0;
  double contrastive = 0.0;
  Tensor d_personal_logits;
  Tensor d_u;  // empty when lambda == 0
};

// CE on the personal head plus lambda times the contrastive loss on u.
Stage1Loss stage1_loss(const ForwardTrace& trace, const Tensor& y,
                       std::span<const std::size_t> labels, const LossConfig& config);

}  // namespace dualfed
