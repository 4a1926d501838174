#pragma once

#include <bitset>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualfed/tensor.h"

namespace dualfed {

// Who owns a parameter: GLOBAL values are broadcast, trained locally, uploaded
// and averaged; PERSONAL values never leave their client.
enum class Tag : std::uint8_t { kGlobal = 0, kPersonal = 1 };

// Structural role of a slot. Independent of its tag: variants may share or
// personalize any group.
enum class Group : std::uint8_t {
  kEncoder = 0,
  kProjector = 1,
  kPersonalClassifier = 2,
  kGlobalClassifier = 3,
};
inline constexpr std::size_t kNumGroups = 4;

enum class SlotKind : std::uint8_t {
  kWeight,
  kBias,
  kBnGamma,
  kBnBeta,
  kBnRunningMean,
  kBnRunningVar,
};

// Where the second (global) classifier reads from.
enum class HeadPlacement : std::uint8_t {
  kNone,            // single-classifier models
  kPreProjection,   // reads z (DualFed)
  kPostProjection,  // reads u (DualFed-G / DualFed-P)
};

std::string_view to_string(Tag tag);
std::string_view to_string(Group group);
std::string_view to_string(HeadPlacement placement);

struct ArchConfig {
  std::size_t input_dim = 64;
  // Hidden widths followed by the representation width k.
  std::vector<std::size_t> encoder_widths = {32, 16};
  bool encoder_bn = true;
  std::size_t projector_depth = 2;
  std::size_t projector_hidden = 32;
  std::size_t projector_out = 16;
  bool projector_bn = true;
  std::size_t num_classes = 7;
  HeadPlacement global_head = HeadPlacement::kPreProjection;
  BatchNormConfig bn;

  std::size_t representation_dim() const { return encoder_widths.back(); }
  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct TagPolicy {
  Tag encoder = Tag::kGlobal;
  Tag projector = Tag::kPersonal;
  Tag personal_classifier = Tag::kPersonal;
  Tag global_classifier = Tag::kGlobal;

  Tag for_group(Group group) const;
  friend bool operator==(const TagPolicy&, const TagPolicy&) = default;
};

class ParamSlot {
 public:
  ParamSlot(std::string name, Group group, SlotKind kind, Tag tag, Tensor value)
      : name_(std::move(name)), group_(group), kind_(kind), tag_(tag), value_(std::move(value)) {}

  const std::string& name() const noexcept { return name_; }
  Group group() const noexcept { return group_; }
  SlotKind kind() const noexcept { return kind_; }
  Tag tag() const noexcept { return tag_; }
  bool trainable() const noexcept {
    return kind_ != SlotKind::kBnRunningMean && kind_ != SlotKind::kBnRunningVar;
  }
  const Tensor& value() const noexcept { return value_; }

 private:
  friend class ModelParams;
  std::string name_;
  Group group_;
  SlotKind kind_;
  Tag tag_;
  Tensor value_;
};

enum class LayerKind : std::uint8_t { kLinear, kRelu, kBatchNorm };

// Linear layers own two consecutive slots (weight, bias); batch norm owns four
// (gamma, beta, running_mean, running_var); ReLU owns none.
struct LayerRef {
  LayerKind kind;
  std::size_t first_slot = 0;
};

struct Layout {
  std::vector<LayerRef> encoder;
  std::vector<LayerRef> projector;
  std::size_t personal_head = 0;
  std::optional<std::size_t> global_head;
};

// Ordered, tagged parameter set of one model. Tags are fixed at construction.
class ModelParams {
 public:
  ModelParams(ArchConfig arch, std::vector<ParamSlot> slots);

  const ArchConfig& arch() const noexcept { return arch_; }
  const Layout& layout() const noexcept { return layout_; }
  std::size_t size() const noexcept { return slots_.size(); }
  const ParamSlot& slot(std::size_t i) const { return slots_.at(i); }
  const Tensor& value(std::size_t i) const { return slots_.at(i).value_; }
  // Overwrites a slot's payload; the shape must not change.
  void set_value(std::size_t i, Tensor value);
  Tensor& mutable_value(std::size_t i) { return slots_.at(i).value_; }
  std::optional<std::size_t> find(std::string_view name) const;

  // Number of scalar values in slots matching `pred`.
  std::size_t count_values(const std::function<bool(const ParamSlot&)>& pred) const;

  friend bool operator==(const ModelParams& a, const ModelParams& b);

 private:
  ArchConfig arch_;
  Layout layout_;
  std::vector<ParamSlot> slots_;
};

struct SlotDescriptor {
  std::string name;
  Group group;
  SlotKind kind;
  std::size_t rows;
  std::size_t cols;
};

// Slot order and shapes implied by an architecture.
std::vector<SlotDescriptor> describe_slots(const ArchConfig& arch);

// Xavier-uniform weights, zero biases, identity batch norm; fully determined by
// seed. Running statistics are PERSONAL whatever the policy says.
ModelParams init_params(const ArchConfig& arch, std::uint64_t seed, const TagPolicy& tags = {});

// ---- forward / backward ------------------------------------------------------

struct StackTrace {
  std::vector<Tensor> inputs;         // input of every layer
  std::vector<BatchNormCache> bn;     // per layer; only filled for batch norm
};

struct ForwardTrace {
  Mode mode = Mode::kEval;
  Tensor z;         // pre-projection representation, B x k
  Tensor u;         // post-projection representation, B x d (empty if not computed)
  Tensor logits_s;  // global head (empty if absent or not requested)
  Tensor y_s;
  Tensor logits_p;
  Tensor y_p;
  StackTrace encoder;
  StackTrace projector;
};

struct ForwardRequest {
  bool personal = true;
  bool global = true;
};

// Pure: running statistics are never written here. Call commit_running_stats
// after a train-mode pass to fold the batch statistics in.
ForwardTrace forward(const ModelParams& params, const Tensor& x, Mode mode,
                     ForwardRequest request = {});
void commit_running_stats(ModelParams& params, const ForwardTrace& trace);

using GroupSet = std::bitset<kNumGroups>;
GroupSet groups(std::initializer_list<Group> list);
inline GroupSet main_branch() {
  return groups({Group::kEncoder, Group::kProjector, Group::kPersonalClassifier});
}

// Upstream gradients entering the trace. Empty tensors mean zero.
struct TraceGrads {
  Tensor personal_logits{};
  Tensor global_logits{};
  Tensor u{};
  Tensor z{};
};

// One entry per slot; empty where no gradient was requested or the slot is
// not trainable.
using Gradients = std::vector<Tensor>;

// Back-propagates `upstream` and returns parameter gradients for the slots in
// `wanted`. Propagation stops as soon as no wanted group lies further upstream,
// so a gradient entering the global head never reaches the encoder unless the
// encoder group is wanted.
Gradients backward(const ModelParams& params, const ForwardTrace& trace,
                   const TraceGrads& upstream, GroupSet wanted);

// ---- prediction paths ----------------------------------------------------------

// Train mode updates the running statistics of every batch norm it passes.
Tensor encode(ModelParams& params, const Tensor& x, Mode mode);
Tensor project(ModelParams& params, const Tensor& z, Mode mode);
// softmax(h_s(z)) for pre placement, softmax(h_s(u)) for post placement.
Tensor predict_global(ModelParams& params, const Tensor& x, Mode mode);
// softmax(h_p(g(f(x)))).
Tensor predict_personal(ModelParams& params, const Tensor& x, Mode mode);

struct EnsemblePrediction {
  Tensor scores;
  std::vector<std::size_t> labels;
};

// Row argmax, lowest index wins ties.
std::vector<std::size_t> argmax_rows(const Tensor& t);
// scores = y_p + y_s.
EnsemblePrediction combine_predictions(const Tensor& y_s, const Tensor& y_p);
// Eval-mode ensemble. Models without a global head fall back to y_p alone.
EnsemblePrediction predict_ensemble(const ModelParams& params, const Tensor& x);

}  // namespace dualfed
