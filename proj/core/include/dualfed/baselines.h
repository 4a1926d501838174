#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualfed/model.h"
#include "dualfed/serialize.h"

namespace dualfed {

enum class Method {
  kDualFed,
  kDualFedG,  // global classifier after the projector, projector shared
  kDualFedP,  // global classifier after the projector, projector personal
  kFedAvg,
  kFedProx,
  kFedPer,
  kLgFedAvg,
  kSingleSet,
};

// How a client spends its local epochs.
enum class Procedure {
  kDualClassifier,  // stage-wise (or simultaneous) training of two heads
  kSingleClassifier,  // plain cross-entropy on the one post-projection head
};

struct MethodVariant {
  Method method = Method::kDualFed;
  TagPolicy tags;
  HeadPlacement global_head = HeadPlacement::kPreProjection;
  Procedure procedure = Procedure::kDualClassifier;
  double mu = 0.0;  // FedProx proximal coefficient

  std::string_view name() const;
};

std::string_view method_name(Method method);
// Case-insensitive; accepts the names printed by method_name. Throws
// ConfigError("method.name", ...) for unknown names.
Method parse_method(std::string_view name);

// Canonical tagging and training procedure for a method.
//   DualFed      enc G, proj P, personal head P, global head G (reads z)
//   DualFed-G    as DualFed but global head reads u and the projector is G
//   DualFed-P    as DualFed but global head reads u
//   FedAvg/Prox  everything G, single head
//   FedPer       single head P, rest G
//   LG-FedAvg    encoder and projector P, single head G
//   SingleSet    everything P; nothing is ever exchanged
MethodVariant make_variant(Method method, double mu = 0.0);

// Replaces the group tags of a two-classifier variant (the personalization
// matrix ablation). Throws ConfigError for single-classifier methods.
MethodVariant with_tag_overrides(MethodVariant variant, const TagPolicy& tags);

// The architecture actually built for a variant: the input arch with the
// global head placement set by the variant.
ArchConfig apply_variant(const MethodVariant& variant, ArchConfig arch);

struct ProximalTerm {
  double value = 0.0;
  SlotList grads;  // same names/order as `local`
};

// (mu / 2) * sum ||w - w_global||^2 with gradient mu * (w - w_global). Both
// lists must name the same slots with the same shapes (SchemaError otherwise).
ProximalTerm fedprox_penalty(const SlotList& local, const SlotList& global_snapshot, double mu);

// Adds the proximal gradient to `grads` for every GLOBAL trainable slot of
// `params` and returns the penalty value. `grads` is indexed like `params`.
double add_fedprox_gradient(const ModelParams& params, const SlotList& global_snapshot, double mu,
                            Gradients& grads);

}  // namespace dualfed
