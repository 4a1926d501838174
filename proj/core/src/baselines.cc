#include "dualfed/baselines.h"

#include <algorithm>
#include <cctype>

#include "dualfed/errors.h"

namespace dualfed {

namespace {

struct MethodInfo {
  Method method;
  std::string_view name;
};

constexpr MethodInfo kMethods[] = {
    {Method::kDualFed, "DualFed"},     {Method::kDualFedG, "DualFed-G"},
    {Method::kDualFedP, "DualFed-P"},  {Method::kFedAvg, "FedAvg"},
    {Method::kFedProx, "FedProx"},     {Method::kFedPer, "FedPer"},
    {Method::kLgFedAvg, "LG-FedAvg"},  {Method::kSingleSet, "SingleSet"},
};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

TagPolicy all(Tag t) { return TagPolicy{t, t, t, t}; }

}  // namespace

std::string_view method_name(Method method) {
  for (const MethodInfo& m : kMethods)
    if (m.method == method) return m.name;
  return "?";
}

std::string_view MethodVariant::name() const { return method_name(method); }

Method parse_method(std::string_view name) {
  const std::string key = lower(name);
  for (const MethodInfo& m : kMethods)
    if (lower(m.name) == key) return m.method;
  std::string known;
  for (const MethodInfo& m : kMethods) {
    if (!known.empty()) known += ", ";
    known += m.name;
  }
  throw ConfigError("method.name", "unknown method '" + std::string(name) + "' (known: " + known + ")");
}

MethodVariant make_variant(Method method, double mu) {
  MethodVariant v;
  v.method = method;
  switch (method) {
    case Method::kDualFed:
      break;
    case Method::kDualFedG:
      v.global_head = HeadPlacement::kPostProjection;
      v.tags.projector = Tag::kGlobal;
      break;
    case Method::kDualFedP:
      v.global_head = HeadPlacement::kPostProjection;
      break;
    case Method::kFedAvg:
    case Method::kFedProx:
      v.global_head = HeadPlacement::kNone;
      v.procedure = Procedure::kSingleClassifier;
      v.tags = all(Tag::kGlobal);
      break;
    case Method::kFedPer:
      v.global_head = HeadPlacement::kNone;
      v.procedure = Procedure::kSingleClassifier;
      v.tags = all(Tag::kGlobal);
      v.tags.personal_classifier = Tag::kPersonal;
      break;
    case Method::kLgFedAvg:
      v.global_head = HeadPlacement::kNone;
      v.procedure = Procedure::kSingleClassifier;
      v.tags = all(Tag::kPersonal);
      v.tags.personal_classifier = Tag::kGlobal;
      break;
    case Method::kSingleSet:
      v.global_head = HeadPlacement::kNone;
      v.procedure = Procedure::kSingleClassifier;
      v.tags = all(Tag::kPersonal);
      break;
  }
  if (method == Method::kFedProx) {
    if (!(mu >= 0.0)) throw ConfigError("method.mu", "must be >= 0");
    v.mu = mu;
  }
  return v;
}

MethodVariant with_tag_overrides(MethodVariant variant, const TagPolicy& tags) {
  if (variant.procedure != Procedure::kDualClassifier) {
    throw ConfigError("method.personalize",
                      "tag overrides apply only to two-classifier methods, not " +
                          std::string(variant.name()));
  }
  variant.tags = tags;
  return variant;
}

ArchConfig apply_variant(const MethodVariant& variant, ArchConfig arch) {
  arch.global_head = variant.global_head;
  arch.validate();
  return arch;
}

ProximalTerm fedprox_penalty(const SlotList& local, const SlotList& global_snapshot, double mu) {
  if (local.size() != global_snapshot.size()) {
    throw SchemaError("fedprox_penalty: slot count mismatch");
  }
  ProximalTerm out;
  double sq = 0.0;
  for (std::size_t i = 0; i < local.size(); ++i) {
    const NamedTensor& w = local[i];
    const NamedTensor& g = global_snapshot[i];
    if (w.name != g.name || !w.value.same_shape(g.value)) {
      throw SchemaError("fedprox_penalty: slot '" + w.name + "' does not match '" + g.name + "'");
    }
    NamedTensor grad{w.name, w.tag, Tensor(w.value.rows(), w.value.cols())};
    for (std::size_t k = 0; k < w.value.size(); ++k) {
      const double diff = w.value[k] - g.value[k];
      sq += diff * diff;
      grad.value[k] = mu * diff;
    }
    out.grads.push_back(std::move(grad));
  }
  out.value = 0.5 * mu * sq;
  return out;
}

double add_fedprox_gradient(const ModelParams& params, const SlotList& global_snapshot, double mu,
                            Gradients& grads) {
  if (grads.size() != params.size()) throw SchemaError("add_fedprox_gradient: gradient count");
  SlotList local;
  std::vector<std::size_t> index;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamSlot& s = params.slot(i);
    if (s.tag() != Tag::kGlobal || !s.trainable()) continue;
    local.push_back({s.name(), s.tag(), s.value()});
    index.push_back(i);
  }
  ProximalTerm term = fedprox_penalty(local, global_snapshot, mu);
  for (std::size_t k = 0; k < index.size(); ++k) {
    Tensor& g = grads[index[k]];
    if (g.empty()) {
      g = std::move(term.grads[k].value);
    } else {
      add_inplace(g, term.grads[k].value);
    }
  }
  return term.value;
}

}  // namespace dualfed
