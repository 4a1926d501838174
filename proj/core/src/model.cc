#include "dualfed/model.h"

#include <algorithm>
#include <cmath>

#include "dualfed/errors.h"
#include "dualfed/rng.h"

namespace dualfed {

std::string_view to_string(Tag tag) { return tag == Tag::kGlobal ? "global" : "personal"; }

std::string_view to_string(Group group) {
  switch (group) {
    case Group::kEncoder:
      return "encoder";
    case Group::kProjector:
      return "projector";
    case Group::kPersonalClassifier:
      return "personal_classifier";
    case Group::kGlobalClassifier:
      return "global_classifier";
  }
  return "?";
}

std::string_view to_string(HeadPlacement placement) {
  switch (placement) {
    case HeadPlacement::kNone:
      return "none";
    case HeadPlacement::kPreProjection:
      return "pre";
    case HeadPlacement::kPostProjection:
      return "post";
  }
  return "?";
}

void ArchConfig::validate() const {
  if (input_dim == 0) throw ConfigError("arch.input_dim", "must be >= 1");
  if (encoder_widths.empty()) throw ConfigError("arch.encoder_widths", "must not be empty");
  for (std::size_t w : encoder_widths)
    if (w == 0) throw ConfigError("arch.encoder_widths", "every width must be >= 1");
  if (projector_depth == 0) throw ConfigError("arch.projector_depth", "must be >= 1");
  if (projector_hidden == 0) throw ConfigError("arch.projector_hidden", "must be >= 1");
  if (projector_out == 0) throw ConfigError("arch.projector_out", "must be >= 1");
  if (num_classes < 2) throw ConfigError("arch.num_classes", "must be >= 2");
  if (!(bn.epsilon > 0.0)) throw ConfigError("arch.bn_epsilon", "must be > 0");
  if (!(bn.momentum > 0.0 && bn.momentum < 1.0))
    throw ConfigError("arch.bn_momentum", "must be in (0, 1)");
}

Tag TagPolicy::for_group(Group group) const {
  switch (group) {
    case Group::kEncoder:
      return encoder;
    case Group::kProjector:
      return projector;
    case Group::kPersonalClassifier:
      return personal_classifier;
    case Group::kGlobalClassifier:
      return global_classifier;
  }
  return Tag::kPersonal;
}

namespace {

struct LayoutBuilder {
  std::vector<SlotDescriptor> slots;
  Layout layout;

  LayerRef linear(std::string_view prefix, Group group, std::size_t index, std::size_t in,
                  std::size_t out) {
    const std::string base = std::string(prefix) + "." + std::to_string(index);
    LayerRef ref{LayerKind::kLinear, slots.size()};
    slots.push_back({base + ".weight", group, SlotKind::kWeight, in, out});
    slots.push_back({base + ".bias", group, SlotKind::kBias, 1, out});
    return ref;
  }

  LayerRef batchnorm(std::string_view prefix, Group group, std::size_t index,
                     std::size_t features) {
    const std::string base = std::string(prefix) + "." + std::to_string(index);
    LayerRef ref{LayerKind::kBatchNorm, slots.size()};
    slots.push_back({base + ".gamma", group, SlotKind::kBnGamma, 1, features});
    slots.push_back({base + ".beta", group, SlotKind::kBnBeta, 1, features});
    slots.push_back({base + ".running_mean", group, SlotKind::kBnRunningMean, 1, features});
    slots.push_back({base + ".running_var", group, SlotKind::kBnRunningVar, 1, features});
    return ref;
  }

  std::size_t head(std::string_view name, Group group, std::size_t in, std::size_t out) {
    const std::size_t first = slots.size();
    slots.push_back({std::string(name) + ".weight", group, SlotKind::kWeight, in, out});
    slots.push_back({std::string(name) + ".bias", group, SlotKind::kBias, 1, out});
    return first;
  }
};

// Encoder: [Linear - ReLU - BN] per hidden width, then a plain Linear to k.
// Projector (depth D): D Linear layers, ReLU between them, BN after each when
// enabled. D = 2 gives Linear(k,H) - ReLU - BN - Linear(H,d) - BN.
LayoutBuilder build(const ArchConfig& arch) {
  LayoutBuilder b;
  std::size_t in = arch.input_dim;
  std::size_t index = 0;
  for (std::size_t i = 0; i < arch.encoder_widths.size(); ++i) {
    const std::size_t out = arch.encoder_widths[i];
    b.layout.encoder.push_back(b.linear("encoder", Group::kEncoder, index++, in, out));
    if (i + 1 < arch.encoder_widths.size()) {
      b.layout.encoder.push_back({LayerKind::kRelu, 0});
      ++index;
      if (arch.encoder_bn) {
        b.layout.encoder.push_back(b.batchnorm("encoder", Group::kEncoder, index++, out));
      }
    }
    in = out;
  }

  const std::size_t k = arch.representation_dim();
  in = k;
  index = 0;
  for (std::size_t l = 0; l < arch.projector_depth; ++l) {
    const bool last = l + 1 == arch.projector_depth;
    const std::size_t out = last ? arch.projector_out : arch.projector_hidden;
    b.layout.projector.push_back(b.linear("projector", Group::kProjector, index++, in, out));
    if (!last) {
      b.layout.projector.push_back({LayerKind::kRelu, 0});
      ++index;
    }
    if (arch.projector_bn) {
      b.layout.projector.push_back(b.batchnorm("projector", Group::kProjector, index++, out));
    }
    in = out;
  }

  b.layout.personal_head = b.head("personal_classifier", Group::kPersonalClassifier,
                                  arch.projector_out, arch.num_classes);
  switch (arch.global_head) {
    case HeadPlacement::kNone:
      break;
    case HeadPlacement::kPreProjection:
      b.layout.global_head =
          b.head("global_classifier", Group::kGlobalClassifier, k, arch.num_classes);
      break;
    case HeadPlacement::kPostProjection:
      b.layout.global_head = b.head("global_classifier", Group::kGlobalClassifier,
                                    arch.projector_out, arch.num_classes);
      break;
  }
  return b;
}

}  // namespace

std::vector<SlotDescriptor> describe_slots(const ArchConfig& arch) {
  arch.validate();
  return build(arch).slots;
}

ModelParams::ModelParams(ArchConfig arch, std::vector<ParamSlot> slots)
    : arch_(std::move(arch)), slots_(std::move(slots)) {
  arch_.validate();
  LayoutBuilder b = build(arch_);
  if (b.slots.size() != slots_.size()) {
    throw SchemaError("ModelParams: expected " + std::to_string(b.slots.size()) + " slots, got " +
                      std::to_string(slots_.size()));
  }
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    const SlotDescriptor& d = b.slots[i];
    const ParamSlot& s = slots_[i];
    if (s.name_ != d.name || s.group_ != d.group || s.kind_ != d.kind ||
        s.value_.rows() != d.rows || s.value_.cols() != d.cols) {
      throw SchemaError("ModelParams: slot " + std::to_string(i) + " ('" + s.name_ +
                        "') does not match architecture slot '" + d.name + "'");
    }
    if (!s.trainable() && s.tag_ != Tag::kPersonal) {
      throw SchemaError("ModelParams: running statistic '" + s.name_ + "' must be personal");
    }
  }
  layout_ = std::move(b.layout);
}

void ModelParams::set_value(std::size_t i, Tensor value) {
  Tensor& dst = slots_.at(i).value_;
  if (!dst.same_shape(value)) {
    throw DimensionError("ModelParams::set_value: shape change for '" + slots_[i].name_ + "'");
  }
  dst = std::move(value);
}

std::optional<std::size_t> ModelParams::find(std::string_view name) const {
  for (std::size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].name_ == name) return i;
  return std::nullopt;
}

std::size_t ModelParams::count_values(const std::function<bool(const ParamSlot&)>& pred) const {
  std::size_t total = 0;
  for (const ParamSlot& s : slots_)
    if (pred(s)) total += s.value_.size();
  return total;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (a.slots_.size() != b.slots_.size()) return false;
  for (std::size_t i = 0; i < a.slots_.size(); ++i) {
    const ParamSlot& x = a.slots_[i];
    const ParamSlot& y = b.slots_[i];
    if (x.name() != y.name() || x.tag() != y.tag() || !(x.value() == y.value())) return false;
  }
  return true;
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed, const TagPolicy& tags) {
  arch.validate();
  Rng rng(seed, /*stream_id=*/0x1417);
  std::vector<ParamSlot> slots;
  for (const SlotDescriptor& d : build(arch).slots) {
    Tensor value(d.rows, d.cols);
    switch (d.kind) {
      case SlotKind::kWeight: {
        const double a = std::sqrt(6.0 / static_cast<double>(d.rows + d.cols));
        for (double& v : value.values()) v = rng.uniform(-a, a);
        break;
      }
      case SlotKind::kBnGamma:
      case SlotKind::kBnRunningVar:
        value.fill(1.0);
        break;
      case SlotKind::kBias:
      case SlotKind::kBnBeta:
      case SlotKind::kBnRunningMean:
        break;
    }
    const bool running = d.kind == SlotKind::kBnRunningMean || d.kind == SlotKind::kBnRunningVar;
    const Tag tag = running ? Tag::kPersonal : tags.for_group(d.group);
    slots.emplace_back(d.name, d.group, d.kind, tag, std::move(value));
  }
  return ModelParams(arch, std::move(slots));
}

// ---- forward ---------------------------------------------------------------------

namespace {

Tensor run_stack(const ModelParams& p, const std::vector<LayerRef>& layers, const Tensor& x,
                 Mode mode, StackTrace* trace) {
  if (trace != nullptr) {
    trace->inputs.clear();
    trace->bn.assign(layers.size(), BatchNormCache{});
  }
  Tensor h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerRef& layer = layers[l];
    if (trace != nullptr) trace->inputs.push_back(h);
    switch (layer.kind) {
      case LayerKind::kLinear:
        h = linear_forward(h, p.value(layer.first_slot), p.value(layer.first_slot + 1));
        break;
      case LayerKind::kRelu:
        h = relu_forward(h);
        break;
      case LayerKind::kBatchNorm: {
        BatchNormCache local;
        BatchNormCache& cache = trace != nullptr ? trace->bn[l] : local;
        const std::size_t s = layer.first_slot;
        h = batchnorm_forward(h, p.value(s), p.value(s + 1), p.value(s + 2), p.value(s + 3), mode,
                              p.arch().bn, cache);
        break;
      }
    }
  }
  return h;
}

Tensor run_head(const ModelParams& p, std::size_t first_slot, const Tensor& x) {
  return linear_forward(x, p.value(first_slot), p.value(first_slot + 1));
}

void commit_stack(ModelParams& p, const std::vector<LayerRef>& layers, const StackTrace& trace) {
  for (std::size_t l = 0; l < layers.size() && l < trace.bn.size(); ++l) {
    if (layers[l].kind != LayerKind::kBatchNorm) continue;
    const std::size_t s = layers[l].first_slot;
    batchnorm_update_running(trace.bn[l], p.arch().bn.momentum, p.mutable_value(s + 2),
                             p.mutable_value(s + 3));
  }
}

void require_input(const ModelParams& p, const Tensor& x) {
  if (x.cols() != p.arch().input_dim) {
    throw DimensionError("model input has " + std::to_string(x.cols()) +
                         " features, architecture expects " +
                         std::to_string(p.arch().input_dim));
  }
}

}  // namespace

ForwardTrace forward(const ModelParams& params, const Tensor& x, Mode mode,
                     ForwardRequest request) {
  require_input(params, x);
  const Layout& layout = params.layout();
  const bool has_global = layout.global_head.has_value() && request.global;
  const bool post = params.arch().global_head == HeadPlacement::kPostProjection;

  ForwardTrace t;
  t.mode = mode;
  t.z = run_stack(params, layout.encoder, x, mode, &t.encoder);
  if (request.personal || (has_global && post)) {
    t.u = run_stack(params, layout.projector, t.z, mode, &t.projector);
  }
  if (request.personal) {
    t.logits_p = run_head(params, layout.personal_head, t.u);
    t.y_p = softmax_forward(t.logits_p);
  }
  if (has_global) {
    t.logits_s = run_head(params, *layout.global_head, post ? t.u : t.z);
    t.y_s = softmax_forward(t.logits_s);
  }
  return t;
}

void commit_running_stats(ModelParams& params, const ForwardTrace& trace) {
  if (trace.mode != Mode::kTrain) return;
  commit_stack(params, params.layout().encoder, trace.encoder);
  commit_stack(params, params.layout().projector, trace.projector);
}

// ---- backward ----------------------------------------------------------------------

GroupSet groups(std::initializer_list<Group> list) {
  GroupSet set;
  for (Group g : list) set.set(static_cast<std::size_t>(g));
  return set;
}

namespace {

bool wants(GroupSet set, Group g) { return set.test(static_cast<std::size_t>(g)); }

void accumulate(Tensor& dst, Tensor src) {
  if (dst.empty()) {
    dst = std::move(src);
  } else {
    add_inplace(dst, src);
  }
}

// Returns dL/dx of the head input; fills head slot gradients when collect.
Tensor head_backward(const ModelParams& p, std::size_t first, const Tensor& input,
                     const Tensor& dlogits, bool collect, Gradients& grads) {
  Tensor dw;
  Tensor db;
  Tensor dx = linear_backward(input, p.value(first), dlogits, collect ? &dw : nullptr,
                              collect ? &db : nullptr);
  if (collect) {
    accumulate(grads[first], std::move(dw));
    accumulate(grads[first + 1], std::move(db));
  }
  return dx;
}

Tensor stack_backward(const ModelParams& p, const std::vector<LayerRef>& layers,
                      const StackTrace& trace, Tensor dy, bool collect, Gradients& grads) {
  for (std::size_t l = layers.size(); l-- > 0;) {
    const LayerRef& layer = layers[l];
    const Tensor& input = trace.inputs.at(l);
    switch (layer.kind) {
      case LayerKind::kLinear: {
        Tensor dw;
        Tensor db;
        dy = linear_backward(input, p.value(layer.first_slot), dy, collect ? &dw : nullptr,
                             collect ? &db : nullptr);
        if (collect) {
          accumulate(grads[layer.first_slot], std::move(dw));
          accumulate(grads[layer.first_slot + 1], std::move(db));
        }
        break;
      }
      case LayerKind::kRelu:
        dy = relu_backward(input, dy);
        break;
      case LayerKind::kBatchNorm: {
        Tensor dgamma;
        Tensor dbeta;
        dy = batchnorm_backward(trace.bn.at(l), p.value(layer.first_slot), dy,
                                collect ? &dgamma : nullptr, collect ? &dbeta : nullptr);
        if (collect) {
          accumulate(grads[layer.first_slot], std::move(dgamma));
          accumulate(grads[layer.first_slot + 1], std::move(dbeta));
        }
        break;
      }
    }
  }
  return dy;
}

}  // namespace

Gradients backward(const ModelParams& params, const ForwardTrace& trace,
                   const TraceGrads& upstream, GroupSet wanted) {
  const Layout& layout = params.layout();
  const bool post = params.arch().global_head == HeadPlacement::kPostProjection;
  const bool need_encoder = wants(wanted, Group::kEncoder);
  const bool need_projector = wants(wanted, Group::kProjector);
  const bool propagate_u = need_projector || need_encoder;

  Gradients grads(params.size());

  Tensor du = upstream.u;
  if (!upstream.personal_logits.empty()) {
    if (trace.logits_p.empty()) throw Error("backward: personal head was not run forward");
    const bool collect = wants(wanted, Group::kPersonalClassifier);
    if (collect || propagate_u) {
      Tensor dx = head_backward(params, layout.personal_head, trace.u, upstream.personal_logits,
                                collect, grads);
      if (propagate_u) accumulate(du, std::move(dx));
    }
  }

  Tensor dz = upstream.z;
  if (!upstream.global_logits.empty()) {
    if (trace.logits_s.empty()) throw Error("backward: global head was not run forward");
    const bool collect = wants(wanted, Group::kGlobalClassifier);
    const bool propagate = post ? propagate_u : need_encoder;
    if (collect || propagate) {
      Tensor dx = head_backward(params, *layout.global_head, post ? trace.u : trace.z,
                                upstream.global_logits, collect, grads);
      if (propagate) accumulate(post ? du : dz, std::move(dx));
    }
  }

  if (propagate_u && !du.empty()) {
    Tensor dzp = stack_backward(params, layout.projector, trace.projector, std::move(du),
                                need_projector, grads);
    if (need_encoder) accumulate(dz, std::move(dzp));
  }

  if (need_encoder && !dz.empty()) {
    stack_backward(params, layout.encoder, trace.encoder, std::move(dz), true, grads);
  }

  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!params.slot(i).trainable() || !wanted.test(static_cast<std::size_t>(params.slot(i).group())))
      grads[i] = Tensor();
  }
  return grads;
}

// ---- prediction paths ----------------------------------------------------------------

Tensor encode(ModelParams& params, const Tensor& x, Mode mode) {
  require_input(params, x);
  StackTrace trace;
  Tensor z = run_stack(params, params.layout().encoder, x, mode, &trace);
  if (mode == Mode::kTrain) commit_stack(params, params.layout().encoder, trace);
  return z;
}

Tensor project(ModelParams& params, const Tensor& z, Mode mode) {
  if (z.cols() != params.arch().representation_dim()) {
    throw DimensionError("project: representation width " + std::to_string(z.cols()) +
                         " != " + std::to_string(params.arch().representation_dim()));
  }
  StackTrace trace;
  Tensor u = run_stack(params, params.layout().projector, z, mode, &trace);
  if (mode == Mode::kTrain) commit_stack(params, params.layout().projector, trace);
  return u;
}

Tensor predict_global(ModelParams& params, const Tensor& x, Mode mode) {
  if (!params.layout().global_head) throw Error("predict_global: model has no global classifier");
  ForwardTrace t = forward(params, x, mode, {.personal = false, .global = true});
  commit_running_stats(params, t);
  return t.y_s;
}

Tensor predict_personal(ModelParams& params, const Tensor& x, Mode mode) {
  ForwardTrace t = forward(params, x, mode, {.personal = true, .global = false});
  commit_running_stats(params, t);
  return t.y_p;
}

std::vector<std::size_t> argmax_rows(const Tensor& t) {
  std::vector<std::size_t> labels(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const auto row = t.row(i);
    // max_element returns the first maximum.
    labels[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return labels;
}

EnsemblePrediction combine_predictions(const Tensor& y_s, const Tensor& y_p) {
  Tensor scores = y_p;
  add_inplace(scores, y_s);
  EnsemblePrediction out{std::move(scores), {}};
  out.labels = argmax_rows(out.scores);
  return out;
}

EnsemblePrediction predict_ensemble(const ModelParams& params, const Tensor& x) {
  ForwardTrace t = forward(params, x, Mode::kEval);
  if (t.y_s.empty()) return {t.y_p, argmax_rows(t.y_p)};
  return combine_predictions(t.y_s, t.y_p);
}

}  // namespace dualfed
