#include "support.h"

#include <algorithm>
#include <cmath>
#include <functional>

#include "dualfed/baselines.h"
#include "dualfed/losses.h"
#include "dualfed/metrics.h"

namespace dualfed::testsupport {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

Tensor random_nonzero(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (double& v : t.values()) v = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.05);
  return t;
}

double brute_supcon(const Tensor& u, std::span<const std::size_t> labels, double tau) {
  const std::size_t b = u.rows();
  auto cosine = [&](std::size_t i, std::size_t j) {
    double num = 0.0, ni = 0.0, nj = 0.0;
    for (std::size_t k = 0; k < u.cols(); ++k) {
      num += u(i, k) * u(j, k);
      ni += u(i, k) * u(i, k);
      nj += u(j, k) * u(j, k);
    }
    return num / (std::sqrt(ni) * std::sqrt(nj));
  };
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::size_t> positives;
    for (std::size_t j = 0; j < b; ++j)
      if (j != i && labels[j] == labels[i]) positives.push_back(j);
    if (positives.empty()) continue;
    double denom = 0.0;
    for (std::size_t a = 0; a < b; ++a)
      if (a != i) denom += std::exp(cosine(i, a) / tau);
    double term = 0.0;
    for (std::size_t p : positives) term += -std::log(std::exp(cosine(i, p) / tau) / denom);
    total += term / static_cast<double>(positives.size());
    ++anchors;
  }
  return anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
}

namespace {

double hsic(const Tensor& k, const Tensor& l) {
  const std::size_t n = k.rows();
  Tensor h(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) h(i, j) = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
  const Tensor khlh = matmul(matmul(matmul(k, h), l), h);
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) trace += khlh(i, i);
  const double m = static_cast<double>(n - 1);
  return trace / (m * m);
}

}  // namespace

double hsic_cka(const Tensor& x, const Tensor& y) {
  const Tensor k = matmul_nt(x, x);
  const Tensor l = matmul_nt(y, y);
  return hsic(k, l) / std::sqrt(hsic(k, k) * hsic(l, l));
}

namespace {

// Scalar probe L = sum(R .* y) so that dL/dy = R.
double weighted_sum(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

void track(OpCheck& check, double err) { check.max_error = std::max(check.max_error, err); }

double check_input(const ScalarFn& f, const Tensor& x, const Tensor& analytic) {
  return max_relative_error(analytic, finite_diff_grad(f, x));
}

// Analytic and numeric gradients of several inputs flattened into one vector,
// so the error is relative to the whole gradient rather than to each piece.
// Some pieces are zero analytically (a bias feeding train-mode batch norm).
struct JointCheck {
  std::vector<double> analytic;
  std::vector<double> numeric;

  void add(const ScalarFn& f, const Tensor& x, const Tensor& grad) {
    const Tensor n = finite_diff_grad(f, x);
    const Tensor a = grad.empty() ? Tensor(n.rows(), n.cols()) : grad;
    analytic.insert(analytic.end(), a.values().begin(), a.values().end());
    numeric.insert(numeric.end(), n.values().begin(), n.values().end());
  }
  double error() const {
    Tensor a(1, analytic.size()), n(1, numeric.size());
    std::copy(analytic.begin(), analytic.end(), a.values().begin());
    std::copy(numeric.begin(), numeric.end(), n.values().begin());
    return max_relative_error(a, n);
  }
};

// Loss of a full model as a function of one slot's value.
using ModelLoss = std::function<double(const ModelParams&)>;

double check_slots(const ModelParams& params, const Gradients& grads, const ModelLoss& loss,
                   GroupSet wanted) {
  JointCheck joint;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamSlot& s = params.slot(i);
    if (!s.trainable() || !wanted.test(static_cast<std::size_t>(s.group()))) continue;
    joint.add(
        [&](const Tensor& v) {
          ModelParams p = params;
          p.set_value(i, v);
          return loss(p);
        },
        params.value(i), grads[i]);
  }
  return joint.error();
}

ModelParams perturbed_model(const ArchConfig& arch, Rng& rng, std::uint64_t seed) {
  ModelParams p = init_params(arch, seed);
  // Move batch norm affine parameters off identity so their gradients are generic.
  for (std::size_t i = 0; i < p.size(); ++i) {
    const SlotKind kind = p.slot(i).kind();
    Tensor& v = p.mutable_value(i);
    if (kind == SlotKind::kBnGamma || kind == SlotKind::kBnBeta || kind == SlotKind::kBias) {
      for (double& e : v.values()) e += 0.3 * rng.normal();
    } else if (kind == SlotKind::kBnRunningVar) {
      for (double& e : v.values()) e = rng.uniform(0.5, 2.0);
    } else if (kind == SlotKind::kBnRunningMean) {
      for (double& e : v.values()) e = 0.3 * rng.normal();
    }
  }
  return p;
}

// Smallest |pre-activation| over every ReLU on the forward pass.
double relu_margin(const ModelParams& p, const ForwardTrace& tr) {
  double margin = 1e300;
  auto scan = [&](const std::vector<LayerRef>& layers, const StackTrace& st) {
    for (std::size_t k = 0; k < layers.size() && k < st.inputs.size(); ++k)
      if (layers[k].kind == LayerKind::kRelu)
        for (double v : st.inputs[k].values()) margin = std::min(margin, std::abs(v));
  };
  scan(p.layout().encoder, tr.encoder);
  scan(p.layout().projector, tr.projector);
  return margin;
}

// Smallest train-mode batch variance over every batch norm.
double min_batch_var(const ForwardTrace& tr) {
  double v = 1e300;
  for (const StackTrace* st : {&tr.encoder, &tr.projector})
    for (const BatchNormCache& c : st->bn)
      for (double b : c.batch_var) v = std::min(v, b);
  return v;
}

// Central differences are only valid away from ReLU kinks, nearly constant
// batch norm columns and near-zero rows of u (cosine similarity), where the
// curvature blows up; such draws are redrawn.
ModelParams smooth_model(const ArchConfig& arch, Rng& rng, std::uint64_t seed, const Tensor& x,
                         Mode mode) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    ModelParams p = perturbed_model(arch, rng, seed + 7919 * attempt);
    const ForwardTrace tr = forward(p, x, mode);
    double min_norm = 1e300;
    for (std::size_t i = 0; i < tr.u.rows(); ++i) min_norm = std::min(min_norm, l2_norm(tr.u.row(i)));
    if (attempt == 50 || (relu_margin(p, tr) > 1e-3 && min_batch_var(tr) > 1e-2 && min_norm > 0.1))
      return p;
  }
}

std::vector<std::size_t> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i < classes ? i : rng.below(classes);
  rng.shuffle(std::span<std::size_t>(labels));
  return labels;
}

}  // namespace

std::vector<OpCheck> gradient_suite(std::size_t trials, std::uint64_t seed) {
  OpCheck linear{"linear", trials}, relu{"relu", trials}, bn_train{"batchnorm_train", trials},
      bn_eval{"batchnorm_eval", trials}, softmax{"softmax", trials}, ce{"cross_entropy", trials},
      supcon{"sup_con_loss", trials}, prox{"fedprox_penalty", trials},
      stage1{"model_stage1", trials}, stage2{"model_global_head", trials},
      joint{"model_global_path_full", trials}, post{"model_post_head", trials};
  Rng rng(seed, 0x6ad);

  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t b = 2 + rng.below(5);
    const std::size_t in = 1 + rng.below(5);
    const std::size_t out = 1 + rng.below(5);

    {
      const Tensor x = random_tensor(rng, b, in);
      const Tensor w = random_tensor(rng, in, out);
      const Tensor bias = random_tensor(rng, 1, out);
      const Tensor r = random_tensor(rng, b, out);
      Tensor dw, db;
      const Tensor dx = linear_backward(x, w, r, &dw, &db);
      track(linear, check_input([&](const Tensor& v) { return weighted_sum(linear_forward(v, w, bias), r); }, x, dx));
      track(linear, check_input([&](const Tensor& v) { return weighted_sum(linear_forward(x, v, bias), r); }, w, dw));
      track(linear, check_input([&](const Tensor& v) { return weighted_sum(linear_forward(x, w, v), r); }, bias, db));
    }
    {
      const Tensor x = random_nonzero(rng, b, in);
      const Tensor r = random_tensor(rng, b, in);
      track(relu, check_input([&](const Tensor& v) { return weighted_sum(relu_forward(v), r); }, x,
                              relu_backward(x, r)));
    }
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      OpCheck& check = mode == Mode::kTrain ? bn_train : bn_eval;
      const Tensor x = random_tensor(rng, b, in, 2.0);
      const Tensor gamma = random_tensor(rng, 1, in);
      const Tensor beta = random_tensor(rng, 1, in);
      Tensor rm = random_tensor(rng, 1, in);
      Tensor rv(1, in);
      for (double& v : rv.values()) v = rng.uniform(0.5, 2.0);
      const Tensor r = random_tensor(rng, b, in);
      const BatchNormConfig cfg;
      BatchNormCache cache;
      batchnorm_forward(x, gamma, beta, rm, rv, mode, cfg, cache);
      Tensor dgamma, dbeta;
      const Tensor dx = batchnorm_backward(cache, gamma, r, &dgamma, &dbeta);
      auto fwd = [&](const Tensor& xv, const Tensor& g, const Tensor& be) {
        BatchNormCache c;
        return weighted_sum(batchnorm_forward(xv, g, be, rm, rv, mode, cfg, c), r);
      };
      JointCheck joint;
      joint.add([&](const Tensor& v) { return fwd(v, gamma, beta); }, x, dx);
      joint.add([&](const Tensor& v) { return fwd(x, v, beta); }, gamma, dgamma);
      joint.add([&](const Tensor& v) { return fwd(x, gamma, v); }, beta, dbeta);
      track(check, joint.error());
    }
    {
      const Tensor x = random_tensor(rng, b, out + 1, 2.0);
      const Tensor r = random_tensor(rng, b, out + 1);
      const Tensor y = softmax_forward(x);
      track(softmax, check_input([&](const Tensor& v) { return weighted_sum(softmax_forward(v), r); },
                                 x, softmax_backward(y, r)));
    }
    {
      const std::size_t classes = 2 + rng.below(4);
      const Tensor logits = random_tensor(rng, b, classes, 2.0);
      const Tensor y = one_hot(random_labels(rng, b, classes), classes);
      const LossValue lv = cross_entropy(softmax_forward(logits), y);
      track(ce, check_input([&](const Tensor& v) { return cross_entropy(softmax_forward(v), y).value; },
                            logits, lv.grad));
    }
    {
      const std::size_t n = 2 + rng.below(7);
      const std::size_t d = 1 + rng.below(5);
      const Tensor u = random_tensor(rng, n, d);
      const std::vector<std::size_t> labels = random_labels(rng, n, 1 + rng.below(3));
      const double tau = rng.uniform(0.1, 1.0);
      const LossValue lv = sup_con_loss(u, labels, tau);
      track(supcon, check_input([&](const Tensor& v) { return sup_con_loss(v, labels, tau).value; }, u,
                                lv.grad));
    }
    {
      const double mu = rng.uniform(0.01, 2.0);
      SlotList local{{"a", Tag::kGlobal, random_tensor(rng, in, out)},
                     {"b", Tag::kGlobal, random_tensor(rng, 1, out)}};
      const SlotList global{{"a", Tag::kGlobal, random_tensor(rng, in, out)},
                            {"b", Tag::kGlobal, random_tensor(rng, 1, out)}};
      const ProximalTerm term = fedprox_penalty(local, global, mu);
      for (std::size_t s = 0; s < local.size(); ++s) {
        track(prox, check_input(
                        [&](const Tensor& v) {
                          SlotList l = local;
                          l[s].value = v;
                          return fedprox_penalty(l, global, mu).value;
                        },
                        local[s].value, term.grads[s].value));
      }
    }

    // Composed model paths on a small random architecture.
    ArchConfig arch;
    arch.input_dim = 2 + rng.below(4);
    arch.encoder_widths = {2 + rng.below(4), 2 + rng.below(3)};
    arch.encoder_bn = rng.uniform01() < 0.7;
    arch.projector_depth = 1 + rng.below(3);
    arch.projector_hidden = 2 + rng.below(4);
    arch.projector_out = 2 + rng.below(3);
    arch.projector_bn = rng.uniform01() < 0.7;
    arch.num_classes = 2 + rng.below(3);
    arch.global_head = HeadPlacement::kPreProjection;
    const std::size_t batch = 4 + rng.below(4);
    const Tensor x = random_tensor(rng, batch, arch.input_dim);
    const std::vector<std::size_t> labels = random_labels(rng, batch, arch.num_classes);
    const Tensor y = one_hot(labels, arch.num_classes);
    const LossConfig loss_cfg{rng.uniform(0.2, 1.0), rng.uniform(0.0, 2.0)};
    {
      const ModelParams p = smooth_model(arch, rng, seed + t, x, Mode::kTrain);
      auto loss = [&](const ModelParams& m) {
        const ForwardTrace tr = forward(m, x, Mode::kTrain, {.personal = true, .global = false});
        return stage1_loss(tr, y, labels, loss_cfg).total;
      };
      const ForwardTrace tr = forward(p, x, Mode::kTrain, {.personal = true, .global = false});
      Stage1Loss l = stage1_loss(tr, y, labels, loss_cfg);
      const Gradients g = backward(
          p, tr, {.personal_logits = l.d_personal_logits, .global_logits = {}, .u = l.d_u, .z = {}},
          main_branch());
      track(stage1, check_slots(p, g, loss, main_branch()));
    }
    for (Mode mode : {Mode::kEval, Mode::kTrain}) {
      // Eval: the stage-2 objective on the head alone. Train: the global path
      // back through the encoder.
      OpCheck& check = mode == Mode::kEval ? stage2 : joint;
      const GroupSet wanted = mode == Mode::kEval
                                  ? groups({Group::kGlobalClassifier})
                                  : groups({Group::kEncoder, Group::kGlobalClassifier});
      const ModelParams p = smooth_model(arch, rng, seed + t + 1000, x, mode);
      auto loss = [&](const ModelParams& m) {
        return cross_entropy(forward(m, x, mode, {.personal = false, .global = true}).y_s, y).value;
      };
      const ForwardTrace tr = forward(p, x, mode, {.personal = false, .global = true});
      const LossValue lv = cross_entropy(tr.y_s, y);
      const Gradients g = backward(p, tr, {.global_logits = lv.grad}, wanted);
      track(check, check_slots(p, g, loss, wanted));
    }
    {
      ArchConfig post_arch = arch;
      post_arch.global_head = HeadPlacement::kPostProjection;
      const GroupSet all = groups({Group::kEncoder, Group::kProjector, Group::kPersonalClassifier,
                                   Group::kGlobalClassifier});
      const ModelParams p = smooth_model(post_arch, rng, seed + t + 2000, x, Mode::kTrain);
      auto loss = [&](const ModelParams& m) {
        const ForwardTrace tr = forward(m, x, Mode::kTrain);
        return cross_entropy(tr.y_s, y).value + cross_entropy(tr.y_p, y).value;
      };
      const ForwardTrace tr = forward(p, x, Mode::kTrain);
      const Gradients g =
          backward(p, tr,
                   {.personal_logits = cross_entropy(tr.y_p, y).grad,
                    .global_logits = cross_entropy(tr.y_s, y).grad, .u = {}, .z = {}},
                   all);
      track(post, check_slots(p, g, loss, all));
    }
  }
  return {linear, relu, bn_train, bn_eval, softmax, ce, supcon, prox, stage1, stage2, joint, post};
}

OracleSweep supcon_oracle_sweep(double tau, std::uint64_t seed) {
  OracleSweep sweep;
  Rng rng(seed, 0x5c);
  for (std::size_t b = 2; b <= 6; ++b) {
    for (std::size_t classes = 2; classes <= 3; ++classes) {
      std::size_t patterns = 1;
      for (std::size_t i = 0; i < b; ++i) patterns *= classes;
      for (std::size_t d = 1; d <= 4; ++d) {
        for (std::size_t code = 0; code < patterns; ++code) {
          std::vector<std::size_t> labels(b);
          std::size_t c = code;
          for (std::size_t i = 0; i < b; ++i) {
            labels[i] = c % classes;
            c /= classes;
          }
          const Tensor u = random_tensor(rng, b, d);
          const double got = sup_con_loss(u, labels, tau).value;
          const double want = brute_supcon(u, labels, tau);
          sweep.max_abs_diff = std::max(sweep.max_abs_diff, std::abs(got - want));
          ++sweep.cases;
        }
      }
    }
  }
  return sweep;
}

OracleSweep cka_oracle_sweep(std::size_t instances, std::uint64_t seed) {
  OracleSweep sweep;
  Rng rng(seed, 0xcca);
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t n = 3 + rng.below(38);
    const Tensor x = random_tensor(rng, n, 1 + rng.below(10), rng.uniform(0.1, 5.0));
    Tensor y = random_tensor(rng, n, 1 + rng.below(10));
    if (t % 2 == 1) {
      // Partially aligned pair so values spread over (0, 1].
      Tensor mix = matmul(x, random_tensor(rng, x.cols(), y.cols()));
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = mix[i] + rng.uniform(0.0, 1.0) * y[i];
    }
    sweep.max_abs_diff = std::max(sweep.max_abs_diff, std::abs(linear_cka(x, y) - hsic_cka(x, y)));
    ++sweep.cases;
  }
  return sweep;
}

ArchConfig tiny_arch(HeadPlacement head, bool encoder_bn) {
  ArchConfig a;
  a.input_dim = 8;
  a.encoder_widths = {10, 6};
  a.encoder_bn = encoder_bn;
  a.projector_depth = 2;
  a.projector_hidden = 8;
  a.projector_out = 5;
  a.num_classes = 3;
  a.global_head = head;
  return a;
}

SyntheticSpec tiny_data_spec(std::size_t clients) {
  SyntheticSpec s;
  s.num_domains = clients;
  s.num_classes = 3;
  s.input_dim = 8;
  s.train_per_client = 36;
  s.test_per_client = 18;
  s.probe_per_domain = 6;
  s.seed = 11;
  return s;
}

std::vector<std::shared_ptr<const ClientData>> shared_clients(SyntheticData data) {
  std::vector<std::shared_ptr<const ClientData>> out;
  for (ClientData& c : data.clients) out.push_back(std::make_shared<const ClientData>(std::move(c)));
  return out;
}

FederationSetup tiny_setup(const MethodVariant& variant, std::size_t rounds, std::uint64_t seed,
                           std::size_t clients) {
  SyntheticData data = generate_synthetic(tiny_data_spec(clients));
  FederationSetup s;
  s.arch = tiny_arch();
  s.train.lr = 0.05;
  s.train.batch_size = 8;
  s.train.rounds = rounds;
  s.variant = variant;
  s.probe = data.probe.x;
  s.clients = shared_clients(std::move(data));
  s.seed = seed;
  return s;
}

}  // namespace dualfed::testsupport
