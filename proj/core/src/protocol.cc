#include "dualfed/protocol.h"

#include <algorithm>
#include <cmath>
#include <future>
#include <sstream>

#include "dualfed/errors.h"

namespace dualfed {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum", "must be in [0, 1)");
  if (batch_size < 2) throw ConfigError("train.batch_size", "must be >= 2");
  if (local_epochs < 1) throw ConfigError("train.local_epochs", "must be >= 1");
  loss.validate();
}

void sgd_step(ModelParams& params, const Gradients& grads, double lr, double momentum,
              OptimizerState& state) {
  if (grads.size() != params.size()) {
    throw DimensionError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " slots");
  }
  if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), Tensor());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const Tensor& g = grads[i];
    if (g.empty()) continue;
    Tensor& w = params.mutable_value(i);
    if (!w.same_shape(g)) {
      throw DimensionError("sgd_step: gradient shape mismatch for '" + params.slot(i).name() + "'");
    }
    Tensor& v = state.velocity[i];
    if (v.empty()) v = Tensor(g.rows(), g.cols());
    for (std::size_t k = 0; k < g.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      w[k] -= lr * v[k];
    }
    check_finite(w, "sgd_step");
  }
}

ClientState make_client(std::size_t client_id, ModelParams params,
                        std::shared_ptr<const ClientData> data, std::uint64_t run_seed) {
  return ClientState{client_id, std::move(params), std::move(data),
                     Rng(run_seed, 0x100000 + client_id), OptimizerState{}, ClientCounters{},
                     0.0};
}

namespace {

const Dataset& train_set(const ClientState& client) {
  if (!client.data || client.data->train.size() == 0) {
    throw DataError("client " + std::to_string(client.client_id) + ": empty training set");
  }
  return client.data->train;
}

void require_global_head(const ClientState& client, const char* op) {
  if (!client.params.layout().global_head) {
    throw Error(std::string(op) + ": model has no global classifier");
  }
}

void merge_into(Gradients& dst, Gradients&& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (src[i].empty()) continue;
    if (dst[i].empty()) {
      dst[i] = std::move(src[i]);
    } else {
      add_inplace(dst[i], src[i]);
    }
  }
}

}  // namespace

void local_train_stage1(ClientState& client, const TrainConfig& config) {
  const Dataset& data = train_set(client);
  client.optimizer.reset();
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    BatchIterator batches(data, config.batch_size, client.rng);
    while (auto batch = batches.next()) {
      ForwardTrace trace =
          forward(client.params, batch->x, Mode::kTrain, {.personal = true, .global = false});
      commit_running_stats(client.params, trace);
      Stage1Loss loss = stage1_loss(trace, batch->y, batch->labels, config.loss);
      Gradients grads = backward(client.params, trace,
                                 {.personal_logits = std::move(loss.d_personal_logits),
                                  .global_logits = {},
                                  .u = std::move(loss.d_u),
                                  .z = {}},
                                 main_branch());
      sgd_step(client.params, grads, config.lr, config.momentum, client.optimizer);
      loss_sum += loss.total;
      ++steps;
      ++client.counters.stage1_batches;
    }
  }
  client.last_loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
}

void local_train_stage2(ClientState& client, const TrainConfig& config) {
  const Dataset& data = train_set(client);
  require_global_head(client, "local_train_stage2");
  client.optimizer.reset();
  const GroupSet head = groups({Group::kGlobalClassifier});
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    BatchIterator batches(data, config.batch_size, client.rng);
    while (auto batch = batches.next()) {
      ForwardTrace trace =
          forward(client.params, batch->x, Mode::kEval, {.personal = false, .global = true});
      LossValue ce = cross_entropy(trace.y_s, batch->y);
      Gradients grads = backward(client.params, trace, {.global_logits = std::move(ce.grad)}, head);
      sgd_step(client.params, grads, config.lr, config.momentum, client.optimizer);
      ++client.counters.stage2_batches;
    }
  }
}

void local_train_simultaneous(ClientState& client, const TrainConfig& config) {
  const Dataset& data = train_set(client);
  require_global_head(client, "local_train_simultaneous");
  client.optimizer.reset();
  const GroupSet head = groups({Group::kGlobalClassifier});
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    BatchIterator batches(data, config.batch_size, client.rng);
    while (auto batch = batches.next()) {
      ForwardTrace trace = forward(client.params, batch->x, Mode::kTrain);
      commit_running_stats(client.params, trace);
      Stage1Loss main = stage1_loss(trace, batch->y, batch->labels, config.loss);
      LossValue global = cross_entropy(trace.y_s, batch->y);
      Gradients grads = backward(client.params, trace,
                                 {.personal_logits = std::move(main.d_personal_logits),
                                  .global_logits = {},
                                  .u = std::move(main.d_u),
                                  .z = {}},
                                 main_branch());
      merge_into(grads,
                 backward(client.params, trace, {.global_logits = std::move(global.grad)}, head));
      sgd_step(client.params, grads, config.lr, config.momentum, client.optimizer);
      loss_sum += main.total + global.value;
      ++steps;
      ++client.counters.joint_batches;
    }
  }
  client.last_loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
}

void local_train_single(ClientState& client, const TrainConfig& config,
                        const SlotList& global_snapshot, double mu) {
  const Dataset& data = train_set(client);
  client.optimizer.reset();
  const GroupSet all_groups = groups({Group::kEncoder, Group::kProjector,
                                      Group::kPersonalClassifier, Group::kGlobalClassifier});
  double loss_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    BatchIterator batches(data, config.batch_size, client.rng);
    while (auto batch = batches.next()) {
      ForwardTrace trace =
          forward(client.params, batch->x, Mode::kTrain, {.personal = true, .global = false});
      commit_running_stats(client.params, trace);
      LossValue ce = cross_entropy(trace.y_p, batch->y);
      Gradients grads =
          backward(client.params, trace, {.personal_logits = std::move(ce.grad)}, all_groups);
      double penalty = 0.0;
      if (mu > 0.0) penalty = add_fedprox_gradient(client.params, global_snapshot, mu, grads);
      sgd_step(client.params, grads, config.lr, config.momentum, client.optimizer);
      loss_sum += ce.value + penalty;
      ++steps;
      ++client.counters.joint_batches;
    }
  }
  client.last_loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
}

void local_update(ClientState& client, const SlotList& global_snapshot,
                  const MethodVariant& variant, const TrainConfig& config) {
  import_slots(client.params, global_snapshot);
  switch (variant.procedure) {
    case Procedure::kDualClassifier:
      if (config.strategy == Strategy::kStageWise) {
        local_train_stage1(client, config);
        const double main_loss = client.last_loss;
        local_train_stage2(client, config);
        client.last_loss = main_loss;
      } else {
        local_train_simultaneous(client, config);
      }
      break;
    case Procedure::kSingleClassifier:
      local_train_single(client, config, global_snapshot, variant.mu);
      break;
  }
  ++client.counters.local_updates;
}

// ---- communication ---------------------------------------------------------------------

void CommLedger::record(std::size_t round, std::size_t client_id, Direction direction,
                        std::uint64_t param_count) {
  const std::uint64_t bytes = param_count * sizeof(double);
  records_.push_back({round, client_id, direction, param_count, bytes});
  total_bytes_ += bytes;
}

std::uint64_t CommLedger::bytes_in_round(std::size_t round) const {
  std::uint64_t total = 0;
  for (const CommRecord& r : records_)
    if (r.round == round) total += r.bytes;
  return total;
}

std::string CommLedger::to_csv() const {
  std::ostringstream out;
  out << "round,client_id,direction,param_count,bytes\n";
  for (const CommRecord& r : records_) {
    out << r.round << ',' << r.client_id << ',' << (r.direction == Direction::kUp ? "up" : "down")
        << ',' << r.param_count << ',' << r.bytes << '\n';
  }
  return out.str();
}

void check_message_privacy(const SlotList& message) {
  for (const NamedTensor& s : message) {
    if (s.tag != Tag::kGlobal) {
      throw ProtocolError("personal slot '" + s.name + "' present in a federated message");
    }
  }
}

ServerState make_server(const ModelParams& initial) {
  ServerState server;
  server.global_params = export_slots(initial, Tag::kGlobal);
  check_message_privacy(server.global_params);
  return server;
}

SlotList aggregate(std::span<const Upload> uploads) {
  if (uploads.empty()) throw Error("aggregate: no uploads");
  std::vector<const Upload*> order;
  for (const Upload& u : uploads) {
    check_message_privacy(u.slots);
    order.push_back(&u);
  }
  std::sort(order.begin(), order.end(),
            [](const Upload* a, const Upload* b) { return a->client_id < b->client_id; });

  const SlotList& schema = order.front()->slots;
  for (const Upload* u : order) {
    if (u->slots.size() != schema.size()) throw SchemaError("aggregate: slot count mismatch");
    for (std::size_t i = 0; i < schema.size(); ++i) {
      if (u->slots[i].name != schema[i].name || !u->slots[i].value.same_shape(schema[i].value)) {
        throw SchemaError("aggregate: slot '" + u->slots[i].name + "' from client " +
                          std::to_string(u->client_id) + " does not match '" + schema[i].name +
                          "'");
      }
    }
  }

  SlotList mean = schema;
  for (std::size_t k = 1; k < order.size(); ++k) {
    const double count = static_cast<double>(k + 1);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      Tensor& m = mean[i].value;
      const Tensor& x = order[k]->slots[i].value;
      for (std::size_t e = 0; e < m.size(); ++e) m[e] += (x[e] - m[e]) / count;
    }
  }
  return mean;
}

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const MethodVariant& variant, const TrainConfig& config,
                      std::size_t threads) {
  if (clients.empty()) throw Error("run_round: no clients");
  const std::size_t round = server.round + 1;
  const SlotList& broadcast = server.global_params;
  check_message_privacy(broadcast);
  const bool exchange = !broadcast.empty();

  if (exchange) {
    for (const ClientState& c : clients) {
      server.ledger.record(round, c.client_id, Direction::kDown, value_count(broadcast));
      if (server.tap) server.tap(server.ledger.records().back(), broadcast);
    }
  }

  if (threads <= 1 || clients.size() == 1) {
    for (ClientState& c : clients) local_update(c, broadcast, variant, config);
  } else {
    for (std::size_t start = 0; start < clients.size(); start += threads) {
      const std::size_t end = std::min(clients.size(), start + threads);
      std::vector<std::future<void>> jobs;
      for (std::size_t i = start; i < end; ++i) {
        jobs.push_back(std::async(std::launch::async, [&, i] {
          local_update(clients[i], broadcast, variant, config);
        }));
      }
      for (auto& j : jobs) j.get();
    }
  }

  RoundReport report{round, 0.0};
  std::vector<Upload> uploads;
  for (const ClientState& c : clients) {
    report.mean_train_loss += c.last_loss;
    SlotList up = export_slots(c.params, Tag::kGlobal);
    check_message_privacy(up);
    if (exchange) {
      server.ledger.record(round, c.client_id, Direction::kUp, value_count(up));
      if (server.tap) server.tap(server.ledger.records().back(), up);
    }
    uploads.push_back({c.client_id, std::move(up)});
  }
  report.mean_train_loss /= static_cast<double>(clients.size());

  if (exchange) server.global_params = aggregate(uploads);
  server.round = round;
  return report;
}

MetricsRow evaluate_round(const ServerState& server, const std::vector<ClientState>& clients,
                          const Tensor& probe) {
  MetricsRow row;
  row.round = server.round;
  for (const ClientState& c : clients) row.clients.push_back(evaluate_client(c.params, c.data->test));
  row.finalize_means();
  row.cka_z = row.cka_u = std::nan("");
  if (clients.size() >= 2 && probe.rows() >= 2) {
    std::vector<const ModelParams*> models;
    for (const ClientState& c : clients) models.push_back(&c.params);
    row.cka_z = cross_client_cka(models, probe, RepStage::kPre);
    row.cka_u = cross_client_cka(models, probe, RepStage::kPost);
  }
  row.comm_bytes = server.ledger.total_bytes();
  return row;
}

FederationResult run_federation(const FederationSetup& setup) {
  if (setup.clients.empty()) throw ConfigError("data.num_domains", "need at least one client");
  if (setup.eval_every < 1) throw ConfigError("run.eval_every", "must be >= 1");
  const ArchConfig arch = apply_variant(setup.variant, setup.arch);
  const ModelParams initial = init_params(arch, setup.seed, setup.variant.tags);

  FederationResult result;
  result.server = make_server(initial);
  result.server.tap = setup.tap;
  for (std::size_t m = 0; m < setup.clients.size(); ++m) {
    if (setup.clients[m]->train.input_dim() != arch.input_dim) {
      throw ConfigError("arch.input_dim", "client " + std::to_string(m) + " data has " +
                                              std::to_string(setup.clients[m]->train.input_dim()) +
                                              " features");
    }
    result.clients.push_back(make_client(m, initial, setup.clients[m], setup.seed));
  }

  for (std::size_t t = 1; t <= setup.train.rounds; ++t) {
    run_round(result.server, result.clients, setup.variant, setup.train, setup.threads);
    if (setup.on_round) setup.on_round(result.server, result.clients);
    if (t % setup.eval_every == 0 || t == setup.train.rounds) {
      MetricsRow row = evaluate_round(result.server, result.clients, setup.probe);
      if (result.metrics.empty() || row.mean_acc_ensemble > result.best_mean_ensemble) {
        result.best_mean_ensemble = row.mean_acc_ensemble;
        result.best_round = row.round;
      }
      result.metrics.push_back(std::move(row));
    }
  }
  return result;
}

}  // namespace dualfed
