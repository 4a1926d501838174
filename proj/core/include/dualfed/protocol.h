#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dualfed/baselines.h"
#include "dualfed/data.h"
#include "dualfed/losses.h"
#include "dualfed/metrics.h"
#include "dualfed/model.h"
#include "dualfed/rng.h"
#include "dualfed/serialize.h"

namespace dualfed {

enum class Strategy { kStageWise, kSimultaneous };

struct TrainConfig {
  double lr = 0.01;
  double momentum = 0.5;
  std::size_t batch_size = 256;
  std::size_t local_epochs = 1;  // per stage
  std::size_t rounds = 300;
  Strategy strategy = Strategy::kStageWise;
  LossConfig loss;

  void validate() const;
};

// Per-slot momentum buffers, indexed like ModelParams.
struct OptimizerState {
  std::vector<Tensor> velocity;

  void reset() { velocity.clear(); }
};

// v <- momentum * v + g; w <- w - lr * v, for every slot with a non-empty
// gradient. Slots without a gradient are left untouched (and so is their
// velocity).
void sgd_step(ModelParams& params, const Gradients& grads, double lr, double momentum,
              OptimizerState& state);

struct ClientCounters {
  std::size_t stage1_batches = 0;
  std::size_t stage2_batches = 0;
  std::size_t joint_batches = 0;  // simultaneous and single-classifier updates
  std::size_t local_updates = 0;  // rounds of local training completed
};

struct ClientState {
  std::size_t client_id = 0;
  ModelParams params;
  std::shared_ptr<const ClientData> data;
  Rng rng;  // sole randomness source for this client
  OptimizerState optimizer;
  ClientCounters counters;
  double last_loss = 0.0;  // mean training loss of the last local update
};

ClientState make_client(std::size_t client_id, ModelParams params,
                        std::shared_ptr<const ClientData> data, std::uint64_t run_seed);

// Main branch (encoder, projector, personal head) on CE + lambda * SupCon with
// batch norm in train mode; the global head is never written. Momentum
// buffers are reset at entry.
void local_train_stage1(ClientState& client, const TrainConfig& config);

// Global head only, on CE of the global path with everything upstream in
// eval mode; no other slot (running statistics included) is written.
void local_train_stage2(ClientState& client, const TrainConfig& config);

// One optimizer step per batch over all four groups: the main branch gets the
// stage-1 gradient, the global head the global-path CE gradient taken with its
// input detached.
void local_train_simultaneous(ClientState& client, const TrainConfig& config);

// Cross-entropy on the single post-projection head; every trainable slot is
// updated. mu > 0 adds the FedProx proximal gradient toward `global_snapshot`.
void local_train_single(ClientState& client, const TrainConfig& config,
                        const SlotList& global_snapshot, double mu);

// Imports the snapshot, then runs the variant's local procedure.
void local_update(ClientState& client, const SlotList& global_snapshot,
                  const MethodVariant& variant, const TrainConfig& config);

// ---- communication -----------------------------------------------------------------

enum class Direction { kDown, kUp };

struct CommRecord {
  std::size_t round = 0;
  std::size_t client_id = 0;
  Direction direction = Direction::kDown;
  std::uint64_t param_count = 0;
  std::uint64_t bytes = 0;  // param_count * 8
};

class CommLedger {
 public:
  void record(std::size_t round, std::size_t client_id, Direction direction,
              std::uint64_t param_count);

  const std::vector<CommRecord>& records() const noexcept { return records_; }
  std::uint64_t total_bytes() const noexcept { return total_bytes_; }
  std::uint64_t bytes_in_round(std::size_t round) const;
  // round,client_id,direction,param_count,bytes
  std::string to_csv() const;

 private:
  std::vector<CommRecord> records_;
  std::uint64_t total_bytes_ = 0;
};

// Throws ProtocolError if any slot in the message is PERSONAL.
void check_message_privacy(const SlotList& message);

// Sees every message that crosses the wire, after it is logged.
using MessageTap = std::function<void(const CommRecord&, const SlotList&)>;

struct ServerState {
  SlotList global_params;  // GLOBAL slots only
  std::size_t round = 0;   // completed rounds
  CommLedger ledger;
  MessageTap tap;
};

ServerState make_server(const ModelParams& initial);

struct Upload {
  std::size_t client_id = 0;
  SlotList slots;
};

// Unweighted elementwise mean per slot, accumulated in ascending client_id
// order as a running mean (so identical uploads reproduce exactly). Throws
// ProtocolError for PERSONAL slots and SchemaError for mismatched layouts.
SlotList aggregate(std::span<const Upload> uploads);

struct RoundReport {
  std::size_t round = 0;
  double mean_train_loss = 0.0;
};

// One global round: broadcast GLOBAL slots (logged), local updates, upload
// GLOBAL slots (logged), aggregate. Messages with no slots are not sent.
// threads > 1 trains clients concurrently; results are identical to serial.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients,
                      const MethodVariant& variant, const TrainConfig& config,
                      std::size_t threads = 1);

// ---- full runs ---------------------------------------------------------------------------

struct FederationSetup {
  ArchConfig arch;  // the variant's head placement is applied on top
  TrainConfig train;
  MethodVariant variant;
  std::vector<std::shared_ptr<const ClientData>> clients;
  Tensor probe;  // shared probe inputs for cross-client CKA; may be empty
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::size_t threads = 1;
  // Called after every completed round.
  std::function<void(const ServerState&, const std::vector<ClientState>&)> on_round;
  MessageTap tap;
};

struct FederationResult {
  std::vector<MetricsRow> metrics;
  ServerState server;
  std::vector<ClientState> clients;
  // Best mean ensemble accuracy over evaluated rounds (0 when none ran).
  double best_mean_ensemble = 0.0;
  std::size_t best_round = 0;
};

MetricsRow evaluate_round(const ServerState& server, const std::vector<ClientState>& clients,
                          const Tensor& probe);

// T rounds, evaluating every eval_every rounds and after the last one.
FederationResult run_federation(const FederationSetup& setup);

}  // namespace dualfed
