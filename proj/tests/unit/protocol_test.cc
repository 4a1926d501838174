#include <gtest/gtest.h>

#include <cmath>

#include "dualfed/errors.h"
#include "dualfed/protocol.h"
#include "support.h"

namespace dualfed {
namespace {

using testsupport::tiny_arch;
using testsupport::tiny_setup;

SlotList one_slot(double v) { return {{"w", Tag::kGlobal, Tensor::from_rows({{v, 2 * v}})}}; }

std::shared_ptr<const ClientData> tiny_client_data(std::size_t index = 0) {
  return testsupport::shared_clients(generate_synthetic(testsupport::tiny_data_spec()))[index];
}

ClientState tiny_client(HeadPlacement head = HeadPlacement::kPreProjection, bool encoder_bn = true) {
  return make_client(0, init_params(tiny_arch(head, encoder_bn), 5), tiny_client_data(), 9);
}

bool group_unchanged(const ModelParams& a, const ModelParams& b, Group g) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.slot(i).group() == g && !(a.value(i) == b.value(i))) return false;
  return true;
}

// ---- optimizer ----------------------------------------------------------------------

TEST(Sgd, ZeroLearningRateStillAccumulatesVelocity) {
  ModelParams p = init_params(tiny_arch(), 0);
  const ModelParams before = p;
  Gradients g(p.size());
  g[0] = Tensor(p.value(0).rows(), p.value(0).cols(), 1.0);
  OptimizerState st;
  sgd_step(p, g, 0.0, 0.5, st);
  sgd_step(p, g, 0.0, 0.5, st);
  EXPECT_EQ(p, before);
  for (double v : st.velocity[0].values()) EXPECT_EQ(v, 1.5);
}

TEST(Sgd, NoMomentumIsPlainDescent) {
  ModelParams p = init_params(tiny_arch(), 0);
  const Tensor w0 = p.value(0);
  Gradients g(p.size());
  g[0] = Tensor(w0.rows(), w0.cols(), 2.0);
  OptimizerState st;
  sgd_step(p, g, 0.1, 0.0, st);
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_EQ(p.value(0)[i], w0[i] - 0.1 * 2.0);
}

TEST(Sgd, TwoMomentumStepsOnConstantGradient) {
  ModelParams p = init_params(tiny_arch(), 0);
  const Tensor w0 = p.value(0);
  Gradients g(p.size());
  g[0] = Tensor(w0.rows(), w0.cols(), 0.4);
  OptimizerState st;
  sgd_step(p, g, 0.1, 0.5, st);
  sgd_step(p, g, 0.1, 0.5, st);
  for (std::size_t i = 0; i < w0.size(); ++i)
    EXPECT_NEAR(p.value(0)[i], w0[i] - 0.1 * (0.4 + 1.5 * 0.4), 1e-15);
}

TEST(Sgd, ShapeMismatch) {
  ModelParams p = init_params(tiny_arch(), 0);
  Gradients g(p.size());
  g[0] = Tensor(1, 1, 1.0);
  OptimizerState st;
  EXPECT_THROW(sgd_step(p, g, 0.1, 0.5, st), DimensionError);
  EXPECT_THROW(sgd_step(p, Gradients(2), 0.1, 0.5, st), DimensionError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lr = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.local_epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---- local training -----------------------------------------------------------------

TEST(Stage1, FreezesGlobalHeadAndTrainsMainBranch) {
  ClientState c = tiny_client();
  const ModelParams before = c.params;
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  local_train_stage1(c, cfg);
  EXPECT_TRUE(group_unchanged(before, c.params, Group::kGlobalClassifier));
  EXPECT_FALSE(group_unchanged(before, c.params, Group::kEncoder));
  EXPECT_FALSE(group_unchanged(before, c.params, Group::kProjector));
  EXPECT_FALSE(group_unchanged(before, c.params, Group::kPersonalClassifier));
}

TEST(Stage1, ConsumesEpochsTimesBatches) {
  ClientState c = tiny_client();
  TrainConfig cfg;
  cfg.batch_size = 8;  // 36 samples: 4 full batches and one of 4
  cfg.local_epochs = 3;
  local_train_stage1(c, cfg);
  EXPECT_EQ(c.counters.stage1_batches, 3u * 5u);
  local_train_stage2(c, cfg);
  EXPECT_EQ(c.counters.stage2_batches, 3u * 5u);
}

TEST(Stage1, OneStepMatchesHandSgd) {
  // Two samples, one batch, lambda 0: the update is -lr * dCE/dw for every
  // main-branch weight, with the gradient taken by finite differences.
  auto data = std::make_shared<ClientData>();
  const auto full = tiny_client_data();
  std::vector<std::size_t> rows{0, 1};
  data->train.x = gather_rows(full->train.x, rows);
  data->train.labels = {full->train.labels[0], full->train.labels[1]};
  data->train.num_classes = 3;
  data->test = data->train;
  const ModelParams start = init_params(tiny_arch(), 6);
  ClientState c = make_client(0, start, data, 1);
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.lr = 0.1;
  cfg.loss.lambda = 0.0;
  local_train_stage1(c, cfg);

  const Tensor y = one_hot(data->train.labels, 3);
  for (std::size_t i = 0; i < start.size(); ++i) {
    const ParamSlot& s = start.slot(i);
    if (!s.trainable() || !main_branch().test(static_cast<std::size_t>(s.group()))) continue;
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& v) {
          ModelParams p = start;
          p.set_value(i, v);
          return cross_entropy(forward(p, data->train.x, Mode::kTrain, {.personal = true, .global = false}).y_p, y)
              .value;
        },
        start.value(i));
    Tensor expected = start.value(i);
    for (std::size_t k = 0; k < expected.size(); ++k) expected[k] -= cfg.lr * numeric[k];
    const Tensor& got = c.params.value(i);
    double scale = 1e-8;
    for (std::size_t k = 0; k < got.size(); ++k) scale = std::max(scale, std::abs(start.value(i)[k] - got[k]));
    for (std::size_t k = 0; k < got.size(); ++k)
      EXPECT_NEAR(got[k], expected[k], 1e-5 * scale + 1e-10) << s.name();
  }
}

TEST(Stage2, FreezesMainBranchIncludingRunningStats) {
  ClientState c = tiny_client();
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  local_train_stage1(c, cfg);
  const ModelParams before = c.params;
  local_train_stage2(c, cfg);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before.slot(i).group() != Group::kGlobalClassifier)
      EXPECT_EQ(before.value(i), c.params.value(i)) << before.slot(i).name();
  }
  EXPECT_FALSE(group_unchanged(before, c.params, Group::kGlobalClassifier));
}

TEST(Stage2, ZeroLearningRateChangesNothing) {
  // lr must be > 0 in a validated config, so call the step directly.
  ClientState c = tiny_client();
  const ModelParams before = c.params;
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.lr = 0.0;
  local_train_stage2(c, cfg);
  EXPECT_EQ(c.params, before);
}

TEST(Stage2, NeedsGlobalHead) {
  ClientState c = tiny_client(HeadPlacement::kNone);
  EXPECT_THROW(local_train_stage2(c, TrainConfig{}), Error);
}

TEST(LocalTraining, EmptyDatasetRejected) {
  auto data = std::make_shared<ClientData>();
  data->train.num_classes = 3;
  data->train.x = Tensor(0, 8);
  ClientState c = make_client(0, init_params(tiny_arch(), 0), data, 0);
  EXPECT_THROW(local_train_stage1(c, TrainConfig{}), DataError);
  EXPECT_THROW(local_train_stage2(c, TrainConfig{}), DataError);
  EXPECT_THROW(local_train_simultaneous(c, TrainConfig{}), DataError);
}

TEST(Simultaneous, EveryGroupMoves) {
  ClientState c = tiny_client();
  const ModelParams before = c.params;
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.lr = 0.05;
  local_train_simultaneous(c, cfg);
  for (Group g : {Group::kEncoder, Group::kProjector, Group::kPersonalClassifier,
                  Group::kGlobalClassifier}) {
    EXPECT_FALSE(group_unchanged(before, c.params, g)) << to_string(g);
  }
}

TEST(Simultaneous, HeadStepEqualsStageTwoStep) {
  // Without batch norm in the encoder, train and eval mode agree on z, so the
  // first head update is the same under both procedures.
  TrainConfig cfg;
  cfg.batch_size = 64;  // one batch covering all 36 samples
  cfg.lr = 0.1;
  cfg.loss.lambda = 0.0;
  ClientState a = tiny_client(HeadPlacement::kPreProjection, false);
  ClientState b = tiny_client(HeadPlacement::kPreProjection, false);
  local_train_simultaneous(a, cfg);
  local_train_stage2(b, cfg);
  for (const char* name : {"global_classifier.weight", "global_classifier.bias"}) {
    const std::size_t i = *a.params.find(name);
    const Tensor& x = a.params.value(i);
    const Tensor& y = b.params.value(i);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(x[k], y[k], 1e-14) << name;
  }
}

TEST(Simultaneous, DeterministicBySeed) {
  ClientState a = tiny_client(), b = tiny_client();
  TrainConfig cfg;
  cfg.batch_size = 8;
  local_train_simultaneous(a, cfg);
  local_train_simultaneous(b, cfg);
  EXPECT_EQ(a.params, b.params);
}

// ---- aggregation ----------------------------------------------------------------------

TEST(Aggregate, Examples) {
  const std::vector<Upload> same{{0, one_slot(3)}, {1, one_slot(3)}, {2, one_slot(3)}};
  EXPECT_EQ(aggregate(same), one_slot(3));
  const std::vector<Upload> two{{0, one_slot(0)}, {1, one_slot(2)}};
  EXPECT_EQ(aggregate(two), one_slot(1));
  const std::vector<Upload> three{{0, one_slot(1)}, {1, one_slot(2)}, {2, one_slot(6)}};
  EXPECT_EQ(aggregate(three), one_slot(3));
  const std::vector<Upload> single{{4, one_slot(0.123)}};
  EXPECT_EQ(aggregate(single), one_slot(0.123));
}

TEST(Aggregate, PermutationInvariantBitwise) {
  Rng rng(1);
  std::vector<Upload> ups;
  for (std::size_t m = 0; m < 5; ++m)
    ups.push_back({m, {{"w", Tag::kGlobal, testsupport::random_tensor(rng, 3, 4)}}});
  const SlotList base = aggregate(ups);
  for (int t = 0; t < 10; ++t) {
    rng.shuffle(std::span<Upload>(ups));
    EXPECT_EQ(aggregate(ups), base);
  }
}

TEST(Aggregate, Errors) {
  std::vector<Upload> personal{{0, {{"w", Tag::kPersonal, Tensor(1, 1)}}}};
  EXPECT_THROW(aggregate(personal), ProtocolError);
  std::vector<Upload> mismatch{{0, one_slot(1)}, {1, {{"v", Tag::kGlobal, Tensor(1, 2)}}}};
  EXPECT_THROW(aggregate(mismatch), SchemaError);
  std::vector<Upload> shape{{0, one_slot(1)}, {1, {{"w", Tag::kGlobal, Tensor(2, 2)}}}};
  EXPECT_THROW(aggregate(shape), SchemaError);
  EXPECT_THROW(aggregate(std::vector<Upload>{}), Error);
}

TEST(Privacy, CheckRejectsPersonalSlots) {
  EXPECT_NO_THROW(check_message_privacy(one_slot(1)));
  EXPECT_THROW(check_message_privacy({{"p", Tag::kPersonal, Tensor(1, 1)}}), ProtocolError);
}

// ---- rounds -----------------------------------------------------------------------------

TEST(Round, SingleClientSnapshotEqualsUpload) {
  FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 2, 0, 1);
  const FederationResult r = run_federation(s);
  EXPECT_EQ(r.server.global_params, export_slots(r.clients[0].params, Tag::kGlobal));
}

TEST(Round, EveryMessageIsGlobalOnly) {
  FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 3, 0);
  std::size_t up = 0, down = 0;
  s.tap = [&](const CommRecord& rec, const SlotList& msg) {
    (rec.direction == Direction::kUp ? up : down) += 1;
    EXPECT_EQ(rec.param_count, value_count(msg));
    for (const NamedTensor& t : msg) EXPECT_EQ(t.tag, Tag::kGlobal) << t.name;
  };
  run_federation(s);
  EXPECT_EQ(up, 9u);
  EXPECT_EQ(down, 9u);
}

TEST(Round, PersonalSlotsStayLocal) {
  const FederationResult r = run_federation(tiny_setup(make_variant(Method::kDualFed), 3, 0));
  const ModelParams& a = r.clients[0].params;
  const ModelParams& b = r.clients[1].params;
  bool personal_differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.slot(i).tag() == Tag::kPersonal && !(a.value(i) == b.value(i))) personal_differs = true;
  }
  EXPECT_TRUE(personal_differs);
  for (const NamedTensor& s : r.server.global_params) EXPECT_EQ(s.tag, Tag::kGlobal);
}

TEST(Round, LedgerMatchesClosedForm) {
  const FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 4, 0);
  const FederationResult r = run_federation(s);
  const ModelParams& p = r.clients[0].params;
  const std::uint64_t shared = p.count_values([](const ParamSlot& slot) {
    return slot.group() == Group::kEncoder || slot.group() == Group::kGlobalClassifier
               ? slot.trainable()
               : false;
  });
  for (std::size_t t = 1; t <= 4; ++t) {
    EXPECT_EQ(r.server.ledger.bytes_in_round(t), 2u * 3u * shared * 8u);
  }
  for (const CommRecord& rec : r.server.ledger.records()) EXPECT_EQ(rec.bytes, rec.param_count * 8);
  EXPECT_EQ(r.metrics.back().comm_bytes, r.server.ledger.total_bytes());
}

TEST(Round, CommBytesMonotone) {
  const FederationResult r = run_federation(tiny_setup(make_variant(Method::kDualFed), 4, 0));
  for (std::size_t i = 1; i < r.metrics.size(); ++i)
    EXPECT_GE(r.metrics[i].comm_bytes, r.metrics[i - 1].comm_bytes);
}

TEST(Ledger, Csv) {
  CommLedger l;
  l.record(1, 0, Direction::kDown, 10);
  l.record(1, 0, Direction::kUp, 10);
  EXPECT_EQ(l.total_bytes(), 160u);
  EXPECT_EQ(l.to_csv(), "round,client_id,direction,param_count,bytes\n1,0,down,10,80\n1,0,up,10,80\n");
}

// ---- full runs ------------------------------------------------------------------------

TEST(Federation, ZeroRoundsLeavesInitialization) {
  FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 0, 3);
  const FederationResult r = run_federation(s);
  EXPECT_TRUE(r.metrics.empty());
  const ModelParams init = init_params(tiny_arch(), 3);
  for (const ClientState& c : r.clients) EXPECT_EQ(c.params, init);
}

TEST(Federation, BitDeterministic) {
  const FederationResult a = run_federation(tiny_setup(make_variant(Method::kDualFed), 3, 4));
  const FederationResult b = run_federation(tiny_setup(make_variant(Method::kDualFed), 3, 4));
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i)
    EXPECT_EQ(metrics_csv_row(a.metrics[i]), metrics_csv_row(b.metrics[i]));
  EXPECT_EQ(a.server.global_params, b.server.global_params);
  const FederationResult c = run_federation(tiny_setup(make_variant(Method::kDualFed), 3, 5));
  EXPECT_FALSE(a.server.global_params == c.server.global_params);
}

TEST(Federation, ThreadsMatchSerial) {
  FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 3, 4);
  const FederationResult serial = run_federation(s);
  s.threads = 3;
  const FederationResult parallel = run_federation(s);
  EXPECT_EQ(serial.server.global_params, parallel.server.global_params);
  for (std::size_t m = 0; m < serial.clients.size(); ++m)
    EXPECT_EQ(serial.clients[m].params, parallel.clients[m].params);
}

TEST(Federation, MetricsEveryRoundWithThreeCurves) {
  const FederationResult r = run_federation(tiny_setup(make_variant(Method::kDualFed), 3, 0));
  ASSERT_EQ(r.metrics.size(), 3u);
  for (const MetricsRow& row : r.metrics) {
    ASSERT_EQ(row.clients.size(), 3u);
    for (const ClientEval& e : row.clients) {
      for (double a : {e.acc_global, e.acc_personal, e.acc_ensemble}) {
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0);
      }
    }
    EXPECT_FALSE(std::isnan(row.cka_z));
  }
  double best = 0.0;
  for (const MetricsRow& row : r.metrics) best = std::max(best, row.mean_acc_ensemble);
  EXPECT_EQ(r.best_mean_ensemble, best);
}

TEST(Federation, EvalEveryAlsoEvaluatesLastRound) {
  FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 5, 0);
  s.eval_every = 2;
  const FederationResult r = run_federation(s);
  ASSERT_EQ(r.metrics.size(), 3u);
  EXPECT_EQ(r.metrics[0].round, 2u);
  EXPECT_EQ(r.metrics[2].round, 5u);
}

TEST(Federation, RejectsMismatchedInputWidth) {
  FederationSetup s = tiny_setup(make_variant(Method::kDualFed), 1, 0);
  s.arch.input_dim = 9;
  EXPECT_THROW(run_federation(s), ConfigError);
}

}  // namespace
}  // namespace dualfed
