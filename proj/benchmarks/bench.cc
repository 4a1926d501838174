#include <benchmark/benchmark.h>

#include <memory>

#include "dualfed/losses.h"
#include "dualfed/metrics.h"
#include "dualfed/model.h"
#include "dualfed/protocol.h"
#include "dualfed/rng.h"

using namespace dualfed;

namespace {

Tensor gaussian(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t(i, j) = rng.normal();
  return t;
}

std::vector<std::size_t> labels(std::size_t n, std::size_t classes) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i % classes;
  return out;
}

void BM_ForwardBackward(benchmark::State& state) {
  const ArchConfig arch;
  const ModelParams p = init_params(arch, 1);
  Rng rng(2);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor x = gaussian(rng, batch, arch.input_dim);
  const auto y = labels(batch, arch.num_classes);
  const Tensor onehot = one_hot(y, arch.num_classes);
  for (auto _ : state) {
    const ForwardTrace t = forward(p, x, Mode::kTrain);
    const Stage1Loss loss = stage1_loss(t, onehot, y, LossConfig{});
    Gradients g = backward(p, t, {.personal_logits = loss.d_personal_logits, .u = loss.d_u}, main_branch());
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(batch));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(256);

void BM_SupCon(benchmark::State& state) {
  Rng rng(3);
  const auto batch = static_cast<std::size_t>(state.range(0));
  const Tensor u = gaussian(rng, batch, 16);
  const auto y = labels(batch, 7);
  for (auto _ : state) benchmark::DoNotOptimize(sup_con_loss(u, y, 0.5));
}
BENCHMARK(BM_SupCon)->Arg(32)->Arg(256);

void BM_LinearCka(benchmark::State& state) {
  Rng rng(4);
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = gaussian(rng, n, 16);
  const Tensor b = gaussian(rng, n, 16);
  for (auto _ : state) benchmark::DoNotOptimize(linear_cka(a, b));
}
BENCHMARK(BM_LinearCka)->Arg(280)->Arg(2000);

void BM_Round(benchmark::State& state) {
  SyntheticSpec spec;
  const SyntheticData data = generate_synthetic(spec);
  ArchConfig arch;
  arch.input_dim = spec.input_dim;
  arch.num_classes = spec.num_classes;
  const MethodVariant variant = make_variant(Method::kDualFed);
  arch = apply_variant(variant, arch);
  TrainConfig train;
  train.batch_size = 32;
  const ModelParams init = init_params(arch, 0, variant.tags);
  for (auto _ : state) {
    state.PauseTiming();
    ServerState server = make_server(init);
    std::vector<ClientState> clients;
    for (std::size_t m = 0; m < data.clients.size(); ++m)
      clients.push_back(make_client(m, init, std::make_shared<const ClientData>(data.clients[m]), 0));
    state.ResumeTiming();
    benchmark::DoNotOptimize(run_round(server, clients, variant, train));
  }
}
BENCHMARK(BM_Round)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
