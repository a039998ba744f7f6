// SPDX-License-Identifier: Apache-2.0
// Forward/backward cost of the desk-scale model per mode and batch size.
#include <benchmark/benchmark.h>

#include <random>

#include "moa/moa_model.hpp"
#include "moa/tasks.hpp"
#include "moa/training.hpp"

namespace {

std::shared_ptr<const moa::Backbone> desk_backbone() {
  static auto bb = [] {
    auto b = std::make_shared<moa::Backbone>(moa::ModelConfig{});
    b->freeze();
    return b;
  }();
  return bb;
}

moa::TokenBatch batch_of(std::size_t n) {
  const moa::TaskSpec task = moa::gen_mod_add_task(0);
  return moa::to_batch(std::span<const moa::Example>(task.train.data(), n));
}

// Nudges routers and thresholds off zero so sparse modes actually skip work.
void perturb(const moa::MoaModel& m) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 0.3);
  for (const auto& [name, t] : m.trainable_parameters())
    for (auto& x : moa::ad::Tensor(t).mutable_data()) x += n(rng);
}

void forward(benchmark::State& state, const char* mode) {
  moa::MoaConfig c;
  moa::apply_mode_name(c, mode);
  moa::MoaModel m(desk_backbone(), c);
  perturb(m);
  const auto batch = batch_of(static_cast<std::size_t>(state.range(0)));
  moa::ad::NoGradGuard ng;
  moa::InvocationCounter counter;
  moa::ForwardOptions o;
  o.counter = &counter;
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(batch, o));
  const double capacity = static_cast<double>(batch.rows() * m.n_experts() * m.n_layers()) *
                          static_cast<double>(state.iterations());
  state.counters["active_ratio"] = capacity > 0 ? static_cast<double>(counter.total()) / capacity : 0.0;
  state.counters["tokens/s"] =
      benchmark::Counter(static_cast<double>(batch.rows()), benchmark::Counter::kIsIterationInvariantRate);
}

void train_step(benchmark::State& state, const char* mode) {
  moa::MoaConfig c;
  moa::apply_mode_name(c, mode);
  moa::MoaModel m(desk_backbone(), c);
  perturb(m);
  const auto batch = batch_of(static_cast<std::size_t>(state.range(0)));
  moa::AdamW opt(m.trainable_parameters(), moa::AdamWConfig{});
  for (auto _ : state) {
    moa::ad::backward(moa::batch_loss(m.forward(batch), batch));
    opt.step();
  }
}

void frozen_forward(benchmark::State& state) {
  const auto batch = batch_of(static_cast<std::size_t>(state.range(0)));
  moa::ad::NoGradGuard ng;
  for (auto _ : state) benchmark::DoNotOptimize(desk_backbone()->forward(batch));
}

}  // namespace

BENCHMARK(frozen_forward)->Arg(8)->Arg(32);
BENCHMARK_CAPTURE(forward, soft, "soft")->Arg(8)->Arg(32);
BENCHMARK_CAPTURE(forward, sparse, "sparse_learned")->Arg(8)->Arg(32);
BENCHMARK_CAPTURE(forward, naive, "naive_composition")->Arg(8)->Arg(32);
BENCHMARK_CAPTURE(forward, single_lora, "single_lora")->Arg(8)->Arg(32);
BENCHMARK_CAPTURE(train_step, soft, "soft")->Arg(32);
BENCHMARK_CAPTURE(train_step, sparse, "sparse_learned")->Arg(32);

BENCHMARK_MAIN();
