// SPDX-License-Identifier: Apache-2.0
//
// AdamW training of backbone (pretraining) or adapter parameters, greedy
// evaluation, and a finite-difference gradient check.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "moa/backbone.hpp"
#include "moa/moa_model.hpp"
#include "moa/tasks.hpp"
#include "moa/tensor.hpp"

namespace moa {

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

struct AdamWConfig {
  double lr = 6e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Moments for every requires_grad parameter. Frozen parameters are dropped
// at construction and never touched.
class AdamW {
 public:
  AdamW(NamedTensors params, AdamWConfig cfg);

  // One update from the gradients currently stored on the parameters, then
  // clears them. A parameter without a gradient is treated as g = 0. Throws
  // NumericalError naming the parameter on a non-finite gradient (nothing
  // is updated in that case).
  void step();
  void step(double lr);
  void zero_grad();

  const AdamWConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return t_; }
  const NamedTensors& parameters() const { return params_; }
  std::size_t parameter_count() const;
  // Number of moment entries held (2 per trainable scalar).
  std::size_t state_size() const;
  const std::vector<double>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<double>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  NamedTensors params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainConfig {
  double lr = 6e-3;
  std::size_t batch_size = 32;
  std::size_t steps = 500;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::string schedule = "constant";  // constant | cosine
  std::size_t eval_every = 0;         // 0: only at the end
  std::size_t log_every = 1;
  bool verify_grads = false;          // finite-difference check on step 1
  double verify_fraction = 0.01;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

double scheduled_lr(const TrainConfig& cfg, std::size_t step);

struct EvalResult {
  double accuracy = 0.0;        // exact-match over examples
  double token_accuracy = 0.0;  // over answer tokens
  std::size_t examples = 0;
  std::size_t tokens = 0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]"
};

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double active_experts_mean = 0.0;
  std::optional<double> eval_acc;
  std::optional<GradCheckReport> grad_check;
};

// Newline-delimited JSON metrics; keeps records in memory and optionally
// streams them.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* sink = nullptr) : sink_(sink) {}
  void write(const MetricsRecord& r);
  const std::vector<MetricsRecord>& records() const { return records_; }
  static std::string to_json_line(const MetricsRecord& r);

 private:
  std::ostream* sink_;
  std::vector<MetricsRecord> records_;
};

struct TrainResult {
  std::vector<double> losses;  // one per step
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::optional<EvalResult> eval;
};

// Logits for a batch; used by the generic loop and evaluation.
using LogitsFn = std::function<ad::Tensor(const TokenBatch&)>;
// Optional per-step activation statistic (mean active experts per token).
using ActivityFn = std::function<double()>;

TrainResult train_loop(const NamedTensors& params, const LogitsFn& logits, const TaskSpec& task,
                       const TrainConfig& cfg, MetricsLog* log = nullptr,
                       const ActivityFn& activity = {},
                       const std::function<EvalResult()>& eval = {});

TrainResult train_adapters(MoaModel& model, const TaskSpec& task, const TrainConfig& cfg,
                           MetricsLog* log = nullptr);

struct PretrainResult {
  double final_loss = 0.0;
  TrainResult train;
};
// Trains every backbone parameter on the task, then freezes the model.
// steps == 0 just freezes the random initialization.
PretrainResult pretrain_then_freeze(Backbone& model, const TaskSpec& task, const TrainConfig& cfg,
                                    MetricsLog* log = nullptr);

// Mean masked cross-entropy of a batch.
ad::Tensor batch_loss(const ad::Tensor& logits, const TokenBatch& batch);

struct EvalOptions {
  // Restrict greedy choices to the task's answer vocabulary.
  bool constrain_to_answer_vocab = true;
  std::size_t batch_size = 64;
  std::size_t max_examples = 0;  // 0: all
};

// Greedy decoding of each eval answer from its prompt. Pure: never touches
// parameters or gradients. Throws ContractError on an empty eval split.
EvalResult evaluate(const LogitsFn& logits, const TaskSpec& task, const EvalOptions& options = {});
EvalResult evaluate(const Backbone& model, const TaskSpec& task, const EvalOptions& options = {});
EvalResult evaluate(const MoaModel& model, const TaskSpec& task, const EvalOptions& options = {});

// Central finite differences on a random `fraction` of parameter entries
// (at least one per tensor) against the analytic gradient of loss().
// Parameters are restored bit-exactly; their stored gradients are cleared.
GradCheckReport verify_gradients(const NamedTensors& params, const std::function<ad::Tensor()>& loss,
                                 double fraction, std::uint64_t seed, double step = 1e-5);

// |a - b| / max(|a|, |b|, floor).
double relative_error(double a, double b, double floor = 1e-6);

}  // namespace moa
