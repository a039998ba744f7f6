// SPDX-License-Identifier: Apache-2.0
//
// Synthetic sequence tasks over one shared token vocabulary.
//
//   copy     BOS s1 .. sn SEP      -> s1 .. sn
//   reverse  BOS s1 .. sn SEP      -> sn .. s1
//   mod_add  BOS [c1 .. ck] x + y = -> (x + y) mod m
//
// The letters c1..ck in mod_add are distractor context. Each example is
// trained as one next-token sequence (prompt followed by answer) with the
// loss restricted to the answer span.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moa/backbone.hpp"

namespace moa {

namespace vocab {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int sep = 2;
inline constexpr int plus = 3;
inline constexpr int eq = 4;
inline constexpr int digit0 = 5;   // digits 0..9 -> 5..14
inline constexpr int letter0 = 15; // letters a..p -> 15..30
inline constexpr int n_digits = 10;
inline constexpr int n_letters = 16;
inline constexpr std::size_t size = 31;

inline constexpr int digit(int d) { return digit0 + d; }
inline constexpr int letter(int i) { return letter0 + i; }
std::string token_str(int token);
// Inverse of token_str; throws ConfigError on unknown strings.
int token_from_str(const std::string& s);
std::string join(const std::vector<int>& tokens);
}  // namespace vocab

struct Example {
  std::vector<int> prompt;
  std::vector<int> answer;

  bool operator==(const Example&) const = default;
};

struct TaskOptions {
  std::size_t train_size = 2000;
  std::size_t eval_size = 256;
  std::size_t min_len = 1;  // copy / reverse sequence length range
  std::size_t max_len = 8;
  int modulus = 7;
  std::size_t max_context = 3;  // mod_add distractor letters

  bool operator==(const TaskOptions&) const = default;
};

struct TaskSpec {
  std::string name;
  std::uint64_t seed = 0;
  TaskOptions options;
  std::vector<int> answer_vocab;  // tokens an answer may contain
  std::vector<Example> train;
  std::vector<Example> eval;

  std::size_t max_answer_len() const;
  // Longest prompt+answer over both splits.
  std::size_t max_sequence_len() const;
};

TaskSpec gen_base_task(std::uint64_t seed, const TaskOptions& options = {});
// reverse and mod_add, in that order.
std::vector<TaskSpec> gen_adapt_tasks(std::uint64_t seed, const TaskOptions& options = {});
TaskSpec gen_copy_task(std::uint64_t seed, const TaskOptions& options = {});
TaskSpec gen_reverse_task(std::uint64_t seed, const TaskOptions& options = {});
TaskSpec gen_mod_add_task(std::uint64_t seed, const TaskOptions& options = {});
// "copy" | "reverse" | "mod_add".
TaskSpec make_task(const std::string& name, std::uint64_t seed, const TaskOptions& options = {});
const std::vector<std::string>& task_names();

// Training batch: tokens are the sequence minus its last element, targets
// the sequence shifted by one; loss_mask is 1 exactly where the target is an
// answer token.
TokenBatch to_batch(std::span<const Example> examples);

// Epoch-wise shuffled mini-batches. Each epoch visits every example exactly
// once (the last batch may be short); the order depends only on seed.
class BatchIterator {
 public:
  BatchIterator(const std::vector<Example>& data, std::size_t batch_size, std::uint64_t seed);

  TokenBatch next();
  // Example indices of the batch most recently returned by next().
  const std::vector<std::size_t>& last_indices() const { return last_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t batches_per_epoch() const;

 private:
  void reshuffle();

  const std::vector<Example>* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> last_;
};

// One epoch of batches in iterator order.
std::vector<TokenBatch> batches(const TaskSpec& task, std::size_t batch_size, std::uint64_t seed);

// Writes <dir>/<name>_train.tsv and <dir>/<name>_eval.tsv, one example per
// line as "prompt<TAB>answer" with space-separated token strings.
void export_task(const TaskSpec& task, const std::filesystem::path& dir);
std::vector<Example> read_examples_tsv(const std::filesystem::path& path);

}  // namespace moa
