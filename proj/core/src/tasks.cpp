// SPDX-License-Identifier: Apache-2.0
#include "moa/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "moa/errors.hpp"

namespace moa {

namespace vocab {

std::string token_str(int token) {
  switch (token) {
    case pad: return "<pad>";
    case bos: return "<bos>";
    case sep: return "<sep>";
    case plus: return "+";
    case eq: return "=";
    default: break;
  }
  if (token >= digit0 && token < digit0 + n_digits) return std::string(1, char('0' + token - digit0));
  if (token >= letter0 && token < letter0 + n_letters) return std::string(1, char('a' + token - letter0));
  return "<" + std::to_string(token) + ">";
}

int token_from_str(const std::string& s) {
  for (int t = 0; t < static_cast<int>(size); ++t)
    if (token_str(t) == s) return t;
  throw ConfigError("unknown token '" + s + "'");
}

std::string join(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_str(tokens[i]);
  }
  return out;
}

}  // namespace vocab

namespace {

using Rng = std::mt19937_64;

std::vector<int> symbol_alphabet() {
  std::vector<int> s;
  for (int d = 0; d < vocab::n_digits; ++d) s.push_back(vocab::digit(d));
  for (int l = 0; l < vocab::n_letters; ++l) s.push_back(vocab::letter(l));
  return s;
}

// Distinct seeds per task family so copy and reverse corpora differ.
std::uint64_t task_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

void check_sizes(const TaskOptions& o) {
  if (o.train_size == 0) throw ConfigError("task train_size must be positive");
  if (o.eval_size == 0) throw ConfigError("task eval_size must be positive");
}

// Draws distinct examples until both splits are full. `draw` produces one
// candidate; the full prompt+answer sequence decides uniqueness, so no
// sequence can land in both splits.
template <class Draw>
void fill_disjoint(TaskSpec& task, Rng& rng, Draw draw, std::set<std::vector<int>>& seen) {
  const std::size_t want = task.options.train_size + task.options.eval_size;
  const std::size_t budget = 200 * want + 10000;
  std::size_t attempts = 0;
  while (task.train.size() + task.eval.size() < want) {
    if (++attempts > budget) {
      throw ConfigError("task '" + task.name + "' cannot produce " + std::to_string(want) +
                        " distinct examples with these options");
    }
    Example e = draw(rng);
    std::vector<int> full = e.prompt;
    full.insert(full.end(), e.answer.begin(), e.answer.end());
    if (!seen.insert(std::move(full)).second) continue;
    if (task.train.size() < task.options.train_size) {
      task.train.push_back(std::move(e));
    } else {
      task.eval.push_back(std::move(e));
    }
  }
}

TaskSpec sequence_task(const std::string& name, std::uint64_t seed, const TaskOptions& o,
                       bool reverse) {
  check_sizes(o);
  if (o.min_len == 0 || o.min_len > o.max_len) {
    throw ConfigError("task length range must satisfy 1 <= min_len <= max_len");
  }
  TaskSpec task;
  task.name = name;
  task.seed = seed;
  task.options = o;
  task.answer_vocab = symbol_alphabet();
  Rng rng(task_seed(seed, reverse ? 2 : 1));
  const auto alphabet = symbol_alphabet();
  std::uniform_int_distribution<std::size_t> len_dist(o.min_len, o.max_len);
  std::uniform_int_distribution<std::size_t> sym_dist(0, alphabet.size() - 1);
  std::set<std::vector<int>> seen;
  fill_disjoint(
      task, rng,
      [&](Rng& r) {
        Example e;
        const std::size_t n = len_dist(r);
        std::vector<int> s(n);
        for (auto& t : s) t = alphabet[sym_dist(r)];
        e.prompt.push_back(vocab::bos);
        e.prompt.insert(e.prompt.end(), s.begin(), s.end());
        e.prompt.push_back(vocab::sep);
        if (reverse) std::reverse(s.begin(), s.end());
        e.answer = std::move(s);
        return e;
      },
      seen);
  return task;
}

}  // namespace

std::size_t TaskSpec::max_answer_len() const {
  std::size_t n = 0;
  for (const auto* split : {&train, &eval})
    for (const auto& e : *split) n = std::max(n, e.answer.size());
  return n;
}

std::size_t TaskSpec::max_sequence_len() const {
  std::size_t n = 0;
  for (const auto* split : {&train, &eval})
    for (const auto& e : *split) n = std::max(n, e.prompt.size() + e.answer.size());
  return n;
}

TaskSpec gen_copy_task(std::uint64_t seed, const TaskOptions& options) {
  return sequence_task("copy", seed, options, false);
}

TaskSpec gen_reverse_task(std::uint64_t seed, const TaskOptions& options) {
  return sequence_task("reverse", seed, options, true);
}

TaskSpec gen_mod_add_task(std::uint64_t seed, const TaskOptions& o) {
  check_sizes(o);
  if (o.modulus < 2 || o.modulus > vocab::n_digits) {
    throw ConfigError("mod_add modulus must be in [2, " + std::to_string(vocab::n_digits) +
                      "] (answers are single digit tokens), got " + std::to_string(o.modulus));
  }
  const auto m = static_cast<std::size_t>(o.modulus);
  if (o.train_size < m * m) {
    throw ConfigError("mod_add train_size must be at least modulus^2 = " + std::to_string(m * m));
  }
  TaskSpec task;
  task.name = "mod_add";
  task.seed = seed;
  task.options = o;
  for (int d = 0; d < o.modulus; ++d) task.answer_vocab.push_back(vocab::digit(d));
  Rng rng(task_seed(seed, 3));
  std::uniform_int_distribution<std::size_t> ctx_len(0, o.max_context);
  std::uniform_int_distribution<int> letter(0, vocab::n_letters - 1);
  std::uniform_int_distribution<int> operand(0, o.modulus - 1);
  auto make = [&](Rng& r, int x, int y) {
    Example e;
    e.prompt.push_back(vocab::bos);
    const std::size_t k = ctx_len(r);
    for (std::size_t i = 0; i < k; ++i) e.prompt.push_back(vocab::letter(letter(r)));
    e.prompt.insert(e.prompt.end(), {vocab::digit(x), vocab::plus, vocab::digit(y), vocab::eq});
    e.answer = {vocab::digit((x + y) % o.modulus)};
    return e;
  };
  // Every operand pair (hence every residue) is placed in train first.
  std::set<std::vector<int>> seen;
  for (int x = 0; x < o.modulus; ++x) {
    for (int y = 0; y < o.modulus; ++y) {
      Example e = make(rng, x, y);
      std::vector<int> full = e.prompt;
      full.insert(full.end(), e.answer.begin(), e.answer.end());
      seen.insert(std::move(full));
      task.train.push_back(std::move(e));
    }
  }
  fill_disjoint(task, rng, [&](Rng& r) { return make(r, operand(r), operand(r)); }, seen);
  return task;
}

TaskSpec gen_base_task(std::uint64_t seed, const TaskOptions& options) {
  return gen_copy_task(seed, options);
}

std::vector<TaskSpec> gen_adapt_tasks(std::uint64_t seed, const TaskOptions& options) {
  return {gen_reverse_task(seed, options), gen_mod_add_task(seed, options)};
}

const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names{"copy", "reverse", "mod_add"};
  return names;
}

TaskSpec make_task(const std::string& name, std::uint64_t seed, const TaskOptions& options) {
  if (name == "copy") return gen_copy_task(seed, options);
  if (name == "reverse") return gen_reverse_task(seed, options);
  if (name == "mod_add") return gen_mod_add_task(seed, options);
  throw ConfigError("unknown task '" + name + "' (expected copy, reverse or mod_add)");
}

TokenBatch to_batch(std::span<const Example> examples) {
  TokenBatch b;
  b.batch = examples.size();
  for (const auto& e : examples) {
    const std::size_t n = e.prompt.size() + e.answer.size();
    if (e.prompt.empty() || e.answer.empty()) throw ContractError("example with empty prompt or answer");
    b.seq = std::max(b.seq, n - 1);
  }
  b.tokens.assign(b.rows(), vocab::pad);
  b.targets.assign(b.rows(), vocab::pad);
  b.loss_mask.assign(b.rows(), 0.0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    std::vector<int> full = e.prompt;
    full.insert(full.end(), e.answer.begin(), e.answer.end());
    const std::size_t len = full.size() - 1;
    b.lengths.push_back(len);
    for (std::size_t t = 0; t < len; ++t) {
      b.tokens[i * b.seq + t] = full[t];
      b.targets[i * b.seq + t] = full[t + 1];
      if (t + 1 >= e.prompt.size()) b.loss_mask[i * b.seq + t] = 1.0;
    }
  }
  return b;
}

BatchIterator::BatchIterator(const std::vector<Example>& data, std::size_t batch_size,
                             std::uint64_t seed)
    : data_(&data), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (data.empty()) throw ContractError("cannot batch an empty split");
  reshuffle();
}

void BatchIterator::reshuffle() {
  order_.resize(data_->size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(task_seed(seed_, 1000 + epoch_));
  std::shuffle(order_.begin(), order_.end(), rng);
  cursor_ = 0;
}

std::size_t BatchIterator::batches_per_epoch() const {
  return (data_->size() + batch_size_ - 1) / batch_size_;
}

TokenBatch BatchIterator::next() {
  if (cursor_ >= order_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  last_.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
               order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  std::vector<Example> picked;
  picked.reserve(last_.size());
  for (auto i : last_) picked.push_back((*data_)[i]);
  return to_batch(picked);
}

std::vector<TokenBatch> batches(const TaskSpec& task, std::size_t batch_size, std::uint64_t seed) {
  BatchIterator it(task.train, batch_size, seed);
  std::vector<TokenBatch> out;
  for (std::size_t i = 0; i < it.batches_per_epoch(); ++i) out.push_back(it.next());
  return out;
}

void export_task(const TaskSpec& task, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  for (const auto& [suffix, split] : {std::pair{"_train.tsv", &task.train}, std::pair{"_eval.tsv", &task.eval}}) {
    const auto path = dir / (task.name + suffix);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& e : *split) out << vocab::join(e.prompt) << '\t' << vocab::join(e.answer) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
  }
}

std::vector<Example> read_examples_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<Example> out;
  std::string line;
  auto parse = [](const std::string& field) {
    std::vector<int> tokens;
    std::istringstream is(field);
    std::string tok;
    while (is >> tok) tokens.push_back(vocab::token_from_str(tok));
    return tokens;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw IoError("missing tab in " + path.string());
    out.push_back({parse(line.substr(0, tab)), parse(line.substr(tab + 1))});
  }
  return out;
}

}  // namespace moa
