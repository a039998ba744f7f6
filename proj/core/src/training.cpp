// SPDX-License-Identifier: Apache-2.0
#include "moa/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moa/errors.hpp"

namespace moa {

AdamW::AdamW(NamedTensors params, AdamWConfig cfg) : cfg_(cfg) {
  if (!(cfg.lr >= 0.0) || !(cfg.eps > 0.0) || !(cfg.weight_decay >= 0.0) || !(cfg.beta1 >= 0.0) ||
      !(cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0) || !(cfg.beta2 < 1.0)) {
    throw ConfigError("AdamW needs lr >= 0, eps > 0, weight_decay >= 0 and betas in [0, 1)");
  }
  for (auto& [name, t] : params) {
    if (!t.requires_grad()) continue;
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
    params_.emplace_back(name, t);
  }
}

std::size_t AdamW::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

std::size_t AdamW::state_size() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < m_.size(); ++i) n += m_[i].size() + v_[i].size();
  return n;
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void AdamW::step() { step(cfg_.lr); }

void AdamW::step(double lr) {
  for (const auto& [name, t] : params_) {
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + name + "'");
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Tensor& p = params_[i].second;
    auto theta = p.mutable_data();
    const auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] *= 1.0 - lr * cfg_.weight_decay;
      theta[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    p.zero_grad();
  }
}

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (!(lr >= 0.0) || !std::isfinite(lr)) bad.push_back("lr must be finite and >= 0");
  if (batch_size == 0) bad.push_back("batch_size must be positive");
  if (max_seq_len == 0) bad.push_back("max_seq_len must be positive");
  if (!(grad_clip >= 0.0)) bad.push_back("grad_clip must be >= 0");
  if (!(weight_decay >= 0.0)) bad.push_back("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad.push_back("betas must be in [0, 1)");
  if (!(eps > 0.0)) bad.push_back("eps must be positive");
  if (schedule != "constant" && schedule != "cosine") bad.push_back("schedule must be constant or cosine");
  if (log_every == 0) bad.push_back("log_every must be positive");
  if (!(verify_fraction > 0.0 && verify_fraction <= 1.0)) bad.push_back("verify_fraction must be in (0, 1]");
  if (!bad.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.schedule != "cosine" || cfg.steps == 0) return cfg.lr;
  const double frac = static_cast<double>(step) / static_cast<double>(cfg.steps);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

std::string MetricsLog::to_json_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["active_experts_mean"] = r.active_experts_mean;
  if (r.eval_acc) j["eval_acc"] = *r.eval_acc;
  if (r.grad_check) {
    j["grad_check"] = {{"checked", r.grad_check->checked},
                       {"max_rel_error", r.grad_check->max_rel_error},
                       {"worst", r.grad_check->worst}};
  }
  return j.dump();
}

void MetricsLog::write(const MetricsRecord& r) {
  records_.push_back(r);
  if (sink_) *sink_ << to_json_line(r) << '\n';
}

ad::Tensor batch_loss(const ad::Tensor& logits, const TokenBatch& batch) {
  return ad::cross_entropy(logits, batch.targets, batch.loss_mask);
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

GradCheckReport verify_gradients(const NamedTensors& params, const std::function<ad::Tensor()>& loss,
                                 double fraction, std::uint64_t seed, double step) {
  for (const auto& [name, t] : params) ad::Tensor(t).zero_grad();
  ad::backward(loss());
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, t] : params) {
    analytic.emplace_back(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.back().begin());
    ad::Tensor(t).zero_grad();
  }
  GradCheckReport rep;
  std::mt19937_64 rng(seed);
  ad::NoGradGuard no_grad;
  for (std::size_t p = 0; p < params.size(); ++p) {
    ad::Tensor t = params[p].second;
    const std::size_t n = t.numel();
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n))));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(k, n));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) {
      auto data = t.mutable_data();
      const double orig = data[i];
      data[i] = orig + step;
      const double up = loss().item();
      data[i] = orig - step;
      const double down = loss().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[p][i], numeric);
      ++rep.checked;
      if (rep.worst.empty() || err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = params[p].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

namespace {

double global_grad_norm(const NamedTensors& params) {
  double s = 0.0;
  for (const auto& [name, t] : params)
    for (double g : t.grad()) s += g * g;
  return std::sqrt(s);
}

}  // namespace

TrainResult train_loop(const NamedTensors& params, const LogitsFn& logits, const TaskSpec& task,
                       const TrainConfig& cfg, MetricsLog* log, const ActivityFn& activity,
                       const std::function<EvalResult()>& eval) {
  cfg.validate();
  if (task.max_sequence_len() - 1 > cfg.max_seq_len) {
    throw ConfigError("task '" + task.name + "' needs sequences of length " +
                      std::to_string(task.max_sequence_len() - 1) + " but max_seq_len is " +
                      std::to_string(cfg.max_seq_len));
  }
  AdamW opt(params, AdamWConfig{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  opt.zero_grad();
  BatchIterator it(task.train, cfg.batch_size, cfg.seed);
  TrainResult res;
  std::size_t above = 0;
  double last_finite = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const TokenBatch batch = it.next();
    MetricsRecord rec;
    if (cfg.verify_grads && step == 1) {
      rec.grad_check = verify_gradients(
          opt.parameters(), [&] { return batch_loss(logits(batch), batch); }, cfg.verify_fraction,
          cfg.seed);
    }
    const ad::Tensor loss = batch_loss(logits(batch), batch);
    const double lv = loss.item();
    if (!std::isfinite(lv)) {
      std::ostringstream os;
      os << "loss became non-finite at step " << step << " (last finite loss " << last_finite << ")";
      throw NumericalError(os.str());
    }
    last_finite = lv;
    if (step == 1) res.initial_loss = lv;
    if (lv > 10.0 * res.initial_loss) {
      if (++above >= 100) {
        std::ostringstream os;
        os << "training diverged: loss " << lv << " stayed above 10x the initial loss "
           << res.initial_loss << " for 100 consecutive steps (step " << step << ")";
        throw NumericalError(os.str());
      }
    } else {
      above = 0;
    }
    ad::backward(loss);
    if (cfg.grad_clip > 0.0) {
      const double norm = global_grad_norm(opt.parameters());
      if (norm > cfg.grad_clip) {
        const double s = cfg.grad_clip / norm;
        for (const auto& [name, t] : opt.parameters()) {
          if (!t.has_grad()) continue;
          for (double& g : ad::Tensor(t).mutable_grad()) g *= s;
        }
      }
    }
    const double lr = scheduled_lr(cfg, step - 1);
    opt.step(lr);
    res.losses.push_back(lv);
    rec.step = step;
    rec.loss = lv;
    rec.lr = lr;
    rec.active_experts_mean = activity ? activity() : 0.0;
    const bool last = step == cfg.steps;
    if (eval && ((cfg.eval_every && step % cfg.eval_every == 0) || last)) {
      const EvalResult e = eval();
      rec.eval_acc = e.accuracy;
      if (last) res.eval = e;
    }
    if (log && (step % cfg.log_every == 0 || last || rec.eval_acc || rec.grad_check)) log->write(rec);
  }
  res.final_loss = res.losses.empty() ? 0.0 : res.losses.back();
  return res;
}

TrainResult train_adapters(MoaModel& model, const TaskSpec& task, const TrainConfig& cfg,
                           MetricsLog* log) {
  if (!model.backbone().frozen()) throw ContractError("train_adapters requires a frozen backbone");
  InvocationCounter counter;
  ForwardOptions opts;
  opts.counter = &counter;
  LogitsFn logits = [&](const TokenBatch& b) { return model.forward(b, opts); };
  ActivityFn activity = [&] {
    // Counter covers the verify-mode extra passes too; only the ratio matters.
    const double per_token = counter.rows_seen
                                 ? static_cast<double>(counter.total()) / static_cast<double>(counter.rows_seen)
                                 : 0.0;
    counter = InvocationCounter{};
    return per_token;
  };
  std::function<EvalResult()> eval = [&] { return evaluate(model, task); };
  return train_loop(model.trainable_parameters(), logits, task, cfg, log, activity, eval);
}

PretrainResult pretrain_then_freeze(Backbone& model, const TaskSpec& task, const TrainConfig& cfg,
                                    MetricsLog* log) {
  PretrainResult out;
  if (cfg.steps > 0) {
    model.unfreeze();
    LogitsFn logits = [&](const TokenBatch& b) { return model.forward(b); };
    std::function<EvalResult()> eval = [&] { return evaluate(model, task); };
    try {
      out.train = train_loop(model.named_parameters(), logits, task, cfg, log, {}, eval);
    } catch (...) {
      model.freeze();
      throw;
    }
    out.final_loss = out.train.final_loss;
  }
  model.freeze();
  return out;
}

EvalResult evaluate(const LogitsFn& logits, const TaskSpec& task, const EvalOptions& options) {
  if (task.eval.empty()) throw ContractError("task '" + task.name + "' has an empty eval split");
  ad::NoGradGuard no_grad;
  const std::size_t n = options.max_examples ? std::min(options.max_examples, task.eval.size())
                                             : task.eval.size();
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  EvalResult res;
  std::size_t exact = 0, tok_ok = 0;
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t end = std::min(n, start + bs);
    std::vector<std::vector<int>> seqs;
    std::size_t steps = 0;
    for (std::size_t i = start; i < end; ++i) {
      seqs.push_back(task.eval[i].prompt);
      steps = std::max(steps, task.eval[i].answer.size());
    }
    std::vector<std::vector<int>> produced(seqs.size());
    for (std::size_t s = 0; s < steps; ++s) {
      const TokenBatch b = make_batch(seqs, vocab::pad);
      const ad::Tensor out = logits(b);
      const std::size_t V = out.cols();
      for (std::size_t k = 0; k < seqs.size(); ++k) {
        if (produced[k].size() >= task.eval[start + k].answer.size()) continue;
        const std::size_t row = k * b.seq + seqs[k].size() - 1;
        const double* lr = out.data().data() + row * V;
        int best = -1;
        double best_v = -std::numeric_limits<double>::infinity();
        auto consider = [&](int t) {
          if (t < 0 || static_cast<std::size_t>(t) >= V) return;
          if (best < 0 || lr[t] > best_v) {
            best = t;
            best_v = lr[t];
          }
        };
        if (options.constrain_to_answer_vocab && !task.answer_vocab.empty()) {
          for (int t : task.answer_vocab) consider(t);
        } else {
          for (std::size_t t = 0; t < V; ++t) consider(static_cast<int>(t));
        }
        produced[k].push_back(best);
        seqs[k].push_back(best);
      }
    }
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      const auto& ans = task.eval[start + k].answer;
      std::size_t ok = 0;
      for (std::size_t j = 0; j < ans.size(); ++j) ok += produced[k][j] == ans[j];
      tok_ok += ok;
      res.tokens += ans.size();
      exact += ok == ans.size();
    }
  }
  res.examples = n;
  res.accuracy = static_cast<double>(exact) / static_cast<double>(n);
  res.token_accuracy = res.tokens ? static_cast<double>(tok_ok) / static_cast<double>(res.tokens) : 0.0;
  return res;
}

EvalResult evaluate(const Backbone& model, const TaskSpec& task, const EvalOptions& options) {
  return evaluate([&](const TokenBatch& b) { return model.forward(b); }, task, options);
}

EvalResult evaluate(const MoaModel& model, const TaskSpec& task, const EvalOptions& options) {
  return evaluate([&](const TokenBatch& b) { return model.forward(b); }, task, options);
}

}  // namespace moa
