// SPDX-License-Identifier: Apache-2.0
#include "moa/backbone.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <iomanip>
#include <random>
#include <sstream>

#include "moa/errors.hpp"

namespace moa {

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (d_model < 1) bad.emplace_back("d_model must be >= 1");
  if (n_layers < 1) bad.emplace_back("n_layers must be >= 1");
  if (n_heads < 1) bad.emplace_back("n_heads must be >= 1");
  if (d_ff < 1) bad.emplace_back("d_ff must be >= 1");
  if (vocab_size < 1) bad.emplace_back("vocab_size must be >= 1");
  if (max_seq_len < 1) bad.emplace_back("max_seq_len must be >= 1");
  if (n_heads >= 1 && d_model % n_heads != 0) {
    bad.emplace_back("d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                     std::to_string(n_heads) + ")");
  }
  if (norm != "rms" && norm != "none") bad.emplace_back("norm must be rms|none, got " + norm);
  try {
    ad::activation_from_name(activation);
  } catch (const ConfigError& e) {
    bad.emplace_back(e.what());
  }
  if (!bad.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
}

std::string site_name(Site site) {
  switch (site) {
    case Site::q: return "q";
    case Site::k: return "k";
    case Site::v: return "v";
    case Site::o: return "o";
    case Site::up: return "up";
    case Site::ffn: return "ffn";
    case Site::attn: return "attn";
  }
  return "?";
}

Site site_from_name(const std::string& name) {
  for (Site s : {Site::q, Site::k, Site::v, Site::o, Site::up, Site::ffn, Site::attn})
    if (site_name(s) == name) return s;
  throw ConfigError("unknown site '" + name + "' (expected q|k|v|o|up|ffn|attn)");
}

namespace {

ad::Tensor normal_init(std::mt19937_64& rng, ad::Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Backbone::Backbone(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  act_ = ad::activation_from_name(cfg_.activation);
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.d_model;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = proj / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  tok_emb_ = normal_init(rng, {cfg_.vocab_size, d}, 1.0);
  pos_emb_ = normal_init(rng, {cfg_.max_seq_len, d}, 0.5);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    BlockWeights b;
    b.attn_norm = ad::Tensor::full({d}, 1.0, true);
    b.wq = normal_init(rng, {d, d}, proj);
    b.wk = normal_init(rng, {d, d}, proj);
    b.wv = normal_init(rng, {d, d}, proj);
    b.wo = normal_init(rng, {d, d}, resid);
    b.ffn_norm = ad::Tensor::full({d}, 1.0, true);
    b.w_up = normal_init(rng, {d, cfg_.d_ff}, proj);
    b.w_down = normal_init(rng, {cfg_.d_ff, d},
                           1.0 / std::sqrt(static_cast<double>(cfg_.d_ff)) /
                               std::sqrt(2.0 * static_cast<double>(cfg_.n_layers)));
    blocks_.push_back(std::move(b));
  }
  final_norm_ = ad::Tensor::full({d}, 1.0, true);
  lm_head_ = normal_init(rng, {d, cfg_.vocab_size}, proj);
}

std::vector<std::pair<std::string, ad::Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  out.emplace_back("tok_emb", tok_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto p = "blocks." + std::to_string(l) + ".";
    const auto& b = blocks_[l];
    out.emplace_back(p + "attn_norm", b.attn_norm);
    out.emplace_back(p + "wq", b.wq);
    out.emplace_back(p + "wk", b.wk);
    out.emplace_back(p + "wv", b.wv);
    out.emplace_back(p + "wo", b.wo);
    out.emplace_back(p + "ffn_norm", b.ffn_norm);
    out.emplace_back(p + "w_up", b.w_up);
    out.emplace_back(p + "w_down", b.w_down);
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("lm_head", lm_head_);
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void Backbone::freeze() {
  for (auto& [name, t] : named_parameters()) ad::Tensor(t).set_requires_grad(false);
  frozen_ = true;
}

void Backbone::unfreeze() {
  for (auto& [name, t] : named_parameters()) ad::Tensor(t).set_requires_grad(true);
  frozen_ = false;
}

ad::Tensor Backbone::normed(const ad::Tensor& x, const ad::Tensor& gain) const {
  return cfg_.norm == "none" ? x : ad::rms_norm(x, gain);
}

ad::Tensor Backbone::embed(const TokenBatch& batch) const {
  if (batch.seq > cfg_.max_seq_len) {
    throw DimensionError("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                         std::to_string(cfg_.max_seq_len));
  }
  if (batch.tokens.size() != batch.rows() || batch.lengths.size() != batch.batch) {
    throw DimensionError("token batch layout inconsistent with batch=" +
                         std::to_string(batch.batch) + " seq=" + std::to_string(batch.seq));
  }
  std::vector<std::size_t> ids(batch.rows()), pos(batch.rows());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int t = batch.tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(cfg_.vocab_size));
    }
    ids[i] = static_cast<std::size_t>(t);
    pos[i] = i % batch.seq;
  }
  return ad::add(ad::gather_rows(tok_emb_, ids), ad::gather_rows(pos_emb_, pos));
}

ad::Tensor Backbone::block_forward(std::size_t layer, const ad::Tensor& x, const BatchShape& shape,
                                   BlockHooks* hooks) const {
  static BlockHooks no_hooks;
  BlockHooks& h = hooks ? *hooks : no_hooks;
  const BlockWeights& w = blocks_.at(layer);
  auto with = [&](ad::Tensor base, Site site, const ad::Tensor& input) {
    ad::Tensor delta = h.site_delta(layer, site, input);
    return delta.defined() ? ad::add(base, delta) : base;
  };

  const ad::Tensor a_in = normed(x, w.attn_norm);
  h.begin_block(layer, x, a_in, shape);
  const ad::Tensor q = with(ad::matmul(a_in, w.wq), Site::q, a_in);
  const ad::Tensor k = with(ad::matmul(a_in, w.wk), Site::k, a_in);
  const ad::Tensor v = with(ad::matmul(a_in, w.wv), Site::v, a_in);
  ad::AttentionSpec spec{shape.batch, shape.seq, shape.seq, cfg_.n_heads, true, false};
  const ad::Tensor heads = ad::attention(q, k, v, spec);
  ad::Tensor attn = with(ad::matmul(heads, w.wo), Site::o, heads);
  if (ad::Tensor extra = h.attention_delta(layer, q, w, shape); extra.defined()) {
    attn = ad::add(attn, extra);
  }
  const ad::Tensor mid = ad::add(x, attn);

  const ad::Tensor f_in = normed(mid, w.ffn_norm);
  const ad::Tensor up = with(ad::matmul(f_in, w.w_up), Site::up, f_in);
  const ad::Tensor ffn = with(ad::matmul(ad::activate(up, act_), w.w_down), Site::ffn, f_in);
  return ad::add(mid, ffn);
}

ad::Tensor Backbone::head(const ad::Tensor& x) const {
  return ad::matmul(normed(x, final_norm_), lm_head_);
}

ad::Tensor Backbone::forward(const TokenBatch& batch, BlockHooks* hooks) const {
  BatchShape shape{batch.batch, batch.seq, batch.lengths};
  ad::Tensor x = embed(batch);
  for (std::size_t l = 0; l < blocks_.size(); ++l) x = block_forward(l, x, shape, hooks);
  return head(x);
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string Backbone::parameter_digest() const {
  std::vector<unsigned char> bytes;
  for (const auto& [name, t] : named_parameters()) {
    bytes.insert(bytes.end(), name.begin(), name.end());
    const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
    bytes.insert(bytes.end(), p, p + t.numel() * sizeof(double));
  }
  return sha256_hex(bytes);
}

namespace {

class SiteRecorder : public BlockHooks {
 public:
  std::map<Site, ad::Tensor> seen;
  ad::Tensor site_delta(std::size_t, Site site, const ad::Tensor& input) override {
    seen[site] = input;
    return {};
  }
};

}  // namespace

std::map<Site, ad::Tensor> site_inputs(const Backbone& model, std::size_t layer,
                                       const ad::Tensor& x, const BatchShape& shape) {
  if (layer >= model.n_layers()) {
    throw DimensionError("layer " + std::to_string(layer) + " outside model of " +
                         std::to_string(model.n_layers()) + " layers");
  }
  SiteRecorder rec;
  model.block_forward(layer, x, shape, &rec);
  return rec.seen;
}

TokenBatch make_batch(const std::vector<std::vector<int>>& sequences, int pad_token) {
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.seq = std::max(b.seq, s.size());
  b.tokens.assign(b.rows(), pad_token);
  b.targets.assign(b.rows(), pad_token);
  b.loss_mask.assign(b.rows(), 0.0);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    b.lengths.push_back(sequences[i].size());
    std::copy(sequences[i].begin(), sequences[i].end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.seq));
  }
  return b;
}

}  // namespace moa
