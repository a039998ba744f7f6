// SPDX-License-Identifier: Apache-2.0
//
// Small pre-norm decoder-only transformer. After pretraining it is frozen
// and serves as the fixed path F(x) that adapter experts add deltas to.
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "moa/tensor.hpp"

namespace moa {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 32;
  std::size_t max_seq_len = 64;
  std::string activation = "silu";  // FFN nonlinearity
  std::string norm = "rms";         // rms | none
  std::uint64_t seed = 0;

  // Throws ConfigError listing every invalid field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Attachment points inside one block.
//   q, k, v : input is the normed attention input, delta adds to the projection
//   o       : input is the concatenated head outputs, delta adds to W_o output
//   up      : input is the normed FFN input, delta adds to the W_up output
//   ffn     : input is the normed FFN input, delta adds to the FFN output
//   attn    : extra post-W_o attention term (prompt experts, attention_delta)
enum class Site { q, k, v, o, up, ffn, attn };
std::string site_name(Site site);
Site site_from_name(const std::string& name);

// Right-padded token batch, row-major [batch, seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;  // valid prefix per sequence
  std::vector<int> targets;          // next-token ids, same layout as tokens
  std::vector<double> loss_mask;     // 1 on answer-span targets, else 0

  std::size_t rows() const { return batch * seq; }
};

struct BatchShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::span<const std::size_t> lengths;
};

struct BlockWeights {
  ad::Tensor attn_norm;  // [d]
  ad::Tensor wq, wk, wv, wo;
  ad::Tensor ffn_norm;  // [d]
  ad::Tensor w_up;      // [d, d_ff]
  ad::Tensor w_down;    // [d_ff, d]
};

// Interception points used by adapter experts. Default implementations add
// nothing, which reproduces the plain backbone.
class BlockHooks {
 public:
  virtual ~BlockHooks() = default;
  // Called once per block before any projection. block_input is the residual
  // stream entering the block; attn_input is its normed version.
  virtual void begin_block(std::size_t /*layer*/, const ad::Tensor& /*block_input*/,
                           const ad::Tensor& /*attn_input*/, const BatchShape& /*shape*/) {}
  // Additive delta at `site`, or an undefined tensor for none.
  virtual ad::Tensor site_delta(std::size_t /*layer*/, Site /*site*/,
                                const ad::Tensor& /*site_input*/) {
    return {};
  }
  // Extra post-W_o attention term. q is the (possibly adapted) query.
  virtual ad::Tensor attention_delta(std::size_t /*layer*/, const ad::Tensor& /*q*/,
                                     const BlockWeights& /*weights*/,
                                     const BatchShape& /*shape*/) {
    return {};
  }
};

class Backbone {
 public:
  // Builds and initializes deterministically from cfg.seed.
  explicit Backbone(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  std::size_t n_layers() const { return blocks_.size(); }
  const BlockWeights& block(std::size_t layer) const { return blocks_.at(layer); }

  // Stable-order (name, tensor) pairs; the handles alias the model storage.
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;
  std::size_t parameter_count() const;

  void freeze();
  void unfreeze();
  bool frozen() const { return frozen_; }

  // Residual stream after embeddings: [batch*seq, d].
  ad::Tensor embed(const TokenBatch& batch) const;
  ad::Tensor block_forward(std::size_t layer, const ad::Tensor& x, const BatchShape& shape,
                           BlockHooks* hooks) const;
  ad::Tensor head(const ad::Tensor& x) const;
  // Logits [batch*seq, vocab].
  ad::Tensor forward(const TokenBatch& batch, BlockHooks* hooks = nullptr) const;

  // SHA-256 (hex) over the raw bytes of all parameters in stable order.
  std::string parameter_digest() const;

 private:
  ad::Tensor normed(const ad::Tensor& x, const ad::Tensor& gain) const;

  ModelConfig cfg_;
  ad::Activation act_;
  ad::Tensor tok_emb_, pos_emb_;
  std::vector<BlockWeights> blocks_;
  ad::Tensor final_norm_, lm_head_;
  bool frozen_ = false;
};

// Local inputs of every site in block `layer` for block input x.
std::map<Site, ad::Tensor> site_inputs(const Backbone& model, std::size_t layer,
                                       const ad::Tensor& x, const BatchShape& shape);

// Single-sequence batch helper (no loss targets).
TokenBatch make_batch(const std::vector<std::vector<int>>& sequences, int pad_token = 0);

std::string sha256_hex(std::span<const unsigned char> bytes);

}  // namespace moa
