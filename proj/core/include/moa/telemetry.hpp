// SPDX-License-Identifier: Apache-2.0
//
// Routing telemetry: per-token traces, per-layer aggregates, invocation and
// FLOP accounting, and CSV/JSON export.
//
// Stats CSV (one row per layer x expert cell):
//   layer,expert,mean_weight,mean_threshold,mean_active
// mean_threshold repeats the layer value on every row of that layer and
// mean_active is the fraction of tokens on which the expert ran.
//
// Heatmap CSV (long format): layer,expert,metric,value with metric in
// {mean_weight, mean_active}.
//
// Records CSV: sample,position,token,layer,expert,weight,threshold,active
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moa/moa_model.hpp"

namespace moa {

struct TelemetryRecord {
  std::size_t sample = 0;    // sequence index within the captured batch(es)
  std::size_t position = 0;  // token position
  std::string token;
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::string expert_name;
  double weight = 0.0;
  double threshold = 0.0;  // 0 when the mode has no threshold
  bool active = false;

  bool operator==(const TelemetryRecord&) const = default;
};

struct CaptureResult {
  ad::Tensor logits;
  std::vector<TelemetryRecord> records;
};

// Inference-mode forward that also returns one record per (valid token,
// layer, expert), ordered by layer, sample, position, expert. sample ids
// start at sample_offset.
CaptureResult capture(const MoaModel& model, const TokenBatch& batch, std::size_t sample_offset = 0);

struct AggregateStats {
  std::vector<std::string> experts;
  std::vector<std::vector<double>> mean_weight;  // [layer][expert]
  std::vector<double> mean_threshold;            // [layer]
  std::vector<std::vector<double>> mean_active;  // [layer][expert], fraction of tokens
  std::vector<double> layer_active;              // [layer], mean activated experts per token
  double global_active = 0.0;                    // mean of layer_active

  std::size_t n_layers() const { return mean_weight.size(); }
  std::size_t n_experts() const { return experts.size(); }
  bool operator==(const AggregateStats&) const = default;
};

// Pools all tokens of the first n_samples samples (0: all samples).
AggregateStats aggregate(const std::vector<TelemetryRecord>& records, std::size_t n_samples = 0);

double pearson(std::span<const double> a, std::span<const double> b);
// Correlation of the flattened mean-weight matrices of two runs.
double weight_correlation(const AggregateStats& a, const AggregateStats& b);

struct InvocationReport {
  std::vector<std::uint64_t> layer_totals;   // [layer]
  std::vector<std::uint64_t> layer_capacity; // [layer], tokens x experts
  std::uint64_t total = 0;
  std::uint64_t capacity = 0;
  double flops = 0.0;  // sum over invocations of per-token expert FLOPs
  double ratio() const { return capacity ? static_cast<double>(total) / static_cast<double>(capacity) : 0.0; }
};

InvocationReport count_expert_invocations(const InvocationCounter& counter, const MoaModel& model);

std::string stats_filename(const std::string& run_id, const std::string& mode);

void write_stats_csv(const AggregateStats& stats, const std::filesystem::path& path);
AggregateStats read_stats_csv(const std::filesystem::path& path);
nlohmann::json stats_to_json(const AggregateStats& stats);
void write_stats_json(const AggregateStats& stats, const std::filesystem::path& path);
void write_heatmap_csv(const AggregateStats& stats, const std::filesystem::path& path);
void write_records_csv(const std::vector<TelemetryRecord>& records, const std::filesystem::path& path);

// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace moa
