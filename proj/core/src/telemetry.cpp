// SPDX-License-Identifier: Apache-2.0
#include "moa/telemetry.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "moa/errors.hpp"
#include "moa/tasks.hpp"

namespace moa {

CaptureResult capture(const MoaModel& model, const TokenBatch& batch, std::size_t sample_offset) {
  ad::NoGradGuard no_grad;
  RoutingTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  CaptureResult out;
  out.logits = model.forward(batch, opts);
  const ForwardTrace& ft = trace.forwards.at(0);
  const auto& names = model.expert_names();
  for (const LayerTrace& lt : ft.layers) {
    for (std::size_t b = 0; b < ft.batch; ++b) {
      for (std::size_t t = 0; t < ft.lengths[b]; ++t) {
        const std::size_t row = b * ft.seq + t;
        for (std::size_t e = 0; e < lt.n_experts; ++e) {
          TelemetryRecord r;
          r.sample = sample_offset + b;
          r.position = t;
          r.token = vocab::token_str(ft.tokens[row]);
          r.layer = lt.layer;
          r.expert = e;
          r.expert_name = names[e];
          r.weight = lt.weights[row * lt.n_experts + e];
          r.threshold = lt.thresholds[row];
          r.active = lt.mask.at(row, e);
          out.records.push_back(std::move(r));
        }
      }
    }
  }
  return out;
}

AggregateStats aggregate(const std::vector<TelemetryRecord>& records, std::size_t n_samples) {
  AggregateStats s;
  std::size_t layers = 0, experts = 0;
  for (const auto& r : records) {
    if (n_samples && r.sample >= n_samples) continue;
    layers = std::max(layers, r.layer + 1);
    experts = std::max(experts, r.expert + 1);
  }
  s.experts.assign(experts, "");
  std::vector<std::vector<double>> wsum(layers, std::vector<double>(experts, 0.0));
  std::vector<std::vector<std::uint64_t>> act(layers, std::vector<std::uint64_t>(experts, 0));
  std::vector<std::vector<std::uint64_t>> cnt(layers, std::vector<std::uint64_t>(experts, 0));
  std::vector<double> tsum(layers, 0.0);
  std::vector<std::uint64_t> tcnt(layers, 0);
  for (const auto& r : records) {
    if (n_samples && r.sample >= n_samples) continue;
    if (s.experts[r.expert].empty()) s.experts[r.expert] = r.expert_name;
    wsum[r.layer][r.expert] += r.weight;
    act[r.layer][r.expert] += r.active ? 1 : 0;
    ++cnt[r.layer][r.expert];
    tsum[r.layer] += r.threshold;
    ++tcnt[r.layer];
  }
  s.mean_weight.assign(layers, std::vector<double>(experts, 0.0));
  s.mean_active.assign(layers, std::vector<double>(experts, 0.0));
  s.mean_threshold.assign(layers, 0.0);
  s.layer_active.assign(layers, 0.0);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t e = 0; e < experts; ++e) {
      if (!cnt[l][e]) continue;
      const auto n = static_cast<double>(cnt[l][e]);
      s.mean_weight[l][e] = wsum[l][e] / n;
      s.mean_active[l][e] = static_cast<double>(act[l][e]) / n;
    }
    if (tcnt[l]) s.mean_threshold[l] = tsum[l] / static_cast<double>(tcnt[l]);
  }
  // Derived fields are recomputed the same way on CSV import.
  for (std::size_t l = 0; l < layers; ++l) {
    double a = 0.0;
    for (double v : s.mean_active[l]) a += v;
    s.layer_active[l] = a;
  }
  double g = 0.0;
  for (double v : s.layer_active) g += v;
  s.global_active = layers ? g / static_cast<double>(layers) : 0.0;
  return s;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw DimensionError("pearson needs two equal-length series of at least 2 values");
  }
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

double weight_correlation(const AggregateStats& a, const AggregateStats& b) {
  std::vector<double> fa, fb;
  for (const auto& row : a.mean_weight) fa.insert(fa.end(), row.begin(), row.end());
  for (const auto& row : b.mean_weight) fb.insert(fb.end(), row.begin(), row.end());
  return pearson(fa, fb);
}

InvocationReport count_expert_invocations(const InvocationCounter& counter, const MoaModel& model) {
  InvocationReport rep;
  const std::size_t L = model.n_layers(), n = model.n_experts();
  // rows_seen accumulates once per layer per forward.
  const std::uint64_t tokens = L ? counter.rows_seen / L : 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::uint64_t t = l < counter.counts.size() ? counter.layer_total(l) : 0;
    rep.layer_totals.push_back(t);
    rep.layer_capacity.push_back(tokens * n);
    rep.total += t;
    rep.capacity += tokens * n;
    if (l < counter.counts.size()) {
      for (std::size_t e = 0; e < counter.counts[l].size() && e < n; ++e) {
        rep.flops += static_cast<double>(counter.counts[l][e]) *
                     model.layer(l).experts[e].flops_per_token();
      }
    }
  }
  return rep;
}

std::string stats_filename(const std::string& run_id, const std::string& mode) {
  return run_id + "_" + mode + "_stats.csv";
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw IoError("bad number '" + s + "' in " + path.string());
  }
  return v;
}

const char* kStatsHeader = "layer,expert,mean_weight,mean_threshold,mean_active";

}  // namespace

void write_stats_csv(const AggregateStats& stats, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << kStatsHeader << '\n';
  for (std::size_t l = 0; l < stats.n_layers(); ++l) {
    for (std::size_t e = 0; e < stats.n_experts(); ++e) {
      out << l << ',' << stats.experts[e] << ',' << format_double(stats.mean_weight[l][e]) << ','
          << format_double(stats.mean_threshold[l]) << ',' << format_double(stats.mean_active[l][e])
          << '\n';
    }
  }
  finish(out, path);
}

AggregateStats read_stats_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kStatsHeader) {
    throw IoError("unexpected header in " + path.string());
  }
  struct Row {
    std::size_t layer;
    std::string expert;
    double w, t, a;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw IoError("expected 5 fields in " + path.string() + ": " + line);
    rows.push_back({static_cast<std::size_t>(parse_double(f[0], path)), f[1], parse_double(f[2], path),
                    parse_double(f[3], path), parse_double(f[4], path)});
  }
  AggregateStats s;
  std::size_t layers = 0;
  for (const auto& r : rows) layers = std::max(layers, r.layer + 1);
  for (const auto& r : rows) {
    if (r.layer != 0) break;
    s.experts.push_back(r.expert);
  }
  const std::size_t n = s.experts.size();
  if (rows.size() != layers * n) throw IoError("stats grid is not rectangular in " + path.string());
  s.mean_weight.assign(layers, std::vector<double>(n, 0.0));
  s.mean_active.assign(layers, std::vector<double>(n, 0.0));
  s.mean_threshold.assign(layers, 0.0);
  s.layer_active.assign(layers, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::size_t e = i % n;
    if (r.layer != i / n || r.expert != s.experts[e]) throw IoError("stats rows out of order in " + path.string());
    s.mean_weight[r.layer][e] = r.w;
    s.mean_threshold[r.layer] = r.t;
    s.mean_active[r.layer][e] = r.a;
  }
  for (std::size_t l = 0; l < layers; ++l) {
    double a = 0.0;
    for (double v : s.mean_active[l]) a += v;
    s.layer_active[l] = a;
  }
  double g = 0.0;
  for (double v : s.layer_active) g += v;
  s.global_active = layers ? g / static_cast<double>(layers) : 0.0;
  return s;
}

nlohmann::json stats_to_json(const AggregateStats& stats) {
  nlohmann::ordered_json j;
  j["experts"] = stats.experts;
  j["global_mean_active"] = stats.global_active;
  auto& layers = j["layers"] = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < stats.n_layers(); ++l) {
    nlohmann::ordered_json L;
    L["layer"] = l;
    L["mean_threshold"] = stats.mean_threshold[l];
    L["mean_active"] = stats.layer_active[l];
    auto& ex = L["experts"] = nlohmann::ordered_json::array();
    for (std::size_t e = 0; e < stats.n_experts(); ++e) {
      ex.push_back({{"name", stats.experts[e]},
                    {"mean_weight", stats.mean_weight[l][e]},
                    {"mean_active", stats.mean_active[l][e]}});
    }
    layers.push_back(std::move(L));
  }
  return nlohmann::json::parse(j.dump());
}

void write_stats_json(const AggregateStats& stats, const std::filesystem::path& path) {
  auto out = open_out(path);
  nlohmann::ordered_json j = nlohmann::ordered_json::parse(stats_to_json(stats).dump());
  out << j.dump(2) << '\n';
  finish(out, path);
}

void write_heatmap_csv(const AggregateStats& stats, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "layer,expert,metric,value\n";
  for (const char* metric : {"mean_weight", "mean_active"}) {
    const auto& m = std::string(metric) == "mean_weight" ? stats.mean_weight : stats.mean_active;
    for (std::size_t l = 0; l < stats.n_layers(); ++l) {
      for (std::size_t e = 0; e < stats.n_experts(); ++e) {
        out << l << ',' << stats.experts[e] << ',' << metric << ',' << format_double(m[l][e]) << '\n';
      }
    }
  }
  finish(out, path);
}

void write_records_csv(const std::vector<TelemetryRecord>& records, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "sample,position,token,layer,expert,weight,threshold,active\n";
  for (const auto& r : records) {
    // Tokens are single symbols or <name>; commas never occur.
    out << r.sample << ',' << r.position << ',' << r.token << ',' << r.layer << ',' << r.expert_name << ','
        << format_double(r.weight) << ',' << format_double(r.threshold) << ',' << (r.active ? 1 : 0)
        << '\n';
  }
  finish(out, path);
}

}  // namespace moa
