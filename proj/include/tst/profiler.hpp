#pragma once

// Analytic compute/size accounting and the measurement harnesses that keep
// it honest: a counter-backed forward check and a wall-clock benchmark.
//
// Conventions: params count learnable scalars only; MACs cover convolution
// and attention matrix products. Normalization, activations, pooling,
// interpolation and elementwise arithmetic contribute zero MACs.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tst/common.hpp"

namespace tst {

struct ProfileRow {
  std::string name;
  std::string kind;  // conv | bn | attn | pool | interp | act | add
  int64_t params = 0;
  int64_t macs = 0;
};

struct ProfileReport {
  std::vector<ProfileRow> rows;

  void add(std::string name, std::string kind, int64_t params, int64_t macs) {
    rows.push_back({std::move(name), std::move(kind), params, macs});
  }

  int64_t total_params() const {
    int64_t s = 0;
    for (const auto& r : rows) s += r.params;
    return s;
  }

  int64_t total_macs() const {
    int64_t s = 0;
    for (const auto& r : rows) s += r.macs;
    return s;
  }

  bool matches(const std::string& name, const std::string& prefix) const {
    return name == prefix ||
           (name.size() > prefix.size() && name[prefix.size()] == '.' &&
            name.compare(0, prefix.size(), prefix) == 0);
  }

  int64_t params_under(const std::string& prefix) const {
    int64_t s = 0;
    for (const auto& r : rows)
      if (matches(r.name, prefix)) s += r.params;
    return s;
  }

  int64_t macs_under(const std::string& prefix) const {
    int64_t s = 0;
    for (const auto& r : rows)
      if (matches(r.name, prefix)) s += r.macs;
    return s;
  }

  std::string table() const {
    size_t w = 4;
    for (const auto& r : rows) w = std::max(w, r.name.size());
    std::ostringstream os;
    os << std::left << std::setw(int(w) + 2) << "name" << std::setw(8)
       << "kind" << std::right << std::setw(12) << "params" << std::setw(16)
       << "macs" << "\n";
    for (const auto& r : rows)
      os << std::left << std::setw(int(w) + 2) << r.name << std::setw(8)
         << r.kind << std::right << std::setw(12) << r.params << std::setw(16)
         << r.macs << "\n";
    os << std::left << std::setw(int(w) + 2) << "total" << std::setw(8) << ""
       << std::right << std::setw(12) << total_params() << std::setw(16)
       << total_macs() << "\n";
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "name,kind,params,macs\n";
    for (const auto& r : rows)
      os << r.name << ',' << r.kind << ',' << r.params << ',' << r.macs
         << "\n";
    os << "total,," << total_params() << ',' << total_macs() << "\n";
    return os.str();
  }
};

struct MacsCheck {
  int64_t analytic = 0;
  int64_t measured = 0;

  int64_t discrepancy() const { return measured - analytic; }
};

// Runs one forward pass under the MAC meter and compares against the
// analytic count. The two must agree exactly: the kernels execute precisely
// the multiply-accumulates the table claims.
template <typename F>
MacsCheck macs_oracle_check(int64_t analytic, F&& forward) {
  MacMeterScope meter;
  forward();
  return {analytic, int64_t(meter.count())};
}

struct BenchResult {
  double fps = 0;
  int warmup = 0;
  int iters = 0;
  std::vector<double> latencies;  // seconds per timed iteration

  double total_seconds() const {
    return std::accumulate(latencies.begin(), latencies.end(), 0.0);
  }
  double mean_ms() const {
    return latencies.empty() ? 0 : total_seconds() * 1000.0 / double(latencies.size());
  }
  double percentile_ms(double q) const {
    if (latencies.empty()) return 0;
    std::vector<double> s = latencies;
    std::sort(s.begin(), s.end());
    const size_t i = std::min(s.size() - 1, size_t(q * double(s.size())));
    return s[i] * 1000.0;
  }

  std::string csv() const {
    std::ostringstream os;
    os << "warmup,iters,fps,mean_ms,p50_ms,p95_ms\n"
       << warmup << ',' << iters << ',' << fps << ',' << mean_ms() << ','
       << percentile_ms(0.50) << ',' << percentile_ms(0.95) << "\n";
    return os.str();
  }
};

// Fixed-protocol throughput measurement: untimed warmup iterations, then a
// timed block with per-iteration latencies recorded on a monotonic clock.
template <typename F>
BenchResult benchmark_fps(F&& step, int warmup = 20, int iters = 200) {
  TST_REQUIRE(warmup >= 0 && iters >= 1, usage, "benchmark: bad iteration counts");
  for (int i = 0; i < warmup; ++i) step();
  BenchResult r;
  r.warmup = warmup;
  r.iters = iters;
  r.latencies.reserve(size_t(iters));
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    step();
    const auto t1 = std::chrono::steady_clock::now();
    r.latencies.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  r.fps = double(iters) / r.total_seconds();
  return r;
}

}  // namespace tst
