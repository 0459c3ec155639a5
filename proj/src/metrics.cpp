#include "coattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "coattn/random.hpp"

namespace coattn {

std::vector<double> fractional_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  // rounding noise from pooling must not split mathematically equal values
  double scale = 0.0;
  for (double v : values) scale = std::max(scale, std::abs(v));
  const double tol = kTieTolerance * scale;
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] - values[order[j - 1]] <= tol) ++j;
    // positions i..j-1 (0-based) share rank mean((i+1)..j)
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

namespace {

bool is_constant(std::span<const double> ranks) {
  return std::all_of(ranks.begin(), ranks.end(), [&](double r) { return r == ranks.front(); });
}

}  // namespace

std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 2) return std::nullopt;
  const auto ra = fractional_ranks(a);
  const auto rb = fractional_ranks(b);
  if (is_constant(ra) || is_constant(rb)) return std::nullopt;
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double xa = ra[i] - ma;
    const double xb = rb[i] - mb;
    num += xa * xb;
    da += xa * xa;
    db += xb * xb;
  }
  const double rho = num / std::sqrt(da * db);
  return std::clamp(rho, -1.0, 1.0);
}

std::optional<double> spearman(const Grid14& a, const Grid14& b) { return spearman(a.cells, b.cells); }

const CellAggregate* RankCorrelationReport::find(const std::string& condition, std::size_t layer) const {
  for (const auto& c : cells)
    if (c.condition == condition && c.layer == layer) return &c;
  return nullptr;
}

MeanSem mean_sem(std::span<const double> values) {
  MeanSem out;
  out.n = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  out.mean = mean;
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double var = ss / static_cast<double>(values.size() - 1);
    out.sem = std::sqrt(var / static_cast<double>(values.size()));
  }
  return out;
}

RankCorrelationReport aggregate(std::vector<PairRecord> records) {
  if (records.empty()) throw std::invalid_argument("aggregate: no records");
  std::stable_sort(records.begin(), records.end(), [](const PairRecord& a, const PairRecord& b) {
    if (a.condition != b.condition) return a.condition < b.condition;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.pair_id < b.pair_id;
  });
  RankCorrelationReport report;
  std::size_t i = 0;
  while (i < records.size()) {
    std::size_t j = i;
    CellAggregate cell;
    cell.condition = records[i].condition;
    cell.layer = records[i].layer;
    std::vector<double> values;
    while (j < records.size() && records[j].condition == cell.condition && records[j].layer == cell.layer) {
      if (records[j].rho) {
        values.push_back(*records[j].rho);
      } else {
        ++cell.degenerate;
      }
      ++j;
    }
    const MeanSem ms = mean_sem(values);
    cell.n = ms.n;
    cell.mean = ms.mean;
    cell.sem = ms.sem;
    report.cells.push_back(cell);
    i = j;
  }
  report.records = std::move(records);
  return report;
}

MeanSem random_baseline(std::size_t rows, std::size_t cols, std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 100) throw std::invalid_argument("random_baseline: need at least 100 samples");
  if (rows * cols < 2) throw std::invalid_argument("random_baseline: grid too small");
  Rng rng(seed);
  std::vector<double> a(rows * cols), b(rows * cols);
  std::vector<double> rhos;
  rhos.reserve(n_samples);
  std::size_t skipped = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (double& v : a) v = uniform01(rng);
    for (double& v : b) v = uniform01(rng);
    if (auto rho = spearman(a, b)) {
      rhos.push_back(*rho);
    } else {
      ++skipped;
    }
  }
  MeanSem out = mean_sem(rhos);
  out.skipped = skipped;
  return out;
}

MeanSem inter_reference(const std::vector<std::vector<Grid14>>& references_per_pair) {
  std::vector<double> per_pair;
  std::size_t skipped = 0;
  for (const auto& refs : references_per_pair) {
    if (refs.size() < 2) {
      ++skipped;
      continue;
    }
    std::vector<double> rhos;
    for (std::size_t i = 0; i < refs.size(); ++i)
      for (std::size_t j = i + 1; j < refs.size(); ++j)
        if (auto rho = spearman(refs[i], refs[j])) rhos.push_back(*rho);
    if (rhos.empty()) {
      ++skipped;
      continue;
    }
    per_pair.push_back(*mean_sem(rhos).mean);
  }
  MeanSem out = mean_sem(per_pair);
  out.skipped = skipped;
  return out;
}

std::string format_value(std::optional<double> v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

void write_report_csv(std::ostream& os, const RankCorrelationReport& report) {
  os << "condition,layer,n,mean_rho,sem,degenerate_count\n";
  for (const auto& c : report.cells) {
    os << c.condition << ',' << c.layer << ',' << c.n << ',' << format_value(c.mean) << ','
       << format_value(c.sem) << ',' << c.degenerate << '\n';
  }
}

}  // namespace coattn
