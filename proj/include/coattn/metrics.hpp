#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coattn/attnmap.hpp"

namespace coattn {

/// Values closer than this fraction of the largest magnitude count as tied.
inline constexpr double kTieTolerance = 1e-12;

/// Fractional (average) ranks, 1-based: tied values share the mean of their positions.
std::vector<double> fractional_ranks(std::span<const double> values);

/// Spearman rank correlation with average-rank ties. Returns nullopt when either
/// input is constant, because the rank variance is then zero and rho is undefined.
std::optional<double> spearman(std::span<const double> a, std::span<const double> b);
std::optional<double> spearman(const Grid14& a, const Grid14& b);

struct PairRecord {
  std::string pair_id;
  std::size_t layer = 0;
  std::string condition;
  std::optional<double> rho;  // nullopt marks a degenerate pair
};

struct CellAggregate {
  std::string condition;
  std::size_t layer = 0;
  std::size_t n = 0;  // non-degenerate records
  std::optional<double> mean;
  std::optional<double> sem;  // sample std / sqrt(n), needs n >= 2
  std::size_t degenerate = 0;
};

struct RankCorrelationReport {
  std::vector<PairRecord> records;
  std::vector<CellAggregate> cells;  // sorted by (condition, layer)

  const CellAggregate* find(const std::string& condition, std::size_t layer) const;
};

/// Groups records by (condition, layer); within a cell values are summed in pair-id
/// order so the result does not depend on the order records arrive in.
RankCorrelationReport aggregate(std::vector<PairRecord> records);

struct MeanSem {
  std::optional<double> mean;
  std::optional<double> sem;
  std::size_t n = 0;
  std::size_t skipped = 0;
};

/// Mean and sample SEM over a list of values (summed in the given order).
MeanSem mean_sem(std::span<const double> values);

/// rho between pairs of i.i.d. uniform random grids of the given shape.
MeanSem random_baseline(std::size_t rows, std::size_t cols, std::size_t n_samples, std::uint64_t seed);

/// Mean pairwise rho among the reference grids of each pair, then aggregated over
/// pairs. Pairs with fewer than two references are skipped and counted.
MeanSem inter_reference(const std::vector<std::vector<Grid14>>& references_per_pair);

/// CSV with header `condition,layer,n,mean_rho,sem,degenerate_count`.
void write_report_csv(std::ostream& os, const RankCorrelationReport& report);

/// Fixed-precision rendering shared by all CSV writers ("NA" for missing).
std::string format_value(std::optional<double> v);

}  // namespace coattn
