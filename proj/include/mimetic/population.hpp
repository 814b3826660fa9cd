#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mimetic/rng.hpp"
#include "mimetic/snapshot.hpp"

namespace mimetic::population {

// One MLP layer's weights across a population of trained models.
// "vec" everywhere means row-major unrolling.
struct PopulationMatrix {
  int layer_index = 0;
  int p = 0;  // W1 rows (hidden width)
  int n = 0;  // W1 columns (embed width)
  std::vector<std::uint64_t> seeds;             // ascending, one per member
  std::vector<std::vector<double>> w1;          // each p*n, row-major
  std::vector<std::vector<double>> w2;          // each n*p, row-major
  int skipped_invalid = 0;  // unreadable / CRC-failed snapshot files
  int skipped_failed = 0;   // failure records from diverged runs

  std::size_t members() const { return seeds.size(); }
};

// Reads every *.mimw snapshot in `dir` (non-recursive), extracts layer
// `layer_index`'s MLP pair, and orders members by seed. Counts rather than
// fails on unreadable files; *.failed.json files count as failed runs.
// Errors: mixed config hashes, missing layer, fewer than 2 valid members.
PopulationMatrix collect(const std::filesystem::path& dir, int layer_index);

// Builds a population directly from in-memory matrices (tests, oracles).
PopulationMatrix from_members(int layer_index, int p, int n,
                              std::vector<std::vector<double>> w1,
                              std::vector<std::vector<double>> w2);

struct CovarianceMatrix {
  std::size_t dim = 0;          // 2*n*p
  std::size_t block = 0;        // p*n: start of the W2 block
  std::vector<double> values;   // dense row-major dim x dim
  double at(std::size_t i, std::size_t j) const { return values[i * dim + j]; }
};

// Unbiased (K-1) covariance of [vec(W1); vec(W2)] across members.
CovarianceMatrix covariance(const PopulationMatrix& pop);

enum class Which { W1, W2 };
enum class Axis { rows, columns };

// Variance-ratio stripe statistic. With s^2 the mean across entries of the
// cross-member entry variance, and v the mean across groups of the
// cross-member variance of group means (columns: mean over the p rows;
// rows: mean over the n columns), the score is group_size * v / s^2.
// ~1 for independent entries, ~group size for perfectly grouped entries.
// Requires K >= 8; a degenerate population (s^2 = 0) is an error.
double stripe_score(const PopulationMatrix& pop, Which which, Axis axis);

struct CrossCorrelation {
  double rho = 0.0;          // mean Pearson r of W1[i,j] vs W2[j,i]
  std::size_t excluded = 0;  // zero-variance pairs left out
  std::size_t total = 0;     // p*n pairs
};

// Requires K >= 8; errors if every pair is degenerate.
CrossCorrelation cross_correlation(const PopulationMatrix& pop);

struct StripeScores {
  double w1_rows = 0.0, w1_cols = 0.0, w2_rows = 0.0, w2_cols = 0.0;
};

struct PopulationStats {
  std::size_t K = 0;
  int layer_index = 0;
  int p = 0, n = 0;
  StripeScores stripes;
  CrossCorrelation cross;
  bool has_covariance = false;  // dense cov only for p*n <= 2048
  CovarianceMatrix cov;
};

PopulationStats analyze(const PopulationMatrix& pop, bool want_covariance);

// CSV (one matrix row per line, %.17g) plus a "<path>.meta.json" sidecar
// holding dim, block offsets [0, pn, 2pn], and the vec order.
void export_heatmap_data(const CovarianceMatrix& cov,
                         const std::filesystem::path& csv_path);

// Minimum of z'Cz over `trials` random unit vectors z: a cheap PSD probe.
double min_quadratic_form(const CovarianceMatrix& cov, int trials, Rng& rng);

}  // namespace mimetic::population
