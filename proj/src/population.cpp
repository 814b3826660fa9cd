#include "mimetic/population.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace mimetic::population {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void require_members(const PopulationMatrix& pop, std::size_t k_min,
                     const char* what) {
  if (pop.members() < k_min) {
    throw InputError(std::string(what) + " needs K >= " +
                     std::to_string(k_min) + ", have " +
                     std::to_string(pop.members()));
  }
}

// Cross-member mean and unbiased variance of entry `idx` of `members`.
double entry_variance(const std::vector<std::vector<double>>& members,
                      std::size_t idx) {
  const std::size_t K = members.size();
  double mean = 0.0;
  for (const auto& m : members) mean += m[idx];
  mean /= static_cast<double>(K);
  double var = 0.0;
  for (const auto& m : members) {
    const double d = m[idx] - mean;
    var += d * d;
  }
  return var / static_cast<double>(K - 1);
}

}  // namespace

PopulationMatrix from_members(int layer_index, int p, int n,
                              std::vector<std::vector<double>> w1,
                              std::vector<std::vector<double>> w2) {
  if (w1.size() != w2.size()) {
    throw ShapeError("W1/W2 member counts differ");
  }
  const std::size_t pn = static_cast<std::size_t>(p) * n;
  for (std::size_t k = 0; k < w1.size(); ++k) {
    if (w1[k].size() != pn || w2[k].size() != pn) {
      throw ShapeError("member " + std::to_string(k) +
                       " has wrong element count");
    }
  }
  PopulationMatrix pop;
  pop.layer_index = layer_index;
  pop.p = p;
  pop.n = n;
  pop.seeds.resize(w1.size());
  std::iota(pop.seeds.begin(), pop.seeds.end(), 0);
  pop.w1 = std::move(w1);
  pop.w2 = std::move(w2);
  return pop;
}

PopulationMatrix collect(const std::filesystem::path& dir, int layer_index) {
  if (!std::filesystem::is_directory(dir)) {
    throw InputError("not a directory: " + dir.string());
  }
  if (layer_index < 0) throw InputError("layer_index must be >= 0");

  struct Member {
    std::uint64_t seed;
    std::vector<double> w1, w2;
  };
  std::vector<Member> members;
  PopulationMatrix pop;
  pop.layer_index = layer_index;

  const std::string w1_name =
      "block." + std::to_string(layer_index) + ".mlp.W1";
  const std::string w2_name =
      "block." + std::to_string(layer_index) + ".mlp.W2";

  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto& path = entry.path();
    if (path.extension() == ".mimw") {
      files.push_back(path);
    } else if (path.filename().string().ends_with(".failed.json")) {
      ++pop.skipped_failed;
    }
  }
  std::sort(files.begin(), files.end());

  bool have_hash = false;
  std::uint64_t config_hash = 0;
  for (const auto& path : files) {
    snapshot::WeightSnapshot snap;
    try {
      snap = snapshot::load(path);
    } catch (const FormatError&) {
      ++pop.skipped_invalid;
      continue;
    }
    if (!have_hash) {
      config_hash = snap.config_hash;
      have_hash = true;
    } else if (snap.config_hash != config_hash) {
      char a[24], b[24];
      std::snprintf(a, sizeof(a), "%016llx",
                    static_cast<unsigned long long>(config_hash));
      std::snprintf(b, sizeof(b), "%016llx",
                    static_cast<unsigned long long>(snap.config_hash));
      throw InputError("mixed config hashes in population: " + std::string(a) +
                       " vs " + std::string(b) + " (" + path.string() + ")");
    }
    const snapshot::NamedTensor* w1 = snap.find(w1_name);
    const snapshot::NamedTensor* w2 = snap.find(w2_name);
    if (!w1 || !w2) {
      throw InputError("layer " + std::to_string(layer_index) +
                       " not present in " + path.string());
    }
    if (w1->shape.size() != 2 || w2->shape.size() != 2 ||
        w1->shape[0] != w2->shape[1] || w1->shape[1] != w2->shape[0]) {
      throw ShapeError("inconsistent MLP shapes in " + path.string());
    }
    if (pop.p == 0) {
      pop.p = w1->shape[0];
      pop.n = w1->shape[1];
    }
    members.push_back({snap.seed, w1->data, w2->data});
  }

  if (members.size() < 2) {
    throw InputError("population needs at least 2 valid snapshots, found " +
                     std::to_string(members.size()) + " (skipped " +
                     std::to_string(pop.skipped_invalid) + " invalid, " +
                     std::to_string(pop.skipped_failed) + " failed)");
  }
  std::sort(members.begin(), members.end(),
            [](const Member& a, const Member& b) { return a.seed < b.seed; });
  for (Member& m : members) {
    pop.seeds.push_back(m.seed);
    pop.w1.push_back(std::move(m.w1));
    pop.w2.push_back(std::move(m.w2));
  }
  return pop;
}

CovarianceMatrix covariance(const PopulationMatrix& pop) {
  require_members(pop, 2, "covariance");
  const std::size_t pn = static_cast<std::size_t>(pop.p) * pop.n;
  const std::size_t dim = 2 * pn;
  const std::size_t K = pop.members();

  std::vector<double> mean(dim, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < pn; ++i) mean[i] += pop.w1[k][i];
    for (std::size_t i = 0; i < pn; ++i) mean[pn + i] += pop.w2[k][i];
  }
  for (double& v : mean) v /= static_cast<double>(K);

  CovarianceMatrix cov;
  cov.dim = dim;
  cov.block = pn;
  cov.values.assign(dim * dim, 0.0);
  std::vector<double> centered(dim);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < pn; ++i) {
      centered[i] = pop.w1[k][i] - mean[i];
    }
    for (std::size_t i = 0; i < pn; ++i) {
      centered[pn + i] = pop.w2[k][i] - mean[pn + i];
    }
    for (std::size_t i = 0; i < dim; ++i) {
      const double ci = centered[i];
      if (ci == 0.0) continue;
      double* row = cov.values.data() + i * dim;
      for (std::size_t j = i; j < dim; ++j) {
        row[j] += ci * centered[j];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(K - 1);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = i; j < dim; ++j) {
      const double v = cov.values[i * dim + j] * inv;
      cov.values[i * dim + j] = v;
      cov.values[j * dim + i] = v;
    }
  }
  return cov;
}

double stripe_score(const PopulationMatrix& pop, Which which, Axis axis) {
  require_members(pop, 8, "stripe_score");
  const auto& members = which == Which::W1 ? pop.w1 : pop.w2;
  // Stored row-major: W1 is p x n, W2 is n x p.
  const int rows = which == Which::W1 ? pop.p : pop.n;
  const int cols = which == Which::W1 ? pop.n : pop.p;
  const std::size_t K = members.size();

  double s2 = 0.0;
  const std::size_t total = static_cast<std::size_t>(rows) * cols;
  for (std::size_t idx = 0; idx < total; ++idx) {
    s2 += entry_variance(members, idx);
  }
  s2 /= static_cast<double>(total);
  if (s2 <= 0.0) {
    throw InputError("degenerate population: zero per-entry variance");
  }

  const int groups = axis == Axis::columns ? cols : rows;
  const int group_size = axis == Axis::columns ? rows : cols;
  double v = 0.0;
  std::vector<double> group_means(K);
  for (int g = 0; g < groups; ++g) {
    for (std::size_t k = 0; k < K; ++k) {
      const double* m = members[k].data();
      double sum = 0.0;
      if (axis == Axis::columns) {
        for (int i = 0; i < rows; ++i) {
          sum += m[static_cast<std::size_t>(i) * cols + g];
        }
      } else {
        const double* row = m + static_cast<std::size_t>(g) * cols;
        for (int j = 0; j < cols; ++j) sum += row[j];
      }
      group_means[k] = sum / static_cast<double>(group_size);
    }
    double mean = 0.0;
    for (double gm : group_means) mean += gm;
    mean /= static_cast<double>(K);
    double var = 0.0;
    for (double gm : group_means) var += (gm - mean) * (gm - mean);
    v += var / static_cast<double>(K - 1);
  }
  v /= static_cast<double>(groups);
  return static_cast<double>(group_size) * v / s2;
}

CrossCorrelation cross_correlation(const PopulationMatrix& pop) {
  require_members(pop, 8, "cross_correlation");
  const int p = pop.p, n = pop.n;
  const std::size_t K = pop.members();
  CrossCorrelation out;
  out.total = static_cast<std::size_t>(p) * n;
  double sum_r = 0.0;
  std::size_t included = 0;
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < n; ++j) {
      const std::size_t idx1 = static_cast<std::size_t>(i) * n + j;
      const std::size_t idx2 = static_cast<std::size_t>(j) * p + i;
      double mx = 0.0, my = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        mx += pop.w1[k][idx1];
        my += pop.w2[k][idx2];
      }
      mx /= static_cast<double>(K);
      my /= static_cast<double>(K);
      double sxx = 0.0, syy = 0.0, sxy = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double dx = pop.w1[k][idx1] - mx;
        const double dy = pop.w2[k][idx2] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
      }
      if (sxx <= 0.0 || syy <= 0.0) {
        ++out.excluded;
        continue;
      }
      sum_r += sxy / std::sqrt(sxx * syy);
      ++included;
    }
  }
  if (included == 0) {
    throw InputError("cross_correlation: every entry pair is degenerate");
  }
  out.rho = sum_r / static_cast<double>(included);
  return out;
}

PopulationStats analyze(const PopulationMatrix& pop, bool want_covariance) {
  PopulationStats stats;
  stats.K = pop.members();
  stats.layer_index = pop.layer_index;
  stats.p = pop.p;
  stats.n = pop.n;
  stats.stripes.w1_rows = stripe_score(pop, Which::W1, Axis::rows);
  stats.stripes.w1_cols = stripe_score(pop, Which::W1, Axis::columns);
  stats.stripes.w2_rows = stripe_score(pop, Which::W2, Axis::rows);
  stats.stripes.w2_cols = stripe_score(pop, Which::W2, Axis::columns);
  stats.cross = cross_correlation(pop);
  const std::size_t pn = static_cast<std::size_t>(pop.p) * pop.n;
  if (want_covariance && pn <= 2048) {
    stats.cov = covariance(pop);
    stats.has_covariance = true;
  }
  return stats;
}

void export_heatmap_data(const CovarianceMatrix& cov,
                         const std::filesystem::path& csv_path) {
  {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw InputError("cannot write " + csv_path.string());
    std::string line;
    for (std::size_t i = 0; i < cov.dim; ++i) {
      line.clear();
      for (std::size_t j = 0; j < cov.dim; ++j) {
        if (j) line += ',';
        line += fmt_double(cov.at(i, j));
      }
      line += '\n';
      out << line;
    }
    if (!out) throw InputError("short write to " + csv_path.string());
  }
  nlohmann::ordered_json meta;
  meta["dim"] = cov.dim;
  meta["block_offsets"] = {0, cov.block, 2 * cov.block};
  meta["blocks"] = {"W1", "W2"};
  meta["vec_order"] = "row-major";
  const std::filesystem::path meta_path = csv_path.string() + ".meta.json";
  std::ofstream mout(meta_path, std::ios::trunc);
  if (!mout) throw InputError("cannot write " + meta_path.string());
  mout << meta.dump(2) << "\n";
}

double min_quadratic_form(const CovarianceMatrix& cov, int trials, Rng& rng) {
  if (cov.dim == 0) throw UsageError("empty covariance");
  double worst = std::numeric_limits<double>::infinity();
  std::vector<double> z(cov.dim);
  std::vector<double> cz(cov.dim);
  for (int t = 0; t < trials; ++t) {
    double norm2 = 0.0;
    for (double& v : z) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& v : z) v *= inv;
    for (std::size_t i = 0; i < cov.dim; ++i) {
      const double* row = cov.values.data() + i * cov.dim;
      double s = 0.0;
      for (std::size_t j = 0; j < cov.dim; ++j) s += row[j] * z[j];
      cz[i] = s;
    }
    double q = 0.0;
    for (std::size_t i = 0; i < cov.dim; ++i) q += z[i] * cz[i];
    worst = std::min(worst, q);
  }
  return worst;
}

}  // namespace mimetic::population
