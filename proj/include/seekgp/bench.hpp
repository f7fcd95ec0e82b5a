#pragma once

#include "core.hpp"
#include "gp.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace seekgp {

// ---------------------------------------------------------------- Sobol

inline constexpr int kSobolMaxDim = 6;
inline constexpr int kSobolBits = 32;

namespace detail {

struct SobolPoly {
  int degree;
  unsigned coeffs;  // interior coefficients a
  std::array<std::uint32_t, 4> m;
};

// Joe-Kuo (new-joe-kuo-6.21201) entries for dimensions 2..6; dimension 1 is
// the van der Corput sequence.
inline constexpr std::array<SobolPoly, kSobolMaxDim - 1> kSobolTable{{
    {1, 0, {1, 0, 0, 0}},
    {2, 1, {1, 3, 0, 0}},
    {3, 1, {1, 3, 1, 0}},
    {3, 2, {1, 1, 1, 0}},
    {4, 1, {1, 1, 3, 3}},
}};

inline std::array<std::uint32_t, kSobolBits> sobol_directions(int dim) {
  std::array<std::uint32_t, kSobolBits> v{};
  if (dim == 0) {
    for (int k = 0; k < kSobolBits; ++k) v[k] = 1u << (kSobolBits - 1 - k);
    return v;
  }
  const SobolPoly& p = kSobolTable[static_cast<std::size_t>(dim - 1)];
  const int s = p.degree;
  for (int k = 0; k < s; ++k) v[k] = p.m[k] << (kSobolBits - 1 - k);
  for (int k = s; k < kSobolBits; ++k) {
    std::uint32_t val = v[k - s] ^ (v[k - s] >> s);
    for (int j = 1; j < s; ++j) {
      if ((p.coeffs >> (s - 1 - j)) & 1u) val ^= v[k - j];
    }
    v[k] = val;
  }
  return v;
}

}  // namespace detail

/// Gray-code Sobol generator over [0,1)^dim, dim <= 6.
class Sobol {
 public:
  explicit Sobol(int dim, std::uint64_t start_index = 1) : dim_(dim) {
    if (dim < 1 || dim > kSobolMaxDim) {
      throw ConfigError("Sobol: dimension " + std::to_string(dim) + " outside the supported range 1.." +
                        std::to_string(kSobolMaxDim));
    }
    for (int j = 0; j < dim; ++j) directions_[static_cast<std::size_t>(j)] = detail::sobol_directions(j);
    state_.fill(0);
    seek(start_index);
  }

  int dim() const { return dim_; }
  std::uint64_t index() const { return index_; }

  /// Jumps to the point with the given index.
  void seek(std::uint64_t index) {
    require(index < (std::uint64_t{1} << kSobolBits), "Sobol: index exceeds 2^32");
    index_ = index;
    const std::uint64_t gray = index ^ (index >> 1);
    for (int j = 0; j < dim_; ++j) {
      std::uint32_t x = 0;
      for (int k = 0; k < kSobolBits; ++k) {
        if ((gray >> k) & 1u) x ^= directions_[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
      }
      state_[static_cast<std::size_t>(j)] = x;
    }
  }

  /// Writes the current point and advances.
  void next(std::span<double> out) {
    constexpr double scale = 1.0 / 4294967296.0;
    for (int j = 0; j < dim_; ++j) out[static_cast<std::size_t>(j)] = state_[static_cast<std::size_t>(j)] * scale;
    const int c = std::countr_zero(index_ + 1);
    ++index_;
    for (int j = 0; j < dim_; ++j) {
      state_[static_cast<std::size_t>(j)] ^= directions_[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
    }
  }

 private:
  int dim_;
  std::uint64_t index_ = 0;
  std::array<std::array<std::uint32_t, kSobolBits>, kSobolMaxDim> directions_{};
  std::array<std::uint32_t, kSobolMaxDim> state_{};
};

/// n points starting at `start_index` (1 skips the origin).
inline Points sobol_points(int dim, Index n, std::uint64_t start_index = 1) {
  Sobol s(dim, start_index);
  Points X(n, dim);
  for (Index i = 0; i < n; ++i) s.next(row(X, i));
  return X;
}

// ---------------------------------------------------------------- functions

inline double analytic_one(double x) {
  const double q = x - 0.4;
  return (std::sin(5 * x) + std::cos(10 * x)) / 3.94 + 1.435 * q * q * std::cos(100 * x) + 0.659;
}

inline double analytic_two_envelope(double x) {
  if (x < 0.5) return 4 * x;
  if (x <= 1.5) return 2.0;
  return 4 * (2 - x);
}

inline double analytic_two(double x) {
  constexpr double pi = std::numbers::pi;
  if (x < 2) return analytic_two_envelope(x) + 0.1 * std::sin(8 * pi * x);
  if (x < 4) return 0.5 * std::exp(x - 2) * std::sin(2 * pi * x);
  if (x < 6) {
    const double u = x - 4;
    return std::sin(2 * pi * (2 + u * u) * u / 2);
  }
  if (x < 8) {
    const double t = std::fmod(x - 6, 0.5);
    return t < 0.25 ? 16 * t : 8 - 16 * t;
  }
  return std::sin(2 * pi * x) + 0.5 * std::sin(8 * pi * x);
}

namespace hartmann {
inline constexpr std::array<double, 4> alpha{1.0, 1.2, 3.0, 3.2};
inline constexpr std::array<std::array<double, 6>, 4> A{{
    {10, 3, 17, 3.5, 1.7, 8},
    {0.05, 10, 17, 0.1, 8, 14},
    {3, 3.5, 1.7, 10, 17, 8},
    {17, 8, 0.05, 10, 0.1, 14},
}};
inline constexpr std::array<std::array<double, 6>, 4> P{{
    {0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886},
    {0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991},
    {0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650},
    {0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381},
}};
}  // namespace hartmann

inline double hartmann6(Point x) {
  require(x.size() == 6, "hartmann6: input must have 6 coordinates");
  double f = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const double r = x[j] - hartmann::P[i][j];
      s += hartmann::A[i][j] * r * r;
    }
    f -= hartmann::alpha[i] * std::exp(-s);
  }
  return f;
}

// ---------------------------------------------------------------- datasets

enum class BenchmarkName { analytic1, analytic2, hartmann6, csv };

inline std::string to_string(BenchmarkName b) {
  switch (b) {
    case BenchmarkName::analytic1: return "analytic1";
    case BenchmarkName::analytic2: return "analytic2";
    case BenchmarkName::hartmann6: return "hartmann6";
    case BenchmarkName::csv: return "csv";
  }
  return "?";
}

inline std::optional<BenchmarkName> parse_benchmark_name(const std::string& s) {
  if (s == "analytic1") return BenchmarkName::analytic1;
  if (s == "analytic2") return BenchmarkName::analytic2;
  if (s == "hartmann6" || s == "hartmann") return BenchmarkName::hartmann6;
  if (s == "csv") return BenchmarkName::csv;
  return std::nullopt;
}

struct CsvOptions {
  std::string path;
  std::string target;
  std::vector<std::string> features;  // empty: every other column
  std::string test_path;              // empty: held-out rows of `path`
};

struct BenchmarkSpec {
  BenchmarkName name = BenchmarkName::analytic1;
  Index n_train = 55;
  double noise_variance = 1e-4;
  std::uint64_t seed = 0;
  bool sobol_offset = true;  // start index 1 + seed mod 1024
  CsvOptions csv;

  void validate() const {
    if (n_train <= 0) throw ConfigError("benchmark: n_train must be positive");
    if (!(noise_variance >= 0) || !std::isfinite(noise_variance))
      throw ConfigError("benchmark: noise_variance must be a non-negative number");
    if (name == BenchmarkName::csv) {
      if (csv.path.empty()) throw ConfigError("benchmark: csv.path is required for the csv benchmark");
      if (csv.target.empty()) throw ConfigError("benchmark: csv.target is required for the csv benchmark");
    }
  }
};

inline Index benchmark_dim(BenchmarkName b) { return b == BenchmarkName::hartmann6 ? 6 : 1; }

inline std::pair<double, double> benchmark_domain(BenchmarkName b) {
  return b == BenchmarkName::analytic2 ? std::pair{0.0, 10.0} : std::pair{0.0, 1.0};
}

inline double benchmark_value(BenchmarkName b, Point x) {
  switch (b) {
    case BenchmarkName::analytic1: return analytic_one(x[0]);
    case BenchmarkName::analytic2: return analytic_two(x[0]);
    case BenchmarkName::hartmann6: return hartmann6(x);
    case BenchmarkName::csv: break;
  }
  throw ContractError("benchmark_value: the csv benchmark has no generating function");
}

inline Vector benchmark_values(BenchmarkName b, const Points& X) {
  Vector y(X.rows());
  for (Index i = 0; i < X.rows(); ++i) y[i] = benchmark_value(b, row(X, i));
  return y;
}

inline std::uint64_t sobol_start(const BenchmarkSpec& spec) { return 1 + (spec.sobol_offset ? spec.seed % 1024 : 0); }

/// FNV-1a over the raw bytes of X and y.
inline std::uint64_t dataset_hash(const Dataset& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const double* p, Index n) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  const Index dims[2] = {d.X.rows(), d.X.cols()};
  feed(reinterpret_cast<const double*>(dims), 2);
  feed(d.X.data(), d.X.size());
  feed(d.y.data(), d.y.size());
  return h;
}

// ---------------------------------------------------------------- CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  for (auto& c : cells) {
    while (!c.empty() && (c.back() == '\r' || c.back() == ' ' || c.back() == '\t')) c.pop_back();
    std::size_t b = 0;
    while (b < c.size() && (c[b] == ' ' || c[b] == '\t')) ++b;
    c.erase(0, b);
  }
  return cells;
}

}  // namespace detail

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("csv: cannot open file '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw IngestError("csv: file '" + path + "' is empty; a header row is required");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  t.header = detail::split_csv_line(line);
  std::size_t data_row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    ++data_row;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw IngestError("csv: '" + path + "' data row " + std::to_string(data_row) + " has " +
                        std::to_string(cells.size()) + " cells, header has " + std::to_string(t.header.size()));
    }
    std::vector<double> values(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string& s = cells[c];
      const char* end = s.data() + s.size();
      auto [ptr, ec] = std::from_chars(s.data(), end, values[c]);
      if (s.empty() || ec != std::errc() || ptr != end || !std::isfinite(values[c])) {
        throw IngestError("csv: '" + path + "' data row " + std::to_string(data_row) + ", column '" +
                          t.header[c] + "': non-numeric cell '" + s + "'");
      }
    }
    t.rows.push_back(std::move(values));
  }
  return t;
}

/// Header required, row order preserved; features default to every column but the target.
inline Dataset load_csv_dataset(const std::string& path, const std::string& target,
                                const std::vector<std::string>& features = {}) {
  const CsvTable t = read_csv(path);
  auto column = [&](const std::string& name) -> std::size_t {
    for (std::size_t c = 0; c < t.header.size(); ++c)
      if (t.header[c] == name) return c;
    throw IngestError("csv: '" + path + "' has no column named '" + name + "'");
  };
  const std::size_t tcol = column(target);
  std::vector<std::size_t> fcols;
  if (features.empty()) {
    for (std::size_t c = 0; c < t.header.size(); ++c)
      if (c != tcol) fcols.push_back(c);
  } else {
    for (const auto& f : features) fcols.push_back(column(f));
  }
  if (fcols.empty()) throw IngestError("csv: '" + path + "' has no feature columns");
  if (t.rows.empty()) throw IngestError("csv: '" + path + "' has no data rows");
  Dataset d;
  d.id = path;
  d.X.resize(static_cast<Index>(t.rows.size()), static_cast<Index>(fcols.size()));
  d.y.resize(static_cast<Index>(t.rows.size()));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    for (std::size_t j = 0; j < fcols.size(); ++j) d.X(static_cast<Index>(i), static_cast<Index>(j)) = t.rows[i][fcols[j]];
    d.y[static_cast<Index>(i)] = t.rows[i][tcol];
  }
  return d;
}

inline void write_csv_dataset(const std::string& path, const Dataset& d, const std::string& target = "y") {
  std::ofstream out(path);
  if (!out) throw IngestError("csv: cannot write '" + path + "'");
  for (Index p = 0; p < d.dim(); ++p) out << "x" << p << ",";
  out << target << "\n";
  char buf[32];
  for (Index i = 0; i < d.size(); ++i) {
    for (Index p = 0; p < d.dim(); ++p) {
      std::snprintf(buf, sizeof buf, "%.17g", d.X(i, p));
      out << buf << ",";
    }
    std::snprintf(buf, sizeof buf, "%.17g", d.y[i]);
    out << buf << "\n";
  }
}

// ---------------------------------------------------------------- synthesis

/// Sobol design over the benchmark domain plus i.i.d. Gaussian noise.
inline Dataset synthesize_dataset(const BenchmarkSpec& spec) {
  spec.validate();
  if (spec.name == BenchmarkName::csv) throw ContractError("synthesize_dataset: use load_csv_dataset for csv data");
  const Index P = benchmark_dim(spec.name);
  const auto [lo, hi] = benchmark_domain(spec.name);
  Dataset d;
  d.X = sobol_points(static_cast<int>(P), spec.n_train, sobol_start(spec));
  d.X = (d.X.array() * (hi - lo) + lo).matrix();
  d.y = benchmark_values(spec.name, d.X);
  if (spec.noise_variance > 0) {
    Rng rng(mix_seed(spec.seed ^ 0x6e6f697365ULL));
    std::normal_distribution<double> noise(0.0, std::sqrt(spec.noise_variance));
    for (Index i = 0; i < d.size(); ++i) d.y[i] += noise(rng);
  }
  d.id = to_string(spec.name) + "/n" + std::to_string(spec.n_train) + "/seed" + std::to_string(spec.seed);
  return d;
}

enum class TestKind { grid, sobol, csv };

struct TestSpec {
  TestKind kind = TestKind::grid;
  Index size = 1000;
  std::uint64_t start = 5001;  // sobol start index
};

/// Default held-out design: a 1000-point grid in 1D, 4096 Sobol points from
/// index 5001 in 6D.
inline TestSpec default_test_spec(BenchmarkName b) {
  if (b == BenchmarkName::hartmann6) return {TestKind::sobol, 4096, 5001};
  if (b == BenchmarkName::csv) return {TestKind::csv, 0, 0};
  return {TestKind::grid, 1000, 0};
}

/// Noiseless test set for a synthetic benchmark.
inline Dataset make_test_set(const BenchmarkSpec& spec, const TestSpec& test) {
  require(spec.name != BenchmarkName::csv, "make_test_set: csv test sets come from files");
  const Index P = benchmark_dim(spec.name);
  const auto [lo, hi] = benchmark_domain(spec.name);
  Dataset d;
  if (test.kind == TestKind::grid) {
    if (P != 1) throw ConfigError("test: grid test sets are only supported for 1D benchmarks");
    if (test.size < 2) throw ConfigError("test: grid size must be at least 2");
    d.X.resize(test.size, 1);
    for (Index i = 0; i < test.size; ++i) d.X(i, 0) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(test.size - 1);
  } else if (test.kind == TestKind::sobol) {
    if (test.size < 2) throw ConfigError("test: sobol size must be at least 2");
    d.X = sobol_points(static_cast<int>(P), test.size, test.start);
    d.X = (d.X.array() * (hi - lo) + lo).matrix();
  } else {
    throw ConfigError("test: csv test sets require the csv benchmark");
  }
  d.y = benchmark_values(spec.name, d.X);
  d.id = to_string(spec.name) + "/test";
  return d;
}

/// Train/test pair for a csv benchmark: n_train rows drawn with the spec
/// seed, the rest (or csv.test_path when given) held out.
inline std::pair<Dataset, Dataset> load_csv_benchmark(const BenchmarkSpec& spec) {
  spec.validate();
  Dataset all = load_csv_dataset(spec.csv.path, spec.csv.target, spec.csv.features);
  const Index n = all.size();
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(spec.seed ^ 0x73706c6974ULL));
  std::shuffle(perm.begin(), perm.end(), rng);

  auto take = [&](std::size_t from, std::size_t to) {
    Dataset d;
    d.X.resize(static_cast<Index>(to - from), all.dim());
    d.y.resize(static_cast<Index>(to - from));
    for (std::size_t k = from; k < to; ++k) {
      d.X.row(static_cast<Index>(k - from)) = all.X.row(perm[k]);
      d.y[static_cast<Index>(k - from)] = all.y[perm[k]];
    }
    return d;
  };
  const bool separate = !spec.csv.test_path.empty();
  const Index n_train = std::min(spec.n_train, separate ? n : n - 1);
  if (n_train < 1) throw IngestError("csv: '" + spec.csv.path + "' has too few rows for a train/test split");
  Dataset train = take(0, static_cast<std::size_t>(n_train));
  train.id = spec.csv.path + "/train/seed" + std::to_string(spec.seed);
  Dataset test = separate ? load_csv_dataset(spec.csv.test_path, spec.csv.target, spec.csv.features)
                          : take(static_cast<std::size_t>(n_train), static_cast<std::size_t>(n));
  if (test.dim() != train.dim()) throw IngestError("csv: train and test files have different feature counts");
  test.id = separate ? spec.csv.test_path : spec.csv.path + "/test/seed" + std::to_string(spec.seed);
  return {std::move(train), std::move(test)};
}

}  // namespace seekgp
