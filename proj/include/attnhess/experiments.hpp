#pragma once

#include "attnhess/finite_diff.hpp"
#include "attnhess/hessian.hpp"
#include "attnhess/random.hpp"

#include <cstdint>
#include <string>
#include <vector>

// Experiment harness behind the CLI subcommands. Every run is deterministic
// given (config, seeds): random streams are keyed by (seed, purpose, cell),
// results are collected in cell order, and CSV bodies are bit-identical
// across re-runs and thread counts.

namespace attnhess {

struct Dims {
  Index L = 3;
  Index d_v = 4;
  Index d_k = 2;
  int heads = 1;
};

struct VariantConfig {
  Activation activation = Activation::softmax;
  Parameterization parameterization = Parameterization::classical;
  double temperature = 1.0;
};

struct ExperimentConfig {
  Dims dims;
  VariantConfig variant;
  std::vector<double> sigma_grid;       // defaults to 12 log-spaced in [0.05, 0.5]
  std::vector<std::uint64_t> seeds;
  double weight_init_std = 0.0;         // <= 0 selects sqrt(0.64 / d_v)
  std::string output_path = "out";
  std::size_t element_cap = std::size_t{1} << 26;
};

/// 12 log-spaced points in [0.05, 0.5].
std::vector<double> default_sigma_grid();

ExperimentConfig default_verify_config();
ExperimentConfig default_scaling_config();
ExperimentConfig default_spectrum_config();
ExperimentConfig default_histogram_config();
ExperimentConfig default_depth_config();

/// Strict JSON loader: keys must match the ExperimentConfig field names;
/// unknown keys are rejected. Missing keys keep their defaults.
ExperimentConfig load_config(const std::string& path, const ExperimentConfig& defaults);

double effective_weight_std(const ExperimentConfig& config);

struct RunOptions {
  std::string out_dir;  // overrides config.output_path when non-empty
  long long seed_offset = 0;
  int threads = 1;
  bool svg = false;
};

// Instance generators shared by the commands and the acceptance suite.
Sequence draw_sequence(Index L, Index d_v, double sigma_x, double sigma_y, std::mt19937_64& rng);
AttentionSpec draw_spec(const Dims& dims, const VariantConfig& variant, double weight_std,
                        std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// verify: analytic blocks against the finite-difference oracle.
// ---------------------------------------------------------------------------

struct VerifyRow {
  std::string variant;
  std::uint64_t seed = 0;
  std::string row_param, col_param, part;
  OracleReport report;
};

struct VerifyOutcome {
  double tolerance = 1e-5;
  bool passed = false;
  std::vector<VerifyRow> rows;
  double max_abs_error = 0.0;
};

VerifyOutcome run_verify(const ExperimentConfig& config, const RunOptions& options);

// ---------------------------------------------------------------------------
// scaling: block Frobenius norms against the embedding scale sigma.
// ---------------------------------------------------------------------------

struct SeriesPoint {
  double sigma = 0, mean_norm = 0, sem = 0;
};

struct SeriesRecord {
  std::string block, part;
  std::vector<SeriesPoint> points;
  double slope = 0, slope_stderr = 0;
  bool has_slope = false;
};

struct ScalingOutcome {
  std::vector<SeriesRecord> records;
  std::vector<std::string> flagged_cells;  // saturation-policy violations

  const SeriesRecord& record(const std::string& block, const std::string& part) const;
};

ScalingOutcome run_scaling(const ExperimentConfig& config, const RunOptions& options);

// ---------------------------------------------------------------------------
// spectrum: eigenvalues of the T-decomposition and the full grid.
// ---------------------------------------------------------------------------

struct SpectrumOutcome {
  double max_pairing_residual = 0.0;
  bool multiplicity_ok = false;
  std::vector<Index> t_outer_ranks;  // per seed
  Index rank_bound = 0;              // Lemma bound for the configured dims
};

SpectrumOutcome run_spectrum(const ExperimentConfig& config, const RunOptions& options);

// ---------------------------------------------------------------------------
// histogram: absolute entries of the (Q,Q) and (V,V) full blocks, both
// activations. Medians are over nonzero absolute entries: the value block
// is M1^T M1 ⊗ I, so most of its entries are structural zeros and zeros
// cannot sit in log-scale bins.
// ---------------------------------------------------------------------------

struct HistogramMedians {
  double median_qq = 0, median_vv = 0;
  std::size_t nonzero_qq = 0, nonzero_vv = 0;
  std::size_t zero_qq = 0, zero_vv = 0;
};

struct HistogramOutcome {
  HistogramMedians softmax;
  HistogramMedians identity;
};

HistogramOutcome run_histogram(const ExperimentConfig& config, const RunOptions& options);

// ---------------------------------------------------------------------------
// depth: growth of the last-layer value block of stacked identity-activation
// attention versus a linear MLP control, measured from the fd Hessian.
// ---------------------------------------------------------------------------

struct DepthRecord {
  std::string model;  // "attention" or "mlp"
  int depth = 1;
  std::vector<SeriesPoint> points;
  double slope = 0, slope_stderr = 0;
};

struct DepthOutcome {
  std::vector<DepthRecord> records;
  const DepthRecord& record(const std::string& model, int depth) const;
};

DepthOutcome run_depth(const ExperimentConfig& config, const RunOptions& options);

}  // namespace attnhess
