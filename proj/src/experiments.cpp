#include "attnhess/experiments.hpp"

#include "attnhess/derivatives.hpp"
#include "attnhess/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <mutex>
#include <thread>

namespace attnhess {

namespace {

using nlohmann::json;

// Purpose tags for random substreams.
enum Purpose : std::uint64_t {
  kWeights = 1,
  kLabels = 2,
  kEmbeddings = 3,
  kInstance = 4,
};

constexpr int kMaxResamples = 64;
constexpr double kSaturationLimit = 0.9;

std::string variant_label(const VariantConfig& v, int heads) {
  std::string label = v.activation == Activation::softmax ? "softmax" : "identity";
  label += v.parameterization == Parameterization::classical ? "-classical" : "-single";
  if (heads > 1) label += "-h" + std::to_string(heads);
  if (v.temperature != 1.0) label += "-t" + io::format_double(v.temperature);
  return label;
}

void run_cells(std::size_t n, int threads, const std::function<void(std::size_t)>& body) {
  const int workers = std::max(1, threads);
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::filesystem::path resolve_out_dir(const ExperimentConfig& config, const RunOptions& options) {
  const std::filesystem::path dir =
      options.out_dir.empty() ? std::filesystem::path(config.output_path)
                              : std::filesystem::path(options.out_dir);
  std::filesystem::create_directories(dir);
  return dir;
}

json dims_to_json(const Dims& d) {
  return json{{"L", d.L}, {"d_v", d.d_v}, {"d_k", d.d_k}, {"heads", d.heads}};
}

json variant_to_json(const VariantConfig& v) {
  return json{{"activation", v.activation == Activation::softmax ? "softmax" : "identity"},
              {"parameterization",
               v.parameterization == Parameterization::classical ? "classical" : "single"},
              {"temperature", v.temperature}};
}

json config_to_json(const ExperimentConfig& c) {
  return json{{"dims", dims_to_json(c.dims)},
              {"variant", variant_to_json(c.variant)},
              {"sigma_grid", c.sigma_grid},
              {"seeds", c.seeds},
              {"weight_init_std", c.weight_init_std},
              {"output_path", c.output_path},
              {"element_cap", c.element_cap}};
}

void reject_unknown_keys(const json& object, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (const auto& item : object.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return item.key() == k;
        }) == allowed.end()) {
      throw ValidationError("config: unknown key '" + item.key() + "' in " + where);
    }
  }
}

// Least-squares slope of log(y) against log(x); points with y <= 0 are
// dropped (structural zeros have no log-log trend).
void fit_loglog_slope(SeriesRecord& record) {
  std::vector<double> xs, ys;
  for (const SeriesPoint& p : record.points) {
    if (p.mean_norm > 0 && p.sigma > 0) {
      xs.push_back(std::log(p.sigma));
      ys.push_back(std::log(p.mean_norm));
    }
  }
  const std::size_t n = xs.size();
  if (n < 3) {
    record.has_slope = false;
    return;
  }
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  record.slope = sxy / sxx;
  const double intercept = my - record.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ys[i] - intercept - record.slope * xs[i];
    ss_res += r * r;
  }
  record.slope_stderr = n > 2 ? std::sqrt(ss_res / static_cast<double>(n - 2) / sxx) : 0.0;
  record.has_slope = true;
}

double max_attention_entry(const ForwardCache& cache) {
  double m = 0;
  for (const HeadCache& h : cache.heads) m = std::max(m, h.attention.maxCoeff());
  return m;
}

struct MeanSem {
  double mean = 0, sem = 0;
};

MeanSem mean_sem(const std::vector<double>& values) {
  MeanSem out;
  const double n = static_cast<double>(values.size());
  for (double v : values) out.mean += v;
  out.mean /= n;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.sem = std::sqrt(ss / (n - 1) / n);
  }
  return out;
}

}  // namespace

std::vector<double> default_sigma_grid() {
  std::vector<double> grid;
  const double lo = 0.05, hi = 0.5;
  for (int i = 0; i < 12; ++i) {
    grid.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / 11.0));
  }
  return grid;
}

namespace {
ExperimentConfig base_config() {
  ExperimentConfig c;
  c.sigma_grid = default_sigma_grid();
  return c;
}
}  // namespace

ExperimentConfig default_verify_config() {
  ExperimentConfig c = base_config();
  c.seeds = {0, 1, 2};
  return c;
}

ExperimentConfig default_scaling_config() {
  ExperimentConfig c = base_config();
  c.dims = {4, 6, 3, 1};
  for (std::uint64_t s = 0; s < 20; ++s) c.seeds.push_back(s);
  return c;
}

ExperimentConfig default_spectrum_config() {
  ExperimentConfig c = base_config();
  c.sigma_grid = {0.3};
  for (std::uint64_t s = 0; s < 10; ++s) c.seeds.push_back(s);
  return c;
}

ExperimentConfig default_histogram_config() {
  ExperimentConfig c = base_config();
  c.dims = {12, 8, 8, 1};
  c.sigma_grid = {0.3};
  for (std::uint64_t s = 0; s < 20; ++s) c.seeds.push_back(s);
  return c;
}

ExperimentConfig default_depth_config() {
  ExperimentConfig c = base_config();
  c.dims = {4, 4, 2, 1};
  c.variant.activation = Activation::identity;
  for (std::uint64_t s = 0; s < 10; ++s) c.seeds.push_back(s);
  return c;
}

ExperimentConfig load_config(const std::string& path, const ExperimentConfig& defaults) {
  ExperimentConfig config = defaults;
  const json doc = json::parse(io::read_text_file(path));
  if (!doc.is_object()) throw ValidationError("config: top level must be a JSON object");
  reject_unknown_keys(doc,
                      {"dims", "variant", "sigma_grid", "seeds", "weight_init_std", "output_path",
                       "element_cap"},
                      "top level");
  if (doc.contains("dims")) {
    const json& d = doc["dims"];
    reject_unknown_keys(d, {"L", "d_v", "d_k", "heads"}, "dims");
    config.dims.L = d.value("L", config.dims.L);
    config.dims.d_v = d.value("d_v", config.dims.d_v);
    config.dims.d_k = d.value("d_k", config.dims.d_k);
    config.dims.heads = d.value("heads", config.dims.heads);
  }
  if (doc.contains("variant")) {
    const json& v = doc["variant"];
    reject_unknown_keys(v, {"activation", "parameterization", "temperature"}, "variant");
    if (v.contains("activation")) {
      const std::string a = v["activation"];
      if (a == "softmax") config.variant.activation = Activation::softmax;
      else if (a == "identity") config.variant.activation = Activation::identity;
      else throw ValidationError("config: activation must be 'softmax' or 'identity'");
    }
    if (v.contains("parameterization")) {
      const std::string p = v["parameterization"];
      if (p == "classical") config.variant.parameterization = Parameterization::classical;
      else if (p == "single") config.variant.parameterization = Parameterization::single_matrix;
      else throw ValidationError("config: parameterization must be 'classical' or 'single'");
    }
    config.variant.temperature = v.value("temperature", config.variant.temperature);
  }
  if (doc.contains("sigma_grid")) config.sigma_grid = doc["sigma_grid"].get<std::vector<double>>();
  if (doc.contains("seeds")) config.seeds = doc["seeds"].get<std::vector<std::uint64_t>>();
  if (doc.contains("weight_init_std")) config.weight_init_std = doc["weight_init_std"];
  if (doc.contains("output_path")) config.output_path = doc["output_path"];
  if (doc.contains("element_cap")) config.element_cap = doc["element_cap"];

  if (config.sigma_grid.empty()) throw ValidationError("config: sigma_grid must be non-empty");
  for (double s : config.sigma_grid) {
    if (s <= 0) throw ValidationError("config: sigma values must be positive");
  }
  if (config.seeds.empty()) throw ValidationError("config: seeds must be non-empty");
  if (config.dims.L < 1 || config.dims.d_v < 1 || config.dims.d_k < 1 || config.dims.heads < 1) {
    throw ValidationError("config: all dims must be >= 1");
  }
  return config;
}

double effective_weight_std(const ExperimentConfig& config) {
  if (config.weight_init_std > 0) return config.weight_init_std;
  return std::sqrt(0.64 / static_cast<double>(config.dims.d_v));
}

Sequence draw_sequence(Index L, Index d_v, double sigma_x, double sigma_y, std::mt19937_64& rng) {
  Sequence seq;
  seq.embeddings = gaussian(L, d_v, rng, sigma_x);
  seq.labels = gaussian(L, d_v, rng, sigma_y);
  return seq;
}

AttentionSpec draw_spec(const Dims& dims, const VariantConfig& variant, double weight_std,
                        std::mt19937_64& rng) {
  if (variant.parameterization == Parameterization::single_matrix) {
    return single_matrix_spec(gaussian(dims.d_v, dims.d_v, rng, weight_std),
                              gaussian(dims.d_v, dims.d_v, rng, weight_std), variant.activation,
                              variant.temperature);
  }
  std::vector<HeadWeights> heads;
  for (int h = 0; h < dims.heads; ++h) {
    heads.push_back({gaussian(dims.d_v, dims.d_k, rng, weight_std),
                     gaussian(dims.d_v, dims.d_k, rng, weight_std),
                     gaussian(dims.d_v, dims.d_v, rng, weight_std)});
  }
  return multihead_spec(std::move(heads), variant.activation, variant.temperature);
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

VerifyOutcome run_verify(const ExperimentConfig& config, const RunOptions& options) {
  set_element_cap(config.element_cap);
  const auto out_dir = resolve_out_dir(config, options);
  const double weight_std = effective_weight_std(config);
  const std::string label = variant_label(config.variant, config.dims.heads);
  const bool multihead = config.dims.heads > 1;

  VerifyOutcome outcome;
  std::vector<std::vector<VerifyRow>> per_seed(config.seeds.size());

  run_cells(config.seeds.size(), options.threads, [&](std::size_t cell) {
    const std::uint64_t seed =
        config.seeds[cell] + static_cast<std::uint64_t>(options.seed_offset);
    std::mt19937_64 rng = substream(seed, kInstance);
    const Sequence seq = draw_sequence(config.dims.L, config.dims.d_v, 0.3, 0.3, rng);
    const AttentionSpec spec = draw_spec(config.dims, config.variant, weight_std, rng);

    const HessianGrid grid = assemble(spec, seq);
    const std::vector<ParamKey> keys = parameter_order(spec);
    const Mat oracle = fd_hessian(spec, seq, keys);

    std::vector<VerifyRow>& rows = per_seed[cell];
    std::vector<Index> offsets(grid.count() + 1, 0);
    for (std::size_t i = 0; i < grid.count(); ++i) offsets[i + 1] = offsets[i] + grid.sizes[i];

    for (std::size_t i = 0; i < grid.count(); ++i) {
      for (std::size_t j = i; j < grid.count(); ++j) {
        const Mat oracle_block =
            oracle.block(offsets[i], offsets[j], grid.sizes[i], grid.sizes[j]);
        rows.push_back({label, seed, param_label(grid.params[i], multihead),
                        param_label(grid.params[j], multihead), "full",
                        compare(grid.full(i, j), oracle_block)});
        // Where the functional part vanishes identically the outer block
        // alone must already match the oracle.
        if (grid.functional(i, j).norm() == 0.0) {
          rows.push_back({label, seed, param_label(grid.params[i], multihead),
                          param_label(grid.params[j], multihead), "outer",
                          compare(grid.outer(i, j), oracle_block)});
        }
      }
    }
    rows.push_back({label, seed, "all", "all", "full", compare(grid.matrix(Part::full), oracle)});

    // Appendix-level coupling: the similarity-split decomposition must
    // reproduce the query-key sub-grid of the oracle.
    if (spec.parameterization == Parameterization::classical &&
        spec.activation == Activation::softmax && spec.heads.size() == 1) {
      const TDecomposition td = t_decompose(spec, seq);
      const Index n = 2 * seq.embed_dim() * spec.key_dim();
      rows.push_back({label, seed, "QK-subgrid", "QK-subgrid", "t-decomposition",
                      compare(Mat(td.t_outer + td.t_functional), Mat(oracle.topLeftCorner(n, n)))});
    }
  });

  io::CsvTable csv;
  csv.header = {"variant",      "seed",       "row_param",         "col_param",
                "part",         "max_abs_error", "rel_frobenius_error", "worst_row",
                "worst_col",    "analytic_norm", "oracle_norm"};
  for (const auto& rows : per_seed) {
    for (const VerifyRow& r : rows) {
      outcome.rows.push_back(r);
      outcome.max_abs_error = std::max(outcome.max_abs_error, r.report.max_abs_error);
      csv.add_row({r.variant, std::to_string(r.seed), r.row_param, r.col_param, r.part,
                   io::format_double(r.report.max_abs_error),
                   io::format_double(r.report.rel_frobenius_error),
                   std::to_string(r.report.worst_row), std::to_string(r.report.worst_col),
                   io::format_double(r.report.analytic_norm),
                   io::format_double(r.report.oracle_norm)});
    }
  }
  outcome.passed = outcome.max_abs_error <= outcome.tolerance;

  io::write_text_file((out_dir / "verify_report.csv").string(), csv.to_string());
  const json summary{{"command", "verify"},
                     {"variant", label},
                     {"tolerance", outcome.tolerance},
                     {"passed", outcome.passed},
                     {"max_abs_error", outcome.max_abs_error},
                     {"n_rows", outcome.rows.size()},
                     {"config", config_to_json(config)}};
  io::write_text_file((out_dir / "verify_summary.json").string(), summary.dump(2));
  return outcome;
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

namespace {

struct CellNorms {
  // Norms indexed like the (block, part) record list.
  std::vector<double> values;
  bool flagged = false;
};

}  // namespace

const SeriesRecord& ScalingOutcome::record(const std::string& block,
                                           const std::string& part) const {
  for (const SeriesRecord& r : records) {
    if (r.block == block && r.part == part) return r;
  }
  throw ValidationError("scaling: no record for " + block + "/" + part);
}

ScalingOutcome run_scaling(const ExperimentConfig& config, const RunOptions& options) {
  set_element_cap(config.element_cap);
  const auto out_dir = resolve_out_dir(config, options);
  const double weight_std = effective_weight_std(config);
  const std::size_t n_sigma = config.sigma_grid.size();
  const std::size_t n_seeds = config.seeds.size();

  // Record layout: all ordered upper-triangle block pairs x parts.
  std::vector<std::pair<std::string, std::string>> layout;  // (block, part)
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  {
    const std::vector<std::string> names =
        config.variant.parameterization == Parameterization::classical
            ? std::vector<std::string>{"Q", "K", "V"}
            : std::vector<std::string>{"QK", "V"};
    for (std::size_t i = 0; i < names.size(); ++i) {
      for (std::size_t j = i; j < names.size(); ++j) {
        for (const char* part : {"outer", "functional", "full"}) {
          layout.emplace_back(names[i] + "-" + names[j], part);
          pairs.emplace_back(i, j);
        }
      }
    }
  }

  std::vector<CellNorms> cells(n_sigma * n_seeds);
  run_cells(cells.size(), options.threads, [&](std::size_t cell) {
    const std::size_t si = cell / n_seeds;
    const std::size_t sj = cell % n_seeds;
    const double sigma = config.sigma_grid[si];
    const std::uint64_t seed =
        config.seeds[sj] + static_cast<std::uint64_t>(options.seed_offset);

    // Weights and labels are frozen per seed; only X varies with sigma.
    std::mt19937_64 rng_w = substream(seed, kWeights);
    const AttentionSpec spec = draw_spec(config.dims, config.variant, weight_std, rng_w);
    std::mt19937_64 rng_y = substream(seed, kLabels);
    const Mat labels = gaussian(config.dims.L, config.dims.d_v, rng_y, 1.0);

    std::mt19937_64 rng_x = substream(seed, kEmbeddings, si);
    Sequence seq;
    seq.labels = labels;
    bool saturated = true;
    for (int attempt = 0; attempt < kMaxResamples && saturated; ++attempt) {
      seq.embeddings = gaussian(config.dims.L, config.dims.d_v, rng_x, sigma);
      if (config.variant.activation == Activation::identity) {
        saturated = false;
      } else {
        saturated = max_attention_entry(forward(spec, seq)) > kSaturationLimit;
      }
    }

    const HessianGrid grid = assemble(spec, seq);
    CellNorms& out = cells[cell];
    out.flagged = saturated;
    out.values.reserve(layout.size());
    for (std::size_t r = 0; r < layout.size(); ++r) {
      const auto [i, j] = pairs[r];
      const std::string& part = layout[r].second;
      const Part p = part == "outer" ? Part::outer
                     : part == "functional" ? Part::functional
                                            : Part::full;
      out.values.push_back(grid.block(p, i, j).norm());
    }
  });

  ScalingOutcome outcome;
  for (std::size_t r = 0; r < layout.size(); ++r) {
    SeriesRecord record;
    record.block = layout[r].first;
    record.part = layout[r].second;
    for (std::size_t si = 0; si < n_sigma; ++si) {
      std::vector<double> values;
      for (std::size_t sj = 0; sj < n_seeds; ++sj) {
        values.push_back(cells[si * n_seeds + sj].values[r]);
      }
      const MeanSem ms = mean_sem(values);
      record.points.push_back({config.sigma_grid[si], ms.mean, ms.sem});
    }
    fit_loglog_slope(record);
    outcome.records.push_back(std::move(record));
  }
  for (std::size_t si = 0; si < n_sigma; ++si) {
    for (std::size_t sj = 0; sj < n_seeds; ++sj) {
      if (cells[si * n_seeds + sj].flagged) {
        outcome.flagged_cells.push_back("sigma=" + io::format_double(config.sigma_grid[si]) +
                                        ",seed=" + std::to_string(config.seeds[sj]));
      }
    }
  }

  io::CsvTable csv;
  csv.header = {"block", "part", "sigma", "mean_norm", "sem"};
  for (const SeriesRecord& record : outcome.records) {
    for (const SeriesPoint& p : record.points) {
      csv.add_row({record.block, record.part, io::format_double(p.sigma),
                   io::format_double(p.mean_norm), io::format_double(p.sem)});
    }
  }
  io::write_text_file((out_dir / "scaling.csv").string(), csv.to_string());

  json records = json::array();
  for (const SeriesRecord& record : outcome.records) {
    records.push_back(json{{"block", record.block},
                           {"part", record.part},
                           {"slope", record.has_slope ? json(record.slope) : json()},
                           {"slope_stderr",
                            record.has_slope ? json(record.slope_stderr) : json()},
                           {"n_points", record.points.size()}});
  }
  const json summary{{"command", "scaling"},
                     {"records", records},
                     {"flagged_cells", outcome.flagged_cells},
                     {"config", config_to_json(config)}};
  io::write_text_file((out_dir / "scaling_summary.json").string(), summary.dump(2));

  if (options.svg) {
    std::vector<io::SvgSeries> series;
    for (const SeriesRecord& record : outcome.records) {
      if (record.part == "functional" && !record.has_slope) continue;
      io::SvgSeries s;
      s.label = record.block + " " + record.part;
      for (const SeriesPoint& p : record.points) {
        s.x.push_back(p.sigma);
        s.y.push_back(p.mean_norm);
      }
      series.push_back(std::move(s));
    }
    io::write_text_file((out_dir / "scaling.svg").string(),
                        io::render_line_chart("block Frobenius norm vs sigma", series, true, true));
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// spectrum
// ---------------------------------------------------------------------------

SpectrumOutcome run_spectrum(const ExperimentConfig& config, const RunOptions& options) {
  set_element_cap(config.element_cap);
  const auto out_dir = resolve_out_dir(config, options);
  const double weight_std = effective_weight_std(config);
  const double sigma = config.sigma_grid.front();
  const Index d_v = config.dims.d_v;
  const Index d_k = config.dims.d_k;

  SpectrumOutcome outcome;
  outcome.rank_bound = d_k < d_v ? 2 * d_k * d_v - d_k * d_k : d_v * d_v;
  outcome.multiplicity_ok = true;

  struct SeedSpectra {
    Vec t_functional, t_outer, full;
    double pairing_residual = 0;
    Index t_outer_rank = 0;
    bool multiplicity_ok = true;
  };
  std::vector<SeedSpectra> spectra(config.seeds.size());

  run_cells(config.seeds.size(), options.threads, [&](std::size_t cell) {
    const std::uint64_t seed =
        config.seeds[cell] + static_cast<std::uint64_t>(options.seed_offset);
    std::mt19937_64 rng = substream(seed, kInstance);
    const Sequence seq = draw_sequence(config.dims.L, d_v, sigma, 1.0, rng);
    VariantConfig variant = config.variant;
    variant.parameterization = Parameterization::classical;
    variant.activation = Activation::softmax;
    Dims dims = config.dims;
    dims.heads = 1;
    const AttentionSpec spec = draw_spec(dims, variant, weight_std, rng);

    const TDecomposition td = t_decompose(spec, seq);
    const HessianGrid grid = assemble(spec, seq);

    SeedSpectra& s = spectra[cell];
    s.t_functional = Eigen::SelfAdjointEigenSolver<Mat>(td.t_functional).eigenvalues();
    s.t_outer = Eigen::SelfAdjointEigenSolver<Mat>(td.t_outer).eigenvalues();
    s.full = Eigen::SelfAdjointEigenSolver<Mat>(grid.matrix(Part::full)).eigenvalues();

    const Index n = s.t_functional.size();
    for (Index i = 0; i < n; ++i) {
      s.pairing_residual =
          std::max(s.pairing_residual, std::abs(s.t_functional(i) + s.t_functional(n - 1 - i)));
    }
    // The positive half must consist of d_k-fold groups (eigenvalues of the
    // hollow factor each replicated by the ⊗ I_{d_k}).
    const double scale = std::max(std::abs(s.t_functional(0)), std::abs(s.t_functional(n - 1)));
    const double tol = 1e-8 * std::max(1.0, scale);
    for (Index g = 0; g + d_k <= n / 2; g += d_k) {
      const double lo = s.t_functional(n / 2 + g);
      const double hi = s.t_functional(n / 2 + g + d_k - 1);
      if (std::abs(hi - lo) > tol) s.multiplicity_ok = false;
    }

    const double sigma_max = s.t_outer.array().abs().maxCoeff();
    const double rank_tol = 1e-8 * sigma_max;
    s.t_outer_rank = (s.t_outer.array().abs() > rank_tol).count();
  });

  io::CsvTable csv;
  csv.header = {"seed", "matrix", "index", "eigenvalue", "pairing_residual", "rank_estimate"};
  for (std::size_t cell = 0; cell < spectra.size(); ++cell) {
    const std::uint64_t seed =
        config.seeds[cell] + static_cast<std::uint64_t>(options.seed_offset);
    const SeedSpectra& s = spectra[cell];
    outcome.max_pairing_residual = std::max(outcome.max_pairing_residual, s.pairing_residual);
    outcome.multiplicity_ok = outcome.multiplicity_ok && s.multiplicity_ok;
    outcome.t_outer_ranks.push_back(s.t_outer_rank);
    const auto emit = [&](const char* name, const Vec& values, bool pairing, Index rank) {
      for (Index i = 0; i < values.size(); ++i) {
        csv.add_row({std::to_string(seed), name, std::to_string(i),
                     io::format_double(values(i)),
                     pairing ? io::format_double(
                                   std::abs(values(i) + values(values.size() - 1 - i)))
                             : "",
                     rank >= 0 ? std::to_string(rank) : ""});
      }
    };
    emit("t_functional", s.t_functional, true, -1);
    emit("t_outer", s.t_outer, false, s.t_outer_rank);
    emit("full_grid", s.full, false, -1);
  }
  io::write_text_file((out_dir / "spectrum.csv").string(), csv.to_string());

  const json summary{{"command", "spectrum"},
                     {"max_pairing_residual", outcome.max_pairing_residual},
                     {"multiplicity_ok", outcome.multiplicity_ok},
                     {"rank_bound", outcome.rank_bound},
                     {"t_outer_ranks", outcome.t_outer_ranks},
                     {"config", config_to_json(config)}};
  io::write_text_file((out_dir / "spectrum_summary.json").string(), summary.dump(2));

  if (options.svg) {
    std::vector<io::SvgSeries> series;
    const SeedSpectra& s = spectra.front();
    const auto add = [&](const char* label, const Vec& v) {
      io::SvgSeries ser;
      ser.label = label;
      for (Index i = 0; i < v.size(); ++i) {
        ser.x.push_back(static_cast<double>(i));
        ser.y.push_back(v(i));
      }
      series.push_back(std::move(ser));
    };
    add("t_functional", s.t_functional);
    add("t_outer", s.t_outer);
    add("full_grid", s.full);
    io::write_text_file((out_dir / "spectrum.svg").string(),
                        io::render_line_chart("sorted eigenvalues (first seed)", series, false,
                                              false));
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// histogram
// ---------------------------------------------------------------------------

namespace {

double median_of(std::vector<double>& values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

HistogramOutcome run_histogram(const ExperimentConfig& config, const RunOptions& options) {
  set_element_cap(config.element_cap);
  const auto out_dir = resolve_out_dir(config, options);
  const double weight_std = effective_weight_std(config);
  const double sigma = config.sigma_grid.front();

  HistogramOutcome outcome;
  json medians_json;
  for (const Activation activation : {Activation::softmax, Activation::identity}) {
    std::vector<std::vector<double>> qq(config.seeds.size()), vv(config.seeds.size());
    run_cells(config.seeds.size(), options.threads, [&](std::size_t cell) {
      const std::uint64_t seed =
          config.seeds[cell] + static_cast<std::uint64_t>(options.seed_offset);
      std::mt19937_64 rng = substream(seed, kInstance);
      const Sequence seq = draw_sequence(config.dims.L, config.dims.d_v, sigma, 1.0, rng);
      VariantConfig variant = config.variant;
      variant.activation = activation;
      variant.parameterization = Parameterization::classical;
      Dims dims = config.dims;
      dims.heads = 1;
      const AttentionSpec spec = draw_spec(dims, variant, weight_std, rng);
      const HessianGrid grid = assemble(spec, seq);
      const Mat q_block = grid.full(0, 0);
      const Mat v_block = grid.full(2, 2);
      for (Index c = 0; c < q_block.cols(); ++c) {
        for (Index r = 0; r < q_block.rows(); ++r) qq[cell].push_back(std::abs(q_block(r, c)));
      }
      for (Index c = 0; c < v_block.cols(); ++c) {
        for (Index r = 0; r < v_block.rows(); ++r) vv[cell].push_back(std::abs(v_block(r, c)));
      }
    });

    HistogramMedians medians;
    std::vector<double> qq_nonzero, vv_nonzero;
    for (const auto& chunk : qq) {
      for (double v : chunk) {
        if (v > 0) qq_nonzero.push_back(v);
        else ++medians.zero_qq;
      }
    }
    for (const auto& chunk : vv) {
      for (double v : chunk) {
        if (v > 0) vv_nonzero.push_back(v);
        else ++medians.zero_vv;
      }
    }
    medians.nonzero_qq = qq_nonzero.size();
    medians.nonzero_vv = vv_nonzero.size();
    medians.median_qq = median_of(qq_nonzero);
    medians.median_vv = median_of(vv_nonzero);

    const std::string name = activation == Activation::softmax ? "softmax" : "identity";
    io::CsvTable csv;
    csv.header = {"block", "bin", "lo", "hi", "count"};
    std::sort(qq_nonzero.begin(), qq_nonzero.end());
    std::sort(vv_nonzero.begin(), vv_nonzero.end());
    io::append_log_histogram(csv, "Q-Q", qq_nonzero);
    io::append_log_histogram(csv, "V-V", vv_nonzero);
    io::write_text_file((out_dir / ("histogram_" + name + ".csv")).string(), csv.to_string());

    medians_json[name] = {{"median_qq", medians.median_qq},
                          {"median_vv", medians.median_vv},
                          {"nonzero_qq", medians.nonzero_qq},
                          {"nonzero_vv", medians.nonzero_vv},
                          {"zero_qq", medians.zero_qq},
                          {"zero_vv", medians.zero_vv}};
    (activation == Activation::softmax ? outcome.softmax : outcome.identity) = medians;
  }

  const json summary{
      {"command", "histogram"},
      {"medians", medians_json},
      {"note", "medians are over nonzero absolute entries (log bins cannot hold zeros)"},
      {"config", config_to_json(config)}};
  io::write_text_file((out_dir / "histogram_summary.json").string(), summary.dump(2));

  if (options.svg) {
    for (const char* name : {"softmax", "identity"}) {
      const std::string csv =
          io::read_text_file((out_dir / ("histogram_" + std::string(name) + ".csv")).string());
      std::vector<io::SvgSeries> series(2);
      series[0].label = "Q-Q";
      series[1].label = "V-V";
      std::size_t pos = csv.find('\n') + 1;
      while (pos < csv.size()) {
        const std::size_t end = csv.find('\n', pos);
        const std::string line = csv.substr(pos, end - pos);
        pos = end + 1;
        std::vector<std::string> cells;
        std::size_t cell = 0;
        while (cell <= line.size()) {
          const std::size_t comma = line.find(',', cell);
          cells.push_back(line.substr(cell, comma - cell));
          if (comma == std::string::npos) break;
          cell = comma + 1;
        }
        if (cells.size() != 5) continue;
        io::SvgSeries& target = cells[0] == "Q-Q" ? series[0] : series[1];
        target.x.push_back(0.5 * (std::stod(cells[2]) + std::stod(cells[3])));
        target.y.push_back(std::stod(cells[4]) + 1.0);  // keep zero counts on the log axis
      }
      io::write_text_file(
          (out_dir / ("histogram_" + std::string(name) + ".svg")).string(),
          io::render_line_chart(std::string("|entry| histogram (") + name + ")", series, true,
                                true));
    }
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// depth
// ---------------------------------------------------------------------------

namespace {

struct AttentionStack {
  std::vector<HeadWeights> layers;
  Index d_k = 1;
};

Mat stack_forward(const AttentionStack& stack, const Mat& embeddings) {
  Mat x = embeddings;
  const double scale = 1.0 / std::sqrt(static_cast<double>(stack.d_k));
  for (const HeadWeights& layer : stack.layers) {
    const Mat t = scale * (x * layer.w_query * layer.w_key.transpose() * x.transpose());
    x = t * x * layer.w_value;
  }
  return x;
}

Mat mlp_forward(const std::vector<Mat>& weights, const Mat& embeddings) {
  Mat x = embeddings;
  for (const Mat& w : weights) x = x * w;
  return x;
}

double mse(const Mat& prediction, const Mat& labels) {
  return (prediction - labels).squaredNorm() /
         static_cast<double>(prediction.rows() * prediction.cols());
}

}  // namespace

const DepthRecord& DepthOutcome::record(const std::string& model, int depth) const {
  for (const DepthRecord& r : records) {
    if (r.model == model && r.depth == depth) return r;
  }
  throw ValidationError("depth: no record for " + model + "/" + std::to_string(depth));
}

DepthOutcome run_depth(const ExperimentConfig& config, const RunOptions& options) {
  set_element_cap(config.element_cap);
  const auto out_dir = resolve_out_dir(config, options);
  const double weight_std = effective_weight_std(config);
  const std::size_t n_sigma = config.sigma_grid.size();
  const std::size_t n_seeds = config.seeds.size();
  const std::vector<int> depths{1, 2};
  const std::vector<std::string> models{"attention", "mlp"};

  // The perturbed parameter (last-layer value / last MLP weight) enters the
  // network output linearly, so the loss restricted to it is an exact
  // quadratic: the 4-point rule has no truncation error and a large step
  // keeps the sigma^(2*3^D)-scale curvature above the rounding floor of the
  // O(1) loss offset.
  const FdOptions fd_options{1e10, 4096};

  const std::size_t cells_per_plan = n_sigma * n_seeds;
  std::vector<std::vector<double>> norms(models.size() * depths.size(),
                                         std::vector<double>(cells_per_plan, 0.0));

  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    for (std::size_t di = 0; di < depths.size(); ++di) {
      const int depth = depths[di];
      std::vector<double>& plan = norms[mi * depths.size() + di];
      run_cells(cells_per_plan, options.threads, [&, mi, depth](std::size_t cell) {
        const std::size_t si = cell / n_seeds;
        const std::size_t sj = cell % n_seeds;
        const double sigma = config.sigma_grid[si];
        const std::uint64_t seed =
            config.seeds[sj] + static_cast<std::uint64_t>(options.seed_offset);

        std::mt19937_64 rng_w = substream(seed, kWeights, static_cast<std::uint64_t>(depth));
        std::mt19937_64 rng_y = substream(seed, kLabels);
        std::mt19937_64 rng_x = substream(seed, kEmbeddings, si);
        const Mat labels = gaussian(config.dims.L, config.dims.d_v, rng_y, 1.0);
        const Mat embeddings = gaussian(config.dims.L, config.dims.d_v, rng_x, sigma);

        Mat hessian;
        if (models[mi] == "attention") {
          AttentionStack stack;
          stack.d_k = config.dims.d_k;
          for (int l = 0; l < depth; ++l) {
            stack.layers.push_back({gaussian(config.dims.d_v, config.dims.d_k, rng_w, weight_std),
                                    gaussian(config.dims.d_v, config.dims.d_k, rng_w, weight_std),
                                    gaussian(config.dims.d_v, config.dims.d_v, rng_w, weight_std)});
          }
          const Vec theta = vecr(stack.layers.back().w_value);
          const auto f = [&](const Vec& t) {
            AttentionStack perturbed = stack;
            perturbed.layers.back().w_value = unvecr(t, config.dims.d_v, config.dims.d_v);
            return mse(stack_forward(perturbed, embeddings), labels);
          };
          hessian = fd_hessian(f, theta, fd_options);
        } else {
          std::vector<Mat> weights;
          for (int l = 0; l < depth; ++l) {
            weights.push_back(gaussian(config.dims.d_v, config.dims.d_v, rng_w, weight_std));
          }
          const Vec theta = vecr(weights.back());
          const auto f = [&](const Vec& t) {
            std::vector<Mat> perturbed = weights;
            perturbed.back() = unvecr(t, config.dims.d_v, config.dims.d_v);
            return mse(mlp_forward(perturbed, embeddings), labels);
          };
          hessian = fd_hessian(f, theta, fd_options);
        }
        plan[cell] = hessian.norm();
      });
    }
  }

  DepthOutcome outcome;
  io::CsvTable csv;
  csv.header = {"model", "depth", "sigma", "mean_norm", "sem"};
  json records = json::array();
  for (std::size_t mi = 0; mi < models.size(); ++mi) {
    for (std::size_t di = 0; di < depths.size(); ++di) {
      const std::vector<double>& plan = norms[mi * depths.size() + di];
      DepthRecord record;
      record.model = models[mi];
      record.depth = depths[di];
      for (std::size_t si = 0; si < n_sigma; ++si) {
        std::vector<double> values(plan.begin() + si * n_seeds,
                                   plan.begin() + (si + 1) * n_seeds);
        const MeanSem ms = mean_sem(values);
        record.points.push_back({config.sigma_grid[si], ms.mean, ms.sem});
        csv.add_row({record.model, std::to_string(record.depth),
                     io::format_double(config.sigma_grid[si]), io::format_double(ms.mean),
                     io::format_double(ms.sem)});
      }
      SeriesRecord fit;
      fit.points = record.points;
      fit_loglog_slope(fit);
      record.slope = fit.slope;
      record.slope_stderr = fit.slope_stderr;
      records.push_back(json{{"model", record.model},
                             {"depth", record.depth},
                             {"slope", record.slope},
                             {"slope_stderr", record.slope_stderr}});
      outcome.records.push_back(std::move(record));
    }
  }
  io::write_text_file((out_dir / "depth.csv").string(), csv.to_string());
  const json summary{{"command", "depth"}, {"records", records}, {"config", config_to_json(config)}};
  io::write_text_file((out_dir / "depth_summary.json").string(), summary.dump(2));

  if (options.svg) {
    std::vector<io::SvgSeries> series;
    for (const DepthRecord& record : outcome.records) {
      io::SvgSeries s;
      s.label = record.model + " D=" + std::to_string(record.depth);
      for (const SeriesPoint& p : record.points) {
        s.x.push_back(p.sigma);
        s.y.push_back(p.mean_norm);
      }
      series.push_back(std::move(s));
    }
    io::write_text_file(
        (out_dir / "depth.svg").string(),
        io::render_line_chart("last-layer value-block norm vs sigma", series, true, true));
  }
  return outcome;
}

}  // namespace attnhess
