#include "attnhess/experiments.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <functional>
#include <string>

namespace {

struct CliArgs {
  std::string config_path;
  std::string out_dir;
  long long seed_offset = 0;
  int threads = 1;
  bool svg = false;
};

void attach_common(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file (ExperimentConfig fields)");
  cmd->add_option("--out", args.out_dir, "output directory (overrides config output_path)");
  cmd->add_option("--seed-offset", args.seed_offset, "offset added to every seed");
  cmd->add_option("--threads", args.threads, "worker threads for independent cells")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--svg", args.svg, "also render SVG charts");
}

attnhess::ExperimentConfig resolve_config(const CliArgs& args,
                                          const attnhess::ExperimentConfig& defaults) {
  if (args.config_path.empty()) return defaults;
  return attnhess::load_config(args.config_path, defaults);
}

attnhess::RunOptions run_options(const CliArgs& args) {
  return {args.out_dir, args.seed_offset, args.threads, args.svg};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact self-attention Hessian blocks, their oracle verification, and the "
               "block-scaling experiments"};
  app.require_subcommand(1);

  CliArgs verify_args, scaling_args, spectrum_args, histogram_args, depth_args;
  CLI::App* verify = app.add_subcommand("verify", "analytic blocks vs finite-difference oracle");
  attach_common(verify, verify_args);
  CLI::App* scaling = app.add_subcommand("scaling", "block norms vs embedding scale sigma");
  attach_common(scaling, scaling_args);
  CLI::App* spectrum = app.add_subcommand("spectrum", "T-decomposition and full-grid eigenvalues");
  attach_common(spectrum, spectrum_args);
  CLI::App* histogram = app.add_subcommand("histogram", "entry-magnitude histograms of Q/V blocks");
  attach_common(histogram, histogram_args);
  CLI::App* depth = app.add_subcommand("depth", "curvature growth of stacked linear attention");
  attach_common(depth, depth_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (verify->parsed()) {
      const auto config = resolve_config(verify_args, attnhess::default_verify_config());
      const auto outcome = attnhess::run_verify(config, run_options(verify_args));
      std::printf("verify: %zu block reports, max abs error %.3e, tolerance %.1e -> %s\n",
                  outcome.rows.size(), outcome.max_abs_error, outcome.tolerance,
                  outcome.passed ? "PASS" : "FAIL");
      return outcome.passed ? 0 : 1;
    }
    if (scaling->parsed()) {
      const auto config = resolve_config(scaling_args, attnhess::default_scaling_config());
      const auto outcome = attnhess::run_scaling(config, run_options(scaling_args));
      for (const auto& record : outcome.records) {
        if (record.has_slope) {
          std::printf("scaling: %-4s %-10s slope %+0.3f (stderr %.3f)\n", record.block.c_str(),
                      record.part.c_str(), record.slope, record.slope_stderr);
        }
      }
      if (!outcome.flagged_cells.empty()) {
        std::printf("scaling: %zu saturated cells flagged (see scaling_summary.json)\n",
                    outcome.flagged_cells.size());
      }
      return 0;
    }
    if (spectrum->parsed()) {
      const auto config = resolve_config(spectrum_args, attnhess::default_spectrum_config());
      const auto outcome = attnhess::run_spectrum(config, run_options(spectrum_args));
      std::printf("spectrum: max pairing residual %.3e, multiplicity %s, rank bound %lld\n",
                  outcome.max_pairing_residual, outcome.multiplicity_ok ? "ok" : "VIOLATED",
                  static_cast<long long>(outcome.rank_bound));
      return 0;
    }
    if (histogram->parsed()) {
      const auto config = resolve_config(histogram_args, attnhess::default_histogram_config());
      const auto outcome = attnhess::run_histogram(config, run_options(histogram_args));
      std::printf("histogram: softmax medians |Q,Q|=%.3e |V,V|=%.3e; identity |Q,Q|=%.3e "
                  "|V,V|=%.3e\n",
                  outcome.softmax.median_qq, outcome.softmax.median_vv,
                  outcome.identity.median_qq, outcome.identity.median_vv);
      return 0;
    }
    if (depth->parsed()) {
      const auto config = resolve_config(depth_args, attnhess::default_depth_config());
      const auto outcome = attnhess::run_depth(config, run_options(depth_args));
      for (const auto& record : outcome.records) {
        std::printf("depth: %-9s D=%d slope %+0.3f (stderr %.3f)\n", record.model.c_str(),
                    record.depth, record.slope, record.slope_stderr);
      }
      return 0;
    }
  } catch (const attnhess::SizeLimitError& e) {
    std::fprintf(stderr, "error: %s\n       lower the dims or raise element_cap in the config\n",
                 e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
