// pnrsim command-line runner: simulate | analyze | calibrate | sweep-bias.
//
// Exit codes are a stable scripting contract:
//   0  success
//   2  configuration or input error
//   3  I/O failure
//   4  statistical precondition failure (e.g. too few sweep points to fit)

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "pnrsim/pnrsim.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitPrecondition = 4;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> shots;
  std::optional<std::string> out_dir;
  std::optional<unsigned> threads;
  std::optional<std::string> format;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool needs_config) {
  auto* cfg = cmd->add_option("--config", opts.config_path, "experiment config file");
  if (needs_config) cfg->required();
  cmd->add_option("--seed", opts.seed, "master seed (overrides run.master_seed)");
  cmd->add_option("--shots", opts.shots, "shots per sweep point (overrides run.n_shots)");
  cmd->add_option("--out", opts.out_dir, "output directory (overrides run.output_dir)");
  cmd->add_option("--threads", opts.threads, "worker threads, 0 = auto (overrides run.n_threads)");
  cmd->add_option("--format", opts.format, "table format: csv or json")
      ->check(CLI::IsMember({"csv", "json"}));
  cmd->add_option("--set", opts.overrides, "config override, key=value (repeatable)");
}

pnrsim::ExperimentConfig load_config(const CommonOptions& opts) {
  std::string text;
  try {
    text = pnrsim::read_text_file(opts.config_path);
  } catch (const pnrsim::IoError& ex) {
    throw pnrsim::ConfigError(ex.what());  // unreadable config is a config error
  }
  auto doc = pnrsim::ConfigDoc::parse(text, opts.config_path);
  for (const auto& ov : opts.overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) {
      throw pnrsim::ConfigError("--set expects key=value, got '" + ov + "'");
    }
    doc.set(ov.substr(0, eq), ov.substr(eq + 1));
  }
  if (opts.seed) doc.set("run.master_seed", std::to_string(*opts.seed));
  if (opts.shots) doc.set("run.n_shots", std::to_string(*opts.shots));
  if (opts.out_dir) doc.set("run.output_dir", *opts.out_dir);
  if (opts.threads) doc.set("run.n_threads", std::to_string(*opts.threads));
  if (opts.format) doc.set("run.format", *opts.format);
  auto cfg = pnrsim::build_experiment_config(doc);
  cfg.validate();
  return cfg;
}

int cmd_simulate(const CommonOptions& opts) {
  const auto cfg = load_config(opts);
  const auto result = pnrsim::run_simulate_campaign(cfg);
  std::cout << "simulated " << result.points.size() << " sweep point(s) x " << cfg.n_shots
            << " shots into " << result.directory.string() << "\n";
  std::cout << "config_hash = " << result.config_hash << "\n";
  for (const auto& pt : result.points) {
    std::cout << "  point " << pt.index << ": mean_input = " << pnrsim::format_double(pt.mean_input)
              << ", mean_det = " << pnrsim::format_double(pt.mean_det())
              << ", var_det = " << pnrsim::format_double(pt.var_det()) << "\n";
  }
  return 0;
}

int cmd_analyze(const std::string& data_dir, const CommonOptions& opts) {
  std::optional<std::filesystem::path> out;
  if (opts.out_dir) out = *opts.out_dir;
  const auto format = (opts.format && *opts.format == "json") ? pnrsim::OutputFormat::kJson
                                                              : pnrsim::OutputFormat::kCsv;
  const auto result = pnrsim::run_analyze(data_dir, out, format);
  const auto& rep = result.report;
  std::cout << "calibration report written to "
            << (out.value_or(data_dir) / "calibration_report.txt").string() << "\n";
  std::cout << "  fano = " << pnrsim::format_double(rep.fano) << " +- "
            << pnrsim::format_double(rep.fano_stderr) << "\n";
  std::cout << "  p = " << pnrsim::format_double(rep.crosstalk_p) << " +- "
            << pnrsim::format_double(rep.crosstalk_p_stderr) << "\n";
  std::cout << "  p_prime = " << pnrsim::format_double(rep.crosstalk_p_prime) << "\n";
  std::cout << "  eta_total = " << pnrsim::format_double(rep.eta_total) << " ("
            << result.provenance.eta_source << ")\n";
  std::cout << "  qe_total = " << pnrsim::format_double(rep.qe_total) << "\n";
  std::cout << "  noise_mean = " << pnrsim::format_double(rep.noise_mean) << "\n";
  std::cout << "  min_sensitivity = " << pnrsim::format_double(rep.min_sensitivity_photons) << "\n";
  if (rep.under_dispersed) {
    std::cout << "  warning: under-dispersed fit (F < 1); saturated data may have leaked in\n";
  }
  return 0;
}

int cmd_calibrate(const std::string& report_path, double detected_mean) {
  const auto report = pnrsim::read_calibration_report(report_path);
  const auto est = pnrsim::calibrate(report, detected_mean);
  std::cout << "estimated_input_photons = " << pnrsim::format_double(est.input_photons) << "\n";
  if (est.below_noise_floor) {
    std::cout << "note: detected mean is at or below the noise floor ("
              << pnrsim::format_double(report.noise_mean) << ")\n";
  }
  if (est.saturation_warning) {
    std::cout << "warning: detected mean exceeds the linear regime bound ("
              << pnrsim::format_double(pnrsim::calibration_linear_bound(report))
              << "); the detector saturates and this estimate is a lower bound\n";
  }
  return 0;
}

int cmd_sweep_bias(const CommonOptions& opts) {
  const auto cfg = load_config(opts);
  const auto rows = pnrsim::run_bias_sweep(cfg);
  std::filesystem::path dir = opts.out_dir.value_or(cfg.output_dir);
  if (dir.empty()) dir = ".";
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw pnrsim::IoError("cannot create output directory " + dir.string());
  pnrsim::write_bias_table(dir / "bias_sweep", rows, cfg.format);
  std::cout << "bias sweep written to " << (dir / "bias_sweep").string()
            << (cfg.format == pnrsim::OutputFormat::kCsv ? ".csv" : ".json") << "\n";
  for (const auto& r : rows) {
    std::cout << "  V = " << pnrsim::format_double(r.excess_bias_V)
              << ": eta = " << pnrsim::format_double(r.eta)
              << ", gain = " << pnrsim::format_double(r.gain)
              << ", fano = " << pnrsim::format_double(r.fano)
              << ", p = " << pnrsim::format_double(r.p) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic simulator and calibration toolkit for an "
               "up-conversion + multi-pixel APD photon-number-resolving detector"};
  app.require_subcommand(1);

  CommonOptions sim_opts;
  auto* simulate = app.add_subcommand("simulate", "run a sweep campaign and write shot data");
  add_common(simulate, sim_opts, /*needs_config=*/true);

  CommonOptions ana_opts;
  std::string data_dir;
  auto* analyze = app.add_subcommand("analyze", "fit detector parameters from simulate output");
  analyze->add_option("data_dir", data_dir, "directory produced by simulate")->required();
  analyze->add_option("--out", ana_opts.out_dir, "output directory (default: data_dir)");
  analyze->add_option("--format", ana_opts.format, "table format: csv or json")
      ->check(CLI::IsMember({"csv", "json"}));

  std::string report_path;
  double detected_mean = 0.0;
  auto* calibrate = app.add_subcommand("calibrate", "map a detected mean to input photons");
  calibrate->add_option("--report", report_path, "calibration_report.txt path")->required();
  calibrate->add_option("--detected-mean", detected_mean, "mean simultaneous detections")
      ->required()
      ->check(CLI::NonNegativeNumber);

  CommonOptions bias_opts;
  auto* sweep_bias = app.add_subcommand("sweep-bias", "characterize the detector across excess bias");
  add_common(sweep_bias, bias_opts, /*needs_config=*/true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (simulate->parsed()) return cmd_simulate(sim_opts);
    if (analyze->parsed()) return cmd_analyze(data_dir, ana_opts);
    if (calibrate->parsed()) return cmd_calibrate(report_path, detected_mean);
    if (sweep_bias->parsed()) return cmd_sweep_bias(bias_opts);
  } catch (const pnrsim::ConfigError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const pnrsim::IoError& ex) {
    std::cerr << "I/O error: " << ex.what() << "\n";
    return kExitIo;
  } catch (const pnrsim::PreconditionError& ex) {
    std::cerr << "precondition failed: " << ex.what() << "\n";
    return kExitPrecondition;
  } catch (const std::invalid_argument& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& ex) {
    std::cerr << "unexpected error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
