// fwdalloc command line: run, selftest, ablate, gen-data.

#include <chrono>
#include <cstdio>
#include <exception>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fwdalloc/fwdalloc.hpp"

namespace {

constexpr int exit_ok = 0;
constexpr int exit_failed = 1;
constexpr int exit_config = 2;
constexpr int exit_blowup = 3;

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  for (char c : s) {
    if (c == ',') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else if (c != ' ') {
      item += c;
    }
  }
  if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_run(const std::string& path, bool force, int threads, const std::string& output_dir,
            const std::string& run_id) {
  auto cfg = fwdalloc::load_experiment_config(path);
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  if (!run_id.empty()) cfg.run_id = run_id;
  fwdalloc::RunOptions opts;
  opts.overwrite = force;
  if (threads > 0) opts.threads = static_cast<std::size_t>(threads);
  const auto s = fwdalloc::run_experiment(cfg, opts);
  std::printf("run %s: accuracy=%.4f forward_passes=%zu steps=%zu wall_time=%.2fs metrics=%s\n", cfg.run_id.c_str(),
              s.accuracy, s.forward_passes, s.steps, s.wall_seconds, s.metrics_path.c_str());
  return exit_ok;
}

int cmd_selftest(long long seed_arg, const std::string& inject) {
  const std::uint64_t seed = seed_arg >= 0 ? static_cast<std::uint64_t>(seed_arg) : std::random_device{}();
  fwdalloc::SelftestHooks hooks;
  if (inject == "spsa-sign") {
    hooks.flip_spsa_sign = true;
  } else if (inject == "det-exponent") {
    hooks.det_exponent = 1.0;
  } else if (!inject.empty()) {
    std::fprintf(stderr, "unknown mutation '%s' (expected spsa-sign or det-exponent)\n", inject.c_str());
    return exit_config;
  }
  std::printf("selftest seed %llu\n", static_cast<unsigned long long>(seed));
  bool ok = true;
  for (const auto& r : fwdalloc::run_selftest(seed, hooks)) {
    const char* tag = r.passed ? "PASS" : (r.gating ? "FAIL" : "WARN");
    std::printf("[%s] %s%s%s\n", tag, r.name.c_str(), r.detail.empty() ? "" : " -- ", r.detail.c_str());
    if (r.gating && !r.passed) ok = false;
  }
  std::printf("selftest %s\n", ok ? "passed" : "FAILED");
  return ok ? exit_ok : exit_failed;
}

int cmd_ablate(const std::string& path, const std::string& budgets, const std::string& allocators, int seeds,
               int threads, const std::string& out_path) {
  auto cfg = fwdalloc::load_experiment_config(path);
  auto& a = cfg.ablation;
  if (!budgets.empty()) {
    a.budgets.clear();
    for (const auto& b : split_commas(budgets)) {
      try {
        a.budgets.push_back(std::stoul(b));
      } catch (const std::exception&) {
        throw fwdalloc::ConfigError("--budgets: '" + b + "' is not an integer");
      }
    }
  }
  if (!allocators.empty()) {
    a.allocators.clear();
    for (const auto& name : split_commas(allocators)) a.allocators.push_back(fwdalloc::parse_allocator(name));
  }
  if (seeds > 0) a.seeds = static_cast<std::size_t>(seeds);
  fwdalloc::RunOptions opts;
  opts.log = stderr;
  if (threads > 0) opts.threads = static_cast<std::size_t>(threads);
  const auto rows = fwdalloc::run_ablation(cfg, opts);
  const std::string target = out_path.empty() ? cfg.output_dir + "/" + cfg.run_id + "_ablate.csv" : out_path;
  std::filesystem::create_directories(std::filesystem::path(target).parent_path().empty()
                                          ? std::filesystem::path(".")
                                          : std::filesystem::path(target).parent_path());
  fwdalloc::write_ablation_csv(rows, target);

  std::printf("%-6s %-8s %-10s %s\n", "alloc", "budget", "scope", "mean_cosine");
  for (auto alloc : a.allocators)
    for (auto b : a.budgets)
      for (const auto& scope : cfg.train.cosine_scopes)
        std::printf("%-6s %-8zu %-10s %.4f\n", fwdalloc::allocator_label(alloc).c_str(), b, scope.c_str(),
                    fwdalloc::ablation_mean(rows, alloc, b, scope));
  std::printf("ablation grid written to %s\n", target.c_str());
  return exit_ok;
}

int cmd_gen_data(const std::string& kind, const std::string& out, std::size_t n, double noise, std::size_t classes,
                 double spread, unsigned long long seed) {
  fwdalloc::DatasetSpec spec;
  if (kind == "two_moons") {
    spec.kind = fwdalloc::DatasetKind::two_moons;
  } else if (kind == "blobs") {
    spec.kind = fwdalloc::DatasetKind::blobs;
  } else if (kind == "xor") {
    spec.kind = fwdalloc::DatasetKind::xor_clusters;
  } else {
    throw fwdalloc::ConfigError("unknown dataset kind '" + kind + "' (expected two_moons, blobs or xor)");
  }
  spec.n = n;
  spec.noise = noise;
  spec.classes = classes;
  spec.spread = spread;
  try {
    const auto ds = fwdalloc::generate_dataset(spec, seed);
    fwdalloc::write_csv_dataset(ds, out);
    std::printf("wrote %zu points (%zu classes) to %s\n", ds.size(), ds.num_classes, out.c_str());
  } catch (const fwdalloc::DatasetError& e) {
    throw fwdalloc::ConfigError(e.what());
  }
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Forward-only training with optimal query allocation"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train from a config file and write per-step metrics");
  std::string run_config, run_output_dir, run_id;
  bool run_force = false;
  int run_threads = 0;
  run->add_option("config", run_config, "experiment config")->required()->check(CLI::ExistingFile);
  run->add_flag("--force", run_force, "replace metrics of an existing run id");
  run->add_option("--threads", run_threads, "worker threads for per-datum estimation");
  run->add_option("--output-dir", run_output_dir, "override run.output_dir");
  run->add_option("--run-id", run_id, "override run.id");

  auto* self = app.add_subcommand("selftest", "check the estimator and allocator properties");
  long long self_seed = -1;
  std::string self_inject;
  self->add_option("--seed", self_seed, "seed (default: fresh)");
  self->add_option("--inject", self_inject, "mutation to inject: spsa-sign or det-exponent");

  auto* ablate = app.add_subcommand("ablate", "cosine-to-oracle grid over allocators and budgets");
  std::string ab_config, ab_budgets, ab_allocators, ab_out;
  int ab_seeds = 0, ab_threads = 0;
  ablate->add_option("config", ab_config, "experiment config")->required()->check(CLI::ExistingFile);
  ablate->add_option("--budgets", ab_budgets, "comma list of mean budgets, e.g. 20,60,120,240");
  ablate->add_option("--allocators", ab_allocators, "comma list from ea,ba,ga,det");
  ablate->add_option("--seeds", ab_seeds, "number of seeds");
  ablate->add_option("--threads", ab_threads, "worker threads");
  ablate->add_option("--out", ab_out, "output csv (default <output_dir>/<run_id>_ablate.csv)");

  auto* gen = app.add_subcommand("gen-data", "write a toy dataset as csv");
  std::string gen_kind, gen_out;
  std::size_t gen_n = 1000, gen_classes = 3;
  double gen_noise = 0.1, gen_spread = 1.0;
  unsigned long long gen_seed = 0;
  gen->add_option("kind", gen_kind, "two_moons, blobs or xor")->required();
  gen->add_option("out", gen_out, "output csv")->required();
  gen->add_option("--n", gen_n, "number of points");
  gen->add_option("--noise", gen_noise, "jitter std (two_moons, xor)");
  gen->add_option("--classes", gen_classes, "number of blobs");
  gen->add_option("--spread", gen_spread, "blob std");
  gen->add_option("--seed", gen_seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config;
  }

  try {
    if (*run) return cmd_run(run_config, run_force, run_threads, run_output_dir, run_id);
    if (*self) return cmd_selftest(self_seed, self_inject);
    if (*ablate) return cmd_ablate(ab_config, ab_budgets, ab_allocators, ab_seeds, ab_threads, ab_out);
    if (*gen) return cmd_gen_data(gen_kind, gen_out, gen_n, gen_noise, gen_classes, gen_spread, gen_seed);
  } catch (const fwdalloc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return exit_config;
  } catch (const fwdalloc::TrainingBlowup& e) {
    std::fprintf(stderr, "numerical blowup at step %zu: %s\n", e.step(), e.what());
    return exit_blowup;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_failed;
  }
  return exit_ok;
}
