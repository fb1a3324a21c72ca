#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fwdalloc/experiment.hpp"

using namespace fwdalloc;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("fwdalloc_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name) {
  return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
}

ExperimentConfig small_experiment(const std::string& allocator, const fs::path& out) {
  auto cfg = experiment_from_flat(FlatConfig::parse("[run]\nid = \"small\"\nseed = 3\n"
                                                    "[data]\nn = 200\n"
                                                    "[allocator]\nkind = \"" +
                                                    allocator +
                                                    "\"\n"
                                                    "[train]\nepochs = 2\nlr = 0.01\n"
                                                    "[metrics]\ncosine_every = 2\ncosine_scopes = [\"all\", \"layer0\"]\n"));
  cfg.output_dir = out.string();
  return cfg;
}

RunOptions quiet() {
  RunOptions o;
  o.log = nullptr;
  return o;
}

}  // namespace

TEST(FlatConfig, SectionsCommentsQuotesAndLists) {
  const auto f = FlatConfig::parse(
      "top = 1\n# comment\n[a]\nname = \"x # not a comment\"  # trailing\nflag = true\n"
      "list = [1, 2, 3]\nwords = [\"p\", \"q\"]\nreal = 2.5e-3\n");
  EXPECT_EQ(f.get_size("top", 0), 1u);
  EXPECT_EQ(f.get_string("a.name", ""), "x # not a comment");
  EXPECT_TRUE(f.get_bool("a.flag", false));
  EXPECT_EQ(f.get_size_list("a.list", {}), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(f.get_list("a.words", {}), (std::vector<std::string>{"p", "q"}));
  EXPECT_DOUBLE_EQ(f.get_double("a.real", 0.0), 2.5e-3);
  EXPECT_EQ(f.get_double("a.missing", 7.0), 7.0);
  EXPECT_NO_THROW(f.require_known());
}

TEST(FlatConfig, ErrorsCarryLocation) {
  auto message = [](const std::string& text) {
    try {
      (void)FlatConfig::parse(text, "cfg.toml");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message("[a\n").find("cfg.toml:1"), std::string::npos);
  EXPECT_NE(message("x = 1\nnovalue\n").find("cfg.toml:2"), std::string::npos);
  EXPECT_NE(message("x = 1\nx = 2\n").find("duplicate"), std::string::npos);

  const auto f = FlatConfig::parse("[a]\nn = -3\nb = yes\nr = abc\n", "cfg.toml");
  EXPECT_THROW((void)f.get_size("a.n", 0), ConfigError);
  EXPECT_THROW((void)f.get_bool("a.b", false), ConfigError);
  EXPECT_THROW((void)f.get_double("a.r", 0.0), ConfigError);
}

TEST(FlatConfig, UnknownKeysAreRejected) {
  try {
    (void)experiment_from_flat(FlatConfig::parse("[train]\nepcohs = 3\n", "cfg.toml"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.epcohs"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("cfg.toml:2"), std::string::npos);
  }
}

TEST(ExperimentConfig, ParsesEverySection) {
  const auto e = experiment_from_flat(FlatConfig::parse(
      "[run]\nseed = 9\nid = \"r1\"\nthreads = 2\n"
      "[data]\nkind = \"blobs\"\nn = 300\nclasses = 4\nspread = 0.5\n"
      "[model]\nlayers = [2, 8, 4]\nactivation = \"relu\"\n"
      "[estimator]\nfamily = \"spsa\"\nsigma = 0.05\nsigma_overrides = [\"layer1:0.02\"]\ninitial_queries = 6\n"
      "[allocator]\nkind = \"ba\"\nmean_budget = 40\np = 0.25\n"
      "[train]\nbatch_size = 16\nepochs = 3\noptimizer = \"sgd\"\nlr = 0.1\nschedule = \"cosine\"\n"
      "[ablate]\nbudgets = [20, 40]\nallocators = [\"ea\", \"ga\"]\n"));
  EXPECT_EQ(e.train.seed, 9u);
  EXPECT_EQ(e.data_seed, 9u);
  EXPECT_EQ(e.run_id, "r1");
  EXPECT_EQ(e.train.threads, 2u);
  EXPECT_EQ(e.data.kind, DatasetKind::blobs);
  EXPECT_EQ(e.data.classes, 4u);
  EXPECT_EQ(e.train.model.layer_sizes, (std::vector<std::size_t>{2, 8, 4}));
  EXPECT_EQ(e.train.model.activation, Activation::relu);
  EXPECT_EQ(e.train.family, EstimatorFamily::spsa);
  ASSERT_EQ(e.train.sigma_overrides.size(), 1u);
  EXPECT_EQ(e.train.sigma_overrides[0].first, "layer1");
  EXPECT_EQ(e.train.allocator, AllocatorKind::bernoulli);
  EXPECT_EQ(e.train.bernoulli_p, 0.25);
  EXPECT_EQ(e.train.optimizer.kind, OptimizerKind::sgd);
  EXPECT_EQ(e.train.optimizer.schedule, LrSchedule::cosine);
  EXPECT_EQ(e.ablation.budgets, (std::vector<std::size_t>{20, 40}));
  EXPECT_EQ(e.ablation.allocators, (std::vector<AllocatorKind>{AllocatorKind::equal, AllocatorKind::gaussian}));
}

TEST(ExperimentConfig, BadValuesAreConfigErrors) {
  EXPECT_THROW((void)experiment_from_flat(FlatConfig::parse("[estimator]\nfamily = \"magic\"\n")), ConfigError);
  EXPECT_THROW((void)experiment_from_flat(FlatConfig::parse("[allocator]\nkind = \"best\"\n")), ConfigError);
  EXPECT_THROW((void)experiment_from_flat(FlatConfig::parse("[data]\nkind = \"csv\"\n")), ConfigError);
  EXPECT_THROW((void)experiment_from_flat(FlatConfig::parse("[data]\nkind = \"csv\"\npath = \"/nonexistent.csv\"\n")),
               ConfigError);
  EXPECT_THROW((void)experiment_from_flat(FlatConfig::parse("[run]\nid = \"a/b\"\n")), ConfigError);
  EXPECT_THROW((void)load_experiment_config("/nonexistent/config.toml"), ConfigError);
}

TEST(ExperimentConfig, ShapeAndBudgetMismatchesAreConfigErrors) {
  const auto out = scratch_dir("mismatch");
  auto wrong_input = small_experiment("ea", out);
  wrong_input.train.model.layer_sizes = {3, 8, 2};
  EXPECT_THROW((void)run_experiment(wrong_input, quiet()), ConfigError);
  auto odd_budget = small_experiment("ea", out);
  odd_budget.train.mean_budget = 21;
  EXPECT_THROW((void)run_experiment(odd_budget, quiet()), ConfigError);
  auto bad_scope = small_experiment("ea", out);
  bad_scope.train.cosine_scopes = {"layer7"};
  EXPECT_THROW((void)run_experiment(bad_scope, quiet()), ConfigError);
}

TEST(ExperimentConfig, OutputDirectoryFromEnvironment) {
  ::setenv(output_dir_env, "/tmp/from_env", 1);
  EXPECT_EQ(experiment_from_flat(FlatConfig::parse("")).output_dir, "/tmp/from_env");
  EXPECT_EQ(experiment_from_flat(FlatConfig::parse("[run]\noutput_dir = \"x\"\n")).output_dir, "x");
  ::unsetenv(output_dir_env);
  EXPECT_EQ(experiment_from_flat(FlatConfig::parse("")).output_dir, "runs");
}

TEST(GenerateDataset, TwoMoonsBalancedAndInterleaved) {
  DatasetSpec s;
  s.n = 200;
  s.noise = 0.0;
  const auto d = generate_dataset(s, 1);
  EXPECT_EQ(d.size(), 200u);
  EXPECT_EQ(d.train.size(), 160u);
  std::size_t ones = 0;
  std::vector<Datum> all = d.train;
  all.insert(all.end(), d.test.begin(), d.test.end());
  for (const auto& p : all) ones += p.label == 1 ? 1 : 0;
  EXPECT_EQ(ones, 100u);
  // (0, 0.5) belongs to the lower moon but sits inside the triangle spanned by
  // the ends and the top of the upper moon, so no line separates the classes.
  auto find = [&](double x, double y, int label) {
    for (const auto& p : all)
      if (p.label == label && std::abs(p.x[0] - x) < 1e-9 && std::abs(p.x[1] - y) < 1e-9) return true;
    return false;
  };
  EXPECT_TRUE(find(1.0, 0.0, 0));
  EXPECT_TRUE(find(-1.0, 0.0, 0));
  EXPECT_TRUE(find(0.0, 0.5, 1));
  double top = 0.0;
  for (const auto& p : all)
    if (p.label == 0) top = std::max(top, p.x[1]);
  EXPECT_GT(top, 0.99);
}

TEST(GenerateDataset, XorHasFourParityClusters) {
  DatasetSpec s;
  s.kind = DatasetKind::xor_clusters;
  s.n = 400;
  s.noise = 0.1;
  const auto d = generate_dataset(s, 2);
  std::map<std::pair<bool, bool>, std::size_t> clusters;
  for (const auto* split : {&d.train, &d.test})
    for (const auto& p : *split) {
      const bool px = p.x[0] > 0.0, py = p.x[1] > 0.0;
      ++clusters[{px, py}];
      EXPECT_EQ(p.label, px != py ? 1 : 0);
    }
  ASSERT_EQ(clusters.size(), 4u);
  for (const auto& [k, n] : clusters) EXPECT_EQ(n, 100u);
}

TEST(GenerateDataset, BlobsBalancedWithinOne) {
  DatasetSpec s;
  s.kind = DatasetKind::blobs;
  s.n = 301;
  s.classes = 3;
  const auto d = generate_dataset(s, 3);
  std::vector<std::size_t> per(3, 0);
  for (const auto* split : {&d.train, &d.test})
    for (const auto& p : *split) ++per[static_cast<std::size_t>(p.label)];
  EXPECT_LE(*std::max_element(per.begin(), per.end()) - *std::min_element(per.begin(), per.end()), 1u);
}

TEST(GenerateDataset, DeterministicPerSeed) {
  DatasetSpec s;
  const auto a = generate_dataset(s, 5);
  const auto b = generate_dataset(s, 5);
  const auto c = generate_dataset(s, 6);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].x, b.train[i].x);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
  }
  EXPECT_NE(a.train[0].x, c.train[0].x);
}

TEST(GenerateDataset, RejectsBadParameters) {
  DatasetSpec s;
  s.n = 5;
  EXPECT_THROW((void)generate_dataset(s, 0), DatasetError);
  s.n = 100;
  s.noise = -1.0;
  EXPECT_THROW((void)generate_dataset(s, 0), DatasetError);
}

TEST(LoadCsv, SmallFileIsStandardized) {
  const auto dir = scratch_dir("csv_small");
  write_file(dir / "d.csv", "a,b,label\n1,10,0\n2,20,1\n3,60,0\n");
  const auto d = load_csv_dataset((dir / "d.csv").string(), "label", 0, 0.0);
  ASSERT_EQ(d.train.size(), 3u);
  EXPECT_EQ(d.num_features, 2u);
  EXPECT_EQ(d.num_classes, 2u);
  for (std::size_t f = 0; f < 2; ++f) {
    double mean = 0.0, sq = 0.0;
    for (const auto& p : d.train) mean += p.x[f];
    for (const auto& p : d.train) sq += p.x[f] * p.x[f];
    EXPECT_NEAR(mean / 3.0, 0.0, 1e-12);
    EXPECT_NEAR(sq / 3.0, 1.0, 1e-12);
  }
}

TEST(LoadCsv, TestSplitUsesTrainStatistics) {
  const auto dir = scratch_dir("csv_split");
  std::string text = "x,label\n";
  for (int i = 0; i < 20; ++i) text += std::to_string(i) + "," + std::to_string(i % 2) + "\n";
  write_file(dir / "d.csv", text);
  const auto d = load_csv_dataset((dir / "d.csv").string(), "label", 1, 0.2);
  EXPECT_EQ(d.train.size(), 16u);
  EXPECT_EQ(d.test.size(), 4u);
  double mean = 0.0;
  for (const auto& p : d.train) mean += p.x[0];
  EXPECT_NEAR(mean, 0.0, 1e-9);
}

TEST(LoadCsv, ConstantColumnWarnsAndZeros) {
  const auto dir = scratch_dir("csv_const");
  write_file(dir / "d.csv", "label,c,v\n0,5,1\n1,5,2\n0,5,4\n");
  const auto d = load_csv_dataset((dir / "d.csv").string(), "label", 0, 0.0);
  ASSERT_EQ(d.warnings.size(), 1u);
  EXPECT_NE(d.warnings[0].find("'c'"), std::string::npos);
  for (const auto& p : d.train) EXPECT_EQ(p.x[0], 0.0);
}

TEST(LoadCsv, ErrorsNameTheProblem) {
  const auto dir = scratch_dir("csv_errors");
  auto message = [&](const std::string& text, const std::string& label = "label") {
    write_file(dir / "e.csv", text);
    try {
      (void)load_csv_dataset((dir / "e.csv").string(), label, 0, 0.0);
    } catch (const DatasetError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const auto missing = message("a,b,y\n1,2,0\n");
  EXPECT_NE(missing.find("available columns: a, b, y"), std::string::npos);
  EXPECT_NE(message("a,label\n1,0\nfoo,1\n").find("line 3"), std::string::npos);
  EXPECT_NE(message("a,label\n1,0\n2\n").find("line 3"), std::string::npos);
  EXPECT_NE(message("a,label\n1,0.5\n").find("nonnegative integer"), std::string::npos);
  EXPECT_NE(message("a,label\n").find("no rows"), std::string::npos);
  EXPECT_THROW((void)load_csv_dataset((dir / "absent.csv").string(), "label"), DatasetError);
}

TEST(LoadCsv, RoundTripsGeneratedData) {
  const auto dir = scratch_dir("csv_roundtrip");
  DatasetSpec s;
  s.n = 100;
  const auto d = generate_dataset(s, 4);
  write_csv_dataset(d, (dir / "m.csv").string());
  const auto back = load_csv_dataset((dir / "m.csv").string(), "label", 4);
  EXPECT_EQ(back.size(), 100u);
  EXPECT_EQ(back.num_features, 2u);
  EXPECT_EQ(back.num_classes, 2u);
}

TEST(MetricsWriter, HeaderAndRows) {
  const auto dir = scratch_dir("metrics");
  {
    MetricsWriter w((dir / "m.csv").string(), {"all", "layer0"});
    StepMetrics m;
    m.step = 0;
    m.clean_loss = 0.5;
    m.counts = {3, 5};
    m.cosine = {0.25, std::nan("")};
    m.budget = 8;
    m.forward_passes = 10;
    w.write(m);
    m.step = 3;
    m.accuracy = 0.75;
    w.write(m);
    m.step = 3;
    EXPECT_THROW(w.write(m), std::logic_error);
  }
  const auto rows = read_csv(dir / "m.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"step", "epoch", "clean_loss", "J", "gap", "cosine_all", "cosine_layer0",
                                               "accuracy", "counts_min", "counts_max", "forward_passes", "counts_sum",
                                               "budget"}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"0", "0", "0.5", "", "", "0.25", "", "", "3", "5", "10", "8", "8"}));
  EXPECT_EQ(rows[2][7], "0.75");
  for (const auto& r : rows) EXPECT_EQ(r.size(), rows[0].size());
}

TEST(MetricsWriter, NumbersRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.123456789}) EXPECT_EQ(std::stod(format_number(v)), v);
  EXPECT_EQ(format_number(std::nan("")), "");
}

TEST(RunExperiment, EqualAllocatorRowsAreFlat) {
  const auto out = scratch_dir("run_equal");
  const auto s = run_experiment(small_experiment("ea", out), quiet());
  const auto rows = read_csv(s.metrics_path);
  ASSERT_GT(rows.size(), 1u);
  const auto& h = rows[0];
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][column(h, "counts_min")], "20");
    EXPECT_EQ(rows[i][column(h, "counts_max")], "20");
    EXPECT_EQ(rows[i][column(h, "counts_sum")], rows[i][column(h, "budget")]);
  }
  EXPECT_EQ(s.steps, 10u);
  EXPECT_EQ(rows.size(), 11u);
  EXPECT_GT(s.accuracy, 0.0);
}

TEST(RunExperiment, GaussianAllocatorProducesUnequalCountsAndAccounting) {
  const auto out = scratch_dir("run_ga");
  const auto s = run_experiment(small_experiment("ga", out), quiet());
  const auto rows = read_csv(s.metrics_path);
  const auto& h = rows[0];
  bool unequal = false;
  std::size_t passes = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    unequal = unequal || rows[i][column(h, "counts_max")] != rows[i][column(h, "counts_min")];
    EXPECT_EQ(rows[i][column(h, "counts_sum")], rows[i][column(h, "budget")]);
    const std::size_t budget = std::stoul(rows[i][column(h, "budget")]);
    const std::size_t fp = std::stoul(rows[i][column(h, "forward_passes")]);
    EXPECT_EQ(fp, budget + budget / 20);  // A0 plus one clean pass per datum
    passes += fp;
    EXPECT_FALSE(rows[i][column(h, "J")].empty());
  }
  EXPECT_TRUE(unequal);
  EXPECT_EQ(passes, s.forward_passes);
}

TEST(RunExperiment, RerunsAndThreadCountsAreByteIdentical) {
  const auto out = scratch_dir("run_repeat");
  auto cfg = small_experiment("ga", out);
  const auto first = read_file(run_experiment(cfg, quiet()).metrics_path);
  auto opts = quiet();
  opts.overwrite = true;
  EXPECT_EQ(read_file(run_experiment(cfg, opts).metrics_path), first);
  opts.threads = 3;
  EXPECT_EQ(read_file(run_experiment(cfg, opts).metrics_path), first);
}

TEST(RunExperiment, RefusesToOverwriteWithoutForce) {
  const auto out = scratch_dir("run_overwrite");
  auto cfg = small_experiment("ea", out);
  cfg.train.epochs = 1;
  (void)run_experiment(cfg, quiet());
  EXPECT_THROW((void)run_experiment(cfg, quiet()), ConfigError);
}

TEST(RunExperiment, CsvDatasetEndToEnd) {
  const auto out = scratch_dir("run_csv");
  DatasetSpec s;
  s.n = 200;
  write_csv_dataset(generate_dataset(s, 0), (out / "moons.csv").string());
  auto cfg = experiment_from_flat(FlatConfig::parse("[data]\nkind = \"csv\"\npath = \"" + (out / "moons.csv").string() +
                                                    "\"\n[allocator]\nkind = \"det\"\n[train]\nepochs = 1\n"));
  cfg.output_dir = out.string();
  const auto summary = run_experiment(cfg, quiet());
  EXPECT_EQ(summary.steps, 5u);
}

TEST(Ablation, GridShapeAndPairing) {
  auto cfg = small_experiment("ea", scratch_dir("ablate"));
  cfg.ablation.seeds = 2;
  cfg.ablation.batches = 3;
  cfg.ablation.pretrain_epochs = 1;
  cfg.ablation.budgets = {20, 60};
  cfg.ablation.allocators = {AllocatorKind::equal, AllocatorKind::gaussian};
  const auto rows = run_ablation(cfg, quiet());
  EXPECT_EQ(rows.size(), 2u * 2u * 2u * 2u);  // seeds x allocators x budgets x scopes
  for (const auto& r : rows) {
    EXPECT_GE(r.mean_cosine, -1.0);
    EXPECT_LE(r.mean_cosine, 1.0);
    EXPECT_EQ(r.batches, 3u);
  }
  const double m = ablation_mean(rows, AllocatorKind::equal, 60, "all");
  EXPECT_TRUE(std::isfinite(m));
  const auto again = run_ablation(cfg, quiet());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].mean_cosine, again[i].mean_cosine);

  const auto path = scratch_dir("ablate_csv") / "grid.csv";
  write_ablation_csv(rows, path.string());
  const auto csv = read_csv(path);
  EXPECT_EQ(csv[0], (std::vector<std::string>{"seed", "allocator", "budget", "scope", "mean_cosine", "mean_J", "batches"}));
  EXPECT_EQ(csv.size(), rows.size() + 1);
}

TEST(Ablation, RejectsEmptyGrid) {
  auto cfg = small_experiment("ea", scratch_dir("ablate_empty"));
  cfg.ablation.budgets.clear();
  EXPECT_THROW((void)run_ablation(cfg, quiet()), ConfigError);
}

TEST(Allocators, NamesRoundTrip) {
  for (auto k : {AllocatorKind::equal, AllocatorKind::bernoulli, AllocatorKind::gaussian,
                 AllocatorKind::deterministic_oracle})
    EXPECT_EQ(parse_allocator(allocator_label(k)), k);
  EXPECT_EQ(parse_allocator("gaussian"), AllocatorKind::gaussian);
  EXPECT_THROW((void)parse_allocator("nope"), ConfigError);
}

TEST(ExperimentData, MseModelsRegressOneHotLabels) {
  auto cfg = experiment_from_flat(FlatConfig::parse("[data]\nkind = \"blobs\"\nn = 60\nclasses = 3\n"
                                                    "[model]\nlayers = [2, 3]\nloss = \"mse\"\n"));
  const auto data = load_experiment_data(cfg);
  for (const auto& d : data.train) {
    ASSERT_EQ(d.target.size(), 3u);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(d.target[c], static_cast<std::size_t>(d.label) == c ? 1.0 : 0.0);
  }
  cfg.train.model.layer_sizes = {2, 2};
  EXPECT_THROW(check_experiment(cfg, data, build_model(cfg.train.model)), ConfigError);
}
