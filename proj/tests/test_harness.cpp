#include "saq/config.hpp"
#include "saq/errors.hpp"
#include "saq/harness.hpp"
#include "saq/report.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

using namespace saq;

namespace {

ExperimentConfig tiny_experiment() {
  ExperimentConfig cfg;
  cfg.model.image_size = 32;
  cfg.model.embed_dim = 32;
  cfg.model.num_heads = 2;
  cfg.model.encoder_layers = 4;
  cfg.model.global_layer_indices = {1, 3};
  cfg.model.window_size = 2;
  cfg.model.decoder_layers = 1;
  cfg.model.neck_dim = 16;
  cfg.calib_images = 4;
  cfg.eval_images = 2;
  cfg.policy.grid_steps = 20;
  cfg.recon_cfg.iterations = 10;
  cfg.recon_cfg.final_iterations = 10;
  cfg.recon_cfg.budget = 1.0;
  cfg.recon_cfg.eval_items = 2;
  cfg.recon_cfg.checkpoints = 2;
  cfg.bits = {{6, 6}};
  cfg.thetas = {0.4, 0.6};
  cfg.seeds = {0, 1};
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("saq_test_" + name)).string();
}

}  // namespace

TEST(SyntheticData, ImagesAreSeededAndStructured) {
  ModelConfig c;
  const auto a = gen_synthetic_images(c, 3, 7);
  const auto b = gen_synthetic_images(c, 3, 7);
  const auto d = gen_synthetic_images(c, 3, 8);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].rows(), c.in_channels);
    EXPECT_EQ(a[i].cols(), c.image_size * c.image_size);
    EXPECT_EQ(a[i], b[i]);
    EXPECT_NE(a[i], d[i]);
    // Blobs dominate the noise floor.
    EXPECT_GT(a[i].maxCoeff() - a[i].minCoeff(), 0.8);
  }
  EXPECT_NE(gen_synthetic_images(c, 1, 7, "data.eval")[0], a[0]);
  EXPECT_THROW(gen_synthetic_images(c, -1, 7), ConfigError);
}

TEST(SyntheticData, PromptsSitOnTheBrightestBlob) {
  ModelConfig c;
  const auto imgs = gen_synthetic_images(c, 8, 3);
  const auto prompts = gen_prompts(imgs, c, 3);
  EXPECT_EQ(prompts.size(), imgs.size());
  EXPECT_EQ(gen_prompts(imgs, c, 3).size(), prompts.size());
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    ASSERT_EQ(prompts[i].size(), 2u);
    const PromptSpec& p = prompts[i][0];
    const PromptSpec& box = prompts[i][1];
    EXPECT_EQ(p.kind, PromptKind::Point);
    EXPECT_EQ(box.kind, PromptKind::Box);
    for (double v : {p.x0, p.y0, box.x0, box.y0, box.x1, box.y1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, c.image_size - 1.0);
    }
    EXPECT_LE(box.x0, box.x1);
    EXPECT_LE(box.y0, box.y1);
    EXPECT_GE(p.x0, box.x0 - 1.0);
    EXPECT_LE(p.x0, box.x1 + 1.0);
    EXPECT_GE(p.y0, box.y0 - 1.0);
    EXPECT_LE(p.y0, box.y1 + 1.0);
    // The point is brighter than the image mean.
    const int px = static_cast<int>(p.x0), py = static_cast<int>(p.y0);
    EXPECT_GT(imgs[i].col(py * c.image_size + px).mean(), imgs[i].mean());
  }
  EXPECT_THROW(make_items(imgs, {}), ContractError);
}

TEST(SyntheticData, ItemsRoundTripThroughAFile) {
  ModelConfig c;
  const auto imgs = gen_synthetic_images(c, 3, 4);
  const auto items = make_items(imgs, gen_prompts(imgs, c, 4));
  const std::string path = temp_path("items.saqw");
  save_items(items, path);
  const auto back = load_items(path);
  ASSERT_EQ(back.size(), items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(back[i].image, items[i].image);
    ASSERT_EQ(back[i].prompts.size(), items[i].prompts.size());
    for (std::size_t k = 0; k < items[i].prompts.size(); ++k) {
      EXPECT_EQ(back[i].prompts[k].kind, items[i].prompts[k].kind);
      EXPECT_EQ(back[i].prompts[k].x0, items[i].prompts[k].x0);
      EXPECT_EQ(back[i].prompts[k].y1, items[i].prompts[k].y1);
    }
  }
  std::remove(path.c_str());
}

TEST(BulkSigma, MatchesTheNormalSpread) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.5);
  std::vector<double> v(200000);
  for (double& x : v) x = n(rng);
  EXPECT_NEAR(bulk_sigma(v), 2.5, 0.05);
  v[0] = 1e9;
  EXPECT_NEAR(bulk_sigma(v), 2.5, 0.05);
  EXPECT_THROW(bulk_sigma({1.0, 2.0}), ContractError);
}

class Injection : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = tiny_experiment();
    ModelConfig mc = cfg_.model;
    mc.seed = 2;
    model_ = std::make_unique<Model>(build_model(mc));
    const auto imgs = gen_synthetic_images(mc, 4, 2);
    items_ = make_items(imgs, gen_prompts(imgs, mc, 2));
  }
  ExperimentConfig cfg_;
  std::unique_ptr<Model> model_;
  std::vector<CalibItem> items_;
};

TEST_F(Injection, ReachesTheRequestedRatio) {
  const auto entries = inject_outliers(*model_, cfg_.outliers, items_, 2);
  ASSERT_EQ(entries.size(), 4u);  // self, t2i, i2t of one block plus the final attention
  for (const OutlierEntry& e : entries) {
    EXPECT_GE(e.ratio, 0.8 * cfg_.outliers.magnitude) << e.target;
    EXPECT_EQ(e.columns.size(), 1u);
    const auto v = hook_values(*model_, items_, e.target);
    double mx = 0.0;
    for (double x : v) mx = std::max(mx, std::abs(x));
    EXPECT_EQ(mx, e.max_abs);
  }
}

TEST_F(Injection, LeavesFullPrecisionOutputsUnchanged) {
  Model reference = *model_;
  const auto entries = inject_outliers(*model_, cfg_.outliers, items_, 2);
  for (const OutlierEntry& e : entries) {
    const std::string module = e.target.substr(0, e.target.size() - 6);
    for (int c : e.columns) {
      reference.param(module + ".q.w").data.col(c).setZero();
      reference.param(module + ".q.b").data(0, c) = 0.0;
    }
  }
  for (const CalibItem& item : items_) {
    Tape t1, t2;
    const DecodeResult a = run_full(t1, reference, item);
    const DecodeResult b = run_full(t2, *model_, item);
    EXPECT_LT((a.mask_logits - b.mask_logits).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((a.hybrid_tokens.value() - b.hybrid_tokens.value()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST_F(Injection, TooLittleHeadroomFailsVerification) {
  OutlierSpec spec = cfg_.outliers;
  spec.headroom = 0.3;
  EXPECT_THROW(inject_outliers(*model_, spec, items_, 2), VerificationError);
}

TEST_F(Injection, RejectsBadTargetsAndSpecs) {
  OutlierSpec spec;
  spec.targets = {"dec.0.self.v.out"};
  EXPECT_THROW(inject_outliers(*model_, spec, items_, 2), ConfigError);
  spec.targets = {"dec.7.self.k.out"};
  EXPECT_THROW(inject_outliers(*model_, spec, items_, 2), ConfigError);
  spec = OutlierSpec{};
  spec.fraction = 0.0;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec.fraction = 0.06;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = OutlierSpec{};
  spec.magnitude = 10.0;
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST_F(Injection, QueryTargetsZeroTheKeySide) {
  OutlierSpec spec;
  spec.targets = {"dec.final.q.out"};
  spec.fraction = 0.05;
  const auto entries = inject_outliers(*model_, spec, items_, 2);
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].columns.size(), 1u);  // round(0.05 * 16)
  for (int c : entries[0].columns) EXPECT_EQ(model_->param("dec.final.k.w").data.col(c).norm(), 0.0);
}

TEST(BitPair, ParsesLabels) {
  EXPECT_EQ(BitPair::parse("W6A6"), (BitPair{6, 6}));
  EXPECT_EQ(BitPair::parse("W4A8"), (BitPair{4, 8}));
  EXPECT_EQ((BitPair{8, 4}).label(), "W8A4");
  for (const char* bad : {"W6", "6A6", "W6A6x", "W1A6", "W6A17", ""}) EXPECT_THROW(BitPair::parse(bad), ConfigError) << bad;
}

TEST(ReconModes, RoundTripNames) {
  for (ReconMode m : {ReconMode::None, ReconMode::Local, ReconMode::Par}) {
    EXPECT_EQ(recon_mode_from_string(to_string(m)), m);
  }
  EXPECT_THROW(recon_mode_from_string("qdrop"), ConfigError);
}

TEST(ConfigFile, EmptyDocumentGivesDefaults) {
  const ExperimentConfig cfg = parse_experiment_config("");
  EXPECT_EQ(cfg.bits.size(), 3u);
  EXPECT_EQ(cfg.seeds, std::vector<std::uint64_t>{0});
  EXPECT_EQ(cfg.policy.theta, 0.5);
}

TEST(ConfigFile, ShippedDefaultMatchesBuiltInDefaults) {
  const ExperimentConfig file = load_experiment_config(std::string(SAQ_SOURCE_DIR) + "/configs/default.yaml");
  EXPECT_EQ(dump_experiment_config(file), dump_experiment_config(ExperimentConfig{}));
}

TEST(ConfigFile, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW(parse_experiment_config("modle: {}\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("model:\n  embed_dims: 32\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("model:\n  embed_dim: wide\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("seeds: []\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("bits: [W6A6, W9]\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("methods: [percentile]\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("thetas: [1.5]\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("outliers:\n  fraction: 0.5\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("calibration:\n  scope: local\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("model: [1, 2]\n"), ConfigError);
  EXPECT_THROW(parse_experiment_config("model: {\n"), ConfigError);
  EXPECT_THROW(load_experiment_config("/nonexistent/config.yaml"), ConfigError);
}

TEST(ConfigFile, DumpRoundTrips) {
  ExperimentConfig cfg = tiny_experiment();
  cfg.methods = {Metric::MinMax, Metric::Pcc};
  cfg.recon = {ReconMode::None, ReconMode::Par};
  cfg.recon_cfg.granularity = ReconGranularity::Layer;
  cfg.policy.scope = pcc::MaxScope::PerRow;
  cfg.outliers.targets = {"dec.final.k.out"};
  const std::string text = dump_experiment_config(cfg);
  EXPECT_EQ(dump_experiment_config(parse_experiment_config(text)), text);
}

class Experiments : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { cfg_ = tiny_experiment(); }
  static ExperimentConfig cfg_;
};
ExperimentConfig Experiments::cfg_;

TEST_F(Experiments, ThetaSweepHasOneRecordPerThetaPerSeed) {
  const Report rep = sweep_theta(cfg_);
  ASSERT_EQ(rep.records().size(), cfg_.seeds.size() * (1 + cfg_.thetas.size()));
  for (std::uint64_t seed : cfg_.seeds) {
    for (double t : cfg_.thetas) {
      int n = 0;
      for (const RunRecord& r : rep.records()) n += r.seed == seed && r.method == "pcc" && r.theta == t;
      EXPECT_EQ(n, 1) << seed << " " << t;
    }
  }
  for (const RunRecord& r : rep.records()) {
    EXPECT_GE(r.mask_iou, 0.0);
    EXPECT_LE(r.mask_iou, 1.0);
    EXPECT_FALSE(r.clip_ranges.empty());
  }
  EXPECT_THROW(sweep_theta(cfg_, {}), ConfigError);
}

TEST_F(Experiments, ReportsAreDeterministicApartFromRuntime) {
  ExperimentConfig cfg = cfg_;
  cfg.seeds = {4};
  cfg.recon = {ReconMode::None, ReconMode::Par};
  const Report a = run_experiment(cfg);
  const Report b = run_experiment(cfg);
  ASSERT_EQ(a.records().size(), 4u);
  EXPECT_EQ(render_report(a, ReportFormat::Json, false), render_report(b, ReportFormat::Json, false));
  EXPECT_EQ(render_report(a, ReportFormat::Csv, false), render_report(b, ReportFormat::Csv, false));
  // Ordered by method, then recon mode.
  EXPECT_EQ(a.records()[0].variant, "mse/none");
  EXPECT_EQ(a.records()[1].variant, "mse/par");
  EXPECT_EQ(a.records()[3].variant, "pcc/par");
  EXPECT_EQ(a.records()[1].units.size(), 5u);
  // JSON survives a parse round trip byte for byte.
  const std::string json = render_report(a, ReportFormat::Json);
  EXPECT_EQ(render_report(parse_report(json), ReportFormat::Json), json);
}

TEST_F(Experiments, CsvHasTheDocumentedColumns) {
  ExperimentConfig cfg = cfg_;
  cfg.seeds = {0};
  const Report rep = run_experiment(cfg);
  const std::string csv = render_report(rep, ReportFormat::Csv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kCsvColumns);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  EXPECT_EQ(lines, 1 + rep.records().size());
  const std::string row = csv.substr(csv.find('\n') + 1, csv.find('\n', csv.find('\n') + 1) - csv.find('\n') - 1);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 10);
  EXPECT_NE(row.find(';'), std::string::npos);  // one hybrid MSE per stage
}

TEST_F(Experiments, GranularitySweepCoversTheGrid) {
  ExperimentConfig cfg = cfg_;
  cfg.seeds = {0};
  const Report rep = sweep_granularity(cfg);
  ASSERT_EQ(rep.records().size(), 8u);
  std::set<std::string> variants;
  for (const RunRecord& r : rep.records()) variants.insert(r.variant);
  EXPECT_EQ(variants.size(), 8u);
  EXPECT_TRUE(variants.count("par/stage/pcc"));
  EXPECT_TRUE(variants.count("qdrop/layer/no-pcc"));
}

TEST(ReportFile, RejectsForeignSchemas) {
  EXPECT_THROW(parse_report("{"), FormatError);
  EXPECT_THROW(parse_report(R"({"schema_version": 99, "kind": "x", "settings": {}, "records": []})"), FormatError);
  EXPECT_THROW(parse_report(R"({"schema_version": 1})"), FormatError);
  EXPECT_THROW(report_format_from_string("xml"), ConfigError);
}
