#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_util.hpp"
#include "trfeddis/checkpoint.hpp"
#include "trfeddis/cli.hpp"
#include "trfeddis/config.hpp"
#include "trfeddis/experiment.hpp"
#include "trfeddis/metrics.hpp"

using namespace trfeddis;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("trfeddis_evalcli_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

// a run small enough for unit tests: 4 clients, 48 train / 20 test samples
json tiny_json(const fs::path& out) {
  return json{{"strategy", "TrFedDis"},
              {"rounds", 2},
              {"batch_size", 16},
              {"seeds", {3}},
              {"model", {{"head_width", 16}}},
              {"data", {{"train_per_domain", 48}, {"test_per_domain", 20}}},
              {"output_dir", out.string()}};
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "trfeddis");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

double brute_auroc(const std::vector<double>& clean, const std::vector<double>& noisy) {
  double s = 0.0;
  for (double n : noisy) {
    for (double c : clean) s += n > c ? 1.0 : (n == c ? 0.5 : 0.0);
  }
  return s / (static_cast<double>(clean.size()) * static_cast<double>(noisy.size()));
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// AUROC

TEST(Auroc, Examples) {
  EXPECT_DOUBLE_EQ(metrics::auroc({0.1, 0.2}, {0.8, 0.9}), 1.0);
  EXPECT_DOUBLE_EQ(metrics::auroc({0.8, 0.9}, {0.1, 0.2}), 0.0);
  EXPECT_DOUBLE_EQ(metrics::auroc({0.5, 0.5}, {0.5, 0.5}), 0.5);
  EXPECT_DOUBLE_EQ(metrics::auroc({0.1, 0.4}, {0.2, 0.3}), 0.5);
  EXPECT_THROW(metrics::auroc({}, {0.1}), std::invalid_argument);
  EXPECT_THROW(metrics::auroc({0.1}, {}), std::invalid_argument);
}

TEST(Auroc, MatchesPairwiseCount) {
  auto rng = testutil::test_rng(1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t nc = 1 + rng.below(500), nn = 1 + rng.below(500);
    std::vector<double> clean(nc), noisy(nn);
    // coarse grid so ties are common
    for (auto& v : clean) v = static_cast<double>(rng.below(20)) / 20.0;
    for (auto& v : noisy) v = static_cast<double>(rng.below(20)) / 20.0 + 0.1 * rng.uniform() * (t % 2);
    ASSERT_NEAR(metrics::auroc(clean, noisy), brute_auroc(clean, noisy), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Config

TEST(Config, DefaultsAndRoundTrip) {
  const auto c = config::from_json(json::object());
  EXPECT_EQ(c.strategy.kind, federation::StrategyKind::kTrFedDis);
  EXPECT_EQ(c.train.rounds, 50u);
  EXPECT_EQ(c.train.batch_size, 32u);
  EXPECT_DOUBLE_EQ(c.train.lr, 1e-2);
  EXPECT_EQ(c.data.synthetic.num_domains, 4u);
  const auto again = config::from_json(config::to_json(c));
  EXPECT_EQ(config::to_json(again), config::to_json(c));

  TempDir tmp;
  const auto full = config::from_json(tiny_json(tmp.path()));
  EXPECT_EQ(config::to_json(config::from_json(config::to_json(full))), config::to_json(full));
  EXPECT_EQ(full.seeds, (std::vector<std::uint64_t>{3}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config::from_json(json{{"roundz", 3}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"data", {{"jiter", 1.0}}}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"schedule", {{"lambda_x", 1.0}}}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"strategy", "FedProx"}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"rounds", -1}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"lr", "fast"}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"batch_size", 1}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"seeds", json::array()}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json{{"aggregation_weights", "median"}}), config::ConfigError);
  EXPECT_THROW(config::from_json(json::array()), config::ConfigError);
}

TEST(Config, AblationSection) {
  const auto c = config::from_json(json{{"ablation", {{"variant", "dis+un"}}}});
  EXPECT_EQ(c.strategy, federation::Strategy::ablation("dis+un"));
  const auto flags = config::from_json(json{{"ablation", {{"enable_ce", false}}}});
  EXPECT_FALSE(flags.strategy.enable_ce);
  EXPECT_TRUE(flags.strategy.enable_un);
}

TEST(Config, LoadNamesThePath) {
  TempDir tmp;
  const auto missing = tmp.path() / "nope.json";
  try {
    config::load_config(missing);
    FAIL() << "expected ConfigError";
  } catch (const config::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(missing.string()), std::string::npos);
  }
  spit(tmp.path() / "bad.json", "{ not json");
  EXPECT_THROW(config::load_config(tmp.path() / "bad.json"), config::ConfigError);
}

TEST(Config, ModelConfigJsonRoundTrip) {
  auto m = model::ModelConfig::conv_default({3, 12, 12}, 5);
  m.encoder[0].pooling = model::EncoderBlock::Pooling::kMax;
  EXPECT_EQ(config::model_config_from_json(config::model_config_to_json(m)), m);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

checkpoint::Checkpoint sample_checkpoint(const fs::path& out) {
  checkpoint::Checkpoint c;
  c.experiment = config::from_json(tiny_json(out));
  c.client_id = 2;
  c.seed = 3;
  c.round = 2;
  specfun::RngStream rng(3, specfun::stream_key(specfun::StreamPurpose::kInit, 0));
  c.model = model::init_model(c.experiment.model_config({3, 12, 12}), rng);
  // non-trivial BN statistics
  for (auto& e : c.model.params.entries()) {
    if (!e.trainable) {
      for (auto& v : e.value.data()) v = static_cast<float>(rng.uniform());
    }
  }
  return c;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  TempDir tmp;
  const auto c = sample_checkpoint(tmp.path());
  checkpoint::write(c, tmp.path() / "a.ckpt");
  const auto back = checkpoint::read(tmp.path() / "a.ckpt");
  EXPECT_EQ(back.model.params, c.model.params);
  EXPECT_EQ(back.model.config, c.model.config);
  EXPECT_EQ(back.client_id, 2u);
  EXPECT_EQ(back.seed, 3u);
  EXPECT_EQ(back.round, 2u);
  EXPECT_EQ(config::to_json(back.experiment), config::to_json(c.experiment));
  checkpoint::write(back, tmp.path() / "b.ckpt");
  EXPECT_EQ(slurp(tmp.path() / "a.ckpt"), slurp(tmp.path() / "b.ckpt"));
}

TEST(Checkpoint, ManifestListsEveryParameterOnceWithTag) {
  TempDir tmp;
  const auto c = sample_checkpoint(tmp.path());
  checkpoint::write(c, tmp.path() / "a.ckpt");
  const auto text = slurp(tmp.path() / "a.ckpt");
  std::vector<std::string> names;
  for (const auto& line : lines_of(text.substr(0, text.find("\npayload ")))) {
    if (line.rfind("param ", 0) != 0) continue;
    std::istringstream ls(line);
    std::string kw, name, tag;
    ls >> kw >> name >> tag;
    names.push_back(name);
    EXPECT_EQ(model::to_string(c.model.params.at(name).tag), tag);
  }
  EXPECT_EQ(names, c.model.params.names());
}

TEST(Checkpoint, Errors) {
  TempDir tmp;
  const auto c = sample_checkpoint(tmp.path());
  const auto good = tmp.path() / "good.ckpt";
  checkpoint::write(c, good);
  const auto bytes = slurp(good);

  spit(tmp.path() / "v.ckpt", "trfeddis-checkpoint 99" + bytes.substr(bytes.find('\n')));
  EXPECT_THROW(checkpoint::read(tmp.path() / "v.ckpt"), checkpoint::VersionMismatch);

  spit(tmp.path() / "t.ckpt", bytes.substr(0, bytes.size() - 10));
  EXPECT_THROW(checkpoint::read(tmp.path() / "t.ckpt"), checkpoint::Truncated);

  spit(tmp.path() / "h.ckpt", bytes.substr(0, 40));
  EXPECT_THROW(checkpoint::read(tmp.path() / "h.ckpt"), checkpoint::CheckpointError);

  // a tag that disagrees with the model layout
  auto bad = bytes;
  const auto pos = bad.find("head_local.0.weight LocalHead");
  ASSERT_NE(pos, std::string::npos);
  bad.replace(pos, std::string("head_local.0.weight LocalHead").size(), "head_local.0.weight LocalBN  ");
  spit(tmp.path() / "i.ckpt", bad);
  EXPECT_THROW(checkpoint::read(tmp.path() / "i.ckpt"), checkpoint::CheckpointError);

  spit(tmp.path() / "g.ckpt", "garbage\n");
  EXPECT_THROW(checkpoint::read(tmp.path() / "g.ckpt"), checkpoint::CheckpointError);
  EXPECT_THROW(checkpoint::read(tmp.path() / "missing.ckpt"), checkpoint::CheckpointError);
}

// ---------------------------------------------------------------------------
// Experiment runner and CSV

TEST(Metrics, CsvSchema) {
  EXPECT_EQ(experiment::metrics_header(),
            "seed,round,client,split,accuracy,accuracy_global,accuracy_local,mean_u,l_un_global,l_un_local,"
            "l_un_fused,l_ce_global,l_ce_local,l_ce_fused,l_dis,lambda_u,lambda_d,l_total");
  experiment::MetricsRow r;
  r.seed = 1;
  r.round = 2;
  r.client = 3;
  r.split = "test";
  r.accuracy = 0.5;
  r.loss.l_total = std::nan("");
  const auto line = experiment::format_row(r);
  EXPECT_EQ(line.rfind("1,2,3,test,0.5,", 0), 0u);
  EXPECT_EQ(line.back(), ',');  // NaN written as an empty field
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 17);
}

TEST(Metrics, Summaries) {
  const auto s = experiment::summarize("acc", {1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_DOUBLE_EQ(s.stddev, 1.0);
  EXPECT_EQ(s.n, 3u);
  EXPECT_DOUBLE_EQ(experiment::summarize("acc", {0.7}).stddev, 0.0);
}

TEST(Experiment, ZeroRoundsKeepsInitialisation) {
  TempDir tmp;
  auto j = tiny_json(tmp.path());
  j["rounds"] = 0;
  const auto cfg = config::from_json(j);
  const auto res = experiment::run_experiment(cfg);
  ASSERT_EQ(res.runs.size(), 1u);
  EXPECT_TRUE(res.runs[0].reports.empty());
  specfun::RngStream rng(3, specfun::stream_key(specfun::StreamPurpose::kInit, 0));
  const auto init = model::init_model(
      federation::model_config_for(cfg.strategy, cfg.model_config({3, 12, 12})), rng);
  for (const auto& m : res.runs[0].final_models) EXPECT_EQ(m.params, init.params);
  const auto ck = checkpoint::read(experiment::checkpoint_path(tmp.path(), 3, 1));
  EXPECT_EQ(ck.model.params, init.params);
  EXPECT_EQ(lines_of(slurp(tmp.path() / "metrics.csv")).size(), 1u);
}

TEST(Experiment, SameSeedGivesByteIdenticalOutputs) {
  TempDir tmp;
  const auto cfg = config::from_json(tiny_json(tmp.path()));
  auto snapshot = [&] {
    std::vector<std::string> files{slurp(tmp.path() / "metrics.csv"), slurp(tmp.path() / "summary.csv")};
    for (std::size_t c = 0; c < 4; ++c) files.push_back(slurp(experiment::checkpoint_path(tmp.path(), 3, c)));
    return files;
  };
  experiment::run_experiment(cfg);
  const auto first = snapshot();
  experiment::run_experiment(cfg);
  const auto second = snapshot();
  for (std::size_t i = 0; i < first.size(); ++i) {
    EXPECT_FALSE(first[i].empty()) << i;
    EXPECT_EQ(first[i], second[i]) << i;
  }
  const auto& ma = first[0];
  const auto rows = lines_of(ma);
  EXPECT_EQ(rows.size(), 1u + 2 * 4 * 2);  // header + rounds x clients x {train,test}
  EXPECT_EQ(rows[0], experiment::metrics_header());
  EXPECT_EQ(ma.find('\r'), std::string::npos);
}

// ---------------------------------------------------------------------------
// CLI

TEST(Cli, UsageAndConfigErrors) {
  EXPECT_EQ(run_cli({}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"bogus"}).code, cli::kExitConfig);
  EXPECT_EQ(run_cli({"train", "--frobnicate"}).code, cli::kExitConfig);
  const auto missing = run_cli({"train", "--config", "/nonexistent/cfg.json"});
  EXPECT_EQ(missing.code, cli::kExitConfig);
  EXPECT_NE(missing.err.find("/nonexistent/cfg.json"), std::string::npos);
  EXPECT_EQ(run_cli({"--help"}).code, cli::kExitOk);
}

TEST(Cli, RuntimeErrorExitsTwo) {
  TempDir tmp;
  spit(tmp.path() / "junk.ckpt", "trfeddis-checkpoint 1\n");
  EXPECT_EQ(run_cli({"ood", "--checkpoint", (tmp.path() / "junk.ckpt").string()}).code, cli::kExitRuntime);
}

TEST(Cli, TrainEvalOodDump) {
  TempDir tmp;
  const auto cfg_path = tmp.path() / "cfg.json";
  spit(cfg_path, tiny_json(tmp.path() / "out").dump());
  const auto train = run_cli({"train", "--config", cfg_path.string()});
  ASSERT_EQ(train.code, cli::kExitOk) << train.err;
  const auto ckpt = experiment::checkpoint_path(tmp.path() / "out", 3, 0);
  ASSERT_TRUE(fs::exists(ckpt));

  const auto eval = run_cli({"eval", "--checkpoint", ckpt.string(), "--config", cfg_path.string()});
  ASSERT_EQ(eval.code, cli::kExitOk) << eval.err;
  EXPECT_NE(eval.out.find("accuracy "), std::string::npos);

  const auto ood_csv = tmp.path() / "ood.csv";
  const auto ood = run_cli({"ood", "--checkpoint", ckpt.string(), "--sigma", "1.5", "--out", ood_csv.string()});
  ASSERT_EQ(ood.code, cli::kExitOk) << ood.err;
  EXPECT_NE(ood.out.find("AUROC "), std::string::npos);
  const auto ood_lines = lines_of(slurp(ood_csv));
  EXPECT_EQ(ood_lines[0], "source,u");
  EXPECT_EQ(ood_lines.size(), 1u + 2 * 20);
  EXPECT_EQ(ood_lines[1].rfind("clean,", 0), 0u);
  EXPECT_EQ(ood_lines.back().rfind("noisy,", 0), 0u);
  EXPECT_EQ(run_cli({"ood", "--checkpoint", ckpt.string(), "--sigma", "-1"}).code, cli::kExitConfig);

  const auto emb = tmp.path() / "emb.csv";
  const auto dump = run_cli({"dump-embeddings", "--checkpoint", ckpt.string(), "--out", emb.string()});
  ASSERT_EQ(dump.code, cli::kExitOk) << dump.err;
  const auto emb_lines = lines_of(slurp(emb));
  ASSERT_EQ(emb_lines.size(), 21u);
  const auto header = emb_lines[0];
  EXPECT_EQ(header.rfind("client,label,f0,", 0), 0u);
  EXPECT_NE(header.find(",f63,g0,"), std::string::npos);
  EXPECT_NE(header.find(",g4,l0,"), std::string::npos);
  EXPECT_EQ(header.substr(header.size() - 3), ",l4");
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(emb_lines[1].begin(), emb_lines[1].end(), ','));
  EXPECT_EQ(emb_lines[1].rfind("0,", 0), 0u);
  EXPECT_EQ(run_cli({"dump-embeddings", "--checkpoint", ckpt.string(), "--split", "val"}).code, cli::kExitConfig);
}

TEST(Cli, AblateWritesPerVariantOutputsAndSummary) {
  TempDir tmp;
  auto j = tiny_json(tmp.path() / "out");
  j["rounds"] = 1;
  spit(tmp.path() / "cfg.json", j.dump());
  const auto r = run_cli({"ablate", "--config", (tmp.path() / "cfg.json").string(), "--variants", "backbone,dis"});
  ASSERT_EQ(r.code, cli::kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(tmp.path() / "out" / "backbone" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(tmp.path() / "out" / "dis" / "metrics.csv"));
  const auto summary = lines_of(slurp(tmp.path() / "out" / "ablation_summary.csv"));
  ASSERT_EQ(summary.size(), 3u);
  EXPECT_EQ(summary[0], "variant,accuracy_mean,accuracy_std,mean_u_mean,seeds");
  EXPECT_EQ(summary[1].rfind("backbone,", 0), 0u);
  EXPECT_EQ(run_cli({"ablate", "--config", (tmp.path() / "cfg.json").string(), "--variants", "nope"}).code,
            cli::kExitConfig);
}
