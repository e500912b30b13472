#include "trfeddis/cli.hpp"

#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "trfeddis/checkpoint.hpp"
#include "trfeddis/config.hpp"
#include "trfeddis/experiment.hpp"
#include "trfeddis/metrics.hpp"

namespace trfeddis::cli {

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const data::DomainData& client_data(const std::vector<data::DomainData>& all, std::size_t client) {
  if (client >= all.size()) {
    throw config::ConfigError(fmt::format("checkpoint client {} is outside the configured {} clients", client,
                                          all.size()));
  }
  return all[client];
}

void print_eval(std::ostream& out, const metrics::EvalResult& ev) {
  out << fmt::format("accuracy {:.6f}\naccuracy_global {:.6f}\naccuracy_local {:.6f}\nmean_u {:.6f}\n", ev.accuracy,
                     ev.accuracy_global, ev.accuracy_local, ev.mean_u);
}

int cmd_train(const std::string& config_path, const std::vector<std::uint64_t>& seeds, const std::string& out_dir,
              std::size_t workers, std::ostream& out) {
  auto cfg = config::load_config(config_path);
  if (!seeds.empty()) cfg.seeds = seeds;
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (workers > 0) cfg.train.workers = workers;
  cfg.validate();
  experiment::RunOptions opts;
  opts.progress = &out;
  const auto res = experiment::run_experiment(cfg, opts);
  for (const auto& s : res.summary) out << fmt::format("{} mean {:.6f} std {:.6f} over {} seeds\n", s.metric, s.mean, s.stddev, s.n);
  out << "wrote " << (cfg.output_dir / "metrics.csv").string() << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path, std::ostream& out) {
  const auto cfg = config::load_config(config_path);
  const auto ck = checkpoint::read(ckpt_path);
  const auto all = config::build_data(cfg.data);
  const auto& d = client_data(all, ck.client_id);
  print_eval(out, metrics::evaluate(ck.model, d.test, ck.experiment.strategy.fusion()));
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& variants, const std::string& out_dir,
               std::ostream& out) {
  auto base = config::load_config(config_path);
  if (!out_dir.empty()) base.output_dir = out_dir;
  const auto names = split_list(variants);
  if (names.empty()) throw config::ConfigError("ablate: --variants is empty");
  std::vector<federation::Strategy> strategies;
  for (const auto& v : names) {
    try {
      strategies.push_back(federation::Strategy::ablation(v));
    } catch (const std::invalid_argument& e) {
      throw config::ConfigError(e.what());
    }
  }
  const auto data = std::make_shared<const std::vector<data::DomainData>>(config::build_data(base.data));
  std::string table = "variant,accuracy_mean,accuracy_std,mean_u_mean,seeds\n";
  out << fmt::format("{:<10} {:>10} {:>10} {:>10}\n", "variant", "accuracy", "std", "mean_u");
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto cfg = base;
    cfg.strategy = strategies[i];
    cfg.output_dir = base.output_dir / names[i];
    const auto res = experiment::run_experiment(cfg, data);
    const auto& acc = res.summary[0];
    const auto& u = res.summary[3];
    table += fmt::format("{},{:.10g},{:.10g},{:.10g},{}\n", names[i], acc.mean, acc.stddev, u.mean, acc.n);
    out << fmt::format("{:<10} {:>10.4f} {:>10.4f} {:>10.4f}\n", names[i], acc.mean, acc.stddev, u.mean);
  }
  std::filesystem::create_directories(base.output_dir);
  const auto path = base.output_dir / "ablation_summary.csv";
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!(os << table)) throw std::runtime_error("cannot write " + path.string());
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

int cmd_ood(const std::string& ckpt_path, double sigma, const std::string& out_path, std::ostream& out) {
  if (!(sigma >= 0.0)) throw config::ConfigError("ood: --sigma must be >= 0");
  const auto ck = checkpoint::read(ckpt_path);
  const auto all = config::build_data(ck.experiment.data);
  const auto& d = client_data(all, ck.client_id);
  specfun::RngStream rng(ck.seed, specfun::stream_key(specfun::StreamPurpose::kCorruption, ck.client_id));
  const auto noisy = data::corrupt_gaussian(d.test.inputs, sigma, rng);
  const auto fusion = ck.experiment.strategy.fusion();
  const auto clean_u = metrics::fused_uncertainty(ck.model, d.test.inputs, fusion);
  const auto noisy_u = metrics::fused_uncertainty(ck.model, noisy, fusion);
  std::filesystem::path path = out_path;
  if (path.empty()) {
    path = std::filesystem::path(ckpt_path);
    path.replace_extension(".ood.csv");
  }
  std::string csv = "source,u\n";
  for (double u : clean_u) csv += fmt::format("clean,{:.10g}\n", u);
  for (double u : noisy_u) csv += fmt::format("noisy,{:.10g}\n", u);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!(os << csv)) throw std::runtime_error("cannot write " + path.string());
  out << "wrote " << path.string() << '\n';
  out << fmt::format("AUROC {:.6f}\n", metrics::auroc(clean_u, noisy_u));
  return kExitOk;
}

int cmd_dump(const std::string& ckpt_path, const std::string& split, const std::string& out_path, std::ostream& out) {
  if (split != "train" && split != "test") throw config::ConfigError("dump-embeddings: --split must be train or test");
  const auto ck = checkpoint::read(ckpt_path);
  const auto all = config::build_data(ck.experiment.data);
  const auto& d = client_data(all, ck.client_id);
  std::filesystem::path path = out_path;
  if (path.empty()) {
    path = std::filesystem::path(ckpt_path);
    path.replace_extension(".embeddings.csv");
  }
  metrics::dump_embeddings(ck.model, split == "train" ? d.train : d.test, ck.client_id, path);
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated training with disentangled heads and evidential fusion", "trfeddis"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, out_dir, variants = "backbone,dis,dis+un,full", out_file, split = "test";
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 0;
  double sigma = 1.5;

  auto* train = app.add_subcommand("train", "Train every configured seed and write metrics and checkpoints");
  train->add_option("--config", config_path, "JSON experiment config")->required();
  train->add_option("--seed", seeds, "Seed(s) replacing the config's list");
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--workers", workers, "Parallel client workers");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its client's test split");
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--config", config_path, "JSON experiment config")->required();

  auto* ablate = app.add_subcommand("ablate", "Train each ablation variant and tabulate accuracy");
  ablate->add_option("--config", config_path, "JSON experiment config")->required();
  ablate->add_option("--variants", variants, "Comma-separated subset of backbone,dis,dis+un,full");
  ablate->add_option("--out", out_dir, "Output directory");

  auto* ood = app.add_subcommand("ood", "Uncertainty on clean versus Gaussian-corrupted test inputs");
  ood->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  ood->add_option("--sigma", sigma, "Corruption standard deviation");
  ood->add_option("--out", out_file, "CSV of clean and noisy uncertainties");

  auto* dump = app.add_subcommand("dump-embeddings", "Write encoder and head outputs per sample as CSV");
  dump->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  dump->add_option("--split", split, "train or test");
  dump->add_option("--out", out_file, "CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(config_path, seeds, out_dir, workers, out);
    if (*eval) return cmd_eval(ckpt_path, config_path, out);
    if (*ablate) return cmd_ablate(config_path, variants, out_dir, out);
    if (*ood) return cmd_ood(ckpt_path, sigma, out_file, out);
    if (*dump) return cmd_dump(ckpt_path, split, out_file, out);
  } catch (const config::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace trfeddis::cli
