#include "trfeddis/experiment.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

#include <fmt/format.h>

#include "trfeddis/checkpoint.hpp"

namespace trfeddis::experiment {

std::string metrics_header() {
  return "seed,round,client,split,accuracy,accuracy_global,accuracy_local,mean_u,"
         "l_un_global,l_un_local,l_un_fused,l_ce_global,l_ce_local,l_ce_fused,l_dis,lambda_u,lambda_d,l_total";
}

namespace {

// Metrics that do not apply to a split are stored as NaN and written empty.
std::string num(double v) { return std::isnan(v) ? std::string() : fmt::format("{:.10g}", v); }

}  // namespace

std::string format_row(const MetricsRow& r) {
  const auto& l = r.loss;
  std::string line = fmt::format("{},{},{},{}", r.seed, r.round, r.client, r.split);
  for (double v : {r.accuracy, r.accuracy_global, r.accuracy_local, r.mean_u, l.l_un_global, l.l_un_local,
                   l.l_un_fused, l.l_ce_global, l.l_ce_local, l.l_ce_fused, l.l_dis, l.lambda_u, l.lambda_d,
                   l.l_total}) {
    line += ',';
    line += num(v);
  }
  return line;
}

std::vector<MetricsRow> rows_for(std::uint64_t seed, const federation::RoundReport& report) {
  std::vector<MetricsRow> rows;
  for (const auto& c : report.clients) {
    MetricsRow train{seed, report.round, c.client_id, "train", c.train_accuracy, 0.0, 0.0, 0.0, c.train_loss};
    train.accuracy_global = train.accuracy_local = std::nan("");
    train.mean_u = std::nan("");
    rows.push_back(train);
    MetricsRow test{seed, report.round, c.client_id, "test", c.test.accuracy, c.test.accuracy_global,
                    c.test.accuracy_local, c.test.mean_u, {}};
    for (double* f : {&test.loss.l_un_global, &test.loss.l_un_local, &test.loss.l_un_fused, &test.loss.l_ce_global,
                      &test.loss.l_ce_local, &test.loss.l_ce_fused, &test.loss.l_dis, &test.loss.lambda_u,
                      &test.loss.lambda_d, &test.loss.l_total}) {
      *f = std::nan("");
    }
    rows.push_back(test);
  }
  return rows;
}

SummaryStat summarize(std::string metric, const std::vector<double>& values) {
  SummaryStat s{std::move(metric), 0.0, 0.0, values.size()};
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t seed, std::size_t client) {
  return dir / "checkpoints" / fmt::format("seed{}_client{}.ckpt", seed, client);
}

ExperimentResult run_experiment(const config::ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  return run_experiment(cfg, std::make_shared<const std::vector<data::DomainData>>(config::build_data(cfg.data)),
                        options);
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

ExperimentResult run_experiment(const config::ExperimentConfig& cfg,
                                std::shared_ptr<const std::vector<data::DomainData>> data,
                                const RunOptions& options) {
  cfg.validate();
  if (!data || data->empty()) throw std::runtime_error("experiment: no client data");
  const auto mcfg = cfg.model_config(data->front().train.sample_shape());

  ExperimentResult result;
  result.data = data;
  std::string csv = metrics_header() + '\n';
  std::vector<double> acc, acc_g, acc_l, mean_u;

  for (const auto seed : cfg.seeds) {
    auto clients = federation::make_clients(*data, mcfg, cfg.strategy, cfg.train, seed);
    auto server = federation::make_server(cfg.strategy, clients, cfg.train.uniform_weights);
    SeedRun run;
    run.seed = seed;
    run.reports = federation::run_training(server, clients, cfg.train, [&](const federation::RoundReport& r) {
      for (const auto& row : rows_for(seed, r)) csv += format_row(row) + '\n';
      if (options.progress) {
        double a = 0.0;
        for (const auto& c : r.clients) a += c.test.accuracy;
        *options.progress << fmt::format("seed {} round {}/{} mean test accuracy {:.4f}\n", seed, r.round,
                                         cfg.train.rounds, a / static_cast<double>(r.clients.size()));
      }
    });

    double a = 0.0, ag = 0.0, al = 0.0, u = 0.0;
    for (const auto& c : clients) {
      const auto ev = metrics::evaluate(c.model, c.data->test, cfg.strategy.fusion());
      a += ev.accuracy;
      ag += ev.accuracy_global;
      al += ev.accuracy_local;
      u += ev.mean_u;
      run.final_models.push_back(c.model);
    }
    const double n = static_cast<double>(clients.size());
    run.final_accuracy = a / n;
    acc.push_back(a / n);
    acc_g.push_back(ag / n);
    acc_l.push_back(al / n);
    mean_u.push_back(u / n);

    if (options.write_outputs) {
      std::filesystem::create_directories(cfg.output_dir / "checkpoints");
      for (const auto& c : clients) {
        checkpoint::write({c.model, cfg, c.client_id, seed, server.round},
                          checkpoint_path(cfg.output_dir, seed, c.client_id));
      }
    }
    result.runs.push_back(std::move(run));
  }

  result.summary = {summarize("accuracy", acc), summarize("accuracy_global", acc_g),
                    summarize("accuracy_local", acc_l), summarize("mean_u", mean_u)};
  if (options.write_outputs) {
    std::filesystem::create_directories(cfg.output_dir);
    write_text(cfg.output_dir / "metrics.csv", csv);
    std::string summary = "metric,mean,std,n\n";
    for (const auto& s : result.summary) summary += fmt::format("{},{:.10g},{:.10g},{}\n", s.metric, s.mean, s.stddev, s.n);
    write_text(cfg.output_dir / "summary.csv", summary);
  }
  return result;
}

}  // namespace trfeddis::experiment
