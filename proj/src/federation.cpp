#include "trfeddis/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "trfeddis/evidential.hpp"

namespace trfeddis::federation {

using model::PartitionTag;

model::TagSet Strategy::aggregated_tags() const {
  switch (kind) {
    case StrategyKind::kSingleSet: return {};
    case StrategyKind::kFedAvg: return model::all_tags();
    case StrategyKind::kFedBN:
      return {PartitionTag::kSharedEncoder, PartitionTag::kSharedGlobalHead, PartitionTag::kLocalHead};
    case StrategyKind::kTrFedDis: return {PartitionTag::kSharedEncoder, PartitionTag::kSharedGlobalHead};
  }
  return {};
}

metrics::FusionMode Strategy::fusion() const {
  return dual_head() && !enable_un ? metrics::FusionMode::kLogitSum : metrics::FusionMode::kEvidential;
}

std::string Strategy::name() const {
  switch (kind) {
    case StrategyKind::kSingleSet: return "SingleSet";
    case StrategyKind::kFedAvg: return "FedAvg";
    case StrategyKind::kFedBN: return "FedBN";
    case StrategyKind::kTrFedDis: break;
  }
  if (enable_dis && enable_un && enable_ce) return "TrFedDis";
  std::string flags;
  if (enable_dis) flags += "+dis";
  if (enable_un) flags += "+un";
  if (enable_ce) flags += "+ce";
  return "TrFedDis[" + (flags.empty() ? std::string("none") : flags.substr(1)) + "]";
}

Strategy Strategy::parse(std::string_view name) {
  std::string lower(name);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "singleset") return {StrategyKind::kSingleSet};
  if (lower == "fedavg") return {StrategyKind::kFedAvg};
  if (lower == "fedbn") return {StrategyKind::kFedBN};
  if (lower == "trfeddis") return {StrategyKind::kTrFedDis};
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

Strategy Strategy::ablation(std::string_view variant) {
  if (variant == "backbone") return {StrategyKind::kFedBN};
  if (variant == "dis") return {StrategyKind::kTrFedDis, true, false, false};
  if (variant == "dis+un") return {StrategyKind::kTrFedDis, true, true, false};
  if (variant == "full") return {StrategyKind::kTrFedDis, true, true, true};
  throw std::invalid_argument("unknown ablation variant '" + std::string(variant) +
                              "' (expected backbone, dis, dis+un or full)");
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw FederationError("train config: lr must be finite and >= 0");
  if (batch_size < 2) throw FederationError("train config: batch size must be >= 2 for batch norm");
  if (!(lambda_u >= 0.0) || !(lambda_d >= 0.0)) throw FederationError("train config: lambda targets must be >= 0");
  if (!(ramp_fraction >= 0.0 && ramp_fraction <= 1.0)) {
    throw FederationError("train config: ramp fraction must lie in [0,1]");
  }
  if (!(weight_un_global >= 0.0) || !(weight_un_local >= 0.0) || !(weight_un_fused >= 0.0)) {
    throw FederationError("train config: uncertainty-loss weights must be >= 0");
  }
  if (workers == 0) throw FederationError("train config: workers must be >= 1");
}

model::ModelConfig model_config_for(const Strategy& strategy, model::ModelConfig base) {
  base.local_head = strategy.dual_head();
  return base;
}

losses::Objective objective_for(const Strategy& strategy, const TrainConfig& cfg, std::size_t total_steps) {
  losses::Objective obj;
  obj.dual_head = strategy.dual_head();
  obj.enable_dis = strategy.enable_dis;
  obj.enable_un = strategy.enable_un;
  obj.enable_ce = strategy.enable_ce;
  obj.weight_un_global = cfg.weight_un_global;
  obj.weight_un_local = cfg.weight_un_local;
  obj.weight_un_fused = cfg.weight_un_fused;
  const auto ramp = static_cast<std::size_t>(std::llround(cfg.ramp_fraction * static_cast<double>(total_steps)));
  obj.lambda_u = {cfg.lambda_u, ramp};
  obj.lambda_d = {cfg.lambda_d, ramp};
  return obj;
}

std::vector<ClientState> make_clients(const std::vector<data::DomainData>& domains,
                                      const model::ModelConfig& config, const Strategy& strategy,
                                      const TrainConfig& train, std::uint64_t seed) {
  train.validate();
  const auto mcfg = model_config_for(strategy, config);
  specfun::RngStream init_rng(seed, specfun::stream_key(specfun::StreamPurpose::kInit, 0));
  const model::Model init = model::init_model(mcfg, init_rng);
  std::vector<ClientState> clients;
  clients.reserve(domains.size());
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].train.sample_shape() != mcfg.input_shape) {
      throw FederationError("client " + std::to_string(i) + ": sample shape " +
                            nd::to_string(domains[i].train.sample_shape()) + " does not match model input " +
                            nd::to_string(mcfg.input_shape));
    }
    ClientState c;
    c.client_id = i;
    c.model = init;
    c.shuffle_rng = specfun::RngStream(seed, specfun::stream_key(specfun::StreamPurpose::kShuffle, i));
    c.data = &domains[i];
    c.total_steps = (domains[i].train.size() / train.batch_size) * train.local_epochs * train.rounds;
    clients.push_back(std::move(c));
  }
  return clients;
}

ServerState make_server(const Strategy& strategy, const std::vector<ClientState>& clients,
                        bool uniform_weights) {
  if (clients.empty()) throw FederationError("server: no clients");
  ServerState s;
  s.strategy = strategy;
  s.shared = model::partition_view(clients.front().model, strategy.aggregated_tags());
  double total = 0.0;
  for (const auto& c : clients) {
    const double w = uniform_weights ? 1.0 : static_cast<double>(c.data->train.size());
    s.weights.push_back(w);
    total += w;
  }
  if (!(total > 0.0)) throw FederationError("server: aggregation weights sum to zero");
  for (auto& w : s.weights) w /= total;
  return s;
}

namespace {

std::vector<std::size_t> fused_labels(const nd::Tensor& raw_g, const nd::Tensor* raw_l, metrics::FusionMode mode) {
  const auto g = raw_g.cast<double>();
  evidential::Opinion o;
  if (raw_l == nullptr) {
    o = evidential::opinion_from_raw(g);
  } else if (mode == metrics::FusionMode::kLogitSum) {
    auto sum = g;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += (*raw_l)[i];
    o = evidential::opinion_from_raw(sum);
  } else {
    o = evidential::ds_fuse(evidential::opinion_from_raw(g), evidential::opinion_from_raw(raw_l->cast<double>())).first;
  }
  return evidential::predict(o).label;
}

void accumulate(losses::LossBreakdown& acc, const losses::LossBreakdown& b) {
  acc.l_un_global += b.l_un_global;
  acc.l_un_local += b.l_un_local;
  acc.l_un_fused += b.l_un_fused;
  acc.l_ce_global += b.l_ce_global;
  acc.l_ce_local += b.l_ce_local;
  acc.l_ce_fused += b.l_ce_fused;
  acc.l_dis += b.l_dis;
  acc.lambda_u += b.lambda_u;
  acc.lambda_d += b.lambda_d;
  acc.l_total += b.l_total;
}

void divide(losses::LossBreakdown& acc, double n) {
  for (double* f : {&acc.l_un_global, &acc.l_un_local, &acc.l_un_fused, &acc.l_ce_global, &acc.l_ce_local,
                    &acc.l_ce_fused, &acc.l_dis, &acc.lambda_u, &acc.lambda_d, &acc.l_total}) {
    *f /= n;
  }
}

void check_shared(const model::ParamSet& shared, const model::Model& m, const Strategy& strategy) {
  const auto expected = model::partition_view(m, strategy.aggregated_tags());
  if (shared.size() != expected.size()) {
    throw FederationError("local_train: shared set has " + std::to_string(shared.size()) + " entries, strategy " +
                          strategy.name() + " expects " + std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < shared.size(); ++i) {
    const auto& a = shared.entries()[i];
    const auto& b = expected.entries()[i];
    if (a.name != b.name || a.tag != b.tag || a.value.shape() != b.value.shape()) {
      throw FederationError("local_train: shared entry '" + a.name + "' does not match the strategy's tags");
    }
  }
}

}  // namespace

ClientUpdate local_train(ClientState& client, const model::ParamSet* shared, const Strategy& strategy,
                         const TrainConfig& cfg) {
  if (client.data == nullptr) throw FederationError("local_train: client has no data");
  if (shared != nullptr) {
    check_shared(*shared, client.model, strategy);
    client.model.params.assign_from(*shared);
  }
  const auto objective = objective_for(strategy, cfg, client.total_steps);
  const auto& train = client.data->train;
  const std::size_t k = client.model.config.num_classes;
  ClientUpdate up;
  up.client_id = client.client_id;
  up.num_samples = train.size();
  std::size_t batches_seen = 0, seen = 0, hits = 0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const auto order = data::batch_indices(train.size(), cfg.batch_size, &client.shuffle_rng, true,
                                           data::BatchMode::kTrain);
    for (const auto& idx : order) {
      const auto batch = data::gather(train, idx);
      const auto onehot = losses::one_hot<float>(batch.labels, k);
      nd::Graph<float> g;
      model::Forward<float> fwd(g, client.model, nd::Mode::kTrain);
      auto out = fwd.run(g.constant(batch.inputs));
      auto loss = losses::total_loss(out.raw_global, out.raw_local, onehot, client.step, objective);
      if (!std::isfinite(loss.breakdown.l_total)) {
        throw FederationError("client " + std::to_string(client.client_id) + ": non-finite loss at step " +
                              std::to_string(client.step));
      }
      const auto pred = fused_labels(out.raw_global.value(), out.raw_local.valid() ? &out.raw_local.value() : nullptr,
                                     strategy.fusion());
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == batch.labels[i];
      seen += pred.size();
      accumulate(up.train_loss, loss.breakdown);
      ++batches_seen;
      if (cfg.lr != 0.0) {
        g.backward(loss.total);
        fwd.apply_sgd(cfg.lr);
      }
      ++client.step;
    }
  }
  if (batches_seen) divide(up.train_loss, static_cast<double>(batches_seen));
  up.train_accuracy = seen ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
  up.shared = model::partition_view(client.model, strategy.aggregated_tags());
  return up;
}

model::ParamSet aggregate(std::vector<ClientUpdate> updates, const std::vector<double>& weights) {
  if (updates.empty()) throw FederationError("aggregate: no updates");
  if (weights.size() != updates.size()) {
    throw FederationError("aggregate: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(updates.size()) + " updates");
  }
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return updates[a].client_id < updates[b].client_id; });
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::abs(wsum - 1.0) > 1e-9) throw FederationError("aggregate: weights sum to " + std::to_string(wsum));

  const auto& ref = updates[order.front()].shared;
  for (const auto& u : updates) {
    if (u.shared.size() != ref.size()) throw FederationError("aggregate: updates differ in parameter count");
    for (std::size_t p = 0; p < ref.size(); ++p) {
      const auto& a = u.shared.entries()[p];
      const auto& b = ref.entries()[p];
      if (a.name != b.name || a.tag != b.tag || a.value.shape() != b.value.shape()) {
        throw FederationError("aggregate: update from client " + std::to_string(u.client_id) +
                              " disagrees on '" + a.name + "'");
      }
    }
  }

  model::ParamSet out = ref;
  std::vector<double> acc;
  for (std::size_t p = 0; p < ref.size(); ++p) {
    acc.assign(ref.entries()[p].value.size(), 0.0);
    for (std::size_t j : order) {
      const auto src = updates[j].shared.entries()[p].value.data();
      const double w = weights[j];
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * static_cast<double>(src[i]);
    }
    auto dst = out.entries()[p].value.data();
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
  }
  return out;
}

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients, const TrainConfig& cfg) {
  const bool federated = server.strategy.kind != StrategyKind::kSingleSet;
  if (server.weights.size() != clients.size()) throw FederationError("run_round: weights do not match clients");
  const model::ParamSet* broadcast = federated ? &server.shared : nullptr;

  std::vector<ClientUpdate> updates(clients.size());
  std::vector<std::exception_ptr> errors(clients.size());
  auto work = [&](std::size_t i) {
    try {
      updates[i] = local_train(clients[i], broadcast, server.strategy, cfg);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(cfg.workers, clients.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < clients.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < clients.size(); i = next++) work(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  if (federated) {
    server.shared = aggregate(updates, server.weights);
    for (auto& c : clients) c.model.params.assign_from(server.shared);
  }
  ++server.round;

  RoundReport report;
  report.round = server.round;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    ClientRecord rec;
    rec.client_id = clients[i].client_id;
    rec.train_loss = updates[i].train_loss;
    rec.train_accuracy = updates[i].train_accuracy;
    rec.test = metrics::evaluate(clients[i].model, clients[i].data->test, server.strategy.fusion());
    report.clients.push_back(std::move(rec));
  }
  return report;
}

std::vector<RoundReport> run_training(ServerState& server, std::vector<ClientState>& clients,
                                      const TrainConfig& cfg, const RoundCallback& on_round) {
  std::vector<RoundReport> reports;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    reports.push_back(run_round(server, clients, cfg));
    if (on_round) on_round(reports.back());
  }
  return reports;
}

}  // namespace trfeddis::federation
