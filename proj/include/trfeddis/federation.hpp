#pragma once

// Round-based federated training: broadcast of the shared parameters, local
// SGD on every client, weighted averaging of the uploaded subset, evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "trfeddis/data.hpp"
#include "trfeddis/losses.hpp"
#include "trfeddis/metrics.hpp"
#include "trfeddis/model.hpp"
#include "trfeddis/specfun.hpp"

namespace trfeddis::federation {

class FederationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StrategyKind { kSingleSet, kFedAvg, kFedBN, kTrFedDis };

struct Strategy {
  StrategyKind kind = StrategyKind::kTrFedDis;
  // Only consulted for kTrFedDis.
  bool enable_dis = true;
  bool enable_un = true;
  bool enable_ce = true;

  /// Tags uploaded and averaged each round.
  model::TagSet aggregated_tags() const;
  /// Two heads (global + local) versus one softmax head.
  bool dual_head() const { return kind == StrategyKind::kTrFedDis; }
  metrics::FusionMode fusion() const;
  std::string name() const;

  /// "SingleSet", "FedAvg", "FedBN" or "TrFedDis" (case-insensitive).
  static Strategy parse(std::string_view name);
  /// Ablation variants: "backbone", "dis", "dis+un", "full".
  static Strategy ablation(std::string_view variant);

  friend bool operator==(const Strategy&, const Strategy&) = default;
};

struct TrainConfig {
  double lr = 1e-2;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 1;
  std::size_t rounds = 50;
  double lambda_u = 1.0;
  double lambda_d = 0.1;
  double ramp_fraction = 0.5;  // share of each client's total steps spent ramping
  double weight_un_global = 1.0;
  double weight_un_local = 1.0;
  double weight_un_fused = 1.0;
  bool uniform_weights = false;  // otherwise proportional to training-set size
  std::size_t workers = 1;

  void validate() const;
};

struct ClientState {
  std::size_t client_id = 0;
  model::Model model;
  specfun::RngStream shuffle_rng{0, 0};
  const data::DomainData* data = nullptr;
  std::size_t step = 0;        // optimisation steps taken so far
  std::size_t total_steps = 0; // planned steps over the whole run (ramp length basis)
};

struct ClientUpdate {
  std::size_t client_id = 0;
  model::ParamSet shared;
  std::size_t num_samples = 0;
  losses::LossBreakdown train_loss;  // mean over the round's batches
  double train_accuracy = 0.0;       // running fused accuracy over the round's batches
};

struct ServerState {
  Strategy strategy;
  model::ParamSet shared;
  std::size_t round = 0;
  std::vector<double> weights;  // per client, sums to 1
};

struct ClientRecord {
  std::size_t client_id = 0;
  losses::LossBreakdown train_loss;
  double train_accuracy = 0.0;
  metrics::EvalResult test;
};

struct RoundReport {
  std::size_t round = 0;  // 1-based
  std::vector<ClientRecord> clients;
};

/// Model layout used by a strategy: baselines drop the local head.
model::ModelConfig model_config_for(const Strategy& strategy, model::ModelConfig base);

/// Loss terms used by a strategy at a given run length.
losses::Objective objective_for(const Strategy& strategy, const TrainConfig& cfg, std::size_t total_steps);

/// Clients with identical initial weights drawn from (seed, init stream) and
/// private shuffle streams keyed by client id.
std::vector<ClientState> make_clients(const std::vector<data::DomainData>& domains,
                                      const model::ModelConfig& config, const Strategy& strategy,
                                      const TrainConfig& train, std::uint64_t seed);

ServerState make_server(const Strategy& strategy, const std::vector<ClientState>& clients,
                        bool uniform_weights);

/// Installs `shared` (when non-null) then runs E epochs of SGD on the client's
/// training split. Returns the strategy's shared subset after training.
ClientUpdate local_train(ClientState& client, const model::ParamSet* shared, const Strategy& strategy,
                         const TrainConfig& cfg);

/// Weighted average in client-id order with double accumulation.
model::ParamSet aggregate(std::vector<ClientUpdate> updates, const std::vector<double>& weights);

/// One broadcast / train / aggregate / evaluate cycle.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients, const TrainConfig& cfg);

using RoundCallback = std::function<void(const RoundReport&)>;

/// cfg.rounds rounds; `on_round` sees each report as it completes.
std::vector<RoundReport> run_training(ServerState& server, std::vector<ClientState>& clients,
                                      const TrainConfig& cfg, const RoundCallback& on_round = {});

}  // namespace trfeddis::federation
