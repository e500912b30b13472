#pragma once

// Experiment configuration as a JSON document. Every key is optional and
// falls back to the defaults below; unknown keys and out-of-range values are
// rejected before anything runs.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trfeddis/data.hpp"
#include "trfeddis/federation.hpp"
#include "trfeddis/model.hpp"

namespace trfeddis::config {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct IdxClient {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  friend bool operator==(const IdxClient&, const IdxClient&) = default;
};

struct DataConfig {
  enum class Source { kSynthetic, kIdx };
  Source source = Source::kSynthetic;
  data::SyntheticConfig synthetic;
  std::vector<IdxClient> idx_clients;
  std::size_t idx_num_classes = 10;

  std::size_t num_classes() const;
  std::size_t num_clients() const;
};

/// Architecture knobs; input shape and class count come from the data.
struct ModelSection {
  std::vector<model::EncoderBlock> encoder;  // empty: default for the input rank
  std::size_t head_width = 64;
  std::size_t head_layers = 3;
  bool use_batchnorm = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
};

struct ExperimentConfig {
  federation::Strategy strategy;
  ModelSection model;
  DataConfig data;
  federation::TrainConfig train;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "out";

  /// Full model config for a given input shape (from the data section).
  model::ModelConfig model_config(const nd::Shape& input_shape) const;
  void validate() const;
};

ExperimentConfig from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);

/// Reads and validates a config file; ConfigError names the path on failure.
ExperimentConfig load_config(const std::filesystem::path& path);

nlohmann::json model_config_to_json(const model::ModelConfig& c);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

/// Loads or generates every client's data.
std::vector<data::DomainData> build_data(const DataConfig& c);

}  // namespace trfeddis::config
