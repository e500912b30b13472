#pragma once

// Disentangling client network: a shared encoder feeding a global head and a
// private local head. Every parameter carries a PartitionTag that decides
// whether federation ever moves it.

#include <cstddef>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "trfeddis/autograd.hpp"
#include "trfeddis/specfun.hpp"
#include "trfeddis/tensor.hpp"

namespace trfeddis::model {

enum class PartitionTag { kSharedEncoder, kSharedGlobalHead, kLocalHead, kLocalBN };

using TagSet = std::set<PartitionTag>;

std::string_view to_string(PartitionTag tag);
/// Inverse of to_string; throws std::invalid_argument on unknown names.
PartitionTag parse_tag(std::string_view name);

inline const TagSet& all_tags() {
  static const TagSet tags = {PartitionTag::kSharedEncoder, PartitionTag::kSharedGlobalHead,
                              PartitionTag::kLocalHead, PartitionTag::kLocalBN};
  return tags;
}

template <typename T>
struct ParamEntry {
  std::string name;
  PartitionTag tag;
  bool trainable;  // false for BN running statistics
  nd::BasicTensor<T> value;

  friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

/// Ordered, named collection of tensors. Order is insertion order and is
/// stable across copies, subsets, and checkpoints.
template <typename T>
class BasicParamSet {
 public:
  void add(std::string name, PartitionTag tag, bool trainable, nd::BasicTensor<T> value);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::vector<ParamEntry<T>>& entries() { return entries_; }

  const ParamEntry<T>* find(std::string_view name) const;
  ParamEntry<T>* find(std::string_view name);
  const ParamEntry<T>& at(std::string_view name) const;
  ParamEntry<T>& at(std::string_view name);

  std::vector<std::string> names() const;
  std::size_t scalar_count() const;

  /// Copy of the entries whose tag is in `tags`, in insertion order.
  BasicParamSet subset(const TagSet& tags) const;

  /// Overwrites the values of every entry of `other` in this set. Throws if a
  /// name is missing or a shape/tag disagrees.
  void assign_from(const BasicParamSet& other);

  template <typename U>
  BasicParamSet<U> cast() const {
    BasicParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.tag, e.trainable, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const BasicParamSet& a, const BasicParamSet& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using ParamSet = BasicParamSet<float>;

struct EncoderBlock {
  enum class Kind { kConv, kDense };
  enum class Pooling { kMax, kAverage };
  Kind kind = Kind::kConv;
  std::size_t width = 0;  // output channels (conv) or units (dense)
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t pool = 2;  // pooling window after the activation; 1 disables
  Pooling pooling = Pooling::kAverage;

  friend bool operator==(const EncoderBlock&, const EncoderBlock&) = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  nd::Shape input_shape;  // [C,H,W] for images, [F] for vectors
  std::vector<EncoderBlock> encoder;
  std::size_t head_width = 64;
  std::size_t head_layers = 3;
  std::size_t num_classes = 5;
  bool use_batchnorm = true;
  bool local_head = true;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  /// Two conv blocks (8, 16 channels, 2x2 average pooling) then a dense block
  /// to 64 features.
  static ModelConfig conv_default(nd::Shape input_shape, std::size_t num_classes);
  /// Two dense blocks (64, 64) for vector inputs.
  static ModelConfig mlp_default(std::size_t features, std::size_t num_classes);

  void validate() const;
  std::size_t feature_dim() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Head { kGlobal, kLocal };

template <typename T>
struct BasicModel {
  ModelConfig config;
  BasicParamSet<T> params;

  template <typename U>
  BasicModel<U> cast() const {
    return BasicModel<U>{config, params.template cast<U>()};
  }
};

using Model = BasicModel<float>;

/// Fan-in scaled uniform weights (variance 1/fan_in), zero biases, BN gamma=1,
/// beta=0, running mean 0 and variance 1.
Model init_model(const ModelConfig& config, specfun::RngStream& rng);

/// Parameters carrying any of `tags`, copied, in model order.
ParamSet partition_view(const Model& model, const TagSet& tags);

/// Binds a model's parameters into a graph for one forward/backward pass.
/// Trainable parameters become requires-grad leaves; BN running statistics are
/// referenced in place and updated in train mode.
template <typename T>
class Forward {
 public:
  struct Outputs {
    nd::Var<T> features;
    nd::Var<T> raw_global;
    nd::Var<T> raw_local;  // invalid when the model has no local head
  };

  Forward(nd::Graph<T>& graph, BasicModel<T>& model, nd::Mode mode);
  /// Eval-only binding of a const model.
  Forward(nd::Graph<T>& graph, const BasicModel<T>& model);

  /// Encoder features [B, feature_dim].
  nd::Var<T> encode(nd::Var<T> x);
  /// Raw (pre-Softplus) head output [B, K].
  nd::Var<T> head(nd::Var<T> features, Head which);
  /// One encode feeding both heads.
  Outputs run(nd::Var<T> x);

  nd::Var<T> param(std::string_view name) const;

  /// p -= lr * dL/dp for every trainable parameter that received a gradient.
  void apply_sgd(double lr);

 private:
  nd::Graph<T>* graph_;
  BasicModel<T>* model_;
  nd::Mode mode_;
  std::map<std::string, nd::Var<T>, std::less<>> vars_;
};

}  // namespace trfeddis::model
