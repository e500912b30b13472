#include "trfeddis/model.hpp"

#include <cmath>
#include <string>

namespace trfeddis::model {

std::string_view to_string(PartitionTag tag) {
  switch (tag) {
    case PartitionTag::kSharedEncoder: return "SharedEncoder";
    case PartitionTag::kSharedGlobalHead: return "SharedGlobalHead";
    case PartitionTag::kLocalHead: return "LocalHead";
    case PartitionTag::kLocalBN: return "LocalBN";
  }
  return "?";
}

PartitionTag parse_tag(std::string_view name) {
  for (auto tag : all_tags()) {
    if (to_string(tag) == name) return tag;
  }
  throw std::invalid_argument("unknown partition tag '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// BasicParamSet

template <typename T>
void BasicParamSet<T>::add(std::string name, PartitionTag tag, bool trainable,
                           nd::BasicTensor<T> value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), tag, trainable, std::move(value)});
}

template <typename T>
const ParamEntry<T>* BasicParamSet<T>::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
ParamEntry<T>* BasicParamSet<T>::find(std::string_view name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second];
}

template <typename T>
const ParamEntry<T>& BasicParamSet<T>::at(std::string_view name) const {
  if (const auto* e = find(name)) return *e;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename T>
ParamEntry<T>& BasicParamSet<T>::at(std::string_view name) {
  if (auto* e = find(name)) return *e;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::vector<std::string> BasicParamSet<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

template <typename T>
std::size_t BasicParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <typename T>
BasicParamSet<T> BasicParamSet<T>::subset(const TagSet& tags) const {
  BasicParamSet out;
  for (const auto& e : entries_) {
    if (tags.count(e.tag)) out.add(e.name, e.tag, e.trainable, e.value);
  }
  return out;
}

template <typename T>
void BasicParamSet<T>::assign_from(const BasicParamSet& other) {
  for (const auto& src : other.entries_) {
    auto* dst = find(src.name);
    if (!dst) throw std::invalid_argument("assign_from: unknown parameter '" + src.name + "'");
    if (dst->tag != src.tag || dst->value.shape() != src.value.shape()) {
      throw std::invalid_argument("assign_from: tag or shape mismatch for '" + src.name + "'");
    }
    dst->value = src.value;
  }
}

template class BasicParamSet<float>;
template class BasicParamSet<double>;

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::conv_default(nd::Shape input_shape, std::size_t num_classes) {
  ModelConfig c;
  c.input_shape = std::move(input_shape);
  c.encoder = {
      {EncoderBlock::Kind::kConv, 8, 3, 1, 1, 2, EncoderBlock::Pooling::kAverage},
      {EncoderBlock::Kind::kConv, 16, 3, 1, 1, 2, EncoderBlock::Pooling::kAverage},
      {EncoderBlock::Kind::kDense, 64, 0, 0, 0, 1},
  };
  c.num_classes = num_classes;
  return c;
}

ModelConfig ModelConfig::mlp_default(std::size_t features, std::size_t num_classes) {
  ModelConfig c;
  c.input_shape = {features};
  c.encoder = {
      {EncoderBlock::Kind::kDense, 64, 0, 0, 0, 1},
      {EncoderBlock::Kind::kDense, 64, 0, 0, 0, 1},
  };
  c.num_classes = num_classes;
  return c;
}

namespace {

// Walks the encoder and reports the shape after each block (without batch).
std::vector<nd::Shape> block_shapes(const ModelConfig& c) {
  std::vector<nd::Shape> shapes;
  nd::Shape cur = c.input_shape;
  for (const auto& b : c.encoder) {
    if (b.width == 0) throw ConfigError("encoder block width must be positive");
    if (b.kind == EncoderBlock::Kind::kConv) {
      if (cur.size() != 3) throw ConfigError("conv block needs a [C,H,W] input, got " + nd::to_string(cur));
      if (b.kernel == 0 || b.stride == 0) throw ConfigError("conv kernel and stride must be positive");
      auto extent = [&](std::size_t in) {
        if (in + 2 * b.padding < b.kernel || (in + 2 * b.padding - b.kernel) % b.stride != 0) {
          throw ConfigError("conv block yields a non-integral extent for input " + nd::to_string(cur));
        }
        std::size_t out = (in + 2 * b.padding - b.kernel) / b.stride + 1;
        if (b.pool > 1) out /= b.pool;
        if (out == 0) throw ConfigError("encoder shrinks " + nd::to_string(cur) + " to nothing");
        return out;
      };
      cur = {b.width, extent(cur[1]), extent(cur[2])};
    } else {
      cur = {b.width};
    }
    shapes.push_back(cur);
  }
  return shapes;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (input_shape.empty() || nd::numel(input_shape) == 0) throw ConfigError("input_shape is empty");
  if (input_shape.size() != 1 && input_shape.size() != 3) {
    throw ConfigError("input_shape must be [F] or [C,H,W], got " + nd::to_string(input_shape));
  }
  if (encoder.empty()) throw ConfigError("encoder needs at least one block");
  if (encoder.back().kind != EncoderBlock::Kind::kDense) {
    throw ConfigError("the last encoder block must be dense");
  }
  if (head_width == 0 || head_layers == 0) throw ConfigError("head width and depth must be positive");
  if (!(bn_eps > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0)) {
    throw ConfigError("bn_eps must be > 0 and bn_momentum in (0,1]");
  }
  block_shapes(*this);
}

std::size_t ModelConfig::feature_dim() const { return encoder.back().width; }

// ---------------------------------------------------------------------------
// init

namespace {

nd::Tensor uniform_fan_in(nd::Shape shape, std::size_t fan_in, specfun::RngStream& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  nd::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  return t;
}

void add_bn(ParamSet& ps, const std::string& prefix, std::size_t n) {
  ps.add(prefix + ".bn.gamma", PartitionTag::kLocalBN, true, nd::Tensor({n}, 1.0f));
  ps.add(prefix + ".bn.beta", PartitionTag::kLocalBN, true, nd::Tensor({n}, 0.0f));
  ps.add(prefix + ".bn.running_mean", PartitionTag::kLocalBN, false, nd::Tensor({n}, 0.0f));
  ps.add(prefix + ".bn.running_var", PartitionTag::kLocalBN, false, nd::Tensor({n}, 1.0f));
}

void add_head(ParamSet& ps, const ModelConfig& c, const std::string& prefix, PartitionTag tag,
              specfun::RngStream& rng) {
  std::size_t in = c.feature_dim();
  for (std::size_t l = 0; l < c.head_layers; ++l) {
    const std::size_t out = l + 1 == c.head_layers ? c.num_classes : c.head_width;
    const std::string p = prefix + "." + std::to_string(l);
    ps.add(p + ".weight", tag, true, uniform_fan_in({in, out}, in, rng));
    ps.add(p + ".bias", tag, true, nd::Tensor({out}, 0.0f));
    in = out;
  }
}

}  // namespace

Model init_model(const ModelConfig& config, specfun::RngStream& rng) {
  config.validate();
  Model m{config, {}};
  nd::Shape cur = config.input_shape;
  const auto shapes = block_shapes(config);
  for (std::size_t i = 0; i < config.encoder.size(); ++i) {
    const auto& b = config.encoder[i];
    const std::string p = "encoder." + std::to_string(i);
    if (b.kind == EncoderBlock::Kind::kConv) {
      const std::size_t fan_in = cur[0] * b.kernel * b.kernel;
      m.params.add(p + ".conv.weight", PartitionTag::kSharedEncoder, true,
                   uniform_fan_in({b.width, cur[0], b.kernel, b.kernel}, fan_in, rng));
      m.params.add(p + ".conv.bias", PartitionTag::kSharedEncoder, true, nd::Tensor({b.width}, 0.0f));
    } else {
      const std::size_t fan_in = nd::numel(cur);
      m.params.add(p + ".dense.weight", PartitionTag::kSharedEncoder, true,
                   uniform_fan_in({fan_in, b.width}, fan_in, rng));
      m.params.add(p + ".dense.bias", PartitionTag::kSharedEncoder, true, nd::Tensor({b.width}, 0.0f));
    }
    if (config.use_batchnorm) add_bn(m.params, p, b.width);
    cur = shapes[i];
  }
  add_head(m.params, config, "head_global", PartitionTag::kSharedGlobalHead, rng);
  if (config.local_head) add_head(m.params, config, "head_local", PartitionTag::kLocalHead, rng);
  return m;
}

ParamSet partition_view(const Model& model, const TagSet& tags) {
  return model.params.subset(tags);
}

// ---------------------------------------------------------------------------
// Forward

template <typename T>
Forward<T>::Forward(nd::Graph<T>& graph, BasicModel<T>& model, nd::Mode mode)
    : graph_(&graph), model_(&model), mode_(mode) {
  for (const auto& e : model.params.entries()) {
    if (e.trainable) vars_.emplace(e.name, graph.leaf(e.value, true));
  }
}

template <typename T>
Forward<T>::Forward(nd::Graph<T>& graph, const BasicModel<T>& model)
    // Eval mode never writes to the running statistics.
    : Forward(graph, const_cast<BasicModel<T>&>(model), nd::Mode::kEval) {}

template <typename T>
nd::Var<T> Forward<T>::param(std::string_view name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("no trainable parameter '" + std::string(name) + "'");
  return it->second;
}

template <typename T>
nd::Var<T> Forward<T>::encode(nd::Var<T> x) {
  const auto& cfg = model_->config;
  const auto& xs = x.shape();
  if (xs.size() != cfg.input_shape.size() + 1 ||
      !std::equal(cfg.input_shape.begin(), cfg.input_shape.end(), xs.begin() + 1)) {
    throw nd::ShapeError("encode: input " + nd::to_string(xs) + " does not match [B]+" +
                         nd::to_string(cfg.input_shape));
  }
  const std::size_t batch = xs[0];
  nd::Var<T> h = x;
  for (std::size_t i = 0; i < cfg.encoder.size(); ++i) {
    const auto& b = cfg.encoder[i];
    const std::string p = "encoder." + std::to_string(i);
    if (b.kind == EncoderBlock::Kind::kConv) {
      h = nd::conv2d(h, param(p + ".conv.weight"), param(p + ".conv.bias"), b.stride, b.padding);
    } else {
      if (h.shape().size() != 2) h = nd::reshape(h, {batch, nd::numel(h.shape()) / batch});
      h = nd::dense(h, param(p + ".dense.weight"), param(p + ".dense.bias"));
    }
    if (cfg.use_batchnorm) {
      nd::BatchNormState<T> st{&model_->params.at(p + ".bn.running_mean").value,
                               &model_->params.at(p + ".bn.running_var").value, cfg.bn_eps,
                               cfg.bn_momentum};
      h = nd::batch_norm(h, param(p + ".bn.gamma"), param(p + ".bn.beta"), st, mode_);
    }
    h = nd::relu(h);
    if (b.kind == EncoderBlock::Kind::kConv && b.pool > 1) {
      h = b.pooling == EncoderBlock::Pooling::kMax ? nd::max_pool2d(h, b.pool) : nd::avg_pool2d(h, b.pool);
    }
  }
  return h;
}

template <typename T>
nd::Var<T> Forward<T>::head(nd::Var<T> features, Head which) {
  const auto& cfg = model_->config;
  if (which == Head::kLocal && !cfg.local_head) {
    throw std::logic_error("head: model has no local head");
  }
  if (features.shape().size() != 2 || features.shape()[1] != cfg.feature_dim()) {
    throw nd::ShapeError("head: features " + nd::to_string(features.shape()) + " but head expects width " +
                         std::to_string(cfg.feature_dim()));
  }
  const std::string prefix = which == Head::kGlobal ? "head_global" : "head_local";
  nd::Var<T> h = features;
  for (std::size_t l = 0; l < cfg.head_layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l);
    h = nd::dense(h, param(p + ".weight"), param(p + ".bias"));
    if (l + 1 < cfg.head_layers) h = nd::relu(h);
  }
  return h;
}

template <typename T>
typename Forward<T>::Outputs Forward<T>::run(nd::Var<T> x) {
  Outputs out;
  out.features = encode(x);
  out.raw_global = head(out.features, Head::kGlobal);
  if (model_->config.local_head) out.raw_local = head(out.features, Head::kLocal);
  return out;
}

template <typename T>
void Forward<T>::apply_sgd(double lr) {
  for (auto& e : model_->params.entries()) {
    if (!e.trainable) continue;
    const auto g = graph_->grad(vars_.at(e.name).id());
    if (g.empty()) continue;
    auto data = e.value.data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= static_cast<T>(lr * g[i]);
  }
}

template class Forward<float>;
template class Forward<double>;

}  // namespace trfeddis::model
