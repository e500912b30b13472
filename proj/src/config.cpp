#include "trfeddis/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace trfeddis::config {

using nlohmann::json;

namespace {

// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// Unsigned fields arrive as JSON numbers; negative or fractional values are
// config errors rather than silent wraps.
void get_count(ObjectReader& r, const char* key, std::size_t& out) {
  double v = static_cast<double>(out);
  r.get(key, v);
  if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
    throw ConfigError(r.where() + "." + key + ": expected a non-negative integer");
  }
  out = static_cast<std::size_t>(v);
}

model::EncoderBlock block_from_json(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  model::EncoderBlock b;
  std::string kind = "conv", pooling = "average";
  r.get("kind", kind);
  if (kind == "conv") {
    b.kind = model::EncoderBlock::Kind::kConv;
  } else if (kind == "dense") {
    b.kind = model::EncoderBlock::Kind::kDense;
    b.kernel = b.stride = b.padding = 0;
    b.pool = 1;
  } else {
    throw ConfigError(where + ".kind: expected 'conv' or 'dense', got '" + kind + "'");
  }
  get_count(r, "width", b.width);
  get_count(r, "kernel", b.kernel);
  get_count(r, "stride", b.stride);
  get_count(r, "padding", b.padding);
  get_count(r, "pool", b.pool);
  r.get("pooling", pooling);
  if (pooling == "max") {
    b.pooling = model::EncoderBlock::Pooling::kMax;
  } else if (pooling == "average") {
    b.pooling = model::EncoderBlock::Pooling::kAverage;
  } else {
    throw ConfigError(where + ".pooling: expected 'max' or 'average', got '" + pooling + "'");
  }
  r.finish();
  return b;
}

json block_to_json(const model::EncoderBlock& b) {
  json j;
  j["kind"] = b.kind == model::EncoderBlock::Kind::kConv ? "conv" : "dense";
  j["width"] = b.width;
  if (b.kind == model::EncoderBlock::Kind::kConv) {
    j["kernel"] = b.kernel;
    j["stride"] = b.stride;
    j["padding"] = b.padding;
    j["pool"] = b.pool;
    j["pooling"] = b.pooling == model::EncoderBlock::Pooling::kMax ? "max" : "average";
  }
  return j;
}

data::DomainSpec domain_from_json(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  data::DomainSpec d;
  r.get("rotation_deg", d.rotation_deg);
  r.get("channel_scale", d.channel_scale);
  r.get("brightness", d.brightness);
  r.get("noise_sigma", d.noise_sigma);
  r.finish();
  return d;
}

json domain_to_json(const data::DomainSpec& d) {
  return {{"rotation_deg", d.rotation_deg},
          {"channel_scale", d.channel_scale},
          {"brightness", d.brightness},
          {"noise_sigma", d.noise_sigma}};
}

DataConfig data_from_json(const json& j) {
  ObjectReader r(j, "data");
  DataConfig d;
  std::string source = "synthetic";
  r.get("source", source);
  if (source == "synthetic") {
    d.source = DataConfig::Source::kSynthetic;
    auto& s = d.synthetic;
    r.get("base_seed", s.base_seed);
    get_count(r, "num_domains", s.num_domains);
    get_count(r, "train_per_domain", s.train_per_domain);
    get_count(r, "test_per_domain", s.test_per_domain);
    get_count(r, "num_classes", s.num_classes);
    get_count(r, "image_size", s.image_size);
    get_count(r, "channels", s.channels);
    r.get("blob_sigma", s.blob_sigma);
    r.get("ring_radius", s.ring_radius);
    r.get("jitter", s.jitter);
    r.get("amplitude_spread", s.amplitude_spread);
    if (const json* doms = r.child("domains")) {
      if (!doms->is_array()) throw ConfigError("data.domains: expected an array");
      for (std::size_t i = 0; i < doms->size(); ++i) {
        s.domains.push_back(domain_from_json((*doms)[i], "data.domains[" + std::to_string(i) + "]"));
      }
    }
  } else if (source == "idx") {
    d.source = DataConfig::Source::kIdx;
    get_count(r, "num_classes", d.idx_num_classes);
    const json* clients = r.child("clients");
    if (clients == nullptr || !clients->is_array()) throw ConfigError("data.clients: expected an array");
    for (std::size_t i = 0; i < clients->size(); ++i) {
      ObjectReader c((*clients)[i], "data.clients[" + std::to_string(i) + "]");
      IdxClient ic;
      std::string a, b, t1, t2;
      c.get("train_images", a);
      c.get("train_labels", b);
      c.get("test_images", t1);
      c.get("test_labels", t2);
      c.finish();
      ic = {a, b, t1, t2};
      d.idx_clients.push_back(ic);
    }
  } else {
    throw ConfigError("data.source: expected 'synthetic' or 'idx', got '" + source + "'");
  }
  r.finish();
  return d;
}

json data_to_json(const DataConfig& d) {
  json j;
  if (d.source == DataConfig::Source::kSynthetic) {
    const auto& s = d.synthetic;
    j = {{"source", "synthetic"},
         {"base_seed", s.base_seed},
         {"num_domains", s.num_domains},
         {"train_per_domain", s.train_per_domain},
         {"test_per_domain", s.test_per_domain},
         {"num_classes", s.num_classes},
         {"image_size", s.image_size},
         {"channels", s.channels},
         {"blob_sigma", s.blob_sigma},
         {"ring_radius", s.ring_radius},
         {"jitter", s.jitter},
         {"amplitude_spread", s.amplitude_spread}};
    if (!s.domains.empty()) {
      j["domains"] = json::array();
      for (const auto& dom : s.domains) j["domains"].push_back(domain_to_json(dom));
    }
  } else {
    j = {{"source", "idx"}, {"num_classes", d.idx_num_classes}, {"clients", json::array()}};
    for (const auto& c : d.idx_clients) {
      j["clients"].push_back({{"train_images", c.train_images.string()},
                              {"train_labels", c.train_labels.string()},
                              {"test_images", c.test_images.string()},
                              {"test_labels", c.test_labels.string()}});
    }
  }
  return j;
}

}  // namespace

std::size_t DataConfig::num_classes() const {
  return source == Source::kSynthetic ? synthetic.num_classes : idx_num_classes;
}

std::size_t DataConfig::num_clients() const {
  return source == Source::kSynthetic ? synthetic.num_domains : idx_clients.size();
}

model::ModelConfig ExperimentConfig::model_config(const nd::Shape& input_shape) const {
  model::ModelConfig c = input_shape.size() == 3 ? model::ModelConfig::conv_default(input_shape, data.num_classes())
                                                 : model::ModelConfig::mlp_default(nd::numel(input_shape), data.num_classes());
  c.input_shape = input_shape;
  if (!model.encoder.empty()) c.encoder = model.encoder;
  c.head_width = model.head_width;
  c.head_layers = model.head_layers;
  c.use_batchnorm = model.use_batchnorm;
  c.bn_eps = model.bn_eps;
  c.bn_momentum = model.bn_momentum;
  return federation::model_config_for(strategy, c);
}

void ExperimentConfig::validate() const {
  try {
    train.validate();
  } catch (const federation::FederationError& e) {
    throw ConfigError(e.what());
  }
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (model.head_layers == 0 || model.head_width == 0) throw ConfigError("model: head needs positive width and layers");
  if (!(model.bn_eps > 0.0) || !(model.bn_momentum >= 0.0 && model.bn_momentum <= 1.0)) {
    throw ConfigError("model: bn_eps must be > 0 and bn_momentum in [0,1]");
  }
  if (data.source == DataConfig::Source::kSynthetic) {
    try {
      data.synthetic.validate();
      model_config({data.synthetic.channels, data.synthetic.image_size, data.synthetic.image_size}).validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  } else {
    if (data.idx_clients.empty()) throw ConfigError("data.clients: at least one client is required");
    if (data.idx_num_classes < 2) throw ConfigError("data.num_classes: must be >= 2");
  }
}

ExperimentConfig from_json(const json& j) {
  ObjectReader r(j, "config");
  ExperimentConfig c;
  std::string strategy = "TrFedDis";
  r.get("strategy", strategy);
  try {
    c.strategy = federation::Strategy::parse(strategy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("strategy: ") + e.what());
  }
  if (const json* ab = r.child("ablation")) {
    ObjectReader a(*ab, "ablation");
    std::string variant;
    a.get("variant", variant);
    if (!variant.empty()) {
      try {
        c.strategy = federation::Strategy::ablation(variant);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("ablation.variant: ") + e.what());
      }
    }
    a.get("enable_dis", c.strategy.enable_dis);
    a.get("enable_un", c.strategy.enable_un);
    a.get("enable_ce", c.strategy.enable_ce);
    a.finish();
  }
  if (const json* m = r.child("model")) {
    ObjectReader mr(*m, "model");
    if (const json* enc = mr.child("encoder")) {
      if (!enc->is_array()) throw ConfigError("model.encoder: expected an array");
      for (std::size_t i = 0; i < enc->size(); ++i) {
        c.model.encoder.push_back(block_from_json((*enc)[i], "model.encoder[" + std::to_string(i) + "]"));
      }
    }
    get_count(mr, "head_width", c.model.head_width);
    get_count(mr, "head_layers", c.model.head_layers);
    mr.get("use_batchnorm", c.model.use_batchnorm);
    mr.get("bn_eps", c.model.bn_eps);
    mr.get("bn_momentum", c.model.bn_momentum);
    mr.finish();
  }
  if (const json* d = r.child("data")) c.data = data_from_json(*d);

  auto& t = c.train;
  get_count(r, "rounds", t.rounds);
  get_count(r, "local_epochs", t.local_epochs);
  r.get("lr", t.lr);
  get_count(r, "batch_size", t.batch_size);
  get_count(r, "workers", t.workers);
  if (const json* s = r.child("schedule")) {
    ObjectReader sr(*s, "schedule");
    sr.get("lambda_u", t.lambda_u);
    sr.get("lambda_d", t.lambda_d);
    sr.get("ramp_fraction", t.ramp_fraction);
    sr.finish();
  }
  if (const json* w = r.child("uncertainty_weights")) {
    ObjectReader wr(*w, "uncertainty_weights");
    wr.get("global", t.weight_un_global);
    wr.get("local", t.weight_un_local);
    wr.get("fused", t.weight_un_fused);
    wr.finish();
  }
  std::string weighting = "samples";
  r.get("aggregation_weights", weighting);
  if (weighting == "uniform") {
    t.uniform_weights = true;
  } else if (weighting != "samples") {
    throw ConfigError("aggregation_weights: expected 'samples' or 'uniform', got '" + weighting + "'");
  }
  r.get("seeds", c.seeds);
  std::string out = c.output_dir.string();
  r.get("output_dir", out);
  c.output_dir = out;
  r.finish();
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  const auto kind = c.strategy.kind;
  j["strategy"] = kind == federation::StrategyKind::kSingleSet ? "SingleSet"
                  : kind == federation::StrategyKind::kFedAvg  ? "FedAvg"
                  : kind == federation::StrategyKind::kFedBN   ? "FedBN"
                                                               : "TrFedDis";
  j["ablation"] = {{"enable_dis", c.strategy.enable_dis},
                   {"enable_un", c.strategy.enable_un},
                   {"enable_ce", c.strategy.enable_ce}};
  json m = {{"head_width", c.model.head_width},
            {"head_layers", c.model.head_layers},
            {"use_batchnorm", c.model.use_batchnorm},
            {"bn_eps", c.model.bn_eps},
            {"bn_momentum", c.model.bn_momentum}};
  if (!c.model.encoder.empty()) {
    m["encoder"] = json::array();
    for (const auto& b : c.model.encoder) m["encoder"].push_back(block_to_json(b));
  }
  j["model"] = m;
  j["data"] = data_to_json(c.data);
  const auto& t = c.train;
  j["rounds"] = t.rounds;
  j["local_epochs"] = t.local_epochs;
  j["lr"] = t.lr;
  j["batch_size"] = t.batch_size;
  j["workers"] = t.workers;
  j["schedule"] = {{"lambda_u", t.lambda_u}, {"lambda_d", t.lambda_d}, {"ramp_fraction", t.ramp_fraction}};
  j["uncertainty_weights"] = {{"global", t.weight_un_global}, {"local", t.weight_un_local}, {"fused", t.weight_un_fused}};
  j["aggregation_weights"] = t.uniform_weights ? "uniform" : "samples";
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir.string();
  return j;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
}

json model_config_to_json(const model::ModelConfig& c) {
  json j = {{"input_shape", c.input_shape},
            {"head_width", c.head_width},
            {"head_layers", c.head_layers},
            {"num_classes", c.num_classes},
            {"use_batchnorm", c.use_batchnorm},
            {"local_head", c.local_head},
            {"bn_eps", c.bn_eps},
            {"bn_momentum", c.bn_momentum},
            {"encoder", json::array()}};
  for (const auto& b : c.encoder) j["encoder"].push_back(block_to_json(b));
  return j;
}

model::ModelConfig model_config_from_json(const json& j) {
  ObjectReader r(j, "model");
  model::ModelConfig c;
  r.get("input_shape", c.input_shape);
  get_count(r, "head_width", c.head_width);
  get_count(r, "head_layers", c.head_layers);
  get_count(r, "num_classes", c.num_classes);
  r.get("use_batchnorm", c.use_batchnorm);
  r.get("local_head", c.local_head);
  r.get("bn_eps", c.bn_eps);
  r.get("bn_momentum", c.bn_momentum);
  if (const json* enc = r.child("encoder")) {
    if (!enc->is_array()) throw ConfigError("model.encoder: expected an array");
    for (std::size_t i = 0; i < enc->size(); ++i) {
      c.encoder.push_back(block_from_json((*enc)[i], "model.encoder[" + std::to_string(i) + "]"));
    }
  }
  r.finish();
  try {
    c.validate();
  } catch (const model::ConfigError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

std::vector<data::DomainData> build_data(const DataConfig& c) {
  if (c.source == DataConfig::Source::kSynthetic) return data::make_synthetic(c.synthetic);
  std::vector<data::DomainData> out;
  for (const auto& ic : c.idx_clients) {
    data::DomainData d;
    d.train = data::load_idx_dataset(ic.train_images, ic.train_labels, c.idx_num_classes);
    d.test = data::load_idx_dataset(ic.test_images, ic.test_labels, c.idx_num_classes);
    if (d.train.sample_shape() != d.test.sample_shape()) {
      throw data::DataError("idx client " + ic.train_images.string() + ": train and test sample shapes differ");
    }
    out.push_back(std::move(d));
  }
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].train.sample_shape() != out[0].train.sample_shape()) {
      throw data::DataError("idx clients disagree on sample shape");
    }
  }
  return out;
}

}  // namespace trfeddis::config
