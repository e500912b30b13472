#include "trfeddis/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "trfeddis/evidential.hpp"

namespace trfeddis::metrics {

namespace {

struct HeadOutputs {
  nd::Tensor64 features;
  nd::Tensor64 raw_global;
  nd::Tensor64 raw_local;  // empty for single-head models
};

HeadOutputs forward_eval(const model::Model& model, const nd::Tensor& inputs) {
  nd::Graph<float> g;
  model::Forward<float> fwd(g, model);
  auto out = fwd.run(g.constant(inputs));
  HeadOutputs h{out.features.value().cast<double>(), out.raw_global.value().cast<double>(), {}};
  if (out.raw_local.valid()) h.raw_local = out.raw_local.value().cast<double>();
  return h;
}

evidential::Opinion fused_opinion(const HeadOutputs& h, FusionMode fusion) {
  if (h.raw_local.rank() == 0) return evidential::opinion_from_raw(h.raw_global);
  if (fusion == FusionMode::kLogitSum) {
    nd::Tensor64 sum = h.raw_global;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += h.raw_local[i];
    return evidential::opinion_from_raw(sum);
  }
  return evidential::ds_fuse(evidential::opinion_from_raw(h.raw_global),
                             evidential::opinion_from_raw(h.raw_local)).first;
}

nd::Tensor slice_rows(const nd::Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t per = x.size() / x.dim(0);
  nd::Shape shape = x.shape();
  shape[0] = end - begin;
  return nd::Tensor(shape, std::vector<float>(x.data().begin() + static_cast<long>(begin * per),
                                              x.data().begin() + static_cast<long>(end * per)));
}

}  // namespace

EvalResult evaluate(const model::Model& model, const data::Dataset& ds, FusionMode fusion,
                    std::size_t batch_size) {
  EvalResult r;
  const std::size_t n = ds.size();
  if (n == 0) return r;
  std::size_t hit = 0, hit_g = 0, hit_l = 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    const auto h = forward_eval(model, slice_rows(ds.inputs, start, end));
    const auto fused = evidential::predict(fused_opinion(h, fusion));
    const auto glob = evidential::predict(evidential::opinion_from_raw(h.raw_global));
    const auto loc = h.raw_local.rank() ? evidential::predict(evidential::opinion_from_raw(h.raw_local)) : glob;
    for (std::size_t i = 0; i < end - start; ++i) {
      const std::size_t y = ds.labels[start + i];
      hit += fused.label[i] == y;
      hit_g += glob.label[i] == y;
      hit_l += loc.label[i] == y;
      r.uncertainty.push_back(fused.uncertainty[i]);
      r.predicted.push_back(fused.label[i]);
    }
  }
  const double dn = static_cast<double>(n);
  r.accuracy = static_cast<double>(hit) / dn;
  r.accuracy_global = static_cast<double>(hit_g) / dn;
  r.accuracy_local = static_cast<double>(hit_l) / dn;
  r.mean_u = std::accumulate(r.uncertainty.begin(), r.uncertainty.end(), 0.0) / dn;
  return r;
}

std::vector<double> fused_uncertainty(const model::Model& model, const nd::Tensor& inputs,
                                      FusionMode fusion, std::size_t batch_size) {
  std::vector<double> u;
  const std::size_t n = inputs.rank() ? inputs.dim(0) : 0;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    const auto o = fused_opinion(forward_eval(model, slice_rows(inputs, start, end)), fusion);
    u.insert(u.end(), o.uncertainty.data().begin(), o.uncertainty.data().end());
  }
  return u;
}

double auroc(const std::vector<double>& clean, const std::vector<double>& noisy) {
  if (clean.empty() || noisy.empty()) throw std::invalid_argument("auroc: both score lists must be non-empty");
  // Mann-Whitney U with midranks for ties.
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  all.reserve(clean.size() + noisy.size());
  for (double s : clean) all.push_back({s, false});
  for (double s : noisy) all.push_back({s, true});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (all[t].positive) rank_sum += midrank;
    }
    i = j;
  }
  const double np = static_cast<double>(noisy.size()), nn = static_cast<double>(clean.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

void dump_embeddings(const model::Model& model, const data::Dataset& ds, std::size_t client,
                     const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("dump_embeddings: cannot write " + path.string());
  const std::size_t d = model.config.feature_dim(), k = model.config.num_classes;
  std::string line = "client,label";
  for (std::size_t i = 0; i < d; ++i) line += fmt::format(",f{}", i);
  for (std::size_t i = 0; i < k; ++i) line += fmt::format(",g{}", i);
  for (std::size_t i = 0; i < k; ++i) line += fmt::format(",l{}", i);
  os << line << '\n';
  const std::size_t n = ds.size();
  for (std::size_t start = 0; start < n; start += 256) {
    const std::size_t end = std::min(n, start + 256);
    const auto h = forward_eval(model, slice_rows(ds.inputs, start, end));
    const auto& loc = h.raw_local.rank() ? h.raw_local : h.raw_global;
    for (std::size_t r = 0; r < end - start; ++r) {
      line = fmt::format("{},{}", client, ds.labels[start + r]);
      for (std::size_t i = 0; i < d; ++i) line += fmt::format(",{}", static_cast<float>(h.features.at(r, i)));
      for (std::size_t i = 0; i < k; ++i) line += fmt::format(",{}", static_cast<float>(h.raw_global.at(r, i)));
      for (std::size_t i = 0; i < k; ++i) line += fmt::format(",{}", static_cast<float>(loc.at(r, i)));
      os << line << '\n';
    }
  }
  if (!os) throw std::runtime_error("dump_embeddings: write failed for " + path.string());
}

}  // namespace trfeddis::metrics
