#include "trfeddis/evidential.hpp"

#include <cmath>
#include <string>

namespace trfeddis::evidential {

template <typename T>
nd::Var<T> to_evidence(nd::Var<T> raw) {
  return nd::softplus(raw);
}

template <typename T>
std::pair<DirichletVar<T>, OpinionVar<T>> to_opinion(nd::Var<T> evidence) {
  if (evidence.shape().size() != 2) {
    throw nd::ShapeError("to_opinion: evidence must be [B,K], got " + nd::to_string(evidence.shape()));
  }
  for (auto v : evidence.value().data()) {
    if (v < T(0)) throw std::invalid_argument("to_opinion: evidence must be non-negative");
  }
  auto& g = evidence.graph();
  const std::size_t batch = evidence.shape()[0], k = evidence.shape()[1];
  auto alpha = nd::add_scalar(evidence, 1.0);
  auto strength = nd::row_sum(alpha);
  auto belief = evidence / nd::expand_cols(strength, k);
  auto uncertainty = g.constant(nd::BasicTensor<T>({batch}, static_cast<T>(k))) / strength;
  return {DirichletVar<T>{alpha, strength}, OpinionVar<T>{belief, uncertainty}};
}

template <typename T>
FusionVar<T> ds_fuse(const OpinionVar<T>& g, const OpinionVar<T>& l) {
  const auto& gs = g.belief.shape();
  if (gs.size() != 2 || gs != l.belief.shape() || g.uncertainty.shape() != nd::Shape{gs[0]} ||
      l.uncertainty.shape() != nd::Shape{gs[0]}) {
    throw nd::ShapeError("ds_fuse: opinions must share [B,K]; got " + nd::to_string(gs) + " and " +
                         nd::to_string(l.belief.shape()));
  }
  const std::size_t k = gs[1];
  // sum_{i != j} bG_i bL_j = (sum bG)(sum bL) - sum_i bG_i bL_i
  auto agree = nd::row_sum(g.belief * l.belief);
  auto conflict = nd::row_sum(g.belief) * nd::row_sum(l.belief) - agree;
  for (auto c : conflict.value().data()) {
    if (static_cast<double>(c) >= kMaxConflict) {
      throw FusionError("ds_fuse: total conflict between opinions (C = " + std::to_string(c) + ")");
    }
  }
  auto renorm = nd::add_scalar(-conflict, 1.0);
  auto renorm_k = nd::expand_cols(renorm, k);
  auto numer = g.belief * l.belief + g.belief * nd::expand_cols(l.uncertainty, k) +
               l.belief * nd::expand_cols(g.uncertainty, k);
  auto belief = numer / renorm_k;
  auto uncertainty = (g.uncertainty * l.uncertainty) / renorm;
  return {OpinionVar<T>{belief, uncertainty}, conflict};
}

template <typename T>
DirichletVar<T> opinion_to_dirichlet(const OpinionVar<T>& o) {
  for (auto u : o.uncertainty.value().data()) {
    if (!(u > T(0))) throw std::invalid_argument("opinion_to_dirichlet: uncertainty must be > 0");
  }
  auto& g = o.belief.graph();
  const std::size_t batch = o.belief.shape()[0], k = o.belief.shape()[1];
  auto strength = g.constant(nd::BasicTensor<T>({batch}, static_cast<T>(k))) / o.uncertainty;
  auto evidence = o.belief * nd::expand_cols(strength, k);
  return {nd::add_scalar(evidence, 1.0), strength};
}

template nd::Var<float> to_evidence(nd::Var<float>);
template nd::Var<double> to_evidence(nd::Var<double>);
template std::pair<DirichletVar<float>, OpinionVar<float>> to_opinion(nd::Var<float>);
template std::pair<DirichletVar<double>, OpinionVar<double>> to_opinion(nd::Var<double>);
template FusionVar<float> ds_fuse(const OpinionVar<float>&, const OpinionVar<float>&);
template FusionVar<double> ds_fuse(const OpinionVar<double>&, const OpinionVar<double>&);
template DirichletVar<float> opinion_to_dirichlet(const OpinionVar<float>&);
template DirichletVar<double> opinion_to_dirichlet(const OpinionVar<double>&);

// ---------------------------------------------------------------------------
// Plain values

nd::Tensor64 to_evidence(const nd::Tensor64& raw) {
  nd::Graph<double> g;
  return to_evidence(g.constant(raw)).value();
}

std::pair<Dirichlet, Opinion> to_opinion(const nd::Tensor64& evidence) {
  nd::Graph<double> g;
  auto [dir, op] = to_opinion(g.constant(evidence));
  return {Dirichlet{dir.alpha.value(), dir.strength.value()},
          Opinion{op.belief.value(), op.uncertainty.value()}};
}

std::pair<Opinion, FusionDiagnostics> ds_fuse(const Opinion& gop, const Opinion& lop) {
  nd::Graph<double> g;
  const OpinionVar<double> gv{g.constant(gop.belief), g.constant(gop.uncertainty)};
  const OpinionVar<double> lv{g.constant(lop.belief), g.constant(lop.uncertainty)};
  auto fused = ds_fuse(gv, lv);
  FusionDiagnostics diag{fused.conflict.value(), fused.conflict.value()};
  for (auto& v : diag.renormalizer.data()) v = 1.0 - v;
  return {Opinion{fused.opinion.belief.value(), fused.opinion.uncertainty.value()}, std::move(diag)};
}

Dirichlet opinion_to_dirichlet(const Opinion& o) {
  nd::Graph<double> g;
  auto dir = opinion_to_dirichlet(OpinionVar<double>{g.constant(o.belief), g.constant(o.uncertainty)});
  return {dir.alpha.value(), dir.strength.value()};
}

Opinion opinion_from_raw(const nd::Tensor64& raw) {
  return to_opinion(to_evidence(raw)).second;
}

Prediction predict(const Opinion& o) {
  const std::size_t batch = o.batch(), k = o.classes();
  Prediction p;
  p.label.resize(batch);
  p.confidence.resize(batch);
  p.uncertainty.assign(o.uncertainty.data().begin(), o.uncertainty.data().end());
  for (std::size_t r = 0; r < batch; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (o.belief.at(r, c) > o.belief.at(r, best)) best = c;
    }
    p.label[r] = best;
    p.confidence[r] = o.belief.at(r, best);
  }
  return p;
}

void check_opinion(const Opinion& o, double tol) {
  if (o.belief.rank() != 2 || o.uncertainty.shape() != nd::Shape{o.belief.dim(0)}) {
    throw std::invalid_argument("opinion: belief must be [B,K] and uncertainty [B]");
  }
  for (std::size_t r = 0; r < o.batch(); ++r) {
    double total = o.uncertainty[r];
    if (!(o.uncertainty[r] > 0.0)) throw std::invalid_argument("opinion: uncertainty must be > 0");
    for (std::size_t c = 0; c < o.classes(); ++c) {
      if (o.belief.at(r, c) < 0.0) throw std::invalid_argument("opinion: negative belief mass");
      total += o.belief.at(r, c);
    }
    if (std::abs(total - 1.0) > tol) {
      throw std::invalid_argument("opinion: masses sum to " + std::to_string(total) + ", not 1");
    }
  }
}

}  // namespace trfeddis::evidential
