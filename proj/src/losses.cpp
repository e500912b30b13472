#include "trfeddis/losses.hpp"

#include <algorithm>
#include <string>

#include "trfeddis/evidential.hpp"
#include "trfeddis/specfun.hpp"

namespace trfeddis::losses {

double anneal(const AnnealSchedule& schedule, std::size_t step) {
  if (schedule.ramp_steps == 0) return schedule.target;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(schedule.ramp_steps));
  return frac * schedule.target;
}

namespace {

template <typename T>
void check_onehot(const nd::Var<T>& x, const nd::BasicTensor<T>& y, const char* op) {
  if (x.shape().size() != 2 || x.shape() != y.shape()) {
    throw nd::ShapeError(std::string(op) + ": labels " + nd::to_string(y.shape()) +
                         " do not match " + nd::to_string(x.shape()));
  }
  const std::size_t k = y.dim(1);
  for (std::size_t r = 0; r < y.dim(0); ++r) {
    int ones = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const T v = y.at(r, c);
      if (v == T(1)) {
        ++ones;
      } else if (v != T(0)) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw std::invalid_argument(std::string(op) + ": label row is not one-hot");
  }
}

template <typename T>
void check_alpha(const nd::Var<T>& alpha, const char* op) {
  for (auto a : alpha.value().data()) {
    if (!(a >= T(1))) throw std::invalid_argument(std::string(op) + ": alpha must be >= 1");
  }
}

template <typename T>
nd::Var<T> batch_mean_of_rows(nd::Var<T> per_sample) {
  return nd::mean(per_sample);
}

}  // namespace

template <typename T>
nd::BasicTensor<T> one_hot(std::span<const std::size_t> labels, std::size_t k) {
  nd::BasicTensor<T> y(nd::Shape{labels.size(), k});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= k) {
      throw std::out_of_range("one_hot: label " + std::to_string(labels[r]) + " >= " + std::to_string(k));
    }
    y.at(r, labels[r]) = T(1);
  }
  return y;
}

template <typename T>
nd::Var<T> cross_entropy(nd::Var<T> probs, const nd::BasicTensor<T>& onehot) {
  check_onehot(probs, onehot, "cross_entropy");
  auto& g = probs.graph();
  auto logp = nd::log(probs, kLogFloor);
  return -batch_mean_of_rows(nd::row_sum(g.constant(onehot) * logp));
}

template <typename T>
nd::Var<T> dce_loss(nd::Var<T> alpha, const nd::BasicTensor<T>& onehot) {
  check_onehot(alpha, onehot, "dce_loss");
  check_alpha(alpha, "dce_loss");
  auto& g = alpha.graph();
  const std::size_t k = onehot.dim(1);
  auto strength = nd::row_sum(alpha);
  auto gap = nd::expand_cols(nd::digamma(strength), k) - nd::digamma(alpha);
  return batch_mean_of_rows(nd::row_sum(g.constant(onehot) * gap));
}

template <typename T>
nd::Var<T> kl_regularizer(nd::Var<T> alpha, const nd::BasicTensor<T>& onehot) {
  check_onehot(alpha, onehot, "kl_regularizer");
  check_alpha(alpha, "kl_regularizer");
  auto& g = alpha.graph();
  const std::size_t batch = onehot.dim(0), k = onehot.dim(1);
  nd::BasicTensor<T> off = onehot;
  for (auto& v : off.data()) v = T(1) - v;
  auto adjusted = g.constant(off) * alpha + g.constant(onehot);
  auto strength = nd::row_sum(adjusted);
  auto log_norm = nd::lgamma(strength) - nd::row_sum(nd::lgamma(adjusted));
  auto lgamma_k = g.constant(nd::BasicTensor<T>({batch}, static_cast<T>(specfun::lgamma(static_cast<double>(k)))));
  auto gap = nd::digamma(adjusted) - nd::expand_cols(nd::digamma(strength), k);
  auto cross = nd::row_sum(nd::add_scalar(adjusted, -1.0) * gap);
  return batch_mean_of_rows(log_norm - lgamma_k + cross);
}

template <typename T>
nd::Var<T> uncertainty_loss(nd::Var<T> alpha, const nd::BasicTensor<T>& onehot, double lambda_u) {
  if (lambda_u < 0.0) throw std::invalid_argument("uncertainty_loss: lambda_u must be >= 0");
  auto dce = dce_loss(alpha, onehot);
  if (lambda_u == 0.0) return dce;
  return dce + nd::scale(kl_regularizer(alpha, onehot), lambda_u);
}

template <typename T>
nd::Var<T> disentangle_loss(nd::Var<T> raw_global, nd::Var<T> raw_local) {
  if (raw_global.shape() != raw_local.shape() || raw_global.shape().size() != 2) {
    throw nd::ShapeError("disentangle_loss: head outputs must share a [B,K] shape");
  }
  auto p = nd::softmax(raw_local);
  auto q = nd::softmax(raw_global);
  auto kl = nd::row_sum(p * (nd::log(p, kLogFloor) - nd::log(q, kLogFloor)));
  return batch_mean_of_rows(nd::exp(-kl));
}

template <typename T>
LossResult<T> total_loss(nd::Var<T> raw_global, nd::Var<T> raw_local,
                         const nd::BasicTensor<T>& onehot, std::size_t step,
                         const Objective& objective) {
  LossBreakdown br;
  auto value = [](const nd::Var<T>& v) { return static_cast<double>(v.value().item()); };

  if (!objective.dual_head) {
    auto ce = cross_entropy(nd::softmax(raw_global), onehot);
    br.l_ce_global = value(ce);
    br.l_total = value(ce);
    return {ce, br};
  }
  if (raw_global.shape() != raw_local.shape()) {
    throw nd::ShapeError("total_loss: head outputs differ in shape");
  }

  nd::Var<T> total;
  auto accumulate = [&total](nd::Var<T> term) { total = total.valid() ? total + term : term; };

  if (objective.enable_un) {
    br.lambda_u = anneal(objective.lambda_u, step);
    auto [dir_g, op_g] = evidential::to_opinion(evidential::to_evidence(raw_global));
    auto [dir_l, op_l] = evidential::to_opinion(evidential::to_evidence(raw_local));
    auto fused = evidential::ds_fuse(op_g, op_l);
    auto dir_f = evidential::opinion_to_dirichlet(fused.opinion);
    auto un_g = uncertainty_loss(dir_g.alpha, onehot, br.lambda_u);
    auto un_l = uncertainty_loss(dir_l.alpha, onehot, br.lambda_u);
    auto un_f = uncertainty_loss(dir_f.alpha, onehot, br.lambda_u);
    br.l_un_global = value(un_g);
    br.l_un_local = value(un_l);
    br.l_un_fused = value(un_f);
    accumulate(nd::scale(un_g, objective.weight_un_global));
    accumulate(nd::scale(un_l, objective.weight_un_local));
    accumulate(nd::scale(un_f, objective.weight_un_fused));
  } else {
    auto ce_f = cross_entropy(nd::softmax(raw_global + raw_local), onehot);
    br.l_ce_fused = value(ce_f);
    accumulate(ce_f);
  }

  if (objective.enable_ce) {
    auto ce_g = cross_entropy(nd::softmax(raw_global), onehot);
    auto ce_l = cross_entropy(nd::softmax(raw_local), onehot);
    br.l_ce_global = value(ce_g);
    br.l_ce_local = value(ce_l);
    accumulate(ce_g);
    accumulate(ce_l);
  }

  auto dis = disentangle_loss(raw_global, raw_local);
  br.l_dis = value(dis);
  if (objective.enable_dis) {
    br.lambda_d = anneal(objective.lambda_d, step);
    if (br.lambda_d > 0.0) accumulate(nd::scale(dis, br.lambda_d));
  }

  br.l_total = value(total);
  return {total, br};
}

#define TRFEDDIS_INSTANTIATE_LOSSES(T)                                                             \
  template nd::BasicTensor<T> one_hot<T>(std::span<const std::size_t>, std::size_t);              \
  template nd::Var<T> cross_entropy(nd::Var<T>, const nd::BasicTensor<T>&);                        \
  template nd::Var<T> dce_loss(nd::Var<T>, const nd::BasicTensor<T>&);                             \
  template nd::Var<T> kl_regularizer(nd::Var<T>, const nd::BasicTensor<T>&);                       \
  template nd::Var<T> uncertainty_loss(nd::Var<T>, const nd::BasicTensor<T>&, double);             \
  template nd::Var<T> disentangle_loss(nd::Var<T>, nd::Var<T>);                                    \
  template LossResult<T> total_loss(nd::Var<T>, nd::Var<T>, const nd::BasicTensor<T>&, std::size_t, \
                                    const Objective&);

TRFEDDIS_INSTANTIATE_LOSSES(float)
TRFEDDIS_INSTANTIATE_LOSSES(double)

#undef TRFEDDIS_INSTANTIATE_LOSSES

}  // namespace trfeddis::losses
