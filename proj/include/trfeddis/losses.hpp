#pragma once

#include <cstddef>
#include <span>

#include "trfeddis/autograd.hpp"

namespace trfeddis::losses {

/// Linear ramp from 0 to `target` over `ramp_steps` optimization steps.
struct AnnealSchedule {
  double target = 0.0;
  std::size_t ramp_steps = 0;
};

/// min(step / ramp_steps, 1) * target; `target` immediately if ramp_steps == 0.
double anneal(const AnnealSchedule& schedule, std::size_t step);

/// Lower clamp applied to probabilities before taking logs.
inline constexpr double kLogFloor = 1e-12;

/// [B,K] one-hot rows from class indices; throws on labels >= k.
template <typename T>
nd::BasicTensor<T> one_hot(std::span<const std::size_t> labels, std::size_t k);

/// Batch mean of -sum_k y_k log p_k.
template <typename T>
nd::Var<T> cross_entropy(nd::Var<T> probs, const nd::BasicTensor<T>& onehot);

/// Batch mean of sum_k y_k (digamma(S) - digamma(alpha_k)): the expected
/// cross-entropy under Dir(alpha).
template <typename T>
nd::Var<T> dce_loss(nd::Var<T> alpha, const nd::BasicTensor<T>& onehot);

/// Batch mean of KL(Dir(alpha_tilde) || Dir(1)) with alpha_tilde = y + (1-y)*alpha,
/// i.e. only evidence for wrong classes is penalized.
template <typename T>
nd::Var<T> kl_regularizer(nd::Var<T> alpha, const nd::BasicTensor<T>& onehot);

/// dce_loss + lambda_u * kl_regularizer.
template <typename T>
nd::Var<T> uncertainty_loss(nd::Var<T> alpha, const nd::BasicTensor<T>& onehot, double lambda_u);

/// Batch mean of exp(-KL(P || Q)) with P = softmax(local), Q = softmax(global)
/// per sample. Minimizing it pushes the two heads' distributions apart.
template <typename T>
nd::Var<T> disentangle_loss(nd::Var<T> raw_global, nd::Var<T> raw_local);

/// Which terms the client objective contains.
struct Objective {
  bool dual_head = true;   // false: single softmax head trained with CE
  bool enable_dis = true;  // lambda_d * L_dis
  bool enable_un = true;   // evidential fusion with L_un on global, local and fused
                           // branches; when off the heads are fused by summing logits
  bool enable_ce = true;   // per-head CE on the decoupled outputs
  double weight_un_global = 1.0;
  double weight_un_local = 1.0;
  double weight_un_fused = 1.0;
  AnnealSchedule lambda_u{1.0, 0};
  AnnealSchedule lambda_d{0.1, 0};
};

struct LossBreakdown {
  double l_un_global = 0.0;
  double l_un_local = 0.0;
  double l_un_fused = 0.0;
  double l_ce_global = 0.0;
  double l_ce_local = 0.0;
  double l_ce_fused = 0.0;  // CE on summed logits (non-evidential fusion only)
  double l_dis = 0.0;       // unweighted
  double lambda_u = 0.0;
  double lambda_d = 0.0;    // 0 when the term is disabled
  double l_total = 0.0;
};

template <typename T>
struct LossResult {
  nd::Var<T> total;
  LossBreakdown breakdown;
};

/// Assembles the client objective for one batch. `raw_local` is ignored (and
/// may be invalid) when objective.dual_head is false.
template <typename T>
LossResult<T> total_loss(nd::Var<T> raw_global, nd::Var<T> raw_local,
                         const nd::BasicTensor<T>& onehot, std::size_t step,
                         const Objective& objective);

}  // namespace trfeddis::losses
