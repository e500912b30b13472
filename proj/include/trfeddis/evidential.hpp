#pragma once

// Subjective-logic opinions over K classes: Softplus evidence, Dirichlet
// parameters alpha = e + 1, belief masses b_k = e_k / S and uncertainty
// u = K / S, and the two-source Dempster-Shafer combination of opinions.
//
// Every operation has a differentiable form over graph variables and a plain
// form over double tensors; the plain form runs the differentiable one on a
// throwaway graph, so both share one implementation.

#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "trfeddis/autograd.hpp"

namespace trfeddis::evidential {

class FusionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Conflict at or above this is treated as total and rejected.
inline constexpr double kMaxConflict = 1.0 - 1e-12;

template <typename T>
struct DirichletVar {
  nd::Var<T> alpha;     // [B,K], >= 1
  nd::Var<T> strength;  // [B], sum of alpha
};

template <typename T>
struct OpinionVar {
  nd::Var<T> belief;       // [B,K]
  nd::Var<T> uncertainty;  // [B]
};

template <typename T>
struct FusionVar {
  OpinionVar<T> opinion;
  nd::Var<T> conflict;  // [B]
};

template <typename T> nd::Var<T> to_evidence(nd::Var<T> raw);
template <typename T> std::pair<DirichletVar<T>, OpinionVar<T>> to_opinion(nd::Var<T> evidence);
template <typename T> FusionVar<T> ds_fuse(const OpinionVar<T>& g, const OpinionVar<T>& l);
template <typename T> DirichletVar<T> opinion_to_dirichlet(const OpinionVar<T>& o);

// ---------------------------------------------------------------------------
// Plain values

struct Dirichlet {
  nd::Tensor64 alpha;     // [B,K]
  nd::Tensor64 strength;  // [B]
};

struct Opinion {
  nd::Tensor64 belief;       // [B,K]
  nd::Tensor64 uncertainty;  // [B]

  std::size_t batch() const { return belief.dim(0); }
  std::size_t classes() const { return belief.dim(1); }
};

struct FusionDiagnostics {
  nd::Tensor64 conflict;      // [B]
  nd::Tensor64 renormalizer;  // [B], 1 - conflict
};

struct Prediction {
  std::vector<std::size_t> label;
  std::vector<double> confidence;  // winning belief mass
  std::vector<double> uncertainty;
};

nd::Tensor64 to_evidence(const nd::Tensor64& raw);
std::pair<Dirichlet, Opinion> to_opinion(const nd::Tensor64& evidence);
std::pair<Opinion, FusionDiagnostics> ds_fuse(const Opinion& g, const Opinion& l);
Dirichlet opinion_to_dirichlet(const Opinion& o);

/// Opinion of raw head outputs: Softplus, then Dirichlet masses.
Opinion opinion_from_raw(const nd::Tensor64& raw);

/// Argmax belief per sample; ties go to the lowest class index.
Prediction predict(const Opinion& o);

/// Throws std::invalid_argument unless b >= 0, u > 0 and u + sum(b) = 1 within `tol`.
void check_opinion(const Opinion& o, double tol = 1e-9);

}  // namespace trfeddis::evidential
