#pragma once

#include <cstdint>

#include "trfeddis/autograd.hpp"
#include "trfeddis/specfun.hpp"

namespace trfeddis::testutil {

inline specfun::RngStream test_rng(std::uint64_t owner) {
  return specfun::RngStream(20240601, specfun::stream_key(specfun::StreamPurpose::kTest, owner));
}

inline nd::Tensor64 uniform_tensor(specfun::RngStream& rng, nd::Shape shape, double lo, double hi) {
  nd::Tensor64 t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline nd::Tensor64 normal_tensor(specfun::RngStream& rng, nd::Shape shape, double sigma = 1.0) {
  nd::Tensor64 t(std::move(shape));
  for (auto& v : t.data()) v = sigma * specfun::standard_normal(rng);
  return t;
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
inline nd::Var<double> project(nd::Var<double> v, std::uint64_t owner) {
  auto rng = test_rng(1000 + owner);
  auto w = normal_tensor(rng, v.shape());
  return nd::sum(v.graph().constant(std::move(w)) * v);
}

}  // namespace trfeddis::testutil
