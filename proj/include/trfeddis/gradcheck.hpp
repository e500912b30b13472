#pragma once

#include <functional>

#include "trfeddis/autograd.hpp"

namespace trfeddis::nd {

/// A scalar-valued function of one tensor, built on a fresh graph each call.
using ScalarFn = std::function<Var<double>(Graph<double>&, Var<double>)>;

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-8),
/// where `central` is the symmetric difference quotient with step `eps`.
double grad_check(const ScalarFn& f, const Tensor64& point, double eps = 1e-4);

}  // namespace trfeddis::nd
