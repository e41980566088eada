#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "hcl/autodiff.hpp"
#include "hcl/tensor.hpp"

namespace hcl {

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h for every element of x.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step);

/// |a-n| / max(|a|, |n|, floor).
double gradient_rel_error(double analytic, double numeric, double floor = 1e-6);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // location of the largest error
  std::size_t skipped = 0;  // entries rejected as kink points
};

/// Compares backprop through `loss` against central differences for a sample
/// of entries of every parameter (all entries when the parameter has at most
/// `per_param` of them). `loss` must rebuild the graph from current
/// parameter values and be deterministic.
///
/// With kink_tol > 0, an entry whose forward and backward one-sided slopes
/// differ by more than kink_tol (relative) sits within one step of a relu or
/// max-pool kink; it is skipped and another entry is drawn in its place.
GradCheckReport check_parameter_gradients(const std::function<ad::Var(ad::Graph&)>& loss,
                                          const std::vector<ad::Parameter*>& params, double step,
                                          std::size_t per_param, std::mt19937_64& rng, double kink_tol = 0.0);

/// Same, for the gradient with respect to a single input tensor.
GradCheckReport check_input_gradient(const std::function<ad::Var(ad::Graph&, ad::Var)>& loss, const Tensor& x,
                                     double step);

}  // namespace hcl
