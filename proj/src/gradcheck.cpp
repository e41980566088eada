#include "hcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "hcl/ops.hpp"

namespace hcl {

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_difference_grad: step must be positive");
  PrecisionScope f64(Precision::F64);
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = f(probe);
    probe[i] = x[i] - step;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double gradient_rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport check_parameter_gradients(const std::function<ad::Var(ad::Graph&)>& loss,
                                          const std::vector<ad::Parameter*>& params, double step,
                                          std::size_t per_param, std::mt19937_64& rng, double kink_tol) {
  PrecisionScope f64(Precision::F64);
  ad::Graph g;
  const auto root = loss(g);
  const auto grads = g.backprop(root);
  const double base = g.value(root).item();

  auto eval = [&loss] {
    ad::Graph probe;
    return probe.value(loss(probe)).item();
  };

  GradCheckReport report;
  for (auto* p : params) {
    const Tensor* analytic = grads.find(*p);
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > per_param) std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t accepted = 0;
    for (auto i : idx) {
      if (accepted == per_param) break;
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double up = eval();
      p->value[i] = saved - step;
      const double down = eval();
      p->value[i] = saved;
      if (kink_tol > 0 && gradient_rel_error((up - base) / step, (base - down) / step) > kink_tol) {
        ++report.skipped;
        continue;
      }
      ++accepted;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic ? (*analytic)[i] : 0.0;
      const double err = gradient_rel_error(a, numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

GradCheckReport check_input_gradient(const std::function<ad::Var(ad::Graph&, ad::Var)>& loss, const Tensor& x,
                                     double step) {
  PrecisionScope f64(Precision::F64);
  ad::Graph g;
  const auto in = g.input(x);
  const auto grads = g.backprop(loss(g, in));
  const auto numeric = finite_difference_grad(
      [&loss](const Tensor& probe) {
        ad::Graph pg;
        return pg.value(loss(pg, pg.constant(probe))).item();
      },
      x, step);
  const auto& analytic = grads.of(in);
  GradCheckReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double err = gradient_rel_error(analytic[i], numeric[i]);
    ++report.checked;
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = "input[" + std::to_string(i) + "]";
    }
  }
  return report;
}

}  // namespace hcl
