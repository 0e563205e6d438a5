#include "atlasnam/gaussian.hpp"

#include "atlasnam/error.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace atlasnam {

double GaussianParams::stddev() const { return std::sqrt(variance); }

double nll_loss(const GaussianParams& params, double y) {
  if (!(params.variance > 0.0)) {
    throw DomainError("nll_loss: variance must be > 0, got " + std::to_string(params.variance));
  }
  const double r = y - params.mean;
  return 0.5 * std::log(2.0 * std::numbers::pi * params.variance) +
         r * r / (2.0 * params.variance);
}

double gaussian_cdf(double y, const GaussianParams& params) {
  if (!(params.variance > 0.0)) {
    throw DomainError("gaussian_cdf: variance must be > 0, got " + std::to_string(params.variance));
  }
  return 0.5 * (1.0 + std::erf((y - params.mean) / std::sqrt(2.0 * params.variance)));
}

}  // namespace atlasnam
