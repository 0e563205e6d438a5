#pragma once

namespace atlasnam {

/// Mean and variance of a univariate Gaussian, in response units.
struct GaussianParams {
  double mean = 0.0;
  double variance = 1.0;

  double stddev() const;
};

/// 1/2 log(2 pi v) + (y - m)^2 / (2 v). Throws DomainError when v <= 0.
double nll_loss(const GaussianParams& params, double y);

/// 1/2 [1 + erf((y - m) / sqrt(2 v))].
double gaussian_cdf(double y, const GaussianParams& params);

}  // namespace atlasnam
