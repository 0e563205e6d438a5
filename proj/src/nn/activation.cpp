#include "atlasnam/nn/activation.hpp"

#include "atlasnam/error.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

namespace atlasnam::nn {

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::kLinear: return "linear";
    case Activation::kGelu: return "gelu";
    case Activation::kSoftplus: return "softplus";
    case Activation::kGroupSort: return "groupsort";
  }
  return "unknown";
}

Activation activation_from_string(std::string_view tag) {
  if (tag == "linear") return Activation::kLinear;
  if (tag == "gelu") return Activation::kGelu;
  if (tag == "softplus") return Activation::kSoftplus;
  if (tag == "groupsort") return Activation::kGroupSort;
  throw ConfigError("unknown activation tag '" + std::string(tag) + "'");
}

double softplus(double z) noexcept {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double gelu(double z) noexcept {
  return 0.5 * z * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
}

double gelu_derivative(double z) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(z * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + z * pdf;
}

void group_sort(const Eigen::MatrixXd& in, int group_size, Eigen::MatrixXd& out,
                Eigen::MatrixXi& order) {
  const Eigen::Index rows = in.rows();
  if (group_size < 1 || rows % group_size != 0) {
    throw ConfigError("GroupSort: width " + std::to_string(rows) +
                      " is not divisible by group size " + std::to_string(group_size));
  }
  out.resize(rows, in.cols());
  order.resize(rows, in.cols());
  if (group_size == 2) {
    for (Eigen::Index c = 0; c < in.cols(); ++c) {
      for (Eigen::Index r = 0; r < rows; r += 2) {
        const double a = in(r, c);
        const double b = in(r + 1, c);
        const bool swap = b < a;
        out(r, c) = swap ? b : a;
        out(r + 1, c) = swap ? a : b;
        order(r, c) = static_cast<int>(swap ? r + 1 : r);
        order(r + 1, c) = static_cast<int>(swap ? r : r + 1);
      }
    }
    return;
  }
  std::vector<int> idx(static_cast<std::size_t>(group_size));
  for (Eigen::Index c = 0; c < in.cols(); ++c) {
    for (Eigen::Index r = 0; r < rows; r += group_size) {
      std::iota(idx.begin(), idx.end(), static_cast<int>(r));
      std::stable_sort(idx.begin(), idx.end(),
                       [&](int lhs, int rhs) { return in(lhs, c) < in(rhs, c); });
      for (int g = 0; g < group_size; ++g) {
        out(r + g, c) = in(idx[static_cast<std::size_t>(g)], c);
        order(r + g, c) = idx[static_cast<std::size_t>(g)];
      }
    }
  }
}

}  // namespace atlasnam::nn
