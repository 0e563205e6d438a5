#pragma once

#include <Eigen/Core>

#include <string>
#include <string_view>

namespace atlasnam::nn {

enum class Activation { kLinear, kGelu, kSoftplus, kGroupSort };

struct ActivationSpec {
  Activation kind = Activation::kLinear;
  int group_size = 2;  // only meaningful for GroupSort

  friend bool operator==(const ActivationSpec&, const ActivationSpec&) = default;
};

std::string to_string(Activation kind);
Activation activation_from_string(std::string_view tag);

double softplus(double z) noexcept;
double sigmoid(double z) noexcept;
double gelu(double z) noexcept;
double gelu_derivative(double z) noexcept;

/// Sorts each contiguous group of `group_size` rows ascending, independently per
/// column. `order` receives, for every output slot, the row index of the input
/// that landed there, so the backward pass can route gradients.
void group_sort(const Eigen::MatrixXd& in, int group_size, Eigen::MatrixXd& out,
                Eigen::MatrixXi& order);

}  // namespace atlasnam::nn
