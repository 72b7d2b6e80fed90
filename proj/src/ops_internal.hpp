#pragma once

#include <span>
#include <vector>

#include "vmim/tensor.hpp"

namespace vmim::detail {

// Validates operand shapes and evaluates the op. Never records.
Tensor forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs);

// Vector-Jacobian product for each input. Entries for inputs with
// needs[i] == false are left empty.
std::vector<std::vector<double>> vjp(OpKind kind, const std::vector<Tensor>& inputs,
                                     const Tensor& output, const OpAttrs& attrs,
                                     std::span<const double> grad_out,
                                     const std::vector<bool>& needs);

}  // namespace vmim::detail
