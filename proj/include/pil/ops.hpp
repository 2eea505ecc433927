#pragma once

#include <cstddef>

#include "pil/graph.hpp"

namespace pil {

enum class ConvAlgo {
  Direct,  ///< nested loops over output cells and taps
  Patch,   ///< unfolded patch matrix times weight matrix (im2col + GEMM)
};

/// 2-D cross-correlation. input [N,C,H,W], weight [F,C,kh,kw], bias [F] -> [N,F,H',W']
/// with H' = (H + 2 pad - kh) / stride + 1. No kernel flipping.
Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t pad,
           ConvAlgo algo = ConvAlgo::Patch);

/// Max pooling over k x k windows. Ties go to the first element in row-major
/// window order, and backward routes each output gradient to that element only.
Var maxpool2d(Var input, std::size_t k, std::size_t stride);

/// max(0, x); the subgradient at 0 is 0.
Var relu(Var input);

/// input [N,D] x weight [D,M] + bias [M].
Var fully_connected(Var input, Var weight, Var bias);

/// Hadamard product. `b` may also be [N,1,H,W] against `a` [N,C,H,W], in which
/// case it is broadcast over channels.
Var elementwise_mul(Var a, Var b);

/// Sum of squared entries as a [1] tensor.
Var sum_squares(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double factor);

Var reshape(Var a, Shape shape);
/// [N, ...] -> [N, prod(...)]
Var flatten(Var a);

}  // namespace pil
