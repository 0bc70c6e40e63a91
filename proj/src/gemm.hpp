#pragma once

#include <cstddef>

namespace medvit::detail {

/// C = alpha * op(A) * op(B) + beta * C, row-major, op = optional transpose.
/// A is m x k after op, B is k x n after op, C is m x n.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

}  // namespace medvit::detail
