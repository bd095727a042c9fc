// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

// ---------------------------------------------------------------------------
// Multiply-add accounting.
//
// Every tensor operation adds its nominal multiply-add count to a thread-local
// counter: matmul (r x k)(k x c) adds r*k*c, elementwise products add the
// number of products, scalar scaling adds the element count, factorizations
// and triangular solves add the closed-form counts of the reference
// algorithms below. Pure data movement (transpose, unfold, copies) and
// additive reductions add nothing, and diagnostic eigenvalue computations are
// deliberately not counted: they are lab instrumentation, not optimizer cost.
//
// The counter is thread-local so operations stay pure and thread-safe, and so
// two identical call sequences always report identical counts.
// ---------------------------------------------------------------------------

namespace tengrad::flops {

// Current thread's cumulative multiply-add count.
std::uint64_t count() noexcept;

void reset() noexcept;

void add(std::uint64_t madds) noexcept;

// Reads the counter at construction; elapsed() gives the delta since then.
class Meter {
public:
    Meter() : start_(count()) {}
    std::uint64_t elapsed() const noexcept { return count() - start_; }

private:
    std::uint64_t start_;
};

// Closed-form multiply-add count of the reference right-looking Cholesky of
// an m x m matrix: (m^3 - m)/6 inner-product terms, m(m-1)/2 column updates,
// m divisions.
constexpr std::uint64_t cholesky_madds(std::size_t m) noexcept {
    const std::uint64_t n = m;
    return (n * n * n - n) / 6 + n * (n - 1) / 2 + n;
}

// Forward + backward substitution against a Cholesky factor, per right-hand
// side: m(m-1) inner-product terms plus 2m divisions.
constexpr std::uint64_t trisolve_madds(std::size_t m, std::size_t rhs) noexcept {
    const std::uint64_t n = m;
    return rhs * (n * n + n);
}

}  // namespace tengrad::flops
