// SPDX-License-Identifier: Apache-2.0
#include "tengrad/flops.hpp"

namespace tengrad::flops {

namespace {
thread_local std::uint64_t g_madds = 0;
}

std::uint64_t count() noexcept { return g_madds; }

void reset() noexcept { g_madds = 0; }

void add(std::uint64_t madds) noexcept { g_madds += madds; }

}  // namespace tengrad::flops
