// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace maskgru {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is handed out
/// by index, so results written to slot i do not depend on scheduling. The
/// first exception thrown by any call is rethrown after all workers join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Worker count from MASKGRU_THREADS, else `fallback`. Invalid values are ignored.
std::size_t default_thread_count(std::size_t fallback = 1);

/// Child seed for stream `index` of `seed`, mixed through std::seed_seq.
/// `tag` separates independent uses of the same (seed, index) pair.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index, std::uint32_t tag = 0);

}  // namespace maskgru
