// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace gdl {

// Counter-based deterministic generator (Philox4x32-10).
//
// Every consumer derives its own stream from a root seed plus a purpose
// string ("data", "init.teacher", "chain.noise", ...), so adding or
// reordering consumers never perturbs another stream's draws. A stream is
// identified by a 64-bit id mixed from the parent stream id and the purpose
// string; the 128-bit Philox counter is (draw index, stream id).
class Rng {
  public:
    Rng(std::uint64_t seed, std::string_view purpose);

    // Independent child stream; the parent is unaffected.
    Rng split(std::string_view purpose) const;

    std::uint64_t next_u64();
    double uniform();                      // [0, 1)
    double uniform(double lo, double hi);  // [lo, hi)
    double normal();                       // standard Gaussian
    std::uint64_t below(std::uint64_t n);  // unbiased draw from [0, n)
    int range_int(int lo, int hi);         // inclusive bounds

    std::uint64_t stream_id() const { return stream_; }

    // One Philox4x32-10 block; exposed for known-answer tests.
    static std::array<std::uint32_t, 4> philox_block(
        const std::array<std::uint32_t, 4>& counter,
        const std::array<std::uint32_t, 2>& key);

  private:
    void refill();

    std::array<std::uint32_t, 2> key_{};
    std::uint64_t stream_ = 0;
    std::uint64_t draw_counter_ = 0;
    std::array<std::uint32_t, 4> block_{};
    int block_pos_ = 4;  // exhausted
    double pending_normal_ = 0.0;
    bool has_pending_normal_ = false;
};

}  // namespace gdl
