#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

namespace bredinger {

/// Exact accumulator for doubles. Each addend is written into a fixed-point
/// integer that spans the whole double range in 32-bit limbs, so the state is
/// the exact sum and value() depends only on the multiset of addends, never on
/// their order or grouping. Partial sums from different threads merge exactly.
class ExactSum {
 public:
  void add(double x) {
    if (x == 0.0) return;
    if (!std::isfinite(x)) {
      special_ += x;
      return;
    }
    const auto bits = std::bit_cast<std::uint64_t>(x);
    const int biased = static_cast<int>((bits >> 52) & 0x7ff);
    std::uint64_t mant = bits & ((std::uint64_t{1} << 52) - 1);
    int lsb = -1074;
    if (biased != 0) {
      mant |= std::uint64_t{1} << 52;
      lsb = biased - 1075;
    }
    const int pos = lsb - kBase;
    const std::size_t idx = static_cast<std::size_t>(pos / kBits);
    const unsigned __int128 v = static_cast<unsigned __int128>(mant) << (pos % kBits);
    const auto chunk = [&](int k) { return static_cast<std::int64_t>((v >> (32 * k)) & kMask); };
    if (bits >> 63) {
      limbs_[idx] -= chunk(0);
      limbs_[idx + 1] -= chunk(1);
      limbs_[idx + 2] -= chunk(2);
    } else {
      limbs_[idx] += chunk(0);
      limbs_[idx + 1] += chunk(1);
      limbs_[idx + 2] += chunk(2);
    }
    if (++pending_ >= kFlushEvery) normalize();
  }

  void add(const ExactSum& other) {
    ExactSum o = other;
    o.normalize();
    for (std::size_t i = 0; i < kLimbs; ++i) limbs_[i] += o.limbs_[i];
    special_ += o.special_;
    if (++pending_ >= kFlushEvery) normalize();
  }

  /// The exact sum rounded to double (faithful rounding).
  double value() const {
    if (special_ != 0.0 || std::isnan(special_)) return special_;
    ExactSum s = *this;
    s.normalize();
    double sign = 1.0;
    if (s.limbs_[kLimbs - 1] < 0) {
      sign = -1.0;
      for (auto& l : s.limbs_) l = -l;
      s.normalize();
    }
    std::size_t h = kLimbs;
    while (h > 0 && s.limbs_[h - 1] == 0) --h;
    if (h == 0) return 0.0;
    const std::size_t top = h - 1;
    const std::size_t low = top >= 2 ? top - 2 : 0;
    unsigned __int128 acc = 0;
    for (std::size_t i = top + 1; i-- > low;) acc = (acc << 32) | static_cast<std::uint64_t>(s.limbs_[i]);
    return sign * std::ldexp(static_cast<double>(acc), static_cast<int>(low) * kBits + kBase);
  }

  static double sum(std::span<const double> xs) {
    ExactSum s;
    for (double x : xs) s.add(x);
    return s.value();
  }

 private:
  static constexpr int kBits = 32;
  static constexpr int kBase = -1074;
  static constexpr std::size_t kLimbs = 70;
  static constexpr std::int64_t kMask = (std::int64_t{1} << 32) - 1;
  static constexpr int kFlushEvery = 1 << 29;

  // Carries so that every limb but the top one lies in [0, 2^32).
  void normalize() {
    for (std::size_t i = 0; i + 1 < kLimbs; ++i) {
      const std::int64_t carry = limbs_[i] >> kBits;
      limbs_[i] -= carry * (std::int64_t{1} << kBits);
      limbs_[i + 1] += carry;
    }
    pending_ = 0;
  }

  std::array<std::int64_t, kLimbs> limbs_{};
  double special_ = 0.0;
  int pending_ = 0;
};

}  // namespace bredinger
