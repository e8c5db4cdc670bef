#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace incflow {

/// Empirical quantile as the ceil(level * n)-th order statistic (1-based).
/// With this convention at least ceil(level * n) samples are <= the result,
/// which is what both conformal padding and the P95 spike threshold rely on.
inline double ceiling_quantile(std::span<const double> values, double level) {
    if (values.empty()) throw std::invalid_argument("ceiling_quantile: empty sample");
    if (!(level >= 0.0 && level <= 1.0)) throw std::invalid_argument("ceiling_quantile: level outside [0, 1]");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    // 1e-9 absorbs representation error in products like 0.95 * 100.
    auto rank = static_cast<std::ptrdiff_t>(std::ceil(level * n - 1e-9));
    rank = std::clamp<std::ptrdiff_t>(rank, 1, static_cast<std::ptrdiff_t>(sorted.size()));
    return sorted[static_cast<std::size_t>(rank - 1)];
}

/// 64-bit FNV-1a, used for manifest and parameter fingerprints.
class Fnv1a {
   public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) { update(s.data(), s.size()); }
    void update(double v) { update(&v, sizeof v); }
    std::uint64_t digest() const noexcept { return state_; }

   private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(std::string_view s) {
    Fnv1a h;
    h.update(s);
    return h.digest();
}

}  // namespace incflow
