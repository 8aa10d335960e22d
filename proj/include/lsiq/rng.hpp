#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "lsiq/matrix.hpp"

namespace lsiq {

// Seeded random stream with hand-rolled transforms. std::* distributions are
// implementation-defined, so uniform/normal/int mappings are written out here
// to keep one seed producing one sequence everywhere.
class RandomStream {
  public:
    explicit RandomStream(uint64_t seed) : eng_(seed) {}

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via the polar method
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        have_spare_ = true;
        return u * f;
    }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    uint64_t raw() { return eng_(); }

    Matrix gaussian_matrix(int rows, int cols, double scale = 1.0) {
        Matrix m(rows, cols);
        for (double& x : m.data) x = normal() * scale;
        return m;
    }

    Matrix uniform_matrix(int rows, int cols, double lo, double hi) {
        Matrix m(rows, cols);
        for (double& x : m.data) x = uniform(lo, hi);
        return m;
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline RandomStream seeded_rng(uint64_t seed) { return RandomStream(seed); }

} // namespace lsiq
