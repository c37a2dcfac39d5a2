#pragma once

// Seeded RNG used for every stochastic operation in the library. Substreams
// are derived with splitmix64 so per-example corpus generation stays
// reproducible independent of scheduling.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace gmvae {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    std::uint64_t seed() const { return seed_; }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; the spare value is cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    std::uint64_t next_u64() { return gen_(); }

    // index in [0, n); modulo bias is negligible for the sizes used here
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }

    // independent generator for stream id; deterministic in (seed, id)
    Rng substream(std::uint64_t id) const {
        return Rng(splitmix64(seed_ ^ splitmix64(id + 0x517cc1b727220a95ULL)));
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace gmvae
