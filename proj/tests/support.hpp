// Test-side reference implementations. Each one is written the slow, obvious
// way so it can serve as an oracle for the optimized library code.
#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>

#include "organpool/organpool.hpp"

namespace oracle {

using namespace organpool;

/// Every voxel within r of some set voxel, by direct pairwise distances.
inline MaskGrid brute_dilate(const MaskGrid& m, double r, const Spacing& sp) {
    const auto& s = m.shape();
    std::vector<std::array<std::size_t, 3>> set;
    for (std::size_t z = 0; z < s.d; ++z)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x)
                if (m.at(z, y, x)) set.push_back({z, y, x});
    MaskGrid out(s);
    const double r2 = r * r;
    for (std::size_t z = 0; z < s.d; ++z)
        for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t x = 0; x < s.w; ++x) {
                for (const auto& p : set) {
                    const double dz = (double(z) - double(p[0])) * sp.z;
                    const double dy = (double(y) - double(p[1])) * sp.y;
                    const double dx = (double(x) - double(p[2])) * sp.x;
                    if (dz * dz + dy * dy + dx * dx <= r2 + 1e-9 * std::max(r2, 1.0)) {
                        out.at(z, y, x) = 1;
                        break;
                    }
                }
            }
    return out;
}

/// O(P*N) pair count with half credit for ties.
inline std::optional<double> pairwise_auroc(std::span<const double> s, std::span<const std::int8_t> y) {
    std::uint64_t twice = 0, p = 0, n = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] == 1) ++p;
        if (y[i] == 0) ++n;
    }
    if (p == 0 || n == 0) return std::nullopt;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j] != 0) continue;
            twice += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
        }
    }
    return double(twice) / (2.0 * double(p) * double(n));
}

/// Average precision by recounting the confusion at every distinct score.
inline std::optional<double> exhaustive_ap(std::span<const double> s, std::span<const std::int8_t> y) {
    std::vector<double> cuts;
    std::size_t total = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] == -1) continue;
        cuts.push_back(s[i]);
        total += y[i] == 1;
    }
    if (total == 0) return std::nullopt;
    std::sort(cuts.begin(), cuts.end(), std::greater<>());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    const double p = double(total);
    double ap = 0.0;
    std::size_t prev = 0;
    for (double t : cuts) {
        std::size_t tp = 0, seen = 0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (y[i] == -1 || s[i] < t) continue;
            ++seen;
            tp += y[i] == 1;
        }
        if (tp != prev) ap += (double(tp) / p - double(prev) / p) * (double(tp) / double(seen));
        prev = tp;
    }
    return ap;
}

struct BestThreshold {
    double theta = 0.5;
    double f1 = 0.0;
};

/// Best F1 over {0, 1} and all midpoints of distinct observed probabilities,
/// each scored by a fresh count; smallest threshold wins ties.
inline BestThreshold exhaustive_threshold(std::span<const double> p, std::span<const std::int8_t> y) {
    std::vector<double> v;
    for (std::size_t i = 0; i < p.size(); ++i)
        if (y[i] != -1) v.push_back(p[i]);
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    std::vector<double> cand{0.0, 1.0};
    for (std::size_t i = 1; i < v.size(); ++i) cand.push_back(0.5 * (v[i - 1] + v[i]));
    std::sort(cand.begin(), cand.end());
    BestThreshold best{cand.front(), -1.0};
    for (double t : cand) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (y[i] == -1) continue;
            const bool pred = p[i] >= t;
            if (pred && y[i] == 1) ++tp;
            if (pred && y[i] == 0) ++fp;
            if (!pred && y[i] == 1) ++fn;
        }
        const std::size_t den = 2 * tp + fp + fn;
        const double f1 = den == 0 ? 0.0 : double(2 * tp) / double(den);
        if (f1 > best.f1) best = {t, f1};
    }
    return best;
}

/// Temperature minimizing mean BCE over a dense log grid on [0.05, 20].
inline double grid_temperature(std::span<const double> z, std::span<const std::int8_t> y, std::size_t points = 4001) {
    const double lo = std::log(0.05), hi = std::log(20.0);
    double best_t = 1.0, best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < points; ++k) {
        const double t = std::exp(lo + (hi - lo) * double(k) / double(points - 1));
        double s = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (y[i] == -1) continue;
            const double q = z[i] / t;
            s += std::max(q, 0.0) - q * y[i] + std::log1p(std::exp(-std::abs(q)));
            ++n;
        }
        if (s / double(n) < best) {
            best = s / double(n);
            best_t = t;
        }
    }
    return best_t;
}

}  // namespace oracle

namespace testutil {

/// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("organpool-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    static int& counter() {
        static int n = 0;
        return n;
    }
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Random mask with roughly `density` of cells set.
inline std::vector<std::uint8_t> random_mask(organpool::CounterRng& rng, std::size_t n, double density) {
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) v = rng.bernoulli(density) ? 1 : 0;
    return m;
}

inline organpool::Matrix random_matrix(organpool::CounterRng& rng, std::size_t rows, std::size_t cols) {
    organpool::Matrix m(rows, cols);
    for (auto& v : m.values()) v = rng.normal();
    return m;
}

struct ScoredInstance {
    std::vector<double> scores;
    std::vector<std::int8_t> targets;
};

/// Up to `max_n` scores with deliberate ties (half the instances draw from a
/// coarse grid) and roughly 15% missing targets.
inline ScoredInstance random_instance(organpool::CounterRng& rng, std::size_t max_n = 200) {
    ScoredInstance x;
    const std::size_t n = 1 + rng.below(max_n);
    const bool coarse = rng.bernoulli(0.5);
    const double pos_rate = rng.uniform(0.05, 0.95);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform();
        const std::int8_t y = u < 0.15 ? -1 : (rng.bernoulli(pos_rate) ? 1 : 0);
        const double shift = y == 1 ? 0.7 : 0.0;
        double s = rng.normal() + shift;
        if (coarse) s = std::round(s * 2.0) / 2.0;
        x.scores.push_back(1.0 / (1.0 + std::exp(-s)));
        x.targets.push_back(y);
    }
    return x;
}

/// Small synth spec for pipeline tests that must stay fast.
inline organpool::SynthSpec tiny_synth() {
    organpool::SynthSpec s;
    s.n_train = 40;
    s.n_val = 20;
    s.n_test = 20;
    return s;
}

}  // namespace testutil
