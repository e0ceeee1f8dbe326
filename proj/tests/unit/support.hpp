#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "ctrip/data_model.hpp"
#include "ctrip/synthetic_cohort.hpp"

namespace testing {

// Scratch directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "ctrip") {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "_" + std::to_string(rd()) + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ctrip::SyntheticCohort small_cohort(int64_t n, std::uint64_t seed = 11, bool with_cmr = false) {
    ctrip::GeneratorConfig gc;
    gc.with_cmr = with_cmr;
    return ctrip::generate_cohort(n, seed, gc);
}

// Plain double-precision reference statistics.
inline double naive_mean(const std::vector<double>& x) {
    double s = 0;
    for (double v : x) s += v;
    return s / double(x.size());
}

inline double naive_pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = double(x.size());
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i], sy += y[i];
    }
    const double mx = sx / n, my = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace testing
