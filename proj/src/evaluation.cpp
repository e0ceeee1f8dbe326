#include "ctrip/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "ctrip/error.hpp"
#include "ctrip/util.hpp"

namespace ctrip {

namespace {

void check_paired(const std::vector<double>& a, const std::vector<double>& b, std::size_t min_n) {
    if (a.size() != b.size())
        throw ConfigError("length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    if (a.size() < min_n) throw ConfigError("need at least " + std::to_string(min_n) + " pairs");
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

// Linear interpolation between order statistics.
double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * double(sorted.size() - 1);
    const auto lo = std::size_t(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double w = pos - double(lo);
    return sorted[lo] + w * (sorted[hi] - sorted[lo]);
}

std::vector<double> column(const torch::Tensor& m, int64_t k) {
    auto c = m.select(1, k).to(torch::kFloat64).contiguous();
    return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

}  // namespace

double mean_difference(const std::vector<double>& y_pred, const std::vector<double>& y_true) {
    check_paired(y_pred, y_true, 2);
    double s = 0.0;
    for (std::size_t i = 0; i < y_pred.size(); ++i) s += y_pred[i] - y_true[i];
    return s / double(y_pred.size());
}

std::pair<double, double> limits_of_agreement(const std::vector<double>& y_pred, const std::vector<double>& y_true) {
    check_paired(y_pred, y_true, 3);
    const double md = mean_difference(y_pred, y_true);
    double ss = 0.0;
    for (std::size_t i = 0; i < y_pred.size(); ++i) {
        const double d = (y_pred[i] - y_true[i]) - md;
        ss += d * d;
    }
    const double sd = std::sqrt(ss / double(y_pred.size() - 1));
    return {md - 1.96 * sd, md + 1.96 * sd};
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
    check_paired(x, y, 3);
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) throw ConfigError("undefined correlation");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::pair<double, double> bootstrap_ci(const PairedStatistic& statistic, const std::vector<double>& y_pred,
                                       const std::vector<double>& y_true, int n_resamples, std::uint64_t seed) {
    check_paired(y_pred, y_true, 10);
    if (n_resamples < 1) throw ConfigError("bootstrap needs at least one resample");
    Rng rng(seed);
    const std::size_t n = y_pred.size();
    std::vector<double> stats, a(n), b(n);
    stats.reserve(std::size_t(n_resamples));
    for (int r = 0; r < n_resamples; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto j = uniform_index(rng, n);
            a[i] = y_pred[j];
            b[i] = y_true[j];
        }
        // Degenerate resamples (e.g. constant vectors for a correlation) are dropped.
        try {
            const double v = statistic(a, b);
            if (std::isfinite(v)) stats.push_back(v);
        } catch (const ConfigError&) {
        }
    }
    if (stats.empty()) throw ConfigError("every bootstrap resample was degenerate");
    std::sort(stats.begin(), stats.end());
    return {quantile(stats, 0.025), quantile(stats, 0.975)};
}

nlohmann::json PhenotypeAgreement::to_json() const {
    auto iv = [](const Interval& i) { return nlohmann::json::array({i.low, i.high}); };
    return {{"n", n},
            {"md", md},
            {"loa_low", loa_low},
            {"loa_high", loa_high},
            {"pearson_r", pearson_r},
            {"bootstrap_ci_95", {{"md", iv(md_ci)},
                                 {"loa_low", iv(loa_low_ci)},
                                 {"loa_high", iv(loa_high_ci)},
                                 {"pearson_r", iv(pearson_r_ci)}}}};
}

std::vector<PhenotypeAgreement> agreement(const torch::Tensor& pred, const torch::Tensor& truth,
                                          const std::vector<std::string>& names, std::uint64_t seed,
                                          int n_resamples) {
    if (pred.sizes() != truth.sizes() || pred.dim() != 2)
        throw ConfigError("prediction and truth matrices must have equal [n, k] shapes");
    if (pred.size(1) != int64_t(names.size())) throw ConfigError("phenotype name count does not match columns");
    std::vector<PhenotypeAgreement> out;
    for (int64_t k = 0; k < pred.size(1); ++k) {
        const auto p = column(pred, k), t = column(truth, k);
        PhenotypeAgreement a;
        a.phenotype = names[std::size_t(k)];
        a.n = int64_t(p.size());
        a.md = mean_difference(p, t);
        std::tie(a.loa_low, a.loa_high) = limits_of_agreement(p, t);
        a.pearson_r = pearson_r(p, t);
        if (p.size() >= 10) {
            const auto s = stream_seed(seed, std::uint64_t(k));
            auto set = [&](Interval& iv, const PairedStatistic& f) {
                std::tie(iv.low, iv.high) = bootstrap_ci(f, p, t, n_resamples, s);
            };
            set(a.md_ci, mean_difference);
            set(a.loa_low_ci, [](const auto& x, const auto& y) { return limits_of_agreement(x, y).first; });
            set(a.loa_high_ci, [](const auto& x, const auto& y) { return limits_of_agreement(x, y).second; });
            set(a.pearson_r_ci, pearson_r);
        }
        out.push_back(a);
    }
    return out;
}

nlohmann::json report_to_json(const AgreementReport& report) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [variant, rows] : report) {
        nlohmann::json v = nlohmann::json::object();
        for (const auto& r : rows) v[r.phenotype] = r.to_json();
        j[variant] = v;
    }
    return j;
}

void write_agreement_report(const std::filesystem::path& file, const AgreementReport& report) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    out << report_to_json(report).dump(2) << '\n';
}

std::string id_list_hash(const std::vector<std::string>& ids) {
    std::uint64_t h = fnv1a("");
    for (const auto& id : ids) {
        h = fnv1a(id, h);
        h = fnv1a("\n", h);
    }
    return hex64(h);
}

std::vector<ScalingRow> scaling_experiment(const std::vector<std::string>& variants,
                                           const std::vector<double>& fractions,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::vector<std::string>& phenotype_names,
                                           const ScalingCellRunner& run_cell, int n_resamples) {
    std::vector<ScalingRow> rows;
    std::string test_hash;
    for (const auto& variant : variants) {
        for (double fraction : fractions) {
            for (auto seed : seeds) {
                const auto cell = run_cell(variant, fraction, seed);
                const auto h = id_list_hash(cell.test_ids);
                if (test_hash.empty()) test_hash = h;
                if (h != test_hash) throw ConfigError("test split changed between scaling cells");
                if (cell.predictions.size(1) != int64_t(phenotype_names.size()))
                    throw ConfigError("scaling cell returned the wrong number of phenotypes");
                for (int64_t k = 0; k < cell.predictions.size(1); ++k) {
                    const auto p = column(cell.predictions, k), t = column(cell.truth, k);
                    ScalingRow r{variant, fraction, seed, phenotype_names[std::size_t(k)]};
                    r.pearson_r = pearson_r(p, t);
                    std::tie(r.ci_low, r.ci_high) =
                        bootstrap_ci(pearson_r, p, t, n_resamples, stream_seed(seed, 0xc1 + std::uint64_t(k)));
                    rows.push_back(r);
                }
            }
        }
    }
    return rows;
}

void write_scaling_table(const std::filesystem::path& file, const std::vector<ScalingRow>& rows) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    out << "variant,fraction,seed,phenotype,pearson_r,ci_low,ci_high\n" << std::setprecision(10);
    for (const auto& r : rows)
        out << r.variant << ',' << r.fraction << ',' << r.seed << ',' << r.phenotype << ',' << r.pearson_r << ','
            << r.ci_low << ',' << r.ci_high << '\n';
}

}  // namespace ctrip
