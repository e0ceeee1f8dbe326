#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ctrip {

/// mean(pred - true); positive means overestimation.
double mean_difference(const std::vector<double>& y_pred, const std::vector<double>& y_true);

/// Bland-Altman limits md -+ 1.96 * sd(differences), sample sd.
std::pair<double, double> limits_of_agreement(const std::vector<double>& y_pred, const std::vector<double>& y_true);

double pearson_r(const std::vector<double>& x, const std::vector<double>& y);

using PairedStatistic = std::function<double(const std::vector<double>&, const std::vector<double>&)>;

/// 95% percentile interval over paired resamples.
std::pair<double, double> bootstrap_ci(const PairedStatistic& statistic, const std::vector<double>& y_pred,
                                       const std::vector<double>& y_true, int n_resamples = 1000,
                                       std::uint64_t seed = 0);

struct Interval {
    double low = 0.0, high = 0.0;
};

struct PhenotypeAgreement {
    std::string phenotype;
    std::int64_t n = 0;
    double md = 0.0, loa_low = 0.0, loa_high = 0.0, pearson_r = 0.0;
    // Bootstrap intervals; an extension beyond the point estimates.
    Interval md_ci, loa_low_ci, loa_high_ci, pearson_r_ci;

    nlohmann::json to_json() const;
};

/// variant -> per-phenotype statistics, in panel order.
using AgreementReport = std::map<std::string, std::vector<PhenotypeAgreement>>;

/// Statistics for every column of `pred` / `truth` ([n, k], physical units).
std::vector<PhenotypeAgreement> agreement(const torch::Tensor& pred, const torch::Tensor& truth,
                                          const std::vector<std::string>& names, std::uint64_t seed,
                                          int n_resamples = 1000);

nlohmann::json report_to_json(const AgreementReport& report);
void write_agreement_report(const std::filesystem::path& file, const AgreementReport& report);

struct ScalingCellOutput {
    std::vector<std::string> test_ids;  // row order of the matrices below
    torch::Tensor predictions;          // [n_test, 18]
    torch::Tensor truth;                // [n_test, 18]
};

using ScalingCellRunner = std::function<ScalingCellOutput(const std::string& variant, double fraction,
                                                          std::uint64_t seed)>;

struct ScalingRow {
    std::string variant;
    double fraction = 0.0;
    std::uint64_t seed = 0;
    std::string phenotype;
    double pearson_r = 0.0, ci_low = 0.0, ci_high = 0.0;
};

/// Runs every (variant, fraction, seed) cell and records Pearson R per phenotype.
/// Throws when a cell reports a test split different from the first cell's.
std::vector<ScalingRow> scaling_experiment(const std::vector<std::string>& variants,
                                           const std::vector<double>& fractions,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::vector<std::string>& phenotype_names,
                                           const ScalingCellRunner& run_cell, int n_resamples = 1000);

void write_scaling_table(const std::filesystem::path& file, const std::vector<ScalingRow>& rows);

/// Hash of an ordered id list.
std::string id_list_hash(const std::vector<std::string>& ids);

}  // namespace ctrip
