#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ctrip/data_model.hpp"
#include "ctrip/util.hpp"

namespace ctrip {

/// Shared generative factors behind every modality of one synthetic subject.
struct LatentFactors {
    double heart_size = 1.0;      // relative units, [0.5, 1.5]
    double contractility = 0.6;   // ejection ratio, [0.3, 0.8]
    double heart_rate_bpm = 70;   // [50, 100]
    int sex = 0;                  // 0 female, 1 male
    std::uint64_t noise_seed = 0; // per-modality streams are derived from this

    void validate() const;
};

struct NoiseLevels {
    bool enabled = true;
    double image_sigma = 0.05;      // additive pixel noise before normalization
    double cmr_sigma = 0.05;
    double ecg_sigma = 0.05;        // mV
    double drift_amplitude = 0.3;   // mV, baseline wander
    double drift_hz = 0.25;
    double lvef_sigma = 2.0;        // percentage points
    double rvef_sigma = 2.0;
    double mass_rel_sigma = 0.06;   // multiplicative noise on LVM
    double volume_rel_sigma = 0.05; // multiplicative noise on chamber volumes

    nlohmann::json to_json() const;
};

struct GeneratorConfig {
    NoiseLevels noise;
    bool with_cmr = true;
};

/// Pixel-space description of the drawn heart, used for masks and diagnostics.
struct HeartGeometry {
    double cx = 112, cy = 118;
    std::array<double, kSlices> lv_outer_rx{}, lv_outer_ry{};
    std::array<double, kSlices> rv_cx{}, rv_rx{}, rv_ry{};

    /// True inside the LV epicardium or the RV of any slice; bool [224, 224].
    torch::Tensor mask() const;
};

struct SyntheticSubject {
    SubjectRecord record;
    LatentFactors factors;
    HeartGeometry geometry;
};

struct SyntheticCohort {
    Cohort cohort;
    std::vector<LatentFactors> factors;
    std::vector<HeartGeometry> geometry;
    std::uint64_t seed = 0;
    GeneratorConfig config;
};

LatentFactors sample_factors(Rng& rng);

/// Population moments of the tabular features and phenotypes, estimated once by
/// a fixed-seed Monte Carlo over the factor model.
const TabularSchema& population_schema();

/// Tabular features (raw units) and phenotypes for a set of factors.
std::pair<TabularRecord, PhenotypeVector> synthesize_clinical(const LatentFactors& f, const NoiseLevels& noise);

SyntheticSubject generate_subject(const LatentFactors& factors, const std::string& subject_id,
                                  const GeneratorConfig& config = {});

SyntheticCohort generate_cohort(int64_t n, std::uint64_t seed, const GeneratorConfig& config = {});

/// Writes the cohort directory layout plus cohort_manifest.json.
void write_cohort(const SyntheticCohort& cohort, const std::filesystem::path& root);

/// Pure ECG template (no drift, no noise) for the given factors; [12, 5000].
torch::Tensor ecg_template(const LatentFactors& f, double first_beat_s);

}  // namespace ctrip
