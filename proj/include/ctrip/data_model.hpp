#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace ctrip {

inline constexpr int64_t kSlices = 3;
inline constexpr int64_t kImageSize = 224;
inline constexpr int64_t kLeads = 12;
inline constexpr int64_t kEcgRateHz = 500;
inline constexpr int64_t kEcgSeconds = 10;
inline constexpr int64_t kEcgSamples = kEcgRateHz * kEcgSeconds;
inline constexpr std::size_t kNumPhenotypes = 18;

enum class Modality : std::uint8_t { Localizer, Ecg, Tabular, Cmr };
enum class Split : std::uint8_t { Unassigned, Train, Val, Test };

std::string_view to_string(Modality m);
std::string_view short_name(Modality m);  // "L", "E", "T", "C"
Modality modality_from_string(std::string_view s);
std::string_view to_string(Split s);

/// Small bit set over the four input modalities.
class ModalitySet {
public:
    constexpr ModalitySet() = default;
    constexpr ModalitySet(std::initializer_list<Modality> ms) {
        for (auto m : ms) bits_ |= bit(m);
    }
    constexpr bool contains(Modality m) const { return (bits_ & bit(m)) != 0; }
    constexpr ModalitySet& insert(Modality m) { bits_ |= bit(m); return *this; }
    constexpr bool operator==(const ModalitySet&) const = default;

    static constexpr ModalitySet tri_modal() {
        return {Modality::Localizer, Modality::Ecg, Modality::Tabular};
    }
    static constexpr ModalitySet all() {
        return {Modality::Localizer, Modality::Ecg, Modality::Tabular, Modality::Cmr};
    }

private:
    static constexpr std::uint8_t bit(Modality m) { return std::uint8_t(1u << unsigned(m)); }
    std::uint8_t bits_ = 0;
};

/// 3-slice image stack, float32 [3, 224, 224], zero mean / unit variance.
struct ImageStack {
    torch::Tensor voxels;
};

/// 12-lead ECG, float32 [12, timesteps].
struct EcgRecord {
    torch::Tensor samples;
    int64_t sampling_rate_hz = kEcgRateHz;
    bool drift_corrected = false;
};

struct NumericFeature {
    std::string name;
    double raw = 0.0;
    double value = 0.0;  // z-normalized with the schema statistics
};

struct CategoricalFeature {
    std::string name;
    int64_t index = 0;
    int64_t cardinality = 0;
};

struct TabularRecord {
    std::vector<NumericFeature> numeric;
    std::vector<CategoricalFeature> categorical;
};

struct PhenotypeVector {
    std::array<double, kNumPhenotypes> values{};
};

struct NumericSpec {
    std::string name;
    double mean = 0.0;
    double std = 1.0;
};

struct CategoricalSpec {
    std::string name;
    int64_t cardinality = 0;
};

struct PhenotypeSpec {
    std::string name;
    std::string unit;
    double mean = 0.0;
    double std = 1.0;
};

/// Cohort-level description of the tabular features and phenotype panel.
struct TabularSchema {
    std::vector<NumericSpec> numeric;
    std::vector<CategoricalSpec> categorical;
    std::vector<PhenotypeSpec> phenotypes;
    bool inject_phenotypes = false;

    // Numeric feature count seen by the tokenizer, including injected phenotypes.
    std::size_t num_numeric_tokens() const;
    std::size_t num_tokens() const { return num_numeric_tokens() + categorical.size(); }
    std::size_t phenotype_index(std::string_view name) const;

    nlohmann::json to_json() const;
    static TabularSchema from_json(const nlohmann::json& j);
    void validate() const;
};

const std::array<PhenotypeSpec, kNumPhenotypes>& default_phenotype_panel();

struct SubjectRecord {
    std::string subject_id;
    std::optional<ImageStack> localizer;
    std::optional<EcgRecord> ecg;
    std::optional<TabularRecord> tabular;
    std::optional<ImageStack> cmr;  // supervised CMR stand-in, optional on disk
    PhenotypeVector phenotypes;
    Split split = Split::Unassigned;

    bool has(Modality m) const;
};

struct Rejection {
    std::string subject_id;
    std::string reason;
};

/// Immutable collection of subjects plus the schema they were read under.
class Cohort {
public:
    Cohort() = default;
    Cohort(std::vector<SubjectRecord> subjects, TabularSchema schema,
           std::vector<Rejection> rejected = {},
           std::vector<std::filesystem::path> accessed = {});

    const std::vector<SubjectRecord>& subjects() const { return subjects_; }
    const SubjectRecord& operator[](std::size_t i) const { return subjects_.at(i); }
    std::size_t size() const { return subjects_.size(); }
    const TabularSchema& schema() const { return schema_; }
    const std::vector<Rejection>& rejected() const { return rejected_; }
    // Every file read while loading, in read order.
    const std::vector<std::filesystem::path>& access_log() const { return accessed_; }

    std::vector<std::size_t> indices(Split s) const;
    std::vector<std::string> subject_ids(Split s) const;

private:
    std::vector<SubjectRecord> subjects_;
    TabularSchema schema_;
    std::vector<Rejection> rejected_;
    std::vector<std::filesystem::path> accessed_;
};

struct LoadOptions {
    ModalitySet modalities = ModalitySet::tri_modal();
    bool inject_phenotypes = false;
    bool correct_drift = false;
};

/// Re-normalizes tabular numerics under `schema` and appends z-scored phenotypes
/// when `schema.inject_phenotypes` is set.
TabularRecord apply_schema(const TabularRecord& raw, const PhenotypeVector& phenotypes,
                           const TabularSchema& schema);

Cohort load_cohort(const std::filesystem::path& root, const LoadOptions& options = {});
Cohort load_cohort(const std::filesystem::path& root, const TabularSchema& schema,
                   const LoadOptions& options = {});
void save_cohort(const Cohort& cohort, const std::filesystem::path& root);

TabularSchema read_schema(const std::filesystem::path& file);
void write_schema(const TabularSchema& schema, const std::filesystem::path& file);

struct SplitFractions {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

/// Largest-remainder split sizes for n subjects.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitFractions& f);
Cohort split_cohort(const Cohort& cohort, const SplitFractions& f, std::uint64_t seed);

/// Returns a copy with drift-corrected ECGs (no-op for already corrected records).
Cohort preprocess_cohort(const Cohort& cohort);

/// Cohort restricted to the given subject indices (order preserved).
Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& idx);

}  // namespace ctrip
