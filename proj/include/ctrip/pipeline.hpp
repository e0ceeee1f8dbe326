#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrip/contrastive.hpp"
#include "ctrip/data_model.hpp"
#include "ctrip/encoders.hpp"
#include "ctrip/evaluation.hpp"
#include "ctrip/regression.hpp"
#include "ctrip/training.hpp"

namespace ctrip {

enum class Variant : std::uint8_t { CmrSup, LSup, ESup, TSup, LT, LE, LETp, CTrip };

std::string_view to_string(Variant v);  // "CMR_sup", ..., "L+E+T_p", "C-TRIP"
Variant variant_from_string(std::string_view s);
const std::vector<Variant>& all_variants();

/// What a variant consumes at each stage.
struct VariantSpec {
    Variant variant;
    bool aligned = false;        // has a Stage-II alignment
    AlignmentEdges edges;        // meaningful when aligned
    bool inject_phenotypes = false;
    Modality input = Modality::Localizer;  // Stage-III / inference modality

    static VariantSpec of(Variant v);
    /// Modalities read from disk by the whole experiment.
    ModalitySet modalities() const;
    /// Modalities that need a Stage-I encoder.
    std::vector<Modality> pretrain_modalities() const;
};

enum class ModelScale : std::uint8_t { Desk, Paper };

struct ExperimentConfig {
    Variant variant = Variant::CTrip;
    ModelScale scale = ModelScale::Desk;
    std::uint64_t seed = 0;
    std::uint64_t split_seed = 0;  // fixes train/val/test independently of the training seed
    SplitFractions split;
    bool deterministic = false;
    double mask_ratio = 0.75;

    TrainHparams stage1{400, 256, 5e-4, 0.05, 20, 0, true};
    TrainHparams stage2{150, 256, 1e-4, 0.05, 20, 0, false};
    TemperaturePair tau_init;
    bool freeze_encoders = false;  // Stage II trains projections and temperatures only
    FinetuneConfig stage3;

    /// Shorter schedules sized for the desk-scale encoders on one CPU core.
    void use_desk_schedule();

    VariantSpec spec() const { return VariantSpec::of(variant); }
    EncoderConfig encoder_config(Modality m) const;
    nlohmann::json to_json() const;
    std::string hash() const;
};

/// Single-threaded kernels and deterministic algorithm selection.
void enable_deterministic_mode();

/// File stem used for the Stage-I checkpoint of `m` under the variant's schema ("stage1_T" / "stage1_Tp").
std::string stage1_name(Modality m, bool inject_phenotypes);
std::string stage2_name(Variant v);
std::string stage3_name(Variant v, double fraction);
std::string fraction_label(double fraction);  // 0.01 -> "0.01", 1.0 -> "1.00"

/// Loads the on-disk cohort reading only `modalities`, then splits and preprocesses it.
Cohort load_for_stage(const std::filesystem::path& data_dir, ModalitySet modalities, bool inject_phenotypes,
                      const ExperimentConfig& cfg);

/// Content fingerprint of every file a cohort load touched.
std::string input_fingerprint(const Cohort& cohort, const std::filesystem::path& data_dir);

/// Writes `manifest_<command>.json` into the run directory.
void write_manifest(const std::filesystem::path& run_dir, const std::string& command, const ExperimentConfig& cfg,
                    const nlohmann::json& inputs);

std::filesystem::path default_run_dir(const std::filesystem::path& runs_root, Variant v);

Stage1Result run_pretrain(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                          const std::filesystem::path& run_dir, Modality m);
Stage2Result run_align(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                       const std::filesystem::path& run_dir);
Stage3Result run_finetune(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                          const std::filesystem::path& run_dir);
/// Test-split agreement of the fine-tuned model; merges into `agreement_report.json`.
AgreementReport run_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                             const std::filesystem::path& run_dir);
std::vector<ScalingRow> run_scaling(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                                    const std::filesystem::path& run_dir, const std::vector<Variant>& variants,
                                    const std::vector<double>& fractions, const std::vector<std::uint64_t>& seeds);
/// Attention PNGs for the given subjects (all test subjects when empty); returns the files written.
std::vector<std::filesystem::path> run_attention(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                                                 const std::filesystem::path& run_dir,
                                                 const std::vector<std::string>& subjects);
/// `embeddings_<tag>.csv` over the test split; tag is "pre" or "post".
std::filesystem::path run_embed(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                                const std::filesystem::path& run_dir, const std::string& tag);

/// Stage I for every needed modality, Stage II when aligned, Stage III and evaluation.
AgreementReport run_all(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                        const std::filesystem::path& run_dir);

}  // namespace ctrip
