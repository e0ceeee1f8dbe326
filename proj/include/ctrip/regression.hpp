#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ctrip/contrastive.hpp"
#include "ctrip/data_model.hpp"
#include "ctrip/encoders.hpp"
#include "ctrip/training.hpp"

namespace ctrip {

struct FinetuneConfig {
    double data_fraction = 1.0;
    double lr_head = 1e-3;
    double lr_encoder = 1e-4;
    int64_t epochs = 100;
    int64_t batch_size = 256;
    double weight_decay = 0.05;
    int64_t patience = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Per-phenotype z-scoring constants estimated on the fine-tuning subjects.
struct TargetScaler {
    std::array<double, kNumPhenotypes> mean{};
    std::array<double, kNumPhenotypes> std{};

    static TargetScaler fit(const Cohort& cohort, const std::vector<std::size_t>& idx);
    std::array<double, kNumPhenotypes> normalize(const std::array<double, kNumPhenotypes>& y) const;
    std::array<double, kNumPhenotypes> denormalize(const std::array<double, kNumPhenotypes>& z) const;
    torch::Tensor normalize(const torch::Tensor& y) const;    // [B,18], float64 in/out
    torch::Tensor denormalize(const torch::Tensor& z) const;  // [B,18]
};

/// Two-layer perceptron in -> 256 -> 18.
class RegressionHeadImpl : public torch::nn::Module {
public:
    explicit RegressionHeadImpl(int64_t in_dim, int64_t hidden = 256);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(RegressionHead);

/// Encoder (+ optional shared-space projection) + regression head for one input modality.
class PhenotypeRegressorImpl : public torch::nn::Module {
public:
    PhenotypeRegressorImpl(const EncoderConfig& config, const TabularSchema& schema, bool with_projection);

    torch::Tensor forward(const ModalityBatch& batch);  // normalized predictions [B,18]
    std::vector<torch::Tensor> encoder_parameters();    // encoder and projection
    Modality modality() const { return config_.modality; }
    const EncoderConfig& config() const { return config_; }
    bool with_projection() const { return with_projection_; }

    ModalityEncoder encoder{nullptr};
    ProjectionHead projection{nullptr};
    RegressionHead head{nullptr};
    torch::Tensor target_mean, target_std;  // float64 buffers [18]

    TargetScaler scaler() const;
    void set_scaler(const TargetScaler& s);

private:
    EncoderConfig config_;
    bool with_projection_;
};
TORCH_MODULE(PhenotypeRegressor);

std::string regressor_fingerprint(const EncoderConfig& config, const TabularSchema& schema, bool with_projection);

/// ceil(fraction * n_train) training subjects, the prefix of a seed-keyed
/// permutation of the lexicographically sorted training ids (nested in fraction).
std::vector<std::size_t> subsample_training(const Cohort& cohort, double fraction, std::uint64_t seed);

struct Stage3Result {
    PhenotypeRegressor model{nullptr};
    std::vector<EpochLog> curve;
    std::vector<std::size_t> train_subjects;
    std::optional<Checkpoint> checkpoint;
};

/// Fresh regressor for a supervised baseline (randomly initialized encoder).
PhenotypeRegressor make_supervised_regressor(const EncoderConfig& config, const TabularSchema& schema,
                                             std::uint64_t seed);
/// Regressor whose encoder and projection are copied from the aligned localizer branch.
PhenotypeRegressor make_aligned_regressor(AlignmentModel& aligned, const TabularSchema& schema, std::uint64_t seed);

/// AdamW with the head at lr_head (group 0) and encoder + projection at lr_encoder (group 1).
/// A zero encoder rate freezes the encoder instead of adding the group.
std::unique_ptr<torch::optim::AdamW> make_finetune_optimizer(PhenotypeRegressor& model, const FinetuneConfig& cfg);

/// Stage III: MSE on z-scored phenotypes with separate encoder / head learning rates.
/// Writes `<stem>.pt/.json` when `stem` is non-empty; curve CSV goes to `curve_csv` when set.
Stage3Result finetune_stage3(PhenotypeRegressor model, const Cohort& cohort, const FinetuneConfig& cfg,
                             const std::filesystem::path& stem = {}, const std::filesystem::path& curve_csv = {});

PhenotypeRegressor load_regressor(const std::filesystem::path& stem, const EncoderConfig& config,
                                  const TabularSchema& schema, bool with_projection);

/// Physical-unit predictions [B,18] (float64) for the given subjects.
torch::Tensor predict(PhenotypeRegressor& model, const Cohort& cohort, const std::vector<std::size_t>& idx);
/// Single localizer stack -> phenotype vector in physical units.
PhenotypeVector predict_phenotypes(PhenotypeRegressor& model, const ImageStack& localizer);

/// Ground-truth phenotypes [B,18] (float64).
torch::Tensor phenotype_matrix(const Cohort& cohort, const std::vector<std::size_t>& idx);

void write_predictions_csv(const std::filesystem::path& file, const Cohort& cohort,
                           const std::vector<std::size_t>& idx, const torch::Tensor& predictions);

}  // namespace ctrip
