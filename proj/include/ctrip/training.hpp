#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ctrip/data_model.hpp"
#include "ctrip/encoders.hpp"
#include "ctrip/util.hpp"

namespace ctrip {

struct TrainHparams {
    int64_t epochs = 400;
    int64_t batch_size = 256;
    double lr = 5e-4;
    double weight_decay = 0.05;
    int64_t patience = 20;  // early-stopping patience on validation loss, in epochs
    std::uint64_t seed = 0;
    bool augment = true;    // geometric augmentation of localizer training images
};

struct EpochLog {
    int64_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

/// Stacked [B,3,224,224] image tensor of the given image modality.
torch::Tensor stack_images(const Cohort& cohort, const std::vector<std::size_t>& idx, Modality m);
/// Raw encoder inputs for `idx`. ECG records must be drift-corrected.
ModalityBatch make_batch(const Cohort& cohort, const std::vector<std::size_t>& idx, const EncoderConfig& config);
ModalityBatch make_batch_from_images(const torch::Tensor& images, const EncoderConfig& config);

/// Random rotation (+-10 deg), isotropic scale [0.9, 1.1] and crop offset (+-5%) per image.
torch::Tensor augment_images(const torch::Tensor& images, Rng& rng);

/// Shuffled mini-batches of `idx` (last batch may be short).
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& idx, int64_t batch_size, Rng& rng);
std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& idx, int64_t batch_size);

/// Half-cosine decay from `base` at epoch 0 to 0 after `epochs` epochs.
double cosine_lr(double base, int64_t epoch, int64_t epochs);
void set_group_lr(torch::optim::Optimizer& opt, std::size_t group, double lr);

/// Snapshot / restore of every parameter and buffer (for early stopping).
std::vector<torch::Tensor> snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state);

void check_finite(double loss, const std::string& where);

void write_curve_csv(const std::filesystem::path& file, const std::vector<EpochLog>& curve);

struct Stage1Result {
    MaskedAutoencoder model{nullptr};
    EncoderConfig config;
    std::string fingerprint;
    std::vector<EpochLog> curve;  // epoch 0 = before training
    double initial_train_loss = 0.0;
    double final_train_loss = 0.0;
    std::optional<Checkpoint> checkpoint;
};

/// Per-sample masks for a batch, drawn from one stream per (seed, epoch, batch).
std::vector<MaskPlan> sample_masks(int64_t batch, int64_t num_tokens, double ratio, Rng& rng);

/// Mean reconstruction loss over `idx` with masks fixed by `mask_seed`.
double evaluate_reconstruction(MaskedAutoencoder& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                               const EncoderConfig& config, std::uint64_t mask_seed, int64_t batch_size = 64);

/// Masked-autoencoder pretraining of one modality on the cohort's train split.
/// Writes `<stem>.pt/.json` and `stage1_<M>_curve.csv` next to it when `stem` is non-empty.
Stage1Result pretrain_stage1(const Cohort& cohort, const EncoderConfig& config, const TrainHparams& hp,
                             const std::filesystem::path& stem = {});

/// Rebuilds a stage-1 model from its checkpoint; refuses on fingerprint mismatch.
MaskedAutoencoder load_stage1(const std::filesystem::path& stem, const EncoderConfig& config,
                              const TabularSchema& schema);

}  // namespace ctrip
