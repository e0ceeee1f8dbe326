#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ctrip/data_model.hpp"
#include "ctrip/encoders.hpp"
#include "ctrip/training.hpp"

namespace ctrip {

inline constexpr int64_t kSharedDim = 256;
inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 1.0;

/// Linear map into the shared space followed by L2 normalization.
class ProjectionHeadImpl : public torch::nn::Module {
public:
    ProjectionHeadImpl(int64_t in_dim, int64_t out_dim = kSharedDim);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Linear linear{nullptr};
};
TORCH_MODULE(ProjectionHead);

struct TemperaturePair {
    double tau_le = 0.1;
    double tau_lt = 0.25;
};

/// Which localizer-centric edges of the loss graph are active. There is never an E-T edge.
struct AlignmentEdges {
    bool le = true;
    bool lt = true;

    ModalitySet modalities() const;
    std::string label() const;  // "L+E+T", "L+E", "L+T"
};

/// -(1/N) sum_i log softmax_j(<a_i, b_j> / tau)[i]; rows of A anchor, rows of B are candidates.
torch::Tensor info_nce_directional(const torch::Tensor& z_a, const torch::Tensor& z_b, const torch::Tensor& tau);
torch::Tensor info_nce_directional(const torch::Tensor& z_a, const torch::Tensor& z_b, double tau);

/// 0.5 * (L->M + M->L).
torch::Tensor bidirectional_loss(const torch::Tensor& z_l, const torch::Tensor& z_m, const torch::Tensor& tau);
torch::Tensor bidirectional_loss(const torch::Tensor& z_l, const torch::Tensor& z_m, double tau);

struct LossTerms {
    torch::Tensor total;
    torch::Tensor le;  // undefined when the edge is inactive
    torch::Tensor lt;
};

/// 0.5 * (L<->E + L<->T) for the tri-modal graph; a single active edge contributes alone.
LossTerms total_loss(const torch::Tensor& z_l, const torch::Tensor& z_e, const torch::Tensor& z_t,
                     const torch::Tensor& tau_le, const torch::Tensor& tau_lt, AlignmentEdges edges = {});
torch::Tensor total_loss(const torch::Tensor& z_l, const torch::Tensor& z_e, const torch::Tensor& z_t,
                         const TemperaturePair& temps);

/// Temperature from its log parameter, clamped to [0.01, 1].
torch::Tensor temperature(const torch::Tensor& log_tau);

/// Encoders + projection heads + learnable log-temperatures of Stage II.
class AlignmentModelImpl : public torch::nn::Module {
public:
    AlignmentModelImpl(AlignmentEdges edges, const std::map<Modality, EncoderConfig>& configs,
                       const TabularSchema& schema, TemperaturePair init = {});

    /// Unit-norm shared-space embedding [B, 256].
    torch::Tensor project(Modality m, const ModalityBatch& batch);

    ModalityEncoder& encoder(Modality m);
    ProjectionHead& projection(Modality m);
    bool has(Modality m) const;
    torch::Tensor tau_le() const { return temperature(log_tau_le); }
    torch::Tensor tau_lt() const { return temperature(log_tau_lt); }
    void clamp_temperatures();

    const AlignmentEdges& edges() const { return edges_; }
    const std::map<Modality, EncoderConfig>& configs() const { return configs_; }

    torch::Tensor log_tau_le, log_tau_lt;

private:
    AlignmentEdges edges_;
    std::map<Modality, EncoderConfig> configs_;
    std::map<Modality, ModalityEncoder> encoders_;
    std::map<Modality, ProjectionHead> projections_;
};
TORCH_MODULE(AlignmentModel);

std::string alignment_fingerprint(AlignmentEdges edges, const std::map<Modality, EncoderConfig>& configs,
                                  const TabularSchema& schema);

struct Stage2Hparams {
    TrainHparams train{150, 256, 1e-4, 0.05, 20, 0, false};
    TemperaturePair tau_init;
    bool freeze_encoders = false;
    AlignmentEdges edges;
};

struct Stage2EpochLog {
    int64_t epoch = 0;
    double total_loss = 0, loss_le = 0, loss_lt = 0;
    double tau_le = 0, tau_lt = 0;
    double pos_sim_le = 0, neg_sim_le = 0, pos_sim_lt = 0, neg_sim_lt = 0;
    double val_loss = 0;
};

struct SimilarityStats {
    double pos_le = 0, neg_le = 0, pos_lt = 0, neg_lt = 0;
};

struct Stage2Result {
    AlignmentModel model{nullptr};
    std::string fingerprint;
    std::vector<Stage2EpochLog> curve;  // epoch 0 = before training
    std::optional<Checkpoint> checkpoint;
};

/// Builds an alignment model from stage-1 encoders; projections are seeded by `seed`.
AlignmentModel make_alignment_model(const std::map<Modality, ModalityEncoder>& stage1_encoders,
                                    const TabularSchema& schema, AlignmentEdges edges, TemperaturePair init,
                                    std::uint64_t seed);

/// Positive (matched) and negative (off-diagonal) mean cosine similarity over `idx`.
SimilarityStats similarity_stats(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx);

/// Mean objective over `idx` evaluated in fixed batches.
double evaluate_alignment_loss(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                               int64_t batch_size);

/// Stage II: joint optimization of encoders, projections and temperatures.
/// Writes `<stem>.pt/.json` and `stage2_curve.csv` when `stem` is non-empty.
Stage2Result align_stage2(const Cohort& cohort, const std::map<Modality, ModalityEncoder>& stage1_encoders,
                          const Stage2Hparams& hp, const std::filesystem::path& stem = {});

AlignmentModel load_alignment(const std::filesystem::path& stem, AlignmentEdges edges,
                              const std::map<Modality, EncoderConfig>& configs, const TabularSchema& schema);

struct AlignedEmbedding {
    std::string subject_id;
    std::optional<std::vector<float>> z_l, z_e, z_t;  // absent when the modality is missing
};

std::vector<AlignedEmbedding> embed_batch(AlignmentModel& model, const Cohort& cohort,
                                          const std::vector<std::size_t>& idx);

void write_stage2_curve(const std::filesystem::path& file, const std::vector<Stage2EpochLog>& curve);

}  // namespace ctrip
