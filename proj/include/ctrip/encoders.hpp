#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "ctrip/data_model.hpp"
#include "ctrip/patching.hpp"

namespace ctrip {

struct EncoderConfig {
    Modality modality = Modality::Localizer;
    int64_t embed_dim = 768;
    int64_t depth = 12;
    int64_t num_heads = 12;
    int64_t decoder_dim = 384;
    int64_t decoder_depth = 2;
    int64_t mlp_ratio = 4;
    double mask_ratio = 0.75;
    int64_t patch_size = 16;      // localizer / CMR
    int64_t ecg_patch_len = 100;  // ECG

    // Embedding dims L:768, E:384, T:384; ViT-B depth for L, 6 blocks for E/T.
    static EncoderConfig paper_default(Modality m);
    // Small transformer sized for single-core CPU runs on synthetic cohorts.
    static EncoderConfig desk_default(Modality m);

    int64_t num_tokens(const TabularSchema& schema) const;
    int64_t token_dim(const TabularSchema& schema) const;  // raw token width fed to the encoder
    bool is_image() const { return modality == Modality::Localizer || modality == Modality::Cmr; }

    void validate() const;
    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

/// Hash of the encoder config (plus the tabular schema for tabular encoders).
std::string config_fingerprint(const EncoderConfig& config, const TabularSchema& schema);

/// Fixed sinusoidal table [num_positions, dim].
torch::Tensor sinusoidal_table(int64_t num_positions, int64_t dim);

class SelfAttentionImpl : public torch::nn::Module {
public:
    SelfAttentionImpl(int64_t dim, int64_t num_heads);
    torch::Tensor forward(const torch::Tensor& x);

    // When set, forward keeps the softmax weights [B, heads, T, T].
    bool capture = false;
    torch::Tensor last_attention;

private:
    int64_t num_heads_;
    torch::nn::Linear qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(SelfAttention);

/// Pre-norm transformer block.
class BlockImpl : public torch::nn::Module {
public:
    BlockImpl(int64_t dim, int64_t num_heads, int64_t mlp_ratio);
    torch::Tensor forward(const torch::Tensor& x);

    SelfAttention attn{nullptr};

private:
    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Block);

/// Raw per-modality inputs of a batch. Image/ECG use `tokens`; tabular uses
/// `numeric` and `categorical`.
struct ModalityBatch {
    torch::Tensor tokens;       // [B, N, token_dim]
    torch::Tensor numeric;      // [B, n_numeric]
    torch::Tensor categorical;  // int64 [B, n_categorical]

    int64_t batch_size() const;
    ModalityBatch to(torch::Dtype dtype) const;
};

struct EncoderOutput {
    torch::Tensor latent;  // [B, n+1, D], [CLS] first
    torch::Tensor cls;     // [B, D]
};

class ModalityEncoderImpl : public torch::nn::Module {
public:
    ModalityEncoderImpl(const EncoderConfig& config, const TabularSchema& schema);

    /// Token embeddings without positional information, [B, N, D].
    torch::Tensor embed(const ModalityBatch& batch);
    /// Adds positional encodings for `positions` [B, n], prepends [CLS], runs the blocks.
    EncoderOutput encode_embedded(const torch::Tensor& embedded, const torch::Tensor& positions);
    /// Full pass; `visible` [B, n_visible] selects a subset of positions when defined.
    EncoderOutput forward(const ModalityBatch& batch, const torch::Tensor& visible = {});

    void set_capture_attention(bool on);
    /// Final block's attention weights from the last captured forward.
    torch::Tensor last_attention() const;

    const EncoderConfig& config() const { return config_; }
    int64_t num_tokens() const { return num_tokens_; }
    int64_t token_dim() const { return token_dim_; }

    torch::nn::Linear input_proj{nullptr};
    TabularTokenizer tokenizer{nullptr};
    torch::Tensor cls_token;
    torch::Tensor pos_table;
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm norm{nullptr};

private:
    EncoderConfig config_;
    int64_t num_tokens_;
    int64_t token_dim_;
};
TORCH_MODULE(ModalityEncoder);

/// Single-sequence encode: prepends [CLS], adds encodings at the sequence's positions.
/// Tabular sequences must already be tokenized (token_dim = embed_dim).
EncoderOutput encode(ModalityEncoder& encoder, const TokenSequence& seq, const MaskPlan* mask = nullptr);

struct TabularReconstruction {
    torch::Tensor numeric;              // [B, n_numeric]
    std::vector<torch::Tensor> logits;  // per categorical feature, [B, cardinality]
};

class MaeDecoderImpl : public torch::nn::Module {
public:
    MaeDecoderImpl(const EncoderConfig& config, const TabularSchema& schema);

    /// Decoder features for every position, [B, N, decoder_dim].
    torch::Tensor decode(const torch::Tensor& latent, const torch::Tensor& visible);
    /// Predictions for the masked positions only, [B, m, token_dim].
    torch::Tensor reconstruct_patches(const torch::Tensor& latent, const torch::Tensor& visible,
                                      const torch::Tensor& masked);
    /// Full-sequence tabular reconstruction.
    TabularReconstruction reconstruct_tabular(const torch::Tensor& latent, const torch::Tensor& visible);

    torch::nn::Linear embed{nullptr};
    torch::Tensor mask_token;
    torch::Tensor pos_table;
    torch::nn::ModuleList blocks;
    torch::nn::LayerNorm norm{nullptr};
    torch::nn::Linear pred{nullptr};          // image / ECG
    torch::nn::Linear numeric_head{nullptr};  // tabular
    torch::nn::ModuleList categorical_heads{nullptr};

private:
    EncoderConfig config_;
    int64_t num_tokens_;
    int64_t num_numeric_;
};
TORCH_MODULE(MaeDecoder);

/// Mean squared error over masked tokens; `targets` covers the full sequence.
torch::Tensor mae_loss_patches(const torch::Tensor& predictions, const torch::Tensor& targets,
                               const torch::Tensor& masked);
/// Numeric MSE plus mean per-feature cross-entropy, weighted 1:1.
torch::Tensor mae_loss_tabular(const TabularReconstruction& recon, const torch::Tensor& numeric_targets,
                               const torch::Tensor& categorical_targets);

/// Visible / masked index tensors [B, n_visible], [B, n_masked] from per-sample plans.
std::pair<torch::Tensor, torch::Tensor> mask_tensors(const std::vector<MaskPlan>& plans);

class MaskedAutoencoderImpl : public torch::nn::Module {
public:
    MaskedAutoencoderImpl(const EncoderConfig& config, const TabularSchema& schema);

    torch::Tensor loss(const ModalityBatch& batch, const torch::Tensor& visible, const torch::Tensor& masked);

    ModalityEncoder encoder{nullptr};
    MaeDecoder decoder{nullptr};

private:
    EncoderConfig config_;
};
TORCH_MODULE(MaskedAutoencoder);

/// Serialized model state plus the identity of the config it was built from.
struct Checkpoint {
    std::string kind;  // "stage1", "stage2", "stage3"
    std::string fingerprint;
    nlohmann::json metadata;
    std::filesystem::path weights;  // <stem>.pt, sidecar <stem>.json
};

Checkpoint save_checkpoint(torch::nn::Module& module, const std::filesystem::path& stem, const std::string& kind,
                           const std::string& fingerprint, nlohmann::json metadata);
Checkpoint read_checkpoint_sidecar(const std::filesystem::path& stem);
/// Loads weights into `module`; refuses when the stored fingerprint differs.
Checkpoint load_checkpoint(torch::nn::Module& module, const std::filesystem::path& stem,
                           const std::string& expected_fingerprint);

/// Copies all parameters and buffers from `src` into `dst` (same architecture).
void copy_weights(torch::nn::Module& dst, const torch::nn::Module& src);

}  // namespace ctrip
