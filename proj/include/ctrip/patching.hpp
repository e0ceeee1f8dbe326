#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "ctrip/data_model.hpp"
#include "ctrip/util.hpp"

namespace ctrip {

/// Modality-agnostic token sequence; positions are unique and ascending unless
/// a caller deliberately permutes them.
struct TokenSequence {
    torch::Tensor tokens;     // [num_tokens, token_dim]
    torch::Tensor positions;  // int64 [num_tokens]
    Modality modality = Modality::Localizer;

    int64_t size() const { return tokens.size(0); }
};

/// Partition of token positions into an encoder-visible and a masked set.
struct MaskPlan {
    std::vector<int64_t> visible_idx;  // ascending
    std::vector<int64_t> masked_idx;   // ascending
    double ratio = 0.75;

    int64_t total() const { return int64_t(visible_idx.size() + masked_idx.size()); }
};

/// Number of masked positions for a ratio: round(ratio * n).
int64_t masked_count(int64_t num_tokens, double ratio);

/// Uniform sample without replacement of round(ratio * num_tokens) masked positions.
MaskPlan sample_mask(int64_t num_tokens, double ratio, Rng& rng);

// Images: [C,H,W] stacks are cut into non-overlapping p x p x C blocks,
// flattened as (row, col, channel), patch grid in row-major order.
TokenSequence patchify_image(const ImageStack& stack, int64_t patch_size,
                             Modality modality = Modality::Localizer);
ImageStack unpatchify_image(const TokenSequence& seq, int64_t patch_size,
                            int64_t channels = kSlices, int64_t height = kImageSize,
                            int64_t width = kImageSize);

// Batched forms: [B,C,H,W] <-> [B,N,p*p*C].
torch::Tensor patchify_images(const torch::Tensor& images, int64_t patch_size);
torch::Tensor unpatchify_images(const torch::Tensor& tokens, int64_t patch_size, int64_t channels,
                                int64_t height, int64_t width);

// ECG: per-lead windows of patch_len samples, lead-major token order.
TokenSequence patchify_ecg(const EcgRecord& record, int64_t patch_len);
EcgRecord unpatchify_ecg(const TokenSequence& seq, int64_t patch_len, int64_t leads = kLeads);
torch::Tensor patchify_ecgs(const torch::Tensor& signals, int64_t patch_len);  // [B,L,T] -> [B,N,len]

/// Per-lead moving-median detrending (reflected edges).
EcgRecord correct_baseline_drift(const EcgRecord& record, double window_seconds = 0.6);
std::vector<float> moving_median(const float* x, std::size_t n, std::size_t window);

/// Feature tokenizer: numeric i -> value * direction_i + bias_i,
/// categorical j -> embedding row of its category. One token per feature.
class TabularTokenizerImpl : public torch::nn::Module {
public:
    TabularTokenizerImpl(const TabularSchema& schema, int64_t dim);

    // numeric: float [B, n_numeric]; categorical: int64 [B, n_categorical]
    torch::Tensor forward(const torch::Tensor& numeric, const torch::Tensor& categorical);

    int64_t dim() const { return dim_; }
    int64_t num_numeric() const { return num_numeric_; }
    const std::vector<int64_t>& cardinalities() const { return cardinalities_; }

    torch::Tensor direction;  // [n_numeric, dim]
    torch::Tensor bias;       // [n_numeric, dim]
    torch::nn::ModuleList embeddings;

private:
    int64_t dim_;
    int64_t num_numeric_;
    std::vector<int64_t> cardinalities_;
};
TORCH_MODULE(TabularTokenizer);

/// Numeric values and category indices of one record, validated against the schema.
std::pair<torch::Tensor, torch::Tensor> tabular_inputs(const TabularRecord& record,
                                                       const TabularSchema& schema);

TokenSequence tokenize_tabular(const TabularRecord& record, const TabularSchema& schema,
                               TabularTokenizer& tables);

}  // namespace ctrip
