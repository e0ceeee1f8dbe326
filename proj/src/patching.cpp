#include "ctrip/patching.hpp"

#include <algorithm>
#include <cmath>

#include "ctrip/error.hpp"

namespace ctrip {

int64_t masked_count(int64_t num_tokens, double ratio) {
    return int64_t(std::llround(ratio * double(num_tokens)));
}

MaskPlan sample_mask(int64_t num_tokens, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
    if (num_tokens < 1) throw ConfigError("mask needs at least one token");
    const auto perm = permutation(std::size_t(num_tokens), rng);
    const auto m = std::size_t(masked_count(num_tokens, ratio));

    MaskPlan plan;
    plan.ratio = ratio;
    plan.masked_idx.assign(perm.begin(), perm.begin() + std::ptrdiff_t(m));
    plan.visible_idx.assign(perm.begin() + std::ptrdiff_t(m), perm.end());
    std::sort(plan.masked_idx.begin(), plan.masked_idx.end());
    std::sort(plan.visible_idx.begin(), plan.visible_idx.end());
    return plan;
}

// ---------------------------------------------------------------------------
// Images

torch::Tensor patchify_images(const torch::Tensor& images, int64_t p) {
    TORCH_CHECK(images.dim() == 4, "patchify_images expects [B,C,H,W]");
    const int64_t B = images.size(0), C = images.size(1), H = images.size(2), W = images.size(3);
    if (p <= 0 || H % p != 0 || W % p != 0)
        throw ConfigError(std::to_string(H % p != 0 ? H : W) + " not divisible by " + std::to_string(p));
    return images.reshape({B, C, H / p, p, W / p, p})
        .permute({0, 2, 4, 3, 5, 1})
        .reshape({B, (H / p) * (W / p), p * p * C});
}

torch::Tensor unpatchify_images(const torch::Tensor& tokens, int64_t p, int64_t C, int64_t H, int64_t W) {
    const int64_t B = tokens.size(0);
    if (tokens.size(1) != (H / p) * (W / p) || tokens.size(2) != p * p * C)
        throw ConfigError("token grid does not match image geometry");
    return tokens.reshape({B, H / p, W / p, p, p, C})
        .permute({0, 5, 1, 3, 2, 4})
        .reshape({B, C, H, W});
}

TokenSequence patchify_image(const ImageStack& stack, int64_t patch_size, Modality modality) {
    auto tokens = patchify_images(stack.voxels.unsqueeze(0), patch_size).squeeze(0);
    return {tokens, torch::arange(tokens.size(0), torch::kInt64), modality};
}

namespace {

// Reorders a full sequence by position; throws when a position is missing.
torch::Tensor assemble_by_position(const TokenSequence& seq, int64_t expected) {
    if (seq.size() != expected)
        throw ConfigError("sequence has " + std::to_string(seq.size()) + " tokens, expected " +
                          std::to_string(expected));
    auto pos = seq.positions.to(torch::kInt64).contiguous();
    std::vector<int64_t> where(std::size_t(expected), -1);
    const auto* pp = pos.data_ptr<int64_t>();
    for (int64_t i = 0; i < expected; ++i) {
        if (pp[i] < 0 || pp[i] >= expected || where[std::size_t(pp[i])] != -1)
            throw ConfigError("invalid or duplicate token position " + std::to_string(pp[i]));
        where[std::size_t(pp[i])] = i;
    }
    return seq.tokens.index_select(0, torch::tensor(where, torch::kInt64));
}

}  // namespace

ImageStack unpatchify_image(const TokenSequence& seq, int64_t p, int64_t C, int64_t H, int64_t W) {
    if (p <= 0 || H % p != 0 || W % p != 0) throw ConfigError("image not divisible by patch size");
    auto ordered = assemble_by_position(seq, (H / p) * (W / p));
    return {unpatchify_images(ordered.unsqueeze(0), p, C, H, W).squeeze(0)};
}

// ---------------------------------------------------------------------------
// ECG

torch::Tensor patchify_ecgs(const torch::Tensor& signals, int64_t patch_len) {
    TORCH_CHECK(signals.dim() == 3, "patchify_ecgs expects [B,leads,T]");
    const int64_t B = signals.size(0), L = signals.size(1), T = signals.size(2);
    if (patch_len <= 0 || T % patch_len != 0)
        throw ConfigError(std::to_string(T) + " not divisible by " + std::to_string(patch_len));
    return signals.reshape({B, L * (T / patch_len), patch_len});
}

TokenSequence patchify_ecg(const EcgRecord& record, int64_t patch_len) {
    auto tokens = patchify_ecgs(record.samples.unsqueeze(0), patch_len).squeeze(0);
    return {tokens, torch::arange(tokens.size(0), torch::kInt64), Modality::Ecg};
}

EcgRecord unpatchify_ecg(const TokenSequence& seq, int64_t patch_len, int64_t leads) {
    if (seq.size() % leads != 0) throw ConfigError("token count not a multiple of the lead count");
    if (seq.tokens.size(1) != patch_len) throw ConfigError("token dim does not match patch length");
    auto ordered = assemble_by_position(seq, seq.size());
    return {ordered.reshape({leads, (seq.size() / leads) * patch_len}), kEcgRateHz, false};
}

std::vector<float> moving_median(const float* x, std::size_t n, std::size_t window) {
    std::vector<float> out(n);
    if (n == 0) return out;
    window = std::max<std::size_t>(1, window);
    const auto half = std::ptrdiff_t(window / 2);
    const auto last = std::ptrdiff_t(n) - 1;
    auto at = [&](std::ptrdiff_t j) {
        // reflect about the edge samples, repeated for windows longer than the signal
        while (j < 0 || j > last) {
            if (j < 0) j = -j;
            if (j > last) j = 2 * last - j;
            if (last == 0) j = 0;
        }
        return x[j];
    };

    // window for output i spans [i - half, i - half + window - 1]
    std::vector<float> sorted;
    sorted.reserve(window);
    for (std::size_t k = 0; k < window; ++k) sorted.push_back(at(std::ptrdiff_t(k) - half));
    std::sort(sorted.begin(), sorted.end());

    auto median = [&] {
        const std::size_t m = window / 2;
        return window % 2 ? sorted[m] : 0.5f * (sorted[m - 1] + sorted[m]);
    };
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = median();
        if (i + 1 == n) break;
        const float leaving = at(std::ptrdiff_t(i) - half);
        const float entering = at(std::ptrdiff_t(i) - half + std::ptrdiff_t(window));
        sorted.erase(std::lower_bound(sorted.begin(), sorted.end(), leaving));
        sorted.insert(std::upper_bound(sorted.begin(), sorted.end(), entering), entering);
    }
    return out;
}

EcgRecord correct_baseline_drift(const EcgRecord& record, double window_seconds) {
    auto in = record.samples.to(torch::kFloat32).contiguous();
    TORCH_CHECK(in.dim() == 2, "ECG samples must be [leads, timesteps]");
    const auto leads = std::size_t(in.size(0));
    const auto n = std::size_t(in.size(1));
    const auto window = std::size_t(std::llround(window_seconds * double(record.sampling_rate_hz)));

    auto out = torch::empty_like(in);
    const float* src = in.data_ptr<float>();
    float* dst = out.data_ptr<float>();
    for (std::size_t l = 0; l < leads; ++l) {
        const auto trend = moving_median(src + l * n, n, window);
        for (std::size_t t = 0; t < n; ++t) dst[l * n + t] = src[l * n + t] - trend[t];
    }
    return {out, record.sampling_rate_hz, true};
}

// ---------------------------------------------------------------------------
// Tabular

TabularTokenizerImpl::TabularTokenizerImpl(const TabularSchema& schema, int64_t dim)
    : dim_(dim), num_numeric_(int64_t(schema.num_numeric_tokens())) {
    direction = register_parameter("direction", torch::randn({std::max<int64_t>(num_numeric_, 1), dim}) * 0.02);
    bias = register_parameter("bias", torch::randn({std::max<int64_t>(num_numeric_, 1), dim}) * 0.02);
    embeddings = register_module("embeddings", torch::nn::ModuleList());
    for (const auto& c : schema.categorical) {
        cardinalities_.push_back(c.cardinality);
        auto emb = torch::nn::Embedding(c.cardinality, dim);
        torch::nn::init::normal_(emb->weight, 0.0, 0.02);
        embeddings->push_back(emb);
    }
}

torch::Tensor TabularTokenizerImpl::forward(const torch::Tensor& numeric, const torch::Tensor& categorical) {
    std::vector<torch::Tensor> parts;
    if (num_numeric_ > 0) {
        TORCH_CHECK(numeric.size(-1) == num_numeric_, "numeric feature count mismatch");
        parts.push_back(numeric.unsqueeze(-1) * direction.slice(0, 0, num_numeric_) +
                        bias.slice(0, 0, num_numeric_));
    }
    TORCH_CHECK(categorical.size(-1) == int64_t(cardinalities_.size()), "categorical feature count mismatch");
    for (std::size_t j = 0; j < cardinalities_.size(); ++j) {
        auto idx = categorical.select(-1, int64_t(j));
        if ((idx < 0).any().item<bool>() || (idx >= cardinalities_[j]).any().item<bool>())
            throw ConfigError("category index out of range for feature " + std::to_string(j));
        parts.push_back(embeddings[j]->as<torch::nn::Embedding>()->forward(idx).unsqueeze(-2));
    }
    return torch::cat(parts, -2);
}

std::pair<torch::Tensor, torch::Tensor> tabular_inputs(const TabularRecord& record, const TabularSchema& schema) {
    if (record.numeric.size() != schema.num_numeric_tokens() ||
        record.categorical.size() != schema.categorical.size())
        throw ConfigError("tabular record does not conform to schema");
    std::vector<float> num;
    for (const auto& f : record.numeric) num.push_back(float(f.value));
    std::vector<int64_t> cat;
    for (std::size_t j = 0; j < record.categorical.size(); ++j) {
        const auto& f = record.categorical[j];
        if (f.index < 0 || f.index >= schema.categorical[j].cardinality)
            throw ConfigError("category index " + std::to_string(f.index) + " >= cardinality " +
                              std::to_string(schema.categorical[j].cardinality) + " for '" + f.name + "'");
        cat.push_back(f.index);
    }
    return {torch::tensor(num, torch::kFloat32), torch::tensor(cat, torch::kInt64)};
}

TokenSequence tokenize_tabular(const TabularRecord& record, const TabularSchema& schema, TabularTokenizer& tables) {
    auto [num, cat] = tabular_inputs(record, schema);
    auto param = tables->direction;
    auto tokens = tables->forward(num.to(param.dtype()).unsqueeze(0), cat.unsqueeze(0)).squeeze(0);
    return {tokens, torch::arange(tokens.size(0), torch::kInt64), Modality::Tabular};
}

}  // namespace ctrip
