#include "ctrip/encoders.hpp"

#include <cmath>
#include <fstream>

#include "ctrip/error.hpp"
#include "ctrip/util.hpp"

namespace F = torch::nn::functional;
using nlohmann::json;

namespace ctrip {

// ---------------------------------------------------------------------------
// EncoderConfig

EncoderConfig EncoderConfig::paper_default(Modality m) {
    EncoderConfig c;
    c.modality = m;
    if (m == Modality::Localizer || m == Modality::Cmr) {
        c.embed_dim = 768, c.depth = 12, c.num_heads = 12, c.decoder_dim = 384, c.decoder_depth = 2;
    } else {
        c.embed_dim = 384, c.depth = 6, c.num_heads = 6, c.decoder_dim = 192, c.decoder_depth = 2;
    }
    return c;
}

EncoderConfig EncoderConfig::desk_default(Modality m) {
    EncoderConfig c;
    c.modality = m;
    c.depth = 2;
    c.num_heads = 4;
    c.decoder_depth = 1;
    switch (m) {
        case Modality::Localizer:
        case Modality::Cmr: c.embed_dim = 64, c.decoder_dim = 32; break;
        case Modality::Ecg: c.embed_dim = 64, c.decoder_dim = 32, c.ecg_patch_len = 250; break;
        case Modality::Tabular: c.embed_dim = 32, c.decoder_dim = 16; break;
    }
    return c;
}

int64_t EncoderConfig::num_tokens(const TabularSchema& schema) const {
    switch (modality) {
        case Modality::Localizer:
        case Modality::Cmr: return (kImageSize / patch_size) * (kImageSize / patch_size);
        case Modality::Ecg: return kLeads * (kEcgSamples / ecg_patch_len);
        case Modality::Tabular: return int64_t(schema.num_tokens());
    }
    return 0;
}

int64_t EncoderConfig::token_dim(const TabularSchema&) const {
    switch (modality) {
        case Modality::Localizer:
        case Modality::Cmr: return patch_size * patch_size * kSlices;
        case Modality::Ecg: return ecg_patch_len;
        case Modality::Tabular: return embed_dim;
    }
    return 0;
}

void EncoderConfig::validate() const {
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
        throw ConfigError("embed_dim must be divisible by num_heads");
    if (decoder_dim <= 0 || decoder_dim % num_heads != 0)
        throw ConfigError("decoder_dim must be divisible by num_heads");
    if (depth < 1) throw ConfigError("encoder depth must be >= 1");
    if (decoder_depth < 1 || decoder_depth >= depth)
        throw ConfigError("decoder_depth must be >= 1 and smaller than the encoder depth");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must lie in (0, 1)");
    if (is_image() && (patch_size <= 0 || kImageSize % patch_size != 0))
        throw ConfigError("224 not divisible by " + std::to_string(patch_size));
    if (modality == Modality::Ecg && (ecg_patch_len <= 0 || kEcgSamples % ecg_patch_len != 0))
        throw ConfigError("5000 not divisible by " + std::to_string(ecg_patch_len));
}

json EncoderConfig::to_json() const {
    return {{"modality", std::string(short_name(modality))},
            {"embed_dim", embed_dim},
            {"depth", depth},
            {"num_heads", num_heads},
            {"decoder_dim", decoder_dim},
            {"decoder_depth", decoder_depth},
            {"mlp_ratio", mlp_ratio},
            {"mask_ratio", mask_ratio},
            {"patch_size", patch_size},
            {"ecg_patch_len", ecg_patch_len}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
    EncoderConfig c;
    c.modality = modality_from_string(j.at("modality").get<std::string>());
    c.embed_dim = j.at("embed_dim");
    c.depth = j.at("depth");
    c.num_heads = j.at("num_heads");
    c.decoder_dim = j.at("decoder_dim");
    c.decoder_depth = j.at("decoder_depth");
    c.mlp_ratio = j.value("mlp_ratio", int64_t{4});
    c.mask_ratio = j.at("mask_ratio");
    c.patch_size = j.value("patch_size", int64_t{16});
    c.ecg_patch_len = j.value("ecg_patch_len", int64_t{100});
    c.validate();
    return c;
}

std::string config_fingerprint(const EncoderConfig& config, const TabularSchema& schema) {
    json j{{"encoder", config.to_json()}};
    if (config.modality == Modality::Tabular) j["schema"] = schema.to_json();
    return hex64(fnv1a(j.dump()));
}

torch::Tensor sinusoidal_table(int64_t num_positions, int64_t dim) {
    auto table = torch::zeros({num_positions, dim}, torch::kFloat64);
    auto acc = table.accessor<double, 2>();
    for (int64_t p = 0; p < num_positions; ++p) {
        for (int64_t i = 0; i < dim; i += 2) {
            const double angle = double(p) / std::pow(10000.0, double(i) / double(dim));
            acc[p][i] = std::sin(angle);
            if (i + 1 < dim) acc[p][i + 1] = std::cos(angle);
        }
    }
    return table.to(torch::kFloat32);
}

namespace {

torch::nn::Linear make_linear(int64_t in, int64_t out) {
    torch::nn::Linear l(in, out);
    torch::nn::init::xavier_uniform_(l->weight);
    torch::nn::init::zeros_(l->bias);
    return l;
}

torch::Tensor gather_tokens(const torch::Tensor& x, const torch::Tensor& idx) {
    return x.gather(1, idx.unsqueeze(-1).expand({idx.size(0), idx.size(1), x.size(2)}));
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention / blocks

SelfAttentionImpl::SelfAttentionImpl(int64_t dim, int64_t num_heads) : num_heads_(num_heads) {
    qkv = register_module("qkv", make_linear(dim, 3 * dim));
    proj = register_module("proj", make_linear(dim, dim));
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x) {
    const int64_t B = x.size(0), T = x.size(1), D = x.size(2), hd = D / num_heads_;
    auto parts = qkv->forward(x).reshape({B, T, 3, num_heads_, hd}).permute({2, 0, 3, 1, 4});
    auto q = parts[0], k = parts[1], v = parts[2];
    auto attn = torch::softmax(q.matmul(k.transpose(-2, -1)) / std::sqrt(double(hd)), -1);
    if (capture) last_attention = attn.detach();
    return proj->forward(attn.matmul(v).transpose(1, 2).reshape({B, T, D}));
}

BlockImpl::BlockImpl(int64_t dim, int64_t num_heads, int64_t mlp_ratio) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    attn = register_module("attn", SelfAttention(dim, num_heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    fc1 = register_module("fc1", make_linear(dim, dim * mlp_ratio));
    fc2 = register_module("fc2", make_linear(dim * mlp_ratio, dim));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x) {
    auto h = x + attn->forward(norm1->forward(x));
    return h + fc2->forward(torch::gelu(fc1->forward(norm2->forward(h))));
}

// ---------------------------------------------------------------------------
// Batches

int64_t ModalityBatch::batch_size() const {
    if (tokens.defined()) return tokens.size(0);
    if (numeric.defined()) return numeric.size(0);
    return categorical.defined() ? categorical.size(0) : 0;
}

ModalityBatch ModalityBatch::to(torch::Dtype dtype) const {
    ModalityBatch b = *this;
    if (b.tokens.defined()) b.tokens = b.tokens.to(dtype);
    if (b.numeric.defined()) b.numeric = b.numeric.to(dtype);
    return b;
}

// ---------------------------------------------------------------------------
// Encoder

ModalityEncoderImpl::ModalityEncoderImpl(const EncoderConfig& config, const TabularSchema& schema)
    : config_(config), num_tokens_(config.num_tokens(schema)), token_dim_(config.token_dim(schema)) {
    config_.validate();
    const int64_t D = config.embed_dim;
    if (config.modality == Modality::Tabular)
        tokenizer = register_module("tokenizer", TabularTokenizer(schema, D));
    else
        input_proj = register_module("input_proj", make_linear(token_dim_, D));
    cls_token = register_parameter("cls_token", torch::randn({1, 1, D}) * 0.02);
    pos_table = register_buffer("pos_table", sinusoidal_table(num_tokens_, D));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < config.depth; ++i) blocks->push_back(Block(D, config.num_heads, config.mlp_ratio));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({D})));
}

torch::Tensor ModalityEncoderImpl::embed(const ModalityBatch& batch) {
    if (config_.modality == Modality::Tabular) {
        if (!batch.numeric.defined() || !batch.categorical.defined())
            throw ConfigError("tabular encoder needs numeric and categorical inputs");
        return tokenizer->forward(batch.numeric, batch.categorical);
    }
    if (!batch.tokens.defined() || batch.tokens.dim() != 3 || batch.tokens.size(2) != token_dim_)
        throw ConfigError("token dim mismatch: encoder expects " + std::to_string(token_dim_));
    return input_proj->forward(batch.tokens);
}

EncoderOutput ModalityEncoderImpl::encode_embedded(const torch::Tensor& x, const torch::Tensor& positions) {
    const int64_t B = x.size(0), n = x.size(1), D = x.size(2);
    if (D != config_.embed_dim) throw ConfigError("embedded token dim mismatch");
    auto pe = pos_table.index_select(0, positions.reshape({-1})).reshape({B, n, D});
    auto h = torch::cat({cls_token.expand({B, 1, D}), x + pe}, 1);
    for (const auto& blk : *blocks) h = blk->as<Block>()->forward(h);
    h = norm->forward(h);
    return {h, h.select(1, 0)};
}

EncoderOutput ModalityEncoderImpl::forward(const ModalityBatch& batch, const torch::Tensor& visible) {
    auto x = embed(batch);
    const int64_t B = x.size(0);
    if (x.size(1) != num_tokens_)
        throw ConfigError("expected " + std::to_string(num_tokens_) + " tokens, got " + std::to_string(x.size(1)));
    if (visible.defined()) return encode_embedded(gather_tokens(x, visible), visible);
    auto positions = torch::arange(num_tokens_, torch::kInt64).unsqueeze(0).expand({B, num_tokens_});
    return encode_embedded(x, positions);
}

void ModalityEncoderImpl::set_capture_attention(bool on) {
    for (const auto& blk : *blocks) blk->as<Block>()->attn->capture = on;
}

torch::Tensor ModalityEncoderImpl::last_attention() const {
    auto last = blocks->ptr(blocks->size() - 1)->as<BlockImpl>()->attn->last_attention;
    if (!last.defined()) throw ConfigError("no attention captured; enable capture before the forward pass");
    return last;
}

EncoderOutput encode(ModalityEncoder& encoder, const TokenSequence& seq, const MaskPlan* mask) {
    const auto& cfg = encoder->config();
    if (seq.modality != cfg.modality) throw ConfigError("sequence modality does not match encoder");
    torch::Tensor tokens = seq.tokens, positions = seq.positions.to(torch::kInt64);
    if (mask) {
        // keep the tokens whose position is visible under the plan
        auto vis = torch::tensor(mask->visible_idx, torch::kInt64);
        auto keep = torch::isin(positions, vis);
        if (keep.sum().item<int64_t>() != int64_t(mask->visible_idx.size()))
            throw ConfigError("mask plan does not match sequence positions");
        tokens = tokens.index({keep});
        positions = positions.index({keep});
    }
    torch::Tensor x;
    if (cfg.modality == Modality::Tabular) {
        if (tokens.size(-1) != cfg.embed_dim) throw ConfigError("tabular tokens must have embed_dim width");
        x = tokens;
    } else {
        if (tokens.size(-1) != encoder->token_dim())
            throw ConfigError("token dim mismatch: encoder expects " + std::to_string(encoder->token_dim()));
        x = encoder->input_proj->forward(tokens);
    }
    return encoder->encode_embedded(x.unsqueeze(0), positions.unsqueeze(0));
}

// ---------------------------------------------------------------------------
// Decoder

MaeDecoderImpl::MaeDecoderImpl(const EncoderConfig& config, const TabularSchema& schema)
    : config_(config), num_tokens_(config.num_tokens(schema)), num_numeric_(int64_t(schema.num_numeric_tokens())) {
    const int64_t Dd = config.decoder_dim;
    embed = register_module("embed", make_linear(config.embed_dim, Dd));
    mask_token = register_parameter("mask_token", torch::randn({1, 1, Dd}) * 0.02);
    pos_table = register_buffer("pos_table", sinusoidal_table(num_tokens_, Dd));
    blocks = register_module("blocks", torch::nn::ModuleList());
    for (int64_t i = 0; i < config.decoder_depth; ++i) blocks->push_back(Block(Dd, config.num_heads, config.mlp_ratio));
    norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({Dd})));
    if (config.modality == Modality::Tabular) {
        numeric_head = register_module("numeric_head", make_linear(Dd, 1));
        categorical_heads = register_module("categorical_heads", torch::nn::ModuleList());
        for (const auto& c : schema.categorical) categorical_heads->push_back(make_linear(Dd, c.cardinality));
    } else {
        pred = register_module("pred", make_linear(Dd, config.token_dim(schema)));
    }
}

torch::Tensor MaeDecoderImpl::decode(const torch::Tensor& latent, const torch::Tensor& visible) {
    const int64_t B = latent.size(0), nv = latent.size(1) - 1, Dd = config_.decoder_dim;
    if (visible.size(0) != B || visible.size(1) != nv)
        throw ConfigError("mask plan inconsistent with the latent sequence");
    auto y = embed->forward(latent);
    auto full = mask_token.expand({B, num_tokens_, Dd}).scatter(
        1, visible.unsqueeze(-1).expand({B, nv, Dd}), y.slice(1, 1));
    auto h = torch::cat({y.slice(1, 0, 1), full + pos_table}, 1);
    for (const auto& blk : *blocks) h = blk->as<Block>()->forward(h);
    return norm->forward(h).slice(1, 1);
}

torch::Tensor MaeDecoderImpl::reconstruct_patches(const torch::Tensor& latent, const torch::Tensor& visible,
                                                  const torch::Tensor& masked) {
    if (!pred) throw ConfigError("patch reconstruction requested from a tabular decoder");
    if (visible.size(1) + masked.size(1) != num_tokens_)
        throw ConfigError("mask plan does not cover the token grid");
    return pred->forward(gather_tokens(decode(latent, visible), masked));
}

TabularReconstruction MaeDecoderImpl::reconstruct_tabular(const torch::Tensor& latent, const torch::Tensor& visible) {
    if (!numeric_head) throw ConfigError("tabular reconstruction requested from a patch decoder");
    auto h = decode(latent, visible);
    TabularReconstruction r;
    r.numeric = numeric_head->forward(h.slice(1, 0, num_numeric_)).squeeze(-1);
    for (std::size_t j = 0; j < categorical_heads->size(); ++j)
        r.logits.push_back(categorical_heads[j]->as<torch::nn::Linear>()->forward(
            h.select(1, num_numeric_ + int64_t(j))));
    return r;
}

// ---------------------------------------------------------------------------
// Losses

torch::Tensor mae_loss_patches(const torch::Tensor& predictions, const torch::Tensor& targets,
                               const torch::Tensor& masked) {
    auto target = gather_tokens(targets, masked);
    TORCH_CHECK(target.sizes() == predictions.sizes(), "prediction / target shape mismatch");
    return (predictions - target).pow(2).mean();
}

torch::Tensor mae_loss_tabular(const TabularReconstruction& recon, const torch::Tensor& numeric_targets,
                               const torch::Tensor& categorical_targets) {
    auto loss = torch::zeros({}, recon.numeric.options());
    if (recon.numeric.numel() > 0) loss = loss + (recon.numeric - numeric_targets).pow(2).mean();
    if (!recon.logits.empty()) {
        auto ce = torch::zeros({}, recon.numeric.options());
        for (std::size_t j = 0; j < recon.logits.size(); ++j)
            ce = ce + F::cross_entropy(recon.logits[j], categorical_targets.select(1, int64_t(j)));
        loss = loss + ce / double(recon.logits.size());
    }
    return loss;
}

std::pair<torch::Tensor, torch::Tensor> mask_tensors(const std::vector<MaskPlan>& plans) {
    std::vector<torch::Tensor> vis, msk;
    for (const auto& p : plans) {
        vis.push_back(torch::tensor(p.visible_idx, torch::kInt64));
        msk.push_back(torch::tensor(p.masked_idx, torch::kInt64));
    }
    return {torch::stack(vis), torch::stack(msk)};
}

MaskedAutoencoderImpl::MaskedAutoencoderImpl(const EncoderConfig& config, const TabularSchema& schema)
    : config_(config) {
    encoder = register_module("encoder", ModalityEncoder(config, schema));
    decoder = register_module("decoder", MaeDecoder(config, schema));
}

torch::Tensor MaskedAutoencoderImpl::loss(const ModalityBatch& batch, const torch::Tensor& visible,
                                          const torch::Tensor& masked) {
    auto out = encoder->forward(batch, visible);
    if (config_.modality == Modality::Tabular)
        return mae_loss_tabular(decoder->reconstruct_tabular(out.latent, visible), batch.numeric, batch.categorical);
    return mae_loss_patches(decoder->reconstruct_patches(out.latent, visible, masked), batch.tokens, masked);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
    return std::filesystem::path(stem.string() + ext);
}
}  // namespace

Checkpoint save_checkpoint(torch::nn::Module& module, const std::filesystem::path& stem, const std::string& kind,
                           const std::string& fingerprint, json metadata) {
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    torch::serialize::OutputArchive archive;
    module.save(archive);
    archive.save_to(with_ext(stem, ".pt").string());
    Checkpoint ck{kind, fingerprint, std::move(metadata), with_ext(stem, ".pt")};
    std::ofstream(with_ext(stem, ".json"))
        << json{{"kind", ck.kind}, {"fingerprint", ck.fingerprint}, {"metadata", ck.metadata}}.dump(2) << '\n';
    return ck;
}

Checkpoint read_checkpoint_sidecar(const std::filesystem::path& stem) {
    std::ifstream in(with_ext(stem, ".json"));
    if (!in) throw ConfigError("checkpoint not found: " + stem.string());
    json j;
    in >> j;
    return {j.at("kind").get<std::string>(), j.at("fingerprint").get<std::string>(), j.value("metadata", json::object()),
            with_ext(stem, ".pt")};
}

Checkpoint load_checkpoint(torch::nn::Module& module, const std::filesystem::path& stem,
                           const std::string& expected_fingerprint) {
    auto ck = read_checkpoint_sidecar(stem);
    if (ck.fingerprint != expected_fingerprint)
        throw FingerprintMismatch("checkpoint " + stem.string() + " has fingerprint " + ck.fingerprint +
                                  ", expected " + expected_fingerprint);
    torch::serialize::InputArchive archive;
    archive.load_from(ck.weights.string());
    module.load(archive);
    return ck;
}

void copy_weights(torch::nn::Module& dst, const torch::nn::Module& src) {
    torch::NoGradGuard guard;
    auto sp = src.named_parameters(true);
    for (auto& p : dst.named_parameters(true)) p.value().copy_(sp[p.key()]);
    auto sb = src.named_buffers(true);
    for (auto& b : dst.named_buffers(true)) b.value().copy_(sb[b.key()]);
}

}  // namespace ctrip
