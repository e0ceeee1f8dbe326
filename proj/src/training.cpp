#include "ctrip/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>

#include "ctrip/error.hpp"

namespace F = torch::nn::functional;

namespace ctrip {

torch::Tensor stack_images(const Cohort& cohort, const std::vector<std::size_t>& idx, Modality m) {
    std::vector<torch::Tensor> xs;
    xs.reserve(idx.size());
    for (auto i : idx) {
        const auto& s = cohort[i];
        const auto& img = m == Modality::Cmr ? s.cmr : s.localizer;
        if (!img) throw ConfigError("subject " + s.subject_id + " lacks " + std::string(to_string(m)));
        xs.push_back(img->voxels);
    }
    return torch::stack(xs);
}

ModalityBatch make_batch_from_images(const torch::Tensor& images, const EncoderConfig& config) {
    return {patchify_images(images, config.patch_size), {}, {}};
}

ModalityBatch make_batch(const Cohort& cohort, const std::vector<std::size_t>& idx, const EncoderConfig& config) {
    switch (config.modality) {
        case Modality::Localizer:
        case Modality::Cmr: return make_batch_from_images(stack_images(cohort, idx, config.modality), config);
        case Modality::Ecg: {
            std::vector<torch::Tensor> xs;
            for (auto i : idx) {
                const auto& s = cohort[i];
                if (!s.ecg) throw ConfigError("subject " + s.subject_id + " lacks ecg");
                if (!s.ecg->drift_corrected)
                    throw ConfigError("ECG of " + s.subject_id + " is not baseline-drift corrected");
                xs.push_back(s.ecg->samples);
            }
            return {patchify_ecgs(torch::stack(xs), config.ecg_patch_len), {}, {}};
        }
        case Modality::Tabular: {
            std::vector<torch::Tensor> num, cat;
            for (auto i : idx) {
                const auto& s = cohort[i];
                if (!s.tabular) throw ConfigError("subject " + s.subject_id + " lacks tabular");
                auto [n, c] = tabular_inputs(*s.tabular, cohort.schema());
                num.push_back(n);
                cat.push_back(c);
            }
            return {{}, torch::stack(num), torch::stack(cat)};
        }
    }
    throw ConfigError("unknown modality");
}

torch::Tensor augment_images(const torch::Tensor& images, Rng& rng) {
    const int64_t B = images.size(0);
    auto theta = torch::empty({B, 2, 3}, torch::kFloat32);
    auto acc = theta.accessor<float, 3>();
    for (int64_t b = 0; b < B; ++b) {
        const double angle = (uniform01(rng) * 2.0 - 1.0) * 10.0 * std::numbers::pi / 180.0;
        const double scale = 0.9 + 0.2 * uniform01(rng);
        const double tx = (uniform01(rng) * 2.0 - 1.0) * 0.05;
        const double ty = (uniform01(rng) * 2.0 - 1.0) * 0.05;
        acc[b][0][0] = float(scale * std::cos(angle));
        acc[b][0][1] = float(-scale * std::sin(angle));
        acc[b][0][2] = float(tx);
        acc[b][1][0] = float(scale * std::sin(angle));
        acc[b][1][1] = float(scale * std::cos(angle));
        acc[b][1][2] = float(ty);
    }
    theta = theta.to(images.dtype());
    auto grid = F::affine_grid(theta, images.sizes(), /*align_corners=*/false);
    return F::grid_sample(images, grid,
                          F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
}

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& idx, int64_t batch_size) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < idx.size(); i += std::size_t(batch_size))
        out.emplace_back(idx.begin() + std::ptrdiff_t(i),
                         idx.begin() + std::ptrdiff_t(std::min(idx.size(), i + std::size_t(batch_size))));
    return out;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& idx, int64_t batch_size, Rng& rng) {
    const auto perm = permutation(idx.size(), rng);
    std::vector<std::size_t> shuffled(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) shuffled[k] = idx[perm[k]];
    return chunk(shuffled, batch_size);
}

double cosine_lr(double base, int64_t epoch, int64_t epochs) {
    if (epochs <= 0) return base;
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * double(epoch) / double(epochs)));
}

void set_group_lr(torch::optim::Optimizer& opt, std::size_t group, double lr) {
    opt.param_groups().at(group).options().set_lr(lr);
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& module) {
    std::vector<torch::Tensor> out;
    for (const auto& p : module.parameters(true)) out.push_back(p.detach().clone());
    for (const auto& b : module.buffers(true)) out.push_back(b.detach().clone());
    return out;
}

void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& state) {
    torch::NoGradGuard guard;
    std::size_t k = 0;
    for (auto& p : module.parameters(true)) p.copy_(state.at(k++));
    for (auto& b : module.buffers(true)) b.copy_(state.at(k++));
}

void check_finite(double loss, const std::string& where) {
    if (!std::isfinite(loss)) throw DivergenceError("non-finite loss during " + where);
}

void write_curve_csv(const std::filesystem::path& file, const std::vector<EpochLog>& curve) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    out << "epoch,train_loss,val_loss\n" << std::setprecision(9);
    for (const auto& e : curve) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
}

std::vector<MaskPlan> sample_masks(int64_t batch, int64_t num_tokens, double ratio, Rng& rng) {
    std::vector<MaskPlan> plans;
    plans.reserve(std::size_t(batch));
    for (int64_t b = 0; b < batch; ++b) plans.push_back(sample_mask(num_tokens, ratio, rng));
    return plans;
}

double evaluate_reconstruction(MaskedAutoencoder& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                               const EncoderConfig& config, std::uint64_t mask_seed, int64_t batch_size) {
    if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    torch::NoGradGuard guard;
    model->eval();
    Rng rng(mask_seed);
    const auto N = model->encoder->num_tokens();
    double total = 0.0;
    for (const auto& b : chunk(idx, batch_size)) {
        auto batch = make_batch(cohort, b, config);
        auto [vis, msk] = mask_tensors(sample_masks(int64_t(b.size()), N, config.mask_ratio, rng));
        total += model->loss(batch, vis, msk).item<double>() * double(b.size());
    }
    return total / double(idx.size());
}

Stage1Result pretrain_stage1(const Cohort& cohort, const EncoderConfig& config, const TrainHparams& hp,
                             const std::filesystem::path& stem) {
    config.validate();
    const auto train_idx = cohort.indices(Split::Train);
    const auto val_idx = cohort.indices(Split::Val);
    if (train_idx.empty()) throw ConfigError("cohort has no training split");

    torch::manual_seed(stream_seed(hp.seed, 11));
    Stage1Result res;
    res.config = config;
    res.fingerprint = config_fingerprint(config, cohort.schema());
    res.model = MaskedAutoencoder(config, cohort.schema());
    auto& model = res.model;

    torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(hp.lr).weight_decay(hp.weight_decay));
    const auto train_eval_seed = stream_seed(hp.seed, 101);
    const auto val_eval_seed = stream_seed(hp.seed, 102);
    const int64_t N = model->encoder->num_tokens();
    const bool augment = hp.augment && config.modality == Modality::Localizer;

    res.initial_train_loss = evaluate_reconstruction(model, cohort, train_idx, config, train_eval_seed);
    const double val0 = evaluate_reconstruction(model, cohort, val_idx, config, val_eval_seed);
    res.curve.push_back({0, res.initial_train_loss, val0});
    check_finite(res.initial_train_loss, "stage-1 initialization");

    double best = val_idx.empty() ? res.initial_train_loss : val0;
    auto best_state = snapshot(*model);
    int64_t since_best = 0;

    for (int64_t epoch = 1; epoch <= hp.epochs; ++epoch) {
        set_group_lr(opt, 0, cosine_lr(hp.lr, epoch - 1, hp.epochs));
        model->train();
        Rng rng(stream_seed(hp.seed, 1000 + std::uint64_t(epoch)));
        double sum = 0.0;
        for (const auto& b : make_batches(train_idx, hp.batch_size, rng)) {
            ModalityBatch batch = augment ? make_batch_from_images(
                                                augment_images(stack_images(cohort, b, config.modality), rng), config)
                                          : make_batch(cohort, b, config);
            auto [vis, msk] = mask_tensors(sample_masks(int64_t(b.size()), N, config.mask_ratio, rng));
            auto loss = model->loss(batch, vis, msk);
            const double lv = loss.item<double>();
            check_finite(lv, "stage-1 pretraining of " + std::string(to_string(config.modality)));
            opt.zero_grad();
            loss.backward();
            opt.step();
            sum += lv * double(b.size());
        }
        const double train_loss = sum / double(train_idx.size());
        const double val_loss = evaluate_reconstruction(model, cohort, val_idx, config, val_eval_seed);
        res.curve.push_back({epoch, train_loss, val_loss});

        const double monitored = val_idx.empty() ? train_loss : val_loss;
        if (monitored < best) {
            best = monitored;
            best_state = snapshot(*model);
            since_best = 0;
        } else if (++since_best >= hp.patience) {
            break;
        }
    }
    restore(*model, best_state);
    res.final_train_loss = evaluate_reconstruction(model, cohort, train_idx, config, train_eval_seed);

    if (!stem.empty()) {
        nlohmann::json meta{{"config", config.to_json()},
                            {"schema", cohort.schema().to_json()},
                            {"stage", "stage1"},
                            {"epochs_run", res.curve.back().epoch},
                            {"initial_train_loss", res.initial_train_loss},
                            {"final_train_loss", res.final_train_loss},
                            {"seed", hp.seed}};
        res.checkpoint = save_checkpoint(*model, stem, "stage1", res.fingerprint, meta);
        write_curve_csv(stem.parent_path() / ("stage1_" + std::string(short_name(config.modality)) + "_curve.csv"),
                        res.curve);
    }
    return res;
}

MaskedAutoencoder load_stage1(const std::filesystem::path& stem, const EncoderConfig& config,
                              const TabularSchema& schema) {
    MaskedAutoencoder model(config, schema);
    auto ck = load_checkpoint(*model, stem, config_fingerprint(config, schema));
    if (ck.kind != "stage1") throw ConfigError(stem.string() + " is not a stage-1 checkpoint");
    return model;
}

}  // namespace ctrip
