#include "ctrip/regression.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "ctrip/error.hpp"
#include "ctrip/util.hpp"

namespace ctrip {

void FinetuneConfig::validate() const {
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw ConfigError("data fraction must be in (0, 1]");
    if (lr_head <= 0.0) throw ConfigError("head learning rate must be positive");
    if (lr_encoder < 0.0) throw ConfigError("encoder learning rate must be non-negative");
    if (epochs < 0 || batch_size < 1 || patience < 1) throw ConfigError("invalid fine-tuning schedule");
}

TargetScaler TargetScaler::fit(const Cohort& cohort, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw ConfigError("cannot fit target scaling on zero subjects");
    TargetScaler s;
    const double n = double(idx.size());
    for (auto i : idx)
        for (std::size_t k = 0; k < kNumPhenotypes; ++k) s.mean[k] += cohort[i].phenotypes.values[k] / n;
    for (std::size_t k = 0; k < kNumPhenotypes; ++k) {
        double ss = 0.0;
        for (auto i : idx) {
            const double d = cohort[i].phenotypes.values[k] - s.mean[k];
            ss += d * d;
        }
        const double sd = idx.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        s.std[k] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
}

std::array<double, kNumPhenotypes> TargetScaler::normalize(const std::array<double, kNumPhenotypes>& y) const {
    std::array<double, kNumPhenotypes> z{};
    for (std::size_t k = 0; k < kNumPhenotypes; ++k) z[k] = (y[k] - mean[k]) / std[k];
    return z;
}

std::array<double, kNumPhenotypes> TargetScaler::denormalize(const std::array<double, kNumPhenotypes>& z) const {
    std::array<double, kNumPhenotypes> y{};
    for (std::size_t k = 0; k < kNumPhenotypes; ++k) y[k] = z[k] * std[k] + mean[k];
    return y;
}

namespace {

torch::Tensor row(const std::array<double, kNumPhenotypes>& a) {
    return torch::tensor(std::vector<double>(a.begin(), a.end()), torch::kFloat64);
}

}  // namespace

torch::Tensor TargetScaler::normalize(const torch::Tensor& y) const {
    return (y.to(torch::kFloat64) - row(mean)) / row(std);
}

torch::Tensor TargetScaler::denormalize(const torch::Tensor& z) const {
    return z.to(torch::kFloat64) * row(std) + row(mean);
}

RegressionHeadImpl::RegressionHeadImpl(int64_t in_dim, int64_t hidden) {
    fc1 = register_module("fc1", torch::nn::Linear(in_dim, hidden));
    fc2 = register_module("fc2", torch::nn::Linear(hidden, int64_t(kNumPhenotypes)));
}

torch::Tensor RegressionHeadImpl::forward(const torch::Tensor& x) {
    return fc2->forward(torch::gelu(fc1->forward(x)));
}

PhenotypeRegressorImpl::PhenotypeRegressorImpl(const EncoderConfig& config, const TabularSchema& schema,
                                               bool with_projection)
    : config_(config), with_projection_(with_projection) {
    config.validate();
    encoder = register_module("encoder", ModalityEncoder(config, schema));
    int64_t in_dim = config.embed_dim;
    if (with_projection) {
        projection = register_module("projection", ProjectionHead(config.embed_dim));
        in_dim = kSharedDim;
    }
    head = register_module("head", RegressionHead(in_dim));
    target_mean = register_buffer("target_mean", torch::zeros({int64_t(kNumPhenotypes)}, torch::kFloat64));
    target_std = register_buffer("target_std", torch::ones({int64_t(kNumPhenotypes)}, torch::kFloat64));
}

torch::Tensor PhenotypeRegressorImpl::forward(const ModalityBatch& batch) {
    auto h = encoder->forward(batch).cls;
    if (with_projection_) h = projection->forward(h);
    return head->forward(h);
}

std::vector<torch::Tensor> PhenotypeRegressorImpl::encoder_parameters() {
    auto ps = encoder->parameters();
    if (with_projection_)
        for (auto& p : projection->parameters()) ps.push_back(p);
    return ps;
}

TargetScaler PhenotypeRegressorImpl::scaler() const {
    TargetScaler s;
    auto m = target_mean.contiguous();
    auto d = target_std.contiguous();
    for (std::size_t k = 0; k < kNumPhenotypes; ++k) {
        s.mean[k] = m[int64_t(k)].item<double>();
        s.std[k] = d[int64_t(k)].item<double>();
    }
    return s;
}

void PhenotypeRegressorImpl::set_scaler(const TargetScaler& s) {
    torch::NoGradGuard guard;
    target_mean.copy_(row(s.mean));
    target_std.copy_(row(s.std));
}

std::string regressor_fingerprint(const EncoderConfig& config, const TabularSchema& schema, bool with_projection) {
    nlohmann::json j{{"encoder", config_fingerprint(config, schema)},
                     {"projection", with_projection},
                     {"outputs", kNumPhenotypes}};
    return hex64(fnv1a(j.dump()));
}

std::vector<std::size_t> subsample_training(const Cohort& cohort, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data fraction must be in (0, 1]");
    auto train = cohort.indices(Split::Train);
    std::sort(train.begin(), train.end(),
              [&](std::size_t a, std::size_t b) { return cohort[a].subject_id < cohort[b].subject_id; });
    const auto perm = permutation(train.size(), stream_seed(seed, 0x5ca1e));
    // Guard against 0.1 * 100 = 10.000000000000002 rounding up.
    const auto take = std::size_t(std::ceil(fraction * double(train.size()) - 1e-9));
    std::vector<std::size_t> out;
    out.reserve(take);
    for (std::size_t k = 0; k < take && k < train.size(); ++k) out.push_back(train[perm[k]]);
    return out;
}

PhenotypeRegressor make_supervised_regressor(const EncoderConfig& config, const TabularSchema& schema,
                                             std::uint64_t seed) {
    torch::manual_seed(seed);
    return PhenotypeRegressor(config, schema, false);
}

PhenotypeRegressor make_aligned_regressor(AlignmentModel& aligned, const TabularSchema& schema, std::uint64_t seed) {
    auto& enc = aligned->encoder(Modality::Localizer);
    torch::manual_seed(seed);
    PhenotypeRegressor model(enc->config(), schema, true);
    copy_weights(*model->encoder, *enc);
    copy_weights(*model->projection, *aligned->projection(Modality::Localizer));
    return model;
}

torch::Tensor phenotype_matrix(const Cohort& cohort, const std::vector<std::size_t>& idx) {
    auto out = torch::empty({int64_t(idx.size()), int64_t(kNumPhenotypes)}, torch::kFloat64);
    auto acc = out.accessor<double, 2>();
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t k = 0; k < kNumPhenotypes; ++k) acc[int64_t(r)][int64_t(k)] = cohort[idx[r]].phenotypes.values[k];
    return out;
}

namespace {

double evaluate_mse(PhenotypeRegressor& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                    const TargetScaler& scaler) {
    if (idx.empty()) return std::numeric_limits<double>::quiet_NaN();
    torch::NoGradGuard guard;
    model->eval();
    double total = 0.0;
    for (const auto& b : chunk(idx, 64)) {
        auto pred = model->forward(make_batch(cohort, b, model->config())).to(torch::kFloat64);
        auto target = scaler.normalize(phenotype_matrix(cohort, b));
        total += torch::mse_loss(pred, target).item<double>() * double(b.size());
    }
    return total / double(idx.size());
}

}  // namespace

std::unique_ptr<torch::optim::AdamW> make_finetune_optimizer(PhenotypeRegressor& model, const FinetuneConfig& cfg) {
    // A zero encoder rate keeps the encoder out of the optimizer entirely.
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(model->head->parameters(),
                        std::make_unique<torch::optim::AdamWOptions>(
                            torch::optim::AdamWOptions(cfg.lr_head).weight_decay(cfg.weight_decay)));
    if (cfg.lr_encoder > 0.0)
        groups.emplace_back(model->encoder_parameters(),
                            std::make_unique<torch::optim::AdamWOptions>(
                                torch::optim::AdamWOptions(cfg.lr_encoder).weight_decay(cfg.weight_decay)));
    else
        for (auto& p : model->encoder_parameters()) p.set_requires_grad(false);
    return std::make_unique<torch::optim::AdamW>(std::move(groups));
}

Stage3Result finetune_stage3(PhenotypeRegressor model, const Cohort& cohort, const FinetuneConfig& cfg,
                             const std::filesystem::path& stem, const std::filesystem::path& curve_csv) {
    cfg.validate();
    Stage3Result res;
    res.model = model;
    res.train_subjects = subsample_training(cohort, cfg.data_fraction, cfg.seed);
    if (res.train_subjects.empty()) throw ConfigError("no training subjects for fine-tuning");
    const auto val_idx = cohort.indices(Split::Val);

    const auto scaler = TargetScaler::fit(cohort, res.train_subjects);
    model->set_scaler(scaler);

    const bool train_encoder = cfg.lr_encoder > 0.0;
    auto opt_ptr = make_finetune_optimizer(model, cfg);
    auto& opt = *opt_ptr;

    const double val0 = evaluate_mse(model, cohort, val_idx, scaler);
    const double train0 = evaluate_mse(model, cohort, res.train_subjects, scaler);
    res.curve.push_back({0, train0, val0});
    check_finite(train0, "stage-3 initialization");

    double best = val_idx.empty() ? train0 : val0;
    auto best_state = snapshot(*model);
    int64_t since_best = 0;
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        set_group_lr(opt, 0, cosine_lr(cfg.lr_head, epoch - 1, cfg.epochs));
        if (train_encoder) set_group_lr(opt, 1, cosine_lr(cfg.lr_encoder, epoch - 1, cfg.epochs));
        model->train();
        Rng rng(stream_seed(cfg.seed, 3000 + std::uint64_t(epoch)));
        double sum = 0.0;
        for (const auto& b : make_batches(res.train_subjects, cfg.batch_size, rng)) {
            auto pred = model->forward(make_batch(cohort, b, model->config()));
            auto target = scaler.normalize(phenotype_matrix(cohort, b)).to(pred.dtype());
            auto loss = torch::mse_loss(pred, target);
            const double lv = loss.item<double>();
            check_finite(lv, "stage-3 fine-tuning");
            opt.zero_grad();
            loss.backward();
            opt.step();
            sum += lv * double(b.size());
        }
        const double train_loss = sum / double(res.train_subjects.size());
        const double val_loss = evaluate_mse(model, cohort, val_idx, scaler);
        res.curve.push_back({epoch, train_loss, val_loss});
        const double monitored = val_idx.empty() ? train_loss : val_loss;
        if (monitored < best) {
            best = monitored;
            best_state = snapshot(*model);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    restore(*model, best_state);
    for (auto& p : model->parameters()) p.set_requires_grad(true);
    model->eval();

    if (!stem.empty()) {
        nlohmann::json meta{{"config", model->config().to_json()},
                            {"schema", cohort.schema().to_json()},
                            {"stage", "stage3"},
                            {"projection", model->with_projection()},
                            {"data_fraction", cfg.data_fraction},
                            {"train_subjects", res.train_subjects.size()},
                            {"epochs_run", res.curve.back().epoch},
                            {"seed", cfg.seed}};
        res.checkpoint = save_checkpoint(*model, stem, "stage3",
                                         regressor_fingerprint(model->config(), cohort.schema(),
                                                               model->with_projection()),
                                         meta);
    }
    if (!curve_csv.empty()) write_curve_csv(curve_csv, res.curve);
    return res;
}

PhenotypeRegressor load_regressor(const std::filesystem::path& stem, const EncoderConfig& config,
                                  const TabularSchema& schema, bool with_projection) {
    PhenotypeRegressor model(config, schema, with_projection);
    auto ck = load_checkpoint(*model, stem, regressor_fingerprint(config, schema, with_projection));
    if (ck.kind != "stage3") throw ConfigError(stem.string() + " is not a stage-3 checkpoint");
    model->eval();
    return model;
}

torch::Tensor predict(PhenotypeRegressor& model, const Cohort& cohort, const std::vector<std::size_t>& idx) {
    torch::NoGradGuard guard;
    model->eval();
    const auto scaler = model->scaler();
    std::vector<torch::Tensor> out;
    for (const auto& b : chunk(idx, 64))
        out.push_back(scaler.denormalize(model->forward(make_batch(cohort, b, model->config()))));
    if (out.empty()) return torch::empty({0, int64_t(kNumPhenotypes)}, torch::kFloat64);
    return torch::cat(out);
}

PhenotypeVector predict_phenotypes(PhenotypeRegressor& model, const ImageStack& localizer) {
    if (!model->config().is_image()) throw ConfigError("model does not take image input");
    if (!localizer.voxels.defined() || localizer.voxels.sizes() != torch::IntArrayRef{kSlices, kImageSize, kImageSize})
        throw ConfigError("localizer must be [3,224,224]");
    torch::NoGradGuard guard;
    model->eval();
    auto batch = make_batch_from_images(localizer.voxels.unsqueeze(0).to(torch::kFloat32), model->config());
    auto y = model->scaler().denormalize(model->forward(batch)).contiguous();
    PhenotypeVector pv;
    for (std::size_t k = 0; k < kNumPhenotypes; ++k) pv.values[k] = y[0][int64_t(k)].item<double>();
    return pv;
}

void write_predictions_csv(const std::filesystem::path& file, const Cohort& cohort,
                           const std::vector<std::size_t>& idx, const torch::Tensor& predictions) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    const auto& panel = cohort.schema().phenotypes;
    out << "subject_id,phenotype_name,y_true,y_pred\n" << std::setprecision(10);
    auto pred = predictions.to(torch::kFloat64).contiguous();
    auto acc = pred.accessor<double, 2>();
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t k = 0; k < kNumPhenotypes; ++k)
            out << cohort[idx[r]].subject_id << ',' << panel.at(k).name << ',' << cohort[idx[r]].phenotypes.values[k]
                << ',' << acc[int64_t(r)][int64_t(k)] << '\n';
}

}  // namespace ctrip
