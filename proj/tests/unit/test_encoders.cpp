#include "check.hpp"

#include <cmath>

#include "ctrip/encoders.hpp"
#include "ctrip/error.hpp"
#include "ctrip/training.hpp"
#include "support.hpp"

using namespace ctrip;

namespace {

TabularSchema mini_schema() {
    TabularSchema s;
    s.numeric = {{"a", 0.0, 1.0}, {"b", 0.0, 1.0}, {"c", 0.0, 1.0}};
    s.categorical = {{"k", 3}};
    const auto& panel = default_phenotype_panel();
    s.phenotypes.assign(panel.begin(), panel.end());
    return s;
}

EncoderConfig mini_config(Modality m) {
    EncoderConfig c;
    c.modality = m;
    c.embed_dim = 16, c.depth = 2, c.num_heads = 2, c.decoder_dim = 8, c.decoder_depth = 1;
    c.patch_size = 112;  // 4 image tokens
    return c;
}

// Largest per-tensor relative error between autograd and central differences.
// `max_entries` < 0 probes every entry; otherwise a fixed random subset per tensor.
double gradient_check(torch::nn::Module& model, const std::function<torch::Tensor()>& loss_fn, int max_entries,
                      double eps = 1e-4) {
    model.zero_grad();
    loss_fn().backward();
    torch::NoGradGuard guard;
    Rng rng(5);
    double worst = 0.0;
    for (auto& p : model.parameters()) {
        auto analytic = p.grad().clone().reshape(-1);
        auto flat = p.view(-1);
        std::vector<int64_t> entries;
        if (max_entries < 0 || flat.numel() <= max_entries) {
            for (int64_t i = 0; i < flat.numel(); ++i) entries.push_back(i);
        } else {
            for (int i = 0; i < max_entries; ++i) entries.push_back(int64_t(uniform_index(rng, std::uint64_t(flat.numel()))));
        }
        auto a = torch::empty({int64_t(entries.size())}, torch::kFloat64);
        auto n = torch::empty_like(a);
        for (std::size_t k = 0; k < entries.size(); ++k) {
            const int64_t i = entries[k];
            const double orig = flat[i].item<double>();
            flat[i] = orig + eps;
            const double up = loss_fn().item<double>();
            flat[i] = orig - eps;
            const double down = loss_fn().item<double>();
            flat[i] = orig;
            n[int64_t(k)] = (up - down) / (2 * eps);
            a[int64_t(k)] = analytic[i];
        }
        const double denom = std::max({a.norm().item<double>(), n.norm().item<double>(), 1e-12});
        worst = std::max(worst, (a - n).norm().item<double>() / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("config validation") {
    auto c = EncoderConfig::paper_default(Modality::Localizer);
    CHECK(c.embed_dim == 768);
    CHECK(EncoderConfig::paper_default(Modality::Ecg).embed_dim == 384);
    CHECK(EncoderConfig::paper_default(Modality::Tabular).embed_dim == 384);
    CHECK_NOTHROW(c.validate());
    for (auto m : {Modality::Localizer, Modality::Ecg, Modality::Tabular, Modality::Cmr})
        CHECK_NOTHROW(EncoderConfig::desk_default(m).validate());

    auto bad = c;
    bad.num_heads = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.decoder_depth = c.depth;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.patch_size = 15;
    CHECK_THROWS_WITH_AS(bad.validate(), "224 not divisible by 15", ConfigError);

    auto rt = EncoderConfig::from_json(c.to_json());
    CHECK(config_fingerprint(rt, population_schema()) == config_fingerprint(c, population_schema()));
    bad = c;
    bad.depth = 11;
    CHECK(config_fingerprint(bad, population_schema()) != config_fingerprint(c, population_schema()));
}

TEST_CASE("sinusoidal table") {
    auto t = sinusoidal_table(196, 64);
    CHECK(t.sizes() == torch::IntArrayRef{196, 64});
    CHECK(t.abs().max().item<double>() <= 1.0 + 1e-6);
    CHECK(torch::equal(t, sinusoidal_table(196, 64)));
    // every row distinct
    auto d = torch::cdist(t, t);
    CHECK((d + torch::eye(196) * 10).min().item<double>() > 1e-3);
}

TEST_CASE("full-size localizer encoder shapes") {
    torch::manual_seed(0);
    MaskedAutoencoder mae(EncoderConfig::paper_default(Modality::Localizer), population_schema());
    mae->eval();
    torch::NoGradGuard guard;
    Rng rng(1);
    ImageStack img{torch::randn({3, 224, 224})};
    auto seq = patchify_image(img, 16);
    auto plan = sample_mask(196, 0.75, rng);

    auto out = encode(mae->encoder, seq, &plan);
    CHECK(out.latent.sizes() == torch::IntArrayRef{1, 50, 768});
    CHECK(out.cls.sizes() == torch::IntArrayRef{1, 768});
    auto again = encode(mae->encoder, seq, &plan);
    CHECK(torch::equal(out.latent, again.latent));

    auto [vis, msk] = mask_tensors({plan});
    auto pred = mae->decoder->reconstruct_patches(out.latent, vis, msk);
    CHECK(pred.sizes() == torch::IntArrayRef{1, 147, 768});
    CHECK(torch::isfinite(pred).all().item<bool>());

    auto full = encode(mae->encoder, seq);
    CHECK(full.latent.sizes() == torch::IntArrayRef{1, 197, 768});

    TokenSequence wrong{torch::randn({196, 700}), seq.positions, Modality::Localizer};
    CHECK_THROWS_AS(encode(mae->encoder, wrong), ConfigError);
    // decoder refuses a plan that does not match the latent sequence
    auto [vis2, msk2] = mask_tensors({sample_mask(196, 0.5, rng)});
    CHECK_THROWS_AS(mae->decoder->reconstruct_patches(out.latent, vis2, msk2), ConfigError);
}

TEST_CASE("class token is invariant to visible-token order") {
    torch::manual_seed(2);
    ModalityEncoder enc(EncoderConfig::desk_default(Modality::Localizer), population_schema());
    enc->eval();
    torch::NoGradGuard guard;
    auto x = torch::randn({1, 196, 768});
    Rng rng(3);
    auto plan = sample_mask(196, 0.75, rng);
    auto vis = torch::tensor(plan.visible_idx, torch::kInt64).unsqueeze(0);
    auto a = enc->forward(ModalityBatch{x}, vis).cls;
    auto perm = torch::randperm(vis.size(1), torch::kInt64);
    auto b = enc->forward(ModalityBatch{x}, vis.index_select(1, perm)).cls;
    CHECK((a - b).abs().max().item<double>() < 1e-5);
}

TEST_CASE("reconstruction losses") {
    auto targets = torch::randn({2, 10, 6}, torch::kFloat64);
    auto masked = torch::tensor({{1, 4, 7}, {0, 2, 9}}, torch::kInt64);
    auto gathered = targets.gather(1, masked.unsqueeze(-1).expand({2, 3, 6}));
    CHECK(mae_loss_patches(gathered, targets, masked).item<double>() == 0.0);
    CHECK(mae_loss_patches(gathered + 1.0, targets, masked).item<double>() == doctest::Approx(1.0).epsilon(1e-12));

    // only masked positions are supervised
    auto perturbed = targets.clone();
    for (int64_t v : {0, 3, 5, 8}) perturbed[0][v] += 100.0;
    for (int64_t v : {1, 3, 8}) perturbed[1][v] -= 50.0;
    auto preds = torch::randn({2, 3, 6}, torch::kFloat64);
    CHECK(mae_loss_patches(preds, targets, masked).item<double>() ==
          mae_loss_patches(preds, perturbed, masked).item<double>());

    TabularReconstruction r;
    r.numeric = torch::randn({5, 3}, torch::kFloat64);
    r.logits = {torch::zeros({5, 4}, torch::kFloat64), torch::zeros({5, 4}, torch::kFloat64)};
    auto cats = torch::randint(0, 4, {5, 2}, torch::kInt64);
    CHECK(mae_loss_tabular(r, r.numeric, cats).item<double>() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(mae_loss_tabular(r, r.numeric - 1.0, cats).item<double>() ==
          doctest::Approx(1.0 + std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("mae loss gradients match finite differences") {
    torch::manual_seed(4);
    const auto schema = mini_schema();
    Rng rng(9);

    SUBCASE("tabular, every weight") {
        const auto cfg = mini_config(Modality::Tabular);
        MaskedAutoencoder mae(cfg, schema);
        mae->to(torch::kFloat64);
        ModalityBatch batch;
        batch.numeric = torch::randn({3, 3}, torch::kFloat64);
        batch.categorical = torch::randint(0, 3, {3, 1}, torch::kInt64);
        auto [vis, msk] = mask_tensors(sample_masks(3, 4, 0.75, rng));
        const double err = gradient_check(*mae, [&] { return mae->loss(batch, vis, msk); }, -1);
        CAPTURE(err);
        CHECK(err < 1e-4);
    }
    SUBCASE("image patches, sampled weights") {
        const auto cfg = mini_config(Modality::Localizer);
        MaskedAutoencoder mae(cfg, schema);
        mae->to(torch::kFloat64);
        ModalityBatch batch{patchify_images(torch::randn({2, 3, 224, 224}, torch::kFloat64), 112)};
        auto [vis, msk] = mask_tensors(sample_masks(2, 4, 0.5, rng));
        const double err = gradient_check(*mae, [&] { return mae->loss(batch, vis, msk); }, 24);
        CAPTURE(err);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("a fixed batch is overfit step by step") {
    torch::manual_seed(6);
    const auto cfg = EncoderConfig::desk_default(Modality::Localizer);
    MaskedAutoencoder mae(cfg, population_schema());
    auto sc = testing::small_cohort(4, 3);
    auto batch = make_batch(sc.cohort, {0, 1, 2, 3}, cfg);
    Rng rng(1);
    auto [vis, msk] = mask_tensors(sample_masks(4, 196, 0.75, rng));
    torch::optim::AdamW opt(mae->parameters(), torch::optim::AdamWOptions(5e-4).weight_decay(0.05));
    std::vector<double> losses;
    for (int step = 0; step <= 5; ++step) {
        auto loss = mae->loss(batch, vis, msk);
        losses.push_back(loss.item<double>());
        if (step == 5) break;
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    int non_increasing = 0;
    for (std::size_t i = 1; i < losses.size(); ++i) non_increasing += losses[i] <= losses[i - 1];
    CAPTURE(losses);
    CHECK(non_increasing >= 4);
}

TEST_CASE("checkpoints refuse a different configuration") {
    testing::TempDir dir("ckpt");
    const auto cfg = EncoderConfig::desk_default(Modality::Tabular);
    const auto& schema = population_schema();
    torch::manual_seed(1);
    MaskedAutoencoder a(cfg, schema);
    auto ck = save_checkpoint(*a, dir / "m", "stage1", config_fingerprint(cfg, schema), {{"note", 1}});
    CHECK(std::filesystem::exists(dir / "m.pt"));
    CHECK(read_checkpoint_sidecar(dir / "m").metadata["note"] == 1);

    torch::manual_seed(2);
    auto b = load_stage1(dir / "m", cfg, schema);
    auto pa = a->parameters(), pb = b->parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));

    auto other = cfg;
    other.embed_dim = 64;
    CHECK_THROWS_AS(load_stage1(dir / "m", other, schema), FingerprintMismatch);
    auto injected = schema;
    injected.inject_phenotypes = true;
    CHECK_THROWS_AS(load_stage1(dir / "m", cfg, injected), FingerprintMismatch);
    CHECK_THROWS_AS(load_stage1(dir / "absent", cfg, schema), ConfigError);
}

TEST_CASE("stage-1 training loop") {
    auto cohort = split_cohort(testing::small_cohort(16, 4).cohort, {0.75, 0.25, 0.0}, 0);
    TrainHparams hp{3, 4, 5e-4, 0.05, 20, 7, true};

    SUBCASE("zero learning rate leaves the loss unchanged") {
        hp.lr = 0.0;
        for (auto m : {Modality::Tabular, Modality::Localizer}) {
            auto res = pretrain_stage1(cohort, EncoderConfig::desk_default(m), hp);
            for (const auto& e : res.curve) CHECK(e.val_loss == doctest::Approx(res.curve[0].val_loss).epsilon(1e-6));
            CHECK(res.final_train_loss == doctest::Approx(res.initial_train_loss).epsilon(1e-6));
        }
    }
    SUBCASE("fixed seed reproduces the run") {
        for (auto m : {Modality::Tabular, Modality::Localizer}) {
            auto a = pretrain_stage1(cohort, EncoderConfig::desk_default(m), hp);
            auto b = pretrain_stage1(cohort, EncoderConfig::desk_default(m), hp);
            CHECK(std::round(a.final_train_loss * 1e6) == std::round(b.final_train_loss * 1e6));
            REQUIRE(a.curve.size() == b.curve.size());
            for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].train_loss == b.curve[i].train_loss);
        }
    }
    SUBCASE("artifacts") {
        testing::TempDir dir("stage1");
        auto res = pretrain_stage1(preprocess_cohort(cohort), EncoderConfig::desk_default(Modality::Ecg), hp,
                                   dir / "stage1_E");
        CHECK(res.checkpoint);
        CHECK(std::filesystem::exists(dir / "stage1_E.pt"));
        const auto csv = testing::slurp(dir / "stage1_E_curve.csv");
        CHECK(csv.rfind("epoch,train_loss,val_loss\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == int(res.curve.size()) + 1);
    }
    SUBCASE("empty training split is refused") {
        auto none = split_cohort(testing::small_cohort(4, 4).cohort, {0.0, 0.5, 0.5}, 0);
        CHECK_THROWS_AS(pretrain_stage1(none, EncoderConfig::desk_default(Modality::Tabular), hp), ConfigError);
    }
}

TEST_CASE("non-finite losses abort") {
    CHECK_THROWS_AS(check_finite(std::nan(""), "x"), DivergenceError);
    CHECK_THROWS_AS(check_finite(INFINITY, "x"), DivergenceError);
    CHECK_NOTHROW(check_finite(1.0, "x"));
}

TEST_CASE("learning-rate schedule") {
    CHECK(cosine_lr(1.0, 0, 10) == 1.0);
    CHECK(cosine_lr(1.0, 5, 10) == doctest::Approx(0.5));
    for (int e = 1; e < 10; ++e) CHECK(cosine_lr(1.0, e, 10) < cosine_lr(1.0, e - 1, 10));
}
