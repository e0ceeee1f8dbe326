#include "check.hpp"

#include <algorithm>
#include <set>

#include "ctrip/error.hpp"
#include "ctrip/regression.hpp"
#include "support.hpp"

using namespace ctrip;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny_localizer() {
    EncoderConfig c;
    c.modality = Modality::Localizer;
    c.embed_dim = 16, c.depth = 2, c.num_heads = 2, c.decoder_dim = 8, c.decoder_depth = 1;
    c.patch_size = 56;  // 16 tokens
    return c;
}

Cohort ready(Cohort c, SplitFractions f = {1.0, 0.0, 0.0}) { return preprocess_cohort(split_cohort(c, f, 1)); }

Cohort ids_only(std::size_t n) {
    std::vector<SubjectRecord> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i].subject_id = "id" + std::to_string(10000 + i);
    return split_cohort(Cohort(std::move(s), population_schema()), {1.0, 0.0, 0.0}, 0);
}

std::vector<torch::Tensor> clone_all(const std::vector<torch::Tensor>& ps) {
    std::vector<torch::Tensor> out;
    for (const auto& p : ps) out.push_back(p.detach().clone());
    return out;
}

}  // namespace

TEST_CASE("training subsets are sized and nested") {
    auto c = ids_only(512);
    CHECK(subsample_training(c, 0.01, 0).size() == 6);
    CHECK(subsample_training(c, 1.0, 0).size() == 512);
    CHECK(subsample_training(c, 0.1, 3).size() == 52);
    CHECK_THROWS_AS(subsample_training(c, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(subsample_training(c, 1.5, 0), ConfigError);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto small = subsample_training(c, 0.01, seed), mid = subsample_training(c, 0.1, seed),
             full = subsample_training(c, 1.0, seed);
        std::set<std::size_t> m(mid.begin(), mid.end()), f(full.begin(), full.end());
        for (auto i : small) CHECK(m.count(i));
        for (auto i : mid) CHECK(f.count(i));
        CHECK(f.size() == 512);
        CHECK(subsample_training(c, 0.1, seed) == mid);
    }
    CHECK(subsample_training(c, 0.1, 0) != subsample_training(c, 0.1, 1));
}

TEST_CASE("target scaler round trip") {
    auto c = ready(testing::small_cohort(12, 4).cohort);
    auto s = TargetScaler::fit(c, c.indices(Split::Train));
    for (std::size_t i = 0; i < c.size(); ++i) {
        auto back = s.denormalize(s.normalize(c[i].phenotypes.values));
        for (std::size_t k = 0; k < kNumPhenotypes; ++k)
            CHECK(std::abs(back[k] - c[i].phenotypes.values[k]) < 1e-9);
    }
    auto y = phenotype_matrix(c, c.indices(Split::Train));
    auto z = s.normalize(y);
    CHECK(z.mean(0).abs().max().item<double>() < 1e-9);
    CHECK((s.denormalize(z) - y).abs().max().item<double>() < 1e-9);
    CHECK_THROWS_AS(TargetScaler::fit(c, {}), ConfigError);
}

TEST_CASE("head and encoder learning rates differ by their ratio") {
    const auto& schema = population_schema();
    auto model = make_supervised_regressor(tiny_localizer(), schema, 1);
    FinetuneConfig cfg;
    cfg.lr_head = 1e-3, cfg.lr_encoder = 1e-4, cfg.weight_decay = 0.0;
    auto opt = make_finetune_optimizer(model, cfg);
    REQUIRE(opt->param_groups().size() == 2);

    auto head0 = clone_all(model->head->parameters()), enc0 = clone_all(model->encoder_parameters());
    for (auto& p : model->parameters()) p.mutable_grad() = torch::ones_like(p);
    opt->step();
    auto mean_step = [](const std::vector<torch::Tensor>& now, const std::vector<torch::Tensor>& before) {
        double s = 0, n = 0;
        for (std::size_t i = 0; i < now.size(); ++i) {
            s += (now[i] - before[i]).abs().sum().item<double>();
            n += double(now[i].numel());
        }
        return s / n;
    };
    const double ratio = mean_step(model->head->parameters(), head0) / mean_step(model->encoder_parameters(), enc0);
    CHECK(ratio == doctest::Approx(10.0).epsilon(0.01));

    cfg.lr_encoder = 0.0;
    auto frozen = make_finetune_optimizer(model, cfg);
    CHECK(frozen->param_groups().size() == 1);
}

TEST_CASE("zero encoder rate keeps the encoder fixed") {
    auto c = ready(testing::small_cohort(8, 5).cohort);
    auto model = make_supervised_regressor(tiny_localizer(), c.schema(), 2);
    auto before = clone_all(model->encoder_parameters());
    FinetuneConfig cfg;
    cfg.lr_encoder = 0.0, cfg.epochs = 5, cfg.batch_size = 4;
    auto res = finetune_stage3(model, c, cfg);
    auto after = model->encoder_parameters();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(torch::equal(before[i], after[i]));
    CHECK(res.curve.size() >= 2);
}

TEST_CASE("fine-tuning overfits six subjects") {
    auto c = ready(testing::small_cohort(6, 6).cohort);
    auto model = make_supervised_regressor(tiny_localizer(), c.schema(), 3);
    FinetuneConfig cfg;
    cfg.lr_head = 3e-3, cfg.lr_encoder = 1e-3, cfg.weight_decay = 0.0;
    cfg.epochs = 500, cfg.batch_size = 6, cfg.patience = 500;
    auto res = finetune_stage3(model, c, cfg);
    REQUIRE(res.train_subjects.size() == 6);
    auto scaler = model->scaler();
    auto z_pred = scaler.normalize(predict(model, c, res.train_subjects));
    auto z_true = scaler.normalize(phenotype_matrix(c, res.train_subjects));
    const double mse = (z_pred - z_true).pow(2).mean().item<double>();
    CAPTURE(mse);
    CHECK(mse < 0.01);
}

TEST_CASE("predictions do not depend on batch composition") {
    auto c = ready(testing::small_cohort(6, 7).cohort);
    auto model = make_supervised_regressor(tiny_localizer(), c.schema(), 4);
    model->set_scaler(TargetScaler::fit(c, c.indices(Split::Train)));
    std::vector<std::size_t> all{0, 1, 2, 3, 4, 5};
    auto joint = predict(model, c, all);
    for (std::size_t i = 0; i < all.size(); ++i) {
        auto alone = predict(model, c, {i});
        CHECK((alone[0] - joint[int64_t(i)]).abs().max().item<double>() < 1e-5 * (1.0 + joint.abs().max().item<double>()));
    }
    auto single = predict_phenotypes(model, *c[2].localizer);
    for (std::size_t k = 0; k < kNumPhenotypes; ++k)
        CHECK(single.values[k] == doctest::Approx(joint[2][int64_t(k)].item<double>()).epsilon(1e-5));
}

TEST_CASE("localizer-only inference and checkpoint round trip") {
    testing::TempDir dir("infer");
    write_cohort(testing::small_cohort(6, 8), dir.path());
    auto full = ready(load_cohort(dir.path()));
    auto model = make_supervised_regressor(tiny_localizer(), full.schema(), 5);
    FinetuneConfig cfg;
    cfg.epochs = 3, cfg.batch_size = 3;
    finetune_stage3(model, full, cfg, dir / "stage3", dir / "stage3_curve.csv");
    CHECK(fs::exists(dir / "stage3.pt"));
    CHECK(fs::exists(dir / "stage3_curve.csv"));
    const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
    auto ref = predict(model, full, idx);

    for (const auto& e : fs::directory_iterator(dir.path()))
        if (e.is_directory()) {
            fs::remove(e.path() / "ecg.bin");
            fs::remove(e.path() / "tabular.json");
        }
    LoadOptions opt;
    opt.modalities = {Modality::Localizer};
    auto local = ready(load_cohort(dir.path(), opt));
    REQUIRE(local.size() == 6);
    auto loaded = load_regressor(dir / "stage3", tiny_localizer(), full.schema(), false);
    CHECK(torch::equal(predict(loaded, local, idx), ref));
}
