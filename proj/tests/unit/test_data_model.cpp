#include "check.hpp"

#include <algorithm>
#include <set>

#include "ctrip/data_model.hpp"
#include "ctrip/error.hpp"
#include "ctrip/npy.hpp"
#include "support.hpp"

using namespace ctrip;
namespace fs = std::filesystem;

namespace {

Cohort id_only_cohort(std::size_t n, std::uint64_t seed) {
    // Ids in shuffled insertion order so the split cannot lean on input order.
    std::vector<SubjectRecord> subjects(n);
    const auto perm = permutation(n, seed);
    for (std::size_t i = 0; i < n; ++i) subjects[i].subject_id = "s" + std::to_string(1000 + perm[i]);
    return Cohort(std::move(subjects), population_schema());
}

std::vector<std::string> sorted(std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

TEST_CASE("split sizes follow largest remainder") {
    using S = std::array<std::size_t, 3>;
    CHECK(split_sizes(100, {0.7, 0.15, 0.15}) == S{70, 15, 15});
    CHECK(split_sizes(20877, {14577.0 / 20877, 3177.0 / 20877, 3123.0 / 20877}) == S{14577, 3177, 3123});
    // Two-decimal fractions of the same cohort land a few subjects away from the exact counts.
    CHECK(split_sizes(20877, {0.698, 0.152, 0.150}) == S{14572, 3173, 3132});
    CHECK(split_sizes(7, {0.5, 0.25, 0.25}) == S{3, 2, 2});  // remainders .5/.75/.75
    CHECK(split_sizes(1, {0.7, 0.15, 0.15}) == S{1, 0, 0});

    CHECK_THROWS_AS(split_sizes(10, {0.7, 0.2, 0.2}), ConfigError);
    CHECK_THROWS_AS(split_sizes(10, {-0.1, 0.6, 0.5}), ConfigError);
}

TEST_CASE("split assignment is deterministic and sized") {
    auto c = id_only_cohort(100, 3);
    auto a = split_cohort(c, {0.7, 0.15, 0.15}, 7);
    auto b = split_cohort(c, {0.7, 0.15, 0.15}, 7);
    CHECK(a.indices(Split::Train).size() == 70);
    CHECK(a.indices(Split::Val).size() == 15);
    CHECK(a.indices(Split::Test).size() == 15);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(a[i].split == b[i].split);

    // Assignment depends on the id set, not on the order the subjects arrive in.
    std::vector<std::size_t> rev(c.size());
    for (std::size_t i = 0; i < rev.size(); ++i) rev[i] = rev.size() - 1 - i;
    auto r = split_cohort(subset(c, rev), {0.7, 0.15, 0.15}, 7);
    for (auto s : {Split::Train, Split::Val, Split::Test})
        CHECK(sorted(a.subject_ids(s)) == sorted(r.subject_ids(s)));

    auto other = split_cohort(c, {0.7, 0.15, 0.15}, 8);
    CHECK(sorted(a.subject_ids(Split::Test)) != sorted(other.subject_ids(Split::Test)));
}

TEST_CASE("splits are disjoint and exhaustive for random cohorts") {
    Rng rng(99);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 1 + uniform_index(rng, 300);
        const double tr = 0.4 + 0.5 * uniform01(rng);
        const double va = (1.0 - tr) * uniform01(rng);
        auto c = split_cohort(id_only_cohort(n, rng()), {tr, va, 1.0 - tr - va}, rng());
        std::set<std::string> seen;
        std::size_t total = 0;
        for (auto s : {Split::Train, Split::Val, Split::Test}) {
            for (const auto& id : c.subject_ids(s)) CHECK(seen.insert(id).second);
            total += c.indices(s).size();
        }
        CHECK(total == n);
        CHECK(c.indices(Split::Unassigned).empty());
    }
}

TEST_CASE("cohort rejects duplicate subject ids") {
    std::vector<SubjectRecord> s(2);
    s[0].subject_id = s[1].subject_id = "dup";
    CHECK_THROWS_AS(Cohort(s, population_schema()), ConfigError);
}

TEST_CASE("loading a cohort directory") {
    testing::TempDir dir("load");
    write_cohort(testing::small_cohort(10, 5), dir.path());

    SUBCASE("well formed") {
        auto c = load_cohort(dir.path());
        CHECK(c.size() == 10);
        CHECK(c.rejected().empty());
        for (const auto& s : c.subjects()) {
            REQUIRE(s.localizer);
            CHECK(s.localizer->voxels.sizes() == torch::IntArrayRef{3, 224, 224});
            CHECK(s.ecg->samples.sizes() == torch::IntArrayRef{12, 5000});
            CHECK(s.tabular->numeric.size() == c.schema().numeric.size());
            CHECK_FALSE(s.cmr);
        }
    }
    SUBCASE("missing ecg file") {
        fs::remove(dir / "sub00003" / "ecg.bin");
        auto c = load_cohort(dir.path());
        CHECK(c.size() == 9);
        REQUIRE(c.rejected().size() == 1);
        CHECK(c.rejected()[0].subject_id == "sub00003");
        CHECK(c.rejected()[0].reason.rfind("missing modality", 0) == 0);
    }
    SUBCASE("seventeen phenotypes") {
        const auto file = dir / "sub00004" / "phenotypes.json";
        auto j = nlohmann::json::parse(testing::slurp(file));
        j.erase("LVEF");
        std::ofstream(file) << j.dump();
        auto c = load_cohort(dir.path());
        CHECK(c.size() == 9);
        REQUIRE(c.rejected().size() == 1);
        CHECK(c.rejected()[0].reason == "phenotype length ≠ 18");
    }
    SUBCASE("wrong localizer shape") {
        npy::write_f32(dir / "sub00001" / "localizer.npy", torch::zeros({3, 200, 200}));
        auto c = load_cohort(dir.path());
        CHECK(c.size() == 9);
        CHECK(c.rejected().size() == 1);
    }
    SUBCASE("malformed schema is fatal") {
        std::ofstream(dir / "schema.json") << "{ not json";
        CHECK_THROWS_AS(load_cohort(dir.path()), ConfigError);
    }
    SUBCASE("only requested modalities are read") {
        LoadOptions opt;
        opt.modalities = {Modality::Localizer};
        fs::remove(dir / "sub00002" / "ecg.bin");
        auto c = load_cohort(dir.path(), opt);
        CHECK(c.size() == 10);
        for (const auto& f : c.access_log()) {
            CHECK(f.filename() != "ecg.bin");
            CHECK(f.filename() != "tabular.json");
        }
        CHECK_FALSE(c[0].has(Modality::Ecg));
    }
    SUBCASE("phenotype injection appends eighteen numeric tokens") {
        LoadOptions opt;
        opt.inject_phenotypes = true;
        auto plain = load_cohort(dir.path());
        auto inj = load_cohort(dir.path(), opt);
        CHECK(inj.schema().num_tokens() == plain.schema().num_tokens() + kNumPhenotypes);
        CHECK(inj[0].tabular->numeric.size() == plain[0].tabular->numeric.size() + kNumPhenotypes);
    }
}

TEST_CASE("save after load reproduces the tensors byte for byte") {
    testing::TempDir a("rt_a"), b("rt_b");
    write_cohort(testing::small_cohort(4, 8, /*with_cmr=*/true), a.path());
    LoadOptions opt;
    opt.modalities = ModalitySet::all();
    save_cohort(load_cohort(a.path(), opt), b.path());
    for (const auto& e : fs::directory_iterator(a.path())) {
        if (!e.is_directory()) continue;
        for (const char* f : {"localizer.npy", "cmr.npy", "ecg.bin"}) {
            const auto rel = e.path().filename() / f;
            CHECK(testing::slurp(a.path() / rel) == testing::slurp(b.path() / rel));
        }
    }
    auto x = load_cohort(a.path(), opt), y = load_cohort(b.path(), opt);
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(x[i].phenotypes.values == y[i].phenotypes.values);
        for (std::size_t k = 0; k < x[i].tabular->numeric.size(); ++k)
            CHECK(x[i].tabular->numeric[k].raw == y[i].tabular->numeric[k].raw);
    }
}

TEST_CASE("schema validation") {
    auto s = population_schema();
    CHECK_NOTHROW(s.validate());
    CHECK(s.phenotypes.size() == kNumPhenotypes);
    for (const char* name : {"LVEF", "RVEF", "LVM", "RVEDV"}) CHECK_NOTHROW(s.phenotype_index(name));

    auto bad = s;
    bad.phenotypes.pop_back();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s;
    bad.categorical[0].cardinality = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    auto rt = TabularSchema::from_json(s.to_json());
    CHECK(rt.to_json() == s.to_json());
}
