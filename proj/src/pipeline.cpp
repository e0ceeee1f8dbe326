#include "ctrip/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ctrip/error.hpp"
#include "ctrip/interpret.hpp"
#include "ctrip/util.hpp"

namespace fs = std::filesystem;

namespace ctrip {

namespace {

struct VariantName {
    Variant v;
    const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::CmrSup, "CMR_sup"}, {Variant::LSup, "L_sup"}, {Variant::ESup, "E_sup"},
    {Variant::TSup, "T_sup"},     {Variant::LT, "L+T"},     {Variant::LE, "L+E"},
    {Variant::LETp, "L+E+T_p"},   {Variant::CTrip, "C-TRIP"},
};

}  // namespace

std::string_view to_string(Variant v) {
    for (const auto& e : kVariantNames)
        if (e.v == v) return e.name;
    return "?";
}

Variant variant_from_string(std::string_view s) {
    for (const auto& e : kVariantNames)
        if (s == e.name) return e.v;
    throw ConfigError("unknown variant: " + std::string(s));
}

const std::vector<Variant>& all_variants() {
    static const std::vector<Variant> vs = {Variant::CmrSup, Variant::LSup, Variant::ESup, Variant::TSup,
                                            Variant::LT,     Variant::LE,   Variant::LETp, Variant::CTrip};
    return vs;
}

VariantSpec VariantSpec::of(Variant v) {
    VariantSpec s;
    s.variant = v;
    switch (v) {
        case Variant::CmrSup: s.input = Modality::Cmr; break;
        case Variant::LSup: s.input = Modality::Localizer; break;
        case Variant::ESup: s.input = Modality::Ecg; break;
        case Variant::TSup: s.input = Modality::Tabular; break;
        case Variant::LT: s.aligned = true, s.edges = {false, true}; break;
        case Variant::LE: s.aligned = true, s.edges = {true, false}; break;
        case Variant::LETp: s.aligned = true, s.edges = {true, true}, s.inject_phenotypes = true; break;
        case Variant::CTrip: s.aligned = true, s.edges = {true, true}; break;
    }
    return s;
}

ModalitySet VariantSpec::modalities() const {
    return aligned ? edges.modalities() : ModalitySet{input};
}

std::vector<Modality> VariantSpec::pretrain_modalities() const {
    std::vector<Modality> out;
    if (!aligned) return out;
    out.push_back(Modality::Localizer);
    if (edges.le) out.push_back(Modality::Ecg);
    if (edges.lt) out.push_back(Modality::Tabular);
    return out;
}

EncoderConfig ExperimentConfig::encoder_config(Modality m) const {
    auto c = scale == ModelScale::Desk ? EncoderConfig::desk_default(m) : EncoderConfig::paper_default(m);
    c.mask_ratio = mask_ratio;
    return c;
}

void ExperimentConfig::use_desk_schedule() {
    stage1.epochs = 30, stage1.batch_size = 64, stage1.lr = 3e-3;
    stage2.epochs = 40, stage2.batch_size = 64, stage2.lr = 3e-4;
    stage3.epochs = 60, stage3.batch_size = 32;
}

nlohmann::json ExperimentConfig::to_json() const {
    auto hp = [](const TrainHparams& h) {
        return nlohmann::json{{"epochs", h.epochs}, {"bs", h.batch_size}, {"lr", h.lr},
                              {"weight_decay", h.weight_decay}, {"patience", h.patience}, {"augment", h.augment}};
    };
    return {{"variant", to_string(variant)},
            {"scale", scale == ModelScale::Desk ? "desk" : "paper"},
            {"seed", seed},
            {"split_seed", split_seed},
            {"split", {split.train, split.val, split.test}},
            {"deterministic", deterministic},
            {"mask_ratio", mask_ratio},
            {"stage1", hp(stage1)},
            {"stage2", hp(stage2)},
            {"tau_le", tau_init.tau_le},
            {"tau_lt", tau_init.tau_lt},
            {"freeze_encoders", freeze_encoders},
            {"stage3",
             {{"fraction", stage3.data_fraction},
              {"lr_head", stage3.lr_head},
              {"lr_encoder", stage3.lr_encoder},
              {"epochs", stage3.epochs},
              {"bs", stage3.batch_size},
              {"patience", stage3.patience}}}};
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

void enable_deterministic_mode() {
    torch::set_num_threads(1);
    at::globalContext().setDeterministicAlgorithms(true, false);
}

std::string stage1_name(Modality m, bool inject_phenotypes) {
    std::string s = "stage1_" + std::string(short_name(m));
    if (m == Modality::Tabular && inject_phenotypes) s += "p";
    return s;
}

std::string stage2_name(Variant v) { return "stage2_" + std::string(to_string(v)); }

std::string fraction_label(double fraction) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << fraction;
    return os.str();
}

std::string stage3_name(Variant v, double fraction) {
    return "stage3_" + std::string(to_string(v)) + "_" + fraction_label(fraction);
}

Cohort load_for_stage(const fs::path& data_dir, ModalitySet modalities, bool inject_phenotypes,
                      const ExperimentConfig& cfg) {
    LoadOptions opt;
    opt.modalities = modalities;
    opt.inject_phenotypes = inject_phenotypes;
    opt.correct_drift = true;
    auto cohort = load_cohort(data_dir, opt);
    if (cohort.size() == 0) throw ConfigError("no usable subjects in " + data_dir.string());
    return split_cohort(cohort, cfg.split, cfg.split_seed);
}

std::string input_fingerprint(const Cohort& cohort, const fs::path& data_dir) {
    std::uint64_t h = fnv1a("");
    std::vector<char> buf(1 << 16);
    for (const auto& file : cohort.access_log()) {
        h = fnv1a(fs::relative(file, data_dir).generic_string(), h);
        std::ifstream in(file, std::ios::binary);
        while (in) {
            in.read(buf.data(), std::streamsize(buf.size()));
            h = fnv1a(std::string_view(buf.data(), std::size_t(in.gcount())), h);
        }
    }
    return hex64(h);
}

void write_manifest(const fs::path& run_dir, const std::string& command, const ExperimentConfig& cfg,
                    const nlohmann::json& inputs) {
    fs::create_directories(run_dir);
    nlohmann::json j{{"command", command},
                     {"config", cfg.to_json()},
                     {"config_hash", cfg.hash()},
                     {"seed", cfg.seed},
                     {"inputs", inputs}};
    std::ofstream(run_dir / ("manifest_" + command + ".json")) << j.dump(2) << '\n';
}

fs::path default_run_dir(const fs::path& runs_root, Variant v) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    return runs_root / (std::string(stamp) + "_" + std::string(to_string(v)));
}

namespace {

std::string checkpoint_fingerprint(const fs::path& stem) { return read_checkpoint_sidecar(stem).fingerprint; }

std::map<Modality, EncoderConfig> alignment_configs(const ExperimentConfig& cfg) {
    std::map<Modality, EncoderConfig> out;
    for (auto m : cfg.spec().pretrain_modalities()) out[m] = cfg.encoder_config(m);
    return out;
}

std::map<Modality, ModalityEncoder> load_stage1_encoders(const ExperimentConfig& cfg, const fs::path& run_dir,
                                                         const TabularSchema& schema, nlohmann::json& inputs) {
    const auto spec = cfg.spec();
    std::map<Modality, ModalityEncoder> out;
    for (auto m : spec.pretrain_modalities()) {
        const auto stem = run_dir / stage1_name(m, spec.inject_phenotypes);
        if (!fs::exists(stem.string() + ".json"))
            throw ConfigError("missing stage-1 checkpoint " + stem.filename().string() + "; run pretrain first");
        out.emplace(m, load_stage1(stem, cfg.encoder_config(m), schema)->encoder);
        inputs[stem.filename().string()] = checkpoint_fingerprint(stem);
    }
    return out;
}

void require_aligned(const VariantSpec& spec) {
    if (!spec.aligned) throw ConfigError("variant has no alignment stage");
}

PhenotypeRegressor initial_regressor(const ExperimentConfig& cfg, const fs::path& run_dir, const TabularSchema& schema,
                                     nlohmann::json& inputs) {
    const auto spec = cfg.spec();
    const auto seed = stream_seed(cfg.seed, 31);
    if (!spec.aligned) return make_supervised_regressor(cfg.encoder_config(spec.input), schema, seed);
    const auto stem = run_dir / stage2_name(cfg.variant);
    if (!fs::exists(stem.string() + ".json"))
        throw ConfigError("missing stage-2 checkpoint " + stem.filename().string() + "; run align first");
    auto aligned = load_alignment(stem, spec.edges, alignment_configs(cfg), schema);
    inputs[stem.filename().string()] = checkpoint_fingerprint(stem);
    return make_aligned_regressor(aligned, schema, seed);
}

FinetuneConfig stage3_config(const ExperimentConfig& cfg) {
    auto c = cfg.stage3;
    c.seed = cfg.seed;
    // Randomly initialized baselines train their encoder at the head rate.
    if (!cfg.spec().aligned) c.lr_encoder = c.lr_head;
    return c;
}

Cohort stage3_cohort(const ExperimentConfig& cfg, const fs::path& data_dir) {
    const auto spec = cfg.spec();
    // Only the inference modality is read; the tabular schema still carries the
    // variant's injection flag so the stage-2 fingerprint matches.
    return load_for_stage(data_dir, ModalitySet{spec.input}, spec.inject_phenotypes, cfg);
}

std::vector<std::string> ids_of(const Cohort& cohort, const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(cohort[i].subject_id);
    return out;
}

}  // namespace

Stage1Result run_pretrain(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir, Modality m) {
    const auto spec = cfg.spec();
    if (!spec.modalities().contains(m) || m == Modality::Cmr)
        throw ConfigError("modality " + std::string(short_name(m)) + " is not pretrained by variant " +
                          std::string(to_string(cfg.variant)));
    auto cohort = load_for_stage(data_dir, ModalitySet{m}, spec.inject_phenotypes, cfg);
    nlohmann::json inputs{{"data", input_fingerprint(cohort, data_dir)}, {"subjects", cohort.size()}};
    write_manifest(run_dir, "pretrain_" + std::string(short_name(m)), cfg, inputs);
    auto hp = cfg.stage1;
    hp.seed = stream_seed(cfg.seed, std::uint64_t(m));
    return pretrain_stage1(cohort, cfg.encoder_config(m), hp, run_dir / stage1_name(m, spec.inject_phenotypes));
}

Stage2Result run_align(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir) {
    const auto spec = cfg.spec();
    require_aligned(spec);
    auto cohort = load_for_stage(data_dir, spec.modalities(), spec.inject_phenotypes, cfg);
    nlohmann::json inputs{{"data", input_fingerprint(cohort, data_dir)}};
    auto encoders = load_stage1_encoders(cfg, run_dir, cohort.schema(), inputs);
    write_manifest(run_dir, "align", cfg, inputs);
    Stage2Hparams hp;
    hp.train = cfg.stage2;
    hp.train.seed = cfg.seed;
    hp.tau_init = cfg.tau_init;
    hp.edges = spec.edges;
    hp.freeze_encoders = cfg.freeze_encoders;
    return align_stage2(cohort, encoders, hp, run_dir / stage2_name(cfg.variant));
}

Stage3Result run_finetune(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir) {
    auto cohort = stage3_cohort(cfg, data_dir);
    nlohmann::json inputs{{"data", input_fingerprint(cohort, data_dir)}};
    auto model = initial_regressor(cfg, run_dir, cohort.schema(), inputs);
    write_manifest(run_dir, "finetune", cfg, inputs);
    const auto name = stage3_name(cfg.variant, cfg.stage3.data_fraction);
    auto res = finetune_stage3(model, cohort, stage3_config(cfg), run_dir / name, run_dir / (name + ".csv"));
    const auto test = cohort.indices(Split::Test);
    write_predictions_csv(run_dir / ("predictions_" + std::string(to_string(cfg.variant)) + "_" +
                                     fraction_label(cfg.stage3.data_fraction) + ".csv"),
                          cohort, test, predict(res.model, cohort, test));
    return res;
}

AgreementReport run_evaluate(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir) {
    const auto spec = cfg.spec();
    auto cohort = stage3_cohort(cfg, data_dir);
    const auto stem = run_dir / stage3_name(cfg.variant, cfg.stage3.data_fraction);
    if (!fs::exists(stem.string() + ".json"))
        throw ConfigError("missing stage-3 checkpoint " + stem.filename().string() + "; run finetune first");
    auto model = load_regressor(stem, cfg.encoder_config(spec.input), cohort.schema(), spec.aligned);
    write_manifest(run_dir, "evaluate", cfg,
                   {{"data", input_fingerprint(cohort, data_dir)}, {stem.filename().string(), checkpoint_fingerprint(stem)}});

    const auto test = cohort.indices(Split::Test);
    std::vector<std::string> names;
    for (const auto& p : cohort.schema().phenotypes) names.push_back(p.name);
    AgreementReport report;
    const auto file = run_dir / "agreement_report.json";
    report[std::string(to_string(cfg.variant))] =
        agreement(predict(model, cohort, test), phenotype_matrix(cohort, test), names, stream_seed(cfg.seed, 77));

    auto merged = nlohmann::json::object();
    if (fs::exists(file)) {
        std::ifstream in(file);
        try {
            in >> merged;
        } catch (const nlohmann::json::exception&) {
            merged = nlohmann::json::object();
        }
    }
    const auto fresh = report_to_json(report);  // items() must not outlive its object
    for (auto& [k, v] : fresh.items()) merged[k] = v;
    std::ofstream(file) << merged.dump(2) << '\n';
    return report;
}

std::vector<ScalingRow> run_scaling(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir,
                                    const std::vector<Variant>& variants, const std::vector<double>& fractions,
                                    const std::vector<std::uint64_t>& seeds) {
    std::map<std::string, Cohort> cohorts;
    std::vector<std::string> names, variant_names;
    nlohmann::json inputs = nlohmann::json::object();
    for (auto v : variants) variant_names.emplace_back(to_string(v));

    auto runner = [&](const std::string& variant, double fraction, std::uint64_t seed) {
        ExperimentConfig c = cfg;
        c.variant = variant_from_string(variant);
        c.seed = seed;
        c.stage3.data_fraction = fraction;
        const auto spec = c.spec();
        const std::string key = std::string(short_name(spec.input)) + (spec.inject_phenotypes ? "p" : "");
        if (!cohorts.count(key)) {
            cohorts.emplace(key, stage3_cohort(c, data_dir));
            inputs["data_" + key] = input_fingerprint(cohorts.at(key), data_dir);
        }
        const auto& cohort = cohorts.at(key);
        if (names.empty())
            for (const auto& p : cohort.schema().phenotypes) names.push_back(p.name);
        auto model = initial_regressor(c, run_dir, cohort.schema(), inputs);
        auto res = finetune_stage3(model, cohort, stage3_config(c));
        const auto test = cohort.indices(Split::Test);
        return ScalingCellOutput{ids_of(cohort, test), predict(res.model, cohort, test),
                                 phenotype_matrix(cohort, test)};
    };
    std::vector<std::string> panel;
    for (const auto& p : default_phenotype_panel()) panel.push_back(p.name);
    auto rows = scaling_experiment(variant_names, fractions, seeds, panel, runner);
    write_scaling_table(run_dir / "scaling_table.csv", rows);
    write_manifest(run_dir, "scaling", cfg, inputs);
    return rows;
}

std::vector<fs::path> run_attention(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir,
                                    const std::vector<std::string>& subjects) {
    const auto spec = cfg.spec();
    if (!(spec.input == Modality::Localizer || spec.input == Modality::Cmr))
        throw ConfigError("variant " + std::string(to_string(cfg.variant)) + " has no image encoder");
    auto cohort = stage3_cohort(cfg, data_dir);
    nlohmann::json inputs{{"data", input_fingerprint(cohort, data_dir)}};

    ModalityEncoder encoder{nullptr};
    const auto stem = run_dir / stage3_name(cfg.variant, cfg.stage3.data_fraction);
    if (fs::exists(stem.string() + ".json")) {
        encoder = load_regressor(stem, cfg.encoder_config(spec.input), cohort.schema(), spec.aligned)->encoder;
        inputs[stem.filename().string()] = checkpoint_fingerprint(stem);
    } else if (spec.aligned) {
        const auto s2 = run_dir / stage2_name(cfg.variant);
        encoder = load_alignment(s2, spec.edges, alignment_configs(cfg), cohort.schema())->encoder(Modality::Localizer);
        inputs[s2.filename().string()] = checkpoint_fingerprint(s2);
    } else {
        throw ConfigError("no trained model for " + std::string(to_string(cfg.variant)) + "; run finetune first");
    }
    write_manifest(run_dir, "attention", cfg, inputs);

    std::vector<std::size_t> idx;
    if (subjects.empty()) {
        idx = cohort.indices(Split::Test);
    } else {
        for (const auto& id : subjects) {
            std::size_t k = 0;
            while (k < cohort.size() && cohort[k].subject_id != id) ++k;
            if (k == cohort.size()) throw ConfigError("unknown subject " + id);
            idx.push_back(k);
        }
    }
    std::vector<fs::path> files;
    for (auto i : idx) {
        const auto& s = cohort[i];
        const auto& img = spec.input == Modality::Cmr ? *s.cmr : *s.localizer;
        auto file = run_dir / ("attn_" + s.subject_id + "_" + std::string(to_string(cfg.variant)) + ".png");
        write_png(file, attention_map(encoder, img).image);
        files.push_back(file);
    }
    return files;
}

fs::path run_embed(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir,
                   const std::string& tag) {
    const auto spec = cfg.spec();
    require_aligned(spec);
    if (tag != "pre" && tag != "post") throw ConfigError("embedding tag must be pre or post");
    auto cohort = load_for_stage(data_dir, spec.modalities(), spec.inject_phenotypes, cfg);
    nlohmann::json inputs{{"data", input_fingerprint(cohort, data_dir)}};
    AlignmentModel model{nullptr};
    if (tag == "pre") {
        auto encoders = load_stage1_encoders(cfg, run_dir, cohort.schema(), inputs);
        model = pre_alignment_model(encoders, cohort.schema(), spec.edges, stream_seed(cfg.seed, 21));
    } else {
        const auto stem = run_dir / stage2_name(cfg.variant);
        model = load_alignment(stem, spec.edges, alignment_configs(cfg), cohort.schema());
        inputs[stem.filename().string()] = checkpoint_fingerprint(stem);
    }
    write_manifest(run_dir, "embed_" + tag, cfg, inputs);
    const auto file = run_dir / ("embeddings_" + tag + ".csv");
    export_embeddings(model, cohort, cohort.indices(Split::Test), file);
    return file;
}

AgreementReport run_all(const ExperimentConfig& cfg, const fs::path& data_dir, const fs::path& run_dir) {
    const auto spec = cfg.spec();
    for (auto m : spec.pretrain_modalities()) run_pretrain(cfg, data_dir, run_dir, m);
    if (spec.aligned) run_align(cfg, data_dir, run_dir);
    run_finetune(cfg, data_dir, run_dir);
    return run_evaluate(cfg, data_dir, run_dir);
}

}  // namespace ctrip
