#include "ctrip/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ctrip/error.hpp"
#include "ctrip/npy.hpp"
#include "ctrip/patching.hpp"
#include "ctrip/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctrip {

namespace files {
constexpr const char* kSchema = "schema.json";
constexpr const char* kLocalizer = "localizer.npy";
constexpr const char* kEcg = "ecg.bin";
constexpr const char* kTabular = "tabular.json";
constexpr const char* kPhenotypes = "phenotypes.json";
constexpr const char* kCmr = "cmr.npy";
}  // namespace files

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::Localizer: return "localizer";
        case Modality::Ecg: return "ecg";
        case Modality::Tabular: return "tabular";
        case Modality::Cmr: return "cmr";
    }
    return "?";
}

std::string_view short_name(Modality m) {
    switch (m) {
        case Modality::Localizer: return "L";
        case Modality::Ecg: return "E";
        case Modality::Tabular: return "T";
        case Modality::Cmr: return "C";
    }
    return "?";
}

Modality modality_from_string(std::string_view s) {
    if (s == "L" || s == "localizer") return Modality::Localizer;
    if (s == "E" || s == "ecg") return Modality::Ecg;
    if (s == "T" || s == "tabular") return Modality::Tabular;
    if (s == "C" || s == "CMR" || s == "cmr") return Modality::Cmr;
    throw ConfigError("unknown modality '" + std::string(s) + "'");
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::Unassigned: return "unassigned";
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

const std::array<PhenotypeSpec, kNumPhenotypes>& default_phenotype_panel() {
    static const std::array<PhenotypeSpec, kNumPhenotypes> panel{{
        {"LVEDV", "mL"}, {"LVESV", "mL"}, {"LVSV", "mL"}, {"LVEF", "%"},
        {"LVCO", "L/min"}, {"LVM", "g"}, {"RVEDV", "mL"}, {"RVESV", "mL"},
        {"RVSV", "mL"}, {"RVEF", "%"}, {"LAV_max", "mL"}, {"LAV_min", "mL"},
        {"LASV", "mL"}, {"LAEF", "%"}, {"RAV_max", "mL"}, {"RAV_min", "mL"},
        {"RASV", "mL"}, {"RAEF", "%"},
    }};
    return panel;
}

// ---------------------------------------------------------------------------
// TabularSchema

std::size_t TabularSchema::num_numeric_tokens() const {
    return numeric.size() + (inject_phenotypes ? phenotypes.size() : 0);
}

std::size_t TabularSchema::phenotype_index(std::string_view name) const {
    for (std::size_t i = 0; i < phenotypes.size(); ++i)
        if (phenotypes[i].name == name) return i;
    throw ConfigError("unknown phenotype '" + std::string(name) + "'");
}

json TabularSchema::to_json() const {
    json j;
    j["numeric"] = json::array();
    for (const auto& n : numeric) j["numeric"].push_back({{"name", n.name}, {"mean", n.mean}, {"std", n.std}});
    j["categorical"] = json::array();
    for (const auto& c : categorical)
        j["categorical"].push_back({{"name", c.name}, {"cardinality", c.cardinality}});
    j["phenotypes"] = json::array();
    for (const auto& p : phenotypes)
        j["phenotypes"].push_back({{"name", p.name}, {"unit", p.unit}, {"mean", p.mean}, {"std", p.std}});
    j["inject_phenotypes"] = inject_phenotypes;
    return j;
}

TabularSchema TabularSchema::from_json(const json& j) {
    TabularSchema s;
    try {
        for (const auto& n : j.at("numeric"))
            s.numeric.push_back({n.at("name").get<std::string>(), n.at("mean").get<double>(),
                                 n.at("std").get<double>()});
        for (const auto& c : j.at("categorical"))
            s.categorical.push_back({c.at("name").get<std::string>(), c.at("cardinality").get<int64_t>()});
        for (const auto& p : j.at("phenotypes"))
            s.phenotypes.push_back({p.at("name").get<std::string>(), p.value("unit", ""),
                                    p.at("mean").get<double>(), p.at("std").get<double>()});
        s.inject_phenotypes = j.value("inject_phenotypes", false);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed schema: ") + e.what());
    }
    s.validate();
    return s;
}

void TabularSchema::validate() const {
    std::set<std::string> names;
    for (const auto& n : numeric) {
        if (!(n.std > 0.0) || !std::isfinite(n.mean))
            throw ConfigError("malformed schema: numeric feature '" + n.name + "' needs std > 0");
        if (!names.insert(n.name).second) throw ConfigError("malformed schema: duplicate feature " + n.name);
    }
    for (const auto& c : categorical) {
        if (c.cardinality < 2)
            throw ConfigError("malformed schema: categorical feature '" + c.name + "' needs cardinality >= 2");
        if (!names.insert(c.name).second) throw ConfigError("malformed schema: duplicate feature " + c.name);
    }
    if (phenotypes.size() != kNumPhenotypes)
        throw ConfigError("malformed schema: phenotype panel must list 18 entries");
    for (const char* required : {"LVEF", "RVEF", "LVM", "RVEDV"}) {
        if (std::none_of(phenotypes.begin(), phenotypes.end(),
                         [&](const PhenotypeSpec& p) { return p.name == required; }))
            throw ConfigError(std::string("malformed schema: phenotype panel lacks ") + required);
    }
    for (const auto& p : phenotypes)
        if (!(p.std > 0.0)) throw ConfigError("malformed schema: phenotype '" + p.name + "' needs std > 0");
}

TabularSchema read_schema(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("missing schema file " + file.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed schema: " + std::string(e.what()));
    }
    return TabularSchema::from_json(j);
}

void write_schema(const TabularSchema& schema, const fs::path& file) {
    std::ofstream out(file);
    if (!out) throw ConfigError("cannot write " + file.string());
    out << schema.to_json().dump(2) << '\n';
}

TabularRecord apply_schema(const TabularRecord& raw, const PhenotypeVector& phenotypes,
                           const TabularSchema& schema) {
    TabularRecord out;
    for (const auto& spec : schema.numeric) {
        auto it = std::find_if(raw.numeric.begin(), raw.numeric.end(),
                               [&](const NumericFeature& f) { return f.name == spec.name; });
        if (it == raw.numeric.end()) throw ConfigError("tabular record lacks numeric feature " + spec.name);
        out.numeric.push_back({spec.name, it->raw, (it->raw - spec.mean) / spec.std});
    }
    if (schema.inject_phenotypes) {
        for (std::size_t i = 0; i < schema.phenotypes.size(); ++i) {
            const auto& p = schema.phenotypes[i];
            const double v = phenotypes.values[i];
            out.numeric.push_back({"phenotype:" + p.name, v, (v - p.mean) / p.std});
        }
    }
    for (const auto& spec : schema.categorical) {
        auto it = std::find_if(raw.categorical.begin(), raw.categorical.end(),
                               [&](const CategoricalFeature& f) { return f.name == spec.name; });
        if (it == raw.categorical.end())
            throw ConfigError("tabular record lacks categorical feature " + spec.name);
        if (it->index < 0 || it->index >= spec.cardinality)
            throw ConfigError("category index " + std::to_string(it->index) + " of '" + spec.name +
                              "' out of range for cardinality " + std::to_string(spec.cardinality));
        out.categorical.push_back({spec.name, it->index, spec.cardinality});
    }
    return out;
}

// ---------------------------------------------------------------------------
// SubjectRecord / Cohort

bool SubjectRecord::has(Modality m) const {
    switch (m) {
        case Modality::Localizer: return localizer.has_value();
        case Modality::Ecg: return ecg.has_value();
        case Modality::Tabular: return tabular.has_value();
        case Modality::Cmr: return cmr.has_value();
    }
    return false;
}

Cohort::Cohort(std::vector<SubjectRecord> subjects, TabularSchema schema,
               std::vector<Rejection> rejected, std::vector<fs::path> accessed)
    : subjects_(std::move(subjects)),
      schema_(std::move(schema)),
      rejected_(std::move(rejected)),
      accessed_(std::move(accessed)) {
    std::set<std::string_view> ids;
    for (const auto& s : subjects_)
        if (!ids.insert(s.subject_id).second) throw ConfigError("duplicate subject_id " + s.subject_id);
}

std::vector<std::size_t> Cohort::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < subjects_.size(); ++i)
        if (subjects_[i].split == s) out.push_back(i);
    return out;
}

std::vector<std::string> Cohort::subject_ids(Split s) const {
    std::vector<std::string> out;
    for (const auto& r : subjects_)
        if (r.split == s) out.push_back(r.subject_id);
    return out;
}

// ---------------------------------------------------------------------------
// Loading

namespace {

struct Rejected {
    std::string reason;
};

json read_json(const fs::path& file, std::vector<fs::path>& log) {
    log.push_back(file);
    std::ifstream in(file);
    if (!in) throw Rejected{"cannot open " + file.filename().string()};
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception&) {
        throw Rejected{"malformed " + file.filename().string()};
    }
}

ImageStack read_image(const fs::path& file, std::vector<fs::path>& log) {
    log.push_back(file);
    torch::Tensor t;
    try {
        t = npy::read_f32(file);
    } catch (const ConfigError& e) {
        throw Rejected{e.what()};
    }
    if (t.sizes() != c10::IntArrayRef{kSlices, kImageSize, kImageSize})
        throw Rejected{file.filename().string() + " shape must be [3,224,224]"};
    if (!torch::isfinite(t).all().item<bool>())
        throw Rejected{file.filename().string() + " contains NaN/Inf"};
    return {t};
}

PhenotypeVector read_phenotypes(const fs::path& file, const TabularSchema& schema,
                                std::vector<fs::path>& log) {
    const json j = read_json(file, log);
    if (!j.is_object() || j.size() != kNumPhenotypes) throw Rejected{"phenotype length ≠ 18"};
    PhenotypeVector p;
    for (std::size_t i = 0; i < schema.phenotypes.size(); ++i) {
        const auto& name = schema.phenotypes[i].name;
        if (!j.contains(name) || !j[name].is_number()) throw Rejected{"phenotype " + name + " missing"};
        p.values[i] = j[name].get<double>();
        if (!std::isfinite(p.values[i])) throw Rejected{"phenotype " + name + " not finite"};
    }
    return p;
}

TabularRecord read_tabular(const fs::path& file, std::vector<fs::path>& log) {
    const json j = read_json(file, log);
    TabularRecord r;
    try {
        for (const auto& [name, v] : j.at("numeric").items()) r.numeric.push_back({name, v.get<double>(), 0.0});
        for (const auto& [name, v] : j.at("categorical").items())
            r.categorical.push_back({name, v.get<int64_t>(), 0});
    } catch (const json::exception&) {
        throw Rejected{"malformed tabular.json"};
    }
    return r;
}

SubjectRecord read_subject(const fs::path& dir, const TabularSchema& schema, const LoadOptions& opt,
                           std::vector<fs::path>& log) {
    SubjectRecord rec;
    rec.subject_id = dir.filename().string();

    const std::pair<Modality, const char*> layout[] = {
        {Modality::Localizer, files::kLocalizer},
        {Modality::Ecg, files::kEcg},
        {Modality::Tabular, files::kTabular},
        {Modality::Cmr, files::kCmr},
    };
    for (const auto& [m, name] : layout)
        if (opt.modalities.contains(m) && !fs::exists(dir / name))
            throw Rejected{"missing modality: " + std::string(to_string(m))};
    if (!fs::exists(dir / files::kPhenotypes)) throw Rejected{"missing phenotypes"};

    rec.phenotypes = read_phenotypes(dir / files::kPhenotypes, schema, log);
    if (opt.modalities.contains(Modality::Localizer)) rec.localizer = read_image(dir / files::kLocalizer, log);
    if (opt.modalities.contains(Modality::Ecg)) {
        log.push_back(dir / files::kEcg);
        try {
            rec.ecg = EcgRecord{npy::read_raw_f32(dir / files::kEcg, {kLeads, kEcgSamples}), kEcgRateHz, false};
        } catch (const ConfigError& e) {
            throw Rejected{e.what()};
        }
        if (!torch::isfinite(rec.ecg->samples).all().item<bool>()) throw Rejected{"ecg.bin contains NaN/Inf"};
        if (opt.correct_drift) rec.ecg = correct_baseline_drift(*rec.ecg);
    }
    if (opt.modalities.contains(Modality::Tabular)) {
        try {
            rec.tabular = apply_schema(read_tabular(dir / files::kTabular, log), rec.phenotypes, schema);
        } catch (const ConfigError& e) {
            throw Rejected{e.what()};
        }
    }
    if (opt.modalities.contains(Modality::Cmr)) rec.cmr = read_image(dir / files::kCmr, log);
    return rec;
}

}  // namespace

Cohort load_cohort(const fs::path& root, const LoadOptions& options) {
    auto schema = read_schema(root / files::kSchema);
    schema.inject_phenotypes = options.inject_phenotypes;
    return load_cohort(root, schema, options);
}

Cohort load_cohort(const fs::path& root, const TabularSchema& schema, const LoadOptions& options) {
    schema.validate();
    if (!fs::is_directory(root)) throw ConfigError("cohort directory not found: " + root.string());

    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());

    std::vector<SubjectRecord> subjects;
    std::vector<Rejection> rejected;
    std::vector<fs::path> log{root / files::kSchema};
    for (const auto& d : dirs) {
        try {
            subjects.push_back(read_subject(d, schema, options, log));
        } catch (const Rejected& r) {
            rejected.push_back({d.filename().string(), r.reason});
        }
    }
    return Cohort(std::move(subjects), schema, std::move(rejected), std::move(log));
}

void save_cohort(const Cohort& cohort, const fs::path& root) {
    fs::create_directories(root);
    auto schema = cohort.schema();
    schema.inject_phenotypes = false;
    write_schema(schema, root / files::kSchema);

    for (const auto& s : cohort.subjects()) {
        const fs::path dir = root / s.subject_id;
        fs::create_directories(dir);
        if (s.localizer) npy::write_f32(dir / files::kLocalizer, s.localizer->voxels);
        if (s.cmr) npy::write_f32(dir / files::kCmr, s.cmr->voxels);
        if (s.ecg) npy::write_raw_f32(dir / files::kEcg, s.ecg->samples);
        if (s.tabular) {
            json t{{"numeric", json::object()}, {"categorical", json::object()}};
            for (const auto& n : s.tabular->numeric)
                if (n.name.rfind("phenotype:", 0) != 0) t["numeric"][n.name] = n.raw;
            for (const auto& c : s.tabular->categorical) t["categorical"][c.name] = c.index;
            std::ofstream(dir / files::kTabular) << t.dump(2) << '\n';
        }
        json p = json::object();
        for (std::size_t i = 0; i < schema.phenotypes.size(); ++i) p[schema.phenotypes[i].name] = s.phenotypes.values[i];
        std::ofstream(dir / files::kPhenotypes) << p.dump(2) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Splits

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitFractions& f) {
    const std::array<double, 3> fr{f.train, f.val, f.test};
    for (double x : fr)
        if (!(x >= 0.0) || x > 1.0) throw ConfigError("split fractions must lie in [0, 1]");
    if (std::abs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = fr[i] * double(n);
        sizes[i] = std::size_t(std::floor(exact));
        rem[i] = exact - double(sizes[i]);
        assigned += sizes[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[order[k % 3]];
    return sizes;
}

Cohort split_cohort(const Cohort& cohort, const SplitFractions& f, std::uint64_t seed) {
    const auto sizes = split_sizes(cohort.size(), f);

    std::vector<std::size_t> by_id(cohort.size());
    std::iota(by_id.begin(), by_id.end(), std::size_t{0});
    std::sort(by_id.begin(), by_id.end(),
              [&](std::size_t a, std::size_t b) { return cohort[a].subject_id < cohort[b].subject_id; });
    const auto perm = permutation(cohort.size(), stream_seed(seed, 0x5b11));

    auto subjects = cohort.subjects();
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const Split s = k < sizes[0] ? Split::Train : k < sizes[0] + sizes[1] ? Split::Val : Split::Test;
        subjects[by_id[perm[k]]].split = s;
    }
    return Cohort(std::move(subjects), cohort.schema(), cohort.rejected(), cohort.access_log());
}

Cohort preprocess_cohort(const Cohort& cohort) {
    auto subjects = cohort.subjects();
    for (auto& s : subjects)
        if (s.ecg && !s.ecg->drift_corrected) s.ecg = correct_baseline_drift(*s.ecg);
    return Cohort(std::move(subjects), cohort.schema(), cohort.rejected(), cohort.access_log());
}

Cohort subset(const Cohort& cohort, const std::vector<std::size_t>& idx) {
    std::vector<SubjectRecord> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(cohort[i]);
    return Cohort(std::move(out), cohort.schema(), {}, cohort.access_log());
}

}  // namespace ctrip
