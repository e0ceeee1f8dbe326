#include "ctrip/synthetic_cohort.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "ctrip/error.hpp"

namespace ctrip {
namespace {

constexpr double kPi = std::numbers::pi;

enum Stream : std::uint64_t { kImage = 1, kEcg = 2, kClinical = 3, kCmr = 4, kGeometry = 5 };

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// Zero-mean noise draw that collapses to 0 when noise is disabled.
struct Noise {
    Rng rng;
    bool enabled;
    double operator()(double sigma) { return enabled ? sigma * standard_normal(rng) : 0.0; }
};

bool inside(double x, double y, double cx, double cy, double rx, double ry) {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

struct LeadGains {
    double p, qrs, t;
};

// I, II, III, aVR, aVL, aVF, V1..V6
constexpr std::array<LeadGains, kLeads> kLeadGains{{
    {0.5, 0.6, 0.5}, {1.0, 1.0, 0.8}, {0.5, 0.4, 0.3}, {-0.7, -0.8, -0.6},
    {0.0, 0.1, 0.1}, {0.7, 0.7, 0.5}, {0.3, -0.5, -0.2}, {0.4, 0.3, 0.9},
    {0.4, 0.8, 1.0}, {0.4, 1.3, 1.0}, {0.4, 1.2, 0.8}, {0.4, 1.0, 0.6},
}};

constexpr std::array<double, kSlices> kSliceScale{0.88, 1.0, 0.94};

double gaussian(double t, double centre, double width) {
    const double z = (t - centre) / width;
    return std::exp(-0.5 * z * z);
}

struct ChamberSizes {
    double cavity_r, wall, rv_rx, rv_ry;
};

ChamberSizes chamber_sizes(double heart_size, double slice_scale) {
    return {20.0 * heart_size * slice_scale, 6.0 * heart_size, 16.0 * heart_size * slice_scale,
            24.0 * heart_size * slice_scale};
}

// Draws body, lungs, RV and the two concentric LV ellipses into a 224x224 canvas.
void render_slice(float* px, double cx, double cy, const ChamberSizes& c, double body_rx, double body_ry) {
    const double outer_rx = (c.cavity_r + c.wall) * 1.1, outer_ry = (c.cavity_r + c.wall) * 0.95;
    const double inner_rx = c.cavity_r * 1.1, inner_ry = c.cavity_r * 0.95;
    const double rv_cx = cx - (outer_rx + 0.5 * c.rv_rx);
    for (int64_t y = 0; y < kImageSize; ++y) {
        for (int64_t x = 0; x < kImageSize; ++x) {
            const double fx = double(x) + 0.5, fy = double(y) + 0.5;
            float v = 0.0f;
            if (inside(fx, fy, 112, 112, body_rx, body_ry)) v = 0.35f;
            if (inside(fx, fy, 62, 100, 34, 56) || inside(fx, fy, 162, 100, 34, 56)) v = 0.08f;
            if (inside(fx, fy, rv_cx, cy, c.rv_rx, c.rv_ry)) v = 0.9f;
            if (inside(fx, fy, cx, cy, outer_rx, outer_ry)) v = 0.55f;
            if (inside(fx, fy, cx, cy, inner_rx, inner_ry)) v = 1.0f;
            px[y * kImageSize + x] = v;
        }
    }
}

void add_noise_and_normalize(torch::Tensor& stack, Noise& noise, double sigma) {
    float* p = stack.data_ptr<float>();
    for (int64_t i = 0; i < stack.numel(); ++i) p[i] += float(noise(sigma));
    const auto mean = stack.mean();
    const auto std = stack.std(/*unbiased=*/false).clamp_min(1e-6);
    stack.sub_(mean).div_(std);
}

TabularSchema estimate_population_schema() {
    TabularSchema schema;
    constexpr int kDraws = 20000;
    Rng rng(stream_seed(0xC7219, 0));
    std::vector<TabularRecord> tab;
    std::vector<PhenotypeVector> phen;
    tab.reserve(kDraws);
    phen.reserve(kDraws);
    for (int i = 0; i < kDraws; ++i) {
        auto f = sample_factors(rng);
        f.noise_seed = rng();
        auto [t, p] = synthesize_clinical(f, NoiseLevels{});
        tab.push_back(std::move(t));
        phen.push_back(p);
    }
    auto moments = [&](auto&& get) {
        double s = 0, ss = 0;
        for (int i = 0; i < kDraws; ++i) s += get(i);
        const double mean = s / kDraws;
        for (int i = 0; i < kDraws; ++i) ss += (get(i) - mean) * (get(i) - mean);
        return std::pair{mean, std::sqrt(ss / (kDraws - 1))};
    };
    for (std::size_t k = 0; k < tab[0].numeric.size(); ++k) {
        auto [m, s] = moments([&](int i) { return tab[std::size_t(i)].numeric[k].raw; });
        schema.numeric.push_back({tab[0].numeric[k].name, m, s});
    }
    for (const auto& c : tab[0].categorical) schema.categorical.push_back({c.name, c.cardinality});
    const auto& panel = default_phenotype_panel();
    for (std::size_t k = 0; k < kNumPhenotypes; ++k) {
        auto [m, s] = moments([&](int i) { return phen[std::size_t(i)].values[k]; });
        schema.phenotypes.push_back({panel[k].name, panel[k].unit, m, s});
    }
    schema.validate();
    return schema;
}

}  // namespace

void LatentFactors::validate() const {
    if (!(heart_size >= 0.5 && heart_size <= 1.5)) throw ConfigError("heart_size outside [0.5, 1.5]");
    if (!(contractility >= 0.3 && contractility <= 0.8)) throw ConfigError("contractility outside [0.3, 0.8]");
    if (!(heart_rate_bpm >= 50 && heart_rate_bpm <= 100)) throw ConfigError("heart_rate_bpm outside [50, 100]");
    if (sex != 0 && sex != 1) throw ConfigError("sex must be 0 or 1");
}

nlohmann::json NoiseLevels::to_json() const {
    return {{"enabled", enabled},           {"image_sigma", image_sigma},
            {"cmr_sigma", cmr_sigma},       {"ecg_sigma", ecg_sigma},
            {"drift_amplitude", drift_amplitude}, {"drift_hz", drift_hz},
            {"lvef_sigma", lvef_sigma},     {"rvef_sigma", rvef_sigma},
            {"mass_rel_sigma", mass_rel_sigma}, {"volume_rel_sigma", volume_rel_sigma}};
}

torch::Tensor HeartGeometry::mask() const {
    auto m = torch::zeros({kImageSize, kImageSize}, torch::kBool);
    auto acc = m.accessor<bool, 2>();
    for (int64_t y = 0; y < kImageSize; ++y)
        for (int64_t x = 0; x < kImageSize; ++x) {
            const double fx = double(x) + 0.5, fy = double(y) + 0.5;
            for (std::size_t k = 0; k < kSlices; ++k)
                if (inside(fx, fy, cx, cy, lv_outer_rx[k], lv_outer_ry[k]) ||
                    inside(fx, fy, rv_cx[k], cy, rv_rx[k], rv_ry[k]))
                    acc[y][x] = true;
        }
    return m;
}

LatentFactors sample_factors(Rng& rng) {
    LatentFactors f;
    f.sex = int(uniform01(rng) < 0.5);
    f.heart_size = clamp(0.92 + 0.16 * f.sex + 0.12 * standard_normal(rng), 0.5, 1.5);
    f.contractility = clamp(0.58 + 0.08 * standard_normal(rng), 0.3, 0.8);
    f.heart_rate_bpm = clamp(70.0 + 9.0 * standard_normal(rng), 50.0, 100.0);
    return f;
}

std::pair<TabularRecord, PhenotypeVector> synthesize_clinical(const LatentFactors& f, const NoiseLevels& nl) {
    Noise noise{Rng(stream_seed(f.noise_seed, kClinical)), nl.enabled};
    const double hs = f.heart_size, c = f.contractility, hr = f.heart_rate_bpm;
    const double hs3 = hs * hs * hs;

    // Phenotypes
    PhenotypeVector p;
    auto& v = p.values;
    const double lvedv = 150.0 * hs3 * (1.0 + noise(nl.volume_rel_sigma));
    const double lvef = 100.0 * c + noise(nl.lvef_sigma);
    v[0] = lvedv;
    v[1] = lvedv * (1.0 - lvef / 100.0);
    v[2] = v[0] - v[1];
    v[3] = lvef;
    v[4] = v[2] * hr / 1000.0;
    v[5] = 140.0 * hs3 * (1.0 + noise(nl.mass_rel_sigma));
    const double rvedv = 165.0 * hs3 * (1.0 + noise(nl.volume_rel_sigma));
    const double rvef = 100.0 * c + noise(nl.rvef_sigma);
    v[6] = rvedv;
    v[7] = rvedv * (1.0 - rvef / 100.0);
    v[8] = v[6] - v[7];
    v[9] = rvef;
    const double laef = 60.0 + 60.0 * (c - 0.58) + noise(1.0);
    v[10] = 70.0 * hs3 * (1.0 + noise(nl.volume_rel_sigma));
    v[11] = v[10] * (1.0 - laef / 100.0);
    v[12] = v[10] - v[11];
    v[13] = laef;
    const double raef = 50.0 + 50.0 * (c - 0.58) + noise(1.0);
    v[14] = 75.0 * hs3 * (1.0 + noise(nl.volume_rel_sigma));
    v[15] = v[14] * (1.0 - raef / 100.0);
    v[16] = v[14] - v[15];
    v[17] = raef;

    // Tabular features in raw units
    TabularRecord t;
    const double age = 55.0 + noise(8.0);
    const double height = 163.0 + 13.0 * f.sex + 30.0 * (hs - 1.0) + noise(5.0);
    const double weight = 62.0 + 14.0 * f.sex + 55.0 * (hs - 1.0) + noise(7.0);
    const double bmi = weight / ((height / 100.0) * (height / 100.0));
    t.numeric = {
        {"age", age, 0},
        {"height_cm", height, 0},
        {"weight_kg", weight, 0},
        {"bmi", bmi, 0},
        {"body_surface_area", std::sqrt(height * weight / 3600.0), 0},
        {"resting_hr", hr + noise(3.0), 0},
        {"qrs_duration_ms", 88.0 + 20.0 * (hs - 1.0) + noise(6.0), 0},
        {"metabolic_rate", 10.0 * weight + 6.25 * height - 5.0 * age + (f.sex ? 5.0 : -161.0), 0},
    };
    auto draw_category = [&](std::initializer_list<double> cdf) {
        const double u = nl.enabled ? uniform01(noise.rng) : 0.0;
        int64_t k = 0;
        for (double edge : cdf) {
            if (u < edge) return k;
            ++k;
        }
        return k;
    };
    const int64_t smoking = draw_category({0.55, 0.85});
    const int64_t diabetes = (bmi > 30.0 ? draw_category({0.8}) : draw_category({0.95}));
    const int64_t activity = draw_category({0.2, 0.5, 0.8});
    t.categorical = {
        {"sex", f.sex, 2},
        {"smoking_status", smoking, 3},
        {"diabetes", diabetes, 2},
        {"activity_level", activity, 4},
    };
    return {t, p};
}

const TabularSchema& population_schema() {
    static const TabularSchema schema = estimate_population_schema();
    return schema;
}

torch::Tensor ecg_template(const LatentFactors& f, double first_beat_s) {
    auto out = torch::zeros({kLeads, kEcgSamples}, torch::kFloat32);
    auto acc = out.accessor<float, 2>();
    const double rr = 60.0 / f.heart_rate_bpm;
    const double qrs_scale = 0.9 + 0.2 * f.heart_size;
    const double r_amp = 1.0 * f.heart_size;
    const double t_amp = 0.3 * f.contractility / 0.6;
    const double qt = 0.30 * std::sqrt(rr);

    for (double beat = first_beat_s - rr; beat < double(kEcgSeconds) + rr; beat += rr) {
        const int64_t lo = std::max<int64_t>(0, int64_t((beat - 0.4) * kEcgRateHz));
        const int64_t hi = std::min<int64_t>(kEcgSamples, int64_t((beat + qt + 0.3) * kEcgRateHz) + 1);
        for (int64_t i = lo; i < hi; ++i) {
            const double t = double(i) / kEcgRateHz;
            const double p = 0.12 * gaussian(t, beat - 0.16, 0.025);
            const double qrs = -0.12 * gaussian(t, beat - 0.035 * qrs_scale, 0.010 * qrs_scale) +
                               r_amp * gaussian(t, beat, 0.011 * qrs_scale) -
                               0.25 * gaussian(t, beat + 0.035 * qrs_scale, 0.012 * qrs_scale);
            const double tw = t_amp * gaussian(t, beat + qt, 0.05);
            for (int64_t l = 0; l < kLeads; ++l) {
                const auto& g = kLeadGains[std::size_t(l)];
                acc[l][i] += float(g.p * p + g.qrs * qrs + g.t * tw);
            }
        }
    }
    return out;
}

SyntheticSubject generate_subject(const LatentFactors& f, const std::string& subject_id,
                                  const GeneratorConfig& config) {
    f.validate();
    const auto& nl = config.noise;
    SyntheticSubject out;
    out.factors = f;
    auto& rec = out.record;
    rec.subject_id = subject_id;

    // Geometry: heart position and body outline jitter are nuisance variables.
    Rng geo(stream_seed(f.noise_seed, kGeometry));
    auto& g = out.geometry;
    g.cx = 112.0 + 16.0 * (uniform01(geo) - 0.5);
    g.cy = 118.0 + 16.0 * (uniform01(geo) - 0.5);
    const double body_rx = 100.0 + 6.0 * (uniform01(geo) - 0.5);
    const double body_ry = 80.0 + 6.0 * (uniform01(geo) - 0.5);

    Noise img_noise{Rng(stream_seed(f.noise_seed, kImage)), nl.enabled};
    auto loc = torch::empty({kSlices, kImageSize, kImageSize}, torch::kFloat32);
    for (std::size_t k = 0; k < kSlices; ++k) {
        const auto c = chamber_sizes(f.heart_size, kSliceScale[k]);
        render_slice(loc.data_ptr<float>() + k * kImageSize * kImageSize, g.cx, g.cy, c, body_rx, body_ry);
        g.lv_outer_rx[k] = (c.cavity_r + c.wall) * 1.1;
        g.lv_outer_ry[k] = (c.cavity_r + c.wall) * 0.95;
        g.rv_rx[k] = c.rv_rx;
        g.rv_ry[k] = c.rv_ry;
        g.rv_cx[k] = g.cx - (g.lv_outer_rx[k] + 0.5 * c.rv_rx);
    }
    add_noise_and_normalize(loc, img_noise, nl.image_sigma);
    rec.localizer = ImageStack{loc};

    if (config.with_cmr) {
        // End-diastole, end-systole and mid-phase frames of the mid slice.
        Noise cmr_noise{Rng(stream_seed(f.noise_seed, kCmr)), nl.enabled};
        auto cmr = torch::empty({kSlices, kImageSize, kImageSize}, torch::kFloat32);
        const auto ed = chamber_sizes(f.heart_size, 1.0);
        const double shrink = std::cbrt(1.0 - f.contractility);
        auto frame = [&](double scale) {
            ChamberSizes c = ed;
            c.cavity_r = ed.cavity_r * scale;
            const double outer = std::sqrt(c.cavity_r * c.cavity_r +
                                           (ed.cavity_r + ed.wall) * (ed.cavity_r + ed.wall) -
                                           ed.cavity_r * ed.cavity_r);
            c.wall = outer - c.cavity_r;
            c.rv_rx = ed.rv_rx * scale;
            c.rv_ry = ed.rv_ry * scale;
            return c;
        };
        const std::array<double, kSlices> scales{1.0, shrink, 0.5 * (1.0 + shrink)};
        for (std::size_t k = 0; k < kSlices; ++k)
            render_slice(cmr.data_ptr<float>() + k * kImageSize * kImageSize, g.cx, g.cy, frame(scales[k]),
                         body_rx, body_ry);
        add_noise_and_normalize(cmr, cmr_noise, nl.cmr_sigma);
        rec.cmr = ImageStack{cmr};
    }

    Noise ecg_noise{Rng(stream_seed(f.noise_seed, kEcg)), nl.enabled};
    const double rr = 60.0 / f.heart_rate_bpm;
    const double first_beat = rr * uniform01(ecg_noise.rng);
    auto ecg = ecg_template(f, first_beat);
    {
        auto acc = ecg.accessor<float, 2>();
        for (int64_t l = 0; l < kLeads; ++l) {
            const double phase = 2.0 * kPi * uniform01(ecg_noise.rng);
            for (int64_t i = 0; i < kEcgSamples; ++i) {
                const double t = double(i) / kEcgRateHz;
                acc[l][i] += float(nl.drift_amplitude * std::sin(2.0 * kPi * nl.drift_hz * t + phase) +
                                   ecg_noise(nl.ecg_sigma));
            }
        }
    }
    rec.ecg = EcgRecord{ecg, kEcgRateHz, false};

    auto [tab, phen] = synthesize_clinical(f, nl);
    rec.phenotypes = phen;
    rec.tabular = apply_schema(tab, phen, population_schema());
    return out;
}

SyntheticCohort generate_cohort(int64_t n, std::uint64_t seed, const GeneratorConfig& config) {
    if (n < 1) throw ConfigError("cohort size must be >= 1");
    SyntheticCohort out;
    out.seed = seed;
    out.config = config;
    std::vector<SubjectRecord> records;
    records.reserve(std::size_t(n));
    for (int64_t i = 0; i < n; ++i) {
        Rng rng(stream_seed(seed, std::uint64_t(i)));
        auto f = sample_factors(rng);
        f.noise_seed = rng();
        char id[16];
        std::snprintf(id, sizeof id, "sub%05lld", static_cast<long long>(i));
        auto s = generate_subject(f, id, config);
        records.push_back(std::move(s.record));
        out.factors.push_back(s.factors);
        out.geometry.push_back(s.geometry);
    }
    out.cohort = Cohort(std::move(records), population_schema());
    return out;
}

void write_cohort(const SyntheticCohort& c, const std::filesystem::path& root) {
    save_cohort(c.cohort, root);
    nlohmann::json m;
    m["n"] = c.cohort.size();
    m["seed"] = c.seed;
    m["with_cmr"] = c.config.with_cmr;
    m["noise"] = c.config.noise.to_json();
    m["factor_ranges"] = {{"heart_size", {0.5, 1.5}},
                          {"contractility", {0.3, 0.8}},
                          {"heart_rate_bpm", {50, 100}}};
    m["factor_distributions"] = {
        {"sex", "Bernoulli(0.5)"},
        {"heart_size", "clip(0.92 + 0.16*sex + 0.12*N(0,1), 0.5, 1.5)"},
        {"contractility", "clip(0.58 + 0.08*N(0,1), 0.3, 0.8)"},
        {"heart_rate_bpm", "clip(70 + 9*N(0,1), 50, 100)"},
    };
    std::ofstream(root / "cohort_manifest.json") << m.dump(2) << '\n';
}

}  // namespace ctrip
