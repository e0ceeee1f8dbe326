#include "ctrip/contrastive.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "ctrip/error.hpp"
#include "ctrip/util.hpp"

namespace ctrip {

ProjectionHeadImpl::ProjectionHeadImpl(int64_t in_dim, int64_t out_dim) {
    linear = register_module("linear", torch::nn::Linear(in_dim, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& x) {
    return torch::nn::functional::normalize(linear->forward(x),
                                            torch::nn::functional::NormalizeFuncOptions().p(2).dim(-1).eps(1e-12));
}

ModalitySet AlignmentEdges::modalities() const {
    ModalitySet s{Modality::Localizer};
    if (le) s.insert(Modality::Ecg);
    if (lt) s.insert(Modality::Tabular);
    return s;
}

std::string AlignmentEdges::label() const {
    return std::string("L") + (le ? "+E" : "") + (lt ? "+T" : "");
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void check_embeddings(const torch::Tensor& z_a, const torch::Tensor& z_b) {
    if (z_a.dim() != 2 || z_b.dim() != 2 || z_a.sizes() != z_b.sizes())
        throw ConfigError("embedding batches must be [N, d] with matching shapes");
    if (z_a.size(0) < 2) throw ConfigError("contrastive loss needs N >= 2 (no negatives otherwise)");
    // Loose enough for finite-difference probes around the unit sphere.
    constexpr double tol = 1e-3;
    for (const auto* z : {&z_a, &z_b}) {
        const double dev = (z->detach().norm(2, 1) - 1.0).abs().max().item<double>();
        if (dev > tol) throw ConfigError("embedding rows must be unit-normalized");
    }
}

}  // namespace

torch::Tensor info_nce_directional(const torch::Tensor& z_a, const torch::Tensor& z_b, const torch::Tensor& tau) {
    check_embeddings(z_a, z_b);
    auto logits = z_a.matmul(z_b.transpose(0, 1)) / tau;
    return -torch::log_softmax(logits, 1).diagonal().mean();
}

torch::Tensor info_nce_directional(const torch::Tensor& z_a, const torch::Tensor& z_b, double tau) {
    return info_nce_directional(z_a, z_b, torch::tensor(tau, z_a.options()));
}

torch::Tensor bidirectional_loss(const torch::Tensor& z_l, const torch::Tensor& z_m, const torch::Tensor& tau) {
    return 0.5 * (info_nce_directional(z_l, z_m, tau) + info_nce_directional(z_m, z_l, tau));
}

torch::Tensor bidirectional_loss(const torch::Tensor& z_l, const torch::Tensor& z_m, double tau) {
    return bidirectional_loss(z_l, z_m, torch::tensor(tau, z_l.options()));
}

LossTerms total_loss(const torch::Tensor& z_l, const torch::Tensor& z_e, const torch::Tensor& z_t,
                     const torch::Tensor& tau_le, const torch::Tensor& tau_lt, AlignmentEdges edges) {
    if (!edges.le && !edges.lt) throw ConfigError("alignment needs at least one active edge");
    LossTerms t;
    if (edges.le) {
        if (z_e.size(0) != z_l.size(0)) throw ConfigError("L and E batches are misaligned");
        t.le = bidirectional_loss(z_l, z_e, tau_le);
    }
    if (edges.lt) {
        if (z_t.size(0) != z_l.size(0)) throw ConfigError("L and T batches are misaligned");
        t.lt = bidirectional_loss(z_l, z_t, tau_lt);
    }
    t.total = edges.le && edges.lt ? 0.5 * (t.le + t.lt) : (edges.le ? t.le : t.lt);
    return t;
}

torch::Tensor total_loss(const torch::Tensor& z_l, const torch::Tensor& z_e, const torch::Tensor& z_t,
                         const TemperaturePair& temps) {
    return total_loss(z_l, z_e, z_t, torch::tensor(temps.tau_le, z_l.options()),
                      torch::tensor(temps.tau_lt, z_l.options()))
        .total;
}

torch::Tensor temperature(const torch::Tensor& log_tau) {
    return log_tau.exp().clamp(kMinTemperature, kMaxTemperature);
}

// ---------------------------------------------------------------------------
// Model

AlignmentModelImpl::AlignmentModelImpl(AlignmentEdges edges, const std::map<Modality, EncoderConfig>& configs,
                                       const TabularSchema& schema, TemperaturePair init)
    : edges_(edges) {
    for (auto m : {Modality::Localizer, Modality::Ecg, Modality::Tabular}) {
        if (!edges.modalities().contains(m)) continue;
        auto it = configs.find(m);
        if (it == configs.end()) throw ConfigError("missing encoder config for " + std::string(to_string(m)));
        configs_[m] = it->second;
        const std::string tag(short_name(m));
        encoders_.emplace(m, register_module("encoder_" + tag, ModalityEncoder(it->second, schema)));
        projections_.emplace(m, register_module("proj_" + tag, ProjectionHead(it->second.embed_dim)));
    }
    log_tau_le = register_parameter("log_tau_le", torch::tensor(std::log(init.tau_le), torch::kFloat32));
    log_tau_lt = register_parameter("log_tau_lt", torch::tensor(std::log(init.tau_lt), torch::kFloat32));
}

bool AlignmentModelImpl::has(Modality m) const { return encoders_.count(m) != 0; }

ModalityEncoder& AlignmentModelImpl::encoder(Modality m) {
    auto it = encoders_.find(m);
    if (it == encoders_.end()) throw ConfigError("alignment model has no " + std::string(to_string(m)) + " encoder");
    return it->second;
}

ProjectionHead& AlignmentModelImpl::projection(Modality m) {
    auto it = projections_.find(m);
    if (it == projections_.end()) throw ConfigError("alignment model has no " + std::string(to_string(m)) + " head");
    return it->second;
}

torch::Tensor AlignmentModelImpl::project(Modality m, const ModalityBatch& batch) {
    return projection(m)->forward(encoder(m)->forward(batch).cls);
}

void AlignmentModelImpl::clamp_temperatures() {
    torch::NoGradGuard guard;
    log_tau_le.clamp_(std::log(kMinTemperature), std::log(kMaxTemperature));
    log_tau_lt.clamp_(std::log(kMinTemperature), std::log(kMaxTemperature));
}

std::string alignment_fingerprint(AlignmentEdges edges, const std::map<Modality, EncoderConfig>& configs,
                                  const TabularSchema& schema) {
    nlohmann::json j{{"edges", edges.label()}, {"shared_dim", kSharedDim}};
    for (auto m : {Modality::Localizer, Modality::Ecg, Modality::Tabular}) {
        if (!edges.modalities().contains(m)) continue;
        j["encoders"][std::string(short_name(m))] = config_fingerprint(configs.at(m), schema);
    }
    return hex64(fnv1a(j.dump()));
}

AlignmentModel make_alignment_model(const std::map<Modality, ModalityEncoder>& stage1_encoders,
                                    const TabularSchema& schema, AlignmentEdges edges, TemperaturePair init,
                                    std::uint64_t seed) {
    std::map<Modality, EncoderConfig> configs;
    for (const auto& [m, enc] : stage1_encoders) configs[m] = enc->config();
    torch::manual_seed(seed);
    AlignmentModel model(edges, configs, schema, init);
    for (auto m : {Modality::Localizer, Modality::Ecg, Modality::Tabular}) {
        if (!model->has(m)) continue;
        auto it = stage1_encoders.find(m);
        if (it == stage1_encoders.end())
            throw ConfigError("missing stage-1 encoder for " + std::string(to_string(m)));
        copy_weights(*model->encoder(m), *it->second);
    }
    return model;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Projected {
    torch::Tensor l, e, t;
};

Projected project_all(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx) {
    Projected p;
    const auto& cfg = model->configs();
    p.l = model->project(Modality::Localizer, make_batch(cohort, idx, cfg.at(Modality::Localizer)));
    if (model->edges().le) p.e = model->project(Modality::Ecg, make_batch(cohort, idx, cfg.at(Modality::Ecg)));
    if (model->edges().lt) p.t = model->project(Modality::Tabular, make_batch(cohort, idx, cfg.at(Modality::Tabular)));
    return p;
}

LossTerms model_loss(AlignmentModel& model, const Projected& p) {
    return total_loss(p.l, p.e, p.t, model->tau_le(), model->tau_lt(), model->edges());
}

std::pair<double, double> pos_neg(const torch::Tensor& a, const torch::Tensor& b) {
    auto sim = a.matmul(b.transpose(0, 1));
    const int64_t n = sim.size(0);
    const double pos = sim.diagonal().mean().item<double>();
    const double neg = n > 1 ? (sim.sum().item<double>() - sim.diagonal().sum().item<double>()) / double(n * (n - 1)) : 0.0;
    return {pos, neg};
}

}  // namespace

SimilarityStats similarity_stats(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx) {
    torch::NoGradGuard guard;
    model->eval();
    std::vector<torch::Tensor> ls, es, ts;
    for (const auto& b : chunk(idx, 128)) {
        auto p = project_all(model, cohort, b);
        ls.push_back(p.l);
        if (p.e.defined()) es.push_back(p.e);
        if (p.t.defined()) ts.push_back(p.t);
    }
    SimilarityStats s;
    if (ls.empty()) return s;
    auto l = torch::cat(ls);
    if (!es.empty()) std::tie(s.pos_le, s.neg_le) = pos_neg(l, torch::cat(es));
    if (!ts.empty()) std::tie(s.pos_lt, s.neg_lt) = pos_neg(l, torch::cat(ts));
    return s;
}

double evaluate_alignment_loss(AlignmentModel& model, const Cohort& cohort, const std::vector<std::size_t>& idx,
                               int64_t batch_size) {
    torch::NoGradGuard guard;
    model->eval();
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& b : chunk(idx, batch_size)) {
        if (b.size() < 2) continue;
        total += model_loss(model, project_all(model, cohort, b)).total.item<double>() * double(b.size());
        count += b.size();
    }
    return count ? total / double(count) : std::numeric_limits<double>::quiet_NaN();
}

Stage2Result align_stage2(const Cohort& cohort, const std::map<Modality, ModalityEncoder>& stage1_encoders,
                          const Stage2Hparams& hp, const std::filesystem::path& stem) {
    const auto train_idx = cohort.indices(Split::Train);
    const auto val_idx = cohort.indices(Split::Val);
    if (train_idx.size() < 2) throw ConfigError("alignment needs at least two training subjects");
    const auto& monitor_idx = val_idx.size() >= 2 ? val_idx : train_idx;

    Stage2Result res;
    res.model = make_alignment_model(stage1_encoders, cohort.schema(), hp.edges, hp.tau_init,
                                     stream_seed(hp.train.seed, 21));
    res.fingerprint = alignment_fingerprint(hp.edges, res.model->configs(), cohort.schema());
    auto& model = res.model;

    std::vector<torch::Tensor> weights, temps;
    for (auto m : {Modality::Localizer, Modality::Ecg, Modality::Tabular}) {
        if (!model->has(m)) continue;
        for (auto& p : model->encoder(m)->parameters()) {
            if (hp.freeze_encoders)
                p.set_requires_grad(false);
            else
                weights.push_back(p);
        }
        for (auto& p : model->projection(m)->parameters()) weights.push_back(p);
    }
    if (hp.edges.le) temps.push_back(model->log_tau_le);
    if (hp.edges.lt) temps.push_back(model->log_tau_lt);

    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(weights, std::make_unique<torch::optim::AdamWOptions>(
                                     torch::optim::AdamWOptions(hp.train.lr).weight_decay(hp.train.weight_decay)));
    groups.emplace_back(temps, std::make_unique<torch::optim::AdamWOptions>(
                                   torch::optim::AdamWOptions(hp.train.lr).weight_decay(0.0)));
    torch::optim::AdamW opt(std::move(groups));

    auto log_epoch = [&](int64_t epoch, double total, double le, double lt, double val) {
        const auto s = similarity_stats(model, cohort, monitor_idx);
        res.curve.push_back({epoch, total, le, lt, model->tau_le().item<double>(), model->tau_lt().item<double>(),
                             s.pos_le, s.neg_le, s.pos_lt, s.neg_lt, val});
    };

    const int64_t eval_bs = hp.train.batch_size;
    const double val0 = evaluate_alignment_loss(model, cohort, monitor_idx, eval_bs);
    check_finite(val0, "stage-2 initialization");
    {
        torch::NoGradGuard guard;
        double total = 0, le = 0, lt = 0;
        std::size_t count = 0;
        for (const auto& b : chunk(train_idx, eval_bs)) {
            if (b.size() < 2) continue;
            auto t = model_loss(model, project_all(model, cohort, b));
            const double w = double(b.size());
            total += t.total.item<double>() * w;
            if (t.le.defined()) le += t.le.item<double>() * w;
            if (t.lt.defined()) lt += t.lt.item<double>() * w;
            count += b.size();
        }
        log_epoch(0, total / double(count), le / double(count), lt / double(count), val0);
    }

    double best = val0;
    auto best_state = snapshot(*model);
    int64_t since_best = 0;
    for (int64_t epoch = 1; epoch <= hp.train.epochs; ++epoch) {
        const double lr = cosine_lr(hp.train.lr, epoch - 1, hp.train.epochs);
        set_group_lr(opt, 0, lr);
        set_group_lr(opt, 1, lr);
        model->train();
        Rng rng(stream_seed(hp.train.seed, 2000 + std::uint64_t(epoch)));
        double total = 0, le = 0, lt = 0;
        std::size_t count = 0;
        for (const auto& b : make_batches(train_idx, hp.train.batch_size, rng)) {
            if (b.size() < 2) continue;
            auto t = model_loss(model, project_all(model, cohort, b));
            const double lv = t.total.item<double>();
            check_finite(lv, "stage-2 alignment");
            opt.zero_grad();
            t.total.backward();
            opt.step();
            model->clamp_temperatures();
            const double w = double(b.size());
            total += lv * w;
            if (t.le.defined()) le += t.le.item<double>() * w;
            if (t.lt.defined()) lt += t.lt.item<double>() * w;
            count += b.size();
        }
        const double val = evaluate_alignment_loss(model, cohort, monitor_idx, eval_bs);
        check_finite(val, "stage-2 validation");
        log_epoch(epoch, total / double(count), le / double(count), lt / double(count), val);
        if (val < best) {
            best = val;
            best_state = snapshot(*model);
            since_best = 0;
        } else if (++since_best >= hp.train.patience) {
            break;
        }
    }
    restore(*model, best_state);

    if (!stem.empty()) {
        nlohmann::json meta{{"stage", "stage2"},
                            {"edges", hp.edges.label()},
                            {"epochs_run", res.curve.back().epoch},
                            {"best_val_loss", best},
                            {"tau_le", model->tau_le().item<double>()},
                            {"tau_lt", model->tau_lt().item<double>()},
                            {"freeze_encoders", hp.freeze_encoders},
                            {"seed", hp.train.seed}};
        for (const auto& [m, c] : model->configs()) meta["configs"][std::string(short_name(m))] = c.to_json();
        res.checkpoint = save_checkpoint(*model, stem, "stage2", res.fingerprint, meta);
        write_stage2_curve(stem.parent_path() / "stage2_curve.csv", res.curve);
    }
    return res;
}

AlignmentModel load_alignment(const std::filesystem::path& stem, AlignmentEdges edges,
                              const std::map<Modality, EncoderConfig>& configs, const TabularSchema& schema) {
    AlignmentModel model(edges, configs, schema);
    auto ck = load_checkpoint(*model, stem, alignment_fingerprint(edges, configs, schema));
    if (ck.kind != "stage2") throw ConfigError(stem.string() + " is not a stage-2 checkpoint");
    return model;
}

std::vector<AlignedEmbedding> embed_batch(AlignmentModel& model, const Cohort& cohort,
                                          const std::vector<std::size_t>& idx) {
    torch::NoGradGuard guard;
    model->eval();
    std::vector<AlignedEmbedding> out;
    for (auto i : idx) out.push_back({cohort[i].subject_id, {}, {}, {}});

    for (auto m : {Modality::Localizer, Modality::Ecg, Modality::Tabular}) {
        if (!model->has(m)) continue;
        std::vector<std::size_t> present, slot;
        for (std::size_t k = 0; k < idx.size(); ++k)
            if (cohort[idx[k]].has(m)) present.push_back(idx[k]), slot.push_back(k);
        std::size_t cursor = 0;
        for (const auto& b : chunk(present, 64)) {
            auto z = model->project(m, make_batch(cohort, b, model->configs().at(m))).to(torch::kFloat32).contiguous();
            for (int64_t r = 0; r < z.size(0); ++r, ++cursor) {
                const float* row = z[r].data_ptr<float>();
                std::vector<float> v(row, row + z.size(1));
                auto& e = out[slot[cursor]];
                (m == Modality::Localizer ? e.z_l : m == Modality::Ecg ? e.z_e : e.z_t) = std::move(v);
            }
        }
    }
    return out;
}

void write_stage2_curve(const std::filesystem::path& file, const std::vector<Stage2EpochLog>& curve) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    out << "epoch,total_loss,loss_LE,loss_LT,tau_LE,tau_LT,pos_sim_LE,neg_sim_LE,pos_sim_LT,neg_sim_LT\n"
        << std::setprecision(9);
    for (const auto& e : curve)
        out << e.epoch << ',' << e.total_loss << ',' << e.loss_le << ',' << e.loss_lt << ',' << e.tau_le << ','
            << e.tau_lt << ',' << e.pos_sim_le << ',' << e.neg_sim_le << ',' << e.pos_sim_lt << ',' << e.neg_sim_lt
            << '\n';
}

}  // namespace ctrip
