// Command-line driver for the three-stage localizer pipeline.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ctrip/error.hpp"
#include "ctrip/interpret.hpp"
#include "ctrip/pipeline.hpp"
#include "ctrip/synthetic_cohort.hpp"

namespace fs = std::filesystem;
using namespace ctrip;

namespace {

struct StageFlags {
    int64_t epochs = -1;
    int64_t bs = -1;
    double lr = -1.0;
};

void apply(const StageFlags& f, TrainHparams& hp) {
    if (f.epochs >= 0) hp.epochs = f.epochs;
    if (f.bs > 0) hp.batch_size = f.bs;
    if (f.lr > 0) hp.lr = f.lr;
}

void add_stage_flags(CLI::App* cmd, StageFlags& f) {
    cmd->add_option("--epochs", f.epochs, "Training epochs");
    cmd->add_option("--bs", f.bs, "Batch size");
    cmd->add_option("--lr", f.lr, "Learning rate");
}

// Latest runs/<stamp>_<variant> directory, or a new one.
fs::path resolve_run_dir(const std::string& explicit_dir, const fs::path& root, Variant v, bool fresh) {
    if (!explicit_dir.empty()) return explicit_dir;
    const std::string suffix = "_" + std::string(to_string(v));
    std::vector<fs::path> found;
    if (!fresh && fs::is_directory(root))
        for (const auto& e : fs::directory_iterator(root)) {
            const auto name = e.path().filename().string();
            if (e.is_directory() && name.size() > suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
                found.push_back(e.path());
        }
    if (found.empty()) return default_run_dir(root, v);
    return *std::max_element(found.begin(), found.end());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Localizer phenotype pipeline: pretraining, alignment, fine-tuning and evaluation"};
    app.set_config("--config", "", "INI/TOML config file; flags override it");
    app.require_subcommand(1);
    app.fallthrough();

    std::string variant_name = "C-TRIP", scale = "desk", data_dir = "data", run_dir_flag, runs_root = "runs";
    ExperimentConfig cfg;
    bool new_run = false;
    app.add_option("--variant", variant_name, "CMR_sup, L_sup, E_sup, T_sup, L+T, L+E, L+E+T_p or C-TRIP");
    app.add_option("--scale", scale, "Model size preset: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
    app.add_option("--data", data_dir, "Cohort directory");
    app.add_option("--run-dir", run_dir_flag, "Artifact directory (default: latest runs/<timestamp>_<variant>)");
    app.add_option("--runs-root", runs_root, "Parent of timestamped run directories");
    app.add_flag("--new-run", new_run, "Start a new timestamped run directory");
    app.add_option("--seed", cfg.seed, "Training seed");
    app.add_option("--split_seed", cfg.split_seed, "Seed of the train/val/test split");
    app.add_flag("--deterministic", cfg.deterministic, "Single-threaded deterministic kernels");
    app.add_option("--mask_ratio", cfg.mask_ratio, "Masking ratio of Stage-I pretraining");
    app.add_option("--tau_le", cfg.tau_init.tau_le, "Initial localizer-ECG temperature");
    app.add_option("--tau_lt", cfg.tau_init.tau_lt, "Initial localizer-tabular temperature");

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic paired cohort");
    int64_t n_subjects = 512;
    std::uint64_t data_seed = 1;
    bool no_cmr = false;
    gen->add_option("--n", n_subjects, "Number of subjects")->check(CLI::PositiveNumber);
    gen->add_option("--data-seed", data_seed, "Generator seed (defaults to --seed when given)");
    gen->add_flag("--no-cmr", no_cmr, "Skip the CMR stand-in images");

    auto* pretrain = app.add_subcommand("pretrain", "Stage I: masked-autoencoder pretraining of one modality");
    std::string modality = "L";
    StageFlags s1;
    bool no_augment = false;
    pretrain->add_option("--modality", modality, "L, E or T")->required();
    pretrain->add_flag("--no-augment", no_augment, "Disable localizer augmentation");
    add_stage_flags(pretrain, s1);

    auto* align = app.add_subcommand("align", "Stage II: localizer-centric contrastive alignment");
    StageFlags s2;
    add_stage_flags(align, s2);
    align->add_flag("--freeze-encoders", cfg.freeze_encoders, "Keep Stage-I encoders fixed; train projections only");

    auto* finetune = app.add_subcommand("finetune", "Stage III: phenotype regression from one modality");
    StageFlags s3;
    double lr_encoder = -1.0;
    add_stage_flags(finetune, s3);
    finetune->add_option("--fraction", cfg.stage3.data_fraction, "Fraction of training subjects");
    finetune->add_option("--lr_encoder", lr_encoder, "Encoder learning rate");

    auto* evaluate = app.add_subcommand("evaluate", "Agreement statistics on the test split");
    evaluate->add_option("--fraction", cfg.stage3.data_fraction, "Fraction the evaluated model was tuned on");

    auto* scaling = app.add_subcommand("scaling", "Pearson R against fine-tuning subset size");
    std::vector<std::string> scaling_variants{"L_sup", "C-TRIP"};
    std::vector<double> fractions{0.01, 0.10, 1.00};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    StageFlags s3s;
    scaling->add_option("--variants", scaling_variants, "Variants to compare");
    scaling->add_option("--fractions", fractions, "Fine-tuning fractions");
    scaling->add_option("--seeds", seeds, "Seeds per cell");
    add_stage_flags(scaling, s3s);

    auto* attention = app.add_subcommand("attention", "Final-block [CLS] attention maps as PNG");
    std::vector<std::string> subjects;
    attention->add_option("--subject", subjects, "Subject ids (default: test split)");
    attention->add_option("--fraction", cfg.stage3.data_fraction, "Fraction of the fine-tuned model to inspect");

    auto* embed = app.add_subcommand("embed", "Export shared-space embeddings");
    std::string tag = "post";
    embed->add_option("--tag", tag, "pre or post")->check(CLI::IsMember({"pre", "post"}));

    auto* all = app.add_subcommand("pipeline", "Every stage of one variant followed by evaluation");
    StageFlags a1, a2, a3;
    all->add_option("--epochs1", a1.epochs, "Stage-I epochs");
    all->add_option("--epochs2", a2.epochs, "Stage-II epochs");
    all->add_option("--epochs3", a3.epochs, "Stage-III epochs");
    all->add_option("--fraction", cfg.stage3.data_fraction, "Fine-tuning fraction");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        cfg.variant = variant_from_string(variant_name);
        cfg.scale = scale == "paper" ? ModelScale::Paper : ModelScale::Desk;
        if (cfg.scale == ModelScale::Desk) cfg.use_desk_schedule();
        if (cfg.deterministic) enable_deterministic_mode();

        if (*gen) {
            const auto seed = gen->count("--data-seed") ? data_seed : (app.count("--seed") ? cfg.seed : data_seed);
            GeneratorConfig gc;
            gc.with_cmr = !no_cmr;
            write_cohort(generate_cohort(n_subjects, seed, gc), data_dir);
            std::cout << "wrote " << n_subjects << " subjects to " << data_dir << '\n';
            return 0;
        }

        const fs::path run_dir = resolve_run_dir(run_dir_flag, runs_root, cfg.variant, new_run);
        std::cout << "run directory: " << run_dir.string() << '\n';

        if (*pretrain) {
            apply(s1, cfg.stage1);
            if (no_augment) cfg.stage1.augment = false;
            auto res = run_pretrain(cfg, data_dir, run_dir, modality_from_string(modality));
            std::cout << "stage I " << modality << ": loss " << res.initial_train_loss << " -> "
                      << res.final_train_loss << '\n';
        } else if (*align) {
            apply(s2, cfg.stage2);
            auto res = run_align(cfg, data_dir, run_dir);
            const auto& last = res.curve.back();
            std::cout << "stage II: loss " << res.curve.front().total_loss << " -> " << last.total_loss
                      << ", tau_LE " << last.tau_le << ", tau_LT " << last.tau_lt << '\n';
        } else if (*finetune) {
            if (s3.epochs >= 0) cfg.stage3.epochs = s3.epochs;
            if (s3.bs > 0) cfg.stage3.batch_size = s3.bs;
            if (s3.lr > 0) cfg.stage3.lr_head = s3.lr;
            if (lr_encoder >= 0) cfg.stage3.lr_encoder = lr_encoder;
            auto res = run_finetune(cfg, data_dir, run_dir);
            std::cout << "stage III: " << res.train_subjects.size() << " subjects, " << res.curve.back().epoch
                      << " epochs\n";
        } else if (*evaluate) {
            auto report = run_evaluate(cfg, data_dir, run_dir);
            for (const auto& [v, rows] : report)
                for (const auto& r : rows)
                    std::cout << v << ' ' << r.phenotype << " MD " << r.md << " LoA [" << r.loa_low << ", "
                              << r.loa_high << "] R " << r.pearson_r << '\n';
        } else if (*scaling) {
            if (s3s.epochs >= 0) cfg.stage3.epochs = s3s.epochs;
            if (s3s.bs > 0) cfg.stage3.batch_size = s3s.bs;
            if (s3s.lr > 0) cfg.stage3.lr_head = s3s.lr;
            std::vector<Variant> vs;
            for (const auto& v : scaling_variants) vs.push_back(variant_from_string(v));
            auto rows = run_scaling(cfg, data_dir, run_dir, vs, fractions, seeds);
            std::cout << rows.size() << " rows written to " << (run_dir / "scaling_table.csv").string() << '\n';
        } else if (*attention) {
            for (const auto& f : run_attention(cfg, data_dir, run_dir, subjects)) std::cout << f.string() << '\n';
        } else if (*embed) {
            std::cout << run_embed(cfg, data_dir, run_dir, tag).string() << '\n';
        } else if (*all) {
            apply(a1, cfg.stage1);
            apply(a2, cfg.stage2);
            if (a3.epochs >= 0) cfg.stage3.epochs = a3.epochs;
            run_all(cfg, data_dir, run_dir);
            std::cout << (run_dir / "agreement_report.json").string() << '\n';
        }
        return 0;
    } catch (const FingerprintMismatch& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
