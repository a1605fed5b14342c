// skd: command-line front end. Subcommands cover dataset generation, the
// distillation loop, linear-probe evaluation, the two diagnostics, and
// teacher-embedding export.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "sparsekd/config.hpp"
#include "sparsekd/dataset.hpp"
#include "sparsekd/diagnostics.hpp"
#include "sparsekd/probe.hpp"
#include "sparsekd/teacher.hpp"
#include "sparsekd/trainer.hpp"

namespace {

using namespace sparsekd;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path);
    f << text;
}

int cmd_distill(const std::string& config_path, const std::string& resume) {
    auto cfg = DistillConfig::from_file(config_path);
    auto ds = load_dataset(cfg.data_dir);
    Trainer trainer(cfg, ds);
    if (!resume.empty()) trainer.load_checkpoint(resume);
    trainer.run(&std::cout);
    std::cout << "done: " << trainer.next_step() << " steps, outputs in " << cfg.out_dir << "\n";
    return 0;
}

int cmd_probe(const std::string& config_path, const std::string& checkpoint, bool finetune, std::int64_t epochs,
              double lr, std::uint64_t seed, const std::string& out) {
    auto cfg = DistillConfig::from_file(config_path);
    auto ds = load_dataset(cfg.data_dir);
    ProbeConfig pc;
    pc.finetune = finetune;
    pc.epochs = epochs;
    pc.lr = lr;
    pc.seed = seed;

    std::ostringstream csv;
    csv << "arm,train_acc,val_acc\n";
    auto report = [&](const std::string& arm, const ProbeResult& r) {
        csv << arm << ',' << std::setprecision(6) << r.train_acc << ',' << r.val_acc << '\n';
        std::cout << arm << ": top-1 " << std::setprecision(4) << 100.0 * r.val_acc << "% (train "
                  << 100.0 * r.train_acc << "%)\n";
    };

    if (!checkpoint.empty()) {
        Trainer trained(cfg, ds);
        trained.load_checkpoint(checkpoint);
        report("distilled", linear_probe(trained.student(), ds, pc));
    }
    Trainer fresh(cfg, ds);  // same init seed as an untrained run
    report("random-init", linear_probe(fresh.student(), ds, pc));
    if (!out.empty()) write_text(out, csv.str());
    return 0;
}

int cmd_diagnose_shift(const std::string& config_path, double ratio, std::int64_t images, const std::string& checkpoint,
                       const std::string& out) {
    auto cfg = DistillConfig::from_file(config_path);
    auto ds = load_dataset(cfg.data_dir);
    Trainer trainer(cfg, ds);
    if (!checkpoint.empty()) trainer.load_checkpoint(checkpoint);
    if (images > ds.count()) images = ds.count();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(images));
    std::iota(idx.begin(), idx.end(), 0);
    auto batch = ds.batch<float>(idx);
    auto rep = shift_diagnostic(trainer.student(), batch, ratio, cfg.seed);

    std::ostringstream csv;
    csv << "sparse_bin_lo,sparse_bin_hi,sparse_unmasked,sparse_masked,"
           "dense_bin_lo,dense_bin_hi,dense_unmasked,dense_masked\n";
    for (std::int64_t b = 0; b < rep.sparse_unmasked.bins(); ++b) {
        const auto i = static_cast<std::size_t>(b);
        csv << std::setprecision(9) << rep.sparse_unmasked.edges[i] << ',' << rep.sparse_unmasked.edges[i + 1] << ','
            << rep.sparse_unmasked.counts[i] << ',' << rep.sparse_masked.counts[i] << ',' << rep.dense_unmasked.edges[i]
            << ',' << rep.dense_unmasked.edges[i + 1] << ',' << rep.dense_unmasked.counts[i] << ','
            << rep.dense_masked.counts[i] << '\n';
    }
    if (!out.empty()) write_text(out, csv.str());

    std::cout << "sparse arm shift (TV): " << std::setprecision(4) << rep.sparse_score << "\n";
    std::cout << "dense arm shift (TV):  " << rep.dense_score << "\n";
    const bool ok = rep.sparse_score < 0.1 && rep.dense_score > 2.0 * rep.sparse_score;
    std::cout << "verdict: " << (ok ? "ok" : "FAIL") << " (want sparse < 0.1 and dense > 2x sparse)\n";
    return 0;
}

int cmd_diagnose_erosion(double ratio, std::int64_t grid, std::int64_t depth, std::uint64_t seed,
                         const std::string& out) {
    auto mask = expand_map(generate_mask(grid, grid, ratio, seed), grid, grid);
    auto dense = erosion_profile(ConvKind::Dense, mask, depth);
    auto sparse = erosion_profile(ConvKind::Sparse, mask, depth);
    std::ostringstream csv;
    csv << "layer,dense_visible_fraction,sparse_visible_fraction\n";
    for (std::int64_t i = 0; i < depth; ++i)
        csv << (i + 1) << ',' << std::setprecision(9) << dense[static_cast<std::size_t>(i)] << ','
            << sparse[static_cast<std::size_t>(i)] << '\n';
    std::cout << csv.str();
    if (!out.empty()) write_text(out, csv.str());
    return 0;
}

int cmd_export_teacher(const std::string& config_path, const std::string& out_dir) {
    auto cfg = DistillConfig::from_file(config_path);
    auto ds = load_dataset(cfg.data_dir);
    TeacherConfig tc;
    tc.patch = cfg.teacher_patch;
    tc.dim = cfg.teacher_dim;
    tc.depth = cfg.teacher_depth;
    tc.heads = cfg.teacher_heads;
    tc.image_size = cfg.image_size;
    ToyTeacherT<float> teacher(tc, cfg.teacher_seed);

    const std::int64_t n = ds.count();
    const std::int64_t g = cfg.image_size / 32;
    TensorT<float> all;
    for (std::int64_t at = 0; at < n; at += 64) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = at; i < std::min(n, at + 64); ++i) idx.push_back(i);
        std::vector<MaskGrid> grids(idx.size(), full_visible_grid(g, g));
        auto toks = teacher.encode_batch(ds.batch<float>(idx), grids);
        if (!all.defined()) all = TensorT<float>::zeros({n, toks.dim(1), toks.dim(2)});
        std::copy(toks.data(), toks.data() + toks.size(), all.data() + at * toks.dim(1) * toks.dim(2));
    }
    save_teacher_export(out_dir, all, cfg.teacher_patch, hex64(ds.images_checksum));
    std::cout << "exported " << n << " instances to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse-student knowledge distillation workbench"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic texture dataset");
    std::string gen_out = "data";
    std::int64_t gen_n = 2500, gen_classes = 4, gen_size = 64, gen_val = 500;
    std::uint64_t gen_seed = 1;
    bool gen_force = false;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--n", gen_n, "total images (train + val)");
    gen->add_option("--classes", gen_classes, "number of classes");
    gen->add_option("--image-size", gen_size, "square image side, multiple of 32");
    gen->add_option("--val", gen_val, "validation rows (taken from the end)");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    // distill
    auto* dist = app.add_subcommand("distill", "run the distillation loop");
    std::string dist_config, dist_resume;
    dist->add_option("--config", dist_config, "config file")->required();
    dist->add_option("--resume", dist_resume, "checkpoint directory to resume from");

    // probe
    auto* probe = app.add_subcommand("probe", "linear-probe a checkpoint against a random-init baseline");
    std::string probe_config, probe_ckpt, probe_out;
    bool probe_finetune = false;
    std::int64_t probe_epochs = 40;
    double probe_lr = 0.05;
    std::uint64_t probe_seed = 1;
    probe->add_option("--config", probe_config, "config file")->required();
    probe->add_option("--checkpoint", probe_ckpt, "checkpoint directory (omit for random-init only)");
    probe->add_flag("--finetune", probe_finetune, "train the backbone too");
    probe->add_option("--epochs", probe_epochs, "probe training epochs");
    probe->add_option("--lr", probe_lr, "probe learning rate");
    probe->add_option("--seed", probe_seed, "probe seed");
    probe->add_option("--out", probe_out, "write the accuracy table as CSV");

    // diagnose
    auto* diag = app.add_subcommand("diagnose", "distribution-shift and mask-erosion reports");
    diag->require_subcommand(1);
    auto* shift = diag->add_subcommand("shift", "activation distribution shift under masking");
    std::string shift_config, shift_ckpt, shift_out;
    double shift_ratio = 0.6;
    std::int64_t shift_images = 128;
    shift->add_option("--config", shift_config, "config file")->required();
    shift->add_option("--ratio", shift_ratio, "mask ratio");
    shift->add_option("--images", shift_images, "images to sample (>= 100)");
    shift->add_option("--checkpoint", shift_ckpt, "optional checkpoint to diagnose");
    shift->add_option("--out", shift_out, "write histograms as CSV");

    auto* erosion = diag->add_subcommand("erosion", "visible-region growth under stacked 3x3 convs");
    double ero_ratio = 0.6;
    std::int64_t ero_grid = 16, ero_depth = 8;
    std::uint64_t ero_seed = 1;
    std::string ero_out;
    erosion->add_option("--ratio", ero_ratio, "mask ratio");
    erosion->add_option("--grid", ero_grid, "mask grid side");
    erosion->add_option("--depth", ero_depth, "stacked conv layers");
    erosion->add_option("--seed", ero_seed, "mask seed");
    erosion->add_option("--out", ero_out, "write the profile as CSV");

    // export-teacher
    auto* exp = app.add_subcommand("export-teacher", "precompute teacher tokens for the whole dataset");
    std::string exp_config, exp_out;
    exp->add_option("--config", exp_config, "config file")->required();
    exp->add_option("--out", exp_out, "export directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            generate_dataset(gen_out, gen_n, gen_classes, gen_size, gen_val, gen_seed, gen_force);
            std::cout << "wrote " << gen_n << " images (" << gen_val << " val) to " << gen_out << "\n";
            return 0;
        }
        if (dist->parsed()) return cmd_distill(dist_config, dist_resume);
        if (probe->parsed())
            return cmd_probe(probe_config, probe_ckpt, probe_finetune, probe_epochs, probe_lr, probe_seed, probe_out);
        if (shift->parsed()) return cmd_diagnose_shift(shift_config, shift_ratio, shift_images, shift_ckpt, shift_out);
        if (erosion->parsed()) return cmd_diagnose_erosion(ero_ratio, ero_grid, ero_depth, ero_seed, ero_out);
        if (exp->parsed()) return cmd_export_teacher(exp_config, exp_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
