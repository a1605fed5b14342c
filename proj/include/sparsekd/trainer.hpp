#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparsekd/config.hpp"
#include "sparsekd/dataset.hpp"
#include "sparsekd/io.hpp"
#include "sparsekd/losses.hpp"
#include "sparsekd/masking.hpp"
#include "sparsekd/optim.hpp"
#include "sparsekd/queue.hpp"
#include "sparsekd/student.hpp"
#include "sparsekd/teacher.hpp"

// Distillation loop: augment -> teacher (frozen) -> student -> feature loss
// -> enqueue teacher embeddings + teacher similarities -> student
// similarities -> similarity loss -> backward + momentum step. Checkpoints
// capture everything mutable; randomness is derived statelessly from the
// config seed, so a resumed run replays the uninterrupted one bitwise.

namespace sparsekd {

inline constexpr const char* kBuildId = "sparsekd 0.1.0";

struct StepRecord {
    std::int64_t step = 0;
    double lr = 0.0;
    double l_sim = 0.0;
    double l_feat = 0.0;
    double total = 0.0;
    std::int64_t queue_fill = 0;
    double ms = 0.0;
    bool sim_skipped = false;  // queue still warming up
};

inline std::string metrics_header() { return "step,lr,l_sim,l_feat,total,queue_fill,ms"; }

inline std::string metrics_row(const StepRecord& r) {
    std::ostringstream os;
    os << r.step << ',' << std::setprecision(17) << r.lr << ',' << r.l_sim << ',' << r.l_feat << ',' << r.total
       << ',' << r.queue_fill << ',' << std::fixed << std::setprecision(3) << r.ms;
    return os.str();
}

template <class S>
class TrainerT {
  public:
    TrainerT(DistillConfig cfg, const Dataset& ds)
        : cfg_(std::move(cfg)),
          ds_(&ds),
          student_(student_config(cfg_), mix_seed(cfg_.seed, 0x57de, 0)),
          queue_(cfg_.queue_capacity, cfg_.head_dim),
          opt_(student_.params(arm_mode(cfg_)), optim_config(cfg_)) {
        cfg_.validate();
        if (ds.image_size() != cfg_.image_size)
            throw DataError("dataset images are " + std::to_string(ds.image_size()) + "x" +
                            std::to_string(ds.image_size()) + " but config expects " + std::to_string(cfg_.image_size));
        if (ds.n_train < cfg_.batch)
            throw DataError("train split has " + std::to_string(ds.n_train) + " rows, batch is " +
                            std::to_string(cfg_.batch));
        if (cfg_.teacher_kind == "toy") {
            TeacherConfig tc;
            tc.patch = cfg_.teacher_patch;
            tc.dim = cfg_.teacher_dim;
            tc.depth = cfg_.teacher_depth;
            tc.heads = cfg_.teacher_heads;
            tc.image_size = cfg_.image_size;
            teacher_ = std::make_unique<ToyTeacherT<S>>(tc, cfg_.teacher_seed);
        } else {
            file_teacher_ = std::make_unique<FileTeacherT<S>>(cfg_.teacher_export, cfg_.head_dim);
            const auto& info = file_teacher_->info();
            if (info.instances != ds.count())
                throw DataError("teacher export has " + std::to_string(info.instances) + " instances, dataset has " +
                                std::to_string(ds.count()));
            if (info.tokens != student_.config().tokens_per_image())
                throw DataError("teacher export has " + std::to_string(info.tokens) + " tokens per instance, student head produces " +
                                std::to_string(student_.config().tokens_per_image()));
            if (!info.dataset_checksum.empty() && info.dataset_checksum != hex64(ds.images_checksum))
                throw DataError("teacher export was computed on a different dataset (checksum " +
                                info.dataset_checksum + " vs " + hex64(ds.images_checksum) + ")");
        }
        mode_ = arm_mode(cfg_);
        sim_mode_ = cfg_.sim_mode == "as-written" ? SimMode::AsWritten : SimMode::Consistent;
    }

    std::int64_t steps_per_epoch() const { return ds_->n_train / cfg_.batch; }  // drop-last
    std::int64_t total_steps() const { return steps_per_epoch() * cfg_.epochs; }
    std::int64_t warmup_steps() const { return steps_per_epoch() * cfg_.warmup_epochs; }
    std::int64_t next_step() const { return step_; }
    double lr_for(std::int64_t step) const { return lr_at(step, cfg_.lr, warmup_steps(), total_steps()); }

    const DistillConfig& config() const { return cfg_; }
    ForwardMode mode() const { return mode_; }
    StudentModelT<S>& student() { return student_; }
    MemoryQueueT<S>& queue() { return queue_; }
    OptimizerT<S>& optimizer() { return opt_; }

    // Train batch for a given global step, per the seeded epoch shuffle.
    std::vector<std::int64_t> batch_indices(std::int64_t step) const {
        const std::int64_t spe = steps_per_epoch();
        const std::int64_t epoch = step / spe, pos = step % spe;
        auto order = epoch_order(*ds_, cfg_.seed, epoch);
        return {order.begin() + pos * cfg_.batch, order.begin() + (pos + 1) * cfg_.batch};
    }

    // One optimizer step on the given dataset rows. Phases, in order:
    // augment, teacher forward, student forward, feature loss, enqueue +
    // teacher similarities, student similarities, similarity loss, update.
    StepRecord distill_step(const std::vector<std::int64_t>& indices) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            return distill_step_inner(indices, t0);
        } catch (const NumericError& e) {
            throw NumericError("aborting at step " + std::to_string(step_) + ": " + e.what());
        }
    }

    StepRecord run_step() { return distill_step(batch_indices(step_)); }

    // Full loop with metrics/manifest/checkpoint files under cfg.out_dir.
    void run(std::ostream* log = nullptr) {
        namespace fs = std::filesystem;
        if (cfg_.out_dir.empty()) throw ConfigError("distill: out_dir is empty");
        fs::create_directories(cfg_.out_dir);
        if (step_ == 0) write_run_manifest();
        const std::string metrics_path = cfg_.out_dir + "/metrics.csv";
        const bool fresh = !fs::exists(metrics_path) || step_ == 0;
        std::ofstream metrics(metrics_path, fresh ? std::ios::trunc : std::ios::app);
        if (!metrics) throw DataError("cannot open " + metrics_path);
        if (fresh) metrics << metrics_header() << "\n";

        const std::int64_t total = total_steps();
        while (step_ < total) {
            auto rec = run_step();
            metrics << metrics_row(rec) << "\n";
            metrics.flush();
            if (log && (rec.step % 50 == 0 || rec.step + 1 == total))
                (*log) << "step " << rec.step << "/" << total << " lr " << rec.lr << " l_sim " << rec.l_sim
                       << " l_feat " << rec.l_feat << " total " << rec.total << " fill " << rec.queue_fill << " ("
                       << rec.ms << " ms)\n";
            if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 && step_ < total)
                save_checkpoint(cfg_.out_dir + "/checkpoint-" + std::to_string(step_));
        }
        save_checkpoint(cfg_.out_dir + "/checkpoint-final");
    }

    // ---- checkpointing ---------------------------------------------------

    void save_checkpoint(const std::string& dir) {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        nlohmann::json j;
        j["format"] = "skd-checkpoint-1";
        j["step"] = step_;
        j["build"] = kBuildId;
        j["config_hash"] = hex64(cfg_.hash());
        j["config_text"] = cfg_.canonical_text();
        j["queue_total_enqueued"] = queue_.total_enqueued();
        j["params"] = write_group(dir + "/student.ntsr", student_.params());
        j["buffers"] = write_group(dir + "/buffers.ntsr", student_.buffers());
        write_velocity(dir + "/velocity.ntsr");
        save_tensor(dir + "/queue.ntsr", queue_.snapshot());
        std::ofstream f(dir + "/manifest.json");
        if (!f) throw DataError("cannot write " + dir + "/manifest.json");
        f << j.dump(2) << "\n";
    }

    void load_checkpoint(const std::string& dir) {
        std::ifstream f(dir + "/manifest.json");
        if (!f) throw DataError("cannot open " + dir + "/manifest.json (not a checkpoint?)");
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("corrupt checkpoint manifest " + dir + "/manifest.json: " + e.what());
        }
        if (j.value("format", std::string()) != "skd-checkpoint-1")
            throw DataError("checkpoint " + dir + ": unknown format '" + j.value("format", std::string()) + "'");
        const std::string want_hash = j.value("config_hash", std::string());
        if (want_hash != hex64(cfg_.hash())) {
            std::string detail;
            try {
                auto stored = DistillConfig::from_config(
                    parse_config_text(j.value("config_text", std::string()), dir + "/manifest.json"));
                for (const auto& d : cfg_.diff(stored)) detail += (detail.empty() ? "" : "; ") + d;
            } catch (const Error&) {
                detail = "stored config text unreadable";
            }
            throw DataError("checkpoint config mismatch (" + (detail.empty() ? "hash differs" : detail) + ")");
        }
        read_group(dir + "/student.ntsr", j.at("params"), student_.params(), "parameter");
        read_group(dir + "/buffers.ntsr", j.at("buffers"), student_.buffers(), "buffer");
        read_velocity(dir + "/velocity.ntsr");
        Shape qshape;
        std::vector<float> qvals;
        load_tensor_file(dir + "/queue.ntsr", qshape, qvals);
        if (qshape.size() != 2 || qshape[1] != cfg_.head_dim)
            throw DataError("checkpoint queue shape " + shape_str(qshape) + " vs dim " + std::to_string(cfg_.head_dim));
        auto rows = TensorT<S>::zeros(qshape);
        for (std::size_t i = 0; i < qvals.size(); ++i) rows.values()[static_cast<std::int64_t>(i)] = static_cast<S>(qvals[i]);
        queue_.restore(rows, j.value("queue_total_enqueued", std::int64_t(0)));
        step_ = j.at("step").get<std::int64_t>();
        if (step_ < 0 || step_ > total_steps())
            throw DataError("checkpoint step " + std::to_string(step_) + " outside run of " +
                            std::to_string(total_steps()) + " steps");
    }

    static StudentConfig student_config(const DistillConfig& c) {
        StudentConfig sc;
        sc.image_size = c.image_size;
        sc.widths = c.widths;
        sc.blocks_per_stage = c.blocks;
        sc.head_dim = c.head_dim;
        return sc;
    }

    static OptimizerConfig optim_config(const DistillConfig& c) {
        OptimizerConfig oc;
        oc.momentum = c.momentum;
        oc.weight_decay = c.weight_decay;
        oc.clip_norm = c.clip_norm;
        oc.trust_ratio = c.trust_ratio;
        return oc;
    }

    // Ablation arms: full sparse UNet, masked-input dense baseline, or the
    // encoder-only (no UNet) variant.
    static ForwardMode arm_mode(const DistillConfig& c) {
        if (!c.arm_sparse) return ForwardMode::DenseMaskedInput;
        return c.arm_unet ? ForwardMode::Sparse : ForwardMode::NoUnet;
    }

  private:
    StepRecord distill_step_inner(const std::vector<std::int64_t>& indices, std::chrono::steady_clock::time_point t0) {
        auto& tape = TapeT<S>::active();
        tape.clear();
        const std::int64_t n = static_cast<std::int64_t>(indices.size());

        // (1) augment
        auto raw = ds_->template batch<S>(indices);
        auto imgs = augment_batch(raw, cfg_.seed, step_, cfg_.aug_crop, cfg_.aug_flip, cfg_.aug_jitter);

        // per-image masks, one hierarchy per sample
        const std::int64_t g = student_.config().grid();
        std::vector<MaskGrid> grids;
        std::vector<MaskHierarchy> hier;
        grids.reserve(static_cast<std::size_t>(n));
        hier.reserve(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            grids.push_back(generate_mask(g, g, cfg_.mask_ratio,
                                          mix_seed(cfg_.seed, 0x6a51, static_cast<std::uint64_t>(step_),
                                                   static_cast<std::uint64_t>(i))));
            hier.push_back(expand_hierarchy(grids.back(), StudentConfig::mask_factors()));
        }

        // (2) teacher forward, frozen
        TensorT<S> tok_t;  // (N, T, D) constants
        {
            NoGradGuard<S> ng;
            tok_t = teacher_ ? teacher_->encode_batch(imgs, grids) : file_teacher_->tokens_for_batch(indices);
        }

        // (3) student forward
        auto out = student_.forward(imgs, hier, mode_, /*training=*/true);
        if (out.t != tok_t.dim(1) || out.d != tok_t.dim(2))
            throw ShapeError("student tokens (" + std::to_string(out.t) + "," + std::to_string(out.d) +
                             ") vs teacher (" + std::to_string(tok_t.dim(1)) + "," + std::to_string(tok_t.dim(2)) + ")");

        // (4) feature loss input: flatten teacher tokens to match
        auto tok_t_flat = reshape(tok_t, {n * out.t, out.d});

        // (5) enqueue teacher embeddings + teacher similarities
        queue_.begin_step();
        TensorT<S> temb;
        {
            NoGradGuard<S> ng;
            temb = instance_embedding(tok_t);
        }
        queue_.enqueue_batch(temb);
        const bool sim_ready = queue_.warm();

        // (6) student similarities (never enqueued), (7) similarity loss
        TensorT<S> p_t, p_s;
        if (sim_ready && cfg_.w_sim != 0.0) {
            p_t = queue_.teacher_similarity_batch(temb, cfg_.tau);
            auto semb = instance_embedding(reshape(out.tokens, {n, out.t, out.d}));
            p_s = queue_.student_similarity_batch(semb, cfg_.tau, sim_mode_, temb);
        }
        auto lb = total_loss(p_t, p_s, tok_t_flat, out.tokens, cfg_.w_sim, cfg_.w_feat, sim_ready);

        // (8) backward + update
        const double lr = lr_for(step_);
        opt_.zero_grad();
        backward(lb.total);
        opt_.step(lr);
        tape.clear();

        StepRecord rec;
        rec.step = step_;
        rec.lr = lr;
        rec.l_sim = lb.l_sim;
        rec.l_feat = lb.l_feat;
        rec.total = lb.total_value;
        rec.queue_fill = queue_.count();
        rec.sim_skipped = lb.sim_skipped;
        rec.ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        ++step_;
        return rec;
    }

    void write_run_manifest() const {
        nlohmann::json j;
        j["build"] = kBuildId;
        j["config_hash"] = hex64(cfg_.hash());
        j["config"] = cfg_.canonical_text();
        j["dataset"] = {{"images_checksum", hex64(ds_->images_checksum)},
                        {"labels_checksum", hex64(ds_->labels_checksum)},
                        {"train", ds_->n_train},
                        {"val", ds_->n_val}};
        j["outputs"] = {{"metrics", cfg_.out_dir + "/metrics.csv"},
                        {"final_checkpoint", cfg_.out_dir + "/checkpoint-final"}};
        j["total_steps"] = total_steps();
        std::ofstream f(cfg_.out_dir + "/run.json");
        if (!f) throw DataError("cannot write " + cfg_.out_dir + "/run.json");
        f << j.dump(2) << "\n";
    }

    // Concatenates named tensors into one flat file; returns the index.
    nlohmann::json write_group(const std::string& path, std::vector<std::pair<std::string, TensorT<S>>> group) {
        nlohmann::json index = nlohmann::json::array();
        std::vector<float> flat;
        for (auto& [name, t] : group) {
            index.push_back({{"name", name}, {"shape", t.shape()}});
            for (std::int64_t i = 0; i < t.size(); ++i) flat.push_back(static_cast<float>(t.values()[i]));
        }
        save_tensor_file(path, {static_cast<std::int64_t>(flat.size())}, flat);
        return index;
    }

    void read_group(const std::string& path, const nlohmann::json& index,
                    std::vector<std::pair<std::string, TensorT<S>>> group, const char* what) {
        if (!index.is_array() || index.size() != group.size())
            throw DataError("checkpoint " + std::string(what) + " index has " + std::to_string(index.size()) +
                            " entries, model has " + std::to_string(group.size()));
        Shape shape;
        std::vector<float> flat;
        load_tensor_file(path, shape, flat);
        std::size_t off = 0;
        for (std::size_t k = 0; k < group.size(); ++k) {
            auto& [name, t] = group[k];
            const auto& e = index[k];
            if (e.value("name", std::string()) != name)
                throw DataError("checkpoint " + std::string(what) + " " + std::to_string(k) + " is '" +
                                e.value("name", std::string()) + "', model expects '" + name + "'");
            const auto stored = e.at("shape").get<std::vector<std::int64_t>>();
            if (stored != t.shape())
                throw DataError("checkpoint " + std::string(what) + " '" + name + "' has shape " + shape_str(stored) +
                                ", model expects " + shape_str(t.shape()));
            if (off + static_cast<std::size_t>(t.size()) > flat.size())
                throw DataError("checkpoint file " + path + " too short for " + std::string(what) + " '" + name + "'");
            for (std::int64_t i = 0; i < t.size(); ++i) t.values()[i] = static_cast<S>(flat[off + static_cast<std::size_t>(i)]);
            off += static_cast<std::size_t>(t.size());
        }
        if (off != flat.size())
            throw DataError("checkpoint file " + path + " has " + std::to_string(flat.size() - off) +
                            " unclaimed values");
    }

    void write_velocity(const std::string& path) {
        std::vector<float> flat;
        for (const auto& v : opt_.velocity())
            for (Eigen::Index i = 0; i < v.size(); ++i) flat.push_back(static_cast<float>(v[i]));
        save_tensor_file(path, {static_cast<std::int64_t>(flat.size())}, flat);
    }

    void read_velocity(const std::string& path) {
        Shape shape;
        std::vector<float> flat;
        load_tensor_file(path, shape, flat);
        std::size_t off = 0;
        for (auto& v : opt_.velocity()) {
            if (off + static_cast<std::size_t>(v.size()) > flat.size())
                throw DataError("checkpoint velocity file " + path + " too short");
            for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<S>(flat[off + static_cast<std::size_t>(i)]);
            off += static_cast<std::size_t>(v.size());
        }
        if (off != flat.size()) throw DataError("checkpoint velocity file " + path + " has unclaimed values");
    }

    DistillConfig cfg_;
    const Dataset* ds_;
    StudentModelT<S> student_;
    MemoryQueueT<S> queue_;
    OptimizerT<S> opt_;
    std::unique_ptr<ToyTeacherT<S>> teacher_;
    std::unique_ptr<FileTeacherT<S>> file_teacher_;
    ForwardMode mode_ = ForwardMode::Sparse;
    SimMode sim_mode_ = SimMode::Consistent;
    std::int64_t step_ = 0;
};

using Trainer = TrainerT<float>;

}  // namespace sparsekd
