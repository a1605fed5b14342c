#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sparsekd/io.hpp"
#include "sparsekd/masking.hpp"
#include "sparsekd/ops.hpp"
#include "sparsekd/tensor.hpp"

// Frozen teacher: a small Transformer encoder that sees only visible patches
// (variable-length attention), scatters a frozen mask token into masked
// slots, and row-normalizes. Plus a file-backed provider for precomputed
// token exports.

namespace sparsekd {

struct TeacherConfig {
    std::int64_t patch = 16;
    std::int64_t dim = 64;
    std::int64_t depth = 2;
    std::int64_t heads = 1;
    std::int64_t mlp_ratio = 4;
    std::int64_t image_size = 64;
    std::int64_t in_channels = 3;

    void validate() const {
        if (patch < 1 || image_size % patch != 0)
            throw ConfigError("TeacherConfig: image " + std::to_string(image_size) + " not divisible by patch " +
                              std::to_string(patch));
        if (dim < 1 || dim % heads != 0)
            throw ConfigError("TeacherConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (depth < 1) throw ConfigError("TeacherConfig: depth must be >= 1");
    }
    std::int64_t token_grid() const { return image_size / patch; }
    std::int64_t tokens() const { return token_grid() * token_grid(); }
};

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
RowMat<S> to_mat(const TensorT<S>& t, std::int64_t r, std::int64_t c) {
    return Eigen::Map<const RowMat<S>>(t.data(), r, c);
}

template <class S>
void layernorm_inplace(RowMat<S>& x, const TensorT<S>& g, const TensorT<S>& b, double eps = 1e-5) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double mu = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) mu += static_cast<double>(x(i, j));
        mu /= static_cast<double>(x.cols());
        double var = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double d = static_cast<double>(x(i, j)) - mu;
            var += d * d;
        }
        var /= static_cast<double>(x.cols());
        const double is = 1.0 / std::sqrt(var + eps);
        for (Eigen::Index j = 0; j < x.cols(); ++j)
            x(i, j) = static_cast<S>((static_cast<double>(x(i, j)) - mu) * is) * g.values()[j] + b.values()[j];
    }
}

}  // namespace detail

template <class S>
class ToyTeacherT {
   public:
    ToyTeacherT(TeacherConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        std::uint64_t ctr = 0;
        auto next = [&] { return mix_seed(seed, 0x7e4c, ctr++); };
        const std::int64_t pdim = cfg_.patch * cfg_.patch * cfg_.in_channels;
        patch_w_ = TensorT<S>::randn({cfg_.dim, pdim}, next(), 0.0, 0.02);
        patch_b_ = TensorT<S>::zeros({cfg_.dim});
        pos_ = TensorT<S>::randn({cfg_.tokens(), cfg_.dim}, next(), 0.0, 0.02);
        mask_token_ = TensorT<S>::randn({cfg_.dim}, next(), 0.0, 0.02);
        blocks_.resize(static_cast<std::size_t>(cfg_.depth));
        for (auto& blk : blocks_) {
            blk.ln1_g = TensorT<S>::full({cfg_.dim}, S(1));
            blk.ln1_b = TensorT<S>::zeros({cfg_.dim});
            blk.ln2_g = TensorT<S>::full({cfg_.dim}, S(1));
            blk.ln2_b = TensorT<S>::zeros({cfg_.dim});
            blk.wq = TensorT<S>::randn({cfg_.dim, cfg_.dim}, next(), 0.0, 0.02);
            blk.wk = TensorT<S>::randn({cfg_.dim, cfg_.dim}, next(), 0.0, 0.02);
            blk.wv = TensorT<S>::randn({cfg_.dim, cfg_.dim}, next(), 0.0, 0.02);
            blk.wo = TensorT<S>::randn({cfg_.dim, cfg_.dim}, next(), 0.0, 0.02);
            blk.bq = TensorT<S>::zeros({cfg_.dim});
            blk.bk = TensorT<S>::zeros({cfg_.dim});
            blk.bv = TensorT<S>::zeros({cfg_.dim});
            blk.bo = TensorT<S>::zeros({cfg_.dim});
            blk.mlp_w1 = TensorT<S>::randn({cfg_.mlp_ratio * cfg_.dim, cfg_.dim}, next(), 0.0, 0.02);
            blk.mlp_b1 = TensorT<S>::zeros({cfg_.mlp_ratio * cfg_.dim});
            blk.mlp_w2 = TensorT<S>::randn({cfg_.dim, cfg_.mlp_ratio * cfg_.dim}, next(), 0.0, 0.02);
            blk.mlp_b2 = TensorT<S>::zeros({cfg_.dim});
        }
    }

    const TeacherConfig& config() const { return cfg_; }

    std::vector<std::pair<std::string, TensorT<S>>> params() const {
        std::vector<std::pair<std::string, TensorT<S>>> p;
        p.emplace_back("patch.w", patch_w_);
        p.emplace_back("patch.b", patch_b_);
        p.emplace_back("pos", pos_);
        p.emplace_back("mask_token", mask_token_);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& blk = blocks_[i];
            const std::string n = "block" + std::to_string(i);
            p.emplace_back(n + ".ln1_g", blk.ln1_g);
            p.emplace_back(n + ".ln1_b", blk.ln1_b);
            p.emplace_back(n + ".wq", blk.wq);
            p.emplace_back(n + ".wk", blk.wk);
            p.emplace_back(n + ".wv", blk.wv);
            p.emplace_back(n + ".wo", blk.wo);
            p.emplace_back(n + ".bq", blk.bq);
            p.emplace_back(n + ".bk", blk.bk);
            p.emplace_back(n + ".bv", blk.bv);
            p.emplace_back(n + ".bo", blk.bo);
            p.emplace_back(n + ".ln2_g", blk.ln2_g);
            p.emplace_back(n + ".ln2_b", blk.ln2_b);
            p.emplace_back(n + ".mlp_w1", blk.mlp_w1);
            p.emplace_back(n + ".mlp_b1", blk.mlp_b1);
            p.emplace_back(n + ".mlp_w2", blk.mlp_w2);
            p.emplace_back(n + ".mlp_b2", blk.mlp_b2);
        }
        return p;
    }

    // Tokens (T, D) over the full grid, rows L2-normalized. Reads only
    // visible patches; masked slots carry the frozen mask token.
    TensorT<S> encode(const TensorT<S>& image, const MaskGrid& grid) const {
        if (image.rank() != 3 || image.dim(0) != cfg_.in_channels || image.dim(1) != cfg_.image_size ||
            image.dim(2) != cfg_.image_size)
            throw ShapeError("teacher_encode: expected (" + std::to_string(cfg_.in_channels) + "," +
                             std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "), got " +
                             shape_str(image.shape()));
        const std::int64_t tg = cfg_.token_grid();
        const MaskMap tok_map = expand_map(grid, tg, tg);  // errors if patch grid incompatible
        std::vector<std::int64_t> vis;
        for (std::int64_t p = 0; p < tg * tg; ++p)
            if (tok_map.visible[static_cast<std::size_t>(p)]) vis.push_back(p);

        const std::int64_t tv = static_cast<std::int64_t>(vis.size());
        const std::int64_t d = cfg_.dim, pdim = cfg_.patch * cfg_.patch * cfg_.in_channels;
        detail::RowMat<S> x(tv, d);
        if (tv > 0) {
            // Gather visible patch pixels and embed.
            detail::RowMat<S> patches(tv, pdim);
            const std::int64_t hs = cfg_.image_size;
            for (std::int64_t v = 0; v < tv; ++v) {
                const std::int64_t ti = vis[static_cast<std::size_t>(v)] / tg, tj = vis[static_cast<std::size_t>(v)] % tg;
                std::int64_t k = 0;
                for (std::int64_t c = 0; c < cfg_.in_channels; ++c)
                    for (std::int64_t pi = 0; pi < cfg_.patch; ++pi)
                        for (std::int64_t pj = 0; pj < cfg_.patch; ++pj)
                            patches(v, k++) =
                                image.values()[(c * hs + ti * cfg_.patch + pi) * hs + tj * cfg_.patch + pj];
            }
            auto We = detail::to_mat(patch_w_, d, pdim);
            x.noalias() = patches * We.transpose();
            for (std::int64_t v = 0; v < tv; ++v) {
                for (std::int64_t j = 0; j < d; ++j)
                    x(v, j) += patch_b_.values()[j] + pos_.values()[vis[static_cast<std::size_t>(v)] * d + j];
            }
            for (const auto& blk : blocks_) run_block(blk, x);
        }

        // Scatter to the full grid with the frozen mask token, then normalize.
        auto out = TensorT<S>::zeros({tg * tg, d});
        for (std::int64_t p = 0; p < tg * tg; ++p)
            for (std::int64_t j = 0; j < d; ++j) out.values()[p * d + j] = mask_token_.values()[j];
        for (std::int64_t v = 0; v < tv; ++v)
            for (std::int64_t j = 0; j < d; ++j) out.values()[vis[static_cast<std::size_t>(v)] * d + j] = x(v, j);
        NoGradGuard<S> ng;
        return l2_normalize_rows(out);
    }

    // Batch form: images (N,C,H,W) -> tokens (N, T, D).
    TensorT<S> encode_batch(const TensorT<S>& images, const std::vector<MaskGrid>& grids) const {
        if (images.rank() != 4) throw ShapeError("teacher_encode: expected (N,C,H,W), got " + shape_str(images.shape()));
        if (grids.size() != static_cast<std::size_t>(images.dim(0)))
            throw ShapeError("teacher_encode: " + std::to_string(grids.size()) + " grids for batch " +
                             std::to_string(images.dim(0)));
        const std::int64_t n = images.dim(0), chw = images.size() / n;
        auto out = TensorT<S>::zeros({n, cfg_.tokens(), cfg_.dim});
        for (std::int64_t b = 0; b < n; ++b) {
            auto one = TensorT<S>::zeros({images.dim(1), images.dim(2), images.dim(3)});
            std::copy(images.data() + b * chw, images.data() + (b + 1) * chw, one.data());
            auto tok = encode(one, grids[static_cast<std::size_t>(b)]);
            std::copy(tok.data(), tok.data() + tok.size(), out.data() + b * tok.size());
        }
        return out;
    }

   private:
    struct Block {
        TensorT<S> ln1_g, ln1_b, wq, wk, wv, wo, bq, bk, bv, bo, ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    void run_block(const Block& blk, detail::RowMat<S>& x) const {
        const std::int64_t d = cfg_.dim, dh = d / cfg_.heads;
        const Eigen::Index t = x.rows();
        detail::RowMat<S> h = x;
        detail::layernorm_inplace(h, blk.ln1_g, blk.ln1_b);
        detail::RowMat<S> q = h * detail::to_mat(blk.wq, d, d).transpose();
        detail::RowMat<S> k = h * detail::to_mat(blk.wk, d, d).transpose();
        detail::RowMat<S> v = h * detail::to_mat(blk.wv, d, d).transpose();
        q.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(blk.bq.data(), d);
        k.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(blk.bk.data(), d);
        v.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(blk.bv.data(), d);
        detail::RowMat<S> attn_out(t, d);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (std::int64_t hd = 0; hd < cfg_.heads; ++hd) {
            auto qh = q.middleCols(hd * dh, dh);
            auto kh = k.middleCols(hd * dh, dh);
            auto vh = v.middleCols(hd * dh, dh);
            detail::RowMat<S> scores = (qh * kh.transpose()) * static_cast<S>(scale);
            // Stable row softmax.
            for (Eigen::Index i = 0; i < t; ++i) {
                const S m = scores.row(i).maxCoeff();
                double denom = 0.0;
                for (Eigen::Index j = 0; j < t; ++j) denom += std::exp(static_cast<double>(scores(i, j) - m));
                for (Eigen::Index j = 0; j < t; ++j)
                    scores(i, j) = static_cast<S>(std::exp(static_cast<double>(scores(i, j) - m)) / denom);
            }
            attn_out.middleCols(hd * dh, dh).noalias() = scores * vh;
        }
        x.noalias() += (attn_out * detail::to_mat(blk.wo, d, d).transpose());
        x.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(blk.bo.data(), d);

        h = x;
        detail::layernorm_inplace(h, blk.ln2_g, blk.ln2_b);
        detail::RowMat<S> m1 = h * detail::to_mat(blk.mlp_w1, cfg_.mlp_ratio * d, d).transpose();
        m1.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(blk.mlp_b1.data(), cfg_.mlp_ratio * d);
        for (Eigen::Index i = 0; i < m1.rows(); ++i)
            for (Eigen::Index j = 0; j < m1.cols(); ++j) {
                const double xv = static_cast<double>(m1(i, j));
                m1(i, j) = static_cast<S>(0.5 * xv * (1.0 + std::erf(xv / std::sqrt(2.0))));
            }
        x.noalias() += m1 * detail::to_mat(blk.mlp_w2, d, cfg_.mlp_ratio * d).transpose();
        x.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(blk.mlp_b2.data(), d);
    }

    TeacherConfig cfg_;
    TensorT<S> patch_w_, patch_b_, pos_, mask_token_;
    std::vector<Block> blocks_;
};

// Mean over token rows, L2-normalized. Rank-2 (T,D) -> (D); the batched
// rank-3 overload (N,T,D) -> (N,D) stays on the tape for the student side.
template <class S>
TensorT<S> instance_embedding(const TensorT<S>& tokens) {
    if (tokens.rank() == 3) return l2_normalize_rows(mean_dim1(tokens));
    detail::check_rank("instance_embedding", tokens, 2);
    if (tokens.dim(0) == 0) throw ShapeError("instance_embedding: no tokens");
    auto flat = reshape(tokens, {std::int64_t(1), tokens.dim(0), tokens.dim(1)});
    auto emb = l2_normalize_rows(mean_dim1(flat));  // NumericError on zero mean
    return reshape(emb, {tokens.dim(1)});
}

// ---- File-backed teacher: precomputed token exports --------------------

struct TeacherExportInfo {
    std::int64_t instances = 0, tokens = 0, dim = 0, patch = 0;
    bool normalized = true;
    std::string dataset_checksum;
};

template <class S>
void save_teacher_export(const std::string& dir, const TensorT<S>& all_tokens, std::int64_t patch,
                         const std::string& dataset_checksum) {
    if (all_tokens.rank() != 3)
        throw ShapeError("save_teacher_export: expected (instances, tokens, dim), got " +
                         shape_str(all_tokens.shape()));
    std::filesystem::create_directories(dir);
    save_tensor(dir + "/tokens.ntsr", all_tokens);
    nlohmann::json j;
    j["instances"] = all_tokens.dim(0);
    j["tokens"] = all_tokens.dim(1);
    j["dim"] = all_tokens.dim(2);
    j["patch"] = patch;
    j["normalized"] = true;
    j["dataset_checksum"] = dataset_checksum;
    std::ofstream f(dir + "/manifest.json");
    if (!f) throw DataError("cannot write " + dir + "/manifest.json");
    f << j.dump(2) << "\n";
}

template <class S>
class FileTeacherT {
   public:
    // expected_dim < 0 skips the dimension cross-check.
    explicit FileTeacherT(const std::string& dir, std::int64_t expected_dim = -1) {
        std::ifstream f(dir + "/manifest.json");
        if (!f) throw DataError("cannot open " + dir + "/manifest.json");
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad manifest " + dir + "/manifest.json: " + e.what());
        }
        info_.instances = j.at("instances").get<std::int64_t>();
        info_.tokens = j.at("tokens").get<std::int64_t>();
        info_.dim = j.at("dim").get<std::int64_t>();
        info_.patch = j.value("patch", std::int64_t(16));
        info_.normalized = j.value("normalized", true);
        info_.dataset_checksum = j.value("dataset_checksum", std::string());
        if (expected_dim >= 0 && info_.dim != expected_dim)
            throw DataError("teacher export dim " + std::to_string(info_.dim) + " does not match student head dim " +
                            std::to_string(expected_dim));
        data_ = load_tensor<S>(dir + "/tokens.ntsr");
        if (data_.rank() != 3 || data_.dim(0) != info_.instances || data_.dim(1) != info_.tokens ||
            data_.dim(2) != info_.dim)
            throw DataError("teacher export tensor " + shape_str(data_.shape()) + " does not match manifest (" +
                            std::to_string(info_.instances) + "," + std::to_string(info_.tokens) + "," +
                            std::to_string(info_.dim) + ")");
        // Re-assert row normalization: hard error beyond 1e-3, silent fix-up
        // (with a count the caller can surface) below that.
        const std::int64_t rows = info_.instances * info_.tokens, d = info_.dim;
        for (std::int64_t r = 0; r < rows; ++r) {
            double nrm = 0.0;
            for (std::int64_t j2 = 0; j2 < d; ++j2) {
                const double v = static_cast<double>(data_.values()[r * d + j2]);
                nrm += v * v;
            }
            nrm = std::sqrt(nrm);
            if (std::abs(nrm - 1.0) > 1e-3)
                throw DataError("teacher export row " + std::to_string(r) + " has norm " + std::to_string(nrm) +
                                ", beyond 1e-3 of unit");
            if (std::abs(nrm - 1.0) > 1e-6) {
                ++renormalized_;
                for (std::int64_t j2 = 0; j2 < d; ++j2)
                    data_.values()[r * d + j2] = static_cast<S>(static_cast<double>(data_.values()[r * d + j2]) / nrm);
            }
        }
    }

    const TeacherExportInfo& info() const { return info_; }
    std::int64_t renormalized_rows() const { return renormalized_; }

    TensorT<S> tokens_for(std::int64_t index) const {
        if (index < 0 || index >= info_.instances)
            throw DataError("teacher export index " + std::to_string(index) + " out of range [0," +
                            std::to_string(info_.instances) + ")");
        auto out = TensorT<S>::zeros({info_.tokens, info_.dim});
        const std::int64_t stride = info_.tokens * info_.dim;
        std::copy(data_.data() + index * stride, data_.data() + (index + 1) * stride, out.data());
        return out;
    }

    // Batch lookup by dataset indices -> (N, T, D).
    TensorT<S> tokens_for_batch(const std::vector<std::int64_t>& indices) const {
        auto out = TensorT<S>::zeros({static_cast<std::int64_t>(indices.size()), info_.tokens, info_.dim});
        const std::int64_t stride = info_.tokens * info_.dim;
        for (std::size_t i = 0; i < indices.size(); ++i) {
            auto t = tokens_for(indices[i]);
            std::copy(t.data(), t.data() + stride, out.data() + static_cast<std::int64_t>(i) * stride);
        }
        return out;
    }

   private:
    TeacherExportInfo info_;
    TensorT<S> data_;
    std::int64_t renormalized_ = 0;
};

}  // namespace sparsekd
