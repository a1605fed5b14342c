#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "sparsekd/conv.hpp"
#include "sparsekd/masking.hpp"
#include "sparsekd/ops.hpp"
#include "sparsekd/sparse.hpp"
#include "sparsekd/tensor.hpp"

// Sparse-convolution UNet student: stem + 4 encoder stages of residual
// blocks (all sparse ops), decoder with mask embeddings and 1x1 width
// projections, and a strided head that lands on the teacher token grid.

namespace sparsekd {

struct StudentConfig {
    std::int64_t image_size = 64;
    std::int64_t in_channels = 3;
    std::vector<std::int64_t> widths = {32, 64, 128, 256};
    std::int64_t blocks_per_stage = 2;
    std::int64_t head_dim = 64;  // must equal the teacher embedding dim

    void validate() const {
        if (image_size < 32 || image_size % 32 != 0)
            throw ConfigError("StudentConfig: image size " + std::to_string(image_size) + " not divisible by 32");
        if (widths.size() != 4) throw ConfigError("StudentConfig: need 4 stage widths, got " + std::to_string(widths.size()));
        for (auto w : widths)
            if (w < 1) throw ConfigError("StudentConfig: non-positive stage width " + std::to_string(w));
        if (blocks_per_stage < 1) throw ConfigError("StudentConfig: blocks_per_stage must be >= 1");
        if (head_dim < 1) throw ConfigError("StudentConfig: head dim must be >= 1");
        if (in_channels < 1) throw ConfigError("StudentConfig: in_channels must be >= 1");
    }

    std::int64_t grid() const { return image_size / 32; }          // coarsest mask grid
    std::int64_t token_grid() const { return image_size / 16; }    // teacher token grid
    std::int64_t tokens_per_image() const { return token_grid() * token_grid(); }
    // Mask expansion factors every forward pass touches (input .. coarsest).
    static const std::vector<std::int64_t>& mask_factors() {
        static const std::vector<std::int64_t> f = {32, 16, 8, 4, 2, 1};
        return f;
    }
};

enum class ForwardMode {
    Sparse,            // masked sparse encoder + decoder (training path)
    Dense,             // dense ops, no mask: the weight-shared dense twin
    DenseMaskedInput,  // dense ops on a zeroed-out masked image (baseline arm)
    NoUnet             // sparse encoder, decoder skipped (ablation arm)
};

template <class S>
struct StudentOutputT {
    TensorT<S> tokens;  // (N*T, D), rows L2-normalized
    std::int64_t n = 0, t = 0, d = 0;
    std::vector<SparseFeatureMapT<S>> stages;  // F1..F4 when the encoder ran sparse
};

namespace detail {

// Deterministic per-tensor init streams derived from one model seed.
struct InitStream {
    std::uint64_t seed;
    std::uint64_t counter = 0;
    std::uint64_t next() { return mix_seed(seed, 0x1717, counter++); }
};

}  // namespace detail

template <class S>
struct ConvBNT {
    TensorT<S> w, b, gamma, beta, run_mean, run_var;
    std::int64_t stride = 1, pad = 1;

    void init(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride_, std::int64_t pad_,
              detail::InitStream& s) {
        stride = stride_;
        pad = pad_;
        const double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        w = TensorT<S>::randn({cout, cin, k, k}, s.next(), 0.0, std);
        b = TensorT<S>::zeros({cout});
        gamma = TensorT<S>::full({cout}, S(1));
        beta = TensorT<S>::zeros({cout});
        run_mean = TensorT<S>::zeros({cout});
        run_var = TensorT<S>::full({cout}, S(1));
    }

    void reg(const std::string& name, std::vector<std::pair<std::string, TensorT<S>>>& params,
             std::vector<std::pair<std::string, TensorT<S>>>& buffers) {
        params.emplace_back(name + ".w", w);
        params.emplace_back(name + ".b", b);
        params.emplace_back(name + ".bn_g", gamma);
        params.emplace_back(name + ".bn_b", beta);
        buffers.emplace_back(name + ".bn_rm", run_mean);
        buffers.emplace_back(name + ".bn_rv", run_var);
    }

    SparseFeatureMapT<S> sparse_fwd(const SparseFeatureMapT<S>& x, const std::vector<MaskMap>& out_masks,
                                    bool training, bool relu_after = true) {
        auto y = sparse_conv2d(x, w, b, {stride, pad}, out_masks);
        y = sparse_batchnorm(y, gamma, beta, run_mean, run_var, training);
        return relu_after ? sparse_relu(y) : y;
    }

    TensorT<S> dense_fwd(const TensorT<S>& x, bool training, bool relu_after = true) {
        auto y = conv2d(x, w, b, {stride, pad});
        y = batchnorm(y, gamma, beta, run_mean, run_var, training);
        return relu_after ? relu(y) : y;
    }
};

template <class S>
struct ResBlockT {
    ConvBNT<S> c1, c2;

    void init(std::int64_t width, detail::InitStream& s) {
        c1.init(width, width, 3, 1, 1, s);
        c2.init(width, width, 3, 1, 1, s);
    }
    void reg(const std::string& name, std::vector<std::pair<std::string, TensorT<S>>>& p,
             std::vector<std::pair<std::string, TensorT<S>>>& b) {
        c1.reg(name + ".c1", p, b);
        c2.reg(name + ".c2", p, b);
    }
    SparseFeatureMapT<S> sparse_fwd(const SparseFeatureMapT<S>& x, bool training) {
        auto y = c1.sparse_fwd(x, x.masks, training);
        y = c2.sparse_fwd(y, x.masks, training, /*relu_after=*/false);
        return sparse_relu(sparse_add(y, x));
    }
    TensorT<S> dense_fwd(const TensorT<S>& x, bool training) {
        auto y = c1.dense_fwd(x, training);
        y = c2.dense_fwd(y, training, /*relu_after=*/false);
        return relu(add(y, x));
    }
};

template <class S>
class StudentModelT {
   public:
    StudentModelT(StudentConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        detail::InitStream s{seed};
        stem1_.init(cfg_.in_channels, cfg_.widths[0], 4, 2, 1, s);
        stem2_.init(cfg_.widths[0], cfg_.widths[0], 4, 2, 1, s);
        for (int st = 0; st < 4; ++st) {
            if (st > 0) down_[st - 1].init(cfg_.widths[st - 1], cfg_.widths[st], 4, 2, 1, s);
            blocks_[st].resize(static_cast<std::size_t>(cfg_.blocks_per_stage));
            for (auto& blk : blocks_[st]) blk.init(cfg_.widths[st], s);
            memb_[st] = TensorT<S>::randn({cfg_.widths[st]}, s.next(), 0.0, 0.02);
            proj_[st].w = TensorT<S>::randn({cfg_.widths[st], cfg_.widths[st], 1, 1}, s.next(), 0.0,
                                            std::sqrt(2.0 / static_cast<double>(cfg_.widths[st])));
            proj_[st].b = TensorT<S>::zeros({cfg_.widths[st]});
        }
        for (int i = 0; i < 3; ++i) dec_[i].init(cfg_.widths[i + 1], cfg_.widths[i], 3, 1, 1, s);
        const double hstd = std::sqrt(2.0 / static_cast<double>(cfg_.widths[0] * 16));
        head_w_ = TensorT<S>::randn({cfg_.head_dim, cfg_.widths[0], 4, 4}, s.next(), 0.0, hstd);
        head_b_ = TensorT<S>::zeros({cfg_.head_dim});
        nounet_w_ = TensorT<S>::randn({cfg_.head_dim, cfg_.widths[3], 1, 1}, s.next(), 0.0,
                                      std::sqrt(2.0 / static_cast<double>(cfg_.widths[3])));
        nounet_b_ = TensorT<S>::zeros({cfg_.head_dim});
        set_requires_grad(true);  // trainable by default; buffers stay out
    }

    const StudentConfig& config() const { return cfg_; }

    std::vector<std::pair<std::string, TensorT<S>>> params() {
        std::vector<std::pair<std::string, TensorT<S>>> p, b;
        collect(p, b);
        return p;
    }
    std::vector<std::pair<std::string, TensorT<S>>> buffers() {
        std::vector<std::pair<std::string, TensorT<S>>> p, b;
        collect(p, b);
        return b;
    }

    // Parameters actually reachable under a given forward mode. The optimizer
    // registers exactly these so an unused head never trips its
    // missing-gradient check (the full params() list still goes into
    // checkpoints).
    std::vector<std::pair<std::string, TensorT<S>>> params(ForwardMode mode) {
        auto all = params();
        auto dead = [&](const std::string& name) {
            auto is = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
            switch (mode) {
                case ForwardMode::Sparse:
                    return is("nounet.");
                case ForwardMode::Dense:
                case ForwardMode::DenseMaskedInput:
                    // decode_dense never densifies, so membranes are unused.
                    return is("memb") || is("nounet.");
                case ForwardMode::NoUnet:
                    return is("memb1") || is("memb2") || is("memb3") || is("proj1.") || is("proj2.") ||
                           is("proj3.") || is("dec") || is("head.");
            }
            return false;
        };
        all.erase(std::remove_if(all.begin(), all.end(), [&](const auto& kv) { return dead(kv.first); }),
                  all.end());
        return all;
    }

    void set_requires_grad(bool on) {
        for (auto& [n, t] : params()) t.set_requires_grad(on);
    }

    // Per-item visibility maps at one expansion factor.
    static std::vector<MaskMap> maps_at(const std::vector<MaskHierarchy>& hier, std::int64_t factor) {
        std::vector<MaskMap> out;
        out.reserve(hier.size());
        for (const auto& h : hier) out.push_back(h.at_factor(factor));
        return out;
    }

    // Sparse encoder: image (N,Cin,H,W) -> F1..F4.
    std::vector<SparseFeatureMapT<S>> encode(const TensorT<S>& image, const std::vector<MaskHierarchy>& hier,
                                             bool training) {
        check_image(image);
        if (hier.size() != static_cast<std::size_t>(image.dim(0)))
            throw ShapeError("encode: " + std::to_string(hier.size()) + " hierarchies for batch " +
                             std::to_string(image.dim(0)));
        SparseFeatureMapT<S> x;
        x.features = image;
        x.masks = maps_at(hier, 32);
        x.scale = 1;
        x.validate();
        auto y = stem1_.sparse_fwd(x, maps_at(hier, 16), training);
        y = stem2_.sparse_fwd(y, maps_at(hier, 8), training);
        std::vector<SparseFeatureMapT<S>> stages;
        const std::int64_t stage_factor[4] = {8, 4, 2, 1};
        for (int st = 0; st < 4; ++st) {
            if (st > 0) y = down_[st - 1].sparse_fwd(y, maps_at(hier, stage_factor[st]), training);
            for (auto& blk : blocks_[st]) y = blk.sparse_fwd(y, training);
            stages.push_back(y);
        }
        return stages;
    }

    // Dense encoder used by the weight-shared twin; returns stage outputs.
    std::vector<TensorT<S>> encode_dense(const TensorT<S>& image, bool training) {
        check_image(image);
        auto y = stem1_.dense_fwd(image, training);
        y = stem2_.dense_fwd(y, training);
        std::vector<TensorT<S>> stages;
        for (int st = 0; st < 4; ++st) {
            if (st > 0) y = down_[st - 1].dense_fwd(y, training);
            for (auto& blk : blocks_[st]) y = blk.dense_fwd(y, training);
            stages.push_back(y);
        }
        return stages;
    }

    // Decoder recurrence: S4 = proj4(densify(F4,M4)); S_i = D_i(S_{i+1}) + proj_i(densify(F_i,M_i)).
    TensorT<S> decode(const std::vector<SparseFeatureMapT<S>>& stages, bool training) {
        if (stages.size() != 4) throw ShapeError("decode: need 4 stage outputs, got " + std::to_string(stages.size()));
        auto s = conv2d(densify(stages[3], memb_[3]), proj_[3].w, proj_[3].b, {1, 0});
        for (int i = 2; i >= 0; --i) {
            auto up = dec_[i].dense_fwd(upsample_nearest2(s), training);
            auto lateral = conv2d(densify(stages[static_cast<std::size_t>(i)], memb_[static_cast<std::size_t>(i)]),
                                  proj_[static_cast<std::size_t>(i)].w, proj_[static_cast<std::size_t>(i)].b, {1, 0});
            s = add(up, lateral);
        }
        return s;  // (N, widths[0], H/4, W/4)
    }

    // Dense decode for the twin: densify on an all-visible map is identity,
    // so the lateral path is just the projection.
    TensorT<S> decode_dense(const std::vector<TensorT<S>>& stages, bool training) {
        auto s = conv2d(stages[3], proj_[3].w, proj_[3].b, {1, 0});
        for (int i = 2; i >= 0; --i) {
            auto up = dec_[i].dense_fwd(upsample_nearest2(s), training);
            auto lateral = conv2d(stages[static_cast<std::size_t>(i)], proj_[static_cast<std::size_t>(i)].w,
                                  proj_[static_cast<std::size_t>(i)].b, {1, 0});
            s = add(up, lateral);
        }
        return s;
    }

    // S1 (N,W0,H/4,W/4) -> L2-normalized tokens (N*T, D) on the H/16 grid.
    TensorT<S> head(const TensorT<S>& s1) {
        if (s1.dim(2) % 4 != 0 || s1.dim(3) % 4 != 0)
            throw ShapeError("head: grid " + std::to_string(s1.dim(2)) + "x" + std::to_string(s1.dim(3)) +
                             " not divisible by head stride 4");
        auto tok = conv2d(s1, head_w_, head_b_, {4, 0});
        return l2_normalize_rows(nchw_to_tokens(tok));
    }

    StudentOutputT<S> forward(const TensorT<S>& image, const std::vector<MaskHierarchy>& hier, ForwardMode mode,
                              bool training) {
        StudentOutputT<S> out;
        out.n = image.dim(0);
        out.d = cfg_.head_dim;
        switch (mode) {
            case ForwardMode::Sparse: {
                out.stages = encode(image, hier, training);
                out.tokens = head(decode(out.stages, training));
                break;
            }
            case ForwardMode::Dense: {
                auto stages = encode_dense(image, training);
                out.tokens = head(decode_dense(stages, training));
                break;
            }
            case ForwardMode::DenseMaskedInput: {
                // Zero out masked pixels, then run everything dense: the
                // "directly feed the masked image" baseline.
                auto masked = TensorT<S>::zeros(image.shape());
                const auto maps = maps_at(hier, 32);
                const std::int64_t chw = image.size() / image.dim(0);
                for (std::int64_t b = 0; b < image.dim(0); ++b) {
                    auto one = TensorT<S>::zeros({image.dim(1), image.dim(2), image.dim(3)});
                    std::copy(image.data() + b * chw, image.data() + (b + 1) * chw, one.data());
                    auto m = apply_mask_dense(one, maps[static_cast<std::size_t>(b)]);
                    std::copy(m.data(), m.data() + chw, masked.data() + b * chw);
                }
                auto stages = encode_dense(masked, training);
                out.tokens = head(decode_dense(stages, training));
                break;
            }
            case ForwardMode::NoUnet: {
                out.stages = encode(image, hier, training);
                auto s4 = conv2d(densify(out.stages[3], memb_[3]), proj_[3].w, proj_[3].b, {1, 0});
                auto tok = conv2d(upsample_nearest2(s4), nounet_w_, nounet_b_, {1, 0});
                out.tokens = l2_normalize_rows(nchw_to_tokens(tok));
                break;
            }
        }
        out.t = out.tokens.dim(0) / out.n;
        return out;
    }

    // Frozen-backbone feature for the linear probe: mean-pooled activations
    // from every encoder stage, concatenated (N, sum of widths). Pooling the
    // whole pyramid keeps the probe from favouring whichever single scale a
    // particular head happened to train hardest.
    TensorT<S> dense_feature(const TensorT<S>& image) {
        NoGradGuard<S> ng;
        auto stages = encode_dense(image, /*training=*/false);
        const std::int64_t n = image.dim(0);
        std::int64_t dim = 0;
        for (const auto& s : stages) dim += s.dim(1);
        auto out = TensorT<S>::zeros({n, dim});
        std::int64_t at = 0;
        for (const auto& s : stages) {
            auto pooled = mean_pool_hw(s);  // (n, c)
            const std::int64_t c = pooled.dim(1);
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    out.values()[i * dim + at + j] = pooled.values()[i * c + j];
            at += c;
        }
        return out;
    }

   private:
    void check_image(const TensorT<S>& image) const {
        if (image.rank() != 4 || image.dim(1) != cfg_.in_channels || image.dim(2) != cfg_.image_size ||
            image.dim(3) != cfg_.image_size)
            throw ShapeError("student: expected image (N," + std::to_string(cfg_.in_channels) + "," +
                             std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "), got " +
                             shape_str(image.shape()));
    }

    void collect(std::vector<std::pair<std::string, TensorT<S>>>& p,
                 std::vector<std::pair<std::string, TensorT<S>>>& b) {
        stem1_.reg("stem1", p, b);
        stem2_.reg("stem2", p, b);
        for (int st = 0; st < 4; ++st) {
            const std::string sn = "stage" + std::to_string(st + 1);
            if (st > 0) down_[st - 1].reg(sn + ".down", p, b);
            for (std::size_t bi = 0; bi < blocks_[st].size(); ++bi)
                blocks_[st][bi].reg(sn + ".block" + std::to_string(bi), p, b);
            p.emplace_back("memb" + std::to_string(st + 1), memb_[st]);
            p.emplace_back("proj" + std::to_string(st + 1) + ".w", proj_[st].w);
            p.emplace_back("proj" + std::to_string(st + 1) + ".b", proj_[st].b);
        }
        for (int i = 0; i < 3; ++i) dec_[i].reg("dec" + std::to_string(i + 1), p, b);
        p.emplace_back("head.w", head_w_);
        p.emplace_back("head.b", head_b_);
        p.emplace_back("nounet.w", nounet_w_);
        p.emplace_back("nounet.b", nounet_b_);
    }

    StudentConfig cfg_;
    ConvBNT<S> stem1_, stem2_;
    ConvBNT<S> down_[3];
    std::vector<ResBlockT<S>> blocks_[4];
    TensorT<S> memb_[4];
    struct Proj {
        TensorT<S> w, b;
    } proj_[4];
    ConvBNT<S> dec_[3];
    TensorT<S> head_w_, head_b_, nounet_w_, nounet_b_;
};

}  // namespace sparsekd
