#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mffm/core.hpp"
#include "mffm/rng.hpp"

namespace mffm {

enum class Padding { reflect, periodic };

/// Velocity-network hyperparameters for one cascade level.
struct NetConfig {
    int channels = 1;       // C: solution channels (input is the 2C concat)
    int hidden = 32;        // h: width of the residual trunk
    int n_blocks = 2;       // residual blocks per stack (two stacks total)
    int n_groups = 8;       // group-norm groups
    int time_embed_dim = 64;
    Padding padding = Padding::reflect;

    void validate() const {
        if (channels <= 0) throw config_error("NetConfig: channels must be positive");
        if (hidden < 32 || hidden % 8 != 0) throw config_error("NetConfig: hidden must be >= 32 and a multiple of 8");
        if (n_blocks < 2) throw config_error("NetConfig: n_blocks must be >= 2");
        if (n_groups <= 0 || n_groups > 8 || hidden % n_groups != 0)
            throw config_error("NetConfig: n_groups must be <= 8 and divide hidden");
        if (time_embed_dim <= 0 || time_embed_dim % 2 != 0)
            throw config_error("NetConfig: time_embed_dim must be positive and even");
    }
};

/// [sin(w_k t), cos(w_k t)] with geometrically spaced frequencies from 1 to 1e4.
inline std::vector<double> sinusoidal_time_embedding(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw dimension_error("sinusoidal_time_embedding: dim must be positive and even");
    const int half = dim / 2;
    std::vector<double> out(dim);
    for (int k = 0; k < half; ++k) {
        const double omega = (half == 1) ? 1.0 : std::pow(10.0, 4.0 * k / (half - 1));
        out[k] = std::sin(omega * t);
        out[half + k] = std::cos(omega * t);
    }
    return out;
}

struct ParamInfo {
    std::string name;
    size_t offset = 0;
    size_t size = 0;
    std::vector<uint32_t> dims;
};

/// Flat-parameter layout. Blocks are indexed 0..2*n_blocks-1: the first
/// n_blocks form stack one, the rest stack two (which receives additive
/// skips from stack one).
struct ParamLayout {
    struct Block {
        size_t gn1_scale, gn1_shift, conv1_w, conv1_b;
        size_t film_w, film_b;
        size_t gn2_scale, gn2_shift, conv2_w, conv2_b;
    };

    size_t lift_w = 0, lift_b = 0;
    std::vector<Block> blocks;
    size_t tm1_w = 0, tm1_b = 0, tm2_w = 0, tm2_b = 0;
    size_t hgn_scale = 0, hgn_shift = 0, head_w = 0, head_b = 0;
    size_t total = 0;
    std::vector<ParamInfo> infos;

    static ParamLayout build(const NetConfig& cfg) {
        cfg.validate();
        const int C = cfg.channels, h = cfg.hidden, Dt = cfg.time_embed_dim;
        const uint32_t uC = C, uh = h, uDt = Dt;
        ParamLayout L;
        size_t off = 0;
        auto reg = [&](const std::string& name, std::vector<uint32_t> dims) {
            size_t n = 1;
            for (uint32_t d : dims) n *= d;
            L.infos.push_back({name, off, n, std::move(dims)});
            size_t at = off;
            off += n;
            return at;
        };
        L.lift_w = reg("lift_w", {uh, 2 * uC, 3, 3});
        L.lift_b = reg("lift_b", {uh});
        L.blocks.resize(2 * cfg.n_blocks);
        for (int b = 0; b < 2 * cfg.n_blocks; ++b) {
            const std::string p = "block_" + std::to_string(b) + "/";
            auto& B = L.blocks[b];
            B.gn1_scale = reg(p + "gn1_scale", {uh});
            B.gn1_shift = reg(p + "gn1_shift", {uh});
            B.conv1_w = reg(p + "conv1_w", {uh, uh, 3, 3});
            B.conv1_b = reg(p + "conv1_b", {uh});
            B.film_w = reg(p + "film_w", {2 * uh, uDt});
            B.film_b = reg(p + "film_b", {2 * uh});
            B.gn2_scale = reg(p + "gn2_scale", {uh});
            B.gn2_shift = reg(p + "gn2_shift", {uh});
            B.conv2_w = reg(p + "conv2_w", {uh, uh, 3, 3});
            B.conv2_b = reg(p + "conv2_b", {uh});
        }
        L.tm1_w = reg("time_mlp1_w", {uDt, uDt});
        L.tm1_b = reg("time_mlp1_b", {uDt});
        L.tm2_w = reg("time_mlp2_w", {uDt, uDt});
        L.tm2_b = reg("time_mlp2_b", {uDt});
        L.hgn_scale = reg("head_gn_scale", {uh});
        L.hgn_shift = reg("head_gn_shift", {uh});
        L.head_w = reg("head_w", {uC, uh});
        L.head_b = reg("head_b", {uC});
        L.total = off;
        return L;
    }
};

/// Per-level velocity network parameters (flat storage plus layout).
struct NetParams {
    NetConfig cfg;
    ParamLayout layout;
    std::vector<double> data;

    NetParams() = default;
    explicit NetParams(const NetConfig& c) : cfg(c), layout(ParamLayout::build(c)), data(layout.total, 0.0) {}

    double* at(size_t off) { return data.data() + off; }
    const double* at(size_t off) const { return data.data() + off; }
};

/// Seeded initialization: Kaiming-style convolution weights, identity group
/// norms, zero FiLM projections, and an exactly zero 1x1 head so the fresh
/// network outputs zero for every input.
inline NetParams init_net_params(const NetConfig& cfg, uint64_t seed) {
    NetParams p(cfg);
    RngStream rng(seed);
    auto fill_normal = [&](size_t off, size_t n, double std_dev) {
        for (size_t i = 0; i < n; ++i) p.data[off + i] = std_dev * rng.normal();
    };
    auto fill_const = [&](size_t off, size_t n, double v) {
        for (size_t i = 0; i < n; ++i) p.data[off + i] = v;
    };
    const auto& L = p.layout;
    const int C = cfg.channels, h = cfg.hidden, Dt = cfg.time_embed_dim;
    fill_normal(L.lift_w, static_cast<size_t>(h) * 2 * C * 9, std::sqrt(2.0 / (2.0 * C * 9)));
    for (const auto& B : L.blocks) {
        fill_const(B.gn1_scale, h, 1.0);
        fill_const(B.gn2_scale, h, 1.0);
        fill_normal(B.conv1_w, static_cast<size_t>(h) * h * 9, std::sqrt(2.0 / (h * 9.0)));
        fill_normal(B.conv2_w, static_cast<size_t>(h) * h * 9, std::sqrt(2.0 / (h * 9.0)));
        // film_w / film_b stay zero: FiLM starts as the identity
    }
    fill_normal(L.tm1_w, static_cast<size_t>(Dt) * Dt, std::sqrt(1.0 / Dt));
    fill_normal(L.tm2_w, static_cast<size_t>(Dt) * Dt, std::sqrt(1.0 / Dt));
    fill_const(L.hgn_scale, h, 1.0);
    // head_w / head_b stay exactly zero
    return p;
}

namespace detail {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

constexpr double kGnEps = 1e-5;

}  // namespace detail

/// Activation caches and scratch buffers for one forward/backward pass at a
/// fixed spatial size. Reused across samples; not thread-safe, use one per
/// worker thread.
struct NetWorkspace {
    int H = 0, W = 0;
    Padding pad = Padding::reflect;
    int C = 0, h = 0, n_blocks2 = 0, G = 0, Dt = 0;

    std::vector<int> tap;  // [9 * HW] source pixel per (tap, pixel)

    std::vector<double> temb, tm1_pre, tm1_act, tfeat;
    std::vector<double> input_cat;  // 2C x HW
    std::vector<double> lift_out;   // h x HW

    struct BlockCache {
        std::vector<double> in, gn1_out, silu1_out, conv1_out, film_out, gn2_out, silu2_out, out;
        std::vector<double> gn1_mean, gn1_istd, gn2_mean, gn2_istd;  // per group
        std::vector<double> gamma, beta;                             // per channel
    };
    std::vector<BlockCache> blocks;

    std::vector<double> hgn_out, hsilu_out, hgn_mean, hgn_istd;
    std::vector<double> output;  // C x HW

    // scratch
    std::vector<double> col, dcol, dcur, dtmp, dgb, dtfeat, dtm_scratch;

    void prepare(const NetConfig& cfg, int height, int width) {
        const size_t HW = static_cast<size_t>(height) * width;
        const bool same = (H == height && W == width && pad == cfg.padding && C == cfg.channels &&
                           h == cfg.hidden && n_blocks2 == 2 * cfg.n_blocks && G == cfg.n_groups &&
                           Dt == cfg.time_embed_dim);
        H = height;
        W = width;
        pad = cfg.padding;
        C = cfg.channels;
        h = cfg.hidden;
        n_blocks2 = 2 * cfg.n_blocks;
        G = cfg.n_groups;
        Dt = cfg.time_embed_dim;
        if (same) return;

        build_tap_table();
        temb.resize(Dt);
        tm1_pre.resize(Dt);
        tm1_act.resize(Dt);
        tfeat.resize(Dt);
        input_cat.resize(2 * static_cast<size_t>(C) * HW);
        lift_out.resize(static_cast<size_t>(h) * HW);
        blocks.assign(n_blocks2, {});
        for (auto& b : blocks) {
            for (auto* v : {&b.in, &b.gn1_out, &b.silu1_out, &b.conv1_out, &b.film_out, &b.gn2_out,
                            &b.silu2_out, &b.out})
                v->resize(static_cast<size_t>(h) * HW);
            b.gn1_mean.resize(G);
            b.gn1_istd.resize(G);
            b.gn2_mean.resize(G);
            b.gn2_istd.resize(G);
            b.gamma.resize(h);
            b.beta.resize(h);
        }
        hgn_out.resize(static_cast<size_t>(h) * HW);
        hsilu_out.resize(static_cast<size_t>(h) * HW);
        hgn_mean.resize(G);
        hgn_istd.resize(G);
        output.resize(static_cast<size_t>(C) * HW);

        const size_t kmax = 9 * static_cast<size_t>(std::max(2 * C, h));
        col.resize(kmax * HW);
        dcol.resize(kmax * HW);
        dcur.resize(static_cast<size_t>(h) * HW);
        dtmp.resize(static_cast<size_t>(h) * HW);
        dgb.resize(2 * static_cast<size_t>(h));
        dtfeat.resize(Dt);
        dtm_scratch.resize(Dt);
    }

private:
    void build_tap_table() {
        const size_t HW = static_cast<size_t>(H) * W;
        tap.resize(9 * HW);
        auto wrap = [this](int i, int n) {
            if (pad == Padding::periodic) return (i % n + n) % n;
            // reflect-101
            while (i < 0 || i >= n) {
                if (i < 0) i = -i;
                if (i >= n) i = 2 * (n - 1) - i;
            }
            return i;
        };
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                const int t = (dy + 1) * 3 + (dx + 1);
                int* dst = tap.data() + static_cast<size_t>(t) * HW;
                for (int y = 0; y < H; ++y) {
                    const int sy = wrap(y + dy, H);
                    for (int x = 0; x < W; ++x) dst[static_cast<size_t>(y) * W + x] = sy * W + wrap(x + dx, W);
                }
            }
    }
};

namespace detail {

inline void im2col(const double* in, int ch, size_t HW, const std::vector<int>& tap, double* col) {
    for (int c = 0; c < ch; ++c) {
        const double* src = in + static_cast<size_t>(c) * HW;
        for (int t = 0; t < 9; ++t) {
            const int* idx = tap.data() + static_cast<size_t>(t) * HW;
            double* dst = col + (static_cast<size_t>(c) * 9 + t) * HW;
            for (size_t p = 0; p < HW; ++p) dst[p] = src[idx[p]];
        }
    }
}

inline void col2im_add(const double* dcol, int ch, size_t HW, const std::vector<int>& tap, double* din) {
    for (int c = 0; c < ch; ++c) {
        double* dst = din + static_cast<size_t>(c) * HW;
        for (int t = 0; t < 9; ++t) {
            const int* idx = tap.data() + static_cast<size_t>(t) * HW;
            const double* src = dcol + (static_cast<size_t>(c) * 9 + t) * HW;
            for (size_t p = 0; p < HW; ++p) dst[idx[p]] += src[p];
        }
    }
}

/// out[h_out x HW] = W[h_out x 9ch] * im2col(in) + b
inline void conv3x3_forward(const double* in, int ch_in, int ch_out, size_t HW, const std::vector<int>& tap,
                            const double* w, const double* b, double* col, double* out) {
    im2col(in, ch_in, HW, tap, col);
    ConstMatMap W(w, ch_out, static_cast<size_t>(ch_in) * 9);
    ConstMatMap Col(col, static_cast<size_t>(ch_in) * 9, HW);
    MatMap Out(out, ch_out, HW);
    Out.noalias() = W * Col;
    for (int c = 0; c < ch_out; ++c) {
        double* row = out + static_cast<size_t>(c) * HW;
        const double bias = b[c];
        for (size_t p = 0; p < HW; ++p) row[p] += bias;
    }
}

/// Accumulates dW/db and optionally produces din (zeroed then scattered).
inline void conv3x3_backward(const double* in, const double* dout, int ch_in, int ch_out, size_t HW,
                             const std::vector<int>& tap, const double* w, double* dw, double* db,
                             double* col, double* dcol, double* din) {
    im2col(in, ch_in, HW, tap, col);
    const size_t K = static_cast<size_t>(ch_in) * 9;
    ConstMatMap Dout(dout, ch_out, HW);
    ConstMatMap Col(col, K, HW);
    MatMap Dw(dw, ch_out, K);
    Dw.noalias() += Dout * Col.transpose();
    for (int c = 0; c < ch_out; ++c) {
        const double* row = dout + static_cast<size_t>(c) * HW;
        double s = 0.0;
        for (size_t p = 0; p < HW; ++p) s += row[p];
        db[c] += s;
    }
    if (din) {
        ConstMatMap W(w, ch_out, K);
        MatMap Dcol(dcol, K, HW);
        Dcol.noalias() = W.transpose() * Dout;
        std::fill(din, din + static_cast<size_t>(ch_in) * HW, 0.0);
        col2im_add(dcol, ch_in, HW, tap, din);
    }
}

inline void group_norm_forward(const double* in, int h, int G, size_t HW, const double* scale,
                               const double* shift, double* out, double* mean, double* istd) {
    const int gs = h / G;
    const double inv_m = 1.0 / (static_cast<double>(gs) * HW);
    for (int g = 0; g < G; ++g) {
        const double* base = in + static_cast<size_t>(g) * gs * HW;
        double mu = 0.0;
        for (size_t i = 0; i < static_cast<size_t>(gs) * HW; ++i) mu += base[i];
        mu *= inv_m;
        double var = 0.0;
        for (size_t i = 0; i < static_cast<size_t>(gs) * HW; ++i) {
            const double d = base[i] - mu;
            var += d * d;
        }
        var *= inv_m;
        const double is = 1.0 / std::sqrt(var + kGnEps);
        mean[g] = mu;
        istd[g] = is;
        for (int cc = 0; cc < gs; ++cc) {
            const int c = g * gs + cc;
            const double* src = in + static_cast<size_t>(c) * HW;
            double* dst = out + static_cast<size_t>(c) * HW;
            const double a = scale[c] * is, b = shift[c] - scale[c] * is * mu;
            for (size_t p = 0; p < HW; ++p) dst[p] = a * src[p] + b;
        }
    }
}

inline void group_norm_backward(const double* in, const double* dout, int h, int G, size_t HW,
                                const double* scale, const double* mean, const double* istd,
                                double* dscale, double* dshift, double* din) {
    const int gs = h / G;
    const double inv_m = 1.0 / (static_cast<double>(gs) * HW);
    for (int g = 0; g < G; ++g) {
        const double mu = mean[g], is = istd[g];
        // per-channel affine grads and the two group-level reductions
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int cc = 0; cc < gs; ++cc) {
            const int c = g * gs + cc;
            const double* x = in + static_cast<size_t>(c) * HW;
            const double* dy = dout + static_cast<size_t>(c) * HW;
            double ds = 0.0, db = 0.0, s1 = 0.0, s2 = 0.0;
            for (size_t p = 0; p < HW; ++p) {
                const double xhat = (x[p] - mu) * is;
                ds += dy[p] * xhat;
                db += dy[p];
                const double dxhat = dy[p] * scale[c];
                s1 += dxhat;
                s2 += dxhat * xhat;
            }
            dscale[c] += ds;
            dshift[c] += db;
            sum_dxhat += s1;
            sum_dxhat_xhat += s2;
        }
        const double m1 = sum_dxhat * inv_m, m2 = sum_dxhat_xhat * inv_m;
        for (int cc = 0; cc < gs; ++cc) {
            const int c = g * gs + cc;
            const double* x = in + static_cast<size_t>(c) * HW;
            const double* dy = dout + static_cast<size_t>(c) * HW;
            double* dx = din + static_cast<size_t>(c) * HW;
            for (size_t p = 0; p < HW; ++p) {
                const double xhat = (x[p] - mu) * is;
                dx[p] = is * (dy[p] * scale[c] - m1 - xhat * m2);
            }
        }
    }
}

}  // namespace detail

/// Forward evaluation. delta_t and conditioning are C x HW planes of the
/// same spatial size; the result lands in ws.output and the workspace
/// retains everything net_backward needs.
inline void net_forward(const NetParams& p, const double* delta_t, double t, const double* conditioning,
                        int H, int W, NetWorkspace& ws, std::atomic<long>* eval_counter = nullptr) {
    const NetConfig& cfg = p.cfg;
    ws.prepare(cfg, H, W);
    const size_t HW = static_cast<size_t>(H) * W;
    const int C = cfg.channels, h = cfg.hidden, n = cfg.n_blocks, G = cfg.n_groups, Dt = cfg.time_embed_dim;
    const auto& L = p.layout;
    if (eval_counter) eval_counter->fetch_add(1, std::memory_order_relaxed);

    // time conditioning vector
    {
        auto emb = sinusoidal_time_embedding(t, Dt);
        std::copy(emb.begin(), emb.end(), ws.temb.begin());
        detail::ConstMatMap A1(p.at(L.tm1_w), Dt, Dt), A2(p.at(L.tm2_w), Dt, Dt);
        Eigen::Map<Eigen::VectorXd> pre(ws.tm1_pre.data(), Dt), act(ws.tm1_act.data(), Dt),
            feat(ws.tfeat.data(), Dt);
        Eigen::Map<const Eigen::VectorXd> e(ws.temb.data(), Dt), b1(p.at(L.tm1_b), Dt), b2(p.at(L.tm2_b), Dt);
        pre.noalias() = A1 * e + b1;
        for (int i = 0; i < Dt; ++i) ws.tm1_act[i] = detail::silu(ws.tm1_pre[i]);
        feat.noalias() = A2 * act + b2;
    }

    // lift over the channel concatenation (delta_t, conditioning)
    std::copy(delta_t, delta_t + static_cast<size_t>(C) * HW, ws.input_cat.begin());
    std::copy(conditioning, conditioning + static_cast<size_t>(C) * HW,
              ws.input_cat.begin() + static_cast<size_t>(C) * HW);
    detail::conv3x3_forward(ws.input_cat.data(), 2 * C, h, HW, ws.tap, p.at(L.lift_w), p.at(L.lift_b),
                            ws.col.data(), ws.lift_out.data());

    const double* cur = ws.lift_out.data();
    for (int b = 0; b < 2 * n; ++b) {
        auto& Bc = ws.blocks[b];
        const auto& Bp = L.blocks[b];

        // stack two receives an additive skip from its stack-one partner
        if (b >= n) {
            const auto& partner = ws.blocks[2 * n - 1 - b];
            for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) Bc.in[i] = cur[i] + partner.out[i];
        } else {
            std::copy(cur, cur + static_cast<size_t>(h) * HW, Bc.in.begin());
        }

        detail::group_norm_forward(Bc.in.data(), h, G, HW, p.at(Bp.gn1_scale), p.at(Bp.gn1_shift),
                                   Bc.gn1_out.data(), Bc.gn1_mean.data(), Bc.gn1_istd.data());
        for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) Bc.silu1_out[i] = detail::silu(Bc.gn1_out[i]);
        detail::conv3x3_forward(Bc.silu1_out.data(), h, h, HW, ws.tap, p.at(Bp.conv1_w), p.at(Bp.conv1_b),
                                ws.col.data(), Bc.conv1_out.data());

        // FiLM from the time feature vector
        {
            detail::ConstMatMap Wf(p.at(Bp.film_w), 2 * h, Dt);
            Eigen::Map<Eigen::VectorXd> gb(ws.dgb.data(), 2 * h);
            Eigen::Map<const Eigen::VectorXd> feat(ws.tfeat.data(), Dt), bf(p.at(Bp.film_b), 2 * h);
            gb.noalias() = Wf * feat + bf;
            for (int c = 0; c < h; ++c) {
                Bc.gamma[c] = ws.dgb[c];
                Bc.beta[c] = ws.dgb[h + c];
                const double a = 1.0 + Bc.gamma[c], bb = Bc.beta[c];
                const double* src = Bc.conv1_out.data() + static_cast<size_t>(c) * HW;
                double* dst = Bc.film_out.data() + static_cast<size_t>(c) * HW;
                for (size_t pix = 0; pix < HW; ++pix) dst[pix] = a * src[pix] + bb;
            }
        }

        detail::group_norm_forward(Bc.film_out.data(), h, G, HW, p.at(Bp.gn2_scale), p.at(Bp.gn2_shift),
                                   Bc.gn2_out.data(), Bc.gn2_mean.data(), Bc.gn2_istd.data());
        for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) Bc.silu2_out[i] = detail::silu(Bc.gn2_out[i]);
        detail::conv3x3_forward(Bc.silu2_out.data(), h, h, HW, ws.tap, p.at(Bp.conv2_w), p.at(Bp.conv2_b),
                                ws.col.data(), Bc.out.data());
        for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) Bc.out[i] += Bc.in[i];
        cur = Bc.out.data();
    }

    // head: group norm, SiLU, zero-initialized 1x1 projection
    detail::group_norm_forward(cur, h, G, HW, p.at(L.hgn_scale), p.at(L.hgn_shift), ws.hgn_out.data(),
                               ws.hgn_mean.data(), ws.hgn_istd.data());
    for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) ws.hsilu_out[i] = detail::silu(ws.hgn_out[i]);
    {
        detail::ConstMatMap Wh(p.at(L.head_w), C, h);
        detail::ConstMatMap X(ws.hsilu_out.data(), h, HW);
        detail::MatMap Out(ws.output.data(), C, HW);
        Out.noalias() = Wh * X;
        for (int c = 0; c < C; ++c) {
            double* row = ws.output.data() + static_cast<size_t>(c) * HW;
            const double bias = p.at(L.head_b)[c];
            for (size_t pix = 0; pix < HW; ++pix) row[pix] += bias;
        }
    }
}

/// Reverse-mode pass for the cached forward in ws. Accumulates parameter
/// gradients into grad (congruent flat vector) and, when requested, writes
/// input gradients for the delta_t and conditioning planes.
inline void net_backward(const NetParams& p, NetWorkspace& ws, const double* d_output, double* grad,
                         double* d_delta_t = nullptr, double* d_conditioning = nullptr) {
    const NetConfig& cfg = p.cfg;
    const size_t HW = static_cast<size_t>(ws.H) * ws.W;
    const int C = cfg.channels, h = cfg.hidden, n = cfg.n_blocks, G = cfg.n_groups, Dt = cfg.time_embed_dim;
    const auto& L = p.layout;

    std::fill(ws.dtfeat.begin(), ws.dtfeat.end(), 0.0);

    // head 1x1
    {
        detail::ConstMatMap Dout(d_output, C, HW);
        detail::ConstMatMap X(ws.hsilu_out.data(), h, HW);
        detail::MatMap Dw(grad + L.head_w, C, h);
        Dw.noalias() += Dout * X.transpose();
        for (int c = 0; c < C; ++c) {
            const double* row = d_output + static_cast<size_t>(c) * HW;
            double s = 0.0;
            for (size_t pix = 0; pix < HW; ++pix) s += row[pix];
            grad[L.head_b + c] += s;
        }
        detail::ConstMatMap Wh(p.at(L.head_w), C, h);
        detail::MatMap Dx(ws.dtmp.data(), h, HW);
        Dx.noalias() = Wh.transpose() * Dout;
    }
    for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i)
        ws.dtmp[i] *= detail::silu_grad(ws.hgn_out[i]);
    detail::group_norm_backward(ws.blocks[2 * n - 1].out.data(), ws.dtmp.data(), h, G, HW, p.at(L.hgn_scale),
                                ws.hgn_mean.data(), ws.hgn_istd.data(), grad + L.hgn_scale, grad + L.hgn_shift,
                                ws.dcur.data());
    // ws.dcur now holds d(last block output)

    std::vector<std::vector<double>> skip_grads(n);  // deferred grads into stack-one outputs

    for (int b = 2 * n - 1; b >= 0; --b) {
        auto& Bc = ws.blocks[b];
        const auto& Bp = L.blocks[b];

        if (b < n && !skip_grads[b].empty())
            for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) ws.dcur[i] += skip_grads[b][i];

        // out = in + conv2(silu2(gn2(film(conv1(silu1(gn1(in)))))))
        // conv2
        detail::conv3x3_backward(Bc.silu2_out.data(), ws.dcur.data(), h, h, HW, ws.tap, p.at(Bp.conv2_w),
                                 grad + Bp.conv2_w, grad + Bp.conv2_b, ws.col.data(), ws.dcol.data(),
                                 ws.dtmp.data());
        for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i)
            ws.dtmp[i] *= detail::silu_grad(Bc.gn2_out[i]);
        // gn2 (input was film_out); write result over dtmp via scratch reuse
        {
            std::vector<double>& dfilm = Bc.silu2_out;  // reuse cache no longer needed as scratch
            detail::group_norm_backward(Bc.film_out.data(), ws.dtmp.data(), h, G, HW, p.at(Bp.gn2_scale),
                                        Bc.gn2_mean.data(), Bc.gn2_istd.data(), grad + Bp.gn2_scale,
                                        grad + Bp.gn2_shift, dfilm.data());
            // FiLM: film_out = conv1_out * (1 + gamma_c) + beta_c
            for (int c = 0; c < h; ++c) {
                const double* dy = dfilm.data() + static_cast<size_t>(c) * HW;
                const double* x = Bc.conv1_out.data() + static_cast<size_t>(c) * HW;
                double dg = 0.0, db = 0.0;
                for (size_t pix = 0; pix < HW; ++pix) {
                    dg += dy[pix] * x[pix];
                    db += dy[pix];
                }
                ws.dgb[c] = dg;
                ws.dgb[h + c] = db;
            }
            {
                detail::ConstMatMap Wf(p.at(Bp.film_w), 2 * h, Dt);
                detail::MatMap DWf(grad + Bp.film_w, 2 * h, Dt);
                Eigen::Map<const Eigen::VectorXd> dgb(ws.dgb.data(), 2 * h), feat(ws.tfeat.data(), Dt);
                DWf.noalias() += dgb * feat.transpose();
                for (int i = 0; i < 2 * h; ++i) grad[Bp.film_b + i] += ws.dgb[i];
                Eigen::Map<Eigen::VectorXd> dfeat(ws.dtfeat.data(), Dt);
                dfeat.noalias() += Wf.transpose() * dgb;
            }
            for (int c = 0; c < h; ++c) {
                const double a = 1.0 + Bc.gamma[c];
                double* d = dfilm.data() + static_cast<size_t>(c) * HW;
                for (size_t pix = 0; pix < HW; ++pix) d[pix] *= a;
            }
            // conv1
            detail::conv3x3_backward(Bc.silu1_out.data(), dfilm.data(), h, h, HW, ws.tap, p.at(Bp.conv1_w),
                                     grad + Bp.conv1_w, grad + Bp.conv1_b, ws.col.data(), ws.dcol.data(),
                                     ws.dtmp.data());
        }
        for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i)
            ws.dtmp[i] *= detail::silu_grad(Bc.gn1_out[i]);
        {
            std::vector<double>& din_chain = Bc.silu1_out;  // scratch reuse
            detail::group_norm_backward(Bc.in.data(), ws.dtmp.data(), h, G, HW, p.at(Bp.gn1_scale),
                                        Bc.gn1_mean.data(), Bc.gn1_istd.data(), grad + Bp.gn1_scale,
                                        grad + Bp.gn1_shift, din_chain.data());
            // residual add: d(in) = d(out) + chain
            for (size_t i = 0; i < static_cast<size_t>(h) * HW; ++i) ws.dcur[i] += din_chain[i];
        }

        if (b >= n) {
            // block input was (previous output + skip from stack one)
            auto& sg = skip_grads[2 * n - 1 - b];
            sg.assign(ws.dcur.begin(), ws.dcur.begin() + static_cast<size_t>(h) * HW);
        }
        // ws.dcur flows to the previous block's output (or the lift)
    }

    // lift conv
    {
        const bool need_input = d_delta_t || d_conditioning;
        double* din = need_input ? ws.input_cat.data() : nullptr;  // reuse as scratch for d(input)
        // keep a copy of the concatenated input for dW before overwriting
        // (conv3x3_backward reads the input through im2col first, then fills din)
        detail::conv3x3_backward(ws.input_cat.data(), ws.dcur.data(), 2 * C, h, HW, ws.tap, p.at(L.lift_w),
                                 grad + L.lift_w, grad + L.lift_b, ws.col.data(), ws.dcol.data(), din);
        if (d_delta_t)
            std::copy(ws.input_cat.begin(), ws.input_cat.begin() + static_cast<size_t>(C) * HW, d_delta_t);
        if (d_conditioning)
            std::copy(ws.input_cat.begin() + static_cast<size_t>(C) * HW,
                      ws.input_cat.begin() + 2 * static_cast<size_t>(C) * HW, d_conditioning);
    }

    // time MLP
    {
        detail::ConstMatMap A2(p.at(L.tm2_w), Dt, Dt);
        detail::MatMap DA2(grad + L.tm2_w, Dt, Dt);
        Eigen::Map<const Eigen::VectorXd> dfeat(ws.dtfeat.data(), Dt), act(ws.tm1_act.data(), Dt);
        DA2.noalias() += dfeat * act.transpose();
        for (int i = 0; i < Dt; ++i) grad[L.tm2_b + i] += ws.dtfeat[i];
        Eigen::Map<Eigen::VectorXd> dact(ws.dtm_scratch.data(), Dt);
        dact.noalias() = A2.transpose() * dfeat;
        for (int i = 0; i < Dt; ++i) ws.dtm_scratch[i] *= detail::silu_grad(ws.tm1_pre[i]);
        detail::MatMap DA1(grad + L.tm1_w, Dt, Dt);
        Eigen::Map<const Eigen::VectorXd> dpre(ws.dtm_scratch.data(), Dt), e(ws.temb.data(), Dt);
        DA1.noalias() += dpre * e.transpose();
        for (int i = 0; i < Dt; ++i) grad[L.tm1_b + i] += ws.dtm_scratch[i];
    }
}

/// Field-level forward wrapper (allocates its own workspace).
inline Field net_forward(const NetParams& p, const Field& delta_t, double t, const Field& conditioning,
                         std::atomic<long>* eval_counter = nullptr) {
    require_same_shape(delta_t, conditioning, "net_forward");
    if (delta_t.channels != p.cfg.channels) throw dimension_error("net_forward: channel count mismatch");
    NetWorkspace ws;
    net_forward(p, delta_t.values.data(), t, conditioning.values.data(), delta_t.height, delta_t.width, ws,
                eval_counter);
    Field out(p.cfg.channels, delta_t.height, delta_t.width);
    std::copy(ws.output.begin(), ws.output.end(), out.values.begin());
    return out;
}

}  // namespace mffm
