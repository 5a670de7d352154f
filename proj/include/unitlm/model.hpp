#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "unitlm/error.hpp"
#include "unitlm/rng.hpp"
#include "unitlm/tensor.hpp"
#include "unitlm/vocab.hpp"

namespace unitlm {

struct ModelConfig {
    int layers = 2;
    int hidden = 64;
    int heads = 2;
    int vocab = 0;
    int maxlen = 128;
    int mlp_mult = 4;
    bool tie_output = true;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        require(layers >= 1 && hidden >= 1 && heads >= 1 && vocab >= 1 && maxlen >= 1 && mlp_mult >= 1,
                ErrorCode::invalid_argument, "model dimensions must be positive");
        require(hidden % heads == 0, ErrorCode::invalid_argument,
                "hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
    }
};

inline int64_t count_params(const ModelConfig& c) {
    c.validate();
    int64_t F = c.hidden, V = c.vocab, L = c.layers, M = c.mlp_mult;
    int64_t embed = V * F + (c.tie_output ? 0 : V * F) + static_cast<int64_t>(c.maxlen) * F;
    int64_t attn = 4 * (F * F + F);
    int64_t mlp = 2 * M * F * F + M * F + F;
    int64_t norms = 4 * F;
    return embed + L * (attn + mlp + norms) + 2 * F;
}

enum class ParamKind { weight, bias, gain };

template <typename T>
struct LayerParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w_in, b_in, w_out, b_out;
};

// All weight matrices are stored out_dim x in_dim, so y = W x walks rows.
// Tensor order within visit() is the checkpoint order.
template <typename T>
struct ModelParams {
    Tensor<T> tok_embed; // V x F
    Tensor<T> pos_embed; // maxlen x F
    std::vector<LayerParams<T>> layers;
    Tensor<T> lnf_g, lnf_b;
    Tensor<T> out_proj; // V x F, present only when untied

    static ModelParams shaped(const ModelConfig& c) {
        c.validate();
        int F = c.hidden, MF = c.mlp_mult * c.hidden;
        ModelParams p;
        p.tok_embed = Tensor<T>::mat(c.vocab, F);
        p.pos_embed = Tensor<T>::mat(c.maxlen, F);
        p.layers.resize(c.layers);
        for (auto& l : p.layers) {
            l.ln1_g = Tensor<T>::vec(F);
            l.ln1_b = Tensor<T>::vec(F);
            l.wq = Tensor<T>::mat(F, F);
            l.bq = Tensor<T>::vec(F);
            l.wk = Tensor<T>::mat(F, F);
            l.bk = Tensor<T>::vec(F);
            l.wv = Tensor<T>::mat(F, F);
            l.bv = Tensor<T>::vec(F);
            l.wo = Tensor<T>::mat(F, F);
            l.bo = Tensor<T>::vec(F);
            l.ln2_g = Tensor<T>::vec(F);
            l.ln2_b = Tensor<T>::vec(F);
            l.w_in = Tensor<T>::mat(MF, F);
            l.b_in = Tensor<T>::vec(MF);
            l.w_out = Tensor<T>::mat(F, MF);
            l.b_out = Tensor<T>::vec(F);
        }
        p.lnf_g = Tensor<T>::vec(F);
        p.lnf_b = Tensor<T>::vec(F);
        if (!c.tie_output) {
            p.out_proj = Tensor<T>::mat(c.vocab, F);
        }
        return p;
    }

    const Tensor<T>& output_matrix() const { return out_proj.size() ? out_proj : tok_embed; }
    Tensor<T>& output_matrix() { return out_proj.size() ? out_proj : tok_embed; }

    template <typename Self, typename Fn>
    static void visit_impl(Self& self, Fn&& fn) {
        fn("tok_embed", self.tok_embed, ParamKind::weight);
        fn("pos_embed", self.pos_embed, ParamKind::weight);
        for (size_t i = 0; i < self.layers.size(); ++i) {
            const std::string pre = "layer" + std::to_string(i) + ".";
            auto& l = self.layers[i];
            fn(pre + "ln1_g", l.ln1_g, ParamKind::gain);
            fn(pre + "ln1_b", l.ln1_b, ParamKind::bias);
            fn(pre + "wq", l.wq, ParamKind::weight);
            fn(pre + "bq", l.bq, ParamKind::bias);
            fn(pre + "wk", l.wk, ParamKind::weight);
            fn(pre + "bk", l.bk, ParamKind::bias);
            fn(pre + "wv", l.wv, ParamKind::weight);
            fn(pre + "bv", l.bv, ParamKind::bias);
            fn(pre + "wo", l.wo, ParamKind::weight);
            fn(pre + "bo", l.bo, ParamKind::bias);
            fn(pre + "ln2_g", l.ln2_g, ParamKind::gain);
            fn(pre + "ln2_b", l.ln2_b, ParamKind::bias);
            fn(pre + "w_in", l.w_in, ParamKind::weight);
            fn(pre + "b_in", l.b_in, ParamKind::bias);
            fn(pre + "w_out", l.w_out, ParamKind::weight);
            fn(pre + "b_out", l.b_out, ParamKind::bias);
        }
        fn("lnf_g", self.lnf_g, ParamKind::gain);
        fn("lnf_b", self.lnf_b, ParamKind::bias);
        if (self.out_proj.size()) {
            fn("out_proj", self.out_proj, ParamKind::weight);
        }
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        visit_impl(*this, fn);
    }

    void zero() {
        visit([](const std::string&, Tensor<T>& t, ParamKind) { t.zero(); });
    }

    int64_t total_size() const {
        int64_t n = 0;
        visit([&](const std::string&, const Tensor<T>& t, ParamKind) { n += static_cast<int64_t>(t.size()); });
        return n;
    }
};

template <typename To, typename From>
ModelParams<To> cast_params(const ModelConfig& cfg, const ModelParams<From>& src) {
    ModelParams<To> dst = ModelParams<To>::shaped(cfg);
    std::vector<const Tensor<From>*> in;
    src.visit([&](const std::string&, const Tensor<From>& t, ParamKind) { in.push_back(&t); });
    size_t i = 0;
    dst.visit([&](const std::string&, Tensor<To>& t, ParamKind) {
        t = cast_tensor<To>(*in[i]);
        ++i;
    });
    return dst;
}

// weights ~ N(0, 0.02^2), biases 0, norm gains 1; one RNG stream walked in
// visit order makes the whole thing a pure function of the seed.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParams<T> p = ModelParams<T>::shaped(cfg);
    Rng rng(seed);
    p.visit([&](const std::string&, Tensor<T>& t, ParamKind kind) {
        for (auto& v : t.v) {
            switch (kind) {
                case ParamKind::weight: v = static_cast<T>(0.02 * rng.gauss()); break;
                case ParamKind::bias: v = T(0); break;
                case ParamKind::gain: v = T(1); break;
            }
        }
    });
    return p;
}

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <typename T>
void ln_forward_row(const T* x, const T* g, const T* b, T* xhat, T* out, T& inv_std, int F) {
    T mean = T(0);
    for (int i = 0; i < F; ++i) {
        mean += x[i];
    }
    mean /= T(F);
    T var = T(0);
    for (int i = 0; i < F; ++i) {
        T d = x[i] - mean;
        var += d * d;
    }
    var /= T(F);
    inv_std = T(1) / std::sqrt(var + T(kLnEps));
    for (int i = 0; i < F; ++i) {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = g[i] * xhat[i] + b[i];
    }
}

// accumulates into dx, dgain, dbias
template <typename T>
void ln_backward_row(const T* dy, const T* xhat, T inv_std, const T* g, T* dgain, T* dbias, T* dx, int F) {
    T m1 = T(0), m2 = T(0);
    for (int i = 0; i < F; ++i) {
        T dxh = dy[i] * g[i];
        m1 += dxh;
        m2 += dxh * xhat[i];
        dgain[i] += dy[i] * xhat[i];
        dbias[i] += dy[i];
    }
    m1 /= T(F);
    m2 /= T(F);
    for (int i = 0; i < F; ++i) {
        dx[i] += inv_std * (dy[i] * g[i] - m1 - xhat[i] * m2);
    }
}

} // namespace detail

template <typename T>
struct LayerCache {
    std::vector<T> x_in;                // len x F
    std::vector<T> ln1_xhat, ln1_out;   // len x F
    std::vector<T> ln1_inv;             // len
    std::vector<T> q, k, v;             // len x F
    std::vector<T> probs;               // H x len x len, causal entries only
    std::vector<T> ctx;                 // len x F
    std::vector<T> x_mid;               // len x F
    std::vector<T> ln2_xhat, ln2_out;   // len x F
    std::vector<T> ln2_inv;             // len
    std::vector<T> pre_act, act;        // len x MF
};

template <typename T>
struct ForwardCache {
    int len = 0;
    std::vector<LayerCache<T>> layers;
    std::vector<T> x_final;             // len x F
    std::vector<T> lnf_xhat, lnf_out;   // len x F
    std::vector<T> lnf_inv;             // len
};

// Returns len x V logits, row t predicting the token at position t+1.
// Strictly causal: row t depends only on ids[0..t].
template <typename T>
std::vector<T> forward(const ModelConfig& cfg, const ModelParams<T>& p, const std::vector<TokenId>& ids,
                       ForwardCache<T>* cache = nullptr) {
    cfg.validate();
    int len = static_cast<int>(ids.size());
    require(len >= 1, ErrorCode::invalid_argument, "empty input");
    require(len <= cfg.maxlen, ErrorCode::invalid_argument,
            "input length " + std::to_string(len) + " exceeds maxlen " + std::to_string(cfg.maxlen));
    for (TokenId id : ids) {
        require(id >= 0 && id < cfg.vocab, ErrorCode::invalid_argument, "token id outside vocab");
    }
    const int F = cfg.hidden, H = cfg.heads, D = cfg.head_dim(), MF = cfg.mlp_mult * F;
    const T inv_sqrt_d = T(1) / std::sqrt(T(D));

    ForwardCache<T> local;
    ForwardCache<T>& cc = cache ? *cache : local;
    cc.len = len;
    cc.layers.assign(cfg.layers, LayerCache<T>{});

    std::vector<T> x(static_cast<size_t>(len) * F);
    for (int t = 0; t < len; ++t) {
        const T* e = p.tok_embed.row(ids[t]);
        const T* pe = p.pos_embed.row(t);
        T* xt = x.data() + static_cast<size_t>(t) * F;
        for (int i = 0; i < F; ++i) {
            xt[i] = e[i] + pe[i];
        }
    }

    for (int l = 0; l < cfg.layers; ++l) {
        const auto& lp = p.layers[l];
        auto& lc = cc.layers[l];
        lc.x_in = x;
        lc.ln1_xhat.resize(x.size());
        lc.ln1_out.resize(x.size());
        lc.ln1_inv.resize(len);
        lc.q.resize(x.size());
        lc.k.resize(x.size());
        lc.v.resize(x.size());
        lc.probs.assign(static_cast<size_t>(H) * len * len, T(0));
        lc.ctx.assign(x.size(), T(0));
        lc.x_mid.resize(x.size());
        lc.ln2_xhat.resize(x.size());
        lc.ln2_out.resize(x.size());
        lc.ln2_inv.resize(len);
        lc.pre_act.resize(static_cast<size_t>(len) * MF);
        lc.act.resize(static_cast<size_t>(len) * MF);

        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            detail::ln_forward_row(x.data() + off, lp.ln1_g.data(), lp.ln1_b.data(), lc.ln1_xhat.data() + off,
                                   lc.ln1_out.data() + off, lc.ln1_inv[t], F);
            kern::matvec(lp.wq.data(), lp.bq.data(), lc.ln1_out.data() + off, lc.q.data() + off, F, F);
            kern::matvec(lp.wk.data(), lp.bk.data(), lc.ln1_out.data() + off, lc.k.data() + off, F, F);
            kern::matvec(lp.wv.data(), lp.bv.data(), lc.ln1_out.data() + off, lc.v.data() + off, F, F);
        }

        for (int h = 0; h < H; ++h) {
            int hd = h * D;
            for (int t = 0; t < len; ++t) {
                T* prow = lc.probs.data() + (static_cast<size_t>(h) * len + t) * len;
                const T* qt = lc.q.data() + static_cast<size_t>(t) * F + hd;
                for (int j = 0; j <= t; ++j) {
                    prow[j] = kern::dot(qt, lc.k.data() + static_cast<size_t>(j) * F + hd, D) * inv_sqrt_d;
                }
                kern::softmax_inplace(prow, t + 1);
                T* ct = lc.ctx.data() + static_cast<size_t>(t) * F + hd;
                for (int j = 0; j <= t; ++j) {
                    kern::axpy(ct, prow[j], lc.v.data() + static_cast<size_t>(j) * F + hd, D);
                }
            }
        }

        std::vector<T> tmp(F);
        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            kern::matvec(lp.wo.data(), lp.bo.data(), lc.ctx.data() + off, tmp.data(), F, F);
            for (int i = 0; i < F; ++i) {
                lc.x_mid[off + i] = x[off + i] + tmp[i];
            }
            detail::ln_forward_row(lc.x_mid.data() + off, lp.ln2_g.data(), lp.ln2_b.data(),
                                   lc.ln2_xhat.data() + off, lc.ln2_out.data() + off, lc.ln2_inv[t], F);
            size_t moff = static_cast<size_t>(t) * MF;
            kern::matvec(lp.w_in.data(), lp.b_in.data(), lc.ln2_out.data() + off, lc.pre_act.data() + moff, MF, F);
            for (int i = 0; i < MF; ++i) {
                lc.act[moff + i] = kern::gelu(lc.pre_act[moff + i]);
            }
            kern::matvec(lp.w_out.data(), lp.b_out.data(), lc.act.data() + moff, tmp.data(), F, MF);
            for (int i = 0; i < F; ++i) {
                x[off + i] = lc.x_mid[off + i] + tmp[i];
            }
        }
    }

    cc.x_final = x;
    cc.lnf_xhat.resize(x.size());
    cc.lnf_out.resize(x.size());
    cc.lnf_inv.resize(len);
    for (int t = 0; t < len; ++t) {
        size_t off = static_cast<size_t>(t) * F;
        detail::ln_forward_row(x.data() + off, p.lnf_g.data(), p.lnf_b.data(), cc.lnf_xhat.data() + off,
                               cc.lnf_out.data() + off, cc.lnf_inv[t], F);
    }

    const Tensor<T>& out = p.output_matrix();
    std::vector<T> logits(static_cast<size_t>(len) * cfg.vocab);
    for (int t = 0; t < len; ++t) {
        kern::matvec(out.data(), static_cast<const T*>(nullptr), cc.lnf_out.data() + static_cast<size_t>(t) * F,
                     logits.data() + static_cast<size_t>(t) * cfg.vocab, cfg.vocab, F);
    }
    return logits;
}

namespace detail {

template <typename T>
void check_mask(const std::vector<TokenId>& ids, const std::vector<uint8_t>& mask) {
    require(mask.size() == ids.size(), ErrorCode::invalid_argument, "mask length does not match input length");
    int count = 0;
    for (uint8_t m : mask) {
        count += m != 0;
    }
    require(count >= 1, ErrorCode::invalid_argument, "empty loss mask");
    require(!mask[0], ErrorCode::invalid_argument, "position 0 has no prediction context");
    (void)sizeof(T);
}

} // namespace detail

// Mean of -log p(ids[i] | ids[0..i)) over masked positions i, without
// gradients.
template <typename T>
T loss_value(const ModelConfig& cfg, const ModelParams<T>& p, const std::vector<TokenId>& ids,
             const std::vector<uint8_t>& mask) {
    detail::check_mask<T>(ids, mask);
    std::vector<T> logits = forward(cfg, p, ids);
    int len = static_cast<int>(ids.size());
    T loss = T(0);
    int count = 0;
    std::vector<T> row(cfg.vocab);
    for (int i = 1; i < len; ++i) {
        if (!mask[i]) {
            continue;
        }
        const T* lr = logits.data() + static_cast<size_t>(i - 1) * cfg.vocab;
        std::copy(lr, lr + cfg.vocab, row.begin());
        T lse = kern::softmax_inplace(row.data(), cfg.vocab);
        loss += lse - lr[ids[i]];
        ++count;
    }
    return loss / T(count);
}

// Exact analytic gradient of loss_value. Adds scale * d(loss)/d(param) into
// grads (caller owns zeroing) and returns the unscaled loss.
template <typename T>
T loss_and_backward(const ModelConfig& cfg, const ModelParams<T>& p, const std::vector<TokenId>& ids,
                    const std::vector<uint8_t>& mask, ModelParams<T>& grads, T scale = T(1)) {
    detail::check_mask<T>(ids, mask);
    ForwardCache<T> cc;
    std::vector<T> logits = forward(cfg, p, ids, &cc);
    const int len = static_cast<int>(ids.size());
    const int F = cfg.hidden, H = cfg.heads, D = cfg.head_dim(), MF = cfg.mlp_mult * F, V = cfg.vocab;
    const T inv_sqrt_d = T(1) / std::sqrt(T(D));

    int count = 0;
    for (uint8_t m : mask) {
        count += m != 0;
    }
    const T coef = scale / T(count);

    const Tensor<T>& out_mat = p.output_matrix();
    Tensor<T>& g_out_mat = grads.output_matrix();
    std::vector<T> d_lnf_out(static_cast<size_t>(len) * F, T(0));
    std::vector<T> prob_row(V);
    T loss = T(0);
    for (int i = 1; i < len; ++i) {
        if (!mask[i]) {
            continue;
        }
        int t = i - 1;
        const T* lr = logits.data() + static_cast<size_t>(t) * V;
        std::copy(lr, lr + V, prob_row.begin());
        T lse = kern::softmax_inplace(prob_row.data(), V);
        loss += lse - lr[ids[i]];
        prob_row[ids[i]] -= T(1);
        for (int v = 0; v < V; ++v) {
            prob_row[v] *= coef;
        }
        kern::matvec_t_acc(out_mat.data(), prob_row.data(), d_lnf_out.data() + static_cast<size_t>(t) * F, V, F);
        kern::outer_acc(g_out_mat.data(), prob_row.data(), cc.lnf_out.data() + static_cast<size_t>(t) * F, V, F);
    }

    std::vector<T> dx(static_cast<size_t>(len) * F, T(0));
    for (int t = 0; t < len; ++t) {
        size_t off = static_cast<size_t>(t) * F;
        detail::ln_backward_row(d_lnf_out.data() + off, cc.lnf_xhat.data() + off, cc.lnf_inv[t], p.lnf_g.data(),
                                grads.lnf_g.data(), grads.lnf_b.data(), dx.data() + off, F);
    }

    std::vector<T> d_ln_out(static_cast<size_t>(len) * F);
    std::vector<T> d_pre(MF);
    std::vector<T> dq(static_cast<size_t>(len) * F), dk(static_cast<size_t>(len) * F),
        dv(static_cast<size_t>(len) * F), d_ctx(static_cast<size_t>(len) * F);
    std::vector<T> dprobs;
    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto& lp = p.layers[l];
        auto& lg = grads.layers[l];
        auto& lc = cc.layers[l];

        // mlp: x_out = x_mid + w_out gelu(w_in ln2(x_mid) + b_in) + b_out
        std::fill(d_ln_out.begin(), d_ln_out.end(), T(0));
        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            size_t moff = static_cast<size_t>(t) * MF;
            const T* d_out = dx.data() + off;
            d_pre.assign(MF, T(0));
            kern::matvec_t_acc(lp.w_out.data(), d_out, d_pre.data(), F, MF);
            kern::outer_acc(lg.w_out.data(), d_out, lc.act.data() + moff, F, MF);
            kern::axpy(lg.b_out.data(), T(1), d_out, F);
            for (int i = 0; i < MF; ++i) {
                d_pre[i] *= kern::gelu_grad(lc.pre_act[moff + i]);
            }
            kern::matvec_t_acc(lp.w_in.data(), d_pre.data(), d_ln_out.data() + off, MF, F);
            kern::outer_acc(lg.w_in.data(), d_pre.data(), lc.ln2_out.data() + off, MF, F);
            kern::axpy(lg.b_in.data(), T(1), d_pre.data(), MF);
        }
        // dx becomes d(x_mid): residual passthrough plus ln2 backward
        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            detail::ln_backward_row(d_ln_out.data() + off, lc.ln2_xhat.data() + off, lc.ln2_inv[t], lp.ln2_g.data(),
                                    lg.ln2_g.data(), lg.ln2_b.data(), dx.data() + off, F);
        }

        // attention: x_mid = x_in + wo ctx + bo
        std::fill(d_ctx.begin(), d_ctx.end(), T(0));
        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            const T* d_attn = dx.data() + off;
            kern::matvec_t_acc(lp.wo.data(), d_attn, d_ctx.data() + off, F, F);
            kern::outer_acc(lg.wo.data(), d_attn, lc.ctx.data() + off, F, F);
            kern::axpy(lg.bo.data(), T(1), d_attn, F);
        }

        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        for (int h = 0; h < H; ++h) {
            int hd = h * D;
            for (int t = 0; t < len; ++t) {
                const T* prow = lc.probs.data() + (static_cast<size_t>(h) * len + t) * len;
                const T* dct = d_ctx.data() + static_cast<size_t>(t) * F + hd;
                dprobs.assign(t + 1, T(0));
                for (int j = 0; j <= t; ++j) {
                    dprobs[j] = kern::dot(dct, lc.v.data() + static_cast<size_t>(j) * F + hd, D);
                    kern::axpy(dv.data() + static_cast<size_t>(j) * F + hd, prow[j], dct, D);
                }
                T inner = T(0);
                for (int j = 0; j <= t; ++j) {
                    inner += prow[j] * dprobs[j];
                }
                const T* qt = lc.q.data() + static_cast<size_t>(t) * F + hd;
                T* dqt = dq.data() + static_cast<size_t>(t) * F + hd;
                for (int j = 0; j <= t; ++j) {
                    T ds = prow[j] * (dprobs[j] - inner) * inv_sqrt_d;
                    kern::axpy(dqt, ds, lc.k.data() + static_cast<size_t>(j) * F + hd, D);
                    kern::axpy(dk.data() + static_cast<size_t>(j) * F + hd, ds, qt, D);
                }
            }
        }

        std::fill(d_ln_out.begin(), d_ln_out.end(), T(0));
        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            kern::matvec_t_acc(lp.wq.data(), dq.data() + off, d_ln_out.data() + off, F, F);
            kern::matvec_t_acc(lp.wk.data(), dk.data() + off, d_ln_out.data() + off, F, F);
            kern::matvec_t_acc(lp.wv.data(), dv.data() + off, d_ln_out.data() + off, F, F);
            kern::outer_acc(lg.wq.data(), dq.data() + off, lc.ln1_out.data() + off, F, F);
            kern::outer_acc(lg.wk.data(), dk.data() + off, lc.ln1_out.data() + off, F, F);
            kern::outer_acc(lg.wv.data(), dv.data() + off, lc.ln1_out.data() + off, F, F);
            kern::axpy(lg.bq.data(), T(1), dq.data() + off, F);
            kern::axpy(lg.bk.data(), T(1), dk.data() + off, F);
            kern::axpy(lg.bv.data(), T(1), dv.data() + off, F);
        }
        // dx becomes d(x_in)
        for (int t = 0; t < len; ++t) {
            size_t off = static_cast<size_t>(t) * F;
            detail::ln_backward_row(d_ln_out.data() + off, lc.ln1_xhat.data() + off, lc.ln1_inv[t], lp.ln1_g.data(),
                                    lg.ln1_g.data(), lg.ln1_b.data(), dx.data() + off, F);
        }
    }

    for (int t = 0; t < len; ++t) {
        size_t off = static_cast<size_t>(t) * F;
        kern::axpy(grads.tok_embed.row(ids[t]), T(1), dx.data() + off, F);
        kern::axpy(grads.pos_embed.row(t), T(1), dx.data() + off, F);
    }
    return loss / T(count);
}

// --------------------------------------------------------------------------
// Incremental decoding with a per-layer K/V cache. decode_step(state, tok)
// is exactly forward(ids + [tok]).back() at a fraction of the cost; states
// are plain values, so beam search can copy them.
// --------------------------------------------------------------------------

template <typename T>
struct DecodeState {
    int len = 0;
    std::vector<std::vector<T>> kcache, vcache; // [layer][pos * F + i]
};

template <typename T>
DecodeState<T> make_decode_state(const ModelConfig& cfg) {
    cfg.validate();
    DecodeState<T> st;
    st.kcache.assign(cfg.layers, std::vector<T>(static_cast<size_t>(cfg.maxlen) * cfg.hidden));
    st.vcache.assign(cfg.layers, std::vector<T>(static_cast<size_t>(cfg.maxlen) * cfg.hidden));
    return st;
}

template <typename T>
std::vector<T> decode_step(const ModelConfig& cfg, const ModelParams<T>& p, DecodeState<T>& st, TokenId tok) {
    require(st.len < cfg.maxlen, ErrorCode::invalid_argument, "decode past maxlen");
    require(tok >= 0 && tok < cfg.vocab, ErrorCode::invalid_argument, "token id outside vocab");
    const int F = cfg.hidden, H = cfg.heads, D = cfg.head_dim(), MF = cfg.mlp_mult * F;
    const T inv_sqrt_d = T(1) / std::sqrt(T(D));
    const int t = st.len;

    std::vector<T> x(F), h1(F), xhat(F), q(F), ctx(F), tmp(F), pre(MF);
    const T* e = p.tok_embed.row(tok);
    const T* pe = p.pos_embed.row(t);
    for (int i = 0; i < F; ++i) {
        x[i] = e[i] + pe[i];
    }
    T inv_std;
    for (int l = 0; l < cfg.layers; ++l) {
        const auto& lp = p.layers[l];
        detail::ln_forward_row(x.data(), lp.ln1_g.data(), lp.ln1_b.data(), xhat.data(), h1.data(), inv_std, F);
        T* krow = st.kcache[l].data() + static_cast<size_t>(t) * F;
        T* vrow = st.vcache[l].data() + static_cast<size_t>(t) * F;
        kern::matvec(lp.wq.data(), lp.bq.data(), h1.data(), q.data(), F, F);
        kern::matvec(lp.wk.data(), lp.bk.data(), h1.data(), krow, F, F);
        kern::matvec(lp.wv.data(), lp.bv.data(), h1.data(), vrow, F, F);

        std::fill(ctx.begin(), ctx.end(), T(0));
        std::vector<T> scores(t + 1);
        for (int h = 0; h < H; ++h) {
            int hd = h * D;
            for (int j = 0; j <= t; ++j) {
                scores[j] = kern::dot(q.data() + hd, st.kcache[l].data() + static_cast<size_t>(j) * F + hd, D) *
                            inv_sqrt_d;
            }
            kern::softmax_inplace(scores.data(), t + 1);
            for (int j = 0; j <= t; ++j) {
                kern::axpy(ctx.data() + hd, scores[j], st.vcache[l].data() + static_cast<size_t>(j) * F + hd, D);
            }
        }
        kern::matvec(lp.wo.data(), lp.bo.data(), ctx.data(), tmp.data(), F, F);
        for (int i = 0; i < F; ++i) {
            x[i] += tmp[i];
        }
        detail::ln_forward_row(x.data(), lp.ln2_g.data(), lp.ln2_b.data(), xhat.data(), h1.data(), inv_std, F);
        kern::matvec(lp.w_in.data(), lp.b_in.data(), h1.data(), pre.data(), MF, F);
        for (int i = 0; i < MF; ++i) {
            pre[i] = kern::gelu(pre[i]);
        }
        kern::matvec(lp.w_out.data(), lp.b_out.data(), pre.data(), tmp.data(), F, MF);
        for (int i = 0; i < F; ++i) {
            x[i] += tmp[i];
        }
    }
    detail::ln_forward_row(x.data(), p.lnf_g.data(), p.lnf_b.data(), xhat.data(), h1.data(), inv_std, F);
    const Tensor<T>& out = p.output_matrix();
    std::vector<T> logits(cfg.vocab);
    kern::matvec(out.data(), static_cast<const T*>(nullptr), h1.data(), logits.data(), cfg.vocab, F);
    ++st.len;
    return logits;
}

// --------------------------------------------------------------------------
// Checkpoint file: "SPCK1\n", config key=value lines, blank line, then per
// tensor in visit order: "name dims d1 [d2]\n" followed by row-major
// little-endian f32 payload.
// --------------------------------------------------------------------------

namespace detail {

inline void write_f32_le(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                 static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    out.write(b, 4);
}

inline std::vector<float> read_f32_le(std::istream& in, size_t count, const std::string& what) {
    std::vector<char> raw(count * 4);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    require(in.gcount() == static_cast<std::streamsize>(raw.size()), ErrorCode::io_failure,
            "checkpoint: truncated payload for " + what);
    std::vector<float> out(count);
    for (size_t i = 0; i < count; ++i) {
        uint32_t bits = static_cast<uint8_t>(raw[i * 4]) |
                        (static_cast<uint32_t>(static_cast<uint8_t>(raw[i * 4 + 1])) << 8) |
                        (static_cast<uint32_t>(static_cast<uint8_t>(raw[i * 4 + 2])) << 16) |
                        (static_cast<uint32_t>(static_cast<uint8_t>(raw[i * 4 + 3])) << 24);
        std::memcpy(&out[i], &bits, 4);
    }
    return out;
}

} // namespace detail

template <typename T>
void save_checkpoint(std::ostream& out, const ModelConfig& cfg, const ModelParams<T>& p) {
    out << "SPCK1\n";
    out << "layers=" << cfg.layers << '\n';
    out << "hidden=" << cfg.hidden << '\n';
    out << "heads=" << cfg.heads << '\n';
    out << "vocab=" << cfg.vocab << '\n';
    out << "maxlen=" << cfg.maxlen << '\n';
    out << "mlp_mult=" << cfg.mlp_mult << '\n';
    out << "tie_output=" << (cfg.tie_output ? 1 : 0) << '\n';
    out << '\n';
    p.visit([&](const std::string& name, const Tensor<T>& t, ParamKind) {
        out << name << " dims";
        for (int d : t.dims) {
            out << ' ' << d;
        }
        out << '\n';
        for (T v : t.v) {
            detail::write_f32_le(out, static_cast<float>(v));
        }
    });
    require(out.good(), ErrorCode::io_failure, "checkpoint write failed");
}

struct Checkpoint {
    ModelConfig config;
    ModelParams<float> params;
};

inline Checkpoint load_checkpoint(std::istream& in) {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::io_failure, "checkpoint: missing magic");
    require(line == "SPCK1", ErrorCode::unparseable, "checkpoint: bad magic");

    std::map<std::string, std::string> header;
    while (std::getline(in, line)) {
        if (line.empty()) {
            break;
        }
        size_t eq = line.find('=');
        require(eq != std::string::npos, ErrorCode::unparseable, "checkpoint: header line without '='");
        header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* key) {
        auto it = header.find(key);
        require(it != header.end(), ErrorCode::unparseable, std::string("checkpoint: header missing '") + key + "'");
        return it->second;
    };
    Checkpoint ck;
    try {
        ck.config.layers = std::stoi(get("layers"));
        ck.config.hidden = std::stoi(get("hidden"));
        ck.config.heads = std::stoi(get("heads"));
        ck.config.vocab = std::stoi(get("vocab"));
        ck.config.maxlen = std::stoi(get("maxlen"));
        ck.config.mlp_mult = std::stoi(get("mlp_mult"));
        ck.config.tie_output = std::stoi(get("tie_output")) != 0;
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        raise(ErrorCode::unparseable, "checkpoint: malformed header value");
    }
    require(header.size() == 7, ErrorCode::unparseable, "checkpoint: unexpected header keys");
    ck.config.validate();

    ck.params = ModelParams<float>::shaped(ck.config);
    ck.params.visit([&](const std::string& name, Tensor<float>& t, ParamKind) {
        std::string tline;
        require(static_cast<bool>(std::getline(in, tline)), ErrorCode::io_failure,
                "checkpoint: missing tensor line for " + name);
        std::string want = name + " dims";
        for (int d : t.dims) {
            want += ' ' + std::to_string(d);
        }
        require(tline == want, ErrorCode::unparseable,
                "checkpoint: expected '" + want + "', found '" + tline + "'");
        auto vals = detail::read_f32_le(in, t.size(), name);
        for (float v : vals) {
            require(std::isfinite(v), ErrorCode::unparseable, "checkpoint: non-finite value in " + name);
        }
        t.v = std::move(vals);
    });
    char extra;
    require(!in.get(extra), ErrorCode::unparseable, "checkpoint: trailing data");
    return ck;
}

template <typename T>
void save_checkpoint_file(const std::string& path, const ModelConfig& cfg, const ModelParams<T>& p) {
    std::ofstream out(path, std::ios::binary);
    require(out.is_open(), ErrorCode::io_failure, "cannot open '" + path + "' for writing");
    save_checkpoint(out, cfg, p);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), ErrorCode::io_failure, "cannot open '" + path + "'");
    return load_checkpoint(in);
}

} // namespace unitlm
