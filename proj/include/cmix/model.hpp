#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cmix/error.hpp"
#include "cmix/rng.hpp"
#include "cmix/tensor.hpp"

namespace cmix {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 64;
    int d_ff = 256;
    int max_seq = 64;  // T
    int vocab_size = 0;
    int n_labels = 7;
    double dropout_rate = 0.0;
    double layernorm_eps = 1e-12;
    double init_std = 0.02;
    bool tie_mlm = true;  // MLM projection shares the token embedding matrix

    void validate() const {
        if (d_model % n_heads != 0) throw Error("InvalidConfig", "d_model must be divisible by n_heads");
        if (max_seq < 8) throw Error("InvalidConfig", "max_seq must be at least 8");
        if (vocab_size < 5) throw Error("InvalidConfig", "vocab_size must cover the special tokens");
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || n_labels < 1) {
            throw Error("InvalidConfig", "all dimensions must be positive");
        }
        if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw Error("InvalidConfig", "dropout_rate out of range");
    }

    // Desk-scale default used throughout the tests.
    static ModelConfig tiny(int vocab) {
        ModelConfig c;
        c.n_layers = 2; c.n_heads = 2; c.d_model = 64; c.d_ff = 256; c.max_seq = 64;
        c.vocab_size = vocab;
        return c;
    }

    // The published configuration (12 layers, 12 heads, ~110M parameters).
    // Documented preset; nothing in the test suite trains at this size.
    static ModelConfig paper(int vocab) {
        ModelConfig c;
        c.n_layers = 12; c.n_heads = 12; c.d_model = 768; c.d_ff = 3072; c.max_seq = 512;
        c.vocab_size = vocab;
        c.dropout_rate = 0.1;
        return c;
    }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct LayerParams {
    Mat wq, bq, wk, bk, wv, bv, wo, bo;  // d×d projections with 1×d biases
    Mat ln1_g, ln1_b;                    // post-attention layernorm
    Mat w1, b1;                          // d×d_ff
    Mat w2, b2;                          // d_ff×d
    Mat ln2_g, ln2_b;                    // post-feedforward layernorm
};

struct ModelParameters {
    Mat tok_emb;  // vocab×d
    Mat pos_emb;  // T×d
    Mat seg_emb;  // 2×d
    std::vector<LayerParams> layers;
    Mat mlm_w;    // vocab×d, allocated only when the MLM head is untied
    Mat mlm_b;    // 1×vocab
    Mat nsp_w;    // d×2
    Mat nsp_b;    // 1×2
    Mat cls_w;    // d×n_labels
    Mat cls_b;    // 1×n_labels
};

// Visits every allocated tensor with a stable name; parameter/gradient/moment
// containers all share this enumeration.
template <typename Params, typename F>
void for_each_tensor(Params& p, F&& f) {
    f("tok_emb", p.tok_emb);
    f("pos_emb", p.pos_emb);
    f("seg_emb", p.seg_emb);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        std::string pre = "layer" + std::to_string(i) + ".";
        f(pre + "wq", l.wq); f(pre + "bq", l.bq);
        f(pre + "wk", l.wk); f(pre + "bk", l.bk);
        f(pre + "wv", l.wv); f(pre + "bv", l.bv);
        f(pre + "wo", l.wo); f(pre + "bo", l.bo);
        f(pre + "ln1_g", l.ln1_g); f(pre + "ln1_b", l.ln1_b);
        f(pre + "w1", l.w1); f(pre + "b1", l.b1);
        f(pre + "w2", l.w2); f(pre + "b2", l.b2);
        f(pre + "ln2_g", l.ln2_g); f(pre + "ln2_b", l.ln2_b);
    }
    if (!p.mlm_w.empty()) f("mlm_w", p.mlm_w);
    f("mlm_b", p.mlm_b);
    f("nsp_w", p.nsp_w); f("nsp_b", p.nsp_b);
    f("cls_w", p.cls_w); f("cls_b", p.cls_b);
}

inline ModelParameters zero_params(const ModelConfig& cfg) {
    cfg.validate();
    ModelParameters p;
    int d = cfg.d_model;
    p.tok_emb = Mat(cfg.vocab_size, d);
    p.pos_emb = Mat(cfg.max_seq, d);
    p.seg_emb = Mat(2, d);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
        l.wq = Mat(d, d); l.bq = Mat(1, d);
        l.wk = Mat(d, d); l.bk = Mat(1, d);
        l.wv = Mat(d, d); l.bv = Mat(1, d);
        l.wo = Mat(d, d); l.bo = Mat(1, d);
        l.ln1_g = Mat(1, d); l.ln1_b = Mat(1, d);
        l.w1 = Mat(d, cfg.d_ff); l.b1 = Mat(1, cfg.d_ff);
        l.w2 = Mat(cfg.d_ff, d); l.b2 = Mat(1, d);
        l.ln2_g = Mat(1, d); l.ln2_b = Mat(1, d);
    }
    if (!cfg.tie_mlm) p.mlm_w = Mat(cfg.vocab_size, d);
    p.mlm_b = Mat(1, cfg.vocab_size);
    p.nsp_w = Mat(d, 2); p.nsp_b = Mat(1, 2);
    p.cls_w = Mat(d, cfg.n_labels); p.cls_b = Mat(1, cfg.n_labels);
    return p;
}

// Weights ~ Normal(0, init_std) truncated at ±2·init_std; biases zero;
// layernorm scale 1, shift 0. Deterministic per seed.
inline ModelParameters init_params(const ModelConfig& cfg, uint64_t seed) {
    ModelParameters p = zero_params(cfg);
    Rng rng(seed);
    auto fill_normal = [&](Mat& m) {
        for (double& v : m.a) v = rng.truncated_normal(cfg.init_std, 2.0 * cfg.init_std);
    };
    auto fill_ones = [](Mat& m) { std::fill(m.a.begin(), m.a.end(), 1.0); };
    fill_normal(p.tok_emb);
    fill_normal(p.pos_emb);
    fill_normal(p.seg_emb);
    for (auto& l : p.layers) {
        fill_normal(l.wq); fill_normal(l.wk); fill_normal(l.wv); fill_normal(l.wo);
        fill_normal(l.w1); fill_normal(l.w2);
        fill_ones(l.ln1_g); fill_ones(l.ln2_g);
    }
    if (!p.mlm_w.empty()) fill_normal(p.mlm_w);
    fill_normal(p.nsp_w);
    fill_normal(p.cls_w);
    return p;
}

inline bool params_finite(const ModelParameters& p) {
    bool ok = true;
    for_each_tensor(const_cast<ModelParameters&>(p), [&](const std::string&, const Mat& m) {
        if (!mat_finite(m)) ok = false;
    });
    return ok;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

// Sentinel for positions that carry no prediction target.
constexpr int kNoTarget = -1;

struct Batch {
    int batch_size = 0;  // B
    int seq_len = 0;     // T of this batch (may be below config.max_seq)
    std::vector<int> ids;                  // B*T
    std::vector<int> segment_ids;          // B*T
    std::vector<int> attention_mask;       // B*T, 1 = real, 0 = pad
    std::vector<int> mlm_targets;          // B*T
    std::vector<int> token_label_targets;  // B*T
    std::vector<int> nsp_targets;          // B
};

inline void validate_batch(const ModelConfig& cfg, const Batch& b) {
    size_t bt = static_cast<size_t>(b.batch_size) * b.seq_len;
    if (b.seq_len <= 0 || b.seq_len > cfg.max_seq) throw Error("ShapeMismatch", "batch seq_len vs config.max_seq");
    if (b.ids.size() != bt || b.segment_ids.size() != bt || b.attention_mask.size() != bt ||
        b.mlm_targets.size() != bt || b.token_label_targets.size() != bt ||
        b.nsp_targets.size() != static_cast<size_t>(b.batch_size)) {
        throw Error("ShapeMismatch", "batch field sizes");
    }
    for (size_t i = 0; i < bt; ++i) {
        if (b.ids[i] < 0 || b.ids[i] >= cfg.vocab_size) throw Error("IdOutOfRange", std::to_string(b.ids[i]));
        if (b.segment_ids[i] != 0 && b.segment_ids[i] != 1) throw Error("ShapeMismatch", "segment id");
        if (b.attention_mask[i] == 0 &&
            (b.mlm_targets[i] != kNoTarget || b.token_label_targets[i] != kNoTarget)) {
            throw Error("ShapeMismatch", "target on a padded position");
        }
        if (b.mlm_targets[i] != kNoTarget && (b.mlm_targets[i] < 0 || b.mlm_targets[i] >= cfg.vocab_size)) {
            throw Error("TargetOutOfRange", "mlm");
        }
        if (b.token_label_targets[i] != kNoTarget &&
            (b.token_label_targets[i] < 0 || b.token_label_targets[i] >= cfg.n_labels)) {
            throw Error("TargetOutOfRange", "token label");
        }
    }
    for (int t : b.nsp_targets) {
        if (t != kNoTarget && t != 0 && t != 1) throw Error("TargetOutOfRange", "nsp");
    }
}

// ---------------------------------------------------------------------------
// Forward pass with cache
// ---------------------------------------------------------------------------

namespace nn {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

inline void layernorm_forward(const Mat& x, const Mat& g, const Mat& b, double eps, Mat& y,
                              std::vector<double>& mu, std::vector<double>& rstd) {
    int n = x.cols;
    y = Mat(x.rows, n);
    mu.assign(x.rows, 0.0);
    rstd.assign(x.rows, 0.0);
    for (int i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        double m = 0.0;
        for (int j = 0; j < n; ++j) m += xr[j];
        m /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= n;
        double rs = 1.0 / std::sqrt(var + eps);
        mu[i] = m;
        rstd[i] = rs;
        double* yr = y.row(i);
        for (int j = 0; j < n; ++j) yr[j] = (xr[j] - m) * rs * g.row(0)[j] + b.row(0)[j];
    }
}

inline void layernorm_backward(const Mat& dy, const Mat& x, const Mat& g,
                               const std::vector<double>& mu, const std::vector<double>& rstd,
                               Mat& dx, Mat& dg, Mat& db) {
    int n = x.cols;
    dx = Mat(x.rows, n);
    for (int i = 0; i < x.rows; ++i) {
        const double* dyr = dy.row(i);
        const double* xr = x.row(i);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < n; ++j) {
            double xhat = (xr[j] - mu[i]) * rstd[i];
            double dxhat = dyr[j] * g.row(0)[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
            dg.row(0)[j] += dyr[j] * xhat;
            db.row(0)[j] += dyr[j];
        }
        m1 /= n;
        m2 /= n;
        double* dxr = dx.row(i);
        for (int j = 0; j < n; ++j) {
            double xhat = (xr[j] - mu[i]) * rstd[i];
            double dxhat = dyr[j] * g.row(0)[j];
            dxr[j] = rstd[i] * (dxhat - m1 - xhat * m2);
        }
    }
}

// Inverted dropout mask: entries are 0 with probability rate, else 1/(1-rate).
inline Mat dropout_mask(int rows, int cols, double rate, Rng& rng) {
    Mat m(rows, cols);
    double keep = 1.0 - rate;
    for (double& v : m.a) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    return m;
}

inline void apply_mask(Mat& x, const Mat& m) {
    for (size_t i = 0; i < x.a.size(); ++i) x.a[i] *= m.a[i];
}

}  // namespace nn

struct LayerCache {
    Mat x_in;                 // layer input
    Mat q, k, v;              // projected activations
    std::vector<Mat> attn;    // per (batch, head): T×T softmax probabilities, exact zeros at pads
    std::vector<Mat> attn_drop;  // dropout masks matching attn (empty when inactive)
    Mat ctx;                  // heads concatenated after attending values
    Mat attnout_drop;
    Mat r1, x1;               // residual sum and post-attention layernorm output
    std::vector<double> mu1, rstd1;
    Mat h_pre, h_act;         // feed-forward pre/post activation
    Mat ff_drop;
    Mat r2, x2;               // residual sum and layer output
    std::vector<double> mu2, rstd2;
};

struct ForwardCache {
    Mat x0;  // embedding sum (after embedding dropout, when active)
    Mat emb_drop;
    std::vector<LayerCache> layers;

    const Mat& hidden() const { return layers.empty() ? x0 : layers.back().x2; }
};

// Runs the encoder stack, filling the cache. Attention uses scaled
// dot-product with exact-zero weights on padded key positions; softmax rows
// are normalized over the real positions only. Deterministic when training
// is false (no dropout).
inline void encoder_forward(const ModelParameters& p, const ModelConfig& cfg, const Batch& batch,
                            bool training, Rng* rng, ForwardCache& cache) {
    validate_batch(cfg, batch);
    const int B = batch.batch_size, T = batch.seq_len, d = cfg.d_model;
    const int H = cfg.n_heads, dh = d / H, BT = B * T;
    const bool drop = training && cfg.dropout_rate > 0.0;
    if (drop && rng == nullptr) throw Error("InvalidConfig", "dropout requires an rng");
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.x0 = Mat(BT, d);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            int r = b * T + t;
            const double* te = p.tok_emb.row(batch.ids[r]);
            const double* pe = p.pos_emb.row(t);
            const double* se = p.seg_emb.row(batch.segment_ids[r]);
            double* xr = cache.x0.row(r);
            for (int j = 0; j < d; ++j) xr[j] = te[j] + pe[j] + se[j];
        }
    }
    if (drop) {
        cache.emb_drop = nn::dropout_mask(BT, d, cfg.dropout_rate, *rng);
        nn::apply_mask(cache.x0, cache.emb_drop);
    } else {
        cache.emb_drop = Mat();
    }

    cache.layers.assign(cfg.n_layers, LayerCache{});
    const Mat* x = &cache.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = p.layers[l];
        LayerCache& lc = cache.layers[l];
        lc.x_in = *x;

        lc.q = Mat(BT, d); matmul(lc.x_in, lp.wq, lc.q); add_bias(lc.q, lp.bq);
        lc.k = Mat(BT, d); matmul(lc.x_in, lp.wk, lc.k); add_bias(lc.k, lp.bk);
        lc.v = Mat(BT, d); matmul(lc.x_in, lp.wv, lc.v); add_bias(lc.v, lp.bv);

        lc.attn.assign(static_cast<size_t>(B) * H, Mat());
        if (drop) lc.attn_drop.assign(static_cast<size_t>(B) * H, Mat());
        lc.ctx = Mat(BT, d);
        std::vector<double> scores(T);
        for (int b = 0; b < B; ++b) {
            const int base = b * T;
            for (int h = 0; h < H; ++h) {
                Mat& A = lc.attn[static_cast<size_t>(b) * H + h];
                A = Mat(T, T);
                const int off = h * dh;
                Mat* dmask = nullptr;
                if (drop) {
                    lc.attn_drop[static_cast<size_t>(b) * H + h] =
                        nn::dropout_mask(T, T, cfg.dropout_rate, *rng);
                    dmask = &lc.attn_drop[static_cast<size_t>(b) * H + h];
                }
                for (int i = 0; i < T; ++i) {
                    const double* qi = lc.q.row(base + i) + off;
                    double maxv = -1e300;
                    for (int j = 0; j < T; ++j) {
                        if (!batch.attention_mask[base + j]) continue;
                        const double* kj = lc.k.row(base + j) + off;
                        double s = 0.0;
                        for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                        s *= scale;
                        scores[j] = s;
                        if (s > maxv) maxv = s;
                    }
                    double denom = 0.0;
                    double* ar = A.row(i);
                    for (int j = 0; j < T; ++j) {
                        if (!batch.attention_mask[base + j]) { ar[j] = 0.0; continue; }
                        double e = std::exp(scores[j] - maxv);
                        ar[j] = e;
                        denom += e;
                    }
                    double* ctxr = lc.ctx.row(base + i) + off;
                    for (int j = 0; j < T; ++j) {
                        if (ar[j] == 0.0) continue;
                        ar[j] /= denom;
                        double w = ar[j];
                        if (dmask) w *= (*dmask)(i, j);
                        if (w == 0.0) continue;
                        const double* vj = lc.v.row(base + j) + off;
                        for (int c = 0; c < dh; ++c) ctxr[c] += w * vj[c];
                    }
                }
            }
        }

        Mat attn_out(BT, d);
        matmul(lc.ctx, lp.wo, attn_out);
        add_bias(attn_out, lp.bo);
        if (drop) {
            lc.attnout_drop = nn::dropout_mask(BT, d, cfg.dropout_rate, *rng);
            nn::apply_mask(attn_out, lc.attnout_drop);
        }
        lc.r1 = Mat(BT, d);
        for (size_t i = 0; i < lc.r1.a.size(); ++i) lc.r1.a[i] = lc.x_in.a[i] + attn_out.a[i];
        nn::layernorm_forward(lc.r1, lp.ln1_g, lp.ln1_b, cfg.layernorm_eps, lc.x1, lc.mu1, lc.rstd1);

        lc.h_pre = Mat(BT, cfg.d_ff);
        matmul(lc.x1, lp.w1, lc.h_pre);
        add_bias(lc.h_pre, lp.b1);
        lc.h_act = Mat(BT, cfg.d_ff);
        for (size_t i = 0; i < lc.h_pre.a.size(); ++i) lc.h_act.a[i] = nn::gelu(lc.h_pre.a[i]);
        Mat ff_out(BT, d);
        matmul(lc.h_act, lp.w2, ff_out);
        add_bias(ff_out, lp.b2);
        if (drop) {
            lc.ff_drop = nn::dropout_mask(BT, d, cfg.dropout_rate, *rng);
            nn::apply_mask(ff_out, lc.ff_drop);
        }
        lc.r2 = Mat(BT, d);
        for (size_t i = 0; i < lc.r2.a.size(); ++i) lc.r2.a[i] = lc.x1.a[i] + ff_out.a[i];
        nn::layernorm_forward(lc.r2, lp.ln2_g, lp.ln2_b, cfg.layernorm_eps, lc.x2, lc.mu2, lc.rstd2);

        x = &lc.x2;
    }
}

// ---------------------------------------------------------------------------
// Heads and losses
// ---------------------------------------------------------------------------

enum class LossKind { Mlm, Nsp, TokenCls };

struct LossValue {
    double value = 0.0;
    int live = 0;             // positions that carried a target
    bool no_live_positions() const { return live == 0; }
};

// Mean cross-entropy over rows whose target is not the sentinel. Returns 0
// with live == 0 when nothing is predicted.
inline LossValue cross_entropy_mean(const Mat& logits, const std::vector<int>& targets) {
    if (targets.size() != static_cast<size_t>(logits.rows)) throw Error("ShapeMismatch", "targets vs logits rows");
    LossValue out;
    double sum = 0.0;
    for (int i = 0; i < logits.rows; ++i) {
        int t = targets[i];
        if (t == kNoTarget) continue;
        if (t < 0 || t >= logits.cols) throw Error("TargetOutOfRange", std::to_string(t));
        const double* z = logits.row(i);
        double maxv = z[0];
        for (int j = 1; j < logits.cols; ++j) maxv = std::max(maxv, z[j]);
        double lse = 0.0;
        for (int j = 0; j < logits.cols; ++j) lse += std::exp(z[j] - maxv);
        lse = maxv + std::log(lse);
        sum += lse - z[t];
        ++out.live;
    }
    out.value = out.live > 0 ? sum / out.live : 0.0;
    return out;
}

inline LossValue loss(const Mat& logits, const std::vector<int>& targets, LossKind) {
    return cross_entropy_mean(logits, targets);
}

struct ForwardResult {
    Mat hidden;        // (B*T)×d
    Mat mlm_logits;    // (B*T)×vocab
    Mat nsp_logits;    // B×2
    Mat label_logits;  // (B*T)×n_labels
};

namespace detail_model {

inline const Mat& mlm_projection(const ModelParameters& p, const ModelConfig& cfg) {
    return cfg.tie_mlm ? p.tok_emb : p.mlm_w;
}

}  // namespace detail_model

// Full forward pass in evaluation mode (dropout off, deterministic).
inline ForwardResult forward(const ModelParameters& p, const ModelConfig& cfg, const Batch& batch) {
    ForwardCache cache;
    encoder_forward(p, cfg, batch, /*training=*/false, nullptr, cache);
    ForwardResult r;
    r.hidden = cache.hidden();
    const Mat& proj = detail_model::mlm_projection(p, cfg);
    r.mlm_logits = Mat(r.hidden.rows, cfg.vocab_size);
    matmul_nt(r.hidden, proj, r.mlm_logits);
    add_bias(r.mlm_logits, p.mlm_b);
    r.nsp_logits = Mat(batch.batch_size, 2);
    for (int b = 0; b < batch.batch_size; ++b) {
        const double* cls = r.hidden.row(b * batch.seq_len);
        for (int j = 0; j < 2; ++j) {
            double s = p.nsp_b(0, j);
            for (int c = 0; c < cfg.d_model; ++c) s += cls[c] * p.nsp_w(c, j);
            r.nsp_logits(b, j) = s;
        }
    }
    r.label_logits = Mat(r.hidden.rows, cfg.n_labels);
    matmul(r.hidden, p.cls_w, r.label_logits);
    add_bias(r.label_logits, p.cls_b);
    return r;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Relative contribution of each head to the total loss; 0 switches a head
// (and its gradients) off entirely.
struct HeadWeights {
    double mlm = 0.0;
    double nsp = 0.0;
    double cls = 0.0;
};

struct StepResult {
    ModelParameters grads;
    LossValue mlm, nsp, cls;
    double total = 0.0;
};

namespace detail_model {

inline void encoder_backward(const ModelParameters& p, const ModelConfig& cfg, const Batch& batch,
                             const ForwardCache& cache, Mat& dx, ModelParameters& g) {
    const int B = batch.batch_size, T = batch.seq_len, d = cfg.d_model;
    const int H = cfg.n_heads, dh = d / H, BT = B * T;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams& lp = p.layers[l];
        const LayerCache& lc = cache.layers[l];
        LayerParams& gl = g.layers[l];

        Mat dr2;
        nn::layernorm_backward(dx, lc.r2, lp.ln2_g, lc.mu2, lc.rstd2, dr2, gl.ln2_g, gl.ln2_b);

        Mat dff = dr2;  // residual branch into the feed-forward output
        if (!lc.ff_drop.empty()) nn::apply_mask(dff, lc.ff_drop);
        Mat dh_act(BT, cfg.d_ff);
        matmul_nt(dff, lp.w2, dh_act);
        matmul_tn(lc.h_act, dff, gl.w2);
        bias_grad(dff, gl.b2);
        for (size_t i = 0; i < dh_act.a.size(); ++i) dh_act.a[i] *= nn::gelu_grad(lc.h_pre.a[i]);
        Mat dx1(BT, d);
        matmul_nt(dh_act, lp.w1, dx1);
        matmul_tn(lc.x1, dh_act, gl.w1);
        bias_grad(dh_act, gl.b1);
        for (size_t i = 0; i < dx1.a.size(); ++i) dx1.a[i] += dr2.a[i];  // residual

        Mat dr1;
        nn::layernorm_backward(dx1, lc.r1, lp.ln1_g, lc.mu1, lc.rstd1, dr1, gl.ln1_g, gl.ln1_b);

        Mat dao = dr1;  // gradient into the attention-output branch
        if (!lc.attnout_drop.empty()) nn::apply_mask(dao, lc.attnout_drop);
        Mat dctx(BT, d);
        matmul_nt(dao, lp.wo, dctx);
        matmul_tn(lc.ctx, dao, gl.wo);
        bias_grad(dao, gl.bo);

        Mat dq(BT, d), dk(BT, d), dv(BT, d);
        std::vector<double> da(T), ds(T);
        for (int b = 0; b < B; ++b) {
            const int base = b * T;
            for (int h = 0; h < H; ++h) {
                const Mat& A = lc.attn[static_cast<size_t>(b) * H + h];
                const Mat* dmask = lc.attn_drop.empty() ? nullptr
                                                        : &lc.attn_drop[static_cast<size_t>(b) * H + h];
                const int off = h * dh;
                for (int i = 0; i < T; ++i) {
                    const double* ar = A.row(i);
                    const double* dctx_i = dctx.row(base + i) + off;
                    // dV and d(attention probs)
                    double dot_sum = 0.0;
                    for (int j = 0; j < T; ++j) {
                        if (ar[j] == 0.0 && (dmask == nullptr)) { da[j] = 0.0; continue; }
                        if (!batch.attention_mask[base + j]) { da[j] = 0.0; continue; }
                        const double* vj = lc.v.row(base + j) + off;
                        double dd = 0.0;
                        for (int c = 0; c < dh; ++c) dd += dctx_i[c] * vj[c];
                        double mval = dmask ? (*dmask)(i, j) : 1.0;
                        da[j] = dd * mval;
                        double a_used = ar[j] * mval;
                        if (a_used != 0.0) {
                            double* dvj = dv.row(base + j) + off;
                            for (int c = 0; c < dh; ++c) dvj[c] += a_used * dctx_i[c];
                        }
                        dot_sum += ar[j] * da[j];
                    }
                    // softmax backward, then score gradients into q/k
                    double* dqi = dq.row(base + i) + off;
                    for (int j = 0; j < T; ++j) {
                        double dsij = ar[j] * (da[j] - dot_sum);
                        if (dsij == 0.0) continue;
                        dsij *= scale;
                        const double* kj = lc.k.row(base + j) + off;
                        const double* qi = lc.q.row(base + i) + off;
                        double* dkj = dk.row(base + j) + off;
                        for (int c = 0; c < dh; ++c) {
                            dqi[c] += dsij * kj[c];
                            dkj[c] += dsij * qi[c];
                        }
                    }
                }
            }
        }

        Mat dx_in(BT, d);
        matmul_nt(dq, lp.wq, dx_in);
        matmul_nt(dk, lp.wk, dx_in, /*accumulate=*/true);
        matmul_nt(dv, lp.wv, dx_in, /*accumulate=*/true);
        matmul_tn(lc.x_in, dq, gl.wq); bias_grad(dq, gl.bq);
        matmul_tn(lc.x_in, dk, gl.wk); bias_grad(dk, gl.bk);
        matmul_tn(lc.x_in, dv, gl.wv); bias_grad(dv, gl.bv);
        for (size_t i = 0; i < dx_in.a.size(); ++i) dx_in.a[i] += dr1.a[i];  // residual

        dx = std::move(dx_in);
    }

    if (!cache.emb_drop.empty()) nn::apply_mask(dx, cache.emb_drop);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t) {
            int r = b * T + t;
            const double* dr = dx.row(r);
            double* te = g.tok_emb.row(batch.ids[r]);
            double* pe = g.pos_emb.row(t);
            double* se = g.seg_emb.row(batch.segment_ids[r]);
            for (int j = 0; j < d; ++j) {
                te[j] += dr[j];
                pe[j] += dr[j];
                se[j] += dr[j];
            }
        }
    }
}

}  // namespace detail_model

// Forward + loss + full analytic backward for any weighted combination of the
// three heads. MLM logits are materialized only at predicted positions.
inline StepResult loss_and_gradients(const ModelParameters& p, const ModelConfig& cfg, const Batch& batch,
                                     const HeadWeights& w, bool training = false, Rng* rng = nullptr) {
    ForwardCache cache;
    encoder_forward(p, cfg, batch, training, rng, cache);
    const Mat& hf = cache.hidden();
    const int BT = hf.rows, d = cfg.d_model;

    StepResult res;
    res.grads = zero_params(cfg);
    Mat dx(BT, d);

    if (w.mlm != 0.0) {
        std::vector<int> rows;
        for (int i = 0; i < BT; ++i) {
            if (batch.mlm_targets[i] != kNoTarget) rows.push_back(i);
        }
        res.mlm.live = static_cast<int>(rows.size());
        if (!rows.empty()) {
            const Mat& proj = detail_model::mlm_projection(p, cfg);
            Mat& dproj = cfg.tie_mlm ? res.grads.tok_emb : res.grads.mlm_w;
            const int V = cfg.vocab_size;
            std::vector<double> z(V);
            double sum = 0.0;
            double factor = w.mlm / rows.size();
            for (int r : rows) {
                const double* hr = hf.row(r);
                double maxv = -1e300;
                for (int v = 0; v < V; ++v) {
                    double s = p.mlm_b(0, v);
                    const double* pr = proj.row(v);
                    for (int c = 0; c < d; ++c) s += hr[c] * pr[c];
                    z[v] = s;
                    if (s > maxv) maxv = s;
                }
                double denom = 0.0;
                for (int v = 0; v < V; ++v) { z[v] = std::exp(z[v] - maxv); denom += z[v]; }
                int t = batch.mlm_targets[r];
                sum += -(std::log(z[t] / denom));
                double* dxr = dx.row(r);
                for (int v = 0; v < V; ++v) {
                    double dz = (z[v] / denom - (v == t ? 1.0 : 0.0)) * factor;
                    if (dz == 0.0) continue;
                    const double* pr = proj.row(v);
                    double* dpr = dproj.row(v);
                    for (int c = 0; c < d; ++c) {
                        dxr[c] += dz * pr[c];
                        dpr[c] += dz * hr[c];
                    }
                    res.grads.mlm_b(0, v) += dz;
                }
            }
            res.mlm.value = sum / rows.size();
            res.total += w.mlm * res.mlm.value;
        }
    }

    if (w.nsp != 0.0) {
        const int B = batch.batch_size, T = batch.seq_len;
        double sum = 0.0;
        int live = 0;
        for (int b = 0; b < B; ++b) {
            if (batch.nsp_targets[b] != kNoTarget) ++live;
        }
        if (live > 0) {
            double factor = w.nsp / live;
            for (int b = 0; b < B; ++b) {
                int t = batch.nsp_targets[b];
                if (t == kNoTarget) continue;
                const double* cls = hf.row(b * T);
                double z0 = p.nsp_b(0, 0), z1 = p.nsp_b(0, 1);
                for (int c = 0; c < d; ++c) {
                    z0 += cls[c] * p.nsp_w(c, 0);
                    z1 += cls[c] * p.nsp_w(c, 1);
                }
                double maxv = std::max(z0, z1);
                double e0 = std::exp(z0 - maxv), e1 = std::exp(z1 - maxv);
                double denom = e0 + e1;
                double p0 = e0 / denom, p1 = e1 / denom;
                sum += -std::log(t == 0 ? p0 : p1);
                double dz0 = (p0 - (t == 0 ? 1.0 : 0.0)) * factor;
                double dz1 = (p1 - (t == 1 ? 1.0 : 0.0)) * factor;
                double* dxr = dx.row(b * T);
                for (int c = 0; c < d; ++c) {
                    dxr[c] += dz0 * p.nsp_w(c, 0) + dz1 * p.nsp_w(c, 1);
                    res.grads.nsp_w(c, 0) += dz0 * cls[c];
                    res.grads.nsp_w(c, 1) += dz1 * cls[c];
                }
                res.grads.nsp_b(0, 0) += dz0;
                res.grads.nsp_b(0, 1) += dz1;
            }
            res.nsp.value = sum / live;
            res.nsp.live = live;
            res.total += w.nsp * res.nsp.value;
        }
    }

    if (w.cls != 0.0) {
        const int L = cfg.n_labels;
        std::vector<int> rows;
        for (int i = 0; i < BT; ++i) {
            if (batch.token_label_targets[i] != kNoTarget) rows.push_back(i);
        }
        res.cls.live = static_cast<int>(rows.size());
        if (!rows.empty()) {
            double factor = w.cls / rows.size();
            double sum = 0.0;
            std::vector<double> z(L);
            for (int r : rows) {
                const double* hr = hf.row(r);
                double maxv = -1e300;
                for (int j = 0; j < L; ++j) {
                    double s = p.cls_b(0, j);
                    for (int c = 0; c < d; ++c) s += hr[c] * p.cls_w(c, j);
                    z[j] = s;
                    if (s > maxv) maxv = s;
                }
                double denom = 0.0;
                for (int j = 0; j < L; ++j) { z[j] = std::exp(z[j] - maxv); denom += z[j]; }
                int t = batch.token_label_targets[r];
                sum += -std::log(z[t] / denom);
                double* dxr = dx.row(r);
                for (int j = 0; j < L; ++j) {
                    double dz = (z[j] / denom - (j == t ? 1.0 : 0.0)) * factor;
                    for (int c = 0; c < d; ++c) {
                        dxr[c] += dz * p.cls_w(c, j);
                        res.grads.cls_w(c, j) += dz * hr[c];
                    }
                    res.grads.cls_b(0, j) += dz;
                }
            }
            res.cls.value = sum / rows.size();
            res.total += w.cls * res.cls.value;
        }
    }

    detail_model::encoder_backward(p, cfg, batch, cache, dx, res.grads);
    return res;
}

// Gradients of one loss kind; exact up to floating point for the implemented
// graph (checked against central finite differences in the test suite).
inline StepResult backward(const ModelParameters& p, const ModelConfig& cfg, const Batch& batch,
                           LossKind kind) {
    HeadWeights w;
    switch (kind) {
        case LossKind::Mlm: w.mlm = 1.0; break;
        case LossKind::Nsp: w.nsp = 1.0; break;
        case LossKind::TokenCls: w.cls = 1.0; break;
    }
    return loss_and_gradients(p, cfg, batch, w);
}

// ---------------------------------------------------------------------------
// Checkpoints: self-describing container with a config block, named tensors
// with explicit shapes, little-endian doubles, and the hash of the
// vocabulary file the model was trained with.
// ---------------------------------------------------------------------------

namespace detail_model {

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'I', 'X', 'C', 'K', 'P', '1'};

inline void write_u64(std::ostream& out, uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 8);
}

inline uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    if (!in) throw Error("MalformedCheckpoint", "truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

inline void write_f64(std::ostream& out, double d) { write_u64(out, std::bit_cast<uint64_t>(d)); }
inline double read_f64(std::istream& in) { return std::bit_cast<double>(read_u64(in)); }

inline std::string config_block(const ModelConfig& c, uint64_t vocab_hash) {
    std::ostringstream os;
    os << "n_layers=" << c.n_layers << "\nn_heads=" << c.n_heads << "\nd_model=" << c.d_model
       << "\nd_ff=" << c.d_ff << "\nmax_seq=" << c.max_seq << "\nvocab_size=" << c.vocab_size
       << "\nn_labels=" << c.n_labels << "\ntie_mlm=" << (c.tie_mlm ? 1 : 0);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", c.dropout_rate);
    os << "\ndropout_rate=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", c.layernorm_eps);
    os << "\nlayernorm_eps=" << buf;
    std::snprintf(buf, sizeof buf, "%.17g", c.init_std);
    os << "\ninit_std=" << buf;
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(vocab_hash));
    os << "\nvocab_hash=" << buf << "\n";
    return os.str();
}

}  // namespace detail_model

struct Checkpoint {
    ModelConfig config;
    ModelParameters params;
    uint64_t vocab_hash = 0;
};

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ModelParameters& p,
                            uint64_t vocab_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("FileWriteFailed", path);
    out.write(detail_model::kCheckpointMagic, 8);
    std::string block = detail_model::config_block(cfg, vocab_hash);
    detail_model::write_u64(out, block.size());
    out.write(block.data(), static_cast<std::streamsize>(block.size()));
    uint64_t count = 0;
    for_each_tensor(const_cast<ModelParameters&>(p), [&](const std::string&, Mat&) { ++count; });
    detail_model::write_u64(out, count);
    for_each_tensor(const_cast<ModelParameters&>(p), [&](const std::string& name, Mat& m) {
        detail_model::write_u64(out, name.size());
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail_model::write_u64(out, static_cast<uint64_t>(m.rows));
        detail_model::write_u64(out, static_cast<uint64_t>(m.cols));
        for (double v : m.a) detail_model::write_f64(out, v);
    });
    if (!out) throw Error("FileWriteFailed", path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("FileNotFound", path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail_model::kCheckpointMagic, 8) != 0) {
        throw Error("MalformedCheckpoint", path + ": bad magic");
    }
    uint64_t block_len = detail_model::read_u64(in);
    std::string block(block_len, '\0');
    in.read(block.data(), static_cast<std::streamsize>(block_len));
    if (!in) throw Error("MalformedCheckpoint", path + ": truncated config");

    Checkpoint ck;
    std::istringstream bs(block);
    std::string line;
    std::map<std::string, std::string> kv;
    while (std::getline(bs, line)) {
        size_t eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto geti = [&](const char* k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw Error("MalformedCheckpoint", std::string("missing ") + k);
        return std::stoi(it->second);
    };
    auto getd = [&](const char* k) { return std::stod(kv.at(k)); };
    ck.config.n_layers = geti("n_layers");
    ck.config.n_heads = geti("n_heads");
    ck.config.d_model = geti("d_model");
    ck.config.d_ff = geti("d_ff");
    ck.config.max_seq = geti("max_seq");
    ck.config.vocab_size = geti("vocab_size");
    ck.config.n_labels = geti("n_labels");
    ck.config.tie_mlm = geti("tie_mlm") != 0;
    ck.config.dropout_rate = getd("dropout_rate");
    ck.config.layernorm_eps = getd("layernorm_eps");
    ck.config.init_std = getd("init_std");
    ck.vocab_hash = std::stoull(kv.at("vocab_hash"), nullptr, 16);

    ck.params = zero_params(ck.config);
    std::map<std::string, Mat*> slots;
    for_each_tensor(ck.params, [&](const std::string& name, Mat& m) { slots[name] = &m; });
    uint64_t count = detail_model::read_u64(in);
    for (uint64_t i = 0; i < count; ++i) {
        uint64_t name_len = detail_model::read_u64(in);
        std::string name(name_len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(name_len));
        uint64_t rows = detail_model::read_u64(in);
        uint64_t cols = detail_model::read_u64(in);
        auto it = slots.find(name);
        if (it == slots.end()) throw Error("MalformedCheckpoint", path + ": unknown tensor " + name);
        Mat& m = *it->second;
        if (static_cast<uint64_t>(m.rows) != rows || static_cast<uint64_t>(m.cols) != cols) {
            throw Error("MalformedCheckpoint", path + ": shape mismatch for " + name);
        }
        for (double& v : m.a) v = detail_model::read_f64(in);
        slots.erase(it);
    }
    if (!slots.empty()) throw Error("MalformedCheckpoint", path + ": missing tensors");
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path, uint64_t expected_vocab_hash) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.vocab_hash != expected_vocab_hash) {
        throw Error("VocabHashMismatch", path);
    }
    return ck;
}

}  // namespace cmix
