#include "cptlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cptlab {

namespace {

constexpr float kLnEps = 1e-5f;
constexpr float kInitStd = 0.02f;

Matrix randn(int rows, int cols, float stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            m(i, j) = static_cast<float>(rng.normal()) * stddev;
        }
    }
    return m;
}

Matrix constant(int rows, int cols, float v) { return Matrix::Constant(rows, cols, v); }

// Per-row layer norm with plain loops so a row's result never depends on how
// many rows are processed together.
struct LnOut {
    Matrix y, xhat;
    std::vector<float> rstd;
};

LnOut layer_norm(const Matrix& x, const Matrix& g, const Matrix& b) {
    const int n = static_cast<int>(x.rows());
    const int d = static_cast<int>(x.cols());
    LnOut out{Matrix(n, d), Matrix(n, d), std::vector<float>(n)};
    for (int i = 0; i < n; ++i) {
        const float* row = x.row(i).data();
        float mean = 0.0f;
        for (int j = 0; j < d; ++j) {
            mean += row[j];
        }
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int j = 0; j < d; ++j) {
            const float c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<float>(d);
        const float rstd = 1.0f / std::sqrt(var + kLnEps);
        out.rstd[i] = rstd;
        for (int j = 0; j < d; ++j) {
            const float xh = (row[j] - mean) * rstd;
            out.xhat(i, j) = xh;
            out.y(i, j) = xh * g(0, j) + b(0, j);
        }
    }
    return out;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const std::vector<float>& rstd,
                           const Matrix& g, Matrix* dg, Matrix* db) {
    const int n = static_cast<int>(dy.rows());
    const int d = static_cast<int>(dy.cols());
    Matrix dx(n, d);
    std::vector<float> dxhat(d);
    for (int i = 0; i < n; ++i) {
        float mean_dxhat = 0.0f;
        float mean_dxhat_xhat = 0.0f;
        for (int j = 0; j < d; ++j) {
            dxhat[j] = dy(i, j) * g(0, j);
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat(i, j);
        }
        mean_dxhat /= static_cast<float>(d);
        mean_dxhat_xhat /= static_cast<float>(d);
        for (int j = 0; j < d; ++j) {
            dx(i, j) = rstd[i] * (dxhat[j] - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
        }
        if (dg != nullptr) {
            for (int j = 0; j < d; ++j) {
                (*dg)(0, j) += dy(i, j) * xhat(i, j);
                (*db)(0, j) += dy(i, j);
            }
        }
    }
    return dx;
}

constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::tanh(kGeluC * (x + 0.044715f * x * x * x)));
}

inline float gelu_grad(float x) {
    const float t = std::tanh(kGeluC * (x + 0.044715f * x * x * x));
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * 0.044715f * x * x);
}

struct HeadCache {
    Matrix q, k, v, o;          // rows x head_dim
    std::vector<Matrix> probs;  // one per sequence
};

struct LayerTrace {
    LnOut ln1;
    std::vector<HeadCache> heads;
    LnOut ln2;
    Matrix hpre, hact;
    Matrix wq, wv;  // effective (merged) query/value weights
};

// Effective query/value maps including any adapter update.
std::pair<Matrix, Matrix> effective_qv(const Checkpoint& ckpt, int layer) {
    const LayerWeights& lw = ckpt.base->layers[layer];
    if (!ckpt.adapters) {
        return {lw.wq, lw.wv};
    }
    const LayerAdapters& la = ckpt.adapters->layers[layer];
    const float s = ckpt.adapters->config.scale();
    Matrix wq = lw.wq;
    Matrix wv = lw.wv;
    wq.noalias() += s * (la.q_down * la.q_up);
    wv.noalias() += s * (la.v_down * la.v_up);
    return {std::move(wq), std::move(wv)};
}

Matrix head_forward(const Matrix& a, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                    const Matrix& wo, int h, int dh, const std::vector<int>& offsets,
                    HeadCache* cache) {
    const int n = static_cast<int>(a.rows());
    Matrix q = a * wq.middleCols(h * dh, dh);
    Matrix k = a * wk.middleCols(h * dh, dh);
    Matrix v = a * wv.middleCols(h * dh, dh);
    Matrix o(n, dh);
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Matrix> probs;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const int off = offsets[s];
        const int len = offsets[s + 1] - off;
        Matrix p = (q.middleRows(off, len) * k.middleRows(off, len).transpose()) * scale;
        for (int i = 0; i < len; ++i) {
            float mx = -INFINITY;
            for (int j = 0; j <= i; ++j) {
                mx = std::max(mx, p(i, j));
            }
            float sum = 0.0f;
            for (int j = 0; j <= i; ++j) {
                p(i, j) = std::exp(p(i, j) - mx);
                sum += p(i, j);
            }
            const float inv = 1.0f / sum;
            for (int j = 0; j <= i; ++j) {
                p(i, j) *= inv;
            }
            for (int j = i + 1; j < len; ++j) {
                p(i, j) = 0.0f;
            }
        }
        o.middleRows(off, len) = p * v.middleRows(off, len);
        if (cache != nullptr) {
            probs.push_back(std::move(p));
        }
    }
    Matrix out = o * wo.middleRows(h * dh, dh);
    if (cache != nullptr) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->o = std::move(o);
        cache->probs = std::move(probs);
    }
    return out;
}

Matrix mlp_forward(const Matrix& a2, const LayerWeights& lw, Matrix* hpre_out, Matrix* hact_out) {
    Matrix hpre = a2 * lw.w1;
    hpre.rowwise() += lw.b1.row(0);
    Matrix hact = hpre.unaryExpr([](float x) { return gelu(x); });
    Matrix m = hact * lw.w2;
    m.rowwise() += lw.b2.row(0);
    if (hpre_out != nullptr) {
        *hpre_out = std::move(hpre);
        *hact_out = std::move(hact);
    }
    return m;
}

Matrix project_logits(const Matrix& resid_rows, const Weights& w, LnOut* ln_cache) {
    LnOut ln = layer_norm(resid_rows, w.lnf_g, w.lnf_b);
    Matrix logits = ln.y * w.w_out;
    if (ln_cache != nullptr) {
        *ln_cache = std::move(ln);
    }
    return logits;
}

Matrix embed(const Weights& w, const Tokens& flat, const std::vector<int>& positions) {
    const int d = static_cast<int>(w.tok_emb.cols());
    Matrix x(static_cast<int>(flat.size()), d);
    for (std::size_t i = 0; i < flat.size(); ++i) {
        x.row(static_cast<int>(i)) = w.tok_emb.row(flat[i]) + w.pos_emb.row(positions[i]);
    }
    return x;
}

void add_named(const std::string& prefix, std::vector<std::pair<std::string, Matrix*>>& out,
               LayerWeights& lw) {
    out.emplace_back(prefix + "ln1_g", &lw.ln1_g);
    out.emplace_back(prefix + "ln1_b", &lw.ln1_b);
    out.emplace_back(prefix + "wq", &lw.wq);
    out.emplace_back(prefix + "wk", &lw.wk);
    out.emplace_back(prefix + "wv", &lw.wv);
    out.emplace_back(prefix + "wo", &lw.wo);
    out.emplace_back(prefix + "ln2_g", &lw.ln2_g);
    out.emplace_back(prefix + "ln2_b", &lw.ln2_b);
    out.emplace_back(prefix + "w1", &lw.w1);
    out.emplace_back(prefix + "b1", &lw.b1);
    out.emplace_back(prefix + "w2", &lw.w2);
    out.emplace_back(prefix + "b2", &lw.b2);
}

std::vector<std::pair<std::string, Matrix*>> named_tensors(Weights& w) {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("tok_emb", &w.tok_emb);
    out.emplace_back("pos_emb", &w.pos_emb);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        add_named("layer" + std::to_string(l) + ".", out, w.layers[l]);
    }
    out.emplace_back("lnf_g", &w.lnf_g);
    out.emplace_back("lnf_b", &w.lnf_b);
    out.emplace_back("w_out", &w.w_out);
    return out;
}

std::vector<std::pair<std::string, Matrix*>> named_tensors(Adapters& a) {
    std::vector<std::pair<std::string, Matrix*>> out;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "q_down", &a.layers[l].q_down);
        out.emplace_back(p + "q_up", &a.layers[l].q_up);
        out.emplace_back(p + "v_down", &a.layers[l].v_down);
        out.emplace_back(p + "v_up", &a.layers[l].v_up);
    }
    return out;
}

}  // namespace

struct ForwardTrace {
    Tokens flat;
    std::vector<int> positions;
    std::vector<LayerTrace> layers;
    LnOut lnf;
    bool embed_overridden = false;
};

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_mlp < 1) {
        throw ConfigError("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model must be divisible by n_heads");
    }
    if (vocab_size < 2) {
        throw ConfigError("vocab_size must be at least 2");
    }
    if (max_seq_len < 2) {
        throw ConfigError("max_seq_len must be at least 2");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},   {"d_model", c.d_model},
         {"d_mlp", c.d_mlp},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_mlp = j.value("d_mlp", c.d_mlp);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const AdapterConfig& c) {
    j = {{"rank", c.rank}, {"alpha", c.alpha}, {"targets", {"query", "value"}}};
}

void from_json(const nlohmann::json& j, AdapterConfig& c) {
    c.rank = j.value("rank", c.rank);
    c.alpha = j.value("alpha", c.alpha);
}

Weights Weights::initialize(const ModelConfig& c) {
    c.validate();
    Rng rng(derive_seed(c.seed, "weights"));
    const int d = c.d_model;
    const float proj_std = kInitStd / std::sqrt(2.0f * static_cast<float>(c.n_layers));
    Weights w;
    w.tok_emb = randn(c.vocab_size, d, kInitStd, rng);
    w.pos_emb = randn(c.max_seq_len, d, kInitStd, rng);
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights lw;
        lw.ln1_g = constant(1, d, 1.0f);
        lw.ln1_b = constant(1, d, 0.0f);
        lw.wq = randn(d, d, kInitStd, rng);
        lw.wk = randn(d, d, kInitStd, rng);
        lw.wv = randn(d, d, kInitStd, rng);
        lw.wo = randn(d, d, proj_std, rng);
        lw.ln2_g = constant(1, d, 1.0f);
        lw.ln2_b = constant(1, d, 0.0f);
        lw.w1 = randn(d, c.d_mlp, kInitStd, rng);
        lw.b1 = constant(1, c.d_mlp, 0.0f);
        lw.w2 = randn(c.d_mlp, d, proj_std, rng);
        lw.b2 = constant(1, d, 0.0f);
        w.layers.push_back(std::move(lw));
    }
    w.lnf_g = constant(1, d, 1.0f);
    w.lnf_b = constant(1, d, 0.0f);
    w.w_out = randn(d, c.vocab_size, kInitStd, rng);
    return w;
}

Weights Weights::zeros(const ModelConfig& c) {
    Weights w = initialize(c);
    w.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return w;
}

void Weights::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
    for (auto& [name, m] : named_tensors(*this)) {
        fn(name, *m);
    }
}

void Weights::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    for (auto& [name, m] : named_tensors(const_cast<Weights&>(*this))) {
        fn(name, *m);
    }
}

std::size_t Weights::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

Adapters Adapters::zeros_like() const {
    Adapters z = *this;
    z.visit([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

void Adapters::visit(const std::function<void(const std::string&, Matrix&)>& fn) {
    for (auto& [name, m] : named_tensors(*this)) {
        fn(name, *m);
    }
}

void Adapters::visit(const std::function<void(const std::string&, const Matrix&)>& fn) const {
    for (auto& [name, m] : named_tensors(const_cast<Adapters&>(*this))) {
        fn(name, *m);
    }
}

std::size_t Adapters::parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
}

Checkpoint make_checkpoint(const ModelConfig& config, Weights weights, int epoch) {
    config.validate();
    Checkpoint c;
    c.config = config;
    c.epoch = epoch;
    c.base = std::make_shared<const Weights>(std::move(weights));
    return c;
}

Checkpoint attach_adapters(const Checkpoint& ckpt, const AdapterConfig& config, std::uint64_t seed) {
    if (ckpt.adapters) {
        throw ConfigError("adapters already attached");
    }
    if (config.rank < 1) {
        throw ConfigError("adapter rank must be >= 1");
    }
    const int d = ckpt.config.d_model;
    const int r = config.rank;
    Rng rng(derive_seed(seed, "adapters"));
    // Kaiming-uniform style bound for the down projection; up starts at zero.
    const float bound = 1.0f / std::sqrt(static_cast<float>(d));
    auto uniform = [&](int rows, int cols) {
        Matrix m(rows, cols);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                m(i, j) = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
            }
        }
        return m;
    };
    Adapters a;
    a.config = config;
    for (int l = 0; l < ckpt.config.n_layers; ++l) {
        LayerAdapters la;
        la.q_down = uniform(d, r);
        la.q_up = Matrix::Zero(r, d);
        la.v_down = uniform(d, r);
        la.v_up = Matrix::Zero(r, d);
        a.layers.push_back(std::move(la));
    }
    Checkpoint out = ckpt;
    out.adapters = std::move(a);
    return out;
}

std::string NodeLayout::name(int node) const {
    if (node == 0) {
        return "embed";
    }
    if (node == count()) {
        return "logits";
    }
    const int layer = (node - 1) / (n_heads + 1);
    const int slot = (node - 1) % (n_heads + 1);
    if (slot == n_heads) {
        return "m" + std::to_string(layer);
    }
    return "a" + std::to_string(layer) + ".h" + std::to_string(slot);
}

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
    if (tokens.empty()) {
        throw ConfigError("forward: empty token sequence");
    }
    if (static_cast<int>(tokens.size()) > config.max_seq_len) {
        throw ConfigError("forward: sequence longer than max_seq_len");
    }
    for (TokenId t : tokens) {
        if (t < 0 || t >= config.vocab_size) {
            throw ConfigError("forward: token id " + std::to_string(t) + " out of range");
        }
    }
}

ForwardResult forward_batch(const Checkpoint& ckpt, std::span<const Tokens> sequences,
                            const ForwardOptions& opts) {
    const ModelConfig& cfg = ckpt.config;
    const Weights& w = *ckpt.base;
    const int dh = cfg.head_dim();
    const NodeLayout nodes(cfg);

    auto trace = std::make_shared<ForwardTrace>();
    ForwardResult res;
    res.offsets.push_back(0);
    for (const Tokens& seq : sequences) {
        check_tokens(cfg, seq);
        for (std::size_t i = 0; i < seq.size(); ++i) {
            trace->flat.push_back(seq[i]);
            trace->positions.push_back(static_cast<int>(i));
        }
        res.offsets.push_back(static_cast<int>(trace->flat.size()));
    }

    Matrix x;
    if (opts.embed_override != nullptr) {
        if (sequences.size() != 1 || opts.embed_override->rows() != res.offsets.back() ||
            opts.embed_override->cols() != cfg.d_model) {
            throw ConfigError("embed_override must match a single sequence");
        }
        x = *opts.embed_override;
        trace->embed_overridden = true;
    } else {
        x = embed(w, trace->flat, trace->positions);
    }
    if (opts.capture) {
        res.record.emplace();
        res.record->outputs.resize(nodes.count());
        res.record->outputs[0] = x;
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        LayerTrace lt;
        auto [wq, wv] = effective_qv(ckpt, l);
        lt.ln1 = layer_norm(x, lw.ln1_g, lw.ln1_b);
        lt.heads.resize(cfg.n_heads);
        std::vector<Matrix> head_out(cfg.n_heads);
        for (int h = 0; h < cfg.n_heads; ++h) {
            head_out[h] = head_forward(lt.ln1.y, wq, lw.wk, wv, lw.wo, h, dh, res.offsets,
                                       opts.keep_cache ? &lt.heads[h] : nullptr);
        }
        for (int h = 0; h < cfg.n_heads; ++h) {
            x += head_out[h];
        }
        lt.ln2 = layer_norm(x, lw.ln2_g, lw.ln2_b);
        Matrix m = mlp_forward(lt.ln2.y, lw, opts.keep_cache ? &lt.hpre : nullptr,
                               opts.keep_cache ? &lt.hact : nullptr);
        x += m;
        if (opts.capture) {
            for (int h = 0; h < cfg.n_heads; ++h) {
                res.record->outputs[nodes.head(l, h)] = std::move(head_out[h]);
            }
            res.record->outputs[nodes.mlp(l)] = std::move(m);
        }
        if (opts.keep_cache) {
            lt.wq = std::move(wq);
            lt.wv = std::move(wv);
            trace->layers.push_back(std::move(lt));
        }
    }

    if (opts.last_row_only) {
        Matrix last(static_cast<int>(sequences.size()), cfg.d_model);
        for (std::size_t s = 0; s + 1 < res.offsets.size(); ++s) {
            last.row(static_cast<int>(s)) = x.row(res.offsets[s + 1] - 1);
        }
        res.logits = project_logits(last, w, nullptr);
    } else {
        res.logits = project_logits(x, w, opts.keep_cache ? &trace->lnf : nullptr);
    }
    if (opts.keep_cache) {
        if (opts.last_row_only) {
            throw ConfigError("keep_cache requires full logits");
        }
        res.trace = std::move(trace);
    }
    return res;
}

ForwardResult forward(const Checkpoint& ckpt, const Tokens& tokens, bool capture) {
    ForwardOptions opts;
    opts.capture = capture;
    return forward_batch(ckpt, std::span<const Tokens>(&tokens, 1), opts);
}

Gradients Gradients::for_checkpoint(const Checkpoint& ckpt) {
    Gradients g;
    if (ckpt.adapters) {
        g.adapters = ckpt.adapters->zeros_like();
    } else {
        g.base = *ckpt.base;
        g.base->visit([](const std::string&, Matrix& m) { m.setZero(); });
    }
    return g;
}

void Gradients::zero() {
    if (base) {
        base->visit([](const std::string&, Matrix& m) { m.setZero(); });
    }
    if (adapters) {
        adapters->visit([](const std::string&, Matrix& m) { m.setZero(); });
    }
}

void backward(const Checkpoint& ckpt, const ForwardResult& fwd, const Matrix& dlogits,
              Gradients* grads, ActivationRecord* node_grads) {
    if (!fwd.trace) {
        throw ConfigError("backward requires a forward pass with keep_cache");
    }
    const ForwardTrace& tr = *fwd.trace;
    const ModelConfig& cfg = ckpt.config;
    const Weights& w = *ckpt.base;
    const int dh = cfg.head_dim();
    const NodeLayout nodes(cfg);
    Weights* gb = (grads != nullptr && grads->base) ? &*grads->base : nullptr;
    Adapters* ga = (grads != nullptr && grads->adapters) ? &*grads->adapters : nullptr;
    if (ga != nullptr && !ckpt.adapters) {
        throw ConfigError("adapter gradients requested for a checkpoint without adapters");
    }
    if (node_grads != nullptr) {
        node_grads->input_grads.assign(nodes.count() + 1, Matrix());
    }

    if (gb != nullptr) {
        gb->w_out.noalias() += tr.lnf.y.transpose() * dlogits;
    }
    Matrix daf = dlogits * w.w_out.transpose();
    Matrix dx = layer_norm_backward(daf, tr.lnf.xhat, tr.lnf.rstd, w.lnf_g,
                                    gb ? &gb->lnf_g : nullptr, gb ? &gb->lnf_b : nullptr);
    if (node_grads != nullptr) {
        node_grads->input_grads[nodes.count()] = dx;
    }

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = w.layers[l];
        const LayerTrace& lt = tr.layers[l];
        LayerWeights* gl = gb ? &gb->layers[l] : nullptr;

        // MLP
        if (gl != nullptr) {
            gl->w2.noalias() += lt.hact.transpose() * dx;
            gl->b2.row(0) += dx.colwise().sum();
        }
        Matrix dh_act = dx * lw.w2.transpose();
        Matrix dhpre(dh_act.rows(), dh_act.cols());
        for (Eigen::Index i = 0; i < dhpre.size(); ++i) {
            dhpre.data()[i] = dh_act.data()[i] * gelu_grad(lt.hpre.data()[i]);
        }
        if (gl != nullptr) {
            gl->w1.noalias() += lt.ln2.y.transpose() * dhpre;
            gl->b1.row(0) += dhpre.colwise().sum();
        }
        Matrix da2 = dhpre * lw.w1.transpose();
        Matrix dmlp_in = layer_norm_backward(da2, lt.ln2.xhat, lt.ln2.rstd, lw.ln2_g,
                                             gl ? &gl->ln2_g : nullptr, gl ? &gl->ln2_b : nullptr);
        if (node_grads != nullptr) {
            node_grads->input_grads[nodes.mlp(l)] = dmlp_in;
        }
        dx += dmlp_in;

        // attention heads
        const bool need_q = gl != nullptr || ga != nullptr;
        Matrix dwq, dwv;
        if (need_q) {
            dwq = Matrix::Zero(cfg.d_model, cfg.d_model);
            dwv = Matrix::Zero(cfg.d_model, cfg.d_model);
        }
        Matrix da_total = Matrix::Zero(dx.rows(), dx.cols());
        const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
        for (int h = 0; h < cfg.n_heads; ++h) {
            const HeadCache& hc = lt.heads[h];
            if (gl != nullptr) {
                gl->wo.middleRows(h * dh, dh).noalias() += hc.o.transpose() * dx;
            }
            Matrix dout = dx * lw.wo.middleRows(h * dh, dh).transpose();
            Matrix dq(dout.rows(), dh), dk(dout.rows(), dh), dv(dout.rows(), dh);
            for (std::size_t s = 0; s + 1 < fwd.offsets.size(); ++s) {
                const int off = fwd.offsets[s];
                const int len = fwd.offsets[s + 1] - off;
                const Matrix& p = hc.probs[s];
                Matrix dp = dout.middleRows(off, len) * hc.v.middleRows(off, len).transpose();
                dv.middleRows(off, len).noalias() = p.transpose() * dout.middleRows(off, len);
                Matrix ds(len, len);
                for (int i = 0; i < len; ++i) {
                    float dot = 0.0f;
                    for (int j = 0; j <= i; ++j) {
                        dot += dp(i, j) * p(i, j);
                    }
                    for (int j = 0; j < len; ++j) {
                        ds(i, j) = j <= i ? p(i, j) * (dp(i, j) - dot) * scale : 0.0f;
                    }
                }
                dq.middleRows(off, len).noalias() = ds * hc.k.middleRows(off, len);
                dk.middleRows(off, len).noalias() = ds.transpose() * hc.q.middleRows(off, len);
            }
            if (need_q) {
                dwq.middleCols(h * dh, dh).noalias() += lt.ln1.y.transpose() * dq;
                dwv.middleCols(h * dh, dh).noalias() += lt.ln1.y.transpose() * dv;
            }
            if (gl != nullptr) {
                gl->wk.middleCols(h * dh, dh).noalias() += lt.ln1.y.transpose() * dk;
            }
            Matrix da = dq * lt.wq.middleCols(h * dh, dh).transpose();
            da.noalias() += dk * lw.wk.middleCols(h * dh, dh).transpose();
            da.noalias() += dv * lt.wv.middleCols(h * dh, dh).transpose();
            if (node_grads != nullptr) {
                node_grads->input_grads[nodes.head(l, h)] =
                    layer_norm_backward(da, lt.ln1.xhat, lt.ln1.rstd, lw.ln1_g, nullptr, nullptr);
            }
            da_total += da;
        }
        if (gl != nullptr) {
            gl->wq += dwq;
            gl->wv += dwv;
        }
        if (ga != nullptr) {
            const LayerAdapters& la = ckpt.adapters->layers[l];
            LayerAdapters& gla = ga->layers[l];
            const float s = ckpt.adapters->config.scale();
            gla.q_down.noalias() += s * (dwq * la.q_up.transpose());
            gla.q_up.noalias() += s * (la.q_down.transpose() * dwq);
            gla.v_down.noalias() += s * (dwv * la.v_up.transpose());
            gla.v_up.noalias() += s * (la.v_down.transpose() * dwv);
        }
        dx += layer_norm_backward(da_total, lt.ln1.xhat, lt.ln1.rstd, lw.ln1_g,
                                  gl ? &gl->ln1_g : nullptr, gl ? &gl->ln1_b : nullptr);
    }

    if (node_grads != nullptr) {
        node_grads->input_grads[0] = Matrix();  // the embedding reads nothing
    }
    if (gb != nullptr && !tr.embed_overridden) {
        for (std::size_t i = 0; i < tr.flat.size(); ++i) {
            gb->tok_emb.row(tr.flat[i]) += dx.row(static_cast<int>(i));
            gb->pos_emb.row(tr.positions[i]) += dx.row(static_cast<int>(i));
        }
    }
}

namespace {

// Row-wise log-softmax cross-entropy; writes (softmax - onehot) * weight into dlogits.
double softmax_ce_row(const float* logits, int vocab, TokenId target, float weight, float* grad) {
    float mx = logits[0];
    for (int j = 1; j < vocab; ++j) {
        mx = std::max(mx, logits[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < vocab; ++j) {
        sum += std::exp(static_cast<double>(logits[j] - mx));
    }
    const double log_z = std::log(sum) + mx;
    if (grad != nullptr) {
        for (int j = 0; j < vocab; ++j) {
            grad[j] = static_cast<float>(std::exp(logits[j] - log_z)) * weight;
        }
        grad[target] -= weight;
    }
    return log_z - static_cast<double>(logits[target]);
}

std::size_t count_targets(std::span<const Sequence> batch) {
    std::size_t n = 0;
    for (const Sequence& s : batch) {
        const int from = std::max(1, s.loss_from);
        if (static_cast<int>(s.tokens.size()) > from) {
            n += s.tokens.size() - static_cast<std::size_t>(from);
        }
    }
    return n;
}

}  // namespace

LossResult loss_and_grad(const Checkpoint& ckpt, std::span<const Sequence> batch, Gradients& grads) {
    std::vector<Tokens> seqs;
    seqs.reserve(batch.size());
    for (const Sequence& s : batch) {
        seqs.push_back(s.tokens);
    }
    ForwardOptions opts;
    opts.keep_cache = true;
    ForwardResult fwd = forward_batch(ckpt, seqs, opts);
    LossResult res;
    res.targets = count_targets(batch);
    Matrix dlogits = Matrix::Zero(fwd.logits.rows(), fwd.logits.cols());
    if (res.targets == 0) {
        return res;
    }
    const float weight = 1.0f / static_cast<float>(res.targets);
    const int vocab = static_cast<int>(fwd.logits.cols());
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const int off = fwd.offsets[s];
        const int len = fwd.offsets[s + 1] - off;
        for (int p = std::max(1, batch[s].loss_from); p < len; ++p) {
            const int row = off + p - 1;
            res.ce_sum += softmax_ce_row(fwd.logits.row(row).data(), vocab, batch[s].tokens[p],
                                         weight, dlogits.row(row).data());
        }
    }
    backward(ckpt, fwd, dlogits, &grads);
    return res;
}

LossResult evaluate_loss(const Checkpoint& ckpt, std::span<const Sequence> samples,
                         std::size_t batch_size) {
    LossResult res;
    for (std::size_t start = 0; start < samples.size(); start += batch_size) {
        const std::size_t end = std::min(samples.size(), start + batch_size);
        std::vector<Tokens> seqs;
        for (std::size_t i = start; i < end; ++i) {
            seqs.push_back(samples[i].tokens);
        }
        ForwardResult fwd = forward_batch(ckpt, seqs);
        const int vocab = static_cast<int>(fwd.logits.cols());
        for (std::size_t i = start; i < end; ++i) {
            const int off = fwd.offsets[i - start];
            const int len = fwd.offsets[i - start + 1] - off;
            for (int p = std::max(1, samples[i].loss_from); p < len; ++p) {
                res.ce_sum += softmax_ce_row(fwd.logits.row(off + p - 1).data(), vocab,
                                             samples[i].tokens[p], 0.0f, nullptr);
                ++res.targets;
            }
        }
    }
    return res;
}

double perplexity(const Checkpoint& ckpt, std::span<const Sequence> samples) {
    if (samples.empty()) {
        throw ConfigError("perplexity: no samples");
    }
    const LossResult r = evaluate_loss(ckpt, samples);
    if (r.targets == 0) {
        throw ConfigError("perplexity: samples contain no targets");
    }
    return std::exp(r.mean_ce());
}

int argmax_lowest(std::span<const float> values) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(values.size()); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return best;
}

Tokens generate_greedy(const Checkpoint& ckpt, const Tokens& prompt, TokenId eos, int max_new) {
    const ModelConfig& cfg = ckpt.config;
    if (static_cast<int>(prompt.size()) + max_new > cfg.max_seq_len) {
        throw ConfigError("generate_greedy: prompt does not leave room for max_new tokens");
    }
    check_tokens(cfg, prompt);
    Tokens out;
    if (max_new <= 0) {
        return out;
    }
    const Weights& w = *ckpt.base;
    const int dh = cfg.head_dim();
    const int n = static_cast<int>(prompt.size());
    const std::vector<int> offsets{0, n};
    std::vector<int> positions(prompt.size());
    std::iota(positions.begin(), positions.end(), 0);

    // Prefill: run the prompt once and keep per-head keys/values.
    struct LayerKv {
        Matrix wq, wv;
        std::vector<Matrix> k, v;  // per head, max_seq_len x head_dim
    };
    std::vector<LayerKv> kv(cfg.n_layers);
    Matrix x = embed(w, prompt, positions);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        auto [wq, wv] = effective_qv(ckpt, l);
        LnOut ln = layer_norm(x, lw.ln1_g, lw.ln1_b);
        kv[l].k.resize(cfg.n_heads);
        kv[l].v.resize(cfg.n_heads);
        std::vector<Matrix> head_out(cfg.n_heads);
        for (int h = 0; h < cfg.n_heads; ++h) {
            HeadCache hc;
            head_out[h] = head_forward(ln.y, wq, lw.wk, wv, lw.wo, h, dh, offsets, &hc);
            kv[l].k[h].resize(cfg.max_seq_len, dh);
            kv[l].v[h].resize(cfg.max_seq_len, dh);
            kv[l].k[h].topRows(n) = hc.k;
            kv[l].v[h].topRows(n) = hc.v;
        }
        for (int h = 0; h < cfg.n_heads; ++h) {
            x += head_out[h];
        }
        LnOut ln2 = layer_norm(x, lw.ln2_g, lw.ln2_b);
        x += mlp_forward(ln2.y, lw, nullptr, nullptr);
        kv[l].wq = std::move(wq);
        kv[l].wv = std::move(wv);
    }
    Matrix logits = project_logits(x.bottomRows(1), w, nullptr);

    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    int len = n;
    for (int step = 0; step < max_new; ++step) {
        const TokenId next = argmax_lowest(
            std::span<const float>(logits.row(0).data(), static_cast<std::size_t>(logits.cols())));
        if (next == eos) {
            break;
        }
        out.push_back(next);
        if (step + 1 == max_new) {
            break;
        }
        // Decode one position against the cached prefix.
        Matrix xr = w.tok_emb.row(next) + w.pos_emb.row(len);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const LayerWeights& lw = w.layers[l];
            LnOut ln = layer_norm(xr, lw.ln1_g, lw.ln1_b);
            for (int h = 0; h < cfg.n_heads; ++h) {
                Matrix q = ln.y * kv[l].wq.middleCols(h * dh, dh);
                kv[l].k[h].row(len) = ln.y * lw.wk.middleCols(h * dh, dh);
                kv[l].v[h].row(len) = ln.y * kv[l].wv.middleCols(h * dh, dh);
                Matrix sc = (q * kv[l].k[h].topRows(len + 1).transpose()) * scale;
                const float mx = sc.maxCoeff();
                sc = (sc.array() - mx).exp().matrix();
                sc /= sc.sum();
                Matrix o = sc * kv[l].v[h].topRows(len + 1);
                xr += o * lw.wo.middleRows(h * dh, dh);
            }
            LnOut ln2 = layer_norm(xr, lw.ln2_g, lw.ln2_b);
            xr += mlp_forward(ln2.y, lw, nullptr, nullptr);
        }
        ++len;
        logits = project_logits(xr, w, nullptr);
    }
    return out;
}

Matrix forward_patched(const Checkpoint& ckpt, const Tokens& tokens, const ActivationRecord& replacement,
                       const EdgeFilter& keep) {
    const ModelConfig& cfg = ckpt.config;
    const Weights& w = *ckpt.base;
    const NodeLayout nodes(cfg);
    check_tokens(cfg, tokens);
    if (static_cast<int>(replacement.outputs.size()) != nodes.count()) {
        throw ConfigError("forward_patched: replacement record has wrong node count");
    }
    std::vector<int> positions(tokens.size());
    std::iota(positions.begin(), positions.end(), 0);
    const std::vector<int> offsets{0, static_cast<int>(tokens.size())};
    std::vector<Matrix> acts(nodes.count());
    acts[0] = embed(w, tokens, positions);
    for (int u = 0; u < nodes.count(); ++u) {
        if (replacement.outputs[u].rows() != static_cast<Eigen::Index>(tokens.size())) {
            throw ConfigError("forward_patched: replacement length mismatch");
        }
    }

    auto assemble = [&](int dst, int upstream_end) {
        Matrix in = keep(0, dst) ? acts[0] : replacement.outputs[0];
        for (int u = 1; u < upstream_end; ++u) {
            in += keep(u, dst) ? acts[u] : replacement.outputs[u];
        }
        return in;
    };

    const int dh = cfg.head_dim();
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        auto [wq, wv] = effective_qv(ckpt, l);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int v = nodes.head(l, h);
            Matrix in = assemble(v, nodes.head(l, 0));
            LnOut ln = layer_norm(in, lw.ln1_g, lw.ln1_b);
            acts[v] = head_forward(ln.y, wq, lw.wk, wv, lw.wo, h, dh, offsets, nullptr);
        }
        const int m = nodes.mlp(l);
        Matrix in = assemble(m, m);
        LnOut ln = layer_norm(in, lw.ln2_g, lw.ln2_b);
        acts[m] = mlp_forward(ln.y, lw, nullptr, nullptr);
    }
    Matrix in = assemble(nodes.count(), nodes.count());
    Matrix last = in.bottomRows(1);
    return project_logits(last, w, nullptr);
}

}  // namespace cptlab
