#include "cptlab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace cptlab {

void AdamW::step(std::span<Matrix* const> params, std::span<const Matrix* const> grads) {
    if (params.size() != grads.size()) {
        throw ConfigError("AdamW: parameter/gradient count mismatch");
    }
    if (m_.empty()) {
        for (const Matrix* p : params) {
            m_.push_back(Matrix::Zero(p->rows(), p->cols()));
            v_.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    if (m_.size() != params.size()) {
        throw ConfigError("AdamW: parameter set changed between steps");
    }
    ++t_;
    const float b1 = static_cast<float>(config_.beta1);
    const float b2 = static_cast<float>(config_.beta2);
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const float step = static_cast<float>(config_.lr / c1);
    const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
    const float eps = static_cast<float>(config_.eps);
    const float decay = static_cast<float>(config_.lr * config_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Matrix& p = *params[i];
        const Matrix& g = *grads[i];
        if (p.rows() != g.rows() || p.cols() != g.cols()) {
            throw ConfigError("AdamW: gradient shape mismatch");
        }
        Matrix& m = m_[i];
        Matrix& v = v_[i];
        const bool decayed = p.rows() > 1;
        const Eigen::Index n = p.size();
        float* pd = p.data();
        const float* gd = g.data();
        float* md = m.data();
        float* vd = v.data();
        for (Eigen::Index k = 0; k < n; ++k) {
            md[k] = b1 * md[k] + (1.0f - b1) * gd[k];
            vd[k] = b2 * vd[k] + (1.0f - b2) * gd[k] * gd[k];
            if (decayed) {
                pd[k] -= decay * pd[k];
            }
            pd[k] -= step * md[k] / (std::sqrt(vd[k]) * inv_sqrt_c2 + eps);
        }
    }
}

void AdamW::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write " + path);
    }
    nlohmann::json shapes = nlohmann::json::array();
    for (const Matrix& m : m_) {
        shapes.push_back({m.rows(), m.cols()});
    }
    out << nlohmann::json{{"t", t_}, {"shapes", shapes}}.dump() << '\n';
    for (const auto* set : {&m_, &v_}) {
        for (const Matrix& m : *set) {
            out.write(reinterpret_cast<const char*>(m.data()),
                      static_cast<std::streamsize>(m.size() * sizeof(float)));
        }
    }
    if (!out) {
        throw RunError("short write to " + path);
    }
}

void AdamW::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError("cannot read " + path);
    }
    std::string line;
    std::getline(in, line);
    const auto header = nlohmann::json::parse(line);
    t_ = header.at("t").get<long>();
    m_.clear();
    v_.clear();
    for (auto* set : {&m_, &v_}) {
        for (const auto& s : header.at("shapes")) {
            Matrix m(s.at(0).get<int>(), s.at(1).get<int>());
            in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
            set->push_back(std::move(m));
        }
    }
    if (!in) {
        throw ConfigError("truncated optimizer state " + path);
    }
}

std::vector<Matrix*> trainable_tensors(Adapters& adapters) {
    std::vector<Matrix*> out;
    adapters.visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

std::vector<Matrix*> trainable_tensors(Weights& weights) {
    std::vector<Matrix*> out;
    weights.visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
    return out;
}

std::vector<const Matrix*> gradient_tensors(const Gradients& grads) {
    std::vector<const Matrix*> out;
    auto push = [&](const std::string&, const Matrix& m) { out.push_back(&m); };
    if (grads.adapters) {
        grads.adapters->visit(push);
    } else if (grads.base) {
        grads.base->visit(push);
    }
    return out;
}

double ce_row(const float* logits, int n, TokenId target, float weight, float* grad) {
    float mx = logits[0];
    for (int j = 1; j < n; ++j) {
        mx = std::max(mx, logits[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        sum += std::exp(static_cast<double>(logits[j] - mx));
    }
    const double lse = static_cast<double>(mx) + std::log(sum);
    if (grad != nullptr) {
        for (int j = 0; j < n; ++j) {
            grad[j] += weight * static_cast<float>(std::exp(static_cast<double>(logits[j]) - lse));
        }
        grad[target] -= weight;
    }
    return lse - static_cast<double>(logits[target]);
}

double kl_row(const float* ref, const float* cur, int n, float weight, float* grad) {
    auto lse = [n](const float* x) {
        float mx = x[0];
        for (int j = 1; j < n; ++j) {
            mx = std::max(mx, x[j]);
        }
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            s += std::exp(static_cast<double>(x[j] - mx));
        }
        return static_cast<double>(mx) + std::log(s);
    };
    const double lr = lse(ref);
    const double lc = lse(cur);
    double kl = 0.0;
    for (int j = 0; j < n; ++j) {
        const double log_p = static_cast<double>(ref[j]) - lr;
        const double log_q = static_cast<double>(cur[j]) - lc;
        const double p = std::exp(log_p);
        kl += p * (log_p - log_q);
        if (grad != nullptr) {
            grad[j] += weight * static_cast<float>(std::exp(log_q) - p);
        }
    }
    // rounding can leave a tiny negative value for identical rows
    return std::max(0.0, kl);
}

double kl_penalty(const Matrix& ref_logits, const Matrix& cur_logits) {
    if (ref_logits.rows() != cur_logits.rows() || ref_logits.cols() != cur_logits.cols()) {
        throw ConfigError("kl_penalty: shape mismatch");
    }
    if (ref_logits.rows() == 0) {
        return 0.0;
    }
    double sum = 0.0;
    const int n = static_cast<int>(ref_logits.cols());
    for (Eigen::Index i = 0; i < ref_logits.rows(); ++i) {
        sum += kl_row(ref_logits.row(i).data(), cur_logits.row(i).data(), n, 0.0f, nullptr);
    }
    return sum / static_cast<double>(ref_logits.rows());
}

StepLoss objective_and_grad(const Checkpoint& ckpt, const Checkpoint* ref, double lambda,
                            std::span<const Sequence> batch, Gradients& grads) {
    std::vector<Tokens> seqs;
    seqs.reserve(batch.size());
    for (const Sequence& s : batch) {
        seqs.push_back(s.tokens);
    }
    ForwardOptions opts;
    opts.keep_cache = true;
    ForwardResult fwd = forward_batch(ckpt, seqs, opts);
    const bool use_kl = ref != nullptr && lambda > 0.0;
    Matrix ref_logits;
    if (use_kl) {
        ref_logits = forward_batch(*ref, seqs).logits;
    }

    StepLoss out;
    for (const Sequence& s : batch) {
        const int len = static_cast<int>(s.tokens.size());
        out.targets += static_cast<std::size_t>(std::max(0, len - std::max(1, s.loss_from)));
    }
    if (out.targets == 0) {
        return out;
    }
    const int vocab = static_cast<int>(fwd.logits.cols());
    const float w = 1.0f / static_cast<float>(out.targets);
    const float wk = static_cast<float>(lambda) * w;
    Matrix dlogits = Matrix::Zero(fwd.logits.rows(), fwd.logits.cols());
    double ce_sum = 0.0;
    double kl_sum = 0.0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const int off = fwd.offsets[s];
        const int len = fwd.offsets[s + 1] - off;
        for (int p = std::max(1, batch[s].loss_from); p < len; ++p) {
            const int row = off + p - 1;
            ce_sum += ce_row(fwd.logits.row(row).data(), vocab, batch[s].tokens[static_cast<std::size_t>(p)], w,
                             dlogits.row(row).data());
            if (use_kl) {
                kl_sum += kl_row(ref_logits.row(row).data(), fwd.logits.row(row).data(), vocab, wk,
                                 dlogits.row(row).data());
            }
        }
    }
    out.ce = ce_sum / static_cast<double>(out.targets);
    out.kl = kl_sum / static_cast<double>(out.targets);
    out.total = out.ce + lambda * out.kl;
    backward(ckpt, fwd, dlogits, &grads);
    return out;
}

double clip_gradients(Gradients& grads, double max_norm) {
    double sq = 0.0;
    for (const Matrix* g : gradient_tensors(grads)) {
        sq += static_cast<double>(g->squaredNorm());
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const float s = static_cast<float>(max_norm / norm);
        auto scale = [s](const std::string&, Matrix& m) { m *= s; };
        if (grads.adapters) {
            grads.adapters->visit(scale);
        } else if (grads.base) {
            grads.base->visit(scale);
        }
    }
    return norm;
}

}  // namespace cptlab
