#pragma once

// AdamW and the objective pieces shared by pre-training and CPT.

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cptlab/model.hpp"

namespace cptlab {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Decay applies to matrices, not to 1 x n gains
/// and biases.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(const AdamWConfig& config) : config_(config) {}

    void step(std::span<Matrix* const> params, std::span<const Matrix* const> grads);

    long steps() const { return t_; }
    const AdamWConfig& config() const { return config_; }

    /// Moments and step count in parameter order, for resuming.
    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    AdamWConfig config_;
    long t_ = 0;
    std::vector<Matrix> m_, v_;
};

/// Pointers to the trainable tensors of `ckpt` and the matching gradients.
/// The checkpoint's adapters (or base when none are attached) must be uniquely
/// owned by the caller.
std::vector<Matrix*> trainable_tensors(Adapters& adapters);
std::vector<Matrix*> trainable_tensors(Weights& weights);
std::vector<const Matrix*> gradient_tensors(const Gradients& grads);

/// Mean over rows of KL(softmax(ref) || softmax(cur)).
double kl_penalty(const Matrix& ref_logits, const Matrix& cur_logits);

/// Adds weight * d KL(ref||cur) / d cur for one row into `grad`; returns the row KL.
double kl_row(const float* ref, const float* cur, int n, float weight, float* grad);

/// CE with gradient for one row; returns -log p(target).
double ce_row(const float* logits, int n, TokenId target, float weight, float* grad);

struct StepLoss {
    double ce = 0.0;     // mean over targets
    double kl = 0.0;     // mean over targets
    double total = 0.0;  // ce + lambda * kl
    std::size_t targets = 0;
};

/// CE (+ lambda * KL against `ref` on the same target positions) and its
/// gradient for the trainable set of `ckpt`.
StepLoss objective_and_grad(const Checkpoint& ckpt, const Checkpoint* ref, double lambda,
                            std::span<const Sequence> batch, Gradients& grads);

/// Global L2 norm of the gradients; scales them down to `max_norm` if larger.
double clip_gradients(Gradients& grads, double max_norm);

}  // namespace cptlab
