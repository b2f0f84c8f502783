#pragma once

#include <functional>
#include <string>
#include <vector>

#include "xmla/corpus.hpp"
#include "xmla/model.hpp"

namespace xmla {

struct TrainPlan {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double weight_decay = 0.0;
    double eps = 1e-8;
    int64_t batch_size = 1;
    int64_t steps = 0;
    int64_t seq_len = 64;
    double ce_weight = 0.0;
    double kl_weight = 1.0;
    double dpo_beta = 0.1;
    uint64_t seed = 0;
    double warmup_frac = 0.05;  // linear warmup, then constant
    double clip_norm = 1.0;     // global-norm gradient clip; <= 0 disables

    void validate_sft() const;
    void validate_dpo() const;
    // Warmup ramp over the first warmup_frac of `total` steps; `step` is 1-based.
    double lr_at(int64_t step, int64_t total) const;
};

// Positionwise-mean KL(teacher || student). The teacher side is a constant;
// only the student logits carry gradient.
Tensor kl_distill_loss(const Tensor& student_logits, const Tensor& teacher_logits);

// Mean negative log-likelihood of the targets.
Tensor ce_loss(const Tensor& logits, const std::vector<int64_t>& targets);

Tensor mixed_sft_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                      const std::vector<int64_t>& targets, double ce_w, double kl_w);

// -log sigmoid(beta * ((pc - rc) - (pr - rr))), mean over the batch. The
// reference log-probs are treated as constants.
Tensor dpo_loss(const Tensor& policy_logp_chosen, const Tensor& policy_logp_rejected,
                const Tensor& ref_logp_chosen, const Tensor& ref_logp_rejected, double beta);

// Summed log-likelihood of `continuation` given `prompt` under the model.
Tensor sequence_logprob(const LmModel& model, const std::vector<int64_t>& prompt,
                        const std::vector<int64_t>& continuation);

struct AdamWState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// Decoupled-weight-decay Adam with bias correction; t is the 1-based step.
// Parameters with no accumulated gradient are treated as zero-grad.
void adamw_step(std::vector<Tensor>& params, AdamWState& state, const TrainPlan& plan, int64_t t,
                double lr_override = -1.0);

double clip_global_norm(std::vector<Tensor>& params, double max_norm);

struct TraceRow {
    int64_t step = 0;
    double ce = 0.0;
    double kl = 0.0;       // per-position mean
    double kl_sum = 0.0;   // per-sequence positional sum, batch mean
    double total = 0.0;
    double lr = 0.0;
};

struct LossTrace {
    std::vector<TraceRow> rows;
    // step,ce_loss,kl_loss,total,lr with a header row.
    void write_csv(const std::string& path) const;
};

// End-to-end distillation: frozen teacher forward, taped student forward,
// mixed CE/KL loss, clipped AdamW updates. Batches are contiguous windows at
// seeded random offsets; gradients accumulate across the batch.
LossTrace distill_train(LmModel& student, const LmModel& teacher, const std::vector<int64_t>& corpus,
                        const TrainPlan& plan);

// Plain cross-entropy training (used to make teachers from scratch).
LossTrace ce_train(LmModel& model, const std::vector<int64_t>& corpus, const TrainPlan& plan);

struct DpoResult {
    double margin_before = 0.0;  // mean policy_logp(chosen) - policy_logp(rejected)
    double margin_after = 0.0;
    std::vector<double> losses;
};

// Preference tuning against a frozen reference; the caller passes a deep
// copy of the pre-tuning student (it is never updated). The overload
// without a reference takes that copy itself.
DpoResult dpo_train(LmModel& student, const LmModel& reference, const std::vector<PrefPair>& prefs,
                    const TrainPlan& plan);
DpoResult dpo_train(LmModel& student, const std::vector<PrefPair>& prefs, const TrainPlan& plan);

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    bool passed = false;
};

// Central finite differences against taped gradients. `loss_fn` must
// recompute the loss from the current parameter values (it is invoked with
// no tape active for the difference quotients).
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           std::vector<std::pair<std::string, Tensor>> params, double h, double tol);

}  // namespace xmla
