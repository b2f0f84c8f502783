#include "xmla/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace xmla {

void TrainPlan::validate_sft() const {
    if (lr <= 0.0) throw ConfigError("plan: learning rate must be positive");
    if (batch_size < 1 || seq_len < 2) throw ConfigError("plan: batch_size >= 1 and seq_len >= 2 required");
    if (ce_weight < 0.0 || kl_weight < 0.0 || (ce_weight == 0.0 && kl_weight == 0.0))
        throw ConfigError("plan: ce/kl weights must be nonnegative and not both zero");
}

void TrainPlan::validate_dpo() const {
    if (lr <= 0.0) throw ConfigError("plan: learning rate must be positive");
    if (!(dpo_beta > 0.0)) throw ConfigError("plan: dpo_beta must be positive");
}

double TrainPlan::lr_at(int64_t step, int64_t total) const {
    int64_t warmup = static_cast<int64_t>(std::ceil(warmup_frac * static_cast<double>(total)));
    if (warmup > 0 && step <= warmup) return lr * static_cast<double>(step) / static_cast<double>(warmup);
    return lr;
}

// -- Losses ---------------------------------------------------------------------

namespace {

// probs[i][j] = exp(logits[i][j] - lse_i), logprobs likewise. One shared
// routine so a bit-identical student and teacher produce bit-identical
// distributions.
void row_softmax_stats(const Tensor& logits, std::vector<double>& probs, std::vector<double>& logprobs) {
    int64_t l = logits.shape()[0], v = logits.shape()[1];
    probs.resize(static_cast<size_t>(l * v));
    logprobs.resize(static_cast<size_t>(l * v));
    for (int64_t i = 0; i < l; ++i) {
        const double* row = logits.data().data() + i * v;
        double mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
        double lse = mx + std::log(denom);
        for (int64_t j = 0; j < v; ++j) {
            logprobs[static_cast<size_t>(i * v + j)] = row[j] - lse;
            probs[static_cast<size_t>(i * v + j)] = std::exp(row[j] - lse);
        }
    }
}

}  // namespace

Tensor kl_distill_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
    if (student_logits.shape() != teacher_logits.shape())
        throw DimensionError("kl_distill_loss: shape mismatch " + shape_string(student_logits.shape()) + " vs " +
                             shape_string(teacher_logits.shape()));
    int64_t l = student_logits.shape()[0], v = student_logits.shape()[1];

    std::vector<double> t_probs, t_logprobs, s_probs, s_logprobs;
    row_softmax_stats(teacher_logits, t_probs, t_logprobs);
    row_softmax_stats(student_logits, s_probs, s_logprobs);

    double acc = 0.0;
    for (size_t i = 0; i < t_probs.size(); ++i) acc += t_probs[i] * (t_logprobs[i] - s_logprobs[i]);
    Tensor out = Tensor::scalar(acc / static_cast<double>(l));

    // Fused backward: d/d(student) = (softmax(student) - teacher_probs) / l.
    // Computed through the same softmax routine for both sides, the gradient
    // is exactly zero when the logit matrices are bit-identical, which keeps
    // self-distillation a true fixed point of the optimizer.
    if (tape_should_record(student_logits)) {
        GradTape::active()->record(out, [student_logits = student_logits, out = out,
                                         t_probs = std::move(t_probs), s_probs = std::move(s_probs),
                                         l]() mutable {
            double g = out.impl()->grad[0] / static_cast<double>(l);
            std::vector<double> gx(s_probs.size());
            for (size_t i = 0; i < gx.size(); ++i) gx[i] = g * (s_probs[i] - t_probs[i]);
            student_logits.accumulate_grad(gx);
        });
    }
    (void)v;
    return out;
}

Tensor ce_loss(const Tensor& logits, const std::vector<int64_t>& targets) {
    int64_t l = logits.shape()[0];
    if (static_cast<int64_t>(targets.size()) != l)
        throw DimensionError("ce_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(l) +
                             " positions");
    Tensor ls = log_softmax_rows(logits);
    Tensor picked = gather_cols(ls, targets);  // throws VocabError on bad ids
    return scale(sum(picked), -1.0 / static_cast<double>(l));
}

Tensor mixed_sft_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                      const std::vector<int64_t>& targets, double ce_w, double kl_w) {
    if (ce_w < 0.0 || kl_w < 0.0 || (ce_w == 0.0 && kl_w == 0.0))
        throw ConfigError("mixed_sft_loss: weights must be nonnegative and not both zero");
    if (ce_w == 0.0) return scale(kl_distill_loss(student_logits, teacher_logits), kl_w);
    if (kl_w == 0.0) return scale(ce_loss(student_logits, targets), ce_w);
    return add(scale(ce_loss(student_logits, targets), ce_w),
               scale(kl_distill_loss(student_logits, teacher_logits), kl_w));
}

Tensor dpo_loss(const Tensor& policy_logp_chosen, const Tensor& policy_logp_rejected,
                const Tensor& ref_logp_chosen, const Tensor& ref_logp_rejected, double beta) {
    if (!(beta > 0.0)) throw ConfigError("dpo_loss: beta must be positive");
    if (policy_logp_chosen.shape() != policy_logp_rejected.shape() ||
        policy_logp_chosen.shape() != ref_logp_chosen.shape() ||
        policy_logp_chosen.shape() != ref_logp_rejected.shape())
        throw DimensionError("dpo_loss: all four log-prob tensors must share a shape");
    // margin = (pc - rc) - (pr - rr); loss = mean softplus(-beta * margin)
    Tensor margin = sub(sub(policy_logp_chosen, ref_logp_chosen.detach()),
                        sub(policy_logp_rejected, ref_logp_rejected.detach()));
    return mean(softplus(scale(margin, -beta)));
}

Tensor sequence_logprob(const LmModel& model, const std::vector<int64_t>& prompt,
                        const std::vector<int64_t>& continuation) {
    if (prompt.empty() || continuation.empty())
        throw DataError("sequence_logprob: prompt and continuation must be nonempty");
    std::vector<int64_t> tokens = prompt;
    tokens.insert(tokens.end(), continuation.begin(), continuation.end());
    Tensor logits = lm_forward(model, tokens);
    // Position p predicts token p+1: rows |prompt|-1 .. end-2 score the continuation.
    int64_t first = static_cast<int64_t>(prompt.size()) - 1;
    int64_t last = static_cast<int64_t>(tokens.size()) - 1;
    Tensor rows = slice_rows(logits, first, last);
    Tensor ls = log_softmax_rows(rows);
    return sum(gather_cols(ls, continuation));
}

// -- Optimizer ------------------------------------------------------------------

void adamw_step(std::vector<Tensor>& params, AdamWState& state, const TrainPlan& plan, int64_t t,
                double lr_override) {
    if (t < 1) throw ContractError("adamw_step: step index must be >= 1");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t p = 0; p < params.size(); ++p) {
            state.m[p].assign(static_cast<size_t>(params[p].numel()), 0.0);
            state.v[p].assign(static_cast<size_t>(params[p].numel()), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw DimensionError("adamw_step: state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                             std::to_string(params.size()));

    double lr = lr_override > 0.0 ? lr_override : plan.lr;
    double bc1 = 1.0 - std::pow(plan.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(plan.beta2, static_cast<double>(t));

    for (size_t p = 0; p < params.size(); ++p) {
        Tensor& param = params[p];
        if (state.m[p].size() != param.data().size())
            throw DimensionError("adamw_step: state shape mismatch at tensor " + std::to_string(p));
        const std::vector<double>* grad = param.has_grad() ? &param.impl()->grad : nullptr;
        auto& m = state.m[p];
        auto& v = state.v[p];
        for (size_t i = 0; i < m.size(); ++i) {
            double g = grad ? (*grad)[i] : 0.0;
            m[i] = plan.beta1 * m[i] + (1.0 - plan.beta1) * g;
            v[i] = plan.beta2 * v[i] + (1.0 - plan.beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            double& w = param.data()[i];
            w -= lr * plan.weight_decay * w;  // decoupled decay
            w -= lr * mhat / (std::sqrt(vhat) + plan.eps);
        }
    }
}

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.impl()->grad) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (Tensor& p : params) {
            if (!p.has_grad()) continue;
            for (double& g : p.impl()->grad) g *= s;
        }
    }
    return norm;
}

// -- Traces ---------------------------------------------------------------------

void LossTrace::write_csv(const std::string& path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("trace: cannot open " + path + " for writing");
    os << "step,ce_loss,kl_loss,total,lr\n";
    for (const TraceRow& r : rows)
        os << r.step << "," << r.ce << "," << r.kl << "," << r.total << "," << r.lr << "\n";
    if (!os) throw IoError("trace: write failed for " + path);
}

// -- Training loops ---------------------------------------------------------------

namespace {

// Contiguous (input, target) window at a seeded random offset.
std::vector<int64_t> draw_window(const std::vector<int64_t>& corpus, int64_t len, Rng& rng) {
    int64_t max_start = static_cast<int64_t>(corpus.size()) - len;
    int64_t start = max_start > 0 ? rng.uniform_int(0, max_start) : 0;
    return std::vector<int64_t>(corpus.begin() + start, corpus.begin() + start + len);
}

}  // namespace

LossTrace distill_train(LmModel& student, const LmModel& teacher, const std::vector<int64_t>& corpus,
                        const TrainPlan& plan) {
    plan.validate_sft();
    if (student.config.vocab_size != teacher.config.vocab_size)
        throw ConfigError("distill_train: student vocab " + std::to_string(student.config.vocab_size) +
                          " != teacher vocab " + std::to_string(teacher.config.vocab_size));
    if (static_cast<int64_t>(corpus.size()) < plan.seq_len + 1)
        throw DataError("distill_train: corpus shorter than one training window");

    Rng data_rng = Rng(plan.seed).substream("distill-data");
    auto params = student.params();
    for (Tensor& p : params) p.set_requires_grad(true);
    AdamWState opt;

    LossTrace trace;
    for (int64_t step = 1; step <= plan.steps; ++step) {
        double ce_acc = 0.0, kl_acc = 0.0, total_acc = 0.0;
        GradTape tape;
        for (int64_t b = 0; b < plan.batch_size; ++b) {
            auto window = draw_window(corpus, plan.seq_len + 1, data_rng);
            std::vector<int64_t> inputs(window.begin(), window.end() - 1);
            std::vector<int64_t> targets(window.begin() + 1, window.end());

            Tensor teacher_logits;
            if (plan.kl_weight > 0.0) teacher_logits = lm_forward(teacher, inputs);  // no tape active yet

            GradTape::Scope scope(tape);
            Tensor student_logits = lm_forward(student, inputs);
            Tensor ce = plan.ce_weight > 0.0 ? ce_loss(student_logits, targets) : Tensor::scalar(0.0);
            Tensor kl = plan.kl_weight > 0.0 ? kl_distill_loss(student_logits, teacher_logits)
                                             : Tensor::scalar(0.0);
            Tensor loss = add(scale(ce, plan.ce_weight), scale(kl, plan.kl_weight));
            // Scale so accumulated gradients average over the batch.
            Tensor scaled = scale(loss, 1.0 / static_cast<double>(plan.batch_size));
            tape.backward(scaled);

            ce_acc += ce.item();
            kl_acc += kl.item();
            total_acc += loss.item();
        }
        double lr = plan.lr_at(step, plan.steps);
        clip_global_norm(params, plan.clip_norm);
        adamw_step(params, opt, plan, step, lr);
        student.zero_grads();

        double inv_b = 1.0 / static_cast<double>(plan.batch_size);
        TraceRow row;
        row.step = step;
        row.ce = ce_acc * inv_b;
        row.kl = kl_acc * inv_b;
        row.kl_sum = kl_acc * inv_b * static_cast<double>(plan.seq_len);
        row.total = total_acc * inv_b;
        row.lr = lr;
        trace.rows.push_back(row);
    }
    return trace;
}

LossTrace ce_train(LmModel& model, const std::vector<int64_t>& corpus, const TrainPlan& plan) {
    TrainPlan p = plan;
    p.ce_weight = 1.0;
    p.kl_weight = 0.0;
    p.validate_sft();
    if (static_cast<int64_t>(corpus.size()) < p.seq_len + 1)
        throw DataError("ce_train: corpus shorter than one training window");

    Rng data_rng = Rng(p.seed).substream("ce-data");
    auto params = model.params();
    for (Tensor& t : params) t.set_requires_grad(true);
    AdamWState opt;

    LossTrace trace;
    for (int64_t step = 1; step <= p.steps; ++step) {
        double ce_acc = 0.0;
        GradTape tape;
        for (int64_t b = 0; b < p.batch_size; ++b) {
            auto window = draw_window(corpus, p.seq_len + 1, data_rng);
            std::vector<int64_t> inputs(window.begin(), window.end() - 1);
            std::vector<int64_t> targets(window.begin() + 1, window.end());

            GradTape::Scope scope(tape);
            Tensor loss = ce_loss(lm_forward(model, inputs), targets);
            tape.backward(scale(loss, 1.0 / static_cast<double>(p.batch_size)));
            ce_acc += loss.item();
        }
        double lr = p.lr_at(step, p.steps);
        clip_global_norm(params, p.clip_norm);
        adamw_step(params, opt, p, step, lr);
        model.zero_grads();

        TraceRow row;
        row.step = step;
        row.ce = ce_acc / static_cast<double>(p.batch_size);
        row.total = row.ce;
        row.lr = lr;
        trace.rows.push_back(row);
    }
    return trace;
}

namespace {

double mean_margin(const LmModel& policy, const std::vector<PrefPair>& prefs) {
    double acc = 0.0;
    for (const PrefPair& p : prefs) {
        double c = sequence_logprob(policy, p.prompt, p.chosen).item();
        double r = sequence_logprob(policy, p.prompt, p.rejected).item();
        acc += c - r;
    }
    return acc / static_cast<double>(prefs.size());
}

}  // namespace

DpoResult dpo_train(LmModel& student, const LmModel& reference, const std::vector<PrefPair>& prefs,
                    const TrainPlan& plan) {
    plan.validate_dpo();
    if (prefs.empty()) throw DataError("dpo_train: no preference pairs");
    for (const PrefPair& p : prefs) {
        if (p.chosen.empty() || p.rejected.empty())
            throw DataError("dpo_train: continuations must be nonempty");
        if (p.chosen == p.rejected) throw DataError("dpo_train: chosen == rejected in a preference pair");
    }

    DpoResult result;
    result.margin_before = mean_margin(student, prefs);
    if (plan.steps == 0) {
        result.margin_after = result.margin_before;
        return result;
    }

    Rng order_rng = Rng(plan.seed).substream("dpo-order");
    auto params = student.params();
    for (Tensor& p : params) p.set_requires_grad(true);
    AdamWState opt;

    for (int64_t step = 1; step <= plan.steps; ++step) {
        GradTape tape;
        double loss_acc = 0.0;
        for (int64_t b = 0; b < plan.batch_size; ++b) {
            const PrefPair& pair = prefs[static_cast<size_t>(order_rng.uniform_int(
                0, static_cast<int64_t>(prefs.size()) - 1))];
            Tensor ref_c = sequence_logprob(reference, pair.prompt, pair.chosen);
            Tensor ref_r = sequence_logprob(reference, pair.prompt, pair.rejected);

            GradTape::Scope scope(tape);
            Tensor pol_c = sequence_logprob(student, pair.prompt, pair.chosen);
            Tensor pol_r = sequence_logprob(student, pair.prompt, pair.rejected);
            Tensor loss = dpo_loss(pol_c, pol_r, ref_c, ref_r, plan.dpo_beta);
            tape.backward(scale(loss, 1.0 / static_cast<double>(plan.batch_size)));
            loss_acc += loss.item();
        }
        double lr = plan.lr_at(step, plan.steps);
        clip_global_norm(params, plan.clip_norm);
        adamw_step(params, opt, plan, step, lr);
        student.zero_grads();
        result.losses.push_back(loss_acc / static_cast<double>(plan.batch_size));
    }
    result.margin_after = mean_margin(student, prefs);
    return result;
}

DpoResult dpo_train(LmModel& student, const std::vector<PrefPair>& prefs, const TrainPlan& plan) {
    LmModel reference = student.clone();
    reference.set_requires_grad(false);
    return dpo_train(student, reference, prefs, plan);
}

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn,
                           std::vector<std::pair<std::string, Tensor>> params, double h, double tol) {
    for (auto& [name, p] : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    GradTape tape;
    {
        GradTape::Scope scope(tape);
        Tensor loss = loss_fn();
        tape.backward(loss);
    }

    GradCheckResult res;
    for (auto& [name, p] : params) {
        std::vector<double> analytic =
            p.has_grad() ? p.impl()->grad : std::vector<double>(static_cast<size_t>(p.numel()), 0.0);
        for (size_t i = 0; i < p.data().size(); ++i) {
            double saved = p.data()[i];
            p.data()[i] = saved + h;
            double up = loss_fn().item();
            p.data()[i] = saved - h;
            double down = loss_fn().item();
            p.data()[i] = saved;
            double numeric = (up - down) / (2.0 * h);
            double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
            double rel = std::abs(numeric - analytic[i]) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    res.passed = res.max_rel_err <= tol;
    for (auto& [name, p] : params) p.zero_grad();
    return res;
}

}  // namespace xmla
