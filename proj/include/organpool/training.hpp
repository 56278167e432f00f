// Uncertain-label BCE, burn-in/ramp schedule, positive reweighting, batch
// gradients, finite-difference checking, AdamW with warmup + cosine decay,
// and the early-stopped training loop.
#pragma once

#include <chrono>
#include <functional>
#include <optional>

#include "organpool/heads.hpp"

namespace organpool {

/// Per-study targets in {0, 1, -1}; -1 marks a missing label.
using Targets = std::vector<std::int8_t>;

inline void validate_targets(const Targets& y, std::size_t labels, const std::string& who) {
    if (y.size() != labels) {
        fail(ErrorKind::data, who + ": expected " + std::to_string(labels) + " targets, got " + std::to_string(y.size()));
    }
    for (auto t : y) {
        if (t != 0 && t != 1 && t != -1) fail(ErrorKind::data, who + ": target " + std::to_string(t) + " not in {0,1,-1}");
    }
}

struct LossSchedule {
    int n_burn = 10;
    int n_ramp = 10;
    double w_max = 0.3;

    void validate() const {
        if (n_burn < 0 || n_ramp < 0) fail(ErrorKind::config, "n_burn and n_ramp must be >= 0");
        if (!(w_max >= 0.0 && w_max <= 1.0)) fail(ErrorKind::config, "w_max must lie in [0, 1]");
    }
};

/// 0 during burn-in, then a linear ramp whose first epoch is already nonzero,
/// then the cap.
inline double uncertain_weight(int epoch, const LossSchedule& s) {
    if (epoch < s.n_burn) return 0.0;
    if (epoch < s.n_burn + s.n_ramp) return s.w_max * static_cast<double>(epoch - s.n_burn + 1) / s.n_ramp;
    return s.w_max;
}

struct PosWeights {
    std::vector<double> weights;
    std::vector<bool> flagged;  // no positives, or no observed targets at all
};

inline PosWeights pos_weights(std::span<const Targets> targets, std::size_t labels, double clip = 10.0) {
    PosWeights out{std::vector<double>(labels, 1.0), std::vector<bool>(labels, false)};
    for (std::size_t l = 0; l < labels; ++l) {
        std::size_t pos = 0, neg = 0;
        for (const auto& y : targets) {
            if (y[l] == 1) ++pos;
            else if (y[l] == 0) ++neg;
        }
        if (pos + neg == 0) {
            out.flagged[l] = true;
        } else if (pos == 0) {
            out.weights[l] = clip;
            out.flagged[l] = true;
        } else {
            out.weights[l] = std::min(static_cast<double>(neg) / static_cast<double>(pos), clip);
        }
    }
    return out;
}

struct BceResult {
    double loss = 0.0;
    double weight_sum = 0.0;
    Matrix weights;      // per element
    Matrix grad_logits;  // d(loss)/dz, already divided by weight_sum
};

/// Weighted BCE normalized by the total effective weight. Missing targets act
/// as weak negatives with weight `uncertain`.
inline BceResult masked_bce(const Matrix& logits, std::span<const Targets> targets, std::span<const double> pos_weight,
                            double uncertain) {
    const std::size_t n = logits.rows(), labels = logits.cols();
    if (targets.size() != n || pos_weight.size() != labels) fail(ErrorKind::invalid_input, "masked_bce shape mismatch");
    BceResult r{0.0, 0.0, Matrix(n, labels), Matrix(n, labels)};
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        if (targets[s].size() != labels) fail(ErrorKind::invalid_input, "masked_bce target length mismatch");
        for (std::size_t l = 0; l < labels; ++l) {
            const double z = logits(s, l);
            if (!std::isfinite(z)) fail(ErrorKind::numeric, "non-finite logit for label " + std::to_string(l));
            const int y = targets[s][l];
            const double w = y == 1 ? pos_weight[l] : (y == 0 ? 1.0 : uncertain);
            const double t = y == 1 ? 1.0 : 0.0;
            r.weights(s, l) = w;
            if (w == 0.0) continue;
            total += w * bce_with_logits(z, t);
            r.weight_sum += w;
            r.grad_logits(s, l) = w * (sigmoid(z) - t);
        }
    }
    if (r.weight_sum > 0.0) {
        r.loss = total / r.weight_sum;
        for (auto& g : r.grad_logits.values()) g /= r.weight_sum;
    }
    return r;
}

/// Loss over the listed studies; when `grads` is given, adds the exact
/// gradient of that loss to it.
inline double batch_loss(const HeadParams& params, std::span<const StudyInput> studies,
                         std::span<const Targets> targets, std::span<const std::size_t> batch,
                         std::span<const double> pos_weight, double uncertain, HeadParams* grads = nullptr,
                         const std::function<StudyInput(std::size_t)>& view = {}) {
    const std::size_t labels = params.config.label_count;
    Matrix logits(batch.size(), labels);
    std::vector<Targets> ys;
    std::vector<StudyForwardResult> fwds;
    std::vector<StudyInput> views;
    ys.reserve(batch.size());
    fwds.reserve(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t idx = batch[b];
        const StudyInput* in = &studies[idx];
        if (view) {
            views.push_back(view(idx));
            in = &views.back();
        }
        auto f = forward(params, *in);
        std::copy(f.logits.begin(), f.logits.end(), logits.row(b).begin());
        ys.push_back(targets[idx]);
        if (grads) fwds.push_back(std::move(f));
        if (!view) continue;
        if (!grads) views.pop_back();
    }
    auto r = masked_bce(logits, ys, pos_weight, uncertain);
    if (grads) {
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto g = r.grad_logits.row(b);
            if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
            const StudyInput& in = view ? views[b] : studies[batch[b]];
            backward_study(params, in, fwds[b], g, *grads);
        }
    }
    return r.loss;
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

inline double relative_error(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

inline GradCheckResult grad_check(const HeadParams& params, std::span<const StudyInput> studies,
                                  std::span<const Targets> targets, std::span<const double> pos_weight,
                                  double uncertain, double h = 1e-5) {
    std::vector<std::size_t> all(studies.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    HeadParams grads = params.zeros_like();
    batch_loss(params, studies, targets, all, pos_weight, uncertain, &grads);
    HeadParams probe = params;
    GradCheckResult r;
    for (std::size_t t = 0; t < probe.tensors.size(); ++t) {
        auto& values = probe.tensors[t].values;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            values[i] = keep + h;
            const double up = batch_loss(probe, studies, targets, all, pos_weight, uncertain);
            values[i] = keep - h;
            const double down = batch_loss(probe, studies, targets, all, pos_weight, uncertain);
            values[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = grads.tensors[t].values[i];
            const double err = relative_error(analytic, numeric);
            ++r.checked;
            if (err > r.max_rel_error || r.worst_tensor.empty()) {
                r.max_rel_error = std::max(err, r.max_rel_error);
                r.worst_tensor = probe.tensors[t].name;
                r.worst_index = i;
                r.analytic = analytic;
                r.numeric = numeric;
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Optimization.

struct OptimConfig {
    double base_lr = 1e-3;
    double weight_decay = 0.05;
    int warmup_epochs = 5;
    double min_lr_fraction = 0.1;
    int max_epochs = 30;
    int patience = 10;
    double grad_clip = 1.0;
    double head_lr_scale = 3.0;
    double alpha_lr_scale = 0.3;
    double encoder_lr_scale = 1.0;
    std::size_t batch_size = 16;
    double pos_weight_clip = 10.0;
    std::uint64_t seed = 25;

    void validate() const {
        if (!(base_lr > 0.0)) fail(ErrorKind::config, "lr must be > 0");
        if (!(weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be >= 0");
        if (warmup_epochs < 0) fail(ErrorKind::config, "warmup_epochs must be >= 0");
        if (!(min_lr_fraction > 0.0 && min_lr_fraction <= 1.0)) fail(ErrorKind::config, "min_lr_fraction must lie in (0, 1]");
        if (max_epochs < 1) fail(ErrorKind::config, "max_epochs must be >= 1");
        if (patience < 1) fail(ErrorKind::config, "patience must be >= 1");
        if (!(grad_clip > 0.0)) fail(ErrorKind::config, "grad_clip must be > 0");
        if (!(head_lr_scale > 0.0 && alpha_lr_scale > 0.0 && encoder_lr_scale > 0.0)) {
            fail(ErrorKind::config, "learning-rate scales must be > 0");
        }
        if (batch_size < 1) fail(ErrorKind::config, "batch_size must be >= 1");
        if (!(pos_weight_clip >= 1.0)) fail(ErrorKind::config, "pos_weight_clip must be >= 1");
    }

    double group_scale(ParamGroup g) const {
        switch (g) {
            case ParamGroup::alpha: return alpha_lr_scale;
            case ParamGroup::head: return head_lr_scale;
            case ParamGroup::encoder: return encoder_lr_scale;
        }
        return 1.0;
    }
};

/// Linear warmup 0 -> base over `warmup_steps`, then cosine from base to
/// min_lr_fraction * base, reaching the floor on the final step.
inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, const OptimConfig& cfg) {
    const double base = cfg.base_lr;
    if (step < warmup_steps) return base * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double floor = cfg.min_lr_fraction * base;
    const double span = static_cast<double>(total_steps) - 1.0 - static_cast<double>(warmup_steps);
    const double progress = span > 0.0 ? std::min(1.0, static_cast<double>(step - warmup_steps) / span) : 1.0;
    return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double global_norm(const HeadParams& grads) {
    double s = 0.0;
    for (const auto& t : grads.tensors)
        for (double v : t.values) s += v * v;
    return std::sqrt(s);
}

/// Rescales in place so the global norm is at most `max_norm`; returns the
/// norm before clipping.
inline double clip_global_norm(HeadParams& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& t : grads.tensors)
            for (auto& v : t.values) v *= scale;
    }
    return norm;
}

class AdamW {
public:
    AdamW(const HeadParams& like, const OptimConfig& cfg) : cfg_(cfg), m_(like.zeros_like()), v_(like.zeros_like()) {}

    void step(HeadParams& params, const HeadParams& grads, double lr) {
        constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        ++t_;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.tensors.size(); ++k) {
            auto& p = params.tensors[k];
            const double glr = lr * cfg_.group_scale(p.group);
            auto& m = m_.tensors[k].values;
            auto& v = v_.tensors[k].values;
            const auto& g = grads.tensors[k].values;
            for (std::size_t i = 0; i < p.values.size(); ++i) {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p.values[i] -= glr * cfg_.weight_decay * p.values[i];
                p.values[i] -= glr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
            }
        }
    }

private:
    OptimConfig cfg_;
    HeadParams m_;
    HeadParams v_;
    long t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop.

struct TrainRecord {
    int epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_loss;  // set on the last step of each epoch
    double uncertain_weight = 0.0;
    double wall_ms = 0.0;
};

struct Split {
    std::span<const StudyInput> studies;
    std::span<const Targets> targets;
};

struct TrainResult {
    HeadParams best;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    double initial_val_loss = 0.0;
    int epochs_run = 0;
    PosWeights pos;
    std::vector<TrainRecord> log;
};

/// Training-time view of a study (e.g. an augmented re-encoding). Receives the
/// study index and the epoch.
using StudyView = std::function<StudyInput(std::size_t, int)>;

/// Validation loss: observed targets only, with the training positive weights.
inline double validation_loss(const HeadParams& params, const Split& val, std::span<const double> pos_weight) {
    std::vector<std::size_t> all(val.studies.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return batch_loss(params, val.studies, val.targets, all, pos_weight, 0.0);
}

inline TrainResult train(HeadParams params, const Split& train_split, const Split& val, const OptimConfig& cfg,
                         const LossSchedule& schedule, const StudyView& augment = {}) {
    cfg.validate();
    schedule.validate();
    if (train_split.studies.empty()) fail(ErrorKind::data, "training split is empty");
    if (val.studies.empty()) fail(ErrorKind::data, "validation split is empty");
    if (train_split.targets.size() != train_split.studies.size() || val.targets.size() != val.studies.size()) {
        fail(ErrorKind::data, "targets do not match studies");
    }
    const std::size_t n = train_split.studies.size();
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * static_cast<std::size_t>(cfg.max_epochs);
    const std::size_t warmup = per_epoch * static_cast<std::size_t>(cfg.warmup_epochs);

    TrainResult out;
    out.pos = pos_weights(train_split.targets, params.config.label_count, cfg.pos_weight_clip);
    out.initial_val_loss = validation_loss(params, val, out.pos.weights);
    out.best = params;
    out.best_val_loss = out.initial_val_loss;

    AdamW opt(params, cfg);
    std::size_t step = 0;
    int stale = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double wu = uncertain_weight(epoch, schedule);
        const auto order = CounterRng(cfg.seed, "train", "batch-order", static_cast<std::uint64_t>(epoch)).permutation(n);
        std::function<StudyInput(std::size_t)> view;
        if (augment) view = [&](std::size_t i) { return augment(i, epoch); };
        for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
            const std::size_t lo = b * cfg.batch_size;
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            std::span<const std::size_t> batch(order.data() + lo, hi - lo);
            HeadParams grads = params.zeros_like();
            const double loss =
                batch_loss(params, train_split.studies, train_split.targets, batch, out.pos.weights, wu, &grads, view);
            if (!std::isfinite(loss)) fail(ErrorKind::numeric, "non-finite training loss at step " + std::to_string(step));
            clip_global_norm(grads, cfg.grad_clip);
            const double lr = lr_at(step, total, warmup, cfg);
            opt.step(params, grads, lr);
            TrainRecord rec;
            rec.epoch = epoch;
            rec.step = step;
            rec.lr = lr;
            rec.train_loss = loss;
            rec.uncertain_weight = wu;
            out.log.push_back(rec);
        }
        const double vl = validation_loss(params, val, out.pos.weights);
        if (!std::isfinite(vl)) fail(ErrorKind::numeric, "non-finite validation loss at epoch " + std::to_string(epoch));
        out.log.back().val_loss = vl;
        out.log.back().wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        out.epochs_run = epoch + 1;
        if (vl < out.best_val_loss) {
            out.best_val_loss = vl;
            out.best = params;
            out.best_epoch = epoch;
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    return out;
}

}  // namespace organpool
