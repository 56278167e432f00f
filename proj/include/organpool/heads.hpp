// Aggregation heads over a feature lattice: GAP, global unary attention,
// organ-masked attention with priors and empty-support fallback, organ-scalar
// fusion with a truncation gate, and the per-organ classifier bank.
//
// Every forward routine keeps what its backward counterpart needs, so the
// training module can differentiate the whole study pipeline analytically.
#pragma once

#include <cstdint>

#include "organpool/lattice.hpp"
#include "organpool/masks.hpp"

namespace organpool {

enum class HeadMode { gap, global, masked, masked_osf };
enum class ScalarKind { volume, hu, border };
enum class OsfHead { affine, mlp };
enum class ParamGroup { alpha, head, encoder };

inline const char* to_string(HeadMode m) {
    switch (m) {
        case HeadMode::gap: return "gap";
        case HeadMode::global: return "global";
        case HeadMode::masked: return "masked";
        case HeadMode::masked_osf: return "masked_osf";
    }
    return "?";
}

inline HeadMode parse_head_mode(std::string_view s) {
    if (s == "gap") return HeadMode::gap;
    if (s == "global") return HeadMode::global;
    if (s == "masked") return HeadMode::masked;
    if (s == "masked_osf") return HeadMode::masked_osf;
    fail(ErrorKind::config, "unknown mode '" + std::string(s) + "' (gap|global|masked|masked_osf)");
}

inline bool is_masked(HeadMode m) { return m == HeadMode::masked || m == HeadMode::masked_osf; }

inline const char* to_string(ScalarKind k) {
    switch (k) {
        case ScalarKind::volume: return "volume";
        case ScalarKind::hu: return "hu";
        case ScalarKind::border: return "border";
    }
    return "?";
}

inline std::vector<ScalarKind> parse_scalar_set(std::string_view s) {
    std::vector<ScalarKind> out;
    if (trim(s).empty() || trim(s) == "none") return out;
    for (const auto& tok : split(s, ',')) {
        ScalarKind k;
        if (tok == "volume") k = ScalarKind::volume;
        else if (tok == "hu") k = ScalarKind::hu;
        else if (tok == "border") k = ScalarKind::border;
        else fail(ErrorKind::config, "unknown scalar '" + tok + "' (volume|hu|border)");
        if (std::find(out.begin(), out.end(), k) != out.end()) fail(ErrorKind::config, "scalar '" + tok + "' listed twice");
        out.push_back(k);
    }
    return out;
}

inline std::string scalar_set_string(const std::vector<ScalarKind>& s) {
    std::string out;
    for (auto k : s) out += (out.empty() ? "" : ",") + std::string(to_string(k));
    return out.empty() ? "none" : out;
}

inline double select_scalar(const OrganScalars& u, ScalarKind k) {
    switch (k) {
        case ScalarKind::volume: return u.volume;
        case ScalarKind::hu: return u.hu;
        case ScalarKind::border: return u.border;
    }
    return 0.0;
}

/// Per-study organ inputs: lattice indicators m_{o,i} and scalars u_o.
struct OrganMaskSet {
    std::vector<std::vector<std::uint8_t>> indicators;
    std::vector<OrganScalars> scalars;
};

/// One study as seen by the heads. `lattice` holds the features (d columns),
/// or raw cell patches when the model carries a toy encoder.
struct StudyInput {
    Matrix lattice;
    OrganMaskSet organs;
};

// ---------------------------------------------------------------------------
// Parameters.

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;
    ParamGroup group = ParamGroup::head;
};

struct HeadConfig {
    HeadMode mode = HeadMode::gap;
    std::size_t dim = 0;
    std::size_t label_count = 0;
    std::vector<std::string> organ_names;
    std::vector<std::vector<std::size_t>> organ_labels;
    std::vector<std::size_t> other_labels;
    std::vector<ScalarKind> scalars;  // used by masked_osf only
    OsfHead osf_head = OsfHead::affine;
    double epsilon = 1e-12;
    std::size_t encoder_inputs = 0;  // 0: features are precomputed

    std::size_t scalar_count() const { return mode == HeadMode::masked_osf ? scalars.size() : 0; }
    std::size_t organ_count() const { return organ_names.size(); }

    static HeadConfig from_schema(const LabelSchema& schema, HeadMode mode, std::size_t dim,
                                  std::vector<ScalarKind> scalars = {}, OsfHead osf = OsfHead::affine,
                                  std::size_t encoder_inputs = 0) {
        HeadConfig c;
        c.mode = mode;
        c.dim = dim;
        c.label_count = schema.label_count();
        for (std::size_t o = 0; o < schema.group_count(); ++o) {
            c.organ_names.push_back(schema.group_name(o));
            c.organ_labels.push_back(schema.labels_of_group(o));
        }
        c.other_labels = schema.other_labels();
        c.scalars = std::move(scalars);
        c.osf_head = osf;
        c.encoder_inputs = encoder_inputs;
        c.validate();
        return c;
    }

    void validate() const {
        if (dim < 1) fail(ErrorKind::config, "feature dimension must be >= 1");
        if (organ_labels.size() != organ_names.size()) fail(ErrorKind::config, "organ label lists do not match organs");
        if (!scalars.empty() && mode != HeadMode::masked_osf) {
            fail(ErrorKind::config, "scalar fusion requires mode masked_osf");
        }
        if (!(epsilon > 0.0)) fail(ErrorKind::config, "masked-softmax epsilon must be > 0");
    }
};

struct OrganSlots {
    int scorer_w = -1, scorer_b = -1, log_tau = -1, beta_in = -1, beta_out = -1, gate = -1;
    int hidden_w = -1, hidden_b = -1, cls_w = -1, cls_b = -1;
};

struct AttentionSlots {
    int scorer_w = -1, scorer_b = -1, log_tau = -1, cls_w = -1, cls_b = -1;
};

/// All learnable quantities, held as named tensors so the optimizer,
/// checkpointing, and finite-difference checks can walk them uniformly.
class HeadParams {
public:
    HeadConfig config;
    std::vector<Tensor> tensors;
    int encoder_w = -1, encoder_b = -1;
    AttentionSlots global;  // gap/global modes; the "other" head in masked modes
    std::vector<OrganSlots> organs;

    HeadParams() = default;

    /// Allocates every tensor the mode needs, zero-filled.
    explicit HeadParams(HeadConfig cfg) : config(std::move(cfg)) {
        config.validate();
        const std::size_t d = config.dim;
        auto add = [&](const std::string& name, std::vector<std::size_t> shape, ParamGroup g) {
            std::size_t n = 1;
            for (auto s : shape) n *= s;
            tensors.push_back(Tensor{name, std::move(shape), std::vector<double>(n, 0.0), g});
            return static_cast<int>(tensors.size() - 1);
        };
        if (config.encoder_inputs > 0) {
            encoder_w = add("encoder.weight", {d, config.encoder_inputs}, ParamGroup::encoder);
            encoder_b = add("encoder.bias", {d}, ParamGroup::encoder);
        }
        const bool masked = is_masked(config.mode);
        const std::string gname = masked ? "other" : "global";
        const bool need_attention = config.mode == HeadMode::global || (masked && !config.other_labels.empty());
        if (need_attention) {
            global.scorer_w = add(gname + ".scorer.weight", {d}, ParamGroup::alpha);
            global.scorer_b = add(gname + ".scorer.bias", {1}, ParamGroup::alpha);
            global.log_tau = add(gname + ".log_tau", {1}, ParamGroup::alpha);
        }
        const std::size_t global_out = masked ? config.other_labels.size() : config.label_count;
        if (global_out > 0) {
            global.cls_w = add(gname + ".classifier.weight", {global_out, d}, ParamGroup::head);
            global.cls_b = add(gname + ".classifier.bias", {global_out}, ParamGroup::head);
        }
        if (!masked) return;
        const std::size_t k = config.scalar_count();
        const std::size_t width = d + k;
        for (std::size_t o = 0; o < config.organ_count(); ++o) {
            const std::string p = "organ." + config.organ_names[o] + ".";
            OrganSlots s;
            const std::size_t nl = config.organ_labels[o].size();
            s.scorer_w = add(p + "scorer.weight", {d}, ParamGroup::alpha);
            s.scorer_b = add(p + "scorer.bias", {1}, ParamGroup::alpha);
            s.log_tau = add(p + "log_tau", {1}, ParamGroup::alpha);
            s.beta_in = add(p + "beta_in", {1}, ParamGroup::alpha);
            s.beta_out = add(p + "beta_out", {1}, ParamGroup::alpha);
            if (k > 0) s.gate = add(p + "gate_logit", {1}, ParamGroup::alpha);
            if (nl > 0) {
                if (config.mode == HeadMode::masked_osf && config.osf_head == OsfHead::mlp) {
                    const std::size_t hidden = std::max<std::size_t>(1, d / 2);
                    s.hidden_w = add(p + "mlp.hidden.weight", {hidden, width}, ParamGroup::head);
                    s.hidden_b = add(p + "mlp.hidden.bias", {hidden}, ParamGroup::head);
                    s.cls_w = add(p + "classifier.weight", {nl, hidden}, ParamGroup::head);
                } else {
                    s.cls_w = add(p + "classifier.weight", {nl, width}, ParamGroup::head);
                }
                s.cls_b = add(p + "classifier.bias", {nl}, ParamGroup::head);
            }
            organs.push_back(s);
        }
    }

    std::span<double> at(int slot) { return tensors[static_cast<std::size_t>(slot)].values; }
    std::span<const double> at(int slot) const { return tensors[static_cast<std::size_t>(slot)].values; }
    double scalar(int slot) const { return tensors[static_cast<std::size_t>(slot)].values[0]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.values.size();
        return n;
    }

    HeadParams zeros_like() const {
        HeadParams z = *this;
        for (auto& t : z.tensors) std::fill(t.values.begin(), t.values.end(), 0.0);
        return z;
    }

    const Tensor* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
    Tensor* find(std::string_view name) {
        for (auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    /// Weight matrices and scorer vectors ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    /// biases, log temperatures, priors and gate logits start at 0.
    void initialize(std::uint64_t seed) {
        for (auto& t : tensors) {
            std::fill(t.values.begin(), t.values.end(), 0.0);
            const bool is_weight = t.name.ends_with(".weight");
            if (!is_weight) continue;
            const std::size_t fan_in = t.shape.back();
            const double half = 1.0 / std::sqrt(static_cast<double>(fan_in));
            CounterRng rng(seed, t.name, "init");
            for (auto& v : t.values) v = rng.uniform(-half, half);
        }
    }
};

// ---------------------------------------------------------------------------
// Pooling primitives.

struct Scorer {
    std::span<const double> weight;
    double bias = 0.0;

    double operator()(std::span<const double> u) const { return dot(weight, u) + bias; }
};

/// Attention pooling state. `weights` is over all of Omega; `scores` holds
/// the unary scorer outputs s(u_i) (priors excluded) on the support.
/// `best` is the largest weight-term score u_i . w_s on the support.
struct PoolState {
    std::vector<double> weights;
    std::vector<double> pooled;
    std::vector<double> scores;
    bool fallback = false;
    std::size_t argmax = 0;
    double best = 0.0;
    double eps_share = 0.0;  // epsilon / (sum of shifted exponentials + epsilon)
    double tau = 1.0;
};

inline std::vector<double> pool_gap(const Matrix& features) {
    if (features.rows() == 0) fail(ErrorKind::invalid_input, "cannot pool an empty lattice");
    std::vector<double> h(features.cols(), 0.0);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        const auto row = features.row(i);
        for (std::size_t j = 0; j < h.size(); ++j) h[j] += row[j];
    }
    const double inv = 1.0 / static_cast<double>(features.rows());
    for (auto& v : h) v *= inv;
    return h;
}

namespace detail {

/// Softmax of s_i / tau over the support (all rows when `mask` is empty),
/// shifted by the support maximum, with epsilon added after the shift.
/// Shifted logits are formed from the weight term alone: the scorer bias,
/// like the priors, is a constant on the support and cancels exactly.
inline PoolState attend(const Matrix& features, std::span<const std::uint8_t> mask, const Scorer& scorer, double tau,
                        double epsilon) {
    const std::size_t n = features.rows();
    if (n == 0) fail(ErrorKind::invalid_input, "cannot pool an empty lattice");
    if (!(tau > 0.0)) fail(ErrorKind::invalid_input, "attention temperature must be > 0");
    PoolState st;
    st.tau = tau;
    st.weights.assign(n, 0.0);
    st.scores.assign(n, 0.0);
    st.pooled.assign(features.cols(), 0.0);
    const bool full = mask.empty();
    bool any = false;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        if (!full && !mask[i]) continue;
        st.scores[i] = dot(scorer.weight, features.row(i));
        if (!any || st.scores[i] > best) {
            best = st.scores[i];
            st.argmax = i;
        }
        any = true;
    }
    if (!any) {
        st.fallback = true;
        st.pooled = pool_gap(features);
        std::fill(st.weights.begin(), st.weights.end(), 1.0 / static_cast<double>(n));
        return st;
    }
    st.best = best;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!full && !mask[i]) continue;
        st.weights[i] = std::exp((st.scores[i] - best) / tau);
        total += st.weights[i];
    }
    const double denom = total + epsilon;
    st.eps_share = epsilon / denom;
    for (std::size_t i = 0; i < n; ++i) {
        if (!full && !mask[i]) continue;
        st.scores[i] += scorer.bias;
        if (st.weights[i] == 0.0) continue;
        st.weights[i] /= denom;
        const auto row = features.row(i);
        for (std::size_t j = 0; j < st.pooled.size(); ++j) st.pooled[j] += st.weights[i] * row[j];
    }
    return st;
}

}  // namespace detail

/// w = softmax(s(u)/tau) over the whole lattice, h = sum_i w_i u_i.
inline PoolState pool_global_attention(const Matrix& features, const Scorer& scorer, double tau) {
    return detail::attend(features, {}, scorer, tau, 0.0);
}

/// Masked softmax restricted to the organ support. Priors enter the logits as
/// beta_in * m + beta_out * (1 - m); on the support that is a constant shift,
/// which the max-subtracted softmax cancels exactly. Empty support falls back
/// to uniform pooling over the whole lattice.
inline PoolState pool_masked_attention(const Matrix& features, std::span<const std::uint8_t> mask,
                                       const Scorer& scorer, double tau, double beta_in, double beta_out,
                                       double epsilon) {
    if (mask.size() != features.rows()) fail(ErrorKind::invalid_input, "mask length differs from lattice size");
    if (!(epsilon > 0.0)) fail(ErrorKind::invalid_input, "masked-softmax epsilon must be > 0");
    (void)beta_in;
    (void)beta_out;
    return detail::attend(features, mask, scorer, tau, epsilon);
}

/// Prior-adjusted attention logits for export: s_o(u_i) + beta_in m_i + beta_out (1 - m_i).
inline std::vector<double> masked_attention_logits(const Matrix& features, std::span<const std::uint8_t> mask,
                                                   const Scorer& scorer, double beta_in, double beta_out) {
    std::vector<double> out(features.rows());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = scorer(features.row(i)) + (mask[i] ? beta_in : beta_out);
    return out;
}

/// h~ = (1 - sigmoid(gate) * b) h, h^ = [h~; u]. With no scalars the fused
/// feature is h itself, so masked_osf reduces to the masked classifier.
inline std::vector<double> fuse_osf(std::span<const double> pooled, std::span<const double> scalars,
                                    double gate_logit, double border) {
    std::vector<double> out(pooled.begin(), pooled.end());
    if (scalars.empty()) return out;
    const double keep = 1.0 - sigmoid(gate_logit) * border;
    for (auto& v : out) v *= keep;
    out.insert(out.end(), scalars.begin(), scalars.end());
    return out;
}

/// z = W h + b with W stored row-major (rows = bias.size()).
inline std::vector<double> classify(std::span<const double> h, std::span<const double> weight,
                                    std::span<const double> bias) {
    const std::size_t rows = bias.size();
    if (rows == 0 || weight.size() != rows * h.size()) {
        fail(ErrorKind::invalid_input, "classifier shape mismatch: weight " + std::to_string(weight.size()) +
                                           " for " + std::to_string(rows) + " x " + std::to_string(h.size()));
    }
    std::vector<double> z(rows);
    for (std::size_t r = 0; r < rows; ++r) z[r] = dot(weight.subspan(r * h.size(), h.size()), h) + bias[r];
    return z;
}

/// Stitch per-organ and "other" logit blocks into schema label order.
inline std::vector<double> assemble_study_logits(const std::vector<std::vector<double>>& organ_logits,
                                                 std::span<const double> other_logits, const HeadConfig& config) {
    std::vector<double> z(config.label_count, 0.0);
    std::vector<int> cover(config.label_count, 0);
    auto place = [&](const std::vector<std::size_t>& labels, std::span<const double> block, const std::string& who) {
        if (labels.size() != block.size()) fail(ErrorKind::schema, who + " logit block does not match its label set");
        for (std::size_t j = 0; j < labels.size(); ++j) {
            if (labels[j] >= z.size()) fail(ErrorKind::schema, who + " references an unknown label");
            z[labels[j]] = block[j];
            ++cover[labels[j]];
        }
    };
    if (organ_logits.size() != config.organ_count()) fail(ErrorKind::schema, "organ logit blocks do not match organs");
    for (std::size_t o = 0; o < organ_logits.size(); ++o) place(config.organ_labels[o], organ_logits[o], config.organ_names[o]);
    place(config.other_labels, other_logits, "other");
    for (std::size_t l = 0; l < cover.size(); ++l) {
        if (cover[l] != 1) {
            fail(ErrorKind::schema, "label " + std::to_string(l) + (cover[l] == 0 ? " is not covered" : " is covered twice"));
        }
    }
    return z;
}

// ---------------------------------------------------------------------------
// Study forward pass.

struct OrganState {
    PoolState pool;
    std::vector<double> fused;
    std::vector<double> hidden_pre;
    std::vector<double> hidden;
    double gate = 0.0;
    double border = 0.0;
    std::vector<double> logits;
};

struct StudyForwardResult {
    std::vector<double> logits;
    std::vector<double> probabilities;
    Matrix features;  // filled when the model encodes raw patches
    std::vector<double> gap_pooled;
    PoolState global;  // global head, or the "other" head in masked modes
    std::vector<OrganState> organs;
};

inline Matrix encode_patches(const HeadParams& params, const Matrix& patches) {
    const std::size_t d = params.config.dim;
    const std::size_t p = params.config.encoder_inputs;
    if (patches.cols() != p) {
        fail(ErrorKind::invalid_input, "patch width " + std::to_string(patches.cols()) + " != encoder inputs " +
                                           std::to_string(p));
    }
    const auto w = params.at(params.encoder_w);
    const auto b = params.at(params.encoder_b);
    Matrix f(patches.rows(), d);
    for (std::size_t i = 0; i < patches.rows(); ++i) {
        const auto x = patches.row(i);
        for (std::size_t j = 0; j < d; ++j) f(i, j) = dot(w.subspan(j * p, p), x) + b[j];
    }
    return f;
}

inline const Matrix& study_features(const HeadParams& params, const StudyInput& study, StudyForwardResult& out) {
    if (params.config.encoder_inputs == 0) {
        if (study.lattice.cols() != params.config.dim) {
            fail(ErrorKind::invalid_input, "feature width " + std::to_string(study.lattice.cols()) + " != model dim " +
                                               std::to_string(params.config.dim));
        }
        return study.lattice;
    }
    out.features = encode_patches(params, study.lattice);
    return out.features;
}

inline StudyForwardResult forward(const HeadParams& params, const StudyInput& study) {
    const auto& cfg = params.config;
    StudyForwardResult out;
    const Matrix& u = study_features(params, study, out);
    auto attention = [&](const AttentionSlots& s) {
        return pool_global_attention(u, Scorer{params.at(s.scorer_w), params.scalar(s.scorer_b)},
                                     std::exp(params.scalar(s.log_tau)));
    };

    if (!is_masked(cfg.mode)) {
        std::vector<double> h;
        if (cfg.mode == HeadMode::gap) {
            out.gap_pooled = pool_gap(u);
            h = out.gap_pooled;
        } else {
            out.global = attention(params.global);
            h = out.global.pooled;
        }
        out.logits = classify(h, params.at(params.global.cls_w), params.at(params.global.cls_b));
    } else {
        if (study.organs.indicators.size() != cfg.organ_count()) {
            fail(ErrorKind::invalid_input, "study has " + std::to_string(study.organs.indicators.size()) +
                                               " organ masks, model expects " + std::to_string(cfg.organ_count()));
        }
        const std::size_t k = cfg.scalar_count();
        if (k > 0 && study.organs.scalars.size() != cfg.organ_count()) {
            fail(ErrorKind::invalid_input, "study is missing organ scalars");
        }
        std::vector<std::vector<double>> blocks;
        for (std::size_t o = 0; o < cfg.organ_count(); ++o) {
            const auto& s = params.organs[o];
            OrganState st;
            st.pool = pool_masked_attention(u, study.organs.indicators[o],
                                            Scorer{params.at(s.scorer_w), params.scalar(s.scorer_b)},
                                            std::exp(params.scalar(s.log_tau)), params.scalar(s.beta_in),
                                            params.scalar(s.beta_out), cfg.epsilon);
            std::vector<double> scal;
            if (k > 0) {
                for (auto kind : cfg.scalars) scal.push_back(select_scalar(study.organs.scalars[o], kind));
                st.border = study.organs.scalars[o].border;
                st.gate = sigmoid(params.scalar(s.gate));
                st.fused = fuse_osf(st.pool.pooled, scal, params.scalar(s.gate), st.border);
            } else {
                st.fused = st.pool.pooled;
            }
            if (s.cls_w >= 0) {
                if (s.hidden_w >= 0) {
                    st.hidden_pre = classify(st.fused, params.at(s.hidden_w), params.at(s.hidden_b));
                    st.hidden = st.hidden_pre;
                    for (auto& v : st.hidden) v = std::max(v, 0.0);
                    st.logits = classify(st.hidden, params.at(s.cls_w), params.at(s.cls_b));
                } else {
                    st.logits = classify(st.fused, params.at(s.cls_w), params.at(s.cls_b));
                }
            }
            blocks.push_back(st.logits);
            out.organs.push_back(std::move(st));
        }
        std::vector<double> other;
        if (!cfg.other_labels.empty()) {
            out.global = attention(params.global);
            other = classify(out.global.pooled, params.at(params.global.cls_w), params.at(params.global.cls_b));
        }
        out.logits = assemble_study_logits(blocks, other, cfg);
    }
    out.probabilities.resize(out.logits.size());
    for (std::size_t l = 0; l < out.logits.size(); ++l) out.probabilities[l] = sigmoid(out.logits[l]);
    return out;
}

// ---------------------------------------------------------------------------
// Study backward pass: accumulates d(loss)/d(params) into `grads` given
// d(loss)/d(logits).

namespace detail {

/// z = W h + b: adds dW, db; returns dh.
inline std::vector<double> classify_backward(std::span<const double> h, std::span<const double> weight,
                                             std::span<const double> g_z, std::span<double> g_weight,
                                             std::span<double> g_bias) {
    const std::size_t cols = h.size();
    std::vector<double> g_h(cols, 0.0);
    for (std::size_t r = 0; r < g_z.size(); ++r) {
        const double g = g_z[r];
        if (g == 0.0) continue;
        g_bias[r] += g;
        for (std::size_t c = 0; c < cols; ++c) {
            g_weight[r * cols + c] += g * h[c];
            g_h[c] += g * weight[r * cols + c];
        }
    }
    return g_h;
}

struct AttendGrads {
    std::span<double> scorer_w;
    std::span<double> log_tau;
};

/// Backward through attend(): fills g_features, scorer-weight and
/// log-temperature grads. The scorer bias and priors get none.
inline void attend_backward(const Matrix& u, const PoolState& st, std::span<const double> scorer_w,
                            double scorer_bias, std::span<const double> g_h, Matrix& g_u, AttendGrads g) {
    const std::size_t n = u.rows();
    const std::size_t d = u.cols();
    if (st.fallback) {
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto gu = g_u.row(i);
            for (std::size_t j = 0; j < d; ++j) gu[j] += g_h[j] * inv;
        }
        return;
    }
    std::vector<double> g_w(n, 0.0);
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (st.weights[i] == 0.0) continue;
        g_w[i] = dot(g_h, u.row(i));
        c += st.weights[i] * g_w[i];
    }
    const double best = st.best + scorer_bias;
    double g_log_tau = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = st.weights[i];
        if (w == 0.0 && i != st.argmax) continue;
        double g_x = w * (g_w[i] - c);
        if (i == st.argmax) g_x -= st.eps_share * c;
        const double g_s = g_x / st.tau;
        g_log_tau -= g_x * (st.scores[i] - best) / st.tau;
        const auto row = u.row(i);
        auto gu = g_u.row(i);
        for (std::size_t j = 0; j < d; ++j) {
            g.scorer_w[j] += g_s * row[j];
            gu[j] += g_s * scorer_w[j] + w * g_h[j];
        }
    }
    g.log_tau[0] += g_log_tau;
}

}  // namespace detail

inline void backward_study(const HeadParams& params, const StudyInput& study, const StudyForwardResult& fwd,
                           std::span<const double> g_logits, HeadParams& grads) {
    const auto& cfg = params.config;
    const Matrix& u = cfg.encoder_inputs ? fwd.features : study.lattice;
    Matrix g_u(u.rows(), u.cols(), 0.0);
    const auto& gs = params.global;

    auto attention_backward = [&](const PoolState& st, std::span<const double> g_h) {
        detail::attend_backward(u, st, params.at(gs.scorer_w), params.scalar(gs.scorer_b), g_h, g_u,
                                {grads.at(gs.scorer_w), grads.at(gs.log_tau)});
    };

    if (!is_masked(cfg.mode)) {
        const auto& h = cfg.mode == HeadMode::gap ? fwd.gap_pooled : fwd.global.pooled;
        const auto g_h = detail::classify_backward(h, params.at(gs.cls_w), g_logits, grads.at(gs.cls_w), grads.at(gs.cls_b));
        if (cfg.mode == HeadMode::gap) {
            const double inv = 1.0 / static_cast<double>(u.rows());
            for (std::size_t i = 0; i < u.rows(); ++i) {
                auto gu = g_u.row(i);
                for (std::size_t j = 0; j < u.cols(); ++j) gu[j] += g_h[j] * inv;
            }
        } else {
            attention_backward(fwd.global, g_h);
        }
    } else {
        const std::size_t d = cfg.dim;
        for (std::size_t o = 0; o < cfg.organ_count(); ++o) {
            const auto& s = params.organs[o];
            const auto& st = fwd.organs[o];
            if (s.cls_w < 0) continue;
            const auto& labels = cfg.organ_labels[o];
            std::vector<double> g_z(labels.size());
            bool any = false;
            for (std::size_t j = 0; j < labels.size(); ++j) {
                g_z[j] = g_logits[labels[j]];
                any = any || g_z[j] != 0.0;
            }
            if (!any) continue;
            std::vector<double> g_fused;
            if (s.hidden_w >= 0) {
                auto g_hidden = detail::classify_backward(st.hidden, params.at(s.cls_w), g_z, grads.at(s.cls_w),
                                                          grads.at(s.cls_b));
                for (std::size_t j = 0; j < g_hidden.size(); ++j)
                    if (st.hidden_pre[j] <= 0.0) g_hidden[j] = 0.0;
                g_fused = detail::classify_backward(st.fused, params.at(s.hidden_w), g_hidden, grads.at(s.hidden_w),
                                                    grads.at(s.hidden_b));
            } else {
                g_fused = detail::classify_backward(st.fused, params.at(s.cls_w), g_z, grads.at(s.cls_w),
                                                    grads.at(s.cls_b));
            }
            std::vector<double> g_h(g_fused.begin(), g_fused.begin() + static_cast<std::ptrdiff_t>(d));
            if (cfg.scalar_count() > 0 && st.border != 0.0) {
                const double keep = 1.0 - st.gate * st.border;
                const double g_keep = dot(g_h, st.pool.pooled);
                grads.at(s.gate)[0] += -st.border * st.gate * (1.0 - st.gate) * g_keep;
                for (auto& v : g_h) v *= keep;
            }
            detail::attend_backward(u, st.pool, params.at(s.scorer_w), params.scalar(s.scorer_b), g_h, g_u,
                                    {grads.at(s.scorer_w), grads.at(s.log_tau)});
        }
        if (!cfg.other_labels.empty()) {
            std::vector<double> g_z(cfg.other_labels.size());
            bool any = false;
            for (std::size_t j = 0; j < g_z.size(); ++j) {
                g_z[j] = g_logits[cfg.other_labels[j]];
                any = any || g_z[j] != 0.0;
            }
            if (any) {
                const auto g_h = detail::classify_backward(fwd.global.pooled, params.at(gs.cls_w), g_z,
                                                           grads.at(gs.cls_w), grads.at(gs.cls_b));
                attention_backward(fwd.global, g_h);
            }
        }
    }

    if (cfg.encoder_inputs > 0) {
        const std::size_t p = cfg.encoder_inputs;
        auto gw = grads.at(params.encoder_w);
        auto gb = grads.at(params.encoder_b);
        for (std::size_t i = 0; i < u.rows(); ++i) {
            const auto x = study.lattice.row(i);
            const auto gu = g_u.row(i);
            for (std::size_t j = 0; j < cfg.dim; ++j) {
                if (gu[j] == 0.0) continue;
                gb[j] += gu[j];
                for (std::size_t q = 0; q < p; ++q) gw[j * p + q] += gu[j] * x[q];
            }
        }
    }
}

}  // namespace organpool
