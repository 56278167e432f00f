// Missing-label-aware metrics and the frozen calibration protocol:
// per-label temperature scaling followed by F1-optimal thresholds.
#pragma once

#include <cstdio>
#include <optional>

#include <nlohmann/json.hpp>

#include "organpool/training.hpp"

namespace organpool {

/// Undefined metrics are explicit: std::nullopt, never 0 or NaN.
using Metric = std::optional<double>;

namespace detail {

struct Scored {
    double score;
    bool positive;
};

inline std::vector<Scored> observed(std::span<const double> scores, std::span<const std::int8_t> targets) {
    if (scores.size() != targets.size()) fail(ErrorKind::invalid_input, "scores and targets differ in length");
    std::vector<Scored> v;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (targets[i] == 0 || targets[i] == 1) v.push_back({scores[i], targets[i] == 1});
    }
    return v;
}

}  // namespace detail

/// Mann-Whitney AUROC with half credit for ties, from integer pair counts.
inline Metric auroc(std::span<const double> scores, std::span<const std::int8_t> targets) {
    auto v = detail::observed(scores, targets);
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    std::uint64_t pos = 0, neg = 0, twice_u = 0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        std::uint64_t bp = 0, bn = 0;
        while (j < v.size() && v[j].score == v[i].score) {
            (v[j].positive ? bp : bn) += 1;
            ++j;
        }
        twice_u += bp * (2 * neg + bn);
        pos += bp;
        neg += bn;
        i = j;
    }
    if (pos == 0 || neg == 0) return std::nullopt;
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Step-wise average precision over a descending sweep; tied scores enter
/// together.
inline Metric auprc(std::span<const double> scores, std::span<const std::int8_t> targets) {
    auto v = detail::observed(scores, targets);
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    std::size_t total_pos = 0;
    for (const auto& s : v) total_pos += s.positive;
    if (total_pos == 0) return std::nullopt;
    const double p = static_cast<double>(total_pos);
    double ap = 0.0;
    std::size_t tp = 0, seen = 0, prev_tp = 0;
    for (std::size_t i = 0; i < v.size();) {
        std::size_t j = i;
        while (j < v.size() && v[j].score == v[i].score) {
            tp += v[j].positive;
            ++j;
        }
        seen = j;
        if (tp != prev_tp) {
            ap += (static_cast<double>(tp) / p - static_cast<double>(prev_tp) / p) *
                  (static_cast<double>(tp) / static_cast<double>(seen));
        }
        prev_tp = tp;
        i = j;
    }
    return ap;
}

struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline ConfusionCounts confusion(std::span<const double> probs, std::span<const std::int8_t> targets, double theta) {
    if (probs.size() != targets.size()) fail(ErrorKind::invalid_input, "probabilities and targets differ in length");
    ConfusionCounts c;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (targets[i] != 0 && targets[i] != 1) continue;
        const bool pred = probs[i] >= theta;
        if (targets[i] == 1) (pred ? c.tp : c.fn) += 1;
        else (pred ? c.fp : c.tn) += 1;
    }
    return c;
}

inline double f1_from(const ConfusionCounts& c) {
    const std::size_t denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 0.0 : static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

struct F1Ba {
    Metric f1;  // undefined only when no target is observed
    Metric ba;  // undefined when either class is absent
};

inline F1Ba f1_ba(std::span<const double> probs, std::span<const std::int8_t> targets, double theta) {
    const auto c = confusion(probs, targets, theta);
    F1Ba out;
    if (c.tp + c.fp + c.tn + c.fn > 0) out.f1 = f1_from(c);
    const std::size_t p = c.tp + c.fn, n = c.tn + c.fp;
    if (p > 0 && n > 0) {
        out.ba = 0.5 * (static_cast<double>(c.tp) / static_cast<double>(p) +
                        static_cast<double>(c.tn) / static_cast<double>(n));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Calibration fits.

inline constexpr double kTemperatureMin = 0.05;
inline constexpr double kTemperatureMax = 20.0;

struct TemperatureFit {
    double temperature = 1.0;
    std::string status = "insufficient";  // or "fitted"
    std::size_t valid_count = 0;
    double bce_identity = 0.0;
    double bce_fitted = 0.0;
};

inline double mean_bce_at(std::span<const double> logits, std::span<const std::int8_t> targets, double temperature) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (targets[i] != 0 && targets[i] != 1) continue;
        s += bce_with_logits(logits[i] / temperature, targets[i]);
        ++n;
    }
    return n == 0 ? 0.0 : s / static_cast<double>(n);
}

/// Golden-section search on log T over [0.05, 20]; the identity temperature
/// is kept whenever it is at least as good.
inline TemperatureFit fit_temperature(std::span<const double> logits, std::span<const std::int8_t> targets,
                                      int max_iter = 200, std::size_t min_count = 64) {
    if (logits.size() != targets.size()) fail(ErrorKind::invalid_input, "logits and targets differ in length");
    TemperatureFit fit;
    for (auto t : targets) fit.valid_count += (t == 0 || t == 1);
    fit.bce_identity = mean_bce_at(logits, targets, 1.0);
    fit.bce_fitted = fit.bce_identity;
    if (fit.valid_count < min_count) return fit;
    fit.status = "fitted";
    auto f = [&](double log_t) { return mean_bce_at(logits, targets, std::exp(log_t)); };
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = std::log(kTemperatureMin), b = std::log(kTemperatureMax);
    double c = b - ratio * (b - a), d = a + ratio * (b - a);
    double fc = f(c), fd = f(d);
    for (int it = 0; it < max_iter && b - a > 1e-12; ++it) {
        if (fc <= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    const double best_log = fc <= fd ? c : d;
    const double best = std::min(fc, fd);
    if (best < fit.bce_identity) {
        fit.temperature = std::exp(best_log);
        fit.bce_fitted = best;
    }
    return fit;
}

struct ThresholdFit {
    double theta = 0.5;
    double f1 = 0.0;
    std::string status = "no_positives";  // or "fitted"
};

/// Candidates: {0, 1} and midpoints of consecutive distinct observed
/// probabilities. Highest F1 wins; ties go to the smallest threshold.
inline std::vector<double> threshold_candidates(std::span<const double> probs, std::span<const std::int8_t> targets) {
    std::vector<double> p;
    for (std::size_t i = 0; i < probs.size(); ++i)
        if (targets[i] == 0 || targets[i] == 1) p.push_back(probs[i]);
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
    std::vector<double> c{0.0};
    for (std::size_t i = 1; i < p.size(); ++i) c.push_back(0.5 * (p[i - 1] + p[i]));
    c.push_back(1.0);
    std::sort(c.begin(), c.end());
    c.erase(std::unique(c.begin(), c.end()), c.end());
    return c;
}

inline ThresholdFit fit_threshold(std::span<const double> probs, std::span<const std::int8_t> targets) {
    if (probs.size() != targets.size()) fail(ErrorKind::invalid_input, "probabilities and targets differ in length");
    ThresholdFit fit;
    auto v = detail::observed(probs, targets);
    std::size_t pos = 0;
    for (const auto& s : v) pos += s.positive;
    if (pos == 0) {
        fit.f1 = f1_from(confusion(probs, targets, fit.theta));
        return fit;
    }
    fit.status = "fitted";
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
    // Ascending sweep: everything at index >= k is predicted positive.
    std::vector<std::size_t> pos_at_or_above(v.size() + 1, 0);
    for (std::size_t i = v.size(); i-- > 0;) pos_at_or_above[i] = pos_at_or_above[i + 1] + v[i].positive;
    std::size_t k = 0;
    bool first = true;
    for (double theta : threshold_candidates(probs, targets)) {
        while (k < v.size() && v[k].score < theta) ++k;
        ConfusionCounts c;
        c.tp = pos_at_or_above[k];
        c.fp = (v.size() - k) - c.tp;
        c.fn = pos - c.tp;
        const double f1 = f1_from(c);
        if (first || f1 > fit.f1) {
            fit.f1 = f1;
            fit.theta = theta;
            first = false;
        }
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Calibration table.

struct CalibrationEntry {
    std::string label;
    double temperature = 1.0;
    double theta = 0.5;
    std::size_t valid_count = 0;
    std::string status = "insufficient";
    std::string threshold_status = "no_positives";
};

struct CalibrationTable {
    std::vector<CalibrationEntry> entries;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& e : entries) {
            arr.push_back({{"label", e.label},
                           {"T", e.temperature},
                           {"theta", e.theta},
                           {"valid_count", e.valid_count},
                           {"status", e.status},
                           {"threshold_status", e.threshold_status}});
        }
        return nlohmann::ordered_json{{"calibration", arr}};
    }

    static CalibrationTable from_json(const nlohmann::json& j) {
        CalibrationTable t;
        try {
            for (const auto& e : j.at("calibration")) {
                CalibrationEntry c;
                c.label = e.at("label").get<std::string>();
                c.temperature = e.at("T").get<double>();
                c.theta = e.at("theta").get<double>();
                c.valid_count = e.at("valid_count").get<std::size_t>();
                c.status = e.at("status").get<std::string>();
                c.threshold_status = e.value("threshold_status", std::string("fitted"));
                if (!(c.temperature > 0.0)) fail(ErrorKind::data, "calibration T for '" + c.label + "' must be > 0");
                if (!(c.theta >= 0.0 && c.theta <= 1.0)) fail(ErrorKind::data, "calibration theta for '" + c.label + "' outside [0,1]");
                t.entries.push_back(std::move(c));
            }
        } catch (const nlohmann::json::exception& ex) {
            fail(ErrorKind::data, std::string("malformed calibration table: ") + ex.what());
        }
        return t;
    }
};

/// Fits temperatures on validation logits, then thresholds on the
/// temperature-scaled validation probabilities.
inline CalibrationTable fit_calibration(const Matrix& val_logits, std::span<const Targets> val_targets,
                                        const std::vector<std::string>& labels, int max_iter = 200,
                                        std::size_t min_count = 64) {
    if (val_logits.cols() != labels.size() || val_logits.rows() != val_targets.size()) {
        fail(ErrorKind::invalid_input, "calibration inputs do not match the label set");
    }
    CalibrationTable table;
    for (std::size_t l = 0; l < labels.size(); ++l) {
        std::vector<double> z(val_logits.rows());
        std::vector<std::int8_t> y(val_logits.rows());
        for (std::size_t s = 0; s < z.size(); ++s) {
            z[s] = val_logits(s, l);
            y[s] = val_targets[s][l];
        }
        const auto tf = fit_temperature(z, y, max_iter, min_count);
        std::vector<double> p(z.size());
        for (std::size_t s = 0; s < z.size(); ++s) p[s] = sigmoid(z[s] / tf.temperature);
        const auto th = fit_threshold(p, y);
        table.entries.push_back({labels[l], tf.temperature, th.theta, tf.valid_count, tf.status, th.status});
    }
    return table;
}

struct CalibratedOutputs {
    Matrix scaled_logits;  // z / T
    Matrix probabilities;  // sigmoid(z / T)
    std::vector<std::vector<std::uint8_t>> decisions;
};

inline CalibratedOutputs apply_calibration(const Matrix& logits, const CalibrationTable& table) {
    if (logits.cols() != table.entries.size()) {
        fail(ErrorKind::invalid_input, "logits have " + std::to_string(logits.cols()) + " labels, calibration table " +
                                           std::to_string(table.entries.size()));
    }
    CalibratedOutputs out{Matrix(logits.rows(), logits.cols()), Matrix(logits.rows(), logits.cols()), {}};
    out.decisions.assign(logits.rows(), std::vector<std::uint8_t>(logits.cols(), 0));
    for (std::size_t s = 0; s < logits.rows(); ++s) {
        for (std::size_t l = 0; l < logits.cols(); ++l) {
            const auto& e = table.entries[l];
            out.scaled_logits(s, l) = logits(s, l) / e.temperature;
            out.probabilities(s, l) = sigmoid(out.scaled_logits(s, l));
            out.decisions[s][l] = out.probabilities(s, l) >= e.theta;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct LabelMetrics {
    std::string label;
    Metric auroc, auprc, f1, ba;
    std::size_t n_valid = 0;
    std::size_t n_pos = 0;
};

struct MacroMetric {
    Metric mean;
    std::size_t included = 0;
    std::size_t excluded = 0;
};

struct MetricReport {
    std::string name;
    std::vector<LabelMetrics> labels;
    MacroMetric auroc, auprc, f1, ba;

    std::vector<std::string> undefined(Metric LabelMetrics::*field) const {
        std::vector<std::string> out;
        for (const auto& l : labels)
            if (!(l.*field)) out.push_back(l.label);
        return out;
    }
};

inline MacroMetric macro_mean(const std::vector<LabelMetrics>& labels, Metric LabelMetrics::*field) {
    MacroMetric m;
    double s = 0.0;
    for (const auto& l : labels) {
        if (l.*field) {
            s += *(l.*field);
            ++m.included;
        } else {
            ++m.excluded;
        }
    }
    if (m.included > 0) m.mean = s / static_cast<double>(m.included);
    return m;
}

inline MetricReport macro_summary(std::string name, std::vector<LabelMetrics> labels) {
    MetricReport r;
    r.name = std::move(name);
    r.labels = std::move(labels);
    r.auroc = macro_mean(r.labels, &LabelMetrics::auroc);
    r.auprc = macro_mean(r.labels, &LabelMetrics::auprc);
    r.f1 = macro_mean(r.labels, &LabelMetrics::f1);
    r.ba = macro_mean(r.labels, &LabelMetrics::ba);
    return r;
}

/// Frozen evaluation: rank metrics on z / T (sigmoid saturation cannot
/// create ties there), F1/BA on sigmoid(z / T) >= theta.
inline MetricReport evaluate(std::string name, const Matrix& logits, std::span<const Targets> targets,
                             const CalibrationTable& table) {
    if (logits.rows() != targets.size()) fail(ErrorKind::invalid_input, "logits and targets differ in study count");
    const auto cal = apply_calibration(logits, table);
    std::vector<LabelMetrics> rows;
    for (std::size_t l = 0; l < logits.cols(); ++l) {
        std::vector<double> z(logits.rows()), p(logits.rows());
        std::vector<std::int8_t> y(logits.rows());
        for (std::size_t s = 0; s < z.size(); ++s) {
            z[s] = cal.scaled_logits(s, l);
            p[s] = cal.probabilities(s, l);
            y[s] = targets[s][l];
        }
        LabelMetrics m;
        m.label = table.entries[l].label;
        m.auroc = auroc(z, y);
        m.auprc = auprc(z, y);
        const auto fb = f1_ba(p, y, table.entries[l].theta);
        m.f1 = fb.f1;
        m.ba = fb.ba;
        for (auto t : y) {
            m.n_valid += (t == 0 || t == 1);
            m.n_pos += (t == 1);
        }
        rows.push_back(std::move(m));
    }
    return macro_summary(std::move(name), std::move(rows));
}

inline nlohmann::ordered_json metric_json(const Metric& m) { return m ? nlohmann::ordered_json(*m) : nlohmann::ordered_json(nullptr); }

inline nlohmann::ordered_json report_json(const MetricReport& r) {
    nlohmann::ordered_json labels = nlohmann::ordered_json::array();
    for (const auto& l : r.labels) {
        labels.push_back({{"label", l.label},
                          {"auroc", metric_json(l.auroc)},
                          {"auprc", metric_json(l.auprc)},
                          {"f1", metric_json(l.f1)},
                          {"ba", metric_json(l.ba)},
                          {"n_valid", l.n_valid},
                          {"n_pos", l.n_pos}});
    }
    auto macro = [](const MacroMetric& m) {
        return nlohmann::ordered_json{{"mean", metric_json(m.mean)}, {"included", m.included}, {"excluded", m.excluded}};
    };
    return {{"name", r.name},
            {"macro",
             {{"auroc", macro(r.auroc)}, {"auprc", macro(r.auprc)}, {"f1", macro(r.f1)}, {"ba", macro(r.ba)}}},
            {"undefined",
             {{"auroc", r.undefined(&LabelMetrics::auroc)},
              {"auprc", r.undefined(&LabelMetrics::auprc)},
              {"f1", r.undefined(&LabelMetrics::f1)},
              {"ba", r.undefined(&LabelMetrics::ba)}}},
            {"labels", labels}};
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    auto metric = [](const nlohmann::json& v) -> Metric {
        if (v.is_null()) return std::nullopt;
        return v.get<double>();
    };
    try {
        std::vector<LabelMetrics> rows;
        for (const auto& l : j.at("labels")) {
            LabelMetrics m;
            m.label = l.at("label").get<std::string>();
            m.auroc = metric(l.at("auroc"));
            m.auprc = metric(l.at("auprc"));
            m.f1 = metric(l.at("f1"));
            m.ba = metric(l.at("ba"));
            m.n_valid = l.at("n_valid").get<std::size_t>();
            m.n_pos = l.value("n_pos", std::size_t{0});
            rows.push_back(std::move(m));
        }
        return macro_summary(j.at("name").get<std::string>(), std::move(rows));
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorKind::data, std::string("malformed metric report: ") + ex.what());
    }
}

inline std::string format_metric(const Metric& m, int precision = 4) {
    if (!m) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, *m);
    return buf;
}

inline std::string report_text(const MetricReport& r) {
    std::size_t width = 5;
    for (const auto& l : r.labels) width = std::max(width, l.label.size());
    auto pad = [](std::string s, std::size_t w) {
        s.resize(std::max(w, s.size()), ' ');
        return s;
    };
    auto rpad = [](const std::string& s, std::size_t w) { return std::string(w > s.size() ? w - s.size() : 0, ' ') + s; };
    std::string out = "report: " + r.name + "\n";
    out += pad("label", width) + rpad("auroc", 9) + rpad("auprc", 9) + rpad("f1", 9) + rpad("ba", 9) +
           rpad("n_valid", 9) + "\n";
    for (const auto& l : r.labels) {
        out += pad(l.label, width) + rpad(format_metric(l.auroc), 9) + rpad(format_metric(l.auprc), 9) +
               rpad(format_metric(l.f1), 9) + rpad(format_metric(l.ba), 9) + rpad(std::to_string(l.n_valid), 9) + "\n";
    }
    out += pad("macro", width) + rpad(format_metric(r.auroc.mean), 9) + rpad(format_metric(r.auprc.mean), 9) +
           rpad(format_metric(r.f1.mean), 9) + rpad(format_metric(r.ba.mean), 9) + "\n";
    auto excl = [&](const char* what, const MacroMetric& m) {
        if (m.excluded) out += std::string("excluded from macro ") + what + ": " + std::to_string(m.excluded) + "\n";
    };
    excl("auroc", r.auroc);
    excl("auprc", r.auprc);
    excl("f1", r.f1);
    excl("ba", r.ba);
    return out;
}

inline std::string per_class_csv(const MetricReport& r) {
    std::string out = "label,auroc,auprc,f1,ba,n_valid\n";
    for (const auto& l : r.labels) {
        std::string name = l.label;
        if (name.find_first_of(",\"") != std::string::npos) {
            std::string q = "\"";
            for (char c : name) q += c == '"' ? std::string("\"\"") : std::string(1, c);
            name = q + "\"";
        }
        out += name + "," + format_metric(l.auroc, 6) + "," + format_metric(l.auprc, 6) + "," + format_metric(l.f1, 6) +
               "," + format_metric(l.ba, 6) + "," + std::to_string(l.n_valid) + "\n";
    }
    return out;
}

}  // namespace organpool
