#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ikf/errors.hpp"
#include "ikf/extraction.hpp"
#include "ikf/geometry.hpp"
#include "ikf/metrics.hpp"
#include "ikf/neural.hpp"

// Structured-text file schemas shared by the CLI and the tests: keypoint
// files, run configuration, metric reports, and dataset manifests. Files are
// JSON; writing goes through a canonical emitter with fixed field order and
// 17-significant-digit reals so that identical inputs produce identical
// bytes.

namespace ikf {

namespace jsonio {

inline std::string real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s(buf);
    // bare integers still parse as numbers; keep them as-is
    return s;
}

// Minimal ordered JSON emitter.
class Writer {
public:
    std::string str() const { return out_; }

    void begin_object() { open('{'); }
    void end_object() { close('}'); }
    void begin_array() { open('['); }
    void end_array() { close(']'); }

    void key(const std::string& k) {
        comma();
        out_ += '"' + escape(k) + "\":";
        pending_value_ = true;
    }

    void value(double v) { raw(real(v)); }
    void value(int v) { raw(std::to_string(v)); }
    void value(long v) { raw(std::to_string(v)); }
    void value(std::uint64_t v) { raw(std::to_string(v)); }
    void value(std::size_t v) { raw(std::to_string(v)); }
    void value(bool v) { raw(v ? "true" : "false"); }
    void value(const std::string& v) { raw('"' + escape(v) + '"'); }
    void value(const char* v) { raw('"' + escape(v) + '"'); }

private:
    void open(char c) {
        comma();
        out_ += c;
        fresh_ = true;
        pending_value_ = false;
    }
    void close(char c) {
        out_ += c;
        fresh_ = false;
    }
    void comma() {
        if (!fresh_ && !pending_value_) out_ += ',';
        fresh_ = false;
    }
    void raw(const std::string& s) {
        comma();
        out_ += s;
        pending_value_ = false;
    }
    static std::string escape(const std::string& s) {
        std::string r;
        for (char c : s) {
            if (c == '"' || c == '\\') r += '\\';
            r += c;
        }
        return r;
    }

    std::string out_;
    bool fresh_ = true;
    bool pending_value_ = false;
};

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw validation_error("cannot open for writing: " + path);
    os << content;
    if (!os) throw validation_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw validation_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline nlohmann::json parse_file(const std::string& path) {
    try {
        return nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(path + ": " + e.what());
    }
}

} // namespace jsonio

// ---------------------------------------------------------------------------
// keypoint files
// ---------------------------------------------------------------------------

// One shape's keypoints, ground truth and predictions alike. `scores` holds
// the stacked-UDF channel values sampled at each keypoint when a semantic
// field was available.
struct KeypointFile {
    std::string model_id;
    std::string category = "synthetic";
    double radius = 0.08;
    KeypointSet keypoints;
    std::vector<std::vector<double>> scores; // empty or one vector per keypoint
};

inline std::string to_json(const KeypointFile& f) {
    jsonio::Writer w;
    w.begin_object();
    w.key("model_id");
    w.value(f.model_id);
    w.key("category");
    w.value(f.category);
    w.key("radius");
    w.value(f.radius);
    if (f.keypoints.labeled()) {
        w.key("label_count");
        w.value(f.keypoints.label_count);
    }
    w.key("keypoints");
    w.begin_array();
    for (std::size_t i = 0; i < f.keypoints.points.size(); ++i) {
        w.begin_object();
        w.key("xyz");
        w.begin_array();
        for (int a = 0; a < 3; ++a) w.value(f.keypoints.points[i][a]);
        w.end_array();
        if (f.keypoints.labeled()) {
            w.key("semantic_id");
            w.value((*f.keypoints.labels)[i]);
        }
        if (!f.scores.empty()) {
            w.key("scores");
            w.begin_array();
            for (double s : f.scores[i]) w.value(s);
            w.end_array();
        }
        w.end_object();
    }
    w.end_array();
    w.end_object();
    return w.str() + "\n";
}

inline void write_keypoint_file(const KeypointFile& f, const std::string& path) {
    jsonio::write_text_file(path, to_json(f));
}

inline KeypointFile read_keypoint_file(const std::string& path) {
    const nlohmann::json j = jsonio::parse_file(path);
    KeypointFile f;
    try {
        f.model_id = j.at("model_id").get<std::string>();
        f.category = j.value("category", std::string("unknown"));
        f.radius = j.at("radius").get<double>();
        const bool labeled = j.contains("label_count");
        if (labeled) {
            f.keypoints.label_count = j.at("label_count").get<int>();
            f.keypoints.labels.emplace();
        }
        for (const auto& kp : j.at("keypoints")) {
            const auto& xyz = kp.at("xyz");
            if (!xyz.is_array() || xyz.size() != 3)
                throw validation_error(path + ": xyz must have 3 components");
            f.keypoints.points.emplace_back(xyz[0].get<double>(), xyz[1].get<double>(),
                                            xyz[2].get<double>());
            if (labeled) f.keypoints.labels->push_back(kp.at("semantic_id").get<int>());
            if (kp.contains("scores"))
                f.scores.push_back(kp.at("scores").get<std::vector<double>>());
        }
        if (!f.scores.empty() && f.scores.size() != f.keypoints.points.size())
            throw validation_error(path + ": scores must cover all keypoints");
        f.keypoints.validate();
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(path + ": " + e.what());
    }
    return f;
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct GenConfig {
    int count = 10;           // shapes to generate
    int k = 8;                // keypoints per shape
    double min_separation = -1.0; // <0: use 3 * radius
    std::string category = "synthetic";
    bool write_samples = true;
};

struct GridConfig {
    int resolution = 128;
};

struct MetricConfig {
    std::vector<double> thresholds; // empty: 0.00 .. 0.10 step 0.01
    MatchRule match_rule = MatchRule::one_to_one;

    std::vector<double> resolved_thresholds() const {
        if (!thresholds.empty()) return thresholds;
        std::vector<double> t;
        for (int i = 0; i <= 10; ++i) t.push_back(0.01 * i);
        return t;
    }
};

// Everything a run needs; a resolved copy is embedded in every dataset
// directory. The sphere radius is shared by sampling, extraction, and
// generation so the pipeline stays internally consistent.
struct RunConfig {
    std::uint64_t seed = 0;
    double radius = 0.08;
    GenConfig gen;
    SampleConfig sampling;
    FitConfig fit; // fit.sampling and fit.seed are derived per shape
    GridConfig grid;
    ExtractionConfig extraction;
    MetricConfig metrics;

    double min_separation() const {
        return gen.min_separation >= 0.0 ? gen.min_separation : 3.0 * radius;
    }

    void validate() const {
        if (radius <= 0.0) throw validation_error("radius must be positive");
        sampling.validate();
        fit.validate();
        if (gen.count < 1 || gen.k < 1) throw validation_error("gen counts must be >= 1");
        if (grid.resolution < 2) throw validation_error("grid resolution must be >= 2");
        ExtractionConfig ex = extraction;
        ex.radius = radius;
        ex.validate();
    }
};

inline std::string to_json(const RunConfig& c) {
    jsonio::Writer w;
    w.begin_object();
    w.key("seed");
    w.value(c.seed);
    w.key("radius");
    w.value(c.radius);

    w.key("gen");
    w.begin_object();
    w.key("count");
    w.value(c.gen.count);
    w.key("k");
    w.value(c.gen.k);
    w.key("min_separation");
    w.value(c.min_separation());
    w.key("category");
    w.value(c.gen.category);
    w.key("write_samples");
    w.value(c.gen.write_samples);
    w.end_object();

    w.key("sampling");
    w.begin_object();
    w.key("n_volume");
    w.value(c.sampling.n_volume);
    w.key("n_surface");
    w.value(c.sampling.n_surface);
    w.key("icosphere_level");
    w.value(c.sampling.icosphere_level);
    w.end_object();

    w.key("network");
    w.begin_object();
    w.key("hidden");
    w.begin_array();
    for (int h : c.fit.hidden) w.value(h);
    w.end_array();
    w.key("omega");
    w.value(c.fit.omega);
    w.key("activation");
    w.value(to_string(c.fit.activation));
    w.key("posenc_bands");
    w.value(c.fit.posenc_cfg.bands);
    w.key("posenc_include_raw");
    w.value(c.fit.posenc_cfg.include_raw);
    w.key("lambda1");
    w.value(c.fit.loss.lambda1);
    w.key("lambda2");
    w.value(c.fit.loss.lambda2);
    w.key("lambda3");
    w.value(c.fit.loss.lambda3);
    w.key("epochs");
    w.value(c.fit.epochs);
    w.key("batch");
    w.value(c.fit.batch);
    w.key("lr");
    w.value(c.fit.adam.lr);
    w.key("beta1");
    w.value(c.fit.adam.beta1);
    w.key("beta2");
    w.value(c.fit.adam.beta2);
    w.key("epsilon");
    w.value(c.fit.adam.epsilon);
    w.key("resample_per_epoch");
    w.value(c.fit.resample_per_epoch);
    w.end_object();

    w.key("grid");
    w.begin_object();
    w.key("resolution");
    w.value(c.grid.resolution);
    w.end_object();

    w.key("extraction");
    w.begin_object();
    w.key("grid_size");
    w.value(c.extraction.grid_size);
    w.key("epsilon");
    w.value(c.extraction.epsilon);
    w.key("n_vote");
    w.value(c.extraction.n_vote);
    w.key("n_max");
    w.value(c.extraction.n_max);
    w.key("max_merge_rounds");
    w.value(c.extraction.max_merge_rounds);
    w.key("literal_vote");
    w.value(c.extraction.literal_vote);
    w.key("density_normalize");
    w.value(c.extraction.density_normalize);
    w.end_object();

    w.key("metrics");
    w.begin_object();
    w.key("thresholds");
    w.begin_array();
    for (double t : c.metrics.resolved_thresholds()) w.value(t);
    w.end_array();
    w.key("match_rule");
    w.value(c.metrics.match_rule == MatchRule::one_to_one ? "one_to_one" : "one_to_many");
    w.end_object();

    w.end_object();
    return w.str() + "\n";
}

inline RunConfig run_config_from_json(const nlohmann::json& j, const std::string& where) {
    RunConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.radius = j.value("radius", c.radius);
        if (j.contains("gen")) {
            const auto& g = j.at("gen");
            c.gen.count = g.value("count", c.gen.count);
            c.gen.k = g.value("k", c.gen.k);
            c.gen.min_separation = g.value("min_separation", c.gen.min_separation);
            c.gen.category = g.value("category", c.gen.category);
            c.gen.write_samples = g.value("write_samples", c.gen.write_samples);
        }
        if (j.contains("sampling")) {
            const auto& s = j.at("sampling");
            c.sampling.n_volume = s.value("n_volume", c.sampling.n_volume);
            c.sampling.n_surface = s.value("n_surface", c.sampling.n_surface);
            c.sampling.icosphere_level = s.value("icosphere_level", c.sampling.icosphere_level);
        }
        if (j.contains("network")) {
            const auto& n = j.at("network");
            if (n.contains("hidden")) c.fit.hidden = n.at("hidden").get<std::vector<int>>();
            c.fit.omega = n.value("omega", c.fit.omega);
            if (n.contains("activation"))
                c.fit.activation = activation_from_string(n.at("activation").get<std::string>());
            c.fit.posenc_cfg.bands = n.value("posenc_bands", c.fit.posenc_cfg.bands);
            c.fit.posenc_cfg.include_raw =
                n.value("posenc_include_raw", c.fit.posenc_cfg.include_raw);
            c.fit.loss.lambda1 = n.value("lambda1", c.fit.loss.lambda1);
            c.fit.loss.lambda2 = n.value("lambda2", c.fit.loss.lambda2);
            c.fit.loss.lambda3 = n.value("lambda3", c.fit.loss.lambda3);
            c.fit.epochs = n.value("epochs", c.fit.epochs);
            c.fit.batch = n.value("batch", c.fit.batch);
            c.fit.adam.lr = n.value("lr", c.fit.adam.lr);
            c.fit.adam.beta1 = n.value("beta1", c.fit.adam.beta1);
            c.fit.adam.beta2 = n.value("beta2", c.fit.adam.beta2);
            c.fit.adam.epsilon = n.value("epsilon", c.fit.adam.epsilon);
            c.fit.resample_per_epoch = n.value("resample_per_epoch", c.fit.resample_per_epoch);
        }
        if (j.contains("grid")) c.grid.resolution = j.at("grid").value("resolution", 128);
        if (j.contains("extraction")) {
            const auto& e = j.at("extraction");
            c.extraction.grid_size = e.value("grid_size", c.extraction.grid_size);
            c.extraction.epsilon = e.value("epsilon", c.extraction.epsilon);
            c.extraction.n_vote = e.value("n_vote", c.extraction.n_vote);
            c.extraction.n_max = e.value("n_max", c.extraction.n_max);
            c.extraction.max_merge_rounds =
                e.value("max_merge_rounds", c.extraction.max_merge_rounds);
            c.extraction.literal_vote = e.value("literal_vote", c.extraction.literal_vote);
            c.extraction.density_normalize =
                e.value("density_normalize", c.extraction.density_normalize);
        }
        if (j.contains("metrics")) {
            const auto& m = j.at("metrics");
            if (m.contains("thresholds"))
                c.metrics.thresholds = m.at("thresholds").get<std::vector<double>>();
            if (m.contains("match_rule"))
                c.metrics.match_rule = m.at("match_rule").get<std::string>() == "one_to_many"
                                           ? MatchRule::one_to_many
                                           : MatchRule::one_to_one;
        }
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(where + ": " + e.what());
    }
    c.extraction.radius = c.radius;
    c.validate();
    return c;
}

inline RunConfig read_run_config(const std::string& path) {
    return run_config_from_json(jsonio::parse_file(path), path);
}

// ---------------------------------------------------------------------------
// metric reports
// ---------------------------------------------------------------------------

inline std::string to_json(const MetricReport& r) {
    jsonio::Writer w;
    w.begin_object();
    w.key("bhd");
    w.value(r.bhd);
    w.key("cd");
    w.value(r.cd);
    w.key("per_category");
    w.begin_object();
    for (const auto& [cat, v] : r.per_category) {
        w.key(cat);
        w.begin_object();
        w.key("bhd");
        w.value(v.first);
        w.key("cd");
        w.value(v.second);
        w.end_object();
    }
    w.end_object();
    w.key("miou_curve");
    w.begin_array();
    for (const auto& [t, iou] : r.miou_curve) {
        w.begin_array();
        w.value(t);
        w.value(iou);
        w.end_array();
    }
    w.end_array();
    w.key("topk");
    w.begin_object();
    for (const auto& [k, acc] : r.topk) {
        w.key(std::to_string(k));
        w.value(acc);
    }
    w.end_object();
    w.end_object();
    return w.str() + "\n";
}

inline MetricReport read_metric_report(const std::string& path) {
    const nlohmann::json j = jsonio::parse_file(path);
    MetricReport r;
    try {
        r.bhd = j.at("bhd").get<double>();
        r.cd = j.at("cd").get<double>();
        for (const auto& [cat, v] : j.at("per_category").items())
            r.per_category[cat] = {v.at("bhd").get<double>(), v.at("cd").get<double>()};
        for (const auto& e : j.at("miou_curve"))
            r.miou_curve.emplace_back(e[0].get<double>(), e[1].get<double>());
        for (const auto& [k, acc] : j.at("topk").items())
            r.topk[std::stoi(k)] = acc.get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw validation_error(path + ": " + e.what());
    }
    return r;
}

inline std::string to_text(const MetricReport& r) {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "BHD %.6f\nCD  %.6f\n", r.bhd, r.cd);
    os << buf;
    if (!r.per_category.empty()) {
        os << "\nCategory           BHD        CD\n";
        for (const auto& [cat, v] : r.per_category) {
            std::snprintf(buf, sizeof buf, "%-16s %9.6f %9.6f\n", cat.c_str(), v.first,
                          v.second);
            os << buf;
        }
    }
    if (!r.miou_curve.empty()) {
        os << "\nthreshold  mIoU\n";
        for (const auto& [t, iou] : r.miou_curve) {
            std::snprintf(buf, sizeof buf, "%9.4f  %.6f\n", t, iou);
            os << buf;
        }
    }
    if (!r.topk.empty()) {
        os << "\n";
        for (const auto& [k, acc] : r.topk) {
            std::snprintf(buf, sizeof buf, "Top-%d accuracy  %.4f\n", k, acc);
            os << buf;
        }
    }
    return os.str();
}

} // namespace ikf
