#pragma once

#include <deepconn/common.hpp>
#include <deepconn/ingest.hpp>
#include <deepconn/model.hpp>
#include <deepconn/textrep.hpp>
#include <deepconn/train.hpp>

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace deepconn {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------
// One flat bag of every tunable. Sources are layered: built-in defaults,
// then a key=value config file, then command-line flags; later layers win.

struct RunConfig {
    // paths
    std::string data;
    std::string embeddings;
    std::string out;
    std::string checkpoint;

    // text representation
    std::string rep = "embed";  // embed | tfidf | random
    Index embed_dim = 300;
    Index n_max = 300;
    Index min_count = 1;
    bool train_embeddings = false;

    // model
    std::string variant = "full";  // full | user-only | item-only | dot-product
    Index window = 3;
    Index kernels = 100;
    Index tower_dim = 50;
    Index fm_factors = 0;  // 0 means twice the tower output

    // corpus split
    double ratio_train = 0.8;
    double ratio_valid = 0.1;
    double ratio_test = 0.1;
    std::uint64_t split_seed = 0;
    bool stratify = false;
    bool exclude_target = true;

    // optimization
    double lr = 0.002;
    Index batch_size = 100;
    Index epochs = 50;
    Index patience = 5;
    std::uint64_t seed = 0;
    double dropout = 0.5;
    double weight_decay = 0.0;
    bool rmsprop_conventional = false;

    // baseline + reports
    std::string baseline_model = "mf";  // mean | mf
    Index factors = 50;
    double reg = 0.01;
    Index sweeps = 20;
    std::vector<Index> mf_grid_factors = {25, 50, 100, 150, 200};
    std::vector<double> mf_grid_regs = {0.001, 0.01, 0.1, 1.0};
    std::vector<std::size_t> bucket_edges = {1, 2, 3, 4, 5, 10, 50};
};

// ---------------------------------------------------------------------------
// Key/value assignment
// ---------------------------------------------------------------------------

namespace detail {

inline double parse_double(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad numeric value for " + key + ": " + value);
    }
    if (used != value.size())
        throw std::invalid_argument("bad numeric value for " + key + ": " + value);
    return v;
}

inline long long parse_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad integer value for " + key + ": " + value);
    }
    if (used != value.size())
        throw std::invalid_argument("bad integer value for " + key + ": " + value);
    return v;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    const long long v = parse_int(key, value);
    if (v < 0) throw std::invalid_argument(key + " must be nonnegative");
    return static_cast<std::uint64_t>(v);
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("bad boolean value for " + key + ": " + value);
}

inline std::vector<std::string> split_commas(const std::string& value) {
    std::vector<std::string> parts;
    std::string part;
    std::istringstream in(value);
    while (std::getline(in, part, ',')) parts.push_back(part);
    return parts;
}

}  // namespace detail

/// Assigns one configuration key from its textual value; unknown keys and
/// malformed values are errors. This is the single entry point both the
/// config file and the flag parser go through.
inline void set_key(RunConfig& config, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    using detail::parse_u64;

    if (key == "data") config.data = value;
    else if (key == "embeddings") config.embeddings = value;
    else if (key == "out") config.out = value;
    else if (key == "checkpoint") config.checkpoint = value;
    else if (key == "rep") config.rep = value;
    else if (key == "embed_dim") config.embed_dim = parse_int(key, value);
    else if (key == "n_max") config.n_max = parse_int(key, value);
    else if (key == "min_count") config.min_count = parse_int(key, value);
    else if (key == "train_embeddings") config.train_embeddings = parse_bool(key, value);
    else if (key == "variant") config.variant = value;
    else if (key == "window") config.window = parse_int(key, value);
    else if (key == "kernels") config.kernels = parse_int(key, value);
    else if (key == "tower_dim") config.tower_dim = parse_int(key, value);
    else if (key == "fm_factors") config.fm_factors = parse_int(key, value);
    else if (key == "ratios") {
        const auto parts = detail::split_commas(value);
        if (parts.size() != 3)
            throw std::invalid_argument("ratios must be three comma-separated numbers");
        config.ratio_train = parse_double(key, parts[0]);
        config.ratio_valid = parse_double(key, parts[1]);
        config.ratio_test = parse_double(key, parts[2]);
    } else if (key == "split_seed") config.split_seed = parse_u64(key, value);
    else if (key == "stratify") config.stratify = parse_bool(key, value);
    else if (key == "exclude_target") config.exclude_target = parse_bool(key, value);
    else if (key == "lr") config.lr = parse_double(key, value);
    else if (key == "batch_size") config.batch_size = parse_int(key, value);
    else if (key == "epochs") config.epochs = parse_int(key, value);
    else if (key == "patience") config.patience = parse_int(key, value);
    else if (key == "seed") config.seed = parse_u64(key, value);
    else if (key == "dropout") config.dropout = parse_double(key, value);
    else if (key == "weight_decay") config.weight_decay = parse_double(key, value);
    else if (key == "rmsprop_conventional") config.rmsprop_conventional = parse_bool(key, value);
    else if (key == "baseline_model") config.baseline_model = value;
    else if (key == "factors") config.factors = parse_int(key, value);
    else if (key == "reg") config.reg = parse_double(key, value);
    else if (key == "sweeps") config.sweeps = parse_int(key, value);
    else if (key == "mf_grid_factors") {
        config.mf_grid_factors.clear();
        for (const auto& p : detail::split_commas(value))
            config.mf_grid_factors.push_back(parse_int(key, p));
    } else if (key == "mf_grid_regs") {
        config.mf_grid_regs.clear();
        for (const auto& p : detail::split_commas(value))
            config.mf_grid_regs.push_back(parse_double(key, p));
    } else if (key == "bucket_edges") {
        config.bucket_edges.clear();
        for (const auto& p : detail::split_commas(value))
            config.bucket_edges.push_back(static_cast<std::size_t>(parse_u64(key, p)));
    } else {
        throw std::invalid_argument("unknown configuration key: " + key);
    }
}

/// Flat key=value file: one assignment per line, blank lines and #-comments
/// skipped, whitespace around key and value trimmed.
inline void apply_config_file(RunConfig& config, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file: " + path);
    std::string line;
    std::size_t line_no = 0;
    const auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            std::ostringstream msg;
            msg << path << ":" << line_no << ": expected key=value";
            throw std::invalid_argument(msg.str());
        }
        try {
            set_key(config, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            std::ostringstream msg;
            msg << path << ":" << line_no << ": " << e.what();
            throw std::invalid_argument(msg.str());
        }
    }
}

// ---------------------------------------------------------------------------
// Validation and conversion
// ---------------------------------------------------------------------------

inline ModelConfig make_model_config(const RunConfig& config) {
    ModelConfig m;
    m.c = config.embed_dim;
    m.t = config.window;
    m.n1 = config.kernels;
    m.n2 = config.tower_dim;
    m.k = config.fm_factors;
    m.seed = config.seed;
    return m;
}

inline TrainConfig make_train_config(const RunConfig& config) {
    TrainConfig t;
    t.lr = config.lr;
    t.batch_size = config.batch_size;
    t.max_epochs = config.epochs;
    t.patience = config.patience;
    t.seed = config.seed;
    t.dropout = config.dropout;
    t.weight_decay = config.weight_decay;
    if (config.rmsprop_conventional) {
        t.decay_sq = 0.1;
        t.decay_hist = 0.9;
    }
    return t;
}

inline void validate(const RunConfig& config) {
    rep_from_name(config.rep);  // throws on an unknown representation
    if (config.variant != "full" && config.variant != "user-only" &&
        config.variant != "item-only" && config.variant != "dot-product")
        throw std::invalid_argument("unknown variant: " + config.variant);
    if (config.baseline_model != "mean" && config.baseline_model != "mf")
        throw std::invalid_argument("unknown baseline model: " + config.baseline_model);
    if (config.train_embeddings && config.rep != "embed")
        throw std::invalid_argument("embedding training requires rep=embed");
    if (config.embed_dim < 1 || config.window < 1 || config.kernels < 1 || config.tower_dim < 1)
        throw std::invalid_argument("model dimensions must be >= 1");
    if (config.fm_factors < 0) throw std::invalid_argument("fm_factors must be >= 0");
    if (config.n_max < 1) throw std::invalid_argument("n_max must be >= 1");
    if (config.min_count < 1) throw std::invalid_argument("min_count must be >= 1");
    detail::check_ratios(SplitRatios{config.ratio_train, config.ratio_valid, config.ratio_test});
    make_train_config(config).validate();
}

// ---------------------------------------------------------------------------
// Serialization and fingerprints
// ---------------------------------------------------------------------------

/// Complete effective configuration, field order fixed.
inline nlohmann::ordered_json config_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["data"] = c.data;
    j["embeddings"] = c.embeddings;
    j["out"] = c.out;
    j["checkpoint"] = c.checkpoint;
    j["rep"] = c.rep;
    j["embed_dim"] = c.embed_dim;
    j["n_max"] = c.n_max;
    j["min_count"] = c.min_count;
    j["train_embeddings"] = c.train_embeddings;
    j["variant"] = c.variant;
    j["window"] = c.window;
    j["kernels"] = c.kernels;
    j["tower_dim"] = c.tower_dim;
    j["fm_factors"] = c.fm_factors;
    j["ratios"] = {c.ratio_train, c.ratio_valid, c.ratio_test};
    j["split_seed"] = c.split_seed;
    j["stratify"] = c.stratify;
    j["exclude_target"] = c.exclude_target;
    j["lr"] = c.lr;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["patience"] = c.patience;
    j["seed"] = c.seed;
    j["dropout"] = c.dropout;
    j["weight_decay"] = c.weight_decay;
    j["rmsprop_conventional"] = c.rmsprop_conventional;
    j["baseline_model"] = c.baseline_model;
    j["factors"] = c.factors;
    j["reg"] = c.reg;
    j["sweeps"] = c.sweeps;
    j["mf_grid_factors"] = c.mf_grid_factors;
    j["mf_grid_regs"] = c.mf_grid_regs;
    j["bucket_edges"] = c.bucket_edges;
    return j;
}

/// Inverse of config_json; unknown keys are an error, absent keys keep their
/// defaults (so older serializations stay loadable after additive changes).
inline RunConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("configuration JSON must be an object");
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "data") c.data = value.get<std::string>();
        else if (key == "embeddings") c.embeddings = value.get<std::string>();
        else if (key == "out") c.out = value.get<std::string>();
        else if (key == "checkpoint") c.checkpoint = value.get<std::string>();
        else if (key == "rep") c.rep = value.get<std::string>();
        else if (key == "embed_dim") c.embed_dim = value.get<Index>();
        else if (key == "n_max") c.n_max = value.get<Index>();
        else if (key == "min_count") c.min_count = value.get<Index>();
        else if (key == "train_embeddings") c.train_embeddings = value.get<bool>();
        else if (key == "variant") c.variant = value.get<std::string>();
        else if (key == "window") c.window = value.get<Index>();
        else if (key == "kernels") c.kernels = value.get<Index>();
        else if (key == "tower_dim") c.tower_dim = value.get<Index>();
        else if (key == "fm_factors") c.fm_factors = value.get<Index>();
        else if (key == "ratios") {
            if (!value.is_array() || value.size() != 3)
                throw std::invalid_argument("ratios must be a 3-element array");
            c.ratio_train = value[0].get<double>();
            c.ratio_valid = value[1].get<double>();
            c.ratio_test = value[2].get<double>();
        } else if (key == "split_seed") c.split_seed = value.get<std::uint64_t>();
        else if (key == "stratify") c.stratify = value.get<bool>();
        else if (key == "exclude_target") c.exclude_target = value.get<bool>();
        else if (key == "lr") c.lr = value.get<double>();
        else if (key == "batch_size") c.batch_size = value.get<Index>();
        else if (key == "epochs") c.epochs = value.get<Index>();
        else if (key == "patience") c.patience = value.get<Index>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "dropout") c.dropout = value.get<double>();
        else if (key == "weight_decay") c.weight_decay = value.get<double>();
        else if (key == "rmsprop_conventional") c.rmsprop_conventional = value.get<bool>();
        else if (key == "baseline_model") c.baseline_model = value.get<std::string>();
        else if (key == "factors") c.factors = value.get<Index>();
        else if (key == "reg") c.reg = value.get<double>();
        else if (key == "sweeps") c.sweeps = value.get<Index>();
        else if (key == "mf_grid_factors") c.mf_grid_factors = value.get<std::vector<Index>>();
        else if (key == "mf_grid_regs") c.mf_grid_regs = value.get<std::vector<double>>();
        else if (key == "bucket_edges") c.bucket_edges = value.get<std::vector<std::size_t>>();
        else throw std::invalid_argument("unknown configuration key: " + key);
    }
    return c;
}

/// Digest of the full effective configuration.
inline std::string config_fingerprint(const RunConfig& config) {
    return to_hex(fnv1a64(config_json(config).dump()));
}

/// Digest of everything EXCEPT the factor an ablation row varies (variant
/// and representation) and the output locations; rows of one suite must
/// agree on this, and reruns into different directories stay comparable.
inline std::string shared_fingerprint(const RunConfig& config) {
    nlohmann::ordered_json j = config_json(config);
    j.erase("variant");
    j.erase("rep");
    j.erase("embeddings");  // the representation decides whether a file is used
    j.erase("train_embeddings");
    j.erase("out");  // where results land does not change what was run
    j.erase("checkpoint");
    return to_hex(fnv1a64(j.dump()));
}

}  // namespace deepconn
