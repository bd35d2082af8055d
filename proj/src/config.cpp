#include "taat/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "taat/errors.hpp"

namespace taat {

void TrackConfig::validate() const {
    if (stride < 1) throw ConfigError("stride must be >= 1");
    if (template_size % stride != 0 || search_size % stride != 0)
        throw ConfigError("template/search sizes must be divisible by the stride");
    if (search_size <= template_size)
        throw ConfigError("search_size must exceed template_size");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (feature_dim % attention_reduction != 0)
        throw ConfigError("attention_reduction must divide feature_dim");
    if (context_factor < 0.0f) throw ConfigError("context_factor must be >= 0");
    if (dfm_lambda < 0.0f || dfm_lambda > 1.0f)
        throw ConfigError("dfm_lambda must be in [0,1]");
    if (!(std_eps > 0.0f)) throw ConfigError("std_eps must be > 0");
    if (!tiam_flags.r2) throw ConfigError("tiam_r2 cannot be disabled");
    if (post.window_weight < 0.0f || post.window_weight > 1.0f)
        throw ConfigError("window_weight must be in [0,1]");
    if (post.size_lr < 0.0f || post.size_lr > 1.0f)
        throw ConfigError("size_lr must be in [0,1]");
    parse_width_config(dfm_widths);
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("invalid boolean for " + key + ": " + v);
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const int r = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("invalid integer for " + key + ": " + v);
    }
}

float parse_float(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const float r = std::stof(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("invalid number for " + key + ": " + v);
    }
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::string modality_str(Modality m) {
    switch (m) {
        case Modality::rgb: return "rgb";
        case Modality::tir: return "tir";
        default: return "rgbt";
    }
}

Modality parse_modality(const std::string& s) {
    if (s == "rgb") return Modality::rgb;
    if (s == "tir") return Modality::tir;
    if (s == "rgbt") return Modality::rgbt;
    throw ConfigError("invalid modality: " + s);
}

TrackConfig parse_track_config_text(const std::string& text) {
    TrackConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " is not key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));

        if (key == "template_size") c.template_size = parse_int(val, key);
        else if (key == "search_size") c.search_size = parse_int(val, key);
        else if (key == "stride") c.stride = parse_int(val, key);
        else if (key == "feature_dim") c.feature_dim = parse_int(val, key);
        else if (key == "context_factor") c.context_factor = parse_float(val, key);
        else if (key == "modality") c.modality = parse_modality(val);
        else if (key == "fusion") {
            if (val == "average") c.fusion = FusionMode::average;
            else if (val == "dfm") c.fusion = FusionMode::dfm;
            else throw ConfigError("invalid fusion mode: " + val);
        } else if (key == "use_tiam") c.use_tiam = parse_bool(val, key);
        else if (key == "attention_pooling") {
            if (val == "max") c.attention_pooling = PoolMode::max;
            else if (val == "avg") c.attention_pooling = PoolMode::avg;
            else throw ConfigError("invalid attention_pooling: " + val);
        } else if (key == "attention_reduction") c.attention_reduction = parse_int(val, key);
        else if (key == "tiam_r1") c.tiam_flags.r1 = parse_bool(val, key);
        else if (key == "tiam_r2") c.tiam_flags.r2 = parse_bool(val, key);
        else if (key == "tiam_r3") c.tiam_flags.r3 = parse_bool(val, key);
        else if (key == "tiam_r4") c.tiam_flags.r4 = parse_bool(val, key);
        else if (key == "dfm_orientation") {
            if (val == "tir_to_rgb") c.dfm_orientation = DfmOrientation::tir_to_rgb;
            else if (val == "rgb_to_tir") c.dfm_orientation = DfmOrientation::rgb_to_tir;
            else if (val == "both") c.dfm_orientation = DfmOrientation::both;
            else throw ConfigError("invalid dfm_orientation: " + val);
        } else if (key == "dfm_lambda") c.dfm_lambda = parse_float(val, key);
        else if (key == "dfm_widths") c.dfm_widths = val;
        else if (key == "std_eps") c.std_eps = parse_float(val, key);
        else if (key == "window_weight") c.post.window_weight = parse_float(val, key);
        else if (key == "size_lr") c.post.size_lr = parse_float(val, key);
        else if (key == "penalty_k") c.post.penalty_k = parse_float(val, key);
        else throw ConfigError("unknown config key: " + key);
    }
    c.validate();
    return c;
}

TrackConfig parse_track_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_track_config_text(ss.str());
}

std::string track_config_str(const TrackConfig& c) {
    char buf[1024];
    std::snprintf(
        buf, sizeof(buf),
        "template_size = %d\nsearch_size = %d\nstride = %d\nfeature_dim = %d\n"
        "context_factor = %g\nmodality = %s\nfusion = %s\nuse_tiam = %s\n"
        "attention_pooling = %s\nattention_reduction = %d\n"
        "tiam_r1 = %s\ntiam_r2 = %s\ntiam_r3 = %s\ntiam_r4 = %s\n"
        "dfm_orientation = %s\ndfm_lambda = %g\ndfm_widths = %s\nstd_eps = %g\n"
        "window_weight = %g\nsize_lr = %g\npenalty_k = %g\n",
        c.template_size, c.search_size, c.stride, c.feature_dim,
        static_cast<double>(c.context_factor), modality_str(c.modality).c_str(),
        c.fusion == FusionMode::dfm ? "dfm" : "average", c.use_tiam ? "true" : "false",
        c.attention_pooling == PoolMode::max ? "max" : "avg", c.attention_reduction,
        c.tiam_flags.r1 ? "true" : "false", c.tiam_flags.r2 ? "true" : "false",
        c.tiam_flags.r3 ? "true" : "false", c.tiam_flags.r4 ? "true" : "false",
        c.dfm_orientation == DfmOrientation::tir_to_rgb
            ? "tir_to_rgb"
            : (c.dfm_orientation == DfmOrientation::rgb_to_tir ? "rgb_to_tir" : "both"),
        static_cast<double>(c.dfm_lambda), c.dfm_widths.c_str(),
        static_cast<double>(c.std_eps), static_cast<double>(c.post.window_weight),
        static_cast<double>(c.post.size_lr), static_cast<double>(c.post.penalty_k));
    return buf;
}

}  // namespace taat
