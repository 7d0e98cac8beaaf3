#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vig/core.hpp"
#include "vig/io.hpp"
#include "vig/model.hpp"
#include "vig/train.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Plain-text run configuration: [section] headers with `key = value` lines.
// Unknown sections or keys are rejected. Every run writes the fully resolved
// form (defaults expanded) next to its outputs.
// ---------------------------------------------------------------------------

struct DataConfig {
    std::string manifest;
    std::vector<std::string> bands;  // empty = all bands in file order
    std::uint64_t split_seed = 7;
    SplitFractions fractions;
};

struct OutputConfig {
    std::string dir;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    OutputConfig output;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s, const std::string& key) {
    std::vector<std::size_t> out;
    for (const std::string& tok : split_list(s)) {
        try {
            out.push_back(std::stoul(tok));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': bad integer '" + tok + "'");
        }
    }
    return out;
}

inline std::size_t parse_size(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const unsigned long v = std::stoul(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': bad integer '" + s + "'");
    }
}

inline double parse_double(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': bad number '" + s + "'");
    }
}

/// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
    char buf[40];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::stod(buf) == v) return buf;
    }
    return buf;
}

inline void parse_hw(const std::string& s, std::size_t& h, std::size_t& w) {
    const std::size_t x = s.find('x');
    if (x == std::string::npos) {
        h = w = parse_size(s, "input_hw");
        return;
    }
    h = parse_size(s.substr(0, x), "input_hw");
    w = parse_size(s.substr(x + 1), "input_hw");
}

}  // namespace detail

/// Applies one `key = value` assignment. Throws ConfigError (naming the key)
/// for anything unknown.
inline void apply_config_key(RunConfig& rc, const std::string& section, const std::string& key,
                             const std::string& value) {
    using namespace detail;
    if (section == "model") {
        ModelConfig& m = rc.model;
        if (key == "in_channels") m.in_channels = parse_size(value, key);
        else if (key == "input_hw") parse_hw(value, m.input_h, m.input_w);
        else if (key == "stage_dims") m.stage_dims = parse_size_list(value, key);
        else if (key == "stage_depths") m.stage_depths = parse_size_list(value, key);
        else if (key == "heads") m.heads = parse_size(value, key);
        else if (key == "k") m.k = parse_size(value, key);
        else if (key == "num_classes") m.num_classes = parse_size(value, key);
        else if (key == "task") m.task = task_from_string(value);
        else if (key == "head_hidden") m.head_hidden = parse_size(value, key);
        else if (key == "dropout") m.dropout = parse_double(value, key);
        else throw ConfigError("unknown config key '" + key + "' in section [model]");
    } else if (section == "train") {
        TrainConfig& t = rc.train;
        if (key == "max_epochs") t.max_epochs = parse_size(value, key);
        else if (key == "lr") t.lr = parse_double(value, key);
        else if (key == "weight_decay") t.weight_decay = parse_double(value, key);
        else if (key == "beta1") t.beta1 = parse_double(value, key);
        else if (key == "beta2") t.beta2 = parse_double(value, key);
        else if (key == "eps") t.eps = parse_double(value, key);
        else if (key == "es_patience") t.es_patience = parse_size(value, key);
        else if (key == "es_tolerance") t.es_tolerance = parse_double(value, key);
        else if (key == "plateau_patience") t.plateau_patience = parse_size(value, key);
        else if (key == "plateau_factor") t.plateau_factor = parse_double(value, key);
        else if (key == "batch_size") t.batch_size = parse_size(value, key);
        else if (key == "seed") t.seed = parse_size(value, key);
        else throw ConfigError("unknown config key '" + key + "' in section [train]");
    } else if (section == "data") {
        DataConfig& d = rc.data;
        if (key == "manifest") d.manifest = value;
        else if (key == "bands") d.bands = split_list(value);
        else if (key == "split_seed") d.split_seed = parse_size(value, key);
        else if (key == "split_fractions") {
            std::vector<std::string> parts = split_list(value);
            if (parts.size() != 3)
                throw ConfigError("config key 'split_fractions': expected three fractions");
            d.fractions.train = parse_double(parts[0], key);
            d.fractions.val = parse_double(parts[1], key);
            d.fractions.test = parse_double(parts[2], key);
        } else
            throw ConfigError("unknown config key '" + key + "' in section [data]");
    } else if (section == "output") {
        if (key == "dir") rc.output.dir = value;
        else throw ConfigError("unknown config key '" + key + "' in section [output]");
    } else {
        throw ConfigError("unknown config section [" + section + "]");
    }
}

/// Parses configuration text over defaults. Lines starting with '#' and blank
/// lines are ignored; errors carry the offending key and line number.
inline RunConfig parse_run_config_text(const std::string& text) {
    RunConfig rc;
    std::istringstream is(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": malformed section header '" + line + "'");
            section = line.substr(1, line.size() - 2);
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value, got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (section.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key +
                              "' outside any [section]");
        try {
            apply_config_key(rc, section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
        }
    }
    return rc;
}

inline RunConfig parse_run_config_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config_text(ss.str());
}

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

inline std::string join_strings(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += v[i];
    }
    return out;
}

}  // namespace detail

/// Fully resolved configuration text, fixed key order; re-parsing it yields
/// the same RunConfig.
inline std::string resolved_config_text(const RunConfig& rc) {
    using detail::fmt_double;
    std::ostringstream os;
    os << "[model]\n";
    os << "in_channels = " << rc.model.in_channels << "\n";
    os << "input_hw = " << rc.model.input_h << "x" << rc.model.input_w << "\n";
    os << "stage_dims = " << detail::join_sizes(rc.model.stage_dims) << "\n";
    os << "stage_depths = " << detail::join_sizes(rc.model.stage_depths) << "\n";
    os << "heads = " << rc.model.heads << "\n";
    os << "k = " << rc.model.k << "\n";
    os << "num_classes = " << rc.model.num_classes << "\n";
    os << "task = " << task_to_string(rc.model.task) << "\n";
    os << "head_hidden = " << rc.model.head_hidden << "\n";
    os << "dropout = " << fmt_double(rc.model.dropout) << "\n";
    os << "\n[train]\n";
    os << "max_epochs = " << rc.train.max_epochs << "\n";
    os << "lr = " << fmt_double(rc.train.lr) << "\n";
    os << "weight_decay = " << fmt_double(rc.train.weight_decay) << "\n";
    os << "beta1 = " << fmt_double(rc.train.beta1) << "\n";
    os << "beta2 = " << fmt_double(rc.train.beta2) << "\n";
    os << "eps = " << fmt_double(rc.train.eps) << "\n";
    os << "es_patience = " << rc.train.es_patience << "\n";
    os << "es_tolerance = " << fmt_double(rc.train.es_tolerance) << "\n";
    os << "plateau_patience = " << rc.train.plateau_patience << "\n";
    os << "plateau_factor = " << fmt_double(rc.train.plateau_factor) << "\n";
    os << "batch_size = " << rc.train.batch_size << "\n";
    os << "seed = " << rc.train.seed << "\n";
    os << "\n[data]\n";
    os << "manifest = " << rc.data.manifest << "\n";
    os << "bands = " << detail::join_strings(rc.data.bands) << "\n";
    os << "split_seed = " << rc.data.split_seed << "\n";
    os << "split_fractions = " << fmt_double(rc.data.fractions.train) << ","
       << fmt_double(rc.data.fractions.val) << "," << fmt_double(rc.data.fractions.test) << "\n";
    os << "\n[output]\n";
    os << "dir = " << rc.output.dir << "\n";
    return os.str();
}

}  // namespace vig
