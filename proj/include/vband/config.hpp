#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "vband/melody.hpp"
#include "vband/tensor.hpp"

namespace vband {

/// Flat key=value settings. Later assignments override earlier ones.
class ConfigMap {
public:
    /// '#' starts a comment; blank lines are ignored; every other line must be key=value.
    static ConfigMap parse(std::istream& in, const std::string& origin = "config") {
        ConfigMap m;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            line = melody::detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
            auto key = melody::detail::trim(line.substr(0, eq));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            m.set(key, melody::detail::trim(line.substr(eq + 1)));
        }
        return m;
    }

    static ConfigMap load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        return parse(f, path);
    }

    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    void merge(const ConfigMap& over) {
        for (const auto& [k, v] : over.values_) values_[k] = v;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double real(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        double v = 0;
        auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
        if (ec != std::errc() || p != it->second.data() + it->second.size())
            throw ConfigError("config key '" + key + "': not a number: '" + it->second + "'");
        return v;
    }

    std::uint64_t count(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
        if (ec != std::errc() || p != it->second.data() + it->second.size())
            throw ConfigError("config key '" + key + "': not a non-negative integer: '" + it->second + "'");
        return v;
    }

    bool flag(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const auto& v = it->second;
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
    }

    /// Throws on any key outside `known`.
    void require_known(const std::set<std::string>& known) const {
        for (const auto& [k, _] : values_)
            if (!known.count(k)) throw ConfigError("unknown config key: " + k);
    }

private:
    std::map<std::string, std::string> values_;
};

enum class ModelKind { Flow2d, Accomp, Melody, Style };

inline ModelKind parse_model(const std::string& s) {
    if (s == "flow2d") return ModelKind::Flow2d;
    if (s == "accomp" || s == "accomp-toy") return ModelKind::Accomp;
    if (s == "melody" || s == "melody-grammar") return ModelKind::Melody;
    if (s == "style" || s == "style-toy") return ModelKind::Style;
    throw ConfigError("unknown model '" + s + "' (expected flow2d, accomp, melody or style)");
}

inline std::string model_name(ModelKind k) {
    switch (k) {
        case ModelKind::Flow2d: return "flow2d";
        case ModelKind::Accomp: return "accomp";
        case ModelKind::Melody: return "melody";
        case ModelKind::Style: return "style";
    }
    return "?";
}

/// Every key a run configuration may contain.
inline const std::set<std::string>& known_config_keys() {
    static const std::set<std::string> keys = {
        "model",      "seed",          "steps",      "out",          "gamma",       "trace",
        "lr",         "batch",         "train_size", "eval_size",    "train_timesteps", "infer_steps",
        "cond_drop",  "time_sampling", "warmup",     "precision",    "experts",     "plain",
        "balance",    "balance_alpha", "width",      "blocks",       "heads",       "expert_hidden",
        "tags",       "samples",       "checkpoint", "log_every",    "vocal_drop",  "text_drop"};
    return keys;
}

}  // namespace vband
