#pragma once

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xcell/types.hpp"

namespace xcell {

/// Parses "4096", "4K", "64MB", "1G", "2GiB" into a byte count.
inline std::uint64_t parse_bytes(std::string_view text) {
    auto trim = [](std::string_view s) {
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
        while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
        return s;
    };
    text = trim(text);
    std::uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr == text.data()) {
        throw Error(ErrorCode::Config, "not a byte count: '" + std::string(text) + "'");
    }
    std::string unit(trim(std::string_view(ptr, text.data() + text.size() - ptr)));
    for (auto& c : unit) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    std::uint64_t mult = 1;
    if (unit.empty() || unit == "B") {
        mult = 1;
    } else if (unit == "K" || unit == "KB" || unit == "KIB") {
        mult = KiB;
    } else if (unit == "M" || unit == "MB" || unit == "MIB") {
        mult = MiB;
    } else if (unit == "G" || unit == "GB" || unit == "GIB") {
        mult = GiB;
    } else {
        throw Error(ErrorCode::Config, "unknown size unit '" + unit + "'");
    }
    return value * mult;
}

inline std::string format_bytes(std::uint64_t bytes) {
    if (bytes >= GiB && bytes % GiB == 0) return std::to_string(bytes / GiB) + "G";
    if (bytes >= MiB && bytes % MiB == 0) return std::to_string(bytes / MiB) + "M";
    if (bytes >= KiB && bytes % KiB == 0) return std::to_string(bytes / KiB) + "K";
    return std::to_string(bytes);
}

/// Parses a size sweep: "4K..1G" doubles from the low to the high bound,
/// "4K,1M,16M" lists points explicitly.
inline std::vector<std::uint64_t> parse_size_sweep(std::string_view text) {
    std::vector<std::uint64_t> out;
    if (auto dots = text.find(".."); dots != std::string_view::npos) {
        std::uint64_t lo = parse_bytes(text.substr(0, dots));
        std::uint64_t hi = parse_bytes(text.substr(dots + 2));
        if (lo == 0 || lo > hi) throw Error(ErrorCode::Config, "bad size range");
        for (std::uint64_t s = lo; s <= hi; s *= 2) out.push_back(s);
        return out;
    }
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto comma = text.find(',', pos);
        auto item = text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
        if (!item.empty()) out.push_back(parse_bytes(item));
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    return out;
}

/// `key = value` lines; '#' starts a comment.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& in) {
        KeyValueConfig cfg;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos) continue;
            auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": expected key = value");
            }
            auto strip = [](std::string s) {
                auto b = s.find_first_not_of(" \t\r");
                auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
            };
            std::string key = strip(line.substr(0, eq));
            if (key.empty()) throw Error(ErrorCode::Config, "line " + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = strip(line.substr(eq + 1));
        }
        return cfg;
    }

    static KeyValueConfig parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::Config, "cannot open config file " + path);
        return parse(in);
    }

    std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<std::uint64_t> get_bytes(const std::string& key) const {
        if (auto v = get(key)) return parse_bytes(*v);
        return std::nullopt;
    }

    std::optional<std::uint64_t> get_uint(const std::string& key) const {
        auto v = get(key);
        if (!v) return std::nullopt;
        std::uint64_t out = 0;
        auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
        if (ec != std::errc{} || ptr != v->data() + v->size()) {
            throw Error(ErrorCode::Config, "key " + key + ": not an integer");
        }
        return out;
    }

    std::optional<double> get_double(const std::string& key) const {
        auto v = get(key);
        if (!v) return std::nullopt;
        try {
            std::size_t used = 0;
            double d = std::stod(*v, &used);
            if (used != v->size()) throw std::invalid_argument("trailing");
            return d;
        } catch (const std::exception&) {
            throw Error(ErrorCode::Config, "key " + key + ": not a number");
        }
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace xcell
