#pragma once

// Shared utilities: logging, seed derivation, order-independent sums,
// PGM/CSV emission and strict JSON config parsing.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mmwl {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// logging, controlled by MMW_LOG in {error, info, debug}

enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel log_level() {
    static LogLevel lvl = [] {
        const char* e = std::getenv("MMW_LOG");
        if (!e) return LogLevel::error;
        if (std::strcmp(e, "debug") == 0) return LogLevel::debug;
        if (std::strcmp(e, "info") == 0) return LogLevel::info;
        return LogLevel::error;
    }();
    return lvl;
}

template <typename... Args>
void log_at(LogLevel lvl, const char* fmt, Args... args) {
    if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
    std::fprintf(stderr, "[mmwl] ");
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
}

inline void log_info(const std::string& s) { log_at(LogLevel::info, "%s", s.c_str()); }
inline void log_debug(const std::string& s) { log_at(LogLevel::debug, "%s", s.c_str()); }

// ---------------------------------------------------------------------------
// deterministic seed derivation

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// stable stream id from a (seed, index...) tuple
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(base ^ splitmix64(a)) ^ splitmix64(b + 0x517cc1b727220a95ULL));
}

inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// order-independent aggregation: pairwise summation over a fixed-index array

inline double pairwise_sum(const double* x, std::size_t n) {
    if (n == 0) return 0.0;
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    const std::size_t h = n / 2;
    return pairwise_sum(x, h) + pairwise_sum(x + h, n - h);
}

inline double pairwise_mean(const std::vector<double>& x) {
    if (x.empty()) throw std::invalid_argument("pairwise_mean: empty input");
    return pairwise_sum(x.data(), x.size()) / static_cast<double>(x.size());
}

// ---------------------------------------------------------------------------
// file helpers

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

// binary PGM (P5), one byte per cell
inline void write_pgm(const std::string& path, int height, int width,
                      const std::vector<unsigned char>& bytes) {
    if (static_cast<int>(bytes.size()) != height * width)
        throw std::invalid_argument("write_pgm: byte count does not match dimensions");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---------------------------------------------------------------------------
// strict JSON configs: a required "format" tag and no unknown keys

inline json load_config(const std::string& path, const std::string& expected_format) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    if (!j.contains("format") || j["format"] != expected_format)
        throw std::runtime_error("config " + path + ": missing or wrong format tag, expected \"" +
                                 expected_format + "\"");
    return j;
}

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& allowed,
                                const std::string& ctx) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const auto& a : allowed)
            if (key == a) { ok = true; break; }
        if (!ok) throw std::runtime_error("unknown key \"" + key + "\" in " + ctx);
    }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (j.contains(key)) return j.at(key).get<T>();
    return fallback;
}

}  // namespace mmwl
