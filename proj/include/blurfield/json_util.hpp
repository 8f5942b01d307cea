#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>

#include <json.hpp>

#include "common.hpp"

namespace blurfield {

using json = nlohmann::json;

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw InputError("invalid JSON in " + path.string() + ": " + e.what());
    }
}

inline void write_json_file(const json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

/// Rejects keys outside `allowed`; `where` names the object in error messages.
inline void require_keys_subset(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
    if (!j.is_object()) throw InputError(where + " must be a JSON object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!ok.count(it.key())) throw InputError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InputError(std::string("bad value for '") + key + "': " + e.what());
    }
}

template <class T>
T get_required(const json& j, const char* key, const std::string& where) {
    if (!j.contains(key)) throw InputError(where + " is missing '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw InputError(where + ": bad value for '" + key + "': " + e.what());
    }
}

}  // namespace blurfield
