#include "ct/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ct::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

void Config::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw StateError("config: cannot open file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = line;
        std::size_t hash = s.find('#');
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = trim(s);
        if (s.empty()) continue;
        std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config: missing '=' at " + path + ":" +
                                  std::to_string(lineno));
        std::string key = trim(s.substr(0, eq));
        std::string value = trim(s.substr(eq + 1));
        if (key.empty())
            throw ValidationError("config: empty key at " + path + ":" + std::to_string(lineno));
        values_[key] = value;
    }
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

std::string Config::get_str(const std::string& key, const std::string& def) const {
    auto it = values_.find(key);
    std::string v = it == values_.end() ? def : it->second;
    note_read(key, v);
    return v;
}

int Config::get_int(const std::string& key, int def) const {
    return static_cast<int>(get_i64(key, def));
}

std::int64_t Config::get_i64(const std::string& key, std::int64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        note_read(key, std::to_string(def));
        return def;
    }
    try {
        std::int64_t v = std::stoll(it->second);
        note_read(key, it->second);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config: key '" + key + "' is not an integer: " + it->second);
    }
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t def) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        note_read(key, std::to_string(def));
        return def;
    }
    try {
        std::uint64_t v = std::stoull(it->second);
        note_read(key, it->second);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config: key '" + key + "' is not an unsigned integer: " +
                              it->second);
    }
}

double Config::get_double(const std::string& key, double def) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        std::ostringstream os;
        os << def;
        note_read(key, os.str());
        return def;
    }
    try {
        double v = std::stod(it->second);
        note_read(key, it->second);
        return v;
    } catch (const std::exception&) {
        throw ValidationError("config: key '" + key + "' is not a number: " + it->second);
    }
}

bool Config::get_bool(const std::string& key, bool def) const {
    auto it = values_.find(key);
    if (it == values_.end()) {
        note_read(key, def ? "true" : "false");
        return def;
    }
    std::string v = it->second;
    std::transform(v.begin(), v.end(), v.begin(), ::tolower);
    note_read(key, v);
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ValidationError("config: key '" + key + "' is not a boolean: " + it->second);
}

std::vector<std::string> Config::get_list(const std::string& key,
                                          const std::vector<std::string>& def) const {
    auto it = values_.find(key);
    std::vector<std::string> out;
    std::string raw;
    if (it == values_.end()) {
        out = def;
        for (std::size_t i = 0; i < def.size(); ++i) raw += (i ? "," : "") + def[i];
    } else {
        raw = it->second;
        std::stringstream ss(raw);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
    }
    note_read(key, raw);
    return out;
}

void Config::note_read(const std::string& key, const std::string& effective) const {
    read_[key] = effective;
}

std::string Config::echo() const {
    std::ostringstream os;
    std::map<std::string, std::string> merged = read_;
    for (const auto& [k, v] : values_) merged[k] = v;
    for (const auto& [k, v] : merged) os << k << " = " << v << "\n";
    return os.str();
}

std::string format_key_docs(const std::vector<KeyDoc>& keys) {
    std::ostringstream os;
    os << "Config keys (file via --config, overrides via --set key=value):\n";
    for (const auto& k : keys) os << "  " << k.key << "\n      " << k.doc << "\n";
    return os.str();
}

}  // namespace ct::config
