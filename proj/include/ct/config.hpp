#pragma once

#include <map>
#include <string>
#include <vector>

#include "ct/common.hpp"

namespace ct::config {

// Flat key-value configuration with dotted section keys:
//   rasg.lambda_r = 0.1
// '#' starts a comment. Later assignments win.
class Config {
public:
    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& def) const;
    int get_int(const std::string& key, int def) const;
    std::int64_t get_i64(const std::string& key, std::int64_t def) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
    double get_double(const std::string& key, double def) const;
    bool get_bool(const std::string& key, bool def) const;
    std::vector<std::string> get_list(const std::string& key,
                                      const std::vector<std::string>& def) const;

    // Records every key a subcommand consults so the echo is complete even
    // for defaulted values.
    void note_read(const std::string& key, const std::string& effective) const;
    std::string echo() const;  // deterministic "key = value" listing

private:
    std::map<std::string, std::string> values_;
    mutable std::map<std::string, std::string> read_;
};

struct KeyDoc {
    const char* key;
    const char* doc;
};

std::string format_key_docs(const std::vector<KeyDoc>& keys);

}  // namespace ct::config
