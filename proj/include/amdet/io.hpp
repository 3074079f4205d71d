#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace amdet {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// One prompt per line; blank lines and lines starting with '#' are skipped.
std::vector<std::string> read_prompts(const std::string& path);
// key=value per line, '#' comments, whitespace around keys and values trimmed.
KeyValues read_key_values(const std::string& path);
KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& kv);

const std::string* find_value(const KeyValues& kv, std::string_view key);

std::string trim(std::string_view s);

}  // namespace amdet
