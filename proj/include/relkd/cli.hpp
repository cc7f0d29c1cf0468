#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace relkd::cli {

// One configuration key. Every key is settable from a config file (as
// `key=value`) and from the command line (as `flag value`).
struct KeySpec {
    std::string key;  // "run.seed"
    std::string flag; // "--seed"
    std::string help;
};

const std::vector<KeySpec>& key_specs();

using Settings = std::map<std::string, std::string>;

// Values a preset assigns for a subcommand; model.* describes the model the
// command trains (the teacher for pretrain, the student otherwise).
// Throws ConfigError for an unknown preset name.
Settings preset_settings(const std::string& preset, const std::string& command);

// Flat `key=value` text; blank lines and lines starting with '#' are skipped.
// Throws ConfigError naming an unknown key or a malformed line.
Settings parse_config_text(const std::string& text, const std::string& origin);

// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace relkd::cli
