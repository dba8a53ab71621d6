#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace fvlm::cli {

/// `key = value` lines; `#` starts a comment. Keys use underscores
/// (embed_dim) and match the long flag of the same name (--embed-dim).
/// Throws ConfigError on malformed lines or repeated keys.
std::map<std::string, std::string> parse_config(std::istream& in);

struct OptionInfo {
  /// Long flag including the dashes, e.g. "--embed-dim".
  std::string flag;
  std::string description;
  bool required = false;
};

struct CommandInfo {
  std::string name;
  std::string description;
  std::vector<OptionInfo> options;
};

/// Every subcommand with every flag its parser accepts (help excluded).
std::vector<CommandInfo> describe_commands();

/// Runs one command line. Logs and errors go to err, results to out.
/// Returns the process exit status: 0 on success, 1 on any error, which is
/// reported as a single "error: <kind>: <message>" line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fvlm::cli
