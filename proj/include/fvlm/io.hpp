#pragma once

#include <filesystem>
#include <string>

namespace fvlm {

/// Writes bytes to a temporary sibling of path and renames it over path, so
/// readers never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace fvlm
