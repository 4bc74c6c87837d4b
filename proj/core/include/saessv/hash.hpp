#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace saessv {

// Hex SHA-256 prefix (16 hex chars) used to link artifacts to their inputs.
std::string content_hash(std::string_view bytes);
std::string content_hash(std::span<const double> values);
std::string file_hash(const std::filesystem::path& path);

}  // namespace saessv
