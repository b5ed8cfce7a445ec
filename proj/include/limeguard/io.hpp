#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace limeguard {

/// Writes to a sibling temporary file and renames it over path.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace limeguard
