#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace boundless::io {

/// Writes via a sibling temp file and rename so readers never observe a
/// partially written file.
void write_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_text(const std::filesystem::path& path);

/// Little-endian float64 payload.
void write_doubles(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_doubles(const std::filesystem::path& path);

/// `<stem>.bin` and `<stem>.json`.
std::filesystem::path payload_path(const std::filesystem::path& stem);
std::filesystem::path sidecar_path(const std::filesystem::path& stem);

}  // namespace boundless::io
