#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cfkd::io {

/// Write-temp-then-rename. Creates parent directories.
void write_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_atomic(const std::filesystem::path& path, std::string_view text);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// Appends one line with a single write and flush.
void append_line(const std::filesystem::path& path, std::string_view line);

/// Little-endian packing helpers for the binary array files.
void put_f64(std::vector<std::uint8_t>& out, double v);
void put_i32(std::vector<std::uint8_t>& out, std::int32_t v);
double get_f64(std::span<const std::uint8_t> in, std::size_t& offset);
std::int32_t get_i32(std::span<const std::uint8_t> in, std::size_t& offset);

std::string hex64(std::uint64_t v);

}  // namespace cfkd::io
