#include "cfkd/io_util.hpp"

#include <atomic>
#include <bit>
#include <functional>
#include <thread>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cfkd/errors.hpp"
#include "cfkd/random.hpp"

namespace cfkd::io {

namespace fs = std::filesystem;

void write_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  static std::atomic<std::uint64_t> counter{0};
  const auto tid = std::hash<std::thread::id>{}(std::this_thread::get_id());
  tmp += ".tmp" + hex64(mix64(counter.fetch_add(1) ^ (static_cast<std::uint64_t>(tid) << 1))).substr(0, 10);
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_atomic(const fs::path& path, std::string_view text) {
  write_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void append_line(const fs::path& path, std::string_view line) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::string buf(line);
  buf.push_back('\n');
  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f) throw Error("cannot open " + path.string() + " for appending");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  f.flush();
  if (!f) throw Error("append to " + path.string() + " failed");
}

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint8_t b[8];
  std::memcpy(b, &v, 8);
  out.insert(out.end(), b, b + 8);
}

void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
  std::uint8_t b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

double get_f64(std::span<const std::uint8_t> in, std::size_t& offset) {
  if (offset + 8 > in.size()) throw Error("binary file truncated");
  double v;
  std::memcpy(&v, in.data() + offset, 8);
  offset += 8;
  return v;
}

std::int32_t get_i32(std::span<const std::uint8_t> in, std::size_t& offset) {
  if (offset + 4 > in.size()) throw Error("binary file truncated");
  std::int32_t v;
  std::memcpy(&v, in.data() + offset, 4);
  offset += 4;
  return v;
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int k = 15; k >= 0; --k) {
    s[static_cast<std::size_t>(k)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace cfkd::io
