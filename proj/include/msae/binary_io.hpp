#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "msae/error.hpp"

namespace msae::io {

// Little-endian byte sink. Everything is buffered and flushed in one write.
class ByteWriter {
 public:
  template <class T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<std::uint8_t>(bits & 0xFFu));
      if constexpr (sizeof(T) > 1) bits = static_cast<U>(bits >> 8);
    }
  }

  template <class T>
  void put_all(std::span<const T> values) {
    buf_.reserve(buf_.size() + values.size() * sizeof(T));
    for (const T& v : values) put(v);
  }

  void put_bytes(std::string_view bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void put_bytes(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  std::size_t size() const noexcept { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }
  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

  // Overwrite a previously written u64 (used for back-patched offsets).
  void patch_u64(std::size_t at, std::uint64_t value) {
    for (std::size_t i = 0; i < 8; ++i) buf_[at + i] = static_cast<std::uint8_t>(value >> (8 * i));
  }

  void write_file(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InvalidArgument("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw InvalidArgument("write failed: " + path.string());
  }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader. Every failure reports the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes, std::string source = "buffer")
      : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bits = static_cast<U>(bits | (static_cast<U>(bytes_[pos_ + i]) << (8 * i)));
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  template <class T>
  void get_all(std::span<T> out) {
    need(out.size() * sizeof(T));
    for (T& v : out) v = get<T>();
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    need(magic.size());
    if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0)
      throw FormatError(source_ + ": bad magic, expected \"" +
                            std::string(magic.substr(0, magic.find('\0'))) + "\"",
                        pos_);
    pos_ += magic.size();
  }

  void expect_version(std::uint32_t expected) {
    const std::uint64_t at = pos_;
    const auto v = get<std::uint32_t>();
    if (v != expected)
      throw FormatError(source_ + ": unsupported version " + std::to_string(v) + ", expected " +
                            std::to_string(expected),
                        at);
  }

  // Ensures `total` bytes exist in the whole input (truncation check up front).
  void expect_total_length(std::uint64_t total) const {
    if (bytes_.size() != total)
      throw FormatError(source_ + ": length mismatch, expected " + std::to_string(total) +
                            " bytes, found " + std::to_string(bytes_.size()),
                        std::min<std::uint64_t>(bytes_.size(), total));
  }

  void seek(std::uint64_t at) {
    if (at > bytes_.size()) throw FormatError(source_ + ": seek past end", bytes_.size());
    pos_ = at;
  }

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::uint64_t total() const noexcept { return bytes_.size(); }
  const std::string& source() const noexcept { return source_; }

 private:
  void need(std::uint64_t n) const {
    if (pos_ + n > bytes_.size())
      throw FormatError(source_ + ": truncated, expected " + std::to_string(pos_ + n) +
                            " bytes, found " + std::to_string(bytes_.size()),
                        pos_);
  }

  std::span<const std::uint8_t> bytes_;
  std::string source_;
  std::uint64_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open: " + path.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  return bytes;
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot open for writing: " + path.string());
  out << text;
}

}  // namespace msae::io
