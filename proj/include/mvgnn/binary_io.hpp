#pragma once

// Little-endian byte encoding shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mvgnn::io {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
    if constexpr (std::is_floating_point_v<T>) {
      static_assert(sizeof(T) == 8);
      put_le(std::bit_cast<std::uint64_t>(value), 8);
    } else {
      put_le(static_cast<std::uint64_t>(value), sizeof(T));
    }
  }

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

 private:
  void put_le(std::uint64_t v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
  }
  std::vector<std::uint8_t> buf_;
};

// Reads little-endian values; on underflow calls the supplied failure handler
// with the current offset (the handler must throw).
class ByteReader {
 public:
  using FailFn = void (*)(std::size_t offset, const char* what);

  ByteReader(const std::vector<std::uint8_t>& buf, FailFn fail) : buf_(buf), fail_(fail) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  template <typename T>
  T get(const char* what) {
    if constexpr (std::is_floating_point_v<T>) {
      return std::bit_cast<double>(get_le(8, what));
    } else {
      return static_cast<T>(get_le(sizeof(T), what));
    }
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) fail_(pos_, what);
  }
  std::uint64_t get_le(std::size_t n, const char* what) {
    need(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  const std::vector<std::uint8_t>& buf_;
  FailFn fail_;
  std::size_t pos_ = 0;
};

// Both throw IoError naming the path.
std::vector<std::uint8_t> read_file(const std::filesystem::path& path, const char* module, const char* op);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes, const char* module,
                const char* op);

}  // namespace mvgnn::io
