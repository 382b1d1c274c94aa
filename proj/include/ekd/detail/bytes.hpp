#pragma once

// Little-endian byte encoding shared by the dataset and checkpoint containers.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ekd/errors.hpp"

namespace ekd::detail {

class ByteWriter {
public:
    template <typename U>
    void put(U value) {
        static_assert(std::is_trivially_copyable_v<U>);
        unsigned char raw[sizeof(U)];
        std::memcpy(raw, &value, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
        buf_.insert(buf_.end(), raw, raw + sizeof(U));
    }
    void put_bytes(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
    void put_string(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    std::vector<std::uint8_t>& buffer() { return buf_; }
    const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; running past the end throws `Truncated`.
template <typename Truncated = FormatError>
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        unsigned char raw[sizeof(U)];
        std::memcpy(raw, bytes_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
        pos_ += sizeof(U);
        U value;
        std::memcpy(&value, raw, sizeof(U));
        return value;
    }
    std::span<const std::uint8_t> get_bytes(std::size_t n) {
        need(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::string get_string(std::size_t n) {
        auto s = get_bytes(n);
        return std::string(s.begin(), s.end());
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n)
            throw Truncated("unexpected end of data at byte " + std::to_string(pos_) + " (needed " +
                            std::to_string(n) + " more)");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failure on '" + path + "'");
    return bytes;
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failure on '" + path + "'");
}

}  // namespace ekd::detail
