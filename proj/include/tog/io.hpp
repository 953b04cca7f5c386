#pragma once

// Byte-level helpers shared by the binary formats (TOGW, TOGP, PPM).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "tog/error.hpp"

namespace tog {

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void magic(std::string_view m) { raw(m.data(), m.size()); }

    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

    const Bytes& bytes() const noexcept { return out_; }
    Bytes take() noexcept { return std::move(out_); }

private:
    Bytes out_;
};

class ByteReader {
public:
    explicit ByteReader(const Bytes& in) : in_(in) {}

    std::size_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == in_.size(); }

    void expect_magic(std::string_view m) {
        need(m.size(), "magic");
        if (std::memcmp(in_.data() + pos_, m.data(), m.size()) != 0) {
            throw ParseError("bad magic, expected \"" + std::string(m) + "\"", pos_);
        }
        pos_ += m.size();
    }

    template <typename U>
    U uint(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(uint<std::uint32_t>(what)); }
    double f64(const char* what) { return std::bit_cast<double>(uint<std::uint64_t>(what)); }

    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n) throw ParseError(std::string("truncated while reading ") + what, pos_);
    }

private:
    const Bytes& in_;
    std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

/// Writes to a temporary sibling and renames over the target.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t size) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot write " + path.string());
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!f) throw Error("short write to " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("cannot rename " + tmp + " to " + path.string() + ": " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& path, const Bytes& bytes) {
    write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, text.data(), text.size());
}

}  // namespace tog
