#pragma once

// Little-endian helpers shared by the EMB1 and SAE1 containers.

#include "msae/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

namespace msae::detail {

class ByteWriter {
public:
    void bytes(std::span<const char> data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    const std::vector<char>& buffer() const { return buf_; }

    void write_file(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatError::Code::io, "cannot open for writing: " + path.string());
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw FormatError(FormatError::Code::io, "write failed: " + path.string());
    }

private:
    std::vector<char> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

    static ByteReader from_file(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError(FormatError::Code::io, "cannot open: " + path.string());
        std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(data));
    }

    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t size() const { return data_.size(); }

    void need(std::size_t count, const char* what) const {
        if (remaining() < count)
            throw FormatError(FormatError::Code::truncated, std::string("truncated while reading ") + what);
    }

    std::string bytes(std::size_t count, const char* what) {
        need(count, what);
        std::string out(data_.data() + pos_, count);
        pos_ += count;
        return out;
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(data_[pos_++]);
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

private:
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

} // namespace msae::detail
