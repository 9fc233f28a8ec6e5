#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "vband/nn.hpp"
#include "vband/tensor.hpp"

namespace vband::checkpoint {

// Layout: "VBND" | u32 version | u32 count | per tensor:
//   u16 name_len | name bytes | u8 rank | u32 extent * rank | f32 payload (row-major)
// All integers and floats little-endian.
inline constexpr char kMagic[4] = {'V', 'B', 'N', 'D'};
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::vector<std::uint8_t>& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}
    std::uint8_t u8() {
        need(1);
        return buf_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32() {
        std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw DataError("checkpoint truncated");
    }
    const std::vector<std::uint8_t>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    detail::put_u32(out, kVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        if (nt.name.size() > 0xffff) throw DataError("checkpoint: name too long: " + nt.name);
        if (nt.tensor.rank() > 0xff) throw DataError("checkpoint: rank too large");
        detail::put_u16(out, static_cast<std::uint16_t>(nt.name.size()));
        out.insert(out.end(), nt.name.begin(), nt.name.end());
        detail::put_u8(out, static_cast<std::uint8_t>(nt.tensor.rank()));
        for (auto e : nt.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
        for (double v : nt.tensor.data()) detail::put_f32(out, static_cast<float>(v));
    }
    return out;
}

inline std::vector<NamedTensor> decode(const std::vector<std::uint8_t>& buf) {
    detail::Reader r(buf);
    if (r.bytes(4) != std::string(kMagic, 4)) throw DataError("checkpoint: bad magic");
    const auto version = r.u32();
    if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    const auto count = r.u32();
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        nt.name = r.bytes(r.u16());
        const auto rank = r.u8();
        Shape shape(rank);
        for (auto& e : shape) e = r.u32();
        std::vector<double> values(numel_of(shape));
        for (auto& v : values) v = static_cast<double>(r.f32());
        nt.tensor = Tensor(std::move(shape), std::move(values));
        out.push_back(std::move(nt));
    }
    if (!r.done()) throw DataError("checkpoint: trailing bytes");
    return out;
}

inline std::vector<NamedTensor> from_store(const ParameterStore& store) {
    std::vector<NamedTensor> out;
    for (const auto& [name, e] : store.entries()) out.push_back({name, e.tensor});
    return out;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed: " + path);
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

inline void save(const std::string& path, const ParameterStore& store) { write_file(path, encode(from_store(store))); }

/// Loads values into an existing store. Every stored tensor must exist with the same shape.
inline void load_into(const std::string& path, ParameterStore& store) {
    const auto tensors = decode(read_file(path));
    if (tensors.size() != store.size())
        throw DataError("checkpoint: " + std::to_string(tensors.size()) + " tensors, model has " +
                        std::to_string(store.size()));
    for (const auto& nt : tensors) {
        if (!store.contains(nt.name)) throw DataError("checkpoint: unknown tensor " + nt.name);
        auto dst = store.get(nt.name);
        if (dst.shape() != nt.tensor.shape())
            throw DimensionError("checkpoint: shape mismatch for " + nt.name + ": " + shape_str(nt.tensor.shape()) +
                                 " vs " + shape_str(dst.shape()));
        auto src = nt.tensor.data();
        std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    }
}

}  // namespace vband::checkpoint
