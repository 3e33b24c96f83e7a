// SPDX-License-Identifier: Apache-2.0
#include "sisma/model/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "sisma/core/errors.hpp"
#include "sisma/core/rng.hpp"

namespace sisma::model {

namespace {

constexpr char kMagic[10] = {'S', 'I', 'S', 'M', 'A', '-', 'C', 'K', 'P', 'T'};

// little-endian scalar IO (the build targets x86-64, so plain memcpy)

template <typename S>
void put(std::string& out, S v) {
    char buf[sizeof(S)];
    std::memcpy(buf, &v, sizeof(S));
    out.append(buf, sizeof(S));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string path)
        : bytes_(bytes), path_(std::move(path)) {}

    template <typename S>
    S get() {
        need(sizeof(S));
        S v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(S));
        pos_ += sizeof(S);
        return v;
    }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size())
            throw IntegrityError(path_ + ": truncated at byte " + std::to_string(pos_) +
                                 ", need " + std::to_string(n) + " more of " +
                                 std::to_string(bytes_.size()) + " total");
    }

private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
    std::string path_;
};

std::size_t dtype_width(EntryDtype d) { return d == EntryDtype::F32 ? 4 : 8; }

} // namespace

// ---------------------------------------------------------------------------
// container
// ---------------------------------------------------------------------------

const CkptEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

// ---------------------------------------------------------------------------
// save / load
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<const CkptEntry*> order;
    order.reserve(ckpt.entries.size());
    for (const auto& e : ckpt.entries) order.push_back(&e);
    std::sort(order.begin(), order.end(),
              [](const CkptEntry* a, const CkptEntry* b) { return a->name < b->name; });
    for (std::size_t i = 1; i < order.size(); ++i)
        if (order[i]->name == order[i - 1]->name)
            throw ValidationError("save_checkpoint: duplicate entry " + order[i]->name);

    // payload
    std::string payload;
    std::vector<u64> offsets(order.size()), lengths(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        const CkptEntry& e = *order[i];
        i64 numel = 1;
        for (i64 d : e.shape) numel *= d;
        if (numel != static_cast<i64>(e.data.size()))
            throw ValidationError("save_checkpoint: entry " + e.name + " has " +
                                  std::to_string(e.data.size()) + " values for shape product " +
                                  std::to_string(numel));
        offsets[i] = payload.size();
        if (e.dtype == EntryDtype::F32) {
            for (double v : e.data) put(payload, static_cast<float>(v));
        } else {
            for (double v : e.data) put(payload, v);
        }
        lengths[i] = payload.size() - offsets[i];
    }

    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put(out, ckpt.version);
    put(out, ckpt.config_fingerprint);
    put(out, ckpt.step);
    put(out, static_cast<u32>(order.size()));
    for (std::size_t i = 0; i < order.size(); ++i) {
        const CkptEntry& e = *order[i];
        if (e.name.size() > 0xffff)
            throw ValidationError("save_checkpoint: entry name longer than 65535 bytes");
        put(out, static_cast<u16>(e.name.size()));
        out.append(e.name);
        put(out, static_cast<u8>(e.dtype));
        put(out, static_cast<u8>(e.shape.size()));
        for (i64 d : e.shape) put(out, d);
        put(out, offsets[i]);
        put(out, lengths[i]);
    }
    out.append(payload);
    put(out, fnv1a64(payload.data(), payload.size()));

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("save_checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r(bytes, path);
    const std::string magic = r.get_bytes(sizeof(kMagic));
    if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
        throw IntegrityError(path + ": bad magic, not a checkpoint file");

    Checkpoint ckpt;
    ckpt.version = r.get<u16>();
    if (ckpt.version != Checkpoint::kCkptVersion)
        throw MigrationError(path + ": format version " + std::to_string(ckpt.version) +
                             ", this build supports version " +
                             std::to_string(Checkpoint::kCkptVersion));
    ckpt.config_fingerprint = r.get<u64>();
    ckpt.step = r.get<i64>();

    const u32 count = r.get<u32>();
    struct RawEntry {
        CkptEntry e;
        u64 offset = 0, length = 0;
    };
    std::vector<RawEntry> raw(count);
    for (u32 i = 0; i < count; ++i) {
        RawEntry& re = raw[i];
        const u16 name_len = r.get<u16>();
        re.e.name = r.get_bytes(name_len);
        const u8 dtype = r.get<u8>();
        if (dtype > 1)
            throw IntegrityError(path + ": entry " + re.e.name + " has unknown dtype " +
                                 std::to_string(dtype));
        re.e.dtype = static_cast<EntryDtype>(dtype);
        const u8 ndim = r.get<u8>();
        re.e.shape.resize(ndim);
        for (u8 d = 0; d < ndim; ++d) re.e.shape[d] = r.get<i64>();
        re.offset = r.get<u64>();
        re.length = r.get<u64>();
    }

    const std::size_t payload_start = r.pos();
    if (bytes.size() < payload_start + 8)
        throw IntegrityError(path + ": truncated before payload checksum");
    const std::size_t payload_len = bytes.size() - payload_start - 8;

    u64 want_sum;
    std::memcpy(&want_sum, bytes.data() + payload_start + payload_len, 8);
    const u64 got_sum = fnv1a64(bytes.data() + payload_start, payload_len);
    if (want_sum != got_sum)
        throw IntegrityError(path + ": payload checksum mismatch");

    for (RawEntry& re : raw) {
        i64 numel = 1;
        for (i64 d : re.e.shape) numel *= d;
        const std::size_t width = dtype_width(re.e.dtype);
        if (re.length != static_cast<u64>(numel) * width)
            throw IntegrityError(path + ": entry " + re.e.name + " length " +
                                 std::to_string(re.length) + " does not match shape");
        if (re.offset + re.length > payload_len)
            throw IntegrityError(path + ": entry " + re.e.name + " extends past payload end");
        re.e.data.resize(static_cast<std::size_t>(numel));
        const char* src = bytes.data() + payload_start + re.offset;
        if (re.e.dtype == EntryDtype::F32) {
            for (i64 j = 0; j < numel; ++j) {
                float v;
                std::memcpy(&v, src + j * 4, 4);
                re.e.data[static_cast<std::size_t>(j)] = static_cast<double>(v);
            }
        } else {
            std::memcpy(re.e.data.data(), src, static_cast<std::size_t>(numel) * 8);
        }
        ckpt.entries.push_back(std::move(re.e));
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// registry bridging
// ---------------------------------------------------------------------------

template <typename T>
void append_registry_entries(Checkpoint& ckpt, const nn::ParamRegistry<T>& reg,
                             const std::string& prefix) {
    for (const auto& p : reg.entries()) {
        CkptEntry e;
        e.name = prefix + p.name;
        e.dtype = std::is_same_v<T, float> ? EntryDtype::F32 : EntryDtype::F64;
        e.shape = p.value->shape();
        e.data.resize(static_cast<std::size_t>(p.value->numel()));
        for (i64 i = 0; i < p.value->numel(); ++i)
            e.data[static_cast<std::size_t>(i)] = static_cast<double>((*p.value)[i]);
        ckpt.entries.push_back(std::move(e));
    }
}

template <typename T>
void load_registry_entries(const Checkpoint& ckpt, const nn::ParamRegistry<T>& reg,
                           const std::string& prefix) {
    for (const auto& p : reg.entries()) {
        const CkptEntry* e = ckpt.find(prefix + p.name);
        if (!e) throw IntegrityError("checkpoint has no entry " + prefix + p.name);
        if (e->shape != p.value->shape())
            throw IntegrityError("checkpoint entry " + e->name + " has mismatched shape");
        for (i64 i = 0; i < p.value->numel(); ++i)
            (*p.value)[i] = static_cast<T>(e->data[static_cast<std::size_t>(i)]);
    }
}

template void append_registry_entries<float>(Checkpoint&, const nn::ParamRegistry<float>&,
                                             const std::string&);
template void append_registry_entries<double>(Checkpoint&, const nn::ParamRegistry<double>&,
                                              const std::string&);
template void load_registry_entries<float>(const Checkpoint&, const nn::ParamRegistry<float>&,
                                           const std::string&);
template void load_registry_entries<double>(const Checkpoint&, const nn::ParamRegistry<double>&,
                                            const std::string&);

} // namespace sisma::model
