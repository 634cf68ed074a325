#include "polyseg/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace polyseg {

Tensor4 ParamSet::add(const std::string& name, Tensor4 t, bool trainable) {
    if (index_.count(name)) throw ParamError("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back(ParamEntry{name, t, trainable});
    if (trainable) t.set_requires_grad(true);
    return t;
}

Tensor4& ParamSet::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParamError("unknown parameter: " + name);
    return entries_[it->second].tensor;
}

const Tensor4& ParamSet::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ParamError("unknown parameter: " + name);
    return entries_[it->second].tensor;
}

void ParamSet::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

Tensor4 kaiming_normal(Shape4 shape, int fan_in, std::uint64_t seed) {
    if (fan_in <= 0) throw ParamError("kaiming_normal: fan_in must be positive");
    Tensor4 t(shape);
    Rng rng(seed);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (real& v : t.values()) v = static_cast<real>(std_dev * rng.normal());
    return t;
}

SgdOptimizer::SgdOptimizer(ParamSet& params, SgdConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& e : params.entries())
        if (e.trainable) buffers_.emplace_back(e.name, Tensor4(e.tensor.shape()));
}

void SgdOptimizer::step(real lr) {
    std::size_t bi = 0;
    for (auto& e : params_->entries()) {
        if (!e.trainable) continue;
        Tensor4& buf = buffers_[bi++].second;
        auto& v = buf.values();
        auto& w = e.tensor.values();
        const auto& grad = e.tensor.grads();
        const std::size_t count = w.size();
        for (std::size_t i = 0; i < count; ++i) {
            v[i] = cfg_.momentum * v[i] + (grad[i] + cfg_.weight_decay * w[i]);
            w[i] -= lr * v[i];
        }
    }
    ++iteration_;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void append_entry(std::string& buf, const std::string& name, const Tensor4& t) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    const Shape4 s = t.shape();
    put_u32(buf, static_cast<std::uint32_t>(s.n));
    put_u32(buf, static_cast<std::uint32_t>(s.c));
    put_u32(buf, static_cast<std::uint32_t>(s.h));
    put_u32(buf, static_cast<std::uint32_t>(s.w));
    for (real v : t.values()) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(buf, bits);
    }
}

struct EntryReader {
    const unsigned char* p;
    std::size_t remaining;
    std::filesystem::path path;

    void need(std::size_t n) {
        if (remaining < n) throw FormatError("truncated checkpoint: " + path.string());
    }
    std::uint32_t u32() {
        need(4);
        const std::uint32_t v = get_u32(p);
        p += 4;
        remaining -= 4;
        return v;
    }
    std::string name(std::uint32_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(p), len);
        p += len;
        remaining -= len;
        return s;
    }
    void payload(Tensor4& t) {
        const std::size_t count = t.values().size();
        need(count * 4);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t bits = get_u32(p + i * 4);
            float f;
            std::memcpy(&f, &bits, 4);
            t.values()[i] = static_cast<real>(f);
        }
        p += count * 4;
        remaining -= count * 4;
    }
};

void write_atomic(const std::string& buf, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open for writing: " + tmp.string());
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw IoError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_all(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path.string());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
    std::string buf;
    buf.append("PUNW1", 5);
    buf.push_back('\0');
    put_u32(buf, static_cast<std::uint32_t>(params.entries().size()));
    for (const auto& e : params.entries()) append_entry(buf, e.name, e.tensor);
    write_atomic(buf, path);
}

void load_checkpoint(ParamSet& params, const std::filesystem::path& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() < 10 || std::memcmp(bytes.data(), "PUNW1\0", 6) != 0)
        throw FormatError("not a PUNW1 checkpoint: " + path.string());

    EntryReader r{reinterpret_cast<const unsigned char*>(bytes.data()) + 6, bytes.size() - 6, path};
    const std::uint32_t count = r.u32();
    if (count != params.entries().size())
        throw FormatError("checkpoint entry count does not match the model: " + path.string());
    for (auto& e : params.entries()) {
        const std::string name = r.name(r.u32());
        if (name != e.name)
            throw FormatError("checkpoint entry \"" + name + "\" does not match parameter \"" +
                              e.name + "\"");
        const Shape4 s{static_cast<int>(r.u32()), static_cast<int>(r.u32()),
                       static_cast<int>(r.u32()), static_cast<int>(r.u32())};
        if (s != e.tensor.shape())
            throw FormatError("checkpoint shape mismatch for \"" + name + "\"");
        r.payload(e.tensor);
    }
}

void save_optimizer_state(const SgdOptimizer& opt, const std::filesystem::path& path) {
    std::string buf;
    buf.append("PUNS1", 5);
    buf.push_back('\0');
    put_u32(buf, static_cast<std::uint32_t>(opt.iteration()));
    put_u32(buf, static_cast<std::uint32_t>(opt.buffers().size()));
    for (const auto& [name, t] : opt.buffers()) append_entry(buf, name, t);
    write_atomic(buf, path);
}

void load_optimizer_state(SgdOptimizer& opt, const std::filesystem::path& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() < 14 || std::memcmp(bytes.data(), "PUNS1\0", 6) != 0)
        throw FormatError("not a PUNS1 optimizer state: " + path.string());

    EntryReader r{reinterpret_cast<const unsigned char*>(bytes.data()) + 6, bytes.size() - 6, path};
    opt.set_iteration(static_cast<std::int64_t>(r.u32()));
    const std::uint32_t count = r.u32();
    if (count != opt.buffers().size())
        throw FormatError("optimizer state entry count mismatch: " + path.string());
    for (auto& [name, t] : opt.buffers()) {
        const std::string got = r.name(r.u32());
        if (got != name)
            throw FormatError("optimizer state entry \"" + got + "\" does not match \"" + name +
                              "\"");
        const Shape4 s{static_cast<int>(r.u32()), static_cast<int>(r.u32()),
                       static_cast<int>(r.u32()), static_cast<int>(r.u32())};
        if (s != t.shape()) throw FormatError("optimizer state shape mismatch for \"" + name + "\"");
        r.payload(t);
    }
}

}  // namespace polyseg
