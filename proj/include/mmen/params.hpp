#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>

#include "mmen/tensor.hpp"

namespace mmen {

// Named parameter set with per-parameter ADAM state. std::map keeps
// iteration order deterministic. Non-trainable entries carry things like
// batch-norm running statistics.
template <typename T>
struct ParamStoreT {
    struct Entry {
        TensorT<T> value;
        bool trainable = true;
        TensorT<T> m, v;  // ADAM moments, allocated on first step
        int64_t step = 0;
    };

    std::map<std::string, Entry> entries;

    TensorT<T>& add(const std::string& name, TensorT<T> t, bool trainable = true) {
        auto [it, inserted] = entries.emplace(name, Entry{std::move(t), trainable, {}, {}, 0});
        if (!inserted) throw ConfigError("duplicate parameter " + name);
        return it->second.value;
    }

    bool has(const std::string& name) const { return entries.count(name) != 0; }

    TensorT<T>& get(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError("unknown parameter " + name);
        return it->second.value;
    }
    const TensorT<T>& get(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError("unknown parameter " + name);
        return it->second.value;
    }

    void set_trainable(const std::string& prefix, bool trainable) {
        for (auto& [name, e] : entries)
            if (name.rfind(prefix, 0) == 0) e.trainable = trainable;
    }

    // Standard ADAM with bias correction. Frozen parameters are skipped
    // entirely; their bytes do not change.
    void adam_step(const std::map<std::string, TensorT<T>>& grads, T lr, T beta1 = T(0.9),
                   T beta2 = T(0.999), T eps = T(1e-8)) {
        for (auto& [name, g] : grads) {
            auto it = entries.find(name);
            if (it == entries.end()) throw ConfigError("gradient for unknown parameter " + name);
            Entry& e = it->second;
            if (!e.trainable) continue;
            if (!g.same_shape(e.value)) throw ConfigError("gradient shape mismatch for " + name);
            for (const T& v : g.data)
                if (!std::isfinite(v)) throw NumericError("NaN/Inf gradient for parameter " + name);
            if (e.m.size() == 0) {
                e.m = TensorT<T>(e.value.shape);
                e.v = TensorT<T>(e.value.shape);
            }
            ++e.step;
            const T c1 = T(1) - std::pow(beta1, static_cast<T>(e.step));
            const T c2 = T(1) - std::pow(beta2, static_cast<T>(e.step));
            for (int64_t i = 0; i < e.value.size(); ++i) {
                e.m[i] = beta1 * e.m[i] + (T(1) - beta1) * g[i];
                e.v[i] = beta2 * e.v[i] + (T(1) - beta2) * g[i] * g[i];
                e.value[i] -= lr * (e.m[i] / c1) / (std::sqrt(e.v[i] / c2) + eps);
            }
        }
    }

    // Copy all entries under src_prefix from `src` into this store under
    // dst_prefix, replacing existing values.
    void adopt(const ParamStoreT& src, const std::string& src_prefix, const std::string& dst_prefix) {
        bool any = false;
        for (const auto& [name, e] : src.entries) {
            if (name.rfind(src_prefix, 0) != 0) continue;
            any = true;
            const std::string dst = dst_prefix + name.substr(src_prefix.size());
            auto it = entries.find(dst);
            if (it == entries.end())
                entries.emplace(dst, Entry{e.value, e.trainable, {}, {}, 0});
            else
                it->second.value = e.value;
        }
        if (!any) throw ConfigError("adopt: no parameters under prefix " + src_prefix);
    }

    // FNV-1a over parameter bytes under a prefix; used by freeze checks.
    uint64_t checksum(const std::string& prefix = "") const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& [name, e] : entries) {
            if (name.rfind(prefix, 0) != 0) continue;
            for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
            const auto* bytes = reinterpret_cast<const uint8_t*>(e.value.data.data());
            for (size_t i = 0; i < e.value.data.size() * sizeof(T); ++i)
                h = (h ^ bytes[i]) * 1099511628211ull;
        }
        return h;
    }
};

using ParamStore = ParamStoreT<float>;

// ---- initialization ----

// Fan-in-scaled uniform for conv/dense weights; biases zero.
template <typename T>
TensorT<T> uniform_init(std::vector<int> shape, int fan_in, std::mt19937& rng) {
    TensorT<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

// ---- checkpoint format ----
// magic "MMEN", version u32, parameter count u32, then per parameter:
// name length u16 + UTF-8 name, rank u8, dims u32 each, f32 LE data.

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("truncated file while reading " + what);
    return v;
}
}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamStoreT<T>& store) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write("MMEN", 4);
    detail::write_pod<uint32_t>(os, 1);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(store.entries.size()));
    for (const auto& [name, e] : store.entries) {
        detail::write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<uint8_t>(os, static_cast<uint8_t>(e.value.rank()));
        for (int d : e.value.shape) detail::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
        for (const T& v : e.value.data) detail::write_pod<float>(os, static_cast<float>(v));
    }
    if (!os) throw FormatError("write failed for " + path);
}

template <typename T>
ParamStoreT<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MMEN", 4) != 0) throw FormatError("bad checkpoint magic in " + path);
    const auto version = detail::read_pod<uint32_t>(is, "version");
    if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::read_pod<uint32_t>(is, "parameter count");
    ParamStoreT<T> store;
    for (uint32_t p = 0; p < count; ++p) {
        const auto len = detail::read_pod<uint16_t>(is, "name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw FormatError("truncated checkpoint name");
        const auto rank = detail::read_pod<uint8_t>(is, "rank");
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_pod<uint32_t>(is, "dim"));
        TensorT<T> t(shape);
        for (T& v : t.data) v = static_cast<T>(detail::read_pod<float>(is, "data"));
        store.add(name, std::move(t));
    }
    return store;
}

}  // namespace mmen
