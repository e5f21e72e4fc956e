#include "mmen/dataset.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "mmen/params.hpp"

namespace mmen {

namespace {

using detail::read_pod;
using detail::write_pod;

void write_shape(std::ostream& os, const std::vector<int>& shape) {
    write_pod<uint8_t>(os, static_cast<uint8_t>(shape.size()));
    for (int d : shape) write_pod<uint32_t>(os, static_cast<uint32_t>(d));
}

std::vector<int> read_shape(std::istream& is) {
    const auto rank = read_pod<uint8_t>(is, "shape rank");
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_pod<uint32_t>(is, "shape dim"));
    return shape;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

Tensor read_tensor(std::istream& is, const std::vector<int>& shape) {
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!is) throw FormatError("truncated frame payload");
    return t;
}

void check_magic(std::istream& is, const char* magic, const std::string& path) {
    char got[4];
    is.read(got, 4);
    if (!is || std::memcmp(got, magic, 4) != 0)
        throw FormatError(std::string("bad ") + magic + " magic in " + path);
    const auto version = read_pod<uint32_t>(is, "version");
    if (version != 1)
        throw FormatError(std::string("unsupported ") + magic + " version " + std::to_string(version));
}

}  // namespace

void save_dataset(const std::string& path, const std::vector<Frame>& frames) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write("MMED", 4);
    write_pod<uint32_t>(os, 1);
    write_pod<uint64_t>(os, frames.size());
    // Shape records come from the first frame; an empty dataset stores four
    // empty shapes.
    const Frame none;
    const Frame& ref = frames.empty() ? none : frames.front();
    write_shape(os, ref.x1.shape);
    write_shape(os, ref.x2.shape);
    write_shape(os, ref.x3.shape);
    write_shape(os, ref.x4.shape);
    for (const Frame& f : frames) {
        if (f.x1.shape != ref.x1.shape || f.x2.shape != ref.x2.shape ||
            f.x3.shape != ref.x3.shape || f.x4.shape != ref.x4.shape)
            throw ConfigError("ragged frame shapes in dataset");
        write_tensor(os, f.x1);
        write_tensor(os, f.x2);
        write_tensor(os, f.x3);
        write_tensor(os, f.x4);
        write_pod<float>(os, f.y);
    }
    if (!os) throw FormatError("write failed for " + path);
}

std::vector<Frame> load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    check_magic(is, "MMED", path);
    const auto count = read_pod<uint64_t>(is, "frame count");
    const auto s1 = read_shape(is), s2 = read_shape(is), s3 = read_shape(is), s4 = read_shape(is);
    std::vector<Frame> frames;
    frames.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
        Frame f;
        f.x1 = read_tensor(is, s1);
        f.x2 = read_tensor(is, s2);
        f.x3 = read_tensor(is, s3);
        f.x4 = read_tensor(is, s4);
        f.y = read_pod<float>(is, "steering label");
        frames.push_back(std::move(f));
    }
    return frames;
}

void save_labels(const std::string& path, int arity, const std::vector<float>& flat) {
    if (arity <= 0 || flat.size() % static_cast<size_t>(arity) != 0)
        throw ConfigError("label table size not a multiple of arity");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os.write("MMEL", 4);
    write_pod<uint32_t>(os, 1);
    write_pod<uint64_t>(os, flat.size() / static_cast<size_t>(arity));
    write_pod<uint32_t>(os, static_cast<uint32_t>(arity));
    os.write(reinterpret_cast<const char*>(flat.data()),
             static_cast<std::streamsize>(flat.size() * sizeof(float)));
    if (!os) throw FormatError("write failed for " + path);
}

std::vector<float> load_labels(const std::string& path, int expected_arity) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    check_magic(is, "MMEL", path);
    const auto count = read_pod<uint64_t>(is, "label count");
    const auto arity = read_pod<uint32_t>(is, "label arity");
    if (static_cast<int>(arity) != expected_arity)
        throw FormatError("label arity " + std::to_string(arity) + " in " + path + ", expected " +
                          std::to_string(expected_arity));
    std::vector<float> flat(count * arity);
    is.read(reinterpret_cast<char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(float)));
    if (!is) throw FormatError("truncated label table in " + path);
    return flat;
}

int bin_of(float y) {
    if (!std::isfinite(y) || y < -1.0f || y > 1.0f)
        throw ConfigError("steering label out of range: " + std::to_string(y));
    if (y < -0.67f) return 0;
    if (y < -0.33f) return 1;
    if (y < 0.0f) return 2;
    if (y == 0.0f) return 3;
    if (y <= 0.33f) return 4;
    if (y <= 0.67f) return 5;
    return 6;
}

std::array<int64_t, 7> bin_histogram(const std::vector<Frame>& frames) {
    std::array<int64_t, 7> h{};
    for (const Frame& f : frames) ++h[static_cast<size_t>(bin_of(f.y))];
    return h;
}

std::vector<int> balanced_epoch_sample(const std::vector<Frame>& frames, int per_bin, uint32_t seed) {
    std::array<std::vector<int>, 7> bins;
    for (size_t i = 0; i < frames.size(); ++i)
        bins[static_cast<size_t>(bin_of(frames[i].y))].push_back(static_cast<int>(i));
    std::mt19937 rng(seed);
    std::vector<int> out;
    out.reserve(static_cast<size_t>(per_bin) * 7);
    for (int b = 0; b < 7; ++b) {
        const auto& bucket = bins[static_cast<size_t>(b)];
        if (bucket.empty()) throw ConfigError("empty steering bin " + std::to_string(b + 1));
        std::uniform_int_distribution<size_t> pick(0, bucket.size() - 1);
        for (int i = 0; i < per_bin; ++i) out.push_back(bucket[pick(rng)]);
    }
    return out;
}

}  // namespace mmen
