#include "mmen/netspec.hpp"

namespace mmen {

namespace {

LayerSpec conv(int out_ch, int kh, int kw, int sh, int sw, int ph, int pw, std::vector<int> declared = {}) {
    LayerSpec l;
    l.kind = LayerSpec::Kind::Conv;
    l.out_ch = out_ch;
    l.kh = kh;
    l.kw = kw;
    l.sh = sh;
    l.sw = sw;
    l.ph = ph;
    l.pw = pw;
    l.declared_out = std::move(declared);
    return l;
}

LayerSpec pool(int kh, int kw, int sh, int sw, int ph = 0, int pw = 0) {
    LayerSpec l;
    l.kind = LayerSpec::Kind::Pool;
    l.kh = kh;
    l.kw = kw;
    l.sh = sh;
    l.sw = sw;
    l.ph = ph;
    l.pw = pw;
    return l;
}

LayerSpec dense(int units, std::vector<int> declared = {}) {
    LayerSpec l;
    l.kind = LayerSpec::Kind::Dense;
    l.out_ch = units;
    l.declared_out = std::move(declared);
    return l;
}

LayerSpec simple(LayerSpec::Kind k, std::vector<int> declared = {}) {
    LayerSpec l;
    l.kind = k;
    l.declared_out = std::move(declared);
    return l;
}

// Conv row as listed in the architecture tables: conv + BN + ReLU, with the
// declared shape checked on the conv output.
void conv_block(std::vector<LayerSpec>& ls, int out_ch, int kh, int kw, int sh, int sw, int ph,
                int pw, std::vector<int> declared) {
    ls.push_back(conv(out_ch, kh, kw, sh, sw, ph, pw, std::move(declared)));
    ls.push_back(simple(LayerSpec::Kind::BatchNorm));
    ls.push_back(simple(LayerSpec::Kind::ReLU));
}

}  // namespace

std::vector<int> layer_out_shape(const LayerSpec& layer, const std::vector<int>& in) {
    using Kind = LayerSpec::Kind;
    switch (layer.kind) {
        case Kind::Conv: {
            if (in.size() != 3) throw ConfigError("conv layer needs [C,H,W] input, got " + shape_str(in));
            const int h = in[1] + 2 * layer.ph, w = in[2] + 2 * layer.pw;
            if (h < layer.kh || w < layer.kw) throw ConfigError("conv kernel larger than padded input");
            return {layer.out_ch, (h - layer.kh) / layer.sh + 1, (w - layer.kw) / layer.sw + 1};
        }
        case Kind::Pool: {
            if (in.size() != 3) throw ConfigError("pool layer needs [C,H,W] input");
            const int h = in[1] + 2 * layer.ph, w = in[2] + 2 * layer.pw;
            if (h < layer.kh || w < layer.kw) throw ConfigError("pool kernel larger than padded input");
            return {in[0], (h - layer.kh) / layer.sh + 1, (w - layer.kw) / layer.sw + 1};
        }
        case Kind::Dense:
            if (in.size() != 1) throw ConfigError("dense layer needs flat input");
            return {layer.out_ch};
        case Kind::Flatten:
            return {static_cast<int>(numel(in))};
        case Kind::BatchNorm:
        case Kind::ReLU:
        case Kind::Tanh:
        case Kind::Softmax:
            return in;
    }
    throw ConfigError("unhandled layer kind");
}

void finalize_spec(NetworkSpec& spec) {
    std::vector<int> shape = spec.input_shape;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        shape = layer_out_shape(spec.layers[i], shape);
        const auto& declared = spec.layers[i].declared_out;
        if (!declared.empty() && declared != shape)
            throw ConfigError(spec.name + " layer " + std::to_string(i) + ": declared shape " +
                              shape_str(declared) + " but computed " + shape_str(shape));
    }
    spec.output_shape = shape;
}

NetworkSpec feature_spec(const std::string& name, const Profile& profile) {
    NetworkSpec s;
    s.name = name + "/" + profile.name;
    auto& ls = s.layers;
    const bool paper = profile.name == "paper";

    if (name == "camera_expert") {
        s.input_shape = {3, profile.img_h, profile.img_w};
        if (paper) {
            conv_block(ls, 16, 4, 4, 2, 2, 1, 1, {16, 60, 96});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 3, 3, 1, 1, 1, 1, {32, 30, 48});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 2, 3, 1, 1, 1, 1, {64, 16, 24});
            ls.push_back(pool(3, 3, 2, 2, 1, 1));
            conv_block(ls, 96, 3, 3, 1, 1, 1, 1, {96, 8, 12});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 128, 3, 3, 1, 1, 1, 1, {128, 4, 6});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 256, 3, 2, 1, 1, 1, 1, {256, 2, 4});
            ls.push_back(pool(2, 2, 2, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {512}));
        } else {
            conv_block(ls, 16, 3, 3, 2, 2, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 3, 3, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 3, 3, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 128, 3, 3, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {384}));
        }
    } else if (name == "lidar_expert") {
        s.input_shape = {2, profile.lidar_h, profile.seg_w};
        if (paper) {
            conv_block(ls, 16, 3, 5, 1, 1, 1, 1, {16, 16, 148});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 3, 5, 1, 1, 1, 1, {32, 8, 72});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 3, 5, 1, 1, 1, 1, {64, 4, 34});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 96, 3, 4, 1, 1, 1, 1, {96, 2, 16});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 128, 3, 3, 1, 1, 1, 1, {128, 1, 8});
            ls.push_back(pool(1, 2, 1, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {512}));
        } else {
            conv_block(ls, 16, 3, 5, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 3, 5, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 3, 3, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 96, 3, 3, 1, 1, 1, 1, {});
            ls.push_back(pool(1, 2, 1, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {384}));
        }
    } else if (name == "lidar_full_expert") {
        s.input_shape = {2, profile.lidar_h, profile.lidar_w};
        if (paper) {
            conv_block(ls, 16, 3, 10, 1, 2, 1, 1, {16, 16, 222});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 3, 8, 1, 1, 1, 1, {32, 8, 106});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 3, 6, 1, 1, 1, 1, {64, 4, 50});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 96, 3, 4, 1, 1, 1, 1, {96, 2, 24});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 128, 3, 3, 1, 1, 1, 1, {128, 1, 12});
            ls.push_back(pool(1, 2, 1, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {768}));
            ls.push_back(dense(512, {512}));
        } else {
            conv_block(ls, 16, 3, 10, 1, 2, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 3, 8, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 3, 6, 1, 1, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 128, 3, 3, 1, 1, 1, 1, {});
            ls.push_back(pool(1, 2, 1, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {640}));
            ls.push_back(dense(384, {384}));
        }
    } else if (name == "lidar_gate_feature") {
        s.input_shape = {2, profile.lidar_h, profile.lidar_w};
        if (paper) {
            conv_block(ls, 16, 1, 1, 2, 27, 2, 6, {16, 10, 18});
            conv_block(ls, 32, 5, 7, 1, 3, 1, 2, {32, 8, 6});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 3, 4, 1, 1, 1, 1, {64, 4, 2});
            ls.push_back(pool(2, 2, 2, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {128}));
        } else {
            conv_block(ls, 16, 1, 1, 2, 14, 1, 4, {});
            conv_block(ls, 32, 3, 5, 1, 2, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 32, 2, 3, 1, 1, 0, 0, {});
            ls.push_back(simple(LayerSpec::Kind::Flatten, {64}));
        }
    } else if (name == "camera_gate_feature") {
        s.input_shape = {3, profile.img_h, profile.img_w};
        if (paper) {
            conv_block(ls, 16, 1, 1, 10, 10, 1, 1, {16, 13, 20});
            conv_block(ls, 32, 5, 4, 2, 2, 1, 1, {32, 6, 10});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 4, 4, 1, 1, 1, 1, {64, 2, 4});
            ls.push_back(pool(2, 2, 2, 2));
            ls.push_back(simple(LayerSpec::Kind::Flatten, {128}));
        } else {
            conv_block(ls, 16, 1, 1, 8, 8, 1, 1, {});
            conv_block(ls, 32, 3, 4, 2, 2, 1, 1, {});
            ls.push_back(pool(2, 2, 2, 2));
            conv_block(ls, 64, 2, 3, 1, 1, 0, 0, {});
            ls.push_back(simple(LayerSpec::Kind::Flatten, {64}));
        }
    } else {
        throw ConfigError("unknown feature architecture " + name);
    }
    finalize_spec(s);
    return s;
}

NetworkSpec mlp_spec(const std::string& name, int in, const std::vector<int>& dims,
                     const std::string& final_act) {
    NetworkSpec s;
    s.name = name;
    s.input_shape = {in};
    for (size_t i = 0; i < dims.size(); ++i) {
        s.layers.push_back(dense(dims[i]));
        if (i + 1 < dims.size()) {
            s.layers.push_back(simple(LayerSpec::Kind::ReLU));
        } else if (final_act == "tanh") {
            s.layers.push_back(simple(LayerSpec::Kind::Tanh));
        } else if (final_act == "softmax") {
            s.layers.push_back(simple(LayerSpec::Kind::Softmax));
        } else if (final_act != "logits") {
            throw ConfigError("unknown final activation " + final_act);
        }
    }
    finalize_spec(s);
    return s;
}

long long count_flops(const NetworkSpec& spec) {
    using Kind = LayerSpec::Kind;
    long long total = 0;
    std::vector<int> shape = spec.input_shape;
    for (const auto& layer : spec.layers) {
        const std::vector<int> out = layer_out_shape(layer, shape);
        switch (layer.kind) {
            case Kind::Conv:
                total += 2LL * layer.kh * layer.kw * shape[0] * numel(out);
                break;
            case Kind::Dense:
                total += 2LL * shape[0] * out[0];
                break;
            case Kind::Flatten:
                break;
            default:  // BN, ReLU, Tanh, Softmax, Pool: one FLOP per output element
                total += numel(out);
                break;
        }
        shape = out;
    }
    return total;
}

}  // namespace mmen
