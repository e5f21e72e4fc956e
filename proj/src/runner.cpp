#include "mmen/runner.hpp"

namespace mmen {

namespace {

struct LayerNames {
    int conv = 0, bn = 0, fc = 0;
    std::string next(LayerSpec::Kind kind) {
        switch (kind) {
            case LayerSpec::Kind::Conv:
                return "conv" + std::to_string(++conv);
            case LayerSpec::Kind::BatchNorm:
                return "bn" + std::to_string(++bn);
            case LayerSpec::Kind::Dense:
                return "fc" + std::to_string(++fc);
            default:
                return {};
        }
    }
};

}  // namespace

void init_network_params(ParamStore& store, const NetworkSpec& spec, const std::string& prefix,
                         std::mt19937& rng) {
    LayerNames names;
    std::vector<int> shape = spec.input_shape;
    for (const auto& layer : spec.layers) {
        const std::vector<int> out = layer_out_shape(layer, shape);
        const std::string base = prefix + names.next(layer.kind);
        switch (layer.kind) {
            case LayerSpec::Kind::Conv: {
                const int fan_in = shape[0] * layer.kh * layer.kw;
                store.add(base + ".w",
                          uniform_init<float>({layer.out_ch, shape[0], layer.kh, layer.kw}, fan_in, rng));
                store.add(base + ".b", Tensor({layer.out_ch}));
                break;
            }
            case LayerSpec::Kind::BatchNorm: {
                const int c = shape[0];
                store.add(base + ".gamma", Tensor({c}, 1.0f));
                store.add(base + ".beta", Tensor({c}));
                store.add(base + ".rmean", Tensor({c}), /*trainable=*/false);
                store.add(base + ".rvar", Tensor({c}, 1.0f), /*trainable=*/false);
                break;
            }
            case LayerSpec::Kind::Dense:
                store.add(base + ".w", uniform_init<float>({layer.out_ch, shape[0]}, shape[0], rng));
                store.add(base + ".b", Tensor({layer.out_ch}));
                break;
            default:
                break;
        }
        shape = out;
    }
}

int run_network(Tape& tape, ParamBinder& binder, const NetworkSpec& spec, int input,
                const std::string& prefix, bool train) {
    const auto& in_shape = tape.val(input).shape;
    std::vector<int> expected = spec.input_shape;
    expected.insert(expected.begin(), in_shape.empty() ? 0 : in_shape[0]);
    if (in_shape != expected)
        throw ConfigError(spec.name + ": input shape " + shape_str(in_shape) + ", expected " +
                          shape_str(expected));

    LayerNames names;
    int node = input;
    for (const auto& layer : spec.layers) {
        const std::string base = prefix + names.next(layer.kind);
        switch (layer.kind) {
            case LayerSpec::Kind::Conv:
                node = tape.conv2d(node, binder(base + ".w"), binder(base + ".b"), layer.sh,
                                   layer.sw, layer.ph, layer.pw);
                break;
            case LayerSpec::Kind::Pool:
                node = tape.maxpool2d(node, layer.kh, layer.kw, layer.sh, layer.sw, layer.ph, layer.pw);
                break;
            case LayerSpec::Kind::Dense:
                node = tape.dense(node, binder(base + ".w"), binder(base + ".b"));
                break;
            case LayerSpec::Kind::BatchNorm:
                node = tape.batchnorm(node, binder(base + ".gamma"), binder(base + ".beta"),
                                      &binder.store.get(base + ".rmean"),
                                      &binder.store.get(base + ".rvar"), train);
                break;
            case LayerSpec::Kind::ReLU:
                node = tape.relu(node);
                break;
            case LayerSpec::Kind::Tanh:
                node = tape.tanh_(node);
                break;
            case LayerSpec::Kind::Softmax:
                node = tape.softmax(node);
                break;
            case LayerSpec::Kind::Flatten:
                node = tape.flatten(node);
                break;
        }
    }
    return node;
}

}  // namespace mmen
