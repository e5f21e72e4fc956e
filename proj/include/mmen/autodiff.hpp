#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <functional>
#include <limits>
#include <memory>
#include <utility>

#include "mmen/tensor.hpp"

namespace mmen {

// Reverse-mode tape. Operations execute eagerly and record a backward
// closure; backward() replays closures in exact reverse creation order,
// which is a reverse topological order by construction. Single-threaded
// and order-deterministic.
template <typename T>
class TapeT {
public:
    using Tensor = TensorT<T>;
    template <typename U>
    using Mat = Eigen::Matrix<U, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<Mat<T>>;
    using CMap = Eigen::Map<const Mat<T>>;

    int leaf(Tensor v, bool requires_grad = false) {
        return push(std::move(v), requires_grad, nullptr);
    }

    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)]->value; }
    Tensor& grad(int id) { return nodes_[static_cast<size_t>(id)]->grad; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)]->requires_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // ---- spatial ops, inputs [N,C,H,W] ----

    int conv2d(int x, int w, int b, int sh, int sw, int ph, int pw) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const Tensor& bv = val(b);
        if (xv.rank() != 4 || wv.rank() != 4) throw ConfigError("conv2d expects rank-4 input and weight");
        const int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
        const int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        if (wv.dim(1) != cin)
            throw ConfigError("conv2d channel mismatch: input has " + std::to_string(cin) +
                              ", weight expects " + std::to_string(wv.dim(1)));
        if (bv.size() != cout) throw ConfigError("conv2d bias size mismatch");
        const int ho = (h + 2 * ph - kh) / sh + 1;
        const int wo = (wd + 2 * pw - kw) / sw + 1;
        if (h + 2 * ph < kh || wd + 2 * pw < kw) throw ConfigError("conv2d kernel larger than padded input");

        Tensor out({n, cout, ho, wo});
        const int k = cin * kh * kw, m = ho * wo;
        Tensor cols({n, k, m});  // saved for backward
        for (int i = 0; i < n; ++i) {
            im2col(xv.data.data() + static_cast<int64_t>(i) * cin * h * wd, cin, h, wd, kh, kw, sh,
                   sw, ph, pw, ho, wo, cols.data.data() + static_cast<int64_t>(i) * k * m);
            CMap wm(wv.data.data(), cout, k);
            CMap cm(cols.data.data() + static_cast<int64_t>(i) * k * m, k, m);
            Map om(out.data.data() + static_cast<int64_t>(i) * cout * m, cout, m);
            om.noalias() = wm * cm;
            for (int c = 0; c < cout; ++c) om.row(c).array() += bv[c];
        }
        int y = push(std::move(out), requires_grad(x) || requires_grad(w) || requires_grad(b), nullptr);
        set_backward(y, [=, this, cols = std::move(cols)]() {
            const Tensor& gy = grad(y);
            const Tensor& wv2 = val(w);
            CMap wm(wv2.data.data(), cout, k);
            for (int i = 0; i < n; ++i) {
                CMap gym(gy.data.data() + static_cast<int64_t>(i) * cout * m, cout, m);
                if (requires_grad(w)) {
                    Map gwm(grad(w).data.data(), cout, k);
                    CMap cm(cols.data.data() + static_cast<int64_t>(i) * k * m, k, m);
                    gwm.noalias() += gym * cm.transpose();
                }
                if (requires_grad(x)) {
                    Mat<T> gcol = wm.transpose() * gym;  // [k, m]
                    col2im_add(gcol.data(), cin, h, wd, kh, kw, sh, sw, ph, pw, ho, wo,
                               grad(x).data.data() + static_cast<int64_t>(i) * cin * h * wd);
                }
                if (requires_grad(b)) {
                    Tensor& gb = grad(b);
                    for (int c = 0; c < cout; ++c) gb[c] += gym.row(c).sum();
                }
            }
        });
        return y;
    }

    int maxpool2d(int x, int kh, int kw, int sh, int sw, int ph = 0, int pw = 0) {
        const Tensor& xv = val(x);
        if (xv.rank() != 4) throw ConfigError("maxpool2d expects rank-4 input");
        const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        if (h + 2 * ph < kh || w + 2 * pw < kw) throw ConfigError("maxpool2d kernel larger than padded input");
        const int ho = (h + 2 * ph - kh) / sh + 1;
        const int wo = (w + 2 * pw - kw) / sw + 1;
        Tensor out({n, c, ho, wo});
        std::vector<int32_t> argmax(out.data.size());  // flat index into the input image plane
        const T lowest = std::numeric_limits<T>::lowest();
        int64_t o = 0;
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const T* plane = xv.data.data() + (static_cast<int64_t>(i) * c + ch) * h * w;
                for (int oh = 0; oh < ho; ++oh)
                    for (int ow = 0; ow < wo; ++ow, ++o) {
                        T best = lowest;
                        int32_t bi = -1;
                        for (int dy = 0; dy < kh; ++dy) {
                            const int iy = oh * sh - ph + dy;
                            if (iy < 0 || iy >= h) continue;
                            for (int dx = 0; dx < kw; ++dx) {
                                const int ix = ow * sw - pw + dx;
                                if (ix < 0 || ix >= w) continue;
                                const T v = plane[iy * w + ix];
                                if (v > best) {  // strict: first maximal element wins ties
                                    best = v;
                                    bi = iy * w + ix;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[static_cast<size_t>(o)] = bi;
                    }
            }
        const int64_t plane_in = static_cast<int64_t>(h) * w, plane_out = static_cast<int64_t>(ho) * wo;
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this, argmax = std::move(argmax)]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            for (int64_t p = 0; p < static_cast<int64_t>(n) * c; ++p)
                for (int64_t q = 0; q < plane_out; ++q)
                    gx[p * plane_in + argmax[static_cast<size_t>(p * plane_out + q)]] +=
                        gy[p * plane_out + q];
        });
        return y;
    }

    // x [N,n], w [m,n], b [m] -> [N,m]
    int dense(int x, int w, int b) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        const Tensor& bv = val(b);
        if (xv.rank() != 2 || wv.rank() != 2) throw ConfigError("dense expects rank-2 input and weight");
        const int n = xv.dim(0), in = xv.dim(1), m = wv.dim(0);
        if (wv.dim(1) != in)
            throw ConfigError("dense size mismatch: input " + std::to_string(in) + " vs weight " +
                              std::to_string(wv.dim(1)));
        if (bv.size() != m) throw ConfigError("dense bias size mismatch");
        Tensor out({n, m});
        CMap xm(xv.data.data(), n, in), wm(wv.data.data(), m, in);
        Map om(out.data.data(), n, m);
        om.noalias() = xm * wm.transpose();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) om(i, j) += bv[j];
        int y = push(std::move(out), requires_grad(x) || requires_grad(w) || requires_grad(b), nullptr);
        set_backward(y, [=, this]() {
            CMap gy(grad(y).data.data(), n, m);
            if (requires_grad(x)) {
                Map gx(grad(x).data.data(), n, in);
                CMap wm2(val(w).data.data(), m, in);
                gx.noalias() += gy * wm2;
            }
            if (requires_grad(w)) {
                Map gw(grad(w).data.data(), m, in);
                CMap xm2(val(x).data.data(), n, in);
                gw.noalias() += gy.transpose() * xm2;
            }
            if (requires_grad(b)) {
                Tensor& gb = grad(b);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) gb[j] += gy(i, j);
            }
        });
        return y;
    }

    // Per-channel batch normalization. x is [N,C,H,W] (stats over N,H,W) or
    // [N,F] (stats over N). running_* live in the parameter store and are
    // updated in train mode with the given momentum.
    int batchnorm(int x, int gamma, int beta, Tensor* running_mean, Tensor* running_var, bool train,
                  T momentum = T(0.1), T eps = T(1e-5)) {
        const Tensor& xv = val(x);
        int n, c;
        int64_t spatial;
        if (xv.rank() == 4) {
            n = xv.dim(0);
            c = xv.dim(1);
            spatial = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
        } else if (xv.rank() == 2) {
            n = xv.dim(0);
            c = xv.dim(1);
            spatial = 1;
        } else {
            throw ConfigError("batchnorm expects rank-2 or rank-4 input");
        }
        if (val(gamma).size() != c || val(beta).size() != c) throw ConfigError("batchnorm gamma/beta size mismatch");
        if (!running_mean || !running_var || running_mean->size() != c || running_var->size() != c)
            throw ConfigError("batchnorm running statistics missing or mis-sized");
        const int64_t count = static_cast<int64_t>(n) * spatial;
        if (train && count < 2) throw ConfigError("batchnorm train mode needs batch size >= 2");

        std::vector<T> mean(static_cast<size_t>(c)), inv_std(static_cast<size_t>(c));
        if (train) {
            for (int ch = 0; ch < c; ++ch) {
                T s = 0;
                for_channel(xv, n, c, spatial, ch, [&](T v) { s += v; });
                mean[static_cast<size_t>(ch)] = s / static_cast<T>(count);
            }
            for (int ch = 0; ch < c; ++ch) {
                T s = 0;
                const T mu = mean[static_cast<size_t>(ch)];
                for_channel(xv, n, c, spatial, ch, [&](T v) { s += (v - mu) * (v - mu); });
                const T var = s / static_cast<T>(count);
                inv_std[static_cast<size_t>(ch)] = T(1) / std::sqrt(var + eps);
                (*running_mean)[ch] = (T(1) - momentum) * (*running_mean)[ch] + momentum * mu;
                (*running_var)[ch] = (T(1) - momentum) * (*running_var)[ch] + momentum * var;
            }
        } else {
            for (int ch = 0; ch < c; ++ch) {
                mean[static_cast<size_t>(ch)] = (*running_mean)[ch];
                inv_std[static_cast<size_t>(ch)] = T(1) / std::sqrt((*running_var)[ch] + eps);
            }
        }

        Tensor out(xv.shape);
        Tensor xhat(xv.shape);  // saved for backward
        const Tensor& gv = val(gamma);
        const Tensor& bv = val(beta);
        apply_channel(xv, out, xhat, n, c, spatial, mean, inv_std, gv, bv);
        int y = push(std::move(out), requires_grad(x) || requires_grad(gamma) || requires_grad(beta), nullptr);
        set_backward(y, [=, this, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
            const Tensor& gy = grad(y);
            const Tensor& gm = val(gamma);
            if (requires_grad(gamma)) {
                Tensor& gg = grad(gamma);
                for (int ch = 0; ch < c; ++ch) {
                    T s = 0;
                    for_channel_idx(n, c, spatial, ch, [&](int64_t idx) { s += gy[idx] * xhat[idx]; });
                    gg[ch] += s;
                }
            }
            if (requires_grad(beta)) {
                Tensor& gb = grad(beta);
                for (int ch = 0; ch < c; ++ch) {
                    T s = 0;
                    for_channel_idx(n, c, spatial, ch, [&](int64_t idx) { s += gy[idx]; });
                    gb[ch] += s;
                }
            }
            if (requires_grad(x)) {
                Tensor& gx = grad(x);
                if (train) {
                    for (int ch = 0; ch < c; ++ch) {
                        T sum_dy = 0, sum_dy_xhat = 0;
                        for_channel_idx(n, c, spatial, ch, [&](int64_t idx) {
                            sum_dy += gy[idx];
                            sum_dy_xhat += gy[idx] * xhat[idx];
                        });
                        const T scale = gm[ch] * inv_std[static_cast<size_t>(ch)] / static_cast<T>(count);
                        for_channel_idx(n, c, spatial, ch, [&](int64_t idx) {
                            gx[idx] += scale * (static_cast<T>(count) * gy[idx] - sum_dy -
                                                xhat[idx] * sum_dy_xhat);
                        });
                    }
                } else {
                    for (int ch = 0; ch < c; ++ch) {
                        const T scale = gm[ch] * inv_std[static_cast<size_t>(ch)];
                        for_channel_idx(n, c, spatial, ch, [&](int64_t idx) { gx[idx] += scale * gy[idx]; });
                    }
                }
            }
        });
        return y;
    }

    int relu(int x) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            const Tensor& xv2 = val(x);
            for (int64_t i = 0; i < xv2.size(); ++i)
                if (xv2[i] > T(0)) gx[i] += gy[i];
        });
        return y;
    }

    int tanh_(int x) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) out[i] = std::tanh(xv[i]);
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            const Tensor& yv = val(y);
            for (int64_t i = 0; i < yv.size(); ++i) gx[i] += gy[i] * (T(1) - yv[i] * yv[i]);
        });
        return y;
    }

    // Row-wise softmax on [N,K], max-subtracted for stability.
    int softmax(int x) {
        const Tensor& xv = val(x);
        if (xv.rank() != 2) throw ConfigError("softmax expects rank-2 input");
        const int n = xv.dim(0), k = xv.dim(1);
        Tensor out({n, k});
        for (int i = 0; i < n; ++i) {
            const T* row = xv.data.data() + static_cast<int64_t>(i) * k;
            T* orow = out.data.data() + static_cast<int64_t>(i) * k;
            T mx = row[0];
            for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
            T s = 0;
            for (int j = 0; j < k; ++j) {
                orow[j] = std::exp(row[j] - mx);
                s += orow[j];
            }
            for (int j = 0; j < k; ++j) orow[j] /= s;
        }
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            const Tensor& yv = val(y);
            for (int i = 0; i < n; ++i) {
                const int64_t off = static_cast<int64_t>(i) * k;
                T dot = 0;
                for (int j = 0; j < k; ++j) dot += gy[off + j] * yv[off + j];
                for (int j = 0; j < k; ++j) gx[off + j] += yv[off + j] * (gy[off + j] - dot);
            }
        });
        return y;
    }

    int mul_scalar(int x, T s) {
        const Tensor& xv = val(x);
        Tensor out(xv.shape);
        for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * s;
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            for (int64_t i = 0; i < gx.size(); ++i) gx[i] += s * gy[i];
        });
        return y;
    }

    int add(int a, int b) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (!av.same_shape(bv)) throw ConfigError("add shape mismatch");
        Tensor out(av.shape);
        for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        int y = push(std::move(out), requires_grad(a) || requires_grad(b), nullptr);
        set_backward(y, [=, this]() {
            const Tensor& gy = grad(y);
            if (requires_grad(a)) {
                Tensor& ga = grad(a);
                for (int64_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad(b);
                for (int64_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
            }
        });
        return y;
    }

    // [N,C,H,W] -> [N,C*H*W]; pure reshape.
    int flatten(int x) {
        const Tensor& xv = val(x);
        if (xv.rank() < 2) throw ConfigError("flatten expects rank >= 2");
        const int n = xv.dim(0);
        const int f = static_cast<int>(xv.size() / n);
        Tensor out = xv;
        out.shape = {n, f};
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            for (int64_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        });
        return y;
    }

    // Concatenate rank-2 tensors along the feature axis.
    int concat(const std::vector<int>& parts) {
        if (parts.empty()) throw ConfigError("concat of zero parts");
        const int n = val(parts[0]).dim(0);
        int total = 0;
        bool rg = false;
        for (int p : parts) {
            const Tensor& pv = val(p);
            if (pv.rank() != 2 || pv.dim(0) != n) throw ConfigError("concat expects rank-2 parts with equal rows");
            total += pv.dim(1);
            rg = rg || requires_grad(p);
        }
        Tensor out({n, total});
        int off = 0;
        for (int p : parts) {
            const Tensor& pv = val(p);
            const int f = pv.dim(1);
            for (int i = 0; i < n; ++i)
                std::copy(pv.data.begin() + static_cast<int64_t>(i) * f,
                          pv.data.begin() + static_cast<int64_t>(i + 1) * f,
                          out.data.begin() + static_cast<int64_t>(i) * total + off);
            off += f;
        }
        int y = push(std::move(out), rg, nullptr);
        set_backward(y, [=, this]() {
            const Tensor& gy = grad(y);
            int o = 0;
            for (int p : parts) {
                const int f = val(p).dim(1);
                if (requires_grad(p)) {
                    Tensor& gp = grad(p);
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < f; ++j)
                            gp[static_cast<int64_t>(i) * f + j] += gy[static_cast<int64_t>(i) * total + o + j];
                }
                o += f;
            }
        });
        return y;
    }

    // Column slice of [N,C,H,W] along W; one start per sample. The start
    // index is an integer, no gradient flows to it.
    int crop_cols(int x, const std::vector<int>& starts, int width) {
        const Tensor& xv = val(x);
        if (xv.rank() != 4) throw ConfigError("crop_cols expects rank-4 input");
        const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        if (width > w) throw ConfigError("crop width exceeds input width");
        if (static_cast<int>(starts.size()) != n) throw ConfigError("crop_cols needs one start per sample");
        for (int s : starts)
            if (s < 0 || s + width > w) throw ConfigError("crop window out of bounds");
        Tensor out({n, c, h, width});
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int r = 0; r < h; ++r) {
                    const T* src = xv.data.data() + ((static_cast<int64_t>(i) * c + ch) * h + r) * w + starts[static_cast<size_t>(i)];
                    T* dst = out.data.data() + ((static_cast<int64_t>(i) * c + ch) * h + r) * width;
                    std::copy(src, src + width, dst);
                }
        int y = push(std::move(out), requires_grad(x), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(x)) return;
            Tensor& gx = grad(x);
            const Tensor& gy = grad(y);
            for (int i = 0; i < n; ++i)
                for (int ch = 0; ch < c; ++ch)
                    for (int r = 0; r < h; ++r) {
                        const int64_t so = ((static_cast<int64_t>(i) * c + ch) * h + r) * width;
                        const int64_t dof = ((static_cast<int64_t>(i) * c + ch) * h + r) * w + starts[static_cast<size_t>(i)];
                        for (int j = 0; j < width; ++j) gx[dof + j] += gy[so + j];
                    }
        });
        return y;
    }

    // out[i,f] = x[i,f] * g[i,col]; x [N,F], g [N,K].
    int scale_rows(int x, int g, int col) {
        const Tensor& xv = val(x);
        const Tensor& gv = val(g);
        if (xv.rank() != 2 || gv.rank() != 2 || xv.dim(0) != gv.dim(0))
            throw ConfigError("scale_rows shape mismatch");
        if (col < 0 || col >= gv.dim(1)) throw ConfigError("scale_rows column out of range");
        const int n = xv.dim(0), f = xv.dim(1), k = gv.dim(1);
        Tensor out({n, f});
        for (int i = 0; i < n; ++i) {
            const T s = gv[static_cast<int64_t>(i) * k + col];
            for (int j = 0; j < f; ++j)
                out[static_cast<int64_t>(i) * f + j] = xv[static_cast<int64_t>(i) * f + j] * s;
        }
        int y = push(std::move(out), requires_grad(x) || requires_grad(g), nullptr);
        set_backward(y, [=, this]() {
            const Tensor& gy = grad(y);
            const Tensor& xv2 = val(x);
            const Tensor& gv2 = val(g);
            if (requires_grad(x)) {
                Tensor& gx = grad(x);
                for (int i = 0; i < n; ++i) {
                    const T s = gv2[static_cast<int64_t>(i) * k + col];
                    for (int j = 0; j < f; ++j) gx[static_cast<int64_t>(i) * f + j] += s * gy[static_cast<int64_t>(i) * f + j];
                }
            }
            if (requires_grad(g)) {
                Tensor& gg = grad(g);
                for (int i = 0; i < n; ++i) {
                    T s = 0;
                    for (int j = 0; j < f; ++j)
                        s += gy[static_cast<int64_t>(i) * f + j] * xv2[static_cast<int64_t>(i) * f + j];
                    gg[static_cast<int64_t>(i) * k + col] += s;
                }
            }
        });
        return y;
    }

    // [N,K] x r[K] -> [N,1]; expectation of r under each row.
    int dot_rows(int p, std::vector<T> r) {
        const Tensor& pv = val(p);
        if (pv.rank() != 2 || pv.dim(1) != static_cast<int>(r.size()))
            throw ConfigError("dot_rows size mismatch");
        const int n = pv.dim(0), k = pv.dim(1);
        Tensor out({n, 1});
        for (int i = 0; i < n; ++i) {
            T s = 0;
            for (int j = 0; j < k; ++j) s += pv[static_cast<int64_t>(i) * k + j] * r[static_cast<size_t>(j)];
            out[i] = s;
        }
        int y = push(std::move(out), requires_grad(p), nullptr);
        set_backward(y, [=, this, r = std::move(r)]() {
            if (!requires_grad(p)) return;
            Tensor& gp = grad(p);
            const Tensor& gy = grad(y);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j) gp[static_cast<int64_t>(i) * k + j] += gy[i] * r[static_cast<size_t>(j)];
        });
        return y;
    }

    // ---- scalar loss nodes ([1]-shaped) ----

    // Mean squared error between pred [N,1] (or [N]) and a constant target.
    int mse_loss(int pred, std::vector<T> target) {
        const Tensor& pv = val(pred);
        const int n = static_cast<int>(pv.size());
        if (static_cast<int>(target.size()) != n) throw ConfigError("mse_loss target size mismatch");
        T s = 0;
        for (int i = 0; i < n; ++i) {
            const T d = pv[i] - target[static_cast<size_t>(i)];
            s += d * d;
        }
        Tensor out({1});
        out[0] = s / static_cast<T>(n);
        int y = push(std::move(out), requires_grad(pred), nullptr);
        set_backward(y, [=, this, target = std::move(target)]() {
            if (!requires_grad(pred)) return;
            Tensor& gp = grad(pred);
            const T g = grad(y)[0] * T(2) / static_cast<T>(n);
            const Tensor& pv2 = val(pred);
            for (int i = 0; i < n; ++i) gp[i] += g * (pv2[i] - target[static_cast<size_t>(i)]);
        });
        return y;
    }

    // Batch-mean Shannon entropy of gate rows: (1/N) sum_j sum_i -g log g.
    int mean_row_entropy(int p) {
        const Tensor& pv = val(p);
        if (pv.rank() != 2) throw ConfigError("mean_row_entropy expects rank-2 input");
        const int n = pv.dim(0), k = pv.dim(1);
        T s = 0;
        for (int64_t i = 0; i < pv.size(); ++i)
            if (pv[i] > T(0)) s -= pv[i] * std::log(pv[i]);
        Tensor out({1});
        out[0] = s / static_cast<T>(n);
        int y = push(std::move(out), requires_grad(p), nullptr);
        set_backward(y, [=, this]() {
            if (!requires_grad(p)) return;
            Tensor& gp = grad(p);
            const Tensor& pv2 = val(p);
            const T g = grad(y)[0] / static_cast<T>(n);
            for (int64_t i = 0; i < static_cast<int64_t>(n) * k; ++i)
                if (pv2[i] > T(0)) gp[i] += g * (-(std::log(pv2[i]) + T(1)));
        });
        return y;
    }

    // sum_i q_i log q_i with q = column mean of the batch rows (negative
    // entropy of the batch-average distribution).
    int neg_entropy_of_mean(int p) {
        const Tensor& pv = val(p);
        if (pv.rank() != 2) throw ConfigError("neg_entropy_of_mean expects rank-2 input");
        const int n = pv.dim(0), k = pv.dim(1);
        std::vector<T> q(static_cast<size_t>(k), T(0));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j) q[static_cast<size_t>(j)] += pv[static_cast<int64_t>(i) * k + j];
        for (T& v : q) v /= static_cast<T>(n);
        T s = 0;
        for (T v : q)
            if (v > T(0)) s += v * std::log(v);
        Tensor out({1});
        out[0] = s;
        int y = push(std::move(out), requires_grad(p), nullptr);
        set_backward(y, [=, this, q = std::move(q)]() {
            if (!requires_grad(p)) return;
            Tensor& gp = grad(p);
            const T g = grad(y)[0] / static_cast<T>(n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j)
                    if (q[static_cast<size_t>(j)] > T(0))
                        gp[static_cast<int64_t>(i) * k + j] += g * (std::log(q[static_cast<size_t>(j)]) + T(1));
        });
        return y;
    }

    // Mean KL(target || softmax(logits / temp)) over the batch; targets are
    // constant probability rows.
    int kl_to_const(int logits, const std::vector<T>& target_probs, T temp) {
        const Tensor& lv = val(logits);
        if (lv.rank() != 2) throw ConfigError("kl_to_const expects rank-2 logits");
        const int n = lv.dim(0), k = lv.dim(1);
        if (static_cast<int>(target_probs.size()) != n * k) throw ConfigError("kl_to_const target size mismatch");
        std::vector<T> q(static_cast<size_t>(n) * k);  // softened student probs
        T loss = 0;
        for (int i = 0; i < n; ++i) {
            const int64_t off = static_cast<int64_t>(i) * k;
            T mx = lv[off] / temp;
            for (int j = 1; j < k; ++j) mx = std::max(mx, lv[off + j] / temp);
            T z = 0;
            for (int j = 0; j < k; ++j) z += std::exp(lv[off + j] / temp - mx);
            const T logz = std::log(z) + mx;
            for (int j = 0; j < k; ++j) {
                const T logq = lv[off + j] / temp - logz;
                q[static_cast<size_t>(off + j)] = std::exp(logq);
                const T t = target_probs[static_cast<size_t>(off + j)];
                if (t > T(0)) loss += t * (std::log(t) - logq);
            }
        }
        Tensor out({1});
        out[0] = loss / static_cast<T>(n);
        int y = push(std::move(out), requires_grad(logits), nullptr);
        set_backward(y, [=, this, q = std::move(q)]() {
            if (!requires_grad(logits)) return;
            Tensor& gl = grad(logits);
            const T g = grad(y)[0] / (static_cast<T>(n) * temp);
            for (int64_t i = 0; i < static_cast<int64_t>(n) * k; ++i)
                gl[i] += g * (q[static_cast<size_t>(i)] - target_probs[static_cast<size_t>(i)]);
        });
        return y;
    }

    // Mean cross-entropy of logits vs integer class labels.
    int cross_entropy_index(int logits, std::vector<int> labels) {
        const Tensor& lv = val(logits);
        if (lv.rank() != 2) throw ConfigError("cross_entropy_index expects rank-2 logits");
        const int n = lv.dim(0), k = lv.dim(1);
        if (static_cast<int>(labels.size()) != n) throw ConfigError("cross_entropy_index label count mismatch");
        std::vector<T> q(static_cast<size_t>(n) * k);
        T loss = 0;
        for (int i = 0; i < n; ++i) {
            const int64_t off = static_cast<int64_t>(i) * k;
            T mx = lv[off];
            for (int j = 1; j < k; ++j) mx = std::max(mx, lv[off + j]);
            T z = 0;
            for (int j = 0; j < k; ++j) z += std::exp(lv[off + j] - mx);
            const T logz = std::log(z) + mx;
            for (int j = 0; j < k; ++j) q[static_cast<size_t>(off + j)] = std::exp(lv[off + j] - logz);
            loss -= lv[off + labels[static_cast<size_t>(i)]] - logz;
        }
        Tensor out({1});
        out[0] = loss / static_cast<T>(n);
        int y = push(std::move(out), requires_grad(logits), nullptr);
        set_backward(y, [=, this, q = std::move(q), labels = std::move(labels)]() {
            if (!requires_grad(logits)) return;
            Tensor& gl = grad(logits);
            const T g = grad(y)[0] / static_cast<T>(n);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < k; ++j) {
                    T d = q[static_cast<int64_t>(i) * k + j];
                    if (j == labels[static_cast<size_t>(i)]) d -= T(1);
                    gl[static_cast<int64_t>(i) * k + j] += g * d;
                }
        });
        return y;
    }

    // Weighted sum of scalar nodes; terms with zero weight still execute
    // their forward but contribute nothing.
    int combine(const std::vector<std::pair<T, int>>& terms) {
        T s = 0;
        bool rg = false;
        for (auto& [w, id] : terms) {
            if (val(id).size() != 1) throw ConfigError("combine expects scalar nodes");
            s += w * val(id)[0];
            rg = rg || requires_grad(id);
        }
        Tensor out({1});
        out[0] = s;
        int y = push(std::move(out), rg, nullptr);
        set_backward(y, [=, this]() {
            const T g = grad(y)[0];
            for (auto& [w, id] : terms)
                if (requires_grad(id)) grad(id)[0] += g * w;
        });
        return y;
    }

    void backward(int loss) {
        if (val(loss).size() != 1) throw ConfigError("backward expects a scalar loss node");
        grad(loss)[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            Node& nd = *nodes_[static_cast<size_t>(i)];
            if (nd.backward_fn && nd.requires_grad) nd.backward_fn();
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void()> backward_fn;
    };

    std::vector<std::unique_ptr<Node>> nodes_;

    int push(Tensor v, bool rg, std::function<void()> fn) {
        v.check_finite("tape node " + std::to_string(nodes_.size()));
        auto nd = std::make_unique<Node>();
        nd->grad = Tensor(v.shape);
        nd->value = std::move(v);
        nd->requires_grad = rg;
        nd->backward_fn = std::move(fn);
        nodes_.push_back(std::move(nd));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_backward(int id, std::function<void()> fn) {
        nodes_[static_cast<size_t>(id)]->backward_fn = std::move(fn);
    }

    template <typename F>
    static void for_channel(const Tensor& x, int n, int c, int64_t spatial, int ch, F&& f) {
        for (int i = 0; i < n; ++i) {
            const int64_t base = (static_cast<int64_t>(i) * c + ch) * spatial;
            for (int64_t s = 0; s < spatial; ++s) f(x[base + s]);
        }
    }

    template <typename F>
    static void for_channel_idx(int n, int c, int64_t spatial, int ch, F&& f) {
        for (int i = 0; i < n; ++i) {
            const int64_t base = (static_cast<int64_t>(i) * c + ch) * spatial;
            for (int64_t s = 0; s < spatial; ++s) f(base + s);
        }
    }

    static void apply_channel(const Tensor& x, Tensor& out, Tensor& xhat, int n, int c,
                              int64_t spatial, const std::vector<T>& mean,
                              const std::vector<T>& inv_std, const Tensor& gamma, const Tensor& beta) {
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
                const int64_t base = (static_cast<int64_t>(i) * c + ch) * spatial;
                const T mu = mean[static_cast<size_t>(ch)], is = inv_std[static_cast<size_t>(ch)];
                const T g = gamma[ch], b = beta[ch];
                for (int64_t s = 0; s < spatial; ++s) {
                    const T xh = (x[base + s] - mu) * is;
                    xhat[base + s] = xh;
                    out[base + s] = g * xh + b;
                }
            }
    }

    static void im2col(const T* img, int c, int h, int w, int kh, int kw, int sh, int sw, int ph,
                       int pw, int ho, int wo, T* col) {
        const int m = ho * wo;
        int64_t r = 0;
        for (int ch = 0; ch < c; ++ch)
            for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx, ++r) {
                    T* dst = col + r * m;
                    for (int oh = 0; oh < ho; ++oh) {
                        const int iy = oh * sh - ph + dy;
                        if (iy < 0 || iy >= h) {
                            for (int ow = 0; ow < wo; ++ow) dst[oh * wo + ow] = T(0);
                            continue;
                        }
                        const T* src = img + (static_cast<int64_t>(ch) * h + iy) * w;
                        for (int ow = 0; ow < wo; ++ow) {
                            const int ix = ow * sw - pw + dx;
                            dst[oh * wo + ow] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                        }
                    }
                }
    }

    static void col2im_add(const T* col, int c, int h, int w, int kh, int kw, int sh, int sw,
                           int ph, int pw, int ho, int wo, T* img) {
        const int m = ho * wo;
        int64_t r = 0;
        for (int ch = 0; ch < c; ++ch)
            for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx, ++r) {
                    const T* src = col + r * m;
                    for (int oh = 0; oh < ho; ++oh) {
                        const int iy = oh * sh - ph + dy;
                        if (iy < 0 || iy >= h) continue;
                        T* dst = img + (static_cast<int64_t>(ch) * h + iy) * w;
                        for (int ow = 0; ow < wo; ++ow) {
                            const int ix = ow * sw - pw + dx;
                            if (ix >= 0 && ix < w) dst[ix] += src[oh * wo + ow];
                        }
                    }
                }
    }
};

using Tape = TapeT<float>;

}  // namespace mmen
