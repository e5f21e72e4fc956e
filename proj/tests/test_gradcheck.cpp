#include <doctest.h>

#include <memory>

#include "gradcheck_util.hpp"

using gradcheck::Builder;
using gradcheck::DTape;
using gradcheck::DTensor;
using gradcheck::check;
using gradcheck::random_input;

namespace {

// Sum-of-squares readout turns any tensor node into a scalar loss with a
// nontrivial gradient.
int sq_sum(DTape& t, int node) {
    const auto n = static_cast<int>(t.val(node).size());
    std::vector<double> zeros(static_cast<size_t>(n), 0.0);
    DTensor flat = t.val(node);
    // reshape to [n] via mse against zero: mean(x^2) keeps gradients everywhere
    (void)flat;
    return t.mse_loss(node, zeros);
}

}  // namespace

TEST_CASE("gradcheck: dense layer") {
    std::mt19937 rng(7);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        return sq_sum(t, t.dense(in[0], in[1], in[2]));
    };
    auto rep = check(build, {random_input({3, 5}, rng), random_input({4, 5}, rng),
                             random_input({4}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: conv2d + relu stack") {
    std::mt19937 rng(11);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        int y = t.conv2d(in[0], in[1], in[2], 1, 1, 1, 1);
        y = t.relu(y);
        y = t.conv2d(y, in[3], in[4], 2, 2, 0, 1);
        y = t.relu(y);
        return sq_sum(t, t.flatten(y));
    };
    auto rep = check(build, {random_input({2, 2, 5, 6}, rng), random_input({3, 2, 3, 3}, rng),
                             random_input({3}, rng), random_input({2, 3, 2, 2}, rng),
                             random_input({2}, rng)});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: maxpool2d with padding") {
    std::mt19937 rng(13);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        return sq_sum(t, t.flatten(t.maxpool2d(in[0], 3, 3, 2, 2, 1, 1)));
    };
    auto rep = check(build, {random_input({2, 3, 6, 7}, rng)});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: batchnorm train mode") {
    std::mt19937 rng(17);
    auto rmean = std::make_shared<DTensor>(std::vector<int>{3});
    auto rvar = std::make_shared<DTensor>(std::vector<int>{3}, 1.0);
    const Builder build = [=](DTape& t, const std::vector<int>& in) {
        int y = t.batchnorm(in[0], in[1], in[2], rmean.get(), rvar.get(), /*train=*/true);
        return sq_sum(t, t.flatten(t.tanh_(y)));
    };
    auto rep = check(build, {random_input({4, 3, 2, 3}, rng), random_input({3}, rng),
                             random_input({3}, rng)});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck: batchnorm eval mode") {
    std::mt19937 rng(19);
    auto rmean = std::make_shared<DTensor>(random_input({4}, rng));
    auto rvar = std::make_shared<DTensor>(std::vector<int>{4}, 0.7);
    const Builder build = [=](DTape& t, const std::vector<int>& in) {
        int y = t.batchnorm(in[0], in[1], in[2], rmean.get(), rvar.get(), /*train=*/false);
        return sq_sum(t, y);
    };
    auto rep = check(build, {random_input({3, 4}, rng), random_input({4}, rng),
                             random_input({4}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: softmax + cross-entropy") {
    std::mt19937 rng(23);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        return t.cross_entropy_index(t.dense(in[0], in[1], in[2]), {1, 0, 3});
    };
    auto rep = check(build, {random_input({3, 6}, rng), random_input({4, 6}, rng),
                             random_input({4}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: softmax probabilities downstream") {
    std::mt19937 rng(29);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        int p = t.softmax(in[0]);
        int s = t.scale_rows(in[1], p, 2);
        return sq_sum(t, s);
    };
    auto rep = check(build, {random_input({3, 4}, rng), random_input({3, 5}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: concat, crop_cols and dot_rows") {
    std::mt19937 rng(31);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        int crop = t.crop_cols(in[0], {1, 0}, 3);
        int flat = t.flatten(crop);
        int g = t.softmax(in[1]);
        int gl = t.dot_rows(g, {-1.0, -0.5, 0.0, 0.5, 1.0});
        int cat = t.concat({flat, gl});
        return sq_sum(t, cat);
    };
    auto rep = check(build, {random_input({2, 2, 3, 5}, rng), random_input({2, 5}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: sparsity and negative-entropy losses") {
    std::mt19937 rng(37);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        int p = t.softmax(in[0]);
        int sp = t.mean_row_entropy(p);
        int ne = t.neg_entropy_of_mean(p);
        return t.combine({{0.7, sp}, {0.3, ne}});
    };
    auto rep = check(build, {random_input({4, 5}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: KL distillation loss") {
    std::mt19937 rng(41);
    std::vector<double> teacher = {0.1, 0.6, 0.2, 0.1, 0.5, 0.2, 0.2, 0.1};
    const Builder build = [teacher](DTape& t, const std::vector<int>& in) {
        return t.kl_to_const(in[0], teacher, 2.0);
    };
    auto rep = check(build, {random_input({2, 4}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: mse prediction loss through tanh head") {
    std::mt19937 rng(43);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        int y = t.tanh_(t.dense(in[0], in[1], in[2]));
        return t.mse_loss(y, {0.3, -0.5, 0.9});
    };
    auto rep = check(build, {random_input({3, 4}, rng), random_input({1, 4}, rng),
                             random_input({1}, rng)});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: full combined objective") {
    std::mt19937 rng(47);
    const Builder build = [](DTape& t, const std::vector<int>& in) {
        int feat = t.relu(t.dense(in[0], in[1], in[2]));
        int logits = t.dense(feat, in[3], in[4]);
        int probs = t.softmax(logits);
        int scaled = t.scale_rows(feat, probs, 0);
        int pred = t.tanh_(t.dense(scaled, in[5], in[6]));
        int lp = t.mse_loss(pred, {0.2, -0.1, 0.4, 0.0});
        int ls = t.mean_row_entropy(probs);
        int ln = t.neg_entropy_of_mean(probs);
        return t.combine({{1.0, lp}, {0.001, ls}, {0.0016, ln}});
    };
    auto rep = check(build, {random_input({4, 5}, rng), random_input({6, 5}, rng),
                             random_input({6}, rng), random_input({3, 6}, rng),
                             random_input({3}, rng), random_input({1, 6}, rng),
                             random_input({1}, rng)});
    CHECK(rep.max_rel_err < 1e-4);
}
