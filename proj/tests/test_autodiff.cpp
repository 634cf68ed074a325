#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "polyseg/ops.hpp"
#include "polyseg/params.hpp"

using namespace polyseg;

namespace {

Tensor4 random_tensor(Shape4 s, Rng& rng, double scale = 1.0) {
    Tensor4 t(s);
    for (real& v : t.values()) v = static_cast<real>(scale * rng.normal());
    return t;
}

double max_abs_diff(const std::vector<real>& a, const std::vector<real>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

}  // namespace

TEST_CASE("conv2d with a scalar identity kernel is the identity") {
    Rng rng(1);
    Tensor4 x = random_tensor(Shape4{2, 1, 5, 5}, rng);
    Tensor4 k = Tensor4::full(Shape4{1, 1, 1, 1}, real(1));
    Tensor4 b(Shape4{1, 1, 1, 1});
    const Tensor4 y = conv2d(x, k, b, 1, 0, nullptr);
    CHECK(y.values() == x.values());
}

TEST_CASE("conv2d with zero kernel and bias is zero") {
    Rng rng(2);
    Tensor4 x = random_tensor(Shape4{1, 3, 4, 4}, rng);
    Tensor4 k(Shape4{2, 3, 3, 3}), b(Shape4{1, 2, 1, 1});
    const Tensor4 y = conv2d(x, k, b, 1, 1, nullptr);
    for (real v : y.values()) CHECK(v == real(0));
}

TEST_CASE("conv2d tap counting on a 3x3 ones kernel") {
    Tensor4 x = Tensor4::full(Shape4{1, 1, 3, 3}, real(1));
    Tensor4 k = Tensor4::full(Shape4{1, 1, 3, 3}, real(1));
    Tensor4 b(Shape4{1, 1, 1, 1});
    const Tensor4 y = conv2d(x, k, b, 1, 1, nullptr);
    CHECK(y.at(0, 0, 1, 1) == real(9));
    CHECK(y.at(0, 0, 0, 0) == real(4));
    CHECK(y.at(0, 0, 0, 2) == real(4));
    CHECK(y.at(0, 0, 2, 0) == real(4));
    CHECK(y.at(0, 0, 2, 2) == real(4));
    CHECK(y.at(0, 0, 0, 1) == real(6));
}

TEST_CASE("conv2d validates shapes") {
    Tensor4 x(Shape4{1, 3, 4, 4}), b(Shape4{1, 2, 1, 1});
    CHECK_THROWS_AS(conv2d(x, Tensor4(Shape4{2, 4, 3, 3}), b, 1, 1, nullptr), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor4(Shape4{2, 3, 5, 5}), b, 1, 1, nullptr), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor4(Shape4{2, 3, 3, 3}), b, 3, 1, nullptr), ShapeError);
}

TEST_CASE("maxpool picks window maxima and routes ties to the first element") {
    Tensor4 x(Shape4{1, 1, 2, 2});
    x.values() = {1, 2, 3, 4};
    Graph g;
    Tensor4 y = maxpool2x2(x, &g);
    CHECK(y.values()[0] == real(4));

    Tensor4 c = Tensor4::full(Shape4{1, 1, 4, 4}, real(7));
    Graph g2;
    Tensor4 yc = maxpool2x2(c, &g2);
    Tensor4 loss = sum_all(yc, &g2);
    g2.backward(loss);
    // gradient concentrates on the first element of each 2x2 window
    for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 2; ++ox)
            for (int iy = 0; iy < 2; ++iy)
                for (int ix = 0; ix < 2; ++ix)
                    CHECK(c.grad_at(0, 0, 2 * oy + iy, 2 * ox + ix) ==
                          (iy == 0 && ix == 0 ? real(1) : real(0)));

    CHECK_THROWS_AS(maxpool2x2(Tensor4(Shape4{1, 1, 3, 4}), nullptr), ShapeError);
}

TEST_CASE("deconv2x2 broadcasts one input pixel into its 2x2 block") {
    Tensor4 x = Tensor4::full(Shape4{1, 1, 1, 1}, real(3.5));
    Tensor4 k = Tensor4::full(Shape4{1, 1, 2, 2}, real(1));
    const Tensor4 y = deconv2x2(x, k, nullptr);
    CHECK(y.shape() == Shape4{1, 1, 2, 2});
    for (real v : y.values()) CHECK(v == real(3.5));

    Tensor4 zero(Shape4{2, 3, 4, 4});
    const Tensor4 yz = deconv2x2(zero, Tensor4(Shape4{3, 2, 2, 2}), nullptr);
    for (real v : yz.values()) CHECK(v == real(0));
}

TEST_CASE("deconv2x2 forward equals backward-data of the matching stride-2 conv") {
    Rng rng(3);
    // conv weight (Cout, Cin, 2, 2); the deconv with the same storage viewed
    // as (Cin=Cout_conv, Cout=Cin_conv, 2, 2) is its adjoint
    Tensor4 w = random_tensor(Shape4{4, 3, 2, 2}, rng);
    Tensor4 z = random_tensor(Shape4{2, 3, 8, 8}, rng);
    Tensor4 b(Shape4{1, 4, 1, 1});
    Tensor4 r = random_tensor(Shape4{2, 4, 4, 4}, rng);

    // dz = d/dz sum(conv(z) .* r) is the adjoint applied to r
    Graph g;
    Tensor4 y = conv2d(z, w, b, 2, 0, &g);
    g.backward(sum_all(mul(y, r, &g), &g));

    const Tensor4 via_deconv = deconv2x2(r, w, nullptr);
    CHECK(max_abs_diff(via_deconv.values(), z.grads()) < 1e-10);
}

TEST_CASE("batchnorm train mode standardizes per channel") {
    Rng rng(4);
    Tensor4 x = random_tensor(Shape4{3, 2, 5, 5}, rng, 3.0);
    Tensor4 gamma = Tensor4::full(Shape4{1, 2, 1, 1}, real(1));
    Tensor4 beta(Shape4{1, 2, 1, 1});
    Tensor4 rm(Shape4{1, 2, 1, 1});
    Tensor4 rv = Tensor4::full(Shape4{1, 2, 1, 1}, real(1));
    const Tensor4 y = batchnorm(x, gamma, beta, rm, rv, true, real(0.1), real(1e-6), nullptr);

    for (int c = 0; c < 2; ++c) {
        double sum = 0, count = 0;
        for (int n = 0; n < 3; ++n)
            for (int i = 0; i < 25; ++i) {
                sum += y.values()[(n * 2 + c) * 25 + i];
                ++count;
            }
        const double mean = sum / count;
        double ss = 0;
        for (int n = 0; n < 3; ++n)
            for (int i = 0; i < 25; ++i) {
                const double d = y.values()[(n * 2 + c) * 25 + i] - mean;
                ss += d * d;
            }
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(ss / count - 1.0) < 1e-4);
    }

    // running stats moved toward the batch statistics
    CHECK(rm.values()[0] != real(0));
    CHECK(rv.values()[0] != real(1));
}

TEST_CASE("batchnorm eval mode with neutral stats is near identity") {
    Rng rng(5);
    Tensor4 x = random_tensor(Shape4{1, 3, 4, 4}, rng);
    Tensor4 gamma = Tensor4::full(Shape4{1, 3, 1, 1}, real(1));
    Tensor4 beta(Shape4{1, 3, 1, 1});
    Tensor4 rm(Shape4{1, 3, 1, 1});
    Tensor4 rv = Tensor4::full(Shape4{1, 3, 1, 1}, real(1));
    const Tensor4 y = batchnorm(x, gamma, beta, rm, rv, false, real(0.1), real(1e-5), nullptr);
    CHECK(max_abs_diff(y.values(), x.values()) < 2e-5);  // off by eps/2 relative
    // and exactly the identity with eps = 0
    const Tensor4 y0 = batchnorm(x, gamma, beta, rm, rv, false, real(0.1), real(0), nullptr);
    CHECK(y0.values() == x.values());
}

TEST_CASE("relu forward and gradient") {
    Tensor4 x(Shape4{1, 1, 2, 3});
    x.values() = {-2, -1, 0, 1, 2, 3};
    Graph g;
    Tensor4 y = relu(x, &g);
    CHECK(y.values() == std::vector<real>{0, 0, 0, 1, 2, 3});
    g.backward(sum_all(y, &g));
    CHECK(x.grads() == std::vector<real>{0, 0, 0, 1, 1, 1});

    Tensor4 neg = Tensor4::full(Shape4{1, 2, 2, 2}, real(-5));
    const Tensor4 yn = relu(neg, nullptr);
    for (real v : yn.values()) CHECK(v == real(0));
    Tensor4 pos = Tensor4::full(Shape4{1, 2, 2, 2}, real(5));
    const Tensor4 yp = relu(pos, nullptr);
    CHECK(yp.values() == pos.values());
}

TEST_CASE("concat_channels stacks a first and splits gradients") {
    Rng rng(6);
    Tensor4 a = random_tensor(Shape4{1, 2, 4, 4}, rng);
    Tensor4 b = random_tensor(Shape4{1, 3, 4, 4}, rng);
    Graph g;
    Tensor4 y = concat_channels(a, b, &g);
    CHECK(y.shape() == Shape4{1, 5, 4, 4});
    for (int i = 0; i < 32; ++i) CHECK(y.values()[i] == a.values()[i]);
    for (int i = 0; i < 48; ++i) CHECK(y.values()[32 + i] == b.values()[i]);

    Tensor4 r = random_tensor(Shape4{1, 5, 4, 4}, rng);
    g.backward(sum_all(mul(y, r, &g), &g));
    for (int i = 0; i < 32; ++i) CHECK(a.grads()[i] == r.values()[i]);
    for (int i = 0; i < 48; ++i) CHECK(b.grads()[i] == r.values()[32 + i]);

    // zero-channel concat is the identity
    Tensor4 empty(Shape4{1, 0, 4, 4});
    CHECK(concat_channels(a, empty, nullptr).values() == a.values());

    CHECK_THROWS_AS(concat_channels(a, Tensor4(Shape4{1, 3, 5, 4}), nullptr), ShapeError);
}

TEST_CASE("weighted cross-entropy matches the hand-evaluated single pixel") {
    Tensor4 logits(Shape4{1, 3, 1, 1});
    LabelBatch target(1, 1, 1);
    target.v[0] = 2;  // lesion
    const Tensor4 loss = weighted_cross_entropy(logits, target, ClassWeights{}, nullptr);
    CHECK(std::abs(static_cast<double>(loss.values()[0]) - 5.0 * std::log(3.0)) < 1e-9);
}

TEST_CASE("weighted cross-entropy vanishes for a saturated true logit") {
    Tensor4 logits(Shape4{1, 3, 1, 1});
    logits.values() = {0, 0, 50};
    LabelBatch target(1, 1, 1);
    target.v[0] = 2;
    const Tensor4 loss = weighted_cross_entropy(logits, target, ClassWeights{}, nullptr);
    CHECK(loss.values()[0] < 1e-10);
}

TEST_CASE("unit weights reduce to unweighted cross-entropy") {
    Rng rng(7);
    Tensor4 logits = random_tensor(Shape4{2, 3, 4, 4}, rng, 2.0);
    LabelBatch target(2, 4, 4);
    for (auto& t : target.v) t = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
    const Tensor4 ours =
        weighted_cross_entropy(logits, target, ClassWeights{1, 1, 1}, nullptr);

    // independent reference: direct per-pixel -log softmax
    double expect = 0;
    for (int n = 0; n < 2; ++n) {
        double slice = 0;
        for (int i = 0; i < 16; ++i) {
            const double l0 = logits.values()[n * 48 + i];
            const double l1 = logits.values()[n * 48 + 16 + i];
            const double l2 = logits.values()[n * 48 + 32 + i];
            const double z = std::exp(l0) + std::exp(l1) + std::exp(l2);
            const int t = target.v[n * 16 + i];
            const double lt = t == 0 ? l0 : (t == 1 ? l1 : l2);
            slice += -(lt - std::log(z));
        }
        expect += slice / 16.0;
    }
    expect /= 2.0;
    CHECK(std::abs(static_cast<double>(ours.values()[0]) - expect) < 1e-12);
}

TEST_CASE("weighted cross-entropy rejects invalid labels") {
    Tensor4 logits(Shape4{1, 3, 1, 1});
    LabelBatch target(1, 1, 1);
    target.v[0] = 3;
    CHECK_THROWS_AS(weighted_cross_entropy(logits, target, ClassWeights{}, nullptr), LabelError);
}

TEST_CASE("softmax sums to one per pixel") {
    Rng rng(8);
    Tensor4 logits = random_tensor(Shape4{2, 3, 6, 6}, rng, 5.0);
    const Tensor4 sm = softmax_channels(logits);
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 36; ++i) {
            const double s = static_cast<double>(sm.values()[n * 108 + i]) +
                             sm.values()[n * 108 + 36 + i] + sm.values()[n * 108 + 72 + i];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
}

TEST_CASE("backward of sum is ones; backward of sum of squares is 2x") {
    Rng rng(9);
    Tensor4 x = random_tensor(Shape4{1, 2, 3, 3}, rng);
    {
        Graph g;
        g.backward(sum_all(x, &g));
        for (real v : x.grads()) CHECK(v == real(1));
    }
    x.zero_grad();
    {
        Graph g;
        g.backward(sum_all(mul(x, x, &g), &g));
        for (std::size_t i = 0; i < x.values().size(); ++i)
            CHECK(x.grads()[i] == doctest::Approx(2.0 * x.values()[i]));
    }
}

TEST_CASE("repeated backward without zero_grad accumulates") {
    Tensor4 x = Tensor4::full(Shape4{1, 1, 2, 2}, real(1));
    Graph g;
    Tensor4 loss = sum_all(x, &g);
    g.backward(loss);
    g.backward(loss);
    for (real v : x.grads()) CHECK(v == real(2));
}

TEST_CASE("backward on a detached value raises a graph error") {
    Tensor4 x = Tensor4::full(Shape4{1, 1, 1, 1}, real(2));
    Graph g;
    CHECK_THROWS_AS(g.backward(x), GraphError);
    Tensor4 y = sum_all(x, nullptr);  // not recorded
    CHECK_THROWS_AS(g.backward(y), GraphError);
}

TEST_CASE("zero_grad clears the gradient slot") {
    Tensor4 x = Tensor4::full(Shape4{1, 1, 2, 2}, real(1));
    Graph g;
    g.backward(sum_all(x, &g));
    x.zero_grad();
    for (real v : x.grads()) CHECK(v == real(0));
}

TEST_CASE("sgd step follows the momentum recurrence") {
    SUBCASE("vanilla") {
        ParamSet ps;
        Tensor4 w = ps.add("w", Tensor4::full(Shape4{1, 1, 1, 1}, real(2)));
        w.grads()[0] = real(0.5);
        SgdOptimizer opt(ps, SgdConfig{0.0, 0.0});
        opt.step(real(0.1));
        CHECK(w.values()[0] == doctest::Approx(2.0 - 0.1 * 0.5));
        CHECK(w.grads()[0] == real(0.5));  // untouched
    }
    SUBCASE("decay-only") {
        ParamSet ps;
        Tensor4 w = ps.add("w", Tensor4::full(Shape4{1, 1, 1, 1}, real(1)));
        SgdOptimizer opt(ps, SgdConfig{0.0, 5e-4});
        opt.step(real(1));
        CHECK(w.values()[0] == doctest::Approx(1.0 - 5e-4));
    }
    SUBCASE("two momentum steps") {
        ParamSet ps;
        Tensor4 w = ps.add("w", Tensor4(Shape4{1, 1, 1, 1}));
        SgdOptimizer opt(ps, SgdConfig{0.99, 0.0});
        w.grads()[0] = real(1);
        opt.step(real(1));
        CHECK(w.values()[0] == doctest::Approx(-1.0));
        opt.step(real(1));  // v2 = 0.99 + 1 = 1.99; w2 = -1 - 1.99
        CHECK(w.values()[0] == doctest::Approx(-2.99));
        CHECK(opt.iteration() == 2);
    }
    SUBCASE("lr zero leaves parameters bitwise unchanged") {
        ParamSet ps;
        Tensor4 w = ps.add("w", Tensor4::full(Shape4{1, 2, 1, 1}, real(1.2345)));
        const auto before = w.values();
        w.grads() = {real(3), real(-4)};
        SgdOptimizer opt(ps, SgdConfig{});
        opt.step(real(0));
        CHECK(w.values() == before);
    }
}

TEST_CASE("kaiming init statistics and determinism") {
    const int fan_in = 32;
    const Tensor4 a = kaiming_normal(Shape4{100, 100, 1, 10}, fan_in, 99);
    const Tensor4 b = kaiming_normal(Shape4{100, 100, 1, 10}, fan_in, 99);
    CHECK(a.values() == b.values());

    const double n = static_cast<double>(a.numel());
    double sum = 0;
    for (real v : a.values()) sum += v;
    const double mean = sum / n;
    double ss = 0;
    for (real v : a.values()) ss += (v - mean) * (v - mean);
    const double var = ss / n;
    const double target = 2.0 / fan_in;
    CHECK(std::abs(var - target) < 0.05 * target);
    // mean within 3 standard errors of zero
    CHECK(std::abs(mean) < 3.0 * std::sqrt(target / n));
}

TEST_CASE("checkpoint round-trips parameters through float32") {
    ParamSet ps;
    Rng rng(10);
    ps.add("conv.weight", random_tensor(Shape4{4, 3, 3, 3}, rng));
    ps.add("conv.bias", random_tensor(Shape4{1, 4, 1, 1}, rng));
    ps.add("bn.mean", random_tensor(Shape4{1, 4, 1, 1}, rng), false);

    const auto path = std::filesystem::temp_directory_path() / "polyseg_ckpt_test.punw";
    save_checkpoint(ps, path);

    ParamSet loaded;
    loaded.add("conv.weight", Tensor4(Shape4{4, 3, 3, 3}));
    loaded.add("conv.bias", Tensor4(Shape4{1, 4, 1, 1}));
    loaded.add("bn.mean", Tensor4(Shape4{1, 4, 1, 1}), false);
    load_checkpoint(loaded, path);

    for (std::size_t e = 0; e < ps.entries().size(); ++e) {
        const auto& orig = ps.entries()[e].tensor.values();
        const auto& got = loaded.entries()[e].tensor.values();
        for (std::size_t i = 0; i < orig.size(); ++i)
            CHECK(got[i] == static_cast<real>(static_cast<float>(orig[i])));
    }

    // a second save of the loaded set is byte-identical
    const auto path2 = std::filesystem::temp_directory_path() / "polyseg_ckpt_test2.punw";
    save_checkpoint(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);

    // shape mismatch is rejected
    ParamSet wrong;
    wrong.add("conv.weight", Tensor4(Shape4{4, 3, 3, 3}));
    wrong.add("conv.bias", Tensor4(Shape4{1, 5, 1, 1}));
    wrong.add("bn.mean", Tensor4(Shape4{1, 4, 1, 1}), false);
    CHECK_THROWS_AS(load_checkpoint(wrong, path), FormatError);
}

TEST_CASE("optimizer state round-trips with the iteration counter") {
    ParamSet ps;
    Rng rng(11);
    Tensor4 w = ps.add("w", random_tensor(Shape4{2, 2, 1, 1}, rng));
    SgdOptimizer opt(ps, SgdConfig{});
    for (real& gv : w.grads()) gv = real(0.25);
    opt.step(real(1e-3));
    opt.step(real(1e-3));

    const auto path = std::filesystem::temp_directory_path() / "polyseg_opt_test.puns";
    save_optimizer_state(opt, path);

    ParamSet ps2;
    ps2.add("w", Tensor4(Shape4{2, 2, 1, 1}));
    SgdOptimizer opt2(ps2, SgdConfig{});
    load_optimizer_state(opt2, path);
    CHECK(opt2.iteration() == 2);
    for (std::size_t i = 0; i < opt.buffers()[0].second.values().size(); ++i)
        CHECK(opt2.buffers()[0].second.values()[i] ==
              static_cast<real>(static_cast<float>(opt.buffers()[0].second.values()[i])));
}
