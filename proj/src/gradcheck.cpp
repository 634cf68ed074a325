#include "polyseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "polyseg/model.hpp"
#include "polyseg/ops.hpp"

namespace polyseg {

namespace {

constexpr double kEps = 1e-5;
constexpr double kOpTol = 1e-4;
constexpr double kNetTol = 1e-3;

void fill_random(Tensor4& t, Rng& rng, double scale = 1.0, double offset = 0.0) {
    for (real& v : t.values()) v = static_cast<real>(scale * rng.normal() + offset);
}

struct Check {
    std::string name;
    double tolerance = kOpTol;
    // tensors whose gradients are verified (sampled); forward must rebuild the
    // whole computation from their current values
    std::vector<Tensor4> inputs;
    std::function<Tensor4(Graph*)> forward;
    int samples_per_tensor = 0;  // 0 = every coordinate
};

GradCheckResult run_check(const Check& check, Rng& rng) {
    GradCheckResult result;
    result.op = check.name;
    result.tolerance = check.tolerance;

    for (Tensor4 t : check.inputs) t.zero_grad();

    Graph graph;
    Tensor4 loss = check.forward(&graph);
    graph.backward(loss);

    for (Tensor4 input : check.inputs) {
        const std::int64_t count = input.numel();
        std::vector<std::int64_t> coords;
        if (check.samples_per_tensor <= 0 || check.samples_per_tensor >= count) {
            coords.resize(static_cast<std::size_t>(count));
            for (std::int64_t i = 0; i < count; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            for (int s = 0; s < check.samples_per_tensor; ++s)
                coords.push_back(rng.uniform_int(0, count - 1));
        }

        for (std::int64_t ci : coords) {
            const std::size_t idx = static_cast<std::size_t>(ci);
            const real saved = input.values()[idx];
            input.values()[idx] = saved + static_cast<real>(kEps);
            const real plus = check.forward(nullptr).values()[0];
            input.values()[idx] = saved - static_cast<real>(kEps);
            const real minus = check.forward(nullptr).values()[0];
            input.values()[idx] = saved;

            const double numeric = (static_cast<double>(plus) - minus) / (2.0 * kEps);
            const double analytic = static_cast<double>(input.grads()[idx]);
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-4});
            result.max_rel_err = std::max(result.max_rel_err, rel);
            ++result.coords_checked;
        }
    }
    result.pass = result.max_rel_err < result.tolerance;
    return result;
}

// random projection so the scalar loss exercises every output coordinate
Tensor4 project(const Tensor4& y, const Tensor4& r, Graph* g) {
    return sum_all(mul(y, r, g), g);
}

}  // namespace

std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed, const std::string& filter) {
    Rng rng(seed);
    std::vector<Check> checks;

    {
        Tensor4 x(Shape4{2, 3, 6, 6}), k(Shape4{4, 3, 1, 1}), b(Shape4{1, 4, 1, 1});
        Tensor4 r(Shape4{2, 4, 6, 6});
        fill_random(x, rng);
        fill_random(k, rng);
        fill_random(b, rng, 0.1);
        fill_random(r, rng);
        checks.push_back({"conv1x1", kOpTol, {x, k, b},
                          [=](Graph* g) { return project(conv2d(x, k, b, 1, 0, g), r, g); }});
    }
    {
        Tensor4 x(Shape4{2, 3, 8, 8}), k(Shape4{4, 3, 3, 3}), b(Shape4{1, 4, 1, 1});
        Tensor4 r(Shape4{2, 4, 8, 8});
        fill_random(x, rng);
        fill_random(k, rng);
        fill_random(b, rng, 0.1);
        fill_random(r, rng);
        checks.push_back({"conv3x3", kOpTol, {x, k, b},
                          [=](Graph* g) { return project(conv2d(x, k, b, 1, 1, g), r, g); }});
    }
    {
        Tensor4 x(Shape4{2, 3, 8, 8}), k(Shape4{4, 3, 3, 3}), b(Shape4{1, 4, 1, 1});
        Tensor4 r(Shape4{2, 4, 4, 4});
        fill_random(x, rng);
        fill_random(k, rng);
        fill_random(b, rng, 0.1);
        fill_random(r, rng);
        checks.push_back({"conv3x3_stride2", kOpTol, {x, k, b},
                          [=](Graph* g) { return project(conv2d(x, k, b, 2, 1, g), r, g); }});
    }
    {
        Tensor4 x(Shape4{2, 3, 5, 5}), k(Shape4{3, 4, 2, 2});
        Tensor4 r(Shape4{2, 4, 10, 10});
        fill_random(x, rng);
        fill_random(k, rng);
        fill_random(r, rng);
        checks.push_back({"deconv2x2", kOpTol, {x, k},
                          [=](Graph* g) { return project(deconv2x2(x, k, g), r, g); }});
    }
    {
        // distinct window entries keep the check away from argmax ties
        Tensor4 x(Shape4{2, 3, 6, 6});
        Tensor4 r(Shape4{2, 3, 3, 3});
        fill_random(r, rng);
        for (std::size_t i = 0; i < x.values().size(); ++i)
            x.values()[i] = static_cast<real>(rng.normal() + 0.01 * static_cast<double>(i % 97));
        checks.push_back({"maxpool2x2", kOpTol, {x},
                          [=](Graph* g) { return project(maxpool2x2(x, g), r, g); }});
    }
    {
        Tensor4 x(Shape4{3, 4, 5, 5}), gamma(Shape4{1, 4, 1, 1}), beta(Shape4{1, 4, 1, 1});
        Tensor4 r(Shape4{3, 4, 5, 5});
        fill_random(x, rng, 2.0, 0.5);
        fill_random(gamma, rng, 0.2, 1.0);
        fill_random(beta, rng, 0.2);
        fill_random(r, rng);
        checks.push_back({"batchnorm", kOpTol, {x, gamma, beta}, [=](Graph* g) {
                              Tensor4 rm(Shape4{1, 4, 1, 1});
                              Tensor4 rv = Tensor4::full(Shape4{1, 4, 1, 1}, real(1));
                              Tensor4 y = batchnorm(x, gamma, beta, rm, rv, /*training=*/true,
                                                    real(0.1), real(1e-5), g);
                              return project(y, r, g);
                          }});
    }
    {
        // values pushed away from zero where relu is not differentiable
        Tensor4 x(Shape4{2, 3, 6, 6});
        Tensor4 r(Shape4{2, 3, 6, 6});
        fill_random(r, rng);
        for (real& v : x.values()) {
            double d = rng.normal();
            if (std::abs(d) < 0.1) d = d < 0 ? d - 0.1 : d + 0.1;
            v = static_cast<real>(d);
        }
        checks.push_back(
            {"relu", kOpTol, {x}, [=](Graph* g) { return project(relu(x, g), r, g); }});
    }
    {
        Tensor4 a(Shape4{2, 2, 5, 5}), b(Shape4{2, 3, 5, 5});
        Tensor4 r(Shape4{2, 5, 5, 5});
        fill_random(a, rng);
        fill_random(b, rng);
        fill_random(r, rng);
        checks.push_back({"concat", kOpTol, {a, b},
                          [=](Graph* g) { return project(concat_channels(a, b, g), r, g); }});
    }
    {
        Tensor4 logits(Shape4{2, 3, 4, 4});
        fill_random(logits, rng, 1.5);
        LabelBatch target(2, 4, 4);
        for (std::uint8_t& t : target.v) t = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
        const ClassWeights weights{};
        checks.push_back({"softmax_wce", kOpTol, {logits}, [=](Graph* g) {
                              return weighted_cross_entropy(logits, target, weights, g);
                          }});
    }
    {
        // full tiny network through the loss; parameter coordinates sampled
        PolyUNetConfig cfg;
        cfg.context_radius = 1;
        cfg.widths = {4, 6, 8, 10, 12};
        cfg.zoom_size = 16;
        auto model = std::make_shared<PolyUNet>(cfg, rng.next_u64());
        Tensor4 x(Shape4{2, 3, 16, 16});
        fill_random(x, rng);
        LabelBatch target(2, 16, 16);
        for (std::uint8_t& t : target.v) t = static_cast<std::uint8_t>(rng.uniform_int(0, 2));
        const ClassWeights weights{};

        Check check;
        check.name = "polyunet_tiny";
        check.tolerance = kNetTol;
        check.samples_per_tensor = 6;
        check.inputs.push_back(x);
        for (const auto& e : model->params().entries())
            if (e.trainable) check.inputs.push_back(e.tensor);
        check.forward = [model, x, target, weights](Graph* g) {
            return weighted_cross_entropy(model->forward(x, g, /*training=*/true), target,
                                          weights, g);
        };
        checks.push_back(std::move(check));
    }

    std::vector<GradCheckResult> results;
    for (const Check& check : checks) {
        if (!filter.empty() && check.name.find(filter) == std::string::npos) continue;
        results.push_back(run_check(check, rng));
    }
    return results;
}

}  // namespace polyseg
