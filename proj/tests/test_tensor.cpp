#include <doctest.h>

#include <cmath>

#include "dispfuse/tensor.hpp"

using namespace dispfuse;
using namespace dispfuse::ad;

namespace {

struct F64Scope {
    Dtype prev;
    F64Scope() : prev(default_dtype()) { set_default_dtype(Dtype::f64); }
    ~F64Scope() { set_default_dtype(prev); }
};

Tensor random_tensor(const std::vector<int>& shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal(0.0, scale));
    return t;
}

} // namespace

TEST_CASE("conv2d: identity kernel reproduces input") {
    F64Scope f64;
    Tensor x = Tensor::from_vector({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor k = Tensor::from_vector({1, 1, 1, 1}, {1.0});
    Tensor y = conv2d(x, k, 1, 0);
    REQUIRE(y.shape() == std::vector<int>{1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("conv2d: all-ones counting") {
    F64Scope f64;
    Tensor x = Tensor::full({1, 1, 4, 4}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor y = conv2d(x, k, 1, 0);
    REQUIRE(y.shape() == std::vector<int>{1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(y.at(i) == 9.0);
}

TEST_CASE("conv2d: strided shape and finite-difference gradient") {
    F64Scope f64;
    Rng rng(11);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng);
    Tensor y = conv2d(x, k, 2, 1);
    REQUIRE(y.shape() == std::vector<int>{2, 4, 4, 4});

    double err = grad_check([&](const Tensor& xi) { return sum_all(conv2d(xi, k, 2, 1)); }, x,
                            1e-6);
    CHECK(err <= 1e-6);
    double errk = grad_check([&](const Tensor& ki) { return sum_all(conv2d(x, ki, 2, 1)); }, k,
                             1e-6);
    CHECK(errk <= 1e-6);
}

TEST_CASE("conv2d: channel mismatch raises configuration error") {
    F64Scope f64;
    Tensor x = Tensor::zeros({1, 2, 4, 4});
    Tensor k = Tensor::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, k, 1, 0), ConfigError);
}

TEST_CASE("backward: linear and quadratic roots") {
    F64Scope f64;
    Rng rng(3);
    Tensor x = Tensor::variable(random_tensor({2, 1, 3, 4}, rng));
    backward(sum_all(x));
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad().at(i) == 1.0);

    Tensor z = Tensor::variable(Tensor::from_vector({3}, {1, 2, 3}));
    backward(sum_all(mul(z, z)));
    CHECK(z.grad().at(0) == doctest::Approx(2));
    CHECK(z.grad().at(1) == doctest::Approx(4));
    CHECK(z.grad().at(2) == doctest::Approx(6));
}

TEST_CASE("backward: non-scalar root is a contract violation") {
    F64Scope f64;
    Tensor x = Tensor::variable(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(backward(add_scalar(x, 1.0)), ContractViolation);
}

TEST_CASE("backward: mean of sigmoid matches finite differences") {
    F64Scope f64;
    Rng rng(17);
    Tensor x = random_tensor({1, 1, 4, 5}, rng);
    double err = grad_check([](const Tensor& xi) { return mean_all(sigmoid(xi)); }, x, 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check: exact on sum, detects a planted 10% fault") {
    F64Scope f64;
    Rng rng(23);
    Tensor x = random_tensor({7}, rng);
    CHECK(grad_check([](const Tensor& xi) { return sum_all(xi); }, x, 1e-6) <= 1e-10);

    // A scalar function whose recorded gradient is deliberately 10% off:
    // f(x) = 1.1 * sum(x) computed forward, but probed against sum(x) values.
    Tensor xv = Tensor::variable(x);
    Tensor y = mul_scalar(sum_all(xv), 1.1);
    Tensor analytic = grad(y, {xv})[0];
    double worst = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        double numeric = 1.0; // true df/dx of sum
        worst = std::max(worst, std::abs(analytic.at(i) - numeric) / numeric);
    }
    CHECK(worst == doctest::Approx(0.1).epsilon(1e-9));
}

TEST_CASE("elementwise and reduction ops pass randomized finite differences") {
    F64Scope f64;
    Rng rng(101);
    auto check = [&](const char* name, std::function<Tensor(const Tensor&)> f,
                     const Tensor& x, double tol = 1e-5) {
        double err = grad_check(f, x, 1e-6);
        INFO(name);
        CHECK(err <= tol);
    };

    Tensor a = random_tensor({2, 2, 3, 3}, rng);
    Tensor b = add_scalar(random_tensor({2, 2, 3, 3}, rng), 3.0); // keep away from 0
    check("add", [&](const Tensor& x) { return sum_all(mul(add(x, b), b)); }, a);
    check("sub", [&](const Tensor& x) { return sum_all(mul(sub(x, b), b)); }, a);
    check("mul", [&](const Tensor& x) { return sum_all(mul(x, b)); }, a);
    check("div", [&](const Tensor& x) { return sum_all(divide(x, b)); }, a);
    check("div denom", [&](const Tensor& x) { return sum_all(divide(b, x)); },
          add_scalar(abs_t(a), 1.0));
    check("exp", [&](const Tensor& x) { return sum_all(exp_t(x)); }, a);
    check("sigmoid", [&](const Tensor& x) { return sum_all(sigmoid(x)); }, a);
    check("sqrt", [&](const Tensor& x) { return sum_all(sqrt_t(x)); },
          add_scalar(abs_t(a), 0.5));
    check("abs", [&](const Tensor& x) { return sum_all(abs_t(x)); },
          add_scalar(abs_t(a), 0.5)); // stay off the kink
    check("relu", [&](const Tensor& x) { return sum_all(relu(x)); },
          add_scalar(abs_t(a), 0.5));
    check("square", [&](const Tensor& x) { return sum_all(square(x)); }, a);
    check("mean_all", [&](const Tensor& x) { return mean_all(mul(x, b)); }, a);
    check("sum_per_sample", [&](const Tensor& x) {
        return sum_all(mul(sum_per_sample(x), Tensor::from_vector({2}, {0.3, -1.7})));
    }, a);
    Tensor mask_3222 = random_tensor({3, 2, 2, 2}, rng);
    check("broadcast_per_sample", [&](const Tensor& x) {
        return sum_all(mul(broadcast_per_sample(x, {3, 2, 2, 2}), mask_3222));
    }, random_tensor({3}, rng));
    check("sum_per_channel", [&](const Tensor& x) {
        return sum_all(mul(sum_per_channel(x), Tensor::from_vector({2}, {1.5, -0.5})));
    }, a);
    Tensor mask_2322 = random_tensor({2, 3, 2, 2}, rng);
    check("broadcast_per_channel", [&](const Tensor& x) {
        return sum_all(mul(broadcast_per_channel(x, {2, 3, 2, 2}), mask_2322));
    }, random_tensor({3}, rng));
    check("concat+slice", [&](const Tensor& x) {
        Tensor c = concat_channels({x, b});
        return sum_all(mul(slice_channels(c, 1, 2), slice_channels(c, 2, 2)));
    }, a);
    check("conv_transpose", [&](const Tensor& x) {
        Tensor k = Tensor::from_vector({2, 1, 2, 2}, {0.5, -1, 2, 0.25, 1, 1, -1, 3});
        return sum_all(square(conv2d_transpose(x, k, 2, 0, 6, 6)));
    }, random_tensor({1, 2, 3, 3}, rng));
    check("clamp_min", [&](const Tensor& x) { return sum_all(clamp_min(x, 0.1)); },
          add_scalar(abs_t(a), 0.5));
}

TEST_CASE("gradient accumulation is additive across backward calls") {
    F64Scope f64;
    Rng rng(7);
    Tensor x = Tensor::variable(random_tensor({5}, rng));
    Tensor w = Tensor::from_vector({5}, {1, -2, 3, -4, 5});

    Tensor a = sum_all(mul(x, w));
    Tensor b = sum_all(square(x));

    backward(add(a, b));
    std::vector<double> combined = x.grad().to_vector();

    x.zero_grad();
    backward(sum_all(mul(x, w)));
    backward(sum_all(square(x)));
    std::vector<double> sequential = x.grad().to_vector();

    for (size_t i = 0; i < combined.size(); ++i)
        CHECK(combined[i] == doctest::Approx(sequential[i]).epsilon(1e-12));
}

TEST_CASE("determinism: identical bytes across repeated forward/backward") {
    for (Dtype dt : {Dtype::f32, Dtype::f64}) {
        auto run = [dt]() {
            Rng rng(42);
            Tensor x = Tensor::randn({2, 3, 16, 16}, rng, 0.0, 1.0, dt);
            Tensor k = Tensor::randn({4, 3, 3, 3}, rng, 0.0, 0.1, dt);
            Tensor xv = Tensor::variable(x);
            Tensor kv = Tensor::variable(k);
            Tensor y = mean_all(sigmoid(conv2d(relu(xv), kv, 2, 1)));
            backward(y);
            auto bytes = y.raw_bytes();
            auto gx = xv.grad().raw_bytes();
            auto gk = kv.grad().raw_bytes();
            bytes.insert(bytes.end(), gx.begin(), gx.end());
            bytes.insert(bytes.end(), gk.begin(), gk.end());
            return bytes;
        };
        CHECK(run() == run());
    }
}

TEST_CASE("second-order: differentiating through a recorded backward") {
    F64Scope f64;
    Rng rng(5);
    // p = (d sum(w * x^2) / dx) summed = sum(2*w*x); dp/dw = 2*x.
    Tensor x = random_tensor({4}, rng);
    Tensor w = Tensor::variable(random_tensor({4}, rng));
    Tensor xv = Tensor::variable(x);
    Tensor y = sum_all(mul(w, square(xv)));
    Tensor gx = grad(y, {xv}, /*create_graph=*/true)[0];
    Tensor p = sum_all(gx);
    Tensor gw = grad(p, {w})[0];
    for (int i = 0; i < 4; ++i) CHECK(gw.at(i) == doctest::Approx(2.0 * x.at(i)).epsilon(1e-10));
}

TEST_CASE("second-order: conv chain gradient-of-gradient matches finite differences") {
    F64Scope f64;
    Rng rng(9);
    Tensor x = random_tensor({1, 1, 6, 6}, rng);
    Tensor k0 = random_tensor({2, 1, 3, 3}, rng, 0.5);

    // f(k) = || d mean(sigmoid(conv(x, k))) / dx ||^2 — a scalar of the
    // double-backward kind used by the gradient penalty.
    auto f = [&](const Tensor& k) {
        Tensor xv = Tensor::variable(x);
        Tensor y = mean_all(sigmoid(conv2d(xv, k, 1, 1)));
        Tensor g = grad(y, {xv}, /*create_graph=*/true)[0];
        return sum_all(square(g));
    };
    double err = grad_check(f, k0, 1e-6);
    CHECK(err <= 1e-6);
}
