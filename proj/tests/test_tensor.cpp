#include <doctest.h>

#include <cmath>
#include <vector>

#include "hfgd/rng.hpp"
#include "hfgd/tensor.hpp"

using namespace hfgd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                     double scale = 1.0, double offset = 0.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal() * scale + offset;
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> naive_mm(const std::vector<double>& a, const std::vector<double>& b,
                             std::int64_t M, std::int64_t K, std::int64_t N) {
    std::vector<double> out(static_cast<size_t>(M * N), 0.0);
    for (std::int64_t m = 0; m < M; ++m)
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t k = 0; k < K; ++k)
                out[static_cast<size_t>(m * N + n)] +=
                    a[static_cast<size_t>(m * K + k)] * b[static_cast<size_t>(k * N + n)];
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("construction and accessors") {
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.ndim() == 2);
    CHECK(t.at({1, 2}) == 6.0);
    CHECK_THROWS(t.at({2, 0}));
    CHECK_THROWS(t.value());
    CHECK(Tensor::scalar(3.5).value() == 3.5);
    CHECK_THROWS(Tensor::from_data({2, 2}, {1.0}));
    CHECK_THROWS(Tensor::zeros({0, 3}));
}

TEST_CASE("elementwise forward values") {
    Tensor a = Tensor::from_data({3}, {1, -2, 3});
    Tensor b = Tensor::from_data({3}, {4, 5, -6});
    CHECK(add(a, b).data() == std::vector<double>{5, 3, -3});
    CHECK(sub(a, b).data() == std::vector<double>{-3, -7, 9});
    CHECK(mul(a, b).data() == std::vector<double>{4, -10, -18});
    CHECK(divide(a, b).at({0}) == doctest::Approx(0.25));
    CHECK(relu(a).data() == std::vector<double>{1, 0, 3});
    CHECK(scale(a, 2.0).data() == std::vector<double>{2, -4, 6});
    CHECK(add_scalar(a, 1.0).data() == std::vector<double>{2, -1, 4});
    CHECK(sum_all(a).value() == 2.0);
    CHECK(mean_all(b).value() == doctest::Approx(1.0));
}

TEST_CASE("general broadcasting is rejected") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3});
    CHECK_THROWS(add(a, b));
    CHECK_THROWS(mul(a, b));
    // per-channel form is the supported spelling
    CHECK_NOTHROW(add_channel(a, b, 1));
    CHECK_THROWS(add_channel(a, b, 0));  // size mismatch on that axis
}

TEST_CASE("per-channel broadcast values") {
    Tensor x = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor v = Tensor::from_data({2}, {10, 20});
    Tensor y = add_channel(x, v, 1);
    CHECK(y.data() == std::vector<double>{11, 12, 23, 24, 15, 16, 27, 28});
    Tensor z = mul_channel(x, v, 1);
    CHECK(z.data() == std::vector<double>{10, 20, 60, 80, 50, 60, 140, 160});
}

TEST_CASE("softmax closed-form values") {
    // symmetric input
    Tensor s0 = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
    for (double v : s0.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
    // shift invariance keeps huge inputs finite
    Tensor s1 = softmax(Tensor::from_data({2}, {1000, 1000}), 0);
    CHECK(s1.at({0}) == doctest::Approx(0.5));
    // [0, ln 3] -> [0.25, 0.75]: exp(ln3)/(1+exp(ln3)) = 3/4
    Tensor s2 = softmax(Tensor::from_data({2}, {0.0, std::log(3.0)}), 0);
    CHECK(s2.at({0}) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s2.at({1}) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax along inner axis of a matrix sums to one") {
    Rng rng(7);
    Tensor x = random_tensor({4, 5}, rng);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += y.at({r, c});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("cross entropy closed forms") {
    // confident-correct limit
    Tensor big = Tensor::from_data({1, 3}, {1e6, 0, 0});
    CHECK(cross_entropy(big, {0}).value() == doctest::Approx(0.0).epsilon(1e-9));
    // uniform logits, C=4 -> ln 4
    Tensor uni = Tensor::zeros({2, 4});
    CHECK(cross_entropy(uni, {1, 3}).value() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy ignore_index drops rows exactly") {
    Rng rng(11);
    Tensor logits = random_tensor({3, 5}, rng);
    const double with_ignored = cross_entropy(logits, {1, 255, 4}, 255).value();
    // recompute without the ignored row
    std::vector<double> kept;
    const auto& lv = logits.data();
    kept.insert(kept.end(), lv.begin(), lv.begin() + 5);
    kept.insert(kept.end(), lv.begin() + 10, lv.begin() + 15);
    const double without = cross_entropy(Tensor::from_data({2, 5}, kept), {1, 4}).value();
    CHECK(with_ignored == doctest::Approx(without).epsilon(1e-14));
}

TEST_CASE("cross entropy error contract") {
    Tensor logits = Tensor::zeros({2, 3});
    CHECK_THROWS(cross_entropy(logits, {255, 255}, 255));  // everything ignored
    CHECK_THROWS(cross_entropy(logits, {0, 3}));           // label out of range
    CHECK_THROWS(cross_entropy(logits, {0}));              // wrong label count
    CHECK_THROWS(cross_entropy(Tensor::zeros({2, 3, 4}), {0, 1}));
}

TEST_CASE("backward on linear and quadratic forms") {
    Tensor w = Tensor::from_data({3}, {5, -1, 2}, true);
    GradientMap g = backward(sum_all(w), {{"w", w}});
    CHECK(g.at("w").data() == std::vector<double>{1, 1, 1});

    Tensor w2 = Tensor::from_data({2}, {1, 2}, true);
    GradientMap g2 = backward(sum_all(mul(w2, w2)), {{"w", w2}});
    CHECK(g2.at("w").data() == std::vector<double>{2, 4});
}

TEST_CASE("relu subgradient at zero is zero") {
    Tensor w = Tensor::from_data({3}, {0.0, -1.0, 2.0}, true);
    GradientMap g = backward(sum_all(relu(w)), {{"w", w}});
    CHECK(g.at("w").data() == std::vector<double>{0, 0, 1});
}

TEST_CASE("backward error contract") {
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    Tensor y = mul(w, w);
    CHECK_THROWS(backward(y, {{"w", w}}));  // non-scalar loss
    Tensor loss = sum_all(y);
    Tensor not_leaf = add_scalar(w, 1.0);
    CHECK_THROWS(backward(loss, {{"y", not_leaf}}));  // parameter with parents
    Tensor plain = Tensor::zeros({2});
    CHECK_THROWS(backward(loss, {{"p", plain}}));  // requires_grad unset
    CHECK_THROWS(backward(loss, {{"a", w}, {"a", w}}));  // duplicate name
}

TEST_CASE("graph is freed after backward unless retained") {
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    Tensor loss = sum_all(mul(w, w));
    backward(loss, {{"w", w}});
    CHECK_THROWS(backward(loss, {{"w", w}}));

    Tensor loss2 = sum_all(mul(w, w));
    GradientMap a = backward(loss2, {{"w", w}}, /*retain_graph=*/true);
    GradientMap b = backward(loss2, {{"w", w}}, /*retain_graph=*/true);
    CHECK(a.at("w").data() == b.at("w").data());
}

TEST_CASE("gradient accumulation equals duplicated-parameter rewrite") {
    Rng rng(3);
    Tensor w = random_tensor({4}, rng, true);
    Tensor u = random_tensor({4}, rng);
    Tensor v = random_tensor({4}, rng);
    // w appears on two paths
    Tensor loss = add(sum_all(mul(w, u)), sum_all(mul(relu(w), v)));
    GradientMap g = backward(loss, {{"w", w}});

    // rewrite with two distinct leaves carrying the same value
    Tensor w1 = Tensor::from_data({4}, w.data(), true);
    Tensor w2 = Tensor::from_data({4}, w.data(), true);
    Tensor loss2 = add(sum_all(mul(w1, u)), sum_all(mul(relu(w2), v)));
    GradientMap g2 = backward(loss2, {{"w1", w1}, {"w2", w2}});
    for (int i = 0; i < 4; ++i) {
        const size_t si = static_cast<size_t>(i);
        CHECK(g.at("w").data()[si] ==
              doctest::Approx(g2.at("w1").data()[si] + g2.at("w2").data()[si])
                  .epsilon(1e-15));
    }
}

TEST_CASE("backward is deterministic") {
    auto run = [] {
        Rng rng(19);
        Tensor x = random_tensor({3, 4}, rng, true);
        Tensor w = random_tensor({4, 2}, rng, true);
        Tensor loss = mean_all(softmax(matmul(relu(x), w), 1));
        return backward(loss, {{"x", x}, {"w", w}});
    };
    GradientMap a = run();
    GradientMap b = run();
    CHECK(a.at("x").data() == b.at("x").data());  // bit-identical
    CHECK(a.at("w").data() == b.at("w").data());
}

TEST_CASE("matmul and bmm match the naive oracle") {
    Rng rng(23);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    Tensor c = matmul(a, b);
    auto ref = naive_mm(a.data(), b.data(), 3, 4, 5);
    for (size_t i = 0; i < ref.size(); ++i) {
        CHECK(std::fabs(c.data()[i] - ref[i]) <= 1e-12);
    }

    Tensor ba = random_tensor({2, 3, 4}, rng);
    Tensor bb = random_tensor({2, 4, 5}, rng);
    Tensor bc = bmm(ba, bb);
    for (int i = 0; i < 2; ++i) {
        std::vector<double> sa(ba.data().begin() + i * 12, ba.data().begin() + (i + 1) * 12);
        std::vector<double> sb(bb.data().begin() + i * 20, bb.data().begin() + (i + 1) * 20);
        auto r = naive_mm(sa, sb, 3, 4, 5);
        for (size_t j = 0; j < r.size(); ++j) {
            CHECK(std::fabs(bc.data()[static_cast<size_t>(i * 15) + j] - r[j]) <= 1e-12);
        }
    }
    CHECK_THROWS(matmul(a, a));
    CHECK_THROWS(bmm(ba, random_tensor({3, 4, 5}, rng)));
}

TEST_CASE("permute and reshape") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t = permute(x, {1, 0});
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.data() == std::vector<double>{1, 4, 2, 5, 3, 6});
    Tensor back = permute(t, {1, 0});
    CHECK(back.data() == x.data());

    Tensor r = reshape(x, {3, 2});
    CHECK(r.data() == x.data());
    CHECK_THROWS(reshape(x, {4, 2}));
    CHECK_THROWS(permute(x, {0, 0}));

    // rank-4 permute round-trip
    Rng rng(5);
    Tensor y = random_tensor({2, 3, 4, 5}, rng);
    Tensor p = permute(y, {2, 0, 3, 1});
    CHECK(p.shape() == Shape{4, 2, 5, 3});
    CHECK(p.at({1, 0, 2, 1}) == y.at({0, 1, 1, 2}));
}

TEST_CASE("stop_gradient semantics") {
    Rng rng(31);
    Tensor w = random_tensor({5}, rng, true);
    Tensor v = random_tensor({5}, rng, true);

    // forward bit-identical
    Tensor sg = stop_gradient(w);
    CHECK(sg.data() == w.data());

    // loss = sum(sg(w) * v): grad(w) exactly zero, grad(v) == w
    GradientMap g = backward(sum_all(mul(stop_gradient(w), v)), {{"w", w}, {"v", v}});
    for (double x : g.at("w").data()) CHECK(x == 0.0);
    CHECK(g.at("v").data() == w.data());

    // loss = sum(w + sg(w)): only the unbarriered path contributes
    GradientMap g2 = backward(sum_all(add(w, stop_gradient(w))), {{"w", w}});
    CHECK(g2.at("w").data() == std::vector<double>(5, 1.0));
}

TEST_CASE("unreachable parameters get exact zero entries") {
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    Tensor unused = Tensor::from_data({3}, {7, 8, 9}, true);
    GradientMap g = backward(sum_all(w), {{"w", w}, {"unused", unused}});
    CHECK(g.size() == 2);
    CHECK(g.at("unused").shape() == Shape{3});
    for (double x : g.at("unused").data()) CHECK(x == 0.0);
}

TEST_CASE("reachability analysis separates clean and shadowed") {
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    Tensor v = Tensor::from_data({2}, {3, 4}, true);
    Tensor loss = sum_all(mul(stop_gradient(w), v));
    Reachability r = analyze_reachability(loss);
    CHECK(r.reaches(v));
    CHECK_FALSE(r.reaches(w));
    CHECK(r.blocked(w));

    // both paths: clean wins
    Tensor loss2 = sum_all(add(w, stop_gradient(w)));
    Reachability r2 = analyze_reachability(loss2);
    CHECK(r2.reaches(w));
    CHECK_FALSE(r2.blocked(w));
}

TEST_CASE("finite differences: polynomial is near-exact") {
    Rng rng(41);
    Tensor x = random_tensor({6}, rng, true);
    auto f = [&] { return sum_all(mul(x, x)); };
    GradCheckReport rep = finite_diff_check(f, {{"x", x}});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences: cross entropy and composite chain") {
    Rng rng(43);
    Tensor logits = random_tensor({4, 3}, rng, true);
    auto f1 = [&] { return cross_entropy(logits, {0, 2, 1, 255}, 255); };
    GradCheckReport r1 = finite_diff_check(f1, {{"logits", logits}});
    CHECK(r1.pass);
    CHECK(r1.max_rel_err < 1e-4);

    // composite: matmul -> per-channel affine -> relu -> softmax -> mean
    Tensor x = random_tensor({3, 4}, rng, true, 1.0, 0.3);
    Tensor w = random_tensor({4, 5}, rng, true, 0.5);
    Tensor b = random_tensor({5}, rng, true, 0.2);
    auto f2 = [&] {
        Tensor h = add_channel(matmul(x, w), b, 1);
        Tensor s = softmax(relu(h), 1);
        return mean_all(mul(s, s));
    };
    GradCheckReport r2 = finite_diff_check(f2, {{"x", x}, {"w", w}, {"b", b}});
    CHECK(r2.pass);
    CHECK(r2.max_rel_err < 1e-4);
}

TEST_CASE("finite differences: remaining op coverage") {
    Rng rng(47);
    Tensor a = random_tensor({2, 3}, rng, true, 1.0, 2.0);  // positive for sqrt/div
    Tensor b = random_tensor({2, 3}, rng, true, 0.3, 3.0);
    auto f = [&] {
        Tensor q = divide(sqrt_elem(a), b);
        Tensor p = permute(q, {1, 0});
        Tensor r = reshape(p, {6});
        return add(sum_all(mul(q, q)), mean_all(r));
    };
    GradCheckReport rep = finite_diff_check(f, {{"a", a}, {"b", b}});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-4);

    Tensor m1 = random_tensor({3, 4}, rng, true);
    Tensor m2 = random_tensor({4, 2}, rng, true);
    auto fm = [&] { return mean_all(matmul(m1, m2)); };
    CHECK(finite_diff_check(fm, {{"m1", m1}, {"m2", m2}}).pass);

    Tensor t1 = random_tensor({2, 3, 4}, rng, true);
    Tensor t2 = random_tensor({2, 4, 3}, rng, true);
    auto fb = [&] { return mean_all(bmm(t1, t2)); };
    CHECK(finite_diff_check(fb, {{"t1", t1}, {"t2", t2}}).pass);

    Tensor s = random_tensor({3, 5}, rng, true);
    auto fs = [&] { return mean_all(mul(softmax(s, 1), softmax(s, 0))); };
    CHECK(finite_diff_check(fs, {{"s", s}}).pass);

    Tensor c = random_tensor({2, 3, 2}, rng, true);
    Tensor ch = random_tensor({3}, rng, true);
    auto fc = [&] { return mean_all(mul_channel(add_channel(c, ch, 1), ch, 1)); };
    CHECK(finite_diff_check(fc, {{"c", c}, {"ch", ch}}).pass);
}

TEST_CASE("finite differences flag barrier-excluded parameters") {
    Rng rng(53);
    Tensor w = random_tensor({3}, rng, true);
    Tensor v = random_tensor({3}, rng, true);
    auto f = [&] { return sum_all(mul(stop_gradient(w), v)); };
    GradCheckReport rep = finite_diff_check(f, {{"w", w}, {"v", v}});
    CHECK(rep.pass);
    REQUIRE(rep.entries.size() == 2);
    CHECK(rep.entries[0].name == "w");
    CHECK(rep.entries[0].barrier_excluded);
    CHECK(rep.entries[0].checked == 0);
    CHECK_FALSE(rep.entries[1].barrier_excluded);
    CHECK(rep.entries[1].checked == 3);
}

TEST_CASE("no-grad guard suppresses graph recording") {
    Tensor w = Tensor::from_data({2}, {1, 2}, true);
    Tensor y;
    {
        NoGradGuard ng;
        y = sum_all(mul(w, w));
    }
    CHECK(y.is_leaf());
    CHECK_FALSE(y.participates());
}

TEST_CASE("rng streams are deterministic and distinct") {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 16; ++i) {
        const auto x = a.next_u64();
        CHECK(x == b.next_u64());
    }
    CHECK(a.next_u64() != c.next_u64());
    Rng u(9);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
    // normals: sane first two moments over a modest sample
    Rng n(10);
    double mean = 0, var = 0;
    const int N = 20000;
    std::vector<double> vals(N);
    for (auto& v : vals) v = n.normal();
    for (double v : vals) mean += v;
    mean /= N;
    for (double v : vals) var += (v - mean) * (v - mean);
    var /= N;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_SUITE_END();
