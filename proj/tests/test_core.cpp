#include <catch2/catch_amalgamated.hpp>

#include "mffm/core.hpp"
#include "mffm/rng.hpp"

using namespace mffm;

namespace {

Field random_field(int c, int n, uint64_t seed) {
    Field f(c, n, n);
    RngStream rng(seed);
    for (double& v : f.values) v = rng.normal();
    return f;
}

}  // namespace

TEST_CASE("Field basics") {
    Field f(2, 4, 4);
    REQUIRE(f.size() == 32);
    f.at(1, 2, 3) = 7.5;
    REQUIRE(f.at(1, 2, 3) == 7.5);
    REQUIRE(f.all_finite());
    f.values[0] = std::nan("");
    REQUIRE_FALSE(f.all_finite());
    REQUIRE_THROWS_AS(Field(0, 4, 4), dimension_error);
}

TEST_CASE("GridHierarchy invariants") {
    GridHierarchy h({16, 32, 64});
    REQUIRE(h.levels() == 2);
    REQUIRE(h.coarsest() == 16);
    REQUIRE(h.finest() == 64);
    REQUIRE(h.strictly_doubling());
    REQUIRE_THROWS_AS(GridHierarchy({16}), dimension_error);
    REQUIRE_THROWS_AS(GridHierarchy({16, 48}), dimension_error);
    REQUIRE_THROWS_AS(GridHierarchy({32, 16}), dimension_error);
    // single-shot model hierarchies jump by a power of two
    GridHierarchy direct({16, 64});
    REQUIRE_FALSE(direct.strictly_doubling());
}

TEST_CASE("prolong_bilinear reproduces constants") {
    Field c = Field::constant(1, 16, 16, 3.25);
    Field p = prolong_bilinear(c, 32);
    REQUIRE(p.height == 32);
    for (double v : p.values) REQUIRE(v == Catch::Approx(3.25).margin(1e-14));
}

TEST_CASE("prolong_bilinear hand-checked 2x2 -> 3x3") {
    Field f(1, 2, 2);
    f.values = {0, 1, 2, 3};
    Field p = prolong_bilinear(f, 3);
    const std::vector<double> expected = {0, 0.5, 1, 1, 1.5, 2, 2, 2.5, 3};
    for (size_t i = 0; i < expected.size(); ++i) REQUIRE(p.values[i] == Catch::Approx(expected[i]).margin(1e-15));
}

TEST_CASE("prolong_bilinear identity when target equals source") {
    Field f = random_field(2, 8, 11);
    Field p = prolong_bilinear(f, 8);
    REQUIRE(p.values == f.values);
}

TEST_CASE("prolong_bilinear rejects downsampling") {
    Field f = random_field(1, 8, 1);
    REQUIRE_THROWS_AS(prolong_bilinear(f, 4), dimension_error);
}

TEST_CASE("prolong_bilinear is linear") {
    Field f = random_field(1, 8, 2), g = random_field(1, 8, 3);
    const double a = 1.7, b = -0.3;
    Field combo(1, 8, 8);
    for (size_t i = 0; i < combo.values.size(); ++i) combo.values[i] = a * f.values[i] + b * g.values[i];
    Field lhs = prolong_bilinear(combo, 32);
    Field pf = prolong_bilinear(f, 32), pg = prolong_bilinear(g, 32);
    for (size_t i = 0; i < lhs.values.size(); ++i)
        REQUIRE(lhs.values[i] == Catch::Approx(a * pf.values[i] + b * pg.values[i]).margin(1e-12));
}

TEST_CASE("prolong then restrict reproduces a constant exactly") {
    Field c = Field::constant(3, 16, 16, -2.5);
    Field back = restrict_average(prolong_bilinear(c, 64), 16);
    for (double v : back.values) REQUIRE(v == Catch::Approx(-2.5).margin(1e-13));
}

TEST_CASE("prolong_bilinear_adjoint is the transpose") {
    // <P f, g> == <f, P^T g> for random f, g
    Field f = random_field(1, 8, 5);
    Field g = random_field(1, 32, 6);
    Field pf = prolong_bilinear(f, 32);
    Field ptg = prolong_bilinear_adjoint(g, 8);
    double lhs = 0.0, rhs = 0.0;
    for (size_t i = 0; i < pf.values.size(); ++i) lhs += pf.values[i] * g.values[i];
    for (size_t i = 0; i < f.values.size(); ++i) rhs += f.values[i] * ptg.values[i];
    REQUIRE(lhs == Catch::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("restrict_average examples") {
    Field c = Field::constant(1, 64, 64, 5.0);
    Field r = restrict_average(c, 16);
    for (double v : r.values) REQUIRE(v == 5.0);

    Field f(1, 2, 2);
    f.values = {0, 1, 2, 3};
    REQUIRE(restrict_average(f, 1).values[0] == Catch::Approx(1.5));

    Field checker(1, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) checker.at(0, y, x) = ((x + y) % 2 == 0) ? 1.0 : -1.0;
    Field z = restrict_average(checker, 2);
    for (double v : z.values) REQUIRE(v == 0.0);

    REQUIRE_THROWS_AS(restrict_average(random_field(1, 9, 0), 4), dimension_error);
}

TEST_CASE("restrict_average preserves channel means") {
    Field f = random_field(2, 32, 77);
    Field r = restrict_average(f, 8);
    for (int c = 0; c < 2; ++c) {
        double mf = 0.0, mr = 0.0;
        for (size_t i = 0; i < f.plane(); ++i) mf += f.channel(c)[i];
        for (size_t i = 0; i < r.plane(); ++i) mr += r.channel(c)[i];
        REQUIRE(mf / f.plane() == Catch::Approx(mr / r.plane()).margin(1e-12));
    }
}

TEST_CASE("nrmse examples and invariances") {
    Field t = random_field(2, 8, 9);
    REQUIRE(nrmse(t, t) == 0.0);

    Field zero(2, 8, 8);
    REQUIRE(nrmse(zero, t) == Catch::Approx(1.0));

    Field twice = t;
    for (double& v : twice.values) v *= 2.0;
    REQUIRE(nrmse(twice, t) == Catch::Approx(1.0));

    // scale invariance in the pair
    Field p = random_field(2, 8, 10);
    Field pa = p, ta = t;
    for (double& v : pa.values) v *= -3.7;
    for (double& v : ta.values) v *= -3.7;
    REQUIRE(nrmse(pa, ta) == Catch::Approx(nrmse(p, t)).epsilon(1e-12));

    REQUIRE_THROWS_AS(nrmse(zero, Field(2, 8, 8)), degenerate_reference_error);
    REQUIRE_THROWS_AS(nrmse(random_field(1, 8, 1), t), dimension_error);
}

TEST_CASE("relative_l2_loss examples") {
    Field t = random_field(1, 8, 20);
    REQUIRE(relative_l2_loss(t, t, 1e-8) == 0.0);

    const double eps = 0.5;
    Field zero_truth(1, 8, 8);
    Field pred(1, 8, 8);
    pred.values[0] = eps;  // ||pred|| == eps
    REQUIRE(relative_l2_loss(pred, zero_truth, eps) == Catch::Approx(1.0));

    Field zero_pred(1, 8, 8);
    const double tn = l2_norm(t);
    REQUIRE(relative_l2_loss(zero_pred, t, eps) == Catch::Approx(tn / (tn + eps)));

    REQUIRE_THROWS_AS(relative_l2_loss(t, t, 0.0), config_error);
}
