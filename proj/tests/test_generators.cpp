#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mffm/dataset.hpp"

using namespace mffm;

TEST_CASE("GRF with zero variance is the zero field") {
    GrfSpec spec{32, 3.2, 0.0, 42};
    Field g = sample_grf_2d(spec);
    for (double v : g.values) REQUIRE(v == 0.0);
}

TEST_CASE("GRF Monte-Carlo mean and variance") {
    // 512 realizations at 32^2: per-pixel mean within 4 standard errors of
    // zero; pooled marginal variance within 10% of the spec value.
    const int n = 32, reps = 512;
    const double variance = 0.8;
    GrfSpec spec{n, 3.2, variance, 0};
    std::vector<double> mean(n * n, 0.0), var(n * n, 0.0);
    for (int r = 0; r < reps; ++r) {
        spec.seed = derive_seed(1234, "grf.mc", r);
        Field g = sample_grf_2d(spec);
        for (int i = 0; i < n * n; ++i) {
            mean[i] += g.values[i];
            var[i] += g.values[i] * g.values[i];
        }
    }
    const double se = std::sqrt(variance / reps);  // per-pixel standard error
    double pooled_var = 0.0;
    for (int i = 0; i < n * n; ++i) {
        mean[i] /= reps;
        REQUIRE(std::abs(mean[i]) < 4.0 * se);
        pooled_var += var[i] / reps - mean[i] * mean[i];
    }
    pooled_var /= n * n;
    REQUIRE(pooled_var == Catch::Approx(variance).epsilon(0.10));
}

TEST_CASE("GRF is deterministic given its seed") {
    GrfSpec spec{16, 2.0, 1.0, 777};
    Field a = sample_grf_2d(spec), b = sample_grf_2d(spec);
    REQUIRE(a.values == b.values);
}

TEST_CASE("GRF non-power-of-two resolution works via the dense DFT path") {
    GrfSpec spec{24, 2.0, 1.0, 5};
    Field g = sample_grf_2d(spec);
    REQUIRE(g.all_finite());
    REQUIRE(g.height == 24);
}

TEST_CASE("Darcy manufactured solution oracle") {
    // a == 1, u* = sin(pi x) sin(pi y), f = 2 pi^2 u*.
    auto run = [](int n) {
        Field a = Field::constant(1, n, n, 1.0);
        Field f(1, n, n);
        const double h = 1.0 / (n - 1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                f.at(0, i, j) = 2.0 * M_PI * M_PI * std::sin(M_PI * i * h) * std::sin(M_PI * j * h);
        Field u = solve_darcy_fd(a, f);
        double max_err = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                max_err = std::max(max_err,
                                   std::abs(u.at(0, i, j) - std::sin(M_PI * i * h) * std::sin(M_PI * j * h)));
        return max_err;
    };
    const double e32 = run(32), e64 = run(64);
    REQUIRE(e64 < 1e-3);
    REQUIRE(e64 / e32 < 0.5);  // grid convergence when resolution doubles
}

TEST_CASE("Darcy zero forcing gives the zero solution") {
    Field a = Field::constant(1, 16, 16, 2.0);
    Field u = solve_darcy_fd(a, 0.0);
    for (double v : u.values) REQUIRE(v == 0.0);
}

TEST_CASE("Darcy coefficient scaling inverts the solution scale") {
    GrfSpec spec{16, 1.6, 0.5, 99};
    Field g = sample_grf_2d(spec);
    Field a = g;
    for (double& v : a.values) v = std::exp(v);
    Field u1 = solve_darcy_fd(a, 1.0, 1e-12);
    const double alpha = 3.0;
    Field a_scaled = a;
    for (double& v : a_scaled.values) v *= alpha;
    Field u2 = solve_darcy_fd(a_scaled, 1.0, 1e-12);
    for (size_t i = 0; i < u1.values.size(); ++i)
        REQUIRE(u2.values[i] == Catch::Approx(u1.values[i] / alpha).margin(1e-9));
}

TEST_CASE("Darcy discrete maximum principle") {
    GrfSpec spec{24, 2.4, 1.0, 3};
    Field g = sample_grf_2d(spec);
    Field a = g;
    for (double& v : a.values) v = std::exp(v);
    Field u = solve_darcy_fd(a, 1.0);
    for (double v : u.values) REQUIRE(v >= -1e-12);
}

TEST_CASE("Darcy rejects non-positive coefficients") {
    Field a = Field::constant(1, 8, 8, 1.0);
    a.values[20] = 0.0;
    REQUIRE_THROWS_AS(solve_darcy_fd(a, 1.0), config_error);
}

TEST_CASE("Burgers trivial initial conditions") {
    std::vector<double> zero(32, 0.0);
    Field z = solve_burgers(zero, 0.01, 1.0);
    for (double v : z.values) REQUIRE(v == 0.0);

    std::vector<double> constant(32, 1.3);
    Field c = solve_burgers(constant, 0.01, 1.0);
    for (double v : c.values) REQUIRE(v == Catch::Approx(1.3).margin(1e-10));
}

TEST_CASE("Burgers conserves the spatial mean and decays energy") {
    const int s = 64;
    GrfSpec spec{s, 6.4, 1.0, 11};
    std::vector<double> ic = sample_grf_1d(spec);
    Field st = solve_burgers(ic, 0.01, 1.0);

    double mean0 = 0.0;
    for (int i = 0; i < s; ++i) mean0 += ic[i];
    mean0 /= s;

    double prev_norm = std::numeric_limits<double>::infinity();
    for (int snap = 0; snap < s; ++snap) {
        double mean = 0.0, norm = 0.0;
        for (int i = 0; i < s; ++i) {
            const double v = st.at(0, snap, i);
            mean += v;
            norm += v * v;
        }
        mean /= s;
        norm = std::sqrt(norm);
        REQUIRE(std::abs(mean - mean0) < 1e-8);
        REQUIRE(norm <= prev_norm + 1e-8);
        prev_norm = norm;
    }
}

TEST_CASE("Burgers row 0 is the initial condition") {
    std::vector<double> ic(16);
    for (int i = 0; i < 16; ++i) ic[i] = std::sin(2.0 * M_PI * i / 16.0);
    Field st = solve_burgers(ic, 0.02, 0.5);
    for (int i = 0; i < 16; ++i) REQUIRE(st.at(0, 0, i) == ic[i]);
}

TEST_CASE("Darcy dataset split, positivity, determinism") {
    GridHierarchy h({8, 16});
    GrfSpec grf{16, 1.6, 0.5, 0};
    DarcyDataset a = generate_darcy_dataset(6, h, grf, 2024);
    REQUIRE(a.split.train.size() == 4);
    REQUIRE(a.split.val.size() == 1);
    REQUIRE(a.split.test.size() == 1);
    for (const auto& s : a.samples)
        for (const auto& coeff : s.coefficient)
            for (double v : coeff.values) REQUIRE(v > 0.0);

    DarcyDataset b = generate_darcy_dataset(6, h, grf, 2024);
    for (size_t i = 0; i < a.samples.size(); ++i) {
        for (size_t l = 0; l < a.samples[i].solution.size(); ++l) {
            REQUIRE(a.samples[i].solution[l].values == b.samples[i].solution[l].values);
            REQUIRE(a.samples[i].coefficient[l].values == b.samples[i].coefficient[l].values);
        }
    }

    // parallel generation matches the sequential result exactly
    DarcyDataset c = generate_darcy_dataset(6, h, grf, 2024, 1.0, 2);
    for (size_t i = 0; i < a.samples.size(); ++i)
        REQUIRE(a.samples[i].solution[1].values == c.samples[i].solution[1].values);
}

TEST_CASE("Burgers dataset subsampled initial conditions and determinism") {
    GridHierarchy h({16, 32});
    GrfSpec grf{32, 3.2, 1.0, 0};
    BurgersDataset a = generate_burgers_dataset(6, h, grf, 0.02, 1.0, 31);
    BurgersDataset b = generate_burgers_dataset(6, h, grf, 0.02, 1.0, 31);
    for (size_t i = 0; i < a.samples.size(); ++i)
        for (size_t l = 0; l < 2; ++l)
            REQUIRE(a.samples[i].spacetime[l].values == b.samples[i].spacetime[l].values);

    // row 0 of each level equals the subsampled initial condition
    for (const auto& s : a.samples) {
        const Field& fine = s.spacetime[1];
        const Field& coarse = s.spacetime[0];
        for (int j = 0; j < 16; ++j) REQUIRE(coarse.at(0, 0, j) == fine.at(0, 0, 2 * j));
    }
}

TEST_CASE("Burgers multi-fidelity premise correlation") {
    GridHierarchy h({16, 32, 64});
    GrfSpec grf{64, 6.4, 1.0, 0};
    BurgersDataset ds = generate_burgers_dataset(6, h, grf, 0.01, 1.0, 7);
    for (const auto& s : ds.samples) {
        const double corr = multi_fidelity_correlation(s.spacetime.back(), s.spacetime.front());
        REQUIRE(corr > 0.9);
    }
}

TEST_CASE("Darcy multi-fidelity premise correlation") {
    GridHierarchy h({16, 32});
    GrfSpec grf{32, 3.2, 1.0, 0};
    DarcyDataset ds = generate_darcy_dataset(6, h, grf, 17);
    for (const auto& s : ds.samples)
        REQUIRE(multi_fidelity_correlation(s.solution.back(), s.solution.front()) > 0.9);
}
