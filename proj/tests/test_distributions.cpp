#include "bst/distributions.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bst;

namespace {

// Oracle: K_nu(x) = \int_0^inf exp(-x cosh t) cosh(nu t) dt by adaptive
// quadrature, independent of the series/continued-fraction implementation.
double bessel_k_quadrature(double nu, double x) {
    auto f = [&](double t) { return std::exp(-x * std::cosh(t)) * std::cosh(nu * t); };
    // exp(-x cosh t) decays doubly exponentially; [0, 30] is far past underflow
    // for any x >= 0.05 used here.
    return adaptive_quad(f, 0.0, 30.0, 1e-13);
}

double log_k_half(double x) {  // ln K_{1/2}(x), closed form
    return 0.5 * std::log(M_PI / (2.0 * x)) - x;
}

// Golden-section maximizer of a unimodal function on [lo, hi].
template <typename F>
double golden_section_max(const F& f, double lo, double hi) {
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double a = lo, b = hi;
    double c = b - phi * (b - a), d = a + phi * (b - a);
    for (int it = 0; it < 200; ++it) {
        if (f(c) > f(d))
            b = d;
        else
            a = c;
        c = b - phi * (b - a);
        d = a + phi * (b - a);
        if (b - a < 1e-12 * (1.0 + std::abs(a))) break;
    }
    return 0.5 * (a + b);
}

double gig_log_pdf_unnorm(double x, double h, double a, double b) {
    return (h - 1.0) * std::log(x) - 0.5 * (a * x + b / x);
}

}  // namespace

TEST(LogBesselK, HalfIntegerClosedForm) {
    EXPECT_NEAR(log_bessel_k(0.5, 2.0), std::log(std::sqrt(M_PI / 4.0) * std::exp(-2.0)), 1e-12);
    for (double x : {0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0}) {
        const double lk12 = log_k_half(x);
        const double lk32 = lk12 + std::log1p(1.0 / x);
        const double lk52 = lk12 + std::log(1.0 + 3.0 / x + 3.0 / (x * x));
        for (double sign : {1.0, -1.0}) {
            EXPECT_NEAR(log_bessel_k(sign * 0.5, x) / lk12, 1.0, 1e-10) << "x=" << x;
            EXPECT_NEAR(log_bessel_k(sign * 1.5, x) / lk32, 1.0, 1e-10) << "x=" << x;
            EXPECT_NEAR(log_bessel_k(sign * 2.5, x) / lk52, 1.0, 1e-10) << "x=" << x;
        }
    }
}

TEST(LogBesselK, SymmetricInOrder) {
    EXPECT_DOUBLE_EQ(log_bessel_k(-3.0, 1.0), log_bessel_k(3.0, 1.0));
    EXPECT_DOUBLE_EQ(log_bessel_k(-7.3, 0.4), log_bessel_k(7.3, 0.4));
}

TEST(LogBesselK, QuadratureOracle) {
    const double lk = log_bessel_k(0.7, 3.1);
    const double oracle = bessel_k_quadrature(0.7, 3.1);
    EXPECT_NEAR(std::exp(lk) / oracle, 1.0, 1e-8);
}

TEST(LogBesselK, QuadratureOracleGrid) {
    for (double nu : {0.0, 0.3, 1.0, 2.7, 6.5}) {
        for (double x : {0.05, 0.7, 2.0, 4.0, 9.0}) {
            const double oracle = bessel_k_quadrature(nu, x);
            EXPECT_NEAR(std::exp(log_bessel_k(nu, x)) / oracle, 1.0, 1e-8) << "nu=" << nu << " x=" << x;
        }
    }
}

TEST(LogBesselK, FiniteAcrossExtremeRange) {
    for (double x : {1e-12, 1e-6, 1.0, 1e4, 1e8}) {
        for (double nu : {0.0, 0.5, 12.0, 137.5, 1275.0}) {
            const double lk = log_bessel_k(nu, x);
            EXPECT_TRUE(std::isfinite(lk)) << "nu=" << nu << " x=" << x << " -> " << lk;
        }
    }
    EXPECT_THROW(log_bessel_k(1.0, 0.0), std::domain_error);
    EXPECT_THROW(log_bessel_k(1.0, -1.0), std::domain_error);
}

TEST(LogBesselK, LargeOrderRecurrenceConsistency) {
    // K_{nu+1} = K_{nu-1} + (2 nu / x) K_nu must hold at large order.
    const double x = 3.7;
    for (double nu : {40.3, 200.0}) {
        const double lhs = std::exp(log_bessel_k(nu + 1.0, x) - log_bessel_k(nu, x));
        const double rhs = std::exp(log_bessel_k(nu - 1.0, x) - log_bessel_k(nu, x)) + 2.0 * nu / x;
        EXPECT_NEAR(lhs / rhs, 1.0, 1e-11) << "nu=" << nu;
    }
}

TEST(GigMoments, GammaSpecialCaseMean) {
    // GIG(3, 4, 0) is Gamma(3, 2): mean 1.5.
    GigMoments m = gig_moments({3.0, 4.0, 0.0});
    EXPECT_NEAR(m.mean_x, 1.5, 1e-14);
    EXPECT_NEAR(m.mean_inv_x, 1.0, 1e-14);  // b'/(a'-1) = 2/2
}

TEST(GigMoments, GammaReductionGrid) {
    for (double ap : {1.5, 3.0, 7.0}) {
        for (double bp : {0.5, 2.0, 4.0}) {
            GigMoments m = gig_moments({ap, 2.0 * bp, 0.0});
            EXPECT_NEAR(m.mean_x / (ap / bp), 1.0, 1e-10);
            if (ap > 1) EXPECT_NEAR(m.mean_inv_x / (bp / (ap - 1.0)), 1.0, 1e-10);
        }
    }
}

TEST(GigMoments, QuadratureOracle) {
    const GIGParams p{2.0, 1.0, 1.0};
    auto density = [&](double t) {  // on log axis, times jacobian
        const double x = std::exp(t);
        return std::exp(gig_log_pdf_unnorm(x, p.h, p.a, p.b) + t);
    };
    const double z = adaptive_quad(density, -44.0, 44.0, 1e-12);
    auto moment = [&](double power) {
        auto f = [&](double t) {
            const double x = std::exp(t);
            return std::exp(gig_log_pdf_unnorm(x, p.h, p.a, p.b) + power * t + t);
        };
        return adaptive_quad(f, -44.0, 44.0, 1e-12) / z;
    };
    GigMoments m = gig_moments(p);
    EXPECT_NEAR(m.mean_x / moment(1.0), 1.0, 1e-8);
    EXPECT_NEAR(m.mean_inv_x / moment(-1.0), 1.0, 1e-8);
}

TEST(GigMoments, ReciprocalLaw) {
    // If X ~ GIG(h,a,b) then 1/X ~ GIG(-h,b,a).
    for (double h : {-1.5, 0.5, 2.0, 6.0}) {
        for (double a : {0.3, 1.0, 4.0}) {
            for (double b : {0.7, 2.0}) {
                const double lhs = gig_moments({h, a, b}).mean_inv_x;
                const double rhs = gig_moments({-h, b, a}).mean_x;
                EXPECT_NEAR(lhs / rhs, 1.0, 1e-12) << h << " " << a << " " << b;
            }
        }
    }
}

TEST(GigMoments, ModeInvMatchesGoldenSection) {
    for (double h : {1.5, 3.0, 10.0}) {
        for (double a : {0.5, 2.0}) {
            for (double b : {0.5, 3.0}) {
                GigMoments m = gig_moments({h, a, b});
                // 1/X ~ GIG(-h, b, a)
                auto logpdf = [&](double y) { return gig_log_pdf_unnorm(y, -h, b, a); };
                const double argmax = golden_section_max(logpdf, 1e-8, 100.0);
                EXPECT_NEAR(m.mode_inv_x / argmax, 1.0, 1e-6) << h << " " << a << " " << b;
            }
        }
    }
}

TEST(GigMoments, DomainValidation) {
    EXPECT_THROW(gig_moments({1.0, 0.0, 0.0}), std::domain_error);
    EXPECT_THROW(gig_moments({1.0, 0.0, 2.0}), std::domain_error);   // a=0 needs h<0
    EXPECT_THROW(gig_moments({-1.0, 2.0, 0.0}), std::domain_error);  // b=0 needs h>0
}

TEST(GigMode, MatchesGoldenSection) {
    for (double h : {0.5, 2.0, 8.0}) {
        for (double a : {0.5, 3.0}) {
            for (double b : {0.2, 1.5}) {
                auto logpdf = [&](double y) { return gig_log_pdf_unnorm(y, h, a, b); };
                const double argmax = golden_section_max(logpdf, 1e-8, 200.0);
                EXPECT_NEAR(gig_mode({h, a, b}) / argmax, 1.0, 1e-6);
            }
        }
    }
}

TEST(MarginalStudent, AtZero) {
    MarginalCheck c = marginal_student_check(1.0, 1.0, 0.0);
    // Student-t with precision 1, dof 2 at x = 0.
    const double expected = std::exp(std::lgamma(1.5) - std::lgamma(1.0)) / std::sqrt(2.0 * M_PI);
    EXPECT_NEAR(c.hier, expected, 1e-8);
    EXPECT_NEAR(c.direct, expected, 1e-12);
    EXPECT_NEAR(c.hier - c.direct, 0.0, 1e-6);
}

TEST(MarginalStudent, SymmetricInX) {
    MarginalCheck plus = marginal_student_check(2.0, 1.5, 1.3);
    MarginalCheck minus = marginal_student_check(2.0, 1.5, -1.3);
    EXPECT_NEAR(plus.hier, minus.hier, 1e-12);
    EXPECT_NEAR(plus.direct, minus.direct, 1e-15);
}

TEST(MarginalStudent, HierMatchesDirect) {
    MarginalCheck c = marginal_student_check(3.0, 2.0, 1.5);
    EXPECT_NEAR(c.hier - c.direct, 0.0, 1e-6);
}

TEST(MarginalLaplace, UnitGammaAtZero) {
    MarginalCheck c = marginal_laplace_check(1.0, 0.0);
    EXPECT_NEAR(c.direct, 0.5, 1e-15);
    EXPECT_NEAR(c.hier - c.direct, 0.0, 1e-6);
}

TEST(MarginalLaplace, HierMatchesDirect) {
    MarginalCheck c = marginal_laplace_check(4.0, 2.0);
    EXPECT_NEAR(c.hier - c.direct, 0.0, 1e-6);
    MarginalCheck plus = marginal_laplace_check(2.0, 0.7);
    MarginalCheck minus = marginal_laplace_check(2.0, -0.7);
    EXPECT_NEAR(plus.hier, minus.hier, 1e-12);
}

TEST(Digamma, KnownValues) {
    const double euler = 0.57721566490153286061;
    EXPECT_NEAR(digamma(1.0), -euler, 1e-13);
    EXPECT_NEAR(digamma(0.5), -euler - 2.0 * std::log(2.0), 1e-12);
    EXPECT_NEAR(digamma(10.0), 2.2517525890667211076, 1e-12);
}

TEST(GammaEntropy, MatchesQuadrature) {
    const double a = 2.5, b = 1.7;
    auto f = [&](double t) {
        const double x = std::exp(t);
        const double lp = gamma_log_pdf(x, a, b);
        return -std::exp(lp + t) * lp;
    };
    const double oracle = adaptive_quad(f, -40.0, 40.0, 1e-11);
    EXPECT_NEAR(gamma_entropy(a, b), oracle, 1e-8);
}

TEST(GigEntropy, MatchesQuadrature) {
    const GIGParams p{2.0, 1.5, 0.8};
    const double s = std::sqrt(p.a * p.b);
    const double log_norm = -0.5 * p.h * (std::log(p.a) - std::log(p.b)) + std::log(2.0) + log_bessel_k(p.h, s);
    auto f = [&](double t) {
        const double x = std::exp(t);
        const double lp = gig_log_pdf_unnorm(x, p.h, p.a, p.b) - log_norm;
        return -std::exp(lp + t) * lp;
    };
    const double oracle = adaptive_quad(f, -40.0, 40.0, 1e-11);
    EXPECT_NEAR(gig_entropy(p), oracle, 1e-7);
}

TEST(GigMeanLog, MatchesQuadrature) {
    const GIGParams p{3.0, 2.0, 1.0};
    const double s = std::sqrt(p.a * p.b);
    const double log_norm = -0.5 * p.h * (std::log(p.a) - std::log(p.b)) + std::log(2.0) + log_bessel_k(p.h, s);
    auto f = [&](double t) {
        const double x = std::exp(t);
        return std::exp(gig_log_pdf_unnorm(x, p.h, p.a, p.b) - log_norm + t) * t;
    };
    const double oracle = adaptive_quad(f, -40.0, 40.0, 1e-11);
    EXPECT_NEAR(gig_mean_log(p), oracle, 1e-7);
}
