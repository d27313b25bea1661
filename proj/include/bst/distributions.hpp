#pragma once

#include "bst/tensor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace bst {

inline double log_add_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// psi(x) for x > 0: recurrence into the asymptotic region.
inline double digamma(double x) {
    if (!(x > 0)) throw std::domain_error("digamma: x must be positive");
    double r = 0.0;
    while (x < 10.0) {
        r -= 1.0 / x;
        x += 1.0;
    }
    const double f = 1.0 / (x * x);
    return r + std::log(x) - 0.5 / x -
           f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132)))));
}

namespace detail {

// Temme's gamma combinations for |mu| <= 0.5:
//   g1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu),  g2 = (1/Gamma(1-mu) + 1/Gamma(1+mu)) / 2.
inline void temme_gamma(double mu, double& g1, double& g2, double& gampl, double& gammi) {
    gampl = 1.0 / std::tgamma(1.0 + mu);
    gammi = 1.0 / std::tgamma(1.0 - mu);
    g2 = 0.5 * (gammi + gampl);
    if (std::abs(mu) < 1e-4) {
        // Taylor of 1/Gamma(1+z) = sum a_k z^k; odd coefficients only.
        const double a1 = 0.57721566490153286061;   // Euler gamma
        const double a3 = -0.04200263503409523553;
        const double a5 = -0.04219773455554433675;
        const double mu2 = mu * mu;
        g1 = -(a1 + mu2 * (a3 + mu2 * a5));
    } else {
        g1 = (gammi - gampl) / (2.0 * mu);
    }
}

// K_mu(x) and K_{mu+1}(x) for x <= 2, |mu| <= 0.5 (Temme series).
inline void bessel_k_small_x(double mu, double x, double& kmu, double& kmu1) {
    const double eps = std::numeric_limits<double>::epsilon();
    const double x2 = 0.5 * x;
    const double pimu = M_PI * mu;
    const double fact = (std::abs(pimu) < eps) ? 1.0 : pimu / std::sin(pimu);
    double d = -std::log(x2);
    double e = mu * d;
    const double fact2 = (std::abs(e) < eps) ? 1.0 : std::sinh(e) / e;
    double g1, g2, gampl, gammi;
    temme_gamma(mu, g1, g2, gampl, gammi);
    double ff = fact * (g1 * std::cosh(e) + g2 * fact2 * d);
    double sum = ff;
    e = std::exp(e);
    double p = 0.5 * e / gampl;
    double q = 0.5 / (e * gammi);
    double c = 1.0;
    d = x2 * x2;
    double sum1 = p;
    const double mu2 = mu * mu;
    for (int i = 1; i <= 300; ++i) {
        ff = (i * ff + p + q) / (i * i - mu2);
        c *= d / i;
        p /= (i - mu);
        q /= (i + mu);
        const double del = c * ff;
        sum += del;
        const double del1 = c * (p - i * ff);
        sum1 += del1;
        if (std::abs(del) < std::abs(sum) * eps) break;
    }
    kmu = sum;
    kmu1 = sum1 * (2.0 / x);
}

// ln K_mu(x) and ln K_{mu+1}(x) for x > 2, |mu| <= 0.5, via the Steed /
// Thompson-Barnett continued fraction, kept in log space so the e^{-x}
// prefactor never underflows.
inline void bessel_k_large_x(double mu, double x, double& lkmu, double& lkmu1) {
    const double eps = std::numeric_limits<double>::epsilon();
    const double mu2 = mu * mu;
    double b = 2.0 * (1.0 + x);
    double d = 1.0 / b;
    double h = d, delh = d;
    double q1 = 0.0, q2 = 1.0;
    const double a1 = 0.25 - mu2;
    double q = a1, c = a1;
    double a = -a1;
    double s = 1.0 + q * delh;
    for (int i = 2; i <= 20000; ++i) {
        a -= 2 * (i - 1);
        c = -a * c / i;
        const double qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        const double dels = q * delh;
        s += dels;
        if (std::abs(dels / s) <= eps) break;
    }
    h = a1 * h;
    lkmu = 0.5 * std::log(M_PI / (2.0 * x)) - x - std::log(s);
    lkmu1 = lkmu + std::log((mu + x + 0.5 - h) / x);
}

}  // namespace detail

/// ln K_nu(x), the log modified Bessel function of the second kind.
/// Symmetric in nu; finite across x in (1e-12, 1e8) and large orders,
/// via base orders in [-1/2, 1/2] plus the upward recurrence
/// K_{nu+1} = K_{nu-1} + (2 nu / x) K_nu carried in log space.
inline double log_bessel_k(double nu, double x) {
    if (!(x > 0)) throw std::domain_error("log_bessel_k: x must be positive");
    nu = std::abs(nu);
    const long nl = static_cast<long>(std::floor(nu + 0.5));
    const double mu = nu - static_cast<double>(nl);

    double lk0, lk1;
    if (x <= 2.0) {
        double k0, k1;
        detail::bessel_k_small_x(mu, x, k0, k1);
        lk0 = std::log(k0);
        lk1 = std::log(k1);
    } else {
        detail::bessel_k_large_x(mu, x, lk0, lk1);
    }
    if (nl == 0) return lk0;
    const double lx = std::log(x);
    for (long j = 1; j < nl; ++j) {
        const double lnext = log_add_exp(lk0, std::log(2.0 * (mu + j)) - lx + lk1);
        lk0 = lk1;
        lk1 = lnext;
    }
    return lk1;
}

struct GammaParams {
    double a = 1;  // shape
    double b = 1;  // rate
};

struct InvGammaParams {
    double a = 1;  // shape
    double b = 1;  // scale
};

/// GIG(x | h, a, b) with density proportional to x^{h-1} exp(-(a x + b/x)/2).
/// Special cases: GIG(h, 2b, 0) = Gamma(h, b) and GIG(-h, 0, 2b) = InvGamma(h, b).
struct GIGParams {
    double h = 1;
    double a = 0;
    double b = 0;
};

inline void validate_gig(const GIGParams& p) {
    if (p.a < 0 || p.b < 0 || (p.a == 0 && p.b == 0))
        throw std::domain_error("GIG: need a,b >= 0 with at least one positive");
    if (p.a == 0 && p.h >= 0) throw std::domain_error("GIG: a = 0 requires h < 0");
    if (p.b == 0 && p.h <= 0) throw std::domain_error("GIG: b = 0 requires h > 0");
}

struct GigMoments {
    double mean_x;      // E[X]
    double mean_inv_x;  // E[1/X]
    double mode_inv_x;  // argmax of the density of 1/X ~ GIG(-h, b, a)
};

namespace detail {
// ((p-1) + sqrt((p-1)^2 + ab)) / a without cancellation when p-1 < 0.
inline double gig_mode_formula(double p, double a, double b) {
    const double m = p - 1.0;
    if (m >= 0) return (m + std::sqrt(m * m + a * b)) / a;
    return b / (std::sqrt(m * m + a * b) - m);
}
}  // namespace detail

/// Mode of X ~ GIG(h, a, b); a > 0. Used as the stable stand-in for E[X]
/// when Bessel-ratio expectations are switched off.
inline double gig_mode(const GIGParams& p) {
    validate_gig(p);
    if (p.a == 0) throw std::domain_error("gig_mode: a must be positive");
    return detail::gig_mode_formula(p.h, p.a, p.b);
}

/// E[X], E[1/X] (Bessel ratios evaluated in log space) and the mode of 1/X.
/// Divergent moments come back as +infinity.
inline GigMoments gig_moments(const GIGParams& p) {
    validate_gig(p);
    const double inf = std::numeric_limits<double>::infinity();
    GigMoments m{};
    if (p.b == 0) {  // Gamma(h, a/2)
        m.mean_x = 2.0 * p.h / p.a;
        m.mean_inv_x = (p.h > 1.0) ? p.a / (2.0 * (p.h - 1.0)) : inf;
        m.mode_inv_x = p.a / (2.0 * (p.h + 1.0));  // limit of the GIG(-h, b, a) mode as b -> 0
        return m;
    }
    if (p.a == 0) {  // InvGamma(-h, b/2); 1/X ~ Gamma(-h, b/2)
        m.mean_x = (-p.h > 1.0) ? p.b / (2.0 * (-p.h - 1.0)) : inf;
        m.mean_inv_x = -2.0 * p.h / p.b;
        m.mode_inv_x = (-p.h >= 1.0) ? 2.0 * (-p.h - 1.0) / p.b : 0.0;
        return m;
    }
    const double s = std::sqrt(p.a * p.b);
    const double lkh = log_bessel_k(p.h, s);
    m.mean_x = std::exp(0.5 * (std::log(p.b) - std::log(p.a)) + log_bessel_k(p.h + 1.0, s) - lkh);
    m.mean_inv_x = std::exp(0.5 * (std::log(p.a) - std::log(p.b)) + log_bessel_k(1.0 - p.h, s) - lkh);
    m.mode_inv_x = detail::gig_mode_formula(-p.h, p.b, p.a);
    return m;
}

/// E[ln X] for X ~ GIG(h, a, b): d/dh ln K_h(sqrt(ab)) + ln(sqrt(b/a)),
/// with the order derivative taken by central differences.
inline double gig_mean_log(const GIGParams& p) {
    validate_gig(p);
    if (p.b == 0) return digamma(p.h) - std::log(0.5 * p.a);   // Gamma(h, a/2)
    if (p.a == 0) return -(digamma(-p.h) - std::log(0.5 * p.b));  // -E[ln Y], Y ~ Gamma(-h, b/2)
    const double s = std::sqrt(p.a * p.b);
    const double step = 1e-5 * std::max(1.0, std::abs(p.h));
    const double dh = (log_bessel_k(p.h + step, s) - log_bessel_k(p.h - step, s)) / (2.0 * step);
    return dh + 0.5 * (std::log(p.b) - std::log(p.a));
}

/// Differential entropy of GIG(h, a, b) with a, b > 0.
inline double gig_entropy(const GIGParams& p) {
    validate_gig(p);
    const double s = std::sqrt(p.a * p.b);
    const double log_norm = -0.5 * p.h * (std::log(p.a) - std::log(p.b)) + std::log(2.0) + log_bessel_k(p.h, s);
    const GigMoments m = gig_moments(p);
    return log_norm - (p.h - 1.0) * gig_mean_log(p) + 0.5 * (p.a * m.mean_x + p.b * m.mean_inv_x);
}

inline double gamma_log_pdf(double x, double a, double b) {  // rate parameterization
    return a * std::log(b) - std::lgamma(a) + (a - 1.0) * std::log(x) - b * x;
}

inline double gamma_entropy(double a, double b) {
    return a - std::log(b) + std::lgamma(a) + (1.0 - a) * digamma(a);
}

/// Adaptive Gauss-Kronrod (G7, K15) quadrature with interval bisection.
/// Starts from a uniform 32-way split so narrow peaks cannot hide between
/// the nodes of one wide panel.
template <typename F>
inline double adaptive_quad(const F& f, double lo, double hi, double abs_tol, double rel_tol = 1e-12) {
    static const double xgk[8] = {0.991455371120813, 0.949107912342759, 0.864864423359769,
                                  0.741531185599394, 0.586087235467691, 0.405845151377397,
                                  0.207784955007898, 0.0};
    static const double wgk[8] = {0.022935322010529, 0.063092092629979, 0.104790010322250,
                                  0.140653259715525, 0.169004726639267, 0.190350578064785,
                                  0.204432940075298, 0.209482141084728};
    static const double wg[4] = {0.129484966168870, 0.279705391489277, 0.381830050505119,
                                 0.417959183673469};

    struct Panel {
        double lo, hi;
    };
    auto eval = [&](double a, double b, double& kronrod, double& err) {
        const double c = 0.5 * (a + b), half = 0.5 * (b - a);
        double resg = 0, resk = 0;
        const double fc = f(c);
        resk = wgk[7] * fc;
        resg = wg[3] * fc;
        for (int j = 0; j < 7; ++j) {
            const double x = half * xgk[j];
            const double fsum = f(c - x) + f(c + x);
            resk += wgk[j] * fsum;
            if (j % 2 == 1) resg += wg[j / 2] * fsum;
        }
        kronrod = resk * half;
        err = std::abs((resk - resg) * half);
    };

    std::vector<Panel> stack;
    const int splits = 32;
    for (int i = splits - 1; i >= 0; --i)
        stack.push_back({lo + (hi - lo) * i / splits, lo + (hi - lo) * (i + 1) / splits});
    double total = 0;
    int panels = 0;
    while (!stack.empty()) {
        if (++panels > 20000) throw NumericalError("adaptive_quad: did not converge");
        const Panel p = stack.back();
        stack.pop_back();
        double k, err;
        eval(p.lo, p.hi, k, err);
        if (err < abs_tol * std::max(1e-3, (p.hi - p.lo) / (hi - lo)) + rel_tol * std::abs(k) ||
            (p.hi - p.lo) < 1e-13) {
            total += k;
        } else {
            const double mid = 0.5 * (p.lo + p.hi);
            stack.push_back({p.lo, mid});
            stack.push_back({mid, p.hi});
        }
    }
    return total;
}

struct MarginalCheck {
    double hier;    // quadrature of the hierarchical integral
    double direct;  // closed-form marginal density
};

/// Integrates N(x | 0, 1/lambda) Ga(lambda | a, b) over lambda (on a log
/// axis) and pairs it with the Student-t density T(x | 0, a/b, 2a).
inline MarginalCheck marginal_student_check(double a, double b, double x) {
    if (!(a > 0) || !(b > 0)) throw std::domain_error("marginal_student_check: a, b must be positive");
    auto integrand = [&](double t) {
        const double lam = std::exp(t);
        const double log_n = 0.5 * (t - std::log(2.0 * M_PI)) - 0.5 * lam * x * x;
        return std::exp(log_n + gamma_log_pdf(lam, a, b) + t);
    };
    MarginalCheck out{};
    out.hier = adaptive_quad(integrand, -46.0, 46.0, 1e-10);
    const double w = a / b, v = 2.0 * a;  // precision, dof
    out.direct = std::exp(std::lgamma(0.5 * (v + 1.0)) - std::lgamma(0.5 * v) +
                          0.5 * std::log(w / (v * M_PI)) -
                          0.5 * (v + 1.0) * std::log1p(w * x * x / v));
    return out;
}

/// Integrates N(x | 0, 1/lambda) IG(lambda | 1, gamma/2) over lambda and
/// pairs it with the Laplace density of scale 1/sqrt(gamma).
inline MarginalCheck marginal_laplace_check(double gamma, double x) {
    if (!(gamma > 0)) throw std::domain_error("marginal_laplace_check: gamma must be positive");
    auto integrand = [&](double t) {
        const double lam = std::exp(t);
        const double log_n = 0.5 * (t - std::log(2.0 * M_PI)) - 0.5 * lam * x * x;
        const double log_ig = std::log(0.5 * gamma) - 2.0 * t - 0.5 * gamma / lam;
        return std::exp(log_n + log_ig + t);
    };
    MarginalCheck out{};
    out.hier = adaptive_quad(integrand, -46.0, 46.0, 1e-10);
    const double sg = std::sqrt(gamma);
    out.direct = 0.5 * sg * std::exp(-sg * std::abs(x));
    return out;
}

}  // namespace bst
