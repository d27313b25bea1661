#pragma once

#include "bst/distributions.hpp"
#include "bst/tensor.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <cmath>
#include <cstdint>
#include <random>
#include <tuple>
#include <vector>

namespace bst {

enum class PriorFamily { student_t, laplace };
enum class FactorInit { mode_n_svd, standard_normal };

struct FitConfig {
    PriorFamily prior = PriorFamily::student_t;
    double a0_tau = 1e-9, b0_tau = 1e-9;
    double a0_beta = 1e-9, b0_beta = 1e-9;
    double a0_lambda = 1e-9, b0_lambda = 1e-9;
    double a0_gamma = 1e-9, b0_gamma = 1e-9;
    Shape init_rank;  // per-mode caps; empty means R_n = I_n
    FactorInit init_factors = FactorInit::mode_n_svd;
    int max_iters = 500;
    double tol = 1e-6;
    double prune_tol = 1e-10;
    // Exact second-moment terms (diag Sigma_G, E[G(n) kron G(n)], full core
    // second moment in tau) and Bessel-ratio GIG expectations. Off trades
    // them for the cheaper mean-only / GIG-mode approximations.
    bool exact_expectations = true;
    std::uint64_t seed = 0;
    // Completion-specific knobs.
    Index core_cap = 4096;  // closed-form core update while prod R_n <= cap
    int cg_iters = 100;
    double cg_tol = 1e-8;

    void validate() const {
        for (double h : {a0_tau, b0_tau, a0_beta, b0_beta, a0_lambda, b0_lambda, a0_gamma, b0_gamma})
            if (!(h > 0)) throw std::invalid_argument("FitConfig: hyperparameters must be positive");
        if (max_iters < 1 || !(tol > 0) || !(prune_tol > 0) || core_cap < 1 || cg_iters < 1 || !(cg_tol > 0))
            throw std::invalid_argument("FitConfig: invalid iteration/convergence controls");
    }
};

struct GammaPosterior {
    double a = 1.0;
    double b = 1.0;
    double mean() const { return a / b; }
    double mean_log() const { return digamma(a) - std::log(b); }
    double entropy() const { return gamma_entropy(a, b); }
};

/// Per-mode posterior over the column precisions lambda^(n). Student-t keeps
/// independent Gamma(a_r, b_r); Laplace keeps GIG(h, a_r, b) with shared
/// order h and shared b = E[gamma].
struct ModeLambda {
    Vector mean;      // E[lambda_r] as used by the updates
    Vector inv_mean;  // E[1/lambda_r] (Laplace)
    Vector post_a;
    Vector post_b;
    double gig_h = 0.0;
    bool is_gig = false;
};

/// Factored inverse of (c1 kron Lambda^(n) + c2 kron Sigma^(n)): per-mode
/// B^(n) = Lambda^(n)^{-1/2} V^(n) plus the diagonal d of the middle factor,
/// so the inverse is (kron B) diag(d) (kron B^T) and the big matrix never
/// exists.
struct KronEigFactored {
    std::vector<Matrix> b;
    Vector inv_diag;

    bool empty() const { return b.empty(); }

    Vector apply(const Vector& v) const {
        std::vector<Matrix> bt(b.size());
        for (size_t n = 0; n < b.size(); ++n) bt[n] = b[n].transpose();
        Vector w = kron_apply(bt, v);
        w.array() *= inv_diag.array();
        return kron_apply(b, w);
    }

    Vector diagonal() const {
        std::vector<Matrix> bsq(b.size());
        for (size_t n = 0; n < b.size(); ++n) bsq[n] = b[n].cwiseProduct(b[n]);
        return kron_apply(bsq, inv_diag);
    }

    double log_det() const {
        double ld = inv_diag.array().log().sum();
        Index total = inv_diag.size();
        for (const Matrix& bn : b) {
            const double det = Eigen::PartialPivLU<Matrix>(bn).determinant();
            ld += 2.0 * std::log(std::abs(det)) * (total / bn.rows());
        }
        return ld;
    }
};

inline KronEigFactored kron_eig_solve(const std::vector<Vector>& lambdas, const std::vector<Matrix>& sigmas,
                                      double c1, double c2) {
    if (lambdas.size() != sigmas.size() || lambdas.empty())
        throw std::invalid_argument("kron_eig_solve: inconsistent mode counts");
    if (!(c1 > 0) || c2 < 0) throw std::invalid_argument("kron_eig_solve: need c1 > 0, c2 >= 0");
    const size_t nmodes = lambdas.size();
    KronEigFactored out;
    out.b.resize(nmodes);
    std::vector<Vector> eigs(nmodes);
    for (size_t n = 0; n < nmodes; ++n) {
        const Index r = lambdas[n].size();
        if (sigmas[n].rows() != r || sigmas[n].cols() != r)
            throw std::invalid_argument("kron_eig_solve: dimension mismatch");
        if ((lambdas[n].array() <= 0).any()) throw NumericalError("kron_eig_solve: nonpositive lambda entry");
        if (c2 == 0.0) {  // inverse is exactly diag(1/(c1 kron lambda))
            out.b[n] = lambdas[n].array().rsqrt().matrix().asDiagonal();
            eigs[n] = Vector::Zero(r);
            continue;
        }
        const Vector isq = lambdas[n].array().rsqrt();
        Matrix t = isq.asDiagonal() * sigmas[n] * isq.asDiagonal();
        const double jitter = 1e-12 * t.trace();
        t.diagonal().array() += jitter;
        SymEig eig = symm_eig(t);
        if (eig.eigenvalues[0] < -1e-10 * std::max(1.0, t.trace()))
            throw NumericalError("kron_eig_solve: Sigma^(n) not positive semidefinite");
        eigs[n] = eig.eigenvalues.cwiseMax(0.0);
        out.b[n] = isq.asDiagonal() * eig.eigenvectors;
    }
    Vector dk = kron_diag(eigs);
    out.inv_diag = (c1 + c2 * dk.array()).inverse();
    return out;
}

/// Posterior pieces shared by the decomposition and completion solvers.
struct TuckerPosterior {
    PriorFamily prior = PriorFamily::student_t;
    Shape data_shape;
    DenseTensor core_mean;
    DenseTensor core_sq;  // E[G_j^2] elementwise
    std::vector<Matrix> factor_mean;
    std::vector<ModeLambda> lambda;
    GammaPosterior beta, tau, gamma;

    Index order() const { return static_cast<Index>(data_shape.size()); }
    Shape rank() const { return core_mean.shape; }
    Index rank_total() const { return core_mean.size(); }

    std::vector<Vector> lambda_means() const {
        std::vector<Vector> out(lambda.size());
        for (size_t n = 0; n < lambda.size(); ++n) out[n] = lambda[n].mean;
        return out;
    }
};

struct PosteriorState {
    TuckerPosterior base;
    KronEigFactored core_cov;         // factored Sigma_G
    std::vector<Matrix> factor_cov;   // Psi^(n), shared across rows
};

struct FitReport {
    std::vector<double> lower_bound_trace;
    Shape inferred_rank;
    double estimated_snr_db = 0.0;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

inline Matrix row_vector(const Vector& v) { return v.transpose(); }

/// Contract core_sq with the lambda mean vectors on every mode except n;
/// returns the per-component quadratic form E[vec(G_slice^2)^T] kron E[lambda].
inline Vector slice_quad(const DenseTensor& core_sq, const std::vector<Vector>& lam, Index n) {
    DenseTensor t = core_sq;
    for (Index k = 0; k < t.order(); ++k)
        if (k != n) t = ttm(t, row_vector(lam[k]), k);
    return unfold(t, n).col(0);
}

inline double full_quad(const DenseTensor& core_sq, const std::vector<Vector>& lam) {
    DenseTensor t = core_sq;
    for (Index k = 0; k < t.order(); ++k) t = ttm(t, row_vector(lam[k]), k);
    return t.data[0];
}

/// Sum of E[||G_{...r...}||^2] per component of mode n (unit weights).
inline Vector slice_power(const DenseTensor& core_sq, Index n) {
    std::vector<Vector> ones(core_sq.order());
    for (Index k = 0; k < core_sq.order(); ++k) ones[k] = Vector::Ones(core_sq.shape[k]);
    return slice_quad(core_sq, ones, n);
}

inline Matrix solve_spd(Matrix a, const char* what) {
    a = 0.5 * (a + a.transpose()).eval();
    a.diagonal().array() += 1e-12 * a.trace();
    Eigen::LDLT<Matrix> ldlt(a);
    if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0).any()) {
        a.diagonal().array() += 1e-8 * a.trace();
        ldlt.compute(a);
        if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() <= 0).any())
            throw NumericalError(std::string("singular system in ") + what);
    }
    return ldlt.solve(Matrix::Identity(a.rows(), a.cols()));
}

inline double log_det_spd(Matrix a) {
    a = 0.5 * (a + a.transpose()).eval();
    Eigen::LDLT<Matrix> ldlt(a);
    return ldlt.vectorD().array().max(1e-300).log().sum();
}

/// E[lambda] / E[1/lambda] straight from the stored posterior, always by the
/// exact formulas (the bound is a functional of q, so it may not use the
/// mode-based stand-ins the updates are allowed to use).
inline Vector exact_lambda_mean(const ModeLambda& lam) {
    if (!lam.is_gig) return lam.post_a.cwiseQuotient(lam.post_b);
    Vector out(lam.post_a.size());
    for (Index r = 0; r < out.size(); ++r)
        out[r] = gig_moments({lam.gig_h, lam.post_a[r], lam.post_b[r]}).mean_x;
    return out;
}

inline Vector exact_lambda_mean_log(const ModeLambda& lam) {
    Vector out(lam.post_a.size());
    for (Index r = 0; r < out.size(); ++r) {
        if (lam.is_gig)
            out[r] = gig_mean_log({lam.gig_h, lam.post_a[r], lam.post_b[r]});
        else
            out[r] = digamma(lam.post_a[r]) - std::log(lam.post_b[r]);
    }
    return out;
}

inline Vector exact_lambda_inv_mean(const ModeLambda& lam) {
    Vector out(lam.post_a.size());
    for (Index r = 0; r < out.size(); ++r) {
        if (lam.is_gig)
            out[r] = gig_moments({lam.gig_h, lam.post_a[r], lam.post_b[r]}).mean_inv_x;
        else
            out[r] = lam.post_b[r] / std::max(lam.post_a[r] - 1.0, 1e-12);
    }
    return out;
}

inline double gamma_prior_expectation(const GammaPosterior& q, double a0, double b0) {
    return a0 * std::log(b0) - std::lgamma(a0) + (a0 - 1.0) * q.mean_log() - b0 * q.mean();
}

inline void update_beta_shared(TuckerPosterior& s, const FitConfig& cfg) {
    s.beta.a = cfg.a0_beta + 0.5 * static_cast<double>(s.rank_total());
    s.beta.b = cfg.b0_beta + 0.5 * full_quad(s.core_sq, s.lambda_means());
}

/// col_sq_norm holds E[u_{.r}^T u_{.r}] per component, supplied by the model
/// (shared-row covariance for decomposition, per-row sums for completion).
inline void update_lambda_shared(TuckerPosterior& s, Index n, const Vector& col_sq_norm, const FitConfig& cfg) {
    ModeLambda& lam = s.lambda[static_cast<size_t>(n)];
    const Index rn = s.core_mean.shape[n];
    const double others = static_cast<double>(s.rank_total() / rn);
    const double data_dim = static_cast<double>(s.data_shape[n]);
    const Vector quad = slice_quad(s.core_sq, s.lambda_means(), n);
    const double beta_mean = s.beta.mean();

    if (s.prior == PriorFamily::student_t) {
        lam.is_gig = false;
        lam.post_a = Vector::Constant(rn, cfg.a0_lambda + 0.5 * (data_dim + others));
        lam.post_b = Vector(rn);
        for (Index r = 0; r < rn; ++r)
            lam.post_b[r] = cfg.b0_lambda + 0.5 * col_sq_norm[r] + 0.5 * beta_mean * quad[r];
        lam.mean = lam.post_a.cwiseQuotient(lam.post_b);
        lam.inv_mean = Vector();
    } else {
        lam.is_gig = true;
        lam.gig_h = 0.5 * (data_dim + others) - 1.0;
        lam.post_a = Vector(rn);
        lam.post_b = Vector::Constant(rn, s.gamma.mean());
        lam.mean = Vector(rn);
        lam.inv_mean = Vector(rn);
        for (Index r = 0; r < rn; ++r) {
            lam.post_a[r] = std::max(beta_mean * quad[r] + col_sq_norm[r], 1e-300);
            const GIGParams p{lam.gig_h, lam.post_a[r], lam.post_b[r]};
            if (cfg.exact_expectations) {
                const GigMoments m = gig_moments(p);
                lam.mean[r] = m.mean_x;
                lam.inv_mean[r] = m.mean_inv_x;
            } else {
                lam.mean[r] = gig_mode(p);
                lam.inv_mean[r] = gig_moments(p).mode_inv_x;
            }
        }
    }
}

inline void update_gamma_shared(TuckerPosterior& s, const FitConfig& cfg) {
    if (s.prior != PriorFamily::laplace) throw std::logic_error("update_gamma: Student-t prior has no gamma");
    double rank_sum = 0, inv_sum = 0;
    for (const ModeLambda& lam : s.lambda) {
        rank_sum += static_cast<double>(lam.mean.size());
        inv_sum += lam.inv_mean.sum();
    }
    s.gamma.a = cfg.a0_gamma + rank_sum;
    s.gamma.b = cfg.b0_gamma + 0.5 * inv_sum;
}

/// Hyperparameter prior expectations plus their entropies; identical for the
/// decomposition and completion bounds.
inline double hyper_bound_terms(const TuckerPosterior& s, const FitConfig& cfg) {
    double l = gamma_prior_expectation(s.tau, cfg.a0_tau, cfg.b0_tau) + s.tau.entropy();
    l += gamma_prior_expectation(s.beta, cfg.a0_beta, cfg.b0_beta) + s.beta.entropy();
    for (const ModeLambda& lam : s.lambda) {
        if (!lam.is_gig) {
            for (Index r = 0; r < lam.post_a.size(); ++r) {
                const GammaPosterior q{lam.post_a[r], lam.post_b[r]};
                l += gamma_prior_expectation(q, cfg.a0_lambda, cfg.b0_lambda) + q.entropy();
            }
        } else {
            const Vector mean_log = exact_lambda_mean_log(lam);
            const Vector inv_mean = exact_lambda_inv_mean(lam);
            for (Index r = 0; r < lam.post_a.size(); ++r) {
                // E[ln IG(lambda | 1, gamma/2)] under independent q(lambda) q(gamma)
                l += s.gamma.mean_log() - std::log(2.0) - 2.0 * mean_log[r] -
                     0.5 * s.gamma.mean() * inv_mean[r];
                l += gig_entropy({lam.gig_h, lam.post_a[r], lam.post_b[r]});
            }
        }
    }
    if (s.prior == PriorFamily::laplace)
        l += gamma_prior_expectation(s.gamma, cfg.a0_gamma, cfg.b0_gamma) + s.gamma.entropy();
    return l;
}

/// Gaussian prior expectation for the core and factors plus the factor-free
/// pieces shared by both bounds. col_sq per mode as in update_lambda.
inline double gaussian_prior_bound_terms(const TuckerPosterior& s, const std::vector<Vector>& col_sq) {
    const double ln2pi = std::log(2.0 * M_PI);
    std::vector<Vector> lam_mean(s.lambda.size()), lam_mean_log(s.lambda.size());
    for (size_t n = 0; n < s.lambda.size(); ++n) {
        lam_mean[n] = exact_lambda_mean(s.lambda[n]);
        lam_mean_log[n] = exact_lambda_mean_log(s.lambda[n]);
    }
    const double pr = static_cast<double>(s.rank_total());
    double l = 0.5 * pr * (s.beta.mean_log() - ln2pi);
    for (Index n = 0; n < s.order(); ++n)
        l += 0.5 * (pr / s.core_mean.shape[n]) * lam_mean_log[n].sum();
    l -= 0.5 * s.beta.mean() * full_quad(s.core_sq, lam_mean);
    for (Index n = 0; n < s.order(); ++n) {
        const double in = static_cast<double>(s.data_shape[n]);
        const double rn = static_cast<double>(s.core_mean.shape[n]);
        l += 0.5 * in * lam_mean_log[n].sum() - 0.5 * in * rn * ln2pi -
             0.5 * lam_mean[n].dot(col_sq[static_cast<size_t>(n)]);
    }
    return l;
}

/// Keep-masks for model reduction. u_measure and g_measure are per-component
/// scales; a component goes when both fall to <= prune_tol times the largest
/// in its mode. The strongest component of a mode is never removed.
inline std::vector<std::vector<Index>> prune_keep(const std::vector<Vector>& u_measure,
                                                  const std::vector<Vector>& g_measure, double prune_tol) {
    std::vector<std::vector<Index>> keep(u_measure.size());
    for (size_t n = 0; n < u_measure.size(); ++n) {
        const Vector& u = u_measure[n];
        const Vector& g = g_measure[n];
        const double uth = prune_tol * u.maxCoeff();
        const double gth = prune_tol * g.maxCoeff();
        for (Index r = 0; r < u.size(); ++r)
            if (!(u[r] <= uth && g[r] <= gth)) keep[n].push_back(r);
        if (keep[n].empty()) {
            Index best = 0;
            u.maxCoeff(&best);
            keep[n].push_back(best);
        }
    }
    return keep;
}

inline DenseTensor take_slices(const DenseTensor& t, Index n, const std::vector<Index>& keep) {
    Matrix m = unfold(t, n);
    Matrix sub(static_cast<Index>(keep.size()), m.cols());
    for (size_t i = 0; i < keep.size(); ++i) sub.row(static_cast<Index>(i)) = m.row(keep[i]);
    Shape shape = t.shape;
    shape[n] = static_cast<Index>(keep.size());
    return fold(sub, n, shape);
}

inline Matrix take_cols(const Matrix& m, const std::vector<Index>& keep) {
    Matrix out(m.rows(), static_cast<Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i) out.col(static_cast<Index>(i)) = m.col(keep[i]);
    return out;
}

inline Matrix take_rows_cols(const Matrix& m, const std::vector<Index>& keep) {
    Matrix out(static_cast<Index>(keep.size()), static_cast<Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i)
        for (size_t j = 0; j < keep.size(); ++j) out(static_cast<Index>(i), static_cast<Index>(j)) = m(keep[i], keep[j]);
    return out;
}

inline Vector take_entries(const Vector& v, const std::vector<Index>& keep) {
    Vector out(static_cast<Index>(keep.size()));
    for (size_t i = 0; i < keep.size(); ++i) out[static_cast<Index>(i)] = v[keep[i]];
    return out;
}

inline void apply_keep_shared(TuckerPosterior& s, const std::vector<std::vector<Index>>& keep) {
    for (Index n = 0; n < s.order(); ++n) {
        const auto& k = keep[static_cast<size_t>(n)];
        if (static_cast<Index>(k.size()) == s.core_mean.shape[n]) continue;
        s.core_mean = take_slices(s.core_mean, n, k);
        s.core_sq = take_slices(s.core_sq, n, k);
        s.factor_mean[static_cast<size_t>(n)] = take_cols(s.factor_mean[static_cast<size_t>(n)], k);
        ModeLambda& lam = s.lambda[static_cast<size_t>(n)];
        lam.mean = take_entries(lam.mean, k);
        lam.post_a = take_entries(lam.post_a, k);
        lam.post_b = take_entries(lam.post_b, k);
        if (lam.inv_mean.size() > 0) lam.inv_mean = take_entries(lam.inv_mean, k);
    }
}

inline void init_shared(TuckerPosterior& s, const DenseTensor& y, double observed_var, const FitConfig& cfg) {
    const Index nmodes = y.order();
    s.prior = cfg.prior;
    s.data_shape = y.shape;
    Shape rank(nmodes);
    for (Index n = 0; n < nmodes; ++n) {
        Index cap = y.shape[n];
        if (!cfg.init_rank.empty()) {
            if (static_cast<Index>(cfg.init_rank.size()) != nmodes)
                throw std::invalid_argument("init_rank arity mismatch");
            if (cfg.init_rank[n] < 1 || cfg.init_rank[n] > y.shape[n])
                throw std::invalid_argument("init_rank must satisfy 1 <= R_n <= I_n");
            cap = cfg.init_rank[n];
        }
        rank[n] = cap;
    }
    s.core_mean = DenseTensor(rank);
    s.core_sq = DenseTensor(rank);

    s.factor_mean.resize(nmodes);
    if (cfg.init_factors == FactorInit::mode_n_svd) {
        for (Index n = 0; n < nmodes; ++n) {
            Eigen::BDCSVD<Matrix> svd(unfold(y, n), Eigen::ComputeFullU);
            Matrix u = svd.matrixU().leftCols(rank[n]);
            for (Index c = 0; c < u.cols(); ++c) {  // deterministic column signs
                Index imax = 0;
                u.col(c).cwiseAbs().maxCoeff(&imax);
                if (u(imax, c) < 0) u.col(c) = -u.col(c);
            }
            s.factor_mean[n] = u;
        }
    } else {
        std::mt19937_64 rng(cfg.seed);
        std::normal_distribution<double> nd;
        for (Index n = 0; n < nmodes; ++n) {
            Matrix u(y.shape[n], rank[n]);
            for (Index c = 0; c < u.cols(); ++c)
                for (Index r = 0; r < u.rows(); ++r) u(r, c) = nd(rng);
            s.factor_mean[n] = u;
        }
    }

    s.lambda.assign(nmodes, ModeLambda{});
    for (Index n = 0; n < nmodes; ++n) {
        s.lambda[n].mean = Vector::Ones(rank[n]);
        s.lambda[n].post_a = Vector::Ones(rank[n]);
        s.lambda[n].post_b = Vector::Ones(rank[n]);
        s.lambda[n].is_gig = (cfg.prior == PriorFamily::laplace);
        if (s.lambda[n].is_gig) {
            s.lambda[n].inv_mean = Vector::Ones(rank[n]);
            s.lambda[n].gig_h = 1.0;
        }
    }
    s.beta = GammaPosterior{1.0, 1.0};
    s.gamma = GammaPosterior{1.0, 1.0};
    s.tau = GammaPosterior{1.0, observed_var > 0 ? observed_var : 1.0};
}

}  // namespace detail

/// E[U^(n)^T U^(n)] = Utilde^T Utilde + I_n Psi^(n).
inline Matrix factor_second_moment(const PosteriorState& s, Index n) {
    const Matrix& u = s.base.factor_mean[static_cast<size_t>(n)];
    return u.transpose() * u + static_cast<double>(u.rows()) * s.factor_cov[static_cast<size_t>(n)];
}

inline Vector factor_col_sq_norm(const PosteriorState& s, Index n) {
    const Matrix& u = s.base.factor_mean[static_cast<size_t>(n)];
    return u.colwise().squaredNorm().transpose() +
           static_cast<double>(u.rows()) * s.factor_cov[static_cast<size_t>(n)].diagonal();
}

inline void update_core(PosteriorState& s, const DenseTensor& y, const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    const Index nmodes = b.order();
    std::vector<Matrix> sigmas(nmodes);
    for (Index n = 0; n < nmodes; ++n) sigmas[n] = factor_second_moment(s, n);
    s.core_cov = kron_eig_solve(b.lambda_means(), sigmas, b.beta.mean(), b.tau.mean());

    DenseTensor proj = y;
    for (Index n = 0; n < nmodes; ++n) proj = ttm(proj, b.factor_mean[static_cast<size_t>(n)].transpose(), n);
    Vector g = b.tau.mean() * s.core_cov.apply(proj.data);
    b.core_mean = DenseTensor(b.core_mean.shape, g);
    b.core_sq = b.core_mean;
    b.core_sq.data = g.cwiseProduct(g);
    if (cfg.exact_expectations) b.core_sq.data += s.core_cov.diagonal();
}

inline void update_factors(PosteriorState& s, const DenseTensor& y, Index n, const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    const Index nmodes = b.order();
    std::vector<Matrix> w(nmodes);
    for (Index k = 0; k < nmodes; ++k)
        if (k != n) w[k] = factor_second_moment(s, k);

    // E[G_(n) (kron_{k!=n} W^(k)) G_(n)^T]: mean part by a ttm chain, exact
    // covariance part from the factored Sigma_G.
    DenseTensor z = b.core_mean;
    for (Index k = 0; k < nmodes; ++k)
        if (k != n) z = ttm(z, w[k], k);
    Matrix quad = unfold(b.core_mean, n) * unfold(z, n).transpose();
    if (cfg.exact_expectations && !s.core_cov.empty()) {
        DenseTensor d(b.core_mean.shape, s.core_cov.inv_diag);
        for (Index k = 0; k < nmodes; ++k) {
            if (k == n) continue;
            const Matrix& bk = s.core_cov.b[static_cast<size_t>(k)];
            const Vector dq = (bk.transpose() * w[k] * bk).diagonal();
            d = ttm(d, detail::row_vector(dq), k);
        }
        const Vector t = unfold(d, n).col(0);
        const Matrix& bn = s.core_cov.b[static_cast<size_t>(n)];
        quad += bn * t.asDiagonal() * bn.transpose();
    }

    Matrix prec = Matrix(b.lambda[static_cast<size_t>(n)].mean.asDiagonal()) + b.tau.mean() * quad;
    Matrix psi = detail::solve_spd(prec, "update_factors");
    s.factor_cov[static_cast<size_t>(n)] = 0.5 * (psi + psi.transpose());

    DenseTensor proj = y;
    for (Index k = 0; k < nmodes; ++k)
        if (k != n) proj = ttm(proj, b.factor_mean[static_cast<size_t>(k)].transpose(), k);
    b.factor_mean[static_cast<size_t>(n)] =
        b.tau.mean() * unfold(proj, n) * unfold(b.core_mean, n).transpose() * s.factor_cov[static_cast<size_t>(n)];
}

inline void update_beta(PosteriorState& s, const FitConfig& cfg) { detail::update_beta_shared(s.base, cfg); }

inline void update_lambda(PosteriorState& s, Index n, const FitConfig& cfg) {
    detail::update_lambda_shared(s.base, n, factor_col_sq_norm(s, n), cfg);
}

inline void update_gamma(PosteriorState& s, const FitConfig& cfg) { detail::update_gamma_shared(s.base, cfg); }

namespace detail {

/// E[|| vec(Y) - (kron U) vec(G) ||^2] under the current posterior, the
/// three-term expansion shared by the tau update and the bound.
inline double residual_expectation(const PosteriorState& s, const DenseTensor& y, const FitConfig& cfg) {
    const TuckerPosterior& b = s.base;
    const Index nmodes = b.order();
    DenseTensor proj = y;
    for (Index n = 0; n < nmodes; ++n) proj = ttm(proj, b.factor_mean[static_cast<size_t>(n)].transpose(), n);
    const double cross = proj.data.dot(b.core_mean.data);

    std::vector<Matrix> w(nmodes);
    for (Index n = 0; n < nmodes; ++n) w[n] = factor_second_moment(s, n);
    double trace = b.core_mean.data.dot(kron_apply(w, b.core_mean.data));
    if (cfg.exact_expectations && !s.core_cov.empty()) {
        DenseTensor d(b.core_mean.shape, s.core_cov.inv_diag);
        for (Index n = 0; n < nmodes; ++n) {
            const Matrix& bn = s.core_cov.b[static_cast<size_t>(n)];
            const Vector dq = (bn.transpose() * w[n] * bn).diagonal();
            d = ttm(d, row_vector(dq), n);
        }
        trace += d.data[0];
    }
    return y.squared_norm() - 2.0 * cross + trace;
}

}  // namespace detail

inline void update_tau(PosteriorState& s, const DenseTensor& y, const FitConfig& cfg) {
    const double resid = detail::residual_expectation(s, y, cfg);
    s.base.tau.a = cfg.a0_tau + 0.5 * static_cast<double>(y.size());
    const double b = cfg.b0_tau + 0.5 * resid;
    if (!(b > 0)) throw NumericalError("update_tau: nonpositive posterior rate (broken expectations)");
    s.base.tau.b = b;
}

inline double lower_bound(const PosteriorState& s, const DenseTensor& y, const FitConfig& cfg) {
    const TuckerPosterior& b = s.base;
    const double ln2pi = std::log(2.0 * M_PI);
    const double p = static_cast<double>(y.size());

    double l = 0.5 * p * (b.tau.mean_log() - ln2pi) - 0.5 * b.tau.mean() * detail::residual_expectation(s, y, cfg);

    std::vector<Vector> col_sq(b.order());
    for (Index n = 0; n < b.order(); ++n) col_sq[static_cast<size_t>(n)] = factor_col_sq_norm(s, n);
    l += detail::gaussian_prior_bound_terms(b, col_sq);
    l += detail::hyper_bound_terms(b, cfg);

    const double pr = static_cast<double>(b.rank_total());
    l += 0.5 * (pr * (1.0 + ln2pi) + s.core_cov.log_det());
    for (Index n = 0; n < b.order(); ++n) {
        const double in = static_cast<double>(b.data_shape[n]);
        const double rn = static_cast<double>(b.core_mean.shape[n]);
        l += in * 0.5 * (rn * (1.0 + ln2pi) + detail::log_det_spd(s.factor_cov[static_cast<size_t>(n)]));
    }
    if (!std::isfinite(l)) throw NumericalError("lower_bound: non-finite value");
    return l;
}

inline void prune(PosteriorState& s, const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    // Slice power is measured on the posterior-mean core: the prior-scale
    // variance floor in E[G^2] would otherwise keep uniformly dead modes
    // looking alive under a relative threshold.
    DenseTensor mean_sq = b.core_mean;
    mean_sq.data = b.core_mean.data.cwiseProduct(b.core_mean.data);
    std::vector<Vector> u_measure(b.order()), g_measure(b.order());
    for (Index n = 0; n < b.order(); ++n) {
        u_measure[static_cast<size_t>(n)] =
            b.factor_mean[static_cast<size_t>(n)].cwiseAbs().colwise().maxCoeff().transpose();
        g_measure[static_cast<size_t>(n)] = detail::slice_power(mean_sq, n);
    }
    const auto keep = detail::prune_keep(u_measure, g_measure, cfg.prune_tol);
    bool any = false;
    for (Index n = 0; n < b.order(); ++n)
        if (static_cast<Index>(keep[static_cast<size_t>(n)].size()) != b.core_mean.shape[n]) any = true;
    if (!any) return;
    for (Index n = 0; n < b.order(); ++n) {
        const auto& k = keep[static_cast<size_t>(n)];
        if (static_cast<Index>(k.size()) == b.core_mean.shape[n]) continue;
        s.factor_cov[static_cast<size_t>(n)] = detail::take_rows_cols(s.factor_cov[static_cast<size_t>(n)], k);
    }
    detail::apply_keep_shared(b, keep);
    s.core_cov = KronEigFactored{};  // stale; rebuilt by the next core update
}

inline std::tuple<TuckerModel, PosteriorState, FitReport> fit_btd(const DenseTensor& y, const FitConfig& cfg) {
    cfg.validate();
    if (!y.data.allFinite()) throw std::invalid_argument("fit_btd: input tensor must be finite");

    PosteriorState s;
    const double mean = y.data.mean();
    const double var = y.data.squaredNorm() / y.size() - mean * mean;
    detail::init_shared(s.base, y, var, cfg);
    s.factor_cov.resize(y.order());
    for (Index n = 0; n < y.order(); ++n)
        s.factor_cov[static_cast<size_t>(n)] = Matrix::Zero(s.base.core_mean.shape[n], s.base.core_mean.shape[n]);

    FitReport report;
    int below = 0;
    for (int it = 0; it < cfg.max_iters; ++it) {
        update_core(s, y, cfg);
        for (Index n = 0; n < y.order(); ++n) update_factors(s, y, n, cfg);
        update_beta(s, cfg);
        for (Index n = 0; n < y.order(); ++n) update_lambda(s, n, cfg);
        if (cfg.prior == PriorFamily::laplace) update_gamma(s, cfg);
        update_tau(s, y, cfg);
        const double l = lower_bound(s, y, cfg);
        prune(s, cfg);
        report.iterations = it + 1;
        if (!report.lower_bound_trace.empty()) {
            const double prev = report.lower_bound_trace.back();
            const double rel = std::abs(l - prev) / (std::abs(prev) + 1e-300);
            below = (rel < cfg.tol) ? below + 1 : 0;
        }
        report.lower_bound_trace.push_back(l);
        if (below >= 2) {
            report.converged = true;
            break;
        }
    }

    TuckerModel model{s.base.core_mean, s.base.factor_mean};
    const DenseTensor recon = reconstruct(model);
    const double power = recon.squared_norm();
    report.inferred_rank = s.base.rank();
    report.estimated_snr_db = 10.0 * std::log10(power * s.base.tau.mean() / static_cast<double>(y.size()));
    return {model, s, report};
}

}  // namespace bst
