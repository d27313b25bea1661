#pragma once

#include "bst/btd.hpp"

#include <tuple>
#include <vector>

namespace bst {

/// Completion posterior: per-row factor covariances, and a core covariance
/// that is either the explicit prod(R) x prod(R) matrix (closed-form path)
/// or a diagonal proxy (conjugate-gradient path).
struct BtcState {
    TuckerPosterior base;
    std::vector<std::vector<Matrix>> row_cov;  // Psi^(n)_{i_n}
    std::vector<std::vector<Matrix>> phi;      // Phi^(n)_{i_n} cache, per mode
    Matrix core_cov;                           // explicit Sigma_G; empty on the CG path
    Vector core_cov_diag;                      // diag(Sigma_G) or the CG diagonal proxy
    double core_logdet = 0.0;
    bool cg_path = false;
};

struct PredictiveResult {
    DenseTensor mean;
    DenseTensor variance;  // E[tau]^{-1} + sigma^2 per cell
};

namespace detail {

/// E[u_{i_n} u_{i_n}^T] per mode per row.
inline std::vector<std::vector<Matrix>> row_second_moments(const BtcState& s) {
    std::vector<std::vector<Matrix>> w(s.base.order());
    for (Index n = 0; n < s.base.order(); ++n) {
        const Matrix& u = s.base.factor_mean[static_cast<size_t>(n)];
        w[static_cast<size_t>(n)].resize(u.rows());
        for (Index i = 0; i < u.rows(); ++i)
            w[static_cast<size_t>(n)][static_cast<size_t>(i)] =
                u.row(i).transpose() * u.row(i) + s.row_cov[static_cast<size_t>(n)][static_cast<size_t>(i)];
    }
    return w;
}

inline Vector btc_col_sq_norm(const BtcState& s, Index n) {
    const Matrix& u = s.base.factor_mean[static_cast<size_t>(n)];
    Vector out = u.colwise().squaredNorm().transpose();
    for (const Matrix& psi : s.row_cov[static_cast<size_t>(n)]) out += psi.diagonal();
    return out;
}

/// Sum over observations of kron_{k != n} W^(k, i_k), grouped by the mode-n
/// index; the Kronecker factor is grown per observation by small products.
inline std::vector<Matrix> build_phi_rows(const std::vector<std::vector<Matrix>>& w, const ObservationSet& obs,
                                          Index n) {
    const Shape& shape = obs.shape;
    const Index nmodes = static_cast<Index>(shape.size());
    Index others = 1;
    for (Index k = 0; k < nmodes; ++k)
        if (k != n) others *= w[static_cast<size_t>(k)].front().rows();
    std::vector<Matrix> phi(shape[n], Matrix::Zero(others, others));
    for (Index flat : obs.flat) {
        const std::vector<Index> idx = decode_index(shape, flat);
        Matrix k = Matrix::Ones(1, 1);
        for (Index m = 0; m < nmodes; ++m) {
            if (m == n) continue;
            k = kron(w[static_cast<size_t>(m)][static_cast<size_t>(idx[m])], k).eval();
        }
        phi[idx[n]] += k;
    }
    return phi;
}

/// Sigma over observations of kron_n W^(n, i_n), assembled as
/// sum_i W^(last, i) kron Phi^(last)_i.
inline Matrix assemble_precision_sum(const std::vector<std::vector<Matrix>>& w, const std::vector<Matrix>& phi_last) {
    const Index last_dim = static_cast<Index>(phi_last.size());
    const Index r_last = w.back().front().rows();
    const Index others = phi_last.front().rows();
    Matrix s = Matrix::Zero(r_last * others, r_last * others);
    for (Index i = 0; i < last_dim; ++i) s += kron(w.back()[static_cast<size_t>(i)], phi_last[static_cast<size_t>(i)]);
    return s;
}

/// Quadratic observation problem behind q(G): 0.5 g^T P g - tau rhs^T g with
/// P = beta diag(kron lambda) + tau sum_i kron_n W^(n, i_n). Matrix-vector
/// products run per observation with sequential small mode products.
struct CgProblem {
    Shape rank;
    Vector lam_kron;
    double beta = 1, tau = 1;
    Vector rhs;  // sum_i Y_i kron_n E[u_{i_n}]
    const std::vector<std::vector<Matrix>>* w = nullptr;
    const ObservationSet* obs = nullptr;

    Vector data_apply(const Vector& g) const {  // (sum_i kron W_i) g
        DenseTensor acc(rank);
        for (Index flat : obs->flat) {
            const std::vector<Index> idx = decode_index(obs->shape, flat);
            DenseTensor z(rank, g);
            for (Index n = 0; n < static_cast<Index>(rank.size()); ++n)
                z = ttm(z, (*w)[static_cast<size_t>(n)][static_cast<size_t>(idx[n])], n);
            acc.data += z.data;
        }
        return acc.data;
    }

    Vector hess_apply(const Vector& g) const {
        return beta * lam_kron.cwiseProduct(g) + tau * data_apply(g);
    }

    Vector grad(const Vector& g) const { return hess_apply(g) - tau * rhs; }

    double value(const Vector& g) const {
        return 0.5 * g.dot(hess_apply(g)) - tau * rhs.dot(g);
    }

    Vector hess_diag() const {
        DenseTensor acc(rank);
        for (Index flat : obs->flat) {
            const std::vector<Index> idx = decode_index(obs->shape, flat);
            std::vector<Vector> diags(rank.size());
            for (size_t n = 0; n < rank.size(); ++n)
                diags[n] = (*w)[n][static_cast<size_t>(idx[n])].diagonal();
            acc.data += kron_diag(diags);
        }
        return beta * lam_kron + tau * acc.data;
    }
};

inline CgProblem make_cg_problem(const BtcState& s, const DenseTensor& y, const ObservationSet& obs,
                                 const std::vector<std::vector<Matrix>>& w) {
    CgProblem p;
    p.rank = s.base.rank();
    p.lam_kron = kron_diag(s.base.lambda_means());
    p.beta = s.base.beta.mean();
    p.tau = s.base.tau.mean();
    DenseTensor proj = y;
    for (Index n = 0; n < s.base.order(); ++n) proj = ttm(proj, s.base.factor_mean[static_cast<size_t>(n)].transpose(), n);
    p.rhs = proj.data;
    p.w = &w;
    p.obs = &obs;
    return p;
}

/// E[sum_omega (Y_i - (kron u_i^T) vec G)^2]: the three-term expansion over
/// observed entries only. y must be zero-filled off the observation set.
inline double btc_residual(const BtcState& s, const DenseTensor& y, const ObservationSet& obs,
                           const FitConfig& cfg) {
    const TuckerPosterior& b = s.base;
    const std::vector<std::vector<Matrix>> w = row_second_moments(s);
    DenseTensor proj = y;
    for (Index n = 0; n < b.order(); ++n) proj = ttm(proj, b.factor_mean[static_cast<size_t>(n)].transpose(), n);
    const double cross = proj.data.dot(b.core_mean.data);

    double trace;
    const Index pr = b.rank_total();
    if (!s.cg_path && pr <= cfg.core_cap) {
        const std::vector<Matrix> phi_last = build_phi_rows(w, obs, b.order() - 1);
        const Matrix smat = assemble_precision_sum(w, phi_last);
        trace = b.core_mean.data.dot(smat * b.core_mean.data);
        if (cfg.exact_expectations && s.core_cov.size() > 0)
            trace += (s.core_cov.cwiseProduct(smat)).sum();
    } else {
        CgProblem p;
        p.rank = b.rank();
        p.lam_kron = Vector::Zero(pr);
        p.beta = 0;
        p.tau = 1;
        p.rhs = Vector::Zero(pr);
        p.w = &w;
        p.obs = &obs;
        trace = b.core_mean.data.dot(p.data_apply(b.core_mean.data));
        if (cfg.exact_expectations && s.core_cov_diag.size() > 0) {
            DenseTensor acc(b.rank());
            for (Index flat : obs.flat) {
                const std::vector<Index> idx = decode_index(obs.shape, flat);
                std::vector<Vector> diags(w.size());
                for (size_t n = 0; n < w.size(); ++n) diags[n] = w[n][static_cast<size_t>(idx[n])].diagonal();
                acc.data += kron_diag(diags);
            }
            trace += s.core_cov_diag.dot(acc.data);
        }
    }
    return y.squared_norm() - 2.0 * cross + trace;
}

}  // namespace detail

/// Refresh the Phi cache of mode n from the current factor posteriors.
inline void build_phi(BtcState& s, const ObservationSet& obs, Index n) {
    if (s.phi.empty()) s.phi.resize(s.base.order());
    s.phi[static_cast<size_t>(n)] = detail::build_phi_rows(detail::row_second_moments(s), obs, n);
}

inline void update_core_closed(BtcState& s, const DenseTensor& y, const ObservationSet& obs,
                               const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    const Index pr = b.rank_total();
    if (pr > cfg.core_cap) throw std::invalid_argument("update_core_closed: prod R_n exceeds core_cap");
    const std::vector<std::vector<Matrix>> w = detail::row_second_moments(s);
    const Index last = b.order() - 1;
    const std::vector<Matrix> phi_last = detail::build_phi_rows(w, obs, last);
    const Matrix smat = detail::assemble_precision_sum(w, phi_last);

    Matrix prec = Matrix(kron_diag(b.lambda_means()).asDiagonal()) * b.beta.mean() + b.tau.mean() * smat;
    prec = 0.5 * (prec + prec.transpose()).eval();
    prec.diagonal().array() += 1e-12 * prec.trace();
    Eigen::LLT<Matrix> llt(prec);
    if (llt.info() != Eigen::Success) {
        prec.diagonal().array() += 1e-8 * prec.trace();
        llt.compute(prec);
        if (llt.info() != Eigen::Success) throw NumericalError("update_core_closed: precision not positive definite");
    }
    s.core_cov = llt.solve(Matrix::Identity(pr, pr));
    s.core_cov = 0.5 * (s.core_cov + s.core_cov.transpose()).eval();
    s.core_cov_diag = s.core_cov.diagonal();
    s.core_logdet = -2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
    s.cg_path = false;

    DenseTensor proj = y;
    for (Index n = 0; n < b.order(); ++n) proj = ttm(proj, b.factor_mean[static_cast<size_t>(n)].transpose(), n);
    b.core_mean = DenseTensor(b.rank(), b.tau.mean() * (s.core_cov * proj.data));
    b.core_sq = b.core_mean;
    b.core_sq.data = b.core_mean.data.cwiseProduct(b.core_mean.data);
    if (cfg.exact_expectations) b.core_sq.data += s.core_cov_diag;
}

/// Polak-Ribiere conjugate gradients on -ln q(G). The objective is quadratic,
/// so the line search starts from the exact quadratic step and Armijo
/// backtracking only guards against numerical failure.
inline void update_core_cg(BtcState& s, const DenseTensor& y, const ObservationSet& obs, const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    const std::vector<std::vector<Matrix>> w = detail::row_second_moments(s);
    detail::CgProblem p = detail::make_cg_problem(s, y, obs, w);
    const Index pr = b.rank_total();

    Vector g = b.core_mean.data;
    Vector grad = p.grad(g);
    const double g0 = grad.norm();
    Vector dir = -grad;
    int since_restart = 0;
    for (int it = 0; it < cfg.cg_iters && grad.norm() > cfg.cg_tol * std::max(g0, 1e-300); ++it) {
        const Vector hd = p.hess_apply(dir);
        const double dhd = dir.dot(hd);
        const double gd = grad.dot(dir);
        double alpha;
        if (dhd > 0) {
            alpha = -gd / dhd;
        } else {
            alpha = 1.0;  // fall back to a unit steepest-descent-style step
        }
        // Armijo backtracking (c = 1e-4); with the exact quadratic step this
        // accepts immediately unless the curvature information was bad.
        const double f0 = p.value(g);
        int backtracks = 0;
        while (p.value(g + alpha * dir) > f0 + 1e-4 * alpha * gd && backtracks < 60) {
            alpha *= 0.5;
            ++backtracks;
        }
        if (backtracks == 60) {  // line-search failure: steepest descent step
            g -= grad / std::max(p.hess_diag().maxCoeff(), 1e-300);
            grad = p.grad(g);
            dir = -grad;
            since_restart = 0;
            continue;
        }
        g += alpha * dir;
        Vector grad_new = grad + alpha * hd;
        const double beta_pr = std::max(0.0, grad_new.dot(grad_new - grad) / std::max(grad.dot(grad), 1e-300));
        ++since_restart;
        if (since_restart >= pr) {
            dir = -grad_new;
            since_restart = 0;
        } else {
            dir = -grad_new + beta_pr * dir;
        }
        grad = grad_new;
    }

    b.core_mean = DenseTensor(b.rank(), g);
    s.core_cov = Matrix();
    s.core_cov_diag = p.hess_diag().cwiseInverse();
    s.core_logdet = s.core_cov_diag.array().log().sum();
    s.cg_path = true;
    b.core_sq = b.core_mean;
    b.core_sq.data = g.cwiseProduct(g);
    if (cfg.exact_expectations) b.core_sq.data += s.core_cov_diag;
}

inline void update_factor_rows(BtcState& s, const DenseTensor& y, const ObservationSet& obs, Index n,
                               const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    const auto& phi = s.phi.at(static_cast<size_t>(n));
    const Index rn = b.rank()[n];
    const Index others = b.rank_total() / rn;
    const Index stride = mode_stride(b.rank(), n);

    DenseTensor proj = y;
    for (Index k = 0; k < b.order(); ++k)
        if (k != n) proj = ttm(proj, b.factor_mean[static_cast<size_t>(k)].transpose(), k);
    const Matrix rhs_rows = unfold(proj, n);       // I_n x others
    const Matrix gn = unfold(b.core_mean, n);      // R_n x others

    // Gathered core second-moment map: q[(r,r'), (c,c')] = Sigma_G[(r,c),(r',c')]
    Matrix q;
    std::vector<Index> colmap(others);
    {
        Index c = 0;
        for (Index high = 0; high < b.rank_total() / (stride * rn); ++high)
            for (Index low = 0; low < stride; ++low) colmap[c++] = low + high * stride * rn;
    }
    const bool exact_cov = cfg.exact_expectations && !s.cg_path && s.core_cov.size() > 0;
    if (exact_cov) {
        q.resize(rn * rn, others * others);
        for (Index cp = 0; cp < others; ++cp)
            for (Index c = 0; c < others; ++c)
                for (Index rp = 0; rp < rn; ++rp)
                    for (Index r = 0; r < rn; ++r)
                        q(r + rn * rp, c + others * cp) = s.core_cov(colmap[c] + r * stride, colmap[cp] + rp * stride);
    }

    const double tau = b.tau.mean();
    const Matrix lam_diag = Matrix(b.lambda[static_cast<size_t>(n)].mean.asDiagonal());
    Matrix& mean = b.factor_mean[static_cast<size_t>(n)];
    auto& psis = s.row_cov[static_cast<size_t>(n)];
    for (Index i = 0; i < b.data_shape[n]; ++i) {
        const Matrix& phi_i = phi[static_cast<size_t>(i)];
        Matrix quad = gn * phi_i * gn.transpose();
        if (exact_cov) {
            const Vector cvec = q * Eigen::Map<const Vector>(phi_i.data(), phi_i.size());
            quad += Eigen::Map<const Matrix>(cvec.data(), rn, rn);
        } else if (cfg.exact_expectations && s.core_cov_diag.size() > 0) {
            Vector diag_corr = Vector::Zero(rn);
            for (Index r = 0; r < rn; ++r)
                for (Index c = 0; c < others; ++c) diag_corr[r] += s.core_cov_diag[colmap[c] + r * stride] * phi_i(c, c);
            quad += Matrix(diag_corr.asDiagonal());
        }
        const Matrix psi = detail::solve_spd(lam_diag + tau * quad, "update_factor_rows");
        psis[static_cast<size_t>(i)] = 0.5 * (psi + psi.transpose());
        mean.row(i) = tau * (psis[static_cast<size_t>(i)] * gn * rhs_rows.row(i).transpose()).transpose();
    }
}

inline void update_tau_obs(BtcState& s, const DenseTensor& y, const ObservationSet& obs, const FitConfig& cfg) {
    const double resid = detail::btc_residual(s, y, obs, cfg);
    s.base.tau.a = cfg.a0_tau + 0.5 * static_cast<double>(obs.count());
    const double b = cfg.b0_tau + 0.5 * resid;
    if (!(b > 0)) throw NumericalError("update_tau_obs: nonpositive posterior rate");
    s.base.tau.b = b;
}

/// Predictive distribution over every cell: mean from the posterior-mean
/// model, variance E[tau]^{-1} + sigma^2 with the parameter-uncertainty term
/// assembled from per-mode second moments.
inline PredictiveResult predict(const BtcState& s, const FitConfig& cfg) {
    const TuckerPosterior& b = s.base;
    const std::vector<std::vector<Matrix>> w = detail::row_second_moments(s);
    PredictiveResult out;
    out.mean = reconstruct({b.core_mean, b.factor_mean});

    DenseTensor trace_field(b.data_shape);
    if (!s.cg_path && s.core_cov.size() > 0) {
        // A = E[vec G vec G^T] contracted with kron_n W^(n, i_n) for every
        // cell at once: pair-mode tensor of A, then one ttm chain.
        const Index pr = b.rank_total();
        Matrix a = b.core_mean.data * b.core_mean.data.transpose();
        if (s.core_cov.size() > 0) a += s.core_cov;
        Shape pair_shape(b.rank().size());
        for (size_t n = 0; n < pair_shape.size(); ++n) pair_shape[n] = b.rank()[n] * b.rank()[n];
        DenseTensor at(pair_shape);
        for (Index col = 0; col < pr; ++col) {
            const std::vector<Index> cd = decode_index(b.rank(), col);
            for (Index row = 0; row < pr; ++row) {
                const std::vector<Index> rd = decode_index(b.rank(), row);
                Index flat = 0, stride = 1;
                for (size_t n = 0; n < pair_shape.size(); ++n) {
                    flat += (rd[n] + b.rank()[n] * cd[n]) * stride;
                    stride *= pair_shape[n];
                }
                at.data[flat] = a(row, col);
            }
        }
        for (Index n = 0; n < b.order(); ++n) {
            Matrix t(b.data_shape[n], pair_shape[static_cast<size_t>(n)]);
            for (Index i = 0; i < b.data_shape[n]; ++i) {
                const Matrix& wi = w[static_cast<size_t>(n)][static_cast<size_t>(i)];
                t.row(i) = Eigen::Map<const Vector>(wi.data(), wi.size()).transpose();
            }
            at = ttm(at, t, n);
        }
        trace_field = at;
    } else {
        // CG path: rank-one part per cell, diagonal proxy part by a chain.
        DenseTensor diag_part(b.rank(), s.core_cov_diag.size() > 0 ? s.core_cov_diag : Vector::Zero(b.rank_total()));
        for (Index n = 0; n < b.order(); ++n) {
            Matrix t(b.data_shape[n], b.rank()[n]);
            for (Index i = 0; i < b.data_shape[n]; ++i)
                t.row(i) = w[static_cast<size_t>(n)][static_cast<size_t>(i)].diagonal().transpose();
            diag_part = ttm(diag_part, t, n);
        }
        for (Index flat = 0; flat < trace_field.size(); ++flat) {
            const std::vector<Index> idx = decode_index(b.data_shape, flat);
            DenseTensor z = b.core_mean;
            for (Index n = 0; n < b.order(); ++n) z = ttm(z, w[static_cast<size_t>(n)][static_cast<size_t>(idx[n])], n);
            trace_field.data[flat] = z.data.dot(b.core_mean.data) + diag_part.data[flat];
        }
    }

    const double tau_inv = 1.0 / b.tau.mean();
    out.variance = DenseTensor(b.data_shape);
    for (Index i = 0; i < trace_field.size(); ++i) {
        double sigma2 = trace_field.data[i] - out.mean.data[i] * out.mean.data[i];
        if (sigma2 < -1e-12 * std::max(1.0, std::abs(trace_field.data[i])))
            throw NumericalError("predict: negative predictive variance (inconsistent second moments)");
        if (sigma2 < 0) sigma2 = 0;
        out.variance.data[i] = tau_inv + sigma2;
    }
    return out;
}

inline double lower_bound_btc(const BtcState& s, const DenseTensor& y, const ObservationSet& obs,
                              const FitConfig& cfg) {
    const TuckerPosterior& b = s.base;
    const double ln2pi = std::log(2.0 * M_PI);
    const double m = static_cast<double>(obs.count());

    double l = 0.5 * m * (b.tau.mean_log() - ln2pi) - 0.5 * b.tau.mean() * detail::btc_residual(s, y, obs, cfg);

    std::vector<Vector> col_sq(b.order());
    for (Index n = 0; n < b.order(); ++n) col_sq[static_cast<size_t>(n)] = detail::btc_col_sq_norm(s, n);
    l += detail::gaussian_prior_bound_terms(b, col_sq);
    l += detail::hyper_bound_terms(b, cfg);

    const double pr = static_cast<double>(b.rank_total());
    l += 0.5 * (pr * (1.0 + ln2pi) + s.core_logdet);
    for (Index n = 0; n < b.order(); ++n) {
        const double rn = static_cast<double>(b.rank()[n]);
        for (const Matrix& psi : s.row_cov[static_cast<size_t>(n)])
            l += 0.5 * (rn * (1.0 + ln2pi) + detail::log_det_spd(psi));
    }
    if (!std::isfinite(l)) throw NumericalError("lower_bound_btc: non-finite value");
    return l;
}

inline void prune_btc(BtcState& s, const FitConfig& cfg) {
    TuckerPosterior& b = s.base;
    // Same measures as the decomposition prune: posterior-mean column
    // amplitude and posterior-mean slice power. The per-row variance floor
    // sits at the prior scale ~1/lambda and would stall the relative
    // threshold indefinitely, so it stays out of the measure.
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
        if (static_cast<Index>(keep[static_cast<size_t>(n)].size()) != b.rank()[n]) any = true;
    if (!any) return;
    for (Index n = 0; n < b.order(); ++n) {
        const auto& k = keep[static_cast<size_t>(n)];
        if (static_cast<Index>(k.size()) == b.rank()[n]) continue;
        for (Matrix& psi : s.row_cov[static_cast<size_t>(n)]) psi = detail::take_rows_cols(psi, k);
    }
    detail::apply_keep_shared(b, keep);
    s.phi.clear();
    s.core_cov = Matrix();
    s.core_cov_diag = Vector();
    s.core_logdet = 0.0;
}

inline std::tuple<TuckerModel, BtcState, PredictiveResult, FitReport> fit_btc(const DenseTensor& y,
                                                                              const ObservationSet& obs,
                                                                              const FitConfig& cfg) {
    cfg.validate();
    if (obs.shape != y.shape) throw std::invalid_argument("fit_btc: observation set shape mismatch");
    if (obs.count() < 1) throw std::invalid_argument("fit_btc: need at least one observed entry");

    DenseTensor y0(y.shape);  // zero-filled outside the observation set
    for (Index flat : obs.flat) y0.data[flat] = y.data[flat];
    if (!y0.data.allFinite()) throw std::invalid_argument("fit_btc: observed entries must be finite");

    double mean = 0, sq = 0;
    for (Index flat : obs.flat) {
        mean += y0.data[flat];
        sq += y0.data[flat] * y0.data[flat];
    }
    mean /= static_cast<double>(obs.count());
    const double var = sq / static_cast<double>(obs.count()) - mean * mean;

    BtcState s;
    detail::init_shared(s.base, y0, var, cfg);
    s.row_cov.resize(y.order());
    for (Index n = 0; n < y.order(); ++n)
        s.row_cov[static_cast<size_t>(n)].assign(y.shape[n], Matrix::Zero(s.base.rank()[n], s.base.rank()[n]));

    FitReport report;
    int below = 0;
    for (int it = 0; it < cfg.max_iters; ++it) {
        if (s.base.rank_total() <= cfg.core_cap)
            update_core_closed(s, y0, obs, cfg);
        else
            update_core_cg(s, y0, obs, cfg);
        for (Index n = 0; n < y.order(); ++n) {
            build_phi(s, obs, n);
            update_factor_rows(s, y0, obs, n, cfg);
        }
        detail::update_beta_shared(s.base, cfg);
        for (Index n = 0; n < y.order(); ++n)
            detail::update_lambda_shared(s.base, n, detail::btc_col_sq_norm(s, n), cfg);
        if (cfg.prior == PriorFamily::laplace) detail::update_gamma_shared(s.base, cfg);
        update_tau_obs(s, y0, obs, cfg);
        const double l = lower_bound_btc(s, y0, obs, cfg);
        prune_btc(s, cfg);
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

    // Prune leaves the core covariance stale; rebuild it for the final state
    // so prediction sees consistent second moments.
    if (s.base.rank_total() <= cfg.core_cap)
        update_core_closed(s, y0, obs, cfg);
    else
        update_core_cg(s, y0, obs, cfg);

    TuckerModel model{s.base.core_mean, s.base.factor_mean};
    PredictiveResult pred = predict(s, cfg);
    report.inferred_rank = s.base.rank();
    const double power = pred.mean.squared_norm();
    report.estimated_snr_db =
        10.0 * std::log10(power * s.base.tau.mean() / static_cast<double>(y.size()));
    return {model, s, pred, report};
}

}  // namespace bst
