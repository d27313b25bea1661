#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bst {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Thrown when an update detects broken numerics (non-PD systems,
/// nonpositive posterior rates, non-finite bounds). The CLI maps this
/// to exit code 2.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor order must be >= 1");
    Index n = 1;
    for (Index d : shape) {
        if (d < 1) throw std::invalid_argument("tensor dimensions must be >= 1");
        n *= d;
    }
    return n;
}

/// Dense N-way array. Flat storage is colexicographic: the first index
/// varies fastest, so vec(X) pairs with the reversed-order Kronecker
/// convention used throughout.
struct DenseTensor {
    Shape shape;
    Vector data;

    DenseTensor() = default;
    explicit DenseTensor(Shape s) : shape(std::move(s)), data(Vector::Zero(numel(shape))) {}
    DenseTensor(Shape s, Vector d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw std::invalid_argument("tensor data length does not match shape");
    }

    Index order() const { return static_cast<Index>(shape.size()); }
    Index size() const { return data.size(); }

    Index flat_index(const std::vector<Index>& idx) const {
        if (static_cast<Index>(idx.size()) != order())
            throw std::invalid_argument("index arity mismatch");
        Index flat = 0, stride = 1;
        for (Index n = 0; n < order(); ++n) {
            if (idx[n] < 0 || idx[n] >= shape[n]) throw std::out_of_range("tensor index out of range");
            flat += idx[n] * stride;
            stride *= shape[n];
        }
        return flat;
    }

    double operator()(const std::vector<Index>& idx) const { return data[flat_index(idx)]; }
    double& operator()(const std::vector<Index>& idx) { return data[flat_index(idx)]; }

    double squared_norm() const { return data.squaredNorm(); }
};

inline std::vector<Index> decode_index(const Shape& shape, Index flat) {
    std::vector<Index> idx(shape.size());
    for (size_t n = 0; n < shape.size(); ++n) {
        idx[n] = flat % shape[n];
        flat /= shape[n];
    }
    return idx;
}

inline Index mode_stride(const Shape& shape, Index n) {
    Index s = 1;
    for (Index k = 0; k < n; ++k) s *= shape[k];
    return s;
}

/// Mode-n unfolding, I_n x prod_{k!=n} I_k. Column ordering follows the
/// colexicographic order of the remaining indices, which makes
/// unfold(reconstruct(M), n) == U^(n) G_(n) (kron_{k!=n} U^(k)^T).
inline Matrix unfold(const DenseTensor& t, Index n) {
    if (n < 0 || n >= t.order()) throw std::invalid_argument("unfold: mode index out of range");
    const Index rows = t.shape[n];
    const Index cols = t.size() / rows;
    const Index stride = mode_stride(t.shape, n);
    Matrix m(rows, cols);
    for (Index p = 0; p < t.size(); ++p) {
        const Index low = p % stride;
        const Index r = (p / stride) % rows;
        const Index high = p / (stride * rows);
        m(r, low + high * stride) = t.data[p];
    }
    return m;
}

inline DenseTensor fold(const Matrix& m, Index n, const Shape& shape) {
    if (n < 0 || n >= static_cast<Index>(shape.size()))
        throw std::invalid_argument("fold: mode index out of range");
    const Index total = numel(shape);
    if (m.rows() != shape[n] || m.rows() * m.cols() != total)
        throw std::invalid_argument("fold: matrix dimensions inconsistent with shape");
    const Index stride = mode_stride(shape, n);
    DenseTensor t(shape);
    for (Index p = 0; p < total; ++p) {
        const Index low = p % stride;
        const Index r = (p / stride) % shape[n];
        const Index high = p / (stride * shape[n]);
        t.data[p] = m(r, low + high * stride);
    }
    return t;
}

/// Mode-n tensor-times-matrix product: replaces dimension I_n by m.rows().
inline DenseTensor ttm(const DenseTensor& t, const Matrix& m, Index n) {
    if (n < 0 || n >= t.order()) throw std::invalid_argument("ttm: mode index out of range");
    if (m.cols() != t.shape[n]) throw std::invalid_argument("ttm: matrix column count != mode dimension");
    Shape out = t.shape;
    out[n] = m.rows();
    return fold(m * unfold(t, n), n, out);
}

struct TuckerModel {
    DenseTensor core;
    std::vector<Matrix> factors;  // factor n: I_n x R_n

    void validate() const {
        if (static_cast<Index>(factors.size()) != core.order())
            throw std::invalid_argument("TuckerModel: factor count != core order");
        for (Index n = 0; n < core.order(); ++n)
            if (factors[n].cols() != core.shape[n])
                throw std::invalid_argument("TuckerModel: factor column count != core dimension");
    }
};

/// G x_1 U^(1) ... x_N U^(N), evaluated as sequential mode products; the
/// big Kronecker matrix is never materialized.
inline DenseTensor reconstruct(const TuckerModel& model) {
    model.validate();
    DenseTensor t = model.core;
    for (Index n = 0; n < t.order(); ++n) t = ttm(t, model.factors[n], n);
    return t;
}

/// (kron_n M^(n)) v in the reversed-order convention, via sequential ttm
/// on the folded vector.
inline Vector kron_apply(const std::vector<Matrix>& mats, const Vector& v) {
    if (mats.empty()) throw std::invalid_argument("kron_apply: empty matrix list");
    Shape in(mats.size());
    for (size_t n = 0; n < mats.size(); ++n) in[n] = mats[n].cols();
    if (v.size() != numel(in)) throw std::invalid_argument("kron_apply: vector length mismatch");
    DenseTensor t(in, v);
    for (Index n = 0; n < t.order(); ++n) t = ttm(t, mats[n], n);
    return t.data;
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

/// kron_n diag(v^(n)) as the flat diagonal vector, colexicographic order.
inline Vector kron_diag(const std::vector<Vector>& vs) {
    Vector out = Vector::Ones(1);
    for (const Vector& v : vs) {
        Vector next(out.size() * v.size());
        for (Index j = 0; j < v.size(); ++j) next.segment(j * out.size(), out.size()) = v[j] * out;
        out.swap(next);
    }
    return out;
}

struct SymEig {
    Vector eigenvalues;   // ascending
    Matrix eigenvectors;  // columns
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Converges when
/// the off-diagonal norm drops below 1e-12 * ||A||_F; capped at 100 sweeps.
inline SymEig symm_eig(const Matrix& a) {
    const Index d = a.rows();
    if (d < 1 || a.cols() != d) throw std::invalid_argument("symm_eig: matrix must be square, d >= 1");
    const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw std::invalid_argument("symm_eig: input not symmetric");

    Matrix m = 0.5 * (a + a.transpose());
    Matrix v = Matrix::Identity(d, d);
    const double norm = m.norm();
    const double tol = 1e-12 * norm;

    bool converged = (d == 1);
    for (int sweep = 0; sweep < 100 && !converged; ++sweep) {
        double off = 0;
        for (Index p = 0; p < d; ++p)
            for (Index q = p + 1; q < d; ++q) off += 2 * m(p, q) * m(p, q);
        if (std::sqrt(off) <= tol) {
            converged = true;
            break;
        }
        for (Index p = 0; p < d; ++p) {
            for (Index q = p + 1; q < d; ++q) {
                if (m(p, q) == 0.0) continue;
                const double theta = (m(q, q) - m(p, p)) / (2 * m(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (Index k = 0; k < d; ++k) {
                    const double mkp = m(k, p), mkq = m(k, q);
                    m(k, p) = c * mkp - s * mkq;
                    m(k, q) = s * mkp + c * mkq;
                }
                for (Index k = 0; k < d; ++k) {
                    const double mpk = m(p, k), mqk = m(q, k);
                    m(p, k) = c * mpk - s * mqk;
                    m(q, k) = s * mpk + c * mqk;
                }
                m(p, q) = m(q, p) = 0.0;
                for (Index k = 0; k < d; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    if (!converged) {
        double off = 0;
        for (Index p = 0; p < d; ++p)
            for (Index q = p + 1; q < d; ++q) off += 2 * m(p, q) * m(p, q);
        if (std::sqrt(off) > tol) throw NumericalError("symm_eig: Jacobi sweeps did not converge");
    }

    std::vector<Index> perm(d);
    for (Index i = 0; i < d; ++i) perm[i] = i;
    std::stable_sort(perm.begin(), perm.end(), [&](Index i, Index j) { return m(i, i) < m(j, j); });
    SymEig out;
    out.eigenvalues.resize(d);
    out.eigenvectors.resize(d, d);
    for (Index i = 0; i < d; ++i) {
        out.eigenvalues[i] = m(perm[i], perm[i]);
        out.eigenvectors.col(i) = v.col(perm[i]);
    }
    return out;
}

/// Index set of observed entries plus the shape it refers to. Entries are
/// stored as sorted unique colexicographic flat indices, which is the same
/// ordering as sorting the N-tuples colexicographically.
struct ObservationSet {
    Shape shape;
    std::vector<Index> flat;  // sorted, unique

    ObservationSet() = default;
    ObservationSet(Shape s, std::vector<Index> f) : shape(std::move(s)), flat(std::move(f)) {
        const Index total = numel(shape);
        if (!std::is_sorted(flat.begin(), flat.end()))
            throw std::invalid_argument("ObservationSet: indices must be sorted");
        if (std::adjacent_find(flat.begin(), flat.end()) != flat.end())
            throw std::invalid_argument("ObservationSet: duplicate indices");
        if (!flat.empty() && (flat.front() < 0 || flat.back() >= total))
            throw std::invalid_argument("ObservationSet: index out of range");
    }

    static ObservationSet full(const Shape& s) {
        std::vector<Index> f(numel(s));
        for (Index i = 0; i < static_cast<Index>(f.size()); ++i) f[i] = i;
        return ObservationSet(s, std::move(f));
    }

    static ObservationSet from_tuples(Shape s, const std::vector<std::vector<Index>>& tuples) {
        DenseTensor probe(s);
        std::vector<Index> f;
        f.reserve(tuples.size());
        for (const auto& t : tuples) f.push_back(probe.flat_index(t));
        std::sort(f.begin(), f.end());
        return ObservationSet(std::move(s), std::move(f));
    }

    Index count() const { return static_cast<Index>(flat.size()); }
    bool is_full() const { return count() == numel(shape); }

    DenseTensor mask() const {
        DenseTensor m(shape);
        for (Index p : flat) m.data[p] = 1.0;
        return m;
    }
};

}  // namespace bst
