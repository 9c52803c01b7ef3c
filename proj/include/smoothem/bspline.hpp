#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace smoothem {

// Clamped B-spline basis of order m (degree m-1) with equispaced interior
// knots. Arbitrary domains are mapped affinely onto [0,1]; all derivative and
// integral quantities below are taken in unit-domain coordinates.
class KnotVector {
public:
    KnotVector(double lo, double hi, int interior_count, int order)
        : lo_(lo), hi_(hi), k0_(interior_count), m_(order) {
        if (!std::isfinite(lo) || !std::isfinite(hi) || !(lo < hi))
            throw std::invalid_argument("KnotVector: degenerate domain");
        if (m_ < 1) throw std::invalid_argument("KnotVector: order must be >= 1");
        if (k0_ < 0) throw std::invalid_argument("KnotVector: negative interior knot count");
        t_.reserve(k0_ + 2 * m_);
        for (int i = 0; i < m_; ++i) t_.push_back(0.0);
        for (int j = 1; j <= k0_; ++j) t_.push_back(double(j) / double(k0_ + 1));
        for (int i = 0; i < m_; ++i) t_.push_back(1.0);
    }

    int order() const { return m_; }
    int interior_count() const { return k0_; }
    int dimension() const { return k0_ + m_; }
    double lo() const { return lo_; }
    double hi() const { return hi_; }

    // Full clamped knot sequence in unit coordinates, length dimension() + order().
    const std::vector<double>& knots() const { return t_; }

    double to_unit(double x) const {
        double u = (x - lo_) / (hi_ - lo_);
        if (u < 0.0 || u > 1.0) {
            if (u > -1e-12 && u < 1.0 + 1e-12) return std::clamp(u, 0.0, 1.0);
            throw std::domain_error("KnotVector: x outside domain");
        }
        return u;
    }

    // Index s of the knot span [t_s, t_{s+1}) containing u; the last span is
    // closed so u = 1 is covered.
    int span_of(double u) const {
        int idx = int(std::floor(u * (k0_ + 1)));
        idx = std::clamp(idx, 0, k0_);
        // floating-point floor can land one span off right at a knot
        if (u < t_[m_ - 1 + idx] && idx > 0) --idx;
        else if (idx < k0_ && u >= t_[m_ + idx]) ++idx;
        return m_ - 1 + idx;
    }

    // The m nonzero basis values at x: vals[j] = N_{first+j}(x), j = 0..m-1.
    // Cox-de Boor recursion in its stable triangular form.
    void basis_at(double x, std::vector<double>& vals, int& first) const {
        double u = to_unit(x);
        int s = span_of(u);
        first = s - m_ + 1;
        vals.assign(m_, 0.0);
        std::vector<double> left(m_), right(m_);
        vals[0] = 1.0;
        for (int j = 1; j < m_; ++j) {
            left[j] = u - t_[s + 1 - j];
            right[j] = t_[s + j] - u;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                double temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
    }

    Eigen::VectorXd eval_basis(double x) const {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(dimension());
        std::vector<double> vals;
        int first = 0;
        basis_at(x, vals, first);
        for (int j = 0; j < m_; ++j) out[first + j] = vals[j];
        return out;
    }

    // Basis family of order m-1 over the same interior knots; hosts the
    // coefficients of first derivatives.
    KnotVector derivative_family() const {
        if (m_ < 2) throw std::invalid_argument("KnotVector: no derivative family for order 1");
        return KnotVector(lo_, hi_, k0_, m_ - 1);
    }

private:
    double lo_, hi_;
    int k0_, m_;
    std::vector<double> t_;
};

inline Eigen::MatrixXd design_matrix(const KnotVector& kv, const std::vector<double>& xs) {
    const int n = int(xs.size());
    const int m = kv.order();
    Eigen::MatrixXd N = Eigen::MatrixXd::Zero(n, kv.dimension());
    std::vector<double> vals;
    int first = 0;
    for (int i = 0; i < n; ++i) {
        kv.basis_at(xs[i], vals, first);
        for (int j = 0; j < m; ++j) N(i, first + j) = vals[j];
    }
    return N;
}

// Weighted difference operator: maps spline coefficients to the coefficients
// of the q-th derivative in the order-(m-q) family over the same knots.
// First-order form is W * D with D the plain first difference and W diagonal
// with entries (m-1)/(t_{k+m} - t_{k+1}); higher orders compose recursively
// through the derivative families.
inline Eigen::MatrixXd difference_operator(const KnotVector& kv, int q) {
    const int m = kv.order();
    if (q < 1 || q >= m) throw std::invalid_argument("difference_operator: need 1 <= q < order");
    const int K = kv.dimension();
    const auto& t = kv.knots();
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(K - 1, K);
    for (int k = 0; k + 1 < K; ++k) {
        double w = double(m - 1) / (t[k + m] - t[k + 1]);
        D(k, k) = -w;
        D(k, k + 1) = w;
    }
    if (q == 1) return D;
    return difference_operator(kv.derivative_family(), q - 1) * D;
}

namespace detail {

// Gauss-Legendre nodes/weights on [-1,1], Newton iteration on the Legendre
// recurrence.
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
            }
            dp = n * (z * p0 - p1) / (z * z - 1.0);
            double dz = p0 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
}

} // namespace detail

// Gram matrix G_{jk} = integral of N_j N_k over the unit domain, assembled
// span by span with an exact Gauss-Legendre rule.
inline Eigen::MatrixXd gram_matrix(const KnotVector& kv) {
    const int m = kv.order();
    const int K = kv.dimension();
    const auto& t = kv.knots();
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(K, K);
    std::vector<double> gx, gw;
    detail::gauss_legendre(m, gx, gw); // exact through degree 2m-1 >= 2(m-1)
    std::vector<double> vals;
    int first = 0;
    double width = kv.hi() - kv.lo();
    for (int s = m - 1; s < K; ++s) {
        double a = t[s], b = t[s + 1];
        if (b <= a) continue;
        for (int g = 0; g < m; ++g) {
            double u = 0.5 * (b - a) * gx[g] + 0.5 * (a + b);
            double wq = 0.5 * (b - a) * gw[g];
            kv.basis_at(kv.lo() + u * width, vals, first);
            for (int r = 0; r < m; ++r)
                for (int c = 0; c < m; ++c)
                    G(first + r, first + c) += wq * vals[r] * vals[c];
        }
    }
    return G;
}

struct PenaltyMatrix {
    int order = 0;            // q
    Eigen::MatrixXd matrix;   // K x K, symmetric PSD
    Eigen::MatrixXd root;     // C with C' C = matrix, (K-q) x K
};

// P_q such that a' P_q a = integral of the squared q-th derivative of the
// spline with coefficients a. The root factor C (from the Gram Cholesky)
// lets solvers treat the penalty as extra least-squares rows.
inline PenaltyMatrix penalty_matrix(const KnotVector& kv, int q) {
    Eigen::MatrixXd D = difference_operator(kv, q);
    KnotVector reduced = kv;
    for (int i = 0; i < q; ++i) reduced = reduced.derivative_family();
    Eigen::MatrixXd G = gram_matrix(reduced);
    Eigen::MatrixXd P = D.transpose() * G * D;
    P = 0.5 * (P + P.transpose()).eval();
    Eigen::LLT<Eigen::MatrixXd> llt(G);
    Eigen::MatrixXd C = llt.matrixU() * D;
    return PenaltyMatrix{q, std::move(P), std::move(C)};
}

} // namespace smoothem
