#pragma once

/// Collocation grids and differentiation matrices.
///
/// Two discretizations share one interface: Chebyshev spectral collocation
/// (one high-order polynomial per subdomain) and a second-order central
/// finite-difference baseline.  Both are built on the reference interval
/// [-1, 1] with nodes stored in descending order (the natural Chebyshev
/// order), then mapped affinely onto a physical subdomain [left, right];
/// the map reverses orientation so that physical index 0 is the left
/// boundary and physical nodes ascend.

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "edlsim/errors.hpp"

namespace edlsim {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Which discretization a grid or operator set belongs to.
enum class Scheme {
    ChebyshevCollocation,
    CentralFiniteDifference,
};

inline const char* scheme_name(Scheme s) {
    return s == Scheme::ChebyshevCollocation ? "sem" : "fdm";
}

/// Collocation nodes on the reference interval [-1, 1], descending.
/// `order` is the polynomial order N; there are N+1 nodes.
struct ReferenceGrid {
    int order = 0;
    std::vector<double> nodes;
    Scheme scheme = Scheme::ChebyshevCollocation;
};

/// Differentiation operators on a grid, together with the grid geometry.
/// On the reference interval: nodes descending, domain_length = 2,
/// offset = -1.  After map_to_physical: nodes ascending, offset = left
/// boundary coordinate, and d1/d2 differentiate with respect to the
/// physical coordinate (units 1/m and 1/m^2 once lengths are in metres).
struct DiffOps {
    Matrix d1;
    Matrix d2;
    Vector nodes;
    double domain_length = 2.0;
    double offset = -1.0;
    Scheme scheme = Scheme::ChebyshevCollocation;

    int num_nodes() const { return static_cast<int>(nodes.size()); }
};

/// Chebyshev-Gauss-Lobatto nodes cos(k*pi/N), k = 0..N, descending from 1
/// to -1.  Rejects order < 2: the model needs second derivatives, which a
/// two-point grid cannot represent.
inline ReferenceGrid chebyshev_nodes(int order) {
    if (order < 2) {
        throw ConfigError("chebyshev_nodes: order must be >= 2, got " +
                          std::to_string(order));
    }
    ReferenceGrid g;
    g.order = order;
    g.scheme = Scheme::ChebyshevCollocation;
    g.nodes.resize(order + 1);
    for (int k = 0; k <= order; ++k) {
        g.nodes[k] = std::cos(std::numbers::pi * k / order);
    }
    // Pin the endpoints and midpoint exactly; cos() rounding would otherwise
    // leave e.g. cos(pi) = -1 + O(eps).
    g.nodes.front() = 1.0;
    g.nodes.back() = -1.0;
    if (order % 2 == 0) g.nodes[order / 2] = 0.0;
    return g;
}

/// Uniformly spaced nodes on [-1, 1] with spacing 2/N, descending, for the
/// finite-difference scheme.
inline ReferenceGrid uniform_nodes(int order) {
    if (order < 2) {
        throw ConfigError("uniform_nodes: order must be >= 2, got " +
                          std::to_string(order));
    }
    ReferenceGrid g;
    g.order = order;
    g.scheme = Scheme::CentralFiniteDifference;
    g.nodes.resize(order + 1);
    for (int k = 0; k <= order; ++k) {
        g.nodes[k] = 1.0 - 2.0 * k / order;
    }
    g.nodes.front() = 1.0;
    g.nodes.back() = -1.0;
    return g;
}

/// First-derivative collocation matrix for the polynomial interpolant
/// through arbitrary distinct nodes, in barycentric form.  Off-diagonal
/// entries are (w_j/w_i)/(x_i - x_j); diagonals use the negative-sum trick
/// (each row must annihilate constants), which suppresses the rounding
/// error of the analytic diagonal formula.
inline Matrix polynomial_diff_matrix(const Vector& nodes,
                                     const Vector& bary_weights) {
    const int n = static_cast<int>(nodes.size());
    Matrix d = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const double entry =
                (bary_weights[j] / bary_weights[i]) / (nodes[i] - nodes[j]);
            d(i, j) = entry;
            row_sum += entry;
        }
        d(i, i) = -row_sum;
    }
    return d;
}

/// Barycentric weights for Chebyshev-Gauss-Lobatto nodes in descending
/// order: w_k = (-1)^k * (1/2 at the endpoints, 1 inside).
inline Vector chebyshev_barycentric_weights(int num_nodes) {
    Vector w(num_nodes);
    for (int k = 0; k < num_nodes; ++k) {
        double v = (k % 2 == 0) ? 1.0 : -1.0;
        if (k == 0 || k == num_nodes - 1) v *= 0.5;
        w[k] = v;
    }
    return w;
}

/// Differentiation matrices of the degree-N Chebyshev interpolant on the
/// reference interval.  d1 differentiates any polynomial of degree <= N
/// exactly (to rounding); d2 = d1*d1.
inline DiffOps chebyshev_diff_matrix(const ReferenceGrid& grid) {
    if (grid.scheme != Scheme::ChebyshevCollocation) {
        throw ConfigError(
            "chebyshev_diff_matrix: grid scheme is not ChebyshevCollocation");
    }
    const int n = static_cast<int>(grid.nodes.size());
    if (n < 2) {
        throw ConfigError("chebyshev_diff_matrix: need at least 2 nodes");
    }
    DiffOps ops;
    ops.scheme = grid.scheme;
    ops.nodes = Eigen::Map<const Vector>(grid.nodes.data(), n);
    ops.d1 = polynomial_diff_matrix(ops.nodes, chebyshev_barycentric_weights(n));
    ops.d2 = ops.d1 * ops.d1;
    ops.domain_length = 2.0;
    ops.offset = -1.0;
    return ops;
}

/// Second-order finite-difference operators on the uniform reference grid:
/// central stencils inside, second-order one-sided closures at the
/// endpoints.  d2 is built directly from three-point (interior) and
/// four-point (boundary) stencils rather than as d1*d1, which would degrade
/// the boundary rows to first order.
inline DiffOps fdm_diff_matrix(const ReferenceGrid& grid) {
    if (grid.scheme != Scheme::CentralFiniteDifference) {
        throw ConfigError(
            "fdm_diff_matrix: grid scheme is not CentralFiniteDifference");
    }
    const int n = static_cast<int>(grid.nodes.size());
    if (n < 3) {
        throw ConfigError("fdm_diff_matrix: need at least 3 nodes");
    }
    // Stored neighbours step by -h in coordinate (descending order).
    const double h = 2.0 / grid.order;

    DiffOps ops;
    ops.scheme = grid.scheme;
    ops.nodes = Eigen::Map<const Vector>(grid.nodes.data(), n);
    ops.d1 = Matrix::Zero(n, n);
    ops.d2 = Matrix::Zero(n, n);

    for (int k = 1; k + 1 < n; ++k) {
        // u'(x_k) with x_{k-1} = x_k + h, x_{k+1} = x_k - h.
        ops.d1(k, k - 1) = 1.0 / (2.0 * h);
        ops.d1(k, k + 1) = -1.0 / (2.0 * h);
        ops.d2(k, k - 1) = 1.0 / (h * h);
        ops.d2(k, k) = -2.0 / (h * h);
        ops.d2(k, k + 1) = 1.0 / (h * h);
    }
    // One-sided first derivatives at the ends (row 0 sits at coordinate +1;
    // its interior neighbours lie at -h, -2h from it).
    ops.d1(0, 0) = 3.0 / (2.0 * h);
    ops.d1(0, 1) = -4.0 / (2.0 * h);
    ops.d1(0, 2) = 1.0 / (2.0 * h);
    ops.d1(n - 1, n - 1) = -3.0 / (2.0 * h);
    ops.d1(n - 1, n - 2) = 4.0 / (2.0 * h);
    ops.d1(n - 1, n - 3) = -1.0 / (2.0 * h);
    // One-sided second derivatives, exact on cubics.  A 4-point stencil
    // needs n >= 4; on the minimal 3-node grid fall back to the symmetric
    // 3-point stencil, which is still exact on quadratics.
    if (n >= 4) {
        const double h2 = h * h;
        ops.d2(0, 0) = 2.0 / h2;
        ops.d2(0, 1) = -5.0 / h2;
        ops.d2(0, 2) = 4.0 / h2;
        ops.d2(0, 3) = -1.0 / h2;
        ops.d2(n - 1, n - 1) = 2.0 / h2;
        ops.d2(n - 1, n - 2) = -5.0 / h2;
        ops.d2(n - 1, n - 3) = 4.0 / h2;
        ops.d2(n - 1, n - 4) = -1.0 / h2;
    } else {
        const double h2 = h * h;
        for (int r : {0, n - 1}) {
            ops.d2(r, 0) = 1.0 / h2;
            ops.d2(r, 1) = -2.0 / h2;
            ops.d2(r, 2) = 1.0 / h2;
        }
    }
    ops.domain_length = 2.0;
    ops.offset = -1.0;
    return ops;
}

/// Map reference-interval operators onto the physical subdomain
/// [left, right].  The affine map x = left + (right-left)*(1 - x_ref)/2
/// sends the descending reference nodes to ascending physical nodes with
/// index 0 at the left boundary; because the map reverses orientation,
/// d1 picks up the factor -2/(right-left) and d2 the square of it.  The
/// ruling identity is d1 * (physical nodes) = ones.
inline DiffOps map_to_physical(const DiffOps& ops, double left, double right) {
    if (!(right > left)) {
        throw ConfigError("map_to_physical: requires right > left");
    }
    if (ops.domain_length != 2.0 || ops.offset != -1.0) {
        throw ConfigError(
            "map_to_physical: input operators must be on the reference "
            "interval [-1, 1]");
    }
    const double length = right - left;
    const double scale = 2.0 / length;
    DiffOps mapped;
    mapped.scheme = ops.scheme;
    mapped.d1 = -scale * ops.d1;
    mapped.d2 = (scale * scale) * ops.d2;
    mapped.nodes = Vector(ops.nodes.size());
    for (int k = 0; k < ops.nodes.size(); ++k) {
        mapped.nodes[k] = left + length * (1.0 - ops.nodes[k]) / 2.0;
    }
    mapped.nodes[0] = left;
    mapped.nodes[ops.nodes.size() - 1] = right;
    mapped.domain_length = length;
    mapped.offset = left;
    return mapped;
}

/// Quadrature weights matching each scheme's accuracy: Clenshaw-Curtis on
/// Chebyshev grids (exact for polynomials up to the grid order), composite
/// trapezoid on uniform grids.  Weights are returned in the operator's node
/// order and scaled to the operator's physical length (they sum to
/// domain_length).
inline Vector quadrature_weights(const DiffOps& ops) {
    const int n = ops.num_nodes();
    const int order = n - 1;
    Vector w(n);
    if (ops.scheme == Scheme::ChebyshevCollocation) {
        // Clenshaw-Curtis weights for nodes cos(k*pi/N): exact integration
        // of the interpolant.  Evaluated via the cosine-series form.
        const double pi = std::numbers::pi;
        if (order % 2 == 0) {
            w[0] = w[order] = 1.0 / (order * order - 1.0);
        } else {
            w[0] = w[order] = 1.0 / (order * order);
        }
        for (int k = 1; k < order; ++k) {
            const double theta = pi * k / order;
            double v = 1.0;
            const int kmax = (order % 2 == 0) ? order / 2 - 1 : (order - 1) / 2;
            for (int m = 1; m <= kmax; ++m) {
                v -= 2.0 * std::cos(2.0 * m * theta) / (4.0 * m * m - 1.0);
            }
            if (order % 2 == 0) {
                v -= std::cos(order * theta) / (order * order - 1.0);
            }
            w[k] = 2.0 * v / order;
        }
    } else {
        const double h = 2.0 / order;
        w.setConstant(h);
        w[0] = w[order] = h / 2.0;
    }
    // Reference weights integrate over a length-2 interval; rescale to the
    // physical length.  Node order does not matter: the weights are
    // symmetric under reversal.
    return (ops.domain_length / 2.0) * w;
}

/// Evaluate the polynomial interpolant through (nodes, values) at x using
/// the numerically stable barycentric formula.  Intended for Chebyshev
/// subdomain grids; `bary` must match `nodes`' ordering.
inline double barycentric_interpolate(const Vector& nodes, const Vector& bary,
                                      const Vector& values, double x) {
    double numer = 0.0;
    double denom = 0.0;
    for (int j = 0; j < nodes.size(); ++j) {
        const double dx = x - nodes[j];
        if (dx == 0.0) return values[j];
        const double t = bary[j] / dx;
        numer += t * values[j];
        denom += t;
    }
    return numer / denom;
}

/// Piecewise-linear interpolation on an ascending node vector; constant
/// extrapolation outside (callers stay in range).
inline double linear_interpolate(const Vector& nodes, const Vector& values,
                                 double x) {
    const int n = static_cast<int>(nodes.size());
    if (x <= nodes[0]) return values[0];
    if (x >= nodes[n - 1]) return values[n - 1];
    int lo = 0;
    int hi = n - 1;
    while (hi - lo > 1) {
        const int mid = (lo + hi) / 2;
        (nodes[mid] <= x ? lo : hi) = mid;
    }
    const double t = (x - nodes[lo]) / (nodes[lo + 1] - nodes[lo]);
    return (1.0 - t) * values[lo] + t * values[lo + 1];
}

} // namespace edlsim
