#pragma once

/// Porous-electrode supercapacitor cell model.
///
/// The cell is one spatial dimension split into three subdomains: left
/// electrode [0, L_e], separator [L_e, L_e + L_s], right electrode
/// [L_e + L_s, 2 L_e + L_s].  Fields:
///
///   c     salt concentration (mol/m^3), defined on every node,
///   q     double-layer potential difference Phi1 - Phi2 (V), defined on
///         electrode nodes,
///   phi2  electrolyte potential (V), defined on every node, algebraic.
///
/// Governing equations (per unit electrode area, x in metres):
///
///   eps * dc/dt = D_eff * c'' - gamma_q * dq/dt        (salt transport)
///   aC  * dq/dt = sigma * Phi1''                        (double-layer charging)
///   0 = sigma*Phi1' + kappa*phi2' + kappa*((t+ - t-)/f)*(ln c)' + i_app
///                                                       (current balance)
///
/// with Phi1 = q + phi2 on electrodes, gamma_q = (aC/F)(t- dq+/dq + t+ dq-/dq),
/// and on the separator the same balance without the sigma term.  The
/// "quadratic" model variant replaces kappa by beta*c (conductivity
/// proportional to concentration), turning the balance's kappa terms into
/// beta*c*phi2' + beta*((t+ - t-)/f)*c'.
///
/// Discretely, phi2 (plus the four electrode-boundary values of q, plus
/// i_app when a terminal voltage is prescribed) form the algebraic unknowns
/// of an index-1 system that is affine given c, so each right-hand-side
/// evaluation performs exactly one linear solve and the differential
/// variables (c everywhere, q at electrode-interior nodes) evolve by an
/// explicit mass-matrix inversion.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "edlsim/errors.hpp"
#include "edlsim/spectral.hpp"

namespace edlsim {

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Geometry and transport constants of one porous region.
struct RegionParameters {
    double epsilon; ///< porosity, in (0, 1)
    double gamma;   ///< tortuosity, >= 1
    double sigma;   ///< solid-phase conductivity S/m (0 for the separator)
    double length;  ///< region thickness, m
};

/// Full parameter set of the cell.  Defaults describe the reference
/// carbon/organic-electrolyte device the studies use.
struct CellParameters {
    RegionParameters electrode{0.67, 2.3, 0.0521, 50e-6};
    RegionParameters separator{0.60, 1.29, 0.0, 25e-6};
    double aC = 42e6;          ///< specific double-layer capacitance, F/m^3
    double c0 = 930.0;         ///< initial salt concentration, mol/m^3
    double kappa_inf = 0.067;  ///< free-solution conductivity, S/m
    double t_plus = 0.5;       ///< cation transference number, in (0, 1)
    double dqp_dq = -0.5;      ///< cation share of double-layer charge
    double dqm_dq = -0.5;      ///< anion share of double-layer charge
    double temperature = 298.0; ///< K
    double area = 2.747;       ///< electrode cross-section, m^2
    double faraday = 96485.0;  ///< C/mol
    double gas_constant = 8.314; ///< J/(K mol)

    double t_minus() const { return 1.0 - t_plus; }
};

inline CellParameters default_cell_parameters() { return CellParameters{}; }

/// Validate physical ranges; throws ConfigError naming the offending field.
inline void validate(const CellParameters& p) {
    auto check = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("invalid CellParameters: ") + what);
    };
    for (const auto* r : {&p.electrode, &p.separator}) {
        check(r->epsilon > 0.0 && r->epsilon < 1.0, "epsilon must be in (0,1)");
        check(r->gamma >= 1.0, "gamma (tortuosity) must be >= 1");
        check(r->length > 0.0, "region length must be > 0");
    }
    check(p.electrode.sigma > 0.0, "electrode sigma must be > 0");
    check(p.t_plus > 0.0 && p.t_plus < 1.0, "t_plus must be in (0,1)");
    check(p.c0 > 0.0, "c0 must be > 0");
    check(p.aC > 0.0, "aC must be > 0");
    check(p.kappa_inf > 0.0, "kappa_inf must be > 0");
    check(p.temperature > 0.0, "temperature must be > 0");
    check(p.area > 0.0, "area must be > 0");
    check(p.faraday > 0.0, "faraday must be > 0");
    check(p.gas_constant > 0.0, "gas_constant must be > 0");
}

/// Transport coefficients derived from the raw parameters, per region.
struct RegionTransport {
    double kappa_eff; ///< kappa_inf * eps / gamma, S/m
    double d_eff;     ///< effective salt diffusivity, m^2/s
    double beta;      ///< kappa_eff / c0, S m^2/mol (quadratic variant slope)
};

struct DerivedTransport {
    RegionTransport electrode;
    RegionTransport separator;
    double f;        ///< F/(R T), 1/V
    double gamma_q;  ///< (aC/F)(t- dq+/dq + t+ dq-/dq): couples dq/dt into salt
    double characteristic_time; ///< L_e^2 aC (1/sigma + 1/kappa_eff), s
    double cell_capacitance;    ///< aC L_e S / 2: two electrodes in series, F
};

/// Effective conductivity via the porosity/tortuosity correction, then the
/// diffusivity solved from the Nernst-Einstein-type relation
/// kappa = F^2/(RT) * (1/2) D (1/t- + 1/t+) c at c = c0, and beta so that
/// the quadratic variant reproduces kappa_eff exactly at c0.
inline DerivedTransport derive_transport(const CellParameters& p) {
    validate(p);
    // The diffusivity relation divides by t+ and t-; the endpoints are
    // already excluded by validate(), but keep the intent explicit.
    if (p.t_plus <= 0.0 || p.t_plus >= 1.0) {
        throw ConfigError("derive_transport: t_plus in {0,1} divides by zero");
    }
    const double rt = p.gas_constant * p.temperature;
    const double tsum = 1.0 / p.t_minus() + 1.0 / p.t_plus;
    auto region = [&](const RegionParameters& r) {
        RegionTransport t;
        t.kappa_eff = p.kappa_inf * r.epsilon / r.gamma;
        t.d_eff = t.kappa_eff * rt /
                  (p.faraday * p.faraday * 0.5 * tsum * p.c0);
        t.beta = t.kappa_eff / p.c0;
        return t;
    };
    DerivedTransport d;
    d.electrode = region(p.electrode);
    d.separator = region(p.separator);
    d.f = p.faraday / rt;
    d.gamma_q = (p.aC / p.faraday) *
                (p.t_minus() * p.dqp_dq + p.t_plus * p.dqm_dq);
    const double le = p.electrode.length;
    d.characteristic_time =
        le * le * p.aC * (1.0 / p.electrode.sigma + 1.0 / d.electrode.kappa_eff);
    d.cell_capacitance = p.aC * le * p.area / 2.0;
    return d;
}

// ---------------------------------------------------------------------------
// Model variants and drive
// ---------------------------------------------------------------------------

/// Linear: constant conductivity, no ln-c migration term.
/// Logarithmic: constant conductivity plus the kappa ((t+-t-)/f) (ln c)'
///   migration term (identical to Linear when t+ = 1/2).
/// Quadratic: conductivity proportional to concentration (kappa -> beta c).
enum class ModelVariant { Linear, Logarithmic, Quadratic };

inline const char* variant_name(ModelVariant v) {
    switch (v) {
        case ModelVariant::Linear: return "linear";
        case ModelVariant::Logarithmic: return "log";
        default: return "quadratic";
    }
}

/// What the external circuit prescribes at one instant: either the current
/// density (A/m^2, positive raises the terminal voltage) or the terminal
/// voltage itself (V), in which case the current becomes an algebraic
/// unknown.
struct Drive {
    enum class Kind { Current, Voltage };
    Kind kind = Kind::Current;
    double value = 0.0;

    static Drive current(double i_app) { return {Kind::Current, i_app}; }
    static Drive voltage(double v_set) { return {Kind::Voltage, v_set}; }
};

// ---------------------------------------------------------------------------
// Mesh
// ---------------------------------------------------------------------------

/// One subdomain: physical-space operators plus its transport constants and
/// its slice of the global index spaces.
struct Subdomain {
    DiffOps ops;     ///< physical differentiation operators, nodes ascending
    Vector quad;     ///< physical quadrature weights (sum = length)
    int c_offset;    ///< global index of this subdomain's first c node
    int q_offset;    ///< global index of its first q node (-1 for separator)
    bool is_electrode;
    double epsilon;
    double kappa_eff;
    double d_eff;
    double beta;
    double sigma;    ///< 0 for the separator

    int n() const { return ops.num_nodes(); }
};

/// The assembled three-subdomain mesh.  Interface nodes are stored twice
/// (once per adjoining subdomain) and tied together by continuity rows.
struct Mesh {
    Scheme scheme;
    int order_electrode = 0;
    int order_separator = 0;
    CellParameters params;
    DerivedTransport transport;
    std::array<Subdomain, 3> sub; ///< [left electrode, separator, right electrode]

    int num_c = 0; ///< total concentration slots
    int num_q = 0; ///< total q slots (both electrodes)

    /// Global c-indices of the six boundary/interface slots, in order:
    /// left collector, interface-1 electrode side, interface-1 separator
    /// side, interface-2 separator side, interface-2 electrode side,
    /// right collector.
    std::array<int, 6> c_boundary;
    /// Global q-indices of the four electrode-boundary slots, in order:
    /// left collector, interface-1, interface-2, right collector.
    std::array<int, 4> q_boundary;
    std::vector<int> c_interior; ///< complement of c_boundary
    std::vector<int> q_interior; ///< complement of q_boundary

    /// Boundary-rate lift: the six concentration boundary conditions are
    /// homogeneous constraints B c = 0, so rates satisfy B c_dot = 0;
    /// lift maps interior rates to boundary rates:
    /// c_dot[boundary] = lift * c_dot[interior].
    Matrix lift;
    double salt_weight_sum = 0.0; ///< sum over regions of eps * quadrature(1)

    int num_diff() const { return num_c + num_q - 4; }
};

namespace detail {

/// Constraint matrix rows for the concentration boundary conditions:
/// zero flux at both collectors, continuity and D_eff-weighted flux
/// continuity at both interfaces.  All rows annihilate constants.
inline Matrix concentration_constraints(const Mesh& m) {
    const auto& e1 = m.sub[0];
    const auto& sp = m.sub[1];
    const auto& e2 = m.sub[2];
    Matrix b = Matrix::Zero(6, m.num_c);
    // Left collector: c' = 0.
    b.block(0, e1.c_offset, 1, e1.n()) = e1.ops.d1.row(0);
    // Interface 1 continuity: c(e1, last) - c(sep, first) = 0.
    b(1, e1.c_offset + e1.n() - 1) = 1.0;
    b(1, sp.c_offset) = -1.0;
    // Interface 1 flux: D_e c'(e1, last) - D_s c'(sep, first) = 0.
    b.block(2, e1.c_offset, 1, e1.n()) = e1.d_eff * e1.ops.d1.row(e1.n() - 1);
    b.block(2, sp.c_offset, 1, sp.n()) -= sp.d_eff * sp.ops.d1.row(0);
    // Interface 2 continuity: c(sep, last) - c(e2, first) = 0.
    b(3, sp.c_offset + sp.n() - 1) = 1.0;
    b(3, e2.c_offset) = -1.0;
    // Interface 2 flux: D_s c'(sep, last) - D_e c'(e2, first) = 0.
    b.block(4, sp.c_offset, 1, sp.n()) = sp.d_eff * sp.ops.d1.row(sp.n() - 1);
    b.block(4, e2.c_offset, 1, e2.n()) -= e2.d_eff * e2.ops.d1.row(0);
    // Right collector: c' = 0.
    b.block(5, e2.c_offset, 1, e2.n()) = e2.ops.d1.row(e2.n() - 1);
    return b;
}

} // namespace detail

/// Lay the three subdomains end to end over [0, 2 L_e + L_s], attach the
/// scheme's differentiation operators and quadrature, and precompute the
/// concentration boundary lift.
inline Mesh build_mesh(const CellParameters& p, Scheme scheme,
                       int order_electrode, int order_separator) {
    if (order_electrode < 2 || order_separator < 2) {
        throw ConfigError("build_mesh: subdomain orders must be >= 2");
    }
    Mesh m;
    m.scheme = scheme;
    m.order_electrode = order_electrode;
    m.order_separator = order_separator;
    m.params = p;
    m.transport = derive_transport(p);

    auto reference_ops = [&](int order) {
        return scheme == Scheme::ChebyshevCollocation
                   ? chebyshev_diff_matrix(chebyshev_nodes(order))
                   : fdm_diff_matrix(uniform_nodes(order));
    };
    const double le = p.electrode.length;
    const double ls = p.separator.length;
    const std::array<std::pair<double, double>, 3> extents{
        std::pair{0.0, le},
        std::pair{le, le + ls},
        std::pair{le + ls, 2.0 * le + ls},
    };
    const std::array<int, 3> orders{order_electrode, order_separator,
                                    order_electrode};
    int c_off = 0;
    int q_off = 0;
    for (int s = 0; s < 3; ++s) {
        Subdomain& sub = m.sub[s];
        sub.ops = map_to_physical(reference_ops(orders[s]), extents[s].first,
                                  extents[s].second);
        sub.quad = quadrature_weights(sub.ops);
        sub.is_electrode = (s != 1);
        const auto& region = sub.is_electrode ? p.electrode : p.separator;
        const auto& transport =
            sub.is_electrode ? m.transport.electrode : m.transport.separator;
        sub.epsilon = region.epsilon;
        sub.sigma = region.sigma;
        sub.kappa_eff = transport.kappa_eff;
        sub.d_eff = transport.d_eff;
        sub.beta = transport.beta;
        sub.c_offset = c_off;
        c_off += sub.n();
        if (sub.is_electrode) {
            sub.q_offset = q_off;
            q_off += sub.n();
        } else {
            sub.q_offset = -1;
        }
    }
    m.num_c = c_off;
    m.num_q = q_off;

    const int n1 = m.sub[0].n();
    const int n2 = m.sub[1].n();
    m.c_boundary = {0,
                    n1 - 1,
                    n1,
                    n1 + n2 - 1,
                    n1 + n2,
                    m.num_c - 1};
    m.q_boundary = {0, n1 - 1, n1, m.num_q - 1};
    for (int i = 0; i < m.num_c; ++i) {
        if (std::find(m.c_boundary.begin(), m.c_boundary.end(), i) ==
            m.c_boundary.end()) {
            m.c_interior.push_back(i);
        }
    }
    for (int i = 0; i < m.num_q; ++i) {
        if (std::find(m.q_boundary.begin(), m.q_boundary.end(), i) ==
            m.q_boundary.end()) {
            m.q_interior.push_back(i);
        }
    }

    // Boundary lift for concentration rates: split B c_dot = 0 into
    // boundary and interior columns and solve for the boundary block.
    const Matrix b = detail::concentration_constraints(m);
    Matrix bb(6, 6);
    Matrix bi(6, m.num_c - 6);
    for (int k = 0; k < 6; ++k) bb.col(k) = b.col(m.c_boundary[k]);
    for (size_t k = 0; k < m.c_interior.size(); ++k) {
        bi.col(k) = b.col(m.c_interior[k]);
    }
    Eigen::PartialPivLU<Matrix> lu(bb);
    const double diag_min = lu.matrixLU().diagonal().cwiseAbs().minCoeff();
    const double diag_max = lu.matrixLU().diagonal().cwiseAbs().maxCoeff();
    if (!(diag_min > 1e-14 * diag_max)) {
        throw SingularSystemError(
            "build_mesh: concentration boundary block is singular");
    }
    m.lift = -lu.solve(bi);

    for (const auto& sub : m.sub) {
        m.salt_weight_sum += sub.epsilon * sub.quad.sum();
    }
    return m;
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// Collocated fields.  phi2 and the four electrode-boundary entries of q
/// are algebraic: they are reconstructed from (c, interior q, drive) by the
/// algebraic solve, not integrated.
struct CellState {
    Vector c;    ///< mol/m^3, size Mesh::num_c
    Vector q;    ///< V, size Mesh::num_q
    Vector phi2; ///< V, size Mesh::num_c
};

/// Uniform start: c = c0 and phi2 = 0 everywhere; the double-layer
/// difference q splits evenly as +v0/2 in the left electrode and -v0/2 in
/// the right one so the terminal voltage Phi1(0) - Phi1(L) equals v0.
inline CellState initial_state(const Mesh& m, double v0) {
    CellState s;
    s.c = Vector::Constant(m.num_c, m.params.c0);
    s.phi2 = Vector::Zero(m.num_c);
    s.q = Vector::Zero(m.num_q);
    const int n1 = m.sub[0].n();
    s.q.head(n1).setConstant(v0 / 2.0);
    s.q.tail(m.sub[2].n()).setConstant(-v0 / 2.0);
    return s;
}

/// Terminal voltage: solid-phase potential difference between collectors,
/// Phi1(x=0) - Phi1(x = 2 L_e + L_s) with Phi1 = q + phi2.
inline double terminal_voltage(const Mesh& m, const CellState& s) {
    const double phi1_left = s.q[0] + s.phi2[0];
    const double phi1_right = s.q[m.num_q - 1] + s.phi2[m.num_c - 1];
    return phi1_left - phi1_right;
}

// ---------------------------------------------------------------------------
// Algebraic subsystem
// ---------------------------------------------------------------------------

/// The stacked algebraic unknowns z = [phi2 (num_c); q at the four
/// electrode-boundary slots; i_app when the drive prescribes voltage], with
/// the residual affine in z given c: g(z) = a z - rhs.
struct AlgebraicSystem {
    Matrix a;
    Vector rhs;
    bool voltage_drive = false;

    int dim() const { return static_cast<int>(rhs.size()); }
};

namespace detail {

/// Throws EvaluationError if any concentration is non-positive (the
/// logarithmic and quadratic variants are undefined there).
inline void require_positive_c(const Vector& c, ModelVariant variant) {
    if (variant == ModelVariant::Linear) return;
    if (c.minCoeff() <= 0.0) {
        throw EvaluationError(
            "non-positive concentration encountered by the " +
            std::string(variant_name(variant)) + " model");
    }
}

/// Adds the ionic-current expression i2 = -kappa phi2' - kappa g_tf (ln c)'
/// (or its quadratic analogue -beta c phi2' - beta g_tf c') at local node
/// `row` of subdomain `sub`, scaled by `weight`, to matrix row `r`:
/// the phi2-coefficients go into `a`, the concentration part into `rhs`
/// (it is known).  g_tf = (t+ - t-)/f.
inline void add_i2_row(const Subdomain& sub, int row, double weight,
                       const Vector& c, ModelVariant variant, double g_tf,
                       Matrix& a, Vector& rhs, int r) {
    const auto d1 = sub.ops.d1.row(row);
    const auto c_sub = c.segment(sub.c_offset, sub.n());
    if (variant == ModelVariant::Quadratic) {
        const double coeff = -weight * sub.beta * c_sub[row];
        a.block(r, sub.c_offset, 1, sub.n()) += coeff * d1;
        rhs[r] += weight * sub.beta * g_tf * d1.dot(c_sub);
    } else {
        a.block(r, sub.c_offset, 1, sub.n()) += -weight * sub.kappa_eff * d1;
        if (variant == ModelVariant::Logarithmic && g_tf != 0.0) {
            const Vector log_c = c_sub.array().log().matrix();
            rhs[r] += weight * sub.kappa_eff * g_tf * d1.dot(log_c);
        }
    }
}

} // namespace detail

/// Assemble the algebraic system for given concentrations and interior q.
/// Rows, in order: one per concentration node (interior nodes carry the
/// current-balance collocation equation; the left collector carries the
/// phi2 = 0 gauge; the right collector carries i2 = 0; interface separator
/// sides carry phi2 continuity; interface electrode sides carry i2 flux
/// matching), then the four solid-current conditions sigma Phi1' = -i_app
/// (collectors) and sigma Phi1' = 0 (interfaces), then the terminal-voltage
/// row when the drive prescribes voltage.
inline AlgebraicSystem assemble_algebraic_system(const Mesh& m,
                                                 const Vector& c,
                                                 const Vector& q,
                                                 const Drive& drive,
                                                 ModelVariant variant) {
    detail::require_positive_c(c, variant);
    const bool cv = drive.kind == Drive::Kind::Voltage;
    const int nz = m.num_c + 4 + (cv ? 1 : 0);
    const int i_col = m.num_c + 4; // i_app column in CV mode

    AlgebraicSystem sys;
    sys.voltage_drive = cv;
    sys.a = Matrix::Zero(nz, nz);
    sys.rhs = Vector::Zero(nz);
    Matrix& a = sys.a;
    Vector& rhs = sys.rhs;

    const double g_tf = (m.params.t_plus - m.params.t_minus()) / m.transport.f;
    const double i_app = cv ? 0.0 : drive.value;

    // Column index of the q unknown at electrode-boundary q-slot `k`
    // (order: left collector, interface 1, interface 2, right collector).
    auto qb_col = [&](int k) { return m.num_c + k; };

    // --- current-balance collocation at one node -------------------------
    // 0 = sigma Phi1' + kappa phi2' + kappa g_tf (ln c)' + i_app, written as
    // sigma Phi1' - i2 + i_app = 0 with i2 from add_i2_row (weight -1 puts
    // +kappa phi2' into `a` with the sign above).
    auto add_balance_row = [&](const Subdomain& sub, int row, int r) {
        const auto d1 = sub.ops.d1.row(row);
        // Ionic part: -i2 contributes +kappa phi2' + kappa g_tf (ln c)'.
        detail::add_i2_row(sub, row, -1.0, c, variant, g_tf, a, rhs, r);
        // Solid part (electrodes only): sigma (q + phi2)'.
        if (sub.is_electrode) {
            a.block(r, sub.c_offset, 1, sub.n()) += sub.sigma * d1;
            // q columns: boundary slots are unknowns, interior is known.
            for (int j = 0; j < sub.n(); ++j) {
                const int qg = sub.q_offset + j;
                const double coeff = sub.sigma * d1[j];
                if (qg == m.q_boundary[0]) a(r, qb_col(0)) += coeff;
                else if (qg == m.q_boundary[1]) a(r, qb_col(1)) += coeff;
                else if (qg == m.q_boundary[2]) a(r, qb_col(2)) += coeff;
                else if (qg == m.q_boundary[3]) a(r, qb_col(3)) += coeff;
                else rhs[r] -= coeff * q[qg];
            }
        }
        // Applied current.
        if (cv) a(r, i_col) += 1.0;
        else rhs[r] -= i_app;
    };

    const auto& e1 = m.sub[0];
    const auto& sp = m.sub[1];
    const auto& e2 = m.sub[2];
    const int n1 = e1.n();
    const int n2 = sp.n();
    const int n3 = e2.n();

    // Left collector: gauge phi2 = 0.
    a(0, 0) = 1.0;
    // Left electrode interior: current balance.
    for (int j = 1; j < n1 - 1; ++j) add_balance_row(e1, j, e1.c_offset + j);
    // Interface 1, electrode side: ionic flux continuity i2_e = i2_s.
    {
        const int r = e1.c_offset + n1 - 1;
        detail::add_i2_row(e1, n1 - 1, 1.0, c, variant, g_tf, a, rhs, r);
        detail::add_i2_row(sp, 0, -1.0, c, variant, g_tf, a, rhs, r);
    }
    // Interface 1, separator side: phi2 continuity.
    {
        const int r = sp.c_offset;
        a(r, sp.c_offset) = 1.0;
        a(r, e1.c_offset + n1 - 1) = -1.0;
    }
    // Separator interior: current balance (no solid phase).
    for (int j = 1; j < n2 - 1; ++j) add_balance_row(sp, j, sp.c_offset + j);
    // Interface 2, separator side: phi2 continuity.
    {
        const int r = sp.c_offset + n2 - 1;
        a(r, sp.c_offset + n2 - 1) = 1.0;
        a(r, e2.c_offset) = -1.0;
    }
    // Interface 2, electrode side: ionic flux continuity i2_s = i2_e.
    {
        const int r = e2.c_offset;
        detail::add_i2_row(sp, n2 - 1, 1.0, c, variant, g_tf, a, rhs, r);
        detail::add_i2_row(e2, 0, -1.0, c, variant, g_tf, a, rhs, r);
    }
    // Right electrode interior: current balance.
    for (int j = 1; j < n3 - 1; ++j) add_balance_row(e2, j, e2.c_offset + j);
    // Right collector: no ionic current enters the collector, i2 = 0.
    detail::add_i2_row(e2, n3 - 1, 1.0, c, variant, g_tf, a, rhs,
                       e2.c_offset + n3 - 1);

    // --- solid-current conditions (determine the boundary q slots) -------
    // sigma Phi1' + i_app = 0 at the collectors (all current is electronic
    // there); sigma Phi1' = 0 at the interfaces (all current is ionic).
    auto add_i1_row = [&](const Subdomain& sub, int row, bool carries_current,
                          int r) {
        const auto d1 = sub.ops.d1.row(row);
        a.block(r, sub.c_offset, 1, sub.n()) += sub.sigma * d1;
        for (int j = 0; j < sub.n(); ++j) {
            const int qg = sub.q_offset + j;
            const double coeff = sub.sigma * d1[j];
            bool handled = false;
            for (int k = 0; k < 4; ++k) {
                if (qg == m.q_boundary[k]) {
                    a(r, qb_col(k)) += coeff;
                    handled = true;
                    break;
                }
            }
            if (!handled) rhs[r] -= coeff * q[qg];
        }
        if (carries_current) {
            if (cv) a(r, i_col) += 1.0;
            else rhs[r] -= i_app;
        }
    };
    add_i1_row(e1, 0, true, m.num_c + 0);      // left collector
    add_i1_row(e1, n1 - 1, false, m.num_c + 1); // interface 1
    add_i1_row(e2, 0, false, m.num_c + 2);      // interface 2
    add_i1_row(e2, n3 - 1, true, m.num_c + 3);  // right collector

    // --- terminal-voltage constraint (voltage drive only) ----------------
    if (cv) {
        const int r = i_col;
        a(r, qb_col(0)) = 1.0;
        a(r, 0) = 1.0;
        a(r, qb_col(3)) = -1.0;
        a(r, m.num_c - 1) = -1.0;
        rhs[r] = drive.value;
    }
    return sys;
}

/// Row-equilibrated LU factorization of the algebraic matrix with a
/// singularity check.  Returns the factorization of diag(s) * a and the
/// scale vector s (applied to right-hand sides before solving).
struct AlgebraicFactor {
    Eigen::PartialPivLU<Matrix> lu;
    Vector row_scale;

    Vector solve(const Vector& rhs) const {
        return lu.solve(row_scale.asDiagonal() * rhs);
    }
    Matrix solve(const Matrix& rhs) const {
        return lu.solve(row_scale.asDiagonal() * rhs);
    }
};

inline AlgebraicFactor factor_algebraic(const AlgebraicSystem& sys) {
    AlgebraicFactor f;
    f.row_scale = Vector(sys.dim());
    Matrix scaled = sys.a;
    for (int r = 0; r < sys.dim(); ++r) {
        const double mx = sys.a.row(r).cwiseAbs().maxCoeff();
        f.row_scale[r] = mx > 0.0 ? 1.0 / mx : 1.0;
        scaled.row(r) *= f.row_scale[r];
    }
    f.lu.compute(scaled);
    const Vector diag = f.lu.matrixLU().diagonal().cwiseAbs();
    if (!(diag.minCoeff() > 1e-13 * diag.maxCoeff())) {
        throw SingularSystemError(
            "algebraic system is singular: boundary patching or the "
            "reference-potential row is misconfigured");
    }
    return f;
}

/// Solution of the algebraic subsystem in unpacked form.
struct AlgebraicSolution {
    Vector phi2;           ///< size num_c
    std::array<double, 4> q_boundary;
    double i_app = 0.0;        ///< prescribed (current drive) or solved (voltage)
    double residual_inf = 0.0; ///< max-norm of the algebraic residual at the solution
};

inline AlgebraicSolution solve_algebraic(const Mesh& m, const Vector& c,
                                         const Vector& q, const Drive& drive,
                                         ModelVariant variant) {
    const AlgebraicSystem sys =
        assemble_algebraic_system(m, c, q, drive, variant);
    const AlgebraicFactor f = factor_algebraic(sys);
    const Vector z = f.solve(sys.rhs);
    AlgebraicSolution sol;
    sol.phi2 = z.head(m.num_c);
    // Make the gauge exact: every other equation sees phi2 only through
    // derivatives or differences, so subtracting the (rounding-level)
    // residual at the reference node changes nothing else.
    sol.phi2.array() -= sol.phi2[0];
    for (int k = 0; k < 4; ++k) sol.q_boundary[k] = z[m.num_c + k];
    sol.i_app = sys.voltage_drive ? z[m.num_c + 4] : drive.value;
    Vector z_final = z;
    z_final.head(m.num_c) = sol.phi2;
    sol.residual_inf =
        (sys.a * z_final - sys.rhs).lpNorm<Eigen::Infinity>();
    return sol;
}

/// Residual and Jacobian of the stacked algebraic equations at the state's
/// own (phi2, boundary q) values: g = a z - rhs with z read from `state`.
inline std::pair<Vector, Matrix> assemble_algebraic(const Mesh& m,
                                                    const CellState& state,
                                                    double i_app,
                                                    ModelVariant variant) {
    const AlgebraicSystem sys = assemble_algebraic_system(
        m, state.c, state.q, Drive::current(i_app), variant);
    Vector z(sys.dim());
    z.head(m.num_c) = state.phi2;
    for (int k = 0; k < 4; ++k) z[m.num_c + k] = state.q[m.q_boundary[k]];
    return {sys.a * z - sys.rhs, sys.a};
}

/// Unique phi2 with g = 0 and phi2 = 0 at the left collector.
inline Vector solve_phi2(const Mesh& m, const CellState& state, double i_app,
                         ModelVariant variant) {
    return solve_algebraic(m, state.c, state.q, Drive::current(i_app), variant)
        .phi2;
}

/// Recompute the algebraic fields (phi2 and boundary q) consistently with
/// the state's differential fields and the drive; returns the applied
/// current density actually in effect.
inline double refresh_algebraic(const Mesh& m, CellState& state,
                                const Drive& drive, ModelVariant variant) {
    const AlgebraicSolution sol =
        solve_algebraic(m, state.c, state.q, drive, variant);
    state.phi2 = sol.phi2;
    for (int k = 0; k < 4; ++k) {
        state.q[m.q_boundary[k]] = sol.q_boundary[k];
    }
    return sol.i_app;
}

// ---------------------------------------------------------------------------
// Time derivatives (the reduced mass-matrix ODE)
// ---------------------------------------------------------------------------

/// Explicit time derivatives after the index-1 elimination.  q_dot is the
/// pointwise charging rate sigma Phi1'' / aC at every electrode node; the
/// four boundary entries are reported for diagnostics/quadrature but the
/// integrator advances only interior q (boundary q is algebraic).
struct Rates {
    Vector c_dot; ///< size num_c
    Vector q_dot; ///< size num_q
    AlgebraicSolution algebraic;
};

inline Rates rhs(const Mesh& m, const Vector& c, const Vector& q,
                 const Drive& drive, ModelVariant variant) {
    Rates out;
    out.algebraic = solve_algebraic(m, c, q, drive, variant);
    const Vector& phi2 = out.algebraic.phi2;

    // Assemble the full q including the just-solved boundary values.
    Vector q_full = q;
    for (int k = 0; k < 4; ++k) {
        q_full[m.q_boundary[k]] = out.algebraic.q_boundary[k];
    }

    out.q_dot = Vector::Zero(m.num_q);
    out.c_dot = Vector::Zero(m.num_c);

    // Electrode charging rate: aC dq/dt = sigma Phi1''.
    for (const auto* sub : {&m.sub[0], &m.sub[2]}) {
        const Vector phi1 = q_full.segment(sub->q_offset, sub->n()) +
                            phi2.segment(sub->c_offset, sub->n());
        out.q_dot.segment(sub->q_offset, sub->n()) =
            (sub->sigma / m.params.aC) * (sub->ops.d2 * phi1);
    }

    // Salt transport at interior nodes: eps dc/dt = D c'' - gamma_q dq/dt,
    // the latter term only on electrodes.
    for (const auto& sub : m.sub) {
        const Vector d2c = sub.ops.d2 * c.segment(sub.c_offset, sub.n());
        for (int j = 1; j < sub.n() - 1; ++j) {
            double rate = sub.d_eff * d2c[j];
            if (sub.is_electrode) {
                rate -= m.transport.gamma_q * out.q_dot[sub.q_offset + j];
            }
            out.c_dot[sub.c_offset + j] = rate / sub.epsilon;
        }
    }

    // Boundary rates follow from differentiating the (homogeneous) boundary
    // constraints: B c_dot = 0.
    Vector interior_rates(m.c_interior.size());
    for (size_t k = 0; k < m.c_interior.size(); ++k) {
        interior_rates[k] = out.c_dot[m.c_interior[k]];
    }
    const Vector boundary_rates = m.lift * interior_rates;
    for (int k = 0; k < 6; ++k) {
        out.c_dot[m.c_boundary[k]] = boundary_rates[k];
    }

    // Uniform salt-conservation correction: the discrete balance
    //   sum_regions eps * quad(c_dot) = -gamma_q * sum_electrodes quad(q_dot)
    // must hold exactly; distribute the quadrature defect evenly (a constant
    // shift preserves B c_dot = 0 because every constraint row annihilates
    // constants).  On the spectral grid the defect is at rounding level; on
    // the finite-difference grid it absorbs the trapezoid truncation.
    double balance = 0.0;
    for (const auto& sub : m.sub) {
        balance += sub.epsilon *
                   sub.quad.dot(out.c_dot.segment(sub.c_offset, sub.n()));
        if (sub.is_electrode) {
            balance += m.transport.gamma_q *
                       sub.quad.dot(out.q_dot.segment(sub.q_offset, sub.n()));
        }
    }
    out.c_dot.array() -= balance / m.salt_weight_sum;
    return out;
}

/// Spec'd state-based form: evaluates the reduced ODE right-hand side at
/// the state's differential fields (its phi2 / boundary q entries are
/// recomputed, not trusted).
inline Rates rhs(const Mesh& m, const CellState& state, double i_app,
                 ModelVariant variant) {
    return rhs(m, state.c, state.q, Drive::current(i_app), variant);
}

// ---------------------------------------------------------------------------
// Analytic Jacobian of the reduced ODE
// ---------------------------------------------------------------------------

namespace detail {

/// d(rhs of algebraic system)/d(differential y) minus d(a)/dy * z, i.e. the
/// right-hand side of the implicit-function-theorem linear system for
/// dz/dy.  y = [c (num_c); q at interior slots].
inline Matrix algebraic_sensitivity_rhs(const Mesh& m, const Vector& c,
                                        const AlgebraicSystem& sys,
                                        const Vector& z, ModelVariant variant) {
    const int nz = sys.dim();
    const int ny = m.num_diff();
    const double g_tf = (m.params.t_plus - m.params.t_minus()) / m.transport.f;
    Matrix s = Matrix::Zero(nz, ny);

    // Column map for interior q slots within y.
    std::vector<int> q_col(m.num_q, -1);
    for (size_t k = 0; k < m.q_interior.size(); ++k) {
        q_col[m.q_interior[k]] = m.num_c + static_cast<int>(k);
    }

    // --- dependence through interior q (rows that contain sigma Phi1') ---
    // Those rows read q via rhs[r] -= sigma d1[j] q[j], so d rhs/d q[j]
    // = -sigma d1[j]; d g/d q[j] = +sigma d1[j] and dz/dy solves
    // a dz = -dg/dy, equivalently dz = a^{-1} (d rhs/d y - da/dy z).
    auto add_q_dependence = [&](const Subdomain& sub, int row, int r) {
        const auto d1 = sub.ops.d1.row(row);
        for (int j = 0; j < sub.n(); ++j) {
            const int col = q_col[sub.q_offset + j];
            if (col >= 0) s(r, col) -= sub.sigma * d1[j];
        }
    };
    const auto& e1 = m.sub[0];
    const auto& sp = m.sub[1];
    const auto& e2 = m.sub[2];
    for (int j = 1; j < e1.n() - 1; ++j) {
        add_q_dependence(e1, j, e1.c_offset + j);
    }
    for (int j = 1; j < e2.n() - 1; ++j) {
        add_q_dependence(e2, j, e2.c_offset + j);
    }
    add_q_dependence(e1, 0, m.num_c + 0);
    add_q_dependence(e1, e1.n() - 1, m.num_c + 1);
    add_q_dependence(e2, 0, m.num_c + 2);
    add_q_dependence(e2, e2.n() - 1, m.num_c + 3);

    // --- dependence through c ------------------------------------------
    // Each i2 appearance in the assembly carries a weight (see
    // assemble_algebraic_system): -1 on balance rows, +1/-1 on the two
    // sides of each flux-matching row, +1 on the right-collector row.
    // The sensitivities below must use the same weights.
    auto for_each_i2_appearance = [&](auto&& visit) {
        for (int j = 1; j < e1.n() - 1; ++j) visit(e1, j, -1.0, e1.c_offset + j);
        for (int j = 1; j < sp.n() - 1; ++j) visit(sp, j, -1.0, sp.c_offset + j);
        for (int j = 1; j < e2.n() - 1; ++j) visit(e2, j, -1.0, e2.c_offset + j);
        const int r1 = e1.c_offset + e1.n() - 1;
        visit(e1, e1.n() - 1, 1.0, r1);
        visit(sp, 0, -1.0, r1);
        const int r2 = e2.c_offset;
        visit(sp, sp.n() - 1, 1.0, r2);
        visit(e2, 0, -1.0, r2);
        visit(e2, e2.n() - 1, 1.0, e2.c_offset + e2.n() - 1);
    };
    if (variant == ModelVariant::Logarithmic && g_tf != 0.0) {
        // rhs rows gained weight * kappa * g_tf * d1 . ln(c); derivative
        // w.r.t. c_k is weight * kappa * g_tf * d1[k] / c_k.
        for_each_i2_appearance([&](const Subdomain& sub, int row,
                                   double weight, int r) {
            const auto d1 = sub.ops.d1.row(row);
            for (int j = 0; j < sub.n(); ++j) {
                s(r, sub.c_offset + j) += weight * sub.kappa_eff * g_tf *
                                          d1[j] / c[sub.c_offset + j];
            }
        });
    } else if (variant == ModelVariant::Quadratic) {
        // Two contributions per i2 appearance at (sub,row,weight):
        //  * rhs had weight * beta * g_tf * d1 . c
        //      -> d rhs/d c_k = weight * beta * g_tf * d1[k],
        //  * a had -weight * beta * c_row * d1 on the phi2 columns
        //      -> -(da/dc_row) z = +weight * beta * (d1 . phi2) on c_row.
        const Vector phi2 = z.head(m.num_c);
        for_each_i2_appearance([&](const Subdomain& sub, int row,
                                   double weight, int r) {
            const auto d1 = sub.ops.d1.row(row);
            const double dphi2 = d1.dot(phi2.segment(sub.c_offset, sub.n()));
            s(r, sub.c_offset + row) += weight * sub.beta * dphi2;
            for (int j = 0; j < sub.n(); ++j) {
                s(r, sub.c_offset + j) += weight * sub.beta * g_tf * d1[j];
            }
        });
    }
    return s;
}

} // namespace detail

/// Jacobian of the reduced right-hand side with respect to the
/// differential state y = [c; q at interior electrode slots], assembled
/// analytically via the implicit function theorem applied to the algebraic
/// subsystem.  Matches a central finite-difference Jacobian to the
/// tolerances the property tests pin down.
inline Matrix rhs_jacobian(const Mesh& m, const Vector& c, const Vector& q,
                           const Drive& drive, ModelVariant variant) {
    const int ny = m.num_diff();
    const AlgebraicSystem sys =
        assemble_algebraic_system(m, c, q, drive, variant);
    const AlgebraicFactor f = factor_algebraic(sys);
    const Vector z = f.solve(sys.rhs);

    // Sensitivity of the algebraic solution: dz/dy.
    const Matrix dz_dy =
        f.solve(detail::algebraic_sensitivity_rhs(m, c, sys, z, variant));

    // dq_full/dy and dphi2/dy as (num_q x ny) and (num_c x ny) maps.
    Matrix dq_dy = Matrix::Zero(m.num_q, ny);
    for (size_t k = 0; k < m.q_interior.size(); ++k) {
        dq_dy(m.q_interior[k], m.num_c + static_cast<int>(k)) = 1.0;
    }
    for (int k = 0; k < 4; ++k) {
        dq_dy.row(m.q_boundary[k]) = dz_dy.row(m.num_c + k);
    }
    const auto dphi2_dy = dz_dy.topRows(m.num_c);

    // dq_dot/dy = (sigma/aC) D2 (dq/dy + dphi2/dy) per electrode.
    Matrix dqdot_dy = Matrix::Zero(m.num_q, ny);
    for (const auto* sub : {&m.sub[0], &m.sub[2]}) {
        dqdot_dy.middleRows(sub->q_offset, sub->n()) =
            (sub->sigma / m.params.aC) * sub->ops.d2 *
            (dq_dy.middleRows(sub->q_offset, sub->n()) +
             dphi2_dy.middleRows(sub->c_offset, sub->n()));
    }

    // dc_dot/dy at interior nodes.
    Matrix dcdot_dy = Matrix::Zero(m.num_c, ny);
    for (const auto& sub : m.sub) {
        const auto& d2 = sub.ops.d2;
        for (int j = 1; j < sub.n() - 1; ++j) {
            const int r = sub.c_offset + j;
            dcdot_dy.block(r, sub.c_offset, 1, sub.n()) +=
                (sub.d_eff / sub.epsilon) * d2.row(j);
            if (sub.is_electrode) {
                dcdot_dy.row(r) -= (m.transport.gamma_q / sub.epsilon) *
                                   dqdot_dy.row(sub.q_offset + j);
            }
        }
    }
    // Boundary lift rows.
    Matrix interior(m.c_interior.size(), ny);
    for (size_t k = 0; k < m.c_interior.size(); ++k) {
        interior.row(k) = dcdot_dy.row(m.c_interior[k]);
    }
    const Matrix boundary = m.lift * interior;
    for (int k = 0; k < 6; ++k) {
        dcdot_dy.row(m.c_boundary[k]) = boundary.row(k);
    }
    // Conservation correction row: c_dot -= balance/salt_weight_sum * ones.
    Eigen::RowVectorXd dbalance = Eigen::RowVectorXd::Zero(ny);
    for (const auto& sub : m.sub) {
        dbalance += sub.epsilon * sub.quad.transpose() *
                    dcdot_dy.middleRows(sub.c_offset, sub.n());
        if (sub.is_electrode) {
            dbalance += m.transport.gamma_q * sub.quad.transpose() *
                        dqdot_dy.middleRows(sub.q_offset, sub.n());
        }
    }
    dcdot_dy.noalias() -=
        Vector::Ones(m.num_c) * (dbalance / m.salt_weight_sum);

    // Stack into the y ordering: [c_dot rows; interior q_dot rows].
    Matrix j(ny, ny);
    j.topRows(m.num_c) = dcdot_dy;
    for (size_t k = 0; k < m.q_interior.size(); ++k) {
        j.row(m.num_c + static_cast<int>(k)) = dqdot_dy.row(m.q_interior[k]);
    }
    return j;
}

// ---------------------------------------------------------------------------
// Current reconstruction & diagnostics
// ---------------------------------------------------------------------------

struct CurrentProfiles {
    Vector i1; ///< solid-phase current density, 0 on the separator, A/m^2
    Vector i2; ///< ionic current density, A/m^2
};

/// Pointwise currents from the state's fields: i1 = -sigma Phi1' on
/// electrodes, i2 = -kappa phi2' - kappa ((t+-t-)/f)(ln c)' (quadratic:
/// kappa -> beta c, ln c -> c).  On electrode interiors i1 + i2 equals the
/// applied current density to within the discretization's accuracy.
inline CurrentProfiles reconstruct_currents(const Mesh& m,
                                            const CellState& state,
                                            ModelVariant variant) {
    detail::require_positive_c(state.c, variant);
    const double g_tf = (m.params.t_plus - m.params.t_minus()) / m.transport.f;
    CurrentProfiles out;
    out.i1 = Vector::Zero(m.num_c);
    out.i2 = Vector::Zero(m.num_c);
    for (const auto& sub : m.sub) {
        const auto c_sub = state.c.segment(sub.c_offset, sub.n());
        const auto phi2_sub = state.phi2.segment(sub.c_offset, sub.n());
        const Vector dphi2 = sub.ops.d1 * phi2_sub;
        Vector ionic(sub.n());
        if (variant == ModelVariant::Quadratic) {
            const Vector dc = sub.ops.d1 * c_sub;
            ionic = -sub.beta *
                    (c_sub.array() * dphi2.array() + g_tf * dc.array())
                        .matrix();
        } else {
            ionic = -sub.kappa_eff * dphi2;
            if (variant == ModelVariant::Logarithmic && g_tf != 0.0) {
                const Vector dlogc =
                    sub.ops.d1 * c_sub.array().log().matrix().eval();
                ionic -= sub.kappa_eff * g_tf * dlogc;
            }
        }
        out.i2.segment(sub.c_offset, sub.n()) = ionic;
        if (sub.is_electrode) {
            const Vector phi1 = state.q.segment(sub.q_offset, sub.n()) +
                                phi2_sub;
            out.i1.segment(sub.c_offset, sub.n()) =
                -sub.sigma * (sub.ops.d1 * phi1);
        }
    }
    return out;
}

/// Total dissolved salt, sum over regions of eps * quadrature(c).
inline double salt_total(const Mesh& m, const Vector& c) {
    double total = 0.0;
    for (const auto& sub : m.sub) {
        total += sub.epsilon * sub.quad.dot(c.segment(sub.c_offset, sub.n()));
    }
    return total;
}

/// Relative defect of the discrete salt-balance identity
/// d/dt sum eps quad(c) = -gamma_q sum quad(q_dot) at one evaluation.
/// Zero (to rounding) by construction of rhs().
inline double salt_balance_residual(const Mesh& m, const Rates& rates) {
    double lhs = 0.0;
    double rhs_term = 0.0;
    double scale = 0.0;
    for (const auto& sub : m.sub) {
        lhs += sub.epsilon *
               sub.quad.dot(rates.c_dot.segment(sub.c_offset, sub.n()));
        scale += sub.epsilon *
                 sub.quad.dot(rates.c_dot.segment(sub.c_offset, sub.n())
                                  .cwiseAbs());
        if (sub.is_electrode) {
            rhs_term -= m.transport.gamma_q *
                        sub.quad.dot(
                            rates.q_dot.segment(sub.q_offset, sub.n()));
            scale += std::abs(m.transport.gamma_q) *
                     sub.quad.dot(rates.q_dot.segment(sub.q_offset, sub.n())
                                      .cwiseAbs());
        }
    }
    // Scale floor: one part per billion of the resident salt per second.
    const double floor = 1e-9 * m.salt_weight_sum * m.params.c0;
    return std::abs(lhs - rhs_term) / std::max(scale, floor);
}

/// Max-norm of the algebraic residual at a consistent state, scaled by
/// (|i_app| + 1).
inline double algebraic_residual_scaled(const Mesh& m, const CellState& state,
                                        double i_app, ModelVariant variant) {
    const auto [g, a] = assemble_algebraic(m, state, i_app, variant);
    (void)a;
    return g.lpNorm<Eigen::Infinity>() / (std::abs(i_app) + 1.0);
}

// ---------------------------------------------------------------------------
// Packing between CellState and the integrator's flat vector
// ---------------------------------------------------------------------------

/// y = [c (num_c); q at interior electrode slots (num_q - 4)].
inline Vector pack_state(const Mesh& m, const CellState& s) {
    Vector y(m.num_diff());
    y.head(m.num_c) = s.c;
    for (size_t k = 0; k < m.q_interior.size(); ++k) {
        y[m.num_c + static_cast<int>(k)] = s.q[m.q_interior[k]];
    }
    return y;
}

/// Rebuild a CellState from the flat vector; boundary q and phi2 are filled
/// by the algebraic solve.
inline CellState unpack_state(const Mesh& m, const Vector& y,
                              const Drive& drive, ModelVariant variant) {
    CellState s;
    s.c = y.head(m.num_c);
    s.q = Vector::Zero(m.num_q);
    for (size_t k = 0; k < m.q_interior.size(); ++k) {
        s.q[m.q_interior[k]] = y[m.num_c + static_cast<int>(k)];
    }
    refresh_algebraic(m, s, drive, variant);
    return s;
}

} // namespace edlsim
