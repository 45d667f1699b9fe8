#pragma once

/// Stiff one-step implicit integrator and protocol driver.
///
/// The stepper is the trapezoid / second-order-backward-difference
/// composite one-step method with gamma = 2 - sqrt(2): both implicit stages
/// share the iteration matrix I - (gamma h / 2) J, it is L-stable, and a
/// third-order embedded companion provides the local error estimate, which
/// is filtered through the iteration matrix so that stiff components do not
/// inflate it.  Stage equations are solved by a modified Newton iteration
/// with a cached, age- and failure-refreshed Jacobian.
///
/// The protocol driver advances a cell model through a sequence of
/// constant-current, constant-voltage, and sinusoidal-current segments,
/// lands on segment boundaries and requested output times exactly (the step
/// is clipped, never interpolated), and records terminal voltage, applied
/// current density, and solver diagnostics after every accepted step.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "edlsim/cellmodel.hpp"
#include "edlsim/errors.hpp"
#include "edlsim/spectral.hpp"

namespace edlsim {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct StepperConfig {
    double rel_tol = 1e-6;
    double abs_tol = 1e-9;
    double max_step = std::numeric_limits<double>::infinity();
    double min_step = 1e-12;
    int max_newton_iters = 12;
    double initial_step = 1e-3;
};

inline void validate(const StepperConfig& c) {
    auto check = [](bool ok, const char* what) {
        if (!ok) throw ConfigError(std::string("invalid StepperConfig: ") + what);
    };
    check(c.rel_tol > 0.0, "rel_tol must be > 0");
    check(c.abs_tol > 0.0, "abs_tol must be > 0");
    check(c.min_step > 0.0, "min_step must be > 0");
    check(c.min_step <= c.initial_step, "min_step must be <= initial_step");
    check(c.initial_step <= c.max_step, "initial_step must be <= max_step");
    check(c.max_newton_iters >= 1, "max_newton_iters must be >= 1");
}

// ---------------------------------------------------------------------------
// Generic ODE interface
// ---------------------------------------------------------------------------

/// Right-hand side (and optionally its Jacobian) of dy/dt = f(t, y).  When
/// `jacobian` is empty the stepper falls back to a forward-difference
/// approximation.  `abs_scale`, when non-empty, scales the absolute
/// tolerance per component (useful when components live on very different
/// magnitudes); it defaults to ones.
struct OdeSystem {
    std::function<Vector(double, const Vector&)> f;
    std::function<Matrix(double, const Vector&)> jacobian;
    Vector abs_scale;
};

struct StepResult {
    Vector y;               ///< proposed solution at t + dt
    Vector error;           ///< filtered local-error estimate
    double error_norm = 0.0; ///< weighted rms of `error`; <= 1 is acceptable
    int newton_iters = 0;
    bool newton_converged = false;
};

namespace detail {

// Method constants (gamma = 2 - sqrt(2)).
inline constexpr double kGamma = 2.0 - std::numbers::sqrt2;
/// Implicit weight shared by both stages: gamma / 2.
inline constexpr double kImplicitWeight = kGamma / 2.0;
/// Second-stage combination y_{n+1} = a y_gamma - (a - 1) y_n +
/// (gamma h/2) f, evaluated as y_n + a (y_gamma - y_n) so that a quiescent
/// system reproduces y_n bit for bit.
inline constexpr double kStageCoeffMid = (std::numbers::sqrt2 + 1.0) / 2.0;
/// Difference between the second-order solution weights and the embedded
/// third-order weights; the weights sum to zero.
inline constexpr double kErrWeightOld = (std::numbers::sqrt2 - 1.0) / 3.0;
inline constexpr double kErrWeightMid = -1.0 / 3.0;
inline constexpr double kErrWeightNew = (2.0 - std::numbers::sqrt2) / 3.0;

/// Newton is declared converged once the weighted-rms update drops below
/// this fraction of the local-error gate.
inline constexpr double kNewtonTol = 0.02;
/// Newton is declared stalled when an update shrinks by less than this
/// factor relative to the previous one.
inline constexpr double kNewtonMinRate = 0.9;
/// Step-size controller: classic third-order-error rule with safety factor
/// and growth/shrink limits.
inline constexpr double kSafety = 0.9;
inline constexpr double kGrowthCap = 4.0;
inline constexpr double kShrinkFloor = 0.2;
/// Cached Jacobians are refreshed after this many step attempts even if
/// Newton keeps converging.
inline constexpr int kJacobianMaxAge = 20;
/// Error norms are floored here before entering the controller so that a
/// vanishing estimate cannot demand an unbounded step.
inline constexpr double kErrorFloor = 1e-10;

inline Vector error_weights(const StepperConfig& cfg, const Vector& scale,
                            const Vector& a, const Vector& b) {
    return (cfg.abs_tol * scale.array() +
            cfg.rel_tol * a.cwiseAbs().cwiseMax(b.cwiseAbs()).array())
        .matrix();
}

inline double weighted_rms(const Vector& v, const Vector& w) {
    return std::sqrt((v.array() / w.array()).square().mean());
}

/// One-step worker: owns the Jacobian/LU caches so a driver can amortize
/// factorizations across steps.
class TrBdf2Worker {
public:
    TrBdf2Worker(const OdeSystem& sys, const StepperConfig& cfg)
        : sys_(&sys), cfg_(cfg) {
        if (!sys_->f) throw ConfigError("OdeSystem::f must be set");
    }

    struct Attempt {
        Vector y_next;
        Vector f_next;
        Vector error;
        double error_norm = std::numeric_limits<double>::infinity();
        int newton_iters = 0;
        bool newton_ok = false;
    };

    /// Attempt one step of size h from (t, y) with f_y = f(t, y).  Never
    /// throws for state-dependent evaluation failures: those surface as
    /// newton_ok = false so the driver can shrink the step.
    Attempt attempt(double t, const Vector& y, const Vector& f_y, double h) {
        Attempt out;
        const Vector weights = error_weights(
            cfg_, scale(y.size()), y, y);
        for (int pass = 0; pass < 2; ++pass) {
            if (!prepare(t, y, h)) return out; // singular iteration matrix
            const bool fresh = jac_age_ == 0;
            ++jac_age_;
            if (run_stages(t, y, f_y, h, weights, out)) {
                return out;
            }
            if (fresh) return out; // a fresh Jacobian still failed
            invalidate_jacobian(); // retry once with a fresh Jacobian
        }
        return out;
    }

    void invalidate_jacobian() { have_jac_ = false; }

private:
    Vector scale(Eigen::Index n) const {
        if (sys_->abs_scale.size() == n) return sys_->abs_scale;
        return Vector::Ones(n);
    }

    Matrix numerical_jacobian(double t, const Vector& y) {
        const Eigen::Index n = y.size();
        Matrix jac(n, n);
        const Vector f0 = sys_->f(t, y);
        const Vector sc = scale(n);
        for (Eigen::Index k = 0; k < n; ++k) {
            const double h =
                std::sqrt(std::numeric_limits<double>::epsilon()) *
                std::max(std::abs(y[k]), 1e-3 * sc[k]);
            Vector yk = y;
            yk[k] += h;
            jac.col(k) = (sys_->f(t, yk) - f0) / h;
        }
        return jac;
    }

    /// Refresh the Jacobian/LU caches as needed; false if the iteration
    /// matrix cannot be factored.
    bool prepare(double t, const Vector& y, double h) {
        const bool need_jac = !have_jac_ || jac_age_ >= kJacobianMaxAge;
        if (need_jac) {
            try {
                jac_ = sys_->jacobian ? sys_->jacobian(t, y)
                                      : numerical_jacobian(t, y);
            } catch (const EvaluationError&) {
                return false;
            }
            have_jac_ = true;
            jac_age_ = 0;
        }
        if (need_jac || h != lu_h_) {
            Matrix m = -kImplicitWeight * h * jac_;
            m.diagonal().array() += 1.0;
            lu_.compute(m);
            const Vector diag = lu_.matrixLU().diagonal().cwiseAbs();
            if (!(diag.minCoeff() > 0.0)) return false;
            lu_h_ = h;
        }
        return true;
    }

    struct StageSolve {
        Vector w;
        int iters = 0;
        bool ok = false;
    };

    /// Solve w - (gamma h/2) f(ts, w) = r by modified Newton.
    StageSolve solve_stage(double ts, double h, const Vector& r,
                           const Vector& weights, Vector predictor) {
        StageSolve out;
        out.w = std::move(predictor);
        double prev_norm = std::numeric_limits<double>::infinity();
        for (int k = 0; k < cfg_.max_newton_iters; ++k) {
            Vector fw;
            try {
                fw = sys_->f(ts, out.w);
            } catch (const EvaluationError&) {
                return out;
            }
            ++out.iters;
            const Vector g = out.w - kImplicitWeight * h * fw - r;
            const Vector delta = lu_.solve(-g);
            out.w += delta;
            const double dn = weighted_rms(delta, weights);
            if (!std::isfinite(dn)) return out;
            if (dn < kNewtonTol) {
                out.ok = true;
                return out;
            }
            if (k >= 1 && dn > kNewtonMinRate * prev_norm) return out;
            prev_norm = dn;
        }
        return out;
    }

    /// Both stages plus the error estimate; false on Newton failure.
    bool run_stages(double t, const Vector& y, const Vector& f_y, double h,
                    const Vector& weights, Attempt& out) {
        out.newton_ok = false;
        // Trapezoid stage to t + gamma h.
        const Vector r_mid = y + kImplicitWeight * h * f_y;
        StageSolve mid = solve_stage(t + kGamma * h, h, r_mid, weights,
                                     y + kGamma * h * f_y);
        out.newton_iters += mid.iters;
        if (!mid.ok) return false;
        // The converged stage satisfies its equation to well below the error
        // gate, so the stage derivative is implied rather than re-evaluated.
        const Vector f_mid = (mid.w - r_mid) / (kImplicitWeight * h);
        // Backward-difference stage to t + h.
        const Vector r_new = y + kStageCoeffMid * (mid.w - y);
        StageSolve fin = solve_stage(t + h, h, r_new, weights,
                                     r_new + kImplicitWeight * h * f_mid);
        out.newton_iters += fin.iters;
        if (!fin.ok) return false;
        // True end-of-step derivative: reused by the caller as the next
        // step's f_y, and by the embedded error estimate.
        Vector f_new;
        try {
            f_new = sys_->f(t + h, fin.w);
        } catch (const EvaluationError&) {
            return false;
        }
        const Vector raw = h * (kErrWeightOld * f_y + kErrWeightMid * f_mid +
                                kErrWeightNew * f_new);
        out.error = lu_.solve(raw);
        const Vector w_final = error_weights(cfg_, scale(y.size()), y, fin.w);
        out.error_norm = weighted_rms(out.error, w_final);
        out.y_next = std::move(fin.w);
        out.f_next = std::move(f_new);
        out.newton_ok = true;
        return std::isfinite(out.error_norm);
    }

    const OdeSystem* sys_;
    StepperConfig cfg_;
    Matrix jac_;
    bool have_jac_ = false;
    int jac_age_ = 0;
    Eigen::PartialPivLU<Matrix> lu_;
    double lu_h_ = std::numeric_limits<double>::quiet_NaN();
};

} // namespace detail

/// Take a single implicit step of size dt from (t, y).  No step-size
/// control happens here; the caller inspects error_norm (<= 1 passes at the
/// configured tolerances) and newton_converged.
inline StepResult step_implicit(const Vector& y, double t, double dt,
                                const OdeSystem& system,
                                const StepperConfig& config = {}) {
    validate(config);
    if (!(dt > 0.0)) throw ConfigError("step_implicit: dt must be > 0");
    detail::TrBdf2Worker worker(system, config);
    const Vector f_y = system.f(t, y);
    const auto attempt = worker.attempt(t, y, f_y, dt);
    StepResult out;
    out.newton_converged = attempt.newton_ok;
    out.newton_iters = attempt.newton_iters;
    if (attempt.newton_ok) {
        out.y = attempt.y_next;
        out.error = attempt.error;
        out.error_norm = attempt.error_norm;
    } else {
        out.y = y;
        out.error = Vector::Zero(y.size());
        out.error_norm = std::numeric_limits<double>::infinity();
    }
    return out;
}

/// Convenience overload: plain right-hand-side callable, finite-difference
/// Jacobian.
inline StepResult step_implicit(
    const Vector& y, double t, double dt,
    const std::function<Vector(double, const Vector&)>& rhs,
    const StepperConfig& config = {}) {
    OdeSystem system;
    system.f = rhs;
    return step_implicit(y, t, dt, system, config);
}

// ---------------------------------------------------------------------------
// Adaptive driver
// ---------------------------------------------------------------------------

struct TraceDiagnostics {
    long steps = 0;        ///< accepted steps
    long rejected = 0;     ///< error rejections plus Newton failures
    long newton_iters = 0; ///< total Newton iterations, failed attempts included
    double wall_time = 0.0; ///< seconds spent inside integrate()
    double max_alg_residual = 0.0;  ///< scaled algebraic residual, accepted steps
    double max_salt_residual = 0.0; ///< relative salt-balance defect, accepted steps
};

namespace detail {

/// Advance y from t0 to t1 adaptively, landing exactly on every time in
/// `forced` (sorted, strictly inside (t0, t1)) and on t1.  `on_accept` is
/// called after every accepted step with (t, y, landed-on-forced-time).
inline void integrate_adaptive(
    const OdeSystem& sys, double t0, double t1, Vector& y,
    const StepperConfig& cfg, const std::vector<double>& forced,
    const std::function<void(double, const Vector&, bool)>& on_accept,
    TraceDiagnostics* diag = nullptr) {
    validate(cfg);
    if (!(t1 > t0)) throw ConfigError("integrate: segment must advance time");

    TrBdf2Worker worker(sys, cfg);
    Vector f_y;
    try {
        f_y = sys.f(t0, y);
    } catch (const EvaluationError& e) {
        // There is no step size to shrink before the first step: the
        // supplied state itself cannot be evaluated.
        throw SolverError(std::string("right-hand side failed at the start "
                                      "of a segment: ") + e.what());
    }
    double t = t0;
    double h = std::min(cfg.initial_step, cfg.max_step);
    double prev_accepted_h = h;
    bool just_rejected = false;
    size_t next_forced = 0;

    while (t < t1) {
        double target = t1;
        while (next_forced < forced.size() && forced[next_forced] <= t) {
            ++next_forced;
        }
        if (next_forced < forced.size() && forced[next_forced] < t1) {
            target = forced[next_forced];
        }
        h = std::min(h, cfg.max_step);
        bool landing = false;
        if (t + h >= target || (target - t) - h < 1e-12 * (target - t)) {
            h = target - t;
            landing = true;
        }

        const auto attempt = worker.attempt(t, y, f_y, h);
        if (diag) diag->newton_iters += attempt.newton_iters;

        if (!attempt.newton_ok) {
            if (diag) ++diag->rejected;
            worker.invalidate_jacobian();
            h *= 0.5;
            just_rejected = true;
            if (h < cfg.min_step) {
                throw SolverError(
                    "implicit step failed to converge above the minimum "
                    "step size at t = " + std::to_string(t));
            }
            continue;
        }
        const double err =
            std::max(attempt.error_norm, detail::kErrorFloor);
        if (attempt.error_norm > 1.0) {
            if (diag) ++diag->rejected;
            h *= std::clamp(kSafety * std::pow(err, -1.0 / 3.0),
                            kShrinkFloor, 0.7);
            just_rejected = true;
            if (h < cfg.min_step) {
                throw SolverError(
                    "local error control drove the step below the minimum "
                    "step size at t = " + std::to_string(t));
            }
            continue;
        }

        // Accept.
        const double h_used = h;
        t = landing ? target : t + h;
        y = attempt.y_next;
        f_y = attempt.f_next;
        if (diag) ++diag->steps;
        on_accept(t, y, landing);

        double factor = kSafety * std::pow(err, -1.0 / 3.0);
        factor = std::clamp(factor, kShrinkFloor, kGrowthCap);
        if (just_rejected) factor = std::min(factor, 1.0);
        just_rejected = false;
        // A clipped landing step says nothing about what the error allows;
        // rebuild the working step from the last controller-sized one.
        const double base = landing ? std::max(h_used, prev_accepted_h) : h_used;
        if (!landing) prev_accepted_h = h_used;
        h = std::min(base * factor, cfg.max_step);
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

/// Constant applied current (total amperes, positive charges the cell).
struct ConstantCurrent {
    double current = 0.0;  ///< A
    double duration = 0.0; ///< s
};

/// Constant terminal voltage.  An empty voltage means "hold whatever the
/// terminal voltage is when this segment begins".
struct ConstantVoltage {
    std::optional<double> voltage; ///< V
    double duration = 0.0;         ///< s
};

/// Sinusoidal current about a dc offset; lasts `cycles` full periods.
struct Sinusoid {
    double dc = 0.0;        ///< A
    double amplitude = 0.0; ///< A
    double frequency = 1.0; ///< Hz
    double cycles = 1.0;
};

using Segment = std::variant<ConstantCurrent, ConstantVoltage, Sinusoid>;
using Protocol = std::vector<Segment>;

inline double segment_duration(const Segment& seg) {
    return std::visit(
        [](const auto& s) -> double {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Sinusoid>) {
                return s.cycles / s.frequency;
            } else {
                return s.duration;
            }
        },
        seg);
}

inline void validate(const Protocol& protocol) {
    if (protocol.empty()) throw ConfigError("protocol has no segments");
    for (const auto& seg : protocol) {
        if (const auto* sin = std::get_if<Sinusoid>(&seg)) {
            if (!(sin->frequency > 0.0)) {
                throw ConfigError("sinusoid frequency must be > 0");
            }
            if (!(sin->cycles > 0.0)) {
                throw ConfigError("sinusoid cycle count must be > 0");
            }
        }
        if (!(segment_duration(seg) > 0.0)) {
            throw ConfigError("protocol segment duration must be > 0");
        }
    }
}

// ---------------------------------------------------------------------------
// Cell system bridge
// ---------------------------------------------------------------------------

/// Adapts the cell model to the generic stepper: y = [c; interior q], the
/// algebraic fields are eliminated inside each evaluation, and the most
/// recent evaluation's terminal voltage, applied current, and residual
/// diagnostics are cached so the driver can record them without re-solving.
class CellOdeSystem {
public:
    CellOdeSystem(const Mesh& mesh, ModelVariant variant,
                  std::function<Drive(double)> drive)
        : mesh_(&mesh), variant_(variant), drive_(std::move(drive)) {}

    Vector f(double t, const Vector& y) {
        const Mesh& m = *mesh_;
        Vector c = y.head(m.num_c);
        Vector q = Vector::Zero(m.num_q);
        for (size_t k = 0; k < m.q_interior.size(); ++k) {
            q[m.q_interior[k]] = y[m.num_c + static_cast<int>(k)];
        }
        const Rates rates = rhs(m, c, q, drive_(t), variant_);
        cache_(rates, c, q);
        Vector out(m.num_diff());
        out.head(m.num_c) = rates.c_dot;
        for (size_t k = 0; k < m.q_interior.size(); ++k) {
            out[m.num_c + static_cast<int>(k)] =
                rates.q_dot[m.q_interior[k]];
        }
        return out;
    }

    Matrix jacobian(double t, const Vector& y) const {
        const Mesh& m = *mesh_;
        Vector q = Vector::Zero(m.num_q);
        for (size_t k = 0; k < m.q_interior.size(); ++k) {
            q[m.q_interior[k]] = y[m.num_c + static_cast<int>(k)];
        }
        return rhs_jacobian(m, y.head(m.num_c), q, drive_(t), variant_);
    }

    OdeSystem as_ode() {
        OdeSystem sys;
        sys.f = [this](double t, const Vector& y) { return f(t, y); };
        sys.jacobian = [this](double t, const Vector& y) {
            return jacobian(t, y);
        };
        sys.abs_scale = Vector::Ones(mesh_->num_diff());
        sys.abs_scale.head(mesh_->num_c).setConstant(mesh_->params.c0);
        return sys;
    }

    // Cached values from the most recent f() evaluation.
    double last_voltage() const { return last_voltage_; }
    double last_current_density() const { return last_i_app_; }
    double last_alg_residual() const { return last_alg_residual_; }
    double last_salt_residual() const { return last_salt_residual_; }

    /// Full collocated state of the most recent f() evaluation.
    const CellState& last_state() const { return last_state_; }

private:
    void cache_(const Rates& rates, const Vector& c, const Vector& q) {
        const Mesh& m = *mesh_;
        last_state_.c = c;
        last_state_.q = q;
        for (int k = 0; k < 4; ++k) {
            last_state_.q[m.q_boundary[k]] = rates.algebraic.q_boundary[k];
        }
        last_state_.phi2 = rates.algebraic.phi2;
        last_voltage_ = terminal_voltage(m, last_state_);
        last_i_app_ = rates.algebraic.i_app;
        last_alg_residual_ = rates.algebraic.residual_inf /
                             (std::abs(rates.algebraic.i_app) + 1.0);
        last_salt_residual_ = salt_balance_residual(m, rates);
    }

    const Mesh* mesh_;
    ModelVariant variant_;
    std::function<Drive(double)> drive_;
    CellState last_state_;
    double last_voltage_ = 0.0;
    double last_i_app_ = 0.0;
    double last_alg_residual_ = 0.0;
    double last_salt_residual_ = 0.0;
};

// ---------------------------------------------------------------------------
// Protocol integration
// ---------------------------------------------------------------------------

struct SimulationTrace {
    std::vector<double> times;
    std::vector<double> voltages;          ///< V
    std::vector<double> current_densities; ///< A/m^2, positive charging
    std::vector<CellState> snapshots;      ///< aligned with times when recorded
    TraceDiagnostics diagnostics;
};

struct IntegrateOptions {
    /// Absolute times to land on exactly and always record (sorted or not).
    std::vector<double> output_times;
    /// Record every accepted step (otherwise only forced landings).
    bool record_steps = true;
    /// Keep full field snapshots alongside the scalar trace.
    bool record_snapshots = false;
};

inline SimulationTrace integrate(const Mesh& mesh, const CellState& initial,
                                 const Protocol& protocol,
                                 ModelVariant variant,
                                 const StepperConfig& config = {},
                                 const IntegrateOptions& options = {}) {
    validate(config);
    validate(protocol);
    const auto t_begin = std::chrono::steady_clock::now();

    std::vector<double> wanted = options.output_times;
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

    SimulationTrace trace;
    Vector y = pack_state(mesh, initial);

    // Row 0 is the caller's state exactly as given, before any algebraic
    // refresh; the recorded current is the drive at t = 0.
    auto initial_current = [&](const Segment& seg) -> double {
        if (const auto* cc = std::get_if<ConstantCurrent>(&seg)) {
            return cc->current / mesh.params.area;
        }
        if (const auto* sin = std::get_if<Sinusoid>(&seg)) {
            return sin->dc / mesh.params.area;
        }
        const auto& cv = std::get<ConstantVoltage>(seg);
        const double v_set =
            cv.voltage ? *cv.voltage : terminal_voltage(mesh, initial);
        return solve_algebraic(mesh, initial.c, initial.q,
                               Drive::voltage(v_set), variant)
            .i_app;
    };
    trace.times.push_back(0.0);
    trace.voltages.push_back(terminal_voltage(mesh, initial));
    trace.current_densities.push_back(initial_current(protocol.front()));
    if (options.record_snapshots) trace.snapshots.push_back(initial);

    double t_start = 0.0;
    for (const auto& seg : protocol) {
        const double t_end = t_start + segment_duration(seg);

        // Resolve this segment's drive.
        std::function<Drive(double)> drive;
        if (const auto* cc = std::get_if<ConstantCurrent>(&seg)) {
            const double i_app = cc->current / mesh.params.area;
            drive = [i_app](double) { return Drive::current(i_app); };
        } else if (const auto* cv = std::get_if<ConstantVoltage>(&seg)) {
            const double v_set =
                cv->voltage ? *cv->voltage : trace.voltages.back();
            drive = [v_set](double) { return Drive::voltage(v_set); };
        } else {
            const auto& sin = std::get<Sinusoid>(seg);
            const double area = mesh.params.area;
            const double seg_t0 = t_start;
            const double dc = sin.dc;
            const double amp = sin.amplitude;
            const double omega = 2.0 * std::numbers::pi * sin.frequency;
            drive = [=](double t) {
                return Drive::current(
                    (dc + amp * std::sin(omega * (t - seg_t0))) / area);
            };
        }

        CellOdeSystem system(mesh, variant, drive);
        const OdeSystem ode = system.as_ode();

        std::vector<double> forced;
        for (const double tw : wanted) {
            if (tw > t_start && tw < t_end) forced.push_back(tw);
        }

        auto on_accept = [&](double t, const Vector&, bool landed) {
            trace.diagnostics.max_alg_residual =
                std::max(trace.diagnostics.max_alg_residual,
                         system.last_alg_residual());
            trace.diagnostics.max_salt_residual =
                std::max(trace.diagnostics.max_salt_residual,
                         system.last_salt_residual());
            const bool is_wanted =
                landed || t == t_end ||
                std::binary_search(wanted.begin(), wanted.end(), t);
            if (!options.record_steps && !is_wanted && t != t_end) return;
            trace.times.push_back(t);
            trace.voltages.push_back(system.last_voltage());
            trace.current_densities.push_back(system.last_current_density());
            if (options.record_snapshots) {
                trace.snapshots.push_back(system.last_state());
            }
        };
        detail::integrate_adaptive(ode, t_start, t_end, y, config, forced,
                                   on_accept, &trace.diagnostics);
        t_start = t_end;
    }

    trace.diagnostics.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      t_begin)
            .count();
    return trace;
}

// ---------------------------------------------------------------------------
// Timing utility
// ---------------------------------------------------------------------------

/// Median wall-clock seconds of at least five executions of `work`.
template <typename F>
double measure_runtime(F&& work, int samples = 5) {
    samples = std::max(samples, 5);
    std::vector<double> elapsed(static_cast<size_t>(samples));
    for (auto& e : elapsed) {
        const auto begin = std::chrono::steady_clock::now();
        work();
        e = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                          begin)
                .count();
    }
    std::sort(elapsed.begin(), elapsed.end());
    return elapsed[elapsed.size() / 2];
}

} // namespace edlsim
