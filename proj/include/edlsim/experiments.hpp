/// Canned studies built on the cell model and integrator: reference charging
/// profiles, cross-scheme convergence and timing comparisons, and impedance
/// sweeps with complex-capacitance extraction.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <future>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edlsim/integrator.hpp"

namespace edlsim {

// ---------------------------------------------------------------------------
// Built-in charging profiles
// ---------------------------------------------------------------------------

/// Standard charge: constant current, then hold the reached voltage.
inline constexpr double kStandardCurrent = 100.0;        ///< A
inline constexpr double kStandardChargeSeconds = 23.2;   ///< CC length
inline constexpr double kStandardHoldSeconds = 6.0;      ///< CV length
inline constexpr double kStandardInitialVoltage = 1.63;  ///< V

/// Dilute-electrolyte variant of the standard charge.
inline constexpr double kDiluteConcentration = 250.0;    ///< mol/m^3

/// Extended deep-cycle charge: long CC leg from a negative rest voltage,
/// then a hold a fixed offset below the voltage reached at the switch.
inline constexpr double kExtendedInitialVoltage = -2.37; ///< V
inline constexpr double kExtendedChargeSeconds = 130.0;  ///< CC length
inline constexpr double kExtendedHoldSeconds = 70.0;     ///< CV length
inline constexpr double kExtendedHoldDrop = 1.08;        ///< V below V(CC end)

namespace detail {

/// Append `tail` to `head`, shifting tail times by t_offset and dropping
/// tail's first row (it duplicates head's final time).
inline void append_trace(SimulationTrace& head, const SimulationTrace& tail,
                         double t_offset) {
    for (size_t k = 1; k < tail.times.size(); ++k) {
        head.times.push_back(t_offset + tail.times[k]);
        head.voltages.push_back(tail.voltages[k]);
        head.current_densities.push_back(tail.current_densities[k]);
        if (!tail.snapshots.empty()) {
            head.snapshots.push_back(tail.snapshots[k]);
        }
    }
    head.diagnostics.steps += tail.diagnostics.steps;
    head.diagnostics.rejected += tail.diagnostics.rejected;
    head.diagnostics.newton_iters += tail.diagnostics.newton_iters;
    head.diagnostics.wall_time += tail.diagnostics.wall_time;
    head.diagnostics.max_alg_residual =
        std::max(head.diagnostics.max_alg_residual,
                 tail.diagnostics.max_alg_residual);
    head.diagnostics.max_salt_residual =
        std::max(head.diagnostics.max_salt_residual,
                 tail.diagnostics.max_salt_residual);
}

} // namespace detail

/// Standard charging profile: CC(100 A) for 23.2 s from 1.63 V, then hold
/// the reached voltage for 6 s.
inline SimulationTrace run_standard_profile(
    ModelVariant variant, Scheme scheme, int order,
    const StepperConfig& config = {},
    const CellParameters& params = default_cell_parameters(),
    const IntegrateOptions& options = {}) {
    const Mesh mesh = build_mesh(params, scheme, order, order);
    const CellState s0 = initial_state(mesh, kStandardInitialVoltage);
    const Protocol protocol{
        ConstantCurrent{kStandardCurrent, kStandardChargeSeconds},
        ConstantVoltage{std::nullopt, kStandardHoldSeconds}};
    return integrate(mesh, s0, protocol, variant, config, options);
}

/// Standard profile at reduced electrolyte concentration; always records
/// field snapshots so final-time distributions can be compared.
inline SimulationTrace run_dilute_profile(
    ModelVariant variant, Scheme scheme, int order,
    const StepperConfig& config = {},
    CellParameters params = default_cell_parameters(),
    IntegrateOptions options = {}) {
    params.c0 = kDiluteConcentration;
    options.record_snapshots = true;
    return run_standard_profile(variant, scheme, order, config, params,
                                options);
}

/// Extended deep-cycle profile: CC(100 A) for 130 s from -2.37 V, then hold
/// 1.08 V below the voltage reached at the switch for 70 s.  The trace
/// spans exactly 200 s.
inline SimulationTrace run_extended_profile(
    ModelVariant variant, Scheme scheme, int order,
    const StepperConfig& config = {},
    const CellParameters& params = default_cell_parameters(),
    const IntegrateOptions& options = {}) {
    const Mesh mesh = build_mesh(params, scheme, order, order);
    const CellState s0 = initial_state(mesh, kExtendedInitialVoltage);

    IntegrateOptions charge_opts = options;
    charge_opts.record_snapshots = true; // the hold needs the switch state
    charge_opts.output_times.clear();
    for (const double t : options.output_times) {
        if (t < kExtendedChargeSeconds) charge_opts.output_times.push_back(t);
    }
    SimulationTrace trace = integrate(
        mesh, s0,
        Protocol{ConstantCurrent{kStandardCurrent, kExtendedChargeSeconds}},
        variant, config, charge_opts);

    const double v_hold = trace.voltages.back() - kExtendedHoldDrop;
    const CellState switch_state = trace.snapshots.back();
    if (!options.record_snapshots) trace.snapshots.clear();

    IntegrateOptions hold_opts = options;
    hold_opts.output_times.clear();
    for (const double t : options.output_times) {
        if (t > kExtendedChargeSeconds &&
            t < kExtendedChargeSeconds + kExtendedHoldSeconds) {
            hold_opts.output_times.push_back(t - kExtendedChargeSeconds);
        }
    }
    const SimulationTrace hold = integrate(
        mesh, switch_state,
        Protocol{ConstantVoltage{v_hold, kExtendedHoldSeconds}}, variant,
        config, hold_opts);
    detail::append_trace(trace, hold, kExtendedChargeSeconds);
    return trace;
}

// ---------------------------------------------------------------------------
// Cross-scheme convergence study
// ---------------------------------------------------------------------------

/// Field-wise normalized error between two runs sampled on a common grid.
struct FieldErrors {
    double c = 0.0;
    double phi1 = 0.0;
    double phi2 = 0.0;
};

struct ConvergenceEntry {
    Scheme scheme = Scheme::ChebyshevCollocation;
    int order = 0;
    FieldErrors error;
};

struct ConvergenceReport {
    std::vector<ConvergenceEntry> entries;
    int reference_order = 0;
    std::string reference; ///< human-readable reference description
};

/// A run's fields resampled onto a reference mesh at every recorded time:
/// one row per time, one column per reference node.  phi1 = q + phi2 exists
/// on electrode nodes only (left electrode block, then right).
struct SampledFields {
    Matrix c;
    Matrix phi1;
    Matrix phi2;
};

/// Resample a trace's snapshots onto `ref`'s collocation nodes, subdomain
/// by subdomain, using the run scheme's own interpolant: the global
/// polynomial through the nodes for the spectral scheme, piecewise-linear
/// for finite differences.
inline SampledFields sample_fields_on(const Mesh& ref, const Mesh& run_mesh,
                                      const SimulationTrace& trace) {
    if (trace.snapshots.size() != trace.times.size()) {
        throw ConfigError(
            "sample_fields_on: trace was recorded without snapshots");
    }
    const auto n_t = static_cast<Eigen::Index>(trace.times.size());
    SampledFields out;
    out.c.resize(n_t, ref.num_c);
    out.phi2.resize(n_t, ref.num_c);
    out.phi1.resize(n_t, ref.sub[0].n() + ref.sub[2].n());

    std::array<Vector, 3> bary;
    for (int s = 0; s < 3; ++s) {
        if (run_mesh.scheme == Scheme::ChebyshevCollocation) {
            bary[s] = chebyshev_barycentric_weights(run_mesh.sub[s].n());
        }
    }
    const auto eval = [&](int s, const Vector& values, double x) {
        const Vector& nodes = run_mesh.sub[s].ops.nodes;
        if (run_mesh.scheme == Scheme::ChebyshevCollocation) {
            return barycentric_interpolate(nodes, bary[s], values, x);
        }
        return linear_interpolate(nodes, values, x);
    };

    for (Eigen::Index row = 0; row < n_t; ++row) {
        const CellState& state = trace.snapshots[static_cast<size_t>(row)];
        int phi1_col = 0;
        for (int s = 0; s < 3; ++s) {
            const auto& rsub = run_mesh.sub[s];
            const auto& tsub = ref.sub[s];
            const Vector c_vals = state.c.segment(rsub.c_offset, rsub.n());
            const Vector p2_vals =
                state.phi2.segment(rsub.c_offset, rsub.n());
            for (int j = 0; j < tsub.n(); ++j) {
                const double x = tsub.ops.nodes[j];
                out.c(row, tsub.c_offset + j) = eval(s, c_vals, x);
                out.phi2(row, tsub.c_offset + j) = eval(s, p2_vals, x);
            }
            if (rsub.is_electrode) {
                const Vector p1_vals =
                    state.q.segment(rsub.q_offset, rsub.n()) + p2_vals;
                for (int j = 0; j < tsub.n(); ++j) {
                    out.phi1(row, phi1_col + j) =
                        eval(s, p1_vals, tsub.ops.nodes[j]);
                }
                phi1_col += tsub.n();
            }
        }
    }
    return out;
}

/// 2-norm of the difference over all recorded times, divided by
/// (number of times x number of space points) per field.  Symmetric, and
/// zero exactly when the sampled solutions coincide.
inline FieldErrors normalized_error(const SampledFields& a,
                                    const SampledFields& b) {
    if (a.c.rows() != b.c.rows() || a.c.cols() != b.c.cols() ||
        a.phi1.cols() != b.phi1.cols()) {
        throw ConfigError("normalized_error: sample grids do not match");
    }
    const auto scaled = [&](const Matrix& x, const Matrix& y) {
        const double denom = static_cast<double>(x.rows()) *
                             static_cast<double>(x.cols());
        return (x - y).norm() / denom;
    };
    FieldErrors e;
    e.c = scaled(a.c, b.c);
    e.phi1 = scaled(a.phi1, b.phi1);
    e.phi2 = scaled(a.phi2, b.phi2);
    return e;
}

namespace detail {

/// Shared output grid for convergence comparisons: 73 uniform samples
/// spanning the standard profile, identical in every run by construction.
inline std::vector<double> convergence_sample_times() {
    const double total = kStandardChargeSeconds + kStandardHoldSeconds;
    std::vector<double> times;
    for (int k = 1; k < 73; ++k) {
        times.push_back(total * k / 73.0);
    }
    return times;
}

} // namespace detail

/// Run the standard profile for every (scheme, order) pair and measure each
/// run's fields against a high-order spectral reference on the reference
/// mesh at shared sample times.
inline ConvergenceReport convergence_study(
    ModelVariant variant, const std::vector<int>& orders, int reference_order,
    const StepperConfig& config = {},
    const CellParameters& params = default_cell_parameters()) {
    if (orders.empty()) {
        throw ConfigError("convergence_study: no orders to compare");
    }
    const int max_order = *std::max_element(orders.begin(), orders.end());
    if (reference_order <= max_order) {
        throw ConfigError(
            "convergence_study: the reference order must exceed every "
            "compared order");
    }

    IntegrateOptions opts;
    opts.record_steps = false;
    opts.record_snapshots = true;
    opts.output_times = detail::convergence_sample_times();

    const Mesh ref_mesh = build_mesh(params, Scheme::ChebyshevCollocation,
                                     reference_order, reference_order);
    const SimulationTrace ref_trace =
        run_standard_profile(variant, Scheme::ChebyshevCollocation,
                             reference_order, config, params, opts);
    const SampledFields ref_fields =
        sample_fields_on(ref_mesh, ref_mesh, ref_trace);

    ConvergenceReport report;
    report.reference_order = reference_order;
    report.reference = std::string(scheme_name(Scheme::ChebyshevCollocation)) +
                       " order " + std::to_string(reference_order);

    std::vector<std::pair<Scheme, int>> tasks;
    for (const Scheme scheme : {Scheme::ChebyshevCollocation,
                                Scheme::CentralFiniteDifference}) {
        for (const int order : orders) tasks.emplace_back(scheme, order);
    }
    std::vector<std::future<FieldErrors>> futures;
    futures.reserve(tasks.size());
    for (const auto& [scheme, order] : tasks) {
        futures.push_back(std::async(std::launch::async, [&, scheme, order] {
            const Mesh mesh = build_mesh(params, scheme, order, order);
            const SimulationTrace trace = run_standard_profile(
                variant, scheme, order, config, params, opts);
            return normalized_error(sample_fields_on(ref_mesh, mesh, trace),
                                    ref_fields);
        }));
    }
    for (size_t k = 0; k < tasks.size(); ++k) {
        report.entries.push_back(
            ConvergenceEntry{tasks[k].first, tasks[k].second,
                             futures[k].get()});
    }
    return report;
}

// ---------------------------------------------------------------------------
// Impedance sweeps
// ---------------------------------------------------------------------------

/// One frequency of an impedance sweep.  capacitance = 1/(j omega impedance)
/// by construction; `settled` is false when the per-cycle phasors still
/// drift, i.e. the discarded transient was not long enough.
struct ImpedancePoint {
    double frequency = 0.0;                    ///< Hz
    std::complex<double> impedance{0.0, 0.0};  ///< Ohm, total-current basis
    std::complex<double> capacitance{0.0, 0.0}; ///< F
    bool settled = true;
};

inline constexpr int kEisSamplesPerCycle = 64;
inline constexpr int kEisFitCycles = 4;       ///< extraction window, periods
inline constexpr int kEisMinDiscardCycles = 3;
/// Discard at least this many characteristic times before fitting.
inline constexpr double kEisSettleTimeFactor = 3.0;
/// Relative inter-cycle phasor drift above which a point is not settled.
inline constexpr double kEisSettleTol = 1e-3;

/// Default sweep: 20 log-spaced points over 1 mHz..10 Hz.
inline std::vector<double> default_eis_frequencies() {
    std::vector<double> f(20);
    for (int k = 0; k < 20; ++k) {
        f[static_cast<size_t>(k)] = std::pow(10.0, -3.0 + 4.0 * k / 19.0);
    }
    return f;
}

namespace detail {

/// Least-squares phasor of samples (t, v) on [t0, t1] at angular frequency
/// omega, with an affine trend absorbed by the basis {1, t, cos, sin}: the
/// net charging offset makes the voltage ramp, and an un-detrended
/// projection would leak that ramp into the phasor.  Returns P such that
/// the fitted oscillation is Re(P e^{j omega t}).
inline std::complex<double> fit_phasor(const std::vector<double>& t,
                                       const std::vector<double>& v,
                                       double omega, double t0, double t1) {
    std::vector<Eigen::Index> keep;
    for (size_t k = 0; k < t.size(); ++k) {
        if (t[k] >= t0 && t[k] <= t1) {
            keep.push_back(static_cast<Eigen::Index>(k));
        }
    }
    if (keep.size() < 8) {
        throw SolverError("fit_phasor: too few samples in the fit window");
    }
    const double mid = 0.5 * (t0 + t1);
    const double span = t1 - t0;
    Matrix a(static_cast<Eigen::Index>(keep.size()), 4);
    Vector rhs(static_cast<Eigen::Index>(keep.size()));
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double tk = t[static_cast<size_t>(keep[r])];
        a(r, 0) = 1.0;
        a(r, 1) = (tk - mid) / span;
        a(r, 2) = std::cos(omega * tk);
        a(r, 3) = std::sin(omega * tk);
        rhs[r] = v[static_cast<size_t>(keep[r])];
    }
    const Vector coef = a.colPivHouseholderQr().solve(rhs);
    return {coef[2], -coef[3]};
}

/// Simulate one sweep frequency and extract its impedance point.
inline ImpedancePoint eis_point(const Mesh& mesh, ModelVariant variant,
                                double frequency, double dc, double amplitude,
                                const StepperConfig& config) {
    const double period = 1.0 / frequency;
    const double tau = mesh.transport.characteristic_time;
    const int discard =
        std::max(kEisMinDiscardCycles,
                 static_cast<int>(
                     std::ceil(kEisSettleTimeFactor * tau * frequency)));
    const double cycles = static_cast<double>(discard + kEisFitCycles);

    IntegrateOptions opts;
    opts.record_steps = false;
    const double t_fit0 = discard * period;
    for (int k = 0; k < kEisSamplesPerCycle * kEisFitCycles; ++k) {
        opts.output_times.push_back(
            t_fit0 + period * (static_cast<double>(k) / kEisSamplesPerCycle));
    }

    const CellState s0 = initial_state(mesh, kStandardInitialVoltage);
    const SimulationTrace trace =
        integrate(mesh, s0,
                  Protocol{Sinusoid{dc, amplitude, frequency, cycles}},
                  variant, config, opts);

    const double omega = 2.0 * std::numbers::pi * frequency;
    const double t_end = trace.times.back();
    const auto phasor = [&](double a, double b) {
        return fit_phasor(trace.times, trace.voltages, omega, a, b);
    };
    const std::complex<double> v_hat = phasor(t_fit0, t_end);

    // The drive current is known exactly: amplitude * sin(omega t) has
    // phasor -j * amplitude (total amperes).
    const std::complex<double> i_hat{0.0, -amplitude};

    ImpedancePoint point;
    point.frequency = frequency;
    point.impedance = v_hat / i_hat;
    point.capacitance =
        1.0 / (std::complex<double>{0.0, omega} * point.impedance);

    double drift = 0.0;
    for (int m = 0; m < kEisFitCycles; ++m) {
        const std::complex<double> pm =
            phasor(t_fit0 + m * period, t_fit0 + (m + 1) * period);
        drift = std::max(drift, std::abs(pm - v_hat));
    }
    point.settled = drift <= kEisSettleTol * std::abs(v_hat);
    return point;
}

} // namespace detail

/// Impedance sweep: for each frequency, drive dc + amplitude*sin, discard
/// the start-up transient, fit the voltage phasor over whole cycles, and
/// form Z = V/I and C = 1/(j omega Z).  Frequencies run concurrently;
/// results are ordered like the input.
inline std::vector<ImpedancePoint> run_eis(
    ModelVariant variant, const std::vector<double>& frequencies, double dc,
    double amplitude, Scheme scheme = Scheme::ChebyshevCollocation,
    int order = 5, const StepperConfig& config = {},
    const CellParameters& params = default_cell_parameters()) {
    if (frequencies.empty()) {
        throw ConfigError("run_eis: no frequencies given");
    }
    for (size_t k = 0; k < frequencies.size(); ++k) {
        if (!(frequencies[k] > 0.0)) {
            throw ConfigError("run_eis: frequencies must be > 0");
        }
        if (k > 0 && !(frequencies[k] > frequencies[k - 1])) {
            throw ConfigError("run_eis: frequencies must be ascending");
        }
    }
    if (!(dc > 0.0) || !(amplitude > 0.0) || amplitude > 0.5 * dc) {
        throw ConfigError(
            "run_eis: need dc > 0 and 0 < amplitude <= dc/2 for a "
            "small-signal sweep");
    }
    const Mesh mesh = build_mesh(params, scheme, order, order);
    std::vector<std::future<ImpedancePoint>> futures;
    futures.reserve(frequencies.size());
    for (const double f : frequencies) {
        futures.push_back(std::async(std::launch::async, [&, f] {
            return detail::eis_point(mesh, variant, f, dc, amplitude, config);
        }));
    }
    std::vector<ImpedancePoint> points;
    points.reserve(frequencies.size());
    for (auto& fut : futures) points.push_back(fut.get());
    return points;
}

/// Frequency of the interior maximum of the capacitance loss component
/// -Im C across a sweep; empty when the maximum sits on a sweep endpoint
/// (the knee was not bracketed).
inline std::optional<double> knee_frequency(
    const std::vector<ImpedancePoint>& points) {
    if (points.size() < 3) return std::nullopt;
    size_t best = 0;
    for (size_t k = 1; k < points.size(); ++k) {
        if (-points[k].capacitance.imag() >
            -points[best].capacitance.imag()) {
            best = k;
        }
    }
    if (best == 0 || best + 1 == points.size()) return std::nullopt;
    return points[best].frequency;
}

// ---------------------------------------------------------------------------
// Timing study
// ---------------------------------------------------------------------------

struct TimingReport {
    double sem_seconds = 0.0; ///< median standard-profile wall time
    double fdm_seconds = 0.0;
    double ratio = 0.0;       ///< sem_seconds / fdm_seconds
};

/// Median wall-clock seconds of the standard profile at (scheme, order).
inline double profile_runtime(
    Scheme scheme, int order, ModelVariant variant = ModelVariant::Linear,
    const StepperConfig& config = {},
    const CellParameters& params = default_cell_parameters()) {
    return measure_runtime([&] {
        run_standard_profile(variant, scheme, order, config, params);
    });
}

/// Median-of-five runtime comparison of the two discretizations on the
/// standard profile.  Runs serially so the timings do not contend.
inline TimingReport timing_study(
    int order_sem, int order_fdm,
    ModelVariant variant = ModelVariant::Linear,
    const StepperConfig& config = {},
    const CellParameters& params = default_cell_parameters()) {
    TimingReport report;
    report.sem_seconds = profile_runtime(Scheme::ChebyshevCollocation,
                                         order_sem, variant, config, params);
    report.fdm_seconds = profile_runtime(Scheme::CentralFiniteDifference,
                                         order_fdm, variant, config, params);
    report.ratio = report.sem_seconds / report.fdm_seconds;
    return report;
}

} // namespace edlsim
