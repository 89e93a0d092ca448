"""Gate-sequence propagation: integrators, pulse schedules, trajectories.

States are vectors on a hilbert.SpaceSpec composite (qubits major, modes
minor) in the oscillator interaction picture, so a state at rest under
H = 0 stays constant. run_gate offers two backends: "gaussian" composes
the exact displaced-oscillator factors and returns the final state in the
field-free reference frame of each qubit configuration (the same frame the
channel reconstruction uses); "ode" integrates the literal time-dependent
Hamiltonian and returns the full interaction-picture state.
"""
from __future__ import annotations

import csv
import dataclasses

import numpy as np
import scipy.integrate
import scipy.sparse as sp

from . import _exact, crystal, drive, hilbert

_TOL_RANGE = (1e-12, 1e-6)


def _integrate(hamiltonian, state, t0, t1, tol, max_step, dense_output=False):
    if not _TOL_RANGE[0] <= tol <= _TOL_RANGE[1]:
        raise ValueError(f"tol must lie in [{_TOL_RANGE[0]:g}, {_TOL_RANGE[1]:g}]")
    y0 = np.asarray(state, dtype=complex)

    def rhs(t, y):
        return -1j * (hamiltonian(t) @ y)

    sol = scipy.integrate.solve_ivp(
        rhs, (t0, t1), y0, method="DOP853", rtol=tol, atol=tol * 1e-3,
        max_step=np.inf if max_step is None else max_step,
        dense_output=dense_output)
    if not sol.success:
        t_fail = sol.t[-1] if len(sol.t) else t0
        raise RuntimeError(
            f"integration failed at t = {t_fail:.9e} s: {sol.message}")
    return sol


def propagate(hamiltonian, state, t0, t1, tol=1e-9, max_step=None):
    """Integrate i d|psi>/dt = H(t)|psi> from t0 to t1 with DOP853.

    hamiltonian: callable t -> operator (sparse or dense array) acting on
    state vectors. t1 < t0 integrates backwards. Raises RuntimeError
    carrying the failure time if the step size underflows.
    """
    return _integrate(hamiltonian, state, t0, t1, tol, max_step).y[:, -1]


def propagator(hamiltonian, space, t0, t1, tol=1e-9, max_step=None):
    """Propagator matrix on a SpaceSpec (or explicit dimension).

    Columns are propagate() applied to the basis states, integrated as one
    matrix-valued ODE so all columns share the adaptive time grid.
    """
    dim = space.dim if isinstance(space, hilbert.SpaceSpec) else int(space)
    eye = np.eye(dim, dtype=complex)

    def h_flat(t):
        return hamiltonian(t)

    def rhs(t, y):
        return (-1j * (h_flat(t) @ y.reshape(dim, dim))).ravel()

    if not _TOL_RANGE[0] <= tol <= _TOL_RANGE[1]:
        raise ValueError(f"tol must lie in [{_TOL_RANGE[0]:g}, {_TOL_RANGE[1]:g}]")
    sol = scipy.integrate.solve_ivp(
        rhs, (t0, t1), eye.ravel(), method="DOP853", rtol=tol,
        atol=tol * 1e-3, max_step=np.inf if max_step is None else max_step)
    if not sol.success:
        t_fail = sol.t[-1] if len(sol.t) else t0
        raise RuntimeError(
            f"integration failed at t = {t_fail:.9e} s: {sol.message}")
    return sol.y[:, -1].reshape(dim, dim)


@dataclasses.dataclass(frozen=True)
class PulseRecord:
    """One pulse: duration, whether the field drives it, envelope ramp
    time, and the qubits flipped by pi-pulses at the pulse's end."""

    duration: float
    field_on: bool
    ramp_time: float
    flip_after: tuple = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("pulse duration must be positive")
        if not 0 <= 2 * self.ramp_time <= self.duration:
            raise ValueError("ramps must fit inside the pulse")


@dataclasses.dataclass(frozen=True)
class PulseSchedule:
    pulses: tuple

    def __post_init__(self):
        if not self.pulses:
            raise ValueError("schedule needs at least one pulse")

    @property
    def total_time(self) -> float:
        return sum(p.duration for p in self.pulses)

    def flip_counts(self, n_qubits: int):
        counts = [0] * n_qubits
        for p in self.pulses:
            for q in p.flip_after:
                counts[q] += 1
        return tuple(counts)


def schedule_from_config(config: drive.GateConfig) -> PulseSchedule:
    """Pulse records of the echoed sequence.

    Requires the echo to close: every qubit must be flipped an even number
    of times so the net single-qubit Pauli frame is the identity.
    """
    tau = config.pulse_duration
    ramp = config.ramp_fraction * tau
    pulses = []
    for p in range(config.pulse_count):
        flips = config.echo_schedule[p] if p < config.pulse_count - 1 else ()
        pulses.append(PulseRecord(tau, config.field_on_mask[p], ramp,
                                  tuple(flips)))
    schedule = PulseSchedule(tuple(pulses))
    counts = schedule.flip_counts(2)
    if any(c % 2 for c in counts):
        raise ValueError(
            f"echo does not close: pi-pulse counts per qubit {counts}")
    return schedule


@dataclasses.dataclass
class Trajectory:
    """Sampled COM-mode mean <a_com>(t) for one initial qubit state."""

    times: np.ndarray
    alpha: np.ndarray
    qubit_state_label: str

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=complex)
        if self.times.shape != self.alpha.shape:
            raise ValueError("times and alpha must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")

    def to_csv(self, path, comment: str | None = None):
        with open(path, "w", newline="") as fh:
            if comment is not None:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["time_s", "re_alpha", "im_alpha",
                             "qubit_state_label"])
            for t, a in zip(self.times, self.alpha):
                writer.writerow([f"{t:.12e}", f"{a.real:.12e}",
                                 f"{a.imag:.12e}", self.qubit_state_label])


_LABELS = ("00", "01", "10", "11")


def _qubit_vector(qubit_state):
    if isinstance(qubit_state, str):
        if qubit_state not in _LABELS:
            raise ValueError(f"unknown qubit state label {qubit_state!r}")
        vec = np.zeros(4, dtype=complex)
        vec[_LABELS.index(qubit_state)] = 1.0
        return vec, qubit_state
    vec = np.asarray(qubit_state, dtype=complex)
    if vec.shape != (4,):
        raise ValueError("qubit state must be a label or a length-4 vector")
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    label = _LABELS[nz[0]] if len(nz) == 1 else "superposition"
    return vec, label


def _motional_vector(motional_state, space: hilbert.SpaceSpec):
    if isinstance(motional_state, (tuple, list)):
        occ = tuple(motional_state)
        vec = np.zeros(space.mode_dim, dtype=complex)
        idx = 0
        for n_m, dim in zip(occ, space.mode_dims):
            if not 0 <= n_m < dim:
                raise ValueError("occupation outside the cutoff")
            idx = idx * dim + n_m
        vec[idx] = 1.0
        return vec
    vec = np.asarray(motional_state, dtype=complex)
    if vec.shape != (space.mode_dim,):
        raise ValueError("motional state has the wrong dimension")
    return vec


def retained_modes(config: drive.GateConfig, space: hilbert.SpaceSpec):
    """Crystal modes kept in the simulation space: the space's first
    space.n_modes axial modes, lowest frequency (COM) first."""
    modes = crystal.normal_modes(config.trap)
    if space.n_modes > config.trap.n_ions:
        raise ValueError("more retained modes than the crystal has")
    return modes.restrict(range(space.n_modes))


def _displace_modes(mot, alpha, space: hilbert.SpaceSpec):
    """Apply the product of per-mode displacements D(alpha_m) to a
    motional vector (tensor-contracted mode by mode)."""
    tensor = mot.reshape(space.mode_dims)
    for m, (a_m, dim) in enumerate(zip(alpha, space.mode_dims)):
        if a_m == 0.0:
            continue
        ad = np.diag(np.sqrt(np.arange(1, dim)), -1)
        gen = 1j * (a_m * ad - np.conj(a_m) * ad.T)
        d_m = _exact.expm_herm(gen)
        tensor = np.moveaxis(np.tensordot(d_m, tensor, axes=([1], [m])),
                             0, m)
    return tensor.ravel()


def run_gate(config: drive.GateConfig, qubit_state, motional_state,
             space: hilbert.SpaceSpec, backend: str = "gaussian",
             samples_per_pulse: int = 200, tol: float = 1e-9,
             max_step=None):
    """Run the full echoed pulse sequence.

    qubit_state: basis label ("00".."11") or a normalized length-4 vector.
    motional_state: per-mode occupation tuple or a vector on the mode
    space. Returns (final state on space, Trajectory). The trajectory
    records <a_com> at samples_per_pulse points per pulse (>= 200 enforced)
    plus the t = 0 sample.

    backend "gaussian": exact displaced-oscillator composition; the final
    state is expressed in the per-configuration field-free reference frame.
    backend "ode": adaptive integration of the literal Hamiltonian with the
    drive period resolved by at least 20 steps; the final state is the full
    interaction-picture state.
    """
    if space.n_qubits != 2:
        raise ValueError("the gate sequence addresses exactly two qubits")
    if samples_per_pulse < 200:
        raise ValueError("post-condition requires >= 200 samples per pulse")
    qvec, label = _qubit_vector(qubit_state)
    mot = _motional_vector(motional_state, space)
    norm = np.linalg.norm(qvec) * np.linalg.norm(mot)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("initial state must be normalized")
    modes = retained_modes(config, space)
    schedule = schedule_from_config(config)

    if backend == "gaussian":
        return _run_gaussian(config, modes, qvec, mot, label, space,
                             samples_per_pulse)
    if backend == "ode":
        return _run_ode(config, modes, qvec, mot, label, space, schedule,
                        samples_per_pulse, tol, max_step)
    raise ValueError(f"unknown backend {backend!r}")


def _run_gaussian(config, modes, qvec, mot, label, space,
                  samples_per_pulse):
    setup = _exact.setup_from_config(config, modes)
    n = setup.n_modes
    out = np.zeros(space.dim, dtype=complex)
    alpha_traj = None
    times = None
    for c, (si, sj) in enumerate(_exact.CONFIG_S):
        weight = abs(qvec[c]) ** 2
        if weight < 1e-24:
            continue
        gens = _exact.config_generators(setup, si, sj)
        alpha, phase = _exact.gaussian_u_rel(gens, n)
        block = slice(c * space.mode_dim, (c + 1) * space.mode_dim)
        out[block] = qvec[c] * np.exp(1j * phase) * _displace_modes(
            mot, alpha, space)
        t_s, means = _exact.config_trajectory(
            setup, si, sj, np.zeros(2 * n, dtype=complex), samples_per_pulse)
        contrib = weight * means[:, 0]
        alpha_traj = contrib if alpha_traj is None else alpha_traj + contrib
        times = t_s
    traj = Trajectory(times, alpha_traj, label)
    return out, traj


def hamiltonian_terms(config: drive.GateConfig, modes, space):
    """Precompiled composite-space Hamiltonian as two term lists.

    Returns (static_terms, field_terms), each a list of (amp, freq, op)
    with H(t) = sum amp e^{i freq t} op; field terms carry the pulse
    envelope as an extra factor. Equivalent to drive.tweezer_hamiltonian
    plus envelope * drive.field_hamiltonian, but with every operator
    product precomputed so an integrator pays only sparse matvecs.
    """
    freqs = modes.frequencies
    n_modes = space.n_modes
    ladders = [hilbert.ladder_operators(c) for c in space.mode_cutoffs]
    emb = [(hilbert.embed(a, ("mode", m), space),
            hilbert.embed(ad, ("mode", m), space))
           for m, (a, ad) in enumerate(ladders)]
    static_terms = []
    w_tw = config.tweezer_frequency
    if w_tw != 0.0:
        sz = sp.csr_matrix(np.diag([-1.0, 1.0]))
        for ion, q in zip(config.pair, range(2)):
            z_full = hilbert.embed(sz, ("qubit", q), space)
            b = modes.vectors[:, ion]
            for m in range(n_modes):
                for n in range(n_modes):
                    k = w_tw ** 2 * b[m] * b[n] / (
                        4.0 * np.sqrt(freqs[m] * freqs[n]))
                    if k == 0.0:
                        continue
                    am, adm = emb[m]
                    an, adn = emb[n]
                    static_terms.extend([
                        (k, -(freqs[m] + freqs[n]), (z_full @ am @ an).tocsr()),
                        (k, -(freqs[m] - freqs[n]), (z_full @ am @ adn).tocsr()),
                        (k, +(freqs[m] - freqs[n]), (z_full @ adm @ an).tocsr()),
                        (k, +(freqs[m] + freqs[n]), (z_full @ adm @ adn).tocsr()),
                    ])
    gamma = drive.gamma_from_field(config.field_amplitude, config.trap)
    mu = drive.resolve_drive_frequency(config, modes)
    field_terms = []
    if gamma != 0.0:
        a0, ad0 = emb[0]
        w0 = freqs[0]
        for s_mu in (+1.0, -1.0):
            field_terms.extend([
                (gamma, s_mu * mu - w0, a0),
                (gamma, s_mu * mu + w0, ad0),
            ])
    return static_terms, field_terms


def _term_rhs(static_terms, field_terms, envelope_of):
    def rhs(t, y):
        out = np.zeros_like(y)
        for amp, freq, op in static_terms:
            out += (amp * np.exp(1j * freq * t)) * (op @ y)
        env = envelope_of(t)
        if env != 0.0:
            for amp, freq, op in field_terms:
                out += (env * amp * np.exp(1j * freq * t)) * (op @ y)
        return -1j * out
    return rhs


def _run_ode(config, modes, qvec, mot, label, space, schedule,
             samples_per_pulse, tol, max_step):
    if not _TOL_RANGE[0] <= tol <= _TOL_RANGE[1]:
        raise ValueError(f"tol must lie in [{_TOL_RANGE[0]:g}, {_TOL_RANGE[1]:g}]")
    mu = drive.resolve_drive_frequency(config, modes)
    static_terms, field_terms = hamiltonian_terms(config, modes, space)
    step_cap = (2 * np.pi / mu) / 20.0
    step = step_cap if max_step is None else min(max_step, step_cap)
    a_com = hilbert.embed(hilbert.ladder_operators(space.mode_cutoffs[0])[0],
                          ("mode", 0), space)
    flips = [hilbert.embed(
        np.array([[0.0, 1.0], [1.0, 0.0]]), ("qubit", q), space)
        for q in range(2)]

    psi = np.kron(qvec, mot)
    times = [0.0]
    alpha = [complex(np.vdot(psi, a_com @ psi))]
    t_a = 0.0
    for p, pulse in enumerate(schedule.pulses):
        if pulse.field_on:
            def env_of(t, _p=p, _t_a=t_a):
                return float(drive.envelope(t - _t_a, _p, config))
        else:
            env_of = lambda t: 0.0  # noqa: E731
        rhs = _term_rhs(static_terms, field_terms, env_of)
        t_b = t_a + pulse.duration
        sol = scipy.integrate.solve_ivp(
            rhs, (t_a, t_b), psi, method="DOP853", rtol=tol,
            atol=tol * 1e-3, max_step=step, dense_output=True)
        if not sol.success:
            raise RuntimeError(
                f"integration failed at t = {sol.t[-1]:.9e} s: {sol.message}")
        for k in range(1, samples_per_pulse + 1):
            t_k = t_a + k * pulse.duration / samples_per_pulse
            psi_k = sol.sol(t_k)
            times.append(t_k)
            alpha.append(complex(np.vdot(psi_k, a_com @ psi_k)))
        psi = sol.y[:, -1]
        for q in pulse.flip_after:
            psi = flips[q] @ psi
        t_a = t_b
    traj = Trajectory(np.array(times), np.array(alpha), label)
    return psi, traj
