"""Sequence propagation: integrators, schedules, run_gate, trajectories."""
import csv

import numpy as np
import pytest
import scipy.constants as const
import scipy.sparse as sp

from tweezergate import crystal, drive, evolve, hilbert
from tweezergate.evolve import (
    PulseRecord,
    PulseSchedule,
    Trajectory,
    hamiltonian_terms,
    propagate,
    propagator,
    run_gate,
    schedule_from_config,
)

W = 2 * np.pi * 1e6
M_ION = 171.0 * const.atomic_mass


def trap(n=2):
    return crystal.TrapSpec(n, M_ION, W)


def config(**kw):
    base = dict(trap=trap(2), pair=(0, 1), tweezer_frequency=0.25 * W,
                field_amplitude=2.69e-4, detuning=-2 * np.pi * 1e3)
    base.update(kw)
    return drive.GateConfig(**base)


def fast_config(**kw):
    # 20x larger |delta| (50 us pulses) at the same gamma/|delta|, so the
    # loop geometry matches the slow gate while integration stays cheap
    base = dict(detuning=-2 * np.pi * 2e4, field_amplitude=20 * 2.69e-4)
    base.update(kw)
    return config(**base)


def random_h(dim, seed, rate=1e5):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    h0 = sp.csr_matrix((base + base.conj().T) / 2)
    h1 = sp.csr_matrix(np.diag(rng.normal(size=dim)))
    return lambda t: 1e4 * h0 + 1e4 * np.cos(rate * t) * h1


class TestPropagate:
    def test_constant_diagonal_exact(self):
        d = np.array([0.0, 1.3e5, -2.7e5, 4.2e4])
        h = lambda t: sp.diags(d)  # noqa: E731
        rng = np.random.default_rng(7)
        psi = rng.normal(size=4) + 1j * rng.normal(size=4)
        psi /= np.linalg.norm(psi)
        out = propagate(h, psi, 0.0, 3.1e-5, tol=1e-10)
        np.testing.assert_allclose(out, np.exp(-1j * d * 3.1e-5) * psi,
                                   atol=1e-9)

    def test_driven_oscillator_closed_form(self):
        # i d|psi>/dt = gamma (a e^{i delta t} + h.c.) |psi> from vacuum:
        # <a(t)> = (gamma/delta)(e^{-i delta t} - 1), peak 2 gamma/|delta|
        cut = 30
        a, ad = hilbert.ladder_operators(cut)
        delta = 2 * np.pi * 2e4
        gamma = 0.25 * delta
        h = lambda t: gamma * (a * np.exp(1j * delta * t)  # noqa: E731
                               + ad * np.exp(-1j * delta * t))
        psi = np.zeros(cut + 1, dtype=complex)
        psi[0] = 1.0
        t_prev = 0.0
        peak = 0.0
        for k in range(1, 13):
            t_k = k * (2 * np.pi / delta) / 12
            psi = propagate(h, psi, t_prev, t_k, tol=1e-10)
            mean = np.vdot(psi, a @ psi)
            ref = gamma / delta * (np.exp(-1j * delta * t_k) - 1)
            assert abs(mean - ref) < 1e-6
            peak = max(peak, abs(mean))
            t_prev = t_k
        assert abs(peak - 2 * gamma / delta) < 1e-6
        assert abs(np.vdot(psi, a @ psi)) < 1e-6  # closed after 2 pi/delta

    def test_forward_backward(self):
        h = random_h(6, seed=3)
        rng = np.random.default_rng(5)
        psi = rng.normal(size=6) + 1j * rng.normal(size=6)
        psi /= np.linalg.norm(psi)
        mid = propagate(h, psi, 0.0, 2e-4, tol=1e-10)
        back = propagate(h, mid, 2e-4, 0.0, tol=1e-10)
        assert np.linalg.norm(back - psi) < 1e-8

    @pytest.mark.parametrize("tol", [1e-13, 2e-6, 0.0])
    def test_tol_range_enforced(self, tol):
        h = lambda t: sp.identity(2)  # noqa: E731
        with pytest.raises(ValueError, match="tol"):
            propagate(h, np.array([1.0, 0.0]), 0.0, 1.0, tol=tol)

    def test_tol_tightening_converges(self):
        h = random_h(5, seed=11)
        psi = np.zeros(5, dtype=complex)
        psi[0] = 1.0
        loose = propagate(h, psi, 0.0, 1e-4, tol=1e-8)
        tight = propagate(h, psi, 0.0, 1e-4, tol=1e-9)
        assert np.linalg.norm(loose - tight) < 10 * 1e-8

    def test_step_underflow_diagnostic(self):
        sx = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
        h = lambda t: (10.0 / (1e-3 - t)) * sx  # noqa: E731
        with pytest.raises(RuntimeError, match="t = "):
            propagate(h, np.array([1.0, 0.0], dtype=complex), 0.0, 2e-3)


class TestPropagator:
    def test_zero_hamiltonian_identity(self):
        h = lambda t: sp.csr_matrix((3, 3))  # noqa: E731
        u = propagator(h, 3, 0.0, 1.0)
        np.testing.assert_allclose(u, np.eye(3), atol=1e-12)

    def test_unitary_and_composition(self):
        h = random_h(4, seed=23)
        u01 = propagator(h, 4, 0.0, 1e-4, tol=1e-9)
        u12 = propagator(h, 4, 1e-4, 2e-4, tol=1e-9)
        u02 = propagator(h, 4, 0.0, 2e-4, tol=1e-9)
        assert np.linalg.norm(u01.conj().T @ u01 - np.eye(4)) < 1e-7
        assert np.linalg.norm(u12 @ u01 - u02) < 1e-7

    def test_matches_propagate(self):
        h = random_h(4, seed=29)
        rng = np.random.default_rng(31)
        psi = rng.normal(size=4) + 1j * rng.normal(size=4)
        psi /= np.linalg.norm(psi)
        u = propagator(h, 4, 0.0, 1.5e-4, tol=1e-10)
        direct = propagate(h, psi, 0.0, 1.5e-4, tol=1e-10)
        assert np.linalg.norm(u @ psi - direct) < 1e-9


class TestSchedule:
    def test_default_schedule(self):
        cfg = config()
        sched = schedule_from_config(cfg)
        tau = cfg.pulse_duration
        assert len(sched.pulses) == 4
        assert all(p.duration == tau for p in sched.pulses)
        assert [p.field_on for p in sched.pulses] == [True, False, False, True]
        assert [p.flip_after for p in sched.pulses] == [(0, 1), (0,), (1,), ()]
        assert sched.total_time == pytest.approx(4 * tau)
        assert sched.flip_counts(2) == (2, 2)

    def test_open_echo_rejected(self):
        cfg = config(echo_schedule=((0,), (0,), (0,)))
        with pytest.raises(ValueError, match="echo does not close"):
            schedule_from_config(cfg)

    def test_pulse_record_validation(self):
        with pytest.raises(ValueError, match="duration"):
            PulseRecord(duration=0.0, field_on=True, ramp_time=0.0)
        with pytest.raises(ValueError, match="ramp"):
            PulseRecord(duration=1.0, field_on=True, ramp_time=0.6)
        with pytest.raises(ValueError, match="at least one pulse"):
            PulseSchedule(())

    def test_trajectory_validation(self):
        with pytest.raises(ValueError, match="increasing"):
            Trajectory(np.array([0.0, 1.0, 1.0]), np.zeros(3, complex), "01")
        with pytest.raises(ValueError, match="equal length"):
            Trajectory(np.array([0.0, 1.0]), np.zeros(3, complex), "01")


class TestHamiltonianTerms:
    def test_matches_drive_factories(self):
        cfg = config(tweezer_frequency=0.2 * W)
        modes = crystal.normal_modes(trap(2))
        space = hilbert.SpaceSpec(2, (3, 2))
        static_terms, field_terms = hamiltonian_terms(cfg, modes, space)
        h_tw = drive.tweezer_hamiltonian(modes, cfg.pair,
                                         cfg.tweezer_frequency, space)
        mu = drive.resolve_drive_frequency(cfg, modes)
        gamma = drive.gamma_from_field(cfg.field_amplitude, cfg.trap)
        h_field = drive.field_hamiltonian(gamma, mu, space,
                                          com_frequency=modes.frequencies[0])
        rng = np.random.default_rng(17)
        tau = cfg.pulse_duration
        for t in rng.uniform(0.0, tau, size=8):
            env = float(drive.envelope(t, 0, cfg))
            ref = (h_tw(t) + env * h_field(t)).toarray()
            got = sum(amp * np.exp(1j * f * t) * op.toarray()
                      for amp, f, op in static_terms)
            got = got + env * sum(amp * np.exp(1j * f * t) * op.toarray()
                                  for amp, f, op in field_terms)
            np.testing.assert_allclose(got, ref, atol=1e-9 * max(
                1.0, np.abs(ref).max()))


class TestRunGate:
    def test_identity_when_off_gaussian(self):
        cfg = config(tweezer_frequency=0.0, field_amplitude=0.0)
        space = hilbert.SpaceSpec(2, (4,))
        psi0 = hilbert.qubit_basis_state(space, "01")
        out, traj = run_gate(cfg, "01", (0,), space, backend="gaussian")
        phase = np.vdot(psi0, out)
        assert abs(abs(phase) - 1) < 1e-12
        assert np.linalg.norm(out - phase * psi0) < 1e-12
        assert np.abs(traj.alpha).max() < 1e-12

    def test_identity_when_off_ode(self):
        cfg = fast_config(tweezer_frequency=0.0, field_amplitude=0.0)
        space = hilbert.SpaceSpec(2, (2,))
        psi0 = hilbert.qubit_basis_state(space, "10")
        out, traj = run_gate(cfg, "10", (0,), space, backend="ode")
        phase = np.vdot(psi0, out)
        assert abs(abs(phase) - 1) < 1e-9
        assert np.linalg.norm(out - phase * psi0) < 1e-9
        assert np.abs(traj.alpha).max() < 1e-9

    def test_sampling_contract(self):
        cfg = config()
        space = hilbert.SpaceSpec(2, (6,))
        _, traj = run_gate(cfg, "01", (0,), space, backend="gaussian")
        assert len(traj.times) == 4 * 200 + 1
        assert traj.times[0] == 0.0
        assert traj.times[-1] == pytest.approx(cfg.total_time)
        assert np.all(np.diff(traj.times) > 0)
        assert traj.qubit_state_label == "01"
        with pytest.raises(ValueError, match="200"):
            run_gate(cfg, "01", (0,), space, samples_per_pulse=100)

    def test_csv_export(self, tmp_path):
        cfg = config()
        space = hilbert.SpaceSpec(2, (6,))
        _, traj = run_gate(cfg, "11", (0,), space, backend="gaussian")
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["time_s", "re_alpha", "im_alpha",
                           "qubit_state_label"]
        assert len(rows) == len(traj.times) + 1
        k = len(rows) // 2
        assert float(rows[k][0]) == pytest.approx(traj.times[k - 1])
        assert complex(float(rows[k][1]), float(rows[k][2])) == pytest.approx(
            traj.alpha[k - 1])
        assert rows[k][3] == "11"

    def test_input_validation(self):
        cfg = config()
        space = hilbert.SpaceSpec(2, (4,))
        with pytest.raises(ValueError, match="normalized"):
            run_gate(cfg, 2.0 * np.ones(4), (0,), space)
        with pytest.raises(ValueError, match="two qubits"):
            run_gate(cfg, "01", (0,), hilbert.SpaceSpec(1, (4,)))
        with pytest.raises(ValueError, match="backend"):
            run_gate(cfg, "01", (0,), space, backend="magic")
        with pytest.raises(ValueError, match="label"):
            run_gate(cfg, "02", (0,), space)
        with pytest.raises(ValueError, match="cutoff"):
            run_gate(cfg, "01", (9,), hilbert.SpaceSpec(2, (4,)))

    def test_superposition_label_and_trajectory(self):
        cfg = config()
        space = hilbert.SpaceSpec(2, (6,))
        plus = np.array([0.0, 1.0, 1.0, 0.0]) / np.sqrt(2)
        _, traj = run_gate(cfg, plus, (0,), space, backend="gaussian")
        assert traj.qubit_state_label == "superposition"
        _, t01 = run_gate(cfg, "01", (0,), space, backend="gaussian")
        _, t10 = run_gate(cfg, "10", (0,), space, backend="gaussian")
        np.testing.assert_allclose(traj.alpha,
                                   0.5 * (t01.alpha + t10.alpha), atol=1e-12)

    def test_ode_matches_gaussian_trajectory(self):
        cfg = fast_config()
        space = hilbert.SpaceSpec(2, (10,))
        psi_o, traj_o = run_gate(cfg, "01", (0,), space, backend="ode",
                                 tol=1e-9)
        _, traj_g = run_gate(cfg, "01", (0,), space, backend="gaussian")
        assert np.abs(traj_o.alpha - traj_g.alpha).max() < 1e-6
        assert abs(np.linalg.norm(psi_o) - 1) < 1e-9  # norm drift

    def test_max_step_halving(self):
        cfg = fast_config()
        space = hilbert.SpaceSpec(2, (8,))
        modes = crystal.normal_modes(trap(2)).restrict([0])
        cap = (2 * np.pi / drive.resolve_drive_frequency(cfg, modes)) / 20
        p1, _ = run_gate(cfg, "01", (0,), space, backend="ode", tol=1e-10)
        p2, _ = run_gate(cfg, "01", (0,), space, backend="ode", tol=1e-10,
                         max_step=cap / 2)
        assert abs(abs(np.vdot(p1, p2)) - 1) < 1e-9

    def test_loop_closure_tracks_ramp(self):
        # the |01> loop's end-of-pulse residual is set by the envelope
        # ramps: |<a>(tau)| ~ pi * ramp_fraction * max|<a>|
        space = hilbert.SpaceSpec(2, (6,))
        for ramp, bound in ((0.016, 0.06), (0.004, 0.02)):
            cfg = config(ramp_fraction=ramp)
            _, traj = run_gate(cfg, "01", (0,), space, backend="gaussian")
            first = slice(0, 201)
            peak = np.abs(traj.alpha[first]).max()
            residual = abs(traj.alpha[200])
            assert residual < bound * peak
            assert residual == pytest.approx(np.pi * ramp * peak, rel=0.2)

    def test_loop_suppression_at_operating_point(self):
        cfg = config()
        space = hilbert.SpaceSpec(2, (6,))
        peaks = {}
        for label in ("01", "11", "00"):
            _, traj = run_gate(cfg, label, (0,), space, backend="gaussian")
            peaks[label] = np.abs(traj.alpha).max()
        assert peaks["01"] / peaks["11"] >= 10
        assert peaks["01"] / peaks["00"] >= 10

    @pytest.mark.parametrize("ratio", [0.15, 0.2, 0.25])
    def test_suppression_scales_with_shift(self, ratio):
        cfg = config(tweezer_frequency=ratio * W)
        space = hilbert.SpaceSpec(2, (6,))
        _, t01 = run_gate(cfg, "01", (0,), space, backend="gaussian")
        _, t11 = run_gate(cfg, "11", (0,), space, backend="gaussian")
        g_plus, _ = drive.pair_com_shifts(cfg.trap, cfg.tweezer_frequency)
        detuning_ratio = abs(cfg.detuning / (g_plus - cfg.detuning))
        frac = np.abs(t11.alpha).max() / np.abs(t01.alpha).max()
        assert frac < 3 * detuning_ratio
