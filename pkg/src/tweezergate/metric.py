"""Gate quality metrics: channel reconstruction and fidelity.

The echoed gate acts on the two addressed qubits; the motion is traced
out after the sequence.  A channel is represented by the images of the
16 two-qubit Pauli operators (lexicographic {1, x, y, z} x {1, x, y, z},
first factor = first qubit of the pair).  For the qubit-diagonal
evolution produced by this gate every image is the elementwise product
of the Pauli with a single 4x4 overlap matrix
W[c, c'] = <U_c'^dag U_c>_thermal, which the backends in _exact compute;
channel_from_propagator instead takes the literal partial trace of an
arbitrary composite-space propagator and is used for cross checks.

Average process fidelity follows the standard two-qubit formula
F = (sum_l tr[U sigma_l^dag U^dag E(sigma_l)] + d^2) / (d^2 (d + 1))
with d = 4.  The reference gate is built from the same per-pulse
dressed-mode phase accumulation the exact engine uses, with the global
phase removed.
"""

import cmath
import dataclasses
import json
import math

import numpy as np

from . import _exact
from . import drive
from . import evolve
from . import hilbert

_SIGMA_1 = {
    "1": np.eye(2, dtype=complex),
    "x": np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    "y": np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    "z": np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
}
_PAULI_ORDER = ("1", "x", "y", "z")

_BACKENDS = ("gaussian", "fock", "column", "ode")
_TAIL_LIMIT = 1e-4


def paulis16():
    """The 16 two-qubit Pauli operators in lexicographic order."""
    return tuple(np.kron(_SIGMA_1[a], _SIGMA_1[b])
                 for a in _PAULI_ORDER for b in _PAULI_ORDER)


def pauli_labels():
    return tuple(a + b for a in _PAULI_ORDER for b in _PAULI_ORDER)


@dataclasses.dataclass(frozen=True)
class QuantumChannel:
    """Two-qubit channel as Pauli images, with the thermal context that
    produced it.

    overlaps is the 4x4 matrix W[c, c'] = <U_c'^dag U_c> over the thermal
    ensemble (qubit configurations ordered 00, 01, 10, 11); for the
    qubit-diagonal gate evolution images[l] = sigma_l * W elementwise.
    """

    images: tuple
    overlaps: np.ndarray
    nbar: tuple
    cutoffs: tuple
    config: drive.GateConfig
    backend: str

    def __post_init__(self):
        imgs = tuple(np.asarray(m, dtype=complex) for m in self.images)
        if len(imgs) != 16 or any(m.shape != (4, 4) for m in imgs):
            raise ValueError("a channel needs 16 images of shape 4x4")
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "overlaps",
                           np.asarray(self.overlaps, dtype=complex))
        if self.overlaps.shape != (4, 4):
            raise ValueError("overlaps must be 4x4")
        object.__setattr__(self, "nbar", tuple(float(n) for n in self.nbar))
        object.__setattr__(self, "cutoffs", tuple(self.cutoffs))
        tr = complex(np.trace(imgs[0]))
        if abs(tr - 4.0) > 1e-6:
            raise ValueError(f"identity image has trace {tr:.8f}, "
                             "expected 4 (trace preservation)")
        lo = float(np.linalg.eigvalsh(self.choi_matrix())[0])
        if lo < -1e-6:
            raise ValueError(f"channel is not completely positive: smallest "
                             f"Choi eigenvalue {lo:.3e}")

    def choi_matrix(self) -> np.ndarray:
        """16x16 Choi matrix sum_ij E(|i><j|) kron |i><j|.

        Positive semidefinite within tolerance for a physical channel and
        rank one exactly when the channel is unitary on the qubits.
        """
        sigmas = paulis16()
        choi = np.zeros((16, 16), dtype=complex)
        for i in range(4):
            for j in range(4):
                eij = np.zeros((4, 4), dtype=complex)
                # |i><j| = sum_l conj(sigma_l[i, j]) sigma_l / 4
                for sig, img in zip(sigmas, self.images):
                    eij += np.conj(sig[i, j]) * img / 4.0
                unit = np.zeros((4, 4), dtype=complex)
                unit[i, j] = 1.0
                choi += np.kron(eij, unit)
        return choi


@dataclasses.dataclass(frozen=True)
class IdealGate:
    """Reference two-qubit gate: diagonal in the qubit basis with the
    accumulated per-configuration phases, global phase removed
    (phases[0] = 0)."""

    phases: np.ndarray

    def __post_init__(self):
        ph = np.asarray(self.phases, dtype=float)
        if ph.shape != (4,):
            raise ValueError("phases must have one entry per qubit "
                             "configuration")
        if abs(ph[0]) > 1e-12:
            raise ValueError("global phase must be removed (phases[0] = 0)")
        object.__setattr__(self, "phases", ph)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(np.exp(1j * self.phases))

    @property
    def conditional_phase(self) -> float:
        return _wrap_angle(self.phases[0] + self.phases[3]
                           - self.phases[1] - self.phases[2])


@dataclasses.dataclass(frozen=True)
class FidelityReport:
    """Fidelity of one simulated gate against its reference, with the
    conditional phase, the local invariants of the achieved gate, and a
    snapshot of every input parameter."""

    fidelity: float
    conditional_phase: float
    g1: complex
    g2: float
    parameters: dict

    def __post_init__(self):
        if not -1e-9 <= self.fidelity <= 1.0 + 1e-9:
            raise ValueError(f"fidelity {self.fidelity} outside [0, 1]")

    def as_dict(self) -> dict:
        out = {
            "fidelity": float(self.fidelity),
            "infidelity": float(1.0 - self.fidelity),
            "conditional_phase_rad": float(self.conditional_phase),
            "g1_re": float(self.g1.real),
            "g1_im": float(self.g1.imag),
            "g2": float(self.g2),
        }
        out.update(self.parameters)
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.as_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _wrap_angle(phi: float) -> float:
    """Wrap to (-pi, pi]."""
    out = math.fmod(phi + math.pi, 2.0 * math.pi)
    if out <= 0.0:
        out += 2.0 * math.pi
    return out - math.pi


def _check_tail(thermal: hilbert.ThermalEnsemble):
    tail = thermal.tail_weight()
    if tail > _TAIL_LIMIT:
        raise ValueError(
            f"thermal ensemble loses weight {tail:.3e} to truncation "
            f"(limit {_TAIL_LIMIT:.0e}); increase the mode cutoffs")


def _channel_setup(config: drive.GateConfig, thermal: hilbert.ThermalEnsemble,
                   space: hilbert.SpaceSpec):
    if space.n_qubits != 2:
        raise ValueError("channel reconstruction needs a two-qubit space")
    if tuple(thermal.cutoffs) != space.mode_cutoffs:
        raise ValueError("thermal ensemble cutoffs must match the space")
    _check_tail(thermal)
    modes = evolve.retained_modes(config, space)
    return _exact.setup_from_config(config, modes)


def reconstruct_channel(config: drive.GateConfig,
                        thermal: hilbert.ThermalEnsemble,
                        space: hilbert.SpaceSpec,
                        backend: str = "fock",
                        tol: float = 1e-9,
                        max_step=None,
                        weight_floor: float = 0.0) -> QuantumChannel:
    """Thermal-averaged channel of the full echoed sequence.

    Backends agree on the physics and differ in method and cost:
    "fock" materializes dense truncated propagators (the reference),
    "column" propagates only the Fock columns with thermal weight above
    weight_floor, "ode" integrates the driven pulses numerically, and
    "gaussian" evaluates the closed displacement form (its thermal
    average is over the untruncated ensemble, so it differs from the
    Fock-space backends at the size of the truncated tail).
    """
    setup = _channel_setup(config, thermal, space)
    if backend == "gaussian":
        w, _ = _exact.gaussian_wmat(setup, thermal.nbar)
    elif backend == "fock":
        w, _ = _exact.dense_wmat(setup, space.mode_dims, thermal.weights())
    elif backend == "column":
        w = _exact.column_wmat(setup, space.mode_dims, thermal.weights(),
                               weight_floor=weight_floor)
    elif backend == "ode":
        w, _ = _exact.ode_wmat(setup, space.mode_dims, thermal.weights(),
                               rtol=tol, max_step=max_step)
    else:
        raise ValueError(f"unknown backend {backend!r}; "
                         f"choose from {_BACKENDS}")
    images = tuple(sig * w for sig in paulis16())
    return QuantumChannel(images=images, overlaps=w, nbar=thermal.nbar,
                          cutoffs=space.mode_cutoffs, config=config,
                          backend=backend)


def channel_from_propagator(u: np.ndarray, config: drive.GateConfig,
                            thermal: hilbert.ThermalEnsemble,
                            space: hilbert.SpaceSpec) -> QuantumChannel:
    """Channel by literal partial trace of a composite-space propagator:
    E(sigma_l) = sum_n p_n tr_mot(U [sigma_l kron |n><n|] U^dag).

    Independent of any structure in U; the reconstruction backends must
    reproduce it whenever U is the gate propagator.
    """
    if space.n_qubits != 2:
        raise ValueError("channel reconstruction needs a two-qubit space")
    if tuple(thermal.cutoffs) != space.mode_cutoffs:
        raise ValueError("thermal ensemble cutoffs must match the space")
    _check_tail(thermal)
    u = np.asarray(u, dtype=complex)
    if u.shape != (space.dim, space.dim):
        raise ValueError("propagator does not match the space dimension")
    p = thermal.weights()
    v = u.reshape(4, space.mode_dim, 4, space.mode_dim)
    # T[c, q, c', q'] = sum_n p_n tr_mot(U(|c><c'| kron |n><n|)U^dag)[q, q']
    t = np.einsum("qmcf,rmdf,f->cqdr", v, np.conj(v), p, optimize=True)
    sigmas = paulis16()
    images = tuple(np.einsum("cd,cqdr->qr", sig, t) for sig in sigmas)
    # restriction of T to qubit-diagonal blocks; equals W when U is
    # qubit-diagonal
    w = np.array([[t[c, c, cp, cp] for cp in range(4)] for c in range(4)])
    return QuantumChannel(images=images, overlaps=w, nbar=thermal.nbar,
                          cutoffs=space.mode_cutoffs, config=config,
                          backend="propagator")


def ideal_gate(config: drive.GateConfig, modes) -> IdealGate:
    """Reference gate for a configuration: each driven pulse adds
    -gamma^2 tau / (mu - w~_com(c)) to configuration c's phase, with
    w~_com the tweezer-dressed COM branch seen during that pulse."""
    setup = _exact.setup_from_config(config, modes)
    theta = _exact.ideal_phases(setup)
    return IdealGate(phases=theta - theta[0])


def conditional_phase(gate) -> float:
    """Conditional phase arg(u00) + arg(u11) - arg(u01) - arg(u10) of a
    diagonal two-qubit gate, wrapped to (-pi, pi].

    Accepts an IdealGate or a 4x4 matrix; rejects matrices with relative
    off-diagonal mass above 1e-6.
    """
    if isinstance(gate, IdealGate):
        return gate.conditional_phase
    u = np.asarray(gate, dtype=complex)
    if u.shape != (4, 4):
        raise ValueError("gate must be a 4x4 matrix")
    d = np.diag(u)
    off = math.sqrt(max(np.sum(np.abs(u) ** 2) - np.sum(np.abs(d) ** 2), 0.0))
    norm = math.sqrt(float(np.sum(np.abs(u) ** 2)))
    if norm == 0.0 or off > 1e-6 * norm:
        raise ValueError("gate is not diagonal in the qubit basis; "
                         "conditional phase undefined")
    if np.any(np.abs(d) < 1e-12):
        raise ValueError("diagonal entry vanishes; conditional phase "
                         "undefined")
    return _wrap_angle(cmath.phase(d[0]) + cmath.phase(d[3])
                       - cmath.phase(d[1]) - cmath.phase(d[2]))


def conditional_phase_from_channel(channel: QuantumChannel) -> float:
    """Conditional phase of the achieved gate, read off the overlap
    phases (thermal averaging perturbs the phases only at second order
    in the residual displacements)."""
    w = channel.overlaps
    if min(abs(w[0, 1]), abs(w[3, 2])) < 1e-9:
        raise ValueError("overlaps too small to define relative phases")
    return _wrap_angle(cmath.phase(w[0, 1]) + cmath.phase(w[3, 2]))


def extract_diagonal_gate(channel: QuantumChannel) -> np.ndarray:
    """Best diagonal unitary describing the channel: relative phases of
    the overlap matrix first column, global phase removed."""
    col = channel.overlaps[:, 0]
    if np.any(np.abs(col) < 1e-9):
        raise ValueError("overlaps too small to define relative phases")
    d = col / np.abs(col)
    return np.diag(d / d[0])


_MAGIC = np.array([[1.0, 0.0, 0.0, 1.0j],
                   [0.0, 1.0j, 1.0, 0.0],
                   [0.0, 1.0j, -1.0, 0.0],
                   [1.0, 0.0, 0.0, -1.0j]], dtype=complex) / math.sqrt(2.0)


def local_invariants(gate):
    """Local invariants (G1 complex, G2 real) of a two-qubit unitary.

    Computed in the magic (Bell) basis: with m = (Q^dag U Q)^T (Q^dag U Q),
    G1 = tr(m)^2 / (16 det U) and G2 = (tr(m)^2 - tr(m^2)) / (4 det U).
    Invariant under single-qubit rotations on either side; the identity
    maps to (1, 3) and a controlled-Z to (0, 1).
    """
    u = gate.matrix if isinstance(gate, IdealGate) else np.asarray(
        gate, dtype=complex)
    if u.shape != (4, 4):
        raise ValueError("gate must be a 4x4 matrix")
    if np.max(np.abs(u @ u.conj().T - np.eye(4))) > 1e-8:
        raise ValueError("gate must be unitary")
    ub = _MAGIC.conj().T @ u @ _MAGIC
    m = ub.T @ ub
    det = np.linalg.det(u)
    tr = np.trace(m)
    g1 = tr ** 2 / (16.0 * det)
    g2 = (tr ** 2 - np.trace(m @ m)) / (4.0 * det)
    if abs(g2.imag) > 1e-9:
        raise ValueError("G2 acquired an imaginary part; input is not "
                         "unitary enough")
    return complex(g1), float(g2.real)


def process_fidelity(channel: QuantumChannel, ideal) -> float:
    """Average gate fidelity of a channel against a reference unitary:
    F = (sum_l tr[U sigma_l^dag U^dag E(sigma_l)] + 16) / 80."""
    u = ideal.matrix if isinstance(ideal, IdealGate) else np.asarray(
        ideal, dtype=complex)
    if u.shape != (4, 4):
        raise ValueError("reference gate must be a 4x4 matrix")
    if np.max(np.abs(u @ u.conj().T - np.eye(4))) > 1e-8:
        raise ValueError("reference gate must be unitary")
    tot = 0.0 + 0.0j
    for sig, img in zip(paulis16(), channel.images):
        tot += np.trace(u @ sig.conj().T @ u.conj().T @ img)
    if abs(tot.imag) > 1e-8:
        raise ValueError("fidelity sum acquired an imaginary part; "
                         "channel images are inconsistent")
    return float((tot.real + 16.0) / 80.0)


def _parameter_snapshot(config: drive.GateConfig, modes, nbar, cutoffs,
                        backend: str) -> dict:
    trap = config.trap
    return {
        "n_ions": int(trap.n_ions),
        "ion_mass_kg": float(trap.ion_mass),
        "axial_frequency_rad_s": float(trap.axial_frequency),
        "pair": [int(i) for i in config.pair],
        "tweezer_frequency_rad_s": float(config.tweezer_frequency),
        "tweezer_ratio": float(config.tweezer_frequency
                               / trap.axial_frequency),
        "field_amplitude_v_per_m": float(config.field_amplitude),
        "detuning_rad_s": float(config.detuning),
        "drive_frequency_rad_s": float(
            drive.resolve_drive_frequency(config, modes)),
        "gamma_rad_s": float(
            drive.gamma_from_field(config.field_amplitude, trap)),
        "pulse_duration_s": float(config.pulse_duration),
        "ramp_fraction": float(config.ramp_fraction),
        "pulse_count": int(config.pulse_count),
        "field_on_mask": [bool(b) for b in config.field_on_mask],
        "echo_schedule": [[int(q) for q in b] for b in config.echo_schedule],
        "nbar": [float(n) for n in nbar],
        "mode_cutoffs": [int(c) for c in cutoffs],
        "backend": backend,
    }


def fidelity_report(config: drive.GateConfig,
                    thermal: hilbert.ThermalEnsemble,
                    space: hilbert.SpaceSpec,
                    backend: str = "fock",
                    tol: float = 1e-9,
                    max_step=None) -> FidelityReport:
    """Reconstruct the channel, compare against the reference gate, and
    package the scores with a full parameter snapshot."""
    channel = reconstruct_channel(config, thermal, space, backend=backend,
                                  tol=tol, max_step=max_step)
    modes = evolve.retained_modes(config, space)
    ref = ideal_gate(config, modes)
    fid = process_fidelity(channel, ref)
    phi = conditional_phase_from_channel(channel)
    g1, g2 = local_invariants(extract_diagonal_gate(channel))
    params = _parameter_snapshot(config, modes, thermal.nbar,
                                 space.mode_cutoffs, backend)
    params["reference_conditional_phase_rad"] = float(ref.conditional_phase)
    return FidelityReport(fidelity=fid, conditional_phase=phi,
                          g1=g1, g2=g2, parameters=params)
