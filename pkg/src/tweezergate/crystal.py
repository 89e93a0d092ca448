"""Linear ion chain mechanics: equilibrium, axial modes, tweezer shifts.

Internally everything is dimensionless (lengths in the Coulomb length
l = (e^2 / (4 pi eps0 M w_z^2))^(1/3), frequencies in w_z); SI enters only
at the API boundary.
"""
from __future__ import annotations

import dataclasses

import numpy as np
import scipy.constants as const


@dataclasses.dataclass(frozen=True)
class TrapSpec:
    """Static trap and ion parameters.

    axial_frequency is the angular COM frequency w_z of the bare chain
    (rad/s); ion_mass in kg; charge in Coulomb.
    """

    n_ions: int
    ion_mass: float
    axial_frequency: float
    charge: float = const.elementary_charge

    def __post_init__(self):
        if self.n_ions < 1:
            raise ValueError("n_ions must be >= 1")
        if self.ion_mass <= 0:
            raise ValueError("ion_mass must be positive")
        if self.axial_frequency <= 0:
            raise ValueError("axial_frequency must be positive")
        if self.charge <= 0:
            raise ValueError("charge must be positive")


@dataclasses.dataclass(frozen=True)
class CrystalModes:
    """Axial normal-mode data of a chain.

    positions: dimensionless equilibrium coordinates (ascending).
    frequencies: angular mode frequencies, ascending; frequencies[0] is the
    COM mode at the bare trap frequency.
    vectors: orthonormal mode vectors, vectors[m, i] = participation of ion i
    in mode m (rows are modes, same order as frequencies).
    """

    positions: np.ndarray
    frequencies: np.ndarray
    vectors: np.ndarray

    @property
    def n_ions(self) -> int:
        return len(self.positions)

    def restrict(self, mode_indices) -> "CrystalModes":
        """Keep only the listed modes (e.g. (0,) for a COM-only study)."""
        idx = list(mode_indices)
        return CrystalModes(self.positions, self.frequencies[idx],
                            self.vectors[idx, :])


@dataclasses.dataclass(frozen=True)
class TweezerPerturbation:
    """State-dependent tweezer curvature on an addressed ion pair.

    pair is 0-based ion indices (i, j); spin_config the (s_i, s_j) signs of
    the qubit-conditioned potential, s = +1 for |1>.
    """

    tweezer_frequency: float
    pair: tuple
    spin_config: tuple = (1, 1)

    def __post_init__(self):
        i, j = self.pair
        if i == j:
            raise ValueError("pair indices must differ")
        if i < 0 or j < 0:
            raise ValueError("pair indices must be nonnegative")
        si, sj = self.spin_config
        if si not in (-1, 1) or sj not in (-1, 1):
            raise ValueError("spin_config entries must be +1 or -1")
        if self.tweezer_frequency < 0:
            raise ValueError("tweezer_frequency must be >= 0")


def coulomb_length(trap: TrapSpec) -> float:
    """Length unit l of the dimensionless chain coordinates, in meters."""
    k = trap.charge ** 2 / (4.0 * np.pi * const.epsilon_0)
    return (k / (trap.ion_mass * trap.axial_frequency ** 2)) ** (1.0 / 3.0)


def _potential_gradient(u: np.ndarray) -> np.ndarray:
    # dimensionless force balance: trap pull minus pairwise Coulomb repulsion
    g = u.copy()
    n = len(u)
    for i in range(n):
        for j in range(n):
            if j != i:
                d = u[i] - u[j]
                g[i] -= np.sign(d) / d ** 2
    return g


def _dimensionless_hessian(u: np.ndarray) -> np.ndarray:
    n = len(u)
    a = np.eye(n)
    for i in range(n):
        s = 0.0
        for j in range(n):
            if j != i:
                d3 = abs(u[i] - u[j]) ** 3
                a[i, j] = -2.0 / d3
                s += 2.0 / d3
        a[i, i] = 1.0 + s
    return a


def equilibrium_positions(trap: TrapSpec) -> np.ndarray:
    """Dimensionless equilibrium coordinates, ascending and centered.

    Damped Newton iteration from a uniform-spacing ansatz; the gradient at
    the returned point is below 1e-12 per ion.
    """
    n = trap.n_ions
    if n == 1:
        return np.zeros(1)
    u = np.linspace(-1.0, 1.0, n) * (0.5 * n ** 0.56)
    for _ in range(200):
        g = _potential_gradient(u)
        if np.max(np.abs(g)) < 1e-13:
            break
        h = _dimensionless_hessian(u)
        step = np.linalg.solve(h, g)
        # keep the ordering: cap the step at a fraction of the closest gap
        gap = np.min(np.diff(u))
        scale = min(1.0, 0.4 * gap / max(np.max(np.abs(step)), 1e-300))
        u = u - scale * step
    residual = np.max(np.abs(_potential_gradient(u)))
    if residual > 1e-12:
        raise RuntimeError(
            "equilibrium solve did not converge: residual %.3e" % residual)
    u = np.sort(u)
    return u - np.mean(u)


def axial_hessian(trap: TrapSpec, positions: np.ndarray) -> np.ndarray:
    """Axial Hessian about equilibrium, SI entries (rad/s)^2.

    Row sums equal w_z^2: uniform translation feels only the trap curvature.
    """
    u = np.asarray(positions, float)
    if len(u) > 1 and np.min(np.abs(np.diff(np.sort(u)))) < 1e-12:
        raise ValueError("coincident ion positions: Coulomb singularity")
    return trap.axial_frequency ** 2 * _dimensionless_hessian(u)


def normal_modes(trap: TrapSpec) -> CrystalModes:
    """Equilibrium, mode frequencies (ascending) and orthonormal vectors."""
    u = equilibrium_positions(trap)
    lam, vecs = np.linalg.eigh(_dimensionless_hessian(u))
    b = vecs.T.copy()
    # fix the sign gauge: dominant component of each mode positive
    for m in range(trap.n_ions):
        if b[m, np.argmax(np.abs(b[m]))] < 0:
            b[m] *= -1.0
    freqs = trap.axial_frequency * np.sqrt(lam)
    return CrystalModes(positions=u, frequencies=freqs, vectors=b)


def _site_curvature(modes: CrystalModes, pert: TweezerPerturbation) -> np.ndarray:
    n = modes.n_ions
    i, j = pert.pair
    if i >= n or j >= n:
        raise ValueError("pair index out of range for %d ions" % n)
    si, sj = pert.spin_config
    diag = np.zeros(n)
    diag[i] += si * pert.tweezer_frequency ** 2
    diag[j] += sj * pert.tweezer_frequency ** 2
    return diag


def mode_coupling_matrix(modes: CrystalModes,
                         pert: TweezerPerturbation) -> np.ndarray:
    """Tweezer curvature in the normal-mode basis (squared rad/s):
    K_mn = w_tw^2 sum over the addressed pair of s_ion b_m,ion b_n,ion.
    Well defined for a restricted (retained) mode set."""
    diag = _site_curvature(modes, pert)
    b = modes.vectors
    i, j = pert.pair
    return (diag[i] * np.outer(b[:, i], b[:, i])
            + diag[j] * np.outer(b[:, j], b[:, j]))


def shifted_mode_frequencies(modes: CrystalModes, pert: TweezerPerturbation,
                             method: str = "exact") -> np.ndarray:
    """Mode frequencies with the tweezer curvature added on the pair sites.

    perturbative: w_m -> sqrt(w_m^2 + w_tw^2 (b_mi^2 s_i + b_mj^2 s_j)),
    keeping only the diagonal of the mode-basis coupling.
    exact: diagonalize diag(w^2) + K over the modes actually present in
    `modes` (restricted sets allowed). Both return ascending arrays.
    """
    _site_curvature(modes, pert)  # validates the pair against the crystal
    if method == "perturbative":
        i, j = pert.pair
        si, sj = pert.spin_config
        w2 = modes.frequencies ** 2 + pert.tweezer_frequency ** 2 * (
            si * modes.vectors[:, i] ** 2 + sj * modes.vectors[:, j] ** 2)
        if np.min(w2) <= 0:
            m = int(np.argmin(w2))
            raise ValueError(
                "anti-trapped mode %d: squared frequency %.3e" % (m, w2[m]))
        return np.sort(np.sqrt(w2))
    if method == "exact":
        # mode-basis quadratic form diag(w^2) + K keeps restricted mode sets
        # well posed (the ion-basis form would be rank deficient there); for
        # a complete mode set the spectra coincide
        k = mode_coupling_matrix(modes, pert)
        lam = np.linalg.eigvalsh(np.diag(modes.frequencies ** 2) + k)
        if lam[0] <= 0:
            raise ValueError(
                "anti-trapped mode 0: squared frequency %.3e" % lam[0])
        return np.sqrt(lam)
    raise ValueError("method must be 'perturbative' or 'exact'")


def drive_frequency_correction(trap: TrapSpec, pert: TweezerPerturbation,
                               delta: float = 0.0) -> float:
    """Offset w_com - mu of the resonant drive, in angular rad/s.

    The resonant manifold is the mixed spin configuration (+1, -1); its
    exact COM-branch frequency sets mu = w_tilde_com + delta, so the
    returned offset is w_com - w_tilde_com - delta. With a negative delta
    of order kHz this lands in the positive few-kHz range used to tabulate
    four-ion drive corrections.
    """
    modes = normal_modes(trap)
    mixed = TweezerPerturbation(pert.tweezer_frequency, pert.pair, (1, -1))
    shifted = shifted_mode_frequencies(modes, mixed, method="exact")
    return trap.axial_frequency - shifted[0] - delta
