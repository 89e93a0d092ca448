"""Parameter design and reproduction drivers.

Two calibration sources set the drive field: the analytic coupling rule
gamma = |delta| sqrt(pi)/2 and a numerical solve for a target
conditional phase.  The two disagree at the documented operating point
(by about a factor of five in field), so the rule emits a consistency
warning quoting both numbers rather than silently preferring one.

Sweeps evaluate one fidelity report per grid point, deterministically
and with per-point error carrying, and can cache finished points on
disk keyed by a canonical parameter hash so interrupted runs resume.
The four-ion study reproduces the per-pair corrected drive frequencies
and infidelities of the full-crystal gate.
"""

import concurrent.futures
import dataclasses
import hashlib
import json
import math
import os
import warnings

import numpy as np
import scipy.optimize

from . import crystal
from . import drive
from . import hilbert
from . import metric

AMU_KG = 1.66053906660e-27
YB171_MASS_KG = 171 * AMU_KG
DEFAULT_COM_FREQUENCY = 2.0 * math.pi * 1.0e6

SWEEP_AXES = ("tweezer_frequency", "detuning", "nbar", "field_amplitude")
FIELD_RULES = ("pi_over_4_coupling", "target_conditional_phase")

PAIR_LABELS = ((1, 2), (1, 3), (1, 4), (2, 3))


@dataclasses.dataclass(frozen=True)
class SweepSpec:
    """One-dimensional parameter sweep around a fixed gate configuration.

    axis names the swept GateConfig field ("nbar" sweeps the COM thermal
    occupation instead, with the other retained modes following at equal
    temperature).  targets annotate fidelity thresholds for downstream
    summaries; they do not affect the computation.
    """

    axis: str
    grid: tuple
    config: drive.GateConfig
    cutoffs: tuple
    nbar_com: float = 0.0
    backend: str = "gaussian"
    targets: tuple = (0.99, 0.999)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {SWEEP_AXES}")
        grid = tuple(float(v) for v in self.grid)
        if not grid:
            raise ValueError("grid must not be empty")
        d = np.diff(grid)
        if len(grid) > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("grid must be strictly monotone")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "cutoffs", tuple(self.cutoffs))
        object.__setattr__(self, "targets",
                           tuple(float(t) for t in self.targets))
        if self.nbar_com < 0:
            raise ValueError("nbar_com must be >= 0")
        if any(not 0.0 < t <= 1.0 for t in self.targets):
            raise ValueError("targets must lie in (0, 1]")


@dataclasses.dataclass(frozen=True)
class SweepPoint:
    """Result at one grid value: a report, or the error that point hit."""

    axis_value: float
    report: metric.FidelityReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.report is not None


@dataclasses.dataclass(frozen=True)
class PairStudy:
    """One addressed pair of the four-ion study.

    pair uses 1-based chain positions as reported; drive_frequency is the
    corrected drive (angular rad/s) and offset_hz = (w_com - mu)/2pi.
    """

    pair: tuple
    drive_frequency: float
    offset_hz: float
    fidelity: float
    report: metric.FidelityReport

    def __post_init__(self):
        object.__setattr__(self, "pair", tuple(int(i) for i in self.pair))
        if self.pair not in PAIR_LABELS:
            raise ValueError(f"pair must be one of {PAIR_LABELS}")

    @property
    def infidelity_x1e4(self) -> float:
        return (1.0 - self.fidelity) * 1.0e4


def _field_unit_gamma(trap: crystal.TrapSpec) -> float:
    """Coupling rate per unit field amplitude."""
    return drive.gamma_from_field(1.0, trap)


def _raw_conditional_phase(field_amplitude, delta, trap, tweezer_frequency,
                           pair, n_modes) -> float:
    """Unwrapped conditional phase of the reference gate; exactly linear
    in the squared field amplitude."""
    cfg = drive.GateConfig(trap=trap, pair=pair,
                           tweezer_frequency=tweezer_frequency,
                           field_amplitude=field_amplitude, detuning=delta)
    modes = crystal.normal_modes(trap).restrict(range(n_modes))
    ph = metric.ideal_gate(cfg, modes).phases
    return float(ph[0] + ph[3] - ph[1] - ph[2])


def field_for_gate_condition(delta: float, trap: crystal.TrapSpec,
                             rule: str, phi=None,
                             tweezer_frequency: float = 0.0,
                             pair=(0, 1), n_modes: int = 1) -> float:
    """Field amplitude E0 for a gate condition.

    rule "pi_over_4_coupling" applies gamma = |delta| sqrt(pi)/2 and
    warns about its inconsistency with the conditional-phase target it
    nominally serves.  rule "target_conditional_phase" solves
    conditional phase = phi by bracketed root finding on the reference
    gate's closed-form phase (monotone in E0^2).
    """
    if delta == 0:
        raise ValueError("delta must be nonzero")
    if rule == "pi_over_4_coupling":
        gamma = abs(delta) * math.sqrt(math.pi) / 2.0
        e0 = gamma / _field_unit_gamma(trap)
        msg = (f"gamma = |delta| sqrt(pi)/2 gives E0 = {e0:.4e} V/m")
        if tweezer_frequency > 0:
            phi_rule = _raw_conditional_phase(e0, delta, trap,
                                              tweezer_frequency, pair,
                                              n_modes)
            e0_phase = field_for_gate_condition(
                delta, trap, "target_conditional_phase",
                phi=math.copysign(math.pi / 4.0, phi_rule),
                tweezer_frequency=tweezer_frequency, pair=pair,
                n_modes=n_modes)
            msg += (f", which drives the conditional phase to "
                    f"{phi_rule:.3f} rad; a pi/4 conditional phase at "
                    f"these parameters needs E0 = {e0_phase:.4e} V/m "
                    f"instead")
        warnings.warn(msg + "; the two calibrations are inconsistent",
                      UserWarning, stacklevel=2)
        return e0
    if rule == "target_conditional_phase":
        if phi is None:
            raise ValueError("target_conditional_phase needs phi")
        if phi == 0.0:
            return 0.0
        e_ref = 1.0e-3
        phi_ref = _raw_conditional_phase(e_ref, delta, trap,
                                         tweezer_frequency, pair, n_modes)
        if phi_ref == 0.0 or (phi_ref > 0) != (phi > 0):
            raise ValueError(
                f"conditional phase target {phi:.4f} rad is not bracketed: "
                f"phase is 0 at E0 = 0 and {phi_ref:.4e} at E0 = "
                f"{e_ref:.1e} V/m (same-sign target required)")
        hi = e_ref * math.sqrt(phi / phi_ref) * 1.25
        f = lambda e: _raw_conditional_phase(e, delta, trap,
                                             tweezer_frequency, pair,
                                             n_modes) - phi
        return float(scipy.optimize.brentq(f, 0.0, hi, xtol=1e-18,
                                           rtol=1e-14))
    raise ValueError(f"unknown rule {rule!r}; choose from {FIELD_RULES}")


def corrected_drive_frequency(trap: crystal.TrapSpec, pair,
                              tweezer_frequency: float,
                              delta: float) -> float:
    """Drive frequency mu = (exact mixed-configuration COM branch over the
    full crystal) + delta for an addressed pair (0-based indices)."""
    pert = crystal.TweezerPerturbation(tweezer_frequency, pair, (1, -1))
    offset = crystal.drive_frequency_correction(trap, pert, delta)
    return trap.axial_frequency - offset


def config_hash(config: drive.GateConfig, nbar, cutoffs,
                backend: str) -> str:
    """Canonical hash of one fidelity evaluation's full parameter set."""
    payload = {
        "n_ions": int(config.trap.n_ions),
        "ion_mass_kg": float(config.trap.ion_mass),
        "axial_frequency_rad_s": float(config.trap.axial_frequency),
        "charge_c": float(config.trap.charge),
        "pair": [int(i) for i in config.pair],
        "tweezer_frequency_rad_s": float(config.tweezer_frequency),
        "field_amplitude_v_per_m": float(config.field_amplitude),
        "detuning_rad_s": float(config.detuning),
        "drive_frequency_rad_s": (None if config.drive_frequency is None
                                  else float(config.drive_frequency)),
        "pulse_count": int(config.pulse_count),
        "field_on_mask": [bool(b) for b in config.field_on_mask],
        "echo_schedule": [[int(q) for q in b]
                          for b in config.echo_schedule],
        "ramp_fraction": float(config.ramp_fraction),
        "nbar": [float(n) for n in nbar],
        "cutoffs": [int(c) for c in cutoffs],
        "backend": backend,
    }
    text = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _point_inputs(spec: SweepSpec, value: float):
    """Resolved (config, thermal ensemble) for one grid value."""
    cfg = spec.config
    nbar_com = spec.nbar_com
    if spec.axis == "nbar":
        nbar_com = value
    else:
        cfg = dataclasses.replace(cfg, **{spec.axis: value})
    if len(spec.cutoffs) == 1:
        thermal = hilbert.ThermalEnsemble((nbar_com,), spec.cutoffs)
    else:
        freqs = crystal.normal_modes(cfg.trap).restrict(
            range(len(spec.cutoffs))).frequencies
        thermal = hilbert.equal_temperature_ensemble(nbar_com, freqs,
                                                     spec.cutoffs)
    return cfg, thermal


def _report_from_dict(d: dict) -> metric.FidelityReport:
    top = ("fidelity", "infidelity", "conditional_phase_rad", "g1_re",
           "g1_im", "g2")
    params = {k: v for k, v in d.items() if k not in top}
    return metric.FidelityReport(
        fidelity=d["fidelity"],
        conditional_phase=d["conditional_phase_rad"],
        g1=complex(d["g1_re"], d["g1_im"]), g2=d["g2"],
        parameters=params)


def _evaluate_point(spec: SweepSpec, value: float) -> dict:
    cfg, thermal = _point_inputs(spec, value)
    space = hilbert.SpaceSpec(2, spec.cutoffs)
    rep = metric.fidelity_report(cfg, thermal, space, backend=spec.backend)
    return rep.as_dict()


def _point_worker(args):
    idx, spec, value = args
    try:
        return idx, _evaluate_point(spec, value), None
    except Exception as exc:
        return idx, None, f"{type(exc).__name__}: {exc}"


def _cache_path(cache_dir: str, spec: SweepSpec, value: float):
    cfg, thermal = _point_inputs(spec, value)
    key = config_hash(cfg, thermal.nbar, spec.cutoffs, spec.backend)
    return os.path.join(cache_dir, key + ".json")


def run_sweep(spec: SweepSpec, jobs: int = 1, cache_dir=None) -> list:
    """Evaluate the sweep, one SweepPoint per grid value, in grid order.

    Points run independently (in a process pool when jobs > 1); a failing
    point carries its error without aborting the rest.  With cache_dir
    set, finished points are stored as JSON keyed by their parameter hash
    and later runs reuse them, so interrupted sweeps resume.
    """
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    results: dict = {}
    pending = []
    for idx, value in enumerate(spec.grid):
        if cache_dir is not None:
            try:
                path = _cache_path(cache_dir, spec, value)
            except Exception as exc:
                results[idx] = (None, f"{type(exc).__name__}: {exc}")
                continue
            if os.path.exists(path):
                with open(path) as fh:
                    results[idx] = (json.load(fh), None)
                continue
        pending.append((idx, spec, value))

    if jobs > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=jobs) as pool:
            outs = list(pool.map(_point_worker, pending))
    else:
        outs = [_point_worker(args) for args in pending]
    for idx, payload, err in outs:
        results[idx] = (payload, err)
        if payload is not None and cache_dir is not None:
            os.makedirs(cache_dir, exist_ok=True)
            path = _cache_path(cache_dir, spec, spec.grid[idx])
            with open(path, "w") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)

    points = []
    for idx, value in enumerate(spec.grid):
        payload, err = results[idx]
        if payload is None:
            points.append(SweepPoint(axis_value=value, error=err))
        else:
            points.append(SweepPoint(axis_value=value,
                                     report=_report_from_dict(payload)))
    return points


def threshold_crossings(points, targets):
    """First axis value at which the fidelity reaches each target and
    stays measurable: the smallest grid value with F >= target."""
    out = {}
    for t in targets:
        out[t] = None
        for p in points:
            if p.ok and p.report.fidelity >= t:
                out[t] = p.axis_value
                break
    return out


def default_four_ion_trap() -> crystal.TrapSpec:
    return crystal.TrapSpec(4, YB171_MASS_KG, DEFAULT_COM_FREQUENCY)


def four_ion_table(tweezer_frequency: float, delta_base: float,
                   trap=None, field_amplitude: float = 2.69e-4,
                   cutoffs=(14, 6, 6, 6), nbar_com: float = 0.0,
                   backend: str = "column", jobs: int = 1,
                   cache_dir=None) -> list:
    """Gate study for every addressed pair of a four-ion crystal.

    Each pair gets its corrected drive frequency from the full-crystal
    mixed-configuration branch, then runs the gate with the full tweezer
    coupling and all retained modes.  Pairs are labeled with 1-based
    chain positions; unlisted pairs are mirror images of listed ones.
    """
    if trap is None:
        trap = default_four_ion_trap()
    if trap.n_ions != 4:
        raise ValueError("the pair study expects a four-ion crystal")
    if len(cutoffs) != trap.n_ions:
        raise ValueError("the pair study retains all four axial modes")
    studies = []
    for label in PAIR_LABELS:
        pair = (label[0] - 1, label[1] - 1)
        mu = corrected_drive_frequency(trap, pair, tweezer_frequency,
                                       delta_base)
        cfg = drive.GateConfig(trap=trap, pair=pair,
                               tweezer_frequency=tweezer_frequency,
                               field_amplitude=field_amplitude,
                               detuning=delta_base, drive_frequency=mu)
        spec = SweepSpec(axis="tweezer_frequency",
                         grid=(tweezer_frequency,), config=cfg,
                         cutoffs=cutoffs, nbar_com=nbar_com,
                         backend=backend)
        studies.append((label, mu, spec))

    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=min(jobs, len(studies))) as pool:
            outs = list(pool.map(_study_worker,
                                 [(s, cache_dir) for _, _, s in studies]))
    else:
        outs = [_study_worker((s, cache_dir)) for _, _, s in studies]

    table = []
    for (label, mu, _), point in zip(studies, outs):
        if not point.ok:
            raise RuntimeError(f"pair {label} failed: {point.error}")
        table.append(PairStudy(
            pair=label, drive_frequency=mu,
            offset_hz=(trap.axial_frequency - mu) / (2.0 * math.pi),
            fidelity=point.report.fidelity, report=point.report))
    return table


def _study_worker(args):
    spec, cache_dir = args
    return run_sweep(spec, jobs=1, cache_dir=cache_dir)[0]
