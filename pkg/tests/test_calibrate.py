"""Calibration rules, frequency corrections, sweeps, and the pair study."""

import json
import math
import warnings

import numpy as np
import pytest

from tweezergate import calibrate
from tweezergate import crystal
from tweezergate import drive
from tweezergate import hilbert
from tweezergate import metric

DELTA = -2.0 * math.pi * 1.0e3
W_TW_TABLE = 2.0 * math.pi * 257.0e3


def trap(n=2):
    return crystal.TrapSpec(n, calibrate.YB171_MASS_KG,
                            calibrate.DEFAULT_COM_FREQUENCY)


def config(**kw):
    base = dict(trap=trap(), pair=(0, 1),
                tweezer_frequency=0.25 * calibrate.DEFAULT_COM_FREQUENCY,
                field_amplitude=2.69e-4, detuning=DELTA)
    base.update(kw)
    return drive.GateConfig(**base)


class TestFieldForGateCondition:
    def test_quarter_pi_rule_value_and_warning(self):
        with pytest.warns(UserWarning, match="inconsistent") as rec:
            e0 = calibrate.field_for_gate_condition(
                DELTA, trap(), "pi_over_4_coupling",
                tweezer_frequency=0.25 * trap().axial_frequency)
        gamma = drive.gamma_from_field(e0, trap())
        assert gamma == pytest.approx(abs(DELTA) * math.sqrt(math.pi) / 2.0,
                                      rel=1e-12)
        assert e0 == pytest.approx(1.3484e-3, rel=1e-3)
        # the warning quotes both calibration fields
        msg = str(rec[0].message)
        assert "1.3484e-03" in msg and "2.6889e-04" in msg

    def test_quarter_pi_rule_linear_in_delta(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            e1 = calibrate.field_for_gate_condition(DELTA, trap(),
                                                    "pi_over_4_coupling")
            e2 = calibrate.field_for_gate_condition(2 * DELTA, trap(),
                                                    "pi_over_4_coupling")
        assert e2 == pytest.approx(2.0 * e1, rel=1e-12)

    def test_target_phase_matches_operating_field(self):
        e0 = calibrate.field_for_gate_condition(
            DELTA, trap(), "target_conditional_phase", phi=-math.pi / 4.0,
            tweezer_frequency=0.25 * trap().axial_frequency)
        assert e0 == pytest.approx(2.6889e-4, rel=1e-4)
        assert e0 == pytest.approx(2.69e-4, rel=1e-2)

    def test_target_phase_roundtrip(self):
        tw = 0.25 * trap().axial_frequency
        phi = -0.6
        e0 = calibrate.field_for_gate_condition(
            DELTA, trap(), "target_conditional_phase", phi=phi,
            tweezer_frequency=tw)
        cfg = config(field_amplitude=e0, tweezer_frequency=tw)
        modes = crystal.normal_modes(trap()).restrict([0])
        gate = metric.ideal_gate(cfg, modes)
        ph = gate.phases
        raw = ph[0] + ph[3] - ph[1] - ph[2]
        assert raw == pytest.approx(phi, abs=1e-10)

    def test_field_scales_with_sqrt_phase(self):
        tw = 0.25 * trap().axial_frequency
        e_quarter = calibrate.field_for_gate_condition(
            DELTA, trap(), "target_conditional_phase", phi=-math.pi / 4.0,
            tweezer_frequency=tw)
        e_eighth = calibrate.field_for_gate_condition(
            DELTA, trap(), "target_conditional_phase", phi=-math.pi / 8.0,
            tweezer_frequency=tw)
        assert e_eighth == pytest.approx(e_quarter / math.sqrt(2.0),
                                         rel=1e-9)

    def test_zero_target_gives_zero_field(self):
        e0 = calibrate.field_for_gate_condition(
            DELTA, trap(), "target_conditional_phase", phi=0.0,
            tweezer_frequency=0.25 * trap().axial_frequency)
        assert e0 == 0.0

    def test_unbracketed_target_reports_bracket(self):
        with pytest.raises(ValueError, match="not bracketed"):
            calibrate.field_for_gate_condition(
                DELTA, trap(), "target_conditional_phase",
                phi=+math.pi / 4.0,
                tweezer_frequency=0.25 * trap().axial_frequency)
        # no tweezer, no conditional phase at any field
        with pytest.raises(ValueError, match="not bracketed"):
            calibrate.field_for_gate_condition(
                DELTA, trap(), "target_conditional_phase",
                phi=-math.pi / 4.0, tweezer_frequency=0.0)

    def test_input_validation(self):
        with pytest.raises(ValueError, match="nonzero"):
            calibrate.field_for_gate_condition(0.0, trap(),
                                               "pi_over_4_coupling")
        with pytest.raises(ValueError, match="rule"):
            calibrate.field_for_gate_condition(DELTA, trap(), "magic")
        with pytest.raises(ValueError, match="phi"):
            calibrate.field_for_gate_condition(DELTA, trap(),
                                               "target_conditional_phase")


class TestCorrectedDriveFrequency:
    def test_zero_tweezer_reduces_to_com_plus_delta(self):
        mu = calibrate.corrected_drive_frequency(trap(), (0, 1), 0.0, DELTA)
        assert mu == pytest.approx(trap().axial_frequency + DELTA,
                                   rel=1e-14)

    def test_offset_vanishes_quadratically(self):
        t4 = calibrate.default_four_ion_trap()
        w = t4.axial_frequency

        def curvature_part(wt):
            mu = calibrate.corrected_drive_frequency(t4, (0, 2), wt, DELTA)
            return w - mu + DELTA

        c1 = curvature_part(0.01 * w)
        c2 = curvature_part(0.02 * w)
        # mixed-configuration first-order shifts cancel, so the branch
        # offset is quartic in the tweezer frequency (quadratic or higher)
        assert c2 / c1 > 3.9
        assert c2 / c1 == pytest.approx(16.0, rel=0.05)

    def test_four_ion_offsets_match_published(self):
        t4 = calibrate.default_four_ion_trap()
        published_hz = {(0, 1): 1212.0, (0, 2): 1325.0,
                        (0, 3): 1488.0, (1, 2): 1162.0}
        for pair, want in published_hz.items():
            mu = calibrate.corrected_drive_frequency(t4, pair, W_TW_TABLE,
                                                     DELTA)
            off = (t4.axial_frequency - mu) / (2.0 * math.pi)
            assert off == pytest.approx(want, rel=0.1)

    def test_offsets_at_reduced_tweezer_match_tightly(self):
        # at 254 kHz the published offsets are reproduced within 10 Hz
        t4 = calibrate.default_four_ion_trap()
        w_tw = 2.0 * math.pi * 254.0e3
        published_hz = {(0, 1): 1212.0, (0, 2): 1325.0,
                        (0, 3): 1488.0, (1, 2): 1162.0}
        for pair, want in published_hz.items():
            mu = calibrate.corrected_drive_frequency(t4, pair, w_tw, DELTA)
            off = (t4.axial_frequency - mu) / (2.0 * math.pi)
            assert abs(off - want) < 10.0


class TestSweepSpec:
    def test_validation(self):
        cfg = config()
        with pytest.raises(ValueError, match="axis"):
            calibrate.SweepSpec(axis="ramp", grid=(1.0,), config=cfg,
                                cutoffs=(10,))
        with pytest.raises(ValueError, match="empty"):
            calibrate.SweepSpec(axis="nbar", grid=(), config=cfg,
                                cutoffs=(10,))
        with pytest.raises(ValueError, match="monotone"):
            calibrate.SweepSpec(axis="nbar", grid=(0.0, 1.0, 0.5),
                                config=cfg, cutoffs=(10,))
        with pytest.raises(ValueError, match="targets"):
            calibrate.SweepSpec(axis="nbar", grid=(0.0,), config=cfg,
                                cutoffs=(10,), targets=(1.5,))

    def test_descending_grid_allowed(self):
        spec = calibrate.SweepSpec(axis="detuning",
                                   grid=(-1000.0, -2000.0, -3000.0),
                                   config=config(), cutoffs=(10,))
        assert spec.grid == (-1000.0, -2000.0, -3000.0)


class TestRunSweep:
    def test_single_point_equals_direct_report(self):
        cfg = config()
        spec = calibrate.SweepSpec(axis="tweezer_frequency",
                                   grid=(cfg.tweezer_frequency,),
                                   config=cfg, cutoffs=(20,))
        pts = calibrate.run_sweep(spec)
        direct = metric.fidelity_report(
            cfg, hilbert.ThermalEnsemble((0.0,), (20,)),
            hilbert.SpaceSpec(2, (20,)), backend="gaussian")
        assert pts[0].ok
        assert pts[0].report.fidelity == direct.fidelity
        assert pts[0].report.as_dict() == direct.as_dict()

    def test_deterministic_json(self):
        spec = calibrate.SweepSpec(
            axis="tweezer_frequency",
            grid=(0.20 * calibrate.DEFAULT_COM_FREQUENCY,
                  0.25 * calibrate.DEFAULT_COM_FREQUENCY),
            config=config(), cutoffs=(16,))
        one = json.dumps([p.report.as_dict()
                          for p in calibrate.run_sweep(spec)],
                         sort_keys=True)
        two = json.dumps([p.report.as_dict()
                          for p in calibrate.run_sweep(spec)],
                         sort_keys=True)
        assert one == two

    def test_errors_carried_per_point(self):
        spec = calibrate.SweepSpec(axis="detuning",
                                   grid=(DELTA, 0.0, -DELTA),
                                   config=config(), cutoffs=(12,))
        pts = calibrate.run_sweep(spec)
        assert pts[0].ok and pts[2].ok
        assert not pts[1].ok
        assert "detuning" in pts[1].error
        assert pts[1].report is None

    def test_nbar_axis_orders_fidelity(self):
        spec = calibrate.SweepSpec(axis="nbar", grid=(0.0, 0.6, 1.0),
                                   config=config(), cutoffs=(20,))
        pts = calibrate.run_sweep(spec)
        fids = [p.report.fidelity for p in pts]
        assert fids[0] >= fids[1] >= fids[2]
        assert all(f > 0.999 for f in fids)

    def test_nbar_axis_fills_higher_modes_at_equal_temperature(self):
        spec = calibrate.SweepSpec(axis="nbar", grid=(1.0,),
                                   config=config(), cutoffs=(16, 8))
        pts = calibrate.run_sweep(spec)
        nb = pts[0].report.parameters["nbar"]
        assert nb[0] == pytest.approx(1.0)
        # stretch mode at sqrt(3) the COM frequency, same temperature
        assert nb[1] == pytest.approx(0.43066, abs=2e-5)

    def test_cache_resumes(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        real = calibrate.metric.fidelity_report

        def counting(*a, **kw):
            calls["n"] += 1
            return real(*a, **kw)

        monkeypatch.setattr(calibrate.metric, "fidelity_report", counting)
        spec = calibrate.SweepSpec(
            axis="tweezer_frequency",
            grid=(0.20 * calibrate.DEFAULT_COM_FREQUENCY,
                  0.25 * calibrate.DEFAULT_COM_FREQUENCY),
            config=config(), cutoffs=(14,))
        cache = str(tmp_path / "cache")
        first = calibrate.run_sweep(spec, cache_dir=cache)
        assert calls["n"] == 2
        second = calibrate.run_sweep(spec, cache_dir=cache)
        assert calls["n"] == 2
        assert [p.report.as_dict() for p in first] == \
               [p.report.as_dict() for p in second]
        # drop one point; only that one is recomputed
        files = sorted((tmp_path / "cache").iterdir())
        assert len(files) == 2
        files[0].unlink()
        third = calibrate.run_sweep(spec, cache_dir=cache)
        assert calls["n"] == 3
        assert [p.report.as_dict() for p in third] == \
               [p.report.as_dict() for p in second]

    def test_parallel_matches_serial(self):
        spec = calibrate.SweepSpec(
            axis="tweezer_frequency",
            grid=(0.18 * calibrate.DEFAULT_COM_FREQUENCY,
                  0.22 * calibrate.DEFAULT_COM_FREQUENCY,
                  0.26 * calibrate.DEFAULT_COM_FREQUENCY),
            config=config(), cutoffs=(12,))
        serial = calibrate.run_sweep(spec, jobs=1)
        parallel = calibrate.run_sweep(spec, jobs=2)
        assert [p.report.as_dict() for p in serial] == \
               [p.report.as_dict() for p in parallel]

    def test_jobs_validation(self):
        spec = calibrate.SweepSpec(axis="nbar", grid=(0.0,),
                                   config=config(), cutoffs=(10,))
        with pytest.raises(ValueError, match="jobs"):
            calibrate.run_sweep(spec, jobs=0)

    def test_threshold_crossings(self):
        spec = calibrate.SweepSpec(
            axis="tweezer_frequency",
            grid=tuple(r * calibrate.DEFAULT_COM_FREQUENCY
                       for r in (0.12, 0.20, 0.25)),
            config=config(), cutoffs=(16,))
        pts = calibrate.run_sweep(spec)
        cross = calibrate.threshold_crossings(pts, (0.99, 0.999, 0.99999))
        assert cross[0.99] == pytest.approx(
            0.12 * calibrate.DEFAULT_COM_FREQUENCY)
        assert cross[0.999] is not None
        assert cross[0.99999] is None


class TestFourIonTable:
    def test_reproduces_published_study(self):
        table = calibrate.four_ion_table(W_TW_TABLE, DELTA,
                                         backend="gaussian")
        assert [st.pair for st in table] == list(calibrate.PAIR_LABELS)
        want_off = (1220.8, 1338.6, 1507.6, 1168.9)
        want_inf = (1.575, 2.327, 1.344, 2.453)
        for st, off, inf in zip(table, want_off, want_inf):
            assert st.offset_hz == pytest.approx(off, abs=0.1)
            assert st.infidelity_x1e4 == pytest.approx(inf, abs=0.01)
            assert st.fidelity > 0.999
        published = (3.7, 4.7, 2.4, 1.1)
        for st, pub in zip(table, published):
            assert st.infidelity_x1e4 < 10.0
            ratio = st.infidelity_x1e4 / pub
            assert 1.0 / 3.0 < ratio < 3.0

    def test_column_backend_agrees(self):
        table = calibrate.four_ion_table(W_TW_TABLE, DELTA,
                                         backend="column", jobs=2)
        want_inf = (1.575, 2.327, 1.344, 2.453)
        for st, inf in zip(table, want_inf):
            assert st.infidelity_x1e4 == pytest.approx(inf, abs=2e-3)

    def test_validation(self):
        with pytest.raises(ValueError, match="four-ion"):
            calibrate.four_ion_table(W_TW_TABLE, DELTA, trap=trap(2))
        with pytest.raises(ValueError, match="four"):
            calibrate.four_ion_table(W_TW_TABLE, DELTA, cutoffs=(14, 6))
        with pytest.raises(ValueError, match="pair"):
            calibrate.PairStudy(pair=(2, 4), drive_frequency=1.0,
                                offset_hz=0.0, fidelity=1.0, report=None)
