"""Simulation of tweezer-programmable geometric phase gates on ion crystals.

Submodules:
  crystal   -- chain equilibrium, axial normal modes, tweezer-shifted spectra
  hilbert   -- truncated Fock spaces, tensor embedding, thermal ensembles
  drive     -- time-dependent gate Hamiltonian and the analytic effective model
  evolve    -- propagators, the four-pulse echo sequence, phase-space trajectories
  metric    -- thermal-averaged process fidelity, conditional phase, invariants
  calibrate -- field-amplitude rules, drive-frequency corrections, sweeps
  cli       -- command-line front end with paper-figure presets
"""

__version__ = "0.1.0"

__all__ = [
    "crystal",
    "hilbert",
    "drive",
    "evolve",
    "metric",
    "calibrate",
    "cli",
]
