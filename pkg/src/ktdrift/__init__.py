"""Longitudinal drift evaluation for knowledge-tracing models.

Subpackages: ``logstore`` (interaction logs and sampling), ``synth`` (drifting
BKT simulator), ``numcore`` (numpy autodiff), ``models`` (BKT, PFA, DKT, SAKT),
``metrics`` and ``harness`` (protocols and reports).
"""

__version__ = "0.1.0"
