"""Trace-preserving replica cutoffs for measurement-induced fermion dynamics.

Desk-scale (L <= 6) simulation library: exact Fock sectors, SSE trajectories
and Lindblad baselines, permutation-symmetric replica spaces, tomographic
lifts between replica orders, partial-trace null-space catalogs, and
ensemble-stabilized 2-replica master equations.
"""

__version__ = "0.1.0"
