"""Cached builders for the standard example systems.

Induction is deterministic, so the induced maps are memoised per parameter
set; tests and the CLI share one instance.
"""

from __future__ import annotations

from functools import lru_cache

from towerlab import maps


@lru_cache(maxsize=None)
def pm_induced(alpha: float = 0.5, branch_cutoff: int = 400,
               tail_horizon: int = 12000) -> maps.InducedMap:
    """Intermittent map induced on [1/2, 1]; polynomial return tails."""
    return maps.induce(maps.pomeau_manneville(alpha), (0.5, 1.0),
                       branch_cutoff=branch_cutoff, tail_horizon=tail_horizon)


@lru_cache(maxsize=None)
def doubling_full() -> maps.InducedMap:
    """Doubling map induced on the whole interval; r is identically 1."""
    return maps.induce(maps.doubling_map(), (0.0, 1.0), branch_cutoff=4,
                       tail_horizon=16)


@lru_cache(maxsize=None)
def doubling_induced(branch_cutoff: int = 40,
                     tail_horizon: int = 1200) -> maps.InducedMap:
    """Doubling map induced on [1/2, 1]; exponential return tails 2^-n."""
    return maps.induce(maps.doubling_map(), (0.5, 1.0),
                       branch_cutoff=branch_cutoff, tail_horizon=tail_horizon)
