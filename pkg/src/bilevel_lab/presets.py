"""Named constant sets used by the verification campaigns and benchmarks.

The "mild" preset keeps the geometric decay factor of the strongly-convex
hard instance below ~0.9 so feasible dimensions stay at desk scale; the
benchmark presets pin an inner condition number for rate and scaling studies.
"""

from __future__ import annotations

from .oracles import SmoothnessConstants


def mild_scsc_constants() -> SmoothnessConstants:
    """Desk-scale preset for the strongly-convex verification campaign."""
    return SmoothnessConstants(
        mu_x=0.5, mu_y=0.5, L_x=1.0, L_y=1.0, L_xy=1.0, Ltil_xy=1.0, Ltil_y=1.0
    )


def benchmark_scsc_constants(kappa_y: float = 4.0) -> SmoothnessConstants:
    """Strongly-convex benchmark family with a chosen inner condition number."""
    mu_y = 0.5
    return SmoothnessConstants(
        mu_x=0.5,
        mu_y=mu_y,
        L_x=1.0,
        L_y=1.0,
        L_xy=1.0,
        Ltil_xy=1.0,
        Ltil_y=kappa_y * mu_y,
    )


def mild_csc_constants() -> SmoothnessConstants:
    """Convex-outer preset (mu_x = 0) for the gradient-floor campaign."""
    return SmoothnessConstants(
        mu_x=0.0, mu_y=0.5, L_x=1.0, L_y=1.0, L_xy=1.0, Ltil_xy=1.0, Ltil_y=1.0
    )
