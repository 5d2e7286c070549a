"""Feasible-direction fusion of the task gradient and the diversity gradient.

The update direction is the angular bisector of the two gradients. Its
length is the mean of the two projections onto that bisector, with the
diversity projection capped at the task projection.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import NonFiniteError

log = logging.getLogger(__name__)

OPPOSED_TOL = 1e-12


@dataclass
class FusionResult:
    d: np.ndarray | None
    proj_task: float
    proj_div: float
    clipped: bool
    g_final: np.ndarray
    cosine: float
    degenerate: str | None = None


def normalize(x):
    """Unit vector along ``x``; ``None`` for the zero vector."""
    x = np.asarray(x, dtype=np.float64)
    n = float(np.linalg.norm(x))
    if n == 0.0:
        return None
    return x / n


def bisector(g_t, g_d):
    u_t = normalize(g_t)
    u_d = normalize(g_d)
    if u_t is None or u_d is None:
        return None
    s = u_t + u_d
    if float(np.linalg.norm(s)) < OPPOSED_TOL:
        return None
    return normalize(s)


def cosine(a, b):
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.dot(a, b) / (na * nb))


def fuse(g_t, g_d, floor_at_zero=False):
    g_t = np.asarray(g_t, dtype=np.float64)
    g_d = np.asarray(g_d, dtype=np.float64)
    if not (np.all(np.isfinite(g_t)) and np.all(np.isfinite(g_d))):
        raise NonFiniteError("non-finite gradient passed to fuse", where="fuse")
    cos = cosine(g_t, g_d)
    nt = float(np.linalg.norm(g_t))
    nd = float(np.linalg.norm(g_d))
    if nt == 0.0:
        return FusionResult(None, 0.0, float("nan"), False, np.zeros_like(g_t), cos, "zero_task")
    if nd == 0.0:
        return FusionResult(normalize(g_t), nt, 0.0, False, g_t.copy(), cos, "zero_diversity")
    d = bisector(g_t, g_d)
    if d is None:
        log.info("task and diversity gradients are exactly opposed; using the task gradient")
        return FusionResult(None, nt, -nd, False, g_t.copy(), cos, "opposed")
    proj_t = float(g_t @ d)
    proj_d = float(g_d @ d)
    clipped = proj_d > proj_t
    magnitude = 0.5 * (proj_t + min(proj_d, proj_t))
    if floor_at_zero:
        magnitude = max(magnitude, 0.0)
    return FusionResult(d, proj_t, proj_d, clipped, magnitude * d, cos)
