"""Poincare-ball gyrovector operations and Klein-model averaging.

Conventions
-----------
The ball of curvature magnitude c > 0 is {x : sqrt(c) * ||x|| < 1}, radius
1/sqrt(c). Coordinates live on the last axis; every function broadcasts over
leading axes and accepts plain float64 arrays or autodiff Vars (the same code
records onto the tape when any operand is a Var).

Core formulas:

    lambda_x   = 2 / (1 - c ||x||^2)                        (conformal factor)
    x (+) y    = ((1 + 2c<x,y> + c||y||^2) x + (1 - c||x||^2) y)
                 / (1 + 2c<x,y> + c^2 ||x||^2 ||y||^2)      (Mobius addition)
    d_c(x, y)  = (2/sqrt(c)) arctanh(sqrt(c) ||(-x) (+) y||)
    x_K        = 2 x_D / (1 + c ||x_D||^2)                  (ball -> Klein)
    x_D        = x_K / (1 + sqrt(1 - c ||x_K||^2))          (Klein -> ball)
    midpoint   = sum_i gamma_i x_i / sum_i gamma_i  in Klein coordinates,
                 gamma_i = 1 / sqrt(1 - c ||x_i||^2)        (Einstein midpoint)
    log_x(y)   = (2 / (sqrt(c) lambda_x)) arctanh(sqrt(c) ||m||) m / ||m||,
                 m = (-x) (+) y
    exp_x(v)   = x (+) (tanh(sqrt(c) lambda_x ||v|| / 2) v / (sqrt(c) ||v||))

As c -> 0 the distance tends to 2||x - y|| and Mobius addition to x + y;
`flat_distance` implements that limit for the flat-space switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .errors import ConfigError, DomainError, ShapeError

_TINY = 1e-15


@dataclass(frozen=True)
class BallConfig:
    """Curvature magnitude and the clip margin that keeps points strictly inside."""

    c: float
    eps: float = 1e-5

    def __post_init__(self):
        if not (self.c > 0.0) or not math.isfinite(self.c):
            raise ConfigError(f"curvature magnitude must be positive and finite, got {self.c}")
        if not (0.0 < self.eps < 1.0):
            raise ConfigError(f"eps must lie in (0, 1), got {self.eps}")

    @property
    def sqrt_c(self) -> float:
        return math.sqrt(self.c)

    @property
    def radius(self) -> float:
        return 1.0 / math.sqrt(self.c)

    @property
    def max_norm(self) -> float:
        """Clip bound mu = (1 - eps) / sqrt(c)."""
        return (1.0 - self.eps) / math.sqrt(self.c)


@dataclass
class TangentVec:
    """A tangent vector `vec` attached to base point `base`."""

    base: object
    vec: object


def _check_same_width(x, y, op: str) -> None:
    xs, ys = np.shape(val(x)), np.shape(val(y))
    if xs and ys and xs[-1] != ys[-1]:
        raise ShapeError(f"{op}: coordinate widths differ ({xs[-1]} vs {ys[-1]})")


def _sq_norm(x, keepdims: bool = True):
    return ad.sum(x * x, axis=-1, keepdims=keepdims)


def in_ball(x, cfg: BallConfig, slack: float = 0.0) -> bool:
    """True when every point satisfies sqrt(c) ||x|| < 1 (+ slack on the norm)."""
    norms = np.sqrt(np.sum(np.asarray(val(x), dtype=np.float64) ** 2, axis=-1))
    return bool(np.all(cfg.sqrt_c * norms < 1.0 + slack))


def conformal_factor(x, cfg: BallConfig, keepdims: bool = False):
    """lambda_x = 2 / (1 - c ||x||^2). Grows without bound toward the boundary."""
    sq = _sq_norm(x, keepdims=keepdims)
    denom_val = 1.0 - cfg.c * val(sq)
    if np.any(denom_val <= 0.0):
        raise DomainError("conformal_factor: point on or outside the ball")
    return 2.0 / (1.0 - cfg.c * sq)


def mobius_add(x, y, cfg: BallConfig):
    """Mobius addition x (+) y. Not commutative; (-x) (+) x = 0."""
    _check_same_width(x, y, "mobius_add")
    c = cfg.c
    x2 = _sq_norm(x)
    y2 = _sq_norm(y)
    xy = ad.sum(x * y, axis=-1, keepdims=True)
    denom = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    if np.any(np.abs(val(denom)) < cfg.eps ** 2):
        raise DomainError("mobius_add: denominator vanished (operands too close to the boundary)")
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    return num / denom


def geodesic_distance(x, y, cfg: BallConfig):
    """d_c(x, y) = (2/sqrt(c)) arctanh(sqrt(c) ||(-x) (+) y||).

    Symmetric, zero iff x == y. Raises DomainError when the arctanh argument
    reaches 1 (operands outside the open ball).
    """
    m = mobius_add(neg_point(x), y, cfg)
    arg = cfg.sqrt_c * ad.norm(m)
    return (2.0 / cfg.sqrt_c) * ad.arctanh(arg)


def flat_distance(x, y):
    """Euclidean limit of the geodesic distance: 2 ||x - y||."""
    _check_same_width(x, y, "flat_distance")
    return 2.0 * ad.norm(x - y)


def neg_point(x):
    """Additive inverse in the gyrogroup (plain negation)."""
    return -x if isinstance(x, ad.Var) else np.negative(x)


def poincare_to_klein(x, cfg: BallConfig):
    """x_K = 2 x_D / (1 + c ||x_D||^2)."""
    return (2.0 * x) / (1.0 + cfg.c * _sq_norm(x))


def klein_to_poincare(k, cfg: BallConfig):
    """x_D = x_K / (1 + sqrt(1 - c ||x_K||^2))."""
    inside = 1.0 - cfg.c * _sq_norm(k)
    if np.any(val(inside) < 0.0):
        raise DomainError("klein_to_poincare: point outside the Klein disk")
    return k / (1.0 + ad.sqrt(inside))


def einstein_midpoint(points, cfg: BallConfig, axis: int = -2):
    """Gamma-weighted average of ball points, computed in Klein coordinates.

    `points` stacks the set along `axis` (a list of vectors is stacked along
    a new axis -2). In the plain-array path the weighted summands are sorted
    per coordinate before reduction, so any permutation of the inputs yields
    a bit-identical result; the taped path keeps evaluation order.
    """
    if isinstance(points, (list, tuple)):
        if len(points) == 0:
            raise ShapeError("einstein_midpoint: empty point set")
        points = np.stack([np.asarray(val(p), dtype=np.float64) for p in points], axis=-2) \
            if not any(isinstance(p, ad.Var) for p in points) else _stack_vars(points)
    if np.shape(val(points))[axis] == 0:
        raise ShapeError("einstein_midpoint: empty point set")
    k = poincare_to_klein(points, cfg)
    gamma = 1.0 / ad.sqrt(1.0 - cfg.c * _sq_norm(k))
    weighted = gamma * k
    if isinstance(points, ad.Var):
        num = ad.sum(weighted, axis=axis)
        den = ad.sum(gamma, axis=axis)
    else:
        num = np.sort(weighted, axis=axis).sum(axis=axis)
        den = np.sort(gamma, axis=axis).sum(axis=axis)
    return klein_to_poincare(num / den, cfg)


def _stack_vars(points):
    expanded = []
    for p in points:
        shp = np.shape(val(p))
        target = shp[:-1] + (1,) + shp[-1:]
        expanded.append(ad.reshape(p, target))
    return ad.concat(expanded, axis=-2)


def log_map(x, y, cfg: BallConfig) -> TangentVec:
    """Tangent vector at x pointing to y; zero when y == x.

    Satisfies lambda_x * ||log_x(y)|| = d_c(x, y) and exp_x(log_x(y)) = y.
    """
    m = mobius_add(neg_point(x), y, cfg)
    n = ad.norm(m, keepdims=True)
    nz = val(n) > _TINY
    n_safe = ad.where(nz, n, np.ones_like(val(n)))
    lam = conformal_factor(x, cfg, keepdims=True)
    coef = (2.0 / (cfg.sqrt_c * lam)) * ad.arctanh(cfg.sqrt_c * n) / n_safe
    return TangentVec(base=x, vec=coef * m)


def exp_map(x, v, cfg: BallConfig):
    """Point reached from x along tangent vector v; inverse of log_map.

    `v` may be a TangentVec (its base is trusted to be x) or a raw array.
    """
    if isinstance(v, TangentVec):
        v = v.vec
    _check_same_width(x, v, "exp_map")
    n = ad.norm(v, keepdims=True)
    nz = val(n) > _TINY
    n_safe = ad.where(nz, n, np.ones_like(val(n)))
    lam = conformal_factor(x, cfg, keepdims=True)
    second = ad.tanh(cfg.sqrt_c * lam * n / 2.0) * v / (cfg.sqrt_c * n_safe)
    return mobius_add(x, second, cfg)


def clip_to_ball(s, cfg: BallConfig):
    """Radial clip onto the closed ball of radius mu = (1 - eps)/sqrt(c).

    Interior points pass through untouched (identity Jacobian); clipped points
    are rescaled to norm mu, whose true Jacobian (scaled identity minus the
    radial rank-one part) falls out of the composite ops.
    """
    mu = cfg.max_norm
    n = ad.norm(s, keepdims=True)
    over = val(n) > mu
    if not np.any(over):
        return s if isinstance(s, ad.Var) else np.asarray(s, dtype=np.float64)
    n_safe = ad.where(over, n, np.ones_like(val(n)))
    factor = ad.where(over, mu / n_safe, np.ones_like(val(n)))
    return s * factor
