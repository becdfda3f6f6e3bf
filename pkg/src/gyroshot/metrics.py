"""Distances between patch sets on the ball.

A feature map is a set of HW patch embeddings, one point each. Classical
point-to-set reductions (min / max / Hausdorff) operate on plain arrays and
are evaluation-only. The learned set-to-set distance and the adaptive
combination run through the generic autodiff ops, so the same functions serve
untaped inference and taped training.

Shape conventions: patches are (..., HW, C); `pairwise_matrix` broadcasts
leading axes of the two sides against each other, so a (NQ, 1, 1, HW, C)
query block against a (1, N, K, HW, C) support block yields the full
(NQ, N, K, HW, HW) distance tensor in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import val
from .errors import DomainError, ShapeError
from .geometry import BallConfig, geodesic_distance, in_ball


@dataclass
class FeatureMap:
    """HW patch embeddings with their spatial grid (H, W, C)."""

    patches: object
    dims: tuple[int, int, int]

    def __post_init__(self):
        h, w, c = self.dims
        if h < 1 or w < 1 or c < 1:
            raise ShapeError(f"feature map dims must be positive, got {self.dims}")
        shape = np.shape(val(self.patches))
        if len(shape) < 2 or shape[-2] != h * w or shape[-1] != c:
            raise ShapeError(
                f"patches shape {shape} does not match dims {self.dims} (expect (..., {h * w}, {c}))"
            )

    @property
    def hw(self) -> int:
        return self.dims[0] * self.dims[1]


def _patches(m):
    return m.patches if isinstance(m, FeatureMap) else m


def _as_set(S):
    """Coerce a set argument (FeatureMap, array, or list of points) to (..., P, C)."""
    S = _patches(S)
    if isinstance(S, (list, tuple)):
        if len(S) == 0:
            raise ShapeError("empty point set")
        S = np.stack([np.asarray(val(p), dtype=np.float64) for p in S])
    shape = np.shape(val(S))
    if len(shape) < 2 or shape[-2] == 0:
        raise ShapeError(f"point set must be (..., P>=1, C), got {shape}")
    return S


def pairwise_matrix(q, s, cfg: BallConfig, dist_fn=None):
    """All geodesic distances between the patches of `q` and of `s`.

    Returns (..., HWq, HWs); entry [h, w] is the distance from query patch h
    to support patch w. `dist_fn` overrides the metric (flat-space switch).
    """
    qp, sp = _as_set(q), _as_set(s)
    qs, ss = np.shape(val(qp)), np.shape(val(sp))
    if qs[-1] != ss[-1]:
        raise ShapeError(f"patch widths differ: {qs[-1]} vs {ss[-1]}")
    q_e = ad.reshape(qp, qs[:-1] + (1, qs[-1]))
    s_e = ad.reshape(sp, ss[:-2] + (1,) + ss[-2:])
    if dist_fn is None:
        return geodesic_distance(q_e, s_e, cfg)
    return dist_fn(q_e, s_e)


def p2s_min(p, S, cfg: BallConfig, dist_fn=None) -> float:
    """inf over the set of the distance from point `p`. Evaluation-only."""
    d = _point_to_set(p, S, cfg, dist_fn)
    return float(d.min())


def p2s_max(p, S, cfg: BallConfig, dist_fn=None) -> float:
    """sup over the set of the distance from point `p`. Evaluation-only."""
    d = _point_to_set(p, S, cfg, dist_fn)
    return float(d.max())


def _point_to_set(p, S, cfg, dist_fn):
    pv = np.asarray(val(p), dtype=np.float64)
    if pv.ndim != 1:
        raise ShapeError(f"point must be 1-D, got shape {pv.shape}")
    Sv = np.asarray(val(_as_set(S)), dtype=np.float64)
    if Sv.ndim != 2:
        raise ShapeError(f"set must be (P, C), got shape {Sv.shape}")
    if dist_fn is None:
        return geodesic_distance(pv[None, :], Sv, cfg)
    return dist_fn(pv[None, :], Sv)


def hausdorff_one_sided(A, B, cfg: BallConfig, dist_fn=None) -> float:
    """max over a in A of min over b in B of d(a, b). Not symmetric."""
    Av = np.asarray(val(_as_set(A)), dtype=np.float64)
    Bv = np.asarray(val(_as_set(B)), dtype=np.float64)
    D = pairwise_matrix(Av, Bv, cfg, dist_fn)
    return float(D.min(axis=-1).max())


def hausdorff_bidirectional(A, B, cfg: BallConfig, dist_fn=None) -> float:
    """max of the two one-sided Hausdorff distances; symmetric."""
    return max(
        hausdorff_one_sided(A, B, cfg, dist_fn), hausdorff_one_sided(B, A, cfg, dist_fn)
    )


def s2s_flat_mean(D):
    """Unlearned set-to-set distance: plain mean of the matrix entries."""
    return ad.mean(D, axis=(-2, -1))


def s2s_learned(D, net, train: bool = False, rng=None, params=None):
    """Learned set-to-set distance: the network reads the flattened matrix.

    D is (..., HWq, HWs); rows are flattened row-major to HWq*HWs, which must
    match the network input width. Returns shape (...,).
    """
    shape = np.shape(val(D))
    if len(shape) < 2:
        raise ShapeError(f"distance matrix must be (..., HWq, HWs), got {shape}")
    width = shape[-2] * shape[-1]
    if width != net.in_width:
        raise ShapeError(
            f"distance matrix flattens to {width}, network expects {net.in_width}"
        )
    flat = ad.reshape(D, (-1, width))
    out = net(flat, train=train, rng=rng, params=params)
    return ad.reshape(out, shape[:-2])


def adaptive_combine(s2s_vals, weights):
    """Weighted average sum_j w_j * d_j / sum_j w_j over the last axis."""
    wv = np.asarray(val(weights), dtype=np.float64)
    if np.any(wv < 0.0):
        raise DomainError("adaptive weights must be nonnegative")
    if np.any(np.sum(wv, axis=-1) <= 0.0):
        raise DomainError("adaptive weights must not all vanish")
    num = ad.sum(weights * s2s_vals, axis=-1)
    den = ad.sum(weights, axis=-1)
    return num / den


def adaptive_p2s(q, class_maps, weights, net, cfg: BallConfig, *, dist_fn=None,
                 train: bool = False, rng=None, params=None, return_parts: bool = False):
    """Adaptive distance from query map `q` to a class's K support maps.

    Computes the K per-sample set-to-set distances (through `net`, or the
    plain matrix mean when `net` is None) and combines them with the given
    nonnegative weights. The result always lies between the smallest and
    largest per-sample distance.

    Batched form: q (..., 1, HW, C) against class_maps (..., K, HW, C) with
    weights (..., K) returns (...,). With `return_parts` the per-sample
    distances come back too.
    """
    D = pairwise_matrix(q, class_maps, cfg, dist_fn)
    if net is not None:
        svals = s2s_learned(D, net, train=train, rng=rng, params=params)
    else:
        svals = s2s_flat_mean(D)
    out = adaptive_combine(svals, weights)
    return (out, svals) if return_parts else out


def check_maps_in_ball(maps, cfg: BallConfig) -> None:
    """Raise unless every patch lies strictly inside the ball."""
    if not in_ball(_patches(maps), cfg):
        raise DomainError("feature map patches must lie strictly inside the ball")
