"""Metric-learning losses driven by pose and category labels.

The triplet term is log-damped: ``ln(max(1, 2 - D_ik / (D_ij + m)))`` with
squared Euclidean distances, so it lies in ``[0, ln 2]`` and its gradient is
bounded even when the three descriptors nearly coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .camera import pose_distance_matrix
from .tensor import Tensor

LN2 = float(np.log(2.0))


class Stage(str, Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class TripletSet:
    ref: int
    pos: int
    negs: tuple[int, int, int]

    def triples(self) -> list[tuple[int, int, int]]:
        return [(self.ref, self.pos, k) for k in self.negs]


@dataclass(frozen=True)
class LossWeights:
    w_pair: float = 1.0
    w_tri: float = 1.0
    w_softmax: float = 1.0
    w_encgen: float = 1.0
    m_tri: float = 0.01

    def __post_init__(self):
        ws = (self.w_pair, self.w_tri, self.w_softmax, self.w_encgen)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")
        if self.m_tri <= 0:
            raise ValueError("triplet margin must be positive")


# ---------------------------------------------------------------------------
# triplet construction
# ---------------------------------------------------------------------------


def build_triplet_sets(
    categories: Sequence[int],
    poses: Sequence[Sequence[float]],
    rng: np.random.Generator,
    lights: Sequence[float] | None = None,
) -> list[TripletSet]:
    """One five-sample set per eligible reference in the batch.

    The positive is the same-category sample closest in pose; among equally
    close candidates a different lighting wins, then the lowest index. The
    first negative is a same-category sample strictly farther in pose than
    the positive, the other two come from other categories (distinct
    categories when the batch has them). References lacking such candidates
    are skipped.
    """
    cats = np.asarray(categories, dtype=int)
    n = len(cats)
    if len(poses) != n or (lights is not None and len(lights) != n):
        raise ValueError("categories, poses and lights must have equal length")
    if len(np.unique(cats)) < 2:
        raise ValueError("batch too homogeneous: triplets need at least two categories")
    dist = pose_distance_matrix(np.asarray(poses, dtype=np.float64))
    light = None if lights is None else np.asarray(lights, dtype=np.float64)

    sets = []
    for i in range(n):
        same = np.flatnonzero((cats == cats[i]) & (np.arange(n) != i))
        other = np.flatnonzero(cats != cats[i])
        if len(same) < 2 or len(other) < 2:
            continue
        d = dist[i, same]
        best = d.min()
        ties = same[d == best]
        if light is not None:
            relit = ties[light[ties] != light[i]]
            if len(relit):
                ties = relit
        pos = int(ties.min())
        farther = same[dist[i, same] > dist[i, pos]]
        if len(farther) == 0:
            continue
        neg0 = int(farther[rng.integers(len(farther))])
        first = int(other[rng.integers(len(other))])
        rest = other[(other != first) & (cats[other] != cats[first])]
        if len(rest) == 0:
            rest = other[other != first]
        second = int(rest[rng.integers(len(rest))])
        sets.append(TripletSet(i, pos, (neg0, first, second)))
    return sets


# ---------------------------------------------------------------------------
# losses on plain vectors
# ---------------------------------------------------------------------------


def _vec(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)


def _same_len(*vs: np.ndarray) -> None:
    if len({v.shape for v in vs}) != 1:
        raise ValueError(f"descriptor length mismatch: {[v.shape for v in vs]}")


def loss_pair(fi, fj) -> float:
    a, b = _vec(fi), _vec(fj)
    _same_len(a, b)
    d = a - b
    return float(d @ d)


def loss_tri(fi, fj, fk, m_tri: float) -> float:
    a, b, c = _vec(fi), _vec(fj), _vec(fk)
    _same_len(a, b, c)
    if m_tri <= 0:
        raise ValueError("triplet margin must be positive")
    d_ij = float((a - b) @ (a - b))
    d_ik = float((a - c) @ (a - c))
    return float(np.log(max(1.0, 2.0 - d_ik / (d_ij + m_tri))))


def grad_tri(fi, fj, fk, m_tri: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain-rule gradients of :func:`loss_tri` with respect to each descriptor.

    With ``g = 2 - D_ik / (D_ij + m)`` and ``L = ln g`` on the active region
    ``g > 1``; all three gradients are zero where ``g <= 1``.
    """
    a, b, c = _vec(fi), _vec(fj), _vec(fk)
    _same_len(a, b, c)
    if m_tri <= 0:
        raise ValueError("triplet margin must be positive")
    dij_v, dik_v = a - b, a - c
    den = float(dij_v @ dij_v) + m_tri
    d_ik = float(dik_v @ dik_v)
    g = 2.0 - d_ik / den
    if g <= 1.0:
        z = np.zeros_like(a)
        return z, z.copy(), z.copy()
    dfi = 2.0 * (d_ik * dij_v - den * dik_v) / (g * den * den)
    dfj = -2.0 * d_ik * dij_v / (g * den * den)
    dfk = 2.0 * dik_v / (g * den)
    return dfi, dfj, dfk


def _triplet_terms(desc: np.ndarray, i: np.ndarray, j: np.ndarray, k: np.ndarray, m_tri: float):
    dij_v = desc[i] - desc[j]
    dik_v = desc[i] - desc[k]
    den = (dij_v * dij_v).sum(axis=1) + m_tri
    d_ik = (dik_v * dik_v).sum(axis=1)
    g = 2.0 - d_ik / den
    return dij_v, dik_v, den, d_ik, g


def loss_multi_triplet(descriptors, sets: Sequence[TripletSet], m_tri: float, include_pair: bool) -> Tensor:
    """Sum over sets of the optional pair term plus three triplet terms.

    ``descriptors`` is an (N, D) tensor; the backward pass uses the analytic
    triplet gradients rather than recording the arithmetic.
    """
    desc_t = T._as_tensor(descriptors)
    if desc_t.ndim != 2:
        raise ValueError(f"descriptors must be (N, D), got {desc_t.shape}")
    if m_tri <= 0:
        raise ValueError("triplet margin must be positive")
    n = desc_t.shape[0]
    for s in sets:
        for idx in (s.ref, s.pos, *s.negs):
            if not 0 <= idx < n:
                raise IndexError(f"triplet index {idx} out of range for {n} descriptors")
    if not sets:
        return Tensor.from_op(np.array(0.0), (desc_t,), lambda g: (np.zeros_like(desc_t.data),))
    desc = desc_t.data
    trip = np.array([t for s in sets for t in s.triples()], dtype=int)
    i, j, k = trip[:, 0], trip[:, 1], trip[:, 2]
    dij_v, dik_v, den, d_ik, g = _triplet_terms(desc, i, j, k, m_tri)
    active = g > 1.0
    total = float(np.log(np.where(active, g, 1.0)).sum())
    pr = np.array([s.ref for s in sets]), np.array([s.pos for s in sets])
    if include_pair:
        pd = desc[pr[0]] - desc[pr[1]]
        total += float((pd * pd).sum())

    def fn(grad_out):
        scale = float(grad_out)
        gd = np.zeros_like(desc)
        if active.any():
            a = active
            ga = g[a][:, None]
            dn = den[a][:, None]
            dik = d_ik[a][:, None]
            dfi = 2.0 * (dik * dij_v[a] - dn * dik_v[a]) / (ga * dn * dn)
            dfj = -2.0 * dik * dij_v[a] / (ga * dn * dn)
            dfk = 2.0 * dik_v[a] / (ga * dn)
            np.add.at(gd, i[a], dfi)
            np.add.at(gd, j[a], dfj)
            np.add.at(gd, k[a], dfk)
        if include_pair:
            np.add.at(gd, pr[0], 2.0 * pd)
            np.add.at(gd, pr[1], -2.0 * pd)
        return (gd * scale,)

    return Tensor.from_op(np.array(total), (desc_t,), fn)


def loss_softmax(logits, label: int) -> float:
    z = _vec(logits)
    if not 0 <= label < len(z):
        raise ValueError(f"label {label} outside [0, {len(z)})")
    top = z.max()
    return float(top + np.log(np.exp(z - top).sum()) - z[label])


def softmax_cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy over a batch of (N, K) logits."""
    logits = T._as_tensor(logits)
    y = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got {y.shape}")
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - log_norm
    loss = -logp[np.arange(n), y].mean()
    probs = np.exp(logp)

    def fn(g):
        d = probs.copy()
        d[np.arange(n), y] -= 1.0
        return (d * (float(g) / n),)

    return Tensor.from_op(np.array(loss), (logits,), fn)


def loss_total(parts: Mapping[str, object], weights: LossWeights, stage: Stage | str):
    """Weighted ``enc_gen + pair + tri`` plus ``softmax`` during fine-tuning.

    Missing parts count as zero; in the pretrain stage the softmax part and
    its weight are never touched.
    """
    stage = Stage(stage)
    total = 0.0
    for key, w in (("enc_gen", weights.w_encgen), ("pair", weights.w_pair), ("tri", weights.w_tri)):
        if key in parts and w != 0:
            total = total + w * parts[key]
    if stage is Stage.FINETUNE and "softmax" in parts and weights.w_softmax != 0:
        total = total + weights.w_softmax * parts["softmax"]
    return total
