"""Held-out evaluation: softmax and nearest-neighbour accuracy, mask error,
PCA projection of descriptors and image grids."""

from __future__ import annotations

import csv
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .generative import encode, mosaic, sample_manifold
from . import tensor as T
from .render import SamplePair

RECON_GRID = 8
MANIFOLD_GRID = 10
MANIFOLD_SPAN = 2.0
REPORT_FIELDS = (
    "run_id",
    "checkpoint",
    "dataset",
    "step",
    "num_classes",
    "n_test",
    "n_gallery",
    "softmax_accuracy",
    "nn_accuracy",
    "mask_mse",
    "confusion",
)


# ---------------------------------------------------------------------------
# nearest neighbour
# ---------------------------------------------------------------------------


def nn_classify(gallery: Sequence[tuple[Sequence[float], int]], query) -> int:
    """Label of the gallery vector closest to ``query`` in squared Euclidean
    distance; equally close vectors resolve to the lowest label."""
    if len(gallery) == 0:
        raise ValueError("nearest-neighbour gallery is empty")
    vecs = np.asarray([g[0] for g in gallery], dtype=np.float64)
    labels = np.asarray([g[1] for g in gallery], dtype=int)
    return int(nn_classify_many(vecs, labels, np.asarray(query, dtype=np.float64)[None])[0])


def nn_classify_many(gallery: np.ndarray, labels: np.ndarray, queries: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Vectorised :func:`nn_classify` over a batch of queries."""
    gallery = np.asarray(gallery, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    queries = np.asarray(queries, dtype=np.float64)
    if len(gallery) == 0:
        raise ValueError("nearest-neighbour gallery is empty")
    if gallery.ndim != 2 or queries.ndim != 2 or gallery.shape[1] != queries.shape[1]:
        raise ValueError(f"gallery {gallery.shape} and queries {queries.shape} disagree on descriptor length")
    if len(labels) != len(gallery):
        raise ValueError("one label per gallery vector required")
    out = np.empty(len(queries), dtype=int)
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        # explicit differences keep exact ties exact
        d = ((q[:, None, :] - gallery[None, :, :]) ** 2).sum(axis=2)
        best = d.min(axis=1, keepdims=True)
        masked = np.where(d == best, labels[None, :], np.iinfo(int).max)
        out[start : start + chunk] = masked.min(axis=1)
    return out


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (out_dims, D), rows are unit eigenvectors
    variances: np.ndarray  # descending eigenvalues of the sample covariance

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit(descriptors, out_dims: int) -> PCABasis:
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"descriptors must be (N, D), got {x.shape}")
    n, d = x.shape
    if not 1 <= out_dims <= d:
        raise ValueError(f"out_dims must lie in [1, {d}], got {out_dims}")
    if n < out_dims + 1:
        raise ValueError(f"PCA to {out_dims} dims needs at least {out_dims + 1} samples, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    if not np.any(xc):
        raise ValueError("degenerate input: all descriptors are equal")
    cov = xc.T @ xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:out_dims]
    comps = vecs[:, order].T.copy()
    for row in comps:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1.0
    return PCABasis(mean, comps, np.clip(vals[order], 0.0, None))


def pca_project(descriptors, out_dims: int) -> np.ndarray:
    """Mean-centred projection onto the leading ``out_dims`` covariance
    eigenvectors, strongest first."""
    return pca_fit(descriptors, out_dims).transform(descriptors)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    softmax_accuracy: float
    nn_accuracy: float
    confusion: np.ndarray  # rows true class, columns softmax prediction
    mask_mse: float
    n_test: int
    n_gallery: int
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=int)
        k = self.confusion.shape[0]
        if self.confusion.shape != (k, k):
            raise ValueError("confusion matrix must be square")
        if int(self.confusion.sum()) != self.n_test:
            raise ValueError("confusion matrix does not account for every test sample")
        for name in ("softmax_accuracy", "nn_accuracy"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} outside [0, 1]")

    @property
    def per_class_counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def summary(self) -> str:
        k = self.confusion.shape[0]
        lines = [
            f"test samples     {self.n_test} ({', '.join(str(c) for c in self.per_class_counts)} per class)",
            f"gallery samples  {self.n_gallery}",
            f"softmax accuracy {self.softmax_accuracy:.4f} (chance {1.0 / k:.4f})",
            f"nn accuracy      {self.nn_accuracy:.4f}",
            f"mask mse         {self.mask_mse:.6f}",
            "confusion (rows true, columns predicted):",
        ]
        width = max(3, len(str(self.confusion.max())))
        lines += ["  " + " ".join(f"{v:>{width}d}" for v in row) for row in self.confusion]
        return "\n".join(lines)

    def row(self, checkpoint: str = "", dataset: str = "", step: int | None = None) -> dict:
        return {
            "run_id": self.run_id,
            "checkpoint": checkpoint,
            "dataset": dataset,
            "step": "" if step is None else step,
            "num_classes": self.confusion.shape[0],
            "n_test": self.n_test,
            "n_gallery": self.n_gallery,
            "softmax_accuracy": repr(self.softmax_accuracy),
            "nn_accuracy": repr(self.nn_accuracy),
            "mask_mse": repr(self.mask_mse),
            "confusion": ";".join(" ".join(str(v) for v in r) for r in self.confusion),
        }


def confusion_matrix(true, pred, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=int)
    np.add.at(cm, (np.asarray(true, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def infer_batched(trainer, images: np.ndarray, batch: int = 64):
    ms, ds, ls = [], [], []
    for start in range(0, len(images), batch):
        m, d, lg = trainer.infer(images[start : start + batch])
        ms.append(m)
        ds.append(d)
        ls.append(lg)
    return np.concatenate(ms), np.concatenate(ds), np.concatenate(ls)


@dataclass
class Evaluation:
    """Report plus the arrays the figures are drawn from."""

    report: EvalReport
    descriptors: np.ndarray
    categories: np.ndarray
    masks_pred: np.ndarray


def evaluate(trainer, gallery: Sequence[SamplePair], test: Sequence[SamplePair]) -> Evaluation:
    if not test:
        raise ValueError("test set is empty")
    k = trainer.config.num_classes
    o = np.stack([p.o for p in test])
    m = np.stack([p.m for p in test])
    y = np.array([p.category for p in test])
    if y.max() >= k:
        raise ValueError(f"test set has category {y.max()} but the model has {k} classes")
    m_pred, desc, logits = infer_batched(trainer, o)
    pred = logits.argmax(axis=1)
    _, g_desc, _ = infer_batched(trainer, np.stack([p.o for p in gallery])) if gallery else (None, None, None)
    if g_desc is None:
        raise ValueError("nearest-neighbour gallery is empty")
    g_lab = np.array([p.category for p in gallery])
    nn_pred = nn_classify_many(g_desc, g_lab, desc)
    report = EvalReport(
        softmax_accuracy=float((pred == y).mean()),
        nn_accuracy=float((nn_pred == y).mean()),
        confusion=confusion_matrix(y, pred, k),
        mask_mse=float(((m_pred - m) ** 2).mean()),
        n_test=len(test),
        n_gallery=len(gallery),
    )
    return Evaluation(report, desc, y, m_pred)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def append_report(path, row: dict) -> None:
    """Append one row, writing the header only when the file is new."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)
        fh.flush()
        os.fsync(fh.fileno())


def write_proj2d(path, xy: np.ndarray, categories: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "category"])
        for (x, y), c in zip(xy, categories):
            w.writerow([repr(float(x)), repr(float(y)), int(c)])


def save_image(path, hwc: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(hwc) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def recon_grid(test: Sequence[SamplePair], m_pred: np.ndarray, grid: int = RECON_GRID) -> np.ndarray:
    """Even columns hold inputs, odd columns their reconstructions.

    Missing slots (small test sets) stay black.
    """
    half = grid // 2
    need = grid * half
    s = m_pred.shape[-1]
    tiles = np.zeros((grid * grid, 3, s, s))
    for idx in range(min(need, len(test))):
        r, c = divmod(idx, half)
        tiles[r * grid + 2 * c] = test[idx].o
        tiles[r * grid + 2 * c + 1] = m_pred[idx]
    return mosaic(tiles, grid)


def manifold_grid(trainer, test: Sequence[SamplePair], grid: int = MANIFOLD_GRID, span: float = MANIFOLD_SPAN):
    """Decode a plane through the mean posterior along its two most varying
    latent coordinates."""
    cfg = trainer.config.generative
    o = np.stack([p.o for p in test])
    with T.no_grad():
        mu = np.concatenate(
            [encode(trainer.gen_params, o[i : i + 64], cfg).mu.data for i in range(0, len(o), 64)]
        )
    dims = tuple(int(d) for d in np.argsort(mu.var(axis=0))[::-1][:2]) if cfg.latent >= 2 else (0, 0)
    return sample_manifold(trainer.gen_params, cfg, mu.mean(axis=0), span, grid, dims)
