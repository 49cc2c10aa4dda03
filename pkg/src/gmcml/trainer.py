"""Joint training of the reconstruction and classification sub-networks.

Training path: ``cls(concat(noise_cls(O), gen(enc(noise_rec(O)))))``; test
path drops both corruptions and decodes the posterior mean. One total loss
is back-propagated through both networks in a single reverse pass, so the
classifier's losses reach the generator through the mask channels.

Random streams are derived from ``(seed, step)`` and ``(seed, stage, epoch)``
rather than carried as mutable generator state, which makes a resumed run
replay exactly the batches, noise fields and latent draws of an
uninterrupted one.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .camera import CameraMode
from .generative import (
    GenerativeConfig,
    LatentGaussian,
    encode,
    generate,
    init_generative,
    loss_enc,
    loss_gen,
    sample_latent,
)
from .losses import (
    LossWeights,
    Stage,
    build_triplet_sets,
    loss_multi_triplet,
    loss_total,
    softmax_cross_entropy,
)
from .noise import NoiseState, coupling_check, corrupt, ratios, update_ratios
from .render import SamplePair, read_dataset
from .tensor import Tensor
from .zigzag import ClassifierConfig, classifier_forward, init_classifier

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gmcml-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = (
    "step",
    "stage",
    "loss_total",
    "loss_enc",
    "loss_gen",
    "loss_pair",
    "loss_tri",
    "loss_softmax",
    "var_ratio",
    "r_rec",
    "r_cls",
    "gen_grad_norm",
    "cls_grad_norm",
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    num_classes: int = 12
    resolution: int = 32
    batch_size: int = 32
    lr: float = 0.01
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    grad_clip: float = 50.0
    epochs_pretrain: int = 30
    epochs_finetune: int = 25
    w_pair: float = 1.0
    w_tri: float = 1.0
    w_softmax: float = 1.0
    w_encgen: float = 1e-3
    m_tri: float = 0.01
    include_pair: bool = True
    alpha: float = 0.25
    beta: float = 2.0
    m_noise: float = 1e-6
    adaptive_noise: bool = True
    fixed_var_ratio: float = 1.0
    latent: int = 16
    sigma: float = 0.1
    gen_channels: tuple[int, int, int] = (16, 32, 32)
    cls_stem: int = 16
    cls_widths: tuple[int, ...] = (32, 64, 64)
    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self):
        if self.optimizer not in ("sgd", "sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 2 * 3:
            raise ValueError("batch size must hold at least two categories of three samples")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ValueError("epoch counts must be non-negative")
        # validates the weights
        self.weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_pair, self.w_tri, self.w_softmax, self.w_encgen, self.m_tri)

    @property
    def generative(self) -> GenerativeConfig:
        return GenerativeConfig(self.resolution, self.latent, tuple(self.gen_channels), self.sigma)

    @property
    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig(self.num_classes, 6, self.cls_stem, tuple(self.cls_widths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_channels"] = list(self.gen_channels)
        d["cls_widths"] = list(self.cls_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        for key in ("gen_channels", "cls_widths"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StepMetrics:
    step: int
    stage: Stage
    loss_total: float
    loss_enc: float
    loss_gen: float
    loss_pair: float
    loss_tri: float
    loss_softmax: float | None
    var_ratio: float
    r_rec: float
    r_cls: float
    gen_grad_norm: float = 0.0
    cls_grad_norm: float = 0.0

    def row(self) -> list[str]:
        def f(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.step),
            self.stage.value,
            f(self.loss_total),
            f(self.loss_enc),
            f(self.loss_gen),
            f(self.loss_pair),
            f(self.loss_tri),
            f(self.loss_softmax),
            f(self.var_ratio),
            f(self.r_rec),
            f(self.r_cls),
            f(self.gen_grad_norm),
            f(self.cls_grad_norm),
        ]


@dataclass
class ForwardOutput:
    latent: LatentGaussian
    m_pred: Tensor
    descriptor: Tensor
    logits: Tensor


class SGD:
    """Plain or heavy-ball SGD over a name -> tensor mapping."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            p.data = p.data - self.lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.velocity = {k[len("velocity/"):]: v for k, v in arrays.items() if k.startswith("velocity/")}


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        out.update({f"m/{k}": a for k, a in self.m.items()})
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays.get("t", 0))
        self.m = {k[2:]: a for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: a for k, a in arrays.items() if k.startswith("v/")}


def make_optimizer(config: "TrainConfig"):
    if config.optimizer == "adam":
        return Adam(config.lr)
    return SGD(config.lr, config.momentum if config.optimizer == "sgd_momentum" else 0.0)


def stack_batch(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.o for p in pairs]), np.stack([p.m for p in pairs])


def _grad_norm(params: dict[str, Tensor]) -> float:
    return float(math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)))


class Trainer:
    """Owns both parameter sets, the optimiser and the noise state."""

    def __init__(self, config: TrainConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 0xC0FFEE])
        self.gen_params = init_generative(config.generative, rng)
        self.cls_params = init_classifier(config.classifier, rng)
        self.optimizer = make_optimizer(config)
        self.noise = NoiseState.initial(config.alpha, config.beta, config.m_noise)
        self.step = 0

    # -- parameters -------------------------------------------------------

    @property
    def params(self) -> dict[str, Tensor]:
        out = {f"generative/{k}": v for k, v in self.gen_params.items()}
        out.update({f"classifier/{k}": v for k, v in self.cls_params.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward paths ----------------------------------------------------

    def forward(self, o_rec: np.ndarray, o_cls: np.ndarray, eps: np.ndarray) -> ForwardOutput:
        cfg = self.config
        latent = encode(self.gen_params, Tensor(o_rec), cfg.generative)
        z = sample_latent(latent, Tensor(eps))
        m_pred = generate(self.gen_params, z, cfg.generative)
        axis = 0 if m_pred.ndim == 3 else 1
        x6 = T.concat([Tensor(o_cls), m_pred], axis=axis)
        desc, logits = classifier_forward(x6, self.cls_params, cfg.classifier)
        return ForwardOutput(latent, m_pred, desc, logits)

    def infer(self, o: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Uncorrupted forward pass decoding the posterior mean."""
        o = np.asarray(o, dtype=np.float64)
        s = self.config.resolution
        if o.shape[-3:] != (3, s, s) or o.ndim not in (3, 4):
            raise ValueError(f"infer expects (3, {s}, {s}) images, got {o.shape}")
        eps = np.zeros(o.shape[:-3] + (self.config.latent,))
        with T.no_grad():
            out = self.forward(o, o, eps)
        return out.m_pred.data, out.descriptor.data, out.logits.data

    def current_ratios(self) -> tuple[float, float]:
        if self.config.adaptive_noise:
            return self.noise.r_rec, self.noise.r_cls
        return ratios(self.config.fixed_var_ratio, self.config.alpha, self.config.beta)

    def step_rng(self, step: int | None = None) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 1, self.step if step is None else step])

    # -- training ---------------------------------------------------------

    def train_step(self, batch: Sequence[SamplePair], stage: Stage | str) -> StepMetrics:
        stage = Stage(stage)
        cfg = self.config
        rng = self.step_rng()
        o, m = stack_batch(batch)
        if o.shape[-1] != cfg.resolution:
            raise ValueError(f"batch resolution {o.shape[-1]} does not match model resolution {cfg.resolution}")
        cats = [p.category for p in batch]
        if max(cats) >= cfg.num_classes:
            raise ValueError(f"category {max(cats)} outside the model's {cfg.num_classes} classes")

        state = self.noise
        r_rec, r_cls = self.current_ratios()
        o_rec = corrupt(o, r_rec, rng)
        o_cls = corrupt(o, r_cls, rng)
        eps = rng.standard_normal((len(batch), cfg.latent))
        out = self.forward(o_rec, o_cls, eps)

        l_enc = loss_enc(out.latent)
        l_gen = loss_gen(out.m_pred, m, cfg.sigma)
        parts: dict[str, Tensor] = {"enc_gen": l_enc + l_gen}
        sets = build_triplet_sets(cats, [p.pose for p in batch], rng, [p.light for p in batch])
        if not sets:
            raise TrainingError(f"step {self.step}: batch admits no triplet set")
        n_sets = float(len(sets))
        tri = loss_multi_triplet(out.descriptor, sets, cfg.m_tri, include_pair=False) * (1.0 / n_sets)
        refs = np.array([s.ref for s in sets])
        poss = np.array([s.pos for s in sets])
        pair = T.tsum(T.square(out.descriptor[refs] - out.descriptor[poss])) * (1.0 / n_sets)
        if cfg.include_pair:
            parts["pair"] = pair
        parts["tri"] = tri
        l_soft = None
        if stage is Stage.FINETUNE:
            l_soft = softmax_cross_entropy(out.logits, cats)
            parts["softmax"] = l_soft
        total = loss_total(parts, cfg.weights, stage)

        values = [total.item(), l_enc.item(), l_gen.item(), pair.item(), tri.item()]
        if l_soft is not None:
            values.append(l_soft.item())
        if not all(math.isfinite(v) for v in values):
            raise TrainingError(f"non-finite loss at step {self.step} ({stage.value}): {values}")

        self.zero_grad()
        T.backward(total)
        gen_norm = _grad_norm(self.gen_params)
        cls_norm = _grad_norm(self.cls_params)
        norm = math.hypot(gen_norm, cls_norm)
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient at step {self.step} ({stage.value})")
        if cfg.grad_clip and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        self.optimizer.step(self.params)

        metrics = StepMetrics(
            step=self.step,
            stage=stage,
            loss_total=values[0],
            loss_enc=values[1],
            loss_gen=values[2],
            loss_pair=values[3],
            loss_tri=values[4],
            loss_softmax=None if l_soft is None else values[5],
            var_ratio=state.var_ratio,
            r_rec=r_rec,
            r_cls=r_cls,
            gen_grad_norm=gen_norm,
            cls_grad_norm=cls_norm,
        )
        self.noise = update_ratios(state, out.m_pred.data, m)
        self.step += 1
        return metrics

    # -- persistence ------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "noise": self.noise.to_dict(),
            "rng": {"seed": self.config.seed, "step": self.step},
        }
        arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
        for name, p in self.params.items():
            arrays[name] = p.data
        for name, v in self.optimizer.state_arrays().items():
            arrays[f"optimizer/{name}"] = v
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Trainer":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        with np.load(path, allow_pickle=False) as z:
            if "header" not in z.files:
                raise ValueError(f"{path} is not a checkpoint (no header)")
            header = json.loads(str(z["header"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
            if header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
            config = TrainConfig.from_dict(header["config"])
            if config.hash() != header.get("config_hash"):
                raise ValueError(f"{path}: config hash mismatch")
            trainer = cls(config)
            for name, p in trainer.params.items():
                if name not in z.files:
                    raise ValueError(f"{path}: missing parameter {name}")
                arr = z[name]
                if arr.shape != p.shape:
                    raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, expected {p.shape}")
                p.data = np.array(arr, dtype=np.float64)
            trainer.optimizer.load_state_arrays(
                {name[len("optimizer/"):]: np.array(z[name]) for name in z.files if name.startswith("optimizer/")}
            )
        trainer.noise = NoiseState.from_dict(header["noise"])
        trainer.step = int(header["step"])
        return trainer


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def balanced_batches(
    categories: Sequence[int], batch_size: int, num_classes: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Class-balanced batches: ``batch_size // classes`` shuffled samples per class."""
    cats = np.asarray(categories)
    present = [k for k in range(num_classes) if np.any(cats == k)]
    per = batch_size // max(len(present), 1)
    if per < 3:
        raise ValueError(f"batch size {batch_size} too small for {len(present)} classes (needs 3 per class)")
    pools = [rng.permutation(np.flatnonzero(cats == k)) for k in present]
    steps = min(len(p) // per for p in pools)
    return [np.concatenate([p[b * per : (b + 1) * per] for p in pools]) for b in range(steps)]


@dataclass
class Schedule:
    """Maps a global step onto (stage, epoch, batch) for the two-stage run."""

    config: TrainConfig
    stage_data: dict[Stage, list[SamplePair]]
    _plans: dict = field(default_factory=dict)

    def __post_init__(self):
        self.segments: list[tuple[Stage, int, int]] = []  # (stage, epochs, steps/epoch)
        epochs = {Stage.PRETRAIN: self.config.epochs_pretrain, Stage.FINETUNE: self.config.epochs_finetune}
        for stage in (Stage.PRETRAIN, Stage.FINETUNE):
            if epochs[stage] == 0:
                continue
            data = self.stage_data[stage]
            spe = len(self._epoch(stage, 0))
            if spe == 0:
                raise ValueError(f"{stage.value} stage has too few samples for one batch")
            self.segments.append((stage, epochs[stage], spe))

    @property
    def total_steps(self) -> int:
        return sum(e * s for _, e, s in self.segments)

    def stage_end(self, stage: Stage) -> int | None:
        acc = 0
        for st, e, s in self.segments:
            acc += e * s
            if st is stage:
                return acc
        return None

    def _epoch(self, stage: Stage, epoch: int) -> list[np.ndarray]:
        key = (stage, epoch)
        if key not in self._plans:
            self._plans.clear()
            rng = np.random.default_rng([self.config.seed, 2, 0 if stage is Stage.PRETRAIN else 1, epoch])
            cats = [p.category for p in self.stage_data[stage]]
            self._plans[key] = balanced_batches(cats, self.config.batch_size, self.config.num_classes, rng)
        return self._plans[key]

    def batch(self, step: int) -> tuple[Stage, list[SamplePair]]:
        offset = step
        for stage, epochs, spe in self.segments:
            if offset < epochs * spe:
                epoch, b = divmod(offset, spe)
                idx = self._epoch(stage, epoch)[b]
                data = self.stage_data[stage]
                return stage, [data[i] for i in idx]
            offset -= epochs * spe
        raise IndexError(f"step {step} beyond the schedule of {self.total_steps} steps")


def split_stages(pairs: Sequence[SamplePair], config: TrainConfig) -> dict[Stage, list[SamplePair]]:
    """Pretrain on centred-focal samples; fine-tune on all samples."""
    centered = [p for p in pairs if CameraMode(p.mode) is CameraMode.CENTERED]
    shifted = [p for p in pairs if CameraMode(p.mode) is CameraMode.SHIFTED]
    if config.epochs_pretrain and not centered:
        raise ValueError("dataset has no centered-mode samples required by the pretrain stage")
    if config.epochs_finetune and not shifted:
        raise ValueError("dataset has no shifted-mode samples required by the fine-tune stage")
    return {Stage.PRETRAIN: centered, Stage.FINETUNE: list(pairs)}


def resolve_split(dataset_dir, split: str) -> Path:
    d = Path(dataset_dir)
    return d / split if (d / split / "meta.jsonl").exists() else d


def check_compatible(config: TrainConfig, pairs: Sequence[SamplePair]) -> None:
    if not pairs:
        return
    res = pairs[0].resolution
    if res != config.resolution:
        raise ValueError(f"resolution mismatch: model {config.resolution}, dataset {res}")
    top = max(p.category for p in pairs) + 1
    if top > config.num_classes:
        raise ValueError(f"class count mismatch: model {config.num_classes}, dataset {top}")


class MetricsWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(METRIC_FIELDS)

    def write(self, m: StepMetrics) -> None:
        self._w.writerow(m.row())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in METRIC_FIELDS:
            if k == "stage":
                continue
            r[k] = (int(r[k]) if k == "step" else float(r[k])) if r[k] != "" else None
    return rows


def run_training(
    config: TrainConfig,
    dataset_dir,
    out_dir,
    resume=None,
    max_steps: int | None = None,
    pairs: Sequence[SamplePair] | None = None,
    callback=None,
) -> Trainer:
    """Run (or continue) the two-stage schedule, writing checkpoints and metrics.

    ``out_dir`` receives ``metrics.csv``, ``checkpoint.npz`` (latest),
    ``checkpoint_pretrain.npz`` at the stage boundary and periodic
    snapshots. ``max_steps`` stops early after that many global steps;
    ``callback(trainer, metrics)`` runs after every step and ends the run by
    returning ``True``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = read_dataset(resolve_split(dataset_dir, "train"))
    if not pairs:
        raise ValueError(f"no training samples found in {dataset_dir}")
    if resume is not None:
        trainer = Trainer.load(resume)
        if trainer.config.hash() != config.hash():
            log.warning("resuming with the checkpoint's configuration; command-line overrides ignored")
        config = trainer.config
    else:
        trainer = Trainer(config)
    check_compatible(config, pairs)
    schedule = Schedule(config, split_stages(pairs, config))
    end = schedule.total_steps if max_steps is None else min(schedule.total_steps, max_steps)
    pre_end = schedule.stage_end(Stage.PRETRAIN)
    started = time.perf_counter()
    with MetricsWriter(out / "metrics.csv", append=resume is not None) as writer:
        while trainer.step < end:
            stage, batch = schedule.batch(trainer.step)
            metrics = trainer.train_step(batch, stage)
            writer.write(metrics)
            stop = callback is not None and callback(trainer, metrics) is True
            if trainer.step % 50 == 0:
                log.info(
                    "step %d/%d %s total=%.4g gen=%.4g tri=%.4g r_rec=%.3f r_cls=%.3f (%.0fs)",
                    trainer.step, end, stage.value, metrics.loss_total, metrics.loss_gen,
                    metrics.loss_tri, metrics.r_rec, metrics.r_cls, time.perf_counter() - started,
                )
            if pre_end is not None and trainer.step == pre_end:
                trainer.save(out / "checkpoint_pretrain.npz")
            if config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                trainer.save(out / "checkpoint.npz")
            if stop:
                break
    trainer.save(out / "checkpoint.npz")
    return trainer
