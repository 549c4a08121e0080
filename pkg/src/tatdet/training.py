"""ADADELTA with L2 weight decay, the training loop and checkpointing."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import serialize
from .losses import CSV_HEADER, LabelBatch, LossReport, LossWeights, total_loss
from .network import Model
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class MissingGradient(RuntimeError):
    pass


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    weight_decay: float = 1e-5
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"meta.step": np.array([self.step], dtype=np.float32)}
        for k in self.sq_grad:
            out[f"sq_grad.{k}"] = self.sq_grad[k]
            out[f"sq_delta.{k}"] = self.sq_delta[k]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], dtype=None) -> None:
        self.step = int(arrays["meta.step"][0])
        self.sq_grad.clear()
        self.sq_delta.clear()
        for key, arr in arrays.items():
            if key.startswith("sq_grad."):
                self.sq_grad[key[len("sq_grad."):]] = np.array(arr, dtype=dtype or arr.dtype)
            elif key.startswith("sq_delta."):
                self.sq_delta[key[len("sq_delta."):]] = np.array(arr, dtype=dtype or arr.dtype)


def adadelta_step(params: dict[str, Tensor], state: AdadeltaState) -> None:
    """One in-place ADADELTA update of every parameter from its ``.grad``."""
    rho, eps, lr, wd = state.rho, state.eps, state.lr, state.weight_decay
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradient(f"parameter {name} has no gradient; is it wired into the loss?")
        g = p.grad + wd * p.data if wd else p.grad
        if name not in state.sq_grad:
            state.sq_grad[name] = np.zeros_like(p.data)
            state.sq_delta[name] = np.zeros_like(p.data)
        eg, ed = state.sq_grad[name], state.sq_delta[name]
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        p.data += lr * delta
    state.step += 1


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 600
    seed: int = 0
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    rho: float = 0.95
    lr: float = 1.0
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class TrainResult:
    history: list[tuple[int, float, float, float, float]]
    checkpoint: Path | None


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches for one epoch; a pure function of (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def checkpoint_paths(ckpt_dir: Path, step: int) -> tuple[Path, Path]:
    return ckpt_dir / f"step-{step}.tatw", ckpt_dir / f"state-{step}.bin"


def save_checkpoint(ckpt_dir: str | Path, model: Model, state: AdadeltaState) -> Path:
    ckpt_dir = Path(ckpt_dir)
    wpath, spath = checkpoint_paths(ckpt_dir, state.step)
    serialize.save(wpath, model.state_arrays())
    serialize.save(spath, state.arrays())
    return wpath


def load_checkpoint(weights_path: str | Path, model: Model, state: AdadeltaState | None = None) -> None:
    weights_path = Path(weights_path)
    model.load_state_arrays(serialize.load(weights_path))
    if state is not None:
        m = re.fullmatch(r"step-(\d+)\.tatw", weights_path.name)
        if not m:
            raise serialize.CheckpointError(f"cannot infer step from {weights_path.name}")
        spath = weights_path.with_name(f"state-{m.group(1)}.bin")
        dtype = next(iter(model.params.values())).dtype
        state.load_arrays(serialize.load(spath), dtype=dtype)


def latest_checkpoint(ckpt_dir: str | Path) -> Path | None:
    best = None
    for p in Path(ckpt_dir).glob("step-*.tatw"):
        m = re.fullmatch(r"step-(\d+)\.tatw", p.name)
        if m and (best is None or int(m.group(1)) > best[0]):
            best = (int(m.group(1)), p)
    return best[1] if best else None


BatchFn = Callable[[np.ndarray, int], tuple[np.ndarray, LabelBatch]]


def train(
    model: Model,
    images: np.ndarray,
    labels: LabelBatch,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    state: AdadeltaState | None = None,
    max_steps: int | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Optimise ``model`` on a fixed in-memory dataset.

    ``images`` is N,3,H,W in [-1, 1]; ``labels`` the matching stacked label maps.
    A provided ``state`` (e.g. from ``load_checkpoint``) resumes mid-run: the
    batch sequence depends only on (seed, epoch), so resuming replays the
    uninterrupted trajectory.
    """
    n = images.shape[0]
    if n != len(labels):
        raise ValueError(f"{n} images but {len(labels)} label maps")
    return train_stream(model, n, lambda idx, epoch: (images[idx], labels.subset(idx)), config,
                        out_dir, state, max_steps, on_step)


def train_stream(
    model: Model,
    n: int,
    batch_fn: BatchFn,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    state: AdadeltaState | None = None,
    max_steps: int | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Like ``train`` but batches come from ``batch_fn(indices, epoch)``.

    ``batch_fn`` must be a pure function of its arguments (e.g. seeded
    augmentation) for runs and resumes to be reproducible.
    """
    state = state or AdadeltaState(rho=config.rho, lr=config.lr, weight_decay=config.weight_decay)
    if n < 1:
        raise ValueError("training set is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "ckpt" if out_dir is not None else None
    steps_per_epoch = math.ceil(n / config.batch_size)
    history: list[tuple[int, float, float, float, float]] = []
    last_ckpt = None
    dtype = next(iter(model.params.values())).dtype
    start = state.step
    total_steps = steps_per_epoch * config.epochs
    if max_steps is not None:
        total_steps = min(total_steps, start + max_steps)
    step = start
    while step < total_steps:
        epoch, offset = divmod(step, steps_per_epoch)
        idx = batch_order(n, config.batch_size, config.seed, epoch)[offset]
        images, labels = batch_fn(idx, epoch)
        x = Tensor(images, dtype=dtype)
        model.zero_grad()
        out = model.forward(x, training=True)
        report = total_loss(out, labels, config.weights)
        value = report.total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        report.total.backward()
        adadelta_step(model.params, state)
        step = state.step
        history.append((step, *report.values()))
        if on_step is not None:
            on_step(step, report)
        if ckpt_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            last_ckpt = save_checkpoint(ckpt_dir, model, state)
    if out_dir is not None:
        if ckpt_dir is not None and (last_ckpt is None or last_ckpt != checkpoint_paths(ckpt_dir, state.step)[0]):
            last_ckpt = save_checkpoint(ckpt_dir, model, state)
        append_history(out_dir / "history.csv", history, fresh=(start == 0))
    return TrainResult(history, last_ckpt)


def format_history(history: Sequence[tuple]) -> str:
    return "".join(f"{row[0]}," + ",".join(repr(float(v)) for v in row[1:]) + "\n" for row in history)


def append_history(path: Path, history: Sequence[tuple], fresh: bool) -> None:
    existing = ""
    if not fresh and path.exists():
        existing = path.read_text()
    if not existing:
        existing = CSV_HEADER + "\n"
    serialize.atomic_write_text(path, existing + format_history(history))
