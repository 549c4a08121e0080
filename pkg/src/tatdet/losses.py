"""Dice classification loss, IoU distance loss, cosine rotation loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import LabelMaps
from .network import DetOutput
from .tensor import Tensor

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_d: float = 2.0
    lambda_r: float = 20.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_d, self.lambda_r) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class LossReport:
    total: Tensor
    cls: Tensor
    dist: Tensor
    rot: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return (self.total.item(), self.cls.item(), self.dist.item(), self.rot.item())

    def csv_row(self, step: int) -> str:
        return f"{step}," + ",".join(repr(v) for v in self.values())


CSV_HEADER = "step,total,cls,dist,rot"


def _const(a, like: Tensor | None = None) -> Tensor:
    if isinstance(a, Tensor):
        return a
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(a), dtype=dtype)


def _zero_like(x: Tensor) -> Tensor:
    # keeps x on the tape so callers still get a (zero) gradient buffer
    return T.mul(T.tsum(x), 0.0)


def dice_loss(s_hat, s_star, mask) -> Tensor:
    """1 - 2*sum(m*S*Ŝ) / (sum(m*S*) + sum(m*Ŝ) + eps) over all pixels."""
    s_hat = T.as_tensor(s_hat)
    s_star, mask = _const(s_star, s_hat), _const(mask, s_hat)
    if not np.any(mask.data):
        return _zero_like(s_hat)
    ms = T.mul(mask, s_hat)
    inter = T.tsum(T.mul(ms, s_star))
    denom = T.affine(T.add(T.tsum(T.mul(mask, s_star)), T.tsum(ms)), 1.0, DICE_EPS)
    return T.affine(T.div(inter, denom), -2.0, 1.0)


def iou_dist_loss(d_hat, d_star, pos_mask) -> Tensor:
    """Mean over positive pixels of -log((I + 1) / (U + 1)).

    Distances are (top, right, bottom, left) along axis 1 of N,4,H,W maps.
    """
    d_hat = T.as_tensor(d_hat)
    d_star, pos_mask = _const(d_star, d_hat), _const(pos_mask, d_hat)
    npos = float(np.sum(pos_mask.data, dtype=np.float64))
    if npos == 0:
        return _zero_like(d_hat)
    t_h, r_h, b_h, l_h = (d_hat[:, k:k + 1] for k in range(4))
    t_s, r_s, b_s, l_s = (d_star[:, k:k + 1] for k in range(4))
    area_hat = T.mul(T.add(t_h, b_h), T.add(l_h, r_h))
    area_star = T.mul(T.add(t_s, b_s), T.add(l_s, r_s))
    ih = T.add(T.minimum(t_s, t_h), T.minimum(b_s, b_h))
    iw = T.add(T.minimum(l_s, l_h), T.minimum(r_s, r_h))
    inter = T.mul(ih, iw)
    union = T.sub(T.add(area_hat, area_star), inter)
    ratio = T.div(T.affine(inter, 1.0, 1.0), T.affine(union, 1.0, 1.0))
    per_pixel = T.neg(T.log(ratio))
    return T.affine(T.tsum(T.mul(per_pixel, pos_mask)), 1.0 / npos)


def rotation_loss(r_hat, r_star, pos_mask) -> Tensor:
    """Mean over positive pixels of 1 - cos(R* - R̂)."""
    r_hat = T.as_tensor(r_hat)
    r_star, pos_mask = _const(r_star, r_hat), _const(pos_mask, r_hat)
    npos = float(np.sum(pos_mask.data, dtype=np.float64))
    if npos == 0:
        return _zero_like(r_hat)
    per_pixel = T.affine(T.cos(T.sub(r_star, r_hat)), -1.0, 1.0)
    return T.affine(T.tsum(T.mul(per_pixel, pos_mask)), 1.0 / npos)


@dataclass
class LabelBatch:
    """Label maps stacked to N,C,H,W arrays."""

    score: np.ndarray
    dist: np.ndarray
    rot: np.ndarray
    train_mask: np.ndarray

    @classmethod
    def stack(cls, maps: list[LabelMaps]) -> "LabelBatch":
        return cls(
            np.stack([m.score[None] for m in maps]),
            np.stack([m.dist for m in maps]),
            np.stack([m.rot[None] for m in maps]),
            np.stack([m.train_mask[None] for m in maps]),
        )

    def __len__(self) -> int:
        return self.score.shape[0]

    def subset(self, idx) -> "LabelBatch":
        return LabelBatch(self.score[idx], self.dist[idx], self.rot[idx], self.train_mask[idx])


def total_loss(out: DetOutput, labels: LabelBatch | LabelMaps, w: LossWeights | None = None) -> LossReport:
    w = w or LossWeights()
    if isinstance(labels, LabelMaps):
        labels = LabelBatch.stack([labels])
    if out.score.shape != labels.score.shape:
        raise T.DimensionError(f"score map {out.score.shape} vs labels {labels.score.shape}", axis="HW")
    pos = labels.score * labels.train_mask
    lc = dice_loss(out.score, labels.score, labels.train_mask)
    ld = iou_dist_loss(out.dist, labels.dist, pos)
    lr = rotation_loss(out.angle, labels.rot, pos)
    total = T.add(T.add(T.affine(lc, w.lambda_c), T.affine(ld, w.lambda_d)), T.affine(lr, w.lambda_r))
    return LossReport(total, lc, ld, lr)
