"""RBOX geometry: rotated rectangles, label maps, decoding, IoU and NMS.

Coordinates are continuous image coordinates (x right, y down). A label-map
pixel (i, j) at stride s stands for the image point (s*j, s*i). A positive
``theta`` rotates the box clockwise on screen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

HALF_PI = math.pi / 2
SHRINK_RATIO = 0.3


def normalize_angle(theta: float) -> float:
    """Map an angle to [-pi/2, pi/2); rectangles are symmetric under pi."""
    t = math.fmod(theta + HALF_PI, math.pi)
    if t < 0:
        t += math.pi
    t -= HALF_PI
    if t >= HALF_PI:
        t -= math.pi
    return t


@dataclass(frozen=True)
class RBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"RBox sides must be positive, got w={self.w}, h={self.h}")

    def canonical(self) -> "RBox":
        """Unique form: w >= h and theta in [-pi/2, pi/2)."""
        w, h, t = self.w, self.h, self.theta
        if w < h:
            w, h, t = h, w, t + HALF_PI
        return RBox(self.cx, self.cy, w, h, normalize_angle(t))

    @property
    def area(self) -> float:
        return self.w * self.h

    def vertices(self) -> np.ndarray:
        """4x2 corners, clockwise on screen, starting at the box-frame top-left."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw, hh = self.w / 2, self.h / 2
        local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    @classmethod
    def from_vertices(cls, pts) -> "RBox":
        """Inverse of ``vertices`` for an exact rectangle (TL, TR, BR, BL order)."""
        p = np.asarray(pts, dtype=np.float64).reshape(4, 2)
        cx, cy = p.mean(axis=0)
        top = p[1] - p[0]
        w = 0.5 * (np.linalg.norm(p[1] - p[0]) + np.linalg.norm(p[2] - p[3]))
        h = 0.5 * (np.linalg.norm(p[3] - p[0]) + np.linalg.norm(p[2] - p[1]))
        theta = math.atan2(top[1], top[0])
        return cls(float(cx), float(cy), float(w), float(h), theta).canonical()

    def transformed(self, matrix: np.ndarray) -> "RBox":
        """Apply a 2x3 similarity transform (rotation, uniform scale, translation)."""
        m = np.asarray(matrix, dtype=np.float64)
        a = m[:, :2]
        scale = math.sqrt(abs(np.linalg.det(a)))
        cx, cy = a @ np.array([self.cx, self.cy]) + m[:, 2]
        rot = math.atan2(a[1, 0], a[0, 0])
        return RBox(float(cx), float(cy), self.w * scale, self.h * scale, self.theta + rot).canonical()

    def contains(self, x, y, margin: float = 0.0):
        """Vectorised point-in-box test; ``margin`` shrinks each side inward."""
        u, v = self.to_local(x, y)
        return (np.abs(u) <= self.w / 2 - margin) & (np.abs(v) <= self.h / 2 - margin)

    def to_local(self, x, y):
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = np.asarray(x, dtype=np.float64) - self.cx
        dy = np.asarray(y, dtype=np.float64) - self.cy
        return dx * c + dy * s, -dx * s + dy * c


@dataclass(frozen=True)
class Detection:
    box: RBox
    score: float

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"detection score must lie in (0, 1), got {self.score}")


@dataclass
class LabelMaps:
    score: np.ndarray      # H x W in {0, 1}
    dist: np.ndarray       # 4 x H x W (top, right, bottom, left)
    rot: np.ndarray        # H x W radians
    train_mask: np.ndarray  # H x W in {0, 1}

    @property
    def shape(self) -> tuple[int, int]:
        return self.score.shape


def vertex_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max corner distance between two quads, minimised over cyclic relabelings."""
    a = np.asarray(a, dtype=np.float64).reshape(4, 2)
    b = np.asarray(b, dtype=np.float64).reshape(4, 2)
    return min(float(np.max(np.linalg.norm(a - np.roll(b, k, axis=0), axis=1))) for k in range(4))


# -- label generation --------------------------------------------------------------------

def generate_labels(boxes: Iterable[tuple[RBox, bool]], out_h: int, out_w: int,
                    stride: int = 4, shrink: float = SHRINK_RATIO) -> LabelMaps:
    """Rasterise score, distance, rotation and train-mask maps at ``stride``.

    Positives are pixels inside a care box whose sides are pulled in by
    ``shrink * min(w, h)``. Where care boxes overlap, the smaller box wins;
    equal areas are ordered by geometry so the result ignores input order.
    """
    score = np.zeros((out_h, out_w), dtype=np.float64)
    dist = np.zeros((4, out_h, out_w), dtype=np.float64)
    rot = np.zeros((out_h, out_w), dtype=np.float64)
    mask = np.ones((out_h, out_w), dtype=np.float64)
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    px, py = xs * float(stride), ys * float(stride)
    boxes = list(boxes)
    care = sorted(
        (b.canonical() for b, c in boxes if c),
        key=lambda b: (-b.area, b.cx, b.cy, b.w, b.h, b.theta),
    )
    for box in care:
        margin = shrink * min(box.w, box.h)
        inside = box.contains(px, py, margin)
        if not inside.any():
            continue
        u, v = box.to_local(px[inside], py[inside])
        score[inside] = 1.0
        dist[0][inside] = v + box.h / 2
        dist[1][inside] = box.w / 2 - u
        dist[2][inside] = box.h / 2 - v
        dist[3][inside] = u + box.w / 2
        rot[inside] = box.theta
    for b, c in boxes:
        if not c:
            full = b.contains(px, py)
            mask[full] = 0.0
            score[full] = 0.0
    return LabelMaps(score, dist, rot, mask)


# -- decoding ----------------------------------------------------------------------------

def restore_box(x: float, y: float, d: Sequence[float], theta: float) -> RBox | None:
    """Rectangle implied by a pixel at (x, y) with edge distances d=(t, r, b, l)."""
    t, r, b, l = (float(v) for v in d)
    w, h = l + r, t + b
    if not (w > 0 and h > 0):
        return None
    du, dv = (r - l) / 2, (b - t) / 2
    c, s = math.cos(theta), math.sin(theta)
    x, y = float(x), float(y)
    return RBox(x + du * c - dv * s, y + du * s + dv * c, w, h, float(theta)).canonical()


def decode(score: np.ndarray, dist: np.ndarray, angle: np.ndarray, score_thresh: float = 0.8,
           stride: int = 4) -> list[Detection]:
    """One candidate box per pixel with score >= threshold, in row-major order."""
    score = np.asarray(score, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    score = score.reshape(score.shape[-2:])
    angle = angle.reshape(angle.shape[-2:])
    dist = dist.reshape(4, *score.shape)
    if not 0.0 < score_thresh < 1.0:
        raise ValueError("score_thresh must lie in (0, 1)")
    ii, jj = np.nonzero(score >= score_thresh)
    out = []
    for i, j in zip(ii, jj):
        box = restore_box(stride * j, stride * i, dist[:, i, j], angle[i, j])
        if box is not None:
            s = float(np.clip(score[i, j], 1e-12, 1 - 1e-12))
            out.append(Detection(box, s))
    return out


# -- polygon clipping IoU ------------------------------------------------------------------

def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: intersection of ``subject`` with convex ``clip``."""
    clip = np.asarray(clip, dtype=np.float64)
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rbox_iou(a: RBox, b: RBox) -> float:
    """Exact IoU of two rotated rectangles via convex polygon clipping."""
    dx, dy = a.cx - b.cx, a.cy - b.cy
    reach = 0.5 * (math.hypot(a.w, a.h) + math.hypot(b.w, b.h))
    if dx * dx + dy * dy >= reach * reach:
        return 0.0
    inter = polygon_area(clip_polygon(a.vertices(), b.vertices()))
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


# -- suppression ----------------------------------------------------------------------------

def _aligned(v: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Cyclically relabel quad ``v`` so its corners pair with those of ``ref``."""
    shift = min(range(4), key=lambda k: np.sum((np.roll(v, k, axis=0) - ref) ** 2))
    return np.roll(v, shift, axis=0)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.2) -> list[Detection]:
    """Locality-aware merge followed by standard greedy suppression.

    Candidates are visited in their given (row-scan) order; each one is fused
    into the running group when their IoU exceeds ``iou_thresh``, with
    vertices averaged by score. Groups report their mean score.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must lie in (0, 1)")
    groups: list[tuple[RBox, list[float]]] = []
    box = acc = ref = None
    wsum = 0.0
    scores: list[float] = []
    for d in dets:
        if box is not None and rbox_iou(box, d.box) > iou_thresh:
            acc = acc + d.score * _aligned(d.box.vertices(), ref)
            wsum += d.score
            scores.append(d.score)
            box = RBox.from_vertices(acc / wsum)
        else:
            if box is not None:
                groups.append((box, scores))
            box = d.box
            ref = d.box.vertices()
            acc = d.score * ref
            wsum = d.score
            scores = [d.score]
    if box is not None:
        groups.append((box, scores))
    merged = [Detection(b, float(np.mean(ws))) for b, ws in groups]
    return greedy_nms(merged, iou_thresh)


def greedy_nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    order = sorted(dets, key=lambda d: (-d.score, d.box.cx, d.box.cy))
    keep: list[Detection] = []
    for d in order:
        if all(rbox_iou(d.box, k.box) <= iou_thresh for k in keep):
            keep.append(d)
    return keep


# -- detection files --------------------------------------------------------------------------

def format_detection(det: Detection) -> str:
    pts = det.box.vertices().reshape(-1)
    return ",".join(f"{v:.2f}" for v in pts) + f",{det.score:.4f}"


def format_detections(dets: Iterable[Detection]) -> str:
    lines = [format_detection(d) for d in dets]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detection_line(line: str) -> Detection:
    parts = [p.strip() for p in line.strip().split(",")]
    if len(parts) != 9:
        raise ValueError(f"expected 9 comma-separated values, got {len(parts)}")
    vals = [float(p) for p in parts]
    box = fit_min_area_rect(np.array(vals[:8]).reshape(4, 2))
    return Detection(box, float(np.clip(vals[8], 1e-6, 1 - 1e-6)))


# -- minimum-area rectangle ---------------------------------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise in y-up terms."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).reshape(-1, 2))))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def fit_min_area_rect(points) -> RBox:
    """Minimum-area enclosing rectangle via rotating calipers over the hull."""
    hull = convex_hull(points)
    if len(hull) < 3:
        raise ValueError("degenerate point set: need at least 3 non-collinear points")
    best = None
    n = len(hull)
    for k in range(n):
        e = hull[(k + 1) % n] - hull[k]
        norm = math.hypot(*e)
        if norm == 0:
            continue
        ux = e / norm
        uy = np.array([-ux[1], ux[0]])
        pu = hull @ ux
        pv = hull @ uy
        w = pu.max() - pu.min()
        h = pv.max() - pv.min()
        area = w * h
        if best is None or area < best[0] - 1e-12:
            cu = 0.5 * (pu.max() + pu.min())
            cv = 0.5 * (pv.max() + pv.min())
            center = cu * ux + cv * uy
            best = (area, center, w, h, math.atan2(ux[1], ux[0]))
    _, center, w, h, theta = best
    return RBox(float(center[0]), float(center[1]), float(w), float(h), theta).canonical()
