"""Dataset loading, synthetic scenes, augmentation and batch rasterisation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .geometry import RBox, clip_polygon, fit_min_area_rect, generate_labels, polygon_area
from .losses import LabelBatch
from .network import parse_kv
from .nn import _interp_indices

log = logging.getLogger(__name__)

DONT_CARE = "###"
FORMATS = ("icdar2015", "icdar2013", "td500")
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


class AnnotationError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class Annotation:
    box: RBox
    care: bool = True
    text: str = ""


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 uint8
    annotations: list[Annotation] = field(default_factory=list)
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def boxes(self) -> list[tuple[RBox, bool]]:
        return [(a.box, a.care) for a in self.annotations]


@dataclass
class Dataset:
    samples: list[Sample]
    missing_annotations: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


# -- image IO -----------------------------------------------------------------------

def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    from .serialize import atomic_write_bytes
    import io

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def draw_boxes(image: np.ndarray, annotations: Iterable[Annotation]) -> np.ndarray:
    im = Image.fromarray(np.asarray(image, dtype=np.uint8).copy())
    dr = ImageDraw.Draw(im)
    for a in annotations:
        pts = [tuple(p) for p in a.box.vertices()]
        dr.polygon(pts, outline=(0, 255, 0) if a.care else (255, 0, 0))
    return np.asarray(im)


# -- annotation parsing ------------------------------------------------------------------

def parse_icdar2015_line(line: str) -> Annotation:
    parts = line.strip().lstrip("﻿").split(",")
    if len(parts) < 8:
        raise ValueError("expected 8 coordinates and a transcription")
    coords = np.array([float(v) for v in parts[:8]]).reshape(4, 2)
    text = ",".join(parts[8:]).strip()
    box = fit_min_area_rect(coords)
    return Annotation(box, text != DONT_CARE, text)


def parse_icdar2013_line(line: str) -> Annotation:
    line = line.strip().lstrip("﻿")
    if "," in line:
        parts = [p.strip() for p in line.split(",", 4)]
    else:
        parts = line.split(None, 4)
    if len(parts) < 4:
        raise ValueError("expected 'left top right bottom word'")
    left, top, right, bottom = (float(v) for v in parts[:4])
    text = parts[4].strip().strip('"') if len(parts) > 4 else ""
    box = RBox((left + right) / 2, (top + bottom) / 2, right - left, bottom - top, 0.0).canonical()
    return Annotation(box, text != DONT_CARE, text)


def parse_td500_line(line: str) -> Annotation:
    parts = line.split()
    if len(parts) != 7:
        raise ValueError("expected 'index difficulty x y w h theta'")
    _, difficult, x, y, w, h, theta = parts
    x, y, w, h, theta = (float(v) for v in (x, y, w, h, theta))
    box = RBox(x + w / 2, y + h / 2, w, h, theta).canonical()
    hard = int(difficult) == 1
    return Annotation(box, not hard, DONT_CARE if hard else "")


_PARSERS = {
    "icdar2015": parse_icdar2015_line,
    "icdar2013": parse_icdar2013_line,
    "td500": parse_td500_line,
}


def read_annotations(path: str | Path, fmt: str) -> list[Annotation]:
    parser = _PARSERS[fmt]
    out = []
    text = Path(path).read_text(encoding="utf-8-sig", errors="replace")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(parser(line))
        except ValueError as exc:
            raise AnnotationError(path, lineno, str(exc)) from None
    return out


def _layout(root: Path, fmt: str) -> tuple[Path, Path]:
    images, gt = (root, root) if fmt == "td500" else (root / "images", root / "gt")
    manifest = root / "dataset.toml"
    if manifest.exists():
        kv = parse_kv(manifest.read_text())
        images = root / kv.get("images", images.relative_to(root) if images != root else ".")
        gt = root / kv.get("gt", gt.relative_to(root) if gt != root else ".")
    return images, gt


def load_dataset(root: str | Path, fmt: str = "icdar2015") -> Dataset:
    """Load images and annotations; images without a GT file are skipped and counted."""
    root = Path(root)
    if fmt not in FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; choose from {FORMATS}")
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    manifest = root / "dataset.toml"
    if manifest.exists():
        fmt = parse_kv(manifest.read_text()).get("format", fmt)
    images_dir, gt_dir = _layout(root, fmt)
    samples, missing = [], 0
    for img_path in sorted(images_dir.iterdir()):
        if img_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if fmt == "td500":
            gt_path = gt_dir / f"{img_path.stem}.gt"
        else:
            gt_path = gt_dir / f"gt_{img_path.stem}.txt"
        if not gt_path.exists():
            missing += 1
            continue
        anns = read_annotations(gt_path, fmt)
        samples.append(Sample(read_image(img_path), anns, img_path.stem))
    if missing:
        log.warning("%d images under %s had no annotation file", missing, images_dir)
    return Dataset(samples, missing)


def load_ground_truth(root: str | Path, fmt: str = "icdar2015") -> dict[str, list[tuple[RBox, bool]]]:
    """Annotations only, keyed by image id (no image decoding)."""
    root = Path(root)
    if fmt not in FORMATS:
        raise ValueError(f"unknown dataset format {fmt!r}; choose from {FORMATS}")
    if not root.is_dir():
        raise FileNotFoundError(f"ground-truth directory {root} does not exist")
    gt_dir = _layout(root, fmt)[1] if (root / "gt").is_dir() or (root / "dataset.toml").exists() else root
    out = {}
    if fmt == "td500":
        files = [(p.name[: -len(".gt")], p) for p in sorted(gt_dir.glob("*.gt"))]
    else:
        files = [(p.stem[len("gt_"):], p) for p in sorted(gt_dir.glob("gt_*.txt"))]
    for image_id, path in files:
        out[image_id] = [(a.box, a.care) for a in read_annotations(path, fmt)]
    return out


def write_annotations(path: str | Path, annotations: Iterable[Annotation]) -> None:
    """ICDAR2015-style lines (four vertices and a transcription)."""
    from .serialize import atomic_write_text

    lines = []
    for a in annotations:
        v = a.box.vertices().reshape(-1)
        text = a.text if a.care else DONT_CARE
        lines.append(",".join(f"{x:.2f}" for x in v) + f",{text or 'text'}")
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# -- synthetic scenes -----------------------------------------------------------------------

def render_synthetic(n: int, size: int = 256, seed: int = 0, max_boxes: int = 3,
                     min_short: float = 16.0, max_angle: float = math.pi / 6) -> list[Sample]:
    """Scenes of filled rotated rectangles on a noisy backdrop."""
    rng = np.random.default_rng(seed)
    out = []
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for idx in range(n):
        base = rng.uniform(40, 200, size=3)
        img = np.clip(base + rng.normal(0, 12, size=(size, size, 3)), 0, 255)
        anns: list[Annotation] = []
        for _ in range(50):
            if len(anns) >= rng.integers(1, max_boxes + 1):
                break
            h = rng.uniform(min_short, size * 0.18)
            w = rng.uniform(1.6 * h, min(4.5 * h, size * 0.7))
            box = RBox(rng.uniform(0.1, 0.9) * size, rng.uniform(0.1, 0.9) * size, w, h,
                       rng.uniform(-max_angle, max_angle)).canonical()
            v = box.vertices()
            if v.min() < 4 or v.max() > size - 4:
                continue
            grown = RBox(box.cx, box.cy, box.w + 16, box.h + 16, box.theta)
            if any(_boxes_touch(grown, a.box) for a in anns):
                continue
            anns.append(Annotation(box, True, "synthetic"))
        for a in anns:
            color = np.where(base > 128, rng.uniform(0, 60, 3), rng.uniform(195, 255, 3))
            img[a.box.contains(xx, yy)] = color
        out.append(Sample(img.round().astype(np.uint8), anns, f"synth_{idx:04d}"))
    return out


def _boxes_touch(a: RBox, b: RBox) -> bool:
    return polygon_area(clip_polygon(a.vertices(), b.vertices())) > 0


# -- augmentation ----------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    rotate_deg: tuple[float, float] = (-15.0, 15.0)
    crop_size: int = 640
    scale_k: tuple[float, float] = (0.5, 2.0)
    jitter_prob: float = 0.5
    jitter_scale: tuple[float, float] = (0.8, 1.2)
    jitter_shift: tuple[float, float] = (-16.0, 16.0)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    min_area_frac: float = 0.2
    max_retries: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.crop_size % 32:
            raise ValueError("crop_size must be divisible by 32")
        if self.rotate_deg[0] > self.rotate_deg[1] or self.scale_k[0] > self.scale_k[1]:
            raise ValueError("ranges must be (low, high)")
        if self.scale_k[0] <= 0:
            raise ValueError("scale_k must be positive")


def rotate_image(image: np.ndarray, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about the centre on an expanded canvas.

    Returns the rotated image and the 2x3 matrix mapping source to output
    continuous coordinates.
    """
    h, w = image.shape[:2]
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    nw = int(math.ceil(abs(w * c) + abs(h * s) - 1e-9))
    nh = int(math.ceil(abs(w * s) + abs(h * c) - 1e-9))
    rot = np.array([[c, -s], [s, c]])
    src_c = np.array([w / 2, h / 2])
    dst_c = np.array([nw / 2, nh / 2])
    fwd = np.hstack([rot, (dst_c - rot @ src_c)[:, None]])
    # output (row, col) index -> input (row, col) index, pixel centres at +0.5
    inv = rot.T
    m_rc = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off_xy = src_c - inv @ dst_c + inv @ np.array([0.5, 0.5]) - 0.5
    offset = np.array([off_xy[1], off_xy[0]])
    out = np.empty((nh, nw, image.shape[2]), dtype=np.float32)
    src = image.astype(np.float32)
    for ch in range(image.shape[2]):
        out[:, :, ch] = ndimage.affine_transform(src[:, :, ch], m_rc, offset, output_shape=(nh, nw),
                                                 order=1, mode="constant", cval=0.0)
    return out, fwd


def _gather_axis(img: np.ndarray, start: int, window: int, out_n: int, axis: int) -> np.ndarray:
    """Bilinear sample ``out_n`` points spanning [start, start+window) along ``axis``.

    Equivalent to cropping a zero-padded window then resizing it with
    align-corners=false; indices outside the image read as zero.
    """
    lo, hi, frac = _interp_indices(window, out_n)
    lo = lo + start
    hi = hi + start
    n = img.shape[axis]
    pad = np.zeros_like(np.take(img, [0], axis=axis))
    ext = np.concatenate([img, pad], axis=axis)
    lo = np.where((lo < 0) | (lo >= n), n, lo)
    hi = np.where((hi < 0) | (hi >= n), n, hi)
    shape = [1] * img.ndim
    shape[axis] = out_n
    f = frac.reshape(shape).astype(img.dtype)
    return np.take(ext, lo, axis=axis) * (1 - f) + np.take(ext, hi, axis=axis) * f


def crop_resize(image: np.ndarray, x0: int, y0: int, size: int, out: int) -> np.ndarray:
    rows = _gather_axis(image, y0, size, out, axis=0)
    return _gather_axis(rows, x0, size, out, axis=1)


def _window_start(lo_edge: float, hi_edge: float, size: int, extent: int, rng) -> int:
    lo = math.ceil(hi_edge - size)
    hi = math.floor(lo_edge)
    if lo > hi:
        return int(round((lo_edge + hi_edge) / 2 - size / 2))
    # stay inside the image when the window fits there
    if max(lo, 0) <= min(hi, extent - size):
        lo, hi = max(lo, 0), min(hi, extent - size)
    return int(rng.integers(lo, hi + 1))


def _clip_annotations(anns: Sequence[Annotation], size: int, min_frac: float) -> list[Annotation]:
    square = np.array([[0, 0], [size, 0], [size, size], [0, size]], dtype=np.float64)
    kept = []
    for a in anns:
        v = a.box.vertices()
        if v.min() >= 0 and v.max() <= size:
            kept.append(a)
            continue
        poly = clip_polygon(v, square)
        area = polygon_area(poly)
        if area < min_frac * a.box.area or len(poly) < 3:
            continue
        try:
            box = fit_min_area_rect(poly)
        except ValueError:
            continue
        bv = box.vertices()
        inside = bv.min() >= -1e-6 and bv.max() <= size + 1e-6
        kept.append(Annotation(box, a.care and inside, a.text if (a.care and inside) else DONT_CARE))
    return kept


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator | None = None) -> Sample:
    """Rotate, kernel-centred scaled crop, resize to crop_size, jitter and blur."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out_size = cfg.crop_size
    angle = float(rng.uniform(*cfg.rotate_deg))
    if angle != 0.0:
        img, fwd = rotate_image(sample.image, angle)
        anns = [Annotation(a.box.transformed(fwd), a.care, a.text) for a in sample.annotations]
    else:
        img = sample.image.astype(np.float32)
        anns = list(sample.annotations)
    h, w = img.shape[:2]
    care_idx = [i for i, a in enumerate(anns) if a.care] or list(range(len(anns)))
    had_care = any(a.care for a in anns)

    result = None
    for attempt in range(cfg.max_retries + 1):
        fallback = attempt == cfg.max_retries
        k = 1.0 if fallback else float(rng.uniform(*cfg.scale_k))
        size = max(1, int(round(k * out_size)))
        kernel = None
        if care_idx:
            kernel = anns[care_idx[0] if fallback else care_idx[int(rng.integers(len(care_idx)))]]
        if kernel is not None:
            v = kernel.box.vertices()
            if fallback:
                x0 = int(round(kernel.box.cx - size / 2))
                y0 = int(round(kernel.box.cy - size / 2))
            else:
                x0 = _window_start(v[:, 0].min(), v[:, 0].max(), size, w, rng)
                y0 = _window_start(v[:, 1].min(), v[:, 1].max(), size, h, rng)
        elif fallback:
            x0, y0 = (w - size) // 2, (h - size) // 2
        else:
            x0 = int(rng.integers(min(0, w - size), max(0, w - size) + 1))
            y0 = int(rng.integers(min(0, h - size), max(0, h - size) + 1))
        scale = out_size / size
        moved = [
            Annotation(a.box.transformed(np.array([[scale, 0, -x0 * scale], [0, scale, -y0 * scale]])),
                       a.care, a.text)
            for a in anns
        ]
        clipped = _clip_annotations(moved, out_size, cfg.min_area_frac)
        if fallback or not had_care or any(a.care for a in clipped):
            result = (k, size, x0, y0, clipped, attempt)
            break
    k, size, x0, y0, clipped, attempt = result
    patch = crop_resize(img, x0, y0, size, out_size)
    jitter = rng.random() < cfg.jitter_prob
    if jitter:
        sc = rng.uniform(*cfg.jitter_scale, size=3).astype(np.float32)
        sh = rng.uniform(*cfg.jitter_shift, size=3).astype(np.float32)
        patch = patch * sc + sh
    blur = rng.random() < cfg.blur_prob
    sigma = float(rng.uniform(*cfg.blur_sigma)) if blur else 0.0
    if sigma > 0:
        patch = ndimage.gaussian_filter(patch, sigma=(sigma, sigma, 0), mode="nearest")
    patch = np.clip(np.round(patch), 0, 255).astype(np.uint8)
    meta = {"angle_deg": angle, "k": k, "patch_size": size, "window": (x0, y0),
            "retries": attempt, "jitter": jitter, "blur_sigma": sigma}
    return Sample(patch, clipped, sample.name, meta)


# -- batches -----------------------------------------------------------------------------------

def image_to_tensor_array(image: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 -> 3 x H x W float in [-1, 1]."""
    return np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def rasterize_batch(samples: Sequence[Sample], stride: int = 4) -> tuple[np.ndarray, LabelBatch]:
    """Stack images (N,3,H,W in [-1, 1]) and stride-``stride`` label maps."""
    if not samples:
        raise ValueError("empty batch")
    h, w = samples[0].image.shape[:2]
    if any(s.image.shape[:2] != (h, w) for s in samples):
        raise ValueError("all samples in a batch must share one size")
    images = np.stack([image_to_tensor_array(s.image) for s in samples])
    maps = [generate_labels(s.boxes, h // stride, w // stride, stride) for s in samples]
    return images, LabelBatch.stack(maps)
