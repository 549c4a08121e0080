"""IoU-based precision/recall scoring with don't-care absorption."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .geometry import Detection, RBox, parse_detection_line, rbox_iou
from .serialize import atomic_write_text


@dataclass
class ImageScore:
    image_id: str
    precision: float
    recall: float
    f_score: float
    matched: int
    num_gt_care: int
    num_det: int


@dataclass
class EvalReport:
    precision: float
    recall: float
    f_score: float
    matched: int
    num_gt_care: int
    num_det: int
    per_image: list[ImageScore] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def format_table(self) -> str:
        lines = [f"{'image':<24} {'P':>7} {'R':>7} {'F':>7} {'match':>6} {'gt':>5} {'det':>5}"]
        for s in self.per_image:
            lines.append(f"{s.image_id:<24} {s.precision:7.4f} {s.recall:7.4f} {s.f_score:7.4f} "
                         f"{s.matched:6d} {s.num_gt_care:5d} {s.num_det:5d}")
        lines.append(f"{'TOTAL':<24} {self.precision:7.4f} {self.recall:7.4f} {self.f_score:7.4f} "
                     f"{self.matched:6d} {self.num_gt_care:5d} {self.num_det:5d}")
        return "\n".join(lines) + "\n"


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def precision_recall(matched: int, num_gt: int, num_det: int) -> tuple[float, float]:
    """Empty denominators score 1 when the other side is empty too, else 0 (recall 1 with no GT)."""
    recall = matched / num_gt if num_gt else 1.0
    if num_det:
        precision = matched / num_det
    else:
        precision = 1.0 if num_gt == 0 else 0.0
    return precision, recall


def _box_key(b: RBox) -> tuple:
    return (round(b.cx, 9), round(b.cy, 9), round(b.w, 9), round(b.h, 9), round(b.theta, 9))


def match_image(gts: Sequence[tuple[RBox, bool]], dets: Sequence[Detection],
                iou_thresh: float = 0.5) -> tuple[int, int, int]:
    """Return (matched, num_gt_care, num_det_remaining) for one image."""
    care = [b for b, c in gts if c]
    dont = [b for b, c in gts if not c]
    kept = [d for d in dets if not any(rbox_iou(d.box, g) >= iou_thresh for g in dont)]
    pairs = []
    for gi, g in enumerate(care):
        for di, d in enumerate(kept):
            iou = rbox_iou(g, d.box)
            if iou >= iou_thresh:
                # order-independent tie-break on geometry rather than list position
                pairs.append((-iou, _box_key(g), _box_key(d.box), -d.score, gi, di))
    pairs.sort()
    used_g, used_d = set(), set()
    for *_, gi, di in pairs:
        if gi in used_g or di in used_d:
            continue
        used_g.add(gi)
        used_d.add(di)
    return len(used_g), len(care), len(kept)


def _as_items(x) -> list[tuple[str, list]]:
    if isinstance(x, Mapping):
        return [(str(k), list(v)) for k, v in x.items()]
    items = list(x)
    if items and isinstance(items[0], tuple) and len(items[0]) == 2 and isinstance(items[0][0], str):
        return [(k, list(v)) for k, v in items]
    return [(str(i), list(v)) for i, v in enumerate(items)]


def evaluate(gts, dets, iou_thresh: float = 0.5) -> EvalReport:
    """Micro-averaged scores over images.

    ``gts`` and ``dets`` are either mappings keyed by image id, sequences of
    ``(image_id, items)`` pairs, or plain per-image lists aligned by index.
    """
    g_items, d_items = _as_items(gts), _as_items(dets)
    for name, items in (("ground truth", g_items), ("detections", d_items)):
        ids = [k for k, _ in items]
        dup = {k for k in ids if ids.count(k) > 1}
        if dup:
            raise ValueError(f"duplicate image id(s) in {name}: {sorted(dup)}")
    g_map, d_map = dict(g_items), dict(d_items)
    extra = set(d_map) - set(g_map)
    if extra:
        raise ValueError(f"detections for images without ground truth: {sorted(extra)}")
    per_image, tm, tg, td = [], 0, 0, 0
    for image_id, gt in g_items:
        m, ng, nd = match_image(gt, d_map.get(image_id, []), iou_thresh)
        p, r = precision_recall(m, ng, nd)
        per_image.append(ImageScore(image_id, p, r, f_measure(p, r), m, ng, nd))
        tm, tg, td = tm + m, tg + ng, td + nd
    p, r = precision_recall(tm, tg, td)
    return EvalReport(p, r, f_measure(p, r), tm, tg, td, per_image)


def read_detection_file(path: str | Path) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(parse_detection_line(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def load_detections_dir(det_dir: str | Path, image_ids: Sequence[str]) -> dict[str, list[Detection]]:
    """Detection files named ``res_<id>.txt`` (or ``<id>.txt``); missing files mean no detections."""
    det_dir = Path(det_dir)
    out = {}
    for image_id in image_ids:
        for cand in (det_dir / f"res_{image_id}.txt", det_dir / f"{image_id}.txt"):
            if cand.exists():
                out[image_id] = read_detection_file(cand)
                break
        else:
            out[image_id] = []
    return out


def write_report(path: str | Path, report: EvalReport) -> None:
    atomic_write_text(path, report.to_json())

