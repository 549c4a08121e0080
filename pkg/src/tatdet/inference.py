"""Image-level detection: pad or resize, forward, decode, merge."""
from __future__ import annotations

import numpy as np

from .data import image_to_tensor_array
from .geometry import Detection, decode, fit_min_area_rect, nms
from .network import Model
from .nn import resize_array
from .tensor import Tensor, no_grad


def pad_to_multiple(image: np.ndarray, multiple: int = 32, fill=None) -> np.ndarray:
    """Pad bottom/right up to the next multiple; fill defaults to the mean pixel."""
    h, w = image.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return image
    if fill is None:
        fill = image.reshape(-1, image.shape[2]).mean(axis=0)
    out = np.empty((h + ph, w + pw, image.shape[2]), dtype=image.dtype)
    out[...] = np.asarray(fill).round().astype(image.dtype) if image.dtype == np.uint8 else fill
    out[:h, :w] = image
    return out


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    out = resize_array(image.astype(np.float64), height, width, axes=(0, 1))
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def detect(model: Model, image: np.ndarray, score_thresh: float = 0.8, nms_thresh: float = 0.2,
           resolution: tuple[int, int] | None = None) -> list[Detection]:
    """Run the detector on one H x W x 3 uint8 image.

    With ``resolution=(W, H)`` the image is bilinearly resized first and boxes
    are mapped back to source coordinates. The (resized) image is then padded
    bottom/right to a multiple of 32 with its mean pixel, which leaves box
    coordinates unchanged.
    """
    h0, w0 = image.shape[:2]
    sx = sy = 1.0
    if resolution is not None:
        rw, rh = resolution
        if rw < 1 or rh < 1:
            raise ValueError(f"resolution {rw}x{rh} must be positive")
        image = resize_image(image, rw, rh)
        sx, sy = w0 / rw, h0 / rh
    image = pad_to_multiple(image)
    dtype = next(iter(model.params.values())).dtype
    x = Tensor(image_to_tensor_array(image)[None], dtype=dtype)
    with no_grad():
        out = model.forward(x, training=False)
    dets = nms(decode(out.score.data[0, 0], out.dist.data[0], out.angle.data[0, 0], score_thresh),
               nms_thresh)
    if sx != 1.0 or sy != 1.0:
        # anisotropic scaling turns rectangles into parallelograms; refit them
        scale = np.array([sx, sy])
        dets = [Detection(fit_min_area_rect(d.box.vertices() * scale), d.score) for d in dets]
    return dets
