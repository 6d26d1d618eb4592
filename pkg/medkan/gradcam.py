"""Grad-CAM heatmaps for a stage output and their PPM / raw float export."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import tensor as T
from .datasets import resize_bilinear
from .errors import ConfigError, ShapeError
from .model import MedKAN
from .tensor import Tensor

logger = logging.getLogger(__name__)

# 256-entry blue -> red ramp
COLORMAP = np.stack(
    [np.arange(256), np.zeros(256, dtype=np.int64), 255 - np.arange(256)], axis=1
).astype(np.uint8)


@dataclass
class GradCAMResult:
    heatmap: np.ndarray
    cam: np.ndarray
    layer_id: str
    target_class: int
    predicted_class: int
    probability: float


def compute_cam(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU(sum_c mean(grad_c) * A_c), min-max scaled to [0, 1]; flat maps become zeros."""
    if features.shape != grads.shape or features.ndim != 3:
        raise ShapeError(f"Grad-CAM needs matching C×h×w features and grads, got {features.shape} / {grads.shape}")
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, features, axes=1), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def gradcam(
    model: MedKAN,
    image: np.ndarray,
    target_class: int | None = None,
    layer_id: str | None = None,
) -> GradCAMResult:
    """Heatmap for ``image`` (C×H×W) at ``layer_id`` (default: last stage)."""
    layer_id = layer_id or model.layer_ids[-1]
    if layer_id not in model.layer_ids:
        raise ConfigError(f"Unknown Grad-CAM layer '{layer_id}' (choose from {model.layer_ids})")
    dtype = model.head.weight.dtype
    features: dict[str, Tensor] = {}
    logits = model(Tensor(image[None], dtype=dtype), features=features)

    probs = special.softmax(logits.data[0].astype(np.float64))
    predicted = int(np.argmax(logits.data[0]))
    target = predicted if target_class is None else int(target_class)
    if not 0 <= target < logits.shape[1]:
        raise ConfigError(f"Target class {target} outside [0, {logits.shape[1]})")

    score = T.sum_(T.slice_axis(logits, 1, target, target + 1))
    T.backward(score)
    activation = features[layer_id]
    grads = activation.grad if activation.grad is not None else np.zeros_like(activation.data)
    cam = compute_cam(activation.data[0].astype(np.float64), grads[0].astype(np.float64))
    model.zero_grad()

    height, width = image.shape[-2:]
    heatmap = np.clip(resize_bilinear(cam[None, None], (height, width))[0, 0], 0.0, 1.0)
    logger.debug("Grad-CAM an %s: Klasse %d, Vorhersage %d", layer_id, target, predicted)
    return GradCAMResult(
        heatmap=heatmap,
        cam=cam,
        layer_id=layer_id,
        target_class=target,
        predicted_class=predicted,
        probability=float(probs[target]),
    )


def write_ppm(path: str | Path, heatmap: np.ndarray) -> Path:
    """Binary P6 image of ``heatmap`` through the blue-to-red colormap."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = np.clip(np.round(heatmap * 255), 0, 255).astype(np.uint8)
    height, width = heatmap.shape
    path.write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + COLORMAP[index].tobytes())
    return path


def write_f32(path: str | Path, heatmap: np.ndarray) -> Path:
    """Row-major little-endian float32 dump."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(heatmap, dtype="<f4").tobytes())
    return path


def write_overlay_ppm(path: str | Path, heatmap: np.ndarray, image: np.ndarray, alpha: float = 0.5) -> Path:
    """P6 blend of the colored ``heatmap`` over ``image`` (C×H×W pixels in [0, 1])."""
    if image.shape[-2:] != heatmap.shape:
        raise ShapeError(f"Overlay image {image.shape} does not match heatmap {heatmap.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"Overlay alpha must lie in [0, 1], got {alpha}")
    rgb = image if image.shape[0] == 3 else np.repeat(image.mean(axis=0, keepdims=True), 3, axis=0)
    base = np.clip(rgb, 0.0, 1.0).transpose(1, 2, 0) * 255.0
    colored = COLORMAP[np.clip(np.round(heatmap * 255), 0, 255).astype(np.uint8)].astype(np.float64)
    blend = np.round((1.0 - alpha) * base + alpha * colored).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = heatmap.shape
    path.write_bytes(f"P6\n{width} {height}\n255\n".encode("ascii") + blend.tobytes())
    return path


__all__ = ["COLORMAP", "GradCAMResult", "compute_cam", "gradcam", "write_f32", "write_overlay_ppm", "write_ppm"]
