"""Grad-CAM heatmaps, the attention-shift distance and overlay rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import autograd as ag
from . import pnm


@dataclass
class Heatmap:
    values: np.ndarray  # raw, nonnegative, at the layer's spatial resolution
    layer: str
    class_index: int
    upsampled: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def normalized(self) -> np.ndarray:
        """Copy scaled so the maximum is 1 (unchanged if all zero). For rendering only."""
        src = self.upsampled if self.upsampled is not None else self.values
        m = src.max()
        return src / m if m > 0 else src.copy()

    def upsample(self, height: int, width: int) -> np.ndarray:
        # bilinear weights are convex, so nonnegativity survives; clamp fp dust anyway
        self.upsampled = np.maximum(K.resize_bilinear(self.values, height, width), 0.0)
        return self.upsampled


def cam_from_gradients(activations: np.ndarray, gradients: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(weights, heatmap)`` from feature maps ``A[K, h, w]`` and ``dy/dA``.

    Weights are the spatial means of the gradients; the heatmap is
    ``relu(sum_k weight_k * A_k)``.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.shape != g.shape or a.ndim != 3:
        raise ValueError(f"activations {a.shape} and gradients {g.shape} must both be (K, h, w)")
    weights = g.mean(axis=(1, 2))
    return weights, np.maximum(np.tensordot(weights, a, axes=(0, 0)), 0.0)


def gradcam(model, image, class_index: int, layer: str | None = None) -> Heatmap:
    """Grad-CAM of the pre-softmax logit ``class_index`` at conv output ``layer``.

    ``layer`` defaults to the architecture's last conv tap. The model is put
    in eval mode; parameter gradients are zeroed afterwards.
    """
    layer = layer or model.conv_taps[-1]
    if layer not in model.conv_taps:
        if layer in getattr(model, "_by_name", {}):
            raise ValueError(f"layer {layer!r} is not a conv output; choose from {model.conv_taps}")
        raise KeyError(f"unknown layer {layer!r}; choose from {model.conv_taps}")
    x = image.data if isinstance(image, ag.Tensor) else np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"gradcam takes a single image, got batch of {x.shape[0]}")
    model.eval()
    tape = ag.get_tape()
    tape.clear()
    model._retain = {layer}
    try:
        logits = model(x)
        if not 0 <= class_index < logits.shape[1]:
            raise ValueError(f"class index {class_index} out of range")
        onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
        onehot[0, class_index] = 1.0
        y = ag.tsum(ag.mul(logits, onehot))
        act = model.taps[layer]
        ag.backward(y)
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    finally:
        model._retain = set()
        tape.clear()
        model.store.zero_grad()
    _, cam = cam_from_gradients(act.data[0], grad[0])
    return Heatmap(cam, layer, class_index)


def attention_shift(original: Heatmap | np.ndarray, pruned: Heatmap | np.ndarray) -> float:
    """Frobenius distance between two raw heatmaps of the same layer and class."""
    if isinstance(original, Heatmap) and isinstance(pruned, Heatmap):
        if original.layer != pruned.layer or original.class_index != pruned.class_index:
            raise ValueError(
                f"heatmaps differ in layer/class: {original.layer}/{original.class_index} "
                f"vs {pruned.layer}/{pruned.class_index}"
            )
    a = np.asarray(original.values if isinstance(original, Heatmap) else original, dtype=np.float64)
    b = np.asarray(pruned.values if isinstance(pruned, Heatmap) else pruned, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"heatmap shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def jet(v: np.ndarray) -> np.ndarray:
    """Jet colormap for values in [0, 1]; returns (..., 3) floats in [0, 1]."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)[..., None]
    centres = np.array([3.0, 2.0, 1.0])  # r, g, b
    return np.clip(1.5 - np.abs(4.0 * v - centres), 0.0, 1.0)


def to_gray(image: np.ndarray) -> np.ndarray:
    """(C, H, W) float image in [0, 1] -> (H, W) luminance."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def heatmap_render(heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    """Jet-coloured heatmap blended 50/50 with the grayscale image, as uint8 (H, W, 3)."""
    gray = to_gray(image)
    h, w = gray.shape
    if heatmap.upsampled is None or heatmap.upsampled.shape != (h, w):
        heatmap.upsample(h, w)
    colour = jet(heatmap.normalized())
    out = 0.5 * colour + 0.5 * gray[..., None]
    return np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_overlay(path, heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    raster = heatmap_render(heatmap, image)
    pnm.write(path, raster)
    return raster
