"""Grad-CAM++ attention heatmaps and blended overlay rendering.

The heatmap weights each channel of the last convolutional feature map by
coefficients built from the class score's gradients (the closed form
g^2 / (2 g^2 + sum(A) g^3) valid for piecewise-linear score functions),
keeps only positive gradient contributions, rectifies the weighted sum,
upsamples it bilinearly to the input resolution, and min-max normalizes
to [0, 1]. Red regions of the rendered overlay mark high attention, blue
regions low attention.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from cxr_sslx import backbones

DEFAULT_COLORMAP = "jet"
DEFAULT_BLEND = 0.4


@dataclass(frozen=True)
class Heatmap:
    """Per-pixel attention for one target class, in [0, 1] at input
    resolution. `degenerate` marks an all-zero gradient field; the values
    are then all zeros rather than a normalization blow-up."""

    values: np.ndarray
    target_class: int
    class_name: Optional[str] = None
    degenerate: bool = False


def _resolve_cam_layer(model: nn.Module,
                       target_layer: Optional[nn.Module]) -> nn.Module:
    if target_layer is not None:
        return target_layer
    path = getattr(model, "cam_layer_path", None)
    root = getattr(model, "backbone", model)
    if path:
        return root.get_submodule(path)
    layer = backbones.last_conv(model)
    if layer is None:
        raise ValueError("model has no convolutional feature maps; "
                         "pass target_layer explicitly")
    return layer


def gradcampp(model: nn.Module, image, target_class: Optional[int] = None,
              target_layer: Optional[nn.Module] = None,
              class_names: Optional[tuple] = None) -> Heatmap:
    """Class-conditional attention map for one image.

    `image` is a (C, H, W) array or tensor, already preprocessed the way
    the model expects. When `target_class` is omitted the predicted class
    is explained. Deterministic: identical (model, image, class) give
    identical heatmaps.
    """
    layer = _resolve_cam_layer(model, target_layer)
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(x.shape)}")
    x = x[None].requires_grad_(True)
    height, width = int(x.shape[-2]), int(x.shape[-1])

    captured = {}

    def save_activations(_module, _inputs, output):
        captured["acts"] = output

    def save_gradients(_module, _grad_in, grad_out):
        captured["grads"] = grad_out[0]

    was_training = model.training
    model.eval()
    h1 = layer.register_forward_hook(save_activations)
    h2 = layer.register_full_backward_hook(save_gradients)
    try:
        logits = model(x)
        if logits.ndim != 2:
            raise ValueError(f"expected (1, num_classes) logits, got "
                             f"{tuple(logits.shape)}")
        if target_class is None:
            target_class = int(logits[0].argmax())
        if not 0 <= target_class < logits.shape[1]:
            raise ValueError(f"target_class {target_class} out of range "
                             f"[0, {logits.shape[1]})")
        model.zero_grad(set_to_none=True)
        logits[0, target_class].backward()
    finally:
        h1.remove()
        h2.remove()
        model.train(was_training)
    if "acts" not in captured or "grads" not in captured:
        raise ValueError("target layer produced no activations or gradients; "
                         "is it on the forward path?")

    acts = captured["acts"][0].detach()
    grads = captured["grads"][0].detach()
    if acts.ndim != 3:
        raise ValueError("target layer output is not a spatial feature map")

    g2 = grads * grads
    g3 = g2 * grads
    channel_sums = acts.sum(dim=(1, 2), keepdim=True)
    denom = 2.0 * g2 + channel_sums * g3
    alpha = torch.where(denom.abs() > 0, g2 / denom, torch.zeros_like(denom))
    weights = (alpha * F.relu(grads)).sum(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * acts).sum(dim=0))

    cam = F.interpolate(cam[None, None], size=(height, width), mode="bilinear",
                        align_corners=False)[0, 0].numpy()
    peak = float(cam.max())
    name = class_names[target_class] if class_names else None
    if peak == 0.0:
        return Heatmap(values=np.zeros_like(cam, dtype=np.float32),
                       target_class=target_class, class_name=name,
                       degenerate=True)
    low = float(cam.min())
    if peak == low:
        values = np.ones_like(cam, dtype=np.float32)
    else:
        values = ((cam - low) / (peak - low)).astype(np.float32)
    return Heatmap(values=values, target_class=target_class, class_name=name)


def overlay(image, heatmap: Heatmap, colormap_name: str = DEFAULT_COLORMAP,
            blend: float = DEFAULT_BLEND,
            out_path=None) -> np.ndarray:
    """Blend a blue-to-red rendering of the heatmap over the grayscale
    image: (1 - blend) * image + blend * colormap(heatmap).

    `image` is (H, W) or (C, H, W) in [0, 1] (the display image, not the
    standardized model input). Returns the uint8 RGB array and writes it
    as a PNG when `out_path` is given.
    """
    if not 0.0 <= blend <= 1.0:
        raise ValueError(f"blend must be in [0, 1], got {blend}")
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray[0]
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W) or (C, H, W) image, got shape "
                         f"{np.asarray(image).shape}")
    values = heatmap.values
    if values.shape != gray.shape:
        raise ValueError(f"heatmap {values.shape} does not match image "
                         f"{gray.shape}")
    cmap = matplotlib.colormaps[colormap_name]
    colors = cmap(values.astype(np.float64))[..., :3]
    blended = (1.0 - blend) * gray[..., None] + blend * colors
    rgb = np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(out_path, format="PNG")
    return rgb
