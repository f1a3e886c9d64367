"""Differentiable Grad-CAM for 3D classifiers.

Every step keeps the autograd graph (``create_graph=True`` on the class-score
gradient) so a loss built on the heatmap can be backpropagated into the model
parameters, including through the channel weights.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AttributionError, InvalidInputError
from .models import ModelState

# Process-wide counters: "gradcam_calls" (per heatmap batch) and
# "flat_heatmaps" (max == min guard hits).
diagnostics: Counter = Counter()

EPS = 1e-12


@dataclass
class Heatmap:
    voxels: np.ndarray
    source_layer: str
    target_class: int


def as_batch(x, dtype=torch.float32) -> torch.Tensor:
    """Accept ``(H,W,D)``, ``(B,H,W,D)`` or ``(B,C,H,W,D)`` input."""
    t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(dtype)
    if t.ndim == 3:
        t = t[None, None]
    elif t.ndim == 4:
        t = t[:, None]
    if t.ndim != 5:
        raise InvalidInputError(f"expected a 3D volume or a batch of them, got shape {tuple(t.shape)}")
    return t


def forward_with_capture(model: ModelState, x, override: Optional[torch.Tensor] = None):
    """Run the network, returning ``(logits, feature maps at the target layer)``.

    With ``override`` the target layer's output is replaced by that tensor, so
    logits become a function of the supplied feature maps.
    """
    x = as_batch(x, dtype=next(model.net.parameters()).dtype)
    expected_c = model.descriptor.get("in_channels", 1)
    if x.shape[1] != expected_c:
        raise InvalidInputError(f"model expects {expected_c} input channel(s), got {x.shape[1]}")
    expected = model.descriptor.get("input_shape")
    if expected is not None and tuple(x.shape[2:]) != tuple(expected):
        raise InvalidInputError(f"model expects input {tuple(expected)}, got {tuple(x.shape[2:])}")
    captured = {}

    def hook(_module, _inp, out):
        if override is not None:
            out = override
        captured["A"] = out
        return out

    handle = model.target_module.register_forward_hook(hook)
    try:
        logits = model.net(x)
    finally:
        handle.remove()
    A = captured.get("A")
    if A is None or A.ndim != 5:
        raise InvalidInputError(f"target layer {model.target_layer!r} did not produce 3D feature maps")
    return logits, A


def gradcam_weights(z_c: torch.Tensor, A: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Channel weights: spatial mean of d z_c / d A, shape ``(B, K)``.

    ``z_c`` holds one class score per batch element. Samples must not interact
    between ``A`` and ``z_c`` for the per-sample gradients to be separable.
    """
    if not (torch.is_tensor(z_c) and z_c.requires_grad):
        raise AttributionError("class score is detached from the graph; Grad-CAM weights unavailable")
    (grad,) = torch.autograd.grad(z_c.sum(), A, create_graph=create_graph, retain_graph=True, allow_unused=True)
    if grad is None:
        raise AttributionError("class score does not depend on the captured feature maps")
    return grad.mean(dim=tuple(range(2, grad.ndim)))


def gradcam_heatmap(alpha: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    """``ReLU(sum_k alpha_k * A_k)`` at feature-map resolution, shape ``(B, *spatial)``."""
    alpha = torch.as_tensor(alpha)
    A = torch.as_tensor(A)
    if alpha.shape[:2] != A.shape[:2]:
        raise InvalidInputError(f"channel weights {tuple(alpha.shape)} do not match feature maps {tuple(A.shape)}")
    w = alpha.reshape(alpha.shape + (1,) * (A.ndim - 2))
    return F.relu((w * A).sum(dim=1))


def refine_to_input(raw: torch.Tensor, input_shape: Sequence[int], mode: str = "trilinear",
                    normalize_grad: str = "detached") -> torch.Tensor:
    """Upsample a raw heatmap batch to ``input_shape`` and min-max scale to [0, 1].

    ``normalize_grad="detached"`` treats the per-sample min and max as constants
    during backpropagation; ``"full"`` differentiates through them as well. A
    sample whose upsampled map is flat becomes all zeros.
    """
    raw = torch.as_tensor(raw)
    squeeze = raw.ndim == 3
    if squeeze:
        raw = raw[None]
    input_shape = tuple(int(s) for s in input_shape)
    h = raw[:, None]
    if tuple(h.shape[2:]) != input_shape:
        if mode == "trilinear":
            h = F.interpolate(h, size=input_shape, mode="trilinear", align_corners=False)
        elif mode == "nearest":
            h = F.interpolate(h, size=input_shape, mode="nearest")
        else:
            raise InvalidInputError(f"unknown upsampling mode {mode!r}")
    h = h[:, 0]
    dims = tuple(range(1, h.ndim))
    lo = h.amin(dim=dims, keepdim=True)
    hi = h.amax(dim=dims, keepdim=True)
    if normalize_grad == "detached":
        lo, hi = lo.detach(), hi.detach()
    elif normalize_grad != "full":
        raise InvalidInputError(f"normalize_grad must be 'detached' or 'full', got {normalize_grad!r}")
    span = hi - lo
    flat = span <= EPS
    n_flat = int(flat.sum())
    if n_flat:
        diagnostics["flat_heatmaps"] += n_flat
    out = torch.where(flat, torch.zeros_like(h), (h - lo) / torch.where(flat, torch.ones_like(span), span))
    return out[0] if squeeze else out


def compute_heatmaps(model: ModelState, x, target_classes=None, *, mode: str = "trilinear",
                     normalize_grad: str = "detached", create_graph: bool = True):
    """Forward pass plus Grad-CAM in one go.

    Returns ``(logits, heatmaps)`` with heatmaps shaped like the input grid.
    ``target_classes=None`` uses each sample's predicted class.
    """
    diagnostics["gradcam_calls"] += 1
    x = as_batch(x, dtype=next(model.net.parameters()).dtype)
    with torch.enable_grad():
        logits, A = forward_with_capture(model, x)
        if target_classes is None:
            target_classes = logits.argmax(dim=1)
        idx = torch.as_tensor(target_classes, dtype=torch.long).reshape(-1)
        z_c = logits.gather(1, idx[:, None])[:, 0]
        alpha = gradcam_weights(z_c, A, create_graph=create_graph)
        raw = gradcam_heatmap(alpha, A)
        h = refine_to_input(raw, x.shape[2:], mode=mode, normalize_grad=normalize_grad)
    return logits, h


def heatmap(model: ModelState, volume, target_class: Optional[int] = None, mode: str = "trilinear") -> Heatmap:
    """Detached heatmap for one volume; defaults to the predicted class."""
    was_training = model.net.training
    model.net.eval()
    try:
        logits, h = compute_heatmaps(model, volume, None if target_class is None else [target_class],
                                     mode=mode, create_graph=False)
    finally:
        model.net.train(was_training)
    cls = int(logits.argmax(dim=1)[0]) if target_class is None else int(target_class)
    return Heatmap(h[0].detach().cpu().numpy().astype(np.float32), model.target_layer, cls)


def binarize(h, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise InvalidInputError(f"threshold must lie in (0, 1), got {threshold}")
    voxels = h.voxels if isinstance(h, Heatmap) else h
    if torch.is_tensor(voxels):
        voxels = voxels.detach().cpu().numpy()
    return (np.asarray(voxels) >= threshold).astype(np.uint8)
