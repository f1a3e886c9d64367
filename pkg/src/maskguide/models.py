"""3D convolutional classifiers and their checkpoint format.

A model is described by a plain JSON-able dict so checkpoints can rebuild it.
Every architecture ends in global average pooling and a single linear layer
producing logits.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError

COMPACT = {
    "arch": "densenet",
    "in_channels": 1,
    "num_classes": 2,
    "stem_channels": 8,
    "stem_stride": 2,
    "stem_kernel": 3,
    "stem_pool": True,
    "blocks": [1, 2, 2, 2],
    "growth": [4, 6, 6, 8],
    "bn_size": 0,
    "compression": 0.5,
    "pool_after": [False, False, False, False],
    "head_channels": 16,
    "norm": "none",
}

DENSENET169 = {
    "arch": "densenet",
    "in_channels": 1,
    "num_classes": 2,
    "stem_channels": 64,
    "stem_stride": 2,
    "stem_kernel": 7,
    "stem_pool": True,
    "blocks": [6, 12, 32, 32],
    "growth": [32, 32, 32, 32],
    "bn_size": 4,
    "compression": 0.5,
    "pool_after": [True, True, True, False],
    "head_channels": 0,
    "norm": "batch",
}

TOY = {"arch": "toy", "in_channels": 1, "num_classes": 2, "channels": [4, 4], "bias": True}

PRESETS = {"compact": COMPACT, "densenet169": DENSENET169, "toy": TOY}


def _norm(kind, channels):
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    if kind == "group":
        return nn.GroupNorm(1, channels)
    return nn.Identity()


class DenseLayer(nn.Module):
    def __init__(self, in_ch, growth, bn_size, norm):
        super().__init__()
        layers = [_norm(norm, in_ch), nn.ReLU()]
        if bn_size:
            layers += [nn.Conv3d(in_ch, bn_size * growth, 1, bias=False), _norm(norm, bn_size * growth), nn.ReLU()]
            in_ch = bn_size * growth
        layers.append(nn.Conv3d(in_ch, growth, 3, padding=1, bias=norm == "none"))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return torch.cat([x, self.body(x)], dim=1)


class Transition(nn.Module):
    def __init__(self, in_ch, out_ch, pool, norm):
        super().__init__()
        self.norm = _norm(norm, in_ch)
        self.conv = nn.Conv3d(in_ch, out_ch, 1, bias=norm == "none")
        self.pool = nn.AvgPool3d(2, ceil_mode=True) if pool else nn.Identity()

    def forward(self, x):
        return self.pool(self.conv(F.relu(self.norm(x))))


class DenseNet3D(nn.Module):
    def __init__(self, d: dict):
        super().__init__()
        norm = d.get("norm", "none")
        k = d["stem_kernel"]
        stem = [nn.Conv3d(d["in_channels"], d["stem_channels"], k, stride=d["stem_stride"], padding=k // 2)]
        if d.get("stem_pool"):
            stem += [_norm(norm, d["stem_channels"]), nn.ReLU(), nn.MaxPool3d(3, stride=2, padding=1)]
        self.stem = nn.Sequential(*stem)
        ch = d["stem_channels"]
        blocks = []
        n_blocks = len(d["blocks"])
        for b, (n_layers, growth) in enumerate(zip(d["blocks"], d["growth"])):
            layers = []
            for _ in range(n_layers):
                layers.append(DenseLayer(ch, growth, d.get("bn_size", 0), norm))
                ch += growth
            blocks.append(nn.Sequential(*layers))
            if b < n_blocks - 1:
                out = max(1, int(ch * d.get("compression", 0.5)))
                blocks.append(Transition(ch, out, d["pool_after"][b], norm))
                ch = out
        self.features = nn.Sequential(*blocks)
        self.final_norm = _norm(norm, ch)
        if d.get("head_channels"):
            self.head = nn.Conv3d(ch, d["head_channels"], 1)
            ch = d["head_channels"]
        else:
            self.head = nn.Identity()
        self.fc = nn.Linear(ch, d["num_classes"])
        self.feature_width = ch

    def forward(self, x):
        a = self.head(F.relu(self.final_norm(self.features(self.stem(x)))))
        return self.fc(F.relu(a).mean(dim=(2, 3, 4)))


class ToyNet(nn.Module):
    """Two plain convolutions, ReLU, pooling and a linear head."""

    def __init__(self, d: dict):
        super().__init__()
        c1, c2 = d["channels"]
        bias = d.get("bias", True)
        self.conv1 = nn.Conv3d(d["in_channels"], c1, 3, padding=1, bias=bias)
        self.conv2 = nn.Conv3d(c1, c2, 3, padding=1, bias=bias)
        self.fc = nn.Linear(c2, d["num_classes"], bias=bias)
        self.feature_width = c2

    def forward(self, x):
        a = self.conv2(F.relu(self.conv1(x)))
        return self.fc(F.relu(a).mean(dim=(2, 3, 4)))


def default_target_layer(d: dict) -> str:
    if d["arch"] == "toy":
        return "conv2"
    return "head" if d.get("head_channels") else "final_norm"


@dataclass
class ModelState:
    """A classifier together with the layer Grad-CAM reads from."""

    net: nn.Module
    target_layer: str
    descriptor: dict

    def __post_init__(self):
        modules = dict(self.net.named_modules())
        if self.target_layer not in modules:
            raise InvalidInputError(f"target layer {self.target_layer!r} not found in model")

    @property
    def target_module(self) -> nn.Module:
        return dict(self.net.named_modules())[self.target_layer]

    def clone(self) -> "ModelState":
        return ModelState(copy.deepcopy(self.net), self.target_layer, copy.deepcopy(self.descriptor))

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.net.state_dict().values() if p.is_floating_point()])


def resolve_descriptor(arch="compact", **overrides) -> dict:
    if isinstance(arch, dict):
        d = copy.deepcopy(arch)
    elif arch in PRESETS:
        d = copy.deepcopy(PRESETS[arch])
    else:
        raise InvalidInputError(f"unknown architecture preset {arch!r}")
    d.update(overrides)
    return d


def build_model(descriptor="compact", seed: int = 0, target_layer: str | None = None, dtype=torch.float32) -> ModelState:
    d = resolve_descriptor(descriptor)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = ToyNet(d) if d["arch"] == "toy" else DenseNet3D(d)
    finally:
        torch.random.set_rng_state(gen_state)
    net = net.to(dtype)
    return ModelState(net, target_layer or default_target_layer(d), d)


def parameter_count(model: ModelState) -> int:
    return sum(p.numel() for p in model.net.parameters())


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: ModelState, directory) -> Path:
    """Write ``params.bin`` (flat little-endian blob) and ``architecture.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    for name, t in model.net.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    blob = b"".join(chunks)
    (directory / "params.bin").write_bytes(blob)
    meta = {
        "descriptor": model.descriptor,
        "target_layer": model.target_layer,
        "tensors": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    (directory / "architecture.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> ModelState:
    directory = Path(directory)
    meta = json.loads((directory / "architecture.json").read_text())
    blob = (directory / "params.bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise InvalidInputError(f"{directory}: parameter blob checksum mismatch")
    first = next((e for e in meta["tensors"] if e["dtype"].endswith("f8")), None)
    dtype = torch.float64 if first is not None else torch.float32
    model = build_model(meta["descriptor"], seed=0, target_layer=meta["target_layer"], dtype=dtype)
    state, offset = {}, 0
    for e in meta["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(e["shape"])
        offset += count * dt.itemsize
        state[e["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    model.net.load_state_dict(state)
    return model
