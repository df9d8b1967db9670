"""Encoder, linear classifier, detached mid-level branch and checkpoints.

Two encoders are available. The MLP maps ``input_dim`` through ReLU hidden
layers to a linear feature layer of width ``feature_dim``. The CNN takes
H x W x C images, applies 3x3 conv + ReLU layers, global-average-pools and
projects linearly to ``feature_dim``. Either can carry an auxiliary head
tapped from one hidden layer; its input is detached by default so its loss
only trains the head itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

CHECKPOINT_MAGIC = "DTRG-PARAMS"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderSpec:
    input_dim: int | tuple = 32  # int for the MLP, (H, W, C) for the CNN
    hidden: tuple = (256, 128)
    feature_dim: int = 64
    num_classes: int = 20
    kind: str = "mlp"
    mid_branch: bool = False
    mid_tap_layer: int = 0
    mid_width: int = 64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if any(h <= 0 for h in self.hidden) or self.feature_dim <= 0 or self.num_classes <= 0:
            raise ValueError("layer widths and class count must be positive")
        if self.kind == "cnn":
            self.input_dim = tuple(int(v) for v in self.input_dim)
            if len(self.input_dim) != 3:
                raise ValueError("cnn input_dim must be (H, W, C)")
        if self.mid_branch and not 0 <= self.mid_tap_layer < len(self.hidden):
            raise ValueError("mid_tap_layer must index a hidden layer")


@dataclass
class ModelParams:
    spec: EncoderSpec
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("mid.")]

    def mid_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith("mid.")]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors.items()}


def _param(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def init_params(spec: EncoderSpec, seed: int) -> ModelParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    t = {}

    def dense(name, fan_in, fan_out):
        t[f"{name}.w"] = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)), f"{name}.w")
        t[f"{name}.b"] = _param(np.zeros(fan_out), f"{name}.b")

    def conv(name, c_in, c_out, k):
        fan_in = c_in * k * k
        t[f"{name}.w"] = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)), f"{name}.w")
        t[f"{name}.b"] = _param(np.zeros(c_out), f"{name}.b")

    if spec.kind == "mlp":
        width = int(spec.input_dim)
        for i, h in enumerate(spec.hidden):
            dense(f"hidden{i}", width, h)
            width = h
        dense("feature", width, spec.feature_dim)
    else:
        channels = spec.input_dim[2]
        for i, h in enumerate(spec.hidden):
            conv(f"conv{i}", channels, h, 3)
            channels = h
        dense("feature", channels, spec.feature_dim)
    dense("cls", spec.feature_dim, spec.num_classes)

    if spec.mid_branch:
        tapped = spec.hidden[spec.mid_tap_layer]
        if spec.kind == "mlp":
            dense("mid.proj", tapped, spec.mid_width)
        else:
            conv("mid.proj", tapped, spec.mid_width, 1)
        dense("mid.cls", spec.mid_width, spec.num_classes)
    return ModelParams(spec, t)


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def forward_features(params: ModelParams, x, return_hidden: bool = False):
    """z = encoder(x). With ``return_hidden`` also return the post-ReLU hidden activations."""
    spec = params.spec
    x = ad.as_tensor(x)
    hidden = []
    if spec.kind == "mlp":
        if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
            raise DimensionError(f"expected (batch, {spec.input_dim}) input, got {x.shape}")
        h = x
        for i in range(len(spec.hidden)):
            h = ad.relu(_linear(h, params, f"hidden{i}"))
            hidden.append(h)
        z = _linear(h, params, "feature")
    else:
        if x.data.ndim != 4 or tuple(x.shape[1:]) != spec.input_dim:
            raise DimensionError(f"expected (batch, {spec.input_dim}) images, got {x.shape}")
        h = ad.transpose(x, (0, 3, 1, 2))
        for i in range(len(spec.hidden)):
            stride = 2 if i == 0 else 1
            h = ad.relu(ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=stride, pad=1))
            hidden.append(h)
        z = _linear(ad.global_avg_pool(h), params, "feature")
    return (z, hidden) if return_hidden else z


def forward_logits(params: ModelParams, z: Tensor) -> Tensor:
    if z.data.ndim != 2 or z.shape[1] != params.spec.feature_dim:
        raise DimensionError(f"expected (batch, {params.spec.feature_dim}) features, got {z.shape}")
    return _linear(z, params, "cls")


def forward_mid(params: ModelParams, hidden: Tensor, detach: bool = True) -> Tensor:
    """Auxiliary logits from the tapped hidden activation.

    With ``detach`` the backbone receives no gradient from these logits.
    """
    spec = params.spec
    if not spec.mid_branch:
        raise RuntimeError("model was built without a mid-level branch")
    h = ad.detach(hidden) if detach else hidden
    if spec.kind == "mlp":
        h = ad.relu(_linear(h, params, "mid.proj"))
    else:
        h = ad.relu(ad.conv2d(h, params["mid.proj.w"], params["mid.proj.b"]))
        h = ad.global_max_pool(h)
    return _linear(h, params, "mid.cls")


def ce_loss(logits: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of the labels under softmax(logits)."""
    y = np.asarray(y, dtype=np.intp)
    k = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return -ad.mean(ad.pick(ad.log_softmax(logits), y))


def ce_loss_mixed(logits: Tensor, y_a, y_b, lam) -> Tensor:
    """Soft-label CE for interpolated targets (1-lam)*onehot(y_a) + lam*onehot(y_b)."""
    lam = np.asarray(lam, dtype=float)
    logp = ad.log_softmax(logits)
    per = (1.0 - lam) * ad.pick(logp, y_a) + lam * ad.pick(logp, y_b)
    return -ad.mean(per)


def predict_ensemble(p_main, p_mid) -> np.ndarray:
    """Argmax of the averaged softmax of both heads; ties go to the lowest class id."""
    p_main = p_main.data if isinstance(p_main, Tensor) else np.asarray(p_main, dtype=float)
    p_mid = p_mid.data if isinstance(p_mid, Tensor) else np.asarray(p_mid, dtype=float)
    if p_main.shape != p_mid.shape:
        raise DimensionError(f"head shapes differ: {p_main.shape} vs {p_mid.shape}")
    probs = 0.5 * (ad.softmax(p_main) + ad.softmax(p_mid))
    return probs.argmax(axis=1)


def predict(params: ModelParams, x, batch_size: int = 512) -> np.ndarray:
    preds = []
    n = len(x)
    for start in range(0, n, batch_size):
        xb = Tensor(x[start:start + batch_size])
        z, hidden = forward_features(params, xb, return_hidden=True)
        logits = forward_logits(params, z)
        if params.spec.mid_branch:
            mid = forward_mid(params, hidden[params.spec.mid_tap_layer])
            preds.append(predict_ensemble(logits, mid))
        else:
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, path) -> None:
    """JSON container: magic, version, encoder spec and named arrays with shapes.

    Floats are written with ``repr`` precision so a load round-trips bit-exactly.
    """
    spec = params.spec
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "spec": {
            "input_dim": spec.input_dim if spec.kind == "mlp" else list(spec.input_dim),
            "hidden": list(spec.hidden),
            "feature_dim": spec.feature_dim,
            "num_classes": spec.num_classes,
            "kind": spec.kind,
            "mid_branch": spec.mid_branch,
            "mid_tap_layer": spec.mid_tap_layer,
            "mid_width": spec.mid_width,
        },
        "arrays": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    spec = EncoderSpec(**doc["spec"])
    tensors = {}
    for name, entry in doc["arrays"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: array {name!r} does not match its shape {shape}")
        tensors[name] = _param(values.reshape(shape), name)
    return ModelParams(spec, tensors)
