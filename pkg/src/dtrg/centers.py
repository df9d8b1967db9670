"""Non-parametric class centers kept as running per-epoch feature means."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

COUNT_EPS = 1e-8


@dataclass
class CenterState:
    C: np.ndarray  # centers from the previous epoch, constant during the current one
    M: np.ndarray  # running feature sums of the current epoch
    V: np.ndarray  # running (possibly fractional) sample counts
    epoch: int = 0

    @property
    def num_classes(self) -> int:
        return self.C.shape[0]


def init_centers(num_classes: int, dim: int, seed: int) -> CenterState:
    if num_classes <= 0 or dim <= 0:
        raise ValueError("num_classes and dim must be positive")
    rng = np.random.default_rng(seed)
    return CenterState(
        C=rng.standard_normal((num_classes, dim)),
        M=np.zeros((num_classes, dim)),
        V=np.zeros(num_classes),
    )


def _labels(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def _values(z) -> np.ndarray:
    return z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def accumulate(state: CenterState, z, y) -> None:
    """Add each feature row to its class sum and count it once."""
    y = _labels(y, state.num_classes)
    z = _values(z)
    np.add.at(state.M, y, z)
    np.add.at(state.V, y, 1.0)


def accumulate_mixed(state: CenterState, z, y_a, y_b, lam) -> None:
    """Split each mixed feature between its two source classes by (1 - lam, lam)."""
    k = state.num_classes
    y_a, y_b = _labels(y_a, k), _labels(y_b, k)
    z = _values(z)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), y_a.shape)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("mixing coefficients must lie in [0, 1]")
    keep = 1.0 - lam
    np.add.at(state.M, y_a, keep[:, None] * z)
    np.add.at(state.V, y_a, keep)
    np.add.at(state.M, y_b, lam[:, None] * z)
    np.add.at(state.V, y_b, lam)


def finalize_epoch(state: CenterState, count_eps: float = COUNT_EPS) -> None:
    """Replace centers by the epoch means; classes with no mass keep their old center."""
    seen = state.V > count_eps
    state.C[seen] = state.M[seen] / state.V[seen][:, None]
    state.M[:] = 0.0
    state.V[:] = 0.0
    state.epoch += 1


def ocl_loss(z: Tensor, y, C: np.ndarray) -> Tensor:
    """Mean squared distance of each feature to its (constant) class center."""
    y = _labels(y, C.shape[0])
    diff = ad.sub(z, C[y])
    return ad.mean(ad.sum_(ad.square(diff), axis=1))


def ocl_loss_mixed(z: Tensor, y_a, y_b, lam, C: np.ndarray) -> Tensor:
    k = C.shape[0]
    y_a, y_b = _labels(y_a, k), _labels(y_b, k)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), y_a.shape)
    d_a = ad.sum_(ad.square(ad.sub(z, C[y_a])), axis=1)
    d_b = ad.sum_(ad.square(ad.sub(z, C[y_b])), axis=1)
    return ad.mean((1.0 - lam) * d_a + lam * d_b)


def dump_centers_csv(state: CenterState, path) -> None:
    """K rows of d comma-separated values after a ``# epoch=<t>`` header line."""
    lines = [f"# epoch={state.epoch}"]
    lines += [",".join(repr(float(v)) for v in row) for row in state.C]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_centers_csv(path) -> tuple[int, np.ndarray]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    epoch = int(text[0].split("=", 1)[1])
    return epoch, np.array([[float(v) for v in line.split(",")] for line in text[1:] if line])
