"""Exp-cosine relation graphs between class centers and the graph similarity losses.

The target graph ``G`` (K x K) compares every pair of previous-epoch
centers; a sample's graph ``S`` (K,) compares its feature to every center.
Both use ``exp(cos / tau)``, so entries live in ``[e^(-1/tau), e^(1/tau)]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

EPS = 1e-12


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / np.maximum(norm, EPS)


def cos_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = float(np.dot(a, b) / (max(np.linalg.norm(a), EPS) * max(np.linalg.norm(b), EPS)))
    return min(1.0, max(-1.0, c))


def sim(a, b, tau: float) -> float:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return float(np.exp(cos_sim(a, b) / tau))


@dataclass(frozen=True)
class RelationGraph:
    G: np.ndarray
    G_hat: np.ndarray
    tau: float
    epoch: int = 0


@dataclass
class SampleGraphBatch:
    S: Tensor
    S_hat: Tensor


def build_target_graph(C: np.ndarray, tau: float, epoch: int = 0) -> RelationGraph:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    C = np.asarray(C, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise FloatingPointError("centers contain non-finite values")
    unit = _unit(C)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    cos = 0.5 * (cos + cos.T)
    G = np.exp(cos / tau)
    G_hat = G / G.sum(axis=1, keepdims=True)
    return RelationGraph(G=G, G_hat=G_hat, tau=float(tau), epoch=epoch)


def sample_graph(z: Tensor, C: np.ndarray, tau: float) -> SampleGraphBatch:
    """Differentiable (in ``z``) similarities of each feature row to all centers."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    C = np.asarray(C, dtype=np.float64)
    if z.shape[1] != C.shape[1]:
        raise ad.DimensionError(f"feature width {z.shape[1]} vs center width {C.shape[1]}")
    cos = ad.matmul(ad.l2_normalize_rows(z, EPS), _unit(C).T)
    S = ad.exp(ad.mul(cos, 1.0 / tau))
    S_hat = ad.div(S, ad.sum_(S, axis=1, keepdims=True))
    return SampleGraphBatch(S=S, S_hat=S_hat)


def _labels(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def gsl_euclidean(S: Tensor, G: np.ndarray, y) -> Tensor:
    """Mean squared Euclidean distance between each sample graph and its label's row of G."""
    y = _labels(y, G.shape[0])
    return ad.mean(ad.sum_(ad.square(ad.sub(S, G[y])), axis=1))


def gsl_kl(S_hat: Tensor, G_hat: np.ndarray, y) -> Tensor:
    """Mean KL(G_hat[y_i] || S_hat_i); the target rows are constants."""
    y = _labels(y, G_hat.shape[0])
    target = G_hat[y]
    if np.any(target <= 0) or np.any(S_hat.data <= 0):
        raise ValueError("KL graph loss needs strictly positive distributions")
    entropy_term = np.sum(target * np.log(target), axis=1)
    cross = ad.sum_(ad.mul(ad.log(S_hat), target), axis=1)
    return ad.mean(ad.sub(entropy_term, cross))


def gsl_mixed(S: Tensor, G: np.ndarray, y_a, y_b, lam) -> Tensor:
    k = G.shape[0]
    y_a, y_b = _labels(y_a, k), _labels(y_b, k)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("mixing coefficients must lie in [0, 1]")
    lam = np.broadcast_to(lam, y_a.shape)
    d_a = ad.sum_(ad.square(ad.sub(S, G[y_a])), axis=1)
    d_b = ad.sum_(ad.square(ad.sub(S, G[y_b])), axis=1)
    return ad.mean((1.0 - lam) * d_a + lam * d_b)


def dump_graph_csv(graph: RelationGraph, path) -> None:
    lines = [f"# epoch={graph.epoch} tau={graph.tau!r}"]
    lines += [",".join(repr(float(v)) for v in row) for row in graph.G]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
