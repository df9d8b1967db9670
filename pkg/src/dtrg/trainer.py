"""Training loop: a CE-only warm-up followed by CE + beta * OCL + eta * GSL under momentum SGD."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .augment import DEFAULT_ALPHA, MODES, mix_batch
from .autodiff import Tensor
from .centers import CenterState, accumulate, accumulate_mixed, finalize_epoch, init_centers, ocl_loss, ocl_loss_mixed
from .data import Dataset
from .model import (EncoderSpec, ModelParams, ce_loss, ce_loss_mixed, forward_features, forward_logits,
                    forward_mid, init_params, predict)
from .relgraph import RelationGraph, build_target_graph, gsl_euclidean, gsl_kl, gsl_mixed, sample_graph


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, reason: str, history: list):
        super().__init__(f"training aborted at epoch {epoch}, batch {batch}: {reason}")
        self.epoch = epoch
        self.batch = batch
        self.reason = reason
        self.history = history


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    warmup: int = 2  # epochs t < warmup train on CE only (1-based epochs)
    batch_size: int = 16
    lr0: float = 0.01
    milestones: tuple = (40, 70)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta: float = 1e-3
    eta: Optional[float] = None  # None -> 1 (euclidean) or 10 (kl)
    tau: Optional[float] = None  # None -> 1, or 2 with the mid branch
    gsl_variant: str = "euclidean"
    augment: str = "none"
    alpha: Optional[float] = None  # None -> 0.1 for mixup, 1 for cutmix
    fixed_lambda: Optional[float] = None  # pins the mixing coefficient (ablation / testing)
    mid_branch: bool = False
    detach_mid: bool = True
    encoder: str = "mlp"
    hidden: tuple = (256, 128)
    feature_dim: int = 64
    mid_tap_layer: int = 0
    mid_width: int = 64

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.eta is None:
            self.eta = 10.0 if self.gsl_variant == "kl" else 1.0
        if self.tau is None:
            self.tau = 2.0 if self.mid_branch else 1.0
        if self.alpha is None and self.augment in DEFAULT_ALPHA:
            self.alpha = DEFAULT_ALPHA[self.augment]
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if self.warmup < 1:
            problems.append("warmup: must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.lr0 <= 0:
            problems.append("lr0: must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            problems.append("milestones: must be strictly increasing")
        if any(m >= self.epochs or m < 1 for m in self.milestones):
            problems.append("milestones: must lie in [1, epochs)")
        if self.beta < 0:
            problems.append("beta: must be >= 0")
        if self.eta < 0:
            problems.append("eta: must be >= 0")
        if self.tau <= 0:
            problems.append("tau: must be positive")
        if self.gsl_variant not in ("euclidean", "kl"):
            problems.append("gsl_variant: must be 'euclidean' or 'kl'")
        if self.augment not in MODES:
            problems.append(f"augment: must be one of {MODES}")
        if self.augment != "none" and self.gsl_variant == "kl":
            problems.append("gsl_variant: the mixed graph loss is Euclidean only")
        if self.augment != "none" and (self.alpha is None or self.alpha <= 0):
            problems.append("alpha: must be positive")
        if self.fixed_lambda is not None and not 0 <= self.fixed_lambda <= 1:
            problems.append("fixed_lambda: must lie in [0, 1]")
        if self.encoder not in ("mlp", "cnn"):
            problems.append("encoder: must be 'mlp' or 'cnn'")
        if self.mid_branch and not 0 <= self.mid_tap_layer < len(self.hidden):
            problems.append("mid_tap_layer: must index a hidden layer")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EpochMetrics:
    epoch: int
    loss_ce: float
    loss_ocl: float
    loss_gsl: float
    loss_total: float
    test_top1: float
    per_class_acc: np.ndarray
    confusion: np.ndarray
    seconds: float
    lr: float = 0.0


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    index: np.ndarray
    features: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    lam: np.ndarray
    loss_ce: float
    loss_ocl: float
    loss_gsl: float
    loss_total: float


@dataclass
class Evaluation:
    top1: float
    per_class_acc: np.ndarray
    confusion: np.ndarray


def total_loss(loss_ce, loss_ocl, loss_gsl, beta: float, eta: float):
    return loss_ce + beta * loss_ocl + eta * loss_gsl


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float) -> None:
    """In-place SGD with coupled weight decay and heavy-ball momentum."""
    for i, (theta, g, v) in enumerate(zip(params, grads, velocity)):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise ad.DimensionError(f"parameter {i}: shapes {theta.shape}, {g.shape}, {v.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i} (shape {theta.shape})")
        g = g + weight_decay * theta
        v *= momentum
        v += g
        theta -= lr * v


def lr_at(epoch: int, config: TrainConfig) -> float:
    passed = sum(1 for m in config.milestones if m <= epoch)
    return config.lr0 * config.lr_decay ** passed


def confusion_metrics(y_true, y_pred, num_classes: int) -> Evaluation:
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    total = confusion.sum()
    top1 = float(np.trace(confusion) / total) if total else 0.0
    rows = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), rows, out=np.zeros(num_classes), where=rows > 0)
    return Evaluation(top1, per_class, confusion)


def evaluate(params: ModelParams, test: Dataset) -> Evaluation:
    """Top-1, per-class accuracy and confusion (rows: true class, columns: predicted)."""
    return confusion_metrics(test.labels, predict(params, test.inputs), test.num_classes)


def encoder_spec(config: TrainConfig, train: Dataset) -> EncoderSpec:
    input_dim = train.inputs.shape[1] if config.encoder == "mlp" else tuple(train.inputs.shape[1:])
    return EncoderSpec(input_dim=input_dim, hidden=config.hidden, feature_dim=config.feature_dim,
                       num_classes=train.num_classes, kind=config.encoder, mid_branch=config.mid_branch,
                       mid_tap_layer=config.mid_tap_layer, mid_width=config.mid_width)


class Trainer:
    """Runs the epoch loop and exposes the parameters and center/graph state for inspection.

    ``on_batch`` receives a :class:`BatchRecord` after every update,
    ``on_epoch`` receives ``(trainer, metrics)`` after centers and graph
    have been refreshed.
    """

    def __init__(self, config: TrainConfig, train: Dataset, test: Dataset,
                 on_batch: Optional[Callable] = None, on_epoch: Optional[Callable] = None):
        if train.num_classes != test.num_classes:
            raise ValueError("train and test disagree on the number of classes")
        if config.encoder == "cnn":
            train, test = train.with_channel(), test.with_channel()
        self.config = config
        self.train_set = train
        self.test_set = test
        self.on_batch = on_batch
        self.on_epoch = on_epoch
        param_seed, center_seed, shuffle_seed, aug_seed = np.random.SeedSequence(config.seed).generate_state(4)
        self.params = init_params(encoder_spec(config, train), int(param_seed))
        self.centers: CenterState = init_centers(train.num_classes, config.feature_dim, int(center_seed))
        self.graph: RelationGraph = build_target_graph(self.centers.C, config.tau, epoch=0)
        self.shuffle_rng = np.random.default_rng(int(shuffle_seed))
        self.aug_rng = np.random.default_rng(int(aug_seed))
        self.velocity = [np.zeros_like(p.data) for p in self.params.parameters()]
        self.history: list[EpochMetrics] = []

    def _losses(self, z: Tensor, hidden, y_a, y_b, lam, mixed: bool, regularize: bool):
        cfg = self.config
        params = self.params
        logits = forward_logits(params, z)
        ce = ce_loss_mixed(logits, y_a, y_b, lam) if mixed else ce_loss(logits, y_a)
        if cfg.mid_branch:
            mid = forward_mid(params, hidden[cfg.mid_tap_layer], detach=cfg.detach_mid)
            ce = ce + (ce_loss_mixed(mid, y_a, y_b, lam) if mixed else ce_loss(mid, y_a))
        ocl = gsl = 0.0
        if regularize and cfg.beta > 0:
            C = self.centers.C
            ocl = ocl_loss_mixed(z, y_a, y_b, lam, C) if mixed else ocl_loss(z, y_a, C)
        if regularize and cfg.eta > 0:
            graph = sample_graph(z, self.centers.C, cfg.tau)
            if mixed:
                gsl = gsl_mixed(graph.S, self.graph.G, y_a, y_b, lam)
            elif cfg.gsl_variant == "kl":
                gsl = gsl_kl(graph.S_hat, self.graph.G_hat, y_a)
            else:
                gsl = gsl_euclidean(graph.S, self.graph.G, y_a)
        return ce, ocl, gsl, total_loss(ce, ocl, gsl, cfg.beta, cfg.eta)

    def run_epoch(self, epoch: int) -> EpochMetrics:
        cfg = self.config
        start_time = time.perf_counter()
        lr = lr_at(epoch, cfg)
        x_all, y_all = self.train_set.inputs, self.train_set.labels
        order = self.shuffle_rng.permutation(len(y_all))
        mixed = cfg.augment != "none"
        regularize = epoch >= cfg.warmup
        parameters = self.params.parameters()
        sums = np.zeros(4)
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = mix_batch(x_all[idx], y_all[idx], cfg.augment, cfg.alpha or 1.0, self.aug_rng,
                              fixed_lambda=cfg.fixed_lambda)
            try:
                z, hidden = forward_features(self.params, Tensor(batch.x), return_hidden=True)
                if mixed:
                    accumulate_mixed(self.centers, z, batch.y_a, batch.y_b, batch.lam)
                else:
                    accumulate(self.centers, z, batch.y_a)
                ce, ocl, gsl, total = self._losses(z, hidden, batch.y_a, batch.y_b, batch.lam, mixed, regularize)
                self.params.zero_grad()
                ad.backward(total)
                grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in parameters]
                sgd_step([p.data for p in parameters], grads, self.velocity, lr, cfg.momentum, cfg.weight_decay)
            except FloatingPointError as exc:
                raise TrainingAborted(epoch, b, str(exc), self.history) from exc
            values = [float(ce.item()), _scalar(ocl), _scalar(gsl), float(total.item())]
            sums += values
            n_batches += 1
            if self.on_batch is not None:
                self.on_batch(BatchRecord(epoch, b, idx, z.data.copy(), batch.y_a, batch.y_b, batch.lam, *values))

        finalize_epoch(self.centers)
        self.graph = build_target_graph(self.centers.C, cfg.tau, epoch=self.centers.epoch)
        ev = evaluate(self.params, self.test_set)
        means = sums / max(n_batches, 1)
        metrics = EpochMetrics(epoch, *map(float, means), ev.top1, ev.per_class_acc, ev.confusion,
                               time.perf_counter() - start_time, lr)
        self.history.append(metrics)
        if self.on_epoch is not None:
            self.on_epoch(self, metrics)
        return metrics

    def run(self) -> list[EpochMetrics]:
        for epoch in range(len(self.history) + 1, self.config.epochs + 1):
            self.run_epoch(epoch)
        return self.history


def _scalar(v) -> float:
    return float(v.item()) if isinstance(v, Tensor) else float(v)


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset, **hooks) -> list[EpochMetrics]:
    return Trainer(config, train_set, test_set, **hooks).run()
