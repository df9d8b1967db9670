"""Command-line experiment runner.

Subcommands::

    dtrg run --config cfg.json [--out DIR]
    dtrg sweep-sparsity --config cfg.json [--fractions 1,0.5,0.3,0.1] [--seeds 5] [--out DIR]
    dtrg sweep-imbalance --config cfg.json [--fractions 0.1,0.5,0.9] [--seeds 5] [--out DIR]
    dtrg gradcheck
    dtrg report --out DIR

The config file is a JSON object holding ``TrainConfig`` fields plus an
optional ``dataset`` object and ``save_checkpoint`` flag. ``seed`` is
required; unknown keys are rejected. When ``--out`` is omitted the output
goes under ``$DTRG_OUT_DIR`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import Tensor
from .centers import ocl_loss, ocl_loss_mixed
from .data import Dataset, gen_synthetic, load_csv, load_idx, sparsify, step_imbalance, step_levels
from .model import EncoderSpec, ce_loss, forward_features, forward_logits, init_params, \
    save_checkpoint
from .relgraph import build_target_graph, gsl_euclidean, gsl_kl, gsl_mixed, sample_graph
from .trainer import EpochMetrics, TrainConfig, Trainer, TrainingAborted, total_loss, train

METRICS_HEADER = ["epoch", "loss_ce", "loss_ocl", "loss_gsl", "loss_total", "test_top1", "seconds"]
SPARSITY_HEADER = ["fraction", "method", "seed", "top1"]
IMBALANCE_HEADER = ["fraction", "method", "seed", "top1", "step_levels", "levels_ok"]
DEFAULT_SPARSITY = (1.0, 0.5, 0.3, 0.1)
DEFAULT_IMBALANCE = (0.1, 0.5, 0.9)
GRADCHECK_THRESHOLD = 1e-4
METHODS = ("baseline", "dtrg")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3

DATASET_KEYS = {
    "synthetic": {"kind", "num_classes", "superclasses", "d_in", "n_per_class", "within_spread",
                  "between_spread", "test_fraction", "seed"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels", "num_classes"},
    "csv": {"kind", "train", "test", "num_classes"},
}


class ConfigError(ValueError):
    """Config problem; the message names the offending field."""


# ---------------------------------------------------------------- config


def parse_config(raw: dict, base_dir: Path | None = None) -> tuple[TrainConfig, dict, bool]:
    """Validate a decoded JSON config. Returns (train config, dataset spec, save_checkpoint)."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    allowed = set(TrainConfig.field_names()) | {"dataset", "save_checkpoint"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config key")
    if "seed" not in raw:
        raise ConfigError("seed: required field is missing")
    if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
        raise ConfigError("seed: must be an integer")
    fields = {k: v for k, v in raw.items() if k not in ("dataset", "save_checkpoint")}
    try:
        config = TrainConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    dataset = _parse_dataset(raw.get("dataset", {"kind": "synthetic"}), base_dir)
    save = raw.get("save_checkpoint", False)
    if not isinstance(save, bool):
        raise ConfigError("save_checkpoint: must be true or false")
    return config, dataset, save


def _parse_dataset(spec, base_dir: Path | None) -> dict:
    if not isinstance(spec, dict):
        raise ConfigError("dataset: must be an object")
    spec = dict(spec)
    kind = spec.setdefault("kind", "synthetic")
    if kind not in DATASET_KEYS:
        raise ConfigError(f"dataset.kind: must be one of {sorted(DATASET_KEYS)}")
    unknown = sorted(set(spec) - DATASET_KEYS[kind])
    if unknown:
        raise ConfigError(f"dataset.{unknown[0]}: unknown key for a {kind} dataset")
    required = DATASET_KEYS[kind] - {"kind", "num_classes"} if kind != "synthetic" else set()
    missing = sorted(required - set(spec))
    if missing:
        raise ConfigError(f"dataset.{missing[0]}: required field is missing")
    if kind != "synthetic" and base_dir is not None:
        for key in required:
            spec[key] = str((base_dir / spec[key]).resolve())
    return spec


def load_config(path) -> tuple[TrainConfig, dict, bool]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config(raw, path.parent)


def load_datasets(spec: dict, seed: int) -> tuple[Dataset, Dataset]:
    """Build (train, test). Synthetic data uses the run seed unless the dataset entry pins one."""
    kind = spec["kind"]
    if kind == "synthetic":
        kw = {k: v for k, v in spec.items() if k != "kind"}
        kw.setdefault("seed", seed)
        try:
            return gen_synthetic(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dataset: {exc}") from exc
    if kind == "idx":
        k = spec.get("num_classes")
        train_set = load_idx(spec["train_images"], spec["train_labels"], num_classes=k, split="train")
        test_set = load_idx(spec["test_images"], spec["test_labels"], num_classes=k, split="test")
    else:
        k = spec.get("num_classes")
        train_set = load_csv(spec["train"], num_classes=k, split="train")
        test_set = load_csv(spec["test"], num_classes=k, split="test")
    if train_set.num_classes != test_set.num_classes:
        # label sets can differ when the class count is inferred; align on the larger
        k = max(train_set.num_classes, test_set.num_classes)
        train_set = Dataset(train_set.inputs, train_set.labels, k, "train", train_set.provenance)
        test_set = Dataset(test_set.inputs, test_set.labels, k, "test", test_set.provenance)
    return train_set, test_set


def config_digest(config: TrainConfig, dataset: dict) -> str:
    blob = json.dumps({"train": config.to_dict(), "dataset": dataset}, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def baseline_of(config: TrainConfig) -> TrainConfig:
    """Same run with the relation-graph machinery switched off: CE only, no augmentation."""
    d = config.to_dict()
    d.update(beta=0.0, eta=0.0, augment="none", alpha=None, fixed_lambda=None)
    return TrainConfig(**d)


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    d = config.to_dict()
    d["seed"] = seed
    return TrainConfig(**d)


# ---------------------------------------------------------------- output


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return f"dtrg-{__version__}"
    rev = out.stdout.strip() if out.returncode == 0 else "nogit"
    return f"dtrg-{__version__}+{rev}"


def metrics_rows(history: Sequence[EpochMetrics]) -> list[list]:
    return [[m.epoch, repr(m.loss_ce), repr(m.loss_ocl), repr(m.loss_gsl), repr(m.loss_total),
             repr(m.test_top1), f"{m.seconds:.6f}"] for m in history]


def summarize(history: Sequence[EpochMetrics], digest: str) -> dict:
    if not history:
        return {"final_top1": None, "best_top1": None, "best_epoch": None, "config_digest": digest}
    best = max(history, key=lambda m: (m.test_top1, -m.epoch))
    last = history[-1]
    return {"final_top1": last.test_top1, "best_top1": best.test_top1, "best_epoch": best.epoch,
            "config_digest": digest, "final_loss_ce": last.loss_ce, "final_loss_ocl": last.loss_ocl,
            "final_loss_gsl": last.loss_gsl, "final_loss_total": last.loss_total, "epochs_completed": last.epoch}


def execute_run(config: TrainConfig, dataset: dict, out_dir, save: bool = False, log=print) -> int:
    """Train once and write manifest.json, metrics.csv, confusion.csv and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_digest(config, dataset)
    manifest = {"config": config.to_dict(), "dataset": dataset, "build": build_id(), "started": _now(),
                "finished": None, "output_dir": str(out.resolve()), "status": "running"}
    _atomic_write(out / "manifest.json", _json_text(manifest))
    train_set, test_set = load_datasets(dataset, config.seed)
    manifest["provenance"] = {"train": train_set.provenance, "test": test_set.provenance}

    def on_epoch(trainer, m):
        _atomic_write(out / "metrics.csv", _csv_text(METRICS_HEADER, metrics_rows(trainer.history)))
        log(f"epoch {m.epoch:3d}  loss {m.loss_total:.4f}  top1 {m.test_top1:.4f}")

    trainer = Trainer(config, train_set, test_set, on_epoch=on_epoch)
    status, error = "complete", None
    try:
        history = trainer.run()
    except TrainingAborted as exc:
        history, status, error = exc.history, "partial", str(exc)
    _atomic_write(out / "metrics.csv", _csv_text(METRICS_HEADER, metrics_rows(history)))
    if history:
        _atomic_write(out / "confusion.csv", _csv_text([], history[-1].confusion.tolist()).lstrip("\n"))
    _atomic_write(out / "summary.json", _json_text(summarize(history, digest)))
    manifest.update(status=status, finished=_now())
    if error:
        manifest["error"] = error
    _atomic_write(out / "manifest.json", _json_text(manifest))
    if save and status == "complete":
        save_checkpoint(trainer.params, out / "checkpoint.json")
    if error:
        log(f"error: {error}")
        return EXIT_ABORTED
    return EXIT_OK


def _final_top1(config: TrainConfig, train_set: Dataset, test_set: Dataset) -> float:
    return train(config, train_set, test_set)[-1].test_top1


def run_sweep(kind: str, config: TrainConfig, dataset: dict, fractions: Sequence[float], n_seeds: int,
              out_dir, log=print) -> int:
    """Sparsity or imbalance sweep: fractions x {baseline, DTRG} x seeds."""
    if kind == "sparsity":
        if not all(0 < f <= 1 for f in fractions):
            raise ConfigError("fractions: keep fractions must lie in (0, 1]")
        header, name = SPARSITY_HEADER, "sweep_sparsity"
    else:
        if not all(0 <= f <= 1 for f in fractions):
            raise ConfigError("fractions: minority fractions must lie in [0, 1]")
        header, name = IMBALANCE_HEADER, "sweep_imbalance"
    if n_seeds < 1:
        raise ConfigError("seeds: must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.to_dict(), "dataset": dataset, "kind": kind, "fractions": list(fractions),
                "seeds": [config.seed + i for i in range(n_seeds)], "build": build_id(), "started": _now(),
                "finished": None, "output_dir": str(out.resolve()), "status": "running"}
    _atomic_write(out / "manifest.json", _json_text(manifest))
    rows = []
    status, error = "complete", None
    try:
        for i in range(n_seeds):
            seed = config.seed + i
            full_train, test_set = load_datasets(dataset, seed)
            for frac in fractions:
                if kind == "sparsity":
                    train_set = sparsify(full_train, frac, seed)
                else:
                    train_set = step_imbalance(full_train, frac, seed)
                for method in METHODS:
                    cfg = with_seed(config if method == "dtrg" else baseline_of(config), seed)
                    top1 = _final_top1(cfg, train_set, test_set)
                    row = [frac, method, seed, repr(top1)]
                    if kind == "imbalance":
                        levels = step_levels(train_set)
                        row += [";".join(map(str, levels)), int(imbalance_levels_ok(full_train, train_set))]
                    rows.append(row)
                    log(f"{name} fraction={frac} method={method} seed={seed} top1={top1:.4f}")
                    _atomic_write(out / f"{name}.csv", _csv_text(header, rows))
    except TrainingAborted as exc:
        status, error = "partial", str(exc)
    _atomic_write(out / f"{name}.csv", _csv_text(header, rows))
    _atomic_write(out / f"{name}.svg", sweep_svg(rows, kind))
    manifest.update(status=status, finished=_now())
    if error:
        manifest["error"] = error
        log(f"error: {error}")
    _atomic_write(out / "manifest.json", _json_text(manifest))
    return EXIT_ABORTED if error else EXIT_OK


def imbalance_levels_ok(full: Dataset, reduced: Dataset) -> bool:
    """Every class kept either all of its samples or half of them, and a balanced
    source yields at most two distinct class sizes."""
    before, after = full.class_counts(), reduced.class_counts()
    halves = np.maximum(1, before // 2)
    per_class = np.all((after == before) | (after == halves))
    levels = step_levels(reduced)
    return bool(per_class) and (len(step_levels(full)) != 1 or len(levels) <= 2)


def sweep_means(rows) -> dict[str, dict[float, float]]:
    """method -> fraction -> mean top-1 over seeds."""
    acc: dict[str, dict[float, list]] = {}
    for row in rows:
        acc.setdefault(row[1], {}).setdefault(float(row[0]), []).append(float(row[3]))
    return {m: {f: float(np.mean(v)) for f, v in sorted(d.items())} for m, d in acc.items()}


# ---------------------------------------------------------------- plots


def line_plot_svg(series: dict, xlabel: str, ylabel: str, title: str, width: int = 480, height: int = 320) -> str:
    """Minimal SVG line chart: one polyline per series over labelled axes, plus a legend."""
    left, right, top, bottom = 60, 20, 30, 50
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.05, y1 + 0.05
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(5):
        xv, yv = x0 + (x1 - x0) * i / 4, y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left - 5}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in sorted(pts))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        out.append(f'<text x="{left + pw - 5}" y="{top + 14 * (i + 1)}" text-anchor="end" '
                   f'fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def sweep_svg(rows, kind: str) -> str:
    means = sweep_means(rows)
    series = {m: list(d.items()) for m, d in means.items()}
    xlabel = "keep fraction" if kind == "sparsity" else "minority class fraction"
    return line_plot_svg(series, xlabel, "mean top-1", f"{kind} sweep")


def read_sweep_csv(path) -> list[list]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [row for row in reader if row]


def report(out_dir, log=print) -> int:
    """Re-render SVGs from every sweep CSV and the metrics curve of a single run."""
    out = Path(out_dir)
    rendered = 0
    for kind in ("sparsity", "imbalance"):
        path = out / f"sweep_{kind}.csv"
        if path.exists():
            _atomic_write(out / f"sweep_{kind}.svg", sweep_svg(read_sweep_csv(path), kind))
            rendered += 1
    metrics = out / "metrics.csv"
    if metrics.exists():
        with open(metrics, encoding="utf-8", newline="") as fh:
            recs = list(csv.DictReader(fh))
        series = {"test top-1": [(float(r["epoch"]), float(r["test_top1"])) for r in recs]}
        _atomic_write(out / "metrics.svg", line_plot_svg(series, "epoch", "top-1", "test accuracy"))
        rendered += 1
    if not rendered:
        log(f"error: no sweep or metrics CSV in {out}")
        return EXIT_FAILED
    log(f"rendered {rendered} plot(s) in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def gradcheck_terms(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """Every loss term composed with a small two-layer encoder, as closures over shared parameters."""
    rng = np.random.default_rng(seed)
    n, d_in, hidden, d, k = 6, 5, 7, 4, 3
    params = init_params(EncoderSpec(input_dim=d_in, hidden=(hidden,), feature_dim=d, num_classes=k), seed)
    for t in params.parameters():
        if t.name.endswith(".b"):
            # nonzero biases keep ReLUs away from the kink and features away from zero
            t.data[:] = rng.uniform(0.2, 0.6, t.data.shape)
    x = rng.normal(size=(n, d_in))
    y_a = rng.integers(0, k, n)
    y_b = rng.integers(0, k, n)
    lam = rng.uniform(0.1, 0.9, n)
    C = rng.normal(size=(k, d))
    graph = build_target_graph(C, 1.0)
    beta, eta = 0.5, 1.0
    theta = params.parameters()

    def z():
        return forward_features(params, x)

    def ce():
        return ce_loss(forward_logits(params, z()), y_a)

    def total():
        feats = z()
        return total_loss(ce_loss(forward_logits(params, feats), y_a), ocl_loss(feats, y_a, C),
                          gsl_euclidean(sample_graph(feats, C, 1.0).S, graph.G, y_a), beta, eta)

    return [
        ("CE", ce, theta),
        ("OCL", lambda: ocl_loss(z(), y_a, C), theta),
        ("GSL-eu", lambda: gsl_euclidean(sample_graph(z(), C, 1.0).S, graph.G, y_a), theta),
        ("GSL-kl", lambda: gsl_kl(sample_graph(z(), C, 1.0).S_hat, graph.G_hat, y_a), theta),
        ("mixed-OCL", lambda: ocl_loss_mixed(z(), y_a, y_b, lam, C), theta),
        ("mixed-GSL", lambda: gsl_mixed(sample_graph(z(), C, 1.0).S, graph.G, y_a, y_b, lam), theta),
        ("total", total, theta),
    ]


def gradcheck(log=print, threshold: float = GRADCHECK_THRESHOLD) -> int:
    worst = 0.0
    log(f"{'term':<10} {'max_rel_err':>12}  status")
    for name, f, params in gradcheck_terms():
        err = ad.grad_check(f, params)
        worst = max(worst, err)
        log(f"{name:<10} {err:12.3e}  {'ok' if err < threshold else 'FAIL'}")
    return EXIT_OK if worst < threshold else EXIT_FAILED


# ---------------------------------------------------------------- entry point


def _fractions(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc
    if not vals or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError("need at least one finite fraction")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtrg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train once")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    for name, default in (("sweep-sparsity", DEFAULT_SPARSITY), ("sweep-imbalance", DEFAULT_IMBALANCE)):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} sweep, baseline vs DTRG")
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.add_argument("--seeds", type=int, default=5)
        p.add_argument("--fractions", type=_fractions, default=list(default))
    sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p = sub.add_parser("report", help="re-render SVGs from CSVs in an output directory")
    p.add_argument("--out", required=True)
    return parser


def _default_out(command: str, digest: str) -> Path:
    return Path(os.environ.get("DTRG_OUT_DIR", "runs")) / f"{command}-{digest[:12]}"


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck":
        return gradcheck()
    if args.command == "report":
        return report(args.out)
    try:
        config, dataset, save = load_config(args.config)
        out = Path(args.out) if args.out else _default_out(args.command, config_digest(config, dataset))
        if args.command == "run":
            return execute_run(config, dataset, out, save=save)
        kind = "sparsity" if args.command == "sweep-sparsity" else "imbalance"
        return run_sweep(kind, config, dataset, args.fractions, args.seeds, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
