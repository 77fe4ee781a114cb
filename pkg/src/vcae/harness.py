"""Experiment harness: strict JSON configs, the training loop, evaluation
runs, variance-trace scheduling, CSV metrics, and SVG plot emission.

Metrics files are CSV with one commented JSON header line carrying the fully
resolved config.  Columns:

    step,split,bound,recon,kl_s,kl_z,iwae,iwae_k,
    var_theta1,var_theta2,var_psi,var_phi,wall_ms

Cells are empty where a field does not apply.  With default settings every
byte of the file is determined by (config, seeds); wall-clock timing is only
written when ``record_wall_time`` is set (it breaks byte-reproducibility and
is therefore off by default; timing always goes to the stderr log).
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import data as data_mod
from .estimators import variance_probe
from .models import Model, ModelSpec, VARIANTS, TASKS
from .nets import checkpoint_load, checkpoint_save, ensure_names_match
from .numerics import ContractViolation, NonFiniteGradient, RngStream

CSV_COLUMNS = [
    "step",
    "split",
    "bound",
    "recon",
    "kl_s",
    "kl_z",
    "iwae",
    "iwae_k",
    "var_theta1",
    "var_theta2",
    "var_psi",
    "var_phi",
    "wall_ms",
]


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


class PlotError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    variant: str = ""
    hidden: str = "linear"
    task: str = "generative"
    x_dim: int = 784
    s_dim: int = 200
    z_dim: int = 200
    hidden_width: int = 200
    temperature: float = 0.5
    iwae_k: int = 100
    batch_size: int = 100
    max_steps: int = 3000
    train_log_every: int = 1
    eval_every: int = 500
    checkpoint_every: int = 1000
    variance_trace_every: int = 0
    trace_replicas: int = 64
    seed_init: int = 1
    seed_data: int = 2
    seed_noise: int = 3
    data_source: str = "synthetic"  # "synthetic" | "idx"
    mnist_dir: str = ""
    synthetic_seed: int = 12345
    train_count: int = 0  # 0 = full training split
    binarize_mode: str = "threshold"
    binarize_seed: int = 0
    out_dir: str = "runs"
    run_name: str = ""
    record_wall_time: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"config key 'variant' must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in TASKS:
            raise ConfigError(f"config key 'task' must be one of {TASKS}")
        if self.data_source not in ("synthetic", "idx"):
            raise ConfigError("config key 'data_source' must be 'synthetic' or 'idx'")
        if self.binarize_mode not in data_mod.BINARIZE_MODES:
            raise ConfigError(f"config key 'binarize_mode' must be one of {data_mod.BINARIZE_MODES}")
        for key in (
            "batch_size",
            "iwae_k",
            "trace_replicas",
            "train_log_every",
        ):
            if getattr(self, key) < 1:
                raise ConfigError(f"config key {key!r} must be positive")
        for key in ("max_steps", "eval_every", "checkpoint_every", "variance_trace_every", "train_count"):
            if getattr(self, key) < 0:
                raise ConfigError(f"config key {key!r} must be >= 0")
        if not self.run_name:
            self.run_name = f"{self.variant}_{self.hidden}_{self.task}"

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            variant=self.variant,
            hidden=self.hidden,
            task=self.task,
            x_dim=self.x_dim,
            s_dim=self.s_dim,
            z_dim=self.z_dim,
            hidden_width=self.hidden_width,
            temperature=self.temperature,
        )

    def resolved_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def load_config(path) -> ExperimentConfig:
    """Strict parse: unknown keys, wrong types, and missing 'variant' all fail."""
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError("config must be a flat JSON object")
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    if "variant" not in raw:
        raise ConfigError("missing required config key 'variant'")
    type_map = {"str": str, "int": int, "float": (int, float), "bool": bool}
    for key, value in raw.items():
        expected = type_map[known[key]]
        if isinstance(value, bool) and known[key] != "bool":
            raise ConfigError(f"config key {key!r} has wrong type bool")
        if not isinstance(value, expected):
            raise ConfigError(
                f"config key {key!r} has wrong type {type(value).__name__}, expected {known[key]}"
            )
    cfg = ExperimentConfig(**raw)
    return cfg


def load_splits(config: ExperimentConfig) -> dict[str, data_mod.Dataset]:
    binarization = data_mod.Binarization(config.binarize_mode, config.binarize_seed)
    if config.data_source == "idx":
        if not config.mnist_dir:
            raise ConfigError("data_source 'idx' requires config key 'mnist_dir'")
        splits = data_mod.load_mnist_splits(config.mnist_dir, binarization)
    else:
        splits = data_mod.load_synthetic_splits(
            config.x_dim, config.synthetic_seed, binarization
        )
    if config.train_count:
        train = splits["train"]
        splits["train"] = data_mod.Dataset(
            train.images[: config.train_count], "train", train.binarization
        )
    return splits


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


class MetricsWriter:
    """Append-only CSV with a commented JSON header line."""

    def __init__(self, path, config_json: str):
        self.path = path
        with open(path, "w", newline="") as f:
            f.write(f"# {config_json}\n")
            f.write(",".join(CSV_COLUMNS) + "\n")

    def row(self, step: int, split: str = "", **values) -> None:
        cells = {"step": str(step), "split": split}
        for key, val in values.items():
            if key not in CSV_COLUMNS:
                raise ContractViolation(f"unknown metrics column {key!r}")
            cells[key] = _fmt(val)
        with open(self.path, "a", newline="") as f:
            f.write(",".join(cells.get(c, "") for c in CSV_COLUMNS) + "\n")


def read_metrics(path):
    """(header config dict, list of row dicts with string cells)."""
    with open(path) as f:
        header = f.readline()
        if not header.startswith("# "):
            raise PlotError(f"{path}: missing config header line")
        config = json.loads(header[2:])
        rows = list(csv.DictReader(f))
    return config, rows


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunPaths:
    checkpoint: str
    metrics: str


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def run_training(config: ExperimentConfig) -> RunPaths:
    """Train per the config; returns checkpoint and metrics paths.

    Fully deterministic given the config: parameter init, batch order, and
    every sampling draw derive from the three seeds.
    """
    splits = load_splits(config)
    train = splits["train"]
    valid = splits["valid"]
    model = Model.build(config.model_spec(), init_seed=config.seed_init)
    os.makedirs(config.out_dir, exist_ok=True)
    ckpt_path = os.path.join(config.out_dir, config.run_name + ".ckpt")
    metrics_path = os.path.join(config.out_dir, config.run_name + ".csv")
    metrics = MetricsWriter(metrics_path, config.resolved_json())

    noise_root = RngStream(seed=config.seed_noise)
    train_root = noise_root.split(0)
    eval_root = noise_root.split(1)
    probe_root = noise_root.split(2)
    probe_batch = train.images[: config.batch_size]

    checkpoint_save(model.store, ckpt_path)
    step = 0
    epoch = 0
    t0 = time.monotonic()
    done = step >= config.max_steps
    while not done:
        epoch_seed = RngStream(seed=config.seed_data).split(epoch).seed
        for idx in data_mod.minibatches(len(train), config.batch_size, epoch_seed):
            step += 1
            batch = train.images[idx]
            step_start = time.monotonic()
            try:
                result = model.single_sample_grads(batch, train_root.split(step))
                model.store.zero_grads()
                model.store.accumulate(result.grads)
                model.store.adam_apply()
                if result.baseline_grads:
                    model.nvil_state.store.zero_grads()
                    model.nvil_state.store.accumulate(result.baseline_grads)
                    model.nvil_state.store.adam_apply()
            except NonFiniteGradient as exc:
                raise TrainingAborted(
                    f"non-finite loss at step {step}: {exc}; "
                    f"last-good checkpoint at {ckpt_path}"
                ) from exc
            wall = (time.monotonic() - step_start) * 1000.0
            if step % config.train_log_every == 0:
                est = result.estimate
                metrics.row(
                    step,
                    "train",
                    bound=est.total,
                    recon=est.term_recon,
                    kl_s=est.term_kl_s,
                    kl_z=est.term_kl_z,
                    wall_ms=wall if config.record_wall_time else "",
                )
            if config.eval_every and step % config.eval_every == 0:
                est = eval_bound(model, valid.images, config.batch_size, eval_root.split(step))
                metrics.row(
                    step,
                    "valid",
                    bound=est["bound"],
                    recon=est["recon"],
                    kl_s=est["kl_s"],
                    kl_z=est["kl_z"],
                )
                _log(
                    f"[{config.run_name}] step {step} valid bound {est['bound']:.3f} "
                    f"({time.monotonic() - t0:.1f}s)"
                )
            if config.variance_trace_every and step % config.variance_trace_every == 0:
                report = variance_probe(
                    model, probe_batch, config.trace_replicas, probe_root.split(step), step=step
                )
                metrics.row(
                    step,
                    "trace",
                    var_theta1=report.group_var.get("theta1", ""),
                    var_theta2=report.group_var.get("theta2", ""),
                    var_psi=report.group_var.get("psi", ""),
                    var_phi=report.group_var.get("phi", ""),
                )
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoint_save(model.store, ckpt_path)
            if step >= config.max_steps:
                done = True
                break
        epoch += 1
    checkpoint_save(model.store, ckpt_path)
    _log(f"[{config.run_name}] finished {step} steps in {time.monotonic() - t0:.1f}s")
    return RunPaths(checkpoint=ckpt_path, metrics=metrics_path)


def eval_bound(model: Model, images, batch_size: int, stream: RngStream) -> dict:
    """Mean single-sample bound terms over a split."""
    sums = np.zeros(4)
    count = 0
    for i, start in enumerate(range(0, images.shape[0], batch_size)):
        batch = images[start : start + batch_size]
        est, _ = model.bound(batch, stream.split(i))
        n = batch.shape[0]
        sums += n * np.array([est.total, est.term_recon, est.term_kl_s, est.term_kl_z])
        count += n
    sums /= count
    return {"bound": sums[0], "recon": sums[1], "kl_s": sums[2], "kl_z": sums[3]}


# ---------------------------------------------------------------------------
# evaluation runs
# ---------------------------------------------------------------------------


def run_eval(
    checkpoint_path,
    config: ExperimentConfig,
    split: str = "test",
    k: int | None = None,
    metrics_path=None,
) -> tuple[float, float]:
    """Mean per-datum importance-weighted estimate over a split, with SE.

    Never mutates the checkpoint.  concrete_z uses the hardened evaluation
    per its test-phase convention; every other variant uses iwae_estimate.
    """
    k = k or config.iwae_k
    store = checkpoint_load(checkpoint_path)
    model = Model.build(config.model_spec(), init_seed=config.seed_init)
    ensure_names_match(store, model.store.names())
    model.store = store
    splits = load_splits(config)
    images = splits[split].images
    root = RngStream(seed=config.seed_noise).split(3)
    values = []
    for i, start in enumerate(range(0, images.shape[0], config.batch_size)):
        batch = images[start : start + config.batch_size]
        stream = root.split(i)
        if config.variant == "concrete_z":
            values.append(model.concrete_z_test_eval(batch, k, stream))
        else:
            values.append(model.iwae_estimate(batch, k, stream))
    per_datum = np.concatenate(values)
    mean = float(per_datum.mean())
    se = float(per_datum.std(ddof=1) / math.sqrt(per_datum.size))
    if metrics_path:
        with open(metrics_path, "a", newline="") as f:
            cells = {"step": "", "split": split, "iwae": _fmt(mean), "iwae_k": str(k)}
            f.write(",".join(cells.get(c, "") for c in CSV_COLUMNS) + "\n")
    print(f"{split} importance-weighted estimate (K={k}): {mean:.4f} +/- {se:.4f} nats")
    return mean, se


def run_trace(checkpoint_path, config: ExperimentConfig, out_path=None):
    """Probe-only gradient-variance report over a checkpoint."""
    store = checkpoint_load(checkpoint_path)
    model = Model.build(config.model_spec(), init_seed=config.seed_init)
    ensure_names_match(store, model.store.names())
    model.store = store
    splits = load_splits(config)
    batch = splits["train"].images[: config.batch_size]
    rng = RngStream(seed=config.seed_noise).split(2)
    report = variance_probe(model, batch, config.trace_replicas, rng)
    line = " ".join(
        f"var_{g}={report.group_var[g]:.6g}" for g in sorted(report.group_var)
    )
    print(f"variance probe (R={report.replicas}): {line}")
    if out_path:
        writer = MetricsWriter(out_path, config.resolved_json())
        writer.row(
            0,
            "trace",
            var_theta1=report.group_var.get("theta1", ""),
            var_theta2=report.group_var.get("theta2", ""),
            var_psi=report.group_var.get("psi", ""),
            var_phi=report.group_var.get("phi", ""),
        )
    return report


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def emit_plot(metrics_paths, series: str, out_path, log_y: bool = False, title: str = "") -> None:
    """Line chart (step vs series) with one polyline per metrics file."""
    if series not in CSV_COLUMNS:
        raise PlotError(f"series {series!r} is not a metrics column")
    curves = []
    for path in metrics_paths:
        _, rows = read_metrics(path)
        xs, ys = [], []
        for row in rows:
            cell = row.get(series, "")
            if cell in ("", None):
                continue
            xs.append(int(row["step"]) if row["step"] else 0)
            ys.append(float(cell))
        stem = os.path.splitext(os.path.basename(path))[0]
        if xs:
            curves.append((stem, xs, ys))
    if not curves:
        raise PlotError(f"no data for series {series!r} in {list(metrics_paths)}")
    svg = _render_svg(curves, series, log_y, title or series)
    with open(out_path, "w") as f:
        f.write(svg)


_COLORS = ["#3366cc", "#cc3333", "#33a02c", "#9933cc", "#e6882e", "#17808d"]


def _render_svg(curves, series, log_y, title) -> str:
    width, height, pad = 720, 440, 60
    if log_y:
        curves = [
            (name, xs, [math.log10(max(v, 1e-300)) for v in ys]) for name, xs, ys in curves
        ]
    x_min = min(min(xs) for _, xs, _ in curves)
    x_max = max(max(xs) for _, xs, _ in curves)
    y_min = min(min(ys) for _, _, ys in curves)
    y_max = max(max(ys) for _, _, ys in curves)
    if x_max == x_min:
        x_max = x_min + 1
    if y_max == y_min:
        y_max = y_min + 1.0
    sx = (width - 2 * pad) / (x_max - x_min)
    sy = (height - 2 * pad) / (y_max - y_min)

    def px(x):
        return pad + (x - x_min) * sx

    def py(y):
        return height - pad - (y - y_min) * sy

    out = io.StringIO()
    out.write(
        f'<svg width="{width}" height="{height}" xmlns="http://www.w3.org/2000/svg">\n'
    )
    out.write('<rect width="100%" height="100%" fill="white"/>\n')
    out.write(
        f'<text x="{width / 2}" y="26" font-family="sans-serif" font-size="15" '
        f'text-anchor="middle">{title}</text>\n'
    )
    # axes
    out.write(
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>\n'
    )
    out.write(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>\n')
    # y ticks: powers of ten under log scale, else 5 even divisions
    if log_y:
        lo, hi = math.floor(y_min), math.ceil(y_max)
        ticks = [(t, f"1e{t}") for t in range(int(lo), int(hi) + 1)]
    else:
        ticks = [
            (y_min + (y_max - y_min) * i / 4.0, f"{y_min + (y_max - y_min) * i / 4.0:.4g}")
            for i in range(5)
        ]
    for yv, label in ticks:
        if yv < y_min - 1e-12 or yv > y_max + 1e-12:
            continue
        out.write(
            f'<line x1="{pad}" y1="{py(yv):.2f}" x2="{width - pad}" y2="{py(yv):.2f}" '
            'stroke="#dddddd" stroke-dasharray="4"/>\n'
        )
        out.write(
            f'<text x="{pad - 6}" y="{py(yv) + 4:.2f}" font-family="sans-serif" '
            f'font-size="11" text-anchor="end">{label}</text>\n'
        )
    for i in range(5):
        xv = x_min + (x_max - x_min) * i / 4.0
        out.write(
            f'<text x="{px(xv):.2f}" y="{height - pad + 16}" font-family="sans-serif" '
            f'font-size="11" text-anchor="middle">{xv:.5g}</text>\n'
        )
    out.write(
        f'<text x="{width / 2}" y="{height - 16}" font-family="sans-serif" font-size="12" '
        'text-anchor="middle">step</text>\n'
    )
    axis_label = f"log10({series})" if log_y else series
    out.write(
        f'<text x="18" y="{height / 2}" font-family="sans-serif" font-size="12" '
        f'text-anchor="middle" transform="rotate(-90 18 {height / 2})">{axis_label}</text>\n'
    )
    for i, (name, xs, ys) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.write(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.8"/>\n'
        )
        ly = pad + 16 + 18 * i
        out.write(f'<rect x="{width - pad - 150}" y="{ly - 10}" width="12" height="12" fill="{color}"/>\n')
        out.write(
            f'<text x="{width - pad - 133}" y="{ly}" font-family="sans-serif" font-size="12">{name}</text>\n'
        )
    out.write("</svg>\n")
    return out.getvalue()
