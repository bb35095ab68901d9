"""Size/accuracy sweeps, budgeted sizing, microbenchmarks, CSV reporting."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, models, schemes, training
from .errors import ConfigError

CSV_COLUMNS = (
    "scheme", "kind_params", "m", "e", "h", "seed",
    "total_params", "embedding_params", "compression_ratio",
    "metric", "metric_value", "relative_loss_pct", "wall_s",
)

DEFAULT_DIM_GRID = (128, 64, 32, 16, 8, 4)


def default_bucket_grid(vocab_size: int):
    """Bucket counts at v, v/2, v/4, v/10, v/20 and v/100 of the vocabulary."""
    grid = []
    for divisor in (1, 2, 4, 10, 20, 100):
        m = max(1, vocab_size // divisor)
        if m not in grid:
            grid.append(m)
    return tuple(grid)


@dataclass
class RunReport:
    scheme: str
    kind_params: str
    m: int | None
    e: int
    h: int | None
    seed: int
    total_params: int
    embedding_params: int
    compression_ratio: float
    metric: str
    metric_value: float
    relative_loss_pct: float
    wall_s: float


@dataclass
class SweepConfig:
    dataset: str  # TSV path
    out: str | None = None  # CSV path; None returns reports only
    schemes: tuple = ("naive_hash", "qr_mult", "memcom_nobias")
    buckets: tuple | None = None  # None derives the default grid from v
    dims: tuple = DEFAULT_DIM_GRID
    repeats: int = 3
    metric: str = "accuracy"
    baseline_dim: int = 256
    variant: str = "classifier"
    input_len: int = data.INPUT_LEN
    max_per_user: int = 5
    min_label_count: int = 10
    label_cap: int | None = None
    eval_fraction: float = 0.1
    max_train_examples: int | None = None
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 256
    optimizer: str = "adam"
    dropout_rate: float = 0.2
    seed: int = 0
    workers: int = 1
    noise: training.NoiseConfig | None = None

    def __post_init__(self):
        if self.metric not in ("accuracy", "ndcg"):
            raise ConfigError(f"metric must be accuracy or ndcg, got {self.metric!r}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        for kind in self.schemes:
            if kind not in schemes.KINDS:
                raise ConfigError(f"unknown scheme kind {kind!r}")


def load_sweep_dataset(cfg: SweepConfig) -> data.EncodedDataset:
    records = data.read_tsv(cfg.dataset)
    return data.build_dataset(
        records,
        input_len=cfg.input_len,
        max_per_user=cfg.max_per_user,
        min_label_count=cfg.min_label_count,
        label_cap=cfg.label_cap,
        eval_fraction=cfg.eval_fraction,
        seed=cfg.seed,
        max_train_examples=cfg.max_train_examples,
    )


def _scheme_grid(cfg: SweepConfig, kind: str, vocab_size: int):
    """Grid points for one kind: (scheme config kwargs, kind_params note)."""
    buckets = cfg.buckets or default_bucket_grid(vocab_size)
    points = []
    if kind == "uncompressed":
        points.append(({"embed_dim": cfg.baseline_dim}, ""))
    elif kind == "reduced_dim":
        for e in cfg.dims:
            points.append(({"embed_dim": e}, ""))
    elif kind == "factorized":
        for h in cfg.dims:
            if h < cfg.baseline_dim:
                points.append(({"embed_dim": cfg.baseline_dim, "inner_dim": h}, ""))
    elif kind == "truncate_rare":
        for keep in buckets:
            if keep <= vocab_size:
                points.append((
                    {"embed_dim": cfg.baseline_dim, "keep_top": keep},
                    f"keep_top={keep}",
                ))
    else:
        for m in buckets:
            if 1 <= m <= vocab_size:
                points.append(({"embed_dim": cfg.baseline_dim, "buckets": m}, ""))
    return points


def train_and_eval(dataset: data.EncodedDataset, scheme_cfg: schemes.SchemeConfig,
                   cfg: SweepConfig, seed: int):
    """Train one network on the dataset; returns (net, MetricReport)."""
    spec = models.NetworkSpec(
        variant=cfg.variant,
        scheme=scheme_cfg,
        num_labels=dataset.num_labels,
        input_len=cfg.input_len,
        dropout_rate=cfg.dropout_rate,
    )
    net = models.build_network(spec, seed=seed)
    tc = training.TrainConfig(
        optimizer=cfg.optimizer,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=seed,
        noise=cfg.noise,
    )
    report = training.train(net, dataset.train, tc, label_items=dataset.label_items)
    metrics = training.evaluate(net, dataset.eval, dataset.label_items)
    metrics.loss = report.loss
    metrics.epoch_losses = report.epoch_losses
    return net, metrics


def _run_point(dataset, cfg: SweepConfig, kind: str, kwargs: dict,
               kind_params: str, seed: int, baseline: dict) -> RunReport:
    vocab_size = dataset.vocab.vocab_size
    started = time.monotonic()
    scheme_cfg = schemes.SchemeConfig(
        kind=kind, vocab_size=vocab_size, seed=seed, **kwargs
    )
    spec = models.NetworkSpec(
        variant=cfg.variant,
        scheme=scheme_cfg,
        num_labels=dataset.num_labels,
        input_len=cfg.input_len,
        dropout_rate=cfg.dropout_rate,
    )
    counts = models.count_network_params(spec)
    _, metrics = train_and_eval(dataset, scheme_cfg, cfg, seed)
    value = metrics.accuracy if cfg.metric == "accuracy" else metrics.ndcg
    base = baseline.get(seed)
    if base is None or base == 0.0:
        rel = 0.0 if base is not None else math.nan
    else:
        rel = 100.0 * (base - value) / base
    return RunReport(
        scheme=kind,
        kind_params=kind_params,
        m=scheme_cfg.buckets if kind in schemes.BUCKETED_KINDS else None,
        e=scheme_cfg.embed_dim,
        h=scheme_cfg.inner_dim if kind == "factorized" else None,
        seed=seed,
        total_params=counts["total_params"],
        embedding_params=counts["embedding_params"],
        compression_ratio=baseline["total_params"] / counts["total_params"],
        metric=cfg.metric,
        metric_value=value,
        relative_loss_pct=rel,
        wall_s=time.monotonic() - started,
    )


def run_sweep(cfg: SweepConfig, dataset: data.EncodedDataset | None = None):
    """Run the whole grid; returns RunReports (and writes cfg.out if set).

    The uncompressed baseline at the baseline width runs first for every
    seed; every other row reports its metric relative to the same-seed
    baseline. A failed point becomes an error row instead of aborting.
    """
    if dataset is None:
        dataset = load_sweep_dataset(cfg)
    vocab_size = dataset.vocab.vocab_size
    seeds = [cfg.seed + i for i in range(cfg.repeats)]

    baseline: dict = {}
    reports: list[RunReport] = []
    base_cfg_kwargs = {"embed_dim": cfg.baseline_dim}
    base_spec = models.NetworkSpec(
        variant=cfg.variant,
        scheme=schemes.SchemeConfig(
            kind="uncompressed", vocab_size=vocab_size, **base_cfg_kwargs
        ),
        num_labels=dataset.num_labels,
        input_len=cfg.input_len,
        dropout_rate=cfg.dropout_rate,
    )
    baseline["total_params"] = models.count_network_params(base_spec)["total_params"]
    for seed in seeds:
        report = _run_point(
            dataset, cfg, "uncompressed", base_cfg_kwargs, "", seed, baseline
        )
        baseline[seed] = report.metric_value
        report.relative_loss_pct = 0.0
        reports.append(report)

    points = []
    for kind in cfg.schemes:
        if kind == "uncompressed":
            continue
        for kwargs, note in _scheme_grid(cfg, kind, vocab_size):
            for seed in seeds:
                points.append((kind, kwargs, note, seed))

    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [
                pool.submit(_run_point, dataset, cfg, kind, kwargs, note, seed,
                            baseline)
                for kind, kwargs, note, seed in points
            ]
            for (kind, kwargs, note, seed), fut in zip(points, futures):
                try:
                    reports.append(fut.result())
                except Exception as exc:  # error row, sweep continues
                    reports.append(_error_report(cfg, kind, kwargs, note, seed, exc))
    else:
        for kind, kwargs, note, seed in points:
            try:
                reports.append(
                    _run_point(dataset, cfg, kind, kwargs, note, seed, baseline)
                )
            except Exception as exc:
                reports.append(_error_report(cfg, kind, kwargs, note, seed, exc))

    if cfg.out:
        emit_report(reports, cfg.out)
    return reports


def _error_report(cfg, kind, kwargs, note, seed, exc) -> RunReport:
    detail = f"error={type(exc).__name__}"
    return RunReport(
        scheme=kind,
        kind_params=f"{note};{detail}" if note else detail,
        m=kwargs.get("buckets"),
        e=kwargs.get("embed_dim", cfg.baseline_dim),
        h=kwargs.get("inner_dim"),
        seed=seed,
        total_params=0,
        embedding_params=0,
        compression_ratio=math.nan,
        metric=cfg.metric,
        metric_value=math.nan,
        relative_loss_pct=math.nan,
        wall_s=0.0,
    )


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_report(reports, path) -> None:
    """Write RunReports as CSV: fixed column order, floats at fixed width,
    rows sorted by (scheme, compression_ratio); wall_s is the only
    non-reproducible column."""
    def sort_key(r: RunReport):
        ratio = r.compression_ratio
        return (r.scheme, ratio if math.isfinite(ratio) else math.inf,
                r.e, r.m or 0, r.h or 0, r.seed)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in sorted(reports, key=sort_key):
            writer.writerow([
                r.scheme, r.kind_params, _fmt(r.m), _fmt(r.e), _fmt(r.h),
                _fmt(r.seed), _fmt(r.total_params), _fmt(r.embedding_params),
                _fmt(r.compression_ratio), r.metric, _fmt(r.metric_value),
                _fmt(r.relative_loss_pct), _fmt(r.wall_s),
            ])


def read_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise OSError(f"{path}: not a sweep report")
    return [dict(zip(CSV_COLUMNS, row)) for row in rows[1:]]


def fixed_size_search(budget_bytes: int, kind: str, vocab_size: int,
                      num_labels: int, bucket_grid, variant: str = "classifier",
                      input_len: int = data.INPUT_LEN, max_dim: int = 1024,
                      bytes_per_param: int = 4):
    """Largest embedding width per bucket count within a total-size budget.

    For every m in the grid, binary searches the width e in [1, max_dim]
    whose whole-model size (every layer, `bytes_per_param` bytes per stored
    parameter) stays within `budget_bytes`. A bucket count where even the
    smallest width overflows is reported infeasible. Raises when no grid
    point fits at all.
    """
    def model_bytes(m: int, e: int) -> int:
        scheme_cfg = schemes.SchemeConfig(
            kind=kind, vocab_size=vocab_size, embed_dim=e,
            buckets=m if kind in schemes.BUCKETED_KINDS else 0,
            keep_top=m if kind == "truncate_rare" else 0,
        )
        spec = models.NetworkSpec(
            variant=variant, scheme=scheme_cfg, num_labels=num_labels,
            input_len=input_len,
        )
        return bytes_per_param * models.count_network_params(spec)["total_params"]

    step = 2 if kind in schemes.HALF_WIDTH_KINDS else 1
    min_dim = 2 if variant == "classifier" or step == 2 else 1
    results = []
    for m in bucket_grid:
        lo, hi = min_dim, max_dim - (max_dim % step)
        if model_bytes(m, lo) > budget_bytes:
            results.append({"m": m, "e": None, "bytes": None, "feasible": False})
            continue
        while lo < hi:
            mid = (lo + hi + step) // (2 * step) * step  # upper-biased, on-grid
            if model_bytes(m, mid) <= budget_bytes:
                lo = mid
            else:
                hi = mid - step
        results.append({
            "m": m, "e": lo, "bytes": model_bytes(m, lo), "feasible": True,
        })
    if not any(r["feasible"] for r in results):
        raise ValueError(
            f"budget {budget_bytes} bytes is too small for any grid point"
        )
    return results


def embedding_via_gather(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return table[idx]


def embedding_via_onehot(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    onehot = np.zeros((len(idx), table.shape[0]), dtype=table.dtype)
    onehot[np.arange(len(idx)), idx] = 1.0
    return onehot @ table


def microbench_lookup_vs_onehot(vocab_size: int, embed_dim: int,
                                buckets: int | None = None, batch: int = 1,
                                iterations: int = 50, warmup: int = 10,
                                dtype: str = "f64", seed: int = 0) -> dict:
    """Time table gather against one-hot matmul for one embedding lookup.

    Reports the median per-iteration wall time on a monotonic clock after
    discarding `warmup` iterations, pinned to one BLAS thread for stability.
    Also reports the predicted extra runtime values per inference,
    batch*(e+1) for the gather and batch*(e+v) for the one-hot path, next to
    the intermediate bytes each path actually allocates.
    """
    from threadpoolctl import threadpool_limits

    m = vocab_size if buckets is None else buckets
    if not 1 <= m <= vocab_size:
        raise ConfigError(f"buckets must be in [1, {vocab_size}], got {m}")
    np_dtype = {"f32": np.float32, "f64": np.float64}[dtype]
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((m, embed_dim)).astype(np_dtype)
    ids = rng.integers(0, vocab_size, size=batch)
    idx = ids % m

    def run(fn):
        times = []
        with threadpool_limits(limits=1):
            for i in range(warmup + iterations):
                t0 = time.perf_counter_ns()
                fn(table, idx)
                times.append(time.perf_counter_ns() - t0)
        return float(np.median(times[warmup:]))

    gather_ns = run(embedding_via_gather)
    onehot_ns = run(embedding_via_onehot)
    itemsize = np.dtype(np_dtype).itemsize
    return {
        "gather_ns": gather_ns,
        "onehot_ns": onehot_ns,
        "speedup": onehot_ns / gather_ns if gather_ns else math.inf,
        "predicted_values_gather": batch * (embed_dim + 1),
        "predicted_values_onehot": batch * (embed_dim + vocab_size),
        "measured_bytes_gather": batch * embed_dim * itemsize + idx.nbytes,
        "measured_bytes_onehot": batch * (m + embed_dim) * itemsize,
    }


def noise_sweep(cfg: SweepConfig, kind: str, scheme_kwargs: dict,
                multipliers=(0.0, 0.5, 1.0, 2.0), l2_clip: float = 1.0,
                dataset: data.EncodedDataset | None = None):
    """Train the same config across noise multipliers; returns RunReports.

    The multiplier-0 row still clips per-example gradients, isolating the
    effect of the added noise.
    """
    if dataset is None:
        dataset = load_sweep_dataset(cfg)
    reports = []
    for mult in multipliers:
        point_cfg = replace(
            cfg, noise=training.NoiseConfig(l2_clip=l2_clip, noise_multiplier=mult),
            repeats=1,
        )
        started = time.monotonic()
        scheme_cfg = schemes.SchemeConfig(
            kind=kind, vocab_size=dataset.vocab.vocab_size, seed=cfg.seed,
            **scheme_kwargs,
        )
        spec = models.NetworkSpec(
            variant=cfg.variant, scheme=scheme_cfg,
            num_labels=dataset.num_labels, input_len=cfg.input_len,
            dropout_rate=cfg.dropout_rate,
        )
        counts = models.count_network_params(spec)
        _, metrics = train_and_eval(dataset, scheme_cfg, point_cfg, cfg.seed)
        value = metrics.accuracy if cfg.metric == "accuracy" else metrics.ndcg
        reports.append(RunReport(
            scheme=kind,
            kind_params=f"noise={mult};l2_clip={l2_clip}",
            m=scheme_cfg.buckets if kind in schemes.BUCKETED_KINDS else None,
            e=scheme_cfg.embed_dim,
            h=scheme_cfg.inner_dim if kind == "factorized" else None,
            seed=cfg.seed,
            total_params=counts["total_params"],
            embedding_params=counts["embedding_params"],
            compression_ratio=1.0,
            metric=cfg.metric,
            metric_value=value,
            relative_loss_pct=math.nan,
            wall_s=time.monotonic() - started,
        ))
    if cfg.out:
        emit_report(reports, cfg.out)
    return reports
