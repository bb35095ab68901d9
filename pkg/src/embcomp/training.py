"""Training loop, ranking metrics, and post-training quantization.

Everything is deterministic given (config seed, dataset): example order,
dropout masks, pair sampling, and noise draws all come from generators
derived from the config seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ExampleBatch
from .errors import ConfigError, TrainingDivergedError
from .models import Network

EVAL_CHUNK = 1024


@dataclass(frozen=True)
class NoiseConfig:
    """Per-example gradient clipping plus Gaussian noise.

    l2_clip bounds each example's global gradient norm (math.inf disables
    clipping); the noise standard deviation is noise_multiplier * l2_clip.
    """

    l2_clip: float
    noise_multiplier: float

    def __post_init__(self):
        if not self.l2_clip > 0.0:
            raise ConfigError(f"l2_clip must be positive, got {self.l2_clip}")
        if self.noise_multiplier < 0.0:
            raise ConfigError(
                f"noise_multiplier must be >= 0, got {self.noise_multiplier}"
            )

    @property
    def is_noop(self) -> bool:
        return self.noise_multiplier == 0.0 and math.isinf(self.l2_clip)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise: NoiseConfig | None = None
    noise_seed: int | None = None  # defaults to seed

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0.0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class MetricReport:
    accuracy: float = math.nan
    ndcg: float = math.nan
    loss: float = math.nan
    epoch_losses: list = None


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: dict):
        self.cfg = cfg
        self.step_count = 0
        if cfg.optimizer == "adam":
            self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
            self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, params: dict) -> None:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            for p in params.values():
                p.value -= cfg.learning_rate * p.grad
            return
        self.step_count += 1
        t = self.step_count
        correction = math.sqrt(1.0 - cfg.beta2**t) / (1.0 - cfg.beta1**t)
        for k, p in params.items():
            m, v = self.m[k], self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * p.grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * np.square(p.grad)
            p.value -= cfg.learning_rate * correction * m / (np.sqrt(v) + cfg.eps)


def _classification_batch_loss(net, inputs, labels, train, rng):
    from . import ops

    logits, cache = net.forward(inputs, train=train, rng=rng)
    losses, probs = ops.softmax_cross_entropy(logits, labels)
    loss = float(losses.mean())
    if train:
        upstream = np.full(len(labels), 1.0 / len(labels))
        dlogits = ops.softmax_cross_entropy_backward(probs, labels, upstream)
        net.backward(dlogits, cache)
    return loss


def _pairwise_batch_loss(net, inputs, labels, label_items, train, rng, pair_rng):
    b = len(labels)
    hi = label_items[labels]
    lo_lab = pair_rng.integers(0, len(label_items), size=b)
    for _ in range(16):  # resample the rare collisions with the positive
        clash = lo_lab == labels
        if not clash.any():
            break
        lo_lab[clash] = pair_rng.integers(0, len(label_items), size=int(clash.sum()))
    lo = label_items[lo_lab]
    _, _, loss, cache = net.pairwise_forward(inputs, hi, lo, train=train, rng=rng)
    if train:
        net.pairwise_backward(cache, upstream=1.0 / b)
    return loss / b


def train(net: Network, train_set: ExampleBatch, cfg: TrainConfig,
          label_items=None) -> MetricReport:
    """Optimize `net` in place; returns the per-epoch mean training loss.

    The pairwise variant needs `label_items` to draw its negative items.
    A non-finite batch loss aborts with TrainingDivergedError.
    """
    pairwise = net.spec.variant == "pairwise_ranknet"
    if pairwise and label_items is None:
        raise ValueError("pairwise training needs label_items")
    noise = cfg.noise
    if noise is not None and noise.is_noop:
        noise = None

    params = net.params()
    opt = _Optimizer(cfg, params)
    rng_order = np.random.default_rng([cfg.seed, 1])
    rng_drop = np.random.default_rng([cfg.seed, 2])
    rng_pairs = np.random.default_rng([cfg.seed, 3])
    noise_seed = cfg.seed if cfg.noise_seed is None else cfg.noise_seed
    rng_noise = np.random.default_rng([noise_seed, 4])

    n = len(train_set)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng_order.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            inputs = train_set.inputs[batch_idx]
            labels = train_set.labels[batch_idx]
            net.zero_grad()
            if noise is None:
                if pairwise:
                    loss = _pairwise_batch_loss(
                        net, inputs, labels, label_items, True, rng_drop, rng_pairs
                    )
                else:
                    loss = _classification_batch_loss(
                        net, inputs, labels, True, rng_drop
                    )
            else:
                loss = _noisy_batch(
                    net, inputs, labels, label_items, pairwise,
                    noise, params, rng_drop, rng_pairs, rng_noise,
                )
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, batches, cfg.learning_rate)
            opt.step(params)
            total += loss
            batches += 1
        epoch_losses.append(total / max(batches, 1))

    report = MetricReport(epoch_losses=epoch_losses)
    if epoch_losses:
        report.loss = epoch_losses[-1]
    return report


def _noisy_batch(net, inputs, labels, label_items, pairwise,
                 noise: NoiseConfig, params, rng_drop, rng_pairs, rng_noise):
    """Micro-batches of one example: clip each example's gradient to the
    l2 budget, sum, add Gaussian noise, then average over the batch."""
    b = len(labels)
    acc = {k: np.zeros_like(p.value) for k, p in params.items()}
    total_loss = 0.0
    for i in range(b):
        net.zero_grad()
        if pairwise:
            loss = _pairwise_batch_loss(
                net, inputs[i:i + 1], labels[i:i + 1], label_items,
                True, rng_drop, rng_pairs,
            )
        else:
            loss = _classification_batch_loss(
                net, inputs[i:i + 1], labels[i:i + 1], True, rng_drop
            )
        total_loss += loss
        sq = sum(float(np.sum(p.grad * p.grad)) for p in params.values())
        norm = math.sqrt(sq)
        scale = 1.0
        if math.isfinite(noise.l2_clip) and norm > noise.l2_clip:
            scale = noise.l2_clip / norm
        for k, p in params.items():
            acc[k] += scale * p.grad
    sigma = noise.noise_multiplier * noise.l2_clip
    for k, p in params.items():
        if sigma > 0.0:
            acc[k] += rng_noise.normal(0.0, sigma, size=acc[k].shape)
        p.grad[...] = acc[k] / b
    return total_loss / b


def _score_chunks(net: Network, eval_set: ExampleBatch, label_items):
    if len(eval_set) == 0:
        raise ValueError("empty evaluation set")
    for start in range(0, len(eval_set), EVAL_CHUNK):
        inputs = eval_set.inputs[start:start + EVAL_CHUNK]
        labels = eval_set.labels[start:start + EVAL_CHUNK]
        yield net.score_candidates(inputs, label_items), labels


def evaluate_accuracy(net: Network, eval_set: ExampleBatch, label_items=None) -> float:
    """Top-1 accuracy; argmax ties resolve to the smallest label id."""
    hits = 0
    for scores, labels in _score_chunks(net, eval_set, label_items):
        hits += int((scores.argmax(axis=1) == labels).sum())
    return hits / len(eval_set)


def evaluate_ndcg(net: Network, eval_set: ExampleBatch, label_items=None,
                  k: int | None = None) -> float:
    """Mean nDCG with a single relevant item per example.

    The positive at 1-based rank r contributes 1/log2(1+r); with one
    relevant item the ideal DCG is 1, so that is the whole score. Ties rank
    behind equal-scored candidates with smaller ids, matching rank_items.
    """
    total = 0.0
    for scores, labels in _score_chunks(net, eval_set, label_items):
        rows = np.arange(len(labels))
        own = scores[rows, labels]
        higher = (scores > own[:, None]).sum(axis=1)
        cols = np.arange(scores.shape[1])
        tied_before = (
            (scores == own[:, None]) & (cols[None, :] < labels[:, None])
        ).sum(axis=1)
        rank = 1 + higher + tied_before
        gain = 1.0 / np.log2(1.0 + rank)
        if k is not None:
            gain = np.where(rank <= k, gain, 0.0)
        total += float(gain.sum())
    return total / len(eval_set)


def evaluate(net: Network, eval_set: ExampleBatch, label_items=None) -> MetricReport:
    return MetricReport(
        accuracy=evaluate_accuracy(net, eval_set, label_items),
        ndcg=evaluate_ndcg(net, eval_set, label_items),
    )


QUANT_BITS = (16, 8, 4)


def quantize_tensor(w: np.ndarray, bits: int):
    """Symmetric per-tensor linear quantization; returns (codes, scale).

    scale = max|w| / (2^(bits-1) - 1), or 1.0 for an all-zero tensor, so
    dequantization error is bounded by scale/2 everywhere.
    """
    if bits not in QUANT_BITS:
        raise ConfigError(f"bits must be one of {QUANT_BITS}, got {bits}")
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = amax / (2 ** (bits - 1) - 1) if amax > 0.0 else 1.0
    codes = np.rint(w / scale)
    return codes, scale


def quantize_eval(net: Network, bits: int, eval_set: ExampleBatch,
                  label_items=None):
    """Evaluate `net` with every stored tensor quantized to `bits` bits.

    Weights are quantized, dequantized, evaluated, then restored. Returns
    (size_bytes, MetricReport); size_bytes counts bits per entry plus one
    8-byte scale per tensor.
    """
    state = net.state()
    saved = {name: arr.copy() for name, arr in state.items()}
    size_bytes = 0
    try:
        for name, arr in state.items():
            codes, scale = quantize_tensor(arr, bits)
            arr[...] = codes * scale
            size_bytes += math.ceil(arr.size * bits / 8) + 8
        report = evaluate(net, eval_set, label_items)
    finally:
        for name, arr in state.items():
            arr[...] = saved[name]
    return size_bytes, report
