"""Embedding table layouts behind one lookup/backward interface.

All layouts share a contract: ids in [0, vocab_size) map to row vectors of
width embed_dim. Id 0 is the padding id and ids are assigned in descending
frequency order, so "small id" means "frequent category".

    uncompressed    one row per id, the baseline
    reduced_dim     same layout, just built at a smaller width
    truncate_rare   rows for the keep_top most frequent ids plus one shared
                    leftover row that all rarer ids collapse into
    naive_hash      single bucketed table, row = table[id mod buckets]
    double_hash     two half-width bucketed tables addressed by two
                    independent hashes, concatenated
    qr_concat       half-width remainder and quotient tables, concatenated
    qr_mult         full-width remainder and quotient tables, multiplied
                    elementwise
    factorized      a narrow per-id table times a shared projection
    memcom_nobias   bucketed table scaled by a per-id scalar multiplier
    memcom_bias     memcom_nobias plus a per-id scalar bias

The memcom layouts are the point of the package: the per-id scalar costs one
parameter per category yet makes every id's effective embedding unique even
when ids share a bucket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import ConfigError
from .ops import Param, scatter_add_rows

KINDS = (
    "uncompressed",
    "reduced_dim",
    "truncate_rare",
    "naive_hash",
    "double_hash",
    "qr_concat",
    "qr_mult",
    "factorized",
    "memcom_nobias",
    "memcom_bias",
)

BUCKETED_KINDS = frozenset(
    {"naive_hash", "double_hash", "qr_concat", "qr_mult", "memcom_nobias", "memcom_bias"}
)
MEMCOM_KINDS = frozenset({"memcom_nobias", "memcom_bias"})
HALF_WIDTH_KINDS = frozenset({"double_hash", "qr_concat"})

# Knuth multiplicative constant, an LCG increment, and the Mersenne prime 2^31-1.
DEFAULT_HASH2 = (2654435761, 1013904223, 2**31 - 1)


@dataclass(frozen=True)
class SchemeConfig:
    """Static description of one embedding layout.

    buckets is only meaningful for the bucketed kinds, inner_dim only for
    factorized, keep_top only for truncate_rare. hash2 holds the (a, b, p)
    constants of the second hash used by double_hash.
    """

    kind: str
    vocab_size: int
    embed_dim: int
    buckets: int = 0
    inner_dim: int = 0
    keep_top: int = 0
    hash2: tuple = DEFAULT_HASH2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scheme kind {self.kind!r}")
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.kind in BUCKETED_KINDS and not 1 <= self.buckets <= self.vocab_size:
            raise ConfigError(
                f"buckets must be in [1, {self.vocab_size}], got {self.buckets}"
            )
        if self.kind in HALF_WIDTH_KINDS and self.embed_dim % 2 != 0:
            raise ConfigError(
                f"{self.kind} needs an even embed_dim, got {self.embed_dim}"
            )
        if self.kind == "factorized" and not 1 <= self.inner_dim < self.embed_dim:
            raise ConfigError(
                f"inner_dim must be in [1, {self.embed_dim}), got {self.inner_dim}"
            )
        if self.kind == "truncate_rare" and not 1 <= self.keep_top <= self.vocab_size:
            raise ConfigError(
                f"keep_top must be in [1, {self.vocab_size}], got {self.keep_top}"
            )
        if self.kind == "double_hash":
            a, b, p = self.hash2
            if a < 1 or b < 0 or p < max(2, self.vocab_size):
                raise ConfigError(f"bad second-hash constants {self.hash2}")

    @property
    def quotient_rows(self) -> int:
        return math.ceil(self.vocab_size / self.buckets)


def _table_shapes(cfg: SchemeConfig) -> dict:
    v, e, m = cfg.vocab_size, cfg.embed_dim, cfg.buckets
    half = e // 2
    if cfg.kind in ("uncompressed", "reduced_dim"):
        return {"table": (v, e)}
    if cfg.kind == "truncate_rare":
        return {"table": (cfg.keep_top + 1, e)}
    if cfg.kind == "naive_hash":
        return {"table": (m, e)}
    if cfg.kind == "double_hash":
        return {"table": (m, half), "table2": (m, half)}
    if cfg.kind == "qr_concat":
        return {"remainder": (m, half), "quotient": (cfg.quotient_rows, half)}
    if cfg.kind == "qr_mult":
        return {"remainder": (m, e), "quotient": (cfg.quotient_rows, e)}
    if cfg.kind == "factorized":
        return {"inner": (v, cfg.inner_dim), "projection": (cfg.inner_dim, e)}
    shapes = {"table": (m, e), "multiplier": (v, 1)}
    if cfg.kind == "memcom_bias":
        shapes["bias"] = (v, 1)
    return shapes


@dataclass
class SchemeParams:
    """Allocated tables for one scheme instance, keyed by role name."""

    config: SchemeConfig
    tables: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Param:
        return self.tables[name]

    def param_count(self) -> int:
        return sum(p.size for p in self.tables.values())

    def zero_grad(self) -> None:
        for p in self.tables.values():
            p.zero_grad()


def build_scheme(config: SchemeConfig, rng_seed: int | None = None) -> SchemeParams:
    """Allocate and initialize the tables for `config`.

    Shared rows draw uniformly from [-1/sqrt(e), +1/sqrt(e)]; the memcom
    multiplier starts at exactly 1 and the bias at exactly 0, so a freshly
    built memcom scheme computes the same function as naive hashing.
    """
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    limit = 1.0 / math.sqrt(config.embed_dim)
    tables = {}
    for name, shape in _table_shapes(config).items():
        if name == "multiplier":
            tables[name] = Param(np.ones(shape))
        elif name == "bias":
            tables[name] = Param(np.zeros(shape))
        else:
            tables[name] = Param(rng.uniform(-limit, limit, shape))
    return SchemeParams(config, tables)


def _second_hash(cfg: SchemeConfig, ids: np.ndarray) -> np.ndarray:
    a, b, p = cfg.hash2
    return ((a * ids + b) % p) % cfg.buckets


def lookup(params: SchemeParams, ids) -> tuple:
    """Map an integer id tensor (..., ) to embeddings (..., embed_dim).

    Returns (out, cache); feed the cache and the upstream gradient to
    lookup_backward to accumulate table gradients.
    """
    cfg = params.config
    ids = np.asarray(ids)
    flat = ids.reshape(-1).astype(np.int64, copy=False)
    if flat.size:
        bad = (flat < 0) | (flat >= cfg.vocab_size)
        if bad.any():
            raise IndexError(
                f"id {int(flat[bad][0])} outside [0, {cfg.vocab_size})"
            )
    rows, kind_cache = _FORWARD[cfg.kind](params, flat)
    out = rows.reshape(ids.shape + (cfg.embed_dim,))
    return out, (ids.shape, kind_cache)


def lookup_backward(params: SchemeParams, grad, cache) -> None:
    """Accumulate gradients for the rows a lookup touched.

    Rows not addressed by the batch receive exactly zero gradient.
    """
    ids_shape, kind_cache = cache
    flat_grad = np.asarray(grad).reshape(-1, params.config.embed_dim)
    _BACKWARD[params.config.kind](params, flat_grad, kind_cache)


def _fwd_direct(params, flat):
    return params["table"].value[flat], (flat,)


def _bwd_direct(params, grad, cache):
    (flat,) = cache
    scatter_add_rows(params["table"].grad, flat, grad)


def _fwd_truncate(params, flat):
    keep = params.config.keep_top
    mapped = np.where(flat < keep, flat, keep)
    return params["table"].value[mapped], (mapped,)


def _fwd_naive(params, flat):
    j = flat % params.config.buckets
    return params["table"].value[j], (j,)


def _fwd_double(params, flat):
    cfg = params.config
    j1 = flat % cfg.buckets
    j2 = _second_hash(cfg, flat)
    rows = np.concatenate(
        [params["table"].value[j1], params["table2"].value[j2]], axis=1
    )
    return rows, (j1, j2)


def _bwd_double(params, grad, cache):
    j1, j2 = cache
    half = params.config.embed_dim // 2
    scatter_add_rows(params["table"].grad, j1, grad[:, :half])
    scatter_add_rows(params["table2"].grad, j2, grad[:, half:])


def _fwd_qr_concat(params, flat):
    m = params.config.buckets
    j, k = flat % m, flat // m
    rows = np.concatenate(
        [params["remainder"].value[j], params["quotient"].value[k]], axis=1
    )
    return rows, (j, k)


def _bwd_qr_concat(params, grad, cache):
    j, k = cache
    half = params.config.embed_dim // 2
    scatter_add_rows(params["remainder"].grad, j, grad[:, :half])
    scatter_add_rows(params["quotient"].grad, k, grad[:, half:])


def _fwd_qr_mult(params, flat):
    m = params.config.buckets
    j, k = flat % m, flat // m
    rem = params["remainder"].value[j]
    quo = params["quotient"].value[k]
    return rem * quo, (j, k, rem, quo)


def _bwd_qr_mult(params, grad, cache):
    j, k, rem, quo = cache
    scatter_add_rows(params["remainder"].grad, j, grad * quo)
    scatter_add_rows(params["quotient"].grad, k, grad * rem)


def _fwd_factorized(params, flat):
    inner = params["inner"].value[flat]
    return inner @ params["projection"].value, (flat, inner)


def _bwd_factorized(params, grad, cache):
    flat, inner = cache
    scatter_add_rows(params["inner"].grad, flat, grad @ params["projection"].value.T)
    params["projection"].grad += inner.T @ grad


def _fwd_memcom(params, flat):
    # base row shared through the bucket, scalar multiplier private to the id
    j = flat % params.config.buckets
    base = params["table"].value[j]
    mult = params["multiplier"].value[flat]
    rows = base * mult
    if params.config.kind == "memcom_bias":
        rows = rows + params["bias"].value[flat]
    return rows, (flat, j, base, mult)


def _bwd_memcom(params, grad, cache):
    flat, j, base, mult = cache
    scatter_add_rows(params["table"].grad, j, grad * mult)
    scatter_add_rows(
        params["multiplier"].grad, flat, np.sum(grad * base, axis=1, keepdims=True)
    )
    if params.config.kind == "memcom_bias":
        scatter_add_rows(
            params["bias"].grad, flat, np.sum(grad, axis=1, keepdims=True)
        )


_FORWARD = {
    "uncompressed": _fwd_direct,
    "reduced_dim": _fwd_direct,
    "truncate_rare": _fwd_truncate,
    "naive_hash": _fwd_naive,
    "double_hash": _fwd_double,
    "qr_concat": _fwd_qr_concat,
    "qr_mult": _fwd_qr_mult,
    "factorized": _fwd_factorized,
    "memcom_nobias": _fwd_memcom,
    "memcom_bias": _fwd_memcom,
}

_BACKWARD = {
    "uncompressed": _bwd_direct,
    "reduced_dim": _bwd_direct,
    "truncate_rare": _bwd_direct,
    "naive_hash": _bwd_direct,
    "double_hash": _bwd_double,
    "qr_concat": _bwd_qr_concat,
    "qr_mult": _bwd_qr_mult,
    "factorized": _bwd_factorized,
    "memcom_nobias": _bwd_memcom,
    "memcom_bias": _bwd_memcom,
}


def count_params(config: SchemeConfig) -> dict:
    """Closed-form parameter count for a layout; validates the config first.

    Matches SchemeParams.param_count() of the built scheme exactly.
    """
    v, e, m = config.vocab_size, config.embed_dim, config.buckets
    half = e // 2
    if config.kind in ("uncompressed", "reduced_dim"):
        total, note = v * e, f"{v}*{e}"
    elif config.kind == "truncate_rare":
        total, note = (config.keep_top + 1) * e, f"({config.keep_top}+1)*{e}"
    elif config.kind == "naive_hash":
        total, note = m * e, f"{m}*{e}"
    elif config.kind == "double_hash":
        total, note = 2 * m * half, f"2*{m}*{half}"
    elif config.kind == "qr_concat":
        q = config.quotient_rows
        total, note = (m + q) * half, f"({m}+{q})*{half}"
    elif config.kind == "qr_mult":
        q = config.quotient_rows
        total, note = (m + q) * e, f"({m}+{q})*{e}"
    elif config.kind == "factorized":
        h = config.inner_dim
        total, note = v * h + h * e, f"{v}*{h}+{h}*{e}"
    elif config.kind == "memcom_nobias":
        total, note = m * e + v, f"{m}*{e}+{v}"
    else:
        total, note = m * e + 2 * v, f"{m}*{e}+2*{v}"
    return {"embedding_params": total, "note": note}


def expected_collisions(v: int, m: int, kind: str) -> float:
    """Expected per-bucket excess occupancy under uniform hashing.

    With v ids dropped uniformly into m buckets the expected number of ids
    beyond the first in a given bucket is v/m - 1 + (1 - 1/m)^v. Double
    hashing addresses m^2 distinct bucket pairs, so m^2 replaces m.
    """
    if kind not in ("naive", "double"):
        raise ConfigError(f"collision kind must be 'naive' or 'double', got {kind!r}")
    if v < 1 or m < 1:
        raise ConfigError(f"need v >= 1 and m >= 1, got v={v} m={m}")
    buckets = m if kind == "naive" else m * m
    return v / buckets - 1.0 + (1.0 - 1.0 / buckets) ** v


def uniqueness_audit(params: SchemeParams, threshold: float = 1e-5,
                     seed: int = 0, sample_pairs: int = 10**6,
                     enumerate_limit: int = 10**7) -> dict:
    """Fraction of same-bucket id pairs whose multipliers differ.

    Two ids that share a bucket share their base row, so their effective
    embeddings differ iff their scalar multipliers differ by more than
    `threshold`. Enumerates every pair when the total pair count is at most
    `enumerate_limit`, otherwise samples `sample_pairs` pairs with `seed`.
    """
    cfg = params.config
    if cfg.kind not in MEMCOM_KINDS:
        raise ConfigError(f"uniqueness audit needs a memcom scheme, got {cfg.kind}")
    mult = params["multiplier"].value[:, 0]
    v, m = cfg.vocab_size, cfg.buckets
    # bucket b holds ids b, b+m, b+2m, ...
    sizes = np.array([(v - b + m - 1) // m for b in range(m)], dtype=np.int64)
    pair_counts = sizes * (sizes - 1) // 2
    total_pairs = int(pair_counts.sum())
    if total_pairs == 0:
        return {"pairs_checked": 0, "fraction_distinct": 1.0}

    if total_pairs <= enumerate_limit:
        distinct = 0
        for b in range(m):
            vals = mult[b::m]
            if len(vals) < 2:
                continue
            diff = np.abs(vals[:, None] - vals[None, :])
            iu = np.triu_indices(len(vals), k=1)
            distinct += int((diff[iu] > threshold).sum())
        return {
            "pairs_checked": total_pairs,
            "fraction_distinct": distinct / total_pairs,
        }

    rng = np.random.default_rng(seed)
    buckets = rng.choice(m, size=sample_pairs, p=pair_counts / total_pairs)
    g = sizes[buckets]
    first = rng.integers(0, g)
    second = (first + 1 + rng.integers(0, g - 1)) % g
    a = mult[buckets + first * m]
    b_ = mult[buckets + second * m]
    distinct = int((np.abs(a - b_) > threshold).sum())
    return {"pairs_checked": sample_pairs, "fraction_distinct": distinct / sample_pairs}


_HEADER_KEYS = ("kind", "vocab_size", "embed_dim", "buckets", "inner_dim",
                "keep_top", "seed")


def scheme_header(config: SchemeConfig) -> dict:
    header = {key: getattr(config, key) for key in _HEADER_KEYS}
    a, b, p = config.hash2
    header["hash2"] = f"{a},{b},{p}"
    return header


def config_from_header(header: dict) -> SchemeConfig:
    a, b, p = (int(x) for x in header["hash2"].split(","))
    return SchemeConfig(
        kind=header["kind"],
        vocab_size=int(header["vocab_size"]),
        embed_dim=int(header["embed_dim"]),
        buckets=int(header["buckets"]),
        inner_dim=int(header["inner_dim"]),
        keep_top=int(header["keep_top"]),
        hash2=(a, b, p),
        seed=int(header["seed"]),
    )


def save_scheme(path, params: SchemeParams) -> None:
    tensors = {name: p.value for name, p in params.tables.items()}
    io.write_blocks(path, scheme_header(params.config), tensors)


def load_scheme(path) -> SchemeParams:
    header, tensors = io.read_blocks(path)
    config = config_from_header(header)
    expected = _table_shapes(config)
    if set(expected) != set(tensors):
        raise OSError(f"checkpoint tables {sorted(tensors)} do not match {config.kind}")
    tables = {}
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise OSError(f"table {name} has shape {tensors[name].shape}, want {shape}")
        tables[name] = Param(tensors[name])
    return SchemeParams(config, tables)
