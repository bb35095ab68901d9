"""Small sequence models over a compressed embedding table.

Three variants share one trunk (embed, average-pool over the full input
window, flatten, relu, dropout, batchnorm):

    classifier         trunk, dense(e/2) + relu + dropout + batchnorm,
                       dense(num_labels); softmax applied by the loss
    pointwise_ranker   trunk, dense(num_labels); the mid block is dropped
    pairwise_ranknet   trunk as the user tower, concatenated with the raw
                       embedding of a candidate item, one scoring dense unit;
                       both items of a pair share every parameter

Pooling runs over the whole window including padding positions, so heavy
padding dilutes the pooled representation; that is intentional and matches
the reference layout this reproduces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import io, ops, schemes
from .errors import ConfigError
from .ops import Param

VARIANTS = ("classifier", "pointwise_ranker", "pairwise_ranknet")


@dataclass(frozen=True)
class NetworkSpec:
    variant: str
    scheme: schemes.SchemeConfig
    num_labels: int
    input_len: int = 128
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.num_labels < 1:
            raise ConfigError(f"num_labels must be >= 1, got {self.num_labels}")
        if self.input_len < 1:
            raise ConfigError(f"input_len must be >= 1, got {self.input_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.variant == "classifier" and self.scheme.embed_dim < 2:
            raise ConfigError("classifier needs embed_dim >= 2 for its hidden block")

    @property
    def hidden_units(self) -> int:
        return self.scheme.embed_dim // 2


class DenseLayer:
    def __init__(self, rng, fan_in: int, units: int):
        limit = math.sqrt(6.0 / (fan_in + units))
        self.weight = Param(rng.uniform(-limit, limit, (fan_in, units)))
        self.bias = Param(np.zeros(units))

    def forward(self, x):
        return ops.dense(x, self.weight.value, self.bias.value), x

    def backward(self, grad, cache):
        dx, dw, db = ops.dense_backward(grad, cache, self.weight.value)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNormLayer:
    def __init__(self, features: int):
        self.gamma = Param(np.ones(features))
        self.beta = Param(np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def forward(self, x, train: bool):
        return ops.batchnorm(
            x, self.gamma.value, self.beta.value,
            self.running_mean, self.running_var, train,
        )

    def backward(self, grad, cache):
        dx, dgamma, dbeta = ops.batchnorm_backward(grad, cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Network:
    """One model instance: a scheme plus the dense/batchnorm stack."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.scheme = schemes.build_scheme(spec.scheme)
        rng = np.random.default_rng(seed)
        e = spec.scheme.embed_dim
        self.bn_pool = BatchNormLayer(e)
        if spec.variant == "classifier":
            self.hidden = DenseLayer(rng, e, spec.hidden_units)
            self.bn_hidden = BatchNormLayer(spec.hidden_units)
            self.out = DenseLayer(rng, spec.hidden_units, spec.num_labels)
        elif spec.variant == "pointwise_ranker":
            self.out = DenseLayer(rng, e, spec.num_labels)
        else:
            self.score = DenseLayer(rng, 2 * e, 1)

    # --- parameter registry ---

    def params(self) -> dict:
        out = {}
        for name, p in self.scheme.tables.items():
            out[f"embed.{name}"] = p
        out["bn_pool.gamma"] = self.bn_pool.gamma
        out["bn_pool.beta"] = self.bn_pool.beta
        if self.spec.variant == "classifier":
            out["hidden.weight"] = self.hidden.weight
            out["hidden.bias"] = self.hidden.bias
            out["bn_hidden.gamma"] = self.bn_hidden.gamma
            out["bn_hidden.beta"] = self.bn_hidden.beta
            out["out.weight"] = self.out.weight
            out["out.bias"] = self.out.bias
        elif self.spec.variant == "pointwise_ranker":
            out["out.weight"] = self.out.weight
            out["out.bias"] = self.out.bias
        else:
            out["score.weight"] = self.score.weight
            out["score.bias"] = self.score.bias
        return out

    def _norm_layers(self) -> dict:
        layers = {"bn_pool": self.bn_pool}
        if self.spec.variant == "classifier":
            layers["bn_hidden"] = self.bn_hidden
        return layers

    def state(self) -> dict:
        """Every stored tensor: trainables plus batchnorm running stats."""
        out = {name: p.value for name, p in self.params().items()}
        for name, layer in self._norm_layers().items():
            out[f"{name}.running_mean"] = layer.running_mean
            out[f"{name}.running_var"] = layer.running_var
        return out

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    # --- forward/backward ---

    def _trunk_forward(self, ids, train: bool, rng):
        emb, c_emb = schemes.lookup(self.scheme, ids)
        pooled = ops.average_pool_rows(emb, self.spec.input_len)
        flat = pooled.reshape(pooled.shape[0], -1)
        act = ops.relu(flat)
        drop, mask = ops.dropout(act, self.spec.dropout_rate, train, rng)
        out, c_bn = self.bn_pool.forward(drop, train)
        return out, (c_emb, flat, mask, c_bn)

    def _trunk_backward(self, grad, cache) -> None:
        c_emb, flat, mask, c_bn = cache
        g = self.bn_pool.backward(grad, c_bn)
        g = ops.dropout_backward(g, mask)
        g = ops.relu_backward(g, flat)
        g = ops.average_pool_rows_backward(
            g.reshape(g.shape[0], 1, -1), self.spec.input_len
        )
        schemes.lookup_backward(self.scheme, g, c_emb)

    def forward(self, ids, train: bool = False, rng=None):
        """Logits for the softmax variants. Returns (logits, cache)."""
        if self.spec.variant == "pairwise_ranknet":
            raise ConfigError("pairwise_ranknet scores pairs; use pairwise_forward")
        if train and rng is None and self.spec.dropout_rate > 0.0:
            raise ValueError("training forward needs an rng for dropout")
        trunk, c_trunk = self._trunk_forward(ids, train, rng)
        if self.spec.variant == "pointwise_ranker":
            logits, c_out = self.out.forward(trunk)
            return logits, ("pointwise", c_trunk, c_out)
        h_lin, c_hidden = self.hidden.forward(trunk)
        h_act = ops.relu(h_lin)
        h_drop, mask2 = ops.dropout(h_act, self.spec.dropout_rate, train, rng)
        h_bn, c_bn2 = self.bn_hidden.forward(h_drop, train)
        logits, c_out = self.out.forward(h_bn)
        return logits, ("classifier", c_trunk, c_hidden, h_lin, mask2, c_bn2, c_out)

    def backward(self, dlogits, cache) -> None:
        tag = cache[0]
        if tag == "pointwise":
            _, c_trunk, c_out = cache
            g = self.out.backward(dlogits, c_out)
        else:
            _, c_trunk, c_hidden, h_lin, mask2, c_bn2, c_out = cache
            g = self.out.backward(dlogits, c_out)
            g = self.bn_hidden.backward(g, c_bn2)
            g = ops.dropout_backward(g, mask2)
            g = ops.relu_backward(g, h_lin)
            g = self.hidden.backward(g, c_hidden)
        self._trunk_backward(g, c_trunk)

    # --- pairwise scoring ---

    def _item_embed(self, item_ids):
        ids = np.asarray(item_ids).reshape(-1, 1)
        emb, cache = schemes.lookup(self.scheme, ids)
        return emb.reshape(ids.shape[0], -1), cache

    def pairwise_forward(self, user_ids, item_hi, item_lo,
                         train: bool = False, rng=None):
        """Score a preferred/other item pair against the user tower.

        Returns (score_hi, score_lo, loss, cache) with loss summed over the
        batch: sum(log(1 + exp(-(score_hi - score_lo)))).
        """
        if self.spec.variant != "pairwise_ranknet":
            raise ConfigError(f"{self.spec.variant} does not score pairs")
        if train and rng is None and self.spec.dropout_rate > 0.0:
            raise ValueError("training forward needs an rng for dropout")
        u, c_trunk = self._trunk_forward(user_ids, train, rng)
        e_hi, c_hi = self._item_embed(item_hi)
        e_lo, c_lo = self._item_embed(item_lo)
        x_hi = np.concatenate([u, e_hi], axis=1)
        x_lo = np.concatenate([u, e_lo], axis=1)
        s_hi, cs_hi = self.score.forward(x_hi)
        s_lo, cs_lo = self.score.forward(x_lo)
        delta = s_hi - s_lo
        loss = float(np.logaddexp(0.0, -delta).sum())
        cache = (c_trunk, c_hi, c_lo, cs_hi, cs_lo, delta)
        return s_hi.ravel(), s_lo.ravel(), loss, cache

    def pairwise_backward(self, cache, upstream: float = 1.0) -> None:
        c_trunk, c_hi, c_lo, cs_hi, cs_lo, delta = cache
        e = self.spec.scheme.embed_dim
        ddelta = -_sigmoid(-delta) * upstream
        dx_hi = self.score.backward(ddelta, cs_hi)
        dx_lo = self.score.backward(-ddelta, cs_lo)
        self._trunk_backward(dx_hi[:, :e] + dx_lo[:, :e], c_trunk)
        b = dx_hi.shape[0]
        schemes.lookup_backward(self.scheme, dx_hi[:, e:].reshape(b, 1, e), c_hi)
        schemes.lookup_backward(self.scheme, dx_lo[:, e:].reshape(b, 1, e), c_lo)

    def pairwise_scores(self, inputs, item_ids):
        """Eval-mode score matrix (batch, len(item_ids)) for the pair scorer.

        The scoring unit is linear in the concatenated features, so the user
        and item contributions decompose and every candidate can be scored
        without materializing the concatenations.
        """
        e = self.spec.scheme.embed_dim
        u, _ = self._trunk_forward(inputs, train=False, rng=None)
        cand, _ = self._item_embed(item_ids)
        w = self.score.weight.value
        bias = self.score.bias.value[0]
        return (u @ w[:e, 0])[:, None] + (cand @ w[e:, 0])[None, :] + bias

    def score_candidates(self, inputs, label_items):
        """Scores (batch, num_labels); label_items maps label -> item id."""
        if self.spec.variant == "pairwise_ranknet":
            return self.pairwise_scores(inputs, label_items)
        logits, _ = self.forward(inputs, train=False)
        return logits


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


def rank_items(net: Network, user_seq, candidate_ids) -> np.ndarray:
    """Order candidates by descending score, ties broken by ascending id.

    Candidates are label ids for the softmax variants and item (input vocab)
    ids for the pairwise scorer.
    """
    cands = np.asarray(candidate_ids, dtype=np.int64)
    if cands.size == 0:
        raise ValueError("candidate list is empty")
    inputs = np.asarray(user_seq).reshape(1, -1)
    if net.spec.variant == "pairwise_ranknet":
        scores = net.pairwise_scores(inputs, cands)[0]
    else:
        bad = (cands < 0) | (cands >= net.spec.num_labels)
        if bad.any():
            raise IndexError(
                f"candidate {int(cands[bad][0])} outside [0, {net.spec.num_labels})"
            )
        logits, _ = net.forward(inputs, train=False)
        scores = logits[0, cands]
    order = np.lexsort((cands, -scores))
    return cands[order]


def count_network_params(spec: NetworkSpec) -> dict:
    """Closed-form count of every stored tensor entry, by layer group.

    Batchnorm contributes 4 per feature (scale, shift, and the two running
    stats); the totals therefore match the on-disk checkpoint exactly.
    """
    emb = schemes.count_params(spec.scheme)["embedding_params"]
    e = spec.scheme.embed_dim
    labels = spec.num_labels
    if spec.variant == "classifier":
        h = spec.hidden_units
        dense = (e * h + h) + (h * labels + labels)
        norm = 4 * e + 4 * h
    elif spec.variant == "pointwise_ranker":
        dense = e * labels + labels
        norm = 4 * e
    else:
        dense = 2 * e + 1
        norm = 4 * e
    return {
        "embedding_params": emb,
        "dense_params": dense,
        "batchnorm_params": norm,
        "total_params": emb + dense + norm,
    }


def save_model(path, net: Network) -> None:
    header = {
        "format": "model-v1",
        "variant": net.spec.variant,
        "num_labels": net.spec.num_labels,
        "input_len": net.spec.input_len,
        "dropout_rate": repr(net.spec.dropout_rate),
    }
    for key, value in schemes.scheme_header(net.spec.scheme).items():
        header[f"scheme.{key}"] = value
    io.write_blocks(path, header, net.state())


def load_model(path) -> Network:
    header, tensors = io.read_blocks(path)
    if header.get("format") != "model-v1":
        raise OSError(f"not a model checkpoint: {path}")
    scheme_cfg = schemes.config_from_header(
        {k[len("scheme."):]: v for k, v in header.items() if k.startswith("scheme.")}
    )
    spec = NetworkSpec(
        variant=header["variant"],
        scheme=scheme_cfg,
        num_labels=int(header["num_labels"]),
        input_len=int(header["input_len"]),
        dropout_rate=float(header["dropout_rate"]),
    )
    net = Network(spec, seed=0)
    expected = net.state()
    if set(expected) != set(tensors):
        raise OSError("checkpoint tensors do not match the model layout")
    for name, p in net.params().items():
        if tensors[name].shape != p.value.shape:
            raise OSError(f"tensor {name} has shape {tensors[name].shape}")
        p.value[...] = tensors[name]
    for name, layer in net._norm_layers().items():
        layer.running_mean[...] = tensors[f"{name}.running_mean"]
        layer.running_var[...] = tensors[f"{name}.running_var"]
    return net
