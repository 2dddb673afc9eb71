"""Per-neuron/per-head activation statistics and importance metrics.

Statistics are accumulated with Welford/Chan updates in fixed corpus order,
so two runs over the same corpus agree bitwise and split-then-merge agrees
with a single pass to float64 accuracy. Variance is the population variance
(divide by the token count) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .toymodel import MaskSet, ModelBundle, forward_masked

FFN_UNIT = "ffn"
HEAD_UNIT = "head"
METRICS = ("wanda_sp", "flap", "weight_norm")


@dataclass
class RunningStats:
    """Vectorized running statistics over a fixed set of units."""

    count: int
    mean: np.ndarray
    m2: np.ndarray
    abs_sum: np.ndarray
    sq_sum: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RunningStats":
        return cls(count=0, mean=np.zeros(n), m2=np.zeros(n),
                   abs_sum=np.zeros(n), sq_sum=np.zeros(n))

    def update(self, values: np.ndarray) -> None:
        """Fold in a (tokens, units) batch."""
        m = values.shape[0]
        if m == 0:
            return
        batch_mean = values.mean(axis=0)
        batch_m2 = values.var(axis=0) * m
        total = self.count + m
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * (m / total)
        self.m2 = self.m2 + batch_m2 + delta * delta * (self.count * m / total)
        self.abs_sum = self.abs_sum + np.abs(values).sum(axis=0)
        self.sq_sum = self.sq_sum + (values * values).sum(axis=0)
        self.count = total

    def merge(self, other: "RunningStats") -> "RunningStats":
        if other.count == 0:
            return RunningStats(self.count, self.mean.copy(), self.m2.copy(),
                                self.abs_sum.copy(), self.sq_sum.copy())
        if self.count == 0:
            return other.merge(self)
        total = self.count + other.count
        delta = other.mean - self.mean
        return RunningStats(
            count=total,
            mean=self.mean + delta * (other.count / total),
            m2=self.m2 + other.m2 + delta * delta * (self.count * other.count / total),
            abs_sum=self.abs_sum + other.abs_sum,
            sq_sum=self.sq_sum + other.sq_sum,
        )

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("variance of empty stats")
        return np.maximum(self.m2 / self.count, 0.0)

    @property
    def abs_mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("abs_mean of empty stats")
        return self.abs_sum / self.count

    @property
    def l2(self) -> np.ndarray:
        """L2 norm of each unit's activation trace over all tokens."""
        return np.sqrt(self.sq_sum)


@dataclass
class ActivationStats:
    """Stats per layer: FFN neuron activations and per-token head-output norms."""

    ffn: list[RunningStats] = field(default_factory=list)
    head: list[RunningStats] = field(default_factory=list)

    @classmethod
    def zeros(cls, bundle: ModelBundle) -> "ActivationStats":
        cfg = bundle.config
        return cls(ffn=[RunningStats.zeros(cfg.layer_ffn(l)) for l in range(cfg.n_layers)],
                   head=[RunningStats.zeros(cfg.layer_heads(l)) for l in range(cfg.n_layers)])

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        return ActivationStats(
            ffn=[a.merge(b) for a, b in zip(self.ffn, other.ffn)],
            head=[a.merge(b) for a, b in zip(self.head, other.head)],
        )

    @property
    def token_count(self) -> int:
        return self.ffn[0].count if self.ffn else 0


def collect_stats(bundle: ModelBundle, corpus: np.ndarray,
                  masks: MaskSet | None = None, batch_size: int = 16) -> ActivationStats:
    """One deterministic pass over ``corpus`` accumulating activation stats.

    FFN statistics are taken on the post-SwiGLU (and post-mask) neuron
    activations feeding the down projection; head statistics on the per-token
    L2 norm of each (masked) head context vector.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("cannot collect stats on an empty corpus")
    if masks is None:
        masks = MaskSet.ones(bundle.config)
    stats = ActivationStats.zeros(bundle)
    for start in range(0, corpus.shape[0], batch_size):
        batch = corpus[start:start + batch_size]
        _, tape = forward_masked(bundle, masks, batch)
        for l, lt in enumerate(tape.layers):
            z = lt.z * masks.ffn[l][None, None, :]
            stats.ffn[l].update(z.reshape(-1, z.shape[-1]))
            ctx = lt.ctx * masks.head[l][None, None, :, None]
            head_norms = np.linalg.norm(ctx, axis=-1)
            stats.head[l].update(head_norms.reshape(-1, head_norms.shape[-1]))
    return stats


@dataclass
class LayerScores:
    """Importance scores for one layer under one metric."""

    metric: str
    ffn: np.ndarray
    head: np.ndarray


def _check_layer(bundle: ModelBundle, layer: int) -> None:
    if not 0 <= layer < bundle.config.n_layers:
        raise IndexError(f"layer {layer} out of range")


def score_wanda_sp(stats: ActivationStats, bundle: ModelBundle, layer: int) -> LayerScores:
    """Activation-L2 x outgoing-weight-L1 per output channel."""
    _check_layer(bundle, layer)
    lw = bundle.weights.layers[layer]
    dh = bundle.config.d_head
    ffn = stats.ffn[layer].l2 * np.abs(lw.w_down).sum(axis=0)
    n_heads = bundle.config.layer_heads(layer)
    blocks = lw.wo.reshape(lw.wo.shape[0], n_heads, dh)
    head = stats.head[layer].l2 * np.abs(blocks).sum(axis=(0, 2))
    return LayerScores(metric="wanda_sp", ffn=ffn, head=head)


def score_flap(stats: ActivationStats, bundle: ModelBundle, layer: int) -> LayerScores:
    """Activation variance x squared outgoing-column L2 norm."""
    _check_layer(bundle, layer)
    lw = bundle.weights.layers[layer]
    dh = bundle.config.d_head
    ffn = stats.ffn[layer].variance * (lw.w_down ** 2).sum(axis=0)
    n_heads = bundle.config.layer_heads(layer)
    blocks = lw.wo.reshape(lw.wo.shape[0], n_heads, dh)
    head = stats.head[layer].variance * (blocks ** 2).sum(axis=(0, 2))
    return LayerScores(metric="flap", ffn=ffn, head=head)


def score_weight_norm(bundle: ModelBundle, layer: int) -> LayerScores:
    """Activation-independent metric: L2 norm of each unit's owned weights."""
    _check_layer(bundle, layer)
    lw = bundle.weights.layers[layer]
    dh = bundle.config.d_head
    ffn = np.sqrt((lw.w_gate ** 2).sum(axis=1) + (lw.w_up ** 2).sum(axis=1)
                  + (lw.w_down ** 2).sum(axis=0))
    n_heads = bundle.config.layer_heads(layer)
    q = (lw.wq.reshape(n_heads, dh, -1) ** 2).sum(axis=(1, 2))
    k = (lw.wk.reshape(n_heads, dh, -1) ** 2).sum(axis=(1, 2))
    v = (lw.wv.reshape(n_heads, dh, -1) ** 2).sum(axis=(1, 2))
    o = (lw.wo.reshape(lw.wo.shape[0], n_heads, dh) ** 2).sum(axis=(0, 2))
    return LayerScores(metric="weight_norm", ffn=ffn, head=np.sqrt(q + k + v + o))


def score_layer(metric: str, stats: ActivationStats | None, bundle: ModelBundle,
                layer: int) -> LayerScores:
    if metric == "wanda_sp":
        return score_wanda_sp(stats, bundle, layer)
    if metric == "flap":
        return score_flap(stats, bundle, layer)
    if metric == "weight_norm":
        return score_weight_norm(bundle, layer)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def within_layer_ranks(scores: np.ndarray) -> np.ndarray:
    """Descending-score ranks (1 = most important); ties broken by index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.lexsort((np.arange(scores.size), -scores))
    ranks = np.empty(scores.size, dtype=np.int64)
    ranks[order] = np.arange(1, scores.size + 1)
    return ranks


def rank_drift(ranks_a: np.ndarray, ranks_b: np.ndarray) -> np.ndarray:
    """Normalized per-unit rank shift |r_A - r_B| / (N - 1), in [0, 1]."""
    ranks_a = np.asarray(ranks_a)
    ranks_b = np.asarray(ranks_b)
    if ranks_a.shape != ranks_b.shape:
        raise ValueError("rank vectors must have equal length")
    n = ranks_a.size
    if n < 2:
        raise ValueError("rank drift needs at least 2 units")
    return np.abs(ranks_a - ranks_b).astype(np.float64) / (n - 1)
