"""Model configuration, weight containers, and mask containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import substream


@dataclass
class ModelConfig:
    """Shape of the decoder-only toy transformer.

    Pruned models have ragged per-layer widths; ``ffn_widths`` and
    ``head_counts`` override the uniform ``d_ffn`` / ``n_heads`` when set.
    ``d_head`` is fixed by the unpruned head count and never changes.
    """

    n_layers: int = 4
    d_model: int = 128
    d_ffn: int = 512
    n_heads: int = 4
    vocab_size: int = 64
    max_seq_len: int = 128
    ffn_widths: tuple[int, ...] | None = None
    head_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if min(self.n_layers, self.d_model, self.d_ffn, self.n_heads,
               self.vocab_size, self.max_seq_len) <= 0:
            raise ValueError("all config dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.ffn_widths is not None:
            self.ffn_widths = tuple(int(w) for w in self.ffn_widths)
            if len(self.ffn_widths) != self.n_layers or min(self.ffn_widths) <= 0:
                raise ValueError("ffn_widths must list one positive width per layer")
        if self.head_counts is not None:
            self.head_counts = tuple(int(h) for h in self.head_counts)
            if len(self.head_counts) != self.n_layers or min(self.head_counts) <= 0:
                raise ValueError("head_counts must list one positive count per layer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def layer_ffn(self, layer: int) -> int:
        return self.ffn_widths[layer] if self.ffn_widths is not None else self.d_ffn

    def layer_heads(self, layer: int) -> int:
        return self.head_counts[layer] if self.head_counts is not None else self.n_heads

    def is_uniform(self) -> bool:
        return self.ffn_widths is None and self.head_counts is None


@dataclass
class LayerWeights:
    """One transformer block. The FFN neuron unit owns {gate row j, up row j,
    down column j}; head h owns its Q/K/V row blocks and O column block."""

    wq: np.ndarray      # (H*d_head, d_model)
    wk: np.ndarray      # (H*d_head, d_model)
    wv: np.ndarray      # (H*d_head, d_model)
    wo: np.ndarray      # (d_model, H*d_head)
    attn_gain: np.ndarray   # (d_model,)
    ffn_gain: np.ndarray    # (d_model,)
    w_gate: np.ndarray  # (d_ffn, d_model)
    w_up: np.ndarray    # (d_ffn, d_model)
    w_down: np.ndarray  # (d_model, d_ffn)


@dataclass
class ModelWeights:
    embed: np.ndarray      # (vocab, d_model)
    out_head: np.ndarray   # (vocab, d_model)
    out_gain: np.ndarray   # (d_model,)
    layers: list[LayerWeights] = field(default_factory=list)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Fixed-order (name, array) listing used by checkpoints and optimizers."""
        out = [("embed", self.embed), ("out_head", self.out_head), ("out_gain", self.out_gain)]
        for i, lw in enumerate(self.layers):
            for attr in ("wq", "wk", "wv", "wo", "attn_gain", "ffn_gain",
                         "w_gate", "w_up", "w_down"):
                out.append((f"layer{i}.{attr}", getattr(lw, attr)))
        return out

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            embed=self.embed.copy(),
            out_head=self.out_head.copy(),
            out_gain=self.out_gain.copy(),
            layers=[LayerWeights(**{a: getattr(lw, a).copy() for a in (
                "wq", "wk", "wv", "wo", "attn_gain", "ffn_gain",
                "w_gate", "w_up", "w_down")}) for lw in self.layers],
        )


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Gaussian init (std 0.02) for projections, unit norm gains."""
    def gauss(rng, *shape):
        return rng.normal(0.0, 0.02, size=shape)

    d, dh = config.d_model, config.d_head
    rng = substream(seed, 0)
    weights = ModelWeights(
        embed=gauss(rng, config.vocab_size, d),
        out_head=gauss(rng, config.vocab_size, d),
        out_gain=np.ones(d),
    )
    for layer in range(config.n_layers):
        rng = substream(seed, 1, layer)
        h = config.layer_heads(layer)
        f = config.layer_ffn(layer)
        weights.layers.append(LayerWeights(
            wq=gauss(rng, h * dh, d),
            wk=gauss(rng, h * dh, d),
            wv=gauss(rng, h * dh, d),
            wo=gauss(rng, d, h * dh),
            attn_gain=np.ones(d),
            ffn_gain=np.ones(d),
            w_gate=gauss(rng, f, d),
            w_up=gauss(rng, f, d),
            w_down=gauss(rng, d, f),
        ))
    return weights


@dataclass
class MaskSet:
    """Per-layer FFN neuron masks and attention head masks, entries in [0, 1]."""

    ffn: list[np.ndarray]    # layer l: (d_ffn_l,)
    head: list[np.ndarray]   # layer l: (n_heads_l,)

    @classmethod
    def ones(cls, config: ModelConfig) -> "MaskSet":
        return cls(
            ffn=[np.ones(config.layer_ffn(l)) for l in range(config.n_layers)],
            head=[np.ones(config.layer_heads(l)) for l in range(config.n_layers)],
        )

    def validate(self, config: ModelConfig) -> None:
        if len(self.ffn) != config.n_layers or len(self.head) != config.n_layers:
            raise ValueError("mask layer count mismatch")
        for l in range(config.n_layers):
            if self.ffn[l].shape != (config.layer_ffn(l),):
                raise ValueError(f"ffn mask shape mismatch at layer {l}")
            if self.head[l].shape != (config.layer_heads(l),):
                raise ValueError(f"head mask shape mismatch at layer {l}")
            for arr in (self.ffn[l], self.head[l]):
                if np.any(arr < 0.0) or np.any(arr > 1.0):
                    raise ValueError("mask entries must lie in [0, 1]")

    def is_hard(self) -> bool:
        return all(np.all((m == 0.0) | (m == 1.0)) for m in self.ffn + self.head)

    def copy(self) -> "MaskSet":
        return MaskSet(ffn=[m.copy() for m in self.ffn], head=[m.copy() for m in self.head])


def default_vocab(vocab_size: int) -> list[str]:
    """Printable token labels: letters, then digits, then x## hex names."""
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    vocab = []
    for i in range(vocab_size):
        if i < len(alphabet):
            vocab.append(alphabet[i])
        else:
            vocab.append(f"x{i:02x}")
    return vocab


@dataclass
class ModelBundle:
    """Everything needed to run or prune one model."""

    config: ModelConfig
    weights: ModelWeights
    vocab: list[str]

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "ModelBundle":
        return cls(config=config, weights=init_weights(config, seed),
                   vocab=default_vocab(config.vocab_size))
