"""Next-token pretraining of the toy transformer."""

from __future__ import annotations

import numpy as np

from ..numerics import AdamState, adam_step, substream
from .config import MaskSet, ModelBundle, ModelConfig
from .model import backward, cross_entropy, forward_masked


class TrainingDivergedError(RuntimeError):
    pass


def train_toy(config: ModelConfig, corpus: np.ndarray, steps: int, lr: float,
              seed: int, batch_size: int = 8) -> tuple[ModelBundle, list[float]]:
    """Train a fresh model with Adam on cross-entropy; returns (bundle, losses).

    Fully deterministic for a fixed seed: weight init, batch order, and the
    optimizer all derive from it. steps=0 returns the untouched initialization.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("cannot train on an empty corpus")
    bundle = ModelBundle.create(config, seed)
    masks = MaskSet.ones(config)
    names_params = bundle.weights.named_tensors()
    params = [p for _, p in names_params]
    state = AdamState.for_params(params, lr=lr)

    rng = substream(seed, 7)
    order = rng.permutation(corpus.shape[0])
    cursor = 0
    losses: list[float] = []
    for step in range(steps):
        if cursor + batch_size > order.size:
            order = rng.permutation(corpus.shape[0])
            cursor = 0
        batch = corpus[order[cursor:cursor + batch_size]]
        cursor += batch_size

        logits, tape = forward_masked(bundle, masks, batch)
        loss, dlogits = cross_entropy(logits, batch)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        grads = backward(bundle, tape, dlogits)
        adam_step(params, [g for _, g in grads.weights.named_tensors()], state)
        losses.append(loss)
    return bundle, losses
