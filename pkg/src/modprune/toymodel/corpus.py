"""Calibration/training corpora: two synthetic Markov languages plus byte files.

The two synthetic sources are character-level Markov chains over a 32-symbol
alphabet. Language A walks the first 20 symbols, language B the last 20
(8 symbols shared), with seed-derived transition rows inside each active set.
The disjoint parts of the active sets guarantee the two bigram distributions
stay far apart for every seed, which is what makes cross-dataset rank drift
informative at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import substream

MARKOV_ALPHABET = 32
_ACTIVE = {
    "synthetic-a": np.arange(0, 20),
    "synthetic-b": np.arange(12, 32),
}
_SOURCE_TAG = {"synthetic-a": 101, "synthetic-b": 202}


@dataclass
class CorpusSpec:
    source: str          # "synthetic-a" | "synthetic-b" | text file path
    seed: int
    n_samples: int
    seq_len: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2 for next-token training")


def markov_transitions(source: str, seed: int) -> np.ndarray:
    """Row-stochastic (32, 32) transition matrix for a synthetic source.

    Rows outside the active set self-map into the active set uniformly so the
    chain is well-defined from any state; rows inside are Dirichlet draws over
    the active set sharpened toward a few preferred successors.
    """
    if source not in _ACTIVE:
        raise ValueError(f"unknown synthetic source: {source}")
    active = _ACTIVE[source]
    rng = substream(seed, _SOURCE_TAG[source])
    trans = np.zeros((MARKOV_ALPHABET, MARKOV_ALPHABET))
    k = active.size
    for row in range(MARKOV_ALPHABET):
        weights = rng.dirichlet(np.full(k, 0.3))
        # Sharpen: boost three seed-chosen successors so rows are distinctive.
        boost = rng.choice(k, size=3, replace=False)
        weights[boost] += rng.dirichlet(np.ones(3)) * 3.0
        weights /= weights.sum()
        trans[row, active] = weights
    return trans


def _sample_chain(trans: np.ndarray, start_states: np.ndarray, n_samples: int,
                  seq_len: int, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(trans, axis=1)
    cum[:, -1] = 1.0
    tokens = np.empty((n_samples, seq_len), dtype=np.int64)
    tokens[:, 0] = start_states
    uniforms = rng.random((n_samples, seq_len - 1))
    for t in range(1, seq_len):
        prev = tokens[:, t - 1]
        u = uniforms[:, t - 1]
        nxt = np.empty(n_samples, dtype=np.int64)
        for row in np.unique(prev):
            sel = prev == row
            nxt[sel] = np.searchsorted(cum[row], u[sel], side="right")
        tokens[:, t] = nxt
    return tokens


def gen_corpus(spec: CorpusSpec, vocab_size: int) -> np.ndarray:
    """Token sequences for ``spec`` as an (n_samples, seq_len) int array.

    Synthetic sources need vocab_size >= 32; text files are tokenized byte by
    byte with each byte reduced modulo ``vocab_size``.
    """
    if spec.source in _ACTIVE:
        if vocab_size < MARKOV_ALPHABET:
            raise ValueError(f"vocab_size must be >= {MARKOV_ALPHABET} for synthetic sources")
        trans = markov_transitions(spec.source, spec.seed)
        rng = substream(spec.seed, _SOURCE_TAG[spec.source], 1)
        starts = rng.choice(_ACTIVE[spec.source], size=spec.n_samples)
        return _sample_chain(trans, starts, spec.n_samples, spec.seq_len, rng)

    with open(spec.source, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0:
        raise ValueError(f"empty corpus file: {spec.source}")
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.int64) % vocab_size
    needed = spec.n_samples * spec.seq_len
    if data.size < needed:
        reps = -(-needed // data.size)
        data = np.tile(data, reps)
    return data[:needed].reshape(spec.n_samples, spec.seq_len).copy()


def mixed_corpus(spec_a: CorpusSpec, spec_b: CorpusSpec, vocab_size: int) -> np.ndarray:
    """Interleaved 50/50 A+B corpus (equal sample counts required)."""
    a = gen_corpus(spec_a, vocab_size)
    b = gen_corpus(spec_b, vocab_size)
    if a.shape != b.shape:
        raise ValueError("mixed corpus requires matching sample counts and lengths")
    out = np.empty((a.shape[0] + b.shape[0], a.shape[1]), dtype=np.int64)
    out[0::2] = a
    out[1::2] = b
    return out
