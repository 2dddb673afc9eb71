"""Behavior-consistent modularization of FFN neurons, per layer.

Pipeline: unit-norm neuron features -> spherical KMeans with silhouette
K-selection -> split drift-heterogeneous modules at their median drift ->
differentiable refinement of centroids under a four-term objective
(compactness, worst-module penalty, within-module drift variance, centroid
repulsion). Soft memberships come from a softmax over neuron-centroid
cosines; hard assignments are the row argmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import AdamState, adam_step, quantile, softmax, substream
from .toymodel import ModelBundle

KMEANS_MAX_ITERS = 100


@dataclass
class BcmHyper:
    """Modularization hyperparameters. Defaults target full-size layers; use
    :meth:`desk_profile` for the small toy widths."""

    module_counts: tuple[int, ...] = (16, 24, 32, 40, 48)
    gamma_split: float = 0.80
    min_split_size: int = 32
    refine_steps: int = 15
    refine_lr: float = 0.01
    gamma_pair: float = 0.25
    w_sim: float = 1.0
    w_consis: float = 1.0
    w_rep: float = 1.0
    temperature: float = 1.0
    seed: int = 0

    @classmethod
    def desk_profile(cls, seed: int = 0) -> "BcmHyper":
        return cls(module_counts=(2, 4, 8), min_split_size=4, seed=seed)


@dataclass
class ModulePartition:
    """Per-layer neuron -> module partition with soft memberships."""

    assignment: np.ndarray          # (N,) ints in 0..n_modules-1
    centroids: np.ndarray           # (n_modules, d), unit rows
    soft: np.ndarray | None = None  # (N, n_modules), rows sum to 1
    degenerate: np.ndarray | None = None  # flagged zero-weight neurons

    @property
    def n_modules(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_units(self) -> int:
        return self.assignment.shape[0]

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def module_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_modules)

    def mean_drift(self, drifts: np.ndarray) -> np.ndarray:
        """Hard-assignment mean drift per module."""
        return np.array([drifts[self.members(k)].mean() for k in range(self.n_modules)])

    def drift_std(self, drifts: np.ndarray) -> np.ndarray:
        """Population std of drift per module."""
        return np.array([drifts[self.members(k)].std() for k in range(self.n_modules)])

    def soft_drift(self, drifts: np.ndarray) -> np.ndarray:
        """Soft-membership-weighted mean drift per module."""
        if self.soft is None:
            raise ValueError("partition has no soft memberships yet")
        mass = self.soft.sum(axis=0)
        out = np.zeros(self.n_modules)
        ok = mass > 0
        out[ok] = (self.soft.T @ drifts)[ok] / mass[ok]
        return out


def neuron_features(bundle: ModelBundle, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm neuron feature rows: normalized (gate row || up row).

    Returns (X, degenerate) where degenerate flags zero-weight neurons that
    were assigned a deterministic basis vector instead.
    """
    lw = bundle.weights.layers[layer]
    X = np.concatenate([lw.w_gate, lw.w_up], axis=1).astype(np.float64)
    norms = np.linalg.norm(X, axis=1)
    degenerate = norms == 0.0
    for i in np.flatnonzero(degenerate):
        X[i] = 0.0
        X[i, i % X.shape[1]] = 1.0
        norms[i] = 1.0
    return X / norms[:, None], degenerate


def _cos_to_centroids(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    xn = np.linalg.norm(X, axis=1, keepdims=True)
    cn = np.linalg.norm(C, axis=1, keepdims=True)
    return (X @ C.T) / (xn * cn.T)


def _normalized_mean(rows: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    m = rows.mean(axis=0)
    n = np.linalg.norm(m)
    if n < 1e-12:
        return fallback
    return m / n


def _kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty(K, dtype=np.int64)
    centers[0] = rng.integers(n)
    dist = 1.0 - X @ X[centers[0]]
    for j in range(1, K):
        d2 = np.maximum(dist, 0.0) ** 2
        total = d2.sum()
        if total <= 0.0:
            centers[j] = rng.integers(n)
        else:
            centers[j] = rng.choice(n, p=d2 / total)
        dist = np.minimum(dist, 1.0 - X @ X[centers[j]])
    return X[centers].copy()


def kmeans_cosine(X: np.ndarray, K: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Spherical KMeans: assign to max-cosine centroid, recenter as normalized
    mean, repair empty clusters by stealing the globally worst-fit point.

    Returns (assignment, centroids); deterministic for a fixed seed.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if K > n:
        raise ValueError(f"K={K} exceeds {n} points")
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = substream(seed, 11)
    C = _kmeans_pp_init(X, K, rng)

    assignment = np.full(n, -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITERS):
        cos = _cos_to_centroids(X, C)
        new_assignment = np.argmax(cos, axis=1)

        for k in range(K):
            if not np.any(new_assignment == k):
                own_cos = cos[np.arange(n), new_assignment]
                donor_ok = np.bincount(new_assignment, minlength=K)[new_assignment] > 1
                candidates = np.where(donor_ok, own_cos, np.inf)
                worst = int(np.argmin(candidates))
                new_assignment[worst] = k
                C[k] = X[worst]

        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for k in range(K):
            members = X[assignment == k]
            C[k] = _normalized_mean(members, C[k])
    return assignment, C


def silhouette_cosine(X: np.ndarray, assignment: np.ndarray) -> float:
    """Mean silhouette under cosine distance (1 - cos); singletons score 0."""
    n = X.shape[0]
    labels = np.unique(assignment)
    if labels.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    dist = 1.0 - X @ X.T
    scores = np.zeros(n)
    sizes = {k: int(np.sum(assignment == k)) for k in labels}
    for i in range(n):
        k = assignment[i]
        if sizes[k] == 1:
            continue
        same = assignment == k
        a = dist[i, same].sum() / (sizes[k] - 1)
        b = np.inf
        for other in labels:
            if other == k:
                continue
            b = min(b, dist[i, assignment == other].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def select_k_silhouette(X: np.ndarray, candidates: tuple[int, ...], seed: int) -> int:
    """Best module count by mean cosine silhouette; ties go to the smallest K."""
    n = X.shape[0]
    valid = sorted(k for k in candidates if 2 <= k <= n)
    if not valid:
        raise ValueError(f"no valid module counts among {candidates} for {n} points")
    best_k, best_score = None, -np.inf
    for k in valid:
        assignment, _ = kmeans_cosine(X, k, seed)
        score = silhouette_cosine(X, assignment)
        if score > best_score:
            best_k, best_score = k, score
    return best_k


def drift_split(partition: ModulePartition, X: np.ndarray, drifts: np.ndarray,
                gamma_split: float, min_size: int) -> ModulePartition:
    """Split drift-heterogeneous modules at their median drift.

    A module splits when its drift std strictly exceeds the gamma_split
    quantile of all module drift stds and both halves have >= min_size
    members. Centroids of affected modules are recomputed.
    """
    sigma = partition.drift_std(drifts)
    threshold = quantile(sigma, gamma_split)

    groups: list[np.ndarray] = []
    for k in range(partition.n_modules):
        members = partition.members(k)
        if sigma[k] > threshold:
            med = quantile(drifts[members], 0.5)
            low = members[drifts[members] <= med]
            high = members[drifts[members] > med]
            if low.size >= min_size and high.size >= min_size:
                groups.append(low)
                groups.append(high)
                continue
        groups.append(members)

    assignment = np.empty(partition.n_units, dtype=np.int64)
    centroids = np.empty((len(groups), X.shape[1]))
    for k, members in enumerate(groups):
        assignment[members] = k
        centroids[k] = _normalized_mean(X[members], X[members[0]])
    return ModulePartition(assignment=assignment, centroids=centroids,
                           degenerate=partition.degenerate)


@dataclass
class BcdmLoss:
    total: float
    inner: float
    pair: float
    consis: float
    rep: float
    zero_mass_modules: tuple[int, ...] = ()


def _pair_penalty(X: np.ndarray, assignment: np.ndarray, n_modules: int,
                  gamma_pair: float) -> float:
    h = np.zeros(n_modules)
    for k in range(n_modules):
        members = np.flatnonzero(assignment == k)
        if members.size == 0:
            continue
        sub = X[members]
        cos = sub @ sub.T
        h[k] = float(np.mean(1.0 - cos))
    m = int(np.ceil(gamma_pair * n_modules))
    m = max(1, min(m, n_modules))
    worst = np.sort(h)[-m:]
    return float(worst.mean())


def bcdm_loss(P: np.ndarray, C: np.ndarray, X: np.ndarray, drifts: np.ndarray,
              hyper: BcmHyper) -> BcdmLoss:
    """Evaluate the refinement objective for given memberships and centroids."""
    n, K = P.shape
    z = _cos_to_centroids(X, C)
    inner = float(np.sum(P * (1.0 - z)) / n)

    hard = np.argmax(P, axis=1)
    pair = _pair_penalty(X, hard, K, hyper.gamma_pair)

    mass = P.sum(axis=0)
    zero_mass = tuple(int(k) for k in np.flatnonzero(mass <= 0.0))
    consis = 0.0
    for k in range(K):
        if mass[k] <= 0.0:
            continue
        d_tilde = float(P[:, k] @ drifts) / mass[k]
        consis += float(P[:, k] @ (drifts - d_tilde) ** 2) / mass[k]
    consis /= K

    cn = C / np.linalg.norm(C, axis=1, keepdims=True)
    R = cn @ cn.T
    np.fill_diagonal(R, 0.0)
    rep = float(np.sum(R**2) / (K * (K - 1))) if K > 1 else 0.0

    total = hyper.w_sim * (inner + pair) + hyper.w_consis * consis + hyper.w_rep * rep
    return BcdmLoss(total=total, inner=inner, pair=pair, consis=consis, rep=rep,
                    zero_mass_modules=zero_mass)


def memberships(C: np.ndarray, X: np.ndarray, temperature: float) -> np.ndarray:
    """Soft memberships: row softmax of neuron-centroid cosines."""
    return softmax(_cos_to_centroids(X, C) / temperature, axis=1)


def bcdm_value_and_grad(C: np.ndarray, X: np.ndarray, drifts: np.ndarray,
                        hyper: BcmHyper) -> tuple[BcdmLoss, np.ndarray]:
    """Loss with memberships recomputed from C, and its analytic dC.

    The gradient flows through the memberships (softmax of cosines) and the
    direct cosine terms; the worst-module penalty depends on centroids only
    through the hard argmax and is locally constant.
    """
    n, K = X.shape[0], C.shape[0]
    xn = np.linalg.norm(X, axis=1, keepdims=True)
    xhat = X / xn
    cnorm = np.linalg.norm(C, axis=1)
    chat = C / cnorm[:, None]
    z = xhat @ chat.T
    P = softmax(z / hyper.temperature, axis=1)
    loss = bcdm_loss(P, C, X, drifts, hyper)

    # dL/dP
    A = hyper.w_sim * (1.0 - z) / n
    mass = P.sum(axis=0)
    for k in range(K):
        if mass[k] <= 0.0:
            continue
        d_tilde = float(P[:, k] @ drifts) / mass[k]
        dev2 = (drifts - d_tilde) ** 2
        t_k = float(P[:, k] @ dev2) / mass[k]
        A[:, k] += hyper.w_consis * (dev2 - t_k) / (mass[k] * K)

    # dL/dz: softmax backward per row, plus the direct -P/n term from inner.
    row_dot = np.sum(A * P, axis=1, keepdims=True)
    g_z = P * (A - row_dot) / hyper.temperature
    g_z -= hyper.w_sim * P / n

    # dz/dC
    gc = g_z.T @ xhat                                  # (K, d)
    diag = np.sum(g_z * z, axis=0)                     # (K,)
    dC = (gc - diag[:, None] * chat) / cnorm[:, None]

    # repulsion
    if K > 1:
        R = chat @ chat.T
        np.fill_diagonal(R, 0.0)
        coeff = 4.0 * hyper.w_rep / (K * (K - 1))
        rep_term = R @ chat - np.sum(R**2, axis=1)[:, None] * chat
        dC += coeff * rep_term / cnorm[:, None]
    return loss, dC


class RefinementDivergedError(RuntimeError):
    pass


def refine(partition: ModulePartition, X: np.ndarray, drifts: np.ndarray,
           hyper: BcmHyper) -> tuple[ModulePartition, list[BcdmLoss]]:
    """Adam refinement of centroids; returns the new partition and loss history.

    Centroids are renormalized to unit length after every step. The final
    hard assignment is the soft-membership argmax; empty modules are dropped.
    """
    C = partition.centroids.copy()
    C /= np.linalg.norm(C, axis=1, keepdims=True)
    state = AdamState.for_params([C], lr=hyper.refine_lr)
    history: list[BcdmLoss] = []
    for step in range(hyper.refine_steps):
        loss, dC = bcdm_value_and_grad(C, X, drifts, hyper)
        if not np.isfinite(loss.total):
            raise RefinementDivergedError(f"non-finite refinement loss at step {step}")
        history.append(loss)
        adam_step([C], [dC], state)
        C /= np.linalg.norm(C, axis=1, keepdims=True)

    P = memberships(C, X, hyper.temperature)
    assignment = np.argmax(P, axis=1)
    kept = np.unique(assignment)
    if kept.size < P.shape[1]:
        remap = {old: new for new, old in enumerate(kept)}
        assignment = np.array([remap[a] for a in assignment], dtype=np.int64)
        C = C[kept]
        P = memberships(C, X, hyper.temperature)
    final = ModulePartition(assignment=assignment, centroids=C, soft=P,
                            degenerate=partition.degenerate)
    history.append(bcdm_loss(P, C, X, drifts, hyper))
    return final, history


def modularize_layer(X: np.ndarray, drifts: np.ndarray,
                     hyper: BcmHyper) -> tuple[ModulePartition, dict]:
    """Full per-layer pipeline: K-selection, KMeans, drift split, refinement."""
    k_star = select_k_silhouette(X, hyper.module_counts, hyper.seed)
    assignment, centroids = kmeans_cosine(X, k_star, hyper.seed)
    init = ModulePartition(assignment=assignment, centroids=centroids)
    split = drift_split(init, X, drifts, hyper.gamma_split, hyper.min_split_size)
    final, history = refine(split, X, drifts, hyper)
    info = {
        "k_selected": k_star,
        "k_after_split": split.n_modules,
        "k_final": final.n_modules,
        "loss_initial": history[0].total,
        "loss_final": history[-1].total,
    }
    return final, info
