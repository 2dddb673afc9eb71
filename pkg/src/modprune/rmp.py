"""Reliability-aware modular pruning.

Per module, the activation-based metric is kept unless the module is both
distribution-sensitive (mean rank drift above a quantile threshold) and weakly
activated (mean activation score below a quantile threshold), in which case an
activation-independent metric takes over. Scores are then z-normalized per
module so one learnable threshold scale is meaningful everywhere, and the
thresholds are trained with hard step masks in the forward pass, a sigmoid
straight-through surrogate in the backward pass, and an augmented-Lagrangian
retention constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import AdamState, adam_step, quantile, substream
from .toymodel import MaskSet, ModelBundle, backward, forward_masked, log_softmax

ACTIVATION_TAG = "activation"
INDEPENDENT_TAG = "independent"


@dataclass
class RmpHyper:
    gamma_drift: float = 0.90
    gamma_score: float = 0.90
    t_ste: float = 0.2
    kd_alpha: float = 0.5
    kd_temperature: float = 2.0
    rho_pen: float = 0.05
    rho_lam: float = 0.02
    epochs: int = 3
    lr: float = 0.01
    batch_size: int = 8
    early_stop_g: float = 0.005
    quantile_scope: str = "layer"       # "layer" per Algorithm order; "global" pools layers
    retention_mode: str = "parameters"  # or "structures"


@dataclass
class MetricAssignment:
    """Per-module metric choice for one layer, with the statistics behind it."""

    tags: list[str]
    mean_drift: np.ndarray
    mean_act_score: np.ndarray
    delta_drift: float
    delta_score: float


@dataclass
class ScoreSet:
    """Adapted, per-module z-normalized scores for the whole model."""

    ffn: list[np.ndarray]            # per layer (N_l,)
    head: list[np.ndarray]           # per layer (H_l,)
    assignment: list[np.ndarray]     # per layer neuron -> module id
    n_modules: list[int]
    metric_assignments: list[MetricAssignment]


@dataclass
class ThresholdSet:
    """Learnable per-module FFN thresholds and per-layer head thresholds,
    plus the frozen score-normalization parameters."""

    tau_ffn: list[np.ndarray]        # per layer (K_l,)
    tau_attn: np.ndarray             # (n_layers,)
    ffn_norm_mean: list[np.ndarray]
    ffn_norm_std: list[np.ndarray]
    head_norm_mean: np.ndarray
    head_norm_std: np.ndarray

    def copy(self) -> "ThresholdSet":
        return ThresholdSet(
            tau_ffn=[t.copy() for t in self.tau_ffn],
            tau_attn=self.tau_attn.copy(),
            ffn_norm_mean=[m.copy() for m in self.ffn_norm_mean],
            ffn_norm_std=[s.copy() for s in self.ffn_norm_std],
            head_norm_mean=self.head_norm_mean.copy(),
            head_norm_std=self.head_norm_std.copy(),
        )


@dataclass
class DualState:
    r_target: float
    rho_pen: float = 0.05
    rho_lam: float = 0.02
    lam: float = 0.0
    g_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.r_target <= 1.0:
            raise ValueError("target retention must lie in (0, 1]")
        if self.rho_pen <= 0.0 or self.rho_lam <= 0.0:
            raise ValueError("penalty coefficients must be positive")


def module_stats(assignment: np.ndarray, n_modules: int, drifts: np.ndarray,
                 act_scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean drift and mean activation score over each module."""
    mean_drift = np.empty(n_modules)
    mean_act = np.empty(n_modules)
    for k in range(n_modules):
        members = np.flatnonzero(assignment == k)
        if members.size == 0:
            raise ValueError(f"module {k} is empty")
        mean_drift[k] = drifts[members].mean()
        mean_act[k] = act_scores[members].mean()
    return mean_drift, mean_act


def znormalize(scores: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Z-normalize; degenerate (constant) score vectors map to zeros, std 1."""
    mean = float(scores.mean())
    std = float(scores.std())
    if std < 1e-300:
        return np.zeros_like(scores), mean, 1.0
    return (scores - mean) / std, mean, std


def adapt_metrics(assignment: np.ndarray, n_modules: int, drifts: np.ndarray,
                  act_scores: np.ndarray, ind_scores: np.ndarray,
                  gamma_drift: float, gamma_score: float,
                  delta_drift: float | None = None,
                  delta_score: float | None = None,
                  ) -> tuple[np.ndarray, MetricAssignment, np.ndarray, np.ndarray]:
    """Per-module metric selection and per-module z-normalization.

    A module switches to the activation-independent metric exactly when its
    mean drift strictly exceeds the drift threshold AND its mean activation
    score is strictly below the score threshold. Thresholds default to the
    per-layer quantiles of the module means; callers may pass pooled ones.

    Returns (normalized final scores, assignment record, norm means, norm stds).
    """
    mean_drift, mean_act = module_stats(assignment, n_modules, drifts, act_scores)
    if delta_drift is None:
        delta_drift = quantile(mean_drift, gamma_drift)
    if delta_score is None:
        delta_score = quantile(mean_act, gamma_score)

    tags = []
    final = np.empty_like(act_scores)
    norm_mean = np.empty(n_modules)
    norm_std = np.empty(n_modules)
    for k in range(n_modules):
        switch = mean_drift[k] > delta_drift and mean_act[k] < delta_score
        tags.append(INDEPENDENT_TAG if switch else ACTIVATION_TAG)
        members = np.flatnonzero(assignment == k)
        chosen = ind_scores[members] if switch else act_scores[members]
        final[members], norm_mean[k], norm_std[k] = znormalize(chosen)

    record = MetricAssignment(tags=tags, mean_drift=mean_drift, mean_act_score=mean_act,
                              delta_drift=float(delta_drift), delta_score=float(delta_score))
    return final, record, norm_mean, norm_std


def init_thresholds(score_set: ScoreSet, r_target: float,
                    norm_params: dict | None = None) -> ThresholdSet:
    """Each threshold starts at the (1 - r*)-quantile of its module's scores,
    so the initial hard retention is already close to the target."""
    n_layers = len(score_set.ffn)
    tau_ffn = []
    for l in range(n_layers):
        taus = np.empty(score_set.n_modules[l])
        for k in range(score_set.n_modules[l]):
            members = np.flatnonzero(score_set.assignment[l] == k)
            taus[k] = quantile(score_set.ffn[l][members], 1.0 - r_target)
        tau_ffn.append(taus)
    tau_attn = np.array([quantile(score_set.head[l], 1.0 - r_target)
                         for l in range(n_layers)])
    norm_params = norm_params or {}
    return ThresholdSet(
        tau_ffn=tau_ffn,
        tau_attn=tau_attn,
        ffn_norm_mean=norm_params.get("ffn_mean", [np.zeros_like(t) for t in tau_ffn]),
        ffn_norm_std=norm_params.get("ffn_std", [np.ones_like(t) for t in tau_ffn]),
        head_norm_mean=norm_params.get("head_mean", np.zeros(n_layers)),
        head_norm_std=norm_params.get("head_std", np.ones(n_layers)),
    )


@dataclass
class SteTape:
    """Score-minus-threshold margins kept for the surrogate backward rule."""

    ffn_margin: list[np.ndarray]
    head_margin: list[np.ndarray]
    t_ste: float


def ste_masks(score_set: ScoreSet, thresholds: ThresholdSet,
              t_ste: float) -> tuple[MaskSet, SteTape]:
    """Hard step masks (kept iff margin >= 0) plus the margins for backward.

    Backward treats each mask as sigmoid(margin / t_ste), so
    d mask / d tau = -sigmoid'(margin / t_ste) / t_ste.
    """
    if t_ste <= 0.0:
        raise ValueError("t_ste must be positive")
    ffn_masks, head_masks = [], []
    ffn_margin, head_margin = [], []
    for l in range(len(score_set.ffn)):
        margins = score_set.ffn[l] - thresholds.tau_ffn[l][score_set.assignment[l]]
        ffn_margin.append(margins)
        ffn_masks.append((margins >= 0.0).astype(np.float64))
        hm = score_set.head[l] - thresholds.tau_attn[l]
        head_margin.append(hm)
        head_masks.append((hm >= 0.0).astype(np.float64))
    return (MaskSet(ffn=ffn_masks, head=head_masks),
            SteTape(ffn_margin=ffn_margin, head_margin=head_margin, t_ste=t_ste))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _unit_weights(config, mode: str) -> tuple[float, float]:
    """Parameter weight of one FFN neuron and one attention head."""
    if mode == "parameters":
        return 3.0 * config.d_model, 4.0 * config.d_model * config.d_head
    if mode == "structures":
        return 1.0, 1.0
    raise ValueError(f"unknown retention mode {mode!r}")


def retention_estimate(masks: MaskSet, config, mode: str = "parameters") -> float:
    """Weighted retained fraction over all prunable structures (hard masks)."""
    w_ffn, w_head = _unit_weights(config, mode)
    kept = total = 0.0
    for l in range(config.n_layers):
        kept += w_ffn * masks.ffn[l].sum() + w_head * masks.head[l].sum()
        total += w_ffn * masks.ffn[l].size + w_head * masks.head[l].size
    return float(kept / total)


def retention_soft(tape: SteTape, config, mode: str = "parameters") -> float:
    """Differentiable retention surrogate using sigmoid masks."""
    w_ffn, w_head = _unit_weights(config, mode)
    kept = total = 0.0
    for l in range(config.n_layers):
        kept += w_ffn * _sigmoid(tape.ffn_margin[l] / tape.t_ste).sum()
        kept += w_head * _sigmoid(tape.head_margin[l] / tape.t_ste).sum()
        total += w_ffn * tape.ffn_margin[l].size + w_head * tape.head_margin[l].size
    return float(kept / total)


def constraint_loss(r_hat: float, dual: DualState) -> float:
    """Augmented Lagrangian term: lam * g + (rho/2) * g^2 with g = r_hat - r*."""
    g = r_hat - dual.r_target
    return dual.lam * g + 0.5 * dual.rho_pen * g * g


def dual_update(dual: DualState, g: float) -> DualState:
    """In-place dual ascent: lam <- lam + rho_lam * g (g may be negative)."""
    dual.lam += dual.rho_lam * g
    dual.g_history.append(float(g))
    return dual


def perf_loss(student_logits: np.ndarray, teacher_logits: np.ndarray,
              tokens: np.ndarray, alpha: float, t_kd: float,
              ) -> tuple[float, np.ndarray]:
    """(1-alpha) * CE + alpha * T^2 * KL(teacher || student), both over
    next-token positions; returns the loss and its student-logit gradient."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student/teacher logit shape mismatch")
    B, T, V = student_logits.shape
    count = B * (T - 1)
    rows = np.arange(B)[:, None]
    cols = np.arange(T - 1)[None, :]
    targets = tokens[:, 1:]

    logp_s = log_softmax(student_logits[:, :-1, :])
    ce = -float(np.sum(logp_s[rows, cols, targets])) / count

    logq_s = log_softmax(student_logits[:, :-1, :] / t_kd)
    logq_t = log_softmax(teacher_logits[:, :-1, :] / t_kd)
    q_t = np.exp(logq_t)
    kl = float(np.sum(q_t * (logq_t - logq_s))) / count
    loss = (1.0 - alpha) * ce + alpha * t_kd * t_kd * kl

    dlogits = np.zeros_like(student_logits)
    p_s = np.exp(logp_s)
    p_s[rows, cols, targets] -= 1.0
    dlogits[:, :-1, :] = (1.0 - alpha) * p_s / count
    dlogits[:, :-1, :] += alpha * t_kd * (np.exp(logq_s) - q_t) / count
    return loss, dlogits


class ThresholdTrainingError(RuntimeError):
    pass


@dataclass
class ThresholdLogRow:
    step: int
    l_perf: float
    l_constr: float
    r_soft: float
    r_hard: float
    lam: float
    g: float


def _flatten_tau(thresholds: ThresholdSet) -> list[np.ndarray]:
    return list(thresholds.tau_ffn) + [thresholds.tau_attn]


def train_thresholds(bundle: ModelBundle, score_set: ScoreSet, dual: DualState,
                     hyper: RmpHyper, corpus: np.ndarray, r_target: float | None = None,
                     thresholds: ThresholdSet | None = None,
                     ) -> tuple[ThresholdSet, list[ThresholdLogRow]]:
    """Adam on the thresholds only (weights frozen), teacher = all-ones masks.

    Per step: hard-mask forward, distillation+CE performance loss, constraint
    on the soft retention surrogate, STE chain rule from mask gradients to
    thresholds, then one dual ascent step on the hard retention gap. Stops
    early once |g| stays below ``early_stop_g`` for a whole epoch.
    """
    config = bundle.config
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("threshold training needs a nonempty corpus")
    if r_target is not None and r_target != dual.r_target:
        raise ValueError("r_target disagrees with dual state")

    if thresholds is None:
        thresholds = init_thresholds(score_set, dual.r_target)
    else:
        thresholds = thresholds.copy()
    tau_params = _flatten_tau(thresholds)
    state = AdamState.for_params(tau_params, lr=hyper.lr)
    n_layers = config.n_layers

    batches = [corpus[i:i + hyper.batch_size]
               for i in range(0, corpus.shape[0], hyper.batch_size)]
    teacher_cache: list[np.ndarray | None] = [None] * len(batches)
    ones = MaskSet.ones(config)
    w_ffn, w_head = _unit_weights(config, hyper.retention_mode)
    total_weight = sum(w_ffn * config.layer_ffn(l) + w_head * config.layer_heads(l)
                       for l in range(n_layers))

    log: list[ThresholdLogRow] = []
    step = 0
    for epoch in range(hyper.epochs):
        epoch_converged = True
        for bi, batch in enumerate(batches):
            masks, tape = ste_masks(score_set, thresholds, hyper.t_ste)
            if teacher_cache[bi] is None:
                teacher_logits, _ = forward_masked(bundle, ones, batch)
                teacher_cache[bi] = teacher_logits
            student_logits, fwd_tape = forward_masked(bundle, masks, batch)
            l_perf, dlogits = perf_loss(student_logits, teacher_cache[bi], batch,
                                        hyper.kd_alpha, hyper.kd_temperature)
            r_soft = retention_soft(tape, config, hyper.retention_mode)
            l_constr = constraint_loss(r_soft, dual)
            if not np.isfinite(l_perf + l_constr):
                raise ThresholdTrainingError(
                    f"non-finite loss (lam={dual.lam:.4g}, "
                    f"g={r_soft - dual.r_target:.4g}, epoch={epoch})")

            grads = backward(bundle, fwd_tape, dlogits, want_weight_grads=False)
            g_soft = r_soft - dual.r_target
            constr_coeff = dual.lam + dual.rho_pen * g_soft

            tau_grads = []
            for l in range(n_layers):
                sig = _sigmoid(tape.ffn_margin[l] / hyper.t_ste)
                dmask_dtau = -(sig * (1.0 - sig)) / hyper.t_ste
                per_unit = (grads.mask_ffn[l]
                            + constr_coeff * w_ffn / total_weight) * dmask_dtau
                tau_grads.append(np.bincount(score_set.assignment[l], weights=per_unit,
                                             minlength=score_set.n_modules[l]))
            attn_grad = np.empty(n_layers)
            for l in range(n_layers):
                sig = _sigmoid(tape.head_margin[l] / hyper.t_ste)
                dmask_dtau = -(sig * (1.0 - sig)) / hyper.t_ste
                attn_grad[l] = np.sum((grads.mask_head[l]
                                       + constr_coeff * w_head / total_weight) * dmask_dtau)
            tau_grads.append(attn_grad)
            adam_step(tau_params, tau_grads, state)

            hard_masks, _ = ste_masks(score_set, thresholds, hyper.t_ste)
            r_hard = retention_estimate(hard_masks, config, hyper.retention_mode)
            g_hard = r_hard - dual.r_target
            dual_update(dual, g_hard)
            if abs(g_hard) >= hyper.early_stop_g:
                epoch_converged = False
            log.append(ThresholdLogRow(step=step, l_perf=l_perf, l_constr=l_constr,
                                       r_soft=r_soft, r_hard=r_hard,
                                       lam=dual.lam, g=g_hard))
            step += 1
        if epoch_converged:
            break
    return thresholds, log
