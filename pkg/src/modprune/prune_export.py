"""Turn learned thresholds into hard masks and physically pruned models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rmp import ScoreSet, ThresholdSet, ste_masks
from .toymodel import (LayerWeights, MaskSet, ModelBundle, ModelConfig,
                       ModelWeights)


@dataclass
class PrunePlan:
    """Retained indices per layer and exact parameter accounting."""

    kept_ffn: list[np.ndarray]
    kept_head: list[np.ndarray]
    prunable_kept: int
    prunable_total: int
    model_params_before: int
    model_params_after: int
    guard_flags: list[str] = field(default_factory=list)

    def old_to_new_ffn(self, layer: int) -> dict[int, int]:
        return {int(old): new for new, old in enumerate(self.kept_ffn[layer])}

    def old_to_new_head(self, layer: int) -> dict[int, int]:
        return {int(old): new for new, old in enumerate(self.kept_head[layer])}


def harden(score_set: ScoreSet, thresholds: ThresholdSet) -> tuple[MaskSet, list[str]]:
    """Final hard masks from the trained thresholds.

    Guard: a layer that would lose every FFN neuron (or every head) keeps its
    single top-scoring unit instead; each firing is flagged for the report.
    """
    masks, _ = ste_masks(score_set, thresholds, t_ste=1.0)
    flags: list[str] = []
    for l in range(len(masks.ffn)):
        if masks.ffn[l].sum() == 0:
            best = int(np.argmax(score_set.ffn[l]))
            masks.ffn[l][best] = 1.0
            flags.append(f"layer {l}: zero FFN retention, kept top neuron {best}")
        if masks.head[l].sum() == 0:
            best = int(np.argmax(score_set.head[l]))
            masks.head[l][best] = 1.0
            flags.append(f"layer {l}: zero head retention, kept top head {best}")
    return masks, flags


def count_parameters(bundle: ModelBundle) -> int:
    return sum(arr.size for _, arr in bundle.weights.named_tensors())


def _prunable_counts(config: ModelConfig, ffn_kept: list[int],
                     head_kept: list[int]) -> tuple[int, int]:
    d, dh = config.d_model, config.d_head
    kept = total = 0
    for l in range(config.n_layers):
        kept += 3 * d * ffn_kept[l] + 4 * d * dh * head_kept[l]
        total += 3 * d * config.layer_ffn(l) + 4 * d * dh * config.layer_heads(l)
    return kept, total


def apply_prune(bundle: ModelBundle, masks: MaskSet) -> tuple[ModelBundle, PrunePlan]:
    """Remove masked-off neuron/head slices; per-layer widths may go ragged."""
    config = bundle.config
    masks.validate(config)
    if not masks.is_hard():
        raise ValueError("apply_prune requires hard {0,1} masks")

    kept_ffn = [np.flatnonzero(masks.ffn[l] == 1.0) for l in range(config.n_layers)]
    kept_head = [np.flatnonzero(masks.head[l] == 1.0) for l in range(config.n_layers)]
    for l in range(config.n_layers):
        if kept_ffn[l].size == 0 or kept_head[l].size == 0:
            raise ValueError(f"layer {l} would retain zero units; harden() guards this")

    dh = config.d_head
    new_layers = []
    for l, lw in enumerate(bundle.weights.layers):
        ffn_idx = kept_ffn[l]
        head_rows = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in kept_head[l]])
        new_layers.append(LayerWeights(
            wq=lw.wq[head_rows].copy(),
            wk=lw.wk[head_rows].copy(),
            wv=lw.wv[head_rows].copy(),
            wo=lw.wo[:, head_rows].copy(),
            attn_gain=lw.attn_gain.copy(),
            ffn_gain=lw.ffn_gain.copy(),
            w_gate=lw.w_gate[ffn_idx].copy(),
            w_up=lw.w_up[ffn_idx].copy(),
            w_down=lw.w_down[:, ffn_idx].copy(),
        ))

    ffn_widths = tuple(idx.size for idx in kept_ffn)
    head_counts = tuple(idx.size for idx in kept_head)
    uniform = (all(w == config.layer_ffn(l) for l, w in enumerate(ffn_widths))
               and all(h == config.layer_heads(l) for l, h in enumerate(head_counts)))
    new_config = ModelConfig(
        n_layers=config.n_layers,
        d_model=config.d_model,
        d_ffn=config.d_ffn,
        n_heads=config.n_heads,
        vocab_size=config.vocab_size,
        max_seq_len=config.max_seq_len,
        ffn_widths=config.ffn_widths if uniform else ffn_widths,
        head_counts=config.head_counts if uniform else head_counts,
    )
    pruned = ModelBundle(
        config=new_config,
        weights=ModelWeights(embed=bundle.weights.embed.copy(),
                             out_head=bundle.weights.out_head.copy(),
                             out_gain=bundle.weights.out_gain.copy(),
                             layers=new_layers),
        vocab=list(bundle.vocab),
    )
    kept, total = _prunable_counts(config, [i.size for i in kept_ffn],
                                   [i.size for i in kept_head])
    plan = PrunePlan(
        kept_ffn=kept_ffn,
        kept_head=kept_head,
        prunable_kept=kept,
        prunable_total=total,
        model_params_before=count_parameters(bundle),
        model_params_after=count_parameters(pruned),
    )
    return pruned, plan


def retention_actual(plan: PrunePlan) -> float:
    """Exact parameter-count retention over prunable parameters."""
    return float(plan.prunable_kept) / float(plan.prunable_total)
