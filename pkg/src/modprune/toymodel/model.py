"""Forward/backward passes of the maskable toy transformer.

Architecture: pre-norm decoder blocks with rotary attention and a SwiGLU FFN.
The FFN mask multiplies the post-SwiGLU intermediate activation of each neuron
before the down projection; the head mask multiplies each head's context
vector before the output projection. All arithmetic is float64 and every
backward formula here is covered by finite-difference checks in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LayerWeights, MaskSet, ModelBundle, ModelConfig, ModelWeights

RMS_EPS = 1e-6
ROPE_BASE = 10000.0


class StaleTapeError(RuntimeError):
    """Backward called with a tape that does not match the forward inputs."""


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return (x / r) * gain, r


def _rmsnorm_backward(dy: np.ndarray, x: np.ndarray, r: np.ndarray,
                      gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    gy = dy * gain
    dot = np.sum(gy * x, axis=-1, keepdims=True)
    dx = gy / r - x * (dot / (d * r**3))
    dgain = np.sum(dy * (x / r), axis=tuple(range(x.ndim - 1)))
    return dx, dgain


_table_cache: dict = {}


def _rope_tables(seq_len: int, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    key = ("rope", seq_len, d_head)
    if key not in _table_cache:
        half = d_head // 2
        inv_freq = ROPE_BASE ** (-np.arange(half) * 2.0 / d_head)
        angles = np.arange(seq_len)[:, None] * inv_freq[None, :]
        _table_cache[key] = (np.cos(angles), np.sin(angles))
    return _table_cache[key]


def _causal_bias(seq_len: int) -> np.ndarray:
    key = ("causal", seq_len)
    if key not in _table_cache:
        bias = np.zeros((seq_len, seq_len))
        bias[np.triu_indices(seq_len, k=1)] = -np.inf
        _table_cache[key] = bias
    return _table_cache[key]


def _rope_apply(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: (B, H, T, d_head); tables broadcast over (T, d_head/2).
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rope_backward(g: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # Rotation is orthogonal, so the gradient rotates by the opposite angle.
    even, odd = g[..., 0::2], g[..., 1::2]
    out = np.empty_like(g)
    out[..., 0::2] = even * cos + odd * sin
    out[..., 1::2] = -even * sin + odd * cos
    return out


@dataclass
class LayerTape:
    x_attn_in: np.ndarray
    a: np.ndarray
    r_attn: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    ctx: np.ndarray        # pre-mask head outputs (B, T, H, d_head)
    x_ffn_in: np.ndarray
    b: np.ndarray
    r_ffn: np.ndarray
    gate_pre: np.ndarray
    gate_sig: np.ndarray   # sigmoid(gate_pre), reused by backward
    up_pre: np.ndarray
    z: np.ndarray          # pre-mask SwiGLU activations (B, T, d_ffn)


@dataclass
class ForwardTape:
    tokens: np.ndarray
    masks: MaskSet
    layers: list[LayerTape] = field(default_factory=list)
    x_final: np.ndarray | None = None
    r_final: np.ndarray | None = None
    hf: np.ndarray | None = None
    logits: np.ndarray | None = None


@dataclass
class Gradients:
    """Weight-shaped and mask-shaped gradients from one backward pass."""

    weights: ModelWeights | None
    mask_ffn: list[np.ndarray]
    mask_head: list[np.ndarray]


def forward_masked(bundle: ModelBundle, masks: MaskSet,
                   tokens: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Masked forward pass; returns logits (B, T, vocab) and the activation tape."""
    config, weights = bundle.config, bundle.weights
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, seq_len)")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    masks.validate(config)

    B, T = tokens.shape
    dh = config.d_head
    cos, sin = _rope_tables(T, dh)
    tape = ForwardTape(tokens=tokens, masks=masks)

    h = weights.embed[tokens]
    for l in range(config.n_layers):
        lw = weights.layers[l]
        H = config.layer_heads(l)

        x_attn_in = h
        a, r_attn = _rmsnorm(x_attn_in, lw.attn_gain)
        a2 = a.reshape(B * T, -1)
        q = (a2 @ lw.wq.T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a2 @ lw.wk.T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a2 @ lw.wv.T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        q = _rope_apply(q, cos, sin)
        k = _rope_apply(k, cos, sin)

        scores = q @ k.swapaxes(-1, -2)
        scores *= 1.0 / np.sqrt(dh)
        scores += _causal_bias(T)
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores, out=scores)
        probs /= probs.sum(axis=-1, keepdims=True)

        ctx = (probs @ v).transpose(0, 2, 1, 3)     # (B, T, H, dh)
        ctx_masked = ctx * masks.head[l][None, None, :, None]
        attn_out = ctx_masked.reshape(B * T, H * dh) @ lw.wo.T
        h = x_attn_in + attn_out.reshape(B, T, -1)

        x_ffn_in = h
        b, r_ffn = _rmsnorm(x_ffn_in, lw.ffn_gain)
        b2 = b.reshape(B * T, -1)
        gate_pre = b2 @ lw.w_gate.T
        up_pre = b2 @ lw.w_up.T
        gate_sig = 1.0 / (1.0 + np.exp(-gate_pre))
        z = (gate_pre * gate_sig * up_pre).reshape(B, T, -1)
        zm = z * masks.ffn[l][None, None, :]
        ffn_out = zm.reshape(B * T, -1) @ lw.w_down.T
        h = x_ffn_in + ffn_out.reshape(B, T, -1)

        tape.layers.append(LayerTape(
            x_attn_in=x_attn_in, a=a, r_attn=r_attn, q=q, k=k, v=v,
            probs=probs, ctx=ctx, x_ffn_in=x_ffn_in, b=b, r_ffn=r_ffn,
            gate_pre=gate_pre, gate_sig=gate_sig, up_pre=up_pre, z=z))

    hf, r_final = _rmsnorm(h, weights.out_gain)
    logits = (hf.reshape(B * T, -1) @ weights.out_head.T).reshape(B, T, -1)
    tape.x_final, tape.r_final, tape.hf, tape.logits = h, r_final, hf, logits
    return logits, tape


def backward(bundle: ModelBundle, tape: ForwardTape, dlogits: np.ndarray,
             want_weight_grads: bool = True) -> Gradients:
    """Backpropagate ``dlogits`` through the tape.

    Always produces mask gradients; weight gradients are skipped when the
    caller only trains masks/thresholds (weights frozen).
    """
    config, weights = bundle.config, bundle.weights
    if tape.logits is None or dlogits.shape != tape.logits.shape:
        raise StaleTapeError("tape does not match the supplied upstream gradient")
    B, T = tape.tokens.shape
    dh = config.d_head
    cos, sin = _rope_tables(T, dh)
    masks = tape.masks

    gw: ModelWeights | None = None
    if want_weight_grads:
        gw = ModelWeights(
            embed=np.zeros_like(weights.embed),
            out_head=np.zeros_like(weights.out_head),
            out_gain=np.zeros_like(weights.out_gain),
            layers=[LayerWeights(**{a: np.zeros_like(getattr(lw, a)) for a in (
                "wq", "wk", "wv", "wo", "attn_gain", "ffn_gain",
                "w_gate", "w_up", "w_down")}) for lw in weights.layers])
    g_mask_ffn = [np.zeros_like(m) for m in masks.ffn]
    g_mask_head = [np.zeros_like(m) for m in masks.head]

    dl2 = dlogits.reshape(B * T, -1)
    dhf = (dl2 @ weights.out_head).reshape(B, T, -1)
    if gw is not None:
        gw.out_head += dl2.T @ tape.hf.reshape(B * T, -1)
    dx, dgain = _rmsnorm_backward(dhf, tape.x_final, tape.r_final, weights.out_gain)
    if gw is not None:
        gw.out_gain += dgain
    dh_acc = dx

    for l in reversed(range(config.n_layers)):
        lw = weights.layers[l]
        lt = tape.layers[l]
        H = config.layer_heads(l)

        # FFN block
        dffn_out = dh_acc.reshape(B * T, -1)
        zm = (lt.z * masks.ffn[l][None, None, :]).reshape(B * T, -1)
        dzm = (dffn_out @ lw.w_down).reshape(B, T, -1)
        if gw is not None:
            gw.layers[l].w_down += dffn_out.T @ zm
        g_mask_ffn[l] += np.sum(dzm * lt.z, axis=(0, 1))
        dz = (dzm * masks.ffn[l][None, None, :]).reshape(B * T, -1)
        sig = lt.gate_sig
        dgate_pre = dz * lt.up_pre * (sig * (1.0 + lt.gate_pre * (1.0 - sig)))
        dup_pre = dz * (lt.gate_pre * sig)
        db = dgate_pre @ lw.w_gate + dup_pre @ lw.w_up
        if gw is not None:
            b2 = lt.b.reshape(B * T, -1)
            gw.layers[l].w_gate += dgate_pre.T @ b2
            gw.layers[l].w_up += dup_pre.T @ b2
        dx, dgain = _rmsnorm_backward(db.reshape(B, T, -1), lt.x_ffn_in,
                                      lt.r_ffn, lw.ffn_gain)
        if gw is not None:
            gw.layers[l].ffn_gain += dgain
        dh_acc = dh_acc + dx

        # Attention block
        dattn_out = dh_acc.reshape(B * T, -1)
        ctx_masked = (lt.ctx * masks.head[l][None, None, :, None]).reshape(B * T, H * dh)
        dcm = (dattn_out @ lw.wo).reshape(B, T, H, dh)
        if gw is not None:
            gw.layers[l].wo += dattn_out.T @ ctx_masked
        g_mask_head[l] += np.sum(dcm * lt.ctx, axis=(0, 1, 3))
        dctx = (dcm * masks.head[l][None, None, :, None]).transpose(0, 2, 1, 3)

        dprobs = dctx @ lt.v.swapaxes(-1, -2)
        dv = lt.probs.swapaxes(-1, -2) @ dctx
        dot = np.sum(dprobs * lt.probs, axis=-1, keepdims=True)
        dscores = lt.probs * (dprobs - dot) / np.sqrt(dh)
        dq = dscores @ lt.k
        dk = dscores.swapaxes(-1, -2) @ lt.q
        dq = _rope_backward(dq, cos, sin)
        dk = _rope_backward(dk, cos, sin)

        dq2 = dq.transpose(0, 2, 1, 3).reshape(B * T, H * dh)
        dk2 = dk.transpose(0, 2, 1, 3).reshape(B * T, H * dh)
        dv2 = dv.transpose(0, 2, 1, 3).reshape(B * T, H * dh)
        da = dq2 @ lw.wq + dk2 @ lw.wk + dv2 @ lw.wv
        if gw is not None:
            a2 = lt.a.reshape(B * T, -1)
            gw.layers[l].wq += dq2.T @ a2
            gw.layers[l].wk += dk2.T @ a2
            gw.layers[l].wv += dv2.T @ a2
        dx, dgain = _rmsnorm_backward(da.reshape(B, T, -1), lt.x_attn_in,
                                      lt.r_attn, lw.attn_gain)
        if gw is not None:
            gw.layers[l].attn_gain += dgain
        dh_acc = dh_acc + dx

    if gw is not None:
        np.add.at(gw.embed, tape.tokens, dh_acc)
    return Gradients(weights=gw, mask_ffn=g_mask_ffn, mask_head=g_mask_head)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, tokens: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token cross-entropy in nats and its gradient w.r.t. logits."""
    B, T, V = logits.shape
    logp = log_softmax(logits[:, :-1, :])
    targets = tokens[:, 1:]
    count = B * (T - 1)
    rows = np.arange(B)[:, None]
    cols = np.arange(T - 1)[None, :]
    loss = -float(np.sum(logp[rows, cols, targets])) / count

    dlogits = np.zeros_like(logits)
    probs = np.exp(logp)
    probs[rows, cols, targets] -= 1.0
    dlogits[:, :-1, :] = probs / count
    return loss, dlogits


def perplexity(bundle: ModelBundle, masks: MaskSet, corpus: np.ndarray,
               batch_size: int = 16) -> float:
    """exp(mean next-token cross-entropy) over every position in ``corpus``."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("perplexity of empty corpus")
    total_nll = 0.0
    total_count = 0
    for start in range(0, corpus.shape[0], batch_size):
        batch = corpus[start:start + batch_size]
        logits, _ = forward_masked(bundle, masks, batch)
        logp = log_softmax(logits[:, :-1, :])
        targets = batch[:, 1:]
        rows = np.arange(batch.shape[0])[:, None]
        cols = np.arange(batch.shape[1] - 1)[None, :]
        total_nll += -float(np.sum(logp[rows, cols, targets]))
        total_count += batch.shape[0] * (batch.shape[1] - 1)
    return float(np.exp(total_nll / total_count))
