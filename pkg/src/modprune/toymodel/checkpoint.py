"""Checkpoint container: text header + raw little-endian float64 payload.

Layout::

    toymodel-container v1
    kind = model
    <meta key> = <value>
    tensor = <name> <d0>x<d1> @ <payload offset>
    end-header
    <concatenated row-major float64 tensors>

The same container carries pruned models (ragged per-layer widths in the
config meta) and threshold sets.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .config import ModelBundle, ModelConfig, ModelWeights, LayerWeights

MAGIC = "toymodel-container v1"


class CheckpointError(RuntimeError):
    pass


def write_container(path: str | Path, kind: str, meta: dict[str, str],
                    tensors: list[tuple[str, np.ndarray]]) -> None:
    header = io.StringIO()
    header.write(MAGIC + "\n")
    header.write(f"kind = {kind}\n")
    for key, value in meta.items():
        header.write(f"{key} = {value}\n")
    offset = 0
    payload = io.BytesIO()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        header.write(f"tensor = {name} {shape} @ {offset}\n")
        raw = arr.astype("<f8").tobytes()
        payload.write(raw)
        offset += len(raw)
    header.write("end-header\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        fh.write(payload.getvalue())


def read_container(path: str | Path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    sep = b"end-header\n"
    idx = blob.find(sep)
    if idx < 0:
        raise CheckpointError("missing end-header marker")
    try:
        header = blob[:idx].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError("corrupt header (not UTF-8)") from exc
    payload = blob[idx + len(sep):]

    lines = header.splitlines()
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"bad magic/version line: {lines[0] if lines else '(empty)'}")
    meta: dict[str, str] = {}
    directory: list[tuple[str, tuple[int, ...], int]] = []
    for line in lines[1:]:
        if " = " not in line:
            raise CheckpointError(f"malformed header line: {line!r}")
        key, value = line.split(" = ", 1)
        if key == "tensor":
            try:
                name, shape_s, at, off_s = value.split()
                if at != "@":
                    raise ValueError
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
                directory.append((name, shape, int(off_s)))
            except ValueError as exc:
                raise CheckpointError(f"malformed tensor line: {line!r}") from exc
        else:
            meta[key] = value
    if "kind" not in meta:
        raise CheckpointError("header missing kind")

    tensors: dict[str, np.ndarray] = {}
    for name, shape, off in directory:
        n = int(np.prod(shape)) if shape else 1
        end = off + n * 8
        if end > len(payload):
            raise CheckpointError(f"truncated payload for tensor {name}")
        arr = np.frombuffer(payload[off:end], dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(shape) if shape else arr.reshape(())
    return meta.pop("kind"), meta, tensors


def _config_meta(config: ModelConfig) -> dict[str, str]:
    meta = {
        "config.n_layers": str(config.n_layers),
        "config.d_model": str(config.d_model),
        "config.d_ffn": str(config.d_ffn),
        "config.n_heads": str(config.n_heads),
        "config.vocab_size": str(config.vocab_size),
        "config.max_seq_len": str(config.max_seq_len),
    }
    if config.ffn_widths is not None:
        meta["config.ffn_widths"] = ",".join(str(w) for w in config.ffn_widths)
    if config.head_counts is not None:
        meta["config.head_counts"] = ",".join(str(h) for h in config.head_counts)
    return meta


def _config_from_meta(meta: dict[str, str]) -> ModelConfig:
    def ints(key):
        return tuple(int(x) for x in meta[key].split(","))

    try:
        return ModelConfig(
            n_layers=int(meta["config.n_layers"]),
            d_model=int(meta["config.d_model"]),
            d_ffn=int(meta["config.d_ffn"]),
            n_heads=int(meta["config.n_heads"]),
            vocab_size=int(meta["config.vocab_size"]),
            max_seq_len=int(meta["config.max_seq_len"]),
            ffn_widths=ints("config.ffn_widths") if "config.ffn_widths" in meta else None,
            head_counts=ints("config.head_counts") if "config.head_counts" in meta else None,
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad config in header: {exc}") from exc


def checkpoint_save(path: str | Path, bundle: ModelBundle) -> None:
    meta = _config_meta(bundle.config)
    if any("," in tok for tok in bundle.vocab):
        raise ValueError("vocabulary tokens must not contain commas")
    meta["vocab"] = ",".join(bundle.vocab)
    write_container(path, "model", meta, bundle.weights.named_tensors())


def checkpoint_load(path: str | Path) -> ModelBundle:
    kind, meta, tensors = read_container(path)
    if kind != "model":
        raise CheckpointError(f"expected a model checkpoint, got kind={kind}")
    config = _config_from_meta(meta)
    if "vocab" not in meta:
        raise CheckpointError("header missing vocab")
    vocab = meta["vocab"].split(",")
    if len(vocab) != config.vocab_size:
        raise CheckpointError("vocabulary length does not match config")

    def take(name, shape):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        arr = tensors[name]
        if arr.shape != shape:
            raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        return arr

    d, dh = config.d_model, config.d_head
    weights = ModelWeights(
        embed=take("embed", (config.vocab_size, d)),
        out_head=take("out_head", (config.vocab_size, d)),
        out_gain=take("out_gain", (d,)),
    )
    for l in range(config.n_layers):
        h = config.layer_heads(l)
        f = config.layer_ffn(l)
        weights.layers.append(LayerWeights(
            wq=take(f"layer{l}.wq", (h * dh, d)),
            wk=take(f"layer{l}.wk", (h * dh, d)),
            wv=take(f"layer{l}.wv", (h * dh, d)),
            wo=take(f"layer{l}.wo", (d, h * dh)),
            attn_gain=take(f"layer{l}.attn_gain", (d,)),
            ffn_gain=take(f"layer{l}.ffn_gain", (d,)),
            w_gate=take(f"layer{l}.w_gate", (f, d)),
            w_up=take(f"layer{l}.w_up", (f, d)),
            w_down=take(f"layer{l}.w_down", (d, f)),
        ))
    return ModelBundle(config=config, weights=weights, vocab=vocab)
