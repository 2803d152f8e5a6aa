"""File formats: weight files, token JSONL, plans and reports.

Weight file layout::

    [8 bytes]  manifest length N, unsigned little-endian
    [N bytes]  UTF-8 JSON manifest
    [...]      float32 little-endian tensors, back to back, in manifest order

Manifest: ``{"format": "shortv-weights", "version": 1, "config": {...},
"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}`` with
offsets counted from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError
from .model import LAYER_TENSORS, LayerPlan, LayerWeights, ModelConfig, TextToken, \
    TokenSequence, VisualToken, Weights

FORMAT = "shortv-weights"
VERSION = 1


def save_weights(weights: Weights, path) -> None:
    tensors, offset = [], 0
    for name, arr in weights.named_tensors():
        nbytes = arr.size * 4
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = json.dumps({"format": FORMAT, "version": VERSION,
                           "config": weights.config.to_dict(), "tensors": tensors}).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for _, arr in weights.named_tensors():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> Weights:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise InputError(f"{path}: truncated weight file")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        manifest = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: unreadable manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise InputError(f"{path}: not a {FORMAT} file")
    payload = memoryview(raw)[8 + n:]
    config = ModelConfig.from_dict(manifest["config"])
    arrays = {}
    for t in manifest["tensors"]:
        start, nbytes = int(t["offset"]), int(t["nbytes"])
        if t.get("dtype", "float32") != "float32" or start + nbytes > len(payload):
            raise InputError(f"{path}: bad tensor entry {t['name']!r}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype="<f4")
        arrays[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    try:
        layers = tuple(LayerWeights(**{k: arrays[f"layers.{i}.{k}"] for k in LAYER_TENSORS})
                       for i in range(config.num_layers))
        return Weights(config, arrays["embedding"], layers, arrays["final_norm"], arrays["lm_head"])
    except KeyError as exc:
        raise InputError(f"{path}: missing tensor {exc.args[0]!r}") from None


def seq_to_json(seq: TokenSequence) -> dict:
    return {"positions": [{"text": p.id} if isinstance(p, TextToken)
                          else {"visual": [float(x) for x in p.embedding]}
                          for p in seq.positions]}


def seq_from_json(d: dict) -> TokenSequence:
    try:
        items = d["positions"]
        pos = [TextToken(int(x["text"])) if "text" in x else VisualToken(x["visual"]) for x in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed sequence entry: {exc}") from None
    seq = TokenSequence(pos)
    seq.require_text_last()
    return seq


def write_jsonl(seqs, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in seqs:
            f.write(json.dumps(seq_to_json(s)) + "\n")


def read_jsonl(path) -> list[TokenSequence]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(seq_from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            except InputError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise InputError(f"{path}: no sequences")
    return out


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def load_plan(path) -> LayerPlan:
    return LayerPlan.from_json(read_json(path))
