"""GOPT-style transformer regressor: aspect tokens + projected GOP features -> encoder -> affine heads."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .dataset import GOP_DIM, MAX_LEN, Batch


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 24
    n_blocks: int = 3
    n_heads: int = 1
    ff_dim: int = 96
    max_len: int = MAX_LEN
    input_dim: int = GOP_DIM
    n_utt_aspects: int = 5
    n_word_aspects: int = 3

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ModelError(f"{name} must be positive, got {v}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def attach(self, tape: Tape) -> Dict[str, Tensor]:
        return {k: tape.leaf(v, k) for k, v in self.tensors.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    d, ff = config.d_model, config.ff_dim
    shapes = {
        "in_proj.weight": (config.input_dim, d),
        "in_proj.bias": (d,),
        "pos_embed": (config.max_len, d),
        "aspect_embed": (config.n_utt_aspects, d),
    }
    for i in range(config.n_blocks):
        p = f"blocks.{i}."
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.{name}.weight"] = (d, d)
            shapes[p + f"attn.{name}.bias"] = (d,)
        shapes[p + "ln1.gamma"] = (d,)
        shapes[p + "ln1.beta"] = (d,)
        shapes[p + "ff.w1"] = (d, ff)
        shapes[p + "ff.b1"] = (ff,)
        shapes[p + "ff.w2"] = (ff, d)
        shapes[p + "ff.b2"] = (d,)
        shapes[p + "ln2.gamma"] = (d,)
        shapes[p + "ln2.beta"] = (d,)
    # one affine map per head; heads of a granularity are stacked
    shapes["head.utt.weight"] = (config.n_utt_aspects, d)
    shapes["head.utt.bias"] = (config.n_utt_aspects,)
    shapes["head.word.weight"] = (d, config.n_word_aspects)
    shapes["head.word.bias"] = (config.n_word_aspects,)
    shapes["head.phone.weight"] = (d, 1)
    shapes["head.phone.bias"] = (1,)
    return shapes


def init_params(config: ModelConfig, seed) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, layer-norm gains 1, embeddings ~ N(0, 0.02)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    d = config.d_model
    out = {}
    for name, shape in param_shapes(config).items():
        if name in ("pos_embed", "aspect_embed"):
            out[name] = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".gamma"):
            out[name] = np.ones(shape)
        elif name.endswith((".bias", ".beta", ".b1", ".b2")):
            out[name] = np.zeros(shape)
        else:
            fan_in = d if name == "head.utt.weight" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, out)


@dataclass
class ForwardOutput:
    h_utt: Tensor      # (B, 5, d)
    h_phone: Tensor    # (B, L, d)
    utt_pred: Tensor   # (B, 5)
    word_pred: Tensor  # (B, L, 3)
    phone_pred: Tensor  # (B, L)


def _attention(x: Tensor, p: Dict[str, Tensor], prefix: str, key_mask: np.ndarray, n_heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads

    def proj(name):
        return ad.linear(x, p[f"{prefix}{name}.weight"], p[f"{prefix}{name}.bias"])

    q, k, v = proj("q"), proj("k"), proj("v")
    if n_heads > 1:
        q, k, v = (ad.transpose(ad.reshape(z, (b, t, n_heads, dh)), (0, 2, 1, 3)) for z in (q, k, v))
        mask = key_mask[:, None, None, :]
    else:
        mask = key_mask[:, None, :]
    scores = ad.scale(q @ ad.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)), 1.0 / math.sqrt(dh))
    ctx = ad.softmax(scores, mask) @ v
    if n_heads > 1:
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return ad.linear(ctx, p[f"{prefix}o.weight"], p[f"{prefix}o.bias"])


def forward(params: ModelParams, batch: Batch, tensors: Optional[Dict[str, Tensor]] = None) -> ForwardOutput:
    """Run the encoder and all regression heads.

    ``tensors`` overrides the parameter arrays, e.g. with leaves of a tape.
    """
    cfg = params.config
    p = tensors if tensors is not None else params.constants()
    b, length, feat = batch.features.shape
    if length != cfg.max_len or feat != cfg.input_dim:
        raise ModelError(f"batch features {batch.features.shape} do not match max_len={cfg.max_len}, "
                         f"input_dim={cfg.input_dim}")
    na = cfg.n_utt_aspects
    # Positions past the last real phone of every row are never attended to
    # or read, so the encoder runs on the trimmed prefix only.
    used = np.nonzero(batch.mask.any(axis=0))[0]
    n = int(used[-1]) + 1 if used.size else 1
    x = ad.linear(batch.features[:, :n], p["in_proj.weight"], p["in_proj.bias"]) + p["pos_embed"][:n]
    aspects = ad.broadcast_to(p["aspect_embed"], (b, na, cfg.d_model))
    h = ad.concat([aspects, x], axis=1)
    key_mask = np.concatenate([np.ones((b, na), dtype=bool), batch.mask[:, :n]], axis=1)

    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        h = ad.layer_norm(h + _attention(h, p, pre + "attn.", key_mask, cfg.n_heads),
                          p[pre + "ln1.gamma"], p[pre + "ln1.beta"])
        f = ad.linear(ad.gelu(ad.linear(h, p[pre + "ff.w1"], p[pre + "ff.b1"])), p[pre + "ff.w2"], p[pre + "ff.b2"])
        h = ad.layer_norm(h + f, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])

    h_utt = h[:, :na]
    h_phone = h[:, na:]
    if n < length:
        h_phone = ad.concat([h_phone, np.zeros((b, length - n, cfg.d_model))], axis=1)
    utt_pred = ad.sum(h_utt * p["head.utt.weight"], axis=-1) + p["head.utt.bias"]
    word_pred = ad.linear(h_phone, p["head.word.weight"], p["head.word.bias"])
    phone_pred = ad.reshape(ad.linear(h_phone, p["head.phone.weight"], p["head.phone.bias"]), (b, length))
    return ForwardOutput(h_utt, h_phone, utt_pred, word_pred, phone_pred)


class PhoneEmbedding(NamedTuple):
    utt_id: str
    position: int
    phoneme_id: int
    phone_score: float
    embedding: np.ndarray


def extract_phone_embeddings(params: ModelParams, batch: Batch) -> List[PhoneEmbedding]:
    """Pre-head phone representations for every real (unmasked) phone token."""
    h = forward(params, batch).h_phone.value
    rows, cols = np.nonzero(batch.mask)
    return [PhoneEmbedding(batch.utt_ids[r] if batch.utt_ids else str(r), int(c),
                           int(batch.phoneme_ids[r, c]), float(batch.phone_targets[r, c]), h[r, c].copy())
            for r, c in zip(rows, cols)]


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"PCOCKPT1\n"


def save_checkpoint(params: ModelParams, path, extra: Optional[dict] = None):
    """Binary checkpoint: magic line, JSON manifest line, then little-endian float64 payloads."""
    entries, offset = [], 0
    for name, arr in params.tensors.items():
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    manifest = {"config": asdict(params.config), "tensors": entries}
    if extra:
        manifest["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for arr in params.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ModelError(f"{path}: not a checkpoint file")
    nl = raw.index(b"\n", len(_MAGIC))
    manifest = json.loads(raw[len(_MAGIC):nl].decode("utf-8"))
    payload = memoryview(raw)[nl + 1:]
    config = ModelConfig(**manifest["config"])
    expected = param_shapes(config)
    tensors = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        if expected.get(e["name"]) != shape:
            raise ModelError(f"{path}: tensor {e['name']} has shape {shape}, config expects "
                             f"{expected.get(e['name'])}")
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    if set(tensors) != set(expected):
        raise ModelError(f"{path}: tensor set does not match config")
    return ModelParams(config, {k: tensors[k] for k in expected})
