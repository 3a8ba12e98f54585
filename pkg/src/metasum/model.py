"""Adapter-augmented transformer encoder-decoder with a frozen/trainable split.

The layer equations are implemented literally:

    SA(h)     = LN(FF(MHA(h)) + h)
    TF(h)     = LN(FF(SA_{1:l}(h)))            (no residual around the final
                                                FF; ``ff_residual`` restores
                                                the conventional one)
    ADA(h)    = up(ReLU(down(h))) + h
    ADA-SA(h) = LN(ADA(FF(MHA(h)) + h))
    ADA-TF(h) = LN(ADA(FF(ADA-SA_{1:l}(h))))

Parameters are partitioned into the frozen base set (embeddings, attention,
feed-forward) and the trainable meta set (every adapter and every
layer-norm affine). The decoder's second self-attention sublayer attends
over the encoder memory.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD_ID

MASK_VALUE = -1e9  # finite stand-in for -inf so every activation stays finite
LAYERNORM_EPS = 1e-5
EMBED_INIT_STD = 0.02
ADAPTER_DOWN_STD = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults follow the reference setup."""

    hidden_dim: int = 768
    num_heads: int = 8
    ff_dim: int = 3072
    enc_layers: int = 12
    dec_layers: int = 6
    enc_sa_per_tf: int = 1
    dec_sa_per_tf: int = 2
    adapter_dim: int = 64
    vocab_size: int = 30_000
    max_src_len: int = 512
    max_tgt_len: int = 128
    enc_dropout: float = 0.1
    dec_dropout: float = 0.2
    ff_residual: bool = False

    def __post_init__(self):
        problems = []
        if self.hidden_dim % self.num_heads != 0:
            problems.append("hidden_dim must be divisible by num_heads")
        if not 0 <= self.adapter_dim < self.hidden_dim:
            problems.append("adapter_dim must satisfy 0 <= adapter_dim < hidden_dim")
        for name in ("hidden_dim", "num_heads", "ff_dim", "enc_layers", "dec_layers",
                     "enc_sa_per_tf", "dec_sa_per_tf", "vocab_size",
                     "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("enc_dropout", "dec_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(
            hidden_dim=16, num_heads=2, ff_dim=32, enc_layers=1, dec_layers=1,
            adapter_dim=4, vocab_size=64, max_src_len=32, max_tgt_len=16,
            enc_dropout=0.0, dec_dropout=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _sublayer_param_shapes(prefix: str, cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    h, f = cfg.hidden_dim, cfg.ff_dim
    yield f"{prefix}.wq", (h, h)
    yield f"{prefix}.bq", (h,)
    yield f"{prefix}.wk", (h, h)
    yield f"{prefix}.bk", (h,)
    yield f"{prefix}.wv", (h, h)
    yield f"{prefix}.bv", (h,)
    yield f"{prefix}.wo", (h, h)
    yield f"{prefix}.bo", (h,)
    yield from _ff_param_shapes(f"{prefix}.ff", cfg)
    yield from _block_tail_shapes(prefix, cfg)


def _ff_param_shapes(prefix: str, cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    h, f = cfg.hidden_dim, cfg.ff_dim
    yield f"{prefix}.w1", (h, f)
    yield f"{prefix}.b1", (f,)
    yield f"{prefix}.w2", (f, h)
    yield f"{prefix}.b2", (h,)


def _block_tail_shapes(prefix: str, cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    h, a = cfg.hidden_dim, cfg.adapter_dim
    if a > 0:
        yield f"{prefix}.adapter.down_w", (h, a)
        yield f"{prefix}.adapter.down_b", (a,)
        yield f"{prefix}.adapter.up_w", (a, h)
        yield f"{prefix}.adapter.up_b", (h,)
    yield f"{prefix}.ln.gain", (h,)
    yield f"{prefix}.ln.bias", (h,)


def parameter_group(name: str) -> str:
    """'meta' for adapters and layer-norm affines, 'base' for everything else."""
    return "meta" if (".adapter." in name or ".ln." in name) else "base"


def iter_parameter_shapes(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    """Every named parameter with its shape and base/meta group, no allocation."""

    def emit():
        h, v = cfg.hidden_dim, cfg.vocab_size
        yield "embed.tok", (v, h)
        yield "embed.src_pos", (cfg.max_src_len, h)
        yield "embed.tgt_pos", (cfg.max_tgt_len, h)
        for i in range(cfg.enc_layers):
            for j in range(cfg.enc_sa_per_tf):
                yield from _sublayer_param_shapes(f"enc.{i}.sa{j}", cfg)
            yield from _ff_param_shapes(f"enc.{i}.ff", cfg)
            yield from _block_tail_shapes(f"enc.{i}", cfg)
        for i in range(cfg.dec_layers):
            for j in range(cfg.dec_sa_per_tf):
                yield from _sublayer_param_shapes(f"dec.{i}.sa{j}", cfg)
            yield from _ff_param_shapes(f"dec.{i}.ff", cfg)
            yield from _block_tail_shapes(f"dec.{i}", cfg)
        yield "out.w", (h, v)
        yield "out.b", (v,)

    for name, shape in emit():
        yield name, shape, parameter_group(name)


def trainable_parameter_count(cfg: ModelConfig, mode: str) -> int:
    """Exact size of the trainable set: 'adapter-only' counts meta, 'full' all."""
    if mode not in ("adapter-only", "full"):
        raise ValueError(f"mode must be 'adapter-only' or 'full', got {mode!r}")
    total = 0
    for _, shape, group in iter_parameter_shapes(cfg):
        if mode == "full" or group == "meta":
            total += int(np.prod(shape))
    return total


class ParameterStore:
    """All model parameters split into frozen base and trainable meta sets."""

    def __init__(self, base: dict[str, Tensor], meta: dict[str, Tensor]):
        overlap = set(base) & set(meta)
        if overlap:
            raise ValueError(f"parameters in both groups: {sorted(overlap)[:5]}")
        self.base = base
        self.meta = meta

    @classmethod
    def initialize(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ParameterStore":
        base: dict[str, Tensor] = {}
        meta: dict[str, Tensor] = {}
        for name, shape, group in iter_parameter_shapes(cfg):
            if name.endswith(".ln.gain"):
                data = np.ones(shape)
            elif name.endswith(".adapter.down_w"):
                data = rng.normal(0.0, ADAPTER_DOWN_STD, size=shape)
            elif name.endswith((".adapter.up_w", ".adapter.up_b", ".adapter.down_b",
                                ".ln.bias")):
                data = np.zeros(shape)
            elif len(shape) == 1:  # biases
                data = np.zeros(shape)
            elif name.startswith("embed."):
                data = rng.normal(0.0, EMBED_INIT_STD, size=shape)
            else:  # Glorot keeps signal scale sane through the residual-free FF
                std = np.sqrt(2.0 / (shape[0] + shape[1]))
                data = rng.normal(0.0, std, size=shape)
            tensor = Tensor(data, requires_grad=(group == "meta"), name=name)
            (meta if group == "meta" else base)[name] = tensor
        return cls(base, meta)

    def all(self) -> dict[str, Tensor]:
        merged = dict(self.base)
        merged.update(self.meta)
        return merged

    def group(self, mode: str) -> dict[str, Tensor]:
        if mode == "adapter-only":
            return dict(self.meta)
        if mode == "full":
            return self.all()
        raise ValueError(f"unknown trainable mode {mode!r}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.all().items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        mine = self.all()
        missing = set(mine) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for name, tensor in mine.items():
            arr = np.asarray(arrays[name], dtype=ad.get_dtype())
            if arr.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tensor.shape}")
            tensor.data[...] = arr


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _mha(
    q_in: Tensor,
    kv_in: Tensor,
    p: Mapping[str, Tensor],
    prefix: str,
    mask: Tensor | None,
    cfg: ModelConfig,
    rate: float,
    rng: np.random.Generator | None,
) -> Tensor:
    b, sq, h = q_in.shape
    skv = kv_in.shape[1]
    nh = cfg.num_heads
    dh = h // nh
    q = ad.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = ad.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = ad.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    qh = ad.permute(ad.reshape(q, (b, sq, nh, dh)), (0, 2, 1, 3))
    kh = ad.permute(ad.reshape(k, (b, skv, nh, dh)), (0, 2, 1, 3))
    vh = ad.permute(ad.reshape(v, (b, skv, nh, dh)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(qh, ad.permute(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask)
    attn = ad.dropout(ad.softmax_lastdim(scores), rate, rng)
    ctx = ad.reshape(ad.permute(ad.matmul(attn, vh), (0, 2, 1, 3)), (b, sq, h))
    return ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ff(x: Tensor, p: Mapping[str, Tensor], prefix: str,
        rate: float, rng: np.random.Generator | None) -> Tensor:
    hidden = ad.dropout(ad.gelu(ad.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"])), rate, rng)
    return ad.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def apply_adapter(h: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Bottleneck block with skip connection: up(ReLU(down(h))) + h."""
    z = ad.relu(ad.linear(h, p[f"{prefix}.down_w"], p[f"{prefix}.down_b"]))
    z = ad.linear(z, p[f"{prefix}.up_w"], p[f"{prefix}.up_b"])
    return ad.add(z, h)


def _ln(x: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    normed = ad.layernorm(x, eps=LAYERNORM_EPS)
    return ad.add(ad.mul(normed, p[f"{prefix}.gain"]), p[f"{prefix}.bias"])


def self_attention_layer(
    h: Tensor,
    p: Mapping[str, Tensor],
    prefix: str,
    mask: Tensor | None,
    cfg: ModelConfig,
    memory: Tensor | None = None,
    adapters: bool = True,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """LN(FF(MHA(h)) + h), with the adapter inserted before LN when adapted."""
    kv = memory if memory is not None else h
    attended = _mha(h, kv, p, prefix, mask, cfg, rate, rng)
    y = ad.add(_ff(attended, p, f"{prefix}.ff", rate, rng), h)
    if adapters and cfg.adapter_dim > 0:
        y = apply_adapter(y, p, f"{prefix}.adapter")
    return _ln(y, p, f"{prefix}.ln")


def transformer_layer(
    h: Tensor,
    p: Mapping[str, Tensor],
    prefix: str,
    cfg: ModelConfig,
    n_sa: int,
    self_mask: Tensor | None,
    memory: Tensor | None = None,
    memory_mask: Tensor | None = None,
    adapters: bool = True,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """LN(FF(SA_{1:l}(h))); the second SA cross-attends when memory is given."""
    for j in range(n_sa):
        cross = memory is not None and j == 1
        h = self_attention_layer(
            h, p, f"{prefix}.sa{j}",
            memory_mask if cross else self_mask,
            cfg,
            memory=memory if cross else None,
            adapters=adapters, rate=rate, rng=rng,
        )
    y = _ff(h, p, f"{prefix}.ff", rate, rng)
    if cfg.ff_residual:
        y = ad.add(y, h)
    if adapters and cfg.adapter_dim > 0:
        y = apply_adapter(y, p, f"{prefix}.adapter")
    return _ln(y, p, f"{prefix}.ln")


def padding_mask(ids: np.ndarray) -> Tensor:
    """(B, 1, 1, S) additive mask hiding PAD keys."""
    blocked = (ids == PAD_ID)[:, None, None, :]
    return Tensor(np.where(blocked, MASK_VALUE, 0.0))


def causal_mask(length: int) -> Tensor:
    """(1, 1, T, T) additive mask hiding future positions."""
    upper = np.triu(np.full((length, length), MASK_VALUE), k=1)
    return Tensor(upper[None, None, :, :])


def _check_ids(ids: np.ndarray, cfg: ModelConfig, limit: int, side: str) -> None:
    if ids.ndim != 2:
        raise ValueError(f"{side} ids must be 2-D (batch, seq), got {ids.shape}")
    if ids.shape[1] > limit:
        raise ValueError(f"{side} length {ids.shape[1]} exceeds limit {limit}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"{side} token id out of range [0, {cfg.vocab_size})")


class Summarizer:
    """Config + parameters with functional forward passes.

    Every method takes an optional ``params`` mapping so adapted copies of
    the trainable set (the base-learner) can be swapped in without touching
    the store.
    """

    def __init__(self, cfg: ModelConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int) -> "Summarizer":
        return cls(cfg, ParameterStore.initialize(cfg, np.random.default_rng(seed)))

    def params(self, override: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        merged = self.store.all()
        if override:
            merged.update(override)
        return merged

    def encode(
        self,
        src_ids: np.ndarray,
        params: Mapping[str, Tensor] | None = None,
        adapters: bool = True,
        train_rng: np.random.Generator | None = None,
    ) -> Tensor:
        cfg = self.cfg
        _check_ids(src_ids, cfg, cfg.max_src_len, "source")
        p = self.params(params)
        positions = np.arange(src_ids.shape[1])
        h = ad.add(ad.embedding(p["embed.tok"], src_ids),
                   ad.embedding(p["embed.src_pos"], positions))
        h = ad.dropout(h, cfg.enc_dropout, train_rng)
        mask = padding_mask(src_ids)
        for i in range(cfg.enc_layers):
            h = transformer_layer(
                h, p, f"enc.{i}", cfg, n_sa=cfg.enc_sa_per_tf, self_mask=mask,
                adapters=adapters, rate=cfg.enc_dropout, rng=train_rng,
            )
        return h

    def decode_logits(
        self,
        memory: Tensor,
        src_ids: np.ndarray,
        tgt_in_ids: np.ndarray,
        params: Mapping[str, Tensor] | None = None,
        adapters: bool = True,
        train_rng: np.random.Generator | None = None,
    ) -> Tensor:
        cfg = self.cfg
        _check_ids(tgt_in_ids, cfg, cfg.max_tgt_len, "target")
        p = self.params(params)
        t = tgt_in_ids.shape[1]
        h = ad.add(ad.embedding(p["embed.tok"], tgt_in_ids),
                   ad.embedding(p["embed.tgt_pos"], np.arange(t)))
        h = ad.dropout(h, cfg.dec_dropout, train_rng)
        self_mask = causal_mask(t)
        mem_mask = padding_mask(src_ids)
        for i in range(cfg.dec_layers):
            h = transformer_layer(
                h, p, f"dec.{i}", cfg, n_sa=cfg.dec_sa_per_tf,
                self_mask=self_mask, memory=memory, memory_mask=mem_mask,
                adapters=adapters, rate=cfg.dec_dropout, rng=train_rng,
            )
        return ad.linear(h, p["out.w"], p["out.b"])

    def decode_nll(
        self,
        memory: Tensor,
        src_ids: np.ndarray,
        tgt_ids: np.ndarray,
        params: Mapping[str, Tensor] | None = None,
        adapters: bool = True,
        train_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, int]:
        """Teacher-forced NLL summed over non-pad target tokens.

        Returns (summed NLL, token count); divide for the per-token value.
        """
        if tgt_ids.ndim != 2 or tgt_ids.shape[1] < 2:
            raise ValueError("target must contain at least one step after [BOS]")
        logits = self.decode_logits(
            memory, src_ids, tgt_ids[:, :-1], params=params,
            adapters=adapters, train_rng=train_rng,
        )
        gold = tgt_ids[:, 1:]
        nll = ad.cross_entropy_with_logits(logits, gold)
        keep = (gold != PAD_ID).astype(float)
        total = ad.reduce_sum(ad.mul(nll, Tensor(keep)))
        return total, int(keep.sum())

    def batch_nll(
        self,
        src_ids: np.ndarray,
        tgt_ids: np.ndarray,
        params: Mapping[str, Tensor] | None = None,
        adapters: bool = True,
        train_rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, int]:
        memory = self.encode(src_ids, params=params, adapters=adapters, train_rng=train_rng)
        return self.decode_nll(memory, src_ids, tgt_ids, params=params,
                               adapters=adapters, train_rng=train_rng)


# ---------------------------------------------------------------------------
# checkpoints: deterministic byte layout so hashes are comparable
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"METASUM1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray],
                    cfg: ModelConfig, extra: Mapping | None = None) -> None:
    arrays = {
        name: (t.data if isinstance(t, Tensor) else np.asarray(t))
        for name, t in params.items()
    }
    names = sorted(arrays)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "extra": dict(extra or {}),
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, ModelConfig.from_dict(header["config"]), header.get("extra", {})


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
