"""Encoder-decoder captioning model over per-object feature vectors.

The encoder embeds object features, then runs self-attention layers whose
weights can be gated by learned functions of pairwise box geometry
(attention_mode="geometric"). The decoder is a standard causal transformer
with cross-attention over the encoded objects; geometry never enters it.

An "ordered" encoder mode replaces the geometric gate with the classic
recipe of sorting objects (by area / left-to-right / top-to-bottom) and
adding sinusoidal position encodings by rank, which exists purely for the
ablation harness.

All math runs on the tape tensors from relcap.tensor, so one backward pass
yields gradients for every parameter including the per-head gate vectors.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import combined_attention  # re-export: attention-weight combiner
from .geometry import (
    ORDER_MODES,
    BoundingBox,
    GeometryConfig,
    embed_matrix,
    order_boxes,
)
from .rng import INIT, stream

ATTENTION_MODES = ("standard", "geometric", "ordered")

NEG_MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 6
    d_ff: int = 2048
    d_feature: int = 2048
    vocab_size: int = 40
    max_caption_len: int = 20
    dropout_rate: float = 0.1
    attention_dropout: bool = True
    attention_mode: str = "standard"
    order_mode: str = "none"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_feature < 1:
            raise ConfigError("d_feature must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.attention_mode == "ordered":
            if self.order_mode not in ORDER_MODES or self.order_mode == "none":
                raise ConfigError("ordered mode needs order_mode in "
                                  f"{[m for m in ORDER_MODES if m != 'none']}")
        elif self.order_mode != "none":
            raise ConfigError("order_mode is only meaningful with attention_mode='ordered'")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the reserved ids")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class EncodedImage:
    tokens: T.Tensor                # N x d_model
    boxes: list[BoundingBox]
    order: np.ndarray               # permutation applied to the inputs

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


@functools.lru_cache(maxsize=None)
def _pos_table(n_pos: int, d_model: int) -> np.ndarray:
    pe = np.zeros((n_pos, d_model), dtype=np.float64)
    pos = np.arange(n_pos, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * (-math.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


def positional_encoding(n_pos: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table, [n_pos x d_model], float64."""
    return _pos_table(n_pos, d_model)


def appearance_attention(q: T.Tensor, k: T.Tensor, d_k: int | None = None) -> T.Tensor:
    """Scaled dot-product logits q k^T / sqrt(d_k) over the last two dims."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if d_k is None:
        d_k = q.shape[-1]
    axes = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    return T.scale(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_k))


def standard_head(q: T.Tensor, k: T.Tensor, v: T.Tensor) -> T.Tensor:
    """softmax(q k^T / sqrt(d_k)) v for one head (or a stack of heads)."""
    return T.matmul(T.softmax_rows(appearance_attention(q, k)), v)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named parameter and its shape, in checkpoint (sorted) order."""
    d, dff, dg = cfg.d_model, cfg.d_ff, cfg.geometry.d_g
    shapes: dict[str, tuple[int, ...]] = {
        "input_embed.w": (cfg.d_feature, d),
        "input_embed.b": (d,),
        "token_embed.table": (cfg.vocab_size, d),
        "output_proj.w": (d, cfg.vocab_size),
        "output_proj.b": (cfg.vocab_size,),
    }
    for i in range(cfg.n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"enc.{i}.attn.{name}"] = (d, d)
        if cfg.attention_mode == "geometric":
            shapes[f"enc.{i}.attn.wg"] = (cfg.n_heads, dg)
        shapes[f"enc.{i}.ln1.gamma"] = (d,)
        shapes[f"enc.{i}.ln1.beta"] = (d,)
        shapes[f"enc.{i}.ffn.w1"] = (d, dff)
        shapes[f"enc.{i}.ffn.b1"] = (dff,)
        shapes[f"enc.{i}.ffn.w2"] = (dff, d)
        shapes[f"enc.{i}.ffn.b2"] = (d,)
        shapes[f"enc.{i}.ln2.gamma"] = (d,)
        shapes[f"enc.{i}.ln2.beta"] = (d,)
        for sub in ("self_attn", "cross_attn"):
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"dec.{i}.{sub}.{name}"] = (d, d)
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"dec.{i}.{ln}.gamma"] = (d,)
            shapes[f"dec.{i}.{ln}.beta"] = (d,)
        shapes[f"dec.{i}.ffn.w1"] = (d, dff)
        shapes[f"dec.{i}.ffn.b1"] = (dff,)
        shapes[f"dec.{i}.ffn.w2"] = (dff, d)
        shapes[f"dec.{i}.ffn.b2"] = (d,)
    return dict(sorted(shapes.items()))


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, T.Tensor]:
    """Seeded init: Xavier-uniform projections, zero biases, unit layer norms,
    N(0, d_model^-1/2) embeddings."""
    rng = stream(seed, INIT)
    params: dict[str, T.Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("b", "b1", "b2", "beta"):
            data = np.zeros(shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        elif name == "token_embed.table":
            data = rng.normal(0.0, cfg.d_model ** -0.5, size=shape)
        elif leaf == "wg":
            limit = math.sqrt(6.0 / (cfg.geometry.d_g + 1))
            data = rng.uniform(-limit, limit, size=shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = T.param(data, dtype=dtype)
    return params


_MASK_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _causal_mask(n_heads: int, t: int, dtype) -> np.ndarray:
    key = (n_heads, t, np.dtype(dtype).str)
    if key not in _MASK_CACHE:
        mask = np.triu(np.full((t, t), NEG_MASK), k=1)
        _MASK_CACHE[key] = np.broadcast_to(mask, (n_heads, t, t)).astype(dtype).copy()
    return _MASK_CACHE[key]


class CaptionModel:
    """Bundles a config with a named parameter set and runs forward passes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, T.Tensor]):
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            unknown = sorted(set(params) - set(expected))
            raise UsageError(f"parameter set mismatch: missing={missing} unknown={unknown}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: shape {params[name].shape} != {shape}")
        self.cfg = cfg
        self.params = params
        self.dtype = params["input_embed.w"].dtype

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "CaptionModel":
        return cls(cfg, init_params(cfg, seed, dtype=dtype))

    # -- pieces ------------------------------------------------------------

    def input_embed(self, features: np.ndarray, train: bool = False,
                    rng: np.random.Generator | None = None) -> T.Tensor:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.cfg.d_feature:
            raise DimensionError(
                f"features must be [N x {self.cfg.d_feature}], got {features.shape}")
        x = T.tensor(features, dtype=self.dtype)
        x = T.relu(T.add(T.matmul(x, self.params["input_embed.w"]),
                         self.params["input_embed.b"]))
        return T.dropout(x, self.cfg.dropout_rate, rng, train)

    def _heads(self, x: T.Tensor, w: T.Tensor) -> T.Tensor:
        t_len = x.shape[0]
        h, dk = self.cfg.n_heads, self.cfg.d_k
        return T.transpose(T.reshape(T.matmul(x, w), (t_len, h, dk)), (1, 0, 2))

    def _merge_heads(self, x: T.Tensor) -> T.Tensor:
        h, t_len, dk = x.shape
        return T.reshape(T.transpose(x, (1, 0, 2)), (t_len, h * dk))

    def _attention(self, x_q: T.Tensor, x_kv: T.Tensor, prefix: str,
                   mask: np.ndarray | None, gates: T.Tensor | None,
                   train: bool, rng, stats: dict | None, collect: dict | None) -> T.Tensor:
        p = self.params
        q = self._heads(x_q, p[f"{prefix}.wq"])
        k = self._heads(x_kv, p[f"{prefix}.wk"])
        v = self._heads(x_kv, p[f"{prefix}.wv"])
        scores = appearance_attention(q, k, self.cfg.d_k)
        if mask is not None:
            scores = T.add(scores, T.tensor(mask, dtype=self.dtype))
        if gates is not None:
            weights = T.combined_attention(scores, gates)
            if stats is not None:
                stats["gate_fallback_rows"] = (
                    stats.get("gate_fallback_rows", 0) + weights.fallback_rows)
        else:
            weights = T.softmax_rows(scores)
        if collect is not None:
            collect[prefix] = {
                "scores": scores.data.copy(),
                "weights": weights.data.copy(),
                "gates": gates.data.copy() if gates is not None else None,
            }
        if train and self.cfg.attention_dropout:
            weights = T.dropout(weights, self.cfg.dropout_rate, rng, train)
        out = self._merge_heads(T.matmul(weights, v))
        return T.matmul(out, p[f"{prefix}.wo"])

    def _sublayer(self, x: T.Tensor, sub_out: T.Tensor, ln_prefix: str,
                  train: bool, rng) -> T.Tensor:
        dropped = T.dropout(sub_out, self.cfg.dropout_rate, rng, train)
        return T.layer_norm(T.add(x, dropped),
                            self.params[f"{ln_prefix}.gamma"],
                            self.params[f"{ln_prefix}.beta"])

    def _ffn(self, x: T.Tensor, prefix: str) -> T.Tensor:
        p = self.params
        hidden = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _layer_gates(self, layer: int, geo_embed: T.Tensor, n: int) -> T.Tensor:
        """Per-head gate matrices [H x N x N] from the cached pair embeddings."""
        wg = self.params[f"enc.{layer}.attn.wg"]
        flat = T.relu(T.matmul(geo_embed, T.transpose(wg, (1, 0))))  # N*N x H
        return T.transpose(T.reshape(flat, (n, n, self.cfg.n_heads)), (2, 0, 1))

    # -- forward passes ------------------------------------------------------

    def encoder_forward(self, features: np.ndarray, boxes: list[BoundingBox] | None,
                        train: bool = False, rng: np.random.Generator | None = None,
                        stats: dict | None = None, collect: dict | None = None,
                        gate_override: np.ndarray | None = None,
                        geo_embed: np.ndarray | None = None) -> EncodedImage:
        cfg = self.cfg
        features = np.asarray(features)
        n = features.shape[0]
        if n < 1:
            raise UsageError("encoder needs at least one object")
        needs_boxes = cfg.attention_mode in ("geometric", "ordered")
        if needs_boxes and boxes is None:
            raise UsageError(f"attention_mode={cfg.attention_mode!r} requires boxes")
        if boxes is not None and len(boxes) != n:
            raise DimensionError(f"{len(boxes)} boxes for {n} feature rows")

        order = np.arange(n, dtype=np.int64)
        if cfg.attention_mode == "ordered":
            order = order_boxes(boxes, cfg.order_mode)
            features = features[order]
            boxes = [boxes[i] for i in order]

        x = self.input_embed(features, train, rng)

        if cfg.attention_mode == "ordered":
            pe = positional_encoding(n, cfg.d_model).astype(self.dtype)
            x = T.add(x, T.tensor(pe, dtype=self.dtype))

        gates_const = None
        geo_tensor = None
        if gate_override is not None:
            g = np.asarray(gate_override, dtype=self.dtype)
            if g.ndim == 0:
                g = np.full((n, n), float(g), dtype=self.dtype)
            gates_const = T.tensor(np.broadcast_to(g, (cfg.n_heads, n, n)).copy(),
                                   dtype=self.dtype)
        elif cfg.attention_mode == "geometric":
            if geo_embed is None:
                geo_embed = embed_matrix(boxes, cfg.geometry)
            geo_tensor = T.tensor(geo_embed, dtype=self.dtype)

        for i in range(cfg.n_layers):
            if gates_const is not None:
                gates = gates_const
            elif geo_tensor is not None:
                gates = self._layer_gates(i, geo_tensor, n)
            else:
                gates = None
            attn = self._attention(x, x, f"enc.{i}.attn", None, gates,
                                   train, rng, stats, collect)
            x = self._sublayer(x, attn, f"enc.{i}.ln1", train, rng)
            x = self._sublayer(x, self._ffn(x, f"enc.{i}.ffn"), f"enc.{i}.ln2", train, rng)
        return EncodedImage(tokens=x, boxes=list(boxes) if boxes else [], order=order)

    def decoder_forward(self, encoded: EncodedImage, token_ids,
                        train: bool = False, rng: np.random.Generator | None = None,
                        collect: dict | None = None) -> T.Tensor:
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise UsageError("decoder needs a non-empty 1-D id prefix")
        t_len = ids.size
        if t_len > cfg.max_caption_len + 2:
            raise UsageError(f"prefix length {t_len} exceeds max {cfg.max_caption_len + 2}")

        x = T.embedding_lookup(self.params["token_embed.table"], ids)
        x = T.scale(x, math.sqrt(cfg.d_model))
        pe = positional_encoding(t_len, cfg.d_model).astype(self.dtype)
        x = T.add(x, T.tensor(pe, dtype=self.dtype))
        x = T.dropout(x, cfg.dropout_rate, rng, train)

        mask = _causal_mask(cfg.n_heads, t_len, self.dtype)
        for i in range(cfg.n_layers):
            attn = self._attention(x, x, f"dec.{i}.self_attn", mask, None,
                                   train, rng, None, collect)
            x = self._sublayer(x, attn, f"dec.{i}.ln1", train, rng)
            cross = self._attention(x, encoded.tokens, f"dec.{i}.cross_attn", None, None,
                                    train, rng, None, collect)
            x = self._sublayer(x, cross, f"dec.{i}.ln2", train, rng)
            x = self._sublayer(x, self._ffn(x, f"dec.{i}.ffn"), f"dec.{i}.ln3", train, rng)
        return T.add(T.matmul(x, self.params["output_proj.w"]), self.params["output_proj.b"])

    def loss(self, features: np.ndarray, boxes: list[BoundingBox] | None, caption_ids,
             pad_id: int = 0, train: bool = False, rng: np.random.Generator | None = None,
             stats: dict | None = None, geo_embed: np.ndarray | None = None) -> T.Tensor:
        """Teacher-forced cross entropy: predict caption_ids[1:] from [: -1]."""
        ids = np.asarray(caption_ids, dtype=np.int64)
        if ids.size < 2:
            raise UsageError("caption must contain at least BOS and one target")
        encoded = self.encoder_forward(features, boxes, train, rng, stats,
                                       geo_embed=geo_embed)
        logits = self.decoder_forward(encoded, ids[:-1], train, rng)
        return T.cross_entropy(logits, ids[1:], pad_id)


def config_to_dict(cfg: ModelConfig) -> dict:
    """Flat, json-friendly form of a model config (checkpoint payload)."""
    geo = cfg.geometry
    return {
        "d_model": cfg.d_model, "n_heads": cfg.n_heads, "n_layers": cfg.n_layers,
        "d_ff": cfg.d_ff, "d_feature": cfg.d_feature, "vocab_size": cfg.vocab_size,
        "max_caption_len": cfg.max_caption_len, "dropout_rate": cfg.dropout_rate,
        "attention_dropout": cfg.attention_dropout,
        "attention_mode": cfg.attention_mode, "order_mode": cfg.order_mode,
        "geo_eps_clamp": geo.eps_clamp, "geo_d_g": geo.d_g,
        "geo_wavelength_base": geo.wavelength_base, "geo_y_denominator": geo.y_denominator,
    }


def config_from_dict(d: dict) -> ModelConfig:
    geo = GeometryConfig(
        eps_clamp=d["geo_eps_clamp"], d_g=d["geo_d_g"],
        wavelength_base=d["geo_wavelength_base"], y_denominator=d["geo_y_denominator"],
    )
    keys = ("d_model", "n_heads", "n_layers", "d_ff", "d_feature", "vocab_size",
            "max_caption_len", "dropout_rate", "attention_dropout",
            "attention_mode", "order_mode")
    return ModelConfig(geometry=geo, **{k: d[k] for k in keys})


def toy_config(**overrides) -> ModelConfig:
    """Small profile used by desk-scale experiments and the test-suite."""
    base = dict(
        d_model=64, n_heads=4, n_layers=2, d_ff=128, d_feature=32,
        vocab_size=40, max_caption_len=16, dropout_rate=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def config_with_mode(cfg: ModelConfig, mode: str) -> ModelConfig:
    """Re-target a config at one of the five experiment variants."""
    if mode in ("standard", "none"):
        return replace(cfg, attention_mode="standard", order_mode="none")
    if mode == "geometric":
        return replace(cfg, attention_mode="geometric", order_mode="none")
    if mode.startswith("ordered:"):
        order = {"size": "by_area_desc", "ltr": "left_to_right", "ttb": "top_to_bottom"}
        key = mode.split(":", 1)[1]
        if key not in order:
            raise ConfigError(f"unknown ordering {key!r}; use size, ltr or ttb")
        return replace(cfg, attention_mode="ordered", order_mode=order[key])
    raise ConfigError(f"unknown mode {mode!r}")
