"""Multi-stream attention encoder and the softmax prediction head.

For ``n`` streams a layer attends over every unordered pair ``(X, Y)`` with
``X <= Y``: n(n+1)/2 attention maps, queries from ``X`` and keys/values
from ``Y``. Stream ``X`` is rebuilt from its own map ``O_XX`` followed by
every cross map it takes part in, through an affine reconstruction layer.
With the two streams ``M`` and ``D`` this gives ``MM``, ``MD`` and ``DD``,
``M_hat = [O_MM, O_MD] W_m + b_m`` and ``D_hat = [O_DD, O_MD] W_d + b_d``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from itertools import combinations_with_replacement

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import pooling_weights


@dataclass
class EncoderConfig:
    stream_names: tuple[str, ...] = ("M", "D")
    stream_dim: int = 10
    d_k: int = 10
    n_layers: int = 2
    heads: int = 1
    demo_dim: int = 3
    causal: bool = False
    pooling: str = "mean"
    residual: bool = False
    positional: bool = True

    def __post_init__(self):
        self.stream_names = tuple(self.stream_names)
        if self.d_k <= 0 or self.n_layers < 1 or self.heads < 1:
            raise ValueError("d_k, n_layers and heads must be positive")
        if self.d_k % self.heads:
            raise ValueError(f"d_k={self.d_k} is not divisible by heads={self.heads}")
        if self.pooling not in ("mean", "last"):
            raise ValueError(f"pooling must be 'mean' or 'last', got {self.pooling!r}")

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(combinations_with_replacement(range(len(self.stream_names)), 2))

    def pair_tag(self, pair: tuple[int, int]) -> str:
        return self.stream_names[pair[0]] + self.stream_names[pair[1]]

    def reconstruction_pairs(self, s: int) -> list[tuple[int, int]]:
        own = [(s, s)]
        return own + [p for p in self.pairs if p[0] != p[1] and s in p]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stream_names"] = list(self.stream_names)
        return d


@dataclass
class AttentionRecord:
    layer: int
    pair: str
    att: np.ndarray  # (B x) T x T, averaged over heads
    output: np.ndarray  # (B x) T x d_k


def positional_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd ones."""
    if d % 2:
        raise ValueError(f"positional encoding width must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def attention_mask(valid: np.ndarray, causal: bool) -> np.ndarray:
    """B x T x T boolean: keys must be real months (and not in the future when causal)."""
    B, T = valid.shape
    mask = np.broadcast_to(valid[:, None, :], (B, T, T)).copy()
    if causal:
        mask &= np.tril(np.ones((T, T), dtype=bool))
    return mask


def cross_attention(
    Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None, causal: bool = False
) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V; returns (attention weights, output)."""
    if Q.shape != K.shape or K.shape[:-1] != V.shape[:-1]:
        raise ad.DimensionError(f"cross_attention: Q {Q.shape}, K {K.shape}, V {V.shape}")
    T = Q.rows
    if causal:
        tri = np.tril(np.ones((T, T), dtype=bool))
        mask = tri if mask is None else (mask & tri)
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.cols))
    att = ad.softmax_rows(scores, mask)
    return att, ad.matmul(att, V)


def init_params(config: EncoderConfig, seed: int = 0, prefix: str = "") -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    w, dk = config.stream_dim, config.d_k

    def dense(n_in, n_out):
        return Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)), True)

    params: dict[str, Tensor] = {}
    for layer in range(config.n_layers):
        for s, name in enumerate(config.stream_names):
            base = f"{prefix}layer{layer}.{name}."
            for proj in ("q", "k", "v"):
                params[base + proj] = dense(w, dk)
            params[base + "W"] = dense(dk * len(config.reconstruction_pairs(s)), w)
            params[base + "b"] = Tensor(np.zeros((1, w)), True)
    n_in = w * len(config.stream_names) + config.demo_dim
    params[prefix + "pred.W"] = dense(n_in, 2)
    params[prefix + "pred.b"] = Tensor(np.zeros((1, 2)), True)
    return params


def encoder_layer(
    streams: list[Tensor],
    params: dict[str, Tensor],
    layer: int,
    config: EncoderConfig,
    mask: np.ndarray | None = None,
    prefix: str = "",
) -> tuple[list[Tensor], list[AttentionRecord]]:
    """One multi-stream layer: project, attend over all pairs, reconstruct each stream."""
    T = streams[0].rows
    for s in streams:
        if s.rows != T:
            raise ad.DimensionError("encoder_layer: streams differ in length")
    if config.causal:
        tri = np.tril(np.ones((T, T), dtype=bool))
        mask = tri if mask is None else (mask & tri)
    proj = {}
    for s, name in enumerate(config.stream_names):
        base = f"{prefix}layer{layer}.{name}."
        proj[s] = {p: ad.matmul(streams[s], params[base + p]) for p in ("q", "k", "v")}

    outputs: dict[tuple[int, int], Tensor] = {}
    records = []
    h = config.heads
    width = config.d_k // h
    for pair in config.pairs:
        x, y = pair
        if h == 1:
            att, out = cross_attention(proj[x]["q"], proj[y]["k"], proj[y]["v"], mask)
            att_data = att.data
        else:
            atts, outs = [], []
            for j in range(h):
                lo, hi = j * width, (j + 1) * width
                a, o = cross_attention(
                    ad.slice_cols(proj[x]["q"], lo, hi),
                    ad.slice_cols(proj[y]["k"], lo, hi),
                    ad.slice_cols(proj[y]["v"], lo, hi),
                    mask,
                )
                atts.append(a.data)
                outs.append(o)
            out = ad.concat_cols(outs)
            att_data = np.mean(atts, axis=0)
        outputs[pair] = out
        records.append(AttentionRecord(layer, config.pair_tag(pair), att_data, out.data))

    new_streams = []
    for s, name in enumerate(config.stream_names):
        base = f"{prefix}layer{layer}.{name}."
        cat = ad.concat_cols([outputs[p] for p in config.reconstruction_pairs(s)])
        rebuilt = ad.add(ad.matmul(cat, params[base + "W"]), params[base + "b"])
        if config.residual:
            rebuilt = ad.add(rebuilt, streams[s])
        new_streams.append(rebuilt)
    return new_streams, records


def encode_and_predict(
    streams: list[Tensor],
    demo: np.ndarray,
    valid: np.ndarray,
    params: dict[str, Tensor],
    config: EncoderConfig,
    prefix: str = "",
) -> tuple[Tensor, list[AttentionRecord]]:
    """Positional encoding -> stacked layers -> pooling -> [pooled..., demo] W + b -> softmax.

    ``streams`` are B x T x stream_dim, ``demo`` is B x demo_dim and ``valid``
    B x T marks real (unpadded) months. Returns B x 2 probabilities and the
    attention trace of every layer.
    """
    if len(streams) != len(config.stream_names):
        raise ValueError(f"expected {len(config.stream_names)} streams, got {len(streams)}")
    B, T = valid.shape
    if T < 1:
        raise ValueError("need at least one time step")
    if config.positional:
        pe = Tensor(np.broadcast_to(positional_encoding(T, config.stream_dim), (B, T, config.stream_dim)))
        streams = [ad.add(s, pe) for s in streams]
    mask = attention_mask(valid, False)
    trace: list[AttentionRecord] = []
    for layer in range(config.n_layers):
        streams, recs = encoder_layer(streams, params, layer, config, mask, prefix)
        trace.extend(recs)
    pool = Tensor(pooling_weights(valid, config.pooling))
    pooled = [ad.flatten_batch(ad.matmul(pool, s)) for s in streams]
    features = ad.concat_cols(pooled + [Tensor(demo)])
    logits = ad.add(ad.matmul(features, params[prefix + "pred.W"]), params[prefix + "pred.b"])
    return ad.softmax_rows(logits), trace
