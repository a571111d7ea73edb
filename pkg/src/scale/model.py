"""Predictor network over clip sets.

Each clip feature is projected to the hidden width, replaced by a learned MSK
token when masked, and summed with an MLP embedding of its normalized crop
box. A learned CLS token (no positional term) is prepended and the sequence
runs through pre-norm transformer blocks. Four projection heads map outputs
into the contrastive space.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor

HEAD_NAMES = ("mcm_a", "mcm_b", "set_a", "set_b")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 64
    d_h: int = 256
    layers: int = 2
    heads: int = 4
    d_proj: int = 128
    tau: float = 0.1
    mask_ratio: float = 0.25
    K: int = 8
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.d_in < 1 or self.d_h < 1 or self.d_proj < 1:
            raise ConfigError("dimensions must be positive")
        if self.heads < 1 or self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} is not divisible by heads={self.heads}")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if self.K < 1:
            raise ConfigError("K must be >= 1")

    def canonical(self) -> str:
        return ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams(OrderedDict):
    """Ordered mapping of parameter name to leaf :class:`Tensor`."""

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def astype(self, dtype) -> ModelParams:
        return ModelParams((k, Tensor(t.data.astype(dtype), requires_grad=True, dtype=dtype))
                           for k, t in self.items())

    def copy(self) -> ModelParams:
        return self.astype(next(iter(self.values())).data.dtype)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, din = config.d_h, config.d_in
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("input.weight", (din, d)), ("input.bias", (d,)),
        ("pos.0.weight", (6, d)), ("pos.0.bias", (d,)),
        ("pos.1.weight", (d, d)), ("pos.1.bias", (d,)),
        ("msk", (d,)), ("cls", (d,)),
    ]
    for i in range(config.layers):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.gain", (d,)), (p + "ln1.bias", (d,)),
            (p + "attn.qkv.weight", (d, 3 * d)),
            (p + "attn.out.weight", (d, d)), (p + "attn.out.bias", (d,)),
            (p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
            (p + "ff.0.weight", (d, 4 * d)), (p + "ff.0.bias", (4 * d,)),
            (p + "ff.1.weight", (4 * d, d)), (p + "ff.1.bias", (d,)),
        ]
    shapes += [("final_ln.gain", (d,)), ("final_ln.bias", (d,))]
    for head in HEAD_NAMES:
        # the MCM target side reads raw backbone features
        width_in = din if head == "mcm_b" else d
        dims = (width_in, d, d, config.d_proj)
        for j in range(3):
            shapes += [(f"heads.{head}.{j}.weight", (dims[j], dims[j + 1])),
                       (f"heads.{head}.{j}.bias", (dims[j + 1],))]
    return shapes


def predictor_names(config: ModelConfig) -> list[str]:
    return [n for n, _ in param_shapes(config) if not n.startswith("heads.")]


def init_params(config: ModelConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Fan-in scaled uniform weights, zero biases, unit norm gains, N(0, 0.02) tokens.

    Weights use the variance-preserving bound sqrt(3 / fan_in), so every
    affine layer keeps unit-variance inputs at unit variance.
    """
    config.validate()
    dtype = dtype or nx.get_dtype()
    rng = np.random.Generator(np.random.PCG64(seed))
    params = ModelParams()
    for name, shape in param_shapes(config):
        if name.endswith(".weight"):
            bound = math.sqrt(3.0 / shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name in ("msk", "cls"):
            value = rng.normal(0.0, 0.02, size=shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, dtype=dtype)
    return params


@dataclass
class SetEncoding:
    clip_tokens: Tensor  # (N, K, d_h)
    summary: Tensor  # (N, d_h)


def _mlp2(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = nx.gelu(nx.linear(x, params[prefix + ".0.weight"], params[prefix + ".0.bias"]))
    return nx.linear(h, params[prefix + ".1.weight"], params[prefix + ".1.bias"])


def embed_positions(coords, params: ModelParams) -> Tensor:
    """Positional MLP on normalized 6-vectors; entries must lie in [0, 1]."""
    c = np.asarray(coords, dtype=params["pos.0.weight"].data.dtype)
    if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
        raise ValueError("normalized coordinates must lie in [0, 1]")
    return _mlp2(Tensor(c, dtype=c.dtype), params, "pos")


def _attention(x: Tensor, params: ModelParams, prefix: str, heads: int) -> Tensor:
    n, s, d = x.shape
    dk = d // heads
    # no qkv bias: the key bias has an identically zero gradient
    qkv = nx.matmul(x, params[prefix + "qkv.weight"])
    qkv = qkv.reshape(n, s, 3, heads, dk).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    weights = nx.softmax(scores, axis=-1)
    ctx = nx.matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, s, d)
    return nx.linear(ctx, params[prefix + "out.weight"], params[prefix + "out.bias"])


def _block(x: Tensor, params: ModelParams, i: int, config: ModelConfig) -> Tensor:
    p = f"blocks.{i}."
    h = nx.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], config.ln_eps)
    x = x + _attention(h, params, p + "attn.", config.heads)
    h = nx.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], config.ln_eps)
    h = nx.gelu(nx.linear(h, params[p + "ff.0.weight"], params[p + "ff.0.bias"]))
    return x + nx.linear(h, params[p + "ff.1.weight"], params[p + "ff.1.bias"])


def canonical_order(features: np.ndarray, coords: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-sequence clip order that depends only on the visible token inputs.

    Sorting by (mask flag, coordinates, unmasked content) makes the network
    input identical for every permutation of the same clip set, which turns
    the permutation property into bit-exact invariance. Masked content is
    excluded from the key so it stays invisible.
    """
    visible = np.where(mask[..., None], 0.0, features.astype(np.float64))
    keys = np.concatenate([visible, coords.astype(np.float64), mask[..., None].astype(np.float64)], axis=-1)
    # lexsort treats the last key as primary
    return np.lexsort(np.moveaxis(keys, -1, 0)[::-1], axis=-1)


def encode_set(features, coords, mask, params: ModelParams, config: ModelConfig,
               canonical: bool = True) -> SetEncoding:
    """Run the predictor on clip sets.

    ``features`` is (..., K, d_in), ``coords`` (..., K, 6) normalized boxes and
    ``mask`` a boolean (..., K) array. Leading axes are flattened into
    independent sequences.
    """
    dtype = params["input.weight"].data.dtype
    features = np.asarray(features)
    coords = np.asarray(coords)
    mask = np.asarray(mask, dtype=bool)
    lead = features.shape[:-2]
    K, d_in = features.shape[-2:]
    if d_in != config.d_in:
        raise ValueError(f"feature dim {d_in} != model d_in {config.d_in}")
    if coords.shape != lead + (K, 6) or mask.shape != lead + (K,):
        raise ValueError(f"shape mismatch: features {features.shape}, coords {coords.shape}, mask {mask.shape}")
    n = int(np.prod(lead)) if lead else 1
    f = features.reshape(n, K, d_in)
    c = coords.reshape(n, K, 6)
    m = mask.reshape(n, K)
    perm = None
    if canonical and K > 1:
        perm = canonical_order(f, c, m)
        f = np.take_along_axis(f, perm[..., None], axis=1)
        c = np.take_along_axis(c, perm[..., None], axis=1)
        m = np.take_along_axis(m, perm, axis=1)

    tokens = nx.linear(Tensor(f, dtype=dtype), params["input.weight"], params["input.bias"])
    tokens = nx.where(m[..., None], params["msk"], tokens)
    tokens = tokens + embed_positions(c, params)
    cls = nx.broadcast_to(params["cls"], (n, 1, config.d_h))
    x = nx.concat([cls, tokens], axis=1)
    for i in range(config.layers):
        x = _block(x, params, i, config)
    x = nx.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], config.ln_eps)
    summary = x[:, 0]
    clip_tokens = x[:, 1:]
    if perm is not None:
        clip_tokens = nx.permute(clip_tokens, np.argsort(perm, axis=-1), axis=1)
    return SetEncoding(clip_tokens.reshape(lead + (K, config.d_h)),
                       summary.reshape(lead + (config.d_h,)))


def head_mlp(h, params: ModelParams, head: str) -> Tensor:
    if head not in HEAD_NAMES:
        raise KeyError(f"unknown head {head!r}; expected one of {HEAD_NAMES}")
    p = f"heads.{head}."
    x = h if isinstance(h, Tensor) else Tensor(h, dtype=params[p + "0.weight"].data.dtype)
    if x.ndim == 1:
        return head_mlp(x.reshape(1, -1), params, head).reshape(-1)
    x = nx.gelu(nx.linear(x, params[p + "0.weight"], params[p + "0.bias"]))
    x = nx.gelu(nx.linear(x, params[p + "1.weight"], params[p + "1.bias"]))
    return nx.linear(x, params[p + "2.weight"], params[p + "2.bias"])


def project(h, params: ModelParams, head: str) -> Tensor:
    """Three-layer head followed by L2 normalization onto the unit sphere."""
    return nx.l2_normalize(head_mlp(h, params, head), axis=-1)
