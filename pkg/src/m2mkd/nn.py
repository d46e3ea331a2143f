"""Transformer blocks, top-k gated mixture-of-experts, stitches, embedding and head.

Blocks are pure functions of a parameter mapping and an input tensor. Parameter
names are dot paths; a ``Scope`` resolves names relative to a prefix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadArgs, BadK, MissingParameter, ShapeMismatch
from .tensor import Tensor, as_tensor, concat, gelu, layernorm, masked_softmax, softmax


@dataclass(frozen=True)
class BlockSpec:
    d_model: int
    n_heads: int
    d_ff: int
    n_experts: int = 0
    top_k: int = 0

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff) < 1:
            raise BadArgs(f"block widths must be positive: {self}")
        if self.d_model % self.n_heads:
            raise BadArgs(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_experts < 0:
            raise BadArgs("n_experts must be >= 0")
        if self.n_experts > 0 and not 1 <= self.top_k <= self.n_experts:
            raise BadK(f"top_k={self.top_k} must lie in [1, {self.n_experts}]")

    @property
    def is_moe(self):
        return self.n_experts > 0


class Scope:
    """Read-only view of ``params`` under a name prefix."""

    __slots__ = ("params", "prefix")

    def __init__(self, params, prefix=""):
        self.params = params
        self.prefix = prefix

    def _full(self, name):
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name):
        full = self._full(name)
        try:
            return self.params[full]
        except KeyError:
            raise MissingParameter(f"missing parameter {full!r}") from None

    def __contains__(self, name):
        return self._full(name) in self.params

    def child(self, name):
        return Scope(self.params, self._full(name))


def _scope(p):
    return p if isinstance(p, Scope) else Scope(p)


# ---------------------------------------------------------------- shapes


def linear_shapes(d_in, d_out, prefix):
    return {f"{prefix}.w": (d_in, d_out), f"{prefix}.b": (d_out,)}


def ffn_shapes(d, d_ff, prefix):
    return {**linear_shapes(d, d_ff, f"{prefix}.fc1"), **linear_shapes(d_ff, d, f"{prefix}.fc2")}


def block_shapes(spec, prefix=""):
    """Parameter shapes of one pre-norm block, dense or mixture-of-experts."""
    pre = f"{prefix}." if prefix else ""
    d = spec.d_model
    shapes = {f"{pre}ln1.g": (d,), f"{pre}ln1.b": (d,)}
    for name in ("q", "k", "v", "proj"):
        shapes.update(linear_shapes(d, d, f"{pre}attn.{name}"))
    shapes[f"{pre}ln2.g"] = (d,)
    shapes[f"{pre}ln2.b"] = (d,)
    if spec.is_moe:
        shapes[f"{pre}moe.gate.w"] = (d, spec.n_experts)
        for e in range(spec.n_experts):
            shapes.update(ffn_shapes(d, spec.d_ff, f"{pre}moe.experts.{e}"))
    else:
        shapes.update(ffn_shapes(d, spec.d_ff, f"{pre}mlp"))
    return shapes


def init_array(name, shape, rng):
    """Initial value for a parameter, chosen by its name."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf == "b":
        return np.zeros(shape)
    if leaf in ("pos", "cls"):
        return rng.normal(0.0, 0.02, size=shape)
    fan_in, fan_out = shape[0], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(shapes, rng, requires_grad=True):
    return {name: Tensor(init_array(name, shape, rng), requires_grad) for name, shape in shapes.items()}


# ---------------------------------------------------------------- forward


def linear(x, p):
    p = _scope(p)
    return x @ p["w"] + p["b"]


def ffn(x, p):
    p = _scope(p)
    return linear(gelu(linear(x, p.child("fc1"))), p.child("fc2"))


def attention(spec, p, x):
    """Multi-head self-attention over the token axis of ``x[batch, tokens, d]``."""
    p = _scope(p)
    batch, tokens, d = x.shape
    heads = spec.n_heads
    dh = d // heads

    def split(t):
        return t.reshape(batch, tokens, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, p.child("q")))
    k = split(linear(x, p.child("k")))
    v = split(linear(x, p.child("v")))
    att = softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
    out = (att @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, d)
    return linear(out, p.child("proj"))


def topk_mask(scores, k):
    """Boolean mask of the ``k`` largest entries along the last axis.

    Ties go to the lowest index.
    """
    scores = np.asarray(scores)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise BadK(f"k={k} must lie in [1, {n}]")
    idx = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    return mask


def gate_topk(w_gate, x, k, routing=None):
    """Sparse gate weights ``softmax(topk(x @ w_gate))`` over the experts.

    Works for a single token ``x[d]`` or any ``x[..., d]``; non-selected experts
    get weight exactly 0. A precomputed boolean ``routing`` mask overrides the
    top-k selection (used to hold routing fixed under finite differences).
    """
    scores = as_tensor(x) @ w_gate
    if routing is None:
        routing = topk_mask(scores.data, k)
    return masked_softmax(scores, routing)


def moe_forward(spec, p, x, routing=None):
    """Per-token gate-weighted sum of the selected experts' outputs."""
    p = _scope(p)
    weights = gate_topk(p["gate.w"], x, spec.top_k, routing)
    out = None
    for e in range(spec.n_experts):
        term = weights[..., e : e + 1] * ffn(x, p.child(f"experts.{e}"))
        out = term if out is None else out + term
    return out


def block_forward(spec, p, x):
    """Pre-norm transformer block; ``x`` and the output are ``[batch, tokens, d]``."""
    p = _scope(p)
    if x.ndim != 3 or x.shape[-1] != spec.d_model:
        raise ShapeMismatch(f"block expects [batch, tokens, {spec.d_model}], got {x.shape}")
    h = x + attention(spec, p.child("attn"), layernorm(x, p["ln1.g"], p["ln1.b"]))
    z = layernorm(h, p["ln2.g"], p["ln2.b"])
    if spec.is_moe:
        return h + moe_forward(spec, p.child("moe"), z)
    return h + ffn(z, p.child("mlp"))


meta_layer_forward = block_forward


def embed_shapes(d_in, tokens, d, pooling, prefix="embed"):
    if d_in % tokens:
        raise BadArgs(f"d_in={d_in} is not divisible into {tokens} tokens")
    shapes = linear_shapes(d_in // tokens, d, f"{prefix}.proj")
    n_pos = tokens + (1 if pooling == "cls" else 0)
    if pooling == "cls":
        shapes[f"{prefix}.cls"] = (1, 1, d)
    shapes[f"{prefix}.pos"] = (n_pos, d)
    return shapes


def head_shapes(d, num_classes, prefix="head"):
    return {f"{prefix}.norm.g": (d,), f"{prefix}.norm.b": (d,), **linear_shapes(d, num_classes, f"{prefix}.fc")}


def embed_forward(p, x, tokens, pooling="mean"):
    """Flat features ``[batch, d_in]`` to token embeddings ``[batch, tokens(+1), d]``."""
    p = _scope(p)
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] % tokens:
        raise ShapeMismatch(f"embedding expects [batch, k*{tokens}] features, got {x.shape}")
    batch = x.shape[0]
    h = linear(x.reshape(batch, tokens, x.shape[1] // tokens), p.child("proj"))
    if pooling == "cls":
        cls = p["cls"] + np.zeros((batch, 1, h.shape[-1]))
        h = concat([cls, h], axis=1)
    return h + p["pos"]


def pool(h, pooling="mean"):
    return h[:, 0] if pooling == "cls" else h.mean(axis=1)


def head_features(p, h, pooling="mean"):
    p = _scope(p)
    return layernorm(pool(h, pooling), p["norm.g"], p["norm.b"])


def head_forward(p, h, pooling="mean"):
    """Pool tokens, normalize, and project to class logits."""
    p = _scope(p)
    return linear(head_features(p, h, pooling), p.child("fc"))


def stitch_forward(p, x):
    """Affine map between the meta width and the student width."""
    return linear(x, p)
