"""Model structure: specs, partitions into modules, hybrids, transplant, counts.

A model's parameters live in one flat dict keyed by dot paths:

    embed.*            token embedding (owned by the first module)
    layers.<j>.*       transformer block j (global index)
    head.*             pooling norm and classifier (owned by the last module)
    stitch.<i>.pre.*   affine map d_meta -> d_model in front of module i
    stitch.<i>.post.*  affine map d_model -> d_meta behind module i

Module subtrees keep the global names, so distilled modules can be copied back
into a full model by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .errors import (
    BadArgs,
    ModuleCountMismatch,
    PartitionMismatch,
    SlotOutOfRange,
    UnresolvedSpec,
    WidthMismatch,
)
from .tensor import Tensor

KINDS = ("monolithic", "moe_student", "meta")
POOLINGS = ("mean", "cls")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    depth: int
    block: nn.BlockSpec
    num_classes: int
    n_modules: int
    d_in: int
    tokens: int
    pooling: str = "mean"
    stitch_width: int | None = None  # meta width of stitches kept between modules

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadArgs(f"unknown model kind {self.kind!r}")
        if self.pooling not in POOLINGS:
            raise BadArgs(f"unknown pooling {self.pooling!r}")
        if not 1 <= self.n_modules <= self.depth:
            raise BadArgs(f"need 1 <= n_modules <= depth, got {self.n_modules}, {self.depth}")
        if self.kind == "meta" and self.depth != self.n_modules:
            raise BadArgs("a meta model has exactly one layer per module")
        if self.kind == "moe_student" and not self.block.is_moe:
            raise BadArgs("moe_student needs n_experts > 0")
        if self.kind != "moe_student" and self.block.is_moe:
            raise BadArgs(f"{self.kind} models use dense feed-forward layers")
        if self.num_classes < 1 or self.tokens < 1 or self.d_in % self.tokens:
            raise BadArgs(f"d_in={self.d_in} must split evenly into {self.tokens} tokens")

    @property
    def d_model(self):
        return self.block.d_model

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        block = nn.BlockSpec(
            d.pop("d_model"), d.pop("n_heads"), d.pop("d_ff"), d.pop("n_experts", 0), d.pop("top_k", 0)
        )
        return cls(block=block, **d)

    def to_dict(self):
        out = {
            "kind": self.kind,
            "depth": self.depth,
            "d_model": self.block.d_model,
            "n_heads": self.block.n_heads,
            "d_ff": self.block.d_ff,
            "n_experts": self.block.n_experts,
            "top_k": self.block.top_k,
            "num_classes": self.num_classes,
            "n_modules": self.n_modules,
            "d_in": self.d_in,
            "tokens": self.tokens,
            "pooling": self.pooling,
        }
        if self.stitch_width is not None:
            out["stitch_width"] = self.stitch_width
        return out


# ---------------------------------------------------------------- partition


@dataclass(frozen=True)
class Partition:
    segment_lengths: tuple

    @property
    def n_layers(self):
        return sum(self.segment_lengths)

    def __len__(self):
        return len(self.segment_lengths)

    def bounds(self):
        edges = np.concatenate([[0], np.cumsum(self.segment_lengths)]).astype(int)
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def partition_layers(n, L):
    """Split ``n`` layers into ``L`` contiguous segments.

    Every segment gets ``n // L`` layers; the remainder is handed out one layer
    at a time, alternating first segment, last segment, first, ... so that
    32 layers into 10 modules gives [4, 3, ..., 3, 4].
    """
    if not (isinstance(n, (int, np.integer)) and isinstance(L, (int, np.integer))) or not 1 <= L <= n:
        raise BadArgs(f"need integers 1 <= L <= n, got n={n}, L={L}")
    lengths = [n // L] * L
    lo, hi = 0, L - 1
    for r in range(n % L):
        if r % 2 == 0:
            lengths[lo] += 1
            lo += 1
        else:
            lengths[hi] += 1
            hi -= 1
    return Partition(tuple(lengths))


@dataclass(frozen=True)
class ModuleSlice:
    index: int
    start: int
    stop: int
    n_modules: int
    stitched: bool = False

    @property
    def first(self):
        return self.index == 0

    @property
    def last(self):
        return self.index == self.n_modules - 1

    @property
    def position(self):
        if self.first:
            return "first"
        return "last" if self.last else "middle"

    @property
    def has_pre_stitch(self):
        return self.stitched and not self.first

    @property
    def has_post_stitch(self):
        return self.stitched and not self.last


def module_slices(spec, partition=None, stitched=None):
    partition = partition or partition_layers(spec.depth, spec.n_modules)
    if partition.n_layers != spec.depth:
        raise PartitionMismatch(f"partition covers {partition.n_layers} layers, model has {spec.depth}")
    if stitched is None:
        stitched = spec.stitch_width is not None
    L = len(partition)
    return [ModuleSlice(i, a, b, L, stitched) for i, (a, b) in enumerate(partition.bounds())]


# ---------------------------------------------------------------- shapes and init


def module_shapes(spec, sl, stitch_width=None):
    """Parameter shapes owned by one module, stitches included when present."""
    d = spec.d_model
    width = stitch_width if stitch_width is not None else spec.stitch_width
    shapes = {}
    if sl.first:
        shapes.update(nn.embed_shapes(spec.d_in, spec.tokens, d, spec.pooling))
    if sl.has_pre_stitch:
        shapes.update(nn.linear_shapes(width, d, f"stitch.{sl.index}.pre"))
    for j in range(sl.start, sl.stop):
        shapes.update(nn.block_shapes(spec.block, f"layers.{j}"))
    if sl.last:
        shapes.update(nn.head_shapes(d, spec.num_classes))
    if sl.has_post_stitch:
        shapes.update(nn.linear_shapes(d, width, f"stitch.{sl.index}.post"))
    return shapes


def param_shapes(spec, partition=None):
    shapes = {}
    for sl in module_slices(spec, partition):
        shapes.update(module_shapes(spec, sl))
    return shapes


def init_model(spec, rng, requires_grad=True):
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return nn.init_params(param_shapes(spec), rng, requires_grad)


def init_stitches(spec, sl, stitch_width, rng, requires_grad=True):
    """Fresh stitch parameters turning module ``sl`` of ``spec`` into a stitched module."""
    shapes = {
        k: v
        for k, v in module_shapes(spec, replace(sl, stitched=True), stitch_width).items()
        if k.startswith("stitch.")
    }
    return nn.init_params(shapes, rng, requires_grad)


# ---------------------------------------------------------------- forward


def module_forward(spec, params, sl, x):
    """Run one module: [embed | pre-stitch] -> its blocks -> [head | post-stitch]."""
    p = nn.Scope(params)
    if sl.first:
        x = nn.embed_forward(p.child("embed"), x, spec.tokens, spec.pooling)
    elif sl.has_pre_stitch:
        x = nn.stitch_forward(p.child(f"stitch.{sl.index}.pre"), x)
    for j in range(sl.start, sl.stop):
        x = nn.block_forward(spec.block, p.child(f"layers.{j}"), x)
    if sl.last:
        x = nn.head_forward(p.child("head"), x, spec.pooling)
    elif sl.has_post_stitch:
        x = nn.stitch_forward(p.child(f"stitch.{sl.index}.post"), x)
    return x


def model_forward(spec, params, x):
    for sl in module_slices(spec):
        x = module_forward(spec, params, sl, x)
    return x


def model_features(spec, params, x):
    """Pooled, normalized features feeding the classifier layer."""
    p = nn.Scope(params)
    slices = module_slices(spec)
    for sl in slices[:-1]:
        x = module_forward(spec, params, sl, x)
    last = slices[-1]
    if last.first:
        x = nn.embed_forward(p.child("embed"), x, spec.tokens, spec.pooling)
    elif last.has_pre_stitch:
        x = nn.stitch_forward(p.child(f"stitch.{last.index}.pre"), x)
    for j in range(last.start, last.stop):
        x = nn.block_forward(spec.block, p.child(f"layers.{j}"), x)
    return nn.head_features(p.child("head"), x, spec.pooling)


# ---------------------------------------------------------------- split


def split_model(params, spec, partition=None):
    """Module subtrees (global names kept) covering every parameter exactly once."""
    slices = module_slices(spec, partition)
    modules = []
    for sl in slices:
        names = module_shapes(spec, sl)
        missing = [n for n in names if n not in params]
        if missing:
            raise PartitionMismatch(f"module {sl.index} lacks {missing[:3]}")
        modules.append({n: params[n] for n in names})
    covered = sum(len(m) for m in modules)
    if covered != len(params):
        raise PartitionMismatch(f"partition covers {covered} of {len(params)} tensors")
    return modules


def assemble(modules, spec):
    """Inverse of split_model: merge module subtrees into one model tree."""
    merged = {}
    for m in modules:
        merged.update(m)
    expected = param_shapes(spec)
    if set(merged) != set(expected):
        extra = sorted(set(merged) - set(expected))[:3]
        missing = sorted(set(expected) - set(merged))[:3]
        raise PartitionMismatch(f"assembled tree mismatch: extra {extra}, missing {missing}")
    for name, shape in expected.items():
        if merged[name].shape != shape:
            raise PartitionMismatch(f"{name}: shape {merged[name].shape} != {shape}")
    return {name: merged[name] for name in expected}


# ---------------------------------------------------------------- hybrids


def _is_stitched(plug, index):
    return any(n.startswith(f"stitch.{index}.") for n in plug)


@dataclass
class HybridAssembly:
    """Meta model with the layer at ``slot`` replaced by a plugged module."""

    meta_spec: ModelSpec
    meta: dict
    slot: int
    plug_spec: ModelSpec
    plug_slice: ModuleSlice
    plug: dict
    plug_kind: str
    frozen_mask: dict = field(default_factory=dict)

    def forward(self, x):
        for sl in module_slices(self.meta_spec):
            if sl.index == self.slot:
                x = module_forward(self.plug_spec, self.plug, self.plug_slice, x)
            else:
                x = module_forward(self.meta_spec, self.meta, sl, x)
        return x

    __call__ = forward

    def parameters(self):
        out = {f"meta.{n}": t for n, t in self.meta.items()}
        out.update({f"plug.{n}": t for n, t in self.plug.items()})
        return out

    def trainable(self):
        return {n: t for n, t in self.plug.items() if t.requires_grad}


def build_hybrid(meta_spec, meta_params, slot, plug, plug_spec, plug_kind):
    """Replace meta layer ``slot`` (0-based) with module ``slot`` of ``plug_spec``.

    Meta parameters are re-wrapped as frozen tensors sharing storage with the
    caller's arrays. A teacher plug is frozen too; a student plug keeps its own
    Tensor objects with requires_grad set, so training updates it in place.
    """
    if plug_kind not in ("teacher", "student"):
        raise BadArgs(f"plug_kind must be 'teacher' or 'student', got {plug_kind!r}")
    L = meta_spec.n_modules
    if not 0 <= slot < L:
        raise SlotOutOfRange(f"slot {slot} outside [0, {L})")
    if plug_spec.n_modules != L:
        raise WidthMismatch(f"plug model has {plug_spec.n_modules} modules, meta has {L}")
    if plug_spec.tokens != meta_spec.tokens or plug_spec.pooling != meta_spec.pooling:
        raise WidthMismatch("plug and meta disagree on token layout")
    if plug_spec.d_in != meta_spec.d_in:
        raise WidthMismatch(f"input width {plug_spec.d_in} != meta {meta_spec.d_in}")
    if slot == L - 1 and plug_spec.num_classes != meta_spec.num_classes:
        raise WidthMismatch("last-slot plug must emit the meta model's classes")

    stitched = _is_stitched(plug, slot)
    d_m, d_s = meta_spec.d_model, plug_spec.d_model
    if plug_kind == "teacher" and stitched:
        raise WidthMismatch("teacher modules are plugged without stitches")
    if not stitched and d_s != d_m and L > 1:
        raise WidthMismatch(f"plug width {d_s} != meta width {d_m}; stitches required")
    sl = module_slices(plug_spec, stitched=stitched)[slot]
    expected = module_shapes(plug_spec, sl, stitch_width=d_m if stitched else None)
    for name, shape in expected.items():
        if name not in plug:
            raise WidthMismatch(f"plug lacks {name}")
        if plug[name].shape != shape:
            raise WidthMismatch(f"{name}: shape {plug[name].shape}, expected {shape}")

    frozen_meta = {n: Tensor(t.data) for n, t in meta_params.items()}
    trainable = plug_kind == "student"
    if trainable:
        plug = dict(plug)
        for t in plug.values():
            t.requires_grad = True
    else:
        plug = {n: Tensor(t.data) for n, t in plug.items()}
    mask = {f"meta.{n}": True for n in frozen_meta}
    mask.update({f"plug.{n}": not trainable for n in plug})
    return HybridAssembly(meta_spec, frozen_meta, slot, plug_spec, sl, plug, plug_kind, mask)


# ---------------------------------------------------------------- transplant


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # (name, reason)

    @property
    def offered(self):
        return len(self.loaded) + len(self.skipped)

    def summary(self):
        lines = [f"loaded {len(self.loaded)} / offered {self.offered}, skipped {len(self.skipped)}"]
        lines += [f"  skip {name}: {why}" for name, why in self.skipped]
        return "\n".join(lines)


@dataclass
class Transplanted:
    params: dict
    spec: ModelSpec
    report: LoadReport


def transplant(student_params, student_spec, distilled, keep_stitch=False):
    """Copy distilled module tensors into a student by name.

    Stitch tensors are discarded unless ``keep_stitch``; then they stay as extra
    affine layers between modules and the returned spec records the meta width.
    Tensors whose name is unknown or whose shape differs are skipped and listed.
    """
    L = student_spec.n_modules
    if len(distilled) != L:
        raise ModuleCountMismatch(f"got {len(distilled)} distilled modules for {L} student modules")
    spec = student_spec
    if keep_stitch:
        widths = {
            t.shape[0] if name.endswith("pre.w") else t.shape[-1]
            for module in distilled
            for name, t in module.items()
            if name.startswith("stitch.") and name.endswith(".w")
        }
        if len(widths) > 1:
            raise WidthMismatch(f"inconsistent stitch widths {sorted(widths)}")
        if widths:
            spec = replace(student_spec, stitch_width=widths.pop())

    targets = param_shapes(spec)
    params = {}
    for name, shape in targets.items():
        if name in student_params:
            params[name] = Tensor(student_params[name].data.copy())
        else:
            params[name] = Tensor(np.zeros(shape))
    report = LoadReport()
    for module in distilled:
        for name, t in module.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            if name.startswith("stitch.") and not keep_stitch:
                report.skipped.append((name, "stitch discarded"))
            elif name not in targets:
                report.skipped.append((name, "not in student"))
            elif data.shape != targets[name]:
                report.skipped.append((name, f"shape {data.shape} != {targets[name]}"))
            else:
                params[name] = Tensor(data.copy())
                report.loaded.append(name)
    return Transplanted(params, spec, report)


# ---------------------------------------------------------------- counting


def _count(shapes):
    return sum(math.prod(s) for s in shapes.values())


def count_params(spec, module=None, stitch_width=None):
    """Exact parameter count of a model, or of one module when ``module`` is set.

    ``stitch_width`` counts the module as a stitched student module bridging to
    a meta model of that width.
    """
    if not isinstance(spec, ModelSpec):
        raise UnresolvedSpec(f"cannot count parameters of {type(spec).__name__}")
    if module is None:
        return _count(param_shapes(spec))
    slices = module_slices(spec, stitched=stitch_width is not None or spec.stitch_width is not None)
    return _count(module_shapes(spec, slices[module], stitch_width))


def count_split(shapes):
    """(weights, biases) split of a shape dict; biases are the ``.b`` vectors."""
    biases = sum(math.prod(s) for n, s in shapes.items() if n.endswith(".b"))
    return _count(shapes) - biases, biases


def stitch_pair_count(d_meta, d_student):
    """Weights and biases of a pre/post stitch pair."""
    shapes = {
        **nn.linear_shapes(d_meta, d_student, "pre"),
        **nn.linear_shapes(d_student, d_meta, "post"),
    }
    return count_split(shapes)


def count_hybrid(meta_spec, plug_spec, slot, stitched):
    """Parameters used by a hybrid: meta minus the replaced layer plus the plug."""
    meta_slot = count_params(meta_spec, module=slot)
    plug = count_params(plug_spec, module=slot, stitch_width=meta_spec.d_model if stitched else None)
    return count_params(meta_spec) - meta_slot + plug


def human(n):
    for unit, scale in (("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= scale:
            return f"{n / scale:.1f}{unit}"
    return str(n)


def specsheet_rows(teacher, student, meta):
    """Rows of (label, tensors, params) for the models, modules and hybrids."""
    rows = []

    def add(label, shapes):
        rows.append((label, len(shapes), _count(shapes)))

    for name, spec in (("teacher", teacher), ("student", student), ("meta", meta)):
        if spec is not None:
            add(f"{name} model", param_shapes(spec))
    if teacher is not None:
        for sl in module_slices(teacher):
            add(f"teacher module {sl.index}", module_shapes(teacher, sl))
    if student is not None:
        width = meta.d_model if meta is not None else None
        for sl in module_slices(student, stitched=width is not None):
            add(f"student module {sl.index} (stitched)", module_shapes(student, sl, width))
        if width is not None:
            w, b = stitch_pair_count(width, student.d_model)
            rows.append((f"stitch pair {width}x{student.d_model} weights", 2, w))
            rows.append((f"stitch pair {width}x{student.d_model} biases", 2, b))
            kept = replace(student, stitch_width=width)
            rows.append(("student + kept stitches", len(param_shapes(kept)), count_params(kept)))
    if meta is not None:
        for slot in range(meta.n_modules):
            if teacher is not None:
                rows.append((f"hybrid teacher slot {slot}", None, count_hybrid(meta, teacher, slot, False)))
            if student is not None:
                rows.append((f"hybrid student slot {slot}", None, count_hybrid(meta, student, slot, True)))
    return rows


def format_specsheet(rows):
    lines = [f"{'module':<40} {'tensors':>8} {'params':>14} {'size':>8}"]
    for label, tensors, n in rows:
        t = "-" if tensors is None else str(tensors)
        lines.append(f"{label:<40} {t:>8} {n:>14,d} {human(n):>8}")
    return "\n".join(lines)
