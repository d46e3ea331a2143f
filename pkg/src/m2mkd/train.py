"""Training phases: meta pretraining, incubation, assembly fine-tune, module-to-module
distillation, end-to-end training, whole-model distillation, few-shot adaptation.

Every phase is deterministic given its config seed. Parameter trees are dicts
of Tensors; phases that train a tree update its Tensors in place and also
return it.
"""

from __future__ import annotations

import math
import statistics
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import assembly, nn
from .errors import (
    BadArgs,
    DataEmpty,
    InsufficientSamples,
    KExceedsClasses,
    MissingGrad,
    NonFiniteLoss,
    NonFiniteValue,
)
from .losses import KL_DIRECTIONS, cross_entropy, kd_loss
from .tensor import Tensor, backward, no_grad


@dataclass(frozen=True)
class DistillConfig:
    """Recipe for one training phase."""

    alpha: float = 0.5
    tau: float = 1.0
    kl_direction: str = "teacher_as_target"
    epochs: int = 10
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 0.0
    warmup_lr: float = 1e-6
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0
    keep_stitch: bool = False
    update_freq: int = 1  # accepted for recipe parity; has no effect
    cache_teacher: bool = False
    record_time: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise BadArgs(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise BadArgs(f"tau must be positive, got {self.tau}")
        if self.epochs < 0 or self.batch_size < 1:
            raise BadArgs("epochs must be >= 0 and batch_size >= 1")
        if self.kl_direction not in KL_DIRECTIONS:
            raise BadArgs(f"kl_direction must be one of {KL_DIRECTIONS}")
        if not 0 <= self.warmup_epochs <= max(self.epochs, 0) and self.epochs > 0:
            raise BadArgs("warmup_epochs must lie in [0, epochs]")

    def with_(self, **kw):
        return replace(self, **kw)


METRIC_FIELDS = ("phase", "epoch", "split", "loss_total", "loss_ce", "loss_kd", "top1", "top5", "wall_seconds")


@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    split: str
    loss_total: float
    loss_ce: float
    loss_kd: float
    top1: float
    top5: float
    wall_seconds: float = 0.0

    def row(self):
        return [self.phase, str(self.epoch), self.split] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[3:]]


def write_metrics(rows, path):
    from .data import atomic_write

    lines = [",".join(METRIC_FIELDS)]
    for r in rows:
        lines.append(",".join(r.row()))
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def read_metrics(path):
    import csv

    with open(path, newline="") as f:
        out = []
        for d in csv.DictReader(f):
            out.append(
                MetricsRecord(
                    d["phase"], int(d["epoch"]), d["split"], *(float(d[k]) for k in METRIC_FIELDS[3:])
                )
            )
        return out


def derive_seed(base, *keys):
    """Deterministic child seed from a base seed and int/str keys."""
    ints = [int(base)] + [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam with decoupled weight decay over a dict of Tensors."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {name: {"step": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)} for name, p in params.items()}

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGrad(f"no gradient for trainable parameter {name!r}")
            s = self.state[name]
            s["step"] += 1
            t = s["step"]
            g = p.grad
            s["m"] = self.beta1 * s["m"] + (1.0 - self.beta1) * g
            s["v"] = self.beta2 * s["v"] + (1.0 - self.beta2) * g * g
            m_hat = s["m"] / (1.0 - self.beta1**t)
            v_hat = s["v"] / (1.0 - self.beta2**t)
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def lr_schedule(t, cfg):
    """Learning rate at training progress ``t`` in [0, 1].

    Linear warmup from ``warmup_lr`` to ``lr`` over the warmup fraction, then
    cosine decay to ``min_lr`` at t = 1.
    """
    t = min(max(t, 0.0), 1.0)
    warm = cfg.warmup_epochs / cfg.epochs if cfg.epochs else 0.0
    if warm > 0 and t < warm:
        return cfg.warmup_lr + (cfg.lr - cfg.warmup_lr) * t / warm
    if warm >= 1.0:
        return cfg.lr
    progress = (t - warm) / (1.0 - warm)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- evaluation


def topk_hits(logits, labels, k):
    """Per-sample bool: true label among the k largest logits, ties to lower index."""
    order = np.argsort(-np.asarray(logits), axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def evaluate(forward, data, ks=(1, 5), batch_size=256):
    """Top-k accuracies (fractions) of ``forward`` on ``data``."""
    if max(ks) > data.num_classes:
        raise KExceedsClasses(f"k={max(ks)} exceeds {data.num_classes} classes")
    logits = predict(forward, data, batch_size)
    return {k: float(topk_hits(logits, data.labels, k).mean()) for k in ks}


def predict(forward, data, batch_size=256):
    with no_grad():
        return np.concatenate(
            [forward(Tensor(data.features[i : i + batch_size])).data for i in range(0, len(data), batch_size)]
        )


def _top5(num_classes):
    return min(5, num_classes)


def _eval_record(phase, epoch, forward, data, teacher, cfg, alpha):
    logits = predict(forward, data, 256)
    with no_grad():
        ce = cross_entropy(Tensor(logits), data.labels).item()
        kd = 0.0
        if teacher is not None:
            kd = kd_loss(Tensor(logits), Tensor(predict(teacher, data)), cfg.tau, cfg.kl_direction).item()
    return MetricsRecord(
        phase,
        epoch,
        data.split,
        ce + alpha * kd,
        ce,
        kd,
        float(topk_hits(logits, data.labels, 1).mean()),
        float(topk_hits(logits, data.labels, _top5(data.num_classes)).mean()),
    )


@dataclass
class FitResult:
    rows: list
    steps: list = field(default_factory=list)  # (loss_total, loss_ce, loss_kd) per optimizer step


def fit(forward, params, train, val, cfg, phase, teacher=None, alpha=0.0, eval_init=False):
    """Minimize CE (+ alpha * KD against ``teacher``) over ``params`` in place.

    Logs one train and one val row per epoch; with ``eval_init`` a val row for
    the untouched initialization comes first as epoch 0.
    """
    if len(train) == 0:
        raise DataEmpty(f"{phase}: empty training split")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params, cfg.betas, cfg.eps, cfg.weight_decay)
    rows, steps = [], []
    clock = time.perf_counter
    t0 = clock()

    def stamp():
        return clock() - t0 if cfg.record_time else 0.0

    if eval_init:
        rec = _eval_record(phase, 0, forward, val, teacher, cfg, alpha)
        rec.wall_seconds = stamp()
        rows.append(rec)

    teacher_logits = None
    if teacher is not None and cfg.cache_teacher:
        teacher_logits = predict(teacher, train)

    n, bs = len(train), cfg.batch_size
    per_epoch = math.ceil(n / bs)
    total_steps = max(per_epoch * cfg.epochs, 1)
    k5 = _top5(train.num_classes)
    step = 0
    good = {name: p.data.copy() for name, p in params.items()}
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        hits1 = hits5 = 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            xb, yb = Tensor(train.features[idx]), train.labels[idx]
            try:
                z = forward(xb)
                ce = cross_entropy(z, yb)
                if teacher is not None:
                    if teacher_logits is not None:
                        zt = Tensor(teacher_logits[idx])
                    else:
                        with no_grad():
                            zt = teacher(xb)
                    kd = kd_loss(z, zt, cfg.tau, cfg.kl_direction)
                    total = ce + kd * alpha
                    kd_val = kd.item()
                else:
                    total, kd_val = ce, 0.0
                backward(total, retain_graph=False)
            except NonFiniteValue as exc:
                raise NonFiniteLoss(f"{phase}: epoch {epoch}: {exc}", last_good=good) from exc
            # these parameters just produced a finite loss; keep them for a rescue save
            for name, p in params.items():
                np.copyto(good[name], p.data)
            opt.step(lr_schedule(step / total_steps, cfg))
            opt.zero_grad()
            step += 1
            b = len(idx)
            vals = (total.item(), ce.item(), kd_val)
            steps.append(vals)
            sums += b * np.asarray(vals)
            hits1 += int(topk_hits(z.data, yb, 1).sum())
            hits5 += int(topk_hits(z.data, yb, k5).sum())
        avg = sums / n
        rows.append(MetricsRecord(phase, epoch, train.split, *avg, hits1 / n, hits5 / n, stamp()))
        try:
            rec = _eval_record(phase, epoch, forward, val, teacher, cfg, alpha)
        except NonFiniteValue as exc:
            raise NonFiniteLoss(f"{phase}: epoch {epoch} (validation): {exc}", last_good=good) from exc
        rec.wall_seconds = stamp()
        rows.append(rec)
    return FitResult(rows, steps)


# ---------------------------------------------------------------- helpers


def trainable(tree):
    for t in tree.values():
        t.requires_grad = True
    return tree


def frozen(tree):
    return {n: Tensor(t.data) for n, t in tree.items()}


def arrays(tree):
    return {n: t.data for n, t in tree.items()}


def tensors(tree, requires_grad=False):
    return {n: Tensor(np.array(a, dtype=np.float64), requires_grad) for n, a in tree.items()}


def model_fn(spec, params):
    return lambda x: assembly.model_forward(spec, params, x)


# ---------------------------------------------------------------- preparation phases


def train_meta(spec, train, val, cfg):
    """Pretrain the small meta model end to end. Returns (params, FitResult)."""
    if spec.depth != spec.n_modules:
        raise BadArgs("meta depth must equal the number of modules")
    params = assembly.init_model(spec, derive_seed(cfg.seed, "init"))
    result = fit(model_fn(spec, params), params, train, val, cfg, "pretrain-meta")
    return params, result


def incubate_module(meta_spec, meta_params, slot, module_spec, module, train, val, cfg, phase=None):
    """Train ``module`` plugged into the frozen meta model with CE only."""
    hybrid = assembly.build_hybrid(meta_spec, meta_params, slot, module, module_spec, "student")
    result = fit(hybrid, hybrid.trainable(), train, val, cfg, phase or f"incubate.{slot}")
    return hybrid.plug, result


def _incubate_job(args):
    meta_spec, meta_arrays, slot, spec, module_arrays, train, val, cfg, phase = args
    module, result = incubate_module(
        meta_spec, tensors(meta_arrays), slot, spec, tensors(module_arrays, True), train, val, cfg, phase
    )
    return arrays(module), result


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, jobs))


def incubate_teacher(meta_spec, meta_params, teacher_spec, train, val, cfg, jobs=1):
    """Incubate every teacher module independently; returns (modules, results)."""
    teacher = assembly.init_model(teacher_spec, derive_seed(cfg.seed, "teacher-init"))
    work = [
        (
            meta_spec,
            arrays(meta_params),
            i,
            teacher_spec,
            arrays(module),
            train,
            val,
            cfg.with_(seed=derive_seed(cfg.seed, "incubate", i)),
            f"incubate-teacher.{i}",
        )
        for i, module in enumerate(assembly.split_model(teacher, teacher_spec))
    ]
    out = _run_jobs(_incubate_job, work, jobs)
    return [tensors(m) for m, _ in out], [r for _, r in out]


def finetune_assembled(spec, modules, train, val, cfg):
    """Assemble incubated modules into one model and fine-tune all of it."""
    params = trainable(tensors(arrays(assembly.assemble(modules, spec)), True))
    result = fit(model_fn(spec, params), params, train, val, cfg, "finetune-teacher")
    return params, result


# ---------------------------------------------------------------- module-to-module distillation


def init_student_modules(student_spec, meta_spec, seed):
    """Randomly initialized student split into modules with stitches to the meta width."""
    student = assembly.init_model(student_spec, derive_seed(seed, "student-init"))
    modules = assembly.split_model(student, student_spec)
    slices = assembly.module_slices(student_spec, stitched=True)
    stitched = []
    for sl, module in zip(slices, modules):
        if student_spec.d_model != meta_spec.d_model:
            rng = np.random.default_rng(derive_seed(seed, "stitch", sl.index))
            module = {**module, **assembly.init_stitches(student_spec, sl, meta_spec.d_model, rng)}
        stitched.append(module)
    return stitched


@dataclass
class PairResult:
    index: int
    module: dict
    fit: FitResult
    kd_init: float
    kd_final: float


def distill_pair(index, meta_spec, meta_params, teacher_spec, teacher_params, student_spec, module, train, val, cfg):
    """One teaching pair: student hybrid learns CE + alpha * KD against the teacher hybrid."""
    teacher_modules = assembly.split_model(teacher_params, teacher_spec)
    t_hybrid = assembly.build_hybrid(meta_spec, meta_params, index, teacher_modules[index], teacher_spec, "teacher")
    s_hybrid = assembly.build_hybrid(meta_spec, meta_params, index, module, student_spec, "student")
    result = fit(
        s_hybrid,
        s_hybrid.trainable(),
        train,
        val,
        cfg,
        f"m2mkd.{index}",
        teacher=t_hybrid,
        alpha=cfg.alpha,
        eval_init=True,
    )
    vals = [r for r in result.rows if r.split == val.split]
    return PairResult(index, s_hybrid.plug, result, vals[0].loss_kd, vals[-1].loss_kd)


def _pair_job(args):
    index, meta_spec, meta, teacher_spec, teacher, student_spec, module, train, val, cfg = args
    r = distill_pair(
        index, meta_spec, tensors(meta), teacher_spec, tensors(teacher), student_spec, tensors(module, True), train, val, cfg
    )
    r.module = arrays(r.module)
    return r


def pair_config(cfg, index):
    return cfg.with_(seed=derive_seed(cfg.seed, "pair", index))


def run_m2mkd(meta_spec, meta_params, teacher_spec, teacher_params, student_spec, student_modules, train, val, cfg, jobs=1):
    """Distill every teaching pair; pairs share no mutable state.

    Each pair's shuffling seed is derived from (cfg.seed, pair index), so the
    result is the same for any ``jobs``.
    """
    if len(student_modules) != meta_spec.n_modules or teacher_spec.n_modules != meta_spec.n_modules:
        raise BadArgs("teacher, student and meta must have the same number of modules")
    work = [
        (
            i,
            meta_spec,
            arrays(meta_params),
            teacher_spec,
            arrays(teacher_params),
            student_spec,
            arrays(m),
            train,
            val,
            pair_config(cfg, i),
        )
        for i, m in enumerate(student_modules)
    ]
    results = _run_jobs(_pair_job, work, jobs)
    for r in results:
        r.module = tensors(r.module)
    return results


def run_incubation_modules(meta_spec, meta_params, student_spec, student_modules, train, val, cfg, jobs=1):
    """Deep-incubation baseline for the student: each stitched module trained CE-only in the meta model."""
    work = [
        (
            meta_spec,
            arrays(meta_params),
            i,
            student_spec,
            arrays(m),
            train,
            val,
            pair_config(cfg, i),
            f"incubate-student.{i}",
        )
        for i, m in enumerate(student_modules)
    ]
    out = _run_jobs(_incubate_job, work, jobs)
    return [tensors(m) for m, _ in out], [r for _, r in out]


# ---------------------------------------------------------------- end to end


def run_e2e(spec, params, train, val, cfg, phase="train-e2e"):
    """Train the whole student; the first logged row evaluates the initialization."""
    params = trainable(params)
    result = fit(model_fn(spec, params), params, train, val, cfg, phase, eval_init=True)
    return params, result


def run_kd_baseline(teacher_spec, teacher_params, spec, params, train, val, cfg, phase="kd-baseline"):
    """Whole-model distillation: CE + alpha * KD on final logits of full models."""
    teacher = frozen(teacher_params)
    params = trainable(params)
    result = fit(
        model_fn(spec, params),
        params,
        train,
        val,
        cfg,
        phase,
        teacher=model_fn(teacher_spec, teacher),
        alpha=cfg.alpha,
        eval_init=True,
    )
    return params, result


# ---------------------------------------------------------------- few-shot


@dataclass
class FewshotResult:
    shots: int
    ways: int
    accuracies: list  # (seed, top1) per seed

    @property
    def mean(self):
        return statistics.fmean(a for _, a in self.accuracies)

    @property
    def stdev(self):
        accs = [a for _, a in self.accuracies]
        return statistics.stdev(accs) if len(accs) > 1 else 0.0


def fewshot_adapt(spec, params, shots, ways, pool, seeds, cfg, queries=None):
    """Train a fresh ``ways``-class classifier on frozen features, once per seed.

    Each episode draws ``ways`` classes from ``pool``, ``shots`` support samples
    per class, and evaluates on the remaining samples of those classes (at most
    ``queries`` per class). Backbone tensors are never modified.
    """
    if ways > pool.num_classes:
        raise InsufficientSamples(f"{ways}-way episodes need {ways} classes, pool has {pool.num_classes}")
    counts = pool.class_counts
    if (counts < shots + 1).sum() > pool.num_classes - ways:
        raise InsufficientSamples(f"{shots}-shot episodes need {shots + 1} samples in {ways} classes")
    backbone = frozen(params)
    d = spec.d_model
    accuracies = []
    for seed in seeds:
        rng = np.random.default_rng(derive_seed(seed, "fewshot", shots, ways))
        eligible = np.flatnonzero(counts >= shots + 1)
        classes = np.sort(rng.choice(eligible, size=ways, replace=False))
        support, query, y_s, y_q = [], [], [], []
        for new, c in enumerate(classes):
            idx = rng.permutation(np.flatnonzero(pool.labels == c))
            q = idx[shots:] if queries is None else idx[shots : shots + queries]
            support.append(idx[:shots])
            query.append(q)
            y_s.append(np.full(shots, new))
            y_q.append(np.full(len(q), new))
        with no_grad():
            f_s = assembly.model_features(spec, backbone, Tensor(pool.features[np.concatenate(support)])).data
            f_q = assembly.model_features(spec, backbone, Tensor(pool.features[np.concatenate(query)])).data
        y_s, y_q = np.concatenate(y_s), np.concatenate(y_q)
        head = nn.init_params(nn.linear_shapes(d, ways, "fc"), rng)
        feats_train = _Features(f_s, y_s, ways, "support")
        fit(lambda x: nn.linear(x, nn.Scope(head, "fc")), head, feats_train, feats_train, cfg.with_(seed=int(rng.integers(2**31))), "fewshot")
        logits = f_q @ head["fc.w"].data + head["fc.b"].data
        accuracies.append((seed, float(topk_hits(logits, y_q, 1).mean())))
    return FewshotResult(shots, ways, accuracies)


class _Features:
    """Minimal dataset view over precomputed features."""

    def __init__(self, features, labels, num_classes, split):
        self.features, self.labels, self.num_classes, self.split = features, labels, num_classes, split

    def __len__(self):
        return len(self.labels)


def config_dict(cfg):
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


CONFIG_FIELDS = tuple(f.name for f in fields(DistillConfig))
