import math
import statistics

import numpy as np
import pytest

from m2mkd import assembly as A
from m2mkd import train as T
from m2mkd.data import Dataset, encode_checkpoint, gen_synthetic, tree_digest
from m2mkd.errors import BadArgs, InsufficientSamples, KExceedsClasses, MissingGrad, NonFiniteLoss
from m2mkd.nn import BlockSpec
from m2mkd.tensor import Tensor, backward


def spec(kind, depth, d, experts=0, k=0, L=2, C=8):
    return A.ModelSpec(kind, depth, BlockSpec(d, 2, 2 * d, experts, k), C, L, 16, 4)


META = spec("meta", 2, 8)
TEACHER = spec("monolithic", 4, 8)
STUDENT = spec("moe_student", 4, 6, 3, 2)
CFG = T.DistillConfig(epochs=2, lr=3e-3, batch_size=32, seed=7)


@pytest.fixture(scope="module")
def task():
    return gen_synthetic(0, 8, 16, 20, 0.2)


@pytest.fixture(scope="module")
def meta(task):
    params, _ = T.train_meta(META, *task, CFG)
    return params


@pytest.fixture(scope="module")
def teacher(task, meta):
    modules, _ = T.incubate_teacher(META, meta, TEACHER, *task, CFG)
    params, _ = T.finetune_assembled(TEACHER, modules, *task, CFG)
    return params


# ---------------------------------------------------------------- optimizer and schedule


def test_adamw_zero_lr_is_noop():
    p = {"w": Tensor(np.array([1.0, -2.0]), True)}
    p["w"].grad = np.array([0.3, 0.1])
    T.AdamW(p, weight_decay=0.1).step(0.0)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_zero_grad_is_pure_decay():
    p = {"w": Tensor(np.array([1.0, -2.0]), True)}
    p["w"].grad = np.zeros(2)
    T.AdamW(p, weight_decay=0.1).step(0.5)
    assert np.allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.5 * 0.1), rtol=0, atol=1e-15)


def test_adamw_scalar_three_steps():
    b1, b2, eps, wd, lr = 0.9, 0.999, 1e-8, 0.01, 0.1
    p = {"w": Tensor(np.array(1.5), True)}
    opt = T.AdamW(p, (b1, b2), eps, wd)
    w, m, v = 1.5, 0.0, 0.0
    for t, g in enumerate([0.5, -1.0, 2.0], start=1):
        p["w"].grad = np.array(g)
        opt.step(lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p["w"].data == pytest.approx(w, rel=1e-14)


def test_adamw_missing_grad():
    with pytest.raises(MissingGrad):
        T.AdamW({"w": Tensor(np.ones(2), True)}).step(0.1)


def test_lr_schedule_endpoints():
    cfg = T.DistillConfig(epochs=10, warmup_epochs=2, lr=1e-3, min_lr=1e-5)
    assert T.lr_schedule(0.0, cfg) == pytest.approx(1e-6)
    assert T.lr_schedule(0.2, cfg) == pytest.approx(1e-3)
    assert T.lr_schedule(0.1, cfg) == pytest.approx((1e-6 + 1e-3) / 2)
    assert T.lr_schedule(1.0, cfg) == pytest.approx(1e-5)
    assert T.lr_schedule(0.6, cfg) == pytest.approx(1e-5 + 0.5 * (1e-3 - 1e-5))


def test_config_validation():
    with pytest.raises(BadArgs):
        T.DistillConfig(alpha=1.5)
    with pytest.raises(BadArgs):
        T.DistillConfig(tau=0.0)
    with pytest.raises(BadArgs):
        T.DistillConfig(epochs=-1)


# ---------------------------------------------------------------- evaluation


def test_evaluate_onehot_is_perfect():
    ds = Dataset(np.zeros((16, 1)), np.arange(16) % 8, 8)
    acc = T.evaluate(lambda x: Tensor(np.eye(8)[ds.labels[: x.shape[0]]]), ds, batch_size=16)
    assert acc == {1: 1.0, 5: 1.0}


def test_evaluate_constant_logits_oracle():
    labels = np.array([0, 1, 2, 3, 4, 5, 6, 7, 0, 7])
    ds = Dataset(np.zeros((10, 1)), labels, 8)
    acc = T.evaluate(lambda x: Tensor(np.zeros((x.shape[0], 8))), ds)
    # lowest-index tie-break: top-k predicts classes 0..k-1
    assert acc[1] == np.mean([y < 1 for y in labels])
    assert acc[5] == np.mean([y < 5 for y in labels])
    assert acc[1] <= acc[5]


def test_evaluate_k_exceeds_classes():
    ds = Dataset(np.zeros((2, 1)), [0, 1], 3)
    with pytest.raises(KExceedsClasses):
        T.evaluate(lambda x: Tensor(np.zeros((2, 3))), ds)


# ---------------------------------------------------------------- phases


def test_train_meta_zero_epochs_returns_init(task):
    params, result = T.train_meta(META, *task, CFG.with_(epochs=0))
    init = A.init_model(META, T.derive_seed(CFG.seed, "init"))
    assert encode_checkpoint(params) == encode_checkpoint(init)
    assert result.rows == []


def test_train_meta_rows_and_learning():
    tr, va = gen_synthetic(1, 8, 16, 40, 0.2)
    cfg = T.DistillConfig(epochs=30, lr=3e-3, seed=1)
    _, result = T.train_meta(META, tr, va, cfg)
    assert len(result.rows) == 30 * 2
    assert [r.split for r in result.rows[:2]] == ["train", "val"]
    assert result.rows[-1].top1 > 3 * 0.125


def test_incubation_freezes_meta_and_lowers_ce(task, meta):
    before = tree_digest(meta)
    module = T.init_student_modules(STUDENT, META, 0)[1]
    untouched = encode_checkpoint(module)
    _, result = T.incubate_module(META, meta, 1, STUDENT, module, *task, CFG.with_(epochs=4))
    assert tree_digest(meta) == before
    assert encode_checkpoint(module) != untouched
    ce = [r.loss_ce for r in result.rows if r.split == "train"]
    assert ce[-1] < ce[0]


def test_incubation_zero_epochs_leaves_module(task, meta):
    module = T.init_student_modules(STUDENT, META, 0)[0]
    blob = encode_checkpoint(module)
    T.incubate_module(META, meta, 0, STUDENT, module, *task, CFG.with_(epochs=0))
    assert encode_checkpoint(module) == blob


def test_finetune_zero_epochs_is_assembly(task, meta):
    modules, _ = T.incubate_teacher(META, meta, TEACHER, *task, CFG.with_(epochs=1))
    params, _ = T.finetune_assembled(TEACHER, modules, *task, CFG.with_(epochs=0))
    x = Tensor(task[1].features)
    for sl, m in zip(A.module_slices(TEACHER), modules):
        x = A.module_forward(TEACHER, m, sl, x)
    assert np.array_equal(A.model_forward(TEACHER, params, Tensor(task[1].features)).data, x.data)


def test_finetune_does_not_hurt(task, meta):
    modules, _ = T.incubate_teacher(META, meta, TEACHER, *task, CFG)
    raw = A.assemble(modules, TEACHER)
    tuned, _ = T.finetune_assembled(TEACHER, modules, *task, CFG.with_(epochs=6))
    acc = lambda p: T.evaluate(T.model_fn(TEACHER, p), task[1])[1]
    assert acc(tuned) >= acc(raw)


def test_m2mkd_contracts(task, meta, teacher):
    meta_before, teacher_before = tree_digest(meta), tree_digest(teacher)
    modules = T.init_student_modules(STUDENT, META, 0)
    results = T.run_m2mkd(META, meta, TEACHER, teacher, STUDENT, modules, *task, CFG)
    assert tree_digest(meta) == meta_before and tree_digest(teacher) == teacher_before
    for r in results:
        for total, ce, kd in r.fit.steps:
            assert abs(total - (ce + CFG.alpha * kd)) <= 1e-12
        assert all(r.loss_kd > 0 for r in r.fit.rows)
        assert r.kd_final < r.kd_init


def test_m2mkd_alpha_zero_is_incubation(task, meta, teacher):
    cfg = CFG.with_(alpha=0.0)
    a = T.init_student_modules(STUDENT, META, 0)
    b = T.init_student_modules(STUDENT, META, 0)
    pair = T.distill_pair(1, META, meta, TEACHER, teacher, STUDENT, a[1], *task, cfg)
    inc, _ = T.incubate_module(META, meta, 1, STUDENT, b[1], *task, cfg)
    assert encode_checkpoint(pair.module) == encode_checkpoint(inc)


def test_pairs_jobs_invariant(task, meta, teacher):
    out = []
    for jobs in (1, 2):
        modules = T.init_student_modules(STUDENT, META, 0)
        results = T.run_m2mkd(META, meta, TEACHER, teacher, STUDENT, modules, *task, CFG.with_(epochs=1), jobs=jobs)
        out.append([encode_checkpoint(r.module) for r in results])
    assert out[0] == out[1]


def test_e2e_zero_epochs_only_evaluates(task):
    params = A.init_model(STUDENT, 0)
    blob = encode_checkpoint(params)
    _, result = T.run_e2e(STUDENT, params, *task, CFG.with_(epochs=0))
    assert len(result.rows) == 1 and result.rows[0].epoch == 0
    assert encode_checkpoint(params) == blob


def test_e2e_final_row_has_accuracies(task):
    _, result = T.run_e2e(STUDENT, A.init_model(STUDENT, 0), *task, CFG)
    last = result.rows[-1]
    assert last.split == "val" and 0 <= last.top1 <= last.top5 <= 1


def test_kd_baseline_alpha_zero_matches_e2e(task, teacher):
    a, ra = T.run_kd_baseline(TEACHER, teacher, STUDENT, A.init_model(STUDENT, 3), *task, CFG.with_(alpha=0.0))
    b, rb = T.run_e2e(STUDENT, A.init_model(STUDENT, 3), *task, CFG)
    assert encode_checkpoint(a) == encode_checkpoint(b)
    assert [x.loss_ce for x in ra.rows] == [x.loss_ce for x in rb.rows]
    assert [x.top1 for x in ra.rows] == [x.top1 for x in rb.rows]


def test_kd_baseline_self_teacher_starts_at_zero(task, teacher):
    copy = {n: Tensor(t.data.copy()) for n, t in teacher.items()}
    _, result = T.run_kd_baseline(TEACHER, teacher, TEACHER, copy, *task, CFG.with_(epochs=1))
    assert result.rows[0].loss_kd <= 1e-12
    assert all(r.loss_kd >= 0 for r in result.rows)


def test_fit_is_deterministic(task, tmp_path):
    paths = []
    for i in range(2):
        _, result = T.run_e2e(STUDENT, A.init_model(STUDENT, 0), *task, CFG)
        paths.append(tmp_path / f"m{i}.csv")
        T.write_metrics(result.rows, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    head = paths[0].read_text().splitlines()[0]
    assert head == "phase,epoch,split,loss_total,loss_ce,loss_kd,top1,top5,wall_seconds"
    rows = T.read_metrics(paths[0])
    assert all(r.top1 <= r.top5 and r.loss_total >= 0 for r in rows)


def test_non_finite_loss_keeps_last_good(task):
    params = {"w": Tensor(np.full((16, 8), 1e306), True)}
    with pytest.raises(NonFiniteLoss) as info:
        T.fit(lambda x: (x @ params["w"]) * 1e10, params, *task, CFG, "boom")
    assert np.array_equal(info.value.last_good["w"], np.full((16, 8), 1e306))


# ---------------------------------------------------------------- few-shot


@pytest.fixture(scope="module")
def pool():
    tr, va = gen_synthetic(9, 10, 16, 12, 0.2)
    return Dataset(np.concatenate([tr.features, va.features]), np.concatenate([tr.labels, va.labels]), 10)


def test_fewshot_shape_and_freeze(pool, teacher):
    before = tree_digest(teacher)
    res = T.fewshot_adapt(TEACHER, teacher, 2, 8, pool, range(5), CFG.with_(epochs=5))
    assert tree_digest(teacher) == before
    assert [s for s, _ in res.accuracies] == [0, 1, 2, 3, 4]
    accs = [a for _, a in res.accuracies]
    assert res.mean == pytest.approx(statistics.fmean(accs))
    assert res.stdev == pytest.approx(statistics.stdev(accs))


def test_fewshot_insufficient(pool, teacher):
    with pytest.raises(InsufficientSamples):
        T.fewshot_adapt(TEACHER, teacher, 1, 11, pool, range(1), CFG)
    with pytest.raises(InsufficientSamples):
        T.fewshot_adapt(TEACHER, teacher, 12, 8, pool, range(1), CFG)
