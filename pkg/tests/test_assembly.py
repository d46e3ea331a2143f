from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2mkd import assembly as A
from m2mkd.data import encode_checkpoint
from m2mkd.errors import BadArgs, ModuleCountMismatch, PartitionMismatch, SlotOutOfRange, UnresolvedSpec, WidthMismatch
from m2mkd.losses import cross_entropy
from m2mkd.nn import BlockSpec, linear_shapes
from m2mkd.tensor import Tensor, backward
from m2mkd.train import init_student_modules


def spec(kind="monolithic", depth=4, d=8, L=2, experts=0, k=0, C=3, d_in=8, tokens=2, **kw):
    return A.ModelSpec(kind, depth, BlockSpec(d, 2, 2 * d, experts, k), C, L, d_in, tokens, **kw)


META = spec("meta", depth=2, L=2)
TEACHER = spec(depth=4, L=2)
STUDENT = spec("moe_student", depth=4, d=6, L=2, experts=3, k=2)
X = np.random.default_rng(0).standard_normal((3, 8))


@pytest.mark.parametrize(
    "n,L,expected",
    [(32, 10, [4, 3, 3, 3, 3, 3, 3, 3, 3, 4]), (24, 4, [6, 6, 6, 6]), (12, 4, [3, 3, 3, 3]), (5, 5, [1] * 5),
     (7, 4, [2, 2, 1, 2]), (9, 6, [2, 2, 1, 1, 1, 2])],
)
def test_partition_layers(n, L, expected):
    assert list(A.partition_layers(n, L).segment_lengths) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n))))
def test_partition_invariants(nl):
    n, L = nl
    seg = A.partition_layers(n, L).segment_lengths
    assert sum(seg) == n and len(seg) == L
    r = n % L
    front, back = (r + 1) // 2, r // 2
    extra = [1 if i < front or i >= L - back else 0 for i in range(L)]
    assert list(seg) == [n // L + e for e in extra]


def test_partition_bad_args():
    with pytest.raises(BadArgs):
        A.partition_layers(3, 4)
    with pytest.raises(BadArgs):
        A.partition_layers(3, 0)


def test_split_compose_is_bit_exact():
    params = A.init_model(TEACHER, 1)
    modules = A.split_model(params, TEACHER)
    assert [len({n.split(".")[1] for n in m if n.startswith("layers.")}) for m in modules] == [2, 2]
    x = Tensor(X)
    for sl, m in zip(A.module_slices(TEACHER), modules):
        x = A.module_forward(TEACHER, m, sl, x)
    assert np.array_equal(x.data, A.model_forward(TEACHER, params, Tensor(X)).data)


def test_embedding_first_head_last():
    modules = A.split_model(A.init_model(TEACHER, 1), TEACHER)
    assert any(n.startswith("embed.") for n in modules[0]) and not any(n.startswith("head.") for n in modules[0])
    assert any(n.startswith("head.") for n in modules[1]) and not any(n.startswith("embed.") for n in modules[1])


def test_published_groupings():
    deit_l = spec(depth=24, L=4)
    assert [sl.stop - sl.start for sl in A.module_slices(deit_l)] == [6, 6, 6, 6]
    vmoe = spec("moe_student", depth=12, L=4, experts=8, k=2)
    assert [sl.stop - sl.start for sl in A.module_slices(vmoe)] == [3, 3, 3, 3]


def test_split_rejects_foreign_partition():
    params = A.init_model(TEACHER, 1)
    with pytest.raises(PartitionMismatch):
        A.split_model(params, TEACHER, A.partition_layers(5, 2))
    with pytest.raises(PartitionMismatch):
        A.split_model({n: t for n, t in params.items() if n != "head.fc.w"}, TEACHER)


def test_assemble_inverts_split():
    params = A.init_model(TEACHER, 2)
    assert A.assemble(A.split_model(params, TEACHER), TEACHER).keys() == params.keys()
    with pytest.raises(PartitionMismatch):
        A.assemble(A.split_model(params, TEACHER)[:1], TEACHER)


def test_hybrid_with_own_meta_layer_is_identity():
    meta = A.init_model(META, 3)
    ref = A.model_forward(META, meta, Tensor(X)).data
    for slot, m in enumerate(A.split_model(meta, META)):
        h = A.build_hybrid(META, meta, slot, m, META, "teacher")
        assert np.array_equal(h(Tensor(X)).data, ref)


def test_teacher_hybrid_is_fully_frozen():
    meta = A.init_model(META, 3)
    teacher = A.split_model(A.init_model(TEACHER, 4), TEACHER)
    h = A.build_hybrid(META, meta, 1, teacher[1], TEACHER, "teacher")
    assert all(h.frozen_mask.values())
    out = h(Tensor(X))
    assert not out.requires_grad
    assert all(t.grad is None for t in h.parameters().values())


def test_student_hybrid_grads_only_under_plug():
    meta = A.init_model(META, 3)
    modules = init_student_modules(STUDENT, META, 0)
    h = A.build_hybrid(META, meta, 1, modules[1], STUDENT, "student")
    backward(cross_entropy(h(Tensor(X)), [0, 1, 2]))
    for name, t in h.parameters().items():
        assert (t.grad is not None) == name.startswith("plug."), name
        assert h.frozen_mask[name] == name.startswith("meta.")
    assert any(t.grad.any() for t in h.trainable().values())


def test_hybrid_errors():
    meta = A.init_model(META, 3)
    plain = A.split_model(A.init_model(STUDENT, 1), STUDENT)
    with pytest.raises(WidthMismatch):
        A.build_hybrid(META, meta, 0, plain[0], STUDENT, "student")
    modules = init_student_modules(STUDENT, META, 0)
    with pytest.raises(SlotOutOfRange):
        A.build_hybrid(META, meta, 2, modules[0], STUDENT, "student")
    with pytest.raises(WidthMismatch):
        A.build_hybrid(META, meta, 0, modules[0], STUDENT, "teacher")


def test_stitched_module_positions():
    slices = A.module_slices(spec(depth=6, L=3), stitched=True)
    assert [(s.position, s.has_pre_stitch, s.has_post_stitch) for s in slices] == [
        ("first", False, True), ("middle", True, True), ("last", True, False)]


def test_stitch_shapes_match_widths():
    modules = init_student_modules(STUDENT, META, 0)
    assert modules[0]["stitch.0.post.w"].shape == (6, 8)
    assert modules[1]["stitch.1.pre.w"].shape == (8, 6)
    assert "stitch.0.pre.w" not in modules[0] and "stitch.1.post.w" not in modules[1]


def test_transplant_exact_match_loads_everything():
    src = A.init_model(STUDENT, 5)
    dst = A.init_model(STUDENT, 6)
    out = A.transplant(dst, STUDENT, A.split_model(src, STUDENT))
    assert out.report.skipped == [] and len(out.report.loaded) == len(src)
    assert encode_checkpoint(out.params) == encode_checkpoint(src)


def test_transplant_discards_stitches():
    modules = init_student_modules(STUDENT, META, 0)
    out = A.transplant(A.init_model(STUDENT, 9), STUDENT, modules)
    assert not any(n.startswith("stitch.") for n in out.params)
    assert {why for _, why in out.report.skipped} == {"stitch discarded"}
    assert out.report.offered == sum(len(m) for m in modules)
    assert {n: t.shape for n, t in out.params.items()} == A.param_shapes(STUDENT)


def test_transplant_skips_mismatched_head():
    other = replace(STUDENT, num_classes=5)
    src = A.split_model(A.init_model(other, 1), other)
    dst = A.init_model(STUDENT, 2)
    out = A.transplant(dst, STUDENT, src)
    skipped = {n for n, _ in out.report.skipped}
    assert skipped == {"head.fc.w", "head.fc.b"}
    assert np.array_equal(out.params["head.fc.w"].data, dst["head.fc.w"].data)
    assert len(out.report.loaded) + len(out.report.skipped) == out.report.offered


def test_transplant_keep_stitch_runs_and_counts():
    modules = init_student_modules(STUDENT, META, 0)
    out = A.transplant(A.init_model(STUDENT, 9), STUDENT, modules, keep_stitch=True)
    assert out.spec.stitch_width == 8
    assert sum(n.startswith("stitch.") for n in out.params) == 4
    assert A.count_params(out.spec) == A.count_params(STUDENT) + sum(A.stitch_pair_count(8, 6))
    assert A.model_forward(out.spec, out.params, Tensor(X)).shape == (3, 3)


def test_transplant_module_count():
    with pytest.raises(ModuleCountMismatch):
        A.transplant(A.init_model(STUDENT, 1), STUDENT, [{}])


def test_count_single_affine():
    assert A._count(linear_shapes(2, 3, "fc")) == 9


def test_count_is_additive():
    for s in (TEACHER, STUDENT, spec(depth=7, L=3)):
        assert A.count_params(s) == sum(A.count_params(s, module=i) for i in range(s.n_modules))
        assert A.count_params(s) == sum(t.size for t in A.init_model(s, 0).values())


def test_count_rejects_unresolved():
    with pytest.raises(UnresolvedSpec):
        A.count_params({"depth": 12})


def test_hybrid_count_matches_built_hybrid():
    meta = A.init_model(META, 3)
    modules = init_student_modules(STUDENT, META, 0)
    h = A.build_hybrid(META, meta, 1, modules[1], STUDENT, "student")
    used = sum(t.size for n, t in h.meta.items() if not n.startswith("layers.1.") and not n.startswith("head."))
    used += sum(t.size for t in h.plug.values())
    assert A.count_hybrid(META, STUDENT, 1, True) == used
