import json
import os
from pathlib import Path

import numpy as np
import pytest

from m2mkd import nn
from m2mkd.assembly import stitch_pair_count
from m2mkd.errors import BadArgs, BadK, MissingParameter, ShapeMismatch
from m2mkd.tensor import Tensor, backward

GOLDEN = Path(__file__).parent / "golden" / "forward.json"


def params_for(shapes, seed=0, scale=None):
    rng = np.random.default_rng(seed)
    if scale is None:
        return nn.init_params(shapes, rng)
    return {k: Tensor(rng.standard_normal(v) * scale, True) for k, v in shapes.items()}


DENSE = nn.BlockSpec(8, 2, 16)
MOE = nn.BlockSpec(8, 2, 16, n_experts=4, top_k=2)


def test_blockspec_validation():
    with pytest.raises(BadArgs):
        nn.BlockSpec(10, 3, 8)
    with pytest.raises(BadK):
        nn.BlockSpec(8, 2, 8, n_experts=2, top_k=3)


def test_residual_identity_with_zero_output_weights():
    p = params_for(nn.block_shapes(DENSE), scale=0.5)
    for name in ("attn.proj.w", "attn.proj.b", "mlp.fc2.w", "mlp.fc2.b"):
        p[name] = Tensor(np.zeros(p[name].shape))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 8)))
    assert np.array_equal(nn.block_forward(DENSE, p, x).data, x.data)


def test_degenerate_single_token():
    p = params_for(nn.block_shapes(DENSE))
    assert nn.block_forward(DENSE, p, Tensor(np.ones((1, 1, 8)))).shape == (1, 1, 8)


def test_block_rejects_wrong_width():
    p = params_for(nn.block_shapes(DENSE))
    with pytest.raises(ShapeMismatch):
        nn.block_forward(DENSE, p, Tensor(np.ones((1, 2, 6))))


def test_missing_parameter_is_named():
    p = params_for(nn.block_shapes(DENSE))
    del p["attn.q.w"]
    with pytest.raises(MissingParameter, match="attn.q.w"):
        nn.block_forward(DENSE, p, Tensor(np.ones((1, 2, 8))))


def test_gate_example():
    # W = I so the scores are x itself
    w = Tensor(np.eye(4))
    out = nn.gate_topk(w, Tensor([2.0, 1.0, 0.5, -1.0]), 2).data
    e = np.exp(1.0)
    assert np.allclose(out, [e / (e + 1), 1 / (e + 1), 0, 0], atol=1e-15)
    assert out[:2] == pytest.approx([0.7311, 0.2689], abs=5e-5)


def test_gate_k_equals_n_is_dense_softmax():
    x = np.array([0.3, -1.2, 2.0])
    out = nn.gate_topk(Tensor(np.eye(3)), Tensor(x), 3).data
    assert np.allclose(out, np.exp(x) / np.exp(x).sum(), atol=1e-15)


def test_gate_k_one_is_onehot():
    out = nn.gate_topk(Tensor(np.eye(3)), Tensor([0.1, 0.9, 0.3]), 1).data
    assert np.array_equal(out, [0.0, 1.0, 0.0])


def test_gate_ties_go_to_lowest_index():
    out = nn.gate_topk(Tensor(np.eye(4)), Tensor([1.0, 2.0, 1.0, 1.0]), 2).data
    assert np.array_equal(out > 0, [True, True, False, False])


def test_gate_bad_k():
    with pytest.raises(BadK):
        nn.gate_topk(Tensor(np.eye(3)), Tensor([1.0, 2.0, 3.0]), 0)


@pytest.mark.parametrize("seed", range(10))
def test_gate_support_is_exactly_k(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((8, 6)))
    weights = nn.gate_topk(w, Tensor(rng.standard_normal((100, 8))), 3).data
    assert ((weights > 0).sum(-1) == 3).all()
    assert np.allclose(weights.sum(-1), 1.0, atol=1e-12, rtol=0)


def _expert_params(spec, fc1, fc2, gate):
    p = {"gate.w": Tensor(gate)}
    for e in range(spec.n_experts):
        p[f"experts.{e}.fc1.w"] = Tensor(fc1[e])
        p[f"experts.{e}.fc1.b"] = Tensor(np.zeros(spec.d_ff))
        p[f"experts.{e}.fc2.w"] = Tensor(fc2[e])
        p[f"experts.{e}.fc2.b"] = Tensor(np.zeros(spec.d_model))
    return p


def test_moe_identity_experts():
    # fc2 subtracts the GELU-free part so each expert returns x:
    # use fc1 = 0 (gelu(0)=0) and bias fc2 = 0, then add x via zero experts + residual
    spec = nn.BlockSpec(4, 1, 4, n_experts=3, top_k=2)
    x = np.random.default_rng(0).standard_normal((2, 5, 4))
    zero = [np.zeros((4, 4))] * 3
    p = _expert_params(spec, zero, zero, np.random.default_rng(1).standard_normal((4, 3)))
    for e in range(3):
        p[f"experts.{e}.fc2.b"] = Tensor(np.full(4, 7.0))
    # every expert outputs the constant 7, so any convex gate mix is 7
    assert np.allclose(nn.moe_forward(spec, p, Tensor(x)).data, 7.0, atol=1e-14)


def test_moe_single_expert_equals_ffn():
    spec = nn.BlockSpec(4, 1, 6, n_experts=1, top_k=1)
    p = params_for(nn.block_shapes(spec), seed=3)
    x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4)))
    y = nn.moe_forward(spec, nn.Scope(p, "moe"), x).data
    assert np.array_equal(y, nn.ffn(x, nn.Scope(p, "moe.experts.0")).data)


def test_moe_equal_gates_average_linear_experts():
    # GELU(h) for large positive h is h, so fc1 = big*I, fc2 = s/big * I is a linear scaling
    spec = nn.BlockSpec(2, 1, 2, n_experts=2, top_k=2)
    big = 1e3
    fc1 = [np.eye(2) * big] * 2
    fc2 = [np.eye(2) * 2 / big, np.eye(2) * 4 / big]
    p = _expert_params(spec, fc1, fc2, np.zeros((2, 2)))
    x = np.array([[[1.0, 2.0], [3.0, 0.5]]])
    assert np.allclose(nn.moe_forward(spec, p, Tensor(x)).data, 3.0 * x, rtol=1e-12)


def test_moe_permutation_equivariance():
    p = params_for(nn.block_shapes(MOE), seed=5, scale=0.5)
    x = Tensor(np.random.default_rng(6).standard_normal((2, 3, 8)))
    base = nn.moe_forward(MOE, nn.Scope(p, "moe"), x).data
    perm = [2, 0, 3, 1]
    q = dict(p)
    q["moe.gate.w"] = Tensor(p["moe.gate.w"].data[:, perm])
    for new, old in enumerate(perm):
        for leaf in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"):
            q[f"moe.experts.{new}.{leaf}"] = p[f"moe.experts.{old}.{leaf}"]
    assert np.allclose(nn.moe_forward(MOE, nn.Scope(q, "moe"), x).data, base, atol=1e-12, rtol=0)


def test_unselected_expert_gets_exactly_zero_grad():
    spec = nn.BlockSpec(4, 1, 6, n_experts=3, top_k=1)
    p = params_for({k: v for k, v in nn.block_shapes(spec).items() if k.startswith("moe.")}, seed=1)
    # expert 2's gate column is hugely negative: never selected
    g = p["moe.gate.w"].data
    g[:, 2] = -1e3
    x = Tensor(np.abs(np.random.default_rng(2).standard_normal((3, 4, 4))))
    backward(nn.moe_forward(spec, nn.Scope(p, "moe"), x).sum())
    for leaf in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"):
        grad = p[f"moe.experts.2.{leaf}"].grad
        assert grad is not None and not grad.any()
    assert p["moe.experts.0.fc1.w"].grad.any() or p["moe.experts.1.fc1.w"].grad.any()


def test_stitch_identity_passes_core_through():
    p = {"w": Tensor(np.eye(5)), "b": Tensor(np.zeros(5))}
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 5)))
    assert np.array_equal(nn.stitch_forward(p, x).data, x.data)


def test_stitch_pair_counts():
    assert stitch_pair_count(1280, 384) == (983_040, 1280 + 384)
    assert stitch_pair_count(1024, 768) == (1_572_864, 1024 + 768)


def test_embed_zero_input_zero_pos():
    shapes = nn.embed_shapes(8, 4, 6, "mean")
    p = params_for(shapes)
    p["embed.pos"] = Tensor(np.zeros(shapes["embed.pos"]))
    p["embed.proj.b"] = Tensor(np.zeros(6))
    out = nn.embed_forward(nn.Scope(p, "embed"), np.zeros((3, 8)), 4)
    assert out.shape == (3, 4, 6) and not out.data.any()


def test_embed_rejects_bad_width():
    p = params_for(nn.embed_shapes(8, 4, 6, "mean"))
    with pytest.raises(ShapeMismatch):
        nn.embed_forward(nn.Scope(p, "embed"), np.zeros((3, 7)), 4)


def test_head_identity_setup():
    # norm with unit scale is undone by picking a 2-d feature already normalized
    p = {"norm.g": Tensor(np.ones(2)), "norm.b": Tensor(np.zeros(2)),
         "fc.w": Tensor(np.eye(2)), "fc.b": Tensor(np.zeros(2))}
    h = Tensor(np.array([[[1.0, -1.0]], [[-1.0, 1.0]]]))
    logits = nn.head_forward(p, h).data
    pooled = h.data.mean(1)
    assert np.allclose(logits, pooled, atol=1e-5)


def golden_values():
    out = {}
    p = params_for(nn.block_shapes(DENSE), seed=11)
    x = Tensor(np.random.default_rng(12).standard_normal((1, 3, 8)))
    out["meta_layer"] = nn.block_forward(DENSE, p, x).data.ravel().tolist()
    p = params_for(nn.block_shapes(MOE), seed=13)
    out["moe_block"] = nn.block_forward(MOE, p, x).data.ravel().tolist()
    shapes = {**nn.embed_shapes(8, 4, 6, "mean"), **nn.head_shapes(6, 3)}
    p = params_for(shapes, seed=14)
    feats = np.random.default_rng(15).standard_normal((2, 8))
    h = nn.embed_forward(nn.Scope(p, "embed"), feats, 4)
    out["embed_head"] = nn.head_forward(nn.Scope(p, "head"), h).data.ravel().tolist()
    return out


def test_golden_forward():
    current = golden_values()
    if os.environ.get("M2MKD_REGEN_GOLDEN"):
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(json.dumps(current, indent=1) + "\n")
    recorded = json.loads(GOLDEN.read_text())
    for key, values in recorded.items():
        assert np.allclose(current[key], values, rtol=1e-12, atol=1e-14), key
