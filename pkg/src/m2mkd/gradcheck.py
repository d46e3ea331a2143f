"""Central-difference gradient checking."""

import numpy as np

from .errors import GradCheckError, NonFiniteValue
from .tensor import Tensor, backward, no_grad


def grad_check(f, x, h=1e-6, tol=None):
    """Largest relative gap between the analytic and central-difference gradient.

    ``f`` maps a Tensor to a scalar Tensor. The relative error per coordinate is
    ``|a - c| / max(|a|, |c|, 1e-12)``. If ``tol`` is given and exceeded,
    GradCheckError is raised.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f(x).item()
            flat[i] = orig - h
            minus = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NonFiniteValue("gradient check produced non-finite values")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    err = float((np.abs(analytic - numeric) / denom).max()) if x.size else 0.0
    if tol is not None and err > tol:
        raise GradCheckError(f"relative gradient error {err:.3e} exceeds {tol:.1e}")
    return err


# ---------------------------------------------------------------- suite


def _suite_cases():
    from . import losses, nn
    from . import tensor as T

    cases = {}

    def case(name, shape, make):
        cases[name] = (shape, make)

    # random output weights keep every coordinate's gradient generic
    def fixed(op, out_shape):
        def make(rng):
            w = rng.standard_normal(out_shape)
            return lambda x: (op(x) * w).sum()

        return make

    # primitives
    case("matmul.left", (4, 5), lambda r: (lambda b, w: lambda x: ((x @ b) * w).sum())(r.standard_normal((5, 3)), r.standard_normal((4, 3))))
    case("matmul.right", (5, 3), lambda r: (lambda a, w: lambda x: ((a @ x) * w).sum())(r.standard_normal((4, 5)), r.standard_normal((4, 3))))
    case("matmul.batched", (2, 3, 4), lambda r: (lambda b, w: lambda x: ((x @ b) * w).sum())(r.standard_normal((4, 4)), r.standard_normal((2, 3, 4))))
    case("add.broadcast", (6,), lambda r: (lambda a, w: lambda x: ((a + x) * w).sum())(r.standard_normal((4, 6)), r.standard_normal((4, 6))))
    case("mul", (4, 6), lambda r: (lambda a, w: lambda x: ((a * x) * w).sum())(r.standard_normal((4, 6)), r.standard_normal((4, 6))))
    case("div", (4, 6), lambda r: (lambda a, w: lambda x: ((a / (x * x + 1.0)) * w).sum())(r.standard_normal((4, 6)), r.standard_normal((4, 6))))
    case("gelu", (8, 8), fixed(T.gelu, (8, 8)))
    case("layernorm.x", (4, 8), lambda r: (lambda g, b, w: lambda x: (T.layernorm(x, g, b) * w).sum())(r.standard_normal(8), r.standard_normal(8), r.standard_normal((4, 8))))
    case("layernorm.scale", (8,), lambda r: (lambda a, b, w: lambda g: (T.layernorm(a, g, b) * w).sum())(r.standard_normal((4, 8)), r.standard_normal(8), r.standard_normal((4, 8))))
    case("layernorm.shift", (8,), lambda r: (lambda a, g, w: lambda b: (T.layernorm(a, g, b) * w).sum())(r.standard_normal((4, 8)), r.standard_normal(8), r.standard_normal((4, 8))))
    case("softmax", (4, 8), fixed(T.softmax, (4, 8)))
    case("log_softmax", (4, 8), fixed(T.log_softmax, (4, 8)))
    case("masked_softmax", (4, 8), lambda r: (lambda m, w: lambda x: (T.masked_softmax(x, m) * w).sum())(nn.topk_mask(r.standard_normal((4, 8)), 3), r.standard_normal((4, 8))))
    case("mean.axis", (4, 8), fixed(lambda x: T.mean(x, axis=1), (4,)))
    case("sum.axis", (4, 8), fixed(lambda x: T.sum_(x, axis=0, keepdims=True), (1, 8)))
    case("reshape", (4, 6), fixed(lambda x: T.reshape(x, (3, 8)), (3, 8)))
    case("transpose", (2, 3, 4), fixed(lambda x: T.transpose(x, (2, 0, 1)), (4, 2, 3)))
    case("getitem", (4, 6), fixed(lambda x: x[:, 1:4], (4, 3)))
    case("concat", (3, 4), lambda r: (lambda a, w: lambda x: (T.concat([a, x, x], axis=0) * w).sum())(r.standard_normal((2, 4)), r.standard_normal((8, 4))))

    # losses
    def ce_linear(r):
        labels = r.integers(0, 4, size=3)
        feats = r.standard_normal((3, 5))
        return lambda w: losses.cross_entropy(T.Tensor(feats) @ w, labels)

    case("cross_entropy.linear", (5, 4), ce_linear)
    for direction in losses.KL_DIRECTIONS:
        case(
            f"kd_loss.{direction}",
            (4, 6),
            lambda r, d=direction: (lambda zt: lambda z: losses.kd_loss(z, zt, 2.0, d))(r.standard_normal((4, 6)) * 2),
        )

    def total_loss(r):
        zt = r.standard_normal((4, 6)) * 2
        labels = r.integers(0, 6, size=4)
        return lambda z: losses.cross_entropy(z, labels) + losses.kd_loss(z, zt, 1.0) * 0.5

    case("total_loss", (4, 6), total_loss)

    # blocks
    def block_case(spec, target):
        def make(r):
            shapes = nn.block_shapes(spec)
            params = {k: T.Tensor(r.standard_normal(v) * 0.5) for k, v in shapes.items()}
            x0 = r.standard_normal((2, 3, spec.d_model))
            w = r.standard_normal((2, 3, spec.d_model))
            routing = None
            if spec.is_moe:
                z = T.layernorm(x0 + nn.attention(spec, nn.Scope(params, "attn"), T.layernorm(x0, params["ln1.g"], params["ln1.b"])), params["ln2.g"], params["ln2.b"])
                routing = nn.topk_mask((z @ params["moe.gate.w"]).data, spec.top_k)

            def run(x, p):
                pp = nn.Scope(p)
                h = x + nn.attention(spec, pp.child("attn"), T.layernorm(x, p["ln1.g"], p["ln1.b"]))
                z = T.layernorm(h, p["ln2.g"], p["ln2.b"])
                if spec.is_moe:
                    return ((h + nn.moe_forward(spec, pp.child("moe"), z, routing)) * w).sum()
                return ((h + nn.ffn(z, pp.child("mlp"))) * w).sum()

            if target == "x":
                return lambda x: run(x, params)
            return lambda t: run(T.Tensor(x0), {**params, target: t})

        return make

    dense = nn.BlockSpec(4, 2, 6)
    moe = nn.BlockSpec(4, 2, 6, n_experts=3, top_k=2)
    case("block.dense.x", (2, 3, 4), block_case(dense, "x"))
    case("block.dense.attn_q", (4, 4), block_case(dense, "attn.q.w"))
    case("moe.x", (2, 3, 4), block_case(moe, "x"))
    case("moe.gate", (4, 3), block_case(moe, "moe.gate.w"))
    case("moe.expert", (4, 6), block_case(moe, "moe.experts.1.fc1.w"))
    return cases


def gradient_suite(seeds=range(10), h=1e-6):
    """(case, seed, max relative error) for every primitive and composite loss.

    Inputs are drawn away from non-differentiable points: MoE cases hold the
    top-k routing fixed at the unperturbed input.
    """
    results = []
    for name, (shape, make) in _suite_cases().items():
        for seed in seeds:
            rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
            f = make(rng)
            x = Tensor(rng.standard_normal(shape))
            results.append((name, seed, grad_check(f, x, h)))
    return results
