"""Built-in verification: gradient oracles, parameter-count identities, and
shared-vs-unrolled block equivalence.  Used by the `selftest` subcommand and
reused by the test suite."""

import numpy as np

from . import model as model_mod
from . import ops, train


def rel_error(a, b):
    """Norm-based relative error between two arrays."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _projection_loss(r):
    """Tensor-to-scalar map f(t) = <t, r>; its gradient w.r.t. t is r."""

    def f(t):
        return float(np.sum(np.asarray(t, np.float64) * r))

    return f


def conv_grad_error(seed, dtype=np.float32, eps=1e-3):
    """Max relative error of conv2d_backward vs finite differences over
    input, weight, and bias on one random instance."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5)).astype(dtype)
    w = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    p = ops.Conv2dParams(w, b, stride=1, padding=1)
    out = ops.conv2d_forward(x, p)
    r = rng.standard_normal(out.shape)
    gx, gw, gb = ops.conv2d_backward(x, p, r.astype(dtype))

    x64, w64, b64 = (a.astype(np.float64) for a in (x, w, b))
    loss = _projection_loss(r)
    fd_x = ops.finite_difference_grad(
        lambda t: loss(ops.conv2d_forward(t, ops.Conv2dParams(w64, b64, 1, 1))), x64, eps
    )
    fd_w = ops.finite_difference_grad(
        lambda t: loss(ops.conv2d_forward(x64, ops.Conv2dParams(t, b64, 1, 1))), w64, eps
    )
    fd_b = ops.finite_difference_grad(
        lambda t: loss(
            ops.conv2d_forward(x64, ops.Conv2dParams(w64, t.reshape(-1), 1, 1))
        ),
        b64.reshape(1, -1, 1, 1),
        eps,
    ).reshape(-1)
    return max(rel_error(gx, fd_x), rel_error(gw, fd_w), rel_error(gb, fd_b))


def tconv_grad_error(seed, dtype=np.float32, eps=1e-3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 3)).astype(dtype)
    w = rng.standard_normal((2, 3, 4, 4)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    p = ops.TransposedConv2dParams(w, b, stride=2, padding=1)
    out = ops.transposed_conv2d_forward(x, p)
    r = rng.standard_normal(out.shape)
    gx, gw, gb = ops.transposed_conv2d_backward(x, p, r.astype(dtype))

    x64, w64, b64 = (a.astype(np.float64) for a in (x, w, b))
    loss = _projection_loss(r)
    fd_x = ops.finite_difference_grad(
        lambda t: loss(
            ops.transposed_conv2d_forward(t, ops.TransposedConv2dParams(w64, b64, 2, 1))
        ),
        x64,
        eps,
    )
    fd_w = ops.finite_difference_grad(
        lambda t: loss(
            ops.transposed_conv2d_forward(x64, ops.TransposedConv2dParams(t, b64, 2, 1))
        ),
        w64,
        eps,
    )
    fd_b = ops.finite_difference_grad(
        lambda t: loss(
            ops.transposed_conv2d_forward(
                x64, ops.TransposedConv2dParams(w64, t.reshape(-1), 2, 1)
            )
        ),
        b64.reshape(1, -1, 1, 1),
        eps,
    ).reshape(-1)
    return max(rel_error(gx, fd_x), rel_error(gw, fd_w), rel_error(gb, fd_b))


def prelu_grad_error(seed, dtype=np.float32, eps=1e-3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4)).astype(dtype)
    # keep every element away from the kink so finite differences are valid
    x = np.where(np.abs(x) < 10 * eps, 0.5, x).astype(dtype)
    slope = rng.uniform(0.1, 0.9, 3).astype(dtype)
    p = ops.PReluParams(slope)
    r = rng.standard_normal(x.shape)
    gx, gs = ops.prelu_backward(x, p, r.astype(dtype))

    x64 = x.astype(np.float64)
    s64 = slope.astype(np.float64)
    loss = _projection_loss(r)
    fd_x = ops.finite_difference_grad(
        lambda t: loss(ops.prelu_forward(t, ops.PReluParams(s64))), x64, eps
    )
    fd_s = ops.finite_difference_grad(
        lambda t: loss(ops.prelu_forward(x64, ops.PReluParams(t.reshape(-1)))),
        s64.reshape(1, -1, 1, 1),
        eps,
    ).reshape(-1)
    return max(rel_error(gx, fd_x), rel_error(gs, fd_s))


def mse_grad_error(seed, dtype=np.float32, eps=1e-3):
    rng = np.random.default_rng(seed)
    pred = rng.standard_normal((4, 1, 5, 5)).astype(dtype)
    target = rng.standard_normal((4, 1, 5, 5)).astype(dtype)
    _, grad = train.mse_loss(pred, target)
    fd = ops.finite_difference_grad(
        lambda t: train.mse_loss(t, target.astype(np.float64))[0],
        pred.astype(np.float64),
        eps,
    )
    return rel_error(grad, fd)


def tiny_model(seed=0, channels=2, cycles=2, scale=2, dtype=np.float32):
    cfg = model_mod.ModelConfig(scale=scale, channels=channels, cycles=cycles)
    m = model_mod.build_drfn(cfg, seed=seed, dtype=dtype)
    # break the symmetric init (zero biases, uniform slopes) so every
    # parameter direction is exercised
    rng = np.random.default_rng(seed + 1)
    for name, arr in m.registry.items():
        if name.endswith(".bias") or name.endswith(".slope"):
            arr += rng.uniform(0.05, 0.3, arr.shape).astype(dtype)
    return m


def model_grad_errors(m, x, eps=1e-6):
    """Whole-network check of d sum(hr) / d theta for every registry tensor
    against central finite differences run on a float64 clone.  Returns
    {name: relative error}.

    eps defaults to 1e-6: perturbing a parameter by 1e-3 propagates far
    enough through a deep net to flip PReLU branches, which poisons the
    difference quotient; the float64 clone keeps round-off harmless at the
    smaller step."""
    hr, tape = model_mod.forward(m, x)
    grads = model_mod.backward(m, tape, np.ones_like(hr))

    m64 = clone_model(m, np.float64)
    x64 = x.astype(np.float64)

    def loss():
        out, _ = model_mod.forward(m64, x64)
        return float(out.sum())

    errors = {}
    for name, arr in m64.registry.items():
        fd = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss()
            flat[i] = orig - eps
            fm = loss()
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2 * eps)
        errors[name] = rel_error(grads[name], fd)
    return errors


def clone_model(m, dtype=None):
    dtype = dtype or next(iter(m.registry.values())).dtype
    new = model_mod.build_drfn(m.cfg, seed=0, dtype=dtype)
    for name, arr in m.registry.items():
        new.registry[name][...] = arr.astype(dtype)
    return new


def unrolled_block_forward(blk, x):
    """Oracle: apply the block's layer functions cycle by cycle on freshly
    copied (untied) parameter sets."""
    for _ in range(blk.cycles):
        conv_a = ops.Conv2dParams(blk.conv_a.weight.copy(), blk.conv_a.bias.copy(), 1, 1)
        conv_b = ops.Conv2dParams(blk.conv_b.weight.copy(), blk.conv_b.bias.copy(), 1, 1)
        conv_c = ops.Conv2dParams(blk.conv_c.weight.copy(), blk.conv_c.bias.copy(), 1, 1)
        pa = ops.PReluParams(blk.prelu_a.slope.copy())
        pb = ops.PReluParams(blk.prelu_b.slope.copy())
        y = ops.conv2d_forward(x, conv_a)
        y = ops.prelu_forward(y, pa)
        y = ops.conv2d_forward(y, conv_b)
        y = ops.prelu_forward(y, pb)
        y = ops.conv2d_forward(y, conv_c)
        x = y + x
    return x


def block_param_savings(channels=64, kernel=3, convs=3, cycles=5):
    """Parameters an unrolled block would add beyond the shared one."""
    per_conv = kernel * kernel * channels * channels + channels
    return per_conv * convs * (cycles - 1)


def run_all(n_instances=5):
    """Fast check battery for the selftest command.  Returns a list of
    (name, ok, detail) rows."""
    results = []

    def check(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    for op_name, fn in [
        ("conv2d_grad", conv_grad_error),
        ("transposed_conv2d_grad", tconv_grad_error),
        ("prelu_grad", prelu_grad_error),
        ("mse_grad", mse_grad_error),
    ]:
        worst = max(fn(seed) for seed in range(n_instances))
        check(op_name, worst <= 1e-3, f"max rel err {worst:.2e}")

    m = tiny_model(seed=3)
    x = np.random.default_rng(4).uniform(0, 1, (1, 1, 4, 4)).astype(np.float32)
    errs = model_grad_errors(m, x)
    worst_name = max(errs, key=errs.get)
    check(
        "whole_network_grad",
        max(errs.values()) <= 1e-3,
        f"worst {errs[worst_name]:.2e} at {worst_name}",
    )

    counts = []
    for cycles in (1, 3, 5, 10):
        cfg = model_mod.ModelConfig(scale=4, channels=64, cycles=cycles)
        counts.append(model_mod.param_count(model_mod.build_drfn(cfg, seed=0)))
    check("param_count_cycle_invariant", len(set(counts)) == 1, f"counts {counts}")

    savings = block_param_savings()
    check("recurrent_savings_443136", savings == 443136, f"computed {savings}")

    blk_model = tiny_model(seed=7, channels=3, cycles=4)
    xb = np.random.default_rng(8).standard_normal((1, 3, 6, 6)).astype(np.float32)
    shared, _ = model_mod._block_forward(blk_model.block1, xb)
    unrolled = unrolled_block_forward(blk_model.block1, xb)
    diff = float(np.max(np.abs(shared - unrolled)))
    check("unrolled_equivalence", diff <= 1e-5, f"max abs diff {diff:.2e}")

    return results
