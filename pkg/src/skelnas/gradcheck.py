"""Central finite-difference verification of every differentiable path.

The checks here are deliberately independent of the backward rules they
verify: they re-run the forward closure twice per element and difference
the scalar loss.  Inputs come from :func:`spaced_values`, which keeps
values away from the relu kink and from pooling ties so the numeric
derivative stays well defined.
"""

from __future__ import annotations

import numpy as np

from . import ops as op_zoo
from . import tensor as tc

FD_STEP = 1e-4


def spaced_values(shape, rng, low=0.05, high=1.0):
    """Shuffled, well-separated values with random signs, bounded away from 0."""
    n = int(np.prod(shape))
    half = n // 2
    neg = -np.linspace(low, high, max(half, 1))[:half]
    pos = np.linspace(low + (high - low) / (2 * max(n, 1)), high, n - half)
    vals = np.concatenate([neg, pos])
    rng.shuffle(vals)
    return vals.reshape(shape)


def numeric_gradient(f, x, h=FD_STEP):
    """Elementwise central differences of the scalar ``f()`` w.r.t. ``x``.

    ``x`` is perturbed in place and restored, so ``f`` must read it fresh
    on every call.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric):
    """Max over elements of |a - n| / max(1, |a|, |n|)."""
    if analytic is None:
        analytic = np.zeros_like(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, wrt, h=FD_STEP):
    """Compare analytic and numeric gradients for each named leaf.

    ``build()`` must construct the scalar loss from the current contents
    of the leaf tensors in ``wrt`` (list of (name, Tensor) pairs).
    Returns {name: max relative error}.
    """
    loss = build()
    loss.backward()
    analytic = {}
    for name, leaf in wrt:
        analytic[name] = None if leaf.grad is None else leaf.grad.copy()
        leaf.zero_grad()
    errors = {}
    for name, leaf in wrt:
        numeric = numeric_gradient(lambda: build().item(), leaf.data, h)
        errors[name] = max_relative_error(analytic[name], numeric)
    return errors


def _projection_loss(out, proj):
    return tc.tensor_sum(tc.mul(out, proj))


def _leaf(rng, shape):
    return tc.Tensor(spaced_values(shape, rng), requires_grad=True)


def _const(rng, shape):
    return tc.Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------


def _primitive_checks(rng):
    checks = []

    x = _leaf(rng, (2, 4, 5, 5))
    w = _leaf(rng, (3, 4, 3, 3))
    proj = _const(rng, (2, 3, 5, 5))
    checks.append(
        (
            "conv2d_3x3_s1p1",
            lambda: _projection_loss(
                tc.conv2d(x, w, stride=(1, 1), padding=(1, 1)), proj
            ),
            [("input", x), ("weight", w)],
            1e-4,
        )
    )

    x2 = _leaf(rng, (2, 4, 6, 6))
    w2 = _leaf(rng, (4, 4, 3, 3))
    proj2 = _const(rng, (2, 4, 3, 3))
    checks.append(
        (
            "conv2d_3x3_s2p1",
            lambda: _projection_loss(
                tc.conv2d(x2, w2, stride=(2, 2), padding=(1, 1)), proj2
            ),
            [("input", x2), ("weight", w2)],
            1e-4,
        )
    )

    xd = _leaf(rng, (1, 3, 6, 6))
    wd = _leaf(rng, (3, 3, 3, 3))
    projd = _const(rng, (1, 3, 6, 6))
    checks.append(
        (
            "conv2d_dilated2_p2",
            lambda: _projection_loss(
                tc.conv2d(xd, wd, stride=(1, 1), padding=(2, 2), dilation=(2, 2)),
                projd,
            ),
            [("input", xd), ("weight", wd)],
            1e-4,
        )
    )

    xg = _leaf(rng, (2, 4, 5, 5))
    wg = _leaf(rng, (4, 1, 3, 3))
    projg = _const(rng, (2, 4, 5, 5))
    checks.append(
        (
            "conv2d_depthwise",
            lambda: _projection_loss(
                tc.conv2d(xg, wg, stride=(1, 1), padding=(1, 1), groups=4), projg
            ),
            [("input", xg), ("weight", wg)],
            1e-4,
        )
    )

    for mode in ("max", "average"):
        for s in (1, 2):
            xp = _leaf(rng, (2, 3, 6, 6))
            outT = tc.conv_out_len(6, 3, s, 1)
            projp = _const(rng, (2, 3, outT, outT))
            checks.append(
                (
                    f"pool2d_{mode}_s{s}",
                    (
                        lambda xp=xp, projp=projp, mode=mode, s=s: _projection_loss(
                            tc.pool2d(xp, mode, stride=(s, s)), projp
                        )
                    ),
                    [("input", xp)],
                    1e-4,
                )
            )

    for training in (True, False):
        xb = _leaf(rng, (2, 3, 4, 5))
        sc = _leaf(rng, (3,))
        sh = _leaf(rng, (3,))
        rm = np.zeros(3)
        rv = np.ones(3)
        projb = _const(rng, (2, 3, 4, 5))

        def bn_build(xb=xb, sc=sc, sh=sh, rm=rm, rv=rv, projb=projb, training=training):
            # freeze the running buffers so repeated closure calls agree
            out = tc.batchnorm2d(xb, sc, sh, rm.copy(), rv.copy(), training)
            return _projection_loss(out, projb)

        checks.append(
            (
                f"batchnorm2d_{'train' if training else 'eval'}",
                bn_build,
                [("input", xb), ("scale", sc), ("shift", sh)],
                1e-4,
            )
        )

    xr = _leaf(rng, (3, 4))
    projr = _const(rng, (3, 4))
    checks.append(
        (
            "relu",
            lambda: _projection_loss(tc.relu(xr), projr),
            [("input", xr)],
            1e-4,
        )
    )

    xs = _leaf(rng, (3, 4))
    projs = _const(rng, (3, 4))
    checks.append(
        (
            "sigmoid",
            lambda: _projection_loss(tc.sigmoid(xs), projs),
            [("input", xs)],
            1e-4,
        )
    )

    xl = _leaf(rng, (3, 7))
    wl = _leaf(rng, (4, 7))
    bl = _leaf(rng, (4,))
    projl = _const(rng, (3, 4))
    checks.append(
        (
            "linear",
            lambda: _projection_loss(tc.linear(xl, wl, bl), projl),
            [("input", xl), ("weight", wl), ("bias", bl)],
            1e-5,
        )
    )

    xa = _leaf(rng, (2, 5, 4, 4))
    proja = _const(rng, (2, 5))
    checks.append(
        (
            "global_avg_spatial",
            lambda: _projection_loss(tc.global_avg_spatial(xa), proja),
            [("input", xa)],
            1e-4,
        )
    )

    xc1 = _leaf(rng, (1, 2, 3, 3))
    xc2 = _leaf(rng, (1, 3, 3, 3))
    projc = _const(rng, (1, 5, 3, 3))
    checks.append(
        (
            "channel_concat",
            lambda: _projection_loss(tc.channel_concat([xc1, xc2]), projc),
            [("lhs", xc1), ("rhs", xc2)],
            1e-4,
        )
    )

    xsc = _leaf(rng, (2, 3, 4, 4))
    gate = _leaf(rng, (2, 3))
    projsc = _const(rng, (2, 3, 4, 4))
    checks.append(
        (
            "scale_channels",
            lambda: _projection_loss(tc.scale_channels(xsc, gate), projsc),
            [("input", xsc), ("gate", gate)],
            1e-4,
        )
    )

    xsh = _leaf(rng, (1, 2, 4, 4))
    projsh = _const(rng, (1, 2, 4, 4))
    checks.append(
        (
            "shift_spatial",
            lambda: _projection_loss(tc.shift_spatial(xsh), projsh),
            [("input", xsh)],
            1e-4,
        )
    )

    logits = _leaf(rng, (4, 6))
    labels = np.array([1, 0, 5, 3])
    checks.append(
        (
            "softmax_cross_entropy",
            lambda: tc.softmax_cross_entropy(logits, labels)[0],
            [("logits", logits)],
            1e-6,
        )
    )

    al = _leaf(rng, (5, 6))
    projal = _const(rng, (5, 6))
    checks.append(
        (
            "softmax_rows",
            lambda: _projection_loss(tc.softmax_rows(al), projal),
            [("alpha", al)],
            1e-5,
        )
    )

    wmix = _leaf(rng, (4,))
    ys = [_leaf(rng, (2, 3, 3)) for _ in range(4)]
    projm = _const(rng, (2, 3, 3))
    checks.append(
        (
            "weighted_sum",
            lambda: _projection_loss(tc.weighted_sum(wmix, ys), projm),
            [("weights", wmix)] + [(f"y{k}", y) for k, y in enumerate(ys)],
            1e-4,
        )
    )

    xe = _leaf(rng, (3, 3))
    ye = _leaf(rng, (3, 3))
    checks.append(
        (
            "elementwise_composite",
            lambda: tc.tensor_sum(
                tc.add(tc.mul(xe, ye), tc.sub(xe, tc.mul(ye, ye)))
            ),
            [("x", xe), ("y", ye)],
            1e-6,
        )
    )

    return checks


def _operator_checks(rng):
    """Every candidate operator composition, both strides."""
    checks = []
    C = 4
    for kind in op_zoo.CandidateOpKind:
        for stride in (1, 2):
            op = op_zoo.build_op(
                kind, C, stride, rng=np.random.default_rng(7), dtype=np.float64
            )
            x = _leaf(rng, (2, C, 6, 6))
            outT = 6 if stride == 1 else 3
            proj = _const(rng, (2, C, outT, outT))
            wrt = [("input", x)] + [(p.name, p.tensor) for p in op.params()]
            tol = 1e-3 if op_zoo.has_batchnorm(kind, stride) else 1e-4

            def build(op=op, x=x, proj=proj):
                return _projection_loss(op(x, train=True), proj)

            if kind is op_zoo.CandidateOpKind.Zero:
                continue  # zero output carries no gradient; covered by unit tests
            checks.append((f"op_{kind.name}_s{stride}", build, wrt, tol))
    return checks


def _mixed_op_check(rng):
    from . import supernet as sn

    C = 4
    alpha = tc.Tensor(0.05 * spaced_values((2, 8), rng), requires_grad=True)
    ops = [
        op_zoo.build_op(k, C, 1, rng=np.random.default_rng(3 + int(k)), dtype=np.float64)
        for k in op_zoo.CandidateOpKind
    ]
    x = _leaf(rng, (1, C, 6, 6))
    proj = _const(rng, (1, C, 6, 6))

    def build():
        out = sn.mixed_op_forward(x, tc.row(alpha, 0), ops, train=True)
        return _projection_loss(out, proj)

    return [("mixed_op_alpha", build, [("alpha", alpha), ("input", x)], 1e-3)]


def run_suite(seed=20240, on_result=None):
    """Run every gradient check; returns a list of (name, error, tol, ok)."""
    rng = np.random.default_rng(seed)
    results = []
    all_checks = _primitive_checks(rng) + _operator_checks(rng) + _mixed_op_check(rng)
    for name, build, wrt, tol in all_checks:
        errors = check_gradients(build, wrt)
        worst = max(errors.values()) if errors else 0.0
        ok = worst <= tol
        results.append((name, worst, tol, ok))
        if on_result is not None:
            on_result(name, worst, tol, ok)
    return results
