"""Finite-difference gradient verification.

The oracle perturbs every parameter scalar by +/-eps, re-evaluates the loss
with the tape disabled, and compares the central difference against the
gradient the tape produced. Relative error uses an absolute floor so that
near-zero gradients do not trip on finite-difference rounding noise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor, no_grad

REL_FLOOR = 1e-4


def finite_difference_grad(loss_fn, param: Tensor, eps=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. one parameter."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = float(loss_fn().data)
            flat[i] = saved - eps
            lo = float(loss_fn().data)
            flat[i] = saved
            grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(param.shape)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.max(np.abs(analytic - numeric) / denom) if analytic.size else 0.0


def check_gradients(loss_fn, params, eps=1e-5):
    """Compare tape gradients against central differences.

    ``params`` is an iterable of (name, Tensor). Returns the worst relative
    error over all parameters as ``(max_err, report)`` where ``report`` maps
    names to their errors.
    """
    params = list(params)
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params
    }
    report = {}
    for name, p in params:
        numeric = finite_difference_grad(loss_fn, p, eps=eps)
        report[name] = relative_error(analytic[name], numeric)
    max_err = max(report.values()) if report else 0.0
    return max_err, report


def check_input_gradient(fn, x: Tensor, eps=1e-5):
    """Gradient check w.r.t. an input tensor rather than a parameter."""
    return check_gradients(fn, [("input", x)], eps=eps)


TINY = dict(num_regions=2, lookback=6, hist_channels=2, horizon=4,
            future_channels=1, latent_dim=3, region_layers=1, moe_blocks=1,
            num_e_per_moe=2, expert_blocks=1, batch=2)


def build_tiny_model(seed=0):
    """A deliberately small full model plus one batch per region.

    Used by the gradient suite: small enough that differencing every
    parameter stays well under a minute.
    """
    from .config import TrainConfig
    from .models import DataDims, TriForecasterNet

    cfg = TrainConfig(
        latent_dim=TINY["latent_dim"], region_layers=TINY["region_layers"],
        moe_blocks=TINY["moe_blocks"], num_e_per_moe=TINY["num_e_per_moe"],
        expert_blocks=TINY["expert_blocks"], alpha=0.0, seed=seed,
    )
    dims = DataDims(TINY["num_regions"], TINY["lookback"], TINY["hist_channels"],
                    TINY["horizon"], TINY["future_channels"])
    rng = np.random.default_rng(seed)
    model = TriForecasterNet(dims, cfg, rng)
    batches = []
    for _ in range(TINY["num_regions"]):
        hist = Tensor(rng.uniform(-1, 1, (TINY["batch"], TINY["lookback"], TINY["hist_channels"])))
        future = Tensor(rng.uniform(-1, 1, (TINY["batch"], TINY["horizon"], TINY["future_channels"])))
        batches.append((hist, future))
    return model, batches


def tiny_model_loss(model, batches, seed=0):
    """Eval-mode scalar loss over every region's toy batch.

    Routing distributions are captured on the first call and replayed on
    later ones, so finite differences probe exactly the function the tape
    differentiated (routing is constant w.r.t. parameters by design).
    """
    from .fusion import EVAL, ForwardContext

    captures = [None] * len(batches)

    def loss():
        rng = np.random.default_rng(seed)
        total = None
        for region, (hist, future) in enumerate(batches):
            if captures[region] is None:
                captures[region] = []
                ctx = ForwardContext(mode=EVAL, rng=rng, capture=captures[region])
            else:
                ctx = ForwardContext.replaying(captures[region], mode=EVAL, rng=rng)
            pred, _ = model.forward(hist, future, region, ctx)
            w = Tensor(np.random.default_rng(region + 7).normal(size=pred.shape))
            term = tt.sum_(tt.mul(pred, w))
            total = term if total is None else tt.add(total, term)
        return total

    return loss


def run_model_gradcheck(seed=0, eps=1e-5):
    """Full-model gradient check on the tiny configuration.

    Returns (max relative error, per-parameter report).
    """
    model, batches = build_tiny_model(seed)
    loss = tiny_model_loss(model, batches, seed)
    return check_gradients(loss, model.named_parameters(), eps=eps)


def run_suite(seed=0, eps=1e-5, tolerance=1e-4, out=print):
    """Gradient checks over individual blocks and the full tiny model.

    Prints one line per check; returns True when every check passes.
    """
    from .ct_specializer import ContextMoE, CTSpecializerLayer, TimeMoE
    from .fusion import EVAL, ForwardContext, Fusion, activation_probs
    from .layers import EmbeddingLayer, Linear, TSMixerBlock
    from .region_mixer import RegionMixerLayer

    rng = np.random.default_rng(seed)
    checks = []

    linear = Linear(4, 3, rng)
    x = Tensor(rng.uniform(-1, 1, (3, 4)))
    w = Tensor(rng.normal(size=(3, 3)))
    checks.append(("linear", lambda: tt.sum_(tt.mul(linear(x), w)), linear))

    mixer = TSMixerBlock(4, 3, rng)
    mx = Tensor(rng.uniform(-1, 1, (4, 3)))
    mw = Tensor(rng.normal(size=(4, 3)))
    checks.append(("tsmixer_block", lambda: tt.sum_(tt.mul(mixer(mx), mw)), mixer))

    emb = EmbeddingLayer(6, 2, 4, 1, 3, rng)
    hist = Tensor(rng.uniform(-1, 1, (6, 2)))
    fut = Tensor(rng.uniform(-1, 1, (4, 1)))
    ew = Tensor(rng.normal(size=(4, 3)))
    checks.append(("embedding", lambda: tt.sum_(tt.mul(emb(hist, fut), ew)), emb))

    fusion = Fusion(3, 2, rng)
    fd = [Tensor(rng.uniform(-1, 1, (4, 3))) for _ in range(2)]
    fo = Tensor(rng.uniform(-1, 1, (3, 4, 3)))
    fp = activation_probs(rng.normal(size=(3, 4, 3)))
    fw = Tensor(rng.normal(size=(4, 3)))
    checks.append(
        ("fusion", lambda: tt.sum_(tt.mul(fusion(fd, fo, fp, EVAL), fw)), fusion)
    )

    def frozen_forward(block, args_fn):
        capture = []
        block_forward = args_fn(ForwardContext(mode=EVAL, capture=capture))
        block_forward()

        def loss():
            return args_fn(ForwardContext.replaying(capture, mode=EVAL))()
        return loss

    rlayer = RegionMixerLayer(2, 4, 3, 1, rng)
    rx = Tensor(rng.uniform(-1, 1, (2, 4, 3)))
    rw = Tensor(rng.normal(size=(2, 4, 3)))
    checks.append((
        "region_mixer_layer",
        frozen_forward(rlayer, lambda ctx: lambda: tt.sum_(
            tt.mul(rlayer.forward(rx, 0, ctx), rw))),
        rlayer,
    ))

    cmoe = ContextMoE(2, 4, 3, rng)
    cx = Tensor(rng.uniform(-1, 1, (4, 3)))
    cw = Tensor(rng.normal(size=(4, 3)))
    checks.append((
        "context_moe",
        frozen_forward(cmoe, lambda ctx: lambda: tt.sum_(
            tt.mul(cmoe.forward(cx, ctx), cw))),
        cmoe,
    ))

    tmoe = TimeMoE(2, 4, 3, rng)
    txx = Tensor(rng.uniform(-1, 1, (4, 3)))
    tw = Tensor(rng.normal(size=(4, 3)))
    checks.append((
        "time_moe",
        frozen_forward(tmoe, lambda ctx: lambda: tt.sum_(
            tt.mul(tmoe.forward(txx, ctx), tw))),
        tmoe,
    ))

    ct = CTSpecializerLayer(2, 2, 4, 3, rng)
    ctx_in = Tensor(rng.uniform(-1, 1, (4, 3)))
    ctw = Tensor(rng.normal(size=(4, 3)))
    checks.append((
        "ct_specializer_layer",
        frozen_forward(ct, lambda fctx: lambda: tt.sum_(
            tt.mul(ct.forward(ctx_in, fctx)[0], ctw))),
        ct,
    ))

    all_ok = True
    for name, loss_fn, block in checks:
        max_err, _ = check_gradients(loss_fn, block.named_parameters(), eps=eps)
        ok = max_err <= tolerance
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: max rel err {max_err:.3e}")

    max_err, _ = run_model_gradcheck(seed=seed, eps=eps)
    ok = max_err <= tolerance
    all_ok &= ok
    out(f"{'PASS' if ok else 'FAIL'} full_model: max rel err {max_err:.3e}")
    return all_ok
