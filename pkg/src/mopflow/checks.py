"""Finite-difference oracles for the analytic gradients.

These are independent of the backward passes they check: they only ever
evaluate energies and losses.
"""
import numpy as np

from . import segnet_micro as sn
from .flow_energy import EnergyConfig, FramePair, energy_and_gradient, energy_maps


def relative_error(analytic, numeric, floor=0.0):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    diff = np.abs(analytic - numeric)
    return np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)


def flow_energy_fd(I1, I2, flow, cfg=EnergyConfig(), occl=None, step=1e-4):
    """Central differences of the total energy for every flow component.

    The two perturbed energies are differenced summand by summand before
    summing, so the untouched terms cancel exactly instead of leaving
    rounding noise of the size of the whole energy.
    """
    pair = FramePair(I1, I2) if not isinstance(I1, FramePair) else I1
    flow = np.asarray(flow, dtype=np.float64)
    num = np.zeros_like(flow)
    for idx in np.ndindex(flow.shape):
        f = flow.copy()
        f[idx] += step
        plus = energy_maps(pair, None, f, cfg, occl)
        f[idx] -= 2 * step
        minus = energy_maps(pair, None, f, cfg, occl)
        d_data, d_sx, d_sy = (p - m for p, m in zip(plus, minus))
        num[idx] = (cfg.lam * d_data.sum() + d_sx.sum() + d_sy.sum()) / (2 * step)
    return num


def smooth_flow_instance(rng, max_size=12, min_size=5, margin=1e-2):
    """Random frames and flow on which the energy is smooth near the flow.

    The frames are opposing ramps plus a little noise, so every data residual
    stays well away from zero; flow differences are random-sign steps of
    0.1-0.3 px; sample positions keep ``margin`` away from grid lines so the
    bilinear interpolant has no kink within a finite-difference step.
    """
    while True:
        h, w = rng.integers(min_size, max_size + 1, 2)
        ys, xs = np.mgrid[0:h, 0:w]
        ramp = 0.15 * xs / (w - 1) + 0.15 * ys / (h - 1)
        I1 = 0.6 + ramp + 0.02 * rng.random((h, w))
        I2 = 0.4 - ramp + 0.02 * rng.random((h, w))

        def walk(n):
            steps = rng.choice([-1.0, 1.0], n - 1) * rng.uniform(0.1, 0.3, n - 1)
            return np.concatenate([[0.0], np.cumsum(steps)])

        u = walk(w)[None, :] + walk(h)[:, None]
        v = walk(w)[None, :] + walk(h)[:, None]
        flow = np.stack([u - u.mean(), v - v.mean()], axis=-1)
        px, py = xs + flow[..., 0], ys + flow[..., 1]
        gap = min(np.abs(px - np.round(px)).min(), np.abs(py - np.round(py)).min())
        if gap > margin:
            return I1, I2, flow


def flow_gradient_check(n_instances=20, seed=0, cfg=EnergyConfig(), step=1e-4):
    """Max relative error of the analytic flow gradient over random instances."""
    rng = np.random.default_rng(seed)
    worst = []
    for _ in range(n_instances):
        I1, I2, flow = smooth_flow_instance(rng)
        _, g = energy_and_gradient(I1, I2, flow, cfg)
        num = flow_energy_fd(I1, I2, flow, cfg, step=step)
        worst.append(float(relative_error(g, num).max()))
    return worst


def _per_item_loss(probs, target):
    t = np.broadcast_to(target, (probs.shape[0],) + target.shape)
    p_true = np.where(t, probs[:, 1], probs[:, 0])
    return -np.log(np.maximum(p_true, 1e-300)).mean(axis=(1, 2))


def _broadcast_pools(pools, n):
    out = {}
    for k, idx in pools.items():
        rows = np.broadcast_to(idx.rows, (n,) + idx.rows.shape[1:])
        cols = np.broadcast_to(idx.cols, (n,) + idx.cols.shape[1:])
        out[k] = sn.PoolIndices(rows, cols, (n,) + tuple(idx.in_shape[1:]))
    return out


def _pattern(cache, n):
    """ReLU on/off states and pooling argmaxes, one flat boolean/int row per sample."""
    parts = []
    for name in sorted(cache["blocks"]):
        y = cache["blocks"][name][3]
        parts.append(np.broadcast_to(y > 0, (n,) + y.shape[1:]).reshape(n, -1).astype(np.int64))
    for k in sorted(cache["pool"]):
        idx = cache["pool"][k]
        parts.append(np.broadcast_to(idx.rows, (n,) + idx.rows.shape[1:]).reshape(n, -1))
        parts.append(np.broadcast_to(idx.cols, (n,) + idx.cols.shape[1:]).reshape(n, -1))
    return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0), np.int64)


def network_fd(net, x, target, step=1e-5, chunk=512, keys=None, with_crossings=False):
    """Central-difference gradient of the training loss for every parameter.

    Perturbations never change anything upstream of their block, so each
    perturbed copy is pushed through its own block and the remaining layers
    run on a batch of perturbed activations (samples are independent).

    With ``with_crossings`` also returns, per parameter, whether either
    perturbed copy switched a ReLU or a pooling argmax relative to the
    unperturbed network, i.e. whether the stencil straddles a kink.
    """
    x = sn._batched(x)
    target = np.asarray(target, dtype=bool)
    op_index = {arg: i for i, (kind, arg) in enumerate(sn.OPS) if kind == "block"}
    op_index["cls"] = len(sn.OPS) - 1
    keys = list(net.params) if keys is None else keys
    grads, crossed = {}, {}
    _, base_cache = sn.run_ops(net, x, "train")
    for key in keys:
        block = key.split(".")[0]
        i_op = op_index[block]
        a_in, cache = sn.run_ops(net, x, "train", stop=i_op)
        arr = net.params[key]
        num = np.zeros_like(arr)
        jobs = [(idx, s) for idx in np.ndindex(arr.shape) for s in (1.0, -1.0)]
        losses = np.empty(len(jobs))
        switched = np.zeros(len(jobs), dtype=bool)
        for c0 in range(0, len(jobs), chunk):
            outs, ys = [], []
            for idx, s in jobs[c0 : c0 + chunk]:
                pert = dict(net.params)
                pert[key] = arr.copy()
                pert[key][idx] += s * step
                if block == "cls":
                    logits, _ = sn.conv2d(a_in, pert["cls.w"], pert["cls.b"])
                    outs.append(sn.softmax(logits))
                else:
                    out, bc = sn.block_forward(net, block, a_in, "train", params=pert)
                    outs.append(out)
                    ys.append(bc[3])
            batch = np.concatenate(outs, axis=0)
            if block == "cls":
                probs = batch
            else:
                sub = {"blocks": {}, "pool": _broadcast_pools(cache["pool"], batch.shape[0])}
                probs, sub = sn.run_ops(net, batch, "train", start=i_op + 1, cache=sub)
                if with_crossings:
                    sub["blocks"][block] = (None, None, None, np.concatenate(ys, axis=0))
                    ref = {
                        "blocks": {b: base_cache["blocks"][b] for b in sub["blocks"]},
                        "pool": {k: base_cache["pool"][k] for k in sub["pool"]},
                    }
                    n = batch.shape[0]
                    switched[c0 : c0 + n] = np.any(_pattern(sub, n) != _pattern(ref, n), axis=1)
            losses[c0 : c0 + len(outs)] = _per_item_loss(probs, target)
        for j, (idx, _) in enumerate(jobs[::2]):
            num[idx] = (losses[2 * j] - losses[2 * j + 1]) / (2 * step)
        grads[key] = num
        crossed[key] = (switched[0::2] | switched[1::2]).reshape(arr.shape)
    if with_crossings:
        return grads, crossed
    return grads


def network_gradient_check(net, x, target, step=1e-5, floor=1e-8):
    """Per-parameter max relative error between backprop and finite differences."""
    _, analytic, _ = sn.loss_and_grad(net, x, target)
    numeric = network_fd(net, x, target, step=step)
    return {k: float(relative_error(analytic[k], numeric[k], floor).max()) for k in numeric}
