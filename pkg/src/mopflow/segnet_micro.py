"""A small encoder-decoder segmenter that upsamples with stored max-pool indices.

Three encoder stages (3x3 conv -> batch-norm -> ReLU -> 2x2 max-pool) map the
two flow channels to 16, 32 and 64 features. The decoder mirrors them: each
stage scatters its input back through the pooling indices of the matching
encoder stage, then applies conv -> batch-norm -> ReLU. A 1x1 convolution
produces two class scores per pixel (background, foreground).

Tensors are ``(N, C, H, W)`` float64 arrays; a bare ``(C, H, W)`` array is
treated as a batch of one. Everything, including the backward pass, is plain
numpy.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset_io import atomic_output
from .imaging import resize_bilinear

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_EPS = 1e-8

ENCODER_CHANNELS = (2, 16, 32, 64)
# (name, in_channels, out_channels) for every conv -> bn -> relu block, in forward order
BLOCKS = (
    ("enc1", 2, 16),
    ("enc2", 16, 32),
    ("enc3", 32, 64),
    ("dec3", 64, 32),
    ("dec2", 32, 16),
    ("dec1", 16, 16),
)
N_CLASSES = 2
CHECKPOINT_MAGIC = "mopflow-segnet 1"


@dataclass(frozen=True)
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    start_lr: float = 5e-4
    decay_rate: float = 0.5
    decay_steps: int = 2000
    iterations: int = 10000
    batch: int = 1

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.start_lr > 0:
            raise ValueError("start_lr must be > 0")
        if self.decay_steps < 1 or self.iterations < 1:
            raise ValueError("decay_steps and iterations must be >= 1")
        if self.batch != 1:
            raise ValueError("only batch = 1 is supported")

    def lr(self, t):
        return self.start_lr * self.decay_rate ** (t // self.decay_steps)


@dataclass
class PoolIndices:
    """Absolute (row, col) of the maximum for every pooled cell."""

    rows: np.ndarray
    cols: np.ndarray
    in_shape: tuple


class NetParams:
    """Trainable parameters plus batch-norm running statistics.

    ``params`` and ``buffers`` are dicts of arrays keyed ``"<block>.<name>"``;
    their insertion order is the checkpoint order.
    """

    def __init__(self, params, buffers):
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, seed=0):
        rng = np.random.default_rng(seed)
        params, buffers = {}, {}
        for name, cin, cout in BLOCKS:
            bound = np.sqrt(1.0 / (cin * 9))
            params[f"{name}.w"] = rng.uniform(-bound, bound, (cout, cin, 3, 3))
            params[f"{name}.gamma"] = np.ones(cout)
            params[f"{name}.beta"] = np.zeros(cout)
            buffers[f"{name}.running_mean"] = np.zeros(cout)
            buffers[f"{name}.running_var"] = np.ones(cout)
        cin = BLOCKS[-1][2]
        bound = np.sqrt(1.0 / cin)
        params["cls.w"] = rng.uniform(-bound, bound, (N_CLASSES, cin, 1, 1))
        params["cls.b"] = rng.uniform(-bound, bound, N_CLASSES)
        return cls(params, buffers)

    def copy(self):
        return NetParams(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


# -- layers ---------------------------------------------------------------


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")
    return x


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution (cross-correlation) via im2col."""
    k = w.shape[-1]
    p = k // 2
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T
    if b is not None:
        out += b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv2d_backward(dout, x_shape, cols, w):
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    p = k // 2
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
    return dx, dw, db


def batchnorm_train(x, gamma, beta):
    """Normalise each sample over its own spatial positions."""
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y, (xhat, inv, mean[..., 0, 0], var[..., 0, 0])


def batchnorm_eval(x, gamma, beta, running_mean, running_var):
    inv = 1.0 / np.sqrt(running_var + BN_EPS)
    xhat = (x - running_mean[:, None, None]) * inv[:, None, None]
    return gamma[:, None, None] * xhat + beta[:, None, None]


def batchnorm_backward(dy, gamma, bn_cache):
    xhat, inv, _, _ = bn_cache
    m = dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma[:, None, None]
    dx = (inv / m) * (
        m * dxhat
        - dxhat.sum(axis=(2, 3), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
    )
    return dx, dgamma, dbeta


def maxpool2_with_indices(x):
    """2x2 stride-2 max pooling that records where each maximum came from.

    Ties go to the smallest row, then the smallest column.
    """
    single = np.asarray(x).ndim == 3
    x = _batched(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max-pooling needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + k // 2
    cols = 2 * np.arange(w // 2)[None, :] + k % 2
    idx = PoolIndices(rows, cols, (n, c, h, w))
    if single:
        return out[0], PoolIndices(rows[0], cols[0], (c, h, w))
    return out, idx


def max_unpool2(x, idx, out_h=None, out_w=None):
    """Scatter pooled values back to the recorded argmax positions; zeros elsewhere."""
    single = np.asarray(x).ndim == 3
    x = _batched(x)
    rows, cols = idx.rows, idx.cols
    if rows.ndim == 3:
        rows, cols = rows[None], cols[None]
    if rows.shape != x.shape:
        raise ValueError(f"indices {rows.shape} do not match pooled tensor {x.shape}")
    n, c, ph, pw = x.shape
    out_h = idx.in_shape[-2] if out_h is None else out_h
    out_w = idx.in_shape[-1] if out_w is None else out_w
    if out_h // 2 != ph or out_w // 2 != pw or out_h % 2 or out_w % 2:
        raise ValueError(f"cannot unpool {ph}x{pw} into {out_h}x{out_w}")
    out = np.zeros((n, c, out_h, out_w))
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    out[ni, ci, rows, cols] = x
    return out[0] if single else out


def _gather(x, idx):
    n, c = x.shape[:2]
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    return x[ni, ci, idx.rows, idx.cols]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- network --------------------------------------------------------------


# forward schedule: ("block", name) | ("pool", stage) | ("unpool", stage) | ("cls", None)
OPS = (
    ("block", "enc1"),
    ("pool", 1),
    ("block", "enc2"),
    ("pool", 2),
    ("block", "enc3"),
    ("pool", 3),
    ("unpool", 3),
    ("block", "dec3"),
    ("unpool", 2),
    ("block", "dec2"),
    ("unpool", 1),
    ("block", "dec1"),
    ("cls", None),
)


def block_forward(net, name, a, mode, params=None):
    """conv -> batch-norm -> ReLU; returns ``(out, block_cache)``."""
    p = net.params if params is None else params
    # no conv bias: batch-norm's beta already supplies the per-channel offset
    z, cols = conv2d(a, p[f"{name}.w"])
    if mode == "train":
        y, bn = batchnorm_train(z, p[f"{name}.gamma"], p[f"{name}.beta"])
    else:
        y = batchnorm_eval(
            z,
            p[f"{name}.gamma"],
            p[f"{name}.beta"],
            net.buffers[f"{name}.running_mean"],
            net.buffers[f"{name}.running_var"],
        )
        bn = None
    return np.maximum(y, 0.0), (a.shape, cols, bn, y)


def run_ops(net, a, mode, start=0, cache=None, stop=None):
    """Execute ``OPS[start:stop]`` on activation ``a``, filling ``cache`` as it goes.

    Resuming part-way needs the pooling indices of earlier stages in
    ``cache["pool"]``.
    """
    if cache is None:
        cache = {"blocks": {}, "pool": {}}
    for kind, arg in OPS[start:stop]:
        if kind == "block":
            a, cache["blocks"][arg] = block_forward(net, arg, a, mode)
        elif kind == "pool":
            a, cache["pool"][arg] = maxpool2_with_indices(a)
        elif kind == "unpool":
            a = max_unpool2(a, cache["pool"][arg])
        else:
            logits, cols = conv2d(a, net.params["cls.w"], net.params["cls.b"])
            cache["cls"] = (a.shape, cols)
            a = softmax(logits)
    cache["probs"] = a
    return a, cache


def forward(net, x, mode="train"):
    """Run the network; returns ``(probs, cache)``.

    Batch-norm statistics come from each sample's own feature maps in
    ``"train"`` mode (the cache carries them for the running averages) and
    from ``net.buffers`` in ``"eval"`` mode. Samples in a batch never interact.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    single = np.asarray(x).ndim == 3
    x = _batched(x)
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ValueError(f"spatial dims must be divisible by 8, got {h}x{w}")
    probs, cache = run_ops(net, x, mode)
    return (probs[0] if single else probs), cache


def _target_array(target, shape):
    t = np.asarray(target, dtype=bool)
    if t.ndim == 2:
        t = t[None]
    if t.shape != (shape[0],) + tuple(shape[2:]):
        raise ValueError(f"target shape {t.shape} does not match input {shape}")
    return t


def cross_entropy(probs, target):
    probs = probs if probs.ndim == 4 else probs[None]
    t = _target_array(target, probs.shape)
    p_true = np.where(t, probs[:, 1], probs[:, 0])
    return float(-np.mean(np.log(np.maximum(p_true, 1e-300))))


def backward(net, cache, target):
    """Gradients of the mean cross-entropy for every entry of ``net.params``."""
    p = net.params
    probs = cache["probs"]
    t = _target_array(target, probs.shape)
    n, _, h, w = probs.shape
    onehot = np.stack([~t, t], axis=1).astype(np.float64)
    dlogits = (probs - onehot) / (n * h * w)
    grads = {}
    a_shape, cols = cache["cls"]
    da, grads["cls.w"], grads["cls.b"] = conv2d_backward(dlogits, a_shape, cols, p["cls.w"])

    def block_back(name, dout):
        a_shape, cols, bn, y = cache["blocks"][name]
        dy = dout * (y > 0)
        dz, grads[f"{name}.gamma"], grads[f"{name}.beta"] = batchnorm_backward(dy, p[f"{name}.gamma"], bn)
        dx, grads[f"{name}.w"], _ = conv2d_backward(dz, a_shape, cols, p[f"{name}.w"])
        return dx

    for i, name in ((1, "dec1"), (2, "dec2"), (3, "dec3")):
        da = block_back(name, da)
        # unpooling scatters, so its adjoint gathers at the same positions
        da = _gather(da, cache["pool"][i])
    for i, name in ((3, "enc3"), (2, "enc2"), (1, "enc1")):
        da = max_unpool2(da, cache["pool"][i])
        da = block_back(name, da)
    return {k: grads[k] for k in p}


def loss_and_grad(net, x, target):
    probs, cache = forward(net, x, "train")
    loss = cross_entropy(cache["probs"], target)
    return loss, backward(net, cache, target), cache


def update_running_stats(net, cache):
    for name, _, _ in BLOCKS:
        _, _, mean, var = cache["blocks"][name][2]
        rm = net.buffers[f"{name}.running_mean"]
        rv = net.buffers[f"{name}.running_var"]
        rm *= 1 - BN_MOMENTUM
        rm += BN_MOMENTUM * mean.mean(axis=0)
        rv *= 1 - BN_MOMENTUM
        rv += BN_MOMENTUM * var.mean(axis=0)


# -- optimisation ---------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict


def adam_init(net):
    return AdamState(net.zeros_like(), net.zeros_like())


def adam_step(params, grads, state, t, cfg=TrainConfig()):
    """One bias-corrected Adam update at step ``t`` (1-based), in place.

    ``params`` is either a :class:`NetParams` or a plain dict of arrays.
    Returns ``(params, state)``.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    arrays = params.params if isinstance(params, NetParams) else params
    lr = cfg.lr(t)
    b1, b2 = cfg.beta1, cfg.beta2
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        arrays[k] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return params, state


def flow_to_input(flow):
    """``(H, W, 2)`` flow -> ``(2, H, W)`` network input."""
    return np.ascontiguousarray(np.asarray(flow, dtype=np.float64).transpose(2, 0, 1))


def train(pairs, cfg=TrainConfig(), seed=0, net=None, log_every=0, logger=None):
    """Fit the network on ``(flow, mask)`` pairs with Adam.

    Each epoch visits the pairs in an order drawn from the seeded generator.
    Returns ``(net, losses)`` where ``losses[i]`` is the loss before update
    ``i + 1``.
    """
    if not pairs:
        raise ValueError("training set is empty")
    for flow, mask in pairs:
        if flow.shape[0] % 8 or flow.shape[1] % 8:
            raise ValueError(f"flow dims {flow.shape[:2]} must be divisible by 8")
        if mask.shape != flow.shape[:2]:
            raise ValueError(f"mask {mask.shape} does not match flow {flow.shape[:2]}")
    rng = np.random.default_rng(seed)
    net = NetParams.init(int(rng.integers(2**32))) if net is None else net
    inputs = [flow_to_input(f) for f, _ in pairs]
    state = adam_init(net)
    losses = []
    order = []
    for t in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(pairs)))
        i = order.pop(0)
        loss, grads, cache = loss_and_grad(net, inputs[i], pairs[i][1])
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {t}")
        losses.append(loss)
        update_running_stats(net, cache)
        adam_step(net, grads, state, t, cfg)
        if logger is not None and log_every and t % log_every == 0:
            logger.info("step %d lr %.3g loss %.5f", t, cfg.lr(t), loss)
    return net, losses


def predict_proba(net, flow):
    probs, _ = forward(net, flow_to_input(flow), "eval")
    return probs


def predict_mask(net, flow):
    """Foreground where the class-1 probability exceeds 0.5.

    Flows whose size is not a multiple of 8 are resized up to the next
    multiple (vectors rescaled) and the mask is resized back nearest-neighbour.
    """
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    hh, ww = -(-h // 8) * 8, -(-w // 8) * 8
    if (hh, ww) != (h, w):
        work = resize_bilinear(flow, hh, ww)
        work[..., 0] *= ww / w
        work[..., 1] *= hh / h
    else:
        work = flow
    mask = predict_proba(net, work)[1] > 0.5
    if (hh, ww) != (h, w):
        ri = np.minimum(((np.arange(h) + 0.5) * hh / h).astype(int), hh - 1)
        ci = np.minimum(((np.arange(w) + 0.5) * ww / w).astype(int), ww - 1)
        mask = mask[np.ix_(ri, ci)]
    return mask


# -- serialisation --------------------------------------------------------


def save_checkpoint(net, path):
    """Plain-text header of ``name dims...`` lines, ``end``, then float32 LE data."""
    lines = [CHECKPOINT_MAGIC]
    chunks = []
    for group in (net.params, net.buffers):
        for k, v in group.items():
            lines.append(" ".join([k] + [str(d) for d in v.shape]))
            chunks.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    lines.append("end")
    with atomic_output(path) as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for c in chunks:
            f.write(c)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0
    entries = []
    first = True
    while True:
        nl = blob.index(b"\n", pos)
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            if line != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a segnet checkpoint")
            first = False
            continue
        if line == "end":
            break
        name, *dims = line.split()
        entries.append((name, tuple(int(d) for d in dims)))
    data = np.frombuffer(blob, dtype="<f4", offset=pos)
    params, buffers = {}, {}
    off = 0
    for name, shape in entries:
        size = int(np.prod(shape))
        if off + size > data.size:
            raise ValueError(f"{path}: truncated checkpoint at {name}")
        arr = data[off : off + size].astype(np.float64).reshape(shape)
        off += size
        (buffers if "running_" in name else params)[name] = arr
    if off != data.size:
        raise ValueError(f"{path}: {data.size - off} trailing values in checkpoint")
    return NetParams(params, buffers)


def write_loss_csv(path, losses, cfg=TrainConfig()):
    with atomic_output(path, "w") as f:
        f.write("step,lr,loss\n")
        for t, loss in enumerate(losses, start=1):
            f.write(f"{t},{cfg.lr(t)!r},{loss!r}\n")
