"""Coarse-to-fine minimisation of the flow energy with Adam-style updates."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .flow_energy import EnergyBreakdown, EnergyConfig, FramePair, energy_and_gradient
from .imaging import BilinearSampler, build_pyramid, to_grayscale, upsample_flow

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    levels: int = 4
    steps_per_level: int = 250
    step_size: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    occlusion_alpha1: float = 0.01
    occlusion_alpha2: float = 0.5
    bidirectional: bool = True
    refine_occlusions: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.steps_per_level < 1:
            raise ValueError("steps_per_level must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {b}")


@dataclass
class FlowPairResult:
    forward: np.ndarray
    backward: np.ndarray = None
    occlusion_fwd: np.ndarray = None
    occlusion_bwd: np.ndarray = None
    energy_trace: list = field(default_factory=list)


def solve_level(I1, I2, init, cfg=EnergyConfig(), scfg=SolverConfig(), occl=None):
    """Run ``steps_per_level`` accept-only Adam updates on the flow.

    A candidate step that raises the total energy is discarded and the step
    size halved; an accepted step lets the step size grow back towards
    ``scfg.step_size``. The returned trace therefore never increases.

    Returns ``(flow, trace)`` where ``trace`` holds one :class:`EnergyBreakdown`
    for the initial flow and one per iteration.
    """
    pair = I1 if isinstance(I1, FramePair) else FramePair(I1, I2)
    flow = np.array(init, dtype=np.float64)
    pair.check(flow, occl)

    b1, b2 = scfg.adam_beta1, scfg.adam_beta2
    m = np.zeros_like(flow)
    v = np.zeros_like(flow)
    lr = scfg.step_size
    energy, grad = energy_and_gradient(pair, None, flow, cfg, occl)
    if not np.isfinite(energy.total):
        raise FloatingPointError("non-finite energy at iteration 0")
    trace = [energy]
    for it in range(1, scfg.steps_per_level + 1):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**it)
        vhat = v / (1 - b2**it)
        cand = flow - lr * mhat / (np.sqrt(vhat) + 1e-8)
        e_cand, g_cand = energy_and_gradient(pair, None, cand, cfg, occl)
        if not np.isfinite(e_cand.total):
            raise FloatingPointError(f"non-finite energy at iteration {it}")
        if e_cand.total <= energy.total:
            flow, energy, grad = cand, e_cand, g_cand
            lr = min(lr * 2.0, scfg.step_size)
        else:
            lr *= 0.5
        trace.append(energy)
    return flow, trace


def solve_pyramid(I1, I2, cfg=EnergyConfig(), scfg=SolverConfig(), return_trace=False):
    """Solve from the coarsest box-pyramid level to the finest."""
    g1, g2 = to_grayscale(I1), to_grayscale(I2)
    if g1.shape != g2.shape:
        raise ValueError(f"frame shapes differ: {g1.shape} vs {g2.shape}")
    # the coarsest level still needs a 3x3 gradient stencil
    coarsest = -(-min(g1.shape) // 2 ** (scfg.levels - 1))
    if coarsest < 3:
        raise ValueError(f"image {g1.shape} too small for {scfg.levels} pyramid levels")
    p1 = build_pyramid(g1, scfg.levels)
    p2 = build_pyramid(g2, scfg.levels)
    flow = np.zeros(p1[-1].shape + (2,))
    trace = []
    for lvl in range(scfg.levels - 1, -1, -1):
        a, b = p1[lvl], p2[lvl]
        if flow.shape[:2] != a.shape:
            flow = upsample_flow(flow, *a.shape)
        flow, tr = solve_level(a, b, flow, cfg, scfg)
        log.debug("level %d %s: energy %.6g -> %.6g", lvl, a.shape, tr[0].total, tr[-1].total)
        trace = tr
    if return_trace:
        return flow, trace
    return flow


def occlusion_mask(fwd, bwd, alpha1=0.01, alpha2=0.5):
    """Forward-backward consistency check.

    A pixel is occluded when the forward vector and the backward vector sampled
    at its forward target fail to cancel::

        |wf + wb(x + wf)|^2 > alpha1 * (|wf|^2 + |wb(x + wf)|^2) + alpha2
    """
    fwd = np.asarray(fwd, dtype=np.float64)
    bwd = np.asarray(bwd, dtype=np.float64)
    if fwd.shape != bwd.shape or fwd.ndim != 3 or fwd.shape[2] != 2:
        raise ValueError(f"shape mismatch: {fwd.shape} vs {bwd.shape}")
    sampler = BilinearSampler(fwd)
    wb = np.stack([sampler.sample(bwd[..., 0]), sampler.sample(bwd[..., 1])], axis=-1)
    lhs = np.sum((fwd + wb) ** 2, axis=-1)
    rhs = alpha1 * (np.sum(fwd**2, axis=-1) + np.sum(wb**2, axis=-1)) + alpha2
    return lhs > rhs


def solve_bidirectional(I1, I2, cfg=EnergyConfig(), scfg=SolverConfig()):
    """Forward and backward flow, occlusion masks, and an optional masked re-solve.

    The refinement pass restarts the finest level from each unrefined flow
    with occluded pixels removed from the data term.
    """
    g1, g2 = to_grayscale(I1), to_grayscale(I2)
    fwd, trace = solve_pyramid(g1, g2, cfg, scfg, return_trace=True)
    bwd = solve_pyramid(g2, g1, cfg, scfg)
    occ_f = occlusion_mask(fwd, bwd, scfg.occlusion_alpha1, scfg.occlusion_alpha2)
    occ_b = occlusion_mask(bwd, fwd, scfg.occlusion_alpha1, scfg.occlusion_alpha2)
    if scfg.refine_occlusions:
        fwd, trace = solve_level(g1, g2, fwd, cfg, scfg, occl=occ_f)
        bwd, _ = solve_level(g2, g1, bwd, cfg, scfg, occl=occ_b)
    return FlowPairResult(
        forward=fwd, backward=bwd, occlusion_fwd=occ_f, occlusion_bwd=occ_b, energy_trace=trace
    )


def estimate_flow(I1, I2, cfg=EnergyConfig(), scfg=SolverConfig()):
    """Dispatch on ``scfg.bidirectional``; always returns a :class:`FlowPairResult`."""
    if scfg.bidirectional:
        return solve_bidirectional(I1, I2, cfg, scfg)
    flow, trace = solve_pyramid(I1, I2, cfg, scfg, return_trace=True)
    return FlowPairResult(forward=flow, energy_trace=trace)


def endpoint_error(flow, truth, border=0):
    """Mean Euclidean distance between two flow fields, ignoring a border band."""
    flow = np.asarray(flow)
    truth = np.broadcast_to(np.asarray(truth, dtype=np.float64), flow.shape)
    err = np.sqrt(np.sum((flow - truth) ** 2, axis=-1))
    if border:
        err = err[border:-border, border:-border]
    return float(err.mean())


__all__ = [
    "EnergyBreakdown",
    "FlowPairResult",
    "SolverConfig",
    "endpoint_error",
    "estimate_flow",
    "occlusion_mask",
    "solve_bidirectional",
    "solve_level",
    "solve_pyramid",
]
