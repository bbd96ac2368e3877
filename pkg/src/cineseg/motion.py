"""Dense displacement estimation between each frame and the reference frame.

The displacement field is found by directly minimizing a photometric
mean-square-error term plus a smoothness penalty on the field Jacobian,
with coarse-to-fine gradient descent and backtracking line search. Both
terms use means (not sums) over pixels so the smoothness weight transfers
across image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DimensionMismatchError, DivergenceError
from .grid import (
    CineSequence,
    DisplacementField,
    Image2D,
    _forward_diff,
    _forward_diff_adjoint,
    _sample_grid,
    bilinear_sample,
    sample_with_spatial_grad,
)

__all__ = [
    "MotionConfig",
    "MotionResult",
    "mse_loss",
    "smoothness_penalty",
    "smoothness_gradient",
    "motion_objective",
    "motion_gradient",
    "estimate_ddf",
    "estimate_sequence",
]

_MIN_LEVEL_DIM = 8  # coarsest pyramid level keeps at least this many pixels per axis


@dataclass
class MotionConfig:
    """Solver settings for one frame-to-reference displacement estimate."""

    lambda_smooth: float = 100.0
    step_size: float = 1.0
    max_iters: int = 250
    rel_tol: float = 1e-6
    pyramid_levels: int = 3

    def __post_init__(self):
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass
class MotionResult:
    """Converged field plus the accepted-step objective trace.

    ``objective_trace`` holds the finest pyramid level only, so it is
    non-increasing; per-level traces are kept in ``level_traces``.
    """

    phi: DisplacementField
    final_objective: float
    iterations_used: int
    objective_trace: list = dc_field(default_factory=list)
    level_traces: list = dc_field(default_factory=list)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _as_image_array(img) -> np.ndarray:
    return img.data if isinstance(img, Image2D) else np.asarray(img, dtype=np.float64)


def mse_loss(moved, ref) -> float:
    """Mean over pixels of the squared intensity difference."""
    a = _as_image_array(moved)
    b = _as_image_array(ref)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape {a.shape} != {b.shape}")
    return float(np.mean((a - b) ** 2))


def smoothness_penalty(phi) -> float:
    """Mean over pixels of the squared Frobenius norm of the field Jacobian."""
    data = phi.data if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    total = 0.0
    for i in range(2):
        for axis in (1, 0):
            total += float(np.sum(_forward_diff(data[..., i], axis=axis) ** 2))
    return total / (data.shape[0] * data.shape[1])


def smoothness_gradient(phi) -> np.ndarray:
    """Analytic gradient of :func:`smoothness_penalty`; shape ``(H, W, 2)``."""
    data = phi.data if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    n = data.shape[0] * data.shape[1]
    grad = np.zeros_like(data)
    for i in range(2):
        for axis in (1, 0):
            d = _forward_diff(data[..., i], axis=axis)
            grad[..., i] += _forward_diff_adjoint(d, axis=axis)
    return grad * (2.0 / n)


def motion_objective(phi, frame, ref, cfg: MotionConfig) -> float:
    """Photometric MSE of the warped frame plus the weighted smoothness term."""
    phi_data = phi.data if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    frame_data = _as_image_array(frame)
    ref_data = _as_image_array(ref)
    if frame_data.shape != ref_data.shape or frame_data.shape != phi_data.shape[:2]:
        raise DimensionMismatchError("frame, reference and field grids must match")
    xs, ys = _sample_grid(phi_data)
    moved = bilinear_sample(frame_data, xs, ys)
    return mse_loss(moved, ref_data) + cfg.lambda_smooth * smoothness_penalty(phi_data)


def motion_gradient(phi, frame, ref, cfg: MotionConfig) -> np.ndarray:
    """Exact gradient of :func:`motion_objective` w.r.t. every displacement
    component, using the same clamp and stencil conventions as the forward
    pass. Shape ``(H, W, 2)``.
    """
    phi_data = phi.data if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    frame_data = _as_image_array(frame)
    ref_data = _as_image_array(ref)
    if frame_data.shape != ref_data.shape or frame_data.shape != phi_data.shape[:2]:
        raise DimensionMismatchError("frame, reference and field grids must match")
    xs, ys = _sample_grid(phi_data)
    moved, gx, gy = sample_with_spatial_grad(frame_data, xs, ys)
    residual = (moved - ref_data) * (2.0 / ref_data.size)
    grad = np.empty_like(phi_data)
    grad[..., 0] = residual * gx
    grad[..., 1] = residual * gy
    if cfg.lambda_smooth > 0:
        grad += cfg.lambda_smooth * smoothness_gradient(phi_data)
    return grad


# ---------------------------------------------------------------------------
# Pyramid helpers
# ---------------------------------------------------------------------------

def downsample_half(arr: np.ndarray) -> np.ndarray:
    """2x2 block mean; odd sizes replicate the last row/column first."""
    h, w = arr.shape[:2]
    if h % 2:
        arr = np.concatenate([arr, arr[-1:, ...]], axis=0)
    if w % 2:
        arr = np.concatenate([arr, arr[:, -1:, ...]], axis=1)
    return 0.25 * (arr[0::2, 0::2, ...] + arr[1::2, 0::2, ...]
                   + arr[0::2, 1::2, ...] + arr[1::2, 1::2, ...])


def resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of a 2-D array (or channel stack)."""
    h, w = arr.shape[:2]
    th, tw = shape
    xs = np.linspace(0.0, w - 1.0, tw)
    ys = np.linspace(0.0, h - 1.0, th)
    gx, gy = np.meshgrid(xs, ys)
    if arr.ndim == 2:
        return bilinear_sample(arr, gx, gy)
    out = np.empty((th, tw) + arr.shape[2:])
    for k in range(arr.shape[2]):
        out[..., k] = bilinear_sample(arr[..., k], gx, gy)
    return out


def upsample_field(phi_data: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Upsample a field to a finer grid; displacement values double."""
    return resize_bilinear(phi_data, shape) * 2.0


def _pyramid_depth(shape: tuple[int, int], requested: int) -> int:
    levels = 1
    h, w = shape
    while levels < requested and min(h, w) >= 2 * _MIN_LEVEL_DIM:
        h = (h + 1) // 2
        w = (w + 1) // 2
        levels += 1
    return levels


def _build_pyramid(arr: np.ndarray, levels: int) -> list[np.ndarray]:
    """Finest to coarsest."""
    out = [arr]
    for _ in range(levels - 1):
        out.append(downsample_half(out[-1]))
    return out


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _motion_objective_and_gradient(phi_data, frame_data, ref_data, cfg: MotionConfig):
    """Objective and gradient in one pass, sharing the warp."""
    xs, ys = _sample_grid(phi_data)
    moved, gx, gy = sample_with_spatial_grad(frame_data, xs, ys)
    diff = moved - ref_data
    obj = float(np.mean(diff ** 2))
    residual = diff * (2.0 / ref_data.size)
    grad = np.empty_like(phi_data)
    grad[..., 0] = residual * gx
    grad[..., 1] = residual * gy
    if cfg.lambda_smooth > 0:
        obj += cfg.lambda_smooth * smoothness_penalty(phi_data)
        grad += cfg.lambda_smooth * smoothness_gradient(phi_data)
    return obj, grad


def _consistency_objective(phi_data, bundle, ref_data, target, cons_w,
                           cfg: MotionConfig, with_grad: bool = False):
    """Photometric + smoothness + weighted label-consistency terms, with all
    channels (frame intensity first, label channels after) warped through
    one shared index preparation."""
    from .anatomy import cosine_consistency
    from .grid import _gather_bilinear, _gather_with_grad, _sample_prepare

    h, w = phi_data.shape[:2]
    xs, ys = _sample_grid(phi_data)
    prep = _sample_prepare(bundle[..., 0], xs, ys)
    k = bundle.shape[2]

    if not with_grad:
        moved = _gather_bilinear(bundle[..., 0], prep)
        warped = np.empty((h, w, k - 1))
        for c in range(1, k):
            warped[..., c - 1] = _gather_bilinear(bundle[..., c], prep)
        diff = moved - ref_data
        obj = float(np.mean(diff ** 2)) + cfg.lambda_smooth * smoothness_penalty(phi_data)
        cons, _, _ = cosine_consistency(warped, target)
        return obj + cons_w * cons, None

    inside_x = (xs >= 0.0) & (xs <= w - 1.0)
    inside_y = (ys >= 0.0) & (ys <= h - 1.0)
    moved, gx0, gy0 = _gather_with_grad(bundle[..., 0], prep, inside_x, inside_y)
    diff = moved - ref_data
    obj = float(np.mean(diff ** 2))
    residual = diff * (2.0 / ref_data.size)
    grad = np.empty_like(phi_data)
    grad[..., 0] = residual * gx0
    grad[..., 1] = residual * gy0

    warped = np.empty((h, w, k - 1))
    gxs, gys = [], []
    for c in range(1, k):
        val, gx, gy = _gather_with_grad(bundle[..., c], prep, inside_x, inside_y)
        warped[..., c - 1] = val
        gxs.append(gx)
        gys.append(gy)
    cons, d_warped, _ = cosine_consistency(warped, target)
    obj += cons_w * cons
    for c in range(k - 1):
        grad[..., 0] += cons_w * d_warped[..., c] * gxs[c]
        grad[..., 1] += cons_w * d_warped[..., c] * gys[c]

    if cfg.lambda_smooth > 0:
        obj += cfg.lambda_smooth * smoothness_penalty(phi_data)
        grad += cfg.lambda_smooth * smoothness_gradient(phi_data)
    return obj, grad


def _descend(objective, objective_and_gradient, x0: np.ndarray, step0: float,
             max_iters: int, rel_tol: float):
    """Gradient descent with a halving backtracking line search.

    ``step0`` is normalized against the first gradient so it reads as the
    largest per-pixel displacement of the first trial step. Every accepted
    step strictly decreases the objective; the returned trace starts at the
    initial objective and is therefore non-increasing.
    """
    x = x0
    obj, g = objective_and_gradient(x)
    if not np.isfinite(obj):
        raise DivergenceError("non-finite objective at iteration 0")
    trace = [obj]
    step = None
    iters = 0
    for it in range(max_iters):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at iteration {it + 1}")
        gnorm = float(np.max(np.abs(g)))
        if gnorm == 0.0:
            break
        if step is None:
            step = step0 / gnorm
        accepted = False
        while step * gnorm > 1e-14:
            trial = x - step * g
            f = objective(trial)
            if not np.isfinite(f):
                raise DivergenceError(f"non-finite objective at iteration {it + 1}")
            if f < obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        decrease = obj - f
        prev = obj
        x = trial
        obj, g = objective_and_gradient(x)
        trace.append(obj)
        iters = it + 1
        step *= 1.25
        if decrease <= rel_tol * max(abs(prev), 1e-30):
            break
    return x, trace, iters


def _solve_pair(frame_data: np.ndarray, ref_data: np.ndarray, cfg: MotionConfig,
                consistency=None, phi0: np.ndarray | None = None) -> MotionResult:
    """Coarse-to-fine solve for one frame/reference pair.

    ``consistency`` optionally adds ``weight * (1 - cos(warp(moving), target))``
    to the objective as ``(moving_channels, target_channels, weight)``; the
    channel stacks are downsampled alongside the images.
    """
    from .anatomy import cosine_consistency  # local import, avoids a cycle
    from .grid import warp_channels, warp_phi_gradient

    levels = _pyramid_depth(frame_data.shape, cfg.pyramid_levels)
    frames = _build_pyramid(frame_data, levels)
    refs = _build_pyramid(ref_data, levels)
    if consistency is not None:
        moving, target, cons_w = consistency
        movings = _build_pyramid(moving, levels)
        targets = _build_pyramid(target, levels)

    phi = None
    level_traces = []
    total_iters = 0
    for level in range(levels - 1, -1, -1):
        f_lvl, r_lvl = frames[level], refs[level]
        if phi is not None:
            phi = upsample_field(phi, f_lvl.shape)
        elif phi0 is None:
            phi = np.zeros(f_lvl.shape + (2,))
        elif level == 0:
            phi = phi0.copy()
        else:
            phi = resize_bilinear(phi0, f_lvl.shape) / (2.0 ** level)

        if consistency is None:
            def objective(p, f=f_lvl, r=r_lvl):
                return motion_objective(p, f, r, cfg)

            def objective_and_gradient(p, f=f_lvl, r=r_lvl):
                return _motion_objective_and_gradient(p, f, r, cfg)
        else:
            m_lvl, t_lvl = movings[level], targets[level]
            bundle = np.concatenate([f_lvl[..., None], m_lvl], axis=-1)

            def objective(p, b=bundle, r=r_lvl, t=t_lvl):
                return _consistency_objective(p, b, r, t, cons_w, cfg)[0]

            def objective_and_gradient(p, b=bundle, r=r_lvl, t=t_lvl):
                return _consistency_objective(p, b, r, t, cons_w, cfg,
                                              with_grad=True)

        phi, trace, iters = _descend(objective, objective_and_gradient, phi,
                                     cfg.step_size, cfg.max_iters, cfg.rel_tol)
        level_traces.append(trace)
        total_iters += iters

    finest = level_traces[-1]
    return MotionResult(
        phi=DisplacementField(phi),
        final_objective=finest[-1],
        iterations_used=total_iters,
        objective_trace=finest,
        level_traces=level_traces,
    )


def estimate_ddf(ref: Image2D, frame: Image2D, cfg: MotionConfig | None = None) -> MotionResult:
    """Estimate the dense displacement taking ``ref`` grid points into ``frame``.

    The field is initialized to zero at the coarsest pyramid level and
    bilinearly upsampled (values doubled) between levels; backtracking
    halves the step on any objective increase.
    """
    cfg = cfg or MotionConfig()
    if ref.shape != frame.shape:
        raise DimensionMismatchError(f"reference grid {ref.shape} != frame grid {frame.shape}")
    return _solve_pair(frame.data, ref.data, cfg)


def estimate_sequence(seq: CineSequence, cfg: MotionConfig | None = None) -> list[MotionResult]:
    """One MotionResult per frame, independently estimated against the reference.

    The reference frame's entry is the exact zero field so the list stays
    aligned with ``seq.frames``.
    """
    cfg = cfg or MotionConfig()
    ref = seq.reference
    results = []
    for i, frame in enumerate(seq.frames):
        if i == seq.reference_index:
            zero = DisplacementField.zeros(*ref.shape)
            obj = motion_objective(zero, frame, ref, cfg)
            results.append(MotionResult(zero, obj, 0, [obj], [[obj]]))
            continue
        try:
            results.append(estimate_ddf(ref, frame, cfg))
        except DivergenceError as exc:
            raise DivergenceError(f"frame {i}: {exc}") from exc
    return results
