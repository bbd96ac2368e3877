"""Image, label-map and displacement-field containers plus the warping and
differential operators every other module consumes.

Conventions used throughout the package:

* Arrays are row-major ``(H, W)`` with ``data[y, x]``; pixel centers sit at
  integer coordinates.
* Displacements are expressed in pixel units and converted to mm only when
  metrics are reported.
* Sampling outside the grid clamps to the border (clamp-to-edge), so all
  sampling operations are total functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError

__all__ = [
    "Image2D",
    "CineSequence",
    "DisplacementField",
    "LabelMap",
    "bilinear_sample",
    "warp_image",
    "warp_labelmap",
    "warp_channels",
    "warp_adjoint",
    "warp_phi_gradient",
    "field_gradient",
]


@dataclass
class Image2D:
    """Scalar intensity grid with physical pixel spacing.

    ``data`` is ``(H, W)`` float64 with every value in [0, 1];
    ``spacing`` is ``(sx, sy)`` in mm per pixel.
    """

    data: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionMismatchError(f"image data must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]; use Image2D.from_raw to normalize")

    @classmethod
    def from_raw(cls, data, spacing=(1.0, 1.0)) -> "Image2D":
        """Min-max normalize arbitrary finite intensities into [0, 1]."""
        arr = np.asarray(data, dtype=np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        if hi > lo:
            arr = (arr - lo) / (hi - lo)
        else:
            arr = np.zeros_like(arr)
        return cls(arr, spacing)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class CineSequence:
    """Ordered frame list with a designated reference (end-diastolic) frame."""

    frames: list[Image2D]
    reference_index: int = 0

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a cine sequence needs at least 2 frames")
        shape = self.frames[0].shape
        spacing = self.frames[0].spacing
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise DimensionMismatchError(f"frame {i} shape {f.shape} != {shape}")
            if f.spacing != spacing:
                raise DimensionMismatchError(f"frame {i} spacing {f.spacing} != {spacing}")
        if not (0 <= self.reference_index < len(self.frames)):
            raise ValueError(f"reference index {self.reference_index} out of range")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def reference(self) -> Image2D:
        return self.frames[self.reference_index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape

    @property
    def spacing(self) -> tuple[float, float]:
        return self.frames[0].spacing


@dataclass
class DisplacementField:
    """Per-pixel 2-vector displacement on the reference grid, pixel units.

    ``data`` is ``(H, W, 2)`` with channel 0 = dx and channel 1 = dy.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise DimensionMismatchError(f"field data must be (H, W, 2), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("displacement field contains non-finite values")

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width, 2)))

    @property
    def dx(self) -> np.ndarray:
        return self.data[..., 0]

    @property
    def dy(self) -> np.ndarray:
        return self.data[..., 1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass
class LabelMap:
    """Per-pixel class-probability map, normalized per pixel.

    ``data`` is ``(H, W, K)``; every probability lies in [0, 1] and each
    pixel's channel vector sums to 1 within 1e-6.
    """

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise DimensionMismatchError(f"label data must be (H, W, K), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("label map contains non-finite values")
        if self.data.min() < -1e-9 or self.data.max() > 1.0 + 1e-9:
            raise ValueError("label probabilities must lie in [0, 1]")
        sums = self.data.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("per-pixel label probabilities must sum to 1 within 1e-6")

    @classmethod
    def from_classes(cls, classes: np.ndarray, class_count: int) -> "LabelMap":
        """One-hot label map from an integer class-index image."""
        classes = np.asarray(classes, dtype=int)
        data = np.zeros(classes.shape + (class_count,))
        for k in range(class_count):
            data[..., k] = classes == k
        return cls(data)

    @property
    def class_count(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def hard_classes(self) -> np.ndarray:
        """Per-pixel argmax; ties break toward the lowest class index."""
        return np.argmax(self.data, axis=2)


# ---------------------------------------------------------------------------
# Sampling and warping
# ---------------------------------------------------------------------------

def _sample_prepare(data: np.ndarray, x, y):
    """Clamped bilinear corner indices and weights for (x, y) sample points."""
    h, w = data.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    return x0, x1, y0, y1, fx, fy


def bilinear_sample(img, x, y):
    """Bilinear interpolation of the four neighbors of ``(x, y)``.

    Accepts an :class:`Image2D` or a bare 2-D array. Coordinates may be
    scalars or arrays (broadcast together); values outside the grid clamp
    to the border, so the function is total.
    """
    data = img.data if isinstance(img, Image2D) else np.asarray(img, dtype=np.float64)
    x0, x1, y0, y1, fx, fy = _sample_prepare(data, x, y)
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    if out.ndim == 0:
        return float(out)
    return out


def sample_with_spatial_grad(data: np.ndarray, x, y):
    """Sample values plus the sampling derivatives d(value)/dx and d(value)/dy.

    Where the clamp is active the derivative with respect to the *unclamped*
    coordinate is zero, matching the piecewise-flat extension used by
    :func:`bilinear_sample`.
    """
    h, w = data.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0, x1, y0, y1, fx, fy = _sample_prepare(data, x, y)
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    val = top * (1.0 - fy) + bot * fy
    gx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
    gy = bot - top
    inside_x = (x >= 0.0) & (x <= w - 1.0)
    inside_y = (y >= 0.0) & (y <= h - 1.0)
    gx = np.where(inside_x, gx, 0.0)
    gy = np.where(inside_y, gy, 0.0)
    return val, gx, gy


def _sample_grid(phi_data: np.ndarray):
    h, w = phi_data.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + phi_data[..., 0], ys + phi_data[..., 1]


def _gather_bilinear(data: np.ndarray, prep) -> np.ndarray:
    x0, x1, y0, y1, fx, fy = prep
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _gather_with_grad(data: np.ndarray, prep, inside_x, inside_y):
    """Value plus clamp-aware spatial derivatives for pre-computed indices."""
    x0, x1, y0, y1, fx, fy = prep
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    val = top * (1.0 - fy) + bot * fy
    gx = np.where(inside_x, (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy, 0.0)
    gy = np.where(inside_y, bot - top, 0.0)
    return val, gx, gy


def warp_channels(channels: np.ndarray, phi_data: np.ndarray) -> np.ndarray:
    """Warp an ``(H, W, C)`` stack channel-wise: out(c) = in(c + phi(c))."""
    if channels.shape[:2] != phi_data.shape[:2]:
        raise DimensionMismatchError(
            f"channel grid {channels.shape[:2]} != field grid {phi_data.shape[:2]}")
    xs, ys = _sample_grid(phi_data)
    prep = _sample_prepare(channels[..., 0], xs, ys)
    out = np.empty_like(channels, dtype=np.float64)
    for k in range(channels.shape[2]):
        out[..., k] = _gather_bilinear(channels[..., k], prep)
    return out


def warp_image(img: Image2D, phi: DisplacementField) -> Image2D:
    """Resample ``img`` at ``c + phi(c)`` for every pixel c."""
    if img.shape != phi.shape:
        raise DimensionMismatchError(f"image grid {img.shape} != field grid {phi.shape}")
    xs, ys = _sample_grid(phi.data)
    return Image2D(bilinear_sample(img.data, xs, ys), img.spacing)


def warp_labelmap(lbl: LabelMap, phi: DisplacementField) -> LabelMap:
    """Warp each class channel independently, then renormalize per pixel.

    Channel-wise bilinear interpolation of a normalized map already sums to
    1 up to float roundoff (the interpolation weights sum to 1 and clamping
    only reuses in-grid values); the renormalization pins the invariant
    exactly.
    """
    if lbl.shape != phi.shape:
        raise DimensionMismatchError(f"label grid {lbl.shape} != field grid {phi.shape}")
    warped = warp_channels(lbl.data, phi.data)
    sums = warped.sum(axis=2, keepdims=True)
    return LabelMap(warped / np.where(sums > 0.0, sums, 1.0))


class PrecomputedWarp:
    """Bilinear warp for a fixed field, cached as a sparse matrix.

    Weight training repeatedly warps predictions through unchanged fields;
    building the 4-entry-per-row gather matrix once makes both the warp and
    its adjoint a sparse matmul.
    """

    def __init__(self, phi_data: np.ndarray):
        from scipy.sparse import csr_matrix

        h, w = phi_data.shape[:2]
        xs, ys = _sample_grid(phi_data)
        x0, x1, y0, y1, fx, fy = _sample_prepare(np.empty((h, w)), xs, ys)
        n = h * w
        rows = np.repeat(np.arange(n), 4)
        cols = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                        axis=-1).reshape(-1)
        weights = np.stack([(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy),
                            (1.0 - fx) * fy, fx * fy], axis=-1).reshape(-1)
        self.shape = (h, w)
        self.matrix = csr_matrix((weights, (rows, cols.ravel())), shape=(n, n))
        self.matrix_t = self.matrix.T.tocsr()

    def apply(self, channels: np.ndarray) -> np.ndarray:
        h, w = self.shape
        flat = channels.reshape(h * w, -1)
        return np.asarray(self.matrix @ flat).reshape(channels.shape)

    def adjoint(self, upstream: np.ndarray) -> np.ndarray:
        h, w = self.shape
        flat = upstream.reshape(h * w, -1)
        return np.asarray(self.matrix_t @ flat).reshape(upstream.shape)


def warp_adjoint(upstream: np.ndarray, phi_data: np.ndarray) -> np.ndarray:
    """Adjoint of the channel-wise bilinear warp.

    Scatters ``upstream`` (the gradient with respect to the warped stack)
    back onto the input grid, i.e. the transpose of the linear map
    ``channels -> warp_channels(channels, phi)``.
    """
    h, w = phi_data.shape[:2]
    upstream = np.asarray(upstream, dtype=np.float64)
    squeeze = upstream.ndim == 2
    if squeeze:
        upstream = upstream[..., None]
    xs, ys = _sample_grid(phi_data)
    x0, x1, y0, y1, fx, fy = _sample_prepare(np.empty((h, w)), xs, ys)
    n = h * w
    flat = [
        ((y0 * w + x0).ravel(), ((1.0 - fx) * (1.0 - fy)).ravel()),
        ((y0 * w + x1).ravel(), (fx * (1.0 - fy)).ravel()),
        ((y1 * w + x0).ravel(), ((1.0 - fx) * fy).ravel()),
        ((y1 * w + x1).ravel(), (fx * fy).ravel()),
    ]
    out = np.zeros((h, w, upstream.shape[2]))
    for k in range(upstream.shape[2]):
        up = upstream[..., k].ravel()
        acc = np.zeros(n)
        for idx, wgt in flat:
            acc += np.bincount(idx, weights=wgt * up, minlength=n)
        out[..., k] = acc.reshape(h, w)
    return out[..., 0] if squeeze else out


def warp_phi_gradient(channels: np.ndarray, phi_data: np.ndarray,
                      upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * warp_channels(channels, phi))`` w.r.t. phi.

    ``channels`` and ``upstream`` are ``(H, W, C)`` (or 2-D for a single
    channel); the result is ``(H, W, 2)``.
    """
    channels = np.asarray(channels, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if channels.ndim == 2:
        channels = channels[..., None]
    if upstream.ndim == 2:
        upstream = upstream[..., None]
    h, w = phi_data.shape[:2]
    xs, ys = _sample_grid(phi_data)
    x0, x1, y0, y1, fx, fy = _sample_prepare(channels[..., 0], xs, ys)
    inside_x = (xs >= 0.0) & (xs <= w - 1.0)
    inside_y = (ys >= 0.0) & (ys <= h - 1.0)
    grad = np.zeros(phi_data.shape[:2] + (2,))
    for k in range(channels.shape[2]):
        data = channels[..., k]
        v00 = data[y0, x0]
        v01 = data[y0, x1]
        v10 = data[y1, x0]
        v11 = data[y1, x1]
        gx = np.where(inside_x, (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy, 0.0)
        gy = np.where(inside_y, (v10 + (v11 - v10) * fx) - (v00 + (v01 - v00) * fx), 0.0)
        grad[..., 0] += upstream[..., k] * gx
        grad[..., 1] += upstream[..., k] * gy
    return grad


# ---------------------------------------------------------------------------
# Differential operators
# ---------------------------------------------------------------------------

def _forward_diff(a: np.ndarray, axis: int) -> np.ndarray:
    """Forward differences; the last row/column falls back to backward."""
    g = np.empty_like(a)
    if a.shape[axis] < 2:
        g[...] = 0.0
        return g
    if axis == 1:
        g[:, :-1] = a[:, 1:] - a[:, :-1]
        g[:, -1] = a[:, -1] - a[:, -2]
    else:
        g[:-1, :] = a[1:, :] - a[:-1, :]
        g[-1, :] = a[-1, :] - a[-2, :]
    return g


def _forward_diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of :func:`_forward_diff` (same stencil layout)."""
    out = np.zeros_like(g)
    if g.shape[axis] < 2:
        return out
    if axis == 1:
        out[:, :-1] -= g[:, :-1]
        out[:, 1:] += g[:, :-1]
        out[:, -1] += g[:, -1]
        out[:, -2] -= g[:, -1]
    else:
        out[:-1, :] -= g[:-1, :]
        out[1:, :] += g[:-1, :]
        out[-1, :] += g[-1, :]
        out[-2, :] -= g[-1, :]
    return out


def field_gradient(phi: DisplacementField) -> np.ndarray:
    """Per-pixel 2x2 Jacobian of the displacement field.

    Returns ``(H, W, 2, 2)`` where ``jac[..., i, j]`` is the derivative of
    displacement component i (0 = dx, 1 = dy) along axis j (0 = x, 1 = y),
    using forward differences with a backward fallback on the last
    row/column.
    """
    data = phi.data if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    h, w = data.shape[:2]
    jac = np.empty((h, w, 2, 2))
    for i in range(2):
        jac[..., i, 0] = _forward_diff(data[..., i], axis=1)
        jac[..., i, 1] = _forward_diff(data[..., i], axis=0)
    return jac
