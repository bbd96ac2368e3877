"""Per-pixel anatomy classification over handcrafted features.

A trainable linear softmax over six per-pixel features stands in for a
learned encoder: supervised Dice + cross-entropy on the labeled reference
frame, plus a cosine consistency term that pulls the warped prediction of
every other frame toward the reference-frame prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DegenerateInputError, DimensionMismatchError, DivergenceError
from .grid import DisplacementField, Image2D, LabelMap, warp_adjoint, warp_channels

__all__ = [
    "FEATURE_COUNT",
    "AnatomyParams",
    "AnatomyTrainConfig",
    "extract_features",
    "predict_anatomy",
    "dice_loss",
    "ce_loss",
    "cosine_consistency",
    "anatomy_loss",
    "train_anatomy",
]

FEATURE_COUNT = 6
DICE_EPS = 1e-5
LOG_CLAMP = 1e-7


@dataclass
class AnatomyParams:
    """Weight matrix mapping the per-pixel features to class logits."""

    weights: np.ndarray  # (K, FEATURE_COUNT)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != FEATURE_COUNT:
            raise DimensionMismatchError(
                f"anatomy weights must be (K, {FEATURE_COUNT}), got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("anatomy weights must be finite")

    @classmethod
    def zeros(cls, class_count: int = 2) -> "AnatomyParams":
        return cls(np.zeros((class_count, FEATURE_COUNT)))

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> dict:
        return {"shape": list(self.weights.shape),
                "values": [float(v) for v in self.weights.ravel()]}

    @classmethod
    def from_json(cls, doc: dict) -> "AnatomyParams":
        shape = tuple(doc["shape"])
        return cls(np.asarray(doc["values"], dtype=np.float64).reshape(shape))


@dataclass
class AnatomyTrainConfig:
    steps: int = 400
    step_size: float = 1.0
    rel_tol: float = 1e-8
    lambda_supervised: float = 5.0
    lambda_consistency: float = 2.0
    # The consistency target defaults to the *predicted* reference map; the
    # gold reference label can be selected instead.
    consistency_target: str = "predicted"


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def extract_features(img: Image2D) -> np.ndarray:
    """Deterministic per-pixel features, shape ``(H, W, 6)``.

    Channels: intensity, 3x3 local mean, 3x3 local standard deviation,
    gradient magnitude (central differences), normalized radial distance
    from the image center, constant bias. Neighborhoods clamp at borders.
    """
    data = img.data if isinstance(img, Image2D) else np.asarray(img, dtype=np.float64)
    h, w = data.shape
    local_mean = uniform_filter(data, size=3, mode="nearest")
    local_sq = uniform_filter(data ** 2, size=3, mode="nearest")
    local_std = np.sqrt(np.maximum(local_sq - local_mean ** 2, 0.0))
    gy, gx = np.gradient(data)
    grad_mag = np.hypot(gx, gy)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    radial = np.hypot(xs - cx, ys - cy) / max(np.hypot(cx, cy), 1.0)
    feats = np.empty((h, w, FEATURE_COUNT))
    feats[..., 0] = data
    feats[..., 1] = local_mean
    feats[..., 2] = local_std
    feats[..., 3] = grad_mag
    feats[..., 4] = radial
    feats[..., 5] = 1.0
    return feats


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backprop(d_probs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    return probs * (d_probs - inner)


def predict_from_features(params: AnatomyParams, feats: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities, shape ``(H, W, K)``."""
    logits = feats @ params.weights.T
    return softmax(logits)


def predict_anatomy(params: AnatomyParams, img: Image2D) -> LabelMap:
    """Softmax over the linear feature logits; always a valid label map."""
    return LabelMap(predict_from_features(params, extract_features(img)))


# ---------------------------------------------------------------------------
# Losses (each returns the scalar plus analytic gradients)
# ---------------------------------------------------------------------------

def _as_label_array(x) -> np.ndarray:
    return x.data if isinstance(x, LabelMap) else np.asarray(x, dtype=np.float64)


def dice_loss(pred, gold):
    """One minus soft Dice, averaged over foreground classes (class 0 is
    background). Returns ``(loss, d_loss/d_pred)``.
    """
    p = _as_label_array(pred)
    g = _as_label_array(gold)
    if p.shape != g.shape:
        raise DimensionMismatchError(f"pred shape {p.shape} != gold shape {g.shape}")
    k = p.shape[2]
    fg = range(1, k) if k > 1 else range(k)
    nfg = len(fg)
    loss = 0.0
    grad = np.zeros_like(p)
    for c in fg:
        pc, gc = p[..., c], g[..., c]
        num = 2.0 * float(np.sum(pc * gc)) + DICE_EPS
        den = float(np.sum(pc) + np.sum(gc)) + DICE_EPS
        loss += 1.0 - num / den
        grad[..., c] = -(2.0 * gc * den - num) / den ** 2
    return loss / nfg, grad / nfg


def ce_loss(pred, gold):
    """Mean per-pixel cross-entropy with probabilities clamped to
    [1e-7, 1] before the log. Returns ``(loss, d_loss/d_pred)``.
    """
    p = _as_label_array(pred)
    g = _as_label_array(gold)
    if p.shape != g.shape:
        raise DimensionMismatchError(f"pred shape {p.shape} != gold shape {g.shape}")
    n = p.shape[0] * p.shape[1]
    pc = np.clip(p, LOG_CLAMP, 1.0)
    loss = float(np.sum(-g * np.log(pc))) / n
    grad = np.where((p > LOG_CLAMP) & (p <= 1.0), -g / pc, 0.0) / n
    return loss, grad


def cosine_consistency(warped_pred, ref_pred):
    """1 minus the cosine similarity of the flattened probability vectors.

    Returns ``(loss, d_loss/d_warped, d_loss/d_ref)`` with the gradients
    shaped like the inputs.
    """
    a = _as_label_array(warped_pred)
    b = _as_label_array(ref_pred)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape {a.shape} != {b.shape}")
    av = a.ravel()
    bv = b.ravel()
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine consistency of a zero-norm map")
    dot = float(np.dot(av, bv))
    cos = dot / (na * nb)
    grad_a = -(bv / (na * nb) - dot * av / (na ** 3 * nb)).reshape(a.shape)
    grad_b = -(av / (na * nb) - dot * bv / (nb ** 3 * na)).reshape(b.shape)
    return 1.0 - cos, grad_a, grad_b


# ---------------------------------------------------------------------------
# Composite loss and training
# ---------------------------------------------------------------------------

class _ConsistencyPass:
    """Batched forward/backward pass for the consistency sum.

    Stacks all non-reference frames and applies their warps as one
    block-diagonal sparse matmul; built once per training run since the
    fields are fixed while the weights move.
    """

    def __init__(self, feats_list, phi_list, ref_pos):
        from scipy.sparse import block_diag

        from .grid import PrecomputedWarp

        self.ref_pos = ref_pos
        self.feats = np.stack(feats_list)
        self.nonref = [i for i in range(len(feats_list)) if i != ref_pos]
        mats = []
        for i in self.nonref:
            phi = phi_list[i]
            phi_data = phi.phi.data if hasattr(phi, "phi") else (
                phi.data if isinstance(phi, DisplacementField) else np.asarray(phi))
            mats.append(PrecomputedWarp(phi_data).matrix)
        self.warp = block_diag(mats, format="csr")
        self.warp_t = self.warp.T.tocsr()

    def __call__(self, weights, target_mode, gold):
        logits = self.feats @ weights.T
        preds = softmax(logits)
        ref_pred = preds[self.ref_pos]
        target = gold if target_mode == "gold" else ref_pred
        moving = preds[self.nonref]
        m, h, w, k = moving.shape
        warped = np.asarray(self.warp @ moving.reshape(m * h * w, k)).reshape(moving.shape)

        nb = float(np.linalg.norm(target))
        dots = np.einsum("mhwk,hwk->m", warped, target)
        na = np.sqrt(np.einsum("mhwk,mhwk->m", warped, warped))
        if nb == 0.0 or np.any(na == 0.0):
            raise DegenerateInputError("cosine consistency of a zero-norm map")
        loss = float(np.sum(1.0 - dots / (na * nb)))

        na_ = na[:, None, None, None]
        dots_ = dots[:, None, None, None]
        d_warped = -(target[None] / (na_ * nb) - dots_ * warped / (na_ ** 3 * nb))
        # Channel-wise warping of a softmax map keeps the per-pixel sum at 1,
        # so renormalization is gradient-transparent and skipped here.
        d_moving = np.asarray(self.warp_t @ d_warped.reshape(m * h * w, k)).reshape(moving.shape)
        d_logits = softmax_backprop(d_moving, moving)
        d_weights = np.einsum("mhwk,mhwf->kf", d_logits, self.feats[self.nonref])
        if target_mode == "predicted":
            d_target = -np.einsum("mhwk->hwk", warped / (na_ * nb)) \
                + np.einsum("m,hwk->hwk", dots / (na * nb ** 3), target)
            d_logits_r = softmax_backprop(d_target, ref_pred)
            d_weights += np.einsum("hwk,hwf->kf", d_logits_r, self.feats[self.ref_pos])
        return loss, d_weights


def _consistency_terms(weights, feats_list, phi_list, ref_pos, target_mode,
                       gold_ref, cons_pass: "_ConsistencyPass | None" = None):
    """Consistency sum and its weight gradient (see :class:`_ConsistencyPass`)."""
    if cons_pass is None:
        cons_pass = _ConsistencyPass(feats_list, phi_list, ref_pos)
    return cons_pass(weights, target_mode, _as_label_array(gold_ref))


def anatomy_loss(params: AnatomyParams, seq, ddfs, gold_ref,
                 lambda_supervised: float = 5.0, lambda_consistency: float = 2.0,
                 consistency_target: str = "predicted",
                 feats_list: list | None = None,
                 cons_pass: "_ConsistencyPass | None" = None):
    """Supervised Dice+CE on the reference frame plus the weighted
    consistency sum over the other frames.

    ``ddfs`` is aligned with ``seq.frames`` (reference entry ignored).
    Returns ``(loss, d_loss/d_weights)``.
    """
    if feats_list is None:
        feats_list = [extract_features(f) for f in seq.frames]
    ref_pos = seq.reference_index
    gold = _as_label_array(gold_ref)

    ref_pred = predict_from_features(params, feats_list[ref_pos])
    d_loss, d_dice = dice_loss(ref_pred, gold)
    c_loss, d_ce = ce_loss(ref_pred, gold)
    sup = d_loss + c_loss
    d_logits = softmax_backprop(d_dice + d_ce, ref_pred)
    grad = lambda_supervised * np.einsum("hwk,hwf->kf", d_logits, feats_list[ref_pos])
    total = lambda_supervised * sup

    if lambda_consistency > 0.0:
        cons, d_w = _consistency_terms(params.weights, feats_list, ddfs,
                                       ref_pos, consistency_target, gold, cons_pass)
        total += lambda_consistency * cons
        grad += lambda_consistency * d_w
    return total, grad


def train_anatomy(seq, ddfs, gold_ref, cfg: AnatomyTrainConfig | None = None,
                  class_count: int | None = None,
                  initial: "AnatomyParams | None" = None,
                  feats_list: list | None = None) -> AnatomyParams:
    """Backtracking gradient descent on :func:`anatomy_loss` from zero weights
    (or ``initial`` when warm-starting).

    Deterministic; the final loss never exceeds the initial loss.
    """
    from .optimize import descend_blocks

    cfg = cfg or AnatomyTrainConfig()
    gold = _as_label_array(gold_ref)
    k = class_count or gold.shape[2]
    if feats_list is None:
        feats_list = [extract_features(f) for f in seq.frames]
    weights = initial.weights if initial is not None else np.zeros((k, FEATURE_COUNT))

    cons_pass = None
    if cfg.lambda_consistency > 0.0:
        cons_pass = _ConsistencyPass(feats_list, ddfs, seq.reference_index)

    def objective_and_grads(blocks):
        loss, grad = anatomy_loss(AnatomyParams(blocks[0]), seq, ddfs, gold,
                                  cfg.lambda_supervised, cfg.lambda_consistency,
                                  cfg.consistency_target, feats_list, cons_pass)
        return loss, [grad]

    blocks, _, _ = descend_blocks(objective_and_grads, [weights], cfg.steps,
                                  cfg.step_size, cfg.rel_tol, context="anatomy")
    return AnatomyParams(blocks[0])
