"""Per-frame pathology prediction in the reference space and time-series
aggregation over the cardiac cycle.

Each selected frame contributes a feature stack assembled in the reference
space (motion components, warped anatomy probabilities, warped intensity
with its neighborhood statistics). A linear softmax predicts per-frame
pathology maps; the maps are summed over the cycle, mixed by a trainable
class-mixing matrix (a 1x1 "convolution") and renormalized by softmax.
Joint training cycles block-coordinate updates over the per-case fields,
the anatomy weights and the pathology weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.ndimage import uniform_filter

from .anatomy import (
    AnatomyParams,
    AnatomyTrainConfig,
    ce_loss,
    cosine_consistency,
    dice_loss,
    extract_features,
    predict_from_features,
    softmax,
    softmax_backprop,
    train_anatomy,
)
from .errors import DimensionMismatchError, DivergenceError
from .grid import (
    CineSequence,
    DisplacementField,
    Image2D,
    LabelMap,
    warp_channels,
)
from .motion import MotionConfig, MotionResult, _solve_pair, mse_loss, smoothness_penalty

__all__ = [
    "PATHOLOGY_CLASSES",
    "FeatureSelection",
    "PathologyParams",
    "JointTrainConfig",
    "select_frames",
    "assemble_features",
    "predict_frame_pathology",
    "aggregate_frames",
    "pathology_loss",
    "total_loss",
    "TotalLoss",
    "train_joint",
    "JointModel",
    "segment_case",
    "segment_sweep",
    "SegmentationOutput",
]

# Class 0 is normal myocardium/background, 1 is edema, 2 is scar.
PATHOLOGY_CLASSES = 3


@dataclass(frozen=True)
class FeatureSelection:
    """Which feature groups feed the pathology classifier."""

    use_texture: bool = True
    use_motion: bool = True
    use_anatomy: bool = True

    def __post_init__(self):
        if not (self.use_texture or self.use_motion or self.use_anatomy):
            raise ValueError("at least one feature group must be enabled")

    def channel_count(self, anatomy_classes: int) -> int:
        n = 0
        if self.use_motion:
            n += 2
        if self.use_anatomy:
            n += anatomy_classes
        if self.use_texture:
            n += 3
        return n

    @classmethod
    def from_flags(cls, flags: str) -> "FeatureSelection":
        """Parse a compact flag string such as ``"IPhiL"`` or ``"Phi,L"``."""
        s = flags.replace(",", "").replace(" ", "").lower()
        use_motion = "phi" in s
        s = s.replace("phi", "")
        return cls(use_texture="i" in s, use_motion=use_motion, use_anatomy="l" in s)

    def label(self) -> str:
        parts = []
        if self.use_texture:
            parts.append("I")
        if self.use_motion:
            parts.append("Phi")
        if self.use_anatomy:
            parts.append("L")
        return "+".join(parts)


@dataclass
class PathologyParams:
    """Per-frame classifier weights plus the aggregation mixing matrix."""

    frame_weights: np.ndarray  # (K_path, C)
    mixing: np.ndarray         # (K_path, K_path)

    def __post_init__(self):
        self.frame_weights = np.asarray(self.frame_weights, dtype=np.float64)
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if self.frame_weights.ndim != 2:
            raise DimensionMismatchError("frame weights must be 2-D")
        k = self.frame_weights.shape[0]
        if self.mixing.shape != (k, k):
            raise DimensionMismatchError(
                f"mixing matrix must be ({k}, {k}), got {self.mixing.shape}")
        if not (np.all(np.isfinite(self.frame_weights)) and np.all(np.isfinite(self.mixing))):
            raise ValueError("pathology parameters must be finite")

    @classmethod
    def init(cls, channel_count: int, class_count: int = PATHOLOGY_CLASSES) -> "PathologyParams":
        """Zero frame weights and identity mixing."""
        return cls(np.zeros((class_count, channel_count)), np.eye(class_count))

    @property
    def class_count(self) -> int:
        return self.frame_weights.shape[0]

    @property
    def channel_count(self) -> int:
        return self.frame_weights.shape[1]

    def to_json(self) -> dict:
        return {
            "frame_weights": {"shape": list(self.frame_weights.shape),
                              "values": [float(v) for v in self.frame_weights.ravel()]},
            "mixing": {"shape": list(self.mixing.shape),
                       "values": [float(v) for v in self.mixing.ravel()]},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PathologyParams":
        fw = doc["frame_weights"]
        mx = doc["mixing"]
        return cls(np.asarray(fw["values"]).reshape(fw["shape"]),
                   np.asarray(mx["values"]).reshape(mx["shape"]))


@dataclass
class JointTrainConfig:
    """End-to-end training settings: loss weights, frame selection, schedules."""

    lambda_anatomy: float = 5.0
    lambda_consistency: float = 2.0
    lambda_motion: float = 1.0
    lambda_smooth: float = 100.0
    frame_proportion: float = 4.0 / 6.0
    features: FeatureSelection = dc_field(default_factory=FeatureSelection)
    motion: MotionConfig | None = None
    cycles: int = 3
    anatomy_steps: int = 150
    pathology_steps: int = 1000
    pathology_step_size: float = 0.25
    anatomy_classes: int = 2
    aggregate_logits: bool = False
    consistency_target: str = "predicted"
    seed: int = 0

    def motion_config(self) -> MotionConfig:
        if self.motion is not None:
            return self.motion
        lam = self.lambda_smooth / max(self.lambda_motion, 1e-12)
        return MotionConfig(lambda_smooth=lam, max_iters=400, rel_tol=1e-7)


# ---------------------------------------------------------------------------
# Frame selection and feature assembly
# ---------------------------------------------------------------------------

def select_frames(seq: CineSequence, proportion: float) -> list[int]:
    """The first ``ceil(proportion * n)`` frame indices starting at the
    reference frame, in temporal order (wrapping around the cycle).
    """
    if not 0.0 < proportion <= 1.0:
        raise ValueError(f"frame proportion must lie in (0, 1], got {proportion}")
    n = len(seq)
    count = int(np.ceil(proportion * n))
    return [(seq.reference_index + j) % n for j in range(count)]


def assemble_features(phi: DisplacementField, anatomy_pred: LabelMap | None,
                      frame: Image2D, sel: FeatureSelection) -> np.ndarray:
    """Reference-space feature stack for one frame, shape ``(H, W, C)``.

    Channel order: [dx, dy] then warped anatomy probabilities then
    [warped intensity, 3x3 mean, 3x3 std]; disabled groups are omitted.
    """
    if frame.shape != phi.shape:
        raise DimensionMismatchError(f"frame grid {frame.shape} != field grid {phi.shape}")
    blocks = []
    if sel.use_motion:
        blocks.append(phi.data.copy())
    if sel.use_anatomy:
        if anatomy_pred is None:
            raise ValueError("anatomy features enabled but no anatomy prediction given")
        if anatomy_pred.shape != phi.shape:
            raise DimensionMismatchError("anatomy grid does not match the field grid")
        warped = warp_channels(anatomy_pred.data, phi.data)
        sums = warped.sum(axis=2, keepdims=True)
        blocks.append(warped / np.where(sums > 0.0, sums, 1.0))
    if sel.use_texture:
        moved = warp_channels(frame.data[..., None], phi.data)[..., 0]
        mean = uniform_filter(moved, size=3, mode="nearest")
        sq = uniform_filter(moved ** 2, size=3, mode="nearest")
        std = np.sqrt(np.maximum(sq - mean ** 2, 0.0))
        blocks.append(np.stack([moved, mean, std], axis=-1))
    return np.concatenate(blocks, axis=-1)


# ---------------------------------------------------------------------------
# Prediction and aggregation
# ---------------------------------------------------------------------------

def _frame_logits(params: PathologyParams, stack: np.ndarray) -> np.ndarray:
    if stack.shape[-1] != params.channel_count:
        raise DimensionMismatchError(
            f"stack has {stack.shape[-1]} channels, classifier expects {params.channel_count}")
    return stack @ params.frame_weights.T


def predict_frame_pathology(params: PathologyParams, stack: np.ndarray) -> LabelMap:
    """Per-pixel softmax over the linear logits of one feature stack."""
    return LabelMap(softmax(_frame_logits(params, stack)))


def aggregate_frames(per_frame_preds: list, params: PathologyParams) -> LabelMap:
    """Channel-wise sum over frames, per-pixel class mixing, then softmax."""
    if not per_frame_preds:
        raise ValueError("cannot aggregate an empty prediction list")
    arrays = [p.data if isinstance(p, LabelMap) else np.asarray(p, dtype=np.float64)
              for p in per_frame_preds]
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise DimensionMismatchError("per-frame predictions must share a shape")
    total = np.sum(arrays, axis=0)
    return LabelMap(softmax(total @ params.mixing.T))


def pathology_loss(pred, gold):
    """Dice + cross-entropy on the aggregated pathology map.

    Returns ``(loss, d_loss/d_pred)``.
    """
    d, d_grad = dice_loss(pred, gold)
    c, c_grad = ce_loss(pred, gold)
    return d + c, d_grad + c_grad


# ---------------------------------------------------------------------------
# Case bundling
# ---------------------------------------------------------------------------

@dataclass
class CaseData:
    """Everything the joint loss needs for one case."""

    sequence: CineSequence
    gold_anatomy: LabelMap
    gold_pathology: LabelMap
    name: str = "case"


def _phi_arrays(ddfs) -> list[np.ndarray]:
    out = []
    for d in ddfs:
        if isinstance(d, MotionResult):
            out.append(d.phi.data)
        elif isinstance(d, DisplacementField):
            out.append(d.data)
        else:
            out.append(np.asarray(d, dtype=np.float64))
    return out


def _case_stacks(seq, phis, anatomy_pred_arrays, selection, features) -> np.ndarray:
    """Per-frame feature stacks for the selected frames, shape (F, H, W, C)."""
    stacks = []
    for i in selection:
        pred = LabelMap(anatomy_pred_arrays[i]) if features.use_anatomy else None
        stacks.append(assemble_features(DisplacementField(phis[i]), pred,
                                        seq.frames[i], features))
    return np.stack(stacks)


@dataclass
class TotalLoss:
    """Weighted joint loss with its unweighted components."""

    total: float
    pathology: float
    anatomy_supervised: float
    consistency: float
    motion: float
    smoothness: float

    def to_json(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("total", "pathology", "anatomy_supervised", "consistency",
                 "motion", "smoothness")}


def total_loss(anatomy_params: AnatomyParams, pathology_params: PathologyParams,
               case: CaseData, ddfs, cfg: JointTrainConfig,
               feats: list | None = None) -> TotalLoss:
    """Joint loss over one case: pathology Dice+CE plus the weighted anatomy,
    consistency, photometric and smoothness terms over the selected frames.
    """
    seq = case.sequence
    selection = select_frames(seq, cfg.frame_proportion)
    phis = _phi_arrays(ddfs)
    ref = seq.reference_index
    if feats is None:
        feats = [extract_features(f) for f in seq.frames]
    anat_preds = [predict_from_features(anatomy_params, f) for f in feats]

    sup_d, _ = dice_loss(anat_preds[ref], case.gold_anatomy)
    sup_c, _ = ce_loss(anat_preds[ref], case.gold_anatomy)
    anatomy_sup = sup_d + sup_c

    target = case.gold_anatomy.data if cfg.consistency_target == "gold" else anat_preds[ref]
    consistency = 0.0
    motion_term = 0.0
    smooth_term = 0.0
    for i in selection:
        if i == ref:
            continue
        warped = warp_channels(anat_preds[i], phis[i])
        term, _, _ = cosine_consistency(warped, target)
        consistency += term
        moved = warp_channels(seq.frames[i].data[..., None], phis[i])[..., 0]
        motion_term += mse_loss(moved, seq.reference.data)
        smooth_term += smoothness_penalty(phis[i])

    stacks = _case_stacks(seq, phis, anat_preds, selection, cfg.features)
    if cfg.aggregate_logits:
        maps = [_frame_logits(pathology_params, s) for s in stacks]
    else:
        maps = [softmax(_frame_logits(pathology_params, s)) for s in stacks]
    aggregate = softmax(np.sum(maps, axis=0) @ pathology_params.mixing.T)
    path, _ = pathology_loss(aggregate, case.gold_pathology)

    tot = (path + cfg.lambda_anatomy * anatomy_sup + cfg.lambda_consistency * consistency
           + cfg.lambda_motion * motion_term + cfg.lambda_smooth * smooth_term)
    return TotalLoss(tot, path, anatomy_sup, consistency, motion_term, smooth_term)


# ---------------------------------------------------------------------------
# Pathology-parameter training (phase 3 of the joint schedule)
# ---------------------------------------------------------------------------

def _pathology_loss_and_grads(params: PathologyParams, case_stacks: list,
                              golds: list, aggregate_logits: bool):
    """Mean pathology loss over cases plus gradients for both parameter blocks.

    Each ``case_stacks`` entry is a ``(F, H, W, C)`` array of the case's
    per-frame feature stacks.
    """
    total = 0.0
    d_fw = np.zeros_like(params.frame_weights)
    d_mix = np.zeros_like(params.mixing)
    for stacks, gold in zip(case_stacks, golds):
        stacks = np.asarray(stacks)
        dt = stacks.dtype
        z = stacks @ params.frame_weights.T.astype(dt)  # (F, H, W, K)
        maps = z if aggregate_logits else softmax(z)
        summed = maps.sum(axis=0)
        pred = softmax(summed.astype(np.float64) @ params.mixing.T)
        loss, d_pred = pathology_loss(pred, gold)
        total += loss
        d_logits_agg = softmax_backprop(d_pred, pred)
        d_mix += np.einsum("hwk,hwj->kj", d_logits_agg, summed.astype(np.float64))
        d_summed = (d_logits_agg @ params.mixing).astype(dt)
        if aggregate_logits:
            d_z = np.broadcast_to(d_summed, maps.shape)
        else:
            d_z = softmax_backprop(d_summed[None, ...], maps)
        d_fw += np.einsum("fhwk,fhwc->kc", d_z, stacks).astype(np.float64)
    n = len(case_stacks)
    return total / n, d_fw / n, d_mix / n


def _train_pathology(params: PathologyParams, case_stacks: list, golds: list,
                     steps: int, step_size: float, aggregate_logits: bool,
                     rel_tol: float = 1e-9) -> PathologyParams:
    from .optimize import descend_blocks

    # float32 stacks halve the memory traffic of the training loop; the
    # parameters and loss bookkeeping stay float64.
    case_stacks = [np.asarray(s, dtype=np.float32) for s in case_stacks]

    def objective_and_grads(blocks):
        loss, d_fw, d_mix = _pathology_loss_and_grads(
            PathologyParams(blocks[0], blocks[1]), case_stacks, golds, aggregate_logits)
        return loss, [d_fw, d_mix]

    # Mild growth plus a step cap: aggressive line-search growth rushes the
    # softmax into its saturated (vanished-gradient) collapse basin.
    blocks, _, _ = descend_blocks(objective_and_grads,
                                  [params.frame_weights, params.mixing],
                                  steps, step_size, rel_tol, context="pathology",
                                  growth=1.05, max_step_factor=50.0)
    return PathologyParams(blocks[0], blocks[1])


# ---------------------------------------------------------------------------
# Joint training and inference
# ---------------------------------------------------------------------------

@dataclass
class JointModel:
    """Trained parameters plus the per-case latent fields and loss trace."""

    anatomy: AnatomyParams
    pathology: PathologyParams
    features: FeatureSelection
    frame_proportion: float
    anatomy_classes: int
    aggregate_logits: bool
    case_fields: dict = dc_field(default_factory=dict)
    loss_trace: list = dc_field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema": "cineseg-params-v1",
            "anatomy": self.anatomy.to_json(),
            "pathology": self.pathology.to_json(),
            "features": self.features.label(),
            "frame_proportion": self.frame_proportion,
            "anatomy_classes": self.anatomy_classes,
            "aggregate_logits": self.aggregate_logits,
            "loss_trace": [float(v) for v in self.loss_trace],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "JointModel":
        return cls(
            anatomy=AnatomyParams.from_json(doc["anatomy"]),
            pathology=PathologyParams.from_json(doc["pathology"]),
            features=FeatureSelection.from_flags(doc["features"]),
            frame_proportion=float(doc["frame_proportion"]),
            anatomy_classes=int(doc["anatomy_classes"]),
            aggregate_logits=bool(doc.get("aggregate_logits", False)),
            loss_trace=list(doc.get("loss_trace", [])),
        )


def _solve_case_fields(case: CaseData, selection, anatomy_params, cfg,
                       warm: list | None = None,
                       feats: list | None = None) -> list[np.ndarray]:
    """Phase 1: per-frame fields against photometric + smoothness (+ weighted
    consistency once anatomy predictions are informative)."""
    seq = case.sequence
    ref = seq.reference_index
    mcfg = cfg.motion_config()
    cons_scale = cfg.lambda_consistency / max(cfg.lambda_motion, 1e-12)
    if feats is None:
        feats = [extract_features(f) for f in seq.frames]
    target = predict_from_features(anatomy_params, feats[ref])
    informative = float(np.max(np.abs(anatomy_params.weights))) > 0.0
    phis = [np.zeros(seq.shape + (2,)) for _ in seq.frames]
    for i in selection:
        if i == ref:
            continue
        frame = seq.frames[i]
        consistency = None
        if informative and cons_scale > 0.0:
            moving = predict_from_features(anatomy_params, feats[i])
            consistency = (moving, target, cons_scale)
        phi0 = warm[i] if warm is not None else None
        local_cfg = mcfg if phi0 is None else replace(mcfg, pyramid_levels=1)
        result = _solve_pair(frame.data, seq.reference.data, local_cfg,
                             consistency=consistency, phi0=phi0)
        phis[i] = result.phi.data
    return phis


def train_joint(cases: list, cfg: JointTrainConfig | None = None) -> JointModel:
    """Block-coordinate training over one or more cases.

    Each cycle: (1) per-case field updates against the photometric,
    smoothness and consistency terms, (2) anatomy weights against the
    supervised + consistency terms, (3) pathology weights against the
    aggregated Dice+CE. The recorded per-cycle total loss (averaged over
    cases) is non-increasing in practice because phases 1-2 converge first.
    """
    cfg = cfg or JointTrainConfig()
    if not cases:
        raise ValueError("training needs at least one case")
    selections = [select_frames(c.sequence, cfg.frame_proportion) for c in cases]
    case_feats = [[extract_features(f) for f in c.sequence.frames] for c in cases]
    anatomy_params = AnatomyParams.zeros(cfg.anatomy_classes)
    channel_count = cfg.features.channel_count(cfg.anatomy_classes)
    pathology_params = PathologyParams.init(channel_count)
    case_phis = [None] * len(cases)
    trace = []

    acfg = AnatomyTrainConfig(steps=cfg.anatomy_steps,
                              lambda_supervised=cfg.lambda_anatomy,
                              lambda_consistency=cfg.lambda_consistency,
                              consistency_target=cfg.consistency_target)

    for cycle in range(cfg.cycles):
        # Phase 1: per-case displacement fields.
        for ci, case in enumerate(cases):
            case_phis[ci] = _solve_case_fields(case, selections[ci], anatomy_params,
                                               cfg, warm=case_phis[ci],
                                               feats=case_feats[ci])
        # Phase 2: anatomy weights (consistency over the selected frames).
        for ci, case in enumerate(cases):
            if len(selections[ci]) < 2:
                sub_seq, sub_phis = case.sequence, case_phis[ci]
                sub_feats = case_feats[ci]
                local = replace(acfg, lambda_consistency=0.0)
            else:
                sub_frames = [case.sequence.frames[i] for i in selections[ci]]
                sub_ref = selections[ci].index(case.sequence.reference_index)
                sub_seq = CineSequence(sub_frames, sub_ref)
                sub_phis = [case_phis[ci][i] for i in selections[ci]]
                sub_feats = [case_feats[ci][i] for i in selections[ci]]
                local = acfg
            anatomy_params = train_anatomy(sub_seq, sub_phis, case.gold_anatomy,
                                           local, initial=anatomy_params,
                                           feats_list=sub_feats)
        # Phase 3: pathology weights on all cases at once.
        anat_preds = [[predict_from_features(anatomy_params, f) for f in case_feats[ci]]
                      for ci in range(len(cases))]
        stacks = [_case_stacks(c.sequence, case_phis[ci], anat_preds[ci],
                               selections[ci], cfg.features)
                  for ci, c in enumerate(cases)]
        golds = [c.gold_pathology.data for c in cases]
        pathology_params = _train_pathology(pathology_params, stacks, golds,
                                            cfg.pathology_steps, cfg.pathology_step_size,
                                            cfg.aggregate_logits)

        cycle_loss = float(np.mean([
            total_loss(anatomy_params, pathology_params, case, case_phis[ci], cfg,
                       feats=case_feats[ci]).total
            for ci, case in enumerate(cases)]))
        if not np.isfinite(cycle_loss):
            raise DivergenceError(f"non-finite joint loss after cycle {cycle + 1}")
        trace.append(cycle_loss)

    model = JointModel(anatomy_params, pathology_params, cfg.features,
                       cfg.frame_proportion, cfg.anatomy_classes, cfg.aggregate_logits,
                       loss_trace=trace)
    model.case_fields = {cases[ci].name: case_phis[ci] for ci in range(len(cases))}
    return model


def segment_sweep(seq: CineSequence, model: JointModel, proportions: list,
                  cfg: JointTrainConfig | None = None) -> dict:
    """Aggregated prediction per frame proportion, reusing one field solve.

    Frame selections are prefixes of each other, so the fields, anatomy
    predictions and per-frame maps are computed once at the largest
    proportion and aggregation is repeated on prefixes.
    """
    top = max(proportions)
    cfg = cfg or JointTrainConfig(features=model.features,
                                  frame_proportion=top,
                                  anatomy_classes=model.anatomy_classes,
                                  aggregate_logits=model.aggregate_logits)
    cfg = replace(cfg, frame_proportion=top)
    full = segment_case(seq, model, cfg)
    if model.aggregate_logits:
        stacks = _case_stacks(seq, [f.data for f in full.fields],
                              [p.data for p in _all_anatomy(seq, model)],
                              full.selection, model.features)
        maps = stacks @ model.pathology.frame_weights.T
    else:
        maps = np.stack([p.data for p in full.per_frame])
    out = {}
    for proportion in proportions:
        count = len(select_frames(seq, proportion))
        summed = maps[:count].sum(axis=0)
        out[proportion] = LabelMap(softmax(summed @ model.pathology.mixing.T))
    return out


def _all_anatomy(seq, model):
    return [LabelMap(predict_from_features(model.anatomy, extract_features(f)))
            for f in seq.frames]


@dataclass
class SegmentationOutput:
    """Inference products for one case."""

    aggregate: LabelMap
    per_frame: list
    fields: list
    anatomy_reference: LabelMap
    selection: list


def segment_case(seq: CineSequence, model: JointModel,
                 cfg: JointTrainConfig | None = None) -> SegmentationOutput:
    """Full inference on one unseen sequence with trained parameters."""
    cfg = cfg or JointTrainConfig(features=model.features,
                                  frame_proportion=model.frame_proportion,
                                  anatomy_classes=model.anatomy_classes,
                                  aggregate_logits=model.aggregate_logits)
    selection = select_frames(seq, cfg.frame_proportion)
    dummy = CaseData(seq,
                     LabelMap(np.full(seq.shape + (model.anatomy.class_count,),
                                      1.0 / model.anatomy.class_count)),
                     LabelMap(np.full(seq.shape + (PATHOLOGY_CLASSES,),
                                      1.0 / PATHOLOGY_CLASSES)))
    phis = _solve_case_fields(dummy, selection, model.anatomy, cfg)
    anat_preds = [predict_from_features(model.anatomy, extract_features(f))
                  for f in seq.frames]
    stacks = _case_stacks(seq, phis, anat_preds, selection, model.features)
    if model.aggregate_logits:
        maps = [_frame_logits(model.pathology, s) for s in stacks]
        aggregate = LabelMap(softmax(np.sum(maps, axis=0) @ model.pathology.mixing.T))
        per_frame = [LabelMap(softmax(m)) for m in maps]
    else:
        per_frame = [predict_frame_pathology(model.pathology, s) for s in stacks]
        aggregate = aggregate_frames(per_frame, model.pathology)
    return SegmentationOutput(
        aggregate=aggregate,
        per_frame=per_frame,
        fields=[DisplacementField(p) for p in phis],
        anatomy_reference=LabelMap(anat_preds[seq.reference_index]),
        selection=selection,
    )
