"""Deterministic synthetic cine phantom with known ground truth.

An annular "myocardium" contracts radially over the cycle with a cosine
temporal profile; within a configurable angular sector the motion is
attenuated (stationary infarct) and the sector carries scar intensity,
surrounded by an edema margin with its own intensity. Frames are rendered
by warping the discrete reference image with the analytic field, so the
emitted ground-truth fields *exactly* regenerate every frame through the
package's own warp; seeded Gaussian noise is added afterwards so the
noiseless channel stays exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .errors import ConfigError, DataError
from .f32g import read_f32g, write_f32g
from .grid import CineSequence, DisplacementField, Image2D, LabelMap, warp_image

__all__ = [
    "PhantomConfig",
    "SyntheticCase",
    "generate",
    "analytic_masks",
    "frame_anatomy_mask",
    "forward_field",
    "case_manifest",
    "load_case",
    "vary_config",
]

SCHEMA = "phantom-v1"
_BLEND_DEG = 10.0       # angular width of the motion blend outside the sector
_EDGE_SIGMA = 0.8       # anti-aliasing blur of the rendered reference, px
_FALLOFF_MARGIN = 2.0   # radial window stays flat this far beyond the epicardium
_FALLOFF_WIDTH = 8.0    # then decays to zero over this many px


@dataclass
class PhantomConfig:
    size: int = 64
    spacing: tuple[float, float] = (1.0, 1.0)
    endo_radius: float = 9.0
    epi_radius: float = 17.0
    contraction_amplitude: float = 0.16   # peak inward contraction, fraction of radius
    frame_count: int = 25
    scar_start_deg: float = 30.0
    scar_extent_deg: float = 90.0
    scar_transmural_fraction: float = 0.7
    edema_margin_px: float = 4.0
    scar_motion_attenuation: float = 0.3  # 1.0 = moves like healthy tissue
    intensity_background: float = 0.15
    intensity_cavity: float = 0.85
    intensity_myocardium: float = 0.35
    intensity_scar: float = 0.55
    intensity_edema: float = 0.45
    noise_sigma: float = 0.01
    noise_correlation_px: float = 1.5  # 0 = white; >0 = smooth speckle
    seed: int = 0
    anatomy_classes: int = 2  # 2 = background/myocardium, 3 adds the LV pool

    def __post_init__(self):
        if not 0 < self.endo_radius < self.epi_radius < self.size / 2:
            raise ConfigError("need 0 < endo < epi < half the image size")
        if self.frame_count < 2:
            raise ConfigError("need at least 2 frames")
        if not 0.0 <= self.scar_motion_attenuation <= 1.0:
            raise ConfigError("motion attenuation must lie in [0, 1]")
        if not 0.0 <= self.scar_transmural_fraction <= 1.0:
            raise ConfigError("transmural fraction must lie in [0, 1]")
        if self.anatomy_classes not in (2, 3):
            raise ConfigError("anatomy_classes must be 2 or 3")

    @property
    def center(self) -> tuple[float, float]:
        c = (self.size - 1) / 2.0
        return c, c


@dataclass
class SyntheticCase:
    """A generated case: frames, exact fields, and gold labels at ED."""

    sequence: CineSequence
    gt_fields: list          # DisplacementField per frame (zero at reference)
    anatomy_gold: LabelMap   # at the reference frame
    pathology_gold: LabelMap
    config: PhantomConfig
    name: str = "case"


# ---------------------------------------------------------------------------
# Analytic geometry
# ---------------------------------------------------------------------------

def _polar(cfg: PhantomConfig):
    ys, xs = np.mgrid[0:cfg.size, 0:cfg.size].astype(np.float64)
    cx, cy = cfg.center
    dx = xs - cx
    dy = ys - cy
    return np.hypot(dx, dy), np.arctan2(dy, dx), dx, dy


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _sector_angular_distance(theta: np.ndarray, cfg: PhantomConfig) -> np.ndarray:
    """Angular distance (radians) to the scar sector; 0 inside it."""
    extent = np.radians(cfg.scar_extent_deg)
    if extent <= 0.0:
        return np.full_like(theta, np.inf)
    start = np.radians(cfg.scar_start_deg)
    rel = np.mod(theta - start, 2.0 * np.pi)
    inside = rel <= extent
    past = rel - extent                      # distance beyond the trailing edge
    before = 2.0 * np.pi - rel               # distance to the leading edge, wrapping
    return np.where(inside, 0.0, np.minimum(past, before))


def _motion_attenuation(theta: np.ndarray, cfg: PhantomConfig) -> np.ndarray:
    """1 in healthy tissue, the attenuation factor throughout the scar
    sector, blending over a 10-degree band *outside* the sector edges."""
    att = cfg.scar_motion_attenuation
    if att == 1.0 or cfg.scar_extent_deg <= 0.0:
        return np.ones_like(theta)
    dist = _sector_angular_distance(theta, cfg)
    blend = _smoothstep(dist / np.radians(_BLEND_DEG))
    return att + (1.0 - att) * blend


def _radial_window(r: np.ndarray, cfg: PhantomConfig) -> np.ndarray:
    """1 out to just beyond the epicardium, then a smooth decay to 0."""
    start = cfg.epi_radius + _FALLOFF_MARGIN
    return 1.0 - _smoothstep((r - start) / _FALLOFF_WIDTH)


def contraction_phase(i: int, n: int) -> float:
    """Temporal profile: 0 at ED (i = 0), peaking mid-cycle."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * i / n))


def gt_field(cfg: PhantomConfig, i: int) -> DisplacementField:
    """Analytic backward-sampling field for frame ``i`` (zero at i = 0)."""
    r, theta, dx, dy = _polar(cfg)
    scale = (cfg.contraction_amplitude * contraction_phase(i, cfg.frame_count)
             * _motion_attenuation(theta, cfg) * _radial_window(r, cfg))
    return DisplacementField(np.stack([dx * scale, dy * scale], axis=-1))


def analytic_masks(cfg: PhantomConfig) -> dict:
    """Hard geometric masks at the reference frame."""
    r, theta, _, _ = _polar(cfg)
    cavity = r < cfg.endo_radius
    myo = (r >= cfg.endo_radius) & (r <= cfg.epi_radius)
    in_sector = _sector_angular_distance(theta, cfg) == 0.0
    scar_outer = cfg.endo_radius + cfg.scar_transmural_fraction * (cfg.epi_radius - cfg.endo_radius)
    scar = myo & in_sector & (r <= scar_outer)
    if scar.any():
        dist = distance_transform_edt(~scar)
        edema = myo & ~scar & (dist <= cfg.edema_margin_px)
    else:
        edema = np.zeros_like(scar)
    return {"cavity": cavity, "myocardium": myo, "scar": scar, "edema": edema}


def frame_anatomy_mask(cfg: PhantomConfig, i: int) -> np.ndarray:
    """Analytic myocardium mask as it appears in frame ``i``.

    A pixel looks like myocardium exactly when its backward-sampled source
    radius lands inside the reference annulus.
    """
    r, theta, _, _ = _polar(cfg)
    scale = (cfg.contraction_amplitude * contraction_phase(i, cfg.frame_count)
             * _motion_attenuation(theta, cfg) * _radial_window(r, cfg))
    source_r = r * (1.0 + scale)
    return (source_r >= cfg.endo_radius) & (source_r <= cfg.epi_radius)


def forward_field(cfg: PhantomConfig, i: int) -> DisplacementField:
    """Exact frame-to-reference field for frame ``i`` (the motion oracle).

    The generation field of :func:`gt_field` expands reference coordinates
    outward to pull contracted frames out of the reference image; a solver
    that warps frame ``i`` back onto the reference instead recovers the
    *inverse* of that map. This returns that inverse displacement to
    machine precision via a per-pixel radial bisection (the radial map is
    strictly monotone for valid configs).
    """
    r, theta, dx, dy = _polar(cfg)
    att = _motion_attenuation(theta, cfg)
    amp = cfg.contraction_amplitude * contraction_phase(i, cfg.frame_count)

    def outward(source_r):
        return source_r * (1.0 + amp * att * _radial_window(source_r, cfg))

    lo = np.zeros_like(r)
    hi = r.copy()  # contraction only: the source radius never exceeds the target
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        too_far = outward(mid) > r
        hi = np.where(too_far, mid, hi)
        lo = np.where(too_far, lo, mid)
    source_r = 0.5 * (lo + hi)
    scale = np.where(r > 0.0, source_r / np.maximum(r, 1e-12) - 1.0, 0.0)
    return DisplacementField(np.stack([dx * scale, dy * scale], axis=-1))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _render_reference(cfg: PhantomConfig) -> Image2D:
    masks = analytic_masks(cfg)
    img = np.full((cfg.size, cfg.size), cfg.intensity_background)
    img[masks["cavity"]] = cfg.intensity_cavity
    img[masks["myocardium"]] = cfg.intensity_myocardium
    img[masks["edema"]] = cfg.intensity_edema
    img[masks["scar"]] = cfg.intensity_scar
    img = gaussian_filter(img, sigma=_EDGE_SIGMA, mode="nearest")
    return Image2D(np.clip(img, 0.0, 1.0), cfg.spacing)


def generate(cfg: PhantomConfig) -> SyntheticCase:
    """Render the full case; fully deterministic for a given config."""
    masks = analytic_masks(cfg)
    reference = _render_reference(cfg)
    rng = np.random.default_rng(cfg.seed)
    frames = []
    fields = []
    for i in range(cfg.frame_count):
        phi = gt_field(cfg, i)
        if i == 0:
            moved = reference.data.copy()
        else:
            moved = warp_image(reference, phi).data
        if cfg.noise_sigma > 0.0:
            noise = rng.standard_normal(moved.shape)
            if cfg.noise_correlation_px > 0.0:
                # Smooth speckle: spatial pooling cannot average it away,
                # only aggregation across frames can.
                noise = gaussian_filter(noise, cfg.noise_correlation_px, mode="nearest")
                noise /= max(noise.std(), 1e-12)
            moved = moved + cfg.noise_sigma * noise
        frames.append(Image2D(np.clip(moved, 0.0, 1.0), cfg.spacing))
        fields.append(phi)

    if cfg.anatomy_classes == 2:
        anatomy_classes = np.where(masks["myocardium"], 1, 0)
    else:
        anatomy_classes = np.where(masks["myocardium"], 1,
                                   np.where(masks["cavity"], 2, 0))
    anatomy_gold = LabelMap.from_classes(anatomy_classes, cfg.anatomy_classes)

    pathology_classes = np.zeros((cfg.size, cfg.size), dtype=int)
    pathology_classes[masks["edema"]] = 1
    pathology_classes[masks["scar"]] = 2  # scar wins where annotations overlap
    pathology_gold = LabelMap.from_classes(pathology_classes, 3)

    return SyntheticCase(
        sequence=CineSequence(frames, reference_index=0),
        gt_fields=fields,
        anatomy_gold=anatomy_gold,
        pathology_gold=pathology_gold,
        config=cfg,
    )


def vary_config(base: PhantomConfig, case_seed: int) -> PhantomConfig:
    """Deterministic per-case jitter for multi-case sets: small changes to
    radii, amplitude, sector extent and noise seed."""
    rng = np.random.default_rng(case_seed)
    endo = base.endo_radius + rng.uniform(-1.0, 1.0)
    epi = base.epi_radius + rng.uniform(-1.0, 1.0)
    return replace(
        base,
        endo_radius=round(endo, 3),
        epi_radius=round(max(epi, endo + 5.0), 3),
        contraction_amplitude=round(base.contraction_amplitude * rng.uniform(0.9, 1.1), 5),
        scar_extent_deg=round(base.scar_extent_deg + rng.uniform(-10.0, 10.0), 3),
        scar_transmural_fraction=round(
            float(np.clip(base.scar_transmural_fraction + rng.uniform(-0.1, 0.1), 0.3, 1.0)), 4),
        seed=case_seed,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _config_to_json(cfg: PhantomConfig) -> dict:
    doc = asdict(cfg)
    doc["spacing"] = list(cfg.spacing)
    return doc


def _config_from_json(doc: dict) -> PhantomConfig:
    doc = dict(doc)
    doc["spacing"] = tuple(doc["spacing"])
    return PhantomConfig(**doc)


def case_manifest(case: SyntheticCase, out_dir) -> Path:
    """Write all grids as F32G plus the JSON manifest; returns the manifest
    path. Two runs with the same config produce byte-identical trees."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    frame_files = []
    field_files = []
    for i, frame in enumerate(case.sequence.frames):
        rel = f"frames/frame_{i:03d}.f32g"
        write_f32g(out / rel, frame.data[None, ...])
        frame_files.append(rel)
        rel = f"fields/gt_ddf_{i:03d}.f32g"
        phi = case.gt_fields[i].data
        write_f32g(out / rel, np.stack([phi[..., 0], phi[..., 1]]))
        field_files.append(rel)
    write_f32g(out / "anatomy_gold.f32g", np.moveaxis(case.anatomy_gold.data, 2, 0))
    write_f32g(out / "pathology_gold.f32g", np.moveaxis(case.pathology_gold.data, 2, 0))
    manifest = {
        "schema": SCHEMA,
        "name": case.name,
        "seed": case.config.seed,
        "spacing": list(case.config.spacing),
        "reference_index": case.sequence.reference_index,
        "frame_count": len(case.sequence),
        "frames": frame_files,
        "gt_fields": field_files,
        "anatomy_gold": "anatomy_gold.f32g",
        "pathology_gold": "pathology_gold.f32g",
        "config": _config_to_json(case.config),
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_case(manifest_path) -> SyntheticCase:
    """Reload a case written by :func:`case_manifest` (float32 precision)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"no such manifest: {manifest_path}")
    with open(manifest_path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != SCHEMA:
        raise DataError(f"unsupported manifest schema {doc.get('schema')!r}, "
                        f"expected {SCHEMA!r}")
    base = manifest_path.parent
    cfg = _config_from_json(doc["config"])
    spacing = tuple(doc["spacing"])
    frames = [Image2D(np.clip(read_f32g(base / rel)[0].astype(np.float64), 0.0, 1.0), spacing)
              for rel in doc["frames"]]
    fields = [DisplacementField(np.stack(read_f32g(base / rel).astype(np.float64), axis=-1))
              for rel in doc["gt_fields"]]
    anatomy = LabelMap(_renormalize(np.moveaxis(read_f32g(base / doc["anatomy_gold"]), 0, 2)))
    pathology = LabelMap(_renormalize(np.moveaxis(read_f32g(base / doc["pathology_gold"]), 0, 2)))
    return SyntheticCase(
        sequence=CineSequence(frames, doc["reference_index"]),
        gt_fields=fields,
        anatomy_gold=anatomy,
        pathology_gold=pathology,
        config=cfg,
        name=doc.get("name", "case"),
    )


def _renormalize(data: np.ndarray) -> np.ndarray:
    data = np.clip(data.astype(np.float64), 0.0, 1.0)
    sums = data.sum(axis=2, keepdims=True)
    return data / np.where(sums > 0.0, sums, 1.0)
