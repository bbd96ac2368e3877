"""Chord-based scar transmurality quantification.

The myocardial annulus is divided into 100 equally spaced radial chords
cast from the centroid of the enclosed cavity. Each chord's transmurality
is the percentage of its pixels that are scar; chords fall into four
viability categories with inclusive upper bounds at 25 / 50 / 75 percent.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .errors import TopologyError

__all__ = [
    "CHORD_COUNT",
    "CATEGORIES",
    "Chord",
    "ChordReport",
    "categorize",
    "build_chords",
    "chord_transmurality",
    "transmurality_report",
    "segment_table",
]

CHORD_COUNT = 100
CATEGORIES = ("viable", "likely_viable", "likely_nonviable", "nonviable")
_STEP_PX = 0.5


@dataclass
class Chord:
    """One radial chord: ordered myocardium pixels from endo to epi."""

    index: int
    angle: float  # radians, 0 along +x
    pixels: list  # [(x, y), ...] ordered by increasing radius
    transmurality: float | None = None

    @property
    def valid(self) -> bool:
        return len(self.pixels) > 0


@dataclass
class ChordReport:
    """100 chords with per-category counts over the valid ones."""

    chords: list
    counts: dict = dc_field(default_factory=dict)

    @property
    def valid_count(self) -> int:
        return sum(1 for c in self.chords if c.valid)

    def category_vector(self) -> list[int]:
        return [self.counts[c] for c in CATEGORIES]

    def to_json(self) -> dict:
        return {
            "chord_count": CHORD_COUNT,
            "valid_chords": self.valid_count,
            "counts": {k: self.counts[k] for k in CATEGORIES},
            "chords": [
                {
                    "index": c.index,
                    "angle_deg": float(np.degrees(c.angle)),
                    "pixel_count": len(c.pixels),
                    "transmurality_percent": c.transmurality,
                    "category": categorize(c.transmurality) if c.valid else None,
                }
                for c in self.chords
            ],
        }


def categorize(percent: float) -> str:
    """Viability category of a transmurality percentage.

    Boundaries are inclusive upper bounds: <=25 viable, <=50 likely viable,
    <=75 likely nonviable, else nonviable.
    """
    if not 0.0 <= percent <= 100.0:
        raise ValueError(f"transmurality must lie in [0, 100], got {percent}")
    if percent <= 25.0:
        return "viable"
    if percent <= 50.0:
        return "likely_viable"
    if percent <= 75.0:
        return "likely_nonviable"
    return "nonviable"


def _cavity_centroid(myo: np.ndarray) -> tuple[float, float]:
    """Centroid (x, y) of the largest background component enclosed by the
    myocardium. Raises :class:`TopologyError` when no enclosed cavity exists.
    """
    background = ~myo
    labels, count = ndimage.label(background)
    if count == 0:
        raise TopologyError("mask has no background at all")
    border = np.zeros_like(myo)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    touching = set(np.unique(labels[border & background]))
    best_label, best_size = 0, 0
    for lab in range(1, count + 1):
        if lab in touching:
            continue
        size = int(np.sum(labels == lab))
        if size > best_size:
            best_label, best_size = lab, size
    if best_label == 0:
        raise TopologyError("myocardium mask does not enclose a cavity")
    ys, xs = np.nonzero(labels == best_label)
    return float(xs.mean()), float(ys.mean())


def build_chords(myo: np.ndarray) -> list[Chord]:
    """Cast 100 equally spaced rays from the cavity centroid and collect
    the myocardium pixels each ray crosses (0.5-px stepping, deduplicated).

    Rays that cross no myocardium pixel yield invalid (empty) chords.
    """
    myo = np.asarray(myo, dtype=bool)
    h, w = myo.shape
    cx, cy = _cavity_centroid(myo)
    t_max = float(np.hypot(max(cx, w - 1 - cx), max(cy, h - 1 - cy))) + 1.0
    chords = []
    for k in range(CHORD_COUNT):
        angle = 2.0 * np.pi * k / CHORD_COUNT
        dx, dy = np.cos(angle), np.sin(angle)
        pixels = []
        seen = set()
        t = 0.0
        while t <= t_max:
            x = int(np.floor(cx + t * dx + 0.5))
            y = int(np.floor(cy + t * dy + 0.5))
            t += _STEP_PX
            if not (0 <= x < w and 0 <= y < h):
                continue
            if (x, y) in seen:
                continue
            seen.add((x, y))
            if myo[y, x]:
                pixels.append((x, y))
        chords.append(Chord(index=k, angle=angle, pixels=pixels))
    return chords


def chord_transmurality(chord: Chord, scar: np.ndarray) -> float:
    """Percentage of the chord's pixels that are scar."""
    scar = np.asarray(scar, dtype=bool)
    if not chord.valid:
        raise ValueError(f"chord {chord.index} has no myocardium pixels")
    hits = sum(1 for (x, y) in chord.pixels if scar[y, x])
    return 100.0 * hits / len(chord.pixels)


def transmurality_report(myo: np.ndarray, scar: np.ndarray) -> ChordReport:
    """Chord transmuralities and per-category counts for one mask pair."""
    myo = np.asarray(myo, dtype=bool)
    scar = np.asarray(scar, dtype=bool)
    if myo.shape != scar.shape:
        raise ValueError(f"myocardium shape {myo.shape} != scar shape {scar.shape}")
    chords = build_chords(myo)
    counts = {c: 0 for c in CATEGORIES}
    for chord in chords:
        if not chord.valid:
            continue
        chord.transmurality = chord_transmurality(chord, scar)
        counts[categorize(chord.transmurality)] += 1
    return ChordReport(chords=chords, counts=counts)


def segment_table(report: ChordReport, segments: int = 16) -> list[dict]:
    """Group the chords into equal angular segments and summarize each.

    This is the raw data behind polar summary plots; rendering is left to
    the report layer.
    """
    rows = []
    per_segment = CHORD_COUNT / segments
    for s in range(segments):
        members = [c for c in report.chords
                   if s == min(int(c.index / per_segment), segments - 1)]
        valid = [c for c in members if c.valid]
        values = [c.transmurality for c in valid]
        rows.append({
            "segment": s,
            "start_deg": 360.0 * s / segments,
            "end_deg": 360.0 * (s + 1) / segments,
            "chords": len(members),
            "valid_chords": len(valid),
            "mean_transmurality": float(np.mean(values)) if values else None,
            "max_transmurality": float(np.max(values)) if values else None,
        })
    return rows
