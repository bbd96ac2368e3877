"""Command-line orchestration of the full pipeline.

Subcommands: ``synth``, ``motion``, ``train``, ``segment``, ``evaluate``,
``quantify``, ``sweep-frames`` and ``manifest-schema``. Every command
echoes its resolved configuration into the output directory, emits
machine-readable JSON/CSV, and renders the matching figures next to them.

Exit codes: 0 success, 2 bad configuration, 3 bad data, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import report
from .anatomy import AnatomyTrainConfig
from .chords import transmurality_report, segment_table, categorize
from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    DimensionMismatchError,
    DivergenceError,
    TopologyError,
)
from .f32g import read_f32g, write_f32g
from .grid import DisplacementField, LabelMap
from .metrics import evaluate_masks, harden
from .motion import MotionConfig, estimate_sequence
from .pathology import (
    CaseData,
    FeatureSelection,
    JointModel,
    JointTrainConfig,
    segment_case,
    segment_sweep,
    train_joint,
)
from .phantom import (
    SCHEMA,
    PhantomConfig,
    case_manifest,
    generate,
    load_case,
    vary_config,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

CLASS_LABELS = {1: "edema", 2: "scar"}


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _parse_fraction(text: str) -> float:
    """Accept ``4/6`` style fractions or plain floats."""
    if "/" in text:
        num, den = text.split("/", 1)
        value = float(num) / float(den)
    else:
        value = float(text)
    if not 0.0 < value <= 1.0:
        raise ConfigError(f"frame proportion must lie in (0, 1], got {text!r}")
    return value


def _echo_config(out_dir: Path, command: str, settings: dict) -> None:
    report.write_json({"command": command, "settings": settings},
                      out_dir / "config_echo.json")


def _load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _collect_manifests(paths: list[str]) -> list[Path]:
    """Expand case directories into manifest paths, keeping a stable order."""
    found = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            hits = sorted(path.glob("**/manifest.json"))
            if not hits:
                raise DataError(f"no case manifests under {path}")
            found.extend(hits)
        else:
            found.append(path)
    return found


def _load_cases(paths: list[str]) -> list:
    cases = []
    for m in _collect_manifests(paths):
        case = load_case(m)
        case.name = m.parent.name
        cases.append(case)
    return cases


def _load_model(path) -> JointModel:
    doc = _load_json(path)
    if doc.get("schema") != "cineseg-params-v1":
        raise DataError(f"{path}: unsupported params schema {doc.get('schema')!r}")
    return JointModel.from_json(doc)


def _joint_config(args, model: JointModel | None = None) -> JointTrainConfig:
    features = FeatureSelection.from_flags(args.features) if args.features else (
        model.features if model else FeatureSelection())
    proportion = _parse_fraction(args.frames) if args.frames else (
        model.frame_proportion if model else 4.0 / 6.0)
    cfg = JointTrainConfig(
        lambda_anatomy=args.lambda1,
        lambda_consistency=args.lambda2,
        lambda_motion=args.lambda3,
        lambda_smooth=args.lambda4,
        frame_proportion=proportion,
        features=features,
        cycles=args.cycles,
        seed=args.seed,
    )
    if model is not None:
        cfg = replace(cfg, anatomy_classes=model.anatomy_classes,
                      aggregate_logits=model.aggregate_logits)
    return cfg


def _read_mask(path) -> np.ndarray:
    grids = read_f32g(path)
    return grids[0] > 0.5


def _dice_for_class(pred_map: LabelMap, gold_map: LabelMap, class_index: int) -> float:
    from .metrics import confusion_counts, dice_score
    pred = harden(pred_map)[class_index]
    gold = harden(gold_map)[class_index]
    return dice_score(confusion_counts(pred, gold))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = _load_json(args.config) if args.config else {}
    defaults = doc.get("defaults", {})
    try:
        base = PhantomConfig(**{**defaults, "seed": args.seed,
                                **({"spacing": tuple(defaults["spacing"])}
                                   if "spacing" in defaults else {})})
    except TypeError as exc:
        raise ConfigError(f"bad phantom config: {exc}") from exc
    explicit = doc.get("cases")
    case_count = args.cases if args.cases is not None else doc.get("case_count", 1)

    manifests = []
    if explicit:
        configs = []
        for i, overrides in enumerate(explicit):
            merged = {**asdict(base), **overrides}
            merged["spacing"] = tuple(merged["spacing"])
            merged.setdefault("seed", args.seed + i)
            configs.append(PhantomConfig(**merged))
    else:
        configs = [base if case_count == 1 else vary_config(base, args.seed + i)
                   for i in range(case_count)]
    for i, cfg in enumerate(configs):
        case = generate(cfg)
        case.name = f"case_{i:03d}"
        manifests.append(str(case_manifest(case, out / case.name).relative_to(out)))
    report.write_json({"schema": "phantom-set-v1", "cases": manifests}, out / "set.json")
    _echo_config(out, "synth", {"seed": args.seed, "config": args.config,
                                "cases": len(configs),
                                "base": json.loads(json.dumps(asdict(base), default=list))})
    print(f"wrote {len(configs)} case(s) under {out}")
    return EXIT_OK


def cmd_motion(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case = load_case(args.case)
    cfg = MotionConfig(lambda_smooth=args.lambda_smooth, max_iters=args.max_iters,
                       pyramid_levels=args.levels, step_size=args.step_size)
    results = estimate_sequence(case.sequence, cfg)

    myo = harden(case.anatomy_gold)[1]
    rows = []
    traces = {}
    for i, res in enumerate(results):
        phi = res.phi.data
        write_f32g(out / f"ddf_{i:03d}.f32g", np.stack([phi[..., 0], phi[..., 1]]))
        traces[f"frame {i}"] = res.objective_trace
        gt = case.gt_fields[i].data
        epe = np.hypot(*(phi - gt).transpose(2, 0, 1))
        rows.append({
            "frame": i,
            "final_objective": res.final_objective,
            "iterations": res.iterations_used,
            "initial_objective": res.objective_trace[0],
            "median_epe_myocardium_px": float(np.median(epe[myo])),
        })
    report.write_csv(rows, ["frame", "initial_objective", "final_objective",
                            "iterations", "median_epe_myocardium_px"],
                     out / "motion_summary.csv")
    trace_rows = [{"frame": i, "step": s, "objective": v}
                  for i, res in enumerate(results)
                  for s, v in enumerate(res.objective_trace)]
    report.write_csv(trace_rows, ["frame", "step", "objective"], out / "objective_traces.csv")
    report.save_objective_traces(traces, out / "objective_traces.png")
    _echo_config(out, "motion", {"case": str(args.case), "lambda_smooth": cfg.lambda_smooth,
                                 "max_iters": cfg.max_iters, "levels": cfg.pyramid_levels,
                                 "step_size": cfg.step_size})
    print(f"estimated {len(results)} field(s) -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = _load_cases(args.cases)
    cfg = _joint_config(args)
    data = [CaseData(c.sequence, c.anatomy_gold, c.pathology_gold, c.name) for c in cases]
    model = train_joint(data, cfg)
    report.write_json(model.to_json(), out / "params.json")
    report.write_csv([{"cycle": i + 1, "total_loss": v}
                      for i, v in enumerate(model.loss_trace)],
                     ["cycle", "total_loss"], out / "loss_trace.csv")
    report.save_loss_trace(model.loss_trace, out / "loss_trace.png")
    _echo_config(out, "train", {
        "cases": [c.name for c in cases], "seed": cfg.seed,
        "lambda1": cfg.lambda_anatomy, "lambda2": cfg.lambda_consistency,
        "lambda3": cfg.lambda_motion, "lambda4": cfg.lambda_smooth,
        "frames": cfg.frame_proportion, "features": cfg.features.label(),
        "cycles": cfg.cycles,
    })
    print(f"trained on {len(cases)} case(s) -> {out / 'params.json'}")
    return EXIT_OK


def cmd_segment(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case = load_case(args.case)
    model = _load_model(args.params)
    cfg = _joint_config(args, model)
    result = segment_case(case.sequence, model, cfg)

    write_f32g(out / "pathology_pred.f32g", np.moveaxis(result.aggregate.data, 2, 0))
    classes = result.aggregate.hard_classes().astype(np.float64)
    write_f32g(out / "pathology_classes.f32g", classes[None, ...])
    masks = harden(result.aggregate)
    for idx, label in CLASS_LABELS.items():
        write_f32g(out / f"{label}_mask.f32g", masks[idx].astype(np.float64)[None, ...])
    write_f32g(out / "anatomy_pred.f32g", np.moveaxis(result.anatomy_reference.data, 2, 0))
    myo = harden(result.anatomy_reference)[1]
    write_f32g(out / "myocardium_mask.f32g", myo.astype(np.float64)[None, ...])
    for sel_pos, frame_index in enumerate(result.selection):
        phi = result.fields[frame_index].data
        write_f32g(out / f"ddf_{frame_index:03d}.f32g",
                   np.stack([phi[..., 0], phi[..., 1]]))
    _echo_config(out, "segment", {"case": str(args.case), "params": str(args.params),
                                  "frames": cfg.frame_proportion,
                                  "features": cfg.features.label()})
    print(f"segmented {args.case} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_dir = Path(args.pred)
    pred_file = pred_dir / "pathology_pred.f32g"
    if not pred_file.is_file():
        raise DataError(f"prediction grid not found: {pred_file}")
    pred_map = LabelMap(_normalize_channels(read_f32g(pred_file)))
    case = load_case(args.gold)
    gold_map = case.pathology_gold
    if pred_map.shape != gold_map.shape:
        raise DimensionMismatchError(
            f"prediction grid {pred_map.shape} != gold grid {gold_map.shape}")
    myo = harden(case.anatomy_gold)[1]
    spacing = case.sequence.spacing
    pred_masks = harden(pred_map)
    gold_masks = harden(gold_map)
    per_class = []
    for idx, label in CLASS_LABELS.items():
        m = evaluate_masks(pred_masks[idx], gold_masks[idx], label, myo, spacing)
        per_class.append(m.to_json())
    report.write_json({"case": case.name, "classes": per_class,
                       "note": "Hausdorff is slice-wise 2-D; Spe/NPV counted inside the myocardium"},
                      out / "metrics.json")
    fields = ["case", "class", "dice", "precision", "sensitivity",
              "specificity", "npv", "hausdorff_mm"]
    rows = [{"case": case.name, **m} for m in per_class]
    report.write_csv(rows, fields, out / "metrics.csv")
    report.save_metrics_chart(per_class, out / "metrics.png")
    _echo_config(out, "evaluate", {"pred": str(args.pred), "gold": str(args.gold)})
    for m in per_class:
        print(f"{m['class']}: dice={m['dice']:.4f}")
    return EXIT_OK


def cmd_quantify(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    myo = _read_mask(args.myo)
    scar = _read_mask(args.scar)
    if myo.shape != scar.shape:
        raise DimensionMismatchError(f"myocardium grid {myo.shape} != scar grid {scar.shape}")
    chord_report = transmurality_report(myo, scar)
    report.write_json(chord_report.to_json(), out / "chords.json")
    rows = [{"chord": c.index, "angle_deg": float(np.degrees(c.angle)),
             "pixels": len(c.pixels),
             "transmurality_percent": c.transmurality,
             "category": categorize(c.transmurality) if c.valid else None}
            for c in chord_report.chords]
    report.write_csv(rows, ["chord", "angle_deg", "pixels",
                            "transmurality_percent", "category"],
                     out / "chords.csv")
    seg_rows = segment_table(chord_report)
    report.write_csv(seg_rows, ["segment", "start_deg", "end_deg", "chords",
                                "valid_chords", "mean_transmurality",
                                "max_transmurality"],
                     out / "segments.csv")
    report.save_chord_profile(chord_report, out / "chords.png")
    _echo_config(out, "quantify", {"myo": str(args.myo), "scar": str(args.scar)})
    print("chord categories: " + ", ".join(
        f"{k}={chord_report.counts[k]}" for k in chord_report.counts))
    return EXIT_OK


def cmd_sweep_frames(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = _load_cases(args.cases)
    model = _load_model(args.params)
    proportions = [k / 6.0 for k in range(1, 7)]
    per_case = []
    for case in cases:
        preds = segment_sweep(case.sequence, model, proportions)
        per_case.append({p: (_dice_for_class(preds[p], case.pathology_gold, 2),
                             _dice_for_class(preds[p], case.pathology_gold, 1))
                         for p in proportions})
    rows = []
    for k, proportion in enumerate(proportions, start=1):
        scar_vals = [c[proportion][0] for c in per_case]
        edema_vals = [c[proportion][1] for c in per_case]
        rows.append({"proportion": proportion, "frames_label": f"{k}/6",
                     "scar_dice": float(np.mean(scar_vals)),
                     "edema_dice": float(np.mean(edema_vals)),
                     "mean_dice": float(np.mean(scar_vals + edema_vals))})
    report.write_csv(rows, ["proportion", "frames_label", "scar_dice",
                            "edema_dice", "mean_dice"], out / "sweep.csv")
    report.write_json({"rows": rows}, out / "sweep.json")
    report.save_sweep_curve(rows, out / "sweep.png")
    _echo_config(out, "sweep-frames", {"cases": [c.name for c in cases],
                                       "params": str(args.params)})
    for r in rows:
        print(f"{r['frames_label']}: scar={r['scar_dice']:.4f} edema={r['edema_dice']:.4f}")
    return EXIT_OK


def cmd_manifest_schema(args) -> int:
    """Converter stub: documents the case-manifest schema so external data
    (e.g. DICOM/NIfTI exports) can be adapted by writing F32G grids plus
    this JSON by hand or with site-specific tooling."""
    schema = {
        "schema": SCHEMA,
        "description": "case manifest consumed by motion/train/segment",
        "fields": {
            "schema": f"literal '{SCHEMA}'",
            "name": "case identifier",
            "seed": "integer seed echoed from generation (0 for external data)",
            "spacing": "[sx_mm, sy_mm] pixel spacing",
            "reference_index": "index of the end-diastolic frame",
            "frame_count": "number of frames",
            "frames": "list of 1-channel F32G paths, intensities in [0, 1]",
            "gt_fields": "list of 2-channel F32G paths (dx, dy); optional for external data",
            "anatomy_gold": "K-channel F32G label probabilities at the reference frame",
            "pathology_gold": "3-channel F32G label probabilities at the reference frame",
            "config": "generator config echo (omit for external data)",
        },
        "f32g": "16-byte header: magic 'F32G', u32 LE width, u32 height, "
                "u32 channels; then channels x height x width float32 LE row-major",
    }
    text = json.dumps(schema, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _normalize_channels(grids: np.ndarray) -> np.ndarray:
    data = np.clip(np.moveaxis(grids.astype(np.float64), 0, 2), 0.0, 1.0)
    sums = data.sum(axis=2, keepdims=True)
    return data / np.where(sums > 0.0, sums, 1.0)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_lambda_flags(p: argparse.ArgumentParser):
    p.add_argument("--lambda1", type=float, default=5.0, help="anatomy loss weight")
    p.add_argument("--lambda2", type=float, default=2.0, help="consistency loss weight")
    p.add_argument("--lambda3", type=float, default=1.0, help="photometric loss weight")
    p.add_argument("--lambda4", type=float, default=100.0, help="smoothness loss weight")


def _add_joint_flags(p: argparse.ArgumentParser):
    p.add_argument("--features", default=None,
                   help="feature groups, e.g. 'IPhiL', 'PhiL', 'I'")
    p.add_argument("--frames", default=None, help="frame proportion, e.g. 4/6")
    p.add_argument("--cycles", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _add_lambda_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cineseg",
        description="Myocardial motion estimation and scar/edema segmentation "
                    "from cine sequences, with phantom-based verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom cases")
    p.add_argument("--config", default=None, help="phantom config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=None, help="number of cases")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("motion", help="estimate per-frame displacement fields")
    p.add_argument("--case", required=True, help="case manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-smooth", type=float, default=100.0)
    p.add_argument("--max-iters", type=int, default=250)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--step-size", type=float, default=1.0)
    p.set_defaults(func=cmd_motion)

    p = sub.add_parser("train", help="joint training on a case set")
    p.add_argument("--cases", nargs="+", required=True,
                   help="case manifests or directories containing them")
    p.add_argument("--out", required=True)
    _add_joint_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one case with trained parameters")
    p.add_argument("--case", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    _add_joint_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="metrics of a prediction against gold")
    p.add_argument("--pred", required=True, help="segment output directory")
    p.add_argument("--gold", required=True, help="gold case manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("quantify", help="chord transmurality of a scar mask")
    p.add_argument("--myo", required=True, help="myocardium mask F32G")
    p.add_argument("--scar", required=True, help="scar mask F32G")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("sweep-frames", help="Dice vs. frame proportion study")
    p.add_argument("--cases", nargs="+", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_frames)

    p = sub.add_parser("manifest-schema", help="print the case manifest schema "
                                               "(adapter stub for external data)")
    p.add_argument("--out", default=None, help="write to a file instead of stdout")
    p.set_defaults(func=cmd_manifest_schema)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionMismatchError, TopologyError,
            DegenerateInputError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
