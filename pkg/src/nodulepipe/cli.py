"""Command-line entry point composing the full candidate pipeline.

Subcommands: phantom gen, volume info, candidates filter|nms|detect,
lhi extract, hs2 train|predict, eval froc|fp-report|cpm, pipeline run.

Every run that writes outputs also writes a manifest.json capturing the
resolved configuration, seeds, input hashes, and output names, which is
enough to reproduce the run. Exit codes: 0 success, 1 validation error,
2 I/O error.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, candidate_pipeline, froc_eval, hs2, lhi, phantom, volume_io
from .errors import NodulePipeError, ValidationError

PATCH_INDEX_NAME = "index.csv"


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the CLI contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return _sha256_bytes(Path(path).read_bytes())


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                    inputs: dict[str, str], outputs: list[str]) -> None:
    config = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("func", "config") and not k.startswith("_")
    }
    manifest = {
        "tool": "nodulepipe",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    )


def _volume_paths(volumes_dir: Path) -> dict[str, Path]:
    paths = {p.stem: p for p in sorted(Path(volumes_dir).glob("*.mhd"))}
    if not paths:
        raise ValidationError(f"no .mhd volumes found in {volumes_dir}")
    return paths


def _load_csv_candidates(path: Path):
    return candidate_pipeline.load_candidates_csv(Path(path).read_text())


def _load_csv_annotations(path: Path):
    return candidate_pipeline.load_annotations_csv(Path(path).read_text())


def _lhi_params(args) -> lhi.LhiParams:
    return lhi.LhiParams(
        tau=args.tau,
        delta_threshold=args.delta_threshold,
        window_slices=args.window_slices,
        patch_scale=args.patch_scale,
        out_size=args.out_size,
    )


def _add_lhi_flags(parser):
    parser.add_argument("--tau", type=int, default=lhi.DEFAULT_TAU,
                        help="decay ceiling in slices")
    parser.add_argument("--delta-threshold", type=float, default=lhi.DEFAULT_DELTA_HU,
                        help="HU change that refreshes a pixel's counter")
    parser.add_argument("--window-slices", type=int, default=lhi.DEFAULT_WINDOW_SLICES)
    parser.add_argument("--patch-scale", type=float, default=lhi.DEFAULT_PATCH_SCALE)
    parser.add_argument("--out-size", type=int, default=lhi.DEFAULT_OUT_SIZE)


# -- phantom ------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs: dict[str, str] = {}
    specs = []
    if args.spec:
        text = Path(args.spec).read_text()
        inputs[str(args.spec)] = _sha256_bytes(text.encode())
        specs.append(phantom.spec_from_json(text))
    else:
        for i in range(args.scans):
            specs.append(phantom.sample_spec(
                seed=args.seed + i,
                dims=tuple(args.dims),
                spacing=tuple(args.spacing),
                n_spheres=args.spheres,
                n_tubes=args.tubes,
                noise_sigma_hu=args.noise_sigma,
                scan_id=f"scan{i:03d}",
            ))

    nodules, tissues, outputs = [], [], []
    for spec in specs:
        volume, scan_nodules, scan_tissues = phantom.generate(spec)
        volume_io.save_mhd(volume, out_dir / f"{spec.scan_id}.mhd")
        outputs += [f"{spec.scan_id}.mhd", f"{spec.scan_id}.raw"]
        nodules += scan_nodules
        tissues += scan_tissues

    (out_dir / "annotations.csv").write_text(candidate_pipeline.write_annotations_csv(nodules))
    (out_dir / "tissues.csv").write_text(candidate_pipeline.write_annotations_csv(tissues))
    outputs += ["annotations.csv", "tissues.csv"]
    _write_manifest(out_dir, "phantom gen", args, inputs, outputs)
    print(f"wrote {len(specs)} scan(s), {len(nodules)} nodules, {len(tissues)} tissues -> {out_dir}")
    return 0


# -- volume -------------------------------------------------------------------

def cmd_volume_info(args) -> int:
    volume = volume_io.load_mhd(args.volume)
    nx, ny, nz = volume.dims
    print(f"dims      {nx} x {ny} x {nz} voxels")
    print(f"spacing   {volume.spacing[0]} x {volume.spacing[1]} x {volume.spacing[2]} mm")
    print(f"origin    {volume.origin}")
    print(f"intensity {int(volume.voxels.min())} .. {int(volume.voxels.max())} HU")
    return 0


# -- candidates ---------------------------------------------------------------

def cmd_candidates_filter(args) -> int:
    cands = _load_csv_candidates(args.input)
    kept = candidate_pipeline.threshold_candidates(cands, args.min_score)
    Path(args.output).write_text(candidate_pipeline.write_candidates_csv(kept))
    print(f"kept {len(kept)}/{len(cands)} candidates with score > {args.min_score}")
    return 0


def cmd_candidates_nms(args) -> int:
    cands = _load_csv_candidates(args.input)
    volumes = {sid: volume_io.load_mhd(p) for sid, p in _volume_paths(args.volumes).items()}
    kept = candidate_pipeline.dedup_candidates(cands, volumes, args.iou)
    Path(args.output).write_text(candidate_pipeline.write_candidates_csv(kept))
    print(f"kept {len(kept)}/{len(cands)} candidates after NMS at IoU {args.iou}")
    return 0


def cmd_candidates_detect(args) -> int:
    volume = volume_io.load_mhd(args.volume)
    scan_id = args.scan_id or Path(args.volume).stem
    cands = candidate_pipeline.detect_blobs(
        volume, args.intensity_threshold, args.min_diameter, args.max_diameter, scan_id
    )
    Path(args.output).write_text(candidate_pipeline.write_candidates_csv(cands))
    print(f"detected {len(cands)} blob candidate(s) in {scan_id}")
    return 0


# -- lhi ----------------------------------------------------------------------

def _label_candidates(cands, annotations):
    """nodule/tissue label per candidate via the center-in-radius hit rule."""
    labels = []
    for cand in cands:
        hit = any(
            gt.scan_id == cand.scan_id
            and np.linalg.norm(np.subtract(cand.center_mm, gt.center_mm)) <= gt.diameter_mm / 2
            for gt in annotations
        )
        labels.append("nodule" if hit else "tissue")
    return labels


def cmd_lhi_extract(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = _lhi_params(args)
    cands = _load_csv_candidates(args.candidates)
    inputs = {str(args.candidates): _sha256_file(args.candidates)}

    if args.volume:
        volumes = {Path(args.volume).stem: volume_io.load_mhd(args.volume)}
    else:
        volumes = {sid: volume_io.load_mhd(p) for sid, p in _volume_paths(args.volumes).items()}

    labels = [""] * len(cands)
    if args.annotations:
        annotations = _load_csv_annotations(args.annotations)
        inputs[str(args.annotations)] = _sha256_file(args.annotations)
        labels = _label_candidates(cands, annotations)

    index_rows = ["candidate_id,file,label"]
    outputs = [PATCH_INDEX_NAME]
    written = 0
    for i, cand in enumerate(cands):
        volume = volumes.get(cand.scan_id)
        if volume is None:
            raise ValidationError(f"no volume found for scan {cand.scan_id!r}")
        image = lhi.lhi_for_candidate(volume, cand, params)
        name = f"patch_{i:05d}.f32"
        (out_dir / name).write_bytes(image.values.astype("<f4").tobytes())
        index_rows.append(f"{cand.scan_id}:{i:05d},{name},{labels[i]}")
        outputs.append(name)
        written += 1
    (out_dir / PATCH_INDEX_NAME).write_text("\n".join(index_rows) + "\n")
    _write_manifest(out_dir, "lhi extract", args, inputs, outputs)
    print(f"wrote {written} history patch(es) -> {out_dir}")
    return 0


def _read_patch_dir(patches_dir: Path, out_size: int):
    index_path = Path(patches_dir) / PATCH_INDEX_NAME
    ids, images, labels = [], [], []
    lines = index_path.read_text().splitlines()
    if not lines or lines[0] != "candidate_id,file,label":
        raise ValidationError(f"{index_path} is not a patch index (bad header)")
    for line in lines[1:]:
        if not line.strip():
            continue
        cand_id, name, label = line.split(",")
        raw = (Path(patches_dir) / name).read_bytes()
        grid = np.frombuffer(raw, dtype="<f4")
        if grid.size != out_size * out_size:
            raise ValidationError(
                f"{name}: expected {out_size * out_size} float32 values, got {grid.size}"
            )
        ids.append(cand_id)
        images.append(grid.reshape(out_size, out_size))
        labels.append(label)
    return ids, np.stack(images) if images else np.zeros((0, out_size, out_size)), labels


# -- hs2 ----------------------------------------------------------------------

def cmd_hs2_train(args) -> int:
    ids, images, text_labels = _read_patch_dir(args.patches, args.out_size)
    if any(lbl not in ("nodule", "tissue") for lbl in text_labels):
        raise ValidationError("patch index has unlabeled rows; extract with --annotations")
    labels = np.array([1 if lbl == "nodule" else 0 for lbl in text_labels], dtype=np.int64)
    normalized = images / float(args.tau)

    config = hs2.TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    model = hs2.initialize(args.seed, in_size=args.out_size)
    model, history = hs2.train(model, normalized, labels, config)
    out_path = Path(args.output)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(hs2.save_model(model))

    dataset_hash = _sha256_bytes(
        images.astype("<f4").tobytes() + ",".join(text_labels).encode()
    )
    # fold the extraction settings (delta threshold etc.) into the training
    # manifest so one file pins the whole recipe
    extraction_manifest = Path(args.patches) / "manifest.json"
    if extraction_manifest.exists():
        extraction = json.loads(extraction_manifest.read_text()).get("config", {})
        args.patch_extraction = {
            k: extraction[k]
            for k in ("tau", "delta_threshold", "window_slices", "patch_scale", "out_size")
            if k in extraction
        }
    _write_manifest(out_path.parent, "hs2 train", args,
                    {str(args.patches): dataset_hash}, [out_path.name])
    print(f"trained {config.epochs} epoch(s) on {len(labels)} patches; "
          f"loss {history[0]:.4f} -> {history[-1]:.4f}; model -> {out_path}")
    return 0


def cmd_hs2_predict(args) -> int:
    model = hs2.load_model(Path(args.model).read_bytes())
    ids, images, _ = _read_patch_dir(args.patches, model.in_size)
    probs = hs2.predict_proba(model, images / float(args.tau)) if len(ids) else []
    lines = ["candidate_id,p_nodule,label"]
    for cand_id, p in zip(ids, probs):
        label = hs2.LABELS[1] if p >= 0.5 else hs2.LABELS[0]
        lines.append(f"{cand_id},{float(p)!r},{label}")
    Path(args.output).write_text("\n".join(lines) + "\n")
    print(f"classified {len(ids)} patch(es) -> {args.output}")
    return 0


# -- eval ---------------------------------------------------------------------

def _froc_json(report: froc_eval.FrocReport) -> str:
    payload = {
        "fp_levels": list(report.fp_levels),
        "level_sensitivities": list(report.level_sensitivities),
        "cpm": report.cpm,
        "scan_count": report.scan_count,
        "curve_reading": report.curve_reading,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _froc_csv(report: froc_eval.FrocReport) -> str:
    lines = ["threshold,fps_per_scan,sensitivity"]
    lines += [f"{t!r},{f!r},{s!r}" for t, f, s in report.operating_points]
    return "\n".join(lines) + "\n"


def _froc_curve(report: froc_eval.FrocReport) -> str:
    pts = sorted((f, s) for _, f, s in report.operating_points)
    lines = ["# fps_per_scan sensitivity"]
    lines += [f"{f!r} {s!r}" for f, s in pts]
    return "\n".join(lines) + "\n"


def _scan_count_for(args, cands, annotations) -> int:
    if args.scan_count:
        return args.scan_count
    return len({c.scan_id for c in cands} | {a.scan_id for a in annotations})


def cmd_eval_froc(args) -> int:
    cands = _load_csv_candidates(args.candidates)
    annotations = _load_csv_annotations(args.annotations)
    report = froc_eval.froc(cands, annotations, _scan_count_for(args, cands, annotations))
    if args.output_json:
        Path(args.output_json).write_text(_froc_json(report))
    if args.output_csv:
        Path(args.output_csv).write_text(_froc_csv(report))
    if args.output_curve:
        Path(args.output_curve).write_text(_froc_curve(report))
    for level, sens in zip(report.fp_levels, report.level_sensitivities):
        print(f"sensitivity @ {level:g} FP/scan: {sens:.3f}")
    print(f"CPM: {report.cpm:.3f}")
    return 0


def cmd_eval_cpm(args) -> int:
    levels = [float(v) for v in args.levels.split(",")]
    computed = froc_eval.cpm(levels)
    print(f"CPM: {computed:.4f}")
    if args.claimed is not None:
        _, matches = froc_eval.cpm_consistency(levels, args.claimed)
        if matches:
            print(f"claimed {args.claimed} is consistent")
        else:
            print(f"WARNING: claimed {args.claimed} disagrees with computed {computed:.4f}")
    return 0


def cmd_eval_fp_report(args) -> int:
    before = _load_csv_candidates(args.before)
    after = _load_csv_candidates(args.after)
    annotations = _load_csv_annotations(args.annotations)
    report = froc_eval.fp_reduction_report(before, after, annotations, args.score_threshold)
    payload = {
        "fp_before": report.fp_before,
        "fp_after": report.fp_after,
        "percent_reduction": report.percent_reduction,
        "sensitivity_before": report.sensitivity_before,
        "sensitivity_after": report.sensitivity_after,
        "score_threshold": report.score_threshold,
    }
    if args.output:
        Path(args.output).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"FPs {report.fp_before} -> {report.fp_after} ({report.percent_reduction}% reduction), "
          f"sensitivity {report.sensitivity_before:.3f} -> {report.sensitivity_after:.3f}")
    return 0


# -- pipeline -----------------------------------------------------------------

@functools.lru_cache(maxsize=2)
def _load_model_cached(model_path: str, mtime_ns: int):
    return hs2.load_model(Path(model_path).read_bytes())


def _process_scan(task: dict):
    """Per-scan stage: candidates -> threshold -> NMS -> history patches -> filter."""
    volume = volume_io.load_mhd(task["volume_path"])
    scan_id = task["scan_id"]
    params = lhi.LhiParams(**task["lhi_params"])

    if task["candidates"] is not None:
        cands = task["candidates"]
    else:
        cands = candidate_pipeline.detect_blobs(
            volume, task["blob_threshold"], task["blob_min_mm"], task["blob_max_mm"], scan_id
        )
    cands = candidate_pipeline.threshold_candidates(cands, task["min_score"])
    cands = candidate_pipeline.dedup_candidates(cands, {scan_id: volume}, task["nms_iou"])

    kept = []
    if cands:
        model_path = task["model_path"]
        model = _load_model_cached(model_path, Path(model_path).stat().st_mtime_ns)
        patches = np.stack(
            [lhi.lhi_for_candidate(volume, c, params).normalized() for c in cands]
        )
        probs = hs2.predict_proba(model, patches)
        kept = [c for c, p in zip(cands, probs) if p >= task["hs2_threshold"]]
    return scan_id, cands, kept


def cmd_pipeline_run(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    volume_paths = _volume_paths(args.volumes)
    model_bytes = Path(args.model).read_bytes()
    hs2.load_model(model_bytes)  # validate before spawning work
    inputs = {str(args.model): _sha256_bytes(model_bytes)}

    per_scan_csv: dict[str, list] = {sid: [] for sid in volume_paths}
    use_csv = args.candidates is not None
    if use_csv:
        inputs[str(args.candidates)] = _sha256_file(args.candidates)
        for cand in _load_csv_candidates(args.candidates):
            if cand.scan_id in per_scan_csv:
                per_scan_csv[cand.scan_id].append(cand)

    tasks = [
        {
            "scan_id": sid,
            "volume_path": str(path),
            "candidates": per_scan_csv[sid] if use_csv else None,
            "model_path": str(args.model),
            "lhi_params": {
                "tau": args.tau,
                "delta_threshold": args.delta_threshold,
                "window_slices": args.window_slices,
                "patch_scale": args.patch_scale,
                "out_size": args.out_size,
            },
            "min_score": args.min_score,
            "nms_iou": args.nms_iou,
            "hs2_threshold": args.hs2_threshold,
            "blob_threshold": args.blob_threshold,
            "blob_min_mm": args.blob_min_mm,
            "blob_max_mm": args.blob_max_mm,
        }
        for sid, path in sorted(volume_paths.items())
    ]

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_process_scan, tasks))
    else:
        results = [_process_scan(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    before = [c for _, scan_before, _ in results for c in scan_before]
    after = [c for _, _, scan_after in results for c in scan_after]
    (out_dir / "candidates_before.csv").write_text(candidate_pipeline.write_candidates_csv(before))
    (out_dir / "candidates_after.csv").write_text(candidate_pipeline.write_candidates_csv(after))
    outputs = ["candidates_before.csv", "candidates_after.csv"]
    print(f"{len(before)} candidate(s) before filtering, {len(after)} after")

    if args.annotations:
        annotations = _load_csv_annotations(args.annotations)
        inputs[str(args.annotations)] = _sha256_file(args.annotations)
        scan_count = len(volume_paths)
        for tag, cands in (("before", before), ("after", after)):
            report = froc_eval.froc(cands, annotations, scan_count)
            (out_dir / f"froc_{tag}.json").write_text(_froc_json(report))
            (out_dir / f"froc_{tag}.csv").write_text(_froc_csv(report))
            (out_dir / f"froc_{tag}_curve.dat").write_text(_froc_curve(report))
            outputs += [f"froc_{tag}.json", f"froc_{tag}.csv", f"froc_{tag}_curve.dat"]
            print(f"CPM {tag}: {report.cpm:.3f}")
        fp_report = froc_eval.fp_reduction_report(before, after, annotations, 0.0)
        payload = {
            "fp_before": fp_report.fp_before,
            "fp_after": fp_report.fp_after,
            "percent_reduction": fp_report.percent_reduction,
            "sensitivity_before": fp_report.sensitivity_before,
            "sensitivity_after": fp_report.sensitivity_after,
            "score_threshold": fp_report.score_threshold,
        }
        (out_dir / "fp_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        outputs.append("fp_report.json")
        print(f"FPs {fp_report.fp_before} -> {fp_report.fp_after} "
              f"({fp_report.percent_reduction}% reduction)")

    _write_manifest(out_dir, "pipeline run", args, inputs, outputs)
    return 0


# -- parser wiring --------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="nodulepipe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nodulepipe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(parent, name, func, **kwargs):
        p = parent.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON file of flag defaults (explicit flags win)")
        return p

    phantom_cmd = sub.add_parser("phantom", help="synthetic scan generation")
    phantom_sub = phantom_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(phantom_sub, "gen", cmd_phantom_gen, help="generate phantom scans with ground truth")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--spec", type=Path, default=None, help="explicit phantom spec JSON")
    p.add_argument("--scans", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spheres", type=int, default=3, help="nodule objects per scan")
    p.add_argument("--tubes", type=int, default=5, help="tissue objects per scan")
    p.add_argument("--dims", type=int, nargs=3, default=[96, 96, 48], metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0],
                   metavar=("SX", "SY", "SZ"))
    p.add_argument("--noise-sigma", type=float, default=5.0)

    volume_cmd = sub.add_parser("volume", help="volume inspection")
    volume_sub = volume_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(volume_sub, "info", cmd_volume_info, help="print header and intensity summary")
    p.add_argument("volume", type=Path)

    cand_cmd = sub.add_parser("candidates", help="candidate CSV processing")
    cand_sub = cand_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(cand_sub, "filter", cmd_candidates_filter, help="drop low-score candidates")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--min-score", type=float, default=candidate_pipeline.DEFAULT_SCORE_THRESHOLD)
    p = add(cand_sub, "nms", cmd_candidates_nms, help="suppress duplicate detections")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--volumes", type=Path, required=True, help="directory of <scan_id>.mhd files")
    p.add_argument("--iou", type=float, default=0.1)
    p = add(cand_sub, "detect", cmd_candidates_detect, help="blob-detect candidates in one volume")
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--scan-id", default=None)
    p.add_argument("--intensity-threshold", type=float, default=-400.0)
    p.add_argument("--min-diameter", type=float, default=3.0)
    p.add_argument("--max-diameter", type=float, default=30.0)

    lhi_cmd = sub.add_parser("lhi", help="history patch extraction")
    lhi_sub = lhi_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(lhi_sub, "extract", cmd_lhi_extract, help="dump per-candidate history patches")
    p.add_argument("--candidates", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--volume", type=Path, help="single volume")
    group.add_argument("--volumes", type=Path, help="directory of <scan_id>.mhd files")
    p.add_argument("--annotations", type=Path, default=None,
                   help="annotations CSV; labels patches nodule/tissue")
    _add_lhi_flags(p)

    hs2_cmd = sub.add_parser("hs2", help="classifier training and inference")
    hs2_sub = hs2_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(hs2_sub, "train", cmd_hs2_train, help="train the classifier on a patch dump")
    p.add_argument("--patches", type=Path, required=True, help="directory from lhi extract")
    p.add_argument("--output", type=Path, required=True, help="model file to write")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=int, default=lhi.DEFAULT_TAU)
    p.add_argument("--out-size", type=int, default=lhi.DEFAULT_OUT_SIZE)
    p = add(hs2_sub, "predict", cmd_hs2_predict, help="classify a patch dump")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--patches", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--tau", type=int, default=lhi.DEFAULT_TAU)

    eval_cmd = sub.add_parser("eval", help="scoring against ground truth")
    eval_sub = eval_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(eval_sub, "froc", cmd_eval_froc, help="FROC curve and CPM")
    p.add_argument("--candidates", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--scan-count", type=int, default=None,
                   help="defaults to the number of distinct scan ids")
    p.add_argument("--output-json", type=Path, default=None)
    p.add_argument("--output-csv", type=Path, default=None)
    p.add_argument("--output-curve", type=Path, default=None)
    p = add(eval_sub, "cpm", cmd_eval_cpm, help="mean sensitivity over the 7 FP levels")
    p.add_argument("--levels", required=True, help="7 comma-separated sensitivities")
    p.add_argument("--claimed", type=float, default=None,
                   help="cross-check a published CPM value")
    p = add(eval_sub, "fp-report", cmd_eval_fp_report, help="before/after FP reduction")
    p.add_argument("--before", type=Path, required=True)
    p.add_argument("--after", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--score-threshold", type=float, default=0.0)
    p.add_argument("--output", type=Path, default=None)

    pipe_cmd = sub.add_parser("pipeline", help="end-to-end runs")
    pipe_sub = pipe_cmd.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = add(pipe_sub, "run", cmd_pipeline_run,
            help="candidates -> threshold -> NMS -> history filter -> FROC")
    p.add_argument("--volumes", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--candidates", type=Path, default=None,
                   help="candidate CSV; omit to blob-detect")
    p.add_argument("--annotations", type=Path, default=None)
    p.add_argument("--min-score", type=float, default=candidate_pipeline.DEFAULT_SCORE_THRESHOLD)
    p.add_argument("--nms-iou", type=float, default=0.1)
    p.add_argument("--hs2-threshold", type=float, default=0.5,
                   help="keep candidates with at least this nodule probability")
    p.add_argument("--blob-threshold", type=float, default=-400.0)
    p.add_argument("--blob-min-mm", type=float, default=3.0)
    p.add_argument("--blob-max-mm", type=float, default=30.0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_lhi_flags(p)

    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if not config_path:
        return args
    try:
        values = json.loads(Path(config_path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid config JSON {config_path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ValidationError(f"config {config_path} must be a JSON object of flag values")
    for key, value in values.items():
        dest = key.replace("-", "_")
        flag = "--" + dest.replace("_", "-")
        if any(tok == flag or tok.startswith(flag + "=") for tok in argv):
            continue  # explicit flags beat config values
        if not hasattr(args, dest):
            raise ValidationError(f"config key {key!r} matches no flag of this subcommand")
        setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, list(sys.argv[1:] if argv is None else argv))
        return args.func(args)
    except NodulePipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
