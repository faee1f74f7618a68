"""``dimshrink`` command line: preprocess, train, predict, evaluate, visualize."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import viz
from .config import FULL_CROP, ConfigError, TrainConfig, apply_overrides, load_config
from .losses import aggregate, case_metrics, format_table, summary_csv
from .synthetic import make_phantom
from .trainer import (
    ensemble_predict,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from .volume_io import (
    Modality,
    center_crop,
    check_labels,
    crop_array,
    labels_to_nested,
    load_labels,
    load_volume,
    nested_to_labels,
    save_labels,
    save_volume,
    uncrop,
    zscore_normalize,
)

logger = logging.getLogger("dimshrink")

MANIFEST = "manifest.json"
LABEL_SUFFIX = "seg"
NIFTI_RE = re.compile(r"^(?P<stem>.+)\.nii(\.gz)?$")


class CaseError(Exception):
    pass


def discover_case(case_dir: Path, need_labels: bool = False,
                  pattern: str = r"^(?P<case>.+)_(?P<suffix>[^_]+)$") -> dict[str, Path]:
    """Map modality value / ``seg`` to files in ``case_dir`` by name suffix."""
    found = {}
    rx = re.compile(pattern)
    for path in sorted(case_dir.iterdir()):
        m = NIFTI_RE.match(path.name)
        if not m:
            continue
        s = rx.match(m.group("stem"))
        if not s:
            continue
        suffix = s.group("suffix").lower()
        if suffix == LABEL_SUFFIX:
            found[LABEL_SUFFIX] = path
            continue
        try:
            found[Modality.parse(suffix).value] = path
        except ValueError:
            continue
    missing = [m.value for m in Modality if m.value not in found]
    if need_labels and LABEL_SUFFIX not in found:
        missing.append(LABEL_SUFFIX)
    if missing:
        raise CaseError(f"missing {', '.join('_' + m for m in missing)}")
    return found


def _case_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir())


def preprocess_case(case_dir: Path, out_dir: Path, crop, nonzero: bool = False, pattern=None) -> dict:
    files = discover_case(case_dir, pattern=pattern) if pattern else discover_case(case_dir)
    case_id = case_dir.name
    dest = out_dir / case_id
    dest.mkdir(parents=True, exist_ok=True)
    entry = None
    for mod in Modality:
        vol = load_volume(files[mod.value], mod)
        if entry is None:
            orig_shape, orig_affine = vol.shape, vol.affine
        elif vol.shape != orig_shape:
            raise CaseError(f"{mod.value} has shape {vol.shape}, expected {orig_shape}")
        cropped = zscore_normalize(center_crop(vol, crop), mask=True if nonzero else None)
        save_volume(cropped, dest / f"{case_id}_{mod.value}.nii.gz")
        entry = {
            "offset": list(cropped.crop_offset),
            "orig_dims": list(orig_shape),
            "affine": np.asarray(orig_affine).tolist(),
            "has_labels": False,
        }
    if LABEL_SUFFIX in files:
        labels, _ = load_labels(files[LABEL_SUFFIX])
        if labels.shape != tuple(orig_shape):
            raise CaseError(f"label shape {labels.shape} != volume shape {orig_shape}")
        cropped_labels, _ = crop_array(labels, crop)
        save_labels(cropped_labels, dest / f"{case_id}_{LABEL_SUFFIX}.nii.gz", cropped.affine)
        entry["has_labels"] = True
    return entry


def cmd_preprocess(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise CaseError(f"input directory {in_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    crop = tuple(args.crop)
    dirs = _case_dirs(in_dir)

    def work(case_dir):
        try:
            return case_dir.name, preprocess_case(case_dir, out_dir, crop, args.nonzero, args.pattern), None
        except Exception as exc:  # reported per case; the run continues
            return case_dir.name, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, dirs))
    manifest = {"crop": list(crop), "cases": {}, "errors": {}}
    for name, entry, err in sorted(results, key=lambda r: r[0]):
        if err is None:
            manifest["cases"][name] = entry
        else:
            manifest["errors"][name] = err
    with open(out_dir / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"preprocessed {len(manifest['cases'])} case(s) into {out_dir}")
    if manifest["errors"]:
        print(f"{len(manifest['errors'])} case(s) failed:", file=sys.stderr)
        for name, err in manifest["errors"].items():
            print(f"  {name}: {err}", file=sys.stderr)
        return 1
    return 0


def read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise CaseError(f"manifest not found: {path}")
    with open(path) as fh:
        return json.load(fh)


def load_training_set(data_dir: Path, modality: Modality, crop):
    manifest = read_manifest(data_dir / MANIFEST)
    dataset = []
    for case_id, entry in sorted(manifest["cases"].items()):
        if not entry.get("has_labels"):
            continue
        case_dir = data_dir / case_id
        vol = load_volume(case_dir / f"{case_id}_{modality.value}.nii.gz", modality)
        labels, _ = load_labels(case_dir / f"{case_id}_{LABEL_SUFFIX}.nii.gz")
        if vol.shape != tuple(crop):
            raise CaseError(f"{case_id}: volume shape {vol.shape} != config crop {tuple(crop)}")
        dataset.append((vol, labels_to_nested(labels)))
    if not dataset:
        raise CaseError(f"no labelled cases in {data_dir}")
    return dataset


def cmd_train(args) -> int:
    out = Path(args.out)
    resume = None
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.modality is not None:
        overrides.append(f"modality={args.modality}")
    if args.resume and out.exists():
        resume = load_checkpoint(out)
    if args.config is None and resume is not None:
        cfg = TrainConfig.from_dict(apply_overrides(resume["config"], overrides))
    else:
        cfg = load_config(args.config, overrides)
    dataset = load_training_set(Path(args.data), cfg.modality, cfg.crop)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    ckpt = train(cfg, dataset, log_path=log_path, resume=resume)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    print(f"trained {cfg.modality.value} model for {ckpt['epoch']} epoch(s); "
          f"best loss {ckpt['best_loss']:.5f}; checkpoint {out}; log {log_path}")
    return 0


def cmd_predict(args) -> int:
    case_dir = Path(args.case)
    case_id = case_dir.name
    manifest = read_manifest(Path(args.manifest) if args.manifest else case_dir.parent / MANIFEST)
    if case_id not in manifest["cases"]:
        raise CaseError(f"case {case_id} is not in the manifest")
    entry = manifest["cases"][case_id]

    models, volumes = {}, {}
    for path in args.checkpoints:
        model, cfg = model_from_checkpoint(load_checkpoint(path))
        if cfg.modality in models:
            raise CaseError(f"two checkpoints for modality {cfg.modality.value}")
        vol = load_volume(case_dir / f"{case_id}_{cfg.modality.value}.nii.gz", cfg.modality)
        if vol.shape != cfg.crop:
            raise CaseError(
                f"{path}: model expects {cfg.crop} volumes, case has {vol.shape}"
            )
        models[cfg.modality] = model
        volumes[cfg.modality] = vol
    probs = ensemble_predict(models, volumes, allow_partial=args.allow_partial)
    labels = nested_to_labels(probs, args.threshold)
    full = uncrop(labels, entry["offset"], entry["orig_dims"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_labels(full, out, np.asarray(entry["affine"]))
    print(f"wrote {out} ({full.shape}, labels {sorted(np.unique(full).tolist())})")
    return 0


def _strip_nifti(name: str) -> str | None:
    m = NIFTI_RE.match(name)
    return m.group("stem") if m else None


def _collect_labels(root: Path, pred: bool) -> dict[str, Path]:
    found = {}
    for path in sorted(root.rglob("*.nii*")):
        stem = _strip_nifti(path.name)
        if stem is None:
            continue
        if stem.endswith("_" + LABEL_SUFFIX):
            found[stem[: -len(LABEL_SUFFIX) - 1]] = path
        elif pred and path.parent == root:
            found[stem.removesuffix("_pred")] = path
    return found


def cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    preds = _collect_labels(pred_dir, pred=True)
    truths = _collect_labels(truth_dir, pred=False)
    matched = sorted(set(preds) & set(truths))
    unmatched = sorted(set(preds) ^ set(truths))
    if not matched:
        raise CaseError("no case ids match between predictions and ground truth")
    cases = []
    for case_id in matched:
        p, _ = load_labels(preds[case_id])
        t, _ = load_labels(truths[case_id])
        if p.shape != t.shape:
            raise CaseError(f"{case_id}: prediction {p.shape} vs truth {t.shape}")
        cases.append(case_metrics(case_id, labels_to_nested(p), labels_to_nested(t)))
    summary = aggregate(cases)

    out_dir = Path(args.out) if args.out else pred_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_case.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "ET", "WT", "TC"])
        for c in cases:
            writer.writerow([c.case_id, repr(c.et), repr(c.wt), repr(c.tc)])
    (out_dir / "summary.csv").write_text(summary_csv(summary))
    table = format_table(summary)
    (out_dir / "summary.txt").write_text(table)
    print(table, end="")
    if unmatched:
        print(f"unmatched case ids: {', '.join(unmatched)}", file=sys.stderr)
        return 1
    return 0


def cmd_visualize(args) -> int:
    vol = load_volume(args.volume)
    labels = None
    if args.labels:
        labels, _ = load_labels(args.labels)
        if labels.shape != vol.shape:
            raise CaseError(f"labels {labels.shape} do not match volume {vol.shape}")
    written = viz.write_triplanar(vol.data, args.out, labels=labels, slices=args.slice)
    if args.checkpoint:
        model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
        x = vol if vol.shape == cfg.crop else zscore_normalize(center_crop(vol, cfg.crop))
        with torch.no_grad():
            image, _ = model.encode(x.data)
        written += viz.write_channels(image[0].float().numpy(), args.out)
    for p in written:
        print(p)
    return 0


def cmd_phantom(args) -> int:
    """Write synthetic cases in the raw dataset layout."""
    out = Path(args.out)
    for i in range(args.n):
        seed = args.seed + i
        ph = make_phantom(seed, tuple(args.dims))
        case_id = f"phantom_{i:03d}"
        case_dir = out / case_id
        case_dir.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed + 10_000)
        for mod in Modality:
            data = ph.volume.data + rng.normal(0, 0.05, size=ph.volume.shape).astype(np.float32)
            save_volume(data, case_dir / f"{case_id}_{mod.value}.nii.gz")
        check_labels(ph.labels)
        save_labels(ph.labels, case_dir / f"{case_id}_{LABEL_SUFFIX}.nii.gz")
    print(f"wrote {args.n} phantom case(s) to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimshrink", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="center-crop and z-score every case")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--crop", type=int, nargs=3, default=list(FULL_CROP), metavar=("W", "H", "D"))
    p.add_argument("--nonzero", action="store_true", help="normalize over nonzero voxels only")
    p.add_argument("--pattern", default=None, help="regex with <case> and <suffix> groups")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one modality-specific network")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="CSV log path (default: checkpoint path with .csv)")
    p.add_argument("--modality", choices=[m.value for m in Modality])
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="ensemble checkpoints on one preprocessed case")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--case", required=True, help="preprocessed case directory")
    p.add_argument("--out", required=True, help="output label NIfTI")
    p.add_argument("--manifest")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--allow-partial", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="Dice per case and mean/std/median table")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="tri-planar PNGs and compressed channels")
    p.add_argument("volume")
    p.add_argument("--labels")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--slice", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("phantom", help="write synthetic cases")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 12])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CaseError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
