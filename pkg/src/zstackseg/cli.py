"""Command-line pipeline driver.

Stages exchange artifacts on disk under the manifest root, so each
subcommand is independently runnable and resumable; running a stage
before its prerequisite exists is a pipeline-order error (exit 3).
Exit codes: 0 ok, 2 config error, 3 pipeline-order error, 4 runtime or
training failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import ConfigError, PipelineError, PipelineOrderError
from .instancer import assign_instances
from .metrics import evaluate, write_report_csv
from .model import load_checkpoint, predict_likelihood, predict_probabilities
from .prm import build_pseudo_labels, detect_peaks, write_peak_sidecar
from .synth import generate_dataset
from .training import train
from .volio import (
    DatasetManifest,
    Volume,
    read_centroids,
    read_manifest,
    read_volume,
    write_volume,
)
from .centermap import build_center_map


def centermap_path(manifest: DatasetManifest, cfg: PipelineConfig, stem: str) -> Path:
    return manifest.root / cfg.paths.centermaps / f"{stem}.vol"


def pseudo_path(manifest: DatasetManifest, cfg: PipelineConfig, stem: str) -> Path:
    return manifest.root / cfg.paths.pseudo / f"{stem}.vol"


def sidecar_path(manifest: DatasetManifest, cfg: PipelineConfig, stem: str) -> Path:
    return manifest.root / cfg.paths.pseudo / f"{stem}_peaks.json"


def model_path(manifest: DatasetManifest, cfg: PipelineConfig, stage: str) -> Path:
    return manifest.root / cfg.paths.models / f"{stage}.ckpt"


def history_path(manifest: DatasetManifest, cfg: PipelineConfig, stage: str) -> Path:
    return manifest.root / cfg.paths.models / f"{stage}_history.csv"


def prediction_paths(pred_dir, stem: str) -> dict[str, Path]:
    pred_dir = Path(pred_dir)
    return {
        "likelihood": pred_dir / f"{stem}_likelihood.vol",
        "foreground": pred_dir / f"{stem}_foreground.vol",
        "instances": pred_dir / f"{stem}_instances.vol",
    }


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise PipelineOrderError(f"missing artifact {path}; run {hint} first")
    return Path(path)


def cmd_gen_synth(args) -> int:
    cfg = _load_cfg(args)
    manifest = generate_dataset(cfg.synth, args.n, args.out)
    n_train = len(manifest.split("train"))
    n_val = len(manifest.split("val"))
    print(f"wrote {args.n} samples ({n_train} train / {n_val} val) under {args.out}")
    return 0


def cmd_centermap(args) -> int:
    cfg = _load_cfg(args)
    manifest = read_manifest(_require(Path(args.manifest), "gen-synth"))
    for entry in manifest.entries:
        volume = read_volume(manifest.resolve(entry.volume))
        centroids = read_centroids(manifest.resolve(entry.centroids))
        cm = build_center_map(volume.dims, centroids, cfg.centermap, volume.spacing)
        write_volume(cm, centermap_path(manifest, cfg, entry.stem))
    print(f"wrote {len(manifest.entries)} centre maps under {manifest.root / cfg.paths.centermaps}")
    return 0


def cmd_train_s1(args) -> int:
    cfg = _load_cfg(args)
    manifest = read_manifest(_require(Path(args.manifest), "gen-synth"))
    targets = {e.stem: centermap_path(manifest, cfg, e.stem) for e in manifest.entries}
    history = train(
        "s1",
        manifest,
        cfg.net,
        cfg.s1_train,
        targets,
        model_path(manifest, cfg, "s1"),
        history_path(manifest, cfg, "s1"),
        s1_params=cfg.s1_loss,
    )
    print(
        f"trained s1 for {len(history)} epochs, "
        f"final loss {history[-1].loss:.4f} -> {model_path(manifest, cfg, 's1')}"
    )
    return 0


def cmd_prm(args) -> int:
    cfg = _load_cfg(args)
    manifest = read_manifest(_require(Path(args.manifest), "gen-synth"))
    ckpt = Path(args.model) if args.model else model_path(manifest, cfg, "s1")
    _require(ckpt, "train-s1")
    model, stage = load_checkpoint(ckpt)
    if stage != "s1":
        raise ConfigError(f"{ckpt} is a {stage} checkpoint, expected s1")
    for entry in manifest.entries:
        volume = read_volume(manifest.resolve(entry.volume))
        pred = predict_likelihood(model, volume)
        peaks = detect_peaks(pred, cfg.prm.peak_threshold, cfg.prm.min_separation)
        labels = build_pseudo_labels(
            model,
            volume,
            peaks,
            response_threshold=cfg.prm.response_threshold,
            group_radius=cfg.prm.group_radius,
            source=entry.stem,
        )
        write_volume(labels.foreground, pseudo_path(manifest, cfg, entry.stem))
        write_peak_sidecar(labels, peaks, sidecar_path(manifest, cfg, entry.stem))
    print(f"wrote pseudo labels for {len(manifest.entries)} volumes under {manifest.root / cfg.paths.pseudo}")
    return 0


def cmd_train_s2(args) -> int:
    cfg = _load_cfg(args)
    manifest = read_manifest(_require(Path(args.manifest), "gen-synth"))
    s1_ckpt = Path(args.model_s1) if args.model_s1 else model_path(manifest, cfg, "s1")
    _require(s1_ckpt, "train-s1")
    targets = {e.stem: pseudo_path(manifest, cfg, e.stem) for e in manifest.entries}
    for stem, path in targets.items():
        if not path.exists():
            raise PipelineOrderError(f"missing pseudo label {path}; run prm first")
    history = train(
        "s2",
        manifest,
        cfg.net,
        cfg.s2_train,
        targets,
        model_path(manifest, cfg, "s2"),
        history_path(manifest, cfg, "s2"),
        refine_params=cfg.refine,
    )
    print(
        f"trained s2 for {len(history)} epochs, "
        f"final loss {history[-1].loss:.4f} -> {model_path(manifest, cfg, 's2')}"
    )
    return 0


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    s1, stage1 = load_checkpoint(_require(Path(args.model_s1), "train-s1"))
    s2, stage2 = load_checkpoint(_require(Path(args.model_s2), "train-s2"))
    if stage1 != "s1" or stage2 != "s2":
        raise ConfigError(f"checkpoint stages are ({stage1}, {stage2}), expected (s1, s2)")
    volume = read_volume(args.volume)
    likelihood = predict_likelihood(s1, volume)
    probs = predict_probabilities(s2, volume)
    fg = Volume((probs[1] > probs[0]).astype(np.uint8), volume.spacing)
    peaks = detect_peaks(likelihood, cfg.prm.peak_threshold, cfg.prm.min_separation)
    instances = assign_instances(fg, likelihood, peaks, cfg.instancer)
    stem = Path(args.volume).stem
    out = prediction_paths(args.out, stem)
    write_volume(likelihood, out["likelihood"])
    write_volume(fg, out["foreground"])
    write_volume(instances, out["instances"])
    n = int(instances.data.max())
    print(f"{stem}: {n} instances -> {Path(args.out)}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    manifest = read_manifest(_require(Path(args.manifest), "gen-synth"))
    entries = manifest.split("val")
    if not entries:
        raise PipelineOrderError("manifest has no validation entries to evaluate")
    missing = []
    for entry in entries:
        if entry.gt_instances is None:
            raise PipelineError(f"entry {entry.stem} has no ground-truth instances")
        if not prediction_paths(args.pred_dir, entry.stem)["instances"].exists():
            missing.append(str(prediction_paths(args.pred_dir, entry.stem)["instances"]))
    if missing:
        raise PipelineOrderError(
            "missing predictions (run infer first): " + ", ".join(missing)
        )
    reports = {}
    for entry in entries:
        gt = read_volume(manifest.resolve(entry.gt_instances))
        pred = read_volume(prediction_paths(args.pred_dir, entry.stem)["instances"])
        reports[entry.stem] = evaluate(pred.data, gt.data)
    out = Path(args.out) if args.out else Path(args.pred_dir) / "eval_report.csv"
    write_report_csv(reports, out)
    n = len(reports)
    print(
        f"evaluated {n} volumes: "
        f"iou={sum(r.iou for r in reports.values()) / n:.4f} "
        f"seg={sum(r.seg for r in reports.values()) / n:.4f} "
        f"mucov={sum(r.mucov for r in reports.values()) / n:.4f} -> {out}"
    )
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    volume = read_volume(args.volume)
    if not 0 <= args.slice < volume.dims[0]:
        raise ValueError(f"slice {args.slice} out of range for {volume.dims[0]} slices")
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(volume.data[args.slice], cmap="gray", interpolation="nearest")
    if args.labels:
        labels = read_volume(args.labels)
        if labels.dims != volume.dims:
            raise ValueError(f"label dims {labels.dims} != volume dims {volume.dims}")
        sl = labels.data[args.slice]
        cmap = plt.get_cmap("tab10")
        for i, lab in enumerate(np.unique(sl[sl > 0])):
            ax.contour((sl == lab).astype(float), levels=[0.5], colors=[cmap(i % 10)], linewidths=1.2)
    ax.set_title(f"{Path(args.volume).stem} slice {args.slice}")
    ax.axis("off")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120, bbox_inches="tight")
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zstackseg",
        description="Weakly supervised 3D cell instance segmentation pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="pipeline config JSON (or $ZSTACKSEG_CONFIG)")
        p.set_defaults(func=func)
        return p

    p = add("gen-synth", cmd_gen_synth, "generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = add("centermap", cmd_centermap, "build centre-likelihood training targets")
    p.add_argument("--manifest", required=True)

    p = add("train-s1", cmd_train_s1, "train the centre-likelihood regressor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")

    p = add("prm", cmd_prm, "build pseudo labels from stage-1 peak responses")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", help="stage-1 checkpoint (default: <root>/models/s1.ckpt)")

    p = add("train-s2", cmd_train_s2, "train the segmentation network on pseudo labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-s1", dest="model_s1", help="stage-1 checkpoint (order check)")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = add("infer", cmd_infer, "predict foreground, likelihood and instances for a volume")
    p.add_argument("--model-s1", dest="model_s1", required=True)
    p.add_argument("--model-s2", dest="model_s2", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", default="predictions", help="output directory")

    p = add("eval", cmd_eval, "score predictions against ground truth (validation split)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", dest="pred_dir", required=True)
    p.add_argument("--out", help="report CSV path (default: <pred-dir>/eval_report.csv)")

    p = add("plot", cmd_plot, "render one slice, optionally with instance contours")
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", help="instance label volume to overlay")
    p.add_argument("--slice", type=int, required=True)
    p.add_argument("--out", required=True, help="output image path")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PipelineOrderError as e:
        print(f"pipeline-order error: {e}", file=sys.stderr)
        return 3
    except (PipelineError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
