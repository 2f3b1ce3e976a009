"""Command-line surface: synth, train, generate, evaluate, sweep-lambda.

Every run writes a resolved-config snapshot next to its outputs, and all
numeric results are emitted as line-delimited JSON records; tables
printed to stdout are derived views of those records.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .data import DESK_SHAPE, SubjectRecord, load_dataset_dir, write_synthetic_dataset
from .fields import warp_nearest
from .generate import baseline_scaled_sequence, generate_sequence
from .losses import dice, local_ncc, nmse, psnr
from .networks import NetworkConfig, build_networks
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = ["main", "evaluate_subject", "evaluate_dataset"]


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.replace("x", ",").split(",") if p)
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape needs 3 integers, got {text!r}")
    return parts


def _load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _resolve_configs(args, image_shape) -> tuple[TrainConfig, NetworkConfig]:
    cfg = _load_config(getattr(args, "config", None))
    train_d = dict(cfg.get("train", {}))
    net_d = dict(cfg.get("network", {}))
    if getattr(args, "seed", None) is not None:
        train_d["seed"] = args.seed
    net_d.setdefault("image_shape", list(image_shape))
    train_cfg = TrainConfig.from_dict(train_d)
    defaults = NetworkConfig(image_shape=tuple(net_d["image_shape"]))
    net_cfg = NetworkConfig.from_dict({**defaults.to_dict(), **net_d})
    return train_cfg, net_cfg


def _snapshot(out_dir: Path, train_cfg=None, net_cfg=None, extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(extra or {})
    if train_cfg is not None:
        doc["train"] = train_cfg.to_dict()
    if net_cfg is not None:
        doc["network"] = net_cfg.to_dict()
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2))


def _save_montage(frames, path) -> None:
    """Mid-slice strip across frames, one PNG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(2 * n, 2.2))
    if n == 1:
        axes = [axes]
    for ax, fr in zip(axes, frames):
        vol = fr.frame.numpy()
        ax.imshow(vol[vol.shape[0] // 2], cmap="gray", vmin=-1, vmax=1)
        ax.set_title(f"g={fr.gamma:.2f}", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def evaluate_subject(weights, rec: SubjectRecord, ncc_window: int = 9) -> dict:
    """Metrics for one subject: sequence quality plus endpoint overlap."""
    source, target = rec.ed.tensor(), rec.es.tensor()
    # shrink the correlation window on volumes thinner than it
    ncc_window = min(ncc_window, min(source.shape))
    if ncc_window % 2 == 0:
        ncc_window -= 1
    start = time.time()
    if weights.config.deform_mode == "direct":
        frames = baseline_scaled_sequence(weights, source, target, rec.n_frames)
    else:
        frames = generate_sequence(weights, source, target, rec.n_frames)
    seconds = time.time() - start

    result = {"id": rec.id, "n_frames": rec.n_frames, "seconds": seconds}
    if rec.intermediate_frames and len(rec.intermediate_frames) == rec.n_frames:
        psnrs, nmses = [], []
        for fr, ref in zip(frames, rec.intermediate_frames):
            ref_t = ref.tensor()
            psnrs.append(psnr(fr.frame, ref_t))
            nmses.append(nmse(fr.frame, ref_t))
        result["psnr"] = float(np.mean(psnrs))
        result["nmse"] = float(np.mean(nmses))
    else:
        result["psnr"] = psnr(frames[-1].frame, target)
        result["nmse"] = nmse(frames[-1].frame, target)
    result["ncc_final"] = float(local_ncc(frames[-1].frame, target, ncc_window))

    if rec.ed_seg is not None and rec.es_seg is not None:
        labels = rec.ed_seg.labels | rec.es_seg.labels
        if labels:
            truth = rec.es_seg.tensor()
            warped = warp_nearest(rec.ed_seg.tensor(), frames[-1].field)
            per_label, mean = dice(warped, truth, labels)
            _, mean0 = dice(rec.ed_seg.tensor(), truth, labels)
            result["dice"] = {str(k): v for k, v in per_label.items()}
            result["dice_mean"] = mean
            result["dice_initial"] = mean0
    else:
        print(f"warning: subject {rec.id} lacks segmentations; Dice omitted",
              file=sys.stderr)
    return result


def evaluate_dataset(weights, records, out_dir: Path | None = None) -> dict:
    per_subject = [evaluate_subject(weights, rec) for rec in records]
    summary = {"kind": "summary", "n_subjects": len(per_subject)}
    for key in ("psnr", "nmse", "dice_mean", "dice_initial", "seconds"):
        vals = [r[key] for r in per_subject if key in r]
        if vals:
            summary[f"{key}_mean"] = float(np.mean(vals))
            summary[f"{key}_std"] = float(np.std(vals))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for rec in per_subject:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps(summary) + "\n")
    return {"subjects": per_subject, "summary": summary}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    write_synthetic_dataset(out, n_subjects=args.subjects, seed=args.seed or 0,
                            shape=args.shape, max_disp=args.max_disp,
                            n_frames=args.frames)
    _snapshot(out, extra={"command": "synth", "seed": args.seed or 0,
                          "subjects": args.subjects, "shape": list(args.shape),
                          "max_disp": args.max_disp, "n_frames": args.frames})
    print(f"wrote {args.subjects} synthetic subjects to {out}")
    return 0


def cmd_train(args) -> int:
    records = load_dataset_dir(args.data, target_shape=args.shape or DESK_SHAPE)
    image_shape = records[0].ed.data.shape
    train_cfg, net_cfg = _resolve_configs(args, image_shape)
    out = Path(args.out)
    _snapshot(out, train_cfg, net_cfg, extra={"command": "train",
                                              "data": str(args.data)})
    if train_cfg.mode == "direct":
        net_cfg = replace(net_cfg, deform_mode="direct")
    fit(records, train_cfg, net_cfg=net_cfg, out_dir=out,
        log_every=max(1, train_cfg.epochs // 20))
    print(f"training finished; checkpoint at {out / 'ckpt_last.pt'}")
    return 0


def _load_weights(args):
    ckpt = Path(args.ckpt)
    if ckpt.is_dir():
        ckpt = ckpt / "ckpt_last.pt"
    return load_checkpoint(ckpt)


def cmd_generate(args) -> int:
    weights = _load_weights(args)
    records = load_dataset_dir(args.data,
                               target_shape=weights.config.image_shape)
    rec = records[0]
    n = args.frames or rec.n_frames
    frames = generate_sequence(weights, rec.ed.tensor(), rec.es.tensor(), n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, fr in enumerate(frames):
        data_mod._vol_to_nifti(
            data_mod.Volume(data=fr.frame.numpy(), spacing=rec.ed.spacing),
            out / f"frame_{k:03d}.nii.gz")
    _save_montage(frames, out / "montage.png")
    _snapshot(out, extra={"command": "generate", "subject": rec.id, "frames": n,
                          "ckpt": str(args.ckpt)})
    print(f"wrote {n} frames and montage for subject {rec.id} to {out}")
    return 0


def cmd_evaluate(args) -> int:
    weights = _load_weights(args)
    records = load_dataset_dir(args.data,
                               target_shape=weights.config.image_shape)
    out = Path(args.out)
    report = evaluate_dataset(weights, records, out_dir=out)
    _snapshot(out, extra={"command": "evaluate", "data": str(args.data),
                          "ckpt": str(args.ckpt)})
    s = report["summary"]
    print(json.dumps(s))
    return 0


def cmd_sweep_lambda(args) -> int:
    lambdas = sorted(float(v) for v in args.lambdas.split(","))
    if len(lambdas) < 2:
        print("error: sweep needs at least 2 lambda values", file=sys.stderr)
        return 1
    records = load_dataset_dir(args.data, target_shape=args.shape or DESK_SHAPE)
    image_shape = records[0].ed.data.shape
    train_cfg, net_cfg = _resolve_configs(args, image_shape)
    out = Path(args.out)
    _snapshot(out, train_cfg, net_cfg,
              extra={"command": "sweep-lambda", "lambdas": lambdas})
    rows = []
    with open(out / "sweep.jsonl", "w") as fh:
        for lam in lambdas:
            cfg = replace(train_cfg, lam=lam)
            try:
                weights, _ = fit(records, cfg, net_cfg=net_cfg)
                report = evaluate_dataset(weights, records)
                row = {"lambda": lam, **report["summary"]}
            except Exception as exc:  # one failure must not abort the sweep
                row = {"lambda": lam, "error": str(exc)}
            rows.append(row)
            fh.write(json.dumps(row) + "\n")
            fh.flush()
    print(f"{'lambda':>8}  {'psnr':>8}  {'nmse':>10}  {'dice':>6}")
    for row in rows:
        if "error" in row:
            print(f"{row['lambda']:>8.2f}  failed: {row['error']}")
        else:
            print(f"{row['lambda']:>8.2f}  {row.get('psnr_mean', float('nan')):>8.3f}"
                  f"  {row.get('nmse_mean', float('nan')):>10.4g}"
                  f"  {row.get('dice_mean_mean', float('nan')):>6.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffwarp",
        description="Latent-code-scaled deformable interpolation between "
                    "3D volumes: dataset synthesis, training, generation, "
                    "evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *names):
        if "config" in names:
            p.add_argument("--config", help="JSON config file")
        if "seed" in names:
            p.add_argument("--seed", type=int, default=None)
        if "out" in names:
            p.add_argument("--out", required=True, help="output directory")
        if "data" in names:
            p.add_argument("--data", required=True, help="dataset directory")
        if "ckpt" in names:
            p.add_argument("--ckpt", required=True, help="checkpoint file or run dir")
        if "shape" in names:
            p.add_argument("--shape", type=_parse_shape, default=None,
                           help="volume shape D,H,W")
        if "device" in names:
            p.add_argument("--device", default="cpu")

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    common(p, "seed", "out", "shape", "device")
    p.add_argument("--subjects", type=int, default=5)
    p.add_argument("--max-disp", type=float, default=3.0)
    p.add_argument("--frames", type=int, default=11)
    p.set_defaults(shape=DESK_SHAPE, func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p, "config", "seed", "out", "data", "shape", "device")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate an interpolated sequence")
    common(p, "config", "seed", "out", "data", "ckpt", "device")
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    common(p, "config", "out", "data", "ckpt", "device")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-lambda", help="train/evaluate over lambda values")
    common(p, "config", "seed", "out", "data", "shape", "device")
    p.add_argument("--lambdas", default="1,5,20",
                   help="comma-separated lambda values")
    p.set_defaults(func=cmd_sweep_lambda)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.manual_seed(args.seed if getattr(args, "seed", None) is not None else 0)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
