"""Data ingestion and synthesis.

Handles NIfTI loading with the standard preprocessing chain (resample to
a fixed voxel spacing, center crop/pad, intensity map to [-1, 1]), ACDC
directory discovery, dataset splitting, and a synthetic phantom
generator with known ground-truth deformation so the whole pipeline can
be exercised without any external data.

Axis convention: arrays are ``(D, H, W)`` = (slices, rows, columns);
NIfTI files store ``(x, y, z)`` with x fastest, which is transposed on
load so the slice axis comes first.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter, zoom

from .fields import warp_nearest, warp_trilinear
from .nifti import read_nifti, write_nifti

__all__ = [
    "Volume",
    "SegmentationMap",
    "SubjectRecord",
    "load_volume",
    "preprocess",
    "make_synthetic_pair",
    "split_dataset",
    "write_synthetic_dataset",
    "load_dataset_dir",
]

TARGET_SPACING = (3.15, 1.5, 1.5)  # (slice, row, col) in mm
FULL_SHAPE = (32, 128, 128)
DESK_SHAPE = (8, 32, 32)


@dataclass
class Volume:
    data: np.ndarray  # (D, H, W) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.data, dtype=torch.float32)


@dataclass
class SegmentationMap:
    data: np.ndarray  # (D, H, W) integer labels, 0 = background

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.data.astype(np.int64))

    @property
    def labels(self) -> set[int]:
        return {int(l) for l in np.unique(self.data) if l != 0}


@dataclass
class SubjectRecord:
    id: str
    ed: Volume
    es: Volume
    ed_seg: SegmentationMap | None = None
    es_seg: SegmentationMap | None = None
    n_frames: int = 2
    intermediate_frames: list[Volume] = field(default_factory=list)
    gt_field: np.ndarray | None = None  # (3, D, H, W), synthetic subjects only

    def __post_init__(self):
        if self.ed.data.shape != self.es.data.shape:
            raise ValueError("ED/ES volume shapes differ")
        for seg in (self.ed_seg, self.es_seg):
            if seg is not None and seg.data.shape != self.ed.data.shape:
                raise ValueError("segmentation shape does not match volumes")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")


def load_volume(path) -> Volume:
    """Read a NIfTI volume into the package axis order with its spacing."""
    data, zooms = read_nifti(path)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D volume, got {data.ndim}D: {path}")
    # (x, y, z) -> (z, y, x): slice axis first
    arr = np.ascontiguousarray(np.transpose(data, (2, 1, 0)).astype(np.float32))
    spacing = (zooms[2], zooms[1], zooms[0])
    return Volume(data=arr, spacing=spacing)


def _resample(arr: np.ndarray, spacing, target_spacing, order: int) -> np.ndarray:
    factors = [s / t for s, t in zip(spacing, target_spacing)]
    if all(abs(f - 1.0) < 1e-6 for f in factors):
        return arr
    return zoom(arr, factors, order=order)


def _center_crop_pad(arr: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=arr.dtype)
    src_slices, dst_slices = [], []
    for cur, tgt in zip(arr.shape, shape):
        if cur >= tgt:
            lo = (cur - tgt) // 2
            src_slices.append(slice(lo, lo + tgt))
            dst_slices.append(slice(0, tgt))
        else:
            lo = (tgt - cur) // 2
            src_slices.append(slice(0, cur))
            dst_slices.append(slice(lo, lo + cur))
    out[tuple(dst_slices)] = arr[tuple(src_slices)]
    return out


def preprocess(
    vol: Volume,
    target_spacing=TARGET_SPACING,
    target_shape=FULL_SHAPE,
    seg: bool = False,
) -> Volume:
    """Resample, center crop/zero-pad, then min-max map to [-1, 1].

    With ``seg=True`` the geometry path runs with nearest-neighbor
    interpolation and no intensity mapping (label maps).
    """
    arr = _resample(vol.data, vol.spacing, target_spacing, order=0 if seg else 1)
    arr = _center_crop_pad(arr, target_shape)
    if seg:
        return Volume(data=arr, spacing=tuple(target_spacing))
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        raise ValueError("degenerate intensity range (max == min)")
    arr = 2.0 * (arr - lo) / (hi - lo) - 1.0
    return Volume(data=arr.astype(np.float32), spacing=tuple(target_spacing))


def make_synthetic_pair(
    seed: int,
    shape=DESK_SHAPE,
    max_disp: float = 3.0,
    n_frames: int = 11,
    subject_id: str | None = None,
) -> SubjectRecord:
    """Phantom subject: smooth blobs plus a known smooth deformation.

    The source is a sum of 2-4 Gaussian blobs mapped to [-1, 1]; the
    target is the source warped by a Gaussian-smoothed random field
    scaled to a maximum displacement magnitude of ``max_disp`` voxels.
    Blob masks (labels 1, 2) are transported with nearest-neighbor
    warping to give ground-truth segmentations.
    """
    if max_disp > min(shape) / 2:
        raise ValueError(
            f"max_disp {max_disp} too large for shape {tuple(shape)} "
            f"(limit {min(shape) / 2})"
        )
    rng = np.random.default_rng(seed)
    grid = np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    )

    n_blobs = int(rng.integers(2, 5))
    img = np.zeros(shape, dtype=np.float64)
    seg = np.zeros(shape, dtype=np.int64)
    for i in range(n_blobs):
        center = np.array([rng.uniform(0.25 * s, 0.75 * s) for s in shape])
        sigma = np.array([rng.uniform(0.08 * s, 0.2 * s) for s in shape])
        dist2 = sum(
            ((grid[a] - center[a]) / sigma[a]) ** 2 for a in range(3)
        )
        blob = np.exp(-0.5 * dist2)
        img += rng.uniform(0.5, 1.0) * blob
        if i < 2:
            seg[blob > 0.5] = i + 1

    # smooth low-amplitude texture so no NCC window is exactly constant
    # and the deformation is observable everywhere, not only at blob edges
    img += 0.1 * gaussian_filter(rng.standard_normal(shape), 1.0)

    lo, hi = img.min(), img.max()
    source = (2.0 * (img - lo) / (hi - lo) - 1.0).astype(np.float32)

    if max_disp > 0:
        raw = rng.standard_normal((3,) + tuple(shape))
        # heavy smoothing: the field should vary gently so the peak
        # magnitude is representative of the displacement at the blobs
        smooth_sigma = [max(s / 3.0, 1.0) for s in shape]
        fld = np.stack([gaussian_filter(raw[c], smooth_sigma) for c in range(3)])
        mag = np.sqrt((fld**2).sum(axis=0)).max()
        fld = (fld / mag * max_disp).astype(np.float32)
    else:
        fld = np.zeros((3,) + tuple(shape), dtype=np.float32)

    if max_disp > 0:
        field_t = torch.as_tensor(fld)
        target = warp_trilinear(torch.as_tensor(source), field_t).numpy()
        target_seg = warp_nearest(torch.as_tensor(seg), field_t).numpy()
    else:
        target = source.copy()
        target_seg = seg.copy()

    return SubjectRecord(
        id=subject_id or f"synth-{seed:04d}",
        ed=Volume(data=source, spacing=TARGET_SPACING),
        es=Volume(data=target, spacing=TARGET_SPACING),
        ed_seg=SegmentationMap(data=seg),
        es_seg=SegmentationMap(data=target_seg),
        n_frames=n_frames,
        gt_field=fld,
    )


def split_dataset(records, train_fraction: float, seed: int):
    """Deterministic shuffled split by subject id; both sides non-empty."""
    records = list(records)
    if not records:
        raise ValueError("no records to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = sorted(records, key=lambda r: r.id)
    random.Random(seed).shuffle(order)
    n_train = round(len(order) * train_fraction)
    if n_train == 0 or n_train == len(order):
        raise ValueError(
            f"fraction {train_fraction} leaves an empty side for {len(order)} records"
        )
    return order[:n_train], order[n_train:]


# ---------------------------------------------------------------------------
# On-disk dataset layouts
# ---------------------------------------------------------------------------

def _vol_to_nifti(vol: Volume, path) -> None:
    # back to (x, y, z) order for NIfTI
    write_nifti(path, np.transpose(vol.data, (2, 1, 0)),
                zooms=(vol.spacing[2], vol.spacing[1], vol.spacing[0]))


def write_synthetic_dataset(out_dir, n_subjects: int, seed: int,
                            shape=DESK_SHAPE, max_disp: float = 3.0,
                            n_frames: int = 11) -> list[SubjectRecord]:
    """Write phantom subjects as NIfTI files plus a manifest per subject."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_subjects):
        rec = make_synthetic_pair(seed + i, shape=shape, max_disp=max_disp,
                                  n_frames=n_frames, subject_id=f"synth-{seed + i:04d}")
        sub = out_dir / rec.id
        sub.mkdir(exist_ok=True)
        _vol_to_nifti(rec.ed, sub / "ed.nii.gz")
        _vol_to_nifti(rec.es, sub / "es.nii.gz")
        write_nifti(sub / "ed_seg.nii.gz",
                    np.transpose(rec.ed_seg.data.astype(np.int16), (2, 1, 0)))
        write_nifti(sub / "es_seg.nii.gz",
                    np.transpose(rec.es_seg.data.astype(np.int16), (2, 1, 0)))
        write_nifti(sub / "gt_field.nii.gz",
                    np.transpose(rec.gt_field, (3, 2, 1, 0)))
        (sub / "info.json").write_text(json.dumps(
            {"id": rec.id, "n_frames": rec.n_frames, "synthetic": True}))
        records.append(rec)
    return records


def _load_synthetic_subject(sub: Path) -> SubjectRecord:
    info = json.loads((sub / "info.json").read_text())
    ed = load_volume(sub / "ed.nii.gz")
    es = load_volume(sub / "es.nii.gz")
    ed_seg = load_volume(sub / "ed_seg.nii.gz")
    es_seg = load_volume(sub / "es_seg.nii.gz")
    gt = None
    if (sub / "gt_field.nii.gz").is_file():
        raw, _ = read_nifti(sub / "gt_field.nii.gz")
        gt = np.ascontiguousarray(np.transpose(raw, (3, 2, 1, 0)).astype(np.float32))
    return SubjectRecord(
        id=info["id"], ed=ed, es=es,
        ed_seg=SegmentationMap(data=ed_seg.data.astype(np.int64)),
        es_seg=SegmentationMap(data=es_seg.data.astype(np.int64)),
        n_frames=int(info.get("n_frames", 2)),
        gt_field=gt,
    )


def _parse_acdc_info(path: Path) -> dict:
    info = {}
    for line in path.read_text().splitlines():
        m = re.match(r"\s*(\w+)\s*:\s*(\S+)", line)
        if m:
            info[m.group(1)] = m.group(2)
    return info


def _load_acdc_subject(sub: Path, target_spacing, target_shape) -> SubjectRecord:
    info = _parse_acdc_info(sub / "Info.cfg")
    ed_idx, es_idx = int(info["ED"]), int(info["ES"])
    pid = sub.name

    def frame_path(idx, gt=False):
        suffix = "_gt" if gt else ""
        for ext in (".nii.gz", ".nii"):
            p = sub / f"{pid}_frame{idx:02d}{suffix}{ext}"
            if p.is_file():
                return p
        return None

    ed = preprocess(load_volume(frame_path(ed_idx)), target_spacing, target_shape)
    es = preprocess(load_volume(frame_path(es_idx)), target_spacing, target_shape)
    segs = {}
    for name, idx in (("ed", ed_idx), ("es", es_idx)):
        p = frame_path(idx, gt=True)
        if p is not None:
            vol = preprocess(load_volume(p), target_spacing, target_shape, seg=True)
            segs[name] = SegmentationMap(data=vol.data.astype(np.int64))

    n_frames = abs(es_idx - ed_idx) + 1
    intermediates = []
    for ext in (".nii.gz", ".nii"):
        p4d = sub / f"{pid}_4d{ext}"
        if p4d.is_file():
            raw, zooms = read_nifti(p4d)
            if raw.ndim == 4:
                lo, hi = min(ed_idx, es_idx), max(ed_idx, es_idx)
                for t in range(lo, hi + 1):
                    frame = Volume(
                        data=np.ascontiguousarray(
                            np.transpose(raw[..., t - 1], (2, 1, 0)).astype(np.float32)
                        ),
                        spacing=(zooms[2], zooms[1], zooms[0]),
                    )
                    intermediates.append(
                        preprocess(frame, target_spacing, target_shape)
                    )
                n_frames = hi - lo + 1
            break
    return SubjectRecord(
        id=pid, ed=ed, es=es,
        ed_seg=segs.get("ed"), es_seg=segs.get("es"),
        n_frames=n_frames, intermediate_frames=intermediates,
    )


def load_dataset_dir(root, target_spacing=TARGET_SPACING,
                     target_shape=FULL_SHAPE) -> list[SubjectRecord]:
    """Auto-discover a dataset directory.

    Subdirectories with an ``Info.cfg`` follow the ACDC layout (raw
    scans, preprocessed on load); ones with an ``info.json`` are this
    package's synthetic layout (already preprocessed).
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"not a directory: {root}")
    records = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        if (sub / "info.json").is_file():
            records.append(_load_synthetic_subject(sub))
        elif (sub / "Info.cfg").is_file():
            records.append(_load_acdc_subject(sub, target_spacing, target_shape))
    if not records:
        raise ValueError(f"no subjects found under {root}")
    return records
