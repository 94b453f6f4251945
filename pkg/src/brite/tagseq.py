"""TAGSEQ binary container plus JSON sidecar.

Layout (little-endian): ``b"TGSQ"``, u32 version, u32 T, u32 H, u32 W,
u8 channel count, then T x C x H x W float32, frame-major, row-major.
For tagged images the two channels are (h, v); for displacement fields
they are (dx, dy).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .fields import Diffeo, ScalarField2D, VectorField2D
from .phantom import TaggedSequence, TagParams

MAGIC = b"TGSQ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")


class TagSeqFormatError(ValueError):
    pass


class UnsupportedVersionError(TagSeqFormatError):
    pass


def write_raster(path, arr: np.ndarray) -> None:
    """Write a (T, C, H, W) array."""
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ValueError(f"raster must be (T, C, H, W), got {arr.shape}")
    t, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, t, h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_raster(path) -> np.ndarray:
    """Read a (T, C, H, W) float32 array back as float64."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TagSeqFormatError(f"{path}: file too short for a TAGSEQ header")
    magic, version, t, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TagSeqFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported TAGSEQ version {version} (expected {VERSION})")
    expected = t * c * h * w * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise TagSeqFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w).astype(np.float64)


def _meta_path(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def save_sequence(seq: TaggedSequence, path) -> Path:
    """Write ``<name>.tgsq`` with its ``.meta.json`` sidecar and ground-truth files."""
    path = Path(path)
    write_raster(path, np.stack([seq.frames_h, seq.frames_v], axis=1))
    meta = {
        "format": "TAGSEQ",
        "version": VERSION,
        "spacing_mm": list(seq.spacing_mm),
        "tag_period_mm": seq.tag_period_mm,
        "times_s": [float(t) for t in seq.times_s],
        "fading_preset": seq.fading_preset,
        "seed": seq.seed,
        "ground_truth": None,
    }
    if seq.motion is not None:
        fwd = path.with_name(path.stem + ".gt_forward.tgsq")
        inv = path.with_name(path.stem + ".gt_inverse.tgsq")
        write_raster(fwd, np.stack([d.forward.as_array() for d in seq.motion]))
        write_raster(inv, np.stack([d.inverse.as_array() for d in seq.motion]))
        meta["ground_truth"] = {"forward": fwd.name, "inverse": inv.name,
                                "n_squaring_steps": [d.n_squaring_steps for d in seq.motion]}
    if seq.anatomy is not None:
        anat = path.with_name(path.stem + ".anatomy.tgsq")
        write_raster(anat, seq.anatomy.data[None, None])
        meta["anatomy"] = anat.name
    if seq.tag_params is not None:
        meta["tag_params"] = seq.tag_params.to_dict()
    if seq.extra:
        meta["extra"] = seq.extra
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_sequence(path) -> TaggedSequence:
    path = Path(path)
    arr = read_raster(path)
    if arr.shape[1] != 2:
        raise TagSeqFormatError(f"{path}: tagged sequence needs 2 orientations, found {arr.shape[1]}")
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise TagSeqFormatError(f"{path}: missing sidecar {meta_file.name}")
    meta = json.loads(meta_file.read_text())
    spacing = tuple(meta["spacing_mm"])
    motion = None
    gt = meta.get("ground_truth")
    if gt:
        fwd = read_raster(path.with_name(gt["forward"]))
        inv = read_raster(path.with_name(gt["inverse"]))
        steps = gt.get("n_squaring_steps", [0] * len(fwd))
        motion = [Diffeo(VectorField2D.from_array(f, spacing), VectorField2D.from_array(i, spacing), int(n))
                  for f, i, n in zip(fwd, inv, steps)]
    anatomy = None
    if meta.get("anatomy"):
        anatomy = ScalarField2D(read_raster(path.with_name(meta["anatomy"]))[0, 0], spacing)
    tag_params = TagParams.from_dict(meta["tag_params"]) if meta.get("tag_params") else None
    return TaggedSequence(
        frames_h=arr[:, 0], frames_v=arr[:, 1], times_s=np.asarray(meta["times_s"]),
        tag_period_mm=float(meta["tag_period_mm"]), spacing_mm=spacing,
        fading_preset=meta.get("fading_preset"), seed=meta.get("seed"), motion=motion,
        anatomy=anatomy, tag_params=tag_params, extra=meta.get("extra", {}),
    )


def save_displacements(fields: list[VectorField2D], path) -> Path:
    path = Path(path)
    write_raster(path, np.stack([f.as_array() for f in fields]))
    return path


def load_displacements(path, spacing_mm=(1.0, 1.0)) -> list[VectorField2D]:
    arr = read_raster(path)
    if arr.shape[1] != 2:
        raise TagSeqFormatError(f"{path}: displacement file needs 2 components, found {arr.shape[1]}")
    return [VectorField2D.from_array(a, spacing_mm) for a in arr]
