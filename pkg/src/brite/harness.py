"""Experiment grid: simulate, run every method, score against ground truth, aggregate."""

from __future__ import annotations

import csv
import json
import logging
import platform
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy
from scipy.ndimage import binary_erosion

from . import __version__
from .baselines import run_baseline
from .disentangle import disentangle
from .disentangle import options_from_dict as disentangle_options
from .fields import ScalarField2D, VectorField2D, emps, epe, summary_stats
from .phantom import (TaggedSequence, TagParams, bspline_deformation, fading_preset, gen_oval_anatomy,
                      rigid_rotation_motion, static_motion, synthesize_sequence, translation_motion)
from .tagseq import save_sequence
from .tracker import options_from_dict as track_options
from .tracker import track_sequence

log = logging.getLogger(__name__)

METHODS = ("brite", "harp", "sinmod")
CSV_HEADER = ("method", "tag_period_mm", "preset", "motion_id", "time_s", "epe_mean", "epe_median", "epe_q1",
              "epe_q3", "emps_mean", "emps_median", "emps_q1", "emps_q3", "n_px")


class ConfigError(ValueError):
    pass


def default_motion_suite() -> dict:
    return {"nonrigid_seeds": 20, "rotation_deg": 15.0, "static": True, "translation_fraction": None}


@dataclass
class ExperimentConfig:
    grid_size: int = 64
    n_frames: int = 20
    frame_interval_s: float = 0.055
    spacing_mm: tuple = (2.0, 2.0)
    tag_periods_mm: list = field(default_factory=lambda: [9.0, 12.0, 18.0, 26.0])
    fading_presets: list = field(default_factory=lambda: ["FA5", "FA10"])
    motion_suite: dict = field(default_factory=default_motion_suite)
    methods: list = field(default_factory=lambda: list(METHODS))
    method_options: dict = field(default_factory=dict)
    output_dir: str = "out"
    master_seed: int = 0
    frames_every: int = 5
    noise_sigma: float = 0.01
    bspline_control_spacing_px: float = 16.0
    bspline_max_disp_px: float = 4.0
    workers: int = 1
    save_artifacts: bool = False

    def __post_init__(self):
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.motion_suite = {**default_motion_suite(), **(self.motion_suite or {})}
        self.validate()

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if not self.tag_periods_mm or any(not tp > 0 for tp in self.tag_periods_mm):
            raise ConfigError("tag periods must be a non-empty list of positive values")
        if self.grid_size < 32:
            raise ConfigError("grid_size must be at least 32")
        if self.n_frames < 1 or self.frames_every < 1 or self.workers < 1:
            raise ConfigError("n_frames, frames_every and workers must be >= 1")
        for p in self.fading_presets:
            fading_preset(p)
        if not self.motion_ids():
            raise ConfigError("motion suite is empty")

    def motion_ids(self) -> list[str]:
        m = self.motion_suite
        ids = []
        if m.get("static"):
            ids.append("static")
        if m.get("rotation_deg") is not None:
            ids.append(f"rotation{m['rotation_deg']:g}")
        if m.get("translation_fraction") is not None:
            ids.append(f"translation{m['translation_fraction']:g}")
        ids += [f"nonrigid{i:02d}" for i in range(int(m.get("nonrigid_seeds") or 0))]
        return ids

    @property
    def times_s(self) -> np.ndarray:
        return np.round(np.arange(self.n_frames) * self.frame_interval_s, 6)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spacing_mm"] = list(self.spacing_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


def scale_preset(scale: str) -> dict:
    """Config overrides for the two shipped scales; 'paper' is slow."""
    if scale == "desk":
        return {
            "grid_size": 64, "n_frames": 20, "frame_interval_s": 0.055, "frames_every": 5,
            "motion_suite": {"nonrigid_seeds": 2, "rotation_deg": 15.0, "static": True},
            "method_options": {"brite": {"track": desk_track_options()}},
        }
    if scale == "paper":
        return {
            "grid_size": 128, "n_frames": 100, "frame_interval_s": 0.011, "frames_every": 5,
            "motion_suite": {"nonrigid_seeds": 20, "rotation_deg": 15.0, "static": True},
            "bspline_control_spacing_px": 32.0, "bspline_max_disp_px": 8.0,
            "method_options": {},
        }
    raise ConfigError(f"unknown scale {scale!r}")


def desk_track_options() -> dict:
    return {"iterations": 200, "lr_net": 1e-3, "velocity_stride": 2}


@dataclass
class MetricsRecord:
    method: str
    tag_period_mm: float
    preset: str
    motion_id: str
    time_s: float
    epe_mean: float
    epe_median: float
    epe_q1: float
    epe_q3: float
    emps_mean: float
    emps_median: float
    emps_q1: float
    emps_q3: float
    n_px: int

    def row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in CSV_HEADER]


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def evaluation_indices(n_frames: int, every: int) -> list[int]:
    """Every ``every``-th frame from 0, always including the last one."""
    return sorted(set(range(0, n_frames, every)) | {n_frames - 1})


def foreground_mask(anatomy: ScalarField2D | np.ndarray, threshold: float = 0.05, erosion_px: int = 2) -> np.ndarray:
    a = anatomy.data if isinstance(anatomy, ScalarField2D) else np.asarray(anatomy)
    mask = a > threshold
    return binary_erosion(mask, iterations=erosion_px) if erosion_px > 0 else mask


def score(method: str, seq: TaggedSequence, estimates: list[VectorField2D], mask: np.ndarray,
          indices, motion_id: str) -> list[MetricsRecord]:
    if seq.motion is None:
        raise ValueError("sequence has no ground truth motion")
    if len(estimates) != seq.n_frames:
        raise ValueError(f"{len(estimates)} displacement fields for {seq.n_frames} frames")
    out = []
    for t in indices:
        gt = seq.motion[t].forward
        e = summary_stats(epe(gt, estimates[t]), mask)
        s = summary_stats(emps(gt, estimates[t]), mask)
        out.append(MetricsRecord(method, float(seq.tag_period_mm), str(seq.fading_preset), motion_id,
                                 float(seq.times_s[t]), e["mean"], e["median"], e["q1"], e["q3"],
                                 s["mean"], s["median"], s["q1"], s["q3"], e["n"]))
    return out


@dataclass(frozen=True)
class Cell:
    tag_period_mm: float
    preset: str
    motion_id: str
    index: tuple

    @property
    def name(self) -> str:
        return f"tp{self.tag_period_mm:g}_{self.preset}_{self.motion_id}"


def grid_cells(cfg: ExperimentConfig) -> list[Cell]:
    return [Cell(float(tp), p, m, (i, j, k))
            for i, tp in enumerate(cfg.tag_periods_mm)
            for j, p in enumerate(cfg.fading_presets)
            for k, m in enumerate(cfg.motion_ids())]


def _seed(*key) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def run_anatomy(cfg: ExperimentConfig) -> ScalarField2D:
    n = cfg.grid_size
    return gen_oval_anatomy(_seed(cfg.master_seed, 0), n, n, spacing_mm=cfg.spacing_mm)


def build_motion(cfg: ExperimentConfig, motion_id: str, tag_period_mm: float):
    """Motions depend only on the motion id and master seed, so they match across tag periods and presets."""
    n, T = cfg.grid_size, cfg.n_frames
    shape, spacing = (n, n), cfg.spacing_mm
    if motion_id == "static":
        return static_motion(T, shape, spacing)
    if motion_id.startswith("rotation"):
        center = ((n - 1) / 2, (n - 1) / 2)
        return rigid_rotation_motion(float(cfg.motion_suite["rotation_deg"]), center, T, shape, spacing)
    if motion_id.startswith("translation"):
        shift = float(cfg.motion_suite["translation_fraction"]) * tag_period_mm / spacing[0]
        return translation_motion((shift, 0.0), T, shape, spacing)
    if motion_id.startswith("nonrigid"):
        k = int(motion_id[len("nonrigid"):])
        motion = bspline_deformation(_seed(cfg.master_seed, 1, k), n, n, cfg.bspline_control_spacing_px,
                                     cfg.bspline_max_disp_px)
        return [_with_spacing(d, spacing) for d in motion.frames(T)]
    raise ValueError(f"unknown motion id {motion_id!r}")


def _with_spacing(d, spacing):
    from .fields import Diffeo
    return Diffeo(VectorField2D(d.forward.dx, d.forward.dy, spacing),
                  VectorField2D(d.inverse.dx, d.inverse.dy, spacing), d.n_squaring_steps)


def simulate_cell(cfg: ExperimentConfig, cell: Cell, anatomy: ScalarField2D | None = None) -> TaggedSequence:
    anatomy = anatomy if anatomy is not None else run_anatomy(cfg)
    rng = np.random.default_rng(_seed(cfg.master_seed, 2, *cell.index))
    tp = TagParams(A=0.45, B=0.55, mu=1.0 / cell.tag_period_mm,
                   phi_h=float(rng.uniform(0, 2 * np.pi)), phi_v=float(rng.uniform(0, 2 * np.pi)))
    motion = build_motion(cfg, cell.motion_id, cell.tag_period_mm)
    seq = synthesize_sequence(anatomy, tp, fading_preset(cell.preset), motion, cfg.times_s,
                              noise_sigma=cfg.noise_sigma, seed=_seed(cfg.master_seed, 3, *cell.index))
    seq.tag_period_mm = cell.tag_period_mm
    seq.fading_preset = cell.preset
    seq.extra = {"motion_id": cell.motion_id}
    return seq


def run_method(method: str, seq: TaggedSequence, options: dict | None = None, artifact_dir: Path | None = None):
    """Displacement fields (one per frame) from one method."""
    options = options or {}
    if method == "brite":
        dis = disentangle(seq.frame(0, "h"), seq.frame(0, "v"),
                          opts=disentangle_options(options.get("disentangle")),
                          tag_period_hint_mm=seq.tag_period_mm)
        res = track_sequence(seq, dis, track_options(options.get("track")))
        if artifact_dir is not None:
            dis.save(artifact_dir / "brite")
            res.save(artifact_dir / "brite")
        return res.displacements()
    res = run_baseline(method, seq, options)
    if artifact_dir is not None:
        res.save(artifact_dir / method)
    return res.displacements


def run_cell(cfg_dict: dict, cell: Cell) -> tuple[list[MetricsRecord], list[dict]]:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    anatomy = run_anatomy(cfg)
    records, failures = [], []
    try:
        seq = simulate_cell(cfg, cell, anatomy)
    except Exception as exc:  # recorded, the grid goes on
        return [], [{"cell": cell.name, "method": None, "error": repr(exc)}]
    mask = foreground_mask(anatomy)
    indices = evaluation_indices(seq.n_frames, cfg.frames_every)
    artifact_dir = None
    if cfg.save_artifacts:
        artifact_dir = Path(cfg.output_dir) / "cells" / cell.name
        artifact_dir.mkdir(parents=True, exist_ok=True)
        save_sequence(seq, artifact_dir / "sequence.tgsq")
    for method in cfg.methods:
        try:
            est = run_method(method, seq, cfg.method_options.get(method), artifact_dir)
            records += score(method, seq, est, mask, indices, cell.motion_id)
        except Exception as exc:
            log.warning("cell %s method %s failed: %r", cell.name, method, exc)
            failures.append({"cell": cell.name, "method": method, "error": repr(exc),
                             "traceback": traceback.format_exc()})
    return records, failures


def write_metrics(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())
    return path


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty metrics file") from None
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                vals = dict(zip(CSV_HEADER, row))
                out.append(MetricsRecord(
                    vals["method"], float(vals["tag_period_mm"]), vals["preset"], vals["motion_id"],
                    float(vals["time_s"]), *(float(vals[k]) for k in CSV_HEADER[5:13]), int(vals["n_px"])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def manifest(cfg: ExperimentConfig, cells, failures) -> dict:
    import matplotlib
    return {
        "package_version": __version__,
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
                     "matplotlib": matplotlib.__version__},
        "master_seed": cfg.master_seed,
        "cells": [{"name": c.name, "simulation_seed": _seed(cfg.master_seed, 3, *c.index)} for c in cells],
        "config": cfg.to_dict(),
        "failures": failures,
    }


def run_experiment(cfg: ExperimentConfig, progress=None) -> Path:
    """Run the whole grid and write ``metrics.csv`` and ``manifest.json`` into ``cfg.output_dir``.

    Records are written in grid order whatever the worker count, so output
    depends only on the config.
    """
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".write_test").write_text("")
        (out / ".write_test").unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    cells = grid_cells(cfg)
    cfg_dict = cfg.to_dict()
    results = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(run_cell, cfg_dict, c) for c in cells]
            for c, f in zip(cells, futures):
                results.append(f.result())
                if progress:
                    progress(c)
    else:
        for c in cells:
            results.append(run_cell(cfg_dict, c))
            if progress:
                progress(c)
    records = [r for recs, _ in results for r in recs]
    failures = [f for _, fs in results for f in fs]
    path = write_metrics(records, out / "metrics.csv")
    (out / "manifest.json").write_text(json.dumps(manifest(cfg, cells, failures), indent=2, sort_keys=True))
    return path


GroupKey = tuple  # (method, tag_period_mm, preset, time_s)


def aggregate(records) -> dict:
    """Pool records over motions: median of the per-sequence medians and quartiles."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.method, r.tag_period_mm, r.preset, r.time_s)].append(r)
    out = {}
    for key in sorted(groups):
        rs = groups[key]
        out[key] = {
            "n_records": len(rs),
            **{k: float(np.median([getattr(r, k) for r in rs]))
               for k in ("epe_median", "epe_q1", "epe_q3", "emps_median", "emps_q1", "emps_q3")},
        }
    return out


def ranking(summary: dict, metric: str = "epe_median") -> list[dict]:
    """Methods ranked per (tag period, preset) at the latest time in the records."""
    by_cond = defaultdict(dict)
    for (method, tp, preset, t), v in summary.items():
        cur = by_cond[(tp, preset)].get(method)
        if cur is None or t > cur[0]:
            by_cond[(tp, preset)][method] = (t, v)
    rows = []
    for (tp, preset) in sorted(by_cond):
        ordered = sorted(by_cond[(tp, preset)].items(), key=lambda kv: (kv[1][1][metric], kv[0]))
        for rank, (method, (t, v)) in enumerate(ordered, start=1):
            rows.append({"tag_period_mm": tp, "preset": preset, "rank": rank, "method": method, "time_s": t,
                         "epe_median": v["epe_median"], "emps_median": v["emps_median"]})
    return rows


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def report(csv_path, out_dir=None) -> dict:
    """Summary, pivot and ranking tables plus one PNG per preset."""
    csv_path = Path(csv_path)
    out = Path(out_dir) if out_dir is not None else csv_path.parent / "report"
    out.mkdir(parents=True, exist_ok=True)
    summary = aggregate(read_metrics(csv_path))
    stat_keys = ("n_records", "epe_median", "epe_q1", "epe_q3", "emps_median", "emps_q1", "emps_q3")
    _write_rows(out / "summary.csv", ("method", "tag_period_mm", "preset", "time_s") + stat_keys,
                [list(k) + [v[s] for s in stat_keys] for k, v in summary.items()])

    columns = sorted({(m, tp, p) for m, tp, p, _ in summary})
    times = sorted({t for *_, t in summary})
    files = {"summary": out / "summary.csv"}
    for metric in ("epe_median", "emps_median"):
        rows = [[t] + [summary.get((m, tp, p, t), {}).get(metric, float("nan")) for m, tp, p in columns]
                for t in times]
        path = out / f"pivot_{metric}.csv"
        _write_rows(path, ["time_s"] + [f"{m}|tp{tp:g}|{p}" for m, tp, p in columns], rows)
        files[f"pivot_{metric}"] = path

    ranks = ranking(summary)
    rank_keys = ("tag_period_mm", "preset", "rank", "method", "time_s", "epe_median", "emps_median")
    _write_rows(out / "ranking.csv", rank_keys, [[r[k] for k in rank_keys] for r in ranks])
    files["ranking"] = out / "ranking.csv"
    files.update(_plot(summary, out))
    return files


def _plot(summary: dict, out: Path) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    presets = sorted({p for _, _, p, _ in summary})
    tps = sorted({tp for _, tp, _, _ in summary})
    methods = sorted({m for m, *_ in summary})
    for preset in presets:
        fig, axes = plt.subplots(2, len(tps), figsize=(3.2 * len(tps), 5.5), squeeze=False)
        for j, tp in enumerate(tps):
            for i, (metric, label) in enumerate((("epe", "EPE (px)"), ("emps", "eMPS"))):
                ax = axes[i, j]
                for m in methods:
                    keys = sorted(k for k in summary if k[0] == m and k[1] == tp and k[2] == preset)
                    if not keys:
                        continue
                    t = [k[3] for k in keys]
                    med = [summary[k][f"{metric}_median"] for k in keys]
                    ax.plot(t, med, marker="o", ms=3, label=m)
                    ax.fill_between(t, [summary[k][f"{metric}_q1"] for k in keys],
                                    [summary[k][f"{metric}_q3"] for k in keys], alpha=0.2)
                if i == 0:
                    ax.set_title(f"TP {tp:g} mm")
                if j == 0:
                    ax.set_ylabel(label)
                ax.set_xlabel("time (s)")
        axes[0, 0].legend(fontsize=7)
        fig.suptitle(preset)
        fig.tight_layout()
        path = out / f"metrics_{preset}.png"
        fig.savefig(path, dpi=80, metadata={"Software": None})
        plt.close(fig)
        files[f"plot_{preset}"] = path
    return files
