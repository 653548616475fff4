"""Batch plumbing: manifests, single-image runs, dataset evaluation, synthetic suite."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .background import HuberConfig
from .errors import BinarizationError, ImageLoadError
from .image import (BinaryImage, Ellipse, GrayImage, SceneSpec, invert, load_image, load_mask,
                    normalize, save_image, save_mask, synth_image)
from .metrics import evaluate
from .threshold import binarize, niblack, otsu, sauvola

log = logging.getLogger(__name__)

SCHEMA = 1
METHODS = ("proposed", "otsu", "niblack", "sauvola")
POLARITIES = ("dark", "light")
REPORT_COLUMNS = ("id", "FM", "pFM", "PSNR", "DRD", "MPM", "tau", "stages", "seconds", "error")
IMAGE_SUFFIXES = (".pgm", ".pnm", ".png")

_LOCAL_DEFAULTS = {"niblack": {"window": 25, "k": -0.2}, "sauvola": {"window": 25, "k": 0.5}}


# -- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    input: Path
    gt: Path
    background: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: Path

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e.id for e in self.entries]


def _no_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ValueError(f"duplicate manifest key {key!r}")
        seen[key] = value
    return seen


def load_manifest(path) -> DatasetManifest:
    """Read a manifest; paths are relative to the manifest's directory.

    Format::

        {"schema": 1, "entries": {"<id>": {"input": "...", "gt": "...",
                                           "background": "..."}}}

    ``background`` is optional.  Every referenced file must exist.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(), object_pairs_hook=_no_duplicates)
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as exc:
        raise ImageLoadError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {doc.get('schema')!r}")
    root = path.parent
    entries = []
    for key in sorted(doc.get("entries", {})):
        item = doc["entries"][key]
        try:
            files = {name: root / item[name] for name in ("input", "gt")}
        except (KeyError, TypeError):
            raise ValueError(f"{path}: entry {key!r} needs 'input' and 'gt'") from None
        if item.get("background"):
            files["background"] = root / item["background"]
        for name, p in files.items():
            if not p.is_file():
                raise FileNotFoundError(f"{path}: entry {key!r} {name} file not found: {p}")
        entries.append(ManifestEntry(key, files["input"], files["gt"], files.get("background")))
    return DatasetManifest(tuple(entries), root)


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        return Path(p).resolve().relative_to(base).as_posix()

    entries = {}
    for e in sorted(manifest.entries, key=lambda e: e.id):
        item = {"input": rel(e.input), "gt": rel(e.gt)}
        if e.background is not None:
            item["background"] = rel(e.background)
        entries[e.id] = item
    path.write_text(json.dumps({"schema": SCHEMA, "entries": entries}, indent=2) + "\n")
    return path


def pair_by_convention(input_dir, gt_dir, out_path, gt_suffixes=("_gt", "_GT", "")):
    """Draft a manifest by matching file stems; written for review, never used implicitly.

    An input ``x.png`` pairs with the first of ``x_gt.*``, ``x_GT.*``, ``x.*``
    found in `gt_dir`.  Unpaired inputs are logged and left out.
    """
    input_dir, gt_dir, out_path = Path(input_dir), Path(gt_dir), Path(out_path)
    gts = {p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES + (".pbm",)}
    entries = []
    for p in sorted(input_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES or (input_dir == gt_dir and p.stem in _gt_stems(gts)):
            continue
        match = next((gts[p.stem + s] for s in gt_suffixes
                      if p.stem + s in gts and gts[p.stem + s] != p), None)
        if match is None:
            log.warning("no ground truth found for %s", p)
            continue
        entries.append(ManifestEntry(p.stem, p, match))
    manifest = DatasetManifest(tuple(entries), out_path.parent)
    write_manifest(manifest, out_path)
    return manifest


def _gt_stems(gts):
    return {s for s in gts if s.endswith(("_gt", "_GT"))}


# -- run configuration -------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Options for one binarization run.

    `huber` and `cap` apply to the proposed method only; `window` and `k` to
    Niblack and Sauvola only.  Leaving them at None means "method default".
    """

    method: str = "proposed"
    huber: Optional[HuberConfig] = None
    polarity: str = "dark"
    out_dir: Path = Path("rb_out")
    report: str = "csv"
    cap: Optional[int] = None
    window: Optional[int] = None
    k: Optional[float] = None
    seed: int = 0
    jobs: int = 1
    timing: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")
        if self.report not in ("csv", "json"):
            raise ValueError("report format must be 'csv' or 'json'")
        if self.method != "proposed" and (self.huber is not None or self.cap is not None):
            raise ValueError(f"background-model options do not apply to method {self.method!r}")
        if self.method not in _LOCAL_DEFAULTS and (self.window is not None or self.k is not None):
            raise ValueError(f"window/k options do not apply to method {self.method!r}")
        if self.cap is not None and self.cap < 1:
            raise ValueError("candidate cap must be positive")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        object.__setattr__(self, "out_dir", Path(self.out_dir))

    @property
    def huber_config(self):
        return self.huber or HuberConfig()

    def local_params(self):
        d = _LOCAL_DEFAULTS[self.method]
        return (d["window"] if self.window is None else self.window,
                d["k"] if self.k is None else self.k)


@dataclass
class RunRecord:
    """Everything one image run produced, before and after writing."""

    mask: BinaryImage
    tau: Optional[float]
    seconds: float
    sidecar: dict
    files: dict = field(default_factory=dict)
    result: object = None


def _prepare(img: GrayImage, cfg: RunConfig):
    unit = normalize(img)
    return invert(unit) if cfg.polarity == "light" else unit


def binarize_image(img: GrayImage, cfg: RunConfig) -> RunRecord:
    """Binarize an in-memory raw-scale image with the configured method."""
    unit = _prepare(img, cfg)
    start = time.perf_counter()
    sidecar = {"schema": SCHEMA, "method": cfg.method, "polarity": cfg.polarity,
               "shape": list(unit.shape)}
    result = None
    if cfg.method == "proposed":
        kwargs = {} if cfg.cap is None else {"cap": cfg.cap}
        result = binarize(unit, cfg.huber_config, **kwargs)
        mask, tau = result.mask, result.tau
        terms = result.model.terms
        sidecar["stages"] = len(terms)
        sidecar["stage_lambda"] = [t.lambda_used for t in terms]
        sidecar["stage_energy"] = [t.energy for t in terms]
        sidecar["stage_iterations"] = [t.irls_iters for t in terms]
        sidecar["stage_converged"] = [bool(t.converged) for t in terms]
    elif cfg.method == "otsu":
        tau, mask = otsu(unit)
        tau = None if math.isinf(tau) else tau
    else:
        w, k = cfg.local_params()
        mask = (niblack if cfg.method == "niblack" else sauvola)(unit, w=w, k=k)
        tau = None
        sidecar.update(window=w, k=k)
    seconds = time.perf_counter() - start
    sidecar["tau"] = tau
    sidecar["seconds"] = seconds if cfg.timing else None
    sidecar["foreground_fraction"] = float(mask.as_bool().mean())
    return RunRecord(mask, tau, seconds, sidecar, result=result)


def _rescale_for_view(values):
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    return GrayImage((values - lo) / span, "unit")


def write_record(record: RunRecord, out_dir, stem):
    """Write mask, sidecar and (proposed method) background / subtracted images."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"mask": out_dir / f"{stem}_mask.pbm"}
    save_mask(record.mask, files["mask"])
    res = record.result
    if res is not None:
        files["background"] = out_dir / f"{stem}_background.pgm"
        files["subtracted_view"] = out_dir / f"{stem}_subtracted.pgm"
        files["subtracted"] = out_dir / f"{stem}_subtracted.npy"
        save_image(_rescale_for_view(res.background), files["background"])
        save_image(_rescale_for_view(res.subtracted.values), files["subtracted_view"])
        with open(files["subtracted"], "wb") as fh:
            np.save(fh, res.subtracted.values)
    files["sidecar"] = out_dir / f"{stem}.json"
    record.sidecar["files"] = {k: v.name for k, v in files.items() if k != "sidecar"}
    files["sidecar"].write_text(json.dumps(record.sidecar, indent=2) + "\n")
    record.files = files
    return files


def run_single(input_path, cfg: RunConfig) -> RunRecord:
    """Load, binarize and write all artifacts for one image into ``cfg.out_dir``."""
    input_path = Path(input_path)
    if not input_path.is_file():
        raise FileNotFoundError(f"input file not found: {input_path}")
    record = binarize_image(load_image(input_path), cfg)
    record.sidecar["input"] = input_path.name
    write_record(record, cfg.out_dir, input_path.stem)
    return record


# -- dataset evaluation ------------------------------------------------------


@dataclass(frozen=True)
class DatasetReport:
    method: str
    rows: tuple
    mean: dict

    @property
    def errors(self):
        return [r for r in self.rows if r["error"]]


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def _evaluate_entry(entry: ManifestEntry, cfg: RunConfig, out_dir):
    row = dict.fromkeys(REPORT_COLUMNS, None)
    row["id"] = entry.id
    try:
        img = load_image(entry.input)
        gt = load_mask(entry.gt)
        record = binarize_image(img, cfg)
        record.sidecar["input"] = entry.input.name
        report = evaluate(record.mask, gt, strict=False)
        write_record(record, out_dir, entry.id)
    except (BinarizationError, OSError, ValueError) as exc:
        log.warning("%s: %s failed: %s", entry.id, entry.input, exc)
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    row.update(FM=report.fm, pFM=report.pfm, PSNR=report.psnr, DRD=report.drd, MPM=report.mpm,
               tau=record.tau, stages=record.sidecar.get("stages"),
               seconds=record.seconds if cfg.timing else None, error="")
    return row


def _column_mean(rows, key):
    vals = [r[key] for r in rows if not r["error"] and r[key] is not None
            and not (isinstance(r[key], float) and math.isnan(r[key]))]
    return float(np.mean(vals)) if vals else None


def run_dataset(manifest: DatasetManifest, cfg: RunConfig) -> DatasetReport:
    """Binarize and score every manifest entry; rows are ordered by id.

    Failures become rows with an ``error`` message and blank metrics; the
    mean row averages the defined values of the successful rows.  Artifacts
    and the report go to ``cfg.out_dir / cfg.method``.
    """
    out_dir = cfg.out_dir / cfg.method
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = sorted(manifest.entries, key=lambda e: e.id)
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(lambda e: _evaluate_entry(e, cfg, out_dir), entries))
    else:
        rows = [_evaluate_entry(e, cfg, out_dir) for e in entries]
    mean = {key: _column_mean(rows, key) for key in REPORT_COLUMNS[1:-1]}
    mean.update(id="mean", error="")
    report = DatasetReport(cfg.method, tuple(rows), mean)
    write_report(report, out_dir / f"report.{cfg.report}")
    return report


def report_csv(report: DatasetReport):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in list(report.rows) + [report.mean]:
        writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def report_json(report: DatasetReport):
    def clean(row):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}

    doc = {"schema": SCHEMA, "method": report.method, "columns": list(REPORT_COLUMNS),
           "rows": [clean(r) for r in report.rows], "mean": clean(report.mean)}
    return json.dumps(doc, indent=2) + "\n"


def write_report(report: DatasetReport, path):
    path = Path(path)
    path.write_text(report_csv(report) if path.suffix == ".csv" else report_json(report))
    return path


# -- synthetic suite ---------------------------------------------------------

SUITE_SIZE = 256
SUITE_DEPTH = 0.35

_SLOPE = (((0.55, 0.35), (1.0,)),)
_BOWL = (((0.7, -0.6, 0.6), (1.0,)), ((1.0,), (0.15, -0.6, 0.6)))
_TILT = (((0.5, 0.3), (1.0,)), ((1.0,), (0.0, 0.15)))
_FLAT = (((0.8,), (1.0,)),)
_MILD = (((0.7, 0.1), (1.0,)),)

# id, background, noise sigma, object layout, target foreground fraction
SUITE_SCENES = (
    ("s01_flat", _FLAT, 0.03, "blobs", 0.08),
    ("s02_slope", _SLOPE, 0.03, "blobs", 0.08),
    ("s03_bowl", _BOWL, 0.03, "blobs", 0.08),
    ("s04_noisy", _SLOPE, 0.10, "blobs", 0.10),
    ("s05_dense_flat", _FLAT, 0.03, "blobs", 0.30),
    ("s06_dense_tilt", _TILT, 0.03, "blobs", 0.30),
    ("s07_strokes", _BOWL, 0.03, "strokes", 0.08),
    ("s08_sparse", _SLOPE, 0.03, "blobs", 0.005),
    ("s09_blank_flat", _FLAT, 0.03, None, 0.0),
    ("s10_blank_slope", _MILD, 0.02, None, 0.0),
)


def _layout(rng, kind, target, n, depth):
    """Add random objects until the covered fraction reaches `target`."""
    covered = np.zeros((n, n), dtype=bool)
    ii, jj = np.mgrid[0:n, 0:n]
    objs = []
    while covered.mean() < target:
        if kind == "blobs":
            ry = rx = rng.uniform(5.0, 12.0)
        else:
            ry, rx = rng.uniform(1.5, 3.0), rng.uniform(8.0, 24.0)
            if rng.random() < 0.5:
                ry, rx = rx, ry
        cy = rng.uniform(ry + 1, n - ry - 2)
        cx = rng.uniform(rx + 1, n - rx - 2)
        obj = Ellipse(float(cy), float(cx), float(ry), float(rx), depth)
        covered |= ((ii - cy) / ry) ** 2 + ((jj - cx) / rx) ** 2 <= 1.0
        objs.append(obj)
    return tuple(objs)


def suite_specs(seed):
    """The ten `SceneSpec`s of the synthetic acceptance suite for `seed`."""
    specs = []
    for idx, (sid, bg, sigma, kind, target) in enumerate(SUITE_SCENES):
        rng = np.random.default_rng([seed, idx])
        objs = _layout(rng, kind, target, SUITE_SIZE, SUITE_DEPTH) if kind else ()
        specs.append((sid, SceneSpec(SUITE_SIZE, SUITE_SIZE, background=bg, objects=objs,
                                     sigma=sigma, seed=int(rng.integers(2 ** 31)))))
    return specs


def gen_synthetic_suite(out_dir, seed) -> DatasetManifest:
    """Render the suite to `out_dir` and write ``manifest.json`` there.

    Per scene: the noisy input as 8-bit PGM, the ground-truth mask as PBM and
    the ground-truth background as 16-bit PGM.  Output is byte-deterministic
    in `seed`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, spec in suite_specs(seed):
        noisy, mask, bg = synth_image(spec)
        paths = (out_dir / f"{sid}.pgm", out_dir / f"{sid}_gt.pbm", out_dir / f"{sid}_bg.pgm")
        save_image(noisy, paths[0])
        save_mask(mask, paths[1])
        save_image(bg, paths[2], maxval=65535)
        entries.append(ManifestEntry(sid, *paths))
    manifest = DatasetManifest(tuple(entries), out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
