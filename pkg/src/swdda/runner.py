"""Command-line experiment runner.

Subcommands::

    swdda run    --config moons.cfg [--out DIR] [--seed N]
    swdda sweep  --config moons.cfg [--out DIR] [--projections 1,8,32,128] [--seeds 5]
    swdda ablate --config moons.cfg [--out DIR] [--seeds 5]
    swdda raster --config moons.cfg --model model.bin [--out DIR] [--resolution 200]

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

import argparse
import configparser
import csv
import logging
import math
import re
import shutil
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import (
    LabeledDataset,
    ShiftSpec,
    apply_shift,
    export_csv,
    gaussian_blobs,
    load_idx,
    make_moons,
)
from .models import MlpSpec, init_bundle, load_bundle, predict, save_bundle
from .training import TrainConfig, evaluate, train, write_history_csv

log = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "moons.cfg"

# section -> key -> parser; anything else in a config file is an error
_EXPERIMENT_KEYS = {
    "name": str,
    "output_dir": str,
    "seed": int,
    "run_source_only": "bool",
    "run_l1_mcd": "bool",
}
_DATASET_KEYS = {
    "kind": str,
    "n_per_class": int,
    "noise": float,
    "source_seed": int,
    "target_seed": int,
    "rotation_deg": float,
    "translation": "floats",
    "centers": "points",
    "std": float,
    "source_images": str,
    "source_labels": str,
    "target_images": str,
    "target_labels": str,
    "max_samples": int,
}
_MODEL_KEYS = {"generator_widths": "ints", "classifier_widths": "ints"}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig) if f.name != "seed"}
_RASTER_KEYS = {"resolution": int, "x_range": "floats", "y_range": "floats"}
SCHEMA = {
    "experiment": _EXPERIMENT_KEYS,
    "dataset": _DATASET_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "raster": _RASTER_KEYS,
}


class ConfigError(Exception):
    """Invalid experiment configuration; the message names file and line."""


@dataclass
class ExperimentConfig:
    name: str
    output_dir: Path
    seed: int
    run_source_only: bool
    run_l1_mcd: bool
    dataset: Dict
    generator_widths: Tuple[int, ...]
    classifier_widths: Tuple[int, ...]
    train: TrainConfig
    raster_resolution: int
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    source_path: Optional[Path] = None


def _line_index(text):
    """Map (section, key) -> 1-based line number in the raw config text."""
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = lineno
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            where.setdefault((section, key), lineno)
    return where


def _convert(kind, raw):
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if kind in (str, "str"):
        return raw
    if kind in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "ints":
        return tuple(int(v) for v in raw.split(","))
    if kind == "floats":
        return tuple(float(v) for v in raw.split(","))
    if kind == "points":
        return [tuple(float(v) for v in p.split(",")) for p in raw.split(";")]
    raise TypeError(kind)


def load_config(path, seed_override=None):
    """Parse and validate an INI experiment config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    def where(section, key=None):
        return f"{path}:{lines.get((section, key), lines.get((section, None), 0))}"

    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}]")
            try:
                values[section][key] = _convert(SCHEMA[section][key], raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{where(section, key)}: bad value for {key!r}: {exc}") from exc

    def need(section, key):
        try:
            return values[section][key]
        except KeyError:
            raise ConfigError(f"{path}: missing [{section}] {key}") from None

    exp = values.get("experiment", {})
    ds = dict(values.get("dataset", {}))
    ds.setdefault("kind", "moons")
    if ds["kind"] not in ("moons", "blobs", "idx"):
        raise ConfigError(f"{where('dataset', 'kind')}: kind must be moons, blobs or idx")
    train_kw = dict(values.get("train", {}))
    seed = exp.get("seed", 0) if seed_override is None else seed_override
    tcfg = TrainConfig(seed=seed, **train_kw)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{where('train')}: {exc}") from exc

    gw = need("model", "generator_widths")
    cw = need("model", "classifier_widths")
    try:
        MlpSpec(gw), MlpSpec(cw)
    except ValueError as exc:
        raise ConfigError(f"{where('model')}: {exc}") from exc
    if gw[-1] != cw[0]:
        raise ConfigError(f"{where('model', 'classifier_widths')}: generator emits {gw[-1]} features "
                          f"but classifier expects {cw[0]}")

    if ds["kind"] == "idx":
        for key in ("source_images", "source_labels", "target_images", "target_labels"):
            p = Path(need("dataset", key))
            if not p.is_absolute():
                p = path.parent / p
            if not p.exists():
                raise ConfigError(f"{where('dataset', key)}: no such file {p}")
            ds[key] = p

    raster = values.get("raster", {})
    out = Path(exp.get("output_dir", f"runs/{exp.get('name', path.stem)}"))
    return ExperimentConfig(
        name=exp.get("name", path.stem),
        output_dir=out,
        seed=seed,
        run_source_only=exp.get("run_source_only", True),
        run_l1_mcd=exp.get("run_l1_mcd", False),
        dataset=ds,
        generator_widths=gw,
        classifier_widths=cw,
        train=tcfg,
        raster_resolution=raster.get("resolution", 200),
        x_range=tuple(raster.get("x_range", (-2.0, 3.0))),
        y_range=tuple(raster.get("y_range", (-2.0, 2.5))),
        source_path=path,
    )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def build_datasets(cfg):
    """(source, target) labelled datasets; target labels are for scoring only."""
    ds = cfg.dataset
    kind = ds["kind"]
    shift = ShiftSpec(math.radians(ds.get("rotation_deg", 30.0)), tuple(ds.get("translation", (0.3, 0.2))))
    if kind == "moons":
        n, noise = ds.get("n_per_class", 300), ds.get("noise", 0.05)
        source = make_moons(n, noise, ds.get("source_seed", 1234))
        target = apply_shift(make_moons(n, noise, ds.get("target_seed", 4321)), shift)
    elif kind == "blobs":
        centers = ds.get("centers", [(0.0, 0.0), (2.0, 2.0)])
        n, std = ds.get("n_per_class", 300), ds.get("std", 0.5)
        source = gaussian_blobs(centers, std, n, ds.get("source_seed", 1234))
        if len(centers[0]) != 2:
            shift = ShiftSpec(0.0, tuple(ds.get("translation", (0.0,) * len(centers[0]))))
        target = apply_shift(gaussian_blobs(centers, std, n, ds.get("target_seed", 4321)), shift)
    else:
        source = load_idx(ds["source_images"], ds["source_labels"])
        target = load_idx(ds["target_images"], ds["target_labels"])
        if source.dim != target.dim:
            raise ValueError(f"source images have {source.dim} pixels, target {target.dim}; resize first")
        k = max(source.class_count, target.class_count)
        cap = ds.get("max_samples")
        source, target = (_subsample(d, cap, k, s) for d, s in
                          ((source, ds.get("source_seed", 1234)), (target, ds.get("target_seed", 4321))))
    return source, target


def _subsample(ds, cap, k, seed):
    idx = np.arange(len(ds))
    if cap and cap < len(ds):
        idx = np.sort(np.random.default_rng(seed).choice(len(ds), cap, replace=False))
    return LabeledDataset(ds.points[idx], ds.labels[idx], k)


# ---------------------------------------------------------------------------
# rasters and CSV output
# ---------------------------------------------------------------------------

@dataclass
class BoundaryRaster:
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    resolution: int
    grid: np.ndarray  # resolution x resolution class indices, row 0 at y_max
    class_count: int


def raster_points(x_range, y_range, resolution):
    """Cell centres in row-major order starting from (x_min, y_max)."""
    (x0, x1), (y0, y1) = x_range, y_range
    dx, dy = (x1 - x0) / resolution, (y1 - y0) / resolution
    xs = x0 + (np.arange(resolution) + 0.5) * dx
    ys = y1 - (np.arange(resolution) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def rasterize_boundary(bundle, x_range, y_range, resolution, out_dir=None, stem="boundary"):
    if bundle.generator_spec.input_width != 2:
        raise ValueError("decision-boundary rasters need a 2-D input model")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    pts = raster_points(x_range, y_range, resolution)
    k = bundle.classifier_spec.output_width
    grid = predict(bundle, pts).reshape(resolution, resolution)
    raster = BoundaryRaster(tuple(x_range), tuple(y_range), resolution, grid, k)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_pgm(raster, out_dir / f"{stem}.pgm")
        with open(out_dir / f"{stem}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["row", "col", "x", "y", "class"])
            for i, (x, y) in enumerate(pts):
                w.writerow([i // resolution, i % resolution, _real(x), _real(y), int(grid.flat[i])])
    return raster


def write_pgm(raster, path):
    maxval = max(raster.class_count - 1, 1)
    lines = ["P2", f"{raster.resolution} {raster.resolution}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in raster.grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path):
    """Parse a plain (P2) PGM; returns (width, height, maxval, pixels)."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a P2 PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.array([int(t) for t in tokens[4:]])
    if pix.size != w * h or not 0 < maxval < 65536 or pix.min(initial=0) < 0 or pix.max(initial=0) > maxval:
        raise ValueError("malformed P2 payload")
    return w, h, maxval, pix.reshape(h, w)


def _real(v):
    return f"{float(v):.17g}"


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_real(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _conditions(cfg):
    conds = []
    if cfg.run_source_only:
        conds.append(("source_only", replace(cfg.train, mode="source_only")))
    if cfg.run_l1_mcd:
        conds.append(("l1", replace(cfg.train, discrepancy_kind="l1")))
    conds.append(("swd", replace(cfg.train, discrepancy_kind="swd")))
    return conds


def train_condition(cfg, tcfg, source, target, seed):
    tcfg = replace(tcfg, seed=seed)
    bundle = init_bundle(MlpSpec(cfg.generator_widths), MlpSpec(cfg.classifier_widths), seed)
    return train(tcfg, bundle, source, target)


def run_experiment(config_path, out_dir=None, seed=None):
    """Train every configured condition and write the artifact directory."""
    cfg = load_config(config_path, seed)
    out = Path(out_dir) if out_dir else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out / "config.cfg")
    source, target = build_datasets(cfg)
    if source.dim == 2:
        export_csv(source, out / "source.csv")
        export_csv(target, out / "target.csv")

    summary = []
    for name, tcfg in _conditions(cfg):
        log.info("training %s (seed %d, %d iterations)", name, cfg.seed, tcfg.outer_iterations)
        bundle, history = train_condition(cfg, tcfg, source, target, cfg.seed)
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        write_history_csv(history, cdir / "history.csv")
        save_bundle(bundle, cdir / "model.bin")
        if source.dim == 2:
            rasterize_boundary(bundle, cfg.x_range, cfg.y_range, cfg.raster_resolution, cdir)
        summary.append((name, cfg.seed, evaluate(bundle, source), evaluate(bundle, target)))
    _write_rows(out / "summary.csv", ["condition", "seed", "source_accuracy", "target_accuracy"], summary)
    return out


def _echo_config(cfg, path):
    if cfg.source_path is not None:
        text = cfg.source_path.read_text()
        path.write_text(text if text.endswith("\n") else text + "\n")
        with open(path, "a") as f:
            f.write(f"; resolved seed = {cfg.seed}\n")


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def sweep_projections(config_path, m_list, out_dir=None, seeds=5):
    """Final swd target accuracy for each projection count and seed."""
    if not m_list:
        raise ValueError("need at least one projection count")
    cfg = load_config(config_path)
    out = Path(out_dir) if out_dir else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_datasets(cfg)
    results = {}
    for m in sorted(m_list):
        tcfg = replace(cfg.train, discrepancy_kind="swd", num_projections=int(m))
        for s in range(seeds):
            bundle, _ = train_condition(cfg, tcfg, source, target, cfg.seed + s)
            results[(m, cfg.seed + s)] = evaluate(bundle, target)
    rows = [("run", m, s, acc, "", "") for (m, s), acc in sorted(results.items())]
    for m in sorted(m_list):
        mu, sd = _mean_std([acc for (mm, _), acc in results.items() if mm == m])
        rows.append(("aggregate", m, "", "", mu, sd))
    _write_rows(out / "sweep.csv", ["row_type", "M", "seed", "target_accuracy", "mean", "std"], rows)
    return out / "sweep.csv"


def compare_discrepancies(config_path, out_dir=None, seeds=5):
    """source_only vs l1 (MCD) vs swd on identical seeds and batches."""
    cfg = load_config(config_path)
    cfg.run_source_only = cfg.run_l1_mcd = True
    out = Path(out_dir) if out_dir else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    source, target = build_datasets(cfg)
    rows, per_cond = [], {}
    for name, tcfg in _conditions(cfg):
        for s in range(seeds):
            bundle, _ = train_condition(cfg, tcfg, source, target, cfg.seed + s)
            acc = evaluate(bundle, target)
            per_cond.setdefault(name, []).append(acc)
            rows.append(("run", name, cfg.seed + s, acc, "", ""))
    for name, accs in per_cond.items():
        mu, sd = _mean_std(accs)
        rows.append(("aggregate", name, "", "", mu, sd))
    _write_rows(out / "ablation.csv", ["row_type", "condition", "seed", "target_accuracy", "mean", "std"], rows)
    return out / "ablation.csv"


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="swdda", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=str(DEFAULT_CONFIG), help="INI experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")

    p = sub.add_parser("run", help="train all conditions and write summary.csv")
    common(p)
    p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("sweep", help="projection-count sensitivity sweep")
    common(p)
    p.add_argument("--projections", default="1,8,32,128")
    p.add_argument("--seeds", type=int, default=5)
    p = sub.add_parser("ablate", help="source_only vs l1 vs swd")
    common(p)
    p.add_argument("--seeds", type=int, default=5)
    p = sub.add_parser("raster", help="decision-boundary raster of a saved model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--resolution", type=int, default=None)
    return parser.parse_args(argv)


def main(argv=None):
    args = _parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            out = run_experiment(args.config, args.out, args.seed)
            print(out / "summary.csv")
        elif args.command == "sweep":
            try:
                m_list = [int(v) for v in args.projections.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"--projections: expected comma-separated integers, got {args.projections!r}")
            print(sweep_projections(args.config, m_list, args.out, args.seeds))
        elif args.command == "ablate":
            print(compare_discrepancies(args.config, args.out, args.seeds))
        else:
            cfg = load_config(args.config)
            out = Path(args.out) if args.out else Path(args.model).parent
            out.mkdir(parents=True, exist_ok=True)
            res = args.resolution or cfg.raster_resolution
            rasterize_boundary(load_bundle(args.model), cfg.x_range, cfg.y_range, res, out)
            print(out / "boundary.pgm")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
