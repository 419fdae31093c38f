"""Command line entry point: ``acrl run|validate|certify|report``.

Artifacts go under ``$ACRL_OUTPUT_ROOT/<output_dir>`` (default root ``runs``).
Every run writes CSV tables, SVG heatmaps, ``summary.txt`` with one
PASS/FAIL/WARN line per check, and ``manifest.json``.  The exit status is 1
when any check fails and 2 on configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, load_config, parse_config
from .experiments import FAIL, ExperimentResult, Heatmap, run_experiment, run_oracle_certify

OUTPUT_ROOT_ENV = "ACRL_OUTPUT_ROOT"

# linear colour scale: mass 0 -> white, the largest cell -> dark blue
LOW_RGB = np.array([255.0, 255.0, 255.0])
HIGH_RGB = np.array([8.0, 48.0, 107.0])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def colour(value: float, vmax: float) -> str:
    t = 0.0 if vmax <= 0 else min(max(value / vmax, 0.0), 1.0)
    r, g, b = np.rint(LOW_RGB + t * (HIGH_RGB - LOW_RGB)).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def emit_heatmap(grid, path, *, extent=None, regions=None, title: str = "", cell: int = 24) -> Path:
    """Write an occupancy grid as SVG.

    ``grid[iy, ix]`` is the mass of cell ``(ix, iy)`` with ``iy = 0`` at the
    bottom.  Colours interpolate linearly from white (zero) to dark blue (the
    largest cell).  ``regions`` rows ``[x0, y0, x1, y1]`` in the coordinates
    of ``extent`` are drawn as red outlines.
    """
    g = np.atleast_2d(np.asarray(grid, dtype=float))
    if g.size == 0 or not np.all(np.isfinite(g)) or np.any(g < 0):
        raise ValueError("heatmap grid must be a nonempty array of nonnegative finite values")
    if abs(g.sum() - 1.0) > 1e-9:
        raise ValueError(f"heatmap grid must be normalised (sums to {g.sum():.6g})")
    ny, nx = g.shape
    x0, y0, x1, y1 = extent if extent is not None else (0.0, 0.0, float(nx), float(ny))
    W, H = nx * cell, ny * cell
    vmax = float(g.max())
    sx, sy = W / (x1 - x0), H / (y1 - y0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H + 20}" viewBox="0 -20 {W} {H + 20}">',
        f"<desc>linear scale: 0 = #ffffff, {vmax:.6g} = {colour(vmax, vmax)}</desc>",
        f'<text x="2" y="-6" font-size="12" font-family="sans-serif">{title}</text>',
    ]
    for iy in range(ny):
        for ix in range(nx):
            y = (ny - 1 - iy) * cell
            out.append(
                f'<rect x="{ix * cell}" y="{y}" width="{cell}" height="{cell}" fill="{colour(g[iy, ix], vmax)}"/>'
            )
    if regions is not None:
        for k, (rx0, ry0, rx1, ry1) in enumerate(np.asarray(regions, dtype=float), start=1):
            px, py = (rx0 - x0) * sx, H - (ry1 - y0) * sy
            out.append(
                f'<rect x="{px:.2f}" y="{py:.2f}" width="{(rx1 - rx0) * sx:.2f}" height="{(ry1 - ry0) * sy:.2f}" '
                f'fill="none" stroke="#d62728" stroke-width="2"><title>region {k}</title></rect>'
            )
    out.append("</svg>")
    path = Path(path)
    try:
        path.write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc.strerror}") from None
    return path


def output_root(override: str | None = None) -> Path:
    return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def manifest(cfg: ExperimentConfig) -> dict:
    return {
        "config_sha256": cfg.config_hash,
        "kind": cfg.kind,
        "seeds": cfg.seeds,
        "version": __version__,
        "config_text": cfg.source_text,
    }


def load_manifest(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: unreadable manifest ({exc})") from None
    for key in ("config_sha256", "config_text", "version"):
        if key not in data:
            raise ConfigError(f"{path}: manifest missing {key!r}")
    if config_hash(data["config_text"]) != data["config_sha256"]:
        raise ConfigError(f"{path}: config text does not match its recorded hash")
    if data["version"] != __version__:
        print(f"warning: manifest written by version {data['version']}, running {__version__}", file=sys.stderr)
    return parse_config(data["config_text"], str(path))


def write_result(cfg: ExperimentConfig, result: ExperimentResult, out: Path) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in result.tables.items():
        write_csv(rows, out / f"{name}.csv")
    for name, hm in result.heatmaps.items():
        emit_heatmap(hm.grid, out / f"{name}.svg", extent=hm.extent, regions=hm.regions, title=hm.title)
    lines = [f"kind: {cfg.kind}", f"config_sha256: {cfg.config_hash}", f"seeds: {cfg.seeds}"]
    lines += [f"{k}: {_fmt(v)}" for k, v in result.values.items()]
    lines += [c.line for c in result.checks]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(json.dumps(manifest(cfg), indent=2, sort_keys=True) + "\n")
    return lines


def _load(path: str) -> ExperimentConfig:
    return load_manifest(path) if path.endswith(".json") else load_config(path)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    out = output_root(args.output_root) / cfg.output_dir
    result = run_experiment(cfg)
    for line in write_result(cfg, result, out):
        if line.startswith(("PASS", "FAIL", "WARN")):
            print(line)
    print(f"artifacts in {out}")
    return 1 if result.failed else 0


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    print(f"ok: {cfg.kind} with seeds {cfg.seeds} (sha256 {cfg.config_hash[:12]})")
    return 0


def cmd_certify(args) -> int:
    cfg = _load(args.config)
    if cfg.environment["name"] != "monitoring3":
        raise ConfigError("environment.name: certificates need a tabular environment")
    result = run_oracle_certify(cfg)
    print(f"P* = {result.values['P_star']:.17g}")
    print(f"min d(lambda) = {result.values['D_star']:.17g}")
    for row in result.tables["certificate"][1:]:
        print(row[0])
    for c in result.checks:
        print(c.line)
    return 1 if result.failed else 0


def cmd_report(args) -> int:
    path = Path(args.path)
    summary = path / "summary.txt" if path.is_dir() else path
    try:
        lines = summary.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{summary}: cannot read summary ({exc.strerror})") from None
    print("\n".join(lines))
    return 1 if any(ln.startswith(FAIL) for ln in lines) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acrl", description="State-augmented constrained RL experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run an experiment from a config (.toml) or a manifest (.json)")
    r.add_argument("config")
    r.add_argument("--output-root", default=None, help=f"overrides ${OUTPUT_ROOT_ENV}")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="parse and check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    c = sub.add_parser("certify", help="print the LP optimum and duality certificates for a tabular config")
    c.add_argument("config")
    c.set_defaults(func=cmd_certify)
    s = sub.add_parser("report", help="print a run's summary; nonzero exit if any check failed")
    s.add_argument("path")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
