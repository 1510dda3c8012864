"""Command line entry point: ``regimix synth|features|unmix|eval``.

Every subcommand takes an optional ``--config`` file of ``key = value`` lines
(``#`` starts a comment) and per-key flags; precedence is
defaults < file < flags. Each run writes a manifest that is itself a valid
config file for the same subcommand.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
import typing
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import features as feat
from .cube_io import (
    FormatError, ensure_dir, read_endmembers_csv, read_envi_cube, write_endmembers_csv,
    write_envi_cube, write_map,
)
from .metrics import RRMSE_DEFINITION, coherence_rho, rmse, rrmse, sad
from .models import MODEL_NAMES
from .regime import NumericalError, TrainConfig, fit_uniform_baseline, prepare_scene, train, reconstruct
from .synth import RNG_NAME, SynthSpec, generate_scene

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

METRICS_HEADER = ("method", "sad", "rmse", "rrmse", "rho")
METHODS = ("lmm", "gbm", "ppnm", "hapke", "pgru")
CUBE_NAME = "cube.hdr"
ENDMEMBERS_NAME = "endmembers.csv"


class ConfigError(ValueError):
    """Bad config key or value."""


# ---------------------------------------------------------------------------
# config parsing

def _field_kinds(schema):
    hints = typing.get_type_hints(schema)
    kinds = {}
    for f in dataclasses.fields(schema):
        hint = hints[f.name]
        if hint is tuple or typing.get_origin(hint) is tuple:
            kinds[f.name] = "tuple"
        elif typing.get_origin(hint) is typing.Union:
            kinds[f.name] = "optional_int"
        elif hint in (int, float, str):
            kinds[f.name] = hint.__name__
        else:
            raise TypeError(f"unsupported config field type {hint!r} for {f.name}")
    return kinds


def _parse_value(kind, key, text):
    text = str(text).strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "optional_int":
            return None if text.lower() in ("", "none") else int(text)
        if kind == "tuple":
            return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {text!r} as {kind}") from None
    raise ConfigError(f"unknown kind {kind}")


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def parse_config(path=None, overrides=None, schema=TrainConfig):
    """Resolve a config: dataclass defaults, then the file at ``path``, then ``overrides``.

    ``overrides`` maps field names to already-typed values or strings; None
    values are ignored. Unknown keys and out-of-range values raise
    :class:`ConfigError`.
    """
    kinds = _field_kinds(schema)
    values = {}
    if path is not None:
        try:
            entries = read_config_file(path)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        for key, text in entries.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(kinds[key], key, text)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(kinds[key], key, value) if isinstance(value, str) else value
    try:
        return schema(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_lines(config) -> list:
    return [f"{k} = {_format_value(v)}" for k, v in dataclasses.asdict(config).items()]


# ---------------------------------------------------------------------------
# manifests

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins the stamp for reproducible manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(path, command, config, inputs=()) -> None:
    lines = [
        f"# regimix {__version__}",
        f"# command = {command}",
        f"# timestamp = {_timestamp()}",
        f"# rng = {RNG_NAME}",
        f"# {RRMSE_DEFINITION}",
    ]
    for p in inputs:
        lines.append(f"# sha256 {Path(p).name} = {file_digest(p)}")
    lines += config_lines(config)
    Path(path).write_text("\n".join(lines) + "\n")


def _cube_files(header_path):
    header_path = Path(header_path)
    raw = header_path.with_suffix(".img")
    return [header_path] + ([raw] if raw.exists() else [])


def _write_plane(values, out_dir, name, mask=None):
    write_map(values, out_dir / f"{name}.csv", "csv", mask=mask)
    write_map(values, out_dir / f"{name}.pgm", "pgm", mask=mask)


# ---------------------------------------------------------------------------
# subcommands as library functions

def run_synth(out_dir, spec: SynthSpec) -> Path:
    """Generate a scene and write cube, endmembers, labels, abundances and manifest."""
    out = ensure_dir(out_dir)
    scene = generate_scene(spec)
    write_envi_cube(scene.cube, out / CUBE_NAME)
    write_endmembers_csv(scene.endmembers, out / ENDMEMBERS_NAME)
    write_map(scene.labels, out / "labels.pgm", "pgm")
    write_map(scene.labels, out / "labels.csv", "csv")
    write_map(scene.mechanism, out / "mechanism.csv", "csv")
    with open(out / "abundances.csv", "w") as fh:
        fh.write(",".join(scene.endmembers.names) + "\n")
        for row in scene.abundances.reshape(spec.M, -1).T:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    write_manifest(out / "synth_manifest.txt", "synth", spec)
    return out


def run_features(cube_path, out_dir, config: TrainConfig) -> Path:
    """Write the six raw feature planes and the prior map."""
    out = ensure_dir(out_dir)
    cube = read_envi_cube(cube_path)
    raw = feat.compute_features(cube, config.red_band, config.nir_band, config.emp_scales)
    for name, plane in zip(feat.FEATURE_NAMES, raw.planes):
        _write_plane(plane, out, f"feature_{name}")
    _write_plane(feat.compute_prior(raw), out, "prior")
    write_manifest(out / "manifest.txt", "features", config, _cube_files(cube_path))
    return out


def run_unmix(cube_path, endmembers_path, out_dir, config: TrainConfig):
    """Train on one scene and write every map, the loss trace and the manifest."""
    out = ensure_dir(out_dir)
    cube = read_envi_cube(cube_path)
    em = read_endmembers_csv(endmembers_path)
    state = prepare_scene(cube, em, config)
    model = train(cube, em, config, state=state)
    res = reconstruct(state, model.params)
    _write_plane(res.xi, out, "xi")
    for k, name in enumerate(MODEL_NAMES):
        _write_plane(res.alpha[k], out, f"alpha_{name}")
    for m, name in enumerate(em.names):
        _write_plane(res.abundances[m], out, f"abundance_{name}")
    _write_plane(res.delta_res, out, "delta_res")
    _write_plane(res.prior, out, "prior")
    for k, name in enumerate(feat.FEATURE_NAMES):
        write_map(res.contributions[k], out / f"contribution_{name}.csv", "csv")
    write_map(res.dominant_feature, out / "dominant_feature.csv", "csv")
    write_map(res.dominant_feature, out / "dominant_feature.pgm", "pgm")
    with open(out / "loss_trace.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(model.loss_trace):
            fh.write(f"{e},{float(v)!r}\n")
    with open(out / "params.txt", "w") as fh:
        fh.write("w = " + ",".join(repr(float(v)) for v in model.regime.w) + "\n")
        fh.write(f"b = {model.regime.b!r}\n")
        for k, name in enumerate(MODEL_NAMES):
            fh.write(f"u_{name} = " + ",".join(repr(float(v)) for v in model.attention.u[k]) + "\n")
        fh.write("c = " + ",".join(repr(float(v)) for v in model.attention.c) + "\n")
        fh.write("gamma = " + ",".join(repr(float(v)) for v in model.gbm.gamma) + "\n")
    write_manifest(out / "manifest.txt", "unmix", config,
                   _cube_files(cube_path) + [Path(endmembers_path)])
    return model, res


def evaluate_methods(cube, em, config: TrainConfig, methods=METHODS, state=None):
    """Metrics for each method on one scene, as a list of dict rows in ``methods`` order."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s) {unknown}; choose from {METHODS}")
    state = prepare_scene(cube, em, config) if state is None else state
    rows = []
    for method in methods:
        rho = None
        if method == "pgru":
            model = train(cube, em, config, state=state)
            res = reconstruct(state, model.params)
            rho = coherence_rho(res.xi, res.delta_res)
        else:
            res = fit_uniform_baseline(state, method, config)
        y = np.clip(cube.data, 0.0, 1.0)
        rows.append({"method": method, "sad": sad(y, res.y_hat), "rmse": rmse(y, res.y_hat),
                     "rrmse": rrmse(y, res.y_hat), "rho": rho})
    return rows


def write_metrics_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for r in rows:
            cells = [r["method"]] + ["" if r[k] is None else repr(float(r[k])) for k in METRICS_HEADER[1:]]
            fh.write(",".join(cells) + "\n")


def run_eval(scene_dir, methods=METHODS, config: TrainConfig = None, out_path=None) -> Path:
    """Evaluate ``methods`` on ``scene_dir/cube.hdr`` + ``scene_dir/endmembers.csv``."""
    config = TrainConfig() if config is None else config
    scene_dir = Path(scene_dir)
    cube_path, em_path = scene_dir / CUBE_NAME, scene_dir / ENDMEMBERS_NAME
    for p in (cube_path, em_path):
        if not p.exists():
            raise FileNotFoundError(f"missing scene artifact {p}")
    cube = read_envi_cube(cube_path)
    em = read_endmembers_csv(em_path)
    rows = evaluate_methods(cube, em, config, methods)
    out_path = scene_dir / "metrics.csv" if out_path is None else Path(out_path)
    write_metrics_csv(rows, out_path)
    write_manifest(out_path.with_name(out_path.stem + "_manifest.txt"), "eval", config,
                   _cube_files(cube_path) + [em_path])
    return out_path


# ---------------------------------------------------------------------------
# argparse plumbing

def _add_schema_flags(parser, schema):
    for f in dataclasses.fields(schema):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, type=str,
                            metavar="VALUE", help=f"override '{f.name}' (default {_format_value(f.default)})")


def _overrides(args, schema):
    return {f.name: getattr(args, f.name) for f in dataclasses.fields(schema)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regimix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"regimix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with known regimes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config")
    _add_schema_flags(p, SynthSpec)

    p = sub.add_parser("features", help="export the six feature planes and the prior")
    p.add_argument("--cube", required=True, help="ENVI header path")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_schema_flags(p, TrainConfig)

    p = sub.add_parser("unmix", help="train the regime model and export maps")
    p.add_argument("--cube", required=True, help="ENVI header path")
    p.add_argument("--endmembers", required=True, help="endmember CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_schema_flags(p, TrainConfig)

    p = sub.add_parser("eval", help="reconstruction metrics per method")
    p.add_argument("--scene", required=True, help=f"directory with {CUBE_NAME} and {ENDMEMBERS_NAME}")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--out", default=None, help="metrics CSV path (default <scene>/metrics.csv)")
    p.add_argument("--config")
    _add_schema_flags(p, TrainConfig)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            spec = parse_config(args.config, _overrides(args, SynthSpec), SynthSpec)
            run_synth(args.out, spec)
        else:
            config = parse_config(args.config, _overrides(args, TrainConfig), TrainConfig)
            if args.command == "features":
                run_features(args.cube, args.out, config)
            elif args.command == "unmix":
                run_unmix(args.cube, args.endmembers, args.out, config)
            else:
                methods = [m.strip() for m in args.methods.split(",") if m.strip()]
                run_eval(args.scene, methods, config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
