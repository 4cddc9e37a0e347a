"""``pcdnf`` command line: gen-data, train, denoise, eval, errormap.

Every command resolves its full configuration (flags over config file over
defaults), echoes it into its outputs and is byte-reproducible for a fixed
seed and worker count.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional

import torch

from . import dataset as ds
from .dataset import NoisySample, XYZParseError
from .inference import denoise_cloud
from .losses import LossConfig
from .metrics import (DEFAULT_ERROR_CAP, angular_errors, chamfer_distance, corresponding_normals,
                      export_error_map, normal_rmse, point_to_surface, write_report)
from .network import NetConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingError, train

logger = logging.getLogger("pcdnf")

SEED_ENV = "PCDNF_SEED"
MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ("name", "shape", "noise_level", "n_points", "clean_seed", "noise_seed",
                    "clean_file", "noisy_file")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------- config


_CONFIG_CLASSES = (TrainConfig, NetConfig, LossConfig)


def _config_types() -> Dict[str, type]:
    types = {}
    for cls in _CONFIG_CLASSES:
        for f in fields(cls):
            default = getattr(cls(), f.name)
            types[f.name] = type(default)
    return types


def _convert(key: str, text: str, kind: type, where: str):
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: {key}={text!r} is not a valid {kind.__name__}") from None


def read_config(path) -> Dict[str, object]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    types = _config_types()
    values: Dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        values[key] = _convert(key, value, types[key], f"{path}:{no}")
    return values


def resolve_seed(flag: Optional[int], config: Optional[dict] = None) -> int:
    """--seed flag, then config file, then $PCDNF_SEED, then 0."""
    if flag is not None:
        return flag
    if config and "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return 0


def config_lines(values: Dict[str, object]) -> List[str]:
    return [f"{k}={values[k]!r}" if isinstance(values[k], float) else f"{k}={values[k]}"
            for k in sorted(values)]


def _write_echo(path: Path, values: Dict[str, object]) -> None:
    path.write_text("".join(f"{line}\n" for line in config_lines(values)))


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# -------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    seed = resolve_seed(args.seed)
    out = Path(args.out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "noisy").mkdir(parents=True, exist_ok=True)
    rows = []
    for s, kind in enumerate(args.shapes):
        clean_seed = ds.corpus_seeds(seed, s, 0)[0]
        clean = ds.generate_shape(ds.ShapeSpec(kind, args.n_points, seed=clean_seed))
        clean_file = f"clean/{kind}.xyz"
        ds.write_xyz(out / clean_file, clean)
        for li, level in enumerate(args.noise_levels):
            noise_seed = ds.corpus_seeds(seed, s, li)[1]
            name = ds.sample_name(kind, level)
            sample = ds.add_gaussian_noise(clean, level, noise_seed, name=name)
            noisy_file = f"noisy/{name}.xyz"
            ds.write_xyz(out / noisy_file, sample.noisy)
            rows.append((name, kind, repr(float(level)), args.n_points, clean_seed, noise_seed,
                         clean_file, noisy_file))
    echo = {"command": "gen-data", "shapes": ",".join(args.shapes), "n_points": args.n_points,
            "noise_levels": ",".join(repr(float(x)) for x in args.noise_levels), "seed": seed}
    with open(out / MANIFEST, "w", newline="") as fh:
        for line in config_lines(echo):
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    logger.info("wrote %d noisy and %d clean clouds to %s", len(rows), len(args.shapes), out)


def load_manifest(data_dir) -> List[NoisySample]:
    data_dir = Path(data_dir)
    path = data_dir / MANIFEST
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    body = [line for line in text.splitlines() if line and not line.startswith("#")]
    samples, clean_cache = [], {}
    for row in csv.DictReader(body):
        try:
            clean_file, noisy_file = row["clean_file"], row["noisy_file"]
            level = float(row["noise_level"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"{path}: malformed manifest row {row}") from None
        if clean_file not in clean_cache:
            clean_cache[clean_file] = ds.load_cloud(data_dir / clean_file)
        samples.append(NoisySample(ds.load_cloud(data_dir / noisy_file), clean_cache[clean_file], level,
                                   row.get("name", noisy_file)))
    if not samples:
        raise ConfigError(f"{path}: manifest lists no samples")
    return samples


_TRAIN_FLAGS = ("epochs", "lr_start", "lr_end", "batch_size", "centers_per_cloud", "dtype")


def cmd_train(args) -> None:
    file_values = read_config(args.config) if args.config else {}
    values = dict(file_values)
    for key in _TRAIN_FLAGS:
        flag = getattr(args, key)
        if flag is not None:
            values[key] = flag
    values["seed"] = resolve_seed(args.seed, file_values)

    def pick(cls):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    try:
        tcfg, ncfg, lcfg = pick(TrainConfig), pick(NetConfig), pick(LossConfig)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    resolved = {**asdict(lcfg), **asdict(ncfg), **asdict(tcfg), "command": "train",
                "data": str(args.data), "workers": args.workers}
    samples = load_manifest(args.data)
    model, history = train(samples, tcfg, ncfg, lcfg)
    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, extra={"config": "\n".join(config_lines(resolved))})
    history.write_csv(out.with_name(out.name + ".history.csv"), config_lines(resolved))
    logger.info("saved %s", out)


def cmd_denoise(args) -> None:
    seed = resolve_seed(args.seed)
    cloud = ds.load_cloud(args.input)
    model = load_checkpoint(args.checkpoint, dtype=torch.float64 if args.float64 else torch.float32)
    outs = denoise_cloud(cloud, model, iterations=args.iterations, seed=seed, batch_size=args.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(outs, start=1):
        ds.write_xyz(out / f"iter{i}.xyz", c)
    _write_echo(out / "config.txt", {"command": "denoise", "input": str(args.input),
                                      "checkpoint": str(args.checkpoint), "iterations": args.iterations,
                                      "seed": seed, "batch_size": args.batch_size,
                                      "float64": args.float64, "workers": args.workers})


def cmd_eval(args) -> None:
    clean = ds.load_cloud(args.clean)
    shape = args.shape or Path(args.clean).stem
    rows = []
    for it, pred_path in enumerate(args.pred, start=1):
        pred = ds.load_cloud(pred_path)
        cd = chamfer_distance(pred, clean)
        p2s = point_to_surface(pred, args.shape if args.shape else clean)
        if pred.normals is not None and clean.normals is not None:
            rmse = normal_rmse(pred.normals, corresponding_normals(pred, clean))
        else:
            rmse = float("nan")
        rows.append((shape, "" if args.noise_level is None else args.noise_level, it, cd, p2s, rmse))
    echo = {"command": "eval", "pred": ",".join(map(str, args.pred)), "clean": str(args.clean),
            "shape": args.shape or "", "noise_level": "" if args.noise_level is None else args.noise_level,
            "p2s_reference": f"analytic:{args.shape}" if args.shape else "clean cloud"}
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_report(args.report, rows, config_lines(echo))


def cmd_errormap(args) -> None:
    pred, clean = ds.load_cloud(args.pred), ds.load_cloud(args.clean)
    if pred.normals is None or clean.normals is None:
        raise ValueError("error map needs normals in both --pred and --clean")
    errors = angular_errors(pred.normals, corresponding_normals(pred, clean))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_error_map(pred, errors, args.out, cap=args.cap)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"global seed (fallback ${SEED_ENV}, then 0)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="threads for patch evaluation (default: core count)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pcdnf", description="Joint point cloud denoising and normal filtering.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="synthesize clean/noisy training clouds")
    p.add_argument("--shapes", type=_str_list, default=list(ds.SHAPE_KINDS))
    p.add_argument("--n-points", type=int, default=2000)
    p.add_argument("--noise-levels", type=_float_list, default=list(ds.NOISE_LEVELS))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a network on a gen-data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="flat key=value file")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--centers-per-cloud", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", parents=[common], help="denoise a cloud and filter its normals")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory (iterN.xyz)")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--float64", action="store_true", help="evaluate in double precision")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", parents=[common], help="CD / P2S / normal RMSE report")
    p.add_argument("--pred", required=True, nargs="+", help="one file per iteration")
    p.add_argument("--clean", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--shape", choices=ds.SHAPE_KINDS, default=None, help="analytic surface for P2S")
    p.add_argument("--noise-level", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("errormap", parents=[common], help="per-point normal error as colored .xyz")
    p.add_argument("--pred", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=float, default=DEFAULT_ERROR_CAP, help="degrees mapped to full red")
    p.set_defaults(func=cmd_errormap)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("pcdnf: error: --workers must be >= 1", file=sys.stderr)
        return 2
    torch.set_num_threads(args.workers)
    try:
        args.func(args)
    except (OSError, ValueError, XYZParseError, TrainingError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pcdnf: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
