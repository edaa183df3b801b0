"""Command-line entry point: ``gmfreg {gen,train,eval,bench,gradcheck}``.

Settings resolve as flags > ``--config`` JSON file > built-in defaults, and
every run writes the resolved settings to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import checks
from .diffcore import ContractError, ShapeError
from .gmf import CheckpointError, GmfConfig, init_params, load_checkpoint, save_checkpoint
from .pipeline import (
    PROB_CUTOFF,
    RE_THRESHOLD_DEG,
    TE_THRESHOLD_CM,
    MetricsReport,
    TrainConfig,
    evaluate,
    model_predictor,
    oracle_predictor,
    ransac_predictor,
    train,
)
from .synthdata import FormatError, SceneConfig, generate_dataset, perturb_lighting, perturb_noise, read_dataset, write_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_CHECK = 5


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


# flag dest -> (config section, field name)
_SCENE_FLAGS = {
    "primitives": "n_primitives",
    "correspondences": "n_correspondences",
    "inlier_ratio": "inlier_ratio",
    "ambiguous": "ambiguous_fraction",
    "height": "height",
    "width": "width",
    "noise": "noise_sigma_3d",
    "points": "n_points",
    "calib_offset": "calib_offset_px",
}
_MODEL_FLAGS = {"ci": "c_i", "cp": "c_p", "k": "k", "head_hidden": "head_hidden", "mode": "mode"}
_TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "structure_only": "structure_only",
    "no_fusion1": "no_fusion1",
    "no_fusion2": "no_fusion2",
    "no_lcpe": "no_lcpe",
}


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge flag values over the config file; unset flags are ``None``."""
    file_cfg = {}
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {a.dest for a in parser._actions}
        unknown = set(file_cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for k, v in vars(args).items():
        out[k] = v if v is not None else file_cfg.get(k)
    return out


def _pick(resolved: dict, mapping: dict) -> dict:
    return {field: resolved[flag] for flag, field in mapping.items() if resolved.get(flag) is not None}


def _out_dir(resolved: dict) -> Path:
    out = Path(resolved.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(out: Path, command: str, settings: dict) -> None:
    (out / "config.json").write_text(json.dumps({"command": command, **settings}, indent=2, sort_keys=True, default=str))


def _require_file(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# --- commands ---------------------------------------------------------------------


def cmd_gen(r: dict) -> int:
    seed = int(r["seed"] or 0)
    try:
        cfg = SceneConfig(**_pick(r, _SCENE_FLAGS), seed=seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n = int(r["scenes"] if r["scenes"] is not None else 10)
    if n < 0:
        raise UsageError("--scenes must be >= 0")
    out = _out_dir(r)
    scenes = generate_dataset(cfg, n, seed)
    path = out / (r["name"] or "dataset.gmfd")
    write_dataset(scenes, path)
    _echo(out, "gen", {"scene_config": asdict(cfg), "scenes": n, "first_seed": seed, "dataset": str(path)})
    print(f"wrote {n} scenes to {path}")
    return EXIT_OK


def _load_dataset(path) -> list:
    p = _require_file(path, "data")
    try:
        return read_dataset(p)
    except FormatError as exc:
        raise OSError(str(exc)) from exc


def cmd_train(r: dict) -> int:
    data = _load_dataset(r["data"])
    try:
        model_cfg = GmfConfig(**_pick(r, _MODEL_FLAGS), seed=int(r["seed"] or 0))
        train_cfg = TrainConfig(**_pick(r, _TRAIN_FLAGS), seed=int(r["seed"] or 0))
    except (ContractError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(r)
    trace = out / "loss_trace.csv"
    trace.write_text("epoch,loss\n")

    def log(epoch, loss):
        with trace.open("a") as fh:
            fh.write(f"{epoch},{_fmt(loss)}\n")
        print(f"epoch {epoch:4d}  loss {_fmt(loss)}", flush=True)

    t0 = time.perf_counter()
    try:
        result = train(data, model_cfg, train_cfg, log=log)
    except ShapeError as exc:
        raise ConfigError(f"dataset does not fit the model: {exc}") from exc
    ckpt = out / "checkpoint.gmf1"
    save_checkpoint(result.params, ckpt)
    _echo(
        out,
        "train",
        {"model_config": result.params.config.to_json(), "train_config": asdict(train_cfg), "data": str(r["data"]), "checkpoint": str(ckpt)},
    )
    print(f"wrote {ckpt} ({_fmt(time.perf_counter() - t0)} s)")
    return EXIT_OK


def _perturbed(scenes: list, recipe: str | None, seed: int) -> list:
    """``lighting:<even|uneven>:<lo>:<hi>`` or ``noise:<random|salt|gaussian>:<amount>``."""
    if not recipe:
        return scenes
    parts = recipe.split(":")
    try:
        if parts[0] == "lighting" and len(parts) == 4:
            mode, lo, hi = parts[1], float(parts[2]), float(parts[3])
            fn = lambda img, s: perturb_lighting(img, mode, (lo, hi), s)
        elif parts[0] == "noise" and len(parts) == 3:
            kind, amount = parts[1], float(parts[2])
            fn = lambda img, s: perturb_noise(img, kind, amount, s)
        else:
            raise ValueError
        out = []
        for i, sc in enumerate(scenes):
            sc = copy.copy(sc)
            sc.src_image = fn(sc.src_image, seed + 2 * i)
            sc.tgt_image = fn(sc.tgt_image, seed + 2 * i + 1)
            out.append(sc)
        return out
    except ValueError as exc:
        raise UsageError(f"bad --perturb value {recipe!r}: {exc}") from exc


def _load_model(path, r: dict):
    p = _require_file(path, "checkpoint")
    try:
        params = load_checkpoint(p)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    want = _pick(r, _MODEL_FLAGS)
    have = params.config.to_json()
    clash = {k: (v, have[k]) for k, v in want.items() if have.get(k) != v}
    if clash:
        raise ConfigError(f"checkpoint config disagrees with flags: {clash}")
    return params


def _thresholds(r: dict) -> dict:
    return {
        "re_deg": float(r["re_deg"] if r["re_deg"] is not None else RE_THRESHOLD_DEG),
        "te_cm": float(r["te_cm"] if r["te_cm"] is not None else TE_THRESHOLD_CM),
        "prob_cutoff": float(r["cutoff"] if r["cutoff"] is not None else PROB_CUTOFF),
    }


def _run_eval(method: str, r: dict, data: list, checkpoint=None) -> MetricsReport:
    seed = int(r["seed"] or 0)
    th = _thresholds(r)
    if method == "oracle":
        pred = oracle_predictor
    elif method == "ransac":
        pred = ransac_predictor(int(r["ransac_iters"] or 1000), float(r["ransac_tol"] or 0.05), seed)
    elif method == "model":
        params = _load_model(checkpoint, r)
        pred = model_predictor(params)
        method = params.config.mode
    else:
        raise UsageError(f"unknown method {method!r}")
    try:
        return evaluate(pred, data, method=method, **th)
    except ShapeError as exc:
        raise ConfigError(f"checkpoint does not fit the dataset: {exc}") from exc


def _print_report(rep: MetricsReport) -> None:
    print(
        f"{rep.method}: RR={_fmt(rep.RR)} RE={_fmt(rep.RE)} TE={_fmt(rep.TE)} "
        f"F1={_fmt(rep.F1)} IR={_fmt(rep.IR)} F1_ambiguous={_fmt(rep.F1_ambiguous)}"
    )


def cmd_eval(r: dict) -> int:
    data = _load_dataset(r["data"])
    method = r["method"] or "model"
    if method == "model" and r["checkpoint"] is None:
        raise UsageError("--checkpoint is required for --method model")
    data = _perturbed(data, r["perturb"], int(r["seed"] or 0))
    out = _out_dir(r)
    rep = _run_eval(method, r, data, r["checkpoint"])
    (out / "metrics.json").write_text(rep.to_json())
    (out / "metrics.csv").write_text(rep.to_csv())
    _echo(out, "eval", {"method": method, "data": str(r["data"]), "checkpoint": r["checkpoint"], "perturb": r["perturb"], **_thresholds(r)})
    _print_report(rep)
    return EXIT_OK


BENCH_COLUMNS = ("method", "RR", "RE", "TE", "F1", "IR", "F1_ambiguous")


def bench_table(reports: list[MetricsReport]) -> str:
    rows = sorted(reports, key=lambda rep: -rep.RR)
    lines = [",".join(BENCH_COLUMNS)]
    for rep in rows:
        s = rep.summary()
        lines.append(",".join([s["method"]] + [_fmt(s[c]) for c in BENCH_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def cmd_bench(r: dict) -> int:
    data = _load_dataset(r["data"])
    data = _perturbed(data, r["perturb"], int(r["seed"] or 0))
    entries = list(r["checkpoint"] or [])
    methods = list(r["method"] or [])
    if not entries and not methods:
        raise UsageError("give at least one --checkpoint or --method")
    reports = []
    for entry in entries:
        reports.append(_run_eval("model", r, data, entry))
    for m in methods:
        reports.append(_run_eval(m, r, data))
    out = _out_dir(r)
    table = bench_table(reports)
    (out / "bench.csv").write_text(table)
    _echo(out, "bench", {"data": str(r["data"]), "checkpoints": entries, "methods": methods, "perturb": r["perturb"], **_thresholds(r)})
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(r: dict) -> int:
    layers = checks.LAYERS if r["layer"] in (None, "all") else (r["layer"],)
    corrupt = checks.corrupt_first_entry if r["corrupt"] else None
    points = int(r["points"] or 3)
    worst = 0.0
    out = _out_dir(r) if r.get("out") else None
    for layer in layers:
        err = checks.check_layer(layer, points=points, seed=int(r["seed"] or 0), corrupt=corrupt)
        worst = max(worst, err)
        status = "pass" if err < checks.TOLERANCE else "FAIL"
        print(f"{layer:14s} max_rel_err={err:.4e} {status}")
    if out is not None:
        _echo(out, "gradcheck", {"layers": list(layers), "points": points, "corrupt": bool(r["corrupt"]), "max_rel_err": worst})
    ok = worst < checks.TOLERANCE
    print(f"overall max_rel_err={worst:.4e} {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


# --- parser -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file with flag defaults")
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="gmfreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int)
    g.add_argument("--name", help="dataset file name inside --out")
    g.add_argument("--primitives", type=int)
    g.add_argument("--correspondences", type=int)
    g.add_argument("--inlier-ratio", type=float)
    g.add_argument("--ambiguous", type=float, help="share of outliers that are texture-ambiguous")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--noise", type=float, help="inlier noise radius in metres")
    g.add_argument("--points", type=int)
    g.add_argument("--calib-offset", type=float, help="principal-point error of the recorded cameras, px")

    t = sub.add_parser("train", parents=[common], help="train a classifier")
    t.add_argument("--data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--ci", type=int)
    t.add_argument("--cp", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--head-hidden", type=int)
    t.add_argument("--mode", choices=("gmf", "structure", "concat"))
    t.add_argument("--structure-only", action="store_true", default=None)
    t.add_argument("--no-fusion1", action="store_true", default=None)
    t.add_argument("--no-fusion2", action="store_true", default=None)
    t.add_argument("--no-lcpe", action="store_true", default=None)

    def eval_flags(p, multi: bool):
        p.add_argument("--data")
        if multi:
            p.add_argument("--checkpoint", action="append")
            p.add_argument("--method", action="append", choices=("oracle", "ransac"))
        else:
            p.add_argument("--checkpoint")
            p.add_argument("--method", choices=("model", "oracle", "ransac"))
        p.add_argument("--perturb", help="lighting:even|uneven:LO:HI or noise:random|salt|gaussian:AMOUNT")
        p.add_argument("--re-deg", type=float)
        p.add_argument("--te-cm", type=float)
        p.add_argument("--cutoff", type=float)
        p.add_argument("--ransac-iters", type=int)
        p.add_argument("--ransac-tol", type=float)
        for flag in ("--ci", "--cp", "--k", "--head-hidden"):
            p.add_argument(flag, type=int)
        p.add_argument("--mode", choices=("gmf", "structure", "concat"))

    eval_flags(sub.add_parser("eval", parents=[common], help="evaluate one method"), multi=False)
    eval_flags(sub.add_parser("bench", parents=[common], help="compare methods"), multi=True)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--layer", choices=("all",) + checks.LAYERS)
    c.add_argument("--points", type=int)
    c.add_argument("--corrupt", action="store_true", default=None, help="test hook: break one analytic gradient")
    return parser


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        resolved = _resolve(args, sub)
        return _COMMANDS[args.command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
