"""Command-line pipeline: train-teacher, directions, score, prune, distill, eval, inspect."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import checkpoint, evalkit, latentdir, scorer, surgeon
from .distiller import (DistillConfig, distill_student, init_discriminator, load_discriminator,
                        save_discriminator, train_teacher)
from .jsonio import dumps_canonical
from .synthnet import GeneratorConfig, count_flops, count_params, init_generator

log = logging.getLogger("dcprune")

# flag -> config key
FLAG_KEYS = {
    "seed": "seed", "out": "out", "teacher": "teacher", "student": "student", "directions": "directions",
    "scores": "scores", "plan": "plan", "ratio": "p_r", "mode": "mode", "alpha": "alpha",
    "n_directions": "n_directions", "n_latents": "n_latents", "steps": "steps", "psi": "truncation_psi",
    "workers": "workers",
}

PIPELINE_DEFAULTS = {
    "seed": 0, "steps": 10000, "p_r": 0.7, "mode": surgeon.S_SIGMA, "workers": 1,
    "pca_samples": 10000, "n_components": 0, "n_eval": 1000, "disc_channels": [16, 32, 64],
    "out": None, "teacher": None, "student": None, "directions": None, "scores": None, "plan": None,
}


class PipelineError(Exception):
    pass


def _config_fields() -> dict:
    fields = dict(PIPELINE_DEFAULTS)
    for cls in (GeneratorConfig, scorer.ScoringConfig, DistillConfig):
        for f in dataclasses.fields(cls):
            fields.setdefault(f.name, getattr(cls(), f.name))
    return fields


def load_config_file(path) -> dict:
    try:
        import tomllib
    except ImportError:  # Python 3.10
        import tomli as tomllib

    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    flat = {}
    for k, v in raw.items():
        if isinstance(v, dict):
            flat.update(v)
        else:
            flat[k] = v
    unknown = sorted(set(flat) - set(_config_fields()))
    if unknown:
        raise PipelineError(f"{path}: unknown config keys {unknown}")
    return flat


def _coerce(key: str, text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise PipelineError(f"--{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (list, tuple)):
        return [int(t) for t in text.replace(",", " ").split()]
    return text


def _subset(cls, cfg: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items() if k in names})


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise PipelineError(f"missing required --{k.replace('_', '-')}")
        if k != "out" and not Path(cfg[k]).exists():
            raise PipelineError(f"--{k}: {cfg[k]} does not exist")


def _out_path(cfg: dict) -> Path:
    if cfg.get("out") is None:
        raise PipelineError("missing required --out")
    p = Path(cfg["out"])
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


# subcommands ----------------------------------------------------------------

def cmd_train_teacher(cfg: dict) -> int:
    out = _out_path(cfg)
    gcfg = _subset(GeneratorConfig, cfg)
    dcfg = _subset(DistillConfig, cfg)
    seed = int(cfg["seed"])
    gen = init_generator(gcfg, seed)
    disc = init_discriminator(gcfg.resolution, tuple(cfg["disc_channels"]), seed + 1)
    teacher = train_teacher(gen, disc, int(cfg["steps"]), dcfg, log_path=_sibling(out, ".log.jsonl"),
                            dump_path=_sibling(out, ".diverged"))
    checkpoint.save_checkpoint(teacher, out)
    save_discriminator(disc, _sibling(out, ".disc"))
    log.info("teacher written to %s", out)
    return 0


def cmd_directions(cfg: dict) -> int:
    _require(cfg, "teacher")
    out = _out_path(cfg)
    teacher = checkpoint.load_checkpoint(cfg["teacher"])
    w_mean, samples = latentdir.estimate_w_stats(teacher, int(cfg["pca_samples"]), int(cfg["seed"]))
    if cfg["mode"] == surgeon.RANDOM or cfg["direction_mode"] == latentdir.RANDOM:
        ds = latentdir.random_directions(teacher.config.w_dim, w_mean)
    else:
        V = int(cfg["n_components"]) or latentdir.default_n_components(teacher.config.w_dim)
        ds = latentdir.pca_directions(samples, V)
    ds.save(out)
    return 0


def cmd_score(cfg: dict) -> int:
    _require(cfg, "teacher", "directions")
    out = _out_path(cfg)
    teacher = checkpoint.load_checkpoint(cfg["teacher"])
    ds = latentdir.DirectionSet.load(cfg["directions"])
    scfg = dataclasses.replace(_subset(scorer.ScoringConfig, cfg), direction_mode=ds.mode)
    report = scorer.accumulate_scores(teacher, ds, scfg, workers=int(cfg["workers"]),
                                      extra_config={"teacher": str(cfg["teacher"]),
                                                    "directions": str(cfg["directions"])})
    out.write_text(report.to_json())
    return 0


def cmd_prune(cfg: dict) -> int:
    _require(cfg, "scores")
    out = _out_path(cfg)
    report = scorer.ScoreReport.from_json(Path(cfg["scores"]).read_text())
    teacher_path = cfg.get("teacher") or report.config.get("teacher")
    if teacher_path is None or not Path(teacher_path).exists():
        raise PipelineError("prune needs --teacher (or a score file recording an existing teacher path)")
    teacher = checkpoint.load_checkpoint(teacher_path)
    plan = surgeon.build_plan(report, float(cfg["p_r"]), cfg["mode"], int(cfg["seed"]))
    problems = surgeon.verify_plan(plan, teacher.config)
    if problems:
        raise PipelineError("invalid plan: " + "; ".join(problems))
    student = surgeon.apply_plan(teacher, plan)
    checkpoint.save_checkpoint(student, out)
    plan_path = Path(cfg["plan"]) if cfg.get("plan") else _sibling(out, ".plan.json")
    plan_path.write_text(plan.to_json())
    return 0


def cmd_distill(cfg: dict) -> int:
    _require(cfg, "teacher", "student", "directions")
    out = _out_path(cfg)
    teacher = checkpoint.load_checkpoint(cfg["teacher"])
    student = checkpoint.load_checkpoint(cfg["student"])
    ds = latentdir.DirectionSet.load(cfg["directions"])
    disc_path = _sibling(Path(cfg["teacher"]), ".disc")
    if disc_path.exists():
        disc = load_discriminator(disc_path)
    else:
        disc = init_discriminator(teacher.config.resolution, tuple(cfg["disc_channels"]), int(cfg["seed"]) + 1)
    dcfg = _subset(DistillConfig, cfg)
    trained = distill_student(teacher, student, disc, ds, dcfg, steps=int(cfg["steps"]),
                              log_path=_sibling(out, ".log.jsonl"), dump_path=_sibling(out, ".diverged"))
    checkpoint.save_checkpoint(trained, out)
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "teacher", "student")
    teacher = checkpoint.load_checkpoint(cfg["teacher"])
    student = checkpoint.load_checkpoint(cfg["student"])
    n, seed = int(cfg["n_eval"]), int(cfg["seed"])
    psi = float(cfg["truncation_psi"])
    w_mean = None
    if psi < 1.0:
        # both generators share the teacher's mapping network
        w_mean, _ = latentdir.estimate_w_stats(teacher, int(cfg["pca_samples"]), seed)
    div = evalkit.pairwise_diversity(student, n, seed, psi, w_mean)
    metrics = {
        "teacher_student_l1": evalkit.teacher_student_l1(teacher, student, n, seed, psi, w_mean),
        "min_nn_distance": div.min_nn_distance, "avg_distance": div.avg_distance, "n": n, "seed": seed,
        "psi": psi,
        "teacher_params": count_params(teacher.config), "student_params": count_params(student.config),
        "teacher_flops": count_flops(teacher.config), "student_flops": count_flops(student.config),
    }
    text = dumps_canonical(metrics)
    if cfg.get("out"):
        _out_path(cfg).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_inspect(cfg: dict) -> int:
    path = cfg.get("path")
    if path is None or not Path(path).exists():
        raise PipelineError(f"inspect: {path} does not exist")
    sys.stdout.write(dumps_canonical(checkpoint.read_header(path)))
    return 0


COMMANDS = {
    "train-teacher": (cmd_train_teacher, "train a teacher generator on the procedural blob dataset"),
    "directions": (cmd_directions, "extract PCA (or random-mode) latent directions from a teacher"),
    "score": (cmd_score, "compute per-channel S_mu / S_sigma importance scores"),
    "prune": (cmd_prune, "build a pruning plan from scores and slice the teacher into a student"),
    "distill": (cmd_distill, "distill a pruned student against its teacher"),
    "eval": (cmd_eval, "teacher-student L1, diversity and cost accounting as JSON"),
    "inspect": (cmd_inspect, "dump a checkpoint header"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--teacher")
        p.add_argument("--student")
        p.add_argument("--directions")
        p.add_argument("--scores")
        p.add_argument("--plan")
        p.add_argument("--ratio", type=float)
        p.add_argument("--mode", choices=surgeon.MODES)
        p.add_argument("--alpha", type=float)
        p.add_argument("--n-directions", type=int)
        p.add_argument("--n-latents", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--psi", type=float)
        p.add_argument("--workers", type=int)
        if name == "inspect":
            p.add_argument("path", help="checkpoint or direction file")
    return parser


def _parse_overrides(parser, extra: list[str], fields: dict) -> dict:
    """--some-key value pairs for any config key not covered by a named flag."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            parser.error(f"unrecognized argument: {tok}")
        key, eq, val = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in fields:
            parser.error(f"unrecognized argument: {tok}")
        if not eq:
            if i + 1 >= len(extra):
                parser.error(f"{tok} expects a value")
            val = extra[i + 1]
            i += 1
        out[key] = _coerce(key, val, fields[key])
        i += 1
    return out


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("DCP_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def dispatch(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    fields = _config_fields()
    try:
        cfg = dict(fields)
        if args.config:
            if not Path(args.config).exists():
                raise PipelineError(f"--config: {args.config} does not exist")
            cfg.update(load_config_file(args.config))
        cfg.update(_parse_overrides(parser, extra, fields))
        for flag, key in FLAG_KEYS.items():
            val = getattr(args, flag, None)
            if val is not None:
                cfg[key] = val
        if args.command == "inspect":
            cfg["path"] = args.path
        return COMMANDS[args.command][0](cfg)
    except (PipelineError, ValueError, checkpoint.CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
