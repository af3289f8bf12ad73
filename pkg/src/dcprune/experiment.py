"""Prune-and-distill comparison of selection modes on a blob-trained teacher."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import evalkit, latentdir, scorer, surgeon
from .checkpoint import load_checkpoint, save_checkpoint
from .distiller import (DistillConfig, distill_student, init_discriminator, load_discriminator,
                        save_discriminator, train_teacher)
from .synthnet import GeneratorConfig, init_generator

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    teacher_steps: int = 10000
    distill_steps: int = 5000
    p_r: float = 0.7
    modes: tuple = (surgeon.S_SIGMA, surgeon.S_MU, surgeon.RANDOM)
    n_eval: int = 1000
    scoring: scorer.ScoringConfig = field(default_factory=scorer.ScoringConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    pca_samples: int = 10000


def settings(cfg: ExperimentConfig) -> dict:
    """Everything that determines a seed's result; cached results must match it."""
    return {"teacher_steps": cfg.teacher_steps, "distill_steps": cfg.distill_steps, "p_r": cfg.p_r,
            "modes": list(cfg.modes), "n_eval": cfg.n_eval, "pca_samples": cfg.pca_samples,
            "scoring": dataclasses.asdict(cfg.scoring), "generator": cfg.generator.to_dict()}


def load_or_run(cfg: ExperimentConfig, seed: int, workdir) -> tuple[dict, bool]:
    """(result, reused) -- reuses ``result_{seed}.json`` only if its settings match."""
    path = Path(workdir) / f"result_{seed}.json"
    if path.exists():
        cached = json.loads(path.read_text())
        if cached.get("settings") == json.loads(json.dumps(settings(cfg))):
            return cached, True
        log.info("seed %d: cached result has different settings, rerunning", seed)
    return run_seed(cfg, seed, workdir), False


def run_seed(cfg: ExperimentConfig, seed: int, workdir=None) -> dict:
    """Teacher -> directions -> scores -> one student per mode -> metrics."""
    workdir = Path(workdir) if workdir is not None else None
    if workdir is not None:
        workdir.mkdir(parents=True, exist_ok=True)
    dcfg = DistillConfig(seed=seed)
    teacher_path = workdir / f"teacher_{seed}.dcpg" if workdir else None
    disc_path = workdir / f"teacher_{seed}.disc" if workdir else None
    if teacher_path is not None and teacher_path.exists() and disc_path.exists():
        teacher = load_checkpoint(teacher_path)
        disc0 = load_discriminator(disc_path)
        log.info("seed %d: reusing %s", seed, teacher_path)
    else:
        disc0 = init_discriminator(cfg.generator.resolution, seed=seed + 1)
        teacher = train_teacher(init_generator(cfg.generator, seed), disc0, cfg.teacher_steps, dcfg,
                                log_path=workdir / f"teacher_{seed}.log.jsonl" if workdir else None)
        if teacher_path is not None:
            save_checkpoint(teacher, teacher_path)
            save_discriminator(disc0, disc_path)
    _, samples = latentdir.estimate_w_stats(teacher, cfg.pca_samples, seed)
    ds = latentdir.pca_directions(samples, latentdir.default_n_components(teacher.config.w_dim))
    report = scorer.accumulate_scores(teacher, ds, scorer.ScoringConfig(
        alpha=cfg.scoring.alpha, n_directions=cfg.scoring.n_directions,
        n_latents=cfg.scoring.n_latents, seed=seed))
    result = {"seed": seed, "settings": settings(cfg),
              "teacher": evalkit.pairwise_diversity(teacher, cfg.n_eval, seed + 1000).__dict__,
              "untrained": evalkit.pairwise_diversity(init_generator(cfg.generator, seed), cfg.n_eval,
                                                      seed + 1000).__dict__}
    for mode in cfg.modes:
        plan = surgeon.build_plan(report, cfg.p_r, mode, seed)
        student = surgeon.apply_plan(teacher, plan)
        # every mode starts from the teacher's discriminator
        disc = disc0.copy()
        trained = distill_student(teacher, student, disc, ds, dcfg, steps=cfg.distill_steps,
                                  log_path=workdir / f"distill_{seed}_{mode}.log.jsonl" if workdir else None)
        div = evalkit.pairwise_diversity(trained, cfg.n_eval, seed + 1000)
        result[mode] = {
            "l1_init": evalkit.teacher_student_l1(teacher, student, cfg.n_eval, seed + 1000),
            "teacher_student_l1": evalkit.teacher_student_l1(teacher, trained, cfg.n_eval, seed + 1000),
            "min_nn_distance": div.min_nn_distance,
            "avg_distance": div.avg_distance,
        }
        log.info("seed %d mode %s: %s", seed, mode, result[mode])
    if workdir is not None:
        (workdir / f"result_{seed}.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


def verdict(results: list[dict]) -> dict:
    """Per-seed comparisons of S_sigma against RANDOM."""
    l1 = [r[surgeon.S_SIGMA]["teacher_student_l1"] <= r[surgeon.RANDOM]["teacher_student_l1"] for r in results]
    div = [r[surgeon.S_SIGMA]["avg_distance"] >= r[surgeon.RANDOM]["avg_distance"] for r in results]
    return {"l1_wins": l1, "diversity_wins": div,
            "l1_pass": sum(l1) >= 2, "diversity_pass": sum(div) >= 2}


def main(argv=None) -> None:
    import argparse

    ap = argparse.ArgumentParser(description="prune-and-distill comparison of S_sigma, S_mu and RANDOM selection")
    ap.add_argument("--workdir", default="experiment_runs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = ExperimentConfig(seeds=tuple(args.seeds))
    results = [load_or_run(cfg, s, args.workdir)[0] for s in cfg.seeds]
    print(json.dumps(verdict(results), indent=1))


if __name__ == "__main__":
    main()
