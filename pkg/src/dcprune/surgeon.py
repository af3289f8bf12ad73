"""Pruning plans and channel surgery on generator weights."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .jsonio import dumps_canonical
from .synthnet import Generator, GeneratorConfig

S_SIGMA = "s_sigma"
S_MU = "s_mu"
RANDOM = "random"
MODES = (S_SIGMA, S_MU, RANDOM)


class PlanError(ValueError):
    pass


def feature_maps(config: GeneratorConfig) -> list[str]:
    return [f"block.{r}" for r in config.resolutions]


def n_keep(channels: int, p_r: float) -> int:
    # the epsilon stops (1 - 0.7) * 10 = 3.0000000000000004 from rounding up to 4
    return max(0, math.ceil((1.0 - p_r) * channels - 1e-9))


@dataclass
class PruningPlan:
    kept: dict = field(default_factory=dict)  # feature map -> sorted kept indices
    mode: str = S_SIGMA
    p_r: float = 0.7
    seed: int = 0

    def to_json(self) -> str:
        return dumps_canonical({"p_r": self.p_r, "mode": self.mode, "seed": self.seed,
                                "kept": {k: [int(i) for i in v] for k, v in self.kept.items()}})

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        obj = json.loads(text)
        return cls({k: list(v) for k, v in obj["kept"].items()}, obj["mode"], float(obj["p_r"]), int(obj["seed"]))


def slice_specs(plan: PruningPlan, config: GeneratorConfig) -> list[tuple[str, int, list]]:
    """(tensor name, axis, kept indices) for every tensor a feature map touches."""
    specs = []
    res = config.resolutions
    for i, r in enumerate(res):
        kept = plan.kept[f"block.{r}"]
        specs += [(f"block.{r}.conv.weight", 0, kept), (f"block.{r}.conv.bias", 0, kept),
                  (f"block.{r}.torgb.weight", 1, kept),
                  (f"block.{r}.torgb_affine.weight", 0, kept), (f"block.{r}.torgb_affine.bias", 0, kept)]
        # consumers of this map: next block's conv input (or, for the first map,
        # the learned constant feeding this same block, whose channels are tied to it)
        consumer = res[i + 1] if i + 1 < len(res) else None
        if i == 0:
            specs += [("const", 0, kept), (f"block.{r}.conv.weight", 1, kept),
                      (f"block.{r}.affine.weight", 0, kept), (f"block.{r}.affine.bias", 0, kept)]
        if consumer is not None:
            specs += [(f"block.{consumer}.conv.weight", 1, kept),
                      (f"block.{consumer}.affine.weight", 0, kept), (f"block.{consumer}.affine.bias", 0, kept)]
    return specs


def build_plan(report, p_r: float, mode: str = S_SIGMA, seed: int = 0) -> PruningPlan:
    """Keep the top ceil((1 - p_r) C) channels of each feature map.

    Ties keep the lower index. RANDOM keeps a seeded uniform subset of the
    same size.
    """
    if not 0.0 < p_r < 1.0:
        raise PlanError(f"p_r must lie in (0, 1), got {p_r}")
    if mode not in MODES:
        raise PlanError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = np.random.default_rng(seed)
    kept = {}
    for layer in report.s_mu:
        fmap = layer[:-len(".conv")] if layer.endswith(".conv") else layer
        scores = np.asarray(report.s_sigma[layer] if mode == S_SIGMA else report.s_mu[layer])
        C = len(scores)
        n = n_keep(C, p_r)
        if n < 1:
            raise PlanError(f"{fmap}: p_r={p_r} keeps no channels out of {C}")
        if mode == RANDOM:
            idx = rng.choice(C, size=n, replace=False)
        else:
            order = np.lexsort((np.arange(C), -scores))
            idx = order[:n]
        kept[fmap] = sorted(int(i) for i in idx)
    return PruningPlan(kept, mode, float(p_r), int(seed))


def keep_all_plan(config: GeneratorConfig) -> PruningPlan:
    return PruningPlan({f"block.{r}": list(range(config.block_channels(r))) for r in config.resolutions},
                       S_SIGMA, 0.0, 0)


def verify_plan(plan: PruningPlan, config: GeneratorConfig) -> list[str]:
    problems = []
    expected = feature_maps(config)
    for name in expected:
        if name not in plan.kept:
            problems.append(f"{name}: no kept list")
    for name, kept in plan.kept.items():
        if name not in expected:
            problems.append(f"{name}: not a feature map of this generator")
            continue
        C = config.block_channels(int(name.split(".")[1]))
        if len(kept) == 0:
            problems.append(f"{name}: kept list is empty")
            continue
        if len(set(kept)) != len(kept):
            problems.append(f"{name}: duplicate channel indices")
        elif any(b <= a for a, b in zip(kept, kept[1:])):
            problems.append(f"{name}: kept indices are not strictly increasing")
        bad = [i for i in kept if not 0 <= i < C]
        if bad:
            problems.append(f"{name}: indices {bad} out of range for {C} channels")
    return problems


def student_config(config: GeneratorConfig, plan: PruningPlan) -> GeneratorConfig:
    ch = tuple(len(plan.kept[f"block.{r}"]) for r in config.resolutions)
    return dataclasses.replace(config, channels_per_resolution=ch)


def apply_plan(teacher: Generator, plan: PruningPlan) -> Generator:
    """Slice teacher tensors along the planned axes; everything else is copied."""
    problems = verify_plan(plan, teacher.config)
    if problems:
        raise PlanError("; ".join(problems))
    weights = {k: v.copy() for k, v in teacher.weights.items()}
    for name, axis, kept in slice_specs(plan, teacher.config):
        if name not in weights:
            raise PlanError(f"tensor {name} (axis {axis}) missing from teacher")
        arr = weights[name]
        if max(kept) >= teacher.weights[name].shape[axis]:
            raise PlanError(f"tensor {name} axis {axis}: index {max(kept)} >= {arr.shape[axis]}")
        weights[name] = np.take(arr, kept, axis=axis)
    student = Generator(student_config(teacher.config, plan), weights)
    student.check()
    return student
