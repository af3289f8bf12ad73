"""Channel importance from latent-perturbation-induced gradients.

For a latent ``w`` and direction ``d`` the image difference
``sum |g(w) - g(w + alpha d)|`` is back-propagated to every synthesis conv
weight. The absolute gradients are averaged over N directions per latent and
M latents. ``s_mu`` sums the averaged magnitudes over a channel slice;
``s_sigma`` sums the averaged squared deviation from each latent's own
direction mean (the gradient offset).

Scores are reported per block conv, one value per output channel of that
conv, i.e. per channel of the feature map the block produces.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .jsonio import dumps_canonical
from .latentdir import PCA, DirectionSet, sample_direction
from .synthnet import Generator, map_latent, synthesize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoringConfig:
    alpha: float = 5.0
    n_directions: int = 10
    n_latents: int = 100
    seed: int = 0
    direction_mode: str = PCA

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.n_directions < 1 or self.n_latents < 1:
            raise ValueError("n_directions and n_latents must be >= 1")


def scored_layers(config) -> list[str]:
    return [f"block.{r}.conv" for r in config.resolutions]


@dataclass
class ScoreReport:
    s_mu: dict = field(default_factory=dict)      # layer -> [C]
    s_sigma: dict = field(default_factory=dict)   # layer -> [C]
    config: dict = field(default_factory=dict)

    def channels(self, layer: str) -> int:
        return len(self.s_mu[layer])

    def to_json(self) -> str:
        layers = {name: {"c_in": len(self.s_mu[name]), "s_mu": [float(v) for v in self.s_mu[name]],
                         "s_sigma": [float(v) for v in self.s_sigma[name]]}
                  for name in self.s_mu}
        return dumps_canonical({"config": self.config, "layers": layers})

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        obj = json.loads(text)
        rep = cls(config=obj.get("config", {}))
        for name, entry in obj["layers"].items():
            rep.s_mu[name] = np.asarray(entry["s_mu"], dtype=np.float64)
            rep.s_sigma[name] = np.asarray(entry["s_sigma"], dtype=np.float64)
            if len(rep.s_mu[name]) != entry["c_in"] or len(rep.s_sigma[name]) != entry["c_in"]:
                raise ValueError(f"layer {name}: score lengths disagree with c_in={entry['c_in']}")
        return rep


def _scoring_params(gen: Generator) -> dict:
    params = {k: T.Tensor(v) for k, v in gen.weights.items()}
    for name in scored_layers(gen.config):
        params[name + ".weight"] = T.Tensor(gen.weights[name + ".weight"], requires_grad=True)
    return params


def image_diff_loss(gen: Generator, w, d, alpha: float, params: dict | None = None) -> T.Tensor:
    """Summed absolute difference between g(w) and g(w + alpha d)."""
    w = np.asarray(w, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    pair = np.stack([w, w + alpha * d])
    img = synthesize(gen, pair, params)
    return T.tabs(img[0] - img[1]).sum()


def perturb_gradients(gen: Generator, w, d, alpha: float) -> dict:
    """|dL_diff/dW| for every block conv weight, keyed by layer name."""
    if gen.config.noise_enabled:
        gen = Generator(dataclasses.replace(gen.config, noise_enabled=False), gen.weights)
    params = _scoring_params(gen)
    loss = image_diff_loss(gen, w, d, alpha, params)
    grads = T.backward(loss)
    out = {}
    for name in scored_layers(gen.config):
        p = params[name + ".weight"]
        out[name] = np.abs(grads.get(p, np.zeros(p.shape)))
    return out


def _latent_partials(gen: Generator, ds: DirectionSet, cfg: ScoringConfig, i: int):
    """Per-latent sums: (sum_j G_ij, sum_j (G_ij - O_i)^2) for each layer."""
    rng = np.random.default_rng([cfg.seed, i])
    z = rng.standard_normal(gen.config.z_dim)
    with T.no_grad():
        w = map_latent(gen, z).data
    grads = [perturb_gradients(gen, w, sample_direction(ds, rng), cfg.alpha) for _ in range(cfg.n_directions)]
    sums, sqdev = {}, {}
    for name in grads[0]:
        s = np.zeros_like(grads[0][name])
        for g in grads:
            s += g[name]
        offset = s / cfg.n_directions
        q = np.zeros_like(s)
        for g in grads:
            q += (g[name] - offset) ** 2
        sums[name], sqdev[name] = s, q
    return sums, sqdev


def _worker(args):
    gen, ds, cfg, i = args
    return _latent_partials(gen, ds, cfg, i)


def accumulate_scores(gen: Generator, ds: DirectionSet, cfg: ScoringConfig, workers: int = 1,
                      extra_config: dict | None = None) -> ScoreReport:
    """S^mu and S^sigma per scored layer over M latents x N directions.

    Latent ``i`` draws z and its directions from the substream ``(seed, i)``;
    partial sums are merged in ascending ``i`` so any worker count gives a
    bit-identical report.
    """
    M, N = cfg.n_latents, cfg.n_directions
    jobs = [(gen, ds, cfg, i) for i in range(M)]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            partials = pool.imap(_worker, jobs)
            tot_g, tot_q = _merge(partials, M)
    else:
        tot_g, tot_q = _merge(map(_worker, jobs), M)
    rep = ScoreReport(config={**dataclasses.asdict(cfg), **(extra_config or {})})
    for name in tot_g:
        mu = tot_g[name] / (M * N)
        var = tot_q[name] / (M * N)
        axes = tuple(range(1, mu.ndim))
        rep.s_mu[name] = mu.sum(axis=axes)
        rep.s_sigma[name] = var.sum(axis=axes)
    return rep


def _merge(partials, M):
    tot_g = tot_q = None
    for i, (g, q) in enumerate(partials):
        if tot_g is None:
            tot_g = {k: v.copy() for k, v in g.items()}
            tot_q = {k: v.copy() for k, v in q.items()}
        else:
            for k in g:
                tot_g[k] += g[k]
                tot_q[k] += q[k]
        if (i + 1) % 10 == 0:
            log.info("scored %d/%d latents", i + 1, M)
    return tot_g, tot_q
