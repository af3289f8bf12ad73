"""Shared fixture builders and brute-force oracles."""
import numpy as np

from dcprune import scorer, surgeon
from dcprune.latentdir import sample_direction
from dcprune.synthnet import map_latent


def kill_pruned_channels(gen, plan):
    """Zero every weight that reads a channel the plan removes.

    After this the pruned channels cannot influence the image, so surgery
    must leave the output unchanged.
    """
    out = gen.copy()
    res = gen.config.resolutions
    for i, r in enumerate(res):
        C = gen.config.block_channels(r)
        dead = np.setdiff1d(np.arange(C), plan.kept[f"block.{r}"])
        out.weights[f"block.{r}.torgb.weight"][:, dead] = 0.0
        if i == 0:
            # the constant's channels feed this block and share its kept set
            out.weights[f"block.{r}.conv.weight"][:, dead] = 0.0
        if i + 1 < len(res):
            out.weights[f"block.{res[i + 1]}.conv.weight"][:, dead] = 0.0
    return out


def random_plan(config, rng, p_r=None):
    kept = {}
    for r in config.resolutions:
        C = config.block_channels(r)
        n = surgeon.n_keep(C, p_r) if p_r is not None else int(rng.integers(1, C + 1))
        kept[f"block.{r}"] = sorted(int(i) for i in rng.choice(C, size=n, replace=False))
    return surgeon.PruningPlan(kept, surgeon.RANDOM, p_r or 0.5, 0)


def replay_gradients(gen, ds, c):
    """G[i][j] = perturb_gradients for the documented (seed, i) stream."""
    out = []
    for i in range(c.n_latents):
        rng = np.random.default_rng([c.seed, i])
        w = map_latent(gen, rng.standard_normal(gen.config.z_dim)).data
        out.append([scorer.perturb_gradients(gen, w, sample_direction(ds, rng), c.alpha) for _ in range(c.n_directions)])
    return out


def loop_scores(G, name, M, N):
    """S^mu and S^sigma by explicit loops over latents, directions and entries."""
    shape = G[0][0][name].shape
    C = shape[0]
    mu, sig = [0.0] * C, [0.0] * C
    for c in range(C):
        for idx in np.ndindex(shape[1:]):
            e = (c,) + idx
            acc_mu = acc_sig = 0.0
            for i in range(M):
                offset = 0.0
                for j in range(N):
                    offset += G[i][j][name][e]
                offset /= N
                for j in range(N):
                    acc_mu += G[i][j][name][e]
                    acc_sig += (G[i][j][name][e] - offset) ** 2
            mu[c] += acc_mu / (M * N)
            sig[c] += acc_sig / (M * N)
    return np.array(mu), np.array(sig)


def permute_feature_map(gen, r, perm):
    """Relabel the channels of feature map block.r everywhere they appear."""
    p = {k: v.copy() for k, v in gen.weights.items()}
    res = gen.config.resolutions
    i = res.index(r)
    p[f"block.{r}.conv.weight"] = p[f"block.{r}.conv.weight"][perm]
    p[f"block.{r}.conv.bias"] = p[f"block.{r}.conv.bias"][perm]
    p[f"block.{r}.torgb.weight"] = p[f"block.{r}.torgb.weight"][:, perm]
    p[f"block.{r}.torgb_affine.weight"] = p[f"block.{r}.torgb_affine.weight"][perm]
    p[f"block.{r}.torgb_affine.bias"] = p[f"block.{r}.torgb_affine.bias"][perm]
    if i == 0:
        p["const"] = p["const"][perm]
        p[f"block.{r}.conv.weight"] = p[f"block.{r}.conv.weight"][:, perm]
        p[f"block.{r}.affine.weight"] = p[f"block.{r}.affine.weight"][perm]
        p[f"block.{r}.affine.bias"] = p[f"block.{r}.affine.bias"][perm]
    if i + 1 < len(res):
        n = res[i + 1]
        p[f"block.{n}.conv.weight"] = p[f"block.{n}.conv.weight"][:, perm]
        p[f"block.{n}.affine.weight"] = p[f"block.{n}.affine.weight"][perm]
        p[f"block.{n}.affine.bias"] = p[f"block.{n}.affine.bias"][perm]
    out = gen.copy()
    out.weights = p
    return out
