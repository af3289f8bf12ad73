import dataclasses

import numpy as np
import pytest

from dcprune import scorer as S
from dcprune.latentdir import PCA, DirectionSet, random_directions
from dcprune.synthnet import GeneratorConfig, init_generator, synthesize

from helpers import loop_scores, permute_feature_map, replay_gradients


def pca_set(w_dim, rows, ratios):
    d = np.zeros((len(rows), w_dim))
    for i, r in enumerate(rows):
        d[i, r] = 1.0
    return DirectionSet(d, np.asarray(ratios, dtype=float), np.zeros(w_dim), PCA)


@pytest.fixture
def tiny_ds():
    return random_directions(6)


def cfg(**kw):
    base = dict(alpha=1.0, n_directions=3, n_latents=2, seed=0)
    base.update(kw)
    return S.ScoringConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        S.ScoringConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        S.ScoringConfig(n_directions=0)


def test_diff_loss_zero_cases(tiny_gen, rng):
    w, d = rng.standard_normal(6), rng.standard_normal(6)
    assert S.image_diff_loss(tiny_gen, w, d, 0.0).data == 0.0
    assert S.image_diff_loss(tiny_gen, w, np.zeros(6), 5.0).data == 0.0


def test_diff_loss_matches_explicit_difference(tiny_gen, rng):
    w, d = rng.standard_normal(6), rng.standard_normal(6)
    a, b = synthesize(tiny_gen, w).data, synthesize(tiny_gen, w + 2.0 * d).data
    assert abs(S.image_diff_loss(tiny_gen, w, d, 2.0).data - np.abs(a - b).sum()) < 1e-10


def linear_gen():
    # lrelu slope 1, no demodulation, one block and a constant toRGB style: g(w) = A w + c
    c = GeneratorConfig(z_dim=4, w_dim=4, resolutions=(4,), channels_per_resolution=(3,),
                        demodulate=False, lrelu_slope=1.0)
    gen = init_generator(c, 5)
    gen.weights["block.4.torgb_affine.weight"] = np.zeros((3, 4))
    return gen


def test_diff_loss_linear_generator(rng):
    gen = linear_gen()
    g0 = synthesize(gen, np.zeros(4)).data.ravel()
    A = np.stack([synthesize(gen, e).data.ravel() - g0 for e in np.eye(4)], axis=1)
    for _ in range(5):
        w, d, alpha = rng.standard_normal(4), rng.standard_normal(4), rng.uniform(0.5, 5)
        expected = alpha * np.abs(A @ d).sum()
        got = S.image_diff_loss(gen, w, d, alpha).data
        assert abs(got - expected) <= 1e-10 * expected


def test_perturb_gradients_alpha_zero(tiny_gen, rng):
    grads = S.perturb_gradients(tiny_gen, rng.standard_normal(6), rng.standard_normal(6), 0.0)
    assert set(grads) == {"block.4.conv", "block.8.conv"}
    for g in grads.values():
        assert np.all(g == 0)


def test_perturb_gradients_shapes_match_weights(tiny_gen, rng):
    grads = S.perturb_gradients(tiny_gen, rng.standard_normal(6), rng.standard_normal(6), 1.0)
    for name, g in grads.items():
        assert g.shape == tiny_gen.weights[name + ".weight"].shape
        assert np.all(g >= 0)


@pytest.mark.parametrize("r,c", [(4, 1), (8, 2)])
def test_disconnected_channel_gets_zero_gradient(tiny_gen, rng, r, c):
    gen = tiny_gen
    gen.weights[f"block.{r}.torgb.weight"][:, c] = 0.0
    if r == 4:
        gen.weights["block.8.conv.weight"][:, c] = 0.0
    grads = S.perturb_gradients(gen, rng.standard_normal(6), rng.standard_normal(6), 2.0)
    assert np.all(grads[f"block.{r}.conv"][c] == 0.0)
    assert grads[f"block.{r}.conv"].sum() > 0


def test_perturb_gradients_match_central_differences(tiny_gen, rng):
    w, d, alpha = rng.standard_normal(6), rng.standard_normal(6), 1.5
    grads = S.perturb_gradients(tiny_gen, w, d, alpha)
    h = 1e-6
    for name, g in grads.items():
        key = name + ".weight"
        base = tiny_gen.weights[key]
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for s in (h, -h):
                p = dict(tiny_gen.weights)
                p[key] = base.copy()
                p[key][idx] += s
                vals.append(S.image_diff_loss(tiny_gen, w, d, alpha, p).data)
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        rel = np.abs(g - np.abs(fd)) / np.maximum(np.abs(fd), 1e-6)
        assert rel.max() < 1e-4, name


def test_alpha_zero_scores_are_zero(tiny_gen, tiny_ds):
    rep = S.accumulate_scores(tiny_gen, tiny_ds, cfg(alpha=0.0))
    for name in rep.s_mu:
        assert np.all(rep.s_mu[name] == 0) and np.all(rep.s_sigma[name] == 0)


def test_single_direction_gives_zero_sigma(tiny_gen, tiny_ds):
    rep = S.accumulate_scores(tiny_gen, tiny_ds, cfg(n_directions=1, n_latents=3))
    for name in rep.s_mu:
        assert np.all(rep.s_sigma[name] == 0)
        assert rep.s_mu[name].sum() > 0


def two_channel_fixture():
    """Feature channel 0 is driven by the unperturbed w[0] plus an equal weak
    share of both perturbed coordinates, so every direction moves it alike;
    channel 1 responds to the two directions with different strengths. Demodulation would cancel the style
    magnitude of a single-input channel, so it is off here."""
    c = GeneratorConfig(z_dim=3, w_dim=3, mapping_layers=1, resolutions=(4,), channels_per_resolution=(2,),
                        demodulate=False)
    gen = init_generator(c, 2)
    gen.weights["mapping.0.weight"] = np.eye(3)
    gen.weights["block.4.affine.weight"] = np.array([[1.0, 0.05, 0.05], [0.0, 1.0, 0.25]])
    W = gen.weights["block.4.conv.weight"]
    W[0, 1] = 0.0
    W[1, 0] = 0.0
    gen.weights["block.4.torgb_affine.weight"] = np.zeros((2, 3))
    return gen, pca_set(3, [1, 2], [0.6, 0.4])


def test_two_channel_fixture_against_loop_oracle():
    gen, ds = two_channel_fixture()
    c = S.ScoringConfig(alpha=2.0, n_directions=4, n_latents=5, seed=1)
    rep = S.accumulate_scores(gen, ds, c)
    mu, sig = loop_scores(replay_gradients(gen, ds, c), "block.4.conv", 5, 4)
    np.testing.assert_allclose(rep.s_mu["block.4.conv"], mu, rtol=1e-10, atol=0)
    np.testing.assert_allclose(rep.s_sigma["block.4.conv"], sig, rtol=1e-10, atol=0)
    assert sig[1] > sig[0]


def test_sigma_is_two_pass_population_variance(small_gen):
    ds = random_directions(8)
    c = S.ScoringConfig(alpha=1.0, n_directions=4, n_latents=3, seed=5)
    rep = S.accumulate_scores(small_gen, ds, c)
    G = replay_gradients(small_gen, ds, c)
    for name in rep.s_sigma:
        stacked = np.array([[g[name] for g in row] for row in G])  # [M, N, ...]
        var = np.var(stacked, axis=1).mean(axis=0)
        expected = var.reshape(var.shape[0], -1).sum(axis=1)
        np.testing.assert_allclose(rep.s_sigma[name], expected, rtol=1e-10, atol=1e-300)
        m = stacked.mean(axis=(0, 1))
        np.testing.assert_allclose(rep.s_mu[name], m.reshape(m.shape[0], -1).sum(axis=1), rtol=1e-10)


def test_scores_are_bit_deterministic(tiny_gen, tiny_ds):
    a = S.accumulate_scores(tiny_gen, tiny_ds, cfg()).to_json()
    b = S.accumulate_scores(tiny_gen, tiny_ds, cfg()).to_json()
    assert a == b


def test_parallel_matches_serial(tiny_gen, tiny_ds):
    c = cfg(n_latents=4)
    assert S.accumulate_scores(tiny_gen, tiny_ds, c, workers=2).to_json() == \
        S.accumulate_scores(tiny_gen, tiny_ds, c).to_json()


def test_doubling_latents_averages(tiny_gen, tiny_ds):
    small = S.accumulate_scores(tiny_gen, tiny_ds, cfg(n_latents=2))
    big = S.accumulate_scores(tiny_gen, tiny_ds, cfg(n_latents=4))
    for name in small.s_mu:
        second_half = 2 * big.s_mu[name] - small.s_mu[name]
        assert np.all(second_half >= -1e-12)
        assert np.all(big.s_mu[name] >= 0)


@pytest.mark.parametrize("r", [4, 8])
def test_permutation_equivariance(small_gen, r):
    ds = random_directions(8)
    c = S.ScoringConfig(alpha=1.0, n_directions=3, n_latents=2, seed=3)
    C = small_gen.config.block_channels(r)
    perm = np.random.default_rng(r).permutation(C)
    base = S.accumulate_scores(small_gen, ds, c)
    moved = S.accumulate_scores(permute_feature_map(small_gen, r, perm), ds, c)
    for name in base.s_mu:
        p = perm if name == f"block.{r}.conv" else np.arange(len(base.s_mu[name]))
        # equal up to floating-point reassociation inside the convolutions
        np.testing.assert_allclose(moved.s_mu[name], base.s_mu[name][p], rtol=1e-12, atol=0)
        np.testing.assert_allclose(moved.s_sigma[name], base.s_sigma[name][p], rtol=1e-10, atol=1e-300)


def test_noise_is_disabled_while_scoring(tiny_gen, tiny_ds):
    noisy = tiny_gen.copy()
    noisy.config = dataclasses.replace(noisy.config, noise_enabled=True)
    assert S.accumulate_scores(noisy, tiny_ds, cfg()).s_mu["block.8.conv"].tobytes() == \
        S.accumulate_scores(tiny_gen, tiny_ds, cfg()).s_mu["block.8.conv"].tobytes()


def test_report_json_roundtrip(tiny_gen, tiny_ds):
    rep = S.accumulate_scores(tiny_gen, tiny_ds, cfg())
    text = rep.to_json()
    back = S.ScoreReport.from_json(text)
    assert back.to_json() == text
    import json
    layer = json.loads(text)["layers"]["block.8.conv"]
    assert layer["c_in"] == 3 == len(layer["s_sigma"])
