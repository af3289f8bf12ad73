import math

import numpy as np
import pytest

from dcprune import evalkit as E
from dcprune.synthnet import GeneratorConfig, init_generator, sample_w, synthesize


def test_l1_identical_is_zero(small_gen):
    assert E.teacher_student_l1(small_gen, small_gen.copy(), 20, 0) == 0.0


def test_l1_bias_shift(small_gen):
    shifted = small_gen.copy()
    shifted.weights["block.16.torgb.bias"] = shifted.weights["block.16.torgb.bias"] + 0.2
    assert abs(E.teacher_student_l1(small_gen, shifted, 20, 0) - 0.2) < 1e-12


def test_l1_loop_oracle(small_gen):
    other = init_generator(small_gen.config, 99)
    w = sample_w(small_gen, 100, 4)
    acc = 0.0
    for i in range(100):
        a, b = synthesize(small_gen, w[i]).data, synthesize(other, w[i]).data
        acc += np.abs(a - b).mean()
    assert abs(E.teacher_student_l1(small_gen, other, 100, 4) - acc / 100) < 1e-12


def test_l1_errors(small_gen, tiny_gen):
    with pytest.raises(ValueError, match="resolution"):
        E.teacher_student_l1(small_gen, init_generator(GeneratorConfig(z_dim=8, w_dim=8, resolutions=(4, 8),
                                                                       channels_per_resolution=(2, 2)), 0), 5, 0)
    with pytest.raises(ValueError):
        E.teacher_student_l1(small_gen, small_gen, 0, 0)


def test_constant_generator_has_zero_diversity(small_gen):
    gen = small_gen.copy()
    for k in gen.weights:
        gen.weights[k] = np.zeros_like(gen.weights[k])
    stats = E.pairwise_diversity(gen, 30, 0)
    assert stats.min_nn_distance == 0.0 and stats.avg_distance == 0.0
    assert stats.n_samples == 30


def enumerate_stats(images):
    """Every ordered pair by explicit loops, RMS-normalized L2."""
    n = len(images)
    P = images[0].size
    d = [[math.sqrt(float(((images[i] - images[j]) ** 2).sum()) / P) for j in range(n)] for i in range(n)]
    nn = [min(d[i][j] for j in range(n) if j != i) for i in range(n)]
    pairs = [d[i][j] for i in range(n) for j in range(i + 1, n)]
    return sum(nn) / n, sum(pairs) / len(pairs)


@pytest.mark.parametrize("n", [4, 10])
def test_two_constant_images(n, rng):
    A = np.full((3, 4, 4), rng.uniform(-1, 1))
    B = np.full((3, 4, 4), rng.uniform(-1, 1))
    imgs = np.stack([A if i % 2 == 0 else B for i in range(n)])
    stats = E.diversity_from_images(imgs)
    rms = math.sqrt(((A - B) ** 2).mean())
    nn, avg = enumerate_stats(imgs)
    # (n/2)^2 unlike pairs out of n(n-1)/2
    assert abs(stats.avg_distance - rms * n / (2 * (n - 1))) < 1e-12
    assert abs(stats.avg_distance - avg) < 1e-12
    assert stats.min_nn_distance == nn == 0.0


def test_random_images_match_enumeration(rng):
    imgs = rng.standard_normal((13, 3, 5, 5))
    stats = E.diversity_from_images(imgs, chunk=4)
    nn, avg = enumerate_stats(imgs)
    assert abs(stats.min_nn_distance - nn) < 1e-12
    assert abs(stats.avg_distance - avg) < 1e-12
    assert 0 <= stats.min_nn_distance <= stats.avg_distance


def test_permutation_invariance(rng):
    imgs = rng.standard_normal((20, 3, 4, 4))
    a = E.diversity_from_images(imgs)
    b = E.diversity_from_images(imgs[rng.permutation(20)])
    assert a.min_nn_distance == pytest.approx(b.min_nn_distance, rel=1e-14)
    assert a.avg_distance == pytest.approx(b.avg_distance, rel=1e-14)


def test_duplicate_drives_nn_to_zero(rng):
    imgs = rng.standard_normal((8, 3, 4, 4))
    x = imgs.reshape(8, -1)
    d = np.sqrt(((x[:, None] - x[None]) ** 2).mean(axis=2))
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    dup = E.diversity_from_images(np.concatenate([imgs, imgs[2:3]]))
    # sample 2 and its copy both drop to 0; every other NN is unchanged
    assert dup.min_nn_distance == pytest.approx((nn.sum() - nn[2]) / 9, rel=1e-13)


def test_diversity_deterministic(small_gen):
    assert E.pairwise_diversity(small_gen, 40, 3) == E.pairwise_diversity(small_gen, 40, 3)


def test_diversity_needs_two(small_gen):
    with pytest.raises(ValueError):
        E.pairwise_diversity(small_gen, 1, 0)
