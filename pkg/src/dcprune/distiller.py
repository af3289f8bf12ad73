"""Teacher training and student distillation at desk scale.

The student objective is ``lambda_gan * L_GAN + lambda_rgb * L_rgb +
lambda_ld * L_LD`` (the perceptual term is carried in the config but pinned
to zero). Adversarial training uses the non-saturating loss with a lazy R1
penalty on real images.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import HeaderMismatchError, read_container, save_checkpoint, write_container
from .latentdir import DirectionSet, sample_direction
from .synthnet import Generator, map_latent, synthesize

log = logging.getLogger(__name__)

R1_INTERVAL = 16
MAPPING_LR_MULT = 0.01


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    lambda_gan: float = 1.0
    lambda_rgb: float = 3.0
    lambda_lpips: float = 0.0
    lambda_ld: float = 30.0
    learning_rate: float = 2e-3
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    r1_gamma: float = 10.0
    batch_size: int = 8
    iterations: int = 5000
    seed: int = 0
    alpha: float = 5.0

    def __post_init__(self):
        if self.lambda_lpips != 0:
            raise ValueError("lambda_lpips must be 0: no perceptual network is available")
        if min(self.lambda_gan, self.lambda_rgb, self.lambda_ld) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


# data ---------------------------------------------------------------------

def synth_dataset_sample(seed: int, index: int, resolution: int = 32) -> np.ndarray:
    """Procedural colored-blob image [3, R, R] in [-1, 1]."""
    rng = np.random.default_rng([seed, index])
    img = np.broadcast_to(rng.uniform(-1, 1, size=(3, 1, 1)), (3, resolution, resolution)).copy()
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, resolution, size=2)
        sigma = rng.uniform(0.08, 0.25) * resolution
        color = rng.uniform(-1, 1, size=(3, 1, 1))
        a = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = img * (1 - a) + color * a
    return np.clip(img, -1.0, 1.0)


def dataset_batch(seed: int, start: int, n: int, resolution: int = 32) -> np.ndarray:
    return np.stack([synth_dataset_sample(seed, start + i, resolution) for i in range(n)])


# discriminator ------------------------------------------------------------

@dataclass
class Discriminator:
    """Three stride-2 3x3 convs (leaky ReLU 0.2) and a linear head."""

    weights: dict = field(default_factory=dict)
    n_convs: int = 3

    def copy(self) -> "Discriminator":
        return Discriminator({k: v.copy() for k, v in self.weights.items()}, self.n_convs)


def init_discriminator(resolution: int = 32, channels=(16, 32, 64), seed: int = 0) -> Discriminator:
    rng = np.random.default_rng(seed)
    w, cin = {}, 3
    for i, c in enumerate(channels):
        w[f"conv.{i}.weight"] = rng.standard_normal((c, cin, 3, 3)) / np.sqrt(cin * 9)
        w[f"conv.{i}.bias"] = np.zeros(c)
        cin = c
    flat = cin * (resolution // 2 ** len(channels)) ** 2
    w["head.weight"] = rng.standard_normal((1, flat)) / np.sqrt(flat)
    w["head.bias"] = np.zeros(1)
    return Discriminator(w, len(channels))


def save_discriminator(disc: Discriminator, path) -> None:
    write_container(path, disc.weights, {"n_convs": disc.n_convs}, extra={"kind": "discriminator"})


def load_discriminator(path) -> Discriminator:
    header, t = read_container(path)
    if header.get("kind") != "discriminator":
        raise HeaderMismatchError(f"{path}: not a discriminator checkpoint")
    return Discriminator(t, int(header["config"]["n_convs"]))


def disc_forward(disc: Discriminator, x, params=None) -> T.Tensor:
    """Logits [B] for images [B, 3, R, R]."""
    p = disc.weights if params is None else params
    h = T.as_tensor(x)
    for i in range(disc.n_convs):
        h = T.conv2d(h, p[f"conv.{i}.weight"], stride=2)
        h = T.leaky_relu(h + T.reshape(T.as_tensor(p[f"conv.{i}.bias"]), (-1, 1, 1)), 0.2)
    h = T.reshape(h, (h.shape[0], -1))
    return T.reshape(T.linear(h, p["head.weight"], p["head.bias"]), (-1,))


# losses -------------------------------------------------------------------

def loss_rgb(student_img, teacher_img) -> T.Tensor:
    s, t = T.as_tensor(student_img), T.as_tensor(teacher_img)
    if s.shape != t.shape:
        raise T.ShapeError(f"loss_rgb: shapes {s.shape} and {t.shape} differ")
    return T.tabs(s - t).mean()


def cosine_matrix(delta) -> T.Tensor:
    """B x B cosine similarities of the rows of ``delta`` [B, F]."""
    delta = T.as_tensor(delta)
    norms = T.sqrt(T.tsum(T.square(delta), axis=1, keepdims=True))
    if np.any(norms.data < 1e-12):
        raise ValueError("degenerate direction response: feature difference has norm < 1e-12")
    unit = delta / norms
    return T.matmul(unit, T.transpose(unit))


def ld_from_features(t_base, t_pert, s_base, s_pert) -> T.Tensor:
    """Mean |S_T - S_S| between cosine matrices of feature differences."""
    B = t_base.shape[0]
    dt = T.reshape(T.as_tensor(t_pert) - T.as_tensor(t_base), (B, -1))
    ds = T.reshape(T.as_tensor(s_pert) - T.as_tensor(s_base), (B, -1))
    return T.tabs(cosine_matrix(dt).detach() - cosine_matrix(ds)).mean()


def perturbation_batch(ds: DirectionSet, w_batch: np.ndarray, alpha: float, rng) -> np.ndarray:
    return np.stack([w + alpha * sample_direction(ds, rng) for w in w_batch])


def loss_ld(teacher: Generator, student: Generator, w_batch, direction_set: DirectionSet, alpha: float,
            rng: np.random.Generator, student_params=None) -> T.Tensor:
    """Relation distillation over final-block feature changes.

    One direction is drawn per batch element from ``rng``.
    """
    w_batch = np.asarray(w_batch, dtype=np.float64)
    if w_batch.shape[0] < 2:
        raise ValueError("loss_ld needs a batch of at least 2 latents")
    w_pert = perturbation_batch(direction_set, w_batch, alpha, rng)
    both = np.concatenate([w_batch, w_pert])
    B = len(w_batch)
    with T.no_grad():
        _, ft = synthesize(teacher, both, return_features=True)
    _, fs = synthesize(student, both, student_params, return_features=True)
    return ld_from_features(ft[:B], ft[B:], fs[:B], fs[B:])


def gan_losses(disc: Discriminator, real_batch, fake_batch, gamma: float = 10.0, params=None):
    """(g_loss, d_loss, r1_penalty) for the non-saturating objective.

    ``g_loss`` and ``d_loss`` are tensors (differentiable w.r.t. whatever
    requires grad upstream); ``r1_penalty`` is a float.
    """
    real_batch, fake_batch = T.as_tensor(real_batch), T.as_tensor(fake_batch)
    if real_batch.shape != fake_batch.shape:
        raise T.ShapeError(f"gan_losses: real {real_batch.shape} vs fake {fake_batch.shape}")
    fake_logits = disc_forward(disc, fake_batch, params)
    real_logits = disc_forward(disc, real_batch.detach(), params)
    g_loss = T.softplus(-fake_logits).mean()
    d_loss = T.softplus(fake_logits).mean() + T.softplus(-real_logits).mean()
    r1, _ = r1_penalty(disc, real_batch.data, gamma)
    return g_loss, d_loss, r1


def r1_penalty(disc: Discriminator, real: np.ndarray, gamma: float = 10.0):
    """(gamma / 2) * mean_b |dD(x_b)/dx_b|^2 and the per-sample input gradients."""
    x = T.Tensor(real, requires_grad=True)
    logits = disc_forward(disc, x)
    g = T.backward(logits.sum())[x]
    sq = (g.reshape(g.shape[0], -1) ** 2).sum(axis=1)
    return 0.5 * gamma * float(sq.mean()), g


def r1_param_grads(disc: Discriminator, real: np.ndarray, gamma: float = 10.0):
    """Gradient of the R1 penalty w.r.t. discriminator weights.

    Uses d/dtheta (1/2)|grad_x D|^2 = d/dtheta [grad_x D . v] with v = grad_x D
    held fixed, evaluated as a central difference of grad_theta D along v.
    """
    value, v = r1_penalty(disc, real, gamma)
    vmax = float(np.abs(v).max())
    if vmax == 0.0:
        return value, {k: np.zeros_like(a) for k, a in disc.weights.items()}
    h = 1e-4 / vmax

    def theta_grad(x):
        params = {k: T.Tensor(a, requires_grad=True) for k, a in disc.weights.items()}
        grads = T.backward(disc_forward(disc, x, params).sum())
        return {k: grads.get(p, np.zeros(p.shape)) for k, p in params.items()}

    gp, gm = theta_grad(real + h * v), theta_grad(real - h * v)
    scale = gamma / real.shape[0] / (2 * h)
    return value, {k: scale * (gp[k] - gm[k]) for k in disc.weights}


# optimizer ----------------------------------------------------------------

class Adam:
    """Adam over a dict of numpy arrays, updated in place."""

    def __init__(self, params: dict, lr: float, betas=(0.0, 0.99), eps: float = 1e-8, lr_mult: dict | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.lr_mult = lr_mult or {}
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lr * self.lr_mult.get(k, 1.0)
            self.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def equalized_lr_mults(weights: dict) -> dict:
    """Per-tensor step scaling that mimics equalized learning rate.

    Weight matrices step in units of their init std 1/sqrt(fan_in); the
    mapping network additionally runs at 0.01x.
    """
    mult = {}
    for k, a in weights.items():
        m = 1.0 / np.sqrt(np.prod(a.shape[1:])) if k.endswith(".weight") else 1.0
        if k.startswith("mapping."):
            m *= MAPPING_LR_MULT
        mult[k] = m
    return mult


# training loops -----------------------------------------------------------

def _check_finite(values: dict, step: int, dump: dict, dump_path) -> None:
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if not bad:
        return
    if dump_path is not None:
        gen = dump.get("generator")
        if gen is not None:
            save_checkpoint(gen, dump_path)
    raise TrainingDivergedError(f"step {step}: non-finite {bad}; state dumped to {dump_path}")


class _JsonlLog:
    def __init__(self, path, every: int = 100):
        self.fh = open(path, "w") if path is not None else None
        self.every = every
        self.t0 = time.perf_counter()

    def record(self, step: int, **vals) -> None:
        if self.fh is None or step % self.every:
            return
        rec = {"step": step, **{k: float(v) for k, v in vals.items()},
               "wall_ms": round(1000 * (time.perf_counter() - self.t0), 3)}
        self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _disc_step(disc, d_opt, real, fake, step, cfg):
    params = {k: T.Tensor(v, requires_grad=True) for k, v in disc.weights.items()}
    fake_logits = disc_forward(disc, fake, params)
    real_logits = disc_forward(disc, real, params)
    d_loss = T.softplus(fake_logits).mean() + T.softplus(-real_logits).mean()
    g = T.backward(d_loss)
    grads = {k: g.get(p, np.zeros(p.shape)) for k, p in params.items()}
    r1 = 0.0
    if cfg.r1_gamma > 0 and step % R1_INTERVAL == 0:
        r1, rg = r1_param_grads(disc, real, cfg.r1_gamma)
        for k in grads:
            grads[k] = grads[k] + R1_INTERVAL * rg[k]
    d_opt.step(grads)
    return d_loss.item(), r1


def train_teacher(gen: Generator, disc: Discriminator, steps: int, cfg: DistillConfig, *,
                  data_seed: int | None = None, log_path=None, checkpoint_path=None,
                  checkpoint_every: int = 1000, dump_path=None) -> Generator:
    """Adversarial training of a generator on the blob dataset.

    Returns a new Generator; ``gen`` is not modified, ``disc`` is trained in place.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    gen = gen.copy()
    cfgG = gen.config
    rng = np.random.default_rng([cfg.seed, 1])
    data_seed = cfg.seed if data_seed is None else data_seed
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    g_opt = Adam(gen.weights, cfg.learning_rate, betas, lr_mult=equalized_lr_mults(gen.weights))
    d_opt = Adam(disc.weights, cfg.learning_rate, betas, lr_mult=equalized_lr_mults(disc.weights))
    B = cfg.batch_size
    logger = _JsonlLog(log_path)
    try:
        for step in range(steps):
            real = dataset_batch(data_seed, step * B, B, cfgG.resolution)
            with T.no_grad():
                fake = synthesize(gen, map_latent(gen, rng.standard_normal((B, cfgG.z_dim)))).data
            d_loss, r1 = _disc_step(disc, d_opt, real, fake, step, cfg)

            params = {k: T.Tensor(v, requires_grad=True) for k, v in gen.weights.items()}
            z = rng.standard_normal((B, cfgG.z_dim))
            img = synthesize(gen, map_latent(gen, z, params), params)
            g_loss = T.softplus(-disc_forward(disc, img)).mean()
            g = T.backward(g_loss)
            g_opt.step({k: g.get(p, np.zeros(p.shape)) for k, p in params.items()})

            _check_finite({"g_loss": g_loss.item(), "d_loss": d_loss, "r1": r1}, step,
                          {"generator": gen}, dump_path)
            logger.record(step, g_loss=g_loss.item(), d_loss=d_loss, rgb=0.0, ld=0.0, r1=r1)
            if checkpoint_path is not None and (step + 1) % checkpoint_every == 0:
                save_checkpoint(gen, checkpoint_path)
    finally:
        logger.close()
    return gen


def distill_student(teacher: Generator, student: Generator, disc: Discriminator, direction_set: DirectionSet,
                    cfg: DistillConfig, *, steps: int | None = None, data_seed: int | None = None,
                    log_path=None, dump_path=None, history: list | None = None) -> Generator:
    """Train a pruned student toward the teacher; returns a new Generator.

    Latents come from the teacher's mapping network; the student's synthesis
    weights are the only generator parameters updated.
    """
    if cfg.lambda_lpips != 0:
        raise ValueError("lambda_lpips must be 0")
    if student.config.w_dim != teacher.config.w_dim:
        raise T.ShapeError("student and teacher w_dim differ")
    student = student.copy()
    student.check()
    steps = cfg.iterations if steps is None else steps
    rng = np.random.default_rng([cfg.seed, 2])
    data_seed = cfg.seed if data_seed is None else data_seed
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    trainable = {k: v for k, v in student.weights.items() if not k.startswith("mapping.")}
    g_opt = Adam(trainable, cfg.learning_rate, betas, lr_mult=equalized_lr_mults(trainable))
    d_opt = Adam(disc.weights, cfg.learning_rate, betas, lr_mult=equalized_lr_mults(disc.weights))
    B = cfg.batch_size
    res = teacher.config.resolution
    use_ld = cfg.lambda_ld > 0
    logger = _JsonlLog(log_path)
    try:
        for step in range(steps):
            with T.no_grad():
                w = map_latent(teacher, rng.standard_normal((B, teacher.config.z_dim))).data
            both = np.concatenate([w, perturbation_batch(direction_set, w, cfg.alpha, rng)]) if use_ld else w
            d_loss = r1 = 0.0
            if cfg.lambda_gan > 0:
                real = dataset_batch(data_seed, step * B, B, res)
                with T.no_grad():
                    fake = synthesize(student, w).data
                d_loss, r1 = _disc_step(disc, d_opt, real, fake, step, cfg)

            with T.no_grad():
                t_img, t_feat = synthesize(teacher, both, return_features=True)
            params = {k: T.Tensor(v, requires_grad=k in trainable) for k, v in student.weights.items()}
            s_img, s_feat = synthesize(student, both, params, return_features=True)
            s_base = s_img[:B] if use_ld else s_img
            terms = {"rgb": loss_rgb(s_base, t_img.data[:B])}
            if use_ld:
                terms["ld"] = ld_from_features(t_feat.data[:B], t_feat.data[B:], s_feat[:B], s_feat[B:])
            if cfg.lambda_gan > 0:
                terms["gan"] = T.softplus(-disc_forward(disc, s_base)).mean()
            lam = {"rgb": cfg.lambda_rgb, "ld": cfg.lambda_ld, "gan": cfg.lambda_gan}
            total = None
            for k, v in terms.items():
                total = v * lam[k] if total is None else total + v * lam[k]
            if history is not None:
                history.append({k: v.item() for k, v in terms.items()})
            if total.requires_grad:
                g = T.backward(total)
                g_opt.step({k: g.get(params[k], np.zeros(params[k].shape)) for k in trainable})

            vals = {k: v.item() for k, v in terms.items()}
            _check_finite({**vals, "d_loss": d_loss, "r1": r1}, step, {"generator": student}, dump_path)
            logger.record(step, g_loss=vals.get("gan", 0.0), d_loss=d_loss, rgb=vals["rgb"],
                          ld=vals.get("ld", 0.0), r1=r1)
    finally:
        logger.close()
    return student


def final_objective(teacher: Generator, student: Generator, disc: Discriminator, direction_set: DirectionSet,
                    cfg: DistillConfig, w: np.ndarray, rng_seed: int, params=None) -> tuple[T.Tensor, dict]:
    """Weighted student objective on one latent batch, plus its unweighted terms."""
    rng = np.random.default_rng(rng_seed)
    B = len(w)
    both = np.concatenate([w, perturbation_batch(direction_set, w, cfg.alpha, rng)])
    with T.no_grad():
        t_img, t_feat = synthesize(teacher, both, return_features=True)
    s_img, s_feat = synthesize(student, both, params, return_features=True)
    terms = {"gan": T.softplus(-disc_forward(disc, s_img[:B])).mean(),
             "rgb": loss_rgb(s_img[:B], t_img.data[:B]),
             "ld": ld_from_features(t_feat.data[:B], t_feat.data[B:], s_feat[:B], s_feat[B:])}
    total = (terms["gan"] * cfg.lambda_gan + terms["rgb"] * cfg.lambda_rgb + terms["ld"] * cfg.lambda_ld)
    return total, terms
