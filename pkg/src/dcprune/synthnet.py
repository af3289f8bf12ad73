"""Miniature StyleGAN2-style generator: mapping MLP plus skip-RGB synthesis."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 2
    base_resolution: int = 4
    resolutions: tuple = (4, 8, 16, 32)
    channels_per_resolution: tuple = (64, 64, 32, 16)
    noise_enabled: bool = False
    truncation_psi: float = 1.0
    # test hooks: demodulate=False / lrelu_slope=1.0 give (piecewise) linear fixtures
    demodulate: bool = True
    lrelu_slope: float = 0.2
    noise_strength: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "channels_per_resolution", tuple(int(c) for c in self.channels_per_resolution))
        self.validate()

    def validate(self) -> None:
        res, ch = self.resolutions, self.channels_per_resolution
        if len(res) != len(ch):
            raise ValueError(f"{len(res)} resolutions but {len(ch)} channel counts")
        if not res or res[0] != self.base_resolution:
            raise ValueError(f"first resolution must be base_resolution={self.base_resolution}")
        for a, b in zip(res, res[1:]):
            if b != 2 * a:
                raise ValueError(f"resolution {b} does not double {a}")
        if min(ch) < 1:
            raise ValueError("channel counts must be >= 1")
        if self.z_dim < 1 or self.w_dim < 1 or self.mapping_layers < 1:
            raise ValueError("z_dim, w_dim and mapping_layers must be >= 1")
        if not 0.0 < self.truncation_psi <= 1.0:
            raise ValueError(f"truncation_psi must lie in (0, 1], got {self.truncation_psi}")

    @property
    def resolution(self) -> int:
        return self.resolutions[-1]

    def block_in_channels(self, r: int) -> int:
        i = self.resolutions.index(r)
        return self.channels_per_resolution[0] if i == 0 else self.channels_per_resolution[i - 1]

    def block_channels(self, r: int) -> int:
        return self.channels_per_resolution[self.resolutions.index(r)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["channels_per_resolution"] = list(self.channels_per_resolution)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: GeneratorConfig) -> dict[str, tuple]:
    """Canonical tensor names and shapes, in serialization order."""
    shapes: dict[str, tuple] = {}
    for i in range(config.mapping_layers):
        fan_in = config.z_dim if i == 0 else config.w_dim
        shapes[f"mapping.{i}.weight"] = (config.w_dim, fan_in)
        shapes[f"mapping.{i}.bias"] = (config.w_dim,)
    r0 = config.base_resolution
    shapes["const"] = (config.channels_per_resolution[0], r0, r0)
    for r in config.resolutions:
        cin, cout = config.block_in_channels(r), config.block_channels(r)
        shapes[f"block.{r}.affine.weight"] = (cin, config.w_dim)
        shapes[f"block.{r}.affine.bias"] = (cin,)
        shapes[f"block.{r}.conv.weight"] = (cout, cin, 3, 3)
        shapes[f"block.{r}.conv.bias"] = (cout,)
        shapes[f"block.{r}.torgb_affine.weight"] = (cout, config.w_dim)
        shapes[f"block.{r}.torgb_affine.bias"] = (cout,)
        shapes[f"block.{r}.torgb.weight"] = (3, cout, 1, 1)
        shapes[f"block.{r}.torgb.bias"] = (3,)
    return shapes


@dataclass
class Generator:
    """Architecture plus named float64 weights (the checkpointed state)."""

    config: GeneratorConfig
    weights: dict = field(default_factory=dict)

    def copy(self) -> "Generator":
        return Generator(self.config, {k: v.copy() for k, v in self.weights.items()})

    def check(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ShapeError(f"weight names differ from config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(self.weights[name].shape) != shape:
                raise ShapeError(f"{name}: shape {tuple(self.weights[name].shape)} != expected {shape}")


def init_generator(config: GeneratorConfig, seed: int) -> Generator:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(config).items():
        if name == "const":
            weights[name] = rng.standard_normal(shape)
        elif name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            weights[name] = rng.standard_normal(shape) / np.sqrt(fan_in)
        elif ".affine." in name or ".torgb_affine." in name:
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    return Generator(config, weights)


def _params(gen: Generator, params: Mapping | None) -> Mapping:
    return gen.weights if params is None else params


def map_latent(gen: Generator, z, params: Mapping | None = None) -> Tensor:
    """f: Z -> W. ``z`` is [z_dim] or [B, z_dim]."""
    p = _params(gen, params)
    cfg = gen.config
    z = T.as_tensor(z)
    if z.shape[-1] != cfg.z_dim:
        raise ShapeError(f"map_latent: z has {z.shape[-1]} entries, expected z_dim={cfg.z_dim}")
    x = z
    for i in range(cfg.mapping_layers):
        x = T.linear(x, p[f"mapping.{i}.weight"], p[f"mapping.{i}.bias"])
        if i < cfg.mapping_layers - 1:
            x = T.leaky_relu(x, 0.2)
    return x


def truncate(w, w_mean, psi: float):
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"psi must lie in [0, 1], got {psi}")
    w, w_mean = np.asarray(w, dtype=np.float64), np.asarray(w_mean, dtype=np.float64)
    return w_mean + psi * (w - w_mean)


def synthesize(gen: Generator, w, params: Mapping | None = None, *, return_features: bool = False,
               noise_rng: np.random.Generator | None = None):
    """g: W -> image. ``w`` is [w_dim] or [B, w_dim]; image is [(B,) 3, H, W].

    With ``return_features`` also returns the final block's activations
    (the pre-RGB feature map).
    """
    p = _params(gen, params)
    cfg = gen.config
    w = T.as_tensor(w)
    if w.shape[-1] != cfg.w_dim:
        raise ShapeError(f"synthesize: w has {w.shape[-1]} entries, expected w_dim={cfg.w_dim}")
    batched = w.ndim == 2
    const = T.as_tensor(p["const"])
    x = T.reshape(const, (1,) + const.shape) * np.ones((w.shape[0], 1, 1, 1)) if batched else const
    rgb = None
    for i, r in enumerate(cfg.resolutions):
        if i > 0:
            x = T.upsample2x(x)
        style = T.linear(w, p[f"block.{r}.affine.weight"], p[f"block.{r}.affine.bias"])
        x = T.modulated_conv2d(x, p[f"block.{r}.conv.weight"], style, demodulate=cfg.demodulate)
        if cfg.noise_enabled:
            if noise_rng is None:
                raise ValueError("noise_enabled requires noise_rng")
            x = x + cfg.noise_strength * noise_rng.standard_normal(x.shape[:-3] + (1,) + x.shape[-2:])
        x = x + T.reshape(T.as_tensor(p[f"block.{r}.conv.bias"]), (-1, 1, 1))
        x = T.leaky_relu(x, cfg.lrelu_slope)
        rstyle = T.linear(w, p[f"block.{r}.torgb_affine.weight"], p[f"block.{r}.torgb_affine.bias"])
        y = T.modulated_conv2d(x, p[f"block.{r}.torgb.weight"], rstyle, demodulate=False)
        y = y + T.reshape(T.as_tensor(p[f"block.{r}.torgb.bias"]), (-1, 1, 1))
        rgb = y if rgb is None else T.upsample2x(rgb) + y
    return (rgb, x) if return_features else rgb


def sample_w(gen: Generator, n: int, seed: int, w_mean=None, psi: float | None = None) -> np.ndarray:
    """n latents w = f(z), z ~ N(0, 1), truncated toward ``w_mean`` when psi < 1.

    ``psi`` defaults to the config's truncation_psi.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, gen.config.z_dim))
    with T.no_grad():
        w = map_latent(gen, z).data
    psi = gen.config.truncation_psi if psi is None else psi
    if psi < 1.0:
        if w_mean is None:
            raise ValueError("truncation_psi < 1 requires w_mean")
        w = truncate(w, w_mean, psi)
    return w


def count_params(config: GeneratorConfig) -> int:
    """Every float in the checkpoint, learned constant included."""
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def conv_flops(c_in: int, c_out: int, k: int, res: int) -> int:
    return 2 * c_in * c_out * k * k * res * res


def count_flops(config: GeneratorConfig) -> int:
    """2 x multiply-accumulates of one image through mapping + synthesis.

    Counts the mapping layers, style affines, 3x3 convs and toRGB convs.
    Bias adds, modulation/demodulation scaling and upsampling are ignored.
    """
    total = 0
    for i in range(config.mapping_layers):
        fan_in = config.z_dim if i == 0 else config.w_dim
        total += 2 * fan_in * config.w_dim
    for r in config.resolutions:
        cin, cout = config.block_in_channels(r), config.block_channels(r)
        total += 2 * config.w_dim * cin + 2 * config.w_dim * cout
        total += conv_flops(cin, cout, 3, r) + conv_flops(cout, 3, 1, r)
    return total
