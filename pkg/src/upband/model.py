"""Generator and discriminator networks.

The generator is a bidirectional transformer encoder mapping the 257
conditioning bins of each frame to the 256 missing upper bins. The
discriminators are five spectrally-normalized convolutional stacks over
full 513-bin frames; each one partitions its channels into a different
number of groups so it specializes on a different frequency granularity.

The paper-level constants (6 transformer layers, group counts 1/4/16/64/256,
kernel 4 stride 2) live in the config defaults; everything the source
material leaves open (widths, activations, norm placement) is a config
knob with canonical transformer defaults.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ShapeError
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class GeneratorConfig:
    n_layers: int = 6
    d_model: int = 512
    n_heads: int = 8
    d_ff: int = 2048
    in_bins: int = 257
    out_bins: int = 256
    max_frames: int = 4096

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"GeneratorConfig: d_model={self.d_model} not divisible by "
                              f"n_heads={self.n_heads}")
        if self.in_bins + self.out_bins != 513:
            raise ConfigError(f"GeneratorConfig: in_bins + out_bins must be 513, "
                              f"got {self.in_bins}+{self.out_bins}")


@dataclass
class DiscriminatorConfig:
    group_counts: tuple = (1, 4, 16, 64, 256)
    channels: int = 512
    n_layers: int = 4
    kernel: int = 4
    stride: int = 2

    def __post_init__(self):
        self.group_counts = tuple(int(g) for g in self.group_counts)
        for g in self.group_counts:
            if self.channels % g != 0:
                raise ConfigError(f"DiscriminatorConfig: channels={self.channels} not divisible "
                                  f"by group count {g}")

    @property
    def n_discriminators(self) -> int:
        return len(self.group_counts)


class SpectralNormState:
    """Persisted left-singular-vector estimates, one unit vector per weight."""

    def __init__(self):
        self.u: dict[str, np.ndarray] = {}

    def init(self, name: str, rows: int, rng: np.random.Generator) -> None:
        u = rng.normal(size=rows)
        self.u[name] = (u / np.linalg.norm(u)).astype(np.float32)

    def copy(self) -> "SpectralNormState":
        out = SpectralNormState()
        out.u = {k: v.copy() for k, v in self.u.items()}
        return out


# Discriminator spectra stay tightly clustered during training, so a
# single power iteration per forward lags the optimizer and can misjudge
# sigma by 30% or more. A short fixed budget keeps the estimate within a
# few percent of the dense-SVD value at negligible matvec cost.
POWER_ITERS = 20


def spectral_normalize(weight: Tensor, state: SpectralNormState, name: str,
                       update: bool = True, power_iters: int = POWER_ITERS) -> Tensor:
    """Divide a weight by its power-iteration largest-singular-value estimate.

    The weight is viewed as 2-D with output channels first. Every call
    advances a working copy of the persisted u vector by ``power_iters``
    iterations before sigma is read off; with ``update`` set (training)
    the advanced vector is stored back. Gradient flows through sigma
    with u and v treated as constants (standard practice).
    """
    w2 = weight.data.reshape(weight.shape[0], -1)
    u = state.u[name].astype(w2.dtype)
    v = None
    for _ in range(power_iters):
        v = w2.T @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = w2 @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    if update:
        state.u[name] = u.astype(np.float32)
    sigma = float(u @ w2 @ v)
    sigma = max(sigma, 1e-12)
    out = weight.data / sigma

    uvT = np.outer(u, v).reshape(weight.shape)

    def bwd(g):
        coeff = float(np.sum(g * weight.data)) / (sigma * sigma)
        return ((g / sigma - coeff * uvT).astype(weight.dtype),)

    return tt._result(out.astype(weight.dtype), (weight,), bwd)


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _param(params, name, array):
    params[name] = Tensor(array, requires_grad=True)


def init_parameters(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                    seed: int) -> tuple[dict[str, Tensor], SpectralNormState]:
    """Deterministic fan-in-scaled uniform init; biases and LN shifts zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    d, dff = gen_cfg.d_model, gen_cfg.d_ff

    _param(params, "gen.in.w", _uniform(rng, (gen_cfg.in_bins, d), gen_cfg.in_bins))
    _param(params, "gen.in.b", np.zeros(d, dtype=np.float32))
    for i in range(gen_cfg.n_layers):
        p = f"gen.L{i}"
        _param(params, f"{p}.ln1.g", np.ones(d, dtype=np.float32))
        _param(params, f"{p}.ln1.b", np.zeros(d, dtype=np.float32))
        for nm in ("wq", "wk", "wv", "wo"):
            _param(params, f"{p}.attn.{nm}", _uniform(rng, (d, d), d))
        for nm in ("bq", "bk", "bv", "bo"):
            _param(params, f"{p}.attn.{nm}", np.zeros(d, dtype=np.float32))
        _param(params, f"{p}.ln2.g", np.ones(d, dtype=np.float32))
        _param(params, f"{p}.ln2.b", np.zeros(d, dtype=np.float32))
        _param(params, f"{p}.ff.w1", _uniform(rng, (d, dff), d))
        _param(params, f"{p}.ff.b1", np.zeros(dff, dtype=np.float32))
        _param(params, f"{p}.ff.w2", _uniform(rng, (dff, d), dff))
        _param(params, f"{p}.ff.b2", np.zeros(d, dtype=np.float32))
    _param(params, "gen.lnf.g", np.ones(d, dtype=np.float32))
    _param(params, "gen.lnf.b", np.zeros(d, dtype=np.float32))
    _param(params, "gen.out.w", _uniform(rng, (d, gen_cfg.out_bins), d))
    _param(params, "gen.out.b", np.zeros(gen_cfg.out_bins, dtype=np.float32))

    sn = SpectralNormState()
    C, k = disc_cfg.channels, disc_cfg.kernel
    for j, g in enumerate(disc_cfg.group_counts):
        p = f"disc{j}"
        _param(params, f"{p}.proj.w", _uniform(rng, (C, 513, 1), 513))
        _param(params, f"{p}.proj.b", np.zeros(C, dtype=np.float32))
        sn.init(f"{p}.proj.w", C, rng)
        for i in range(1, disc_cfg.n_layers + 1):
            cin_g = C // g
            _param(params, f"{p}.conv{i}.w", _uniform(rng, (C, cin_g, k), cin_g * k))
            _param(params, f"{p}.conv{i}.b", np.zeros(C, dtype=np.float32))
            sn.init(f"{p}.conv{i}.w", C, rng)
        _param(params, f"{p}.out.w", _uniform(rng, (1, C, 1), C))
        _param(params, f"{p}.out.b", np.zeros(1, dtype=np.float32))
        sn.init(f"{p}.out.w", 1, rng)
    # converge the singular-vector estimates before the first step
    with tt.no_grad():
        for name in sn.u:
            spectral_normalize(params[name], sn, name, update=True)
    return params, sn


def generator_parameter_names(params) -> list[str]:
    return [k for k in params if k.startswith("gen.")]


def discriminator_parameter_names(params) -> list[str]:
    return [k for k in params if k.startswith("disc")]


def parameter_count(params, prefix: str = "") -> int:
    return sum(t.size for k, t in params.items() if k.startswith(prefix))


# ---------------------------------------------------------------------------
# generator


def sinusoidal_positions(n_frames: int, d_model: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((n_frames, d_model), dtype=np.float32)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def generator_forward(params: dict[str, Tensor], cfg: GeneratorConfig, low: Tensor) -> Tensor:
    """Map log magnitudes [T, in_bins] (or [B, T, in_bins]) to [T, out_bins].

    Attention is bidirectional (no causal mask); every output frame may
    depend on every input frame.
    """
    squeeze = low.ndim == 2
    if squeeze:
        low = tt.reshape(low, (1,) + low.shape)
    B, T, bins = low.shape
    if bins != cfg.in_bins:
        raise ShapeError(f"generator_forward: expected {cfg.in_bins} input bins, got {bins}")
    if T > cfg.max_frames:
        raise ShapeError(f"generator_forward: {T} frames exceeds positional horizon "
                         f"{cfg.max_frames}")
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)

    h = tt.linear(low, params["gen.in.w"], params["gen.in.b"])
    h = tt.add_constant(h, sinusoidal_positions(T, d)[None])

    for i in range(cfg.n_layers):
        p = f"gen.L{i}"
        a = tt.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        q = tt.linear(a, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"])
        k = tt.linear(a, params[f"{p}.attn.wk"], params[f"{p}.attn.bk"])
        v = tt.linear(a, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"])
        q = tt.transpose(tt.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        k = tt.transpose(tt.reshape(k, (B, T, H, dh)), (0, 2, 1, 3))
        v = tt.transpose(tt.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
        scores = tt.mul(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), scale)
        attn = tt.softmax(scores, axis=-1)
        ctx = tt.matmul(attn, v)
        ctx = tt.reshape(tt.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        h = tt.add(h, tt.linear(ctx, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"]))

        f = tt.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        f = tt.gelu(tt.linear(f, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"]))
        f = tt.linear(f, params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
        h = tt.add(h, f)

    h = tt.layer_norm(h, params["gen.lnf.g"], params["gen.lnf.b"])
    out = tt.linear(h, params["gen.out.w"], params["gen.out.b"])
    if squeeze:
        out = tt.reshape(out, (T, cfg.out_bins))
    return out


def make_generator_fn(params: dict[str, Tensor], cfg: GeneratorConfig):
    """Inference closure: numpy [T, in_bins] -> numpy [T, out_bins], chunked."""

    def fn(low_log_mag: np.ndarray) -> np.ndarray:
        chunks = []
        with tt.no_grad():
            for start in range(0, low_log_mag.shape[0], cfg.max_frames):
                piece = Tensor(low_log_mag[start:start + cfg.max_frames])
                chunks.append(generator_forward(params, cfg, piece).data)
        return np.concatenate(chunks, axis=0)

    return fn


# ---------------------------------------------------------------------------
# discriminators


def discriminator_forward(params: dict[str, Tensor], cfg: DiscriminatorConfig,
                          full: Tensor, d_index: int, sn_state: SpectralNormState,
                          update_sn: bool = True) -> tuple[Tensor, list[Tensor]]:
    """One grouped discriminator over full-band frames.

    ``full`` is [T, 513] or [B, T, 513]. An ungrouped 1x1 projection maps
    the 513 bins to the channel width (513 is not divisible by the group
    counts), then ``n_layers`` grouped stride-2 convolutions, then a 1x1
    map to per-window logits. Spectral normalization is applied to every
    weight. Features are the grouped-layer activations, in order.
    """
    if not 0 <= d_index < cfg.n_discriminators:
        raise ConfigError(f"discriminator_forward: d_index {d_index} out of range "
                          f"[0, {cfg.n_discriminators})")
    squeeze = full.ndim == 2
    if squeeze:
        full = tt.reshape(full, (1,) + full.shape)
    if full.shape[-1] != 513:
        raise ShapeError(f"discriminator_forward: expected 513 bins, got {full.shape[-1]}")
    x = tt.transpose(full, (0, 2, 1))  # [B, 513, T]
    g = cfg.group_counts[d_index]
    p = f"disc{d_index}"

    w = spectral_normalize(params[f"{p}.proj.w"], sn_state, f"{p}.proj.w", update=update_sn)
    h = tt.leaky_relu(tt.conv1d_grouped(x, w, params[f"{p}.proj.b"]), LEAKY_SLOPE)

    features: list[Tensor] = []
    for i in range(1, cfg.n_layers + 1):
        w = spectral_normalize(params[f"{p}.conv{i}.w"], sn_state, f"{p}.conv{i}.w",
                               update=update_sn)
        h = tt.leaky_relu(
            tt.conv1d_grouped(h, w, params[f"{p}.conv{i}.b"], stride=cfg.stride,
                              padding=1, groups=g), LEAKY_SLOPE)
        features.append(h)

    w = spectral_normalize(params[f"{p}.out.w"], sn_state, f"{p}.out.w", update=update_sn)
    logits = tt.conv1d_grouped(h, w, params[f"{p}.out.b"])  # [B, 1, T']
    logits = tt.transpose(logits, (0, 2, 1))                # [B, T', 1]
    if squeeze:
        logits = tt.reshape(logits, logits.shape[1:])
    return logits, features


def all_discriminators_forward(params, cfg: DiscriminatorConfig, full: Tensor,
                               sn_state: SpectralNormState, update_sn: bool = True):
    """Run every discriminator on the same input; independent logits/features."""
    logits, feats = [], []
    for j in range(cfg.n_discriminators):
        lg, ft = discriminator_forward(params, cfg, full, j, sn_state, update_sn=update_sn)
        logits.append(lg)
        feats.append(ft)
    return logits, feats
