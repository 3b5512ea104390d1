"""Adversarial training loop.

Per step: one discriminator update (hinge loss on real vs detached fake),
then one generator update (hinge adversarial term plus weighted feature
matching), both with Adam at the published learning rates and betas.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as tt
from .errors import DataError, NumericError, ShapeError
from .model import (DiscriminatorConfig, GeneratorConfig, SpectralNormState,
                    all_discriminators_forward, discriminator_parameter_names,
                    generator_forward, generator_parameter_names, init_parameters)
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    fm_weight: float = 10.0
    batch_frames: int = 128
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    checkpoint_interval: int = 500
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        from .errors import ConfigError
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"TrainConfig: betas ({self.beta1}, {self.beta2}) must lie in [0, 1)")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("TrainConfig: learning rates must be positive")


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adam_step(params: dict[str, Tensor], names, state: AdamState,
              lr: float, beta1: float, beta2: float, eps: float) -> None:
    """Bias-corrected Adam update over ``names``; with beta1=0 the first
    moment equals the current gradient exactly."""
    state.t += 1
    t = state.t
    for name in names:
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# losses


def hinge_d_loss(real_logits: list[Tensor], fake_logits: list[Tensor]) -> Tensor:
    """max(0, 1 - D(real)) + max(0, 1 + D(fake)), averaged over patches
    and discriminators."""
    if not real_logits or len(real_logits) != len(fake_logits):
        raise ShapeError("hinge_d_loss: need matching non-empty logit lists")
    total = None
    for r, f in zip(real_logits, fake_logits):
        term = tt.add(tt.tmean(tt.max_with_scalar(tt.sub(1.0, r), 0.0)),
                      tt.tmean(tt.max_with_scalar(tt.add(1.0, f), 0.0)))
        total = term if total is None else tt.add(total, term)
    return tt.mul(total, 1.0 / len(real_logits))


def hinge_g_loss(fake_logits: list[Tensor]) -> Tensor:
    """-D(fake), averaged over patches and discriminators."""
    if not fake_logits:
        raise ShapeError("hinge_g_loss: empty logit list")
    total = None
    for f in fake_logits:
        term = tt.neg(tt.tmean(f))
        total = term if total is None else tt.add(total, term)
    return tt.mul(total, 1.0 / len(fake_logits))


def feature_matching_loss(real_feats, fake_feats) -> Tensor:
    """Mean absolute difference over all hidden layers of all
    discriminators (the logits layer is excluded by construction).

    ``real_feats`` entries may be numpy arrays (already detached)."""
    if len(real_feats) != len(fake_feats):
        raise ShapeError(f"feature_matching_loss: {len(real_feats)} vs {len(fake_feats)} "
                         "discriminators")
    terms = []
    for rf, ff in zip(real_feats, fake_feats):
        if len(rf) != len(ff):
            raise ShapeError("feature_matching_loss: per-discriminator layer counts differ")
        for r, f in zip(rf, ff):
            r_const = Tensor(r.data if isinstance(r, Tensor) else r)
            terms.append(tt.tmean(tt.tabs(tt.sub(f, r_const))))
    total = terms[0]
    for term in terms[1:]:
        total = tt.add(total, term)
    return tt.mul(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# state and steps


@dataclass
class TrainState:
    params: dict[str, Tensor]
    sn: SpectralNormState
    adam_g: AdamState
    adam_d: AdamState
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    train_cfg: TrainConfig
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def fresh(cls, gen_cfg, disc_cfg, train_cfg) -> "TrainState":
        params, sn = init_parameters(gen_cfg, disc_cfg, train_cfg.seed)
        return cls(params=params, sn=sn, adam_g=AdamState(), adam_d=AdamState(),
                   gen_cfg=gen_cfg, disc_cfg=disc_cfg, train_cfg=train_cfg,
                   rng=np.random.default_rng(train_cfg.seed))


@dataclass
class StepReport:
    step: int
    d_loss: float
    g_adv: float
    g_fm: float
    seconds: float

    def log_line(self) -> str:
        # no timing column: the log must be bit-identical across runs of
        # the same seed
        return f"{self.step}\t{self.d_loss:.6f}\t{self.g_adv:.6f}\t{self.g_fm:.6f}"


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def _clip_grads(params, names, limit: float):
    if limit <= 0:
        return
    sq = 0.0
    for n in names:
        g = params[n].grad
        if g is not None:
            sq += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(sq)
    if norm > limit:
        scale = limit / norm
        for n in names:
            if params[n].grad is not None:
                params[n].grad = params[n].grad * scale


def train_step(state: TrainState, low: np.ndarray, high_real: np.ndarray) -> StepReport:
    """One discriminator update followed by one generator update.

    ``low`` is [B, T, 257] conditioning log magnitudes, ``high_real`` the
    matching [B, T, 256] ground-truth upper bins.
    """
    if low.ndim != 3 or high_real.ndim != 3 or low.shape[:2] != high_real.shape[:2]:
        raise ShapeError(f"train_step: inconsistent batch shapes {low.shape} / {high_real.shape}")
    t0 = time.perf_counter()
    cfg = state.train_cfg
    params = state.params
    gen_names = generator_parameter_names(params)
    disc_names = discriminator_parameter_names(params)
    real_full = np.concatenate([low, high_real], axis=2)

    # -- discriminator update (generator frozen, fake detached)
    with tt.no_grad():
        fake = generator_forward(params, state.gen_cfg, Tensor(low)).data
    fake_full = np.concatenate([low, fake], axis=2)
    tt.reset_tape()
    real_logits, _ = all_discriminators_forward(params, state.disc_cfg, Tensor(real_full),
                                                state.sn, update_sn=True)
    fake_logits, _ = all_discriminators_forward(params, state.disc_cfg, Tensor(fake_full),
                                                state.sn, update_sn=False)
    d_loss = hinge_d_loss(real_logits, fake_logits)
    tt.backward(d_loss)
    _clip_grads(params, disc_names, cfg.grad_clip)
    adam_step(params, disc_names, state.adam_d, cfg.lr_d, cfg.beta1, cfg.beta2, cfg.eps)
    _zero_grads(params)

    # -- generator update against the freshly updated discriminators
    tt.reset_tape()
    fake_t = generator_forward(params, state.gen_cfg, Tensor(low))
    fake_full_t = tt.concat([Tensor(low), fake_t], axis=2)
    fake_logits2, fake_feats = all_discriminators_forward(params, state.disc_cfg, fake_full_t,
                                                          state.sn, update_sn=False)
    with tt.no_grad():
        _, real_feats = all_discriminators_forward(params, state.disc_cfg, Tensor(real_full),
                                                   state.sn, update_sn=False)
    g_adv = hinge_g_loss(fake_logits2)
    g_fm = feature_matching_loss(real_feats, fake_feats)
    g_loss = tt.add(g_adv, tt.mul(g_fm, cfg.fm_weight)) if cfg.fm_weight else g_adv
    tt.backward(g_loss)
    _clip_grads(params, gen_names, cfg.grad_clip)
    adam_step(params, gen_names, state.adam_g, cfg.lr_g, cfg.beta1, cfg.beta2, cfg.eps)
    _zero_grads(params)

    state.step += 1
    report = StepReport(step=state.step, d_loss=d_loss.item(), g_adv=g_adv.item(),
                        g_fm=g_fm.item(), seconds=time.perf_counter() - t0)
    if not all(np.isfinite([report.d_loss, report.g_adv, report.g_fm])):
        grad_note = {n: float(np.max(np.abs(params[n].grad))) for n in list(params)[:3]
                     if params[n].grad is not None}
        raise NumericError(f"train_step: non-finite loss at step {report.step}: "
                           f"d={report.d_loss} g_adv={report.g_adv} g_fm={report.g_fm} "
                           f"grad_norms={grad_note}")
    return report


# ---------------------------------------------------------------------------
# batching over training examples


def sample_batch(dataset, rng: np.random.Generator, batch_size: int, batch_frames: int):
    """Cut ``batch_size`` random fixed-length frame windows from the dataset.

    Short examples are tiled to reach the window length; selection and
    offsets come from the caller's RNG so runs are reproducible.
    """
    lows, highs = [], []
    for _ in range(batch_size):
        ex = dataset[int(rng.integers(0, len(dataset)))]
        frames = ex.low_log_mag.shape[0]
        if frames >= batch_frames:
            off = int(rng.integers(0, frames - batch_frames + 1))
            lo = ex.low_log_mag[off:off + batch_frames]
            hi = ex.high_log_mag_real[off:off + batch_frames]
        else:
            reps = -(-batch_frames // frames)
            lo = np.tile(ex.low_log_mag, (reps, 1))[:batch_frames]
            hi = np.tile(ex.high_log_mag_real, (reps, 1))[:batch_frames]
        lows.append(lo)
        highs.append(hi)
    return (np.stack(lows).astype(np.float32), np.stack(highs).astype(np.float32))


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"param/{name}"] = p.data
    for name, u in state.sn.u.items():
        tensors[f"sn.u/{name}"] = u
    for tag, adam in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
        for name, m in adam.m.items():
            tensors[f"{tag}.m/{name}"] = m
        for name, v in adam.v.items():
            tensors[f"{tag}.v/{name}"] = v
        tensors[f"{tag}.t"] = np.array(adam.t, dtype=np.int64)
    tensors["step"] = np.array(state.step, dtype=np.int64)
    rng_state = json.dumps(state.rng.bit_generator.state).encode("utf-8")
    tensors["rng"] = np.frombuffer(rng_state, dtype=np.uint8)
    # digest covers architecture only; training hyperparameters may differ
    # between the run that wrote the checkpoint and the one reading it
    digest = ckpt.config_digest(state.gen_cfg, state.disc_cfg)
    ckpt.save_tensors(path, tensors, digest)


def load_checkpoint(path, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                    train_cfg: TrainConfig) -> TrainState:
    digest = ckpt.config_digest(gen_cfg, disc_cfg)
    tensors = ckpt.load_tensors(path, expected_digest=digest)
    state = TrainState.fresh(gen_cfg, disc_cfg, train_cfg)
    for name, p in state.params.items():
        p.data = tensors[f"param/{name}"].astype(p.dtype)
    for name in list(state.sn.u):
        state.sn.u[name] = tensors[f"sn.u/{name}"]
    for tag, adam in (("adam_g", state.adam_g), ("adam_d", state.adam_d)):
        adam.t = int(tensors[f"{tag}.t"].reshape(-1)[0])
        for key, arr in tensors.items():
            if key.startswith(f"{tag}.m/"):
                adam.m[key[len(tag) + 3:]] = arr.copy()
            elif key.startswith(f"{tag}.v/"):
                adam.v[key[len(tag) + 3:]] = arr.copy()
    state.step = int(tensors["step"].reshape(-1)[0])
    rng_state = json.loads(bytes(tensors["rng"]).decode("utf-8"))
    state.rng.bit_generator.state = rng_state
    return state


def train_loop(dataset, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
               train_cfg: TrainConfig, run_dir, resume_from=None,
               log_stream=None) -> Path:
    """Run the loop to ``max_steps``; returns the final checkpoint path.

    Writes ``loss.log`` (one tab-separated line per step) and periodic
    checkpoints into ``run_dir``.
    """
    if not dataset:
        raise DataError("train_loop: dataset is empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from, gen_cfg, disc_cfg, train_cfg)
    else:
        state = TrainState.fresh(gen_cfg, disc_cfg, train_cfg)
    log_path = run_dir / "loss.log"
    final_path = run_dir / "checkpoint_final.nug"
    with open(log_path, "a") as log_file:
        while state.step < train_cfg.max_steps:
            low, high = sample_batch(dataset, state.rng, train_cfg.batch_size,
                                     train_cfg.batch_frames)
            report = train_step(state, low, high)
            line = report.log_line()
            log_file.write(line + "\n")
            log_file.flush()
            if log_stream is not None:
                log_stream.append(report)
            if train_cfg.checkpoint_interval > 0 and \
                    state.step % train_cfg.checkpoint_interval == 0:
                save_checkpoint(run_dir / f"checkpoint_{state.step:07d}.nug", state)
    save_checkpoint(final_path, state)
    return final_path
