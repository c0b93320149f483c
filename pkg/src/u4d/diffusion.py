"""Diffusion engine: schedule, losses, sampler, optimizer, trainer.

Stage 1 learns to generate the sparse uncertain-region view together with
its validity mask; stage 2 learns the full scene conditioned on that view
(depth, intensity, mask stacked to three channels). Sampling chains the
two: a stage-1 draw becomes the conditioning tensor for stage 2, which is
then decoded back to range images and point clouds.

All stochastic choices flow through injected numpy Generators. Training
time t is continuous on [0, 1].
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamSet, Tape, Tensor, bce_with_logits, mse, save_checkpoint
from .errors import (
    ConfigError,
    DataError,
    InsufficientDataError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)
from .most import GateRecord, denoiser_forward, gate_regularization, write_gate_csv
from .range_geometry import RangeImage, decode_sequence, encode_sequence, project_points, unproject
from .seeding import subsystem_rng
from .uncertainty import build_uncertainty_view, entropy_map, select_topk

# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class CosineSchedule:
    """Squared-cosine signal level, normalized so alpha_bar(0) = 1."""

    s: float = 0.008
    floor: float = 1e-8

    def alpha_bar(self, t) -> float:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise DataError(f"diffusion time {t} outside [0, 1]")
        def f(u):
            return math.cos((u + self.s) / (1.0 + self.s) * math.pi / 2.0) ** 2
        return min(1.0, max(self.floor, f(t) / f(0.0)))

    def posterior_variance(self, t, t_prev) -> float:
        a_t, a_p = self.alpha_bar(t), self.alpha_bar(t_prev)
        beta_step = 1.0 - a_t / a_p
        return (1.0 - a_p) / (1.0 - a_t) * beta_step


def q_sample(x0, t, eps, sched):
    """Forward process: sqrt(a)*x0 + sqrt(1-a)*eps, no clipping."""
    x0 = np.asarray(x0, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if e.shape != x0.shape:
        raise ShapeError(f"eps shape {e.shape} does not match x0 {x0.shape}")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * e


# ------------------------------------------------------------------ losses


@dataclass
class LossBreakdown:
    total: Tensor
    mse: float
    mask_bce: float  # None when the model has no mask head
    reg: float
    gate_records: list


def _gate_states(records):
    return [r.state if isinstance(r, GateRecord) else r for r in records]


def stage1_loss(params, cfg, sched, x0u, mask_u, t, eps, lam=1.0, gamma_reg=0.01,
                mode="train", rng=None, forward_fn=denoiser_forward):
    """Noise MSE + lam * mask BCE + gamma_reg * gate load penalty.

    x0u is the encoded uncertain-region window (2, L, H, W), mask_u its
    binary validity plane (1, L, H, W). The rng is consumed only by the
    gate noise inside the forward pass; t and eps are explicit so every
    term can be recomputed externally.
    """
    x0 = np.asarray(x0u, dtype=np.float64)
    m = np.asarray(mask_u, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if e.shape != x0.shape:
        raise ShapeError(f"eps shape {e.shape} does not match x0 {x0.shape}")
    if m.shape != (1,) + x0.shape[1:]:
        raise ShapeError(f"mask shape {m.shape} does not match x0 {x0.shape}")
    x_t = q_sample(x0, t, e, sched)
    eps_hat, mask_logits, records = forward_fn(
        params, cfg, x_t, t, cond=None, mode=mode, rng=rng)
    total = mse(eps_hat, Tensor(e))
    mse_val = float(total.data)
    bce_val = None
    if mask_logits is not None:
        bce = bce_with_logits(mask_logits, Tensor(m))
        bce_val = float(bce.data)
        total = total + bce * lam
    reg_val = 0.0
    if records:
        reg = gate_regularization(_gate_states(records))
        reg_val = float(reg.data)
        total = total + reg * gamma_reg
    return LossBreakdown(total, mse_val, bce_val, reg_val, records)


def stage2_loss(params, cfg, sched, x0, cond, t, eps, gamma_reg=0.01,
                mode="train", rng=None, forward_fn=denoiser_forward):
    """Conditional noise MSE + gamma_reg * gate load penalty; no mask term."""
    if cond is None:
        raise UsageError("stage-2 loss requires a conditioning tensor")
    x0 = np.asarray(x0, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if e.shape != x0.shape:
        raise ShapeError(f"eps shape {e.shape} does not match x0 {x0.shape}")
    x_t = q_sample(x0, t, e, sched)
    eps_hat, _, records = forward_fn(
        params, cfg, x_t, t, cond=cond, mode=mode, rng=rng)
    total = mse(eps_hat, Tensor(e))
    mse_val = float(total.data)
    reg_val = 0.0
    if records:
        reg = gate_regularization(_gate_states(records))
        reg_val = float(reg.data)
        total = total + reg * gamma_reg
    return LossBreakdown(total, mse_val, None, reg_val, records)


def assemble_condition(x_unc, m_unc):
    """Stack the uncertain view and its mask into the (3, L, H, W) tensor."""
    x = np.asarray(x_unc, dtype=np.float64)
    m = np.asarray(m_unc, dtype=np.float64)
    if x.ndim != 4 or m.shape != (1,) + x.shape[1:]:
        raise ShapeError(f"cannot stack condition from {x.shape} and {m.shape}")
    return np.concatenate([x, m], axis=0)


# ----------------------------------------------------------------- sampler


@dataclass
class SampleResult:
    x: np.ndarray
    mask: np.ndarray  # bool (1, L, H, W), or None without a mask head
    mask_logits: np.ndarray


def ddpm_sample(params, cfg, sched, steps, shape, rng, cond=None,
                deterministic=False, forward_fn=denoiser_forward):
    """Ancestral sampling on the uniform grid t_k = k/steps.

    Clean-signal estimates are clipped to the model range [-1, 1]. When
    the model carries a mask head, the final call's logits are thresholded
    at probability 0.5 and the sentinel -1 is written outside the mask.
    deterministic=True suppresses all posterior noise after the initial
    draw.
    """
    if steps < 1:
        raise ConfigError("sampler needs at least one step")
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4:
        raise ShapeError(f"sample shape must be (C, L, H, W), got {shape}")
    x = rng.standard_normal(shape)
    last_logits = None
    for k in range(steps, 0, -1):
        t, tp = k / steps, (k - 1) / steps
        a_t, a_p = sched.alpha_bar(t), sched.alpha_bar(tp)
        eps_hat, mask_logits, _ = forward_fn(
            params, cfg, x, t, cond=cond, mode="eval", rng=None)
        eh = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
        if mask_logits is not None:
            last_logits = (mask_logits.data if isinstance(mask_logits, Tensor)
                           else np.asarray(mask_logits))
        x0h = np.clip((x - math.sqrt(1.0 - a_t) * eh) / math.sqrt(a_t), -1.0, 1.0)
        alpha_step = a_t / a_p
        beta_step = 1.0 - alpha_step
        x = (math.sqrt(a_p) * beta_step / (1.0 - a_t)) * x0h \
            + (math.sqrt(alpha_step) * (1.0 - a_p) / (1.0 - a_t)) * x
        if not deterministic and k > 1:
            var = sched.posterior_variance(t, tp)
            x = x + math.sqrt(var) * rng.standard_normal(shape)
    mask = None
    if last_logits is not None:
        mask = last_logits > 0.0
        x = np.where(mask, x, -1.0)
    return SampleResult(x, mask, last_logits)


# --------------------------------------------------------------- optimizer


class AdamW:
    """Decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, params: ParamSet, beta1=0.9, beta2=0.99, eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, lr):
        self.t += 1
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                raise UsageError(f"parameter {n} has no gradient; run backward first")
            self.m[n] = self.b1 * self.m[n] + (1.0 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1.0 - self.b2) * g * g
            mh = self.m[n] / (1.0 - self.b1 ** self.t)
            vh = self.v[n] / (1.0 - self.b2 ** self.t)
            p.data -= lr * (mh / (np.sqrt(vh) + self.eps) + self.wd * p.data)


def warmup_cosine_lr(step, total, base, warmup):
    """Linear ramp from zero over `warmup` steps, then cosine decay to zero."""
    if step < warmup:
        return base * step / warmup
    progress = (step - warmup) / max(total - warmup, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class EMA:
    """Exponential moving average of parameter values."""

    def __init__(self, params: ParamSet, decay=0.995):
        self.decay = decay
        self.shadow = params.state_dict()

    def update(self, params: ParamSet):
        for n, p in params.items():
            self.shadow[n] = self.decay * self.shadow[n] + (1.0 - self.decay) * p.data

    def params(self) -> ParamSet:
        return ParamSet(self.shadow)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int
    batch: int
    lr: float
    warmup: int
    ema_decay: float = 0.995
    ema_every: int = 10
    lam: float = 1.0
    gamma_reg: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 writes only the final checkpoints

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("steps and batch must be positive")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 1 <= self.warmup < self.steps:
            raise ConfigError("warmup must satisfy 1 <= warmup < steps")
        if not 0.0 < self.ema_decay < 1.0 or self.ema_every < 1:
            raise ConfigError("bad EMA settings")


@dataclass
class TrainResult:
    losses: np.ndarray
    log_path: Path
    model_path: Path
    ema_path: Path
    ema: ParamSet


def train_stage(stage, batches, params, model_cfg, train_cfg, sched, out_dir):
    """Optimize `params` in place over `train_cfg.steps` batches.

    `batches` yields lists of items: (x0u, mask_u) pairs for stage 1,
    (x0, cond) pairs for stage 2. Writes training_log.csv, gates.csv
    (from the last forward of the run), periodic checkpoints, and final
    model/EMA checkpoints into out_dir.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = subsystem_rng(train_cfg.seed, f"train-stage{stage}")
    opt = AdamW(params, weight_decay=train_cfg.weight_decay)
    ema = EMA(params, decay=train_cfg.ema_decay)
    it = iter(batches)
    losses, rows = [], []
    last_records = None

    for step in range(train_cfg.steps):
        try:
            batch = next(it)
        except StopIteration:
            raise InsufficientDataError(
                f"data stream exhausted at step {step} of {train_cfg.steps}")
        lr = warmup_cosine_lr(step, train_cfg.steps, train_cfg.lr, train_cfg.warmup)
        params.zero_grad()
        mse_sum, bce_sum, reg_sum = 0.0, 0.0, 0.0
        has_bce = False
        with Tape() as tape:
            total = None
            for item in batch:
                t = float(rng.uniform(0.0, 1.0))
                x0 = np.asarray(item[0], dtype=np.float64)
                eps = rng.standard_normal(x0.shape)
                if stage == 1:
                    bd = stage1_loss(params, model_cfg, sched, x0, item[1], t, eps,
                                     lam=train_cfg.lam, gamma_reg=train_cfg.gamma_reg,
                                     mode="train", rng=rng)
                else:
                    bd = stage2_loss(params, model_cfg, sched, x0, item[1], t, eps,
                                     gamma_reg=train_cfg.gamma_reg,
                                     mode="train", rng=rng)
                total = bd.total if total is None else total + bd.total
                mse_sum += bd.mse
                reg_sum += bd.reg
                if bd.mask_bce is not None:
                    bce_sum += bd.mask_bce
                    has_bce = True
                last_records = bd.gate_records
            loss = total * (1.0 / len(batch))
        val = float(loss.data)
        if not np.isfinite(val):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}, batch {step}")
        tape.backward(loss)
        opt.step(lr)
        if (step + 1) % train_cfg.ema_every == 0:
            ema.update(params)
        losses.append(val)
        nb = len(batch)
        rows.append((step, lr, val, mse_sum / nb,
                     bce_sum / nb if has_bce else None, reg_sum / nb))
        if train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(params.state_dict(),
                            out_dir / f"stage{stage}_step{step + 1}.u4dp")

    log_path = out_dir / "training_log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "total", "mse", "mask_bce", "reg"])
        for step, lr, val, m_, b_, r_ in rows:
            w.writerow([step, repr(lr), repr(val), repr(m_),
                        "" if b_ is None else repr(b_), repr(r_)])
    if last_records:
        write_gate_csv(last_records, out_dir / "gates.csv")
    model_path = out_dir / f"stage{stage}_model.u4dp"
    ema_path = out_dir / f"stage{stage}_ema.u4dp"
    save_checkpoint(params.state_dict(), model_path)
    save_checkpoint(ema.shadow, ema_path)
    return TrainResult(np.asarray(losses), log_path, model_path, ema_path,
                       ema.params())


# ------------------------------------------------------------ data windows


@dataclass
class TrainingWindow:
    x_full: np.ndarray
    m_full: np.ndarray
    x_unc: np.ndarray
    m_unc: np.ndarray

    @property
    def cond(self):
        return assemble_condition(self.x_unc, self.m_unc)


def windows_from_sequence(sample, sensor, window_len, ratio):
    """Cut a sequence into non-overlapping L-frame windows, encoded.

    Each window carries the full encoded view and the sparse uncertain
    view obtained by projecting only the top-`ratio` entropy points of
    every frame.
    """
    if window_len < 1:
        raise ConfigError("window_len must be at least 1")
    n = len(sample.frames) // window_len
    if n == 0:
        raise InsufficientDataError(
            f"{len(sample.frames)} frames cannot fill a window of {window_len}")
    out = []
    for w in range(n):
        full_imgs, unc_imgs = [], []
        for i in range(w * window_len, (w + 1) * window_len):
            cloud = sample.frames[i]
            img, _ = project_points(cloud, sensor)
            full_imgs.append(img)
            field = entropy_map(sample.logits[i])
            idx = select_topk(field, ratio)
            unc_imgs.append(build_uncertainty_view(cloud, idx, sensor))
        x_f, m_f = encode_sequence(full_imgs, sensor)
        x_u, m_u = encode_sequence(unc_imgs, sensor)
        out.append(TrainingWindow(x_f, m_f, x_u, m_u))
    return out


# -------------------------------------------------------------- generation

DEPTH_FLOOR = 0.05  # metres; decoded pixels below this are treated as empty


@dataclass
class GeneratedSequence:
    images: list
    clouds: list
    mask: np.ndarray
    stage1: SampleResult


def generate_4d(params1, cfg1, params2, cfg2, sched, steps, length, sensor,
                rng, deterministic=False):
    """Chain the two stages into a decoded 4-d sequence.

    Stage 1 draws the sparse view and mask, stage 2 draws the full scene
    conditioned on them; decoded frames keep only pixels that are inside
    the stage-1 mask and above the depth floor.
    """
    if not cfg1.mask_head:
        raise ConfigError("stage-1 model must carry a mask head")
    if cfg1.in_channels != cfg2.in_channels:
        raise ConfigError("stage models disagree on signal channels")
    if cfg2.cond_channels != cfg1.in_channels + 1:
        raise ConfigError(
            f"stage-2 model wants {cfg2.cond_channels} conditioning channels, "
            f"stage 1 provides {cfg1.in_channels + 1}")
    shape = (cfg1.in_channels, length, sensor.height, sensor.width)
    s1 = ddpm_sample(params1, cfg1, sched, steps, shape, rng,
                     deterministic=deterministic)
    cond = np.concatenate([s1.x, s1.mask.astype(np.float64)], axis=0)
    s2 = ddpm_sample(params2, cfg2, sched, steps, shape, rng, cond=cond,
                     deterministic=deterministic)
    decoded = decode_sequence(s2.x, s1.mask.astype(np.float64), sensor)
    images, clouds, keep = [], [], []
    for img in decoded:
        valid = img.mask.astype(bool) & (img.depth >= DEPTH_FLOOR)
        final = RangeImage(np.where(valid, img.depth, 0.0),
                           np.where(valid, img.intensity, 0.0), valid)
        images.append(final)
        clouds.append(unproject(final, sensor))
        keep.append(valid)
    mask = np.stack(keep)[None]
    return GeneratedSequence(images, clouds, mask, s1)
