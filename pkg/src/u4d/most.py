"""Gated two-branch spatio-temporal blocks and the hourglass denoiser.

Each block runs a spatial 1x3x3 branch and a temporal 3x1x1 branch over the
same input, derives a shared feature through a small per-position MLP, and
mixes the branches with a softmax gate. In train mode the gate logits carry
multiplicative Gaussian noise whose scale is itself learned, which keeps both
branches alive early in training. The denoiser stacks these blocks in an
encoder/decoder over the range-image grid with skip connections, sinusoidal
time conditioning, and two output heads (noise estimate, validity logits).
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamSet,
    Tensor,
    channel_dense,
    concat_channels,
    conv_spatial,
    conv_temporal,
    dense,
    mean,
    reshape,
    slice_channels,
    softmax_channels,
    softplus,
    upsample2,
)
from .errors import ConfigError, ShapeError, UsageError

# ---------------------------------------------------------------- gating


def noisy_gate(f_share, wg, wz, mode, rng):
    """Two-way softmax gate over a shared (C, L, H, W) feature.

    Returns alpha of shape (2, L, H, W); channel 0 weighs the spatial
    branch, channel 1 the temporal one. Train mode perturbs the logits
    with chi * softplus(f W_z) where chi is standard normal per position
    and per branch.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"gate mode must be 'train' or 'eval', got {mode!r}")
    logits = channel_dense(f_share, wg)
    if mode == "train":
        if rng is None:
            raise UsageError("train-mode gating needs an rng for the noise draw")
        chi = rng.standard_normal(logits.data.shape)
        logits = logits + Tensor(chi) * softplus(channel_dense(f_share, wz))
    return softmax_channels(logits)


@dataclass
class GateState:
    alpha_s: Tensor  # (1, L, H, W)
    alpha_t: Tensor


def _cv_squared(a):
    # squared coefficient of variation; exactly zero for a constant field
    m = mean(a)
    dev = a - m
    return mean(dev * dev) / (m * m)


def gate_regularization(states):
    """Load-balance penalty: sum of CV^2 over both alphas of every gate."""
    total = None
    for st in states:
        for a in (st.alpha_s, st.alpha_t):
            term = _cv_squared(a)
            total = term if total is None else total + term
    if total is None:
        raise UsageError("gate_regularization needs at least one gate state")
    return total


# ----------------------------------------------------------------- block


_MOST_NAMES = (
    "spatial.k", "spatial.b", "temporal.k", "temporal.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "gate.wg", "gate.wz",
)


def build_most_params(c_in, c_out, rng, hidden=None):
    """Initial arrays for one block, keyed by the canonical field names."""
    if hidden is None:
        hidden = c_out

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)

    return {
        "spatial.k": he((c_out, c_in, 1, 3, 3), c_in * 9),
        "spatial.b": np.zeros(c_out),
        "temporal.k": he((c_out, c_in, 3, 1, 1), c_in * 3),
        "temporal.b": np.zeros(c_out),
        "mlp.w1": he((2 * c_out, hidden), 2 * c_out),
        "mlp.b1": np.zeros(hidden),
        "mlp.w2": he((hidden, c_out), hidden),
        "mlp.b2": np.zeros(c_out),
        # near-zero gate weights start every block close to an even split
        # (exact zeros would starve the shared MLP of gradient)
        "gate.wg": rng.normal(0.0, 1e-2, (c_out, 2)),
        "gate.wz": rng.normal(0.0, 1e-2, (c_out, 2)),
    }


@dataclass
class MoSTParams:
    spatial_k: Tensor
    spatial_b: Tensor
    temporal_k: Tensor
    temporal_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    gate_wg: Tensor
    gate_wz: Tensor

    @classmethod
    def from_params(cls, params, prefix):
        sep = f"{prefix}." if prefix else ""
        return cls(*(params[sep + n] for n in _MOST_NAMES))


def most_block(x, p, mode="eval", rng=None):
    """One gated block; returns (output, GateState).

    Adds a residual connection when input and output channel counts match.
    """
    fs = conv_spatial(x, p.spatial_k, p.spatial_b)
    ft = conv_temporal(x, p.temporal_k, p.temporal_b)
    both = concat_channels([fs, ft])
    hidden = softplus(channel_dense(both, p.mlp_w1, p.mlp_b1))
    f_share = channel_dense(hidden, p.mlp_w2, p.mlp_b2)
    alpha = noisy_gate(f_share, p.gate_wg, p.gate_wz, mode, rng)
    a_s = slice_channels(alpha, 0, 1)
    a_t = slice_channels(alpha, 1, 2)
    fused = a_s * fs + a_t * ft
    c_in = x.data.shape[0] if isinstance(x, Tensor) else np.asarray(x).shape[0]
    if c_in == p.spatial_k.data.shape[0]:
        fused = fused + x
    return fused, GateState(a_s, a_t)


# -------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    level_channels: tuple = (64, 128, 256, 512)
    blocks_per_level: int = 3
    in_channels: int = 2
    cond_channels: int = 0
    time_dim: int = 16
    mask_head: bool = True

    def __post_init__(self):
        if not self.level_channels or any(int(c) < 1 for c in self.level_channels):
            raise ConfigError(f"bad level_channels {self.level_channels!r}")
        if self.blocks_per_level < 1:
            raise ConfigError("blocks_per_level must be >= 1")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("time_dim must be a positive even number")
        if self.in_channels < 1 or self.cond_channels < 0:
            raise ConfigError("bad channel counts")


def paper_denoiser_config(cond_channels=0):
    """Full-size profile: four levels, three blocks each."""
    return DenoiserConfig(level_channels=(64, 128, 256, 512), blocks_per_level=3,
                          cond_channels=cond_channels, time_dim=64)


def time_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def build_denoiser(cfg: DenoiserConfig, rng) -> ParamSet:
    chs = cfg.level_channels
    arrays = {}

    def he(shape, fan_in, scale=1.0):
        return rng.normal(0.0, scale * math.sqrt(2.0 / fan_in), shape)

    c0 = cfg.in_channels + cfg.cond_channels
    arrays["stem.k"] = he((chs[0], c0, 1, 3, 3), c0 * 9)
    arrays["stem.b"] = np.zeros(chs[0])
    for i, ch in enumerate(chs):
        if i > 0:
            arrays[f"enc{i}.down.k"] = he((ch, chs[i - 1], 1, 3, 3), chs[i - 1] * 9)
            arrays[f"enc{i}.down.b"] = np.zeros(ch)
        arrays[f"enc{i}.time.w"] = he((cfg.time_dim, ch), cfg.time_dim)
        arrays[f"enc{i}.time.b"] = np.zeros(ch)
        for j in range(cfg.blocks_per_level):
            for name, arr in build_most_params(ch, ch, rng).items():
                arrays[f"enc{i}.block{j}.{name}"] = arr
    for i in reversed(range(len(chs) - 1)):
        arrays[f"dec{i}.up.k"] = he((chs[i], chs[i + 1], 1, 3, 3), chs[i + 1] * 9)
        arrays[f"dec{i}.up.b"] = np.zeros(chs[i])
        arrays[f"dec{i}.fuse.w"] = he((2 * chs[i], chs[i]), 2 * chs[i])
        arrays[f"dec{i}.fuse.b"] = np.zeros(chs[i])
        arrays[f"dec{i}.time.w"] = he((cfg.time_dim, chs[i]), cfg.time_dim)
        arrays[f"dec{i}.time.b"] = np.zeros(chs[i])
        for j in range(cfg.blocks_per_level):
            for name, arr in build_most_params(chs[i], chs[i], rng).items():
                arrays[f"dec{i}.block{j}.{name}"] = arr
    # keep early noise estimates small so sampling starts near the prior
    arrays["head.eps.k"] = he((cfg.in_channels, chs[0], 1, 3, 3), chs[0] * 9, scale=0.1)
    arrays["head.eps.b"] = np.zeros(cfg.in_channels)
    if cfg.mask_head:
        arrays["head.mask.k"] = he((1, chs[0], 1, 3, 3), chs[0] * 9, scale=0.1)
        arrays["head.mask.b"] = np.zeros(1)
    return ParamSet(arrays)


@dataclass
class GateRecord:
    level: str
    block: int
    state: GateState


def denoiser_forward(params, cfg, x_t, t, cond=None, mode="eval", rng=None):
    """Run the denoiser on one (C, L, H, W) window at diffusion time t.

    Returns (eps, mask_logits, gate_records); mask_logits is None when the
    model has no validity head. cond=None on a conditional model feeds the
    all-zero conditioning tensor, which is also the null token used for
    classifier-free style training.
    """
    data = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    if data.ndim != 4 or data.shape[0] != cfg.in_channels:
        raise ShapeError(
            f"expected ({cfg.in_channels}, L, H, W) input, got {data.shape}")
    levels = len(cfg.level_channels)
    factor = 2 ** (levels - 1)
    L, H, W = data.shape[1:]
    if H % factor or W % factor or H < factor or W < factor:
        raise ShapeError(f"grid {H}x{W} is not divisible by the {factor}x downsampling")
    if cond is not None and cfg.cond_channels == 0:
        raise ConfigError("conditioning given but the model has no cond channels")

    x = x_t if isinstance(x_t, Tensor) else Tensor(data)
    if cfg.cond_channels:
        if cond is None:
            cond_t = Tensor(np.zeros((cfg.cond_channels, L, H, W)))
        elif isinstance(cond, Tensor):
            if cond.data.shape != (cfg.cond_channels, L, H, W):
                raise ShapeError(f"bad conditioning shape {cond.data.shape}")
            cond_t = cond
        else:
            cdata = np.asarray(cond, dtype=np.float64)
            if cdata.shape != (cfg.cond_channels, L, H, W):
                raise ShapeError(f"bad conditioning shape {cdata.shape}")
            cond_t = Tensor(cdata)
        x = concat_channels([x, cond_t])

    temb = Tensor(time_embedding(t, cfg.time_dim))
    x = conv_spatial(x, params["stem.k"], params["stem.b"])
    gates, skips = [], []
    for i, ch in enumerate(cfg.level_channels):
        if i > 0:
            x = conv_spatial(x, params[f"enc{i}.down.k"],
                             params[f"enc{i}.down.b"], stride=2)
        tv = dense(temb, params[f"enc{i}.time.w"], params[f"enc{i}.time.b"])
        x = x + reshape(tv, (ch, 1, 1, 1))
        for j in range(cfg.blocks_per_level):
            x, st = most_block(
                x, MoSTParams.from_params(params, f"enc{i}.block{j}"), mode, rng)
            gates.append(GateRecord(f"enc{i}", j, st))
        if i < levels - 1:
            skips.append(x)
    for i in reversed(range(levels - 1)):
        ch = cfg.level_channels[i]
        x = upsample2(x)
        x = conv_spatial(x, params[f"dec{i}.up.k"], params[f"dec{i}.up.b"])
        x = concat_channels([x, skips[i]])
        x = channel_dense(x, params[f"dec{i}.fuse.w"], params[f"dec{i}.fuse.b"])
        tv = dense(temb, params[f"dec{i}.time.w"], params[f"dec{i}.time.b"])
        x = x + reshape(tv, (ch, 1, 1, 1))
        for j in range(cfg.blocks_per_level):
            x, st = most_block(
                x, MoSTParams.from_params(params, f"dec{i}.block{j}"), mode, rng)
            gates.append(GateRecord(f"dec{i}", j, st))
    eps = conv_spatial(x, params["head.eps.k"], params["head.eps.b"])
    mask_logits = None
    if cfg.mask_head:
        mask_logits = conv_spatial(x, params["head.mask.k"], params["head.mask.b"])
    return eps, mask_logits, gates


def write_gate_csv(records, path):
    """Per-gate mean mixing weights from one forward pass."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "block", "mean_alpha_s", "mean_alpha_t"])
        for rec in records:
            w.writerow([rec.level, rec.block,
                        repr(float(rec.state.alpha_s.data.mean())),
                        repr(float(rec.state.alpha_t.data.mean()))])
