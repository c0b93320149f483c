"""Command-line pipeline: synth -> project -> uncertainty -> train -> sample -> eval.

Every subcommand works under a single --out root, is deterministic given
(config, seed), and never mutates its inputs. Failures surface as a
single `error: Type: message` line on stderr with exit code 1; usage
problems exit 2. `U4D_THREADS` caps nearest-neighbour query threads.
"""

import argparse
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .autodiff import ParamSet, load_checkpoint
from .config import load_config
from .diffusion import (
    CosineSchedule,
    TrainConfig,
    generate_4d,
    train_stage,
    windows_from_sequence,
)
from .errors import DataError, U4DError
from .lidar_io import (
    SequenceSample,
    SynthConfig,
    read_labels,
    read_logits,
    read_point_bin,
    read_poses_csv,
    synth_world,
    write_labels,
    write_logits,
    write_point_bin,
    write_poses_csv,
    write_range_container,
)
from .metrics import (
    bev_histogram,
    feature_moments,
    gaussian_frechet,
    jsd,
    mmd,
    temporal_consistency,
)
from .most import DenoiserConfig, build_denoiser
from .points import PointCloud
from .range_geometry import PROFILES, project_points
from .rigid import RigidTransform, relative_transforms
from .seeding import subsystem_rng
from .uncertainty import build_uncertainty_view, entropy_map, select_topk


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("U4D_THREADS", "1")))
    except ValueError:
        return 1


def _load_cfg(args):
    cfg = load_config(args.config)
    for key in cfg.unknown_keys:
        print(f"warning: unknown key {key}", file=sys.stderr)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _identity() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


def _read_sequence(seq_dir) -> SequenceSample:
    seq_dir = Path(seq_dir)
    bins = sorted(seq_dir.glob("frame_*.bin"))
    if not bins:
        raise DataError(f"no frame_*.bin clouds under {seq_dir}")
    frames, logits, labels = [], [], []
    for b in bins:
        cloud = read_point_bin(b)
        frames.append(cloud)
        lgt = b.with_suffix(".lgt")
        logits.append(read_logits(lgt, expected_points=len(cloud))
                      if lgt.exists() else None)
        lbl = b.with_suffix(".lbl")
        labels.append(read_labels(lbl) if lbl.exists() else None)
    poses_path = seq_dir / "poses.csv"
    poses = (read_poses_csv(poses_path) if poses_path.exists()
             else [_identity() for _ in frames])
    return SequenceSample(frames, poses, labels, logits)


def _model_config(cfg, stage) -> DenoiserConfig:
    return DenoiserConfig(
        level_channels=cfg.level_channels,
        blocks_per_level=cfg.blocks_per_level,
        in_channels=2,
        cond_channels=0 if stage == 1 else 3,
        time_dim=cfg.time_dim,
        mask_head=stage == 1,
    )


# ------------------------------------------------------------ subcommands


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    sc = SynthConfig(sensor=PROFILES[cfg.profile], n_frames=cfg.n_frames,
                     n_boxes=cfg.n_boxes, n_poles=cfg.n_poles)
    sample = synth_world(sc, cfg.seed)
    seq = Path(args.out) / "sequence"
    seq.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(sample.frames):
        write_point_bin(cloud, seq / f"frame_{i:03d}.bin")
        write_logits(sample.logits[i], seq / f"frame_{i:03d}.lgt")
        write_labels(sample.labels[i], seq / f"frame_{i:03d}.lbl")
    write_poses_csv(sample.ego_poses, seq / "poses.csv")
    return 0


def cmd_project(args) -> int:
    cfg = _load_cfg(args)
    sensor = PROFILES[cfg.profile]
    sample = _read_sequence(Path(args.out) / "sequence")
    imgs = [project_points(f, sensor)[0] for f in sample.frames]
    out = Path(args.out) / "range"
    out.mkdir(parents=True, exist_ok=True)
    write_range_container(imgs, out / "sequence.u4dr")
    return 0


def cmd_uncertainty(args) -> int:
    cfg = _load_cfg(args)
    sensor = PROFILES[cfg.profile]
    sample = _read_sequence(Path(args.out) / "sequence")
    views = []
    for cloud, logits in zip(sample.frames, sample.logits):
        if logits is None:
            raise DataError("sequence has no .lgt logits; run synth first")
        idx = select_topk(entropy_map(logits), cfg.topk_ratio)
        views.append(build_uncertainty_view(cloud, idx, sensor))
    out = Path(args.out) / "uncertainty"
    out.mkdir(parents=True, exist_ok=True)
    write_range_container(views, out / "sequence.u4dr")
    return 0


def _plot_losses(losses, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ax.plot(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _train(args, stage) -> int:
    cfg = _load_cfg(args)
    sensor = PROFILES[cfg.profile]
    out = Path(args.out)
    sample = _read_sequence(out / "sequence")
    windows = windows_from_sequence(sample, sensor, cfg.window_len, cfg.topk_ratio)
    if stage == 1:
        items = [(w.x_unc, w.m_unc) for w in windows]
    else:
        items = [(w.x_full, w.cond) for w in windows]
    data_rng = subsystem_rng(cfg.seed, f"data-stage{stage}")

    def batches():
        for _ in range(cfg.train_steps):
            idx = data_rng.integers(0, len(items), size=cfg.train_batch)
            yield [items[int(i)] for i in idx]

    mcfg = _model_config(cfg, stage)
    params = build_denoiser(mcfg, subsystem_rng(cfg.seed, f"model-stage{stage}"))
    tc = TrainConfig(steps=cfg.train_steps, batch=cfg.train_batch,
                     lr=cfg.train_lr, warmup=cfg.train_warmup,
                     ema_decay=cfg.ema_decay, ema_every=cfg.ema_every,
                     lam=cfg.lam, gamma_reg=cfg.gamma_reg,
                     weight_decay=cfg.weight_decay, seed=cfg.seed,
                     checkpoint_every=cfg.checkpoint_every)
    res = train_stage(stage, batches(), params, mcfg, tc, CosineSchedule(),
                      out / f"train{stage}")
    _plot_losses(res.losses, out / f"train{stage}" / "loss_curve.png")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    p1 = ParamSet(load_checkpoint(out / "train1" / "stage1_ema.u4dp"))
    p2 = ParamSet(load_checkpoint(out / "train2" / "stage2_ema.u4dp"))
    gen = generate_4d(p1, _model_config(cfg, 1), p2, _model_config(cfg, 2),
                      CosineSchedule(), steps=cfg.sample_steps,
                      length=cfg.sample_length, sensor=PROFILES[cfg.profile],
                      rng=subsystem_rng(cfg.seed, "sample"),
                      deterministic=cfg.sample_deterministic)
    d = out / "samples"
    d.mkdir(parents=True, exist_ok=True)
    write_range_container(gen.images, d / "sequence.u4dr")
    for i, cloud in enumerate(gen.clouds):
        write_point_bin(cloud, d / f"frame_{i:03d}.bin")
    write_poses_csv([_identity() for _ in gen.clouds], d / "poses.csv")
    return 0


# ------------------------------------------------------------------- eval


def _cloud_descriptor(cloud: PointCloud) -> np.ndarray:
    """Fixed 14-d geometric summary used when no feature files are given."""
    if len(cloud) == 0:
        return np.zeros(14)
    xyz = cloud.xyz
    r = cloud.ranges
    return np.array([
        math.log1p(len(cloud)),
        r.mean(), r.std(), float(np.median(r)),
        xyz[:, 0].mean(), xyz[:, 1].mean(), xyz[:, 2].mean(),
        xyz[:, 0].std(), xyz[:, 1].std(), xyz[:, 2].std(),
        np.abs(xyz[:, 0]).mean(), np.abs(xyz[:, 1]).mean(),
        cloud.intensity.mean(), cloud.intensity.std(),
    ])


def _read_eval_dir(d):
    d = Path(d)
    bins = sorted(d.glob("frame_*.bin"))
    if not bins:
        raise DataError(f"no frame_*.bin clouds under {d}")
    clouds = [read_point_bin(b) for b in bins]
    poses_path = d / "poses.csv"
    if poses_path.exists():
        rel = relative_transforms(read_poses_csv(poses_path))
    else:
        rel = [_identity() for _ in clouds[1:]]
    return clouds, rel


def _guard(fn):
    """Degenerate inputs leave a nan row instead of killing the report."""
    try:
        return fn()
    except U4DError:
        return None


def _temporal_rows(clouds, rel, intervals, workers):
    """TTCE triple and per-interval CTC dict, each None where unavailable.

    Intervals the sequence cannot support are dropped up front so one
    short direction cannot blank the others, and when ICP fails on
    degenerate frames the CTC values (which only need the ground-truth
    transforms) are still computed.
    """
    frames = [c.xyz for c in clouds]
    valid = tuple(k for k in intervals if k <= len(frames) - 1)
    ttce, ctc = None, None
    if valid:
        rep = _guard(lambda: temporal_consistency(frames, rel, valid,
                                                  workers=workers))
        if rep is not None:
            ttce = (rep.ttce_rot, rep.ttce_trans, rep.n_pairs)
            ctc = rep.ctc
        else:
            aligned = _guard(lambda: temporal_consistency(
                frames, rel, valid, pred_transforms=rel, workers=workers))
            if aligned is not None:
                ctc = aligned.ctc
    return ttce, ctc


def _eval_figures(out_dir, hg, hr, rows):
    for name, hist in (("bev_gen", hg), ("bev_ref", hr)):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        if hist is not None:
            ax.imshow(hist.grid, origin="lower", cmap="viridis")
        ax.set_title(name)
        fig.tight_layout()
        fig.savefig(out_dir / f"{name}.png", dpi=100)
        plt.close(fig)
    scalars = [(m, v) for m, i, v, _ in rows
               if i == "" and v is not None and math.isfinite(v)]
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    if scalars:
        ax.bar([m for m, _ in scalars], [v for _, v in scalars])
    ax.set_ylabel("value")
    fig.tight_layout()
    fig.savefig(out_dir / "metrics.png", dpi=100)
    plt.close(fig)


def cmd_eval(args) -> int:
    workers = _workers()
    if args.config:
        cfg = _load_cfg(args)
        extent, bins, intervals = cfg.eval_extent, cfg.eval_bins, cfg.eval_intervals
    else:
        extent, bins, intervals = 40.0, 32, (1,)
    gen_clouds, gen_rel = _read_eval_dir(args.gen)
    ref_clouds, ref_rel = _read_eval_dir(args.ref)
    if args.features_gen:
        gen_feats = read_logits(args.features_gen)
    else:
        gen_feats = np.stack([_cloud_descriptor(c) for c in gen_clouds])
    if args.features_ref:
        ref_feats = read_logits(args.features_ref)
    else:
        ref_feats = np.stack([_cloud_descriptor(c) for c in ref_clouds])

    rows = []
    n_gen = len(gen_clouds)
    fpd = _guard(lambda: gaussian_frechet(feature_moments(gen_feats),
                                          feature_moments(ref_feats)))
    rows.append(("FPD", "", fpd, n_gen))
    hg = _guard(lambda: bev_histogram(
        np.vstack([c.xyz for c in gen_clouds]), extent, bins))
    hr = _guard(lambda: bev_histogram(
        np.vstack([c.xyz for c in ref_clouds]), extent, bins))
    jd = _guard(lambda: jsd(hg, hr)) if hg is not None and hr is not None else None
    rows.append(("JSD", "", jd, n_gen))
    rows.append(("MMD", "", _guard(lambda: mmd(gen_feats, ref_feats, biased=True)),
                 n_gen))
    ttce_g, ctc_g = _temporal_rows(gen_clouds, gen_rel, intervals, workers)
    _, ctc_r = _temporal_rows(ref_clouds, ref_rel, intervals, workers)
    rows.append(("TTCE", "rot", ttce_g[0] if ttce_g else None,
                 ttce_g[2] if ttce_g else 0))
    rows.append(("TTCE", "trans", ttce_g[1] if ttce_g else None,
                 ttce_g[2] if ttce_g else 0))
    for k in intervals:
        gv = ctc_g.get(k) if ctc_g else None
        rv = ctc_r.get(k) if ctc_r else None
        rows.append(("CTC", str(k), gv, n_gen - k if gv is not None else 0))
        gap = gv - rv if gv is not None and rv is not None else None
        rows.append(("CTC_gap", str(k), gap,
                     n_gen - k if gap is not None else 0))

    out_dir = Path(args.out) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["metric,interval,value,n"]
    for metric, interval, value, n in rows:
        v = float("nan") if value is None else float(value)
        lines.append(f"{metric},{interval},{v!r},{n}")
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    _eval_figures(out_dir, hg, hr, rows)
    return 0


# ------------------------------------------------------------------ render


def render_bev(cloud, path, extent: float = 40.0, size: int = 128,
               z_range=(-3.0, 5.0)) -> None:
    """Top-down height-colored render as a binary PPM (P6).

    Cells keep the highest point; color runs blue (low) to red (high)
    with a fixed green floor so occupied pixels never match the black
    background. Rows bin x, columns y, matching the BEV histograms.
    """
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    img = np.zeros((size, size, 3), dtype=np.uint8)
    keep = (np.abs(xyz[:, 0]) < extent) & (np.abs(xyz[:, 1]) < extent)
    pts = xyz[keep]
    if len(pts):
        scale = size / (2.0 * extent)
        ix = np.clip(((pts[:, 0] + extent) * scale).astype(int), 0, size - 1)
        iy = np.clip(((pts[:, 1] + extent) * scale).astype(int), 0, size - 1)
        height = np.full((size, size), -np.inf)
        np.maximum.at(height, (ix, iy), pts[:, 2])
        lit = height > -np.inf
        zlo, zhi = z_range
        t = np.clip((height[lit] - zlo) / (zhi - zlo), 0.0, 1.0)
        img[lit, 0] = np.round(255.0 * t).astype(np.uint8)
        img[lit, 1] = (64 + np.round(127.0 * (1.0 - t))).astype(np.uint8)
        img[lit, 2] = np.round(255.0 * (1.0 - t)).astype(np.uint8)
    header = f"P6\n{size} {size}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def cmd_render(args) -> int:
    if args.config:
        cfg = _load_cfg(args)
        extent, size = cfg.eval_extent, cfg.render_size
    else:
        extent, size = 40.0, 128
    cloud = read_point_bin(args.cloud)
    out = Path(args.out) / "render"
    out.mkdir(parents=True, exist_ok=True)
    render_bev(cloud, out / (Path(args.cloud).stem + ".ppm"),
               extent=extent, size=size)
    return 0


# ------------------------------------------------------------------- main


_HANDLERS = {
    "synth": cmd_synth,
    "project": cmd_project,
    "uncertainty": cmd_uncertainty,
    "train1": lambda a: _train(a, 1),
    "train2": lambda a: _train(a, 2),
    "sample": cmd_sample,
    "eval": cmd_eval,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="u4d",
        description="uncertainty-guided 4D LiDAR generation pipeline")
    sub = p.add_subparsers(dest="command")
    for name, help_text in (
        ("synth", "generate a synthetic labeled sequence"),
        ("project", "project clouds to range images"),
        ("uncertainty", "extract sparse high-entropy views"),
        ("train1", "train the uncertainty-view diffusion stage"),
        ("train2", "train the conditioned full-view diffusion stage"),
        ("sample", "sample a 4D sequence from trained checkpoints"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=None)
    ev = sub.add_parser("eval", help="compare a generated dir against a reference dir")
    ev.add_argument("--gen", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--features-gen", default=None,
                    help="optional .lgt feature matrix replacing built-in descriptors")
    ev.add_argument("--features-ref", default=None)
    rn = sub.add_parser("render", help="render a cloud to a BEV pixmap")
    rn.add_argument("--cloud", required=True)
    rn.add_argument("--out", required=True)
    rn.add_argument("--config", default=None)
    rn.add_argument("--seed", type=int, default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _HANDLERS[args.command](args)
    except (U4DError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
