"""CLI and experiment orchestration: train, density, eval, fixed-energy.

Every command writes delimited outputs (CSV, 16-bit PGM) carrying a
provenance header plus matplotlib renderings of the same artifacts.
Config precedence: built-in defaults < --config file < command-line flags;
the effective configuration is dumped to resolved_config.json.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__, diffkernel as dk, figures, spectral, toydata, trainer
from .bounds import BoundSpec, Ms1Schedule
from .diffkernel import Tensor
from .sde import VESchedule
from .spectral import SpectralConfig

FORMAT_VERSION = 1
BUILD_ID = f"bbebm-{__version__}"


@dataclasses.dataclass
class RunConfig:
    """Flat bag of every tunable the CLI exposes; unknown keys are rejected."""

    dataset: str = "25gaussians"
    lower: str = "sv"
    upper: str = "gp"
    lam: float = 1.0
    zeta: float = 1.0
    ms1: str = "fixed"            # "fixed" | "fixed:<ratio>" | "decay"
    sigma_min: float = 0.01
    sigma_max: float = 0.1
    horizon: float = 1.0
    iters: int = 150_000
    batch: int = 200
    seed: int = 0
    out: str = "runs/out"

    energy: str = "mlp"           # mlp | flow
    lr_energy: float = 2e-4
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    sigma_noise: float = 0.01
    latent_dim: int = 2
    hidden: int = 128
    depth: int = 3
    spectral_iters: int = 4
    spectral_tol: float = 1e-3
    gp_weight_0gp: float = 1.0

    log_every: int = 100
    sample_every: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_batch: int = 1000
    kl_samples: int = 4000

    # eval/density command knobs
    checkpoint: str = ""
    task: str = "modes"
    samples: int = 10_000
    ood_dataset: str = "swissroll"
    grid_res: int = 200
    xmin: float = -3.0
    xmax: float = 3.0
    ymin: float = -3.0
    ymax: float = 3.0

    def digest(self):
        vals = dataclasses.asdict(self)
        vals.pop("out")  # the output location does not affect results
        blob = json.dumps(vals, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def resolve_config(args_dict, config_path=None):
    """defaults < config file < CLI flags, rejecting unknown config keys."""
    cfg = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    if config_path:
        with open(config_path) as f:
            file_vals = json.load(f)
        unknown = set(file_vals) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for k, v in file_vals.items():
            setattr(cfg, k, type(getattr(cfg, k))(v) if v is not None else v)
    for k, v in args_dict.items():
        if k in known and v is not None:
            setattr(cfg, k, v)
    return cfg


def parse_ms1(text, latent_dim, iterations):
    if text == "fixed":
        return Ms1Schedule.fixed_for_dim(latent_dim)
    if text.startswith("fixed:"):
        return Ms1Schedule.fixed(float(text.split(":", 1)[1]))
    if text == "decay":
        return Ms1Schedule.decay(iterations)
    raise ValueError(f"--ms1 must be 'fixed', 'fixed:<ratio>' or 'decay', got {text!r}")


def to_train_config(cfg):
    widths = [cfg.latent_dim] + [cfg.hidden] * cfg.depth
    bound = BoundSpec(
        lower=cfg.lower, upper=cfg.upper, lam=cfg.lam, zeta=cfg.zeta,
        ms1=parse_ms1(cfg.ms1, cfg.latent_dim, cfg.iters),
        spectral_cfg=SpectralConfig(max_iters=cfg.spectral_iters, tol=cfg.spectral_tol),
        sched=VESchedule(cfg.sigma_min, cfg.sigma_max, cfg.horizon) if cfg.upper == "diff" else None,
        gp_weight_0gp=cfg.gp_weight_0gp,
    )
    return trainer.TrainConfig(
        iterations=cfg.iters, batch_size=cfg.batch,
        lr_energy=cfg.lr_energy, lr_generator=cfg.lr_generator,
        lr_discriminator=cfg.lr_discriminator, beta1=cfg.beta1, beta2=cfg.beta2,
        seed=cfg.seed, bound=bound, dataset=cfg.dataset,
        gen_widths=tuple(widths + [2]), sigma_noise=cfg.sigma_noise,
        energy_variant=cfg.energy, energy_widths=tuple(widths + [1]),
        log_every=cfg.log_every, sample_every=cfg.sample_every,
        checkpoint_every=cfg.checkpoint_every, eval_every=cfg.eval_every,
        eval_batch=cfg.eval_batch, kl_samples=cfg.kl_samples,
    )


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        return repr(v + 0.0 if v == 0 else v)
    return str(v)


class CsvWriter:
    """CSV with a provenance comment line before the header row."""

    def __init__(self, path, columns, cfg, extra_comment=None):
        self.columns = columns
        self.f = open(path, "w", encoding="utf-8")
        self.f.write(provenance_line(cfg) + "\n")
        if extra_comment:
            self.f.write(f"# {extra_comment}\n")
        self.f.write(",".join(columns) + "\n")

    def write(self, row):
        self.f.write(",".join(_fmt(row.get(c)) for c in self.columns) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def provenance_line(cfg):
    return (f"# bbebm format_version={FORMAT_VERSION} build={BUILD_ID} "
            f"seed={cfg.seed} config={cfg.digest()}")


def write_samples_csv(path, samples, cfg):
    w = CsvWriter(path, ["x", "y"], cfg)
    for row in samples:
        w.write({"x": float(row[0]), "y": float(row[1])})
    w.close()


def write_pgm(path, values, cfg):
    """P5 PGM, 16-bit big-endian, scaled so the max cell maps to 65535."""
    vmax = values.max()
    scaled = np.zeros_like(values) if vmax <= 0 else values / vmax
    quant = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(b"P5\n")
        f.write(provenance_line(cfg).encode() + b"\n")
        f.write(f"{values.shape[1]} {values.shape[0]}\n65535\n".encode())
        f.write(quant.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end]
        pos = end + 1
        if line.startswith(b"#"):
            continue
        parts.extend(line.split())
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if magic != b"P5" or maxval != 65535:
        raise ValueError(f"{path}: not a 16-bit P5 PGM")
    return np.frombuffer(data[pos:], dtype=">u2").reshape(h, w)


def dump_resolved_config(cfg, outdir):
    path = os.path.join(outdir, "resolved_config.json")
    with open(path, "w") as f:
        json.dump({"config": dataclasses.asdict(cfg), "digest": cfg.digest(),
                   "build": BUILD_ID, "format_version": FORMAT_VERSION},
                  f, sort_keys=True, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["iter", "lower", "upper", "energy_data", "energy_gen",
                  "entropy_term", "penalty_term", "s1_mean"]


def cmd_train(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    dump_resolved_config(cfg, cfg.out)
    tcfg = to_train_config(cfg)
    meta = provenance_line(cfg)

    warning = "warning: plain minimax mode, no upper bound" if cfg.upper == "none" else None
    metrics = CsvWriter(os.path.join(cfg.out, "metrics.csv"), METRIC_COLUMNS, cfg,
                        extra_comment=warning)
    timing = CsvWriter(os.path.join(cfg.out, "timing.csv"), ["iter", "wallclock_s"], cfg)
    eval_writer = None
    if cfg.eval_every > 0:
        eval_writer = CsvWriter(os.path.join(cfg.out, "bounds.csv"),
                                ["iter", "lower", "upper", "energy_data", "energy_gen",
                                 "s1_mean", "exact_nll", "mc_se", "bound_ok"], cfg)

    rows = []
    t0 = time.monotonic()

    def sink(row):
        rows.append(row)
        metrics.write(row)
        timing.write({"iter": row["iter"], "wallclock_s": time.monotonic() - t0})

    def sample_sink(it, samples):
        write_samples_csv(os.path.join(cfg.out, f"samples_{it}.csv"), samples, cfg)

    def checkpoint_cb(state):
        trainer.checkpoint_save(state, tcfg, os.path.join(cfg.out, f"checkpoint_{state.iteration}.bbeb"))

    state = trainer.train(tcfg, sink=sink,
                          eval_sink=eval_writer.write if eval_writer else None,
                          sample_sink=sample_sink, checkpoint_cb=checkpoint_cb)
    trainer.checkpoint_save(state, tcfg, os.path.join(cfg.out, "checkpoint.bbeb"))

    final_samples = trainer.generate_samples(state.gen, cfg.samples, np.random.default_rng(cfg.seed + 1))
    write_samples_csv(os.path.join(cfg.out, "samples_final.csv"), final_samples, cfg)
    figures.sample_scatter(final_samples, os.path.join(cfg.out, "samples_final.png"), meta=meta)
    if rows:
        figures.training_curves(rows, os.path.join(cfg.out, "training_curves.png"), meta=meta)
    if eval_writer:
        eval_writer.close()
    metrics.close()
    timing.close()
    if state.incidents:
        with open(os.path.join(cfg.out, "incidents.log"), "w") as f:
            for inc in state.incidents:
                f.write(f"{inc}\n")
    return 0


def _grid_axes(cfg):
    xs = np.linspace(cfg.xmin, cfg.xmax, cfg.grid_res)
    ys = np.linspace(cfg.ymin, cfg.ymax, cfg.grid_res)
    return xs, ys


def cmd_density(cfg):
    if cfg.grid_res < 32:
        print(f"warning: grid {cfg.grid_res}x{cfg.grid_res} is very coarse", file=sys.stderr)
    os.makedirs(cfg.out, exist_ok=True)
    dump_resolved_config(cfg, cfg.out)
    _, energy, _, _, _ = trainer.checkpoint_load_models(cfg.checkpoint)

    xs, ys = _grid_axes(cfg)
    xx, yy = np.meshgrid(xs, ys)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    e = np.empty(len(pts))
    with dk.no_grad():
        for lo in range(0, len(pts), 8192):
            e[lo:lo + 8192] = energy.energy(Tensor(pts[lo:lo + 8192])).data
    w = np.exp(-(e - e.min()))
    cell = (xs[1] - xs[0]) * (ys[1] - ys[0])
    values = (w / (w.sum() * cell)).reshape(cfg.grid_res, cfg.grid_res)

    writer = CsvWriter(os.path.join(cfg.out, "density.csv"), ["x", "y", "value"], cfg)
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            writer.write({"x": float(x), "y": float(y), "value": float(values[iy, ix])})
    writer.close()
    write_pgm(os.path.join(cfg.out, "density.pgm"), values, cfg)
    figures.density_heatmap(values, (cfg.xmin, cfg.xmax, cfg.ymin, cfg.ymax),
                            os.path.join(cfg.out, "density.png"), meta=provenance_line(cfg))
    return 0


def grid_local_maxima(values, xs, ys, top=25):
    """Coordinates of the strongest interior 8-neighborhood maxima."""
    v = values
    interior = v[1:-1, 1:-1]
    is_max = np.ones_like(interior, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            is_max &= interior >= v[1 + dy:v.shape[0] - 1 + dy, 1 + dx:v.shape[1] - 1 + dx]
    iy, ix = np.nonzero(is_max)
    vals = interior[iy, ix]
    order = np.argsort(-vals)[:top]
    return np.stack([xs[ix[order] + 1], ys[iy[order] + 1]], axis=1)


def cmd_eval(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    dump_resolved_config(cfg, cfg.out)
    gen, energy, disc, arch, iteration = trainer.checkpoint_load_models(cfg.checkpoint)
    rng = np.random.default_rng(cfg.seed)
    meta = provenance_line(cfg)

    if cfg.task == "modes":
        samples = trainer.generate_samples(gen, cfg.samples, rng)
        rep = toydata.mode_report(samples)
        w = CsvWriter(os.path.join(cfg.out, "modes.csv"),
                      ["modes_captured", "kl_to_uniform", "unassigned_fraction", "n_samples"], cfg)
        w.write({"modes_captured": rep.modes_captured, "kl_to_uniform": rep.kl_to_uniform,
                 "unassigned_fraction": rep.unassigned_fraction, "n_samples": rep.n_samples})
        w.close()
        hist = CsvWriter(os.path.join(cfg.out, "mode_histogram.csv"), ["mode", "count"], cfg)
        for i, c in enumerate(rep.histogram):
            hist.write({"mode": i, "count": int(c)})
        hist.close()
        write_samples_csv(os.path.join(cfg.out, "samples.csv"), samples, cfg)
        figures.mode_bar(rep.histogram, os.path.join(cfg.out, "mode_hist.png"), meta=meta)
        figures.sample_scatter(samples, os.path.join(cfg.out, "samples.png"), meta=meta)
        return 0

    if cfg.task == "anisotropy":
        z = rng.standard_normal(size=(512, gen.latent_dim))
        c_z = spectral.anisotropy_index(gen, z)
        w = CsvWriter(os.path.join(cfg.out, "anisotropy.csv"),
                      ["mean", "std", "n_draws"], cfg)
        w.write({"mean": float(c_z.mean()), "std": float(c_z.std()), "n_draws": 512})
        w.close()
        return 0

    if cfg.task == "ood":
        in_samples = toydata.DATASETS[cfg.dataset]["sample"](cfg.samples, rng)
        out_samples = toydata.DATASETS[cfg.ood_dataset]["sample"](cfg.samples, rng)
        a, p, f80 = toydata.ood_scores(energy, in_samples, out_samples)
        w = CsvWriter(os.path.join(cfg.out, "ood.csv"),
                      ["auroc", "auprc", "fpr80", "in_dataset", "out_dataset", "n"], cfg)
        w.write({"auroc": a, "auprc": p, "fpr80": f80,
                 "in_dataset": cfg.dataset, "out_dataset": cfg.ood_dataset, "n": cfg.samples})
        w.close()
        figures.score_hist(toydata._score(energy, in_samples), toydata._score(energy, out_samples),
                           os.path.join(cfg.out, "score_hist.png"), meta=meta)
        return 0

    if cfg.task == "bounds":
        tcfg = to_train_config(cfg)
        state = trainer.TrainState(iteration, gen, energy, disc, None, None, None, rng)
        eval_data = toydata.DATASETS[cfg.dataset]["sample"](cfg.eval_batch, rng)
        row = trainer.record_bound_trajectories(state, tcfg, eval_data, rng)
        columns = ["iter", "lower", "upper", "energy_data", "energy_gen", "s1_mean",
                   "exact_nll", "mc_se", "bound_ok"]
        w = CsvWriter(os.path.join(cfg.out, "bounds_eval.csv"), columns, cfg)
        w.write(row)
        w.close()
        return 0

    print(f"error: unknown eval task {cfg.task!r}", file=sys.stderr)
    return 2


def cmd_fixed_energy(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    dump_resolved_config(cfg, cfg.out)
    tcfg = to_train_config(cfg)
    meta = provenance_line(cfg)

    writer = CsvWriter(os.path.join(cfg.out, "kl_curve.csv"),
                       ["iter", "kl", "lower", "energy_gen", "s1_mean"], cfg)

    def sample_sink(it, samples):
        write_samples_csv(os.path.join(cfg.out, f"samples_{it}.csv"), samples, cfg)

    rows, state = trainer.run_fixed_energy_experiment(tcfg, sink=writer.write,
                                                      sample_sink=sample_sink)
    writer.close()
    figures.kl_curve(rows, os.path.join(cfg.out, "kl_curve.png"), meta=meta)
    final = trainer.generate_samples(state.gen, 4000, np.random.default_rng(cfg.seed + 2))
    figures.sample_scatter(final, os.path.join(cfg.out, "samples_final.png"), meta=meta)
    write_samples_csv(os.path.join(cfg.out, "samples_final.csv"), final, cfg)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="JSON config file merged below CLI flags")
    p.add_argument("--dataset", choices=sorted(toydata.DATASETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _add_train_flags(p):
    p.add_argument("--lower", choices=["sv", "mi"])
    p.add_argument("--upper", choices=["gp", "diff", "0gp", "none"])
    p.add_argument("--lambda", dest="lam", type=float, help="entropy regularizer weight")
    p.add_argument("--zeta", type=float, help="hinge margin of the gp penalty")
    p.add_argument("--ms1", help="support-ratio schedule: fixed, fixed:<r> or decay")
    p.add_argument("--sigma-min", dest="sigma_min", type=float)
    p.add_argument("--sigma-max", dest="sigma_max", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--energy", choices=["mlp", "flow"])
    p.add_argument("--sigma-noise", dest="sigma_noise", type=float)
    p.add_argument("--lr-energy", dest="lr_energy", type=float)
    p.add_argument("--lr-generator", dest="lr_generator", type=float)
    p.add_argument("--lr-discriminator", dest="lr_discriminator", type=float)
    p.add_argument("--spectral-iters", dest="spectral_iters", type=int)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--sample-every", dest="sample_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-batch", dest="eval_batch", type=int)
    p.add_argument("--kl-samples", dest="kl_samples", type=int)
    p.add_argument("--samples", type=int, help="final sample dump size")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bbebm",
        description="Train energy-based models between a maximized lower and a "
                    "minimized upper bound on the negative log-likelihood.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="alternating minimax training")
    _add_common(p_train)
    _add_train_flags(p_train)

    p_density = sub.add_parser("density", help="normalized exp(-E) heatmap from a checkpoint")
    _add_common(p_density)
    p_density.add_argument("--checkpoint", required=True)
    p_density.add_argument("--grid-res", dest="grid_res", type=int)
    p_density.add_argument("--xmin", type=float)
    p_density.add_argument("--xmax", type=float)
    p_density.add_argument("--ymin", type=float)
    p_density.add_argument("--ymax", type=float)

    p_eval = sub.add_parser("eval", help="metrics from a trained checkpoint")
    _add_common(p_eval)
    _add_train_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--task", choices=["modes", "anisotropy", "ood", "bounds"], required=True)
    p_eval.add_argument("--ood-dataset", dest="ood_dataset", choices=sorted(toydata.DATASETS))

    p_fixed = sub.add_parser("fixed-energy",
                             help="freeze the energy at the exact mixture density and train "
                                  "only the generator")
    _add_common(p_fixed)
    _add_train_flags(p_fixed)
    return parser


COMMANDS = {
    "train": cmd_train,
    "density": cmd_density,
    "eval": cmd_eval,
    "fixed-energy": cmd_fixed_energy,
}


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        cfg = resolve_config(args, config_path)
        if command == "fixed-energy":
            cfg.log_every = args.get("log_every") or 500
        return COMMANDS[command](cfg)
    except (ValueError, FileNotFoundError, trainer.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
