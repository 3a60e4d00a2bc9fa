"""Alternating minimax training: the energy minimizes the upper bound, the
generator (and critic, when present) maximizes the lower bound.  Also the
frozen-energy generator experiment, converged-bound trajectory logging and a
self-contained binary checkpoint format.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import bounds as bounds_mod
from . import diffkernel as dk
from . import netlib, spectral, toydata
from .bounds import BoundSpec, BoundValue
from .diffkernel import Tensor
from .spectral import EVAL_CFG

CHECKPOINT_MAGIC = b"BBEB"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 150_000
    batch_size: int = 200
    lr_energy: float = 2e-4
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    energy_steps_per_generator_step: int = 1
    seed: int = 0
    bound: BoundSpec = field(default_factory=BoundSpec)
    dataset: str = "25gaussians"

    gen_widths: tuple = (2, 128, 128, 128, 2)
    gen_activation: str = "leaky_relu"
    sigma_noise: float = 0.01
    energy_variant: str = "mlp"          # mlp | flow
    energy_widths: tuple = (2, 128, 128, 128, 1)
    energy_activation: str = "leaky_relu"
    flow_layers: int = 6
    flow_hidden: tuple = (64, 64)
    flow_clamp: float = 4.0
    disc_hidden: tuple = (128, 128)

    log_every: int = 100
    sample_every: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    eval_batch: int = 1000
    kl_samples: int = 4000               # fixed-energy experiment KL estimate size

    def __post_init__(self):
        for name in ("iterations", "batch_size", "energy_steps_per_generator_step", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dataset not in toydata.DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}; choose from {sorted(toydata.DATASETS)}")


@dataclass
class TrainState:
    iteration: int
    gen: netlib.Generator
    energy: object
    disc: netlib.Discriminator | None
    adam_e: netlib.Adam
    adam_g: netlib.Adam
    adam_d: netlib.Adam | None
    rng: np.random.Generator
    incidents: list = field(default_factory=list)


def build_state(cfg):
    """Construct fresh models and optimizer states from the seed."""
    root = np.random.SeedSequence(cfg.seed)
    init_rng, train_rng = (np.random.default_rng(s) for s in root.spawn(2))

    gen = netlib.Generator(list(cfg.gen_widths), cfg.gen_activation, cfg.sigma_noise, init_rng)
    if cfg.energy_variant == "mlp":
        energy = netlib.MLPEnergy(list(cfg.energy_widths), cfg.energy_activation, init_rng,
                                  time_conditioned=cfg.bound.upper == "diff")
    elif cfg.energy_variant == "flow":
        energy = netlib.CouplingFlowEnergy(dim=cfg.gen_widths[-1], n_layers=cfg.flow_layers,
                                           hidden=cfg.flow_hidden, clamp=cfg.flow_clamp,
                                           rng=init_rng,
                                           time_conditioned=cfg.bound.upper == "diff")
    else:
        raise ValueError(f"unknown energy variant {cfg.energy_variant!r}")

    disc = adam_d = None
    if cfg.bound.lower == "mi":
        disc = netlib.Discriminator(cfg.gen_widths[-1], cfg.gen_widths[0],
                                    hidden=cfg.disc_hidden, rng=init_rng)
        adam_d = netlib.Adam(disc.params(), cfg.lr_discriminator, cfg.beta1, cfg.beta2)

    adam_e = netlib.Adam(energy.params(), cfg.lr_energy, cfg.beta1, cfg.beta2)
    adam_g = netlib.Adam(gen.params(), cfg.lr_generator, cfg.beta1, cfg.beta2)
    return TrainState(0, gen, energy, disc, adam_e, adam_g, adam_d, train_rng)


def _grad_arrays(loss, params):
    grads = dk.vjp(loss, list(params.values()))
    return {k: g.data for k, g in zip(params, grads)}


def _lower(state, cfg, data, z, entropy_mode):
    spec = cfg.bound
    if spec.lower == "sv":
        # side stream for detached entropy: main-rng consumption then does not
        # depend on whether this step logs, so resumed runs stay bit-exact
        side = np.random.default_rng((cfg.seed, state.iteration)) if entropy_mode == "detached" else None
        low = bounds_mod.lower_sv(state.energy, state.gen, data, z, spec, state.rng,
                                  entropy_mode=entropy_mode, entropy_rng=side)
        return low, None
    return bounds_mod.lower_mi(state.energy, state.gen, state.disc, data, z, spec, state.rng)


def _upper(state, cfg, data, z, low):
    spec = cfg.bound
    if spec.upper == "gp":
        return bounds_mod.upper_gp(state.energy, state.gen, z, low, spec, state.rng,
                                   iteration=state.iteration)
    if spec.upper == "diff":
        return bounds_mod.upper_diff(state.energy, state.gen, z, low, spec, state.rng)
    if spec.upper == "0gp":
        return bounds_mod.upper_0gp(state.energy, state.gen, data, z, low, spec, state.rng)
    return None


def train_step(state, cfg, sampler):
    """One alternating step; returns a metrics row on logging iterations."""
    spec = cfg.bound
    log_step = state.iteration % cfg.log_every == 0 or state.iteration == cfg.iterations - 1
    row = {"iter": state.iteration} if log_step else None

    # -- energy phase: minimize the upper bound over the energy parameters --
    for _ in range(cfg.energy_steps_per_generator_step):
        data = sampler(cfg.batch_size, state.rng)
        z = state.rng.standard_normal(size=(cfg.batch_size, state.gen.latent_dim))
        entropy_mode = "detached" if log_step else "skip"
        low, _ = _lower(state, cfg, data, z, entropy_mode)
        up = _upper(state, cfg, data, z, low)
        loss = (up or low).loss
        if not np.isfinite(loss.data):
            state.incidents.append((state.iteration, "energy", float(loss.data)))
        elif not state.adam_e.step(_grad_arrays(loss, state.energy.params())):
            state.incidents.append((state.iteration, "energy", "non-finite gradient"))
        if row is not None:
            d = (up or low).diagnostics
            row.update({
                "upper": float(loss.data) if up is not None else float("nan"),
                "energy_data": d["energy_data"], "energy_gen": d["energy_gen"],
                "penalty_term": d["penalty_term"],
                "hinge_active": int(bool(d.get("hinge_active", False))),
            })

    # -- generator phase: maximize the lower bound over generator (and critic) --
    data = sampler(cfg.batch_size, state.rng)
    z = state.rng.standard_normal(size=(cfg.batch_size, state.gen.latent_dim))
    low, disc_loss = _lower(state, cfg, data, z, entropy_mode="grad")
    if low.diagnostics.get("degenerate_rows", 0) > 0:
        state.incidents.append((state.iteration, "generator",
                                f"degenerate jacobian rows: {low.diagnostics['degenerate_rows']}"))
    g_loss = -low.loss
    if not np.isfinite(g_loss.data):
        state.incidents.append((state.iteration, "generator", float(g_loss.data)))
    else:
        if not state.adam_g.step(_grad_arrays(g_loss, state.gen.params())):
            state.incidents.append((state.iteration, "generator", "non-finite gradient"))
        if disc_loss is not None:
            if not state.adam_d.step(_grad_arrays(disc_loss, state.disc.params())):
                state.incidents.append((state.iteration, "discriminator", "non-finite gradient"))
    if row is not None:
        row.update({
            "lower": float(low.loss.data),
            "entropy_term": low.diagnostics["entropy_term"],
            "s1_mean": low.diagnostics["s1_mean"],
        })

    state.iteration += 1
    return row


def train(cfg, sink=None, eval_sink=None, sample_sink=None, checkpoint_cb=None, state=None):
    """Run the training loop; callbacks receive metric rows and artifacts."""
    sampler = toydata.DATASETS[cfg.dataset]["sample"]
    if state is None:
        state = build_state(cfg)
    eval_data = None
    if cfg.eval_every > 0:
        eval_data = sampler(cfg.eval_batch, np.random.default_rng(cfg.seed + 7919))

    while state.iteration < cfg.iterations:
        it = state.iteration
        if cfg.eval_every > 0 and it % cfg.eval_every == 0 and eval_sink is not None:
            eval_sink(record_bound_trajectories(state, cfg, eval_data))
        row = train_step(state, cfg, sampler)
        if row is not None and sink is not None:
            sink(row)
        done = state.iteration
        if cfg.sample_every > 0 and sample_sink is not None and \
                (done % cfg.sample_every == 0 or done == cfg.iterations):
            sample_sink(done, generate_samples(state.gen, 10_000, np.random.default_rng(cfg.seed + done)))
        if cfg.checkpoint_every > 0 and checkpoint_cb is not None and done % cfg.checkpoint_every == 0:
            checkpoint_cb(state)
    if cfg.eval_every > 0 and eval_sink is not None:
        eval_sink(record_bound_trajectories(state, cfg, eval_data))
    return state


def generate_samples(gen, n, rng):
    z = rng.standard_normal(size=(n, gen.latent_dim))
    with dk.no_grad():
        return netlib.sample_generator(gen, Tensor(z), rng).data


def run_fixed_energy_experiment(cfg, sink=None, sample_sink=None):
    """Freeze the energy at the exact mixture negative log-density and train
    only the generator to maximize the lower bound; tracks the smoothed KL
    between generated samples and the mixture.
    """
    if cfg.dataset != "25gaussians":
        raise ValueError("the fixed-energy experiment runs on the 25-Gaussians mixture")
    mix = toydata.MIX_25
    energy = toydata.mixture_energy_fn(mix)
    sampler = toydata.DATASETS[cfg.dataset]["sample"]
    state = build_state(replace(cfg, energy_variant="mlp"))
    state = TrainState(0, state.gen, energy, None, state.adam_e, state.adam_g, None, state.rng)
    spec = cfg.bound

    rows = []
    while state.iteration < cfg.iterations:
        it = state.iteration
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            est = toydata.kl_pg_pdata(state.gen, mix, n=cfg.kl_samples,
                                      rng=np.random.default_rng(cfg.seed + it))
            row = {"iter": it, "kl": est.value}
        else:
            row = None

        data = sampler(cfg.batch_size, state.rng)
        z = state.rng.standard_normal(size=(cfg.batch_size, state.gen.latent_dim))
        low = bounds_mod.lower_sv(energy, state.gen, data, z, spec, state.rng, entropy_mode="grad")
        g_loss = -low.loss
        if np.isfinite(g_loss.data):
            state.adam_g.step(_grad_arrays(g_loss, state.gen.params()))
        else:
            state.incidents.append((it, "generator", float(g_loss.data)))

        if row is not None:
            row.update({"lower": float(low.loss.data),
                        "energy_gen": low.diagnostics["energy_gen"],
                        "s1_mean": low.diagnostics["s1_mean"]})
            rows.append(row)
            if sink is not None:
                sink(row)
        if sample_sink is not None and cfg.sample_every > 0 and \
                (it % cfg.sample_every == 0 or it == cfg.iterations - 1):
            sample_sink(it, generate_samples(state.gen, 4000, np.random.default_rng(cfg.seed + it)))
        state.iteration += 1
    return rows, state


def record_bound_trajectories(state, cfg, eval_data, rng=None):
    """Converged-spectral evaluation of both bounds on held-out data.

    Runs the singular-value descent twice from independent starts and keeps
    the row-wise minimum, so the reported lower bound does not ride on a
    stray saddle.  For flow energies the exact data NLL is the mean energy
    itself (the flow density is normalized), logged with the Monte-Carlo
    standard error of the bound-vs-NLL comparison.
    """
    rng = rng or np.random.default_rng(cfg.seed + 1_000_003 + state.iteration)
    spec = cfg.bound
    e_fn = state.energy.energy if hasattr(state.energy, "energy") else state.energy
    gen = state.gen
    d = gen.latent_dim
    n = len(eval_data)

    z = rng.standard_normal(size=(n, d))
    with dk.no_grad():
        e_data_rows = e_fn(Tensor(np.asarray(eval_data, dtype=np.float64))).data
        x_gen = gen.apply(Tensor(z)).data + gen.sigma_noise * rng.standard_normal(size=(n, gen.data_dim))
        e_gen_rows = e_fn(Tensor(x_gen)).data

    res1 = spectral.smallest_singular_value(gen, z, EVAL_CFG, rng, degenerate="floor")
    res2 = spectral.smallest_singular_value(gen, z, EVAL_CFG, rng, degenerate="floor")
    s1 = np.minimum(res1.s1_estimate, res2.s1_estimate)
    ent_rows = d * np.log(s1)

    h0 = bounds_mod.base_entropy(d)
    lower = e_data_rows.mean() - e_gen_rows.mean() + h0 + spec.lam * ent_rows.mean()
    low_bv = BoundValue(Tensor(lower), {"energy_data": e_data_rows.mean(),
                                        "energy_gen": e_gen_rows.mean(),
                                        "entropy_term": h0 + spec.lam * ent_rows.mean(),
                                        "s1_mean": s1.mean(), "penalty_term": 0.0,
                                        "hinge_active": False})
    up = _upper(state, cfg, eval_data, z, low_bv)
    upper = float(up.loss.data) if up is not None else float("nan")

    row = {"iter": state.iteration, "lower": float(lower), "upper": upper,
           "energy_data": float(e_data_rows.mean()), "energy_gen": float(e_gen_rows.mean()),
           "s1_mean": float(s1.mean())}

    if getattr(state.energy, "variant", None) == "coupling_flow":
        # exact NLL: the flow density is normalized, so NLL == mean data energy
        nll = float(e_data_rows.mean())
        se = float(np.sqrt(e_gen_rows.var() / n + (spec.lam ** 2) * ent_rows.var() / n))
        row.update({"exact_nll": nll, "mc_se": se,
                    "bound_ok": int(lower <= nll + 3 * se)})
    return row


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _arch_blob(cfg, state):
    arch = {
        "generator": state.gen.arch(),
        "energy": state.energy.arch() if hasattr(state.energy, "arch") else {"kind": "external"},
        "discriminator": state.disc.arch() if state.disc is not None else None,
        "bound": {"lower": cfg.bound.lower, "upper": cfg.bound.upper},
        "dataset": cfg.dataset,
    }
    blob = json.dumps(arch, sort_keys=True, separators=(",", ":")).encode()
    return blob, hashlib.sha256(blob).digest()


def _collect_records(state):
    records = {}
    records.update({k: p.data for k, p in state.gen.params().items()})
    if hasattr(state.energy, "params"):
        records.update({k: p.data for k, p in state.energy.params().items()})
    if state.disc is not None:
        records.update({k: p.data for k, p in state.disc.params().items()})
    opt_states = {"opt_g": state.adam_g, "opt_e": state.adam_e}
    if state.adam_d is not None:
        opt_states["opt_d"] = state.adam_d
    for prefix, opt in opt_states.items():
        for k, arr in opt.state().items():
            records[f"{prefix}.{k}"] = arr
    records["meta.iteration"] = np.asarray([float(state.iteration)])
    return records


def _write_record(f, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode()
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        f.write(struct.pack("<I", ext))
    f.write(arr.tobytes())


def _read_record(f):
    raw = f.read(4)
    if len(raw) < 4:
        raise CheckpointError("truncated record header")
    (name_len,) = struct.unpack("<I", raw)
    name = f.read(name_len).decode()
    (rank,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
    return name, data


def checkpoint_save(state, cfg, path):
    """Binary checkpoint: magic, version, architecture digest + blob, tensor
    records (little-endian f64), optimizer records, then the rng state."""
    blob, digest = _arch_blob(cfg, state)
    records = _collect_records(state)
    rng_blob = json.dumps(state.rng.bit_generator.state, sort_keys=True,
                          separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(digest)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(records)))
        for name in sorted(records):
            _write_record(f, name, records[name])
        f.write(struct.pack("<I", len(rng_blob)))
        f.write(rng_blob)


def _read_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        digest = f.read(32)
        (blob_len,) = struct.unpack("<I", f.read(4))
        blob = f.read(blob_len)
        if hashlib.sha256(blob).digest() != digest:
            raise CheckpointError(f"{path}: architecture blob digest mismatch")
        (n_records,) = struct.unpack("<I", f.read(4))
        records = dict(_read_record(f) for _ in range(n_records))
        (rng_len,) = struct.unpack("<I", f.read(4))
        rng_state = json.loads(f.read(rng_len).decode())
    return blob, records, rng_state


def checkpoint_load(path, cfg):
    """Restore a TrainState; refuses version or architecture mismatches."""
    blob, records, rng_state = _read_checkpoint(path)
    state = build_state(cfg)
    want_blob, _ = _arch_blob(cfg, state)
    if want_blob != blob:
        raise CheckpointError(
            "architecture mismatch between checkpoint and config:\n"
            f"  checkpoint: {blob.decode()}\n  config:     {want_blob.decode()}")

    params = dict(state.gen.params())
    if hasattr(state.energy, "params"):
        params.update(state.energy.params())
    if state.disc is not None:
        params.update(state.disc.params())
    for name, p in params.items():
        arr = records.pop(name, None)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor record {name!r}")
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = np.array(arr)

    state.adam_g.load_state(_strip_prefix(records, "opt_g."))
    state.adam_e.load_state(_strip_prefix(records, "opt_e."))
    if state.adam_d is not None:
        state.adam_d.load_state(_strip_prefix(records, "opt_d."))
    state.iteration = int(records["meta.iteration"][0])
    state.rng.bit_generator.state = rng_state
    return state


def _strip_prefix(records, prefix):
    return {k[len(prefix):]: v for k, v in records.items() if k.startswith(prefix)}


def checkpoint_load_models(path):
    """Rebuild just the networks from a checkpoint's own architecture blob.

    Lets density/eval commands run without the original training config.
    Returns (generator, energy, discriminator-or-None, arch dict, iteration).
    """
    blob, records, _ = _read_checkpoint(path)
    arch = json.loads(blob.decode())
    rng = np.random.default_rng(0)

    ga = arch["generator"]
    gen = netlib.Generator(ga["widths"], ga["activation"], ga["sigma_noise"], rng)
    ea = arch["energy"]
    if ea["kind"] == "mlp_energy":
        energy = netlib.MLPEnergy(ea["widths"], ea["activation"], rng,
                                  time_conditioned=ea.get("time_conditioned", False))
    elif ea["kind"] == "coupling_flow_energy":
        energy = netlib.CouplingFlowEnergy(dim=ea["dim"], n_layers=ea["n_layers"],
                                           hidden=tuple(ea["hidden"]), clamp=ea["clamp"], rng=rng,
                                           time_conditioned=ea.get("time_conditioned", False))
    else:
        raise CheckpointError(f"cannot rebuild energy of kind {ea['kind']!r}")
    disc = None
    if arch.get("discriminator"):
        da = arch["discriminator"]
        disc = netlib.Discriminator(da["widths"][0] - gen.latent_dim, gen.latent_dim,
                                    hidden=tuple(da["widths"][1:-1]), activation=da["activation"],
                                    rng=rng)

    params = dict(gen.params())
    params.update(energy.params())
    if disc is not None:
        params.update(disc.params())
    for name, p in params.items():
        arr = records.get(name)
        if arr is None:
            raise CheckpointError(f"checkpoint is missing tensor record {name!r}")
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = np.array(arr)
    iteration = int(records["meta.iteration"][0])
    return gen, energy, disc, arch, iteration
