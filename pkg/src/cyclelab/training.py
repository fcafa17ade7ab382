"""Min-max training loop: alternating generator/discriminator Adam updates,
linear learning-rate decay, replay pools, and bit-exact checkpoint resume.

Every random draw comes from a counter-mixed stream keyed on (seed, purpose,
iteration), so the full run is a pure function of (config, dataset, seed) and
resuming at iteration k replays exactly the tail of an uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .losses import (DEFENSE_MODES, LossBreakdown, assemble_generator_objective,
                     lsgan_losses)
from .networks import ArchConfig, init_params, to_model
from .scenes import load_manifest, load_split
from .seeding import derive_seed, torch_gen

log = logging.getLogger(__name__)

NET_NAMES = ("g_ab", "g_ba", "d_a", "d_b", "guess_a", "guess_b")
NET_KINDS = {"g_ab": "generator", "g_ba": "generator",
             "d_a": "discriminator", "d_b": "discriminator",
             "guess_a": "guess", "guess_b": "guess"}

# Defense-appropriate weight defaults, installed when the caller leaves them
# unset. The guess row follows the Maps experiment; noise follows GTA.
DEFENSE_DEFAULTS = {
    "none": dict(lambda_a=10.0, lambda_b=10.0, lambda_guess=0.0, sigma=0.0),
    "noise": dict(lambda_a=5.0, lambda_b=3.0, lambda_guess=0.0, sigma=0.06),
    "guess": dict(lambda_a=1.0, lambda_b=2.0, lambda_guess=1.0, sigma=0.0),
    "noise+guess": dict(lambda_a=1.0, lambda_b=2.0, lambda_guess=1.0, sigma=0.06),
}

# One-command reproductions of the per-dataset configuration rows.
PRESETS = {
    "gta-baseline": dict(defense="none", lambda_a=10.0, lambda_b=10.0),
    "gta-noise": dict(defense="noise", sigma=0.06, lambda_a=5.0, lambda_b=3.0),
    "gta-guess": dict(defense="guess", lambda_guess=2.0, lambda_a=1.5, lambda_b=1.0),
    "maps-baseline": dict(defense="none", lambda_a=10.0, lambda_b=10.0),
    "maps-noise": dict(defense="noise", sigma=0.06, lambda_a=10.0, lambda_b=10.0),
    "maps-guess": dict(defense="guess", lambda_guess=1.0, lambda_a=1.0, lambda_b=2.0),
    "synaction-baseline": dict(defense="none", lambda_a=10.0, lambda_b=10.0),
    "synaction-noise": dict(defense="noise", sigma=0.1, lambda_a=10.0, lambda_b=10.0),
    "synaction-guess": dict(defense="guess", lambda_guess=1.0, lambda_a=2.0,
                            lambda_b=2.0),
}


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss aborts the run (state checkpointed)."""


@dataclass
class TrainConfig:
    defense: str = "none"
    lambda_a: float | None = None
    lambda_b: float | None = None
    lambda_guess: float | None = None
    sigma: float | None = None
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_iters: int = 20000
    decay_start_iter: int | None = None
    batch_size: int = 1
    pool_size: int = 50
    seed: int = 0
    image_size: int = 32
    gen_filters: int = 16
    gen_blocks: int = 2
    disc_filters: int = 16
    disc_layers: int = 3
    checkpoint_every: int = 0
    identity: bool = False
    noise_cycle_a: bool = True
    noise_cycle_b: bool = True
    guess_loss_form: str = "lsq"
    update_order: str = "generator_first"
    disc_steps: int = 1

    def __post_init__(self):
        if self.defense not in DEFENSE_MODES:
            raise ValueError(f"defense must be one of {DEFENSE_MODES}, "
                             f"got {self.defense!r}")
        defaults = DEFENSE_DEFAULTS[self.defense]
        for name in ("lambda_a", "lambda_b", "lambda_guess", "sigma"):
            if getattr(self, name) is None:
                setattr(self, name, defaults[name])
        if self.decay_start_iter is None:
            self.decay_start_iter = self.total_iters // 2
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0,1], got {self.sigma}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if min(self.lambda_a, self.lambda_b, self.lambda_guess) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0 <= self.decay_start_iter <= self.total_iters:
            raise ValueError(f"decay_start_iter {self.decay_start_iter} outside "
                             f"[0, {self.total_iters}]")
        if self.batch_size < 1 or self.pool_size < 0 or self.total_iters < 0:
            raise ValueError("batch_size >= 1, pool_size >= 0, total_iters >= 0")
        if self.update_order not in ("generator_first", "discriminator_first"):
            raise ValueError(f"bad update_order {self.update_order!r}")
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be >= 1")

    def arch(self) -> ArchConfig:
        return ArchConfig(gen_filters=self.gen_filters, gen_blocks=self.gen_blocks,
                          disc_filters=self.disc_filters,
                          disc_layers=self.disc_layers)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Constant until decay_start_iter, then linear to zero at total_iters."""
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration < cfg.decay_start_iter:
        return cfg.lr
    span = cfg.total_iters - cfg.decay_start_iter
    if span == 0:
        return 0.0 if iteration == cfg.total_iters else cfg.lr
    return cfg.lr * (cfg.total_iters - iteration) / span


class ImagePool:
    """History buffer of generated fakes for discriminator updates."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.images: list[torch.Tensor] = []

    def query_one(self, image: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        """Insert while filling; once full, return the input with p=0.5,
        otherwise swap it against a uniformly drawn stored entry."""
        if self.capacity == 0:
            return image
        if len(self.images) < self.capacity:
            self.images.append(image.clone())
            return image
        if torch.rand((), generator=gen).item() < 0.5:
            return image
        idx = int(torch.randint(self.capacity, (), generator=gen).item())
        out = self.images[idx]
        self.images[idx] = image.clone()
        return out

    def query(self, batch: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        return torch.stack([self.query_one(batch[i], gen)
                            for i in range(batch.shape[0])])


def replay_sample(pool: ImagePool, image: torch.Tensor,
                  gen: torch.Generator) -> torch.Tensor:
    return pool.query_one(image, gen)


@dataclass
class AdamState:
    step: int
    m: list[torch.Tensor]
    v: list[torch.Tensor]

    @classmethod
    def zeros(cls, params: list[torch.Tensor]) -> "AdamState":
        return cls(step=0,
                   m=[torch.zeros_like(p) for p in params],
                   v=[torch.zeros_like(p) for p in params])


def adam_update(params: list[torch.Tensor], grads: list[torch.Tensor],
                moments: AdamState, lr: float, beta1: float = 0.5,
                beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """Bias-corrected Adam step in place. Returns False (and leaves params and
    moments untouched) when any gradient is non-finite."""
    for g in grads:
        if not torch.isfinite(g).all():
            log.warning("non-finite gradient, Adam step %d aborted",
                        moments.step + 1)
            return False
    moments.step += 1
    t = moments.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, moments.m, moments.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
    return True


@dataclass
class RunState:
    cfg: TrainConfig
    iteration: int
    nets: dict[str, nn.Module]
    adam: dict[str, AdamState]
    pools: dict[str, ImagePool]

    def parameters(self, group: str) -> list[torch.Tensor]:
        if group == "gen":
            return (list(self.nets["g_ab"].parameters())
                    + list(self.nets["g_ba"].parameters()))
        return list(self.nets[group].parameters())


def init_run_state(cfg: TrainConfig) -> RunState:
    arch = cfg.arch()
    nets = {name: init_params(NET_KINDS[name], derive_seed(cfg.seed, "net", name),
                              arch)
            for name in NET_NAMES}
    state = RunState(cfg=cfg, iteration=0, nets=nets, adam={}, pools={})
    for group in ("gen", "d_a", "d_b", "guess_a", "guess_b"):
        state.adam[group] = AdamState.zeros(state.parameters(group))
    state.pools = {"a": ImagePool(cfg.pool_size), "b": ImagePool(cfg.pool_size)}
    return state


def save_run_state(state: RunState, path: Path | str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, net in state.nets.items():
        for pname, p in net.named_parameters():
            arrays[f"{name}.{pname}"] = p.detach().numpy().astype(np.float32)
    for group, adam in state.adam.items():
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"adam.{group}.{i}.m"] = m.numpy().astype(np.float32)
            arrays[f"adam.{group}.{i}.v"] = v.numpy().astype(np.float32)
    for dom, pool in state.pools.items():
        if pool.images:
            stacked = torch.stack(pool.images).numpy().astype(np.float32)
        else:
            s = state.cfg.image_size
            stacked = np.zeros((0, 3, s, s), dtype=np.float32)
        arrays[f"pool.{dom}"] = stacked
    metadata = {
        "kind": "run_state",
        "iteration": state.iteration,
        "seed": state.cfg.seed,
        "config": dataclasses.asdict(state.cfg),
        "adam_steps": {g: a.step for g, a in state.adam.items()},
    }
    checkpoint.save(path, metadata, arrays)


def load_run_state(path: Path | str) -> RunState:
    metadata, arrays = checkpoint.load(path)
    if metadata.get("kind") != "run_state":
        raise checkpoint.CorruptCheckpointError(
            f"not a run-state checkpoint: kind={metadata.get('kind')!r}")
    cfg = TrainConfig(**metadata["config"])
    state = init_run_state(cfg)
    state.iteration = metadata["iteration"]
    with torch.no_grad():
        for name, net in state.nets.items():
            for pname, p in net.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"{name}.{pname}"]))
        for group, adam in state.adam.items():
            adam.step = metadata["adam_steps"][group]
            for i in range(len(adam.m)):
                adam.m[i].copy_(torch.from_numpy(arrays[f"adam.{group}.{i}.m"]))
                adam.v[i].copy_(torch.from_numpy(arrays[f"adam.{group}.{i}.v"]))
        for dom, pool in state.pools.items():
            stacked = arrays[f"pool.{dom}"]
            pool.images = [torch.from_numpy(stacked[i].copy())
                           for i in range(stacked.shape[0])]
    return state


def _load_train_tensors(dataset_dir: Path | str) -> tuple[torch.Tensor, torch.Tensor]:
    manifest = load_manifest(dataset_dir, check_files=False)
    def prep(split):
        arr = load_split(dataset_dir, split, manifest)
        return to_model(torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous())
    return prep("trainA"), prep("trainB")


def _sample_indices(seed: int, tag: str, iteration: int, n: int,
                    batch: int) -> torch.Tensor:
    g = torch_gen(seed, tag, iteration)
    return torch.randint(n, (batch,), generator=g)


def _log_row(fh, iteration: int, lr: float, br: LossBreakdown) -> None:
    fh.write(",".join([str(iteration), repr(lr)] + br.csv_row()) + "\n")


def _disc_update(state: RunState, name: str, real: torch.Tensor,
                 fake: torch.Tensor, lr: float) -> float:
    cfg = state.cfg
    net = state.nets[name]
    d_loss, _ = lsgan_losses(net(real), net(fake.detach()))
    if not torch.isfinite(d_loss):
        raise TrainingDiverged(f"non-finite {name} loss")
    grads = torch.autograd.grad(d_loss, list(net.parameters()))
    adam_update(list(net.parameters()), grads, state.adam[name], lr,
                cfg.beta1, cfg.beta2, cfg.adam_eps)
    return d_loss.item()


def train_step(state: RunState, train_a: torch.Tensor, train_b: torch.Tensor,
               it: int) -> tuple[float, LossBreakdown]:
    """One full iteration: unpaired batch, generator step, discriminator and
    guess steps. Advances state.iteration; returns (lr, loss breakdown)."""
    cfg = state.cfg
    seed = cfg.seed
    lr = lr_at(it, cfg)
    use_guess = cfg.defense in ("guess", "noise+guess")
    x = train_a[_sample_indices(seed, "batch_a", it, train_a.shape[0],
                                cfg.batch_size)]
    y = train_b[_sample_indices(seed, "batch_b", it, train_b.shape[0],
                                cfg.batch_size)]

    obj = assemble_generator_objective(
        x, y, g_ab=state.nets["g_ab"], g_ba=state.nets["g_ba"],
        d_a=state.nets["d_a"], d_b=state.nets["d_b"], cfg=cfg,
        guess_a=state.nets["guess_a"], guess_b=state.nets["guess_b"],
        noise_gen_a=torch_gen(seed, "noise_a", it),
        noise_gen_b=torch_gen(seed, "noise_b", it),
        coin_a=derive_seed(seed, "coin_a", it) & 1,
        coin_b=derive_seed(seed, "coin_b", it) & 1)
    if not math.isfinite(obj.breakdown.total):
        raise TrainingDiverged(f"non-finite generator loss at iteration {it}")

    def generator_step():
        params = state.parameters("gen")
        grads = torch.autograd.grad(obj.total, params)
        adam_update(params, grads, state.adam["gen"], lr,
                    cfg.beta1, cfg.beta2, cfg.adam_eps)

    def discriminator_steps():
        for s in range(cfg.disc_steps):
            fake_a = state.pools["a"].query(obj.fake_a,
                                            torch_gen(seed, "pool_a", it, s))
            fake_b = state.pools["b"].query(obj.fake_b,
                                            torch_gen(seed, "pool_b", it, s))
            _disc_update(state, "d_a", x, fake_a, lr)
            _disc_update(state, "d_b", y, fake_b, lr)
        if use_guess:
            for name, loss in (("guess_a", obj.guess_d_loss_a),
                               ("guess_b", obj.guess_d_loss_b)):
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite {name} loss")
                params = state.parameters(name)
                grads = torch.autograd.grad(loss, params)
                adam_update(params, grads, state.adam[name], lr,
                            cfg.beta1, cfg.beta2, cfg.adam_eps)

    if cfg.update_order == "generator_first":
        generator_step()
        discriminator_steps()
    else:
        discriminator_steps()
        generator_step()
    state.iteration = it + 1
    return lr, obj.breakdown


def train(cfg: TrainConfig, dataset_dir: Path | str, out_dir: Path | str,
          resume_from: Path | str | None = None) -> Path:
    """Run the full optimization; writes config.json, log.csv and checkpoints.

    Returns the run directory. A lock file refuses concurrent training into
    the same directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / "lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        raise RuntimeError(f"{out} is locked by another training run "
                           f"(remove {lock} if stale)")
    try:
        return _train_locked(cfg, Path(dataset_dir), out, resume_from)
    finally:
        lock.unlink(missing_ok=True)


def _train_locked(cfg: TrainConfig, dataset_dir: Path, out: Path,
                  resume_from: Path | str | None) -> Path:
    train_a, train_b = _load_train_tensors(dataset_dir)
    if train_a.shape[2] != cfg.image_size:
        raise ValueError(f"dataset images are {train_a.shape[2]}px, config says "
                         f"{cfg.image_size}px")

    if resume_from is not None:
        state = load_run_state(resume_from)
        if dataclasses.asdict(state.cfg) != dataclasses.asdict(cfg):
            raise ValueError("resume checkpoint was written under a different "
                             "config")
    else:
        state = init_run_state(cfg)

    config_doc = {"train_config": dataclasses.asdict(cfg),
                  "dataset": str(dataset_dir)}
    (out / "config.json").write_text(json.dumps(config_doc, indent=2,
                                                sort_keys=True) + "\n", "utf-8")

    with open(out / "log.csv", "w", newline="\n") as fh:
        fh.write(",".join(["iter", "lr"] + LossBreakdown.csv_header()) + "\n")
        for it in range(state.iteration, cfg.total_iters):
            try:
                lr, breakdown = train_step(state, train_a, train_b, it)
            except TrainingDiverged as e:
                save_run_state(state, out / f"abort_{it}.cycd")
                raise TrainingDiverged(f"{e}; state saved to abort_{it}.cycd")
            _log_row(fh, it, lr, breakdown)
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_run_state(state, out / f"ckpt_{state.iteration}.cycd")
            if it % 1000 == 0:
                log.info("iter %d/%d total=%.4f", it, cfg.total_iters,
                         breakdown.total)

    save_run_state(state, out / "final.cycd")
    return out
