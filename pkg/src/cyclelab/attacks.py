"""Probes for the hidden-channel embedding: random-noise reconstruction
probes and targeted bounded perturbations that steer the reverse generator
toward an arbitrary target image.

Everything operates on the [0,1] intensity scale against read-only
checkpointed maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .metrics import _np_to_torch, _torch_to_np, load_translators
from .scenes import load_manifest, load_split
from .seeding import derive_seed, torch_gen


@dataclass
class NoiseProbeResult:
    translation: np.ndarray
    recon_clean: np.ndarray
    recon_noisy: np.ndarray
    mse: float


def noise_probe(g_ba, g_ab, x01: np.ndarray, sigma: float,
                seed: int = 0) -> NoiseProbeResult:
    """Reconstruct once cleanly and once from a noise-perturbed translation."""
    with torch.no_grad():
        x = _np_to_torch(x01)
        t = g_ab(x)
        rec_clean = g_ba(t)
        if sigma == 0.0:
            rec_noisy = rec_clean
        else:
            delta = torch.randn(t.shape, generator=torch_gen(seed, "probe")) * sigma
            rec_noisy = g_ba(torch.clamp(t + delta, 0.0, 1.0))
        mse = ((rec_noisy - rec_clean) ** 2).mean().item()
    return NoiseProbeResult(translation=_torch_to_np(t),
                            recon_clean=_torch_to_np(rec_clean),
                            recon_noisy=_torch_to_np(rec_noisy), mse=mse)


@dataclass
class AttackResult:
    delta: np.ndarray
    epsilon: float
    steps: int
    achieved_mse: float
    mse_trajectory: list[float]


def targeted_embedding_attack(restore, y_base01: np.ndarray,
                              x_target01: np.ndarray, epsilon: float = 0.08,
                              steps: int = 300,
                              step_size: float = 0.01) -> AttackResult:
    """Adam-driven projected gradient descent on a bounded perturbation.

    Minimizes the squared error between restore(clamp(y + delta)) and the
    target, projecting delta onto the inf-ball of radius epsilon after every
    update, and returns the best iterate seen.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    y = _np_to_torch(y_base01)
    target = _np_to_torch(x_target01)
    if y.shape != target.shape:
        raise ValueError(f"base/target shape mismatch: {tuple(y.shape)} vs "
                         f"{tuple(target.shape)}")
    delta = torch.zeros_like(y, requires_grad=True)
    m = torch.zeros_like(y)
    v = torch.zeros_like(y)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def objective(d):
        return ((restore(torch.clamp(y + d, 0.0, 1.0)) - target) ** 2).mean()

    best_mse = objective(delta.detach()).item()
    best_delta = delta.detach().clone()
    trajectory = []
    for t in range(1, steps + 1):
        loss = objective(delta)
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            m.mul_(beta1).add_(grad, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
            step = step_size * (m / (1 - beta1 ** t)) \
                / ((v / (1 - beta2 ** t)).sqrt() + eps)
            delta.sub_(step)
            delta.clamp_(-epsilon, epsilon)  # exact inf-ball projection
            mse = objective(delta).item()
        trajectory.append(mse)
        if mse < best_mse:
            best_mse = mse
            best_delta = delta.detach().clone()
    return AttackResult(delta=_torch_to_np(best_delta), epsilon=epsilon,
                        steps=steps, achieved_mse=best_mse,
                        mse_trajectory=trajectory)


def attack_sweep(run_dir: Path | str, dataset_dir: Path | str,
                 epsilons=(0.02, 0.04, 0.08), n_samples: int = 10,
                 steps: int = 300, step_size: float = 0.01, seed: int = 0,
                 out_csv: Path | str | None = None) -> list[dict]:
    """Attack the poor-to-rich generator at translated bases, targeting a
    different test image each time; rows go to attack.csv."""
    g_ab, g_ba, _ = load_translators(run_dir)
    manifest = load_manifest(dataset_dir, check_files=False)
    test_a = load_split(dataset_dir, "testA", manifest)
    if n_samples > len(test_a):
        raise ValueError(f"requested {n_samples} samples but the test set has "
                         f"{len(test_a)}")
    if n_samples < 2:
        raise ValueError("need at least 2 samples to pick distinct targets")
    offset = 1 + derive_seed(seed, "target") % (n_samples - 1)

    rows = []
    for epsilon in epsilons:
        for i in range(n_samples):
            j = (i + offset) % n_samples
            with torch.no_grad():
                y_base = _torch_to_np(g_ab(_np_to_torch(test_a[i])))
            res = targeted_embedding_attack(g_ba, y_base, test_a[j],
                                            epsilon=epsilon, steps=steps,
                                            step_size=step_size)
            rows.append({"epsilon": float(epsilon), "sample_index": i,
                         "target_index": j, "achieved_mse": res.achieved_mse,
                         "steps": steps})
    if out_csv is not None:
        lines = ["epsilon,sample_index,target_index,achieved_mse,steps"]
        lines += [f"{r['epsilon']!r},{r['sample_index']},{r['target_index']},"
                  f"{r['achieved_mse']!r},{r['steps']}" for r in rows]
        Path(out_csv).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
