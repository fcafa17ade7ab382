"""Metric suite: palette quantization, quantized reconstruction honesty,
sensitivity to noise with area under curve, segmentation scores, and the
oracle-segmenter translation quality measure.

All metric math runs on the [0,1] intensity scale; checkpointed networks are
wrapped so the [-1,1] model range never leaks out. Per-sample noise seeds are
counter-derived, so evaluation is embarrassingly parallel yet bit-reproducible
(the CYCLELAB_THREADS environment variable only caps worker count).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .networks import ArchConfig, from_model, init_params, to_model
from .scenes import (DatasetManifest, Palette, class_mask, load_manifest,
                     load_split, render_rich, sample_scene, test_scene)
from .seeding import derive_seed, torch_gen
from .training import AdamState, adam_update, load_run_state

DEFAULT_SIGMA_GRID = tuple(np.linspace(0.0, 0.2, 21).tolist())
METRIC_NAMES = ("rh", "sn", "segm", "quality")


class OracleUnusable(RuntimeError):
    """The supervised oracle segmenter failed its accuracy gate."""


def eval_workers() -> int:
    env = os.environ.get("CYCLELAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map_samples(fn, n: int) -> list:
    """Apply fn(i) for i in range(n); results in index order regardless of
    the worker count."""
    workers = min(eval_workers(), max(1, n))
    if workers == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n)))


def _palette_array(palette) -> np.ndarray:
    arr = palette.array if isinstance(palette, Palette) else np.asarray(
        palette, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] != 3:
        raise ValueError(f"palette must be a non-empty (K,3) array, got shape "
                         f"{arr.shape}")
    return arr


def labels_from_image(image: np.ndarray, palette) -> np.ndarray:
    """Per-pixel index of the Euclidean-nearest palette color (ties go to the
    lowest index, which is what argmin does)."""
    colors = _palette_array(palette)
    img = np.asarray(image, dtype=np.float32)
    if img.shape[-1] != 3:
        raise ValueError(f"expected 3-channel image, got shape {img.shape}")
    d2 = ((img[..., None, :] - colors[None, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=-1)


def quantize(image: np.ndarray, palette) -> np.ndarray:
    """Replace every pixel by its nearest palette color."""
    colors = _palette_array(palette)
    return colors[labels_from_image(image, palette)]


@dataclass
class SegScores:
    mean_accuracy: float
    mean_iou: float
    per_class_iou: list[float]
    confusion: np.ndarray  # rows: true class, cols: predicted class

    @classmethod
    def from_confusion(cls, cm: np.ndarray) -> "SegScores":
        cm = np.asarray(cm, dtype=np.int64)
        diag = np.diag(cm)
        row = cm.sum(axis=1)
        col = cm.sum(axis=0)
        union = row + col - diag
        # classes absent from both maps are excluded from the means
        accs = [diag[k] / row[k] for k in range(cm.shape[0]) if row[k] > 0]
        ious_all = [diag[k] / union[k] if union[k] > 0 else math.nan
                    for k in range(cm.shape[0])]
        ious = [v for v in ious_all if not math.isnan(v)]
        return cls(mean_accuracy=float(np.mean(accs)) if accs else math.nan,
                   mean_iou=float(np.mean(ious)) if ious else math.nan,
                   per_class_iou=[float(v) for v in ious_all],
                   confusion=cm)

    def to_doc(self) -> dict:
        return {"mean_accuracy": self.mean_accuracy, "mean_iou": self.mean_iou,
                "per_class_iou": self.per_class_iou,
                "confusion": self.confusion.tolist()}


def confusion_matrix(pred: np.ndarray, true: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    for name, arr in (("pred", pred), ("true", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    idx = n_classes * true.reshape(-1) + pred.reshape(-1)
    counts = np.bincount(idx, minlength=n_classes * n_classes)
    return counts.reshape(n_classes, n_classes)


def segmentation_scores(pred: np.ndarray, true: np.ndarray,
                        n_classes: int) -> SegScores:
    return SegScores.from_confusion(confusion_matrix(pred, true, n_classes))


class Translator:
    """Checkpointed generator as a pure [0,1] -> [0,1] map."""

    def __init__(self, net: torch.nn.Module):
        self.net = net

    def __call__(self, x01: torch.Tensor) -> torch.Tensor:
        single = x01.dim() == 3
        if single:
            x01 = x01[None]
        out = from_model(self.net(to_model(x01)))
        return out[0] if single else out


def _np_to_torch(img: np.ndarray) -> torch.Tensor:
    """(H,W,3) or (N,H,W,3) [0,1] numpy -> (…,3,H,W) float32 tensor."""
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
    return t.movedim(-1, -3)


def _torch_to_np(t: torch.Tensor) -> np.ndarray:
    return t.movedim(-3, -1).detach().numpy()


@dataclass
class HonestyReport:
    mean: float
    std: float
    per_sample: list[float]
    norm: str
    n: int

    def to_doc(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n,
                "norm": self.norm, "per_sample": self.per_sample}


def _norm_fn(norm: str):
    if norm == "l1":
        return lambda a, b: (a - b).abs().mean().item()
    if norm == "l2":
        return lambda a, b: ((a - b) ** 2).mean().sqrt().item()
    raise ValueError(f"unknown norm {norm!r} (use 'l1' or 'l2')")


def reconstruction_honesty(g_ba, g_ab, test_a: np.ndarray, palette,
                           n: int | None = None,
                           norm: str = "l1") -> HonestyReport:
    """Reconstruction-error gap between the quantized and raw translation.

    g_ab is the many-to-one (rich-to-poor) map, g_ba its reverse; test_a
    holds the paired test set's rich images, which serve as both input and
    rich-domain ground truth. Positive values expose hidden embeddings.
    """
    dist = _norm_fn(norm)
    n = _resolve_n(n, len(test_a))

    def one(i: int) -> float:
        with torch.no_grad():
            x = _np_to_torch(test_a[i])
            t = g_ab(x)
            tq = _np_to_torch(quantize(_torch_to_np(t), palette))
            rec_q = g_ba(tq)
            rec = g_ba(t)
            return dist(rec_q, x) - dist(rec, x)

    vals = _map_samples(one, n)
    return HonestyReport(mean=float(np.mean(vals)), std=float(np.std(vals)),
                         per_sample=[float(v) for v in vals], norm=norm, n=n)


@dataclass
class SNCurve:
    grid: list[float]
    values: list[float]
    auc: float
    n: int
    seed: int

    def to_doc(self) -> dict:
        return {"grid": self.grid, "values": self.values, "auc": self.auc,
                "n": self.n, "seed": self.seed}


def _resolve_n(n: int | None, available: int) -> int:
    if n is None:
        n = min(500, available)
    if n > available:
        raise ValueError(f"requested n={n} samples but only {available} are "
                         f"available")
    if n < 1:
        raise ValueError("need at least one sample")
    return n


def sensitivity_to_noise(g_ba, g_ab, test_a: np.ndarray,
                         sigma_grid=DEFAULT_SIGMA_GRID, n: int | None = None,
                         seed: int = 0, repeats: int = 1) -> SNCurve:
    """Mean squared deviation of the reconstruction under noisy translation.

    Noise of std sigma is added to the translation on the [0,1] scale and
    clamped before reconstruction. Seeds are keyed on (sample, sigma value),
    so refining the grid reuses the draws of shared sigma points.
    """
    grid = [float(s) for s in sigma_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("sigma grid must be strictly ascending")
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise ValueError("sigma grid must lie within [0, 1]")
    n = _resolve_n(n, len(test_a))

    def one(i: int) -> list[float]:
        with torch.no_grad():
            x = _np_to_torch(test_a[i])
            t = g_ab(x)
            rec = g_ba(t)
            row = []
            for sigma in grid:
                if sigma == 0.0:
                    row.append(0.0)
                    continue
                acc = 0.0
                for r in range(repeats):
                    gen = torch_gen(seed, "sn", i, round(sigma * 1e6), r)
                    delta = torch.randn(t.shape, generator=gen) * sigma
                    noisy = torch.clamp(t + delta, 0.0, 1.0)
                    acc += ((g_ba(noisy) - rec) ** 2).mean().item()
                row.append(acc / repeats)
            return row

    rows = np.asarray(_map_samples(one, n))
    values = rows.mean(axis=0).tolist()
    auc = float(np.trapezoid(values, grid))
    return SNCurve(grid=grid, values=values, auc=auc, n=n, seed=seed)


@dataclass
class OracleSegmenter:
    net: torch.nn.Module
    n_classes: int
    holdout_pixel_accuracy: float
    holdout_mean_iou: float


def segment(net: torch.nn.Module, images01: np.ndarray) -> np.ndarray:
    """Argmax class maps for a batch of [0,1] images, chunked for memory."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images01), 32):
            x = to_model(_np_to_torch(images01[i:i + 32]))
            out.append(net(x).argmax(dim=1).numpy())
    return np.concatenate(out)


def pixel_accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    return float((pred == true).mean())


def train_oracle_segmenter(images01: np.ndarray, masks: np.ndarray,
                           n_classes: int, iters: int = 3000,
                           seed: int = 0, holdout_frac: float = 0.2,
                           lr: float = 2e-3,
                           batch_size: int = 8) -> OracleSegmenter:
    """Supervised per-pixel cross-entropy training on exact synthetic pairs.

    The tail holdout_frac of the pairs is held out; the oracle must reach
    0.90 pixel accuracy there or evaluation is aborted.
    """
    if len(images01) != len(masks):
        raise ValueError("images and masks must pair up")
    n_hold = max(1, int(len(images01) * holdout_frac))
    n_fit = len(images01) - n_hold
    if n_fit < 1:
        raise ValueError("not enough pairs to train the oracle")
    arch = ArchConfig(seg_classes=n_classes)
    net = init_params("segmenter", derive_seed(seed, "oracle"), arch)
    params = list(net.parameters())
    moments = AdamState.zeros(params)
    fit_x = to_model(_np_to_torch(images01[:n_fit]))
    fit_y = torch.from_numpy(np.ascontiguousarray(masks[:n_fit], dtype=np.int64))
    for it in range(iters):
        idx = torch.randint(n_fit, (batch_size,),
                            generator=torch_gen(seed, "oracle_batch", it))
        logits = net(fit_x[idx])
        loss = torch.nn.functional.cross_entropy(logits, fit_y[idx])
        grads = torch.autograd.grad(loss, params)
        adam_update(params, grads, moments, lr, 0.9, 0.999, 1e-8)

    pred = segment(net, images01[n_fit:])
    acc = pixel_accuracy(pred, masks[n_fit:])
    iou = segmentation_scores(pred, masks[n_fit:], n_classes).mean_iou
    if acc < 0.90:
        raise OracleUnusable(
            f"oracle segmenter reached only {acc:.3f} held-out pixel accuracy "
            f"(need 0.90); translation-quality metrics would be meaningless")
    return OracleSegmenter(net=net, n_classes=n_classes,
                           holdout_pixel_accuracy=acc, holdout_mean_iou=iou)


def translation_quality_one_to_many(g_ba, oracle: OracleSegmenter,
                                    test_a: np.ndarray,
                                    test_b: np.ndarray) -> SegScores:
    """Oracle-referenced quality of the poor-to-rich translation.

    Compares oracle(g_ba(B_i)) against oracle(A_i), charging the oracle's own
    error to both sides.
    """
    if len(test_a) != len(test_b):
        raise ValueError("test pairs required")
    with torch.no_grad():
        translated = np.stack([
            _torch_to_np(g_ba(_np_to_torch(test_b[i])))
            for i in range(len(test_b))])
    pred = segment(oracle.net, translated)
    ref = segment(oracle.net, test_a)
    return segmentation_scores(pred, ref, oracle.n_classes)


def segmentation_vs_truth(translated_b: np.ndarray, true_masks: np.ndarray,
                          palette) -> SegScores:
    """Score quantized many-to-one outputs against the exact class masks."""
    pred = labels_from_image(quantize(translated_b, palette), palette)
    k = _palette_array(palette).shape[0]
    return segmentation_scores(pred, true_masks, k)


def _oracle_pairs(manifest: DatasetManifest, count: int,
                  seed_tag: str) -> tuple[np.ndarray, np.ndarray]:
    """Fresh exact pairs rendered from scene seeds disjoint from the splits."""
    size = manifest.image_size
    images, masks = [], []
    for i in range(count):
        scene = sample_scene(derive_seed(manifest.seed, seed_tag, i))
        images.append(render_rich(scene, size))
        masks.append(class_mask(scene, size))
    return np.stack(images), np.stack(masks)


def load_oracle(path: Path | str) -> OracleSegmenter:
    metadata, arrays = checkpoint.load(path)
    if metadata.get("kind") != "oracle_segmenter":
        raise checkpoint.CorruptCheckpointError(
            f"not an oracle checkpoint: kind={metadata.get('kind')!r}")
    net = init_params("segmenter", 0, ArchConfig(**metadata["arch"]))
    with torch.no_grad():
        for pname, p in net.named_parameters():
            p.copy_(torch.from_numpy(arrays[pname]))
    return OracleSegmenter(net=net, n_classes=metadata["n_classes"],
                           holdout_pixel_accuracy=metadata["holdout_pixel_accuracy"],
                           holdout_mean_iou=metadata["holdout_mean_iou"])


def save_oracle(oracle: OracleSegmenter, arch: ArchConfig,
                path: Path | str) -> None:
    arrays = {pname: p.detach().numpy().astype(np.float32)
              for pname, p in oracle.net.named_parameters()}
    metadata = {
        "kind": "oracle_segmenter",
        "n_classes": oracle.n_classes,
        "arch": {"seg_classes": arch.seg_classes, "seg_filters": arch.seg_filters,
                 "seg_kernel": arch.seg_kernel},
        "holdout_pixel_accuracy": oracle.holdout_pixel_accuracy,
        "holdout_mean_iou": oracle.holdout_mean_iou,
    }
    checkpoint.save(path, metadata, arrays)


def get_oracle(manifest: DatasetManifest, seed: int = 0, iters: int = 3000,
               n_pairs: int = 300,
               cache_path: Path | str | None = None) -> OracleSegmenter:
    """Train (or load from cache) the oracle segmenter for a dataset."""
    if cache_path is not None and Path(cache_path).exists():
        return load_oracle(cache_path)
    images, masks = _oracle_pairs(manifest, n_pairs, "oracle")
    k = len(manifest.palette.colors)
    oracle = train_oracle_segmenter(images, masks, k, iters=iters, seed=seed)
    if cache_path is not None:
        save_oracle(oracle, ArchConfig(seg_classes=k), cache_path)
    return oracle


def load_translators(run_dir: Path | str) -> tuple[Translator, Translator, dict]:
    """(g_ab, g_ba, config) from a run directory's final checkpoint."""
    final = Path(run_dir) / "final.cycd"
    if not final.exists():
        raise FileNotFoundError(f"missing final checkpoint {final}")
    state = load_run_state(final)
    for net in state.nets.values():
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
    return (Translator(state.nets["g_ab"]), Translator(state.nets["g_ba"]),
            dataclasses.asdict(state.cfg))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in row)
              for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate_run(run_dir: Path | str, dataset_dir: Path | str,
                 metric_names=METRIC_NAMES, n: int | None = None,
                 sigma_grid=DEFAULT_SIGMA_GRID, seed: int = 0,
                 norm: str = "l1", sn_repeats: int = 1,
                 oracle_cache: Path | str | None = None,
                 oracle_iters: int = 3000,
                 out_dir: Path | str | None = None,
                 emit_figures: bool = True) -> dict:
    """Compute the requested metrics for a finished run; writes metrics.json,
    per-metric CSVs and (optionally) rendered figures into the run directory.
    """
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    bad = set(metric_names) - set(METRIC_NAMES)
    if bad:
        raise ValueError(f"unknown metrics {sorted(bad)}; pick from {METRIC_NAMES}")

    g_ab, g_ba, run_cfg = load_translators(run_dir)
    manifest = load_manifest(dataset_dir, check_files=False)
    if run_cfg["image_size"] != manifest.image_size:
        raise ValueError(f"run was trained at {run_cfg['image_size']}px but the "
                         f"dataset is {manifest.image_size}px")

    report: dict = {}
    test_a = test_b = None
    if metric_names:
        test_a = load_split(dataset_dir, "testA", manifest)
        test_b = load_split(dataset_dir, "testB", manifest)
        if len(test_a) != len(test_b):
            raise ValueError("dataset test split is unpaired")

    if "rh" in metric_names:
        rh = reconstruction_honesty(g_ba, g_ab, test_a, manifest.palette,
                                    n=n, norm=norm)
        report["rh"] = {"mean": rh.mean, "std": rh.std, "n": rh.n,
                        "norm": rh.norm}
        _write_csv(out / "rh_samples.csv", ["value"],
                   [[v] for v in rh.per_sample])
        if emit_figures:
            from .figures import save_histogram
            save_histogram(out / "rh_hist.png", rh.per_sample,
                           xlabel="per-sample honesty gap", title="RH distribution")

    if "sn" in metric_names:
        sn = sensitivity_to_noise(g_ba, g_ab, test_a, sigma_grid=sigma_grid,
                                  n=n, seed=seed, repeats=sn_repeats)
        report["sn"] = sn.to_doc()
        _write_csv(out / "sn_curve.csv", ["sigma", "value"],
                   list(map(list, zip(sn.grid, sn.values))))
        if emit_figures:
            from .figures import save_curve
            save_curve(out / "sn_curve.png", sn.grid, sn.values,
                       xlabel="noise sigma", ylabel="reconstruction MSE",
                       title="Sensitivity to noise")

    if "segm" in metric_names:
        count = _resolve_n(n, len(test_a))
        with torch.no_grad():
            translated = np.stack([
                _torch_to_np(g_ab(_np_to_torch(test_a[i]))) for i in range(count)])
        true_masks = np.stack([class_mask(test_scene(manifest, i),
                                          manifest.image_size)
                               for i in range(count)])
        segm = segmentation_vs_truth(translated, true_masks, manifest.palette)
        report["segm"] = segm.to_doc()
        _write_csv(out / "segm.csv", ["class", "iou"],
                   [[i, v] for i, v in enumerate(segm.per_class_iou)])

    if "quality" in metric_names:
        oracle = get_oracle(manifest, seed=seed, iters=oracle_iters,
                            cache_path=oracle_cache)
        count = _resolve_n(n, len(test_a))
        quality = translation_quality_one_to_many(
            g_ba, oracle, test_a[:count], test_b[:count])
        doc = quality.to_doc()
        doc["oracle_holdout_pixel_accuracy"] = oracle.holdout_pixel_accuracy
        doc["oracle_holdout_mean_iou"] = oracle.holdout_mean_iou
        report["quality"] = doc
        _write_csv(out / "quality.csv", ["class", "iou"],
                   [[i, v] for i, v in enumerate(quality.per_class_iou)])

    (out / "metrics.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", "utf-8")
    eval_config = {"run": str(run_dir), "dataset": str(dataset_dir),
                   "metrics": list(metric_names), "n": n,
                   "sigma_grid": [float(s) for s in sigma_grid], "seed": seed,
                   "norm": norm, "sn_repeats": sn_repeats}
    (out / "eval_config.json").write_text(
        json.dumps(eval_config, indent=2, sort_keys=True) + "\n", "utf-8")
    return report
