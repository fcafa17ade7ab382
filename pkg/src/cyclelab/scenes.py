"""Procedural many-to-one (and one-to-one) image domain pair.

The rich domain renders each scene with per-shape sinusoidal textures whose
style parameters (hue, phase, frequency) are random, so the flat label-map
domain obtained by dropping the style fields is many-to-one by construction.
The scene description is the exact ground-truth bridge between the two
domains: every pixel label is known, anti-aliasing is off on purpose.
"""

from __future__ import annotations

import dataclasses
import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_seed, numpy_gen

SHAPE_KINDS = ("circle", "square", "triangle")

CENTER_RANGE = (0.2, 0.8)
RADIUS_RANGE = (0.1, 0.3)
FREQ_RANGE = (2.0, 8.0)
MIN_IMAGE_SIZE = 16

# Shape hues are drawn from disjoint per-kind bands (with a margin) and the
# background is desaturated: pixel class stays locally readable, which keeps
# the supervised oracle's task nearly separable, while the exact hue, phase,
# frequency and orientation are still destroyed by the label-map domain.
_THIRD = 2.0 * math.pi / 3.0
KIND_HUE_BANDS = {
    "circle": (0.0, _THIRD),
    "square": (_THIRD, 2.0 * _THIRD),
    "triangle": (2.0 * _THIRD, 3.0 * _THIRD),
}
HUE_BAND_MARGIN = 0.1  # fraction of the band kept clear at each edge
BACKGROUND_SATURATION = 0.25

# Fixed style tables for the one-to-one mode: the same geometry rendered with
# bank A in one domain and bank B in the other, so the cross-domain map is a
# bijection (re-rendering with the opposite bank recovers the counterpart).
STYLE_BANK_A = {
    "background": (5.5, 0.4, 2.5),
    "circle": (0.6, 1.1, 3.0),
    "square": (2.6, 2.3, 4.0),
    "triangle": (4.6, 0.9, 5.0),
}
STYLE_BANK_B = {
    "background": (2.9, 1.7, 3.5),
    "circle": (1.5, 0.3, 6.0),
    "square": (3.6, 2.9, 2.0),
    "triangle": (5.8, 2.0, 7.0),
}


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple[float, float]
    radius: float
    hue: float
    texture_phase: float
    texture_freq: float


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[ShapeSpec, ...]
    background: tuple[float, float, float]  # (hue, phase, freq)
    seed: int

    def __post_init__(self):
        # sampled scenes always carry 1..3 shapes; an empty tuple is allowed
        # so background-only scenes can be constructed directly
        if len(self.shapes) > 3:
            raise ValueError(f"scene holds at most 3 shapes, got {len(self.shapes)}")
        for s in self.shapes:
            if s.kind not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {s.kind!r}")
            if not (CENTER_RANGE[0] <= s.center[0] <= CENTER_RANGE[1]
                    and CENTER_RANGE[0] <= s.center[1] <= CENTER_RANGE[1]):
                raise ValueError(f"shape center {s.center} outside {CENTER_RANGE}")
            if not RADIUS_RANGE[0] <= s.radius <= RADIUS_RANGE[1]:
                raise ValueError(f"shape radius {s.radius} outside {RADIUS_RANGE}")


@dataclass(frozen=True)
class Palette:
    """Class colors of the label-map domain, targets of quantization."""

    colors: tuple[tuple[float, float, float], ...]
    class_names: tuple[str, ...]

    MIN_COLOR_DISTANCE = 0.3

    def __post_init__(self):
        if len(self.colors) < 2:
            raise ValueError("palette needs at least 2 colors")
        if len(self.colors) != len(self.class_names):
            raise ValueError("one class name per color required")
        arr = np.asarray(self.colors, dtype=np.float64)
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("palette colors must lie in [0,1]^3")
        for i in range(len(self.colors)):
            for j in range(i + 1, len(self.colors)):
                d = float(np.linalg.norm(arr[i] - arr[j]))
                if d < self.MIN_COLOR_DISTANCE:
                    raise ValueError(
                        f"palette colors {i} and {j} too close ({d:.3f} < "
                        f"{self.MIN_COLOR_DISTANCE})")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float32)


def default_palette() -> Palette:
    # All channels are exact multiples of 1/255 so the colors survive the
    # 8-bit PNG round trip bit-exactly.
    return Palette(
        colors=(
            (0.0, 0.0, 0.0),
            (230 / 255, 25 / 255, 25 / 255),
            (25 / 255, 205 / 255, 50 / 255),
            (50 / 255, 75 / 255, 230 / 255),
        ),
        class_names=("background", "circle", "square", "triangle"),
    )


def kind_hue(kind: str, u: float) -> float:
    """Map u in [0,1) into the kind's hue band, keeping the edge margin."""
    lo, hi = KIND_HUE_BANDS[kind]
    width = hi - lo
    return lo + (HUE_BAND_MARGIN + (1.0 - 2.0 * HUE_BAND_MARGIN) * u) * width


def sample_scene(seed: int) -> SceneSpec:
    """Deterministically draw a scene description from a 64-bit seed."""
    rng = numpy_gen(seed, "scene")
    n_shapes = int(rng.integers(1, 4))
    shapes = []
    for _ in range(n_shapes):
        kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
        cx, cy = rng.uniform(*CENTER_RANGE, size=2)
        shapes.append(ShapeSpec(
            kind=kind,
            center=(float(cx), float(cy)),
            radius=float(rng.uniform(*RADIUS_RANGE)),
            hue=kind_hue(kind, float(rng.uniform())),
            texture_phase=float(rng.uniform(0.0, 2.0 * math.pi)),
            texture_freq=float(rng.uniform(*FREQ_RANGE)),
        ))
    background = (
        float(rng.uniform(0.0, 2.0 * math.pi)),
        float(rng.uniform(0.0, 2.0 * math.pi)),
        float(rng.uniform(*FREQ_RANGE)),
    )
    return SceneSpec(shapes=tuple(shapes), background=background, seed=seed)


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    # pixel centers in unit-square coordinates; x runs along columns
    coords = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="xy")


def _shape_mask(shape: ShapeSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    cx, cy = shape.center
    r = shape.radius
    if shape.kind == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape.kind == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    # upward-pointing equilateral triangle with circumradius r
    h = r * math.sqrt(3.0) / 2.0
    v0 = (cx, cy - r)
    v1 = (cx - h, cy + r / 2.0)
    v2 = (cx + h, cy + r / 2.0)
    inside = np.ones_like(xs, dtype=bool)
    for (ax, ay), (bx, by) in ((v0, v1), (v1, v2), (v2, v0)):
        cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
        inside &= cross >= 0.0
    return inside


def class_mask(scene: SceneSpec, size: int) -> np.ndarray:
    """Exact per-pixel class labels: 0 background, else 1+kind index of the
    topmost (last listed) shape covering the pixel."""
    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"size must be >= {MIN_IMAGE_SIZE}, got {size}")
    xs, ys = _pixel_grid(size)
    labels = np.zeros((size, size), dtype=np.int64)
    for shape in scene.shapes:
        labels[_shape_mask(shape, xs, ys)] = 1 + SHAPE_KINDS.index(shape.kind)
    return labels


def _hue_to_rgb(hue: float) -> np.ndarray:
    h = (hue / (2.0 * math.pi)) % 1.0 * 6.0
    i = int(h) % 6
    f = h - int(h)
    q, t = 1.0 - f, f
    table = ((1, t, 0), (q, 1, 0), (0, 1, t), (0, q, 1), (t, 0, 1), (1, 0, q))
    return np.asarray(table[i], dtype=np.float64)


def _texture(hue: float, phase: float, freq: float, xs: np.ndarray,
             ys: np.ndarray, saturation: float = 1.0) -> np.ndarray:
    # sinusoid along a direction derived from the hue; modulates a solid
    # hue color so the rich domain carries high-frequency, style-only detail
    wave = np.sin(2.0 * math.pi * freq * (xs * math.cos(hue) + ys * math.sin(hue))
                  + phase)
    intensity = 0.5 + 0.35 * wave
    base = saturation * _hue_to_rgb(hue) + (1.0 - saturation) * 0.5
    return intensity[..., None] * base[None, None, :]


def render_rich(scene: SceneSpec, size: int) -> np.ndarray:
    """Textured rendering, float32 RGB in [0,1], no anti-aliasing."""
    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"size must be >= {MIN_IMAGE_SIZE}, got {size}")
    xs, ys = _pixel_grid(size)
    img = _texture(*scene.background, xs, ys, saturation=BACKGROUND_SATURATION)
    for shape in scene.shapes:
        mask = _shape_mask(shape, xs, ys)
        tex = _texture(shape.hue, shape.texture_phase, shape.texture_freq, xs, ys)
        img[mask] = tex[mask]
    return img.astype(np.float32)


def render_poor(scene: SceneSpec, palette: Palette, size: int) -> np.ndarray:
    """Label-map rendering: each pixel is exactly one palette color, chosen
    by the topmost covering shape. Style fields never enter."""
    labels = class_mask(scene, size)
    return palette.array[labels]


def restyle(scene: SceneSpec, bank: dict[str, tuple[float, float, float]]) -> SceneSpec:
    """Replace all style fields by the bank entry for each shape kind."""
    shapes = tuple(
        dataclasses.replace(s, hue=bank[s.kind][0], texture_phase=bank[s.kind][1],
                            texture_freq=bank[s.kind][2])
        for s in scene.shapes)
    return dataclasses.replace(scene, shapes=shapes, background=bank["background"])


def save_png(img: np.ndarray, path: Path | str) -> None:
    """Quantize [0,1] float RGB to 8 bits and write a PNG."""
    arr = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_png(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


@dataclass
class DatasetManifest:
    mode: str
    image_size: int
    palette: Palette
    seed: int
    n_train: int
    n_test: int
    files: dict[str, list[str]]

    SPLITS = ("trainA", "trainB", "testA", "testB")

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "image_size": self.image_size,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "palette": {
                "colors": [list(c) for c in self.palette.colors],
                "class_names": list(self.palette.class_names),
            },
            "files": self.files,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        palette = Palette(
            colors=tuple(tuple(c) for c in doc["palette"]["colors"]),
            class_names=tuple(doc["palette"]["class_names"]),
        )
        return cls(mode=doc["mode"], image_size=doc["image_size"], palette=palette,
                   seed=doc["seed"], n_train=doc["n_train"], n_test=doc["n_test"],
                   files=doc["files"])


def scene_seed(master: int, split: str, index: int) -> int:
    return derive_seed(master, "scene", split, index)


def test_scene(manifest: DatasetManifest, index: int) -> SceneSpec:
    """Recover the scene behind a paired test index (generation is pure)."""
    return sample_scene(scene_seed(manifest.seed, "test", index))


def _render_pair(scene: SceneSpec, mode: str, palette: Palette,
                 size: int) -> tuple[np.ndarray, np.ndarray]:
    if mode == "many-to-one":
        return render_rich(scene, size), render_poor(scene, palette, size)
    return (render_rich(restyle(scene, STYLE_BANK_A), size),
            render_rich(restyle(scene, STYLE_BANK_B), size))


def generate_dataset(mode: str, n_train: int, n_test: int, size: int, seed: int,
                     out_dir: Path | str, overwrite: bool = False) -> DatasetManifest:
    """Write an unpaired-train / paired-test dataset directory.

    Train splits hold renders of the same scene set but independently
    shuffled, so file order carries no pairing; test splits share the
    zero-padded index filename across domains.
    """
    if mode not in ("many-to-one", "one-to-one"):
        raise ValueError(f"unknown mode {mode!r}")
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if size < MIN_IMAGE_SIZE:
        raise ValueError(f"size must be >= {MIN_IMAGE_SIZE}, got {size}")

    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        if not overwrite:
            raise FileExistsError(
                f"{out} already holds a dataset; pass overwrite to regenerate")
        for split in DatasetManifest.SPLITS:
            shutil.rmtree(out / split, ignore_errors=True)
        manifest_path.unlink()
    for split in DatasetManifest.SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)

    palette = default_palette()
    files: dict[str, list[str]] = {s: [] for s in DatasetManifest.SPLITS}

    train_scenes = [sample_scene(scene_seed(seed, "train", i)) for i in range(n_train)]
    perm_a = numpy_gen(seed, "shuffle", "trainA").permutation(n_train)
    perm_b = numpy_gen(seed, "shuffle", "trainB").permutation(n_train)
    for i in range(n_train):
        img_a, _ = _render_pair(train_scenes[perm_a[i]], mode, palette, size)
        _, img_b = _render_pair(train_scenes[perm_b[i]], mode, palette, size)
        for split, img in (("trainA", img_a), ("trainB", img_b)):
            rel = f"{split}/{i:05d}.png"
            save_png(img, out / rel)
            files[split].append(rel)

    for i in range(n_test):
        scene = sample_scene(scene_seed(seed, "test", i))
        img_a, img_b = _render_pair(scene, mode, palette, size)
        for split, img in (("testA", img_a), ("testB", img_b)):
            rel = f"{split}/{i:05d}.png"
            save_png(img, out / rel)
            files[split].append(rel)

    manifest = DatasetManifest(mode=mode, image_size=size, palette=palette,
                               seed=seed, n_train=n_train, n_test=n_test, files=files)
    manifest_path.write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_manifest(dataset_dir: Path | str, check_files: bool = True) -> DatasetManifest:
    root = Path(dataset_dir)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text("utf-8"))
    if check_files:
        for split, rels in manifest.files.items():
            for rel in rels:
                p = root / rel
                if not p.exists():
                    raise FileNotFoundError(f"manifest lists missing file {p}")
                with Image.open(p) as im:
                    if im.size != (manifest.image_size, manifest.image_size):
                        raise ValueError(f"{p} is {im.size}, expected "
                                         f"{manifest.image_size}px square")
    return manifest


def load_split(dataset_dir: Path | str, split: str,
               manifest: DatasetManifest | None = None) -> np.ndarray:
    """Stack one split into an (N, H, W, 3) float32 array in [0,1]."""
    root = Path(dataset_dir)
    manifest = manifest or load_manifest(root, check_files=False)
    return np.stack([load_png(root / rel) for rel in manifest.files[split]])
