"""Synthetic fine-grained dataset: every class is identified by several small
glyph patches scattered over a noisy background, so class evidence is spread
across complementary regions.  Per-image glyph contrast varies, which keeps
any single patch from being fully reliable and rewards models that attend to
different patches.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DataFormatError
from .netpbm import decode_ppm, encode_ppm

MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"


@dataclass
class DatasetConfig:
    num_classes: int = 8
    patches_per_class: int = 3
    patch_size: int = 6
    image_size: int = 32
    train_per_class: int = 200
    test_per_class: int = 40
    seed: int = 0
    num_distractors: int = 4
    distractors_per_image: int = 2
    background: float = 0.45
    noise_amplitude: float = 0.055
    # per-rank contrast bands: the first patch of a class is the salient one,
    # later patches are progressively subtler, so an unguided model gravitates
    # to the first; each patch is independently near-invisible with
    # probability faint_prob, so no single patch is fully reliable
    patch_contrast_lo: list[float] = field(default_factory=lambda: [0.38, 0.25, 0.18])
    patch_contrast_hi: list[float] = field(default_factory=lambda: [0.52, 0.36, 0.28])
    faint_prob: float | list[float] = 0.25
    faint_lo: float = 0.02
    faint_hi: float = 0.06
    # salient patches carry a class-specific hue (an easy shortcut cue);
    # all other glyphs are rendered in a neutral tone so only their shape
    # distinguishes them, which is the slower cue to learn
    color_salient_first: bool = True
    min_hamming: int = 10

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.patches_per_class < 1:
            raise ConfigError("patches_per_class must be >= 1")
        if self.patch_size * 3 > self.image_size:
            raise ConfigError("patch_size too large for image_size")
        if len(self.patch_contrast_lo) != self.patches_per_class or \
           len(self.patch_contrast_hi) != self.patches_per_class:
            raise ConfigError("patch contrast bands must have one entry per patch rank")
        if self.min_hamming > self.patch_size * self.patch_size:
            raise ConfigError("min_hamming exceeds patch bit count")
        if isinstance(self.faint_prob, list) and \
           len(self.faint_prob) != self.patches_per_class:
            raise ConfigError("faint_prob list must have one entry per patch rank")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # float32 [3,H,W] in [0,1]
    label: int
    id: str


def _sample_glyphs(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    """Binary patch patterns with pairwise Hamming distance >= min_hamming."""
    n = cfg.num_classes * cfg.patches_per_class + cfg.num_distractors
    bits = cfg.patch_size * cfg.patch_size
    if cfg.min_hamming > bits:
        raise ConfigError("min_hamming exceeds patch bit count")
    glyphs = []
    attempts = 0
    while len(glyphs) < n:
        attempts += 1
        if attempts > 20000 * n:
            raise ConfigError(
                f"glyph alphabet exhausted: cannot build {n} patterns with "
                f"Hamming distance >= {cfg.min_hamming} on {bits} bits")
        cand = rng.integers(0, 2, size=bits, dtype=np.uint8)
        if all(int(np.sum(cand != g)) >= cfg.min_hamming for g in glyphs):
            glyphs.append(cand)
    return np.stack(glyphs).reshape(n, cfg.patch_size, cfg.patch_size)


def _hue_direction(hue: float) -> np.ndarray:
    """Saturated RGB direction for a hue in [0,1), scaled to [-1,1] channels."""
    h = (hue % 1.0) * 6.0
    i = int(h)
    f = h - i
    rgb = [(1, f, 0), (1 - f, 1, 0), (0, 1, f), (0, 1 - f, 1), (f, 0, 1), (1, 0, 1 - f)][i]
    return np.array(rgb) * 2.0 - 1.0


def _place_nonoverlap(rng: np.random.Generator, count: int, image_size: int, patch: int) -> list[tuple[int, int]]:
    limit = image_size - patch
    for _restart in range(1000):
        spots: list[tuple[int, int]] = []
        misses = 0
        while len(spots) < count:
            y = int(rng.integers(0, limit + 1))
            x = int(rng.integers(0, limit + 1))
            if all(abs(y - py) >= patch or abs(x - px) >= patch for py, px in spots):
                spots.append((y, x))
            else:
                # a partial layout can leave no room for the remaining
                # patches, so give up on it and start over
                misses += 1
                if misses > 200:
                    break
        if len(spots) == count:
            return spots
    raise ConfigError(
        f"cannot place {count} non-overlapping {patch}x{patch} patches "
        f"on a {image_size}x{image_size} canvas")


def _render(cfg: DatasetConfig, glyphs: np.ndarray, colors: np.ndarray,
            rng: np.random.Generator, label: int) -> tuple[np.ndarray, list[dict]]:
    s = cfg.image_size
    img = cfg.background + rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=(s, s, 3))
    k_glyphs = [label * cfg.patches_per_class + p for p in range(cfg.patches_per_class)]
    d_glyphs = [cfg.num_classes * cfg.patches_per_class + int(i)
                for i in rng.choice(cfg.num_distractors, size=cfg.distractors_per_image, replace=False)]
    order = k_glyphs + d_glyphs
    spots = _place_nonoverlap(rng, len(order), s, cfg.patch_size)
    placements = []
    for slot, (gi, (y, x)) in enumerate(zip(order, spots)):
        rank = min(slot, cfg.patches_per_class - 1)
        fp = cfg.faint_prob[rank] if isinstance(cfg.faint_prob, list) else cfg.faint_prob
        faint = rng.random() < fp
        if slot < cfg.patches_per_class and faint:
            contrast = float(rng.uniform(cfg.faint_lo, cfg.faint_hi))
        else:
            contrast = float(rng.uniform(cfg.patch_contrast_lo[rank], cfg.patch_contrast_hi[rank]))
        mask = glyphs[gi].astype(np.float64)[:, :, None]
        img[y:y + cfg.patch_size, x:x + cfg.patch_size] += contrast * mask * colors[gi]
        placements.append({"glyph": gi, "y": y, "x": x, "contrast": contrast,
                           "distractor": gi >= cfg.num_classes * cfg.patches_per_class})
    return np.clip(img, 0.0, 1.0), placements


def generate(cfg: DatasetConfig, out_dir: str) -> dict:
    """Write PPM images + labels.csv + manifest.json; returns the manifest."""
    rng = np.random.default_rng(cfg.seed)
    glyphs = _sample_glyphs(cfg, rng)
    if cfg.color_salient_first:
        colors = np.tile(np.array([1.0, 1.0, 1.0]), (len(glyphs), 1))
        for k in range(cfg.num_classes):
            colors[k * cfg.patches_per_class] = _hue_direction(k / cfg.num_classes)
    else:
        # per-glyph signed RGB direction, unit max-channel magnitude
        colors = rng.uniform(-1.0, 1.0, size=(len(glyphs), 3))
        colors /= np.abs(colors).max(axis=1, keepdims=True)

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    images = {}
    for split, count in (("train", cfg.train_per_class), ("test", cfg.test_per_class)):
        for label in range(cfg.num_classes):
            for i in range(count):
                img_id = f"{split}_{label:02d}_{i:04d}"
                pixels, placements = _render(cfg, glyphs, colors, rng, label)
                fname = img_id + ".ppm"
                data = encode_ppm(np.round(pixels * 255).astype(np.uint8))
                with open(os.path.join(out_dir, fname), "wb") as fh:
                    fh.write(data)
                rows.append((img_id, fname, label))
                images[img_id] = {"filename": fname, "label": label, "placements": placements}

    with open(os.path.join(out_dir, LABELS_NAME), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "filename", "label"])
        for row in rows:
            w.writerow(row)

    manifest = {
        "config": asdict(cfg),
        "glyphs": [bytes(np.packbits(g.flatten())).hex() for g in glyphs],
        "glyph_colors": colors.tolist(),
        "class_glyphs": {str(k): [k * cfg.patches_per_class + p for p in range(cfg.patches_per_class)]
                         for k in range(cfg.num_classes)},
        "distractor_glyphs": list(range(cfg.num_classes * cfg.patches_per_class, len(glyphs))),
        "images": images,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def load_manifest(dataset_dir: str) -> dict:
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise DataFormatError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"corrupt manifest {path}: {e}") from e


def load(dataset_dir: str, split: str) -> list[LabeledImage]:
    """Deterministic (id-sorted) list of images for one split."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    manifest = load_manifest(dataset_dir)
    k = manifest["config"]["num_classes"]
    labels_path = os.path.join(dataset_dir, LABELS_NAME)
    try:
        with open(labels_path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [r for r in reader if r["id"].startswith(split + "_")]
    except OSError as e:
        raise DataFormatError(f"cannot read {labels_path}: {e}") from e
    out = []
    for r in sorted(rows, key=lambda r: r["id"]):
        label = int(r["label"])
        if not 0 <= label < k:
            raise DataFormatError(f"label {label} out of range for K={k} (id {r['id']})")
        path = os.path.join(dataset_dir, r["filename"])
        try:
            with open(path, "rb") as fh:
                pixels = decode_ppm(fh.read())
        except OSError as e:
            raise DataFormatError(f"cannot read image {path}: {e}") from e
        arr = (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)
        out.append(LabeledImage(arr, label, r["id"]))
    return out


def augment_pixels(pixels: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip, then edge-pad and random crop back to size."""
    out = pixels
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    h, w = out.shape[1:]
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    return np.ascontiguousarray(padded[:, oy:oy + h, ox:ox + w])


def augment(img: LabeledImage, rng: np.random.Generator) -> LabeledImage:
    return LabeledImage(augment_pixels(img.pixels, rng), img.label, img.id)


def mask_class_glyphs(img: LabeledImage, manifest: dict, keep_index: int) -> LabeledImage:
    """Probe image: overwrite all but one class glyph with flat background."""
    cfg = manifest["config"]
    ps = cfg["patch_size"]
    bg = np.float32(cfg["background"])
    pixels = img.pixels.copy()
    class_placements = [p for p in manifest["images"][img.id]["placements"] if not p["distractor"]]
    for i, p in enumerate(class_placements):
        if i != keep_index:
            pixels[:, p["y"]:p["y"] + ps, p["x"]:p["x"] + ps] = bg
    return LabeledImage(pixels, img.label, img.id)
