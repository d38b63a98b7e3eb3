"""Synthetic footprint scenes, on-disk patch datasets and train/val/test splits.

On-disk layout::

    <root>/manifest.json      resolution_m_per_px, patch_size, ids, split
    <root>/images/<id>.png    8-bit RGB
    <root>/masks/<id>.png     8-bit grayscale, {0, 255}
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import ResolutionSpec

PAPER_RATIOS = ("1:2", "1:5", "1:10")
MASK_THRESHOLD = 128
MAX_PLACEMENT_TRIES = 1000


class DatasetError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class PatchPair:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    resolution: ResolutionSpec


@dataclass
class SyntheticSceneSpec:
    resolution: float = 1.0
    patch_size: int = 256
    buildings_per_patch: tuple[int, int] = (2, 12)
    side_length_range: tuple[float, float] = (10.0, 20.0)
    building_intensity_contrast: float = 0.25
    background_noise_std: float = 0.06
    texture_noise_std: float = 0.04
    roads_per_patch: tuple[int, int] = (0, 2)
    composite: bool = False
    seed: int = 0

    def __post_init__(self):
        ResolutionSpec(self.resolution)
        lo, hi = self.side_length_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid side_length_range {self.side_length_range}")
        if not 0 <= self.buildings_per_patch[0] <= self.buildings_per_patch[1]:
            raise ValueError(f"invalid buildings_per_patch {self.buildings_per_patch}")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _draw_side(rng: np.random.Generator, spec: SyntheticSceneSpec) -> int:
    for _ in range(MAX_PLACEMENT_TRIES):
        px = int(round(rng.uniform(*spec.side_length_range) / spec.resolution))
        if px >= 1:
            return px
    raise PlacementError("side lengths keep rounding below one pixel at this resolution")


def _place(rng, occupied: np.ndarray, h: int, w: int) -> tuple[int, int]:
    size = occupied.shape[0]
    if h > size or w > size:
        raise PlacementError(f"building {h}x{w} px does not fit a {size} px patch")
    for _ in range(MAX_PLACEMENT_TRIES):
        y = int(rng.integers(0, size - h + 1))
        x = int(rng.integers(0, size - w + 1))
        # one-pixel margin keeps neighbouring buildings from touching
        if not occupied[max(y - 1, 0): y + h + 1, max(x - 1, 0): x + w + 1].any():
            return y, x
    raise PlacementError(f"could not place a {h}x{w} px building after {MAX_PLACEMENT_TRIES} tries")


def _smooth_field(rng, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def generate_scene(spec: SyntheticSceneSpec, index: int) -> PatchPair:
    """Render patch ``index`` of the synthetic scene family described by ``spec``.

    Output depends only on ``(spec, index)``.
    """
    rng = np.random.default_rng([spec.seed, index])
    size = spec.patch_size
    res = ResolutionSpec(spec.resolution)

    base = rng.uniform(0.25, 0.45, size=3)
    image = base[:, None, None] + 0.05 * np.stack([_smooth_field(rng, size, size / 16) for _ in range(3)])
    mask = np.zeros((size, size), dtype=np.uint8)
    occupied = np.zeros((size, size), dtype=bool)

    # roads: long bright strips that are not buildings
    for _ in range(int(rng.integers(spec.roads_per_patch[0], spec.roads_per_patch[1] + 1))):
        width = max(1, int(round(rng.uniform(4.0, 8.0) / spec.resolution)))
        pos = int(rng.integers(0, max(size - width, 1)))
        tone = base + spec.building_intensity_contrast * rng.uniform(0.5, 1.0)
        if rng.random() < 0.5:
            image[:, pos: pos + width, :] = tone[:, None, None]
            occupied[pos: pos + width, :] = True
        else:
            image[:, :, pos: pos + width] = tone[:, None, None]
            occupied[:, pos: pos + width] = True

    lo, hi = spec.buildings_per_patch
    for _ in range(int(rng.integers(lo, hi + 1))):
        h, w = _draw_side(rng, spec), _draw_side(rng, spec)
        y, x = _place(rng, occupied, h, w)
        footprint = np.zeros_like(occupied)
        footprint[y: y + h, x: x + w] = True
        if spec.composite and rng.random() < 0.5:
            # wing attached along the bottom edge, clipped to the patch
            wh, ww = max(1, h // 2), max(1, w // 2)
            wy, wx = y + h, x + int(rng.integers(0, w - ww + 1))
            wing = np.zeros_like(occupied)
            wing[wy: wy + wh, wx: wx + ww] = True
            grown = ndimage.binary_dilation(footprint | wing, np.ones((3, 3), bool))
            if not (occupied & grown).any():
                footprint |= wing
        roof = base + spec.building_intensity_contrast * rng.uniform(0.6, 1.4) * rng.uniform(0.7, 1.3, size=3)
        texture = spec.texture_noise_std * rng.standard_normal((3, size, size))
        image = np.where(footprint[None], roof[:, None, None] + texture, image)
        mask[footprint] = 1
        occupied |= ndimage.binary_dilation(footprint, np.ones((3, 3), bool)) if spec.composite else footprint

    image = image + spec.background_noise_std * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return PatchPair(image=image, mask=mask, resolution=res)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class DatasetSplit:
    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    ratio: str = "custom"

    def __post_init__(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.val), set(self.test)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise DatasetError("split index sets overlap")
        if len(self.labeled) < 1:
            raise DatasetError("labeled set is empty")

    def as_dict(self) -> dict[str, list[int]]:
        return {k: list(getattr(self, k)) for k in ("labeled", "unlabeled", "val", "test")}


def parse_ratio(ratio: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in str(ratio).split(":"))
    except ValueError:
        raise ValueError(f"ratio must look like '1:10', got {ratio!r}") from None
    if a <= 0 or b < 0:
        raise ValueError(f"invalid ratio {ratio!r}")
    return a, b


def _count(value: float, n: int) -> int:
    if isinstance(value, float) and 0 <= value < 1:
        return int(round(value * n))
    return int(value)


def split_dataset(n: int, ratio: str, val: float = 0.1, test: float = 0.15, seed: int = 0) -> DatasetSplit:
    """Random disjoint labeled/unlabeled/val/test partition of ``range(n)``.

    ``val`` and ``test`` are either fractions of ``n`` (floats below 1) or
    absolute counts. The remaining pool is divided labeled:unlabeled per
    ``ratio``.
    """
    a, b = parse_ratio(ratio)
    n_val, n_test = _count(val, n), _count(test, n)
    pool = n - n_val - n_test
    n_lab = int(round(pool * a / (a + b)))
    if pool < 1 or n_lab < 1 or (b > 0 and pool - n_lab < 1) or min(n_val, n_test) < 0:
        raise DatasetError(f"{n} items are not enough for ratio {ratio} with {n_val} val / {n_test} test")
    perm = np.random.default_rng(seed).permutation(n)
    cut = np.cumsum([n_val, n_test, n_lab])
    val_idx, test_idx, lab_idx, unl_idx = np.split(perm, cut)
    tag = ratio if ratio in PAPER_RATIOS else "custom"
    as_t = lambda a: tuple(sorted(int(i) for i in a))  # noqa: E731
    return DatasetSplit(as_t(lab_idx), as_t(unl_idx), as_t(val_idx), as_t(test_idx), tag)


# ---------------------------------------------------------------- datasets

class PatchDataset:
    """Indexed access to image/mask pairs.

    Masks are read through :meth:`mask` only, so callers (and tests) can audit
    which labels were touched.
    """

    def __init__(self, resolution: float, patch_size: int, ids: Sequence[str], split: DatasetSplit | None):
        self.resolution = ResolutionSpec(float(resolution))
        self.patch_size = int(patch_size)
        self.ids = list(ids)
        self.split = split

    def __len__(self) -> int:
        return len(self.ids)

    def image(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def mask(self, i: int) -> np.ndarray:
        raise NotImplementedError

    def pair(self, i: int) -> PatchPair:
        return PatchPair(self.image(i), self.mask(i), self.resolution)

    def __iter__(self):
        for i in range(len(self)):
            yield self.pair(i)


class ArrayDataset(PatchDataset):
    def __init__(self, images: np.ndarray, masks: np.ndarray, resolution: float, split: DatasetSplit | None = None,
                 ids: Sequence[str] | None = None):
        images = np.asarray(images, dtype=np.float32)
        masks = np.asarray(masks, dtype=np.uint8)
        if images.shape[0] != masks.shape[0] or images.shape[2:] != masks.shape[1:]:
            raise DatasetError(f"image/mask size mismatch: {images.shape} vs {masks.shape}")
        ids = ids if ids is not None else [f"p{i:05d}" for i in range(len(images))]
        super().__init__(resolution, images.shape[-1], ids, split)
        self._images, self._masks = images, masks

    def image(self, i: int) -> np.ndarray:
        return self._images[i]

    def mask(self, i: int) -> np.ndarray:
        return self._masks[i]


class DirectoryDataset(PatchDataset):
    """Lazily reads PNG patches from a dataset directory."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        ids = [str(i) for i in manifest["ids"]]
        pos = {k: n for n, k in enumerate(ids)}
        split = None
        if manifest.get("split"):
            s = manifest["split"]
            try:
                split = DatasetSplit(
                    *(tuple(sorted(pos[k] for k in s.get(name, []))) for name in ("labeled", "unlabeled", "val", "test")),
                    ratio=str(manifest.get("ratio", "custom")),
                )
            except KeyError as exc:
                raise DatasetError(f"split references unknown id {exc}") from None
        super().__init__(manifest["resolution_m_per_px"], manifest["patch_size"], ids, split)
        self._image_cache: dict[int, np.ndarray] = {}
        self._mask_cache: dict[int, np.ndarray] = {}

    def _read(self, path: Path, mode: str) -> np.ndarray:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert(mode))
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read {path}: {exc}") from None
        if arr.shape[:2] != (self.patch_size, self.patch_size):
            raise DatasetError(f"{path} has size {arr.shape[:2]}, expected {self.patch_size}")
        return arr

    def image(self, i: int) -> np.ndarray:
        if i not in self._image_cache:
            arr = self._read(self.root / "images" / f"{self.ids[i]}.png", "RGB")
            self._image_cache[i] = (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
        return self._image_cache[i]

    def mask(self, i: int) -> np.ndarray:
        if i not in self._mask_cache:
            arr = self._read(self.root / "masks" / f"{self.ids[i]}.png", "L")
            self._mask_cache[i] = (arr >= MASK_THRESHOLD).astype(np.uint8)
        return self._mask_cache[i]


def load_patch_dir(path) -> DirectoryDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("resolution_m_per_px", "patch_size", "ids"):
        if key not in manifest:
            raise DatasetError(f"manifest lacks {key!r}")
    ds = DirectoryDataset(root, manifest)
    needs_mask = set(range(len(ds))) if ds.split is None else set(ds.split.labeled + ds.split.val + ds.split.test)
    for i, k in enumerate(ds.ids):
        if not (root / "images" / f"{k}.png").is_file():
            raise DatasetError(f"missing image for id {k}")
        if i in needs_mask and not (root / "masks" / f"{k}.png").is_file():
            raise DatasetError(f"missing mask for id {k} (image without label in a labeled split)")
    return ds


def write_patch_dir(path, pairs: Sequence[PatchPair], split: DatasetSplit | None, ids: Sequence[str] | None = None,
                    extra: dict | None = None) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = list(ids) if ids is not None else [f"p{i:05d}" for i in range(len(pairs))]
    if not pairs:
        raise DatasetError("no patches to write")
    for k, p in zip(ids, pairs):
        rgb = np.round(np.clip(p.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, "RGB").save(root / "images" / f"{k}.png")
        Image.fromarray(p.mask.astype(np.uint8) * 255, "L").save(root / "masks" / f"{k}.png")
    manifest = {
        "resolution_m_per_px": pairs[0].resolution.r,
        "patch_size": int(pairs[0].image.shape[-1]),
        "ids": ids,
        "split": {k: [ids[i] for i in v] for k, v in split.as_dict().items()} if split else {},
    }
    if split is not None:
        manifest["ratio"] = split.ratio
    manifest.update(extra or {})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def generate_dataset(spec: SyntheticSceneSpec, n_total: int, ratio: str, val: float, test: float,
                     split_seed: int | None = None) -> ArrayDataset:
    pairs = [generate_scene(spec, i) for i in range(n_total)]
    split = split_dataset(n_total, ratio, val, test, seed=spec.seed if split_seed is None else split_seed)
    return ArrayDataset(np.stack([p.image for p in pairs]), np.stack([p.mask for p in pairs]), spec.resolution, split)

