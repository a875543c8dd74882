"""Synthetic shape corpora, manifests, PNG I/O and episode sampling."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle", "ring", "bar")
TEXTURES = ("flat", "noise", "gradient")
MANIFEST_NAME = "manifest.jsonl"
SPEC_NAME = "dataset.json"

# paletted mask colours: index 0 black, then distinct hues
_PALETTE = [0, 0, 0, 230, 25, 75, 60, 180, 75, 0, 130, 200, 245, 130, 48, 145, 30, 180,
            70, 240, 240, 240, 50, 230, 210, 245, 60]


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    resolution: int = 64
    categories: tuple[str, ...] = ("circle", "square", "triangle")
    samples_per_category: int = 64
    distractors: tuple[int, int] = (1, 2)
    radius: tuple[float, float] = (7.0, 12.0)
    texture: str = "flat"
    video: bool = False
    frames_per_video: int = 6
    max_speed: float = 2.0
    seed: int = 0
    f_sp: int = 2
    patch: int = 8

    def __post_init__(self):
        if self.resolution % self.f_sp or self.resolution % self.patch:
            raise ValueError("resolution must be divisible by f_sp and the prompt patch size")
        if not self.categories or len(set(self.categories)) != len(self.categories):
            raise ValueError("categories must be a non-empty list of distinct shapes")
        for c in self.categories:
            if c not in SHAPES:
                raise ValueError(f"unknown shape {c!r}; choose from {SHAPES}")
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        per = self.frames_per_video if self.video else 1
        if self.samples_per_category * per < 2:
            raise ValueError("need at least 2 samples per category")
        if self.distractors[0] < 0 or self.distractors[1] < self.distractors[0]:
            raise ValueError("bad distractor range")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDatasetSpec":
        d = dict(d)
        for k in ("categories", "distractors", "radius"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Record:
    id: str
    image: str
    mask: str
    categories: list[int]
    primary: int
    video: str | None = None
    frame: int | None = None


# ---------------------------------------------------------------- rasterisation

def _grid(res: int):
    c = np.arange(res) + 0.5
    return np.meshgrid(c, c, indexing="xy")


def rasterize(shape: str, cx: float, cy: float, r: float, angle: float, res: int) -> np.ndarray:
    """Boolean mask of the pixels whose centres fall inside the shape."""
    x, y = _grid(res)
    dx, dy = x - cx, y - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "square":
        s = 0.8 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if shape == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.3 * r)
    if shape == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            th = 2 * math.pi * k / 3
            # edge normal pointing outward; apothem = r/2 for an equilateral triangle
            inside &= (u * math.cos(th) + v * math.sin(th)) <= r / 2
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def _colour(rng: np.random.Generator, avoid: list[np.ndarray]) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(-1, 1, 3)
        if all(np.linalg.norm(c - a) > 0.6 for a in avoid):
            return c
    return c


def _paint(img: np.ndarray, mask: np.ndarray, colour: np.ndarray, texture: str,
           rng: np.random.Generator, cx: float, cy: float, r: float) -> None:
    if texture == "gradient":
        x, y = _grid(img.shape[1])
        ang = rng.uniform(0, 2 * math.pi)
        ramp = ((x - cx) * math.cos(ang) + (y - cy) * math.sin(ang)) / max(r, 1.0)
        val = colour[:, None, None] + 0.25 * ramp[None]
    else:
        val = np.broadcast_to(colour[:, None, None], img.shape)
    img[:, mask] = val[:, mask]


def _place(rng, res: int, radius: tuple[float, float], placed: list[tuple[float, float, float]]):
    for _ in range(200):
        r = rng.uniform(*radius)
        cx, cy = rng.uniform(r + 1, res - r - 1, 2)
        if all(math.hypot(cx - px, cy - py) > r + pr + 2 for px, py, pr in placed):
            return cx, cy, r
    return None


def _scene(spec: SyntheticDatasetSpec, primary: int, rng: np.random.Generator):
    """Objects as (category id, cx, cy, r, angle); primary first."""
    cats = list(range(1, len(spec.categories) + 1))
    others = [c for c in cats if c != primary]
    n_d = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1)) if others else 0
    wanted = [primary] + [int(rng.choice(others)) for _ in range(n_d)]
    objs, placed = [], []
    for cat in wanted:
        spot = _place(rng, spec.resolution, spec.radius, placed)
        if spot is None:
            if cat == primary:
                raise RuntimeError("could not place the primary object")
            continue
        placed.append(spot)
        objs.append((cat, *spot, float(rng.uniform(0, 2 * math.pi))))
    return objs


def _render(spec: SyntheticDatasetSpec, objs, colours, bg, rng) -> tuple[np.ndarray, np.ndarray]:
    res = spec.resolution
    img = np.empty((3, res, res))
    img[:] = bg[:, None, None]
    labels = np.zeros((res, res), np.uint8)
    for (cat, cx, cy, r, ang), col in zip(objs, colours):
        m = rasterize(spec.categories[cat - 1], cx, cy, r, ang, res)
        _paint(img, m, col, spec.texture, rng, cx, cy, r)
        labels[m] = cat
    if spec.texture == "noise":
        img += rng.normal(0, 0.08, img.shape)
    return np.clip(img, -1, 1), labels


def _move(objs, vel, res):
    out = []
    for (cat, cx, cy, r, ang), (vx, vy) in zip(objs, vel):
        cx = float(np.clip(cx + vx, r + 1, res - r - 1))
        cy = float(np.clip(cy + vy, r + 1, res - r - 1))
        out.append((cat, cx, cy, r, ang))
    return out


# ---------------------------------------------------------------- file I/O

def image_to_png(image: np.ndarray, path: str | Path) -> None:
    """(3, H, W) in [-1, 1] -> 8-bit RGB."""
    arr = np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), "RGB").save(path)


def png_to_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr.transpose(2, 0, 1) / 127.5 - 1.0


def labels_to_png(labels: np.ndarray, path: str | Path) -> None:
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), "P")
    im.putpalette(_PALETTE + [0] * (768 - len(_PALETTE)))
    im.save(path)


def binary_to_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), "L").save(path)


def png_to_labels(path: str | Path) -> np.ndarray:
    """Paletted masks give indices; grayscale binary masks give 0/1."""
    im = Image.open(path)
    arr = np.asarray(im)
    if im.mode == "P":
        return arr.astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 127).astype(np.uint8)


# ---------------------------------------------------------------- corpus

def generate_dataset(spec: SyntheticDatasetSpec, out_dir: str | Path) -> list[Record]:
    """Write images, masks, ``manifest.jsonl`` and ``dataset.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write dataset to {out}: {e}") from e
    rng = np.random.default_rng(spec.seed)
    records: list[Record] = []
    res = spec.resolution
    for cat in range(1, len(spec.categories) + 1):
        for s in range(spec.samples_per_category):
            objs = _scene(spec, cat, rng)
            colours: list[np.ndarray] = []
            bg = rng.uniform(-1, 1, 3)
            for _ in objs:
                colours.append(_colour(rng, [bg] + colours))
            if spec.video:
                vid = f"v{cat}_{s:04d}"
                vel = [tuple(rng.uniform(-spec.max_speed, spec.max_speed, 2)) for _ in objs]
                frames = []
                for fi in range(spec.frames_per_video):
                    frames.append((fi, objs))
                    objs = _move(objs, vel, res)
            else:
                vid = None
                frames = [(None, objs)]
            for fi, fobjs in frames:
                img, labels = _render(spec, fobjs, colours, bg, rng)
                if not (labels == cat).any():
                    continue
                sid = f"{spec.categories[cat - 1]}_{s:04d}" + ("" if fi is None else f"_f{fi:02d}")
                ipath, mpath = f"images/{sid}.png", f"masks/{sid}.png"
                image_to_png(img, out / ipath)
                labels_to_png(labels, out / mpath)
                present = sorted(int(c) for c in np.unique(labels) if c)
                records.append(Record(sid, ipath, mpath, present, cat, vid, fi))
    write_manifest(records, out / MANIFEST_NAME)
    (out / SPEC_NAME).write_text(json.dumps(asdict(spec), indent=1))
    return records


def write_manifest(records: list[Record], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[Record]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(Record(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: malformed manifest record ({e})") from None
    return records


@dataclass
class Episode:
    query_image: np.ndarray
    query_mask: np.ndarray
    prompts: list[tuple[np.ndarray, np.ndarray]]
    category_id: int
    source: str
    query_index: int = -1
    prompt_indices: list[int] = field(default_factory=list)


class SegDataset:
    """A manifest loaded into memory: images (N, 3, H, W) in [-1, 1], label maps (N, H, W)."""

    def __init__(self, records: list[Record], images: np.ndarray, labels: np.ndarray,
                 category_names: tuple[str, ...] | None = None):
        self.records = records
        self.images = images.astype(np.float32)
        self.labels = labels.astype(np.uint8)
        n_cat = max((max(r.categories) for r in records if r.categories), default=0)
        self.category_names = category_names or tuple(f"class{i}" for i in range(1, n_cat + 1))
        self.num_categories = max(n_cat, len(self.category_names))
        self._index()

    def _index(self) -> None:
        self.by_category: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            for c in r.categories:
                self.by_category.setdefault(c, []).append(i)
        self.video_of = [r.video for r in self.records]
        self.is_video = any(v is not None for v in self.video_of)

    @classmethod
    def load(cls, manifest: str | Path) -> "SegDataset":
        manifest = Path(manifest)
        root = manifest.parent
        records = read_manifest(manifest)
        if not records:
            raise ValueError(f"empty manifest {manifest}")
        images, labels = [], []
        for r in records:
            for rel in (r.image, r.mask):
                if not (root / rel).exists():
                    raise FileNotFoundError(f"manifest references missing file {root / rel}")
            images.append(png_to_image(root / r.image))
            lab = png_to_labels(root / r.mask)
            present = sorted(int(c) for c in np.unique(lab) if c)
            if present != sorted(r.categories):
                raise ValueError(f"{r.id}: mask categories {present} != manifest {r.categories}")
            labels.append(lab)
        names = None
        spec_path = root / SPEC_NAME
        if spec_path.exists():
            names = tuple(json.loads(spec_path.read_text())["categories"])
        return cls(records, np.stack(images), np.stack(labels), names)

    def __len__(self) -> int:
        return len(self.records)

    def mask(self, index: int, category: int) -> np.ndarray:
        return self.labels[index] == category

    def pair_pool(self, category: int) -> list[int]:
        """Samples of ``category`` that have at least one valid partner."""
        idx = self.by_category.get(category, [])
        if not self.is_video:
            return idx if len(idx) >= 2 else []
        count: dict = {}
        for i in idx:
            count[self.video_of[i]] = count.get(self.video_of[i], 0) + 1
        return [i for i in idx if count[self.video_of[i]] >= 2]

    def partners(self, category: int, query: int) -> list[int]:
        idx = self.by_category[category]
        if self.is_video:
            v = self.video_of[query]
            return [i for i in idx if i != query and self.video_of[i] == v]
        return [i for i in idx if i != query]

    def eligible_categories(self) -> list[int]:
        return sorted(c for c in self.by_category if self.pair_pool(c))

    def episode(self, query: int, prompts: list[int], category: int) -> Episode:
        src = self.video_of[query] or "image"
        return Episode(self.images[query], self.mask(query, category),
                       [(self.images[p], self.mask(p, category)) for p in prompts],
                       category, src, query, list(prompts))


def sample_episode(dataset: SegDataset, rng: np.random.Generator, k: int = 1) -> Episode:
    """Uniform category, then a uniform query and k distinct prompts sharing it (same video for video data)."""
    cats = dataset.eligible_categories()
    if not cats:
        raise ValueError("no category has two samples to pair as query and prompt")
    cat = cats[int(rng.integers(len(cats)))]
    pool = dataset.pair_pool(cat)
    q = pool[int(rng.integers(len(pool)))]
    partners = dataset.partners(cat, q)
    k = min(k, len(partners))
    chosen = rng.choice(len(partners), size=k, replace=False)
    return dataset.episode(q, [partners[int(i)] for i in chosen], cat)


def make_eval_episodes(dataset: SegDataset, n: int, seed: int, k: int = 1) -> list[tuple[int, list[int], int]]:
    """Fixed-seed list of (query, prompts, category) so runs are comparable.

    Prompt lists are nested across k: the first k' prompts for k' < k are the same.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ep = sample_episode(dataset, rng, k=1)
        partners = [i for i in dataset.partners(ep.category_id, ep.query_index)
                    if i != ep.prompt_indices[0]]
        extra = rng.permutation(len(partners))[: max(k - 1, 0)]
        out.append((ep.query_index, ep.prompt_indices + [partners[int(i)] for i in extra],
                    ep.category_id))
    return out
