"""Synthetic shape world: scene images with boxes, masked support renditions,
episode sampling and the on-disk dataset format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BoxAnnotation, iou
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .rng import Rng, derive_seed

CLASS_NAMES = ("circle", "square", "triangle", "cross", "ring", "diamond", "bar", "star")
MANIFEST_HEADER = "icpe-dataset 1"


@dataclass(frozen=True)
class ShapeWorldSpec:
    seed: int = 0
    image_size: int = 64
    class_names: tuple = CLASS_NAMES
    base_classes: tuple = (0, 1, 2, 3, 4, 5)
    novel_classes: tuple = (6, 7)
    min_objects: int = 1
    max_objects: int = 3
    scene_scale: tuple = (14, 26)
    support_scale: tuple = (24, 40)
    supports_per_class: int = 20
    clutter_blobs: int = 4
    noise: float = 0.06

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes must be disjoint")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if self.scene_scale[1] > self.image_size or self.support_scale[1] > self.image_size:
            raise ValueError("object scale exceeds image size")

    @property
    def all_classes(self) -> tuple:
        return tuple(sorted(self.base_classes + self.novel_classes))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ShapeWorldSpec":
        raw = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


@dataclass
class SceneImage:
    image: np.ndarray  # uint8 [H, W, 3]
    boxes: list[BoxAnnotation]
    index: int = -1

    @property
    def classes(self) -> set[int]:
        return {b.class_id for b in self.boxes}


@dataclass
class SupportInstance:
    image: np.ndarray  # uint8 [H, W, 3]
    mask: np.ndarray  # uint8 [H, W], values 0/1
    class_id: int
    index: int = -1


@dataclass
class Dataset:
    spec: ShapeWorldSpec
    images: list[SceneImage]
    supports: list[SupportInstance]
    _by_class: dict = field(default_factory=dict, repr=False)

    def supports_of(self, class_id: int) -> list[SupportInstance]:
        if not self._by_class:
            for s in self.supports:
                self._by_class.setdefault(s.class_id, []).append(s)
        return self._by_class.get(class_id, [])

    def images_within(self, classes) -> list[SceneImage]:
        allowed = set(classes)
        return [im for im in self.images if im.boxes and im.classes <= allowed]

    def images_with(self, class_id: int) -> list[SceneImage]:
        return [im for im in self.images if class_id in im.classes]


@dataclass
class Episode:
    supports: dict[int, list[SupportInstance]]
    queries: list[SceneImage]
    k: int

    @property
    def classes(self) -> list[int]:
        return sorted(self.supports)


# ---------------------------------------------------------------------------
# rasterisation


def _star_polygon(points: int = 5, inner: float = 0.42) -> np.ndarray:
    verts = []
    for i in range(2 * points):
        r = 1.0 if i % 2 == 0 else inner
        theta = -math.pi / 2 + i * math.pi / points
        verts.append((r * math.cos(theta), r * math.sin(theta)))
    return np.array(verts)


_STAR = _star_polygon()


def _inside_polygon(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.zeros(u.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > v) != (y2 > v)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (u < xint)
    return inside


def render_mask(class_id: int, x0: int, y0: int, s: int, size: int) -> np.ndarray:
    """Boolean mask of shape ``class_id`` inscribed in the square [x0, x0+s) x [y0, y0+s)."""
    half = s / 2.0
    px = (np.arange(size) + 0.5 - (x0 + half)) / half
    py = (np.arange(size) + 0.5 - (y0 + half)) / half
    u, v = np.meshgrid(px, py)
    inbox = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    name = CLASS_NAMES[class_id]
    if name == "circle":
        m = u * u + v * v <= 1
    elif name == "square":
        m = inbox
    elif name == "triangle":
        m = inbox & (np.abs(u) <= (v + 1) / 2)
    elif name == "cross":
        m = inbox & ((np.abs(u) <= 1 / 3) | (np.abs(v) <= 1 / 3))
    elif name == "ring":
        r2 = u * u + v * v
        m = (r2 <= 1) & (r2 >= 0.3)
    elif name == "diamond":
        m = np.abs(u) + np.abs(v) <= 1
    elif name == "bar":
        m = inbox & (np.abs(v) <= 1 / 3)
    elif name == "star":
        m = _inside_polygon(u, v, _STAR)
    else:
        raise ValueError(f"unknown class {class_id}")
    return m


def tight_box(mask: np.ndarray, class_id: int) -> BoxAnnotation:
    ys, xs = np.nonzero(mask)
    return BoxAnnotation(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1, class_id)


def _color(rng: Rng) -> np.ndarray:
    c = [rng.randint(40, 255) for _ in range(3)]
    c[rng.randint(0, 2)] = rng.randint(180, 255)
    return np.array(c, dtype=np.float64)


def _canvas(spec: ShapeWorldSpec, rng: Rng) -> np.ndarray:
    size = spec.image_size
    img = np.full((size, size, 3), float(rng.randint(0, 50)))
    for _ in range(spec.clutter_blobs):
        r = rng.uniform(1.0, 2.5)
        cx, cy = rng.uniform(0, size), rng.uniform(0, size)
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = _color(rng)
    return img


def _finish(spec: ShapeWorldSpec, img: np.ndarray, rng: Rng) -> np.ndarray:
    amp = spec.noise * 255.0
    img = img + rng.uniform_array(img.shape, -amp, amp)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_scene(spec: ShapeWorldSpec, index: int, classes=None) -> SceneImage:
    """Scene ``index`` of the world: 1..max objects, pairwise box IoU < 0.2 and disjoint masks."""
    classes = tuple(classes) if classes is not None else spec.all_classes
    rng = Rng(derive_seed(spec.seed, "scene", index))
    size = spec.image_size
    while True:
        n = rng.randint(spec.min_objects, spec.max_objects)
        placed: list[tuple[np.ndarray, BoxAnnotation]] = []
        for _ in range(n):
            cid = rng.choice(classes)
            for _retry in range(100):
                s = rng.randint(*spec.scene_scale)
                x0, y0 = rng.randint(0, size - s), rng.randint(0, size - s)
                m = render_mask(cid, x0, y0, s, size)
                box = tight_box(m, cid)
                if all(iou(box, b) < 0.2 and not (m & pm).any() for pm, b in placed):
                    placed.append((m, box))
                    break
            else:
                break
        if len(placed) == n:
            break
    img = _canvas(spec, rng)
    for m, box in placed:
        img[m] = _color(rng)
    return SceneImage(_finish(spec, img, rng), [b for _, b in placed], index)


def render_support(spec: ShapeWorldSpec, class_id: int, j: int) -> SupportInstance:
    """A single centred object with its exact mask."""
    rng = Rng(derive_seed(spec.seed, "support", class_id, j))
    size = spec.image_size
    s = rng.randint(*spec.support_scale)
    x0 = (size - s) // 2
    m = render_mask(class_id, x0, x0, s, size)
    img = _canvas(spec, rng)
    img[m] = _color(rng)
    return SupportInstance(_finish(spec, img, rng), m.astype(np.uint8), class_id)


def generate_dataset(spec: ShapeWorldSpec, n_images: int) -> Dataset:
    """Deterministic in (spec, n_images); each item has its own derived seed."""
    images = [render_scene(spec, i) for i in range(n_images)]
    supports = []
    for cid in spec.all_classes:
        for j in range(spec.supports_per_class):
            sup = render_support(spec, cid, j)
            sup.index = len(supports)
            supports.append(sup)
    return Dataset(spec, images, supports)


# ---------------------------------------------------------------------------
# episodes


class InsufficientData(ValueError):
    pass


def sample_episode(dataset: Dataset, class_pool, k: int, n_query: int, rng: Rng,
                   access_log: list | None = None) -> Episode:
    """k supports per class (without replacement) and ``n_query`` query images
    whose annotations all lie inside ``class_pool``."""
    pool = sorted(set(class_pool))
    if not pool:
        raise ValueError("empty class pool")
    supports = {}
    for cid in pool:
        avail = dataset.supports_of(cid)
        if len(avail) < k:
            raise InsufficientData(
                f"class {cid} ({CLASS_NAMES[cid]}) has {len(avail)} supports, need {k}")
        supports[cid] = rng.sample(avail, k)
    candidates = dataset.images_within(pool)
    if len(candidates) < n_query:
        raise InsufficientData(f"only {len(candidates)} query images within classes {pool}")
    queries = rng.sample(candidates, n_query)
    if access_log is not None:
        access_log.extend(q.index for q in queries)
    return Episode(supports, queries, k)


def few_shot_subset(dataset: Dataset, base, novel, k: int, rng: Rng) -> Dataset:
    """Balanced k-shot finetuning set.

    Per class: k support renditions and k scene images containing the class.
    Base-class scenes are drawn from images free of novel objects; a novel
    class's scenes contain no other novel class.
    """
    base, novel = sorted(base), sorted(novel)
    novel_set = set(novel)
    chosen: dict[int, SceneImage] = {}
    supports: list[SupportInstance] = []
    for cid in base + novel:
        if cid in novel_set:
            cands = [im for im in dataset.images_with(cid) if im.classes & novel_set == {cid}]
        else:
            cands = [im for im in dataset.images_with(cid) if not im.classes & novel_set]
        cands = [im for im in cands if im.index not in chosen]
        if len(cands) < k:
            raise InsufficientData(f"class {cid} ({CLASS_NAMES[cid]}) has {len(cands)} scenes, need {k}")
        for im in rng.sample(cands, k):
            chosen[im.index] = im
        avail = dataset.supports_of(cid)
        if len(avail) < k:
            raise InsufficientData(f"class {cid} ({CLASS_NAMES[cid]}) has {len(avail)} supports, need {k}")
        supports.extend(rng.sample(avail, k))
    images = [chosen[i] for i in sorted(chosen)]
    return Dataset(dataset.spec, images, supports)


# ---------------------------------------------------------------------------
# disk format


def save_dataset(dataset: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "supports").mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER, "spec " + dataset.spec.to_json()]
    for im in dataset.images:
        rel = f"images/{im.index:06d}.ppm"
        write_ppm(root / rel, im.image)
        lines.append(f"image {rel} {im.index}")
        for b in im.boxes:
            lines.append(f"box {b.x1},{b.y1},{b.x2},{b.y2},{b.class_id}")
    for j, s in enumerate(dataset.supports):
        rel = f"supports/{j:06d}"
        write_ppm(root / f"{rel}.ppm", s.image)
        write_pgm(root / f"{rel}.pgm", (s.mask * 255).astype(np.uint8))
        lines.append(f"support {rel}.ppm {rel}.pgm {s.class_id} {s.index}")
    path = root / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _num(text: str):
    value = float(text)
    return int(value) if value.is_integer() and "." not in text else value


def load_dataset(root) -> Dataset:
    root = Path(root)
    lines = (root / "manifest.txt").read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{root}: not a dataset manifest")
    spec = None
    images: list[SceneImage] = []
    supports: list[SupportInstance] = []
    for line in lines[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "spec":
            spec = ShapeWorldSpec.from_json(rest)
        elif tag == "image":
            rel, idx = rest.split()
            images.append(SceneImage(read_ppm(root / rel), [], int(idx)))
        elif tag == "box":
            x1, y1, x2, y2, cid = rest.split(",")
            images[-1].boxes.append(BoxAnnotation(_num(x1), _num(y1), _num(x2), _num(y2), int(cid)))
        elif tag == "support":
            img_rel, mask_rel, cid, idx = rest.split()
            mask = (read_pgm(root / mask_rel) > 0).astype(np.uint8)
            supports.append(SupportInstance(read_ppm(root / img_rel), mask, int(cid), int(idx)))
        elif tag:
            raise ValueError(f"unknown manifest line {line!r}")
    if spec is None:
        raise ValueError("manifest has no spec line")
    return Dataset(spec, images, supports)
