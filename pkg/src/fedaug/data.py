"""Client environments: synthetic glyph generation, rotation, augmentation,
non-IID splitting, and IDX-format ingestion.

Each environment is generated by rotating shared semantic content (glyphs)
by a fixed per-environment angle; data augmentation re-randomizes that angle
(or blurs the image) every time a sample is drawn into a batch.  Glyph
content and environment angles come from independent named random streams,
so the content partition never depends on the angle values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .rng import RngStream, rng_uniform

# Prototype intensity range; keeps means unbiased under +-3 sigma clipped noise
# for noise_std <= 0.04 without touching the final [0, 1] clamp.
_PROTO_LO = 0.12
_PROTO_HI = 0.88


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, or count mismatch)."""


@dataclass(frozen=True)
class Glyph:
    """A single square grayscale image with its class label."""

    pixels: np.ndarray  # (side, side), values in [0, 1]
    label: int


@dataclass(frozen=True)
class SplitSpec:
    """Dirichlet non-IID split: per class, client shares ~ Dir(alpha * 1)."""

    dirichlet_alpha: float = 200.0
    num_clients_per_domain: int = 1

    def __post_init__(self):
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if self.num_clients_per_domain < 1:
            raise ValueError("num_clients_per_domain must be >= 1")


@dataclass(frozen=True)
class AugmentationSpec:
    """Declarative description of the input transform applied on every draw."""

    kind: str  # none | random_rotation | gaussian_blur | compose
    alpha_deg: float = 0.0
    sigma: float = 1.0
    kernel: int = 5
    parts: tuple["AugmentationSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in ("none", "random_rotation", "gaussian_blur", "compose"):
            raise ValueError(f"unknown augmentation kind: {self.kind!r}")
        if self.kind == "random_rotation" and self.alpha_deg < 0:
            raise ValueError("random_rotation alpha_deg must be >= 0")
        if self.kind == "gaussian_blur":
            if self.sigma <= 0:
                raise ValueError("gaussian_blur sigma must be > 0")
            if self.kernel < 3 or self.kernel % 2 == 0:
                raise ValueError("gaussian_blur kernel must be odd and >= 3")
        if self.kind == "compose" and not all(isinstance(p, AugmentationSpec) for p in self.parts):
            raise ValueError("compose parts must be AugmentationSpec instances")

    @classmethod
    def none(cls) -> "AugmentationSpec":
        return cls(kind="none")

    @classmethod
    def rotation(cls, alpha_deg: float) -> "AugmentationSpec":
        return cls(kind="random_rotation", alpha_deg=float(alpha_deg))

    @classmethod
    def blur(cls, sigma: float = 1.0, kernel: int = 5) -> "AugmentationSpec":
        return cls(kind="gaussian_blur", sigma=float(sigma), kernel=int(kernel))

    @classmethod
    def compose(cls, *parts: "AugmentationSpec") -> "AugmentationSpec":
        return cls(kind="compose", parts=tuple(parts))


@dataclass
class Environment:
    """A client's private dataset tied to one environmental rotation angle.

    ``val_indices`` mark the held-out evaluation split (empty for the OOD
    environment, whose full set is used for evaluation).
    """

    env_id: int
    epsilon_deg: float
    pixels: np.ndarray  # (n, side, side)
    labels: np.ndarray  # (n,)
    role: str  # "train_client" | "ood_test"
    train_indices: np.ndarray = field(default=None)  # type: ignore[assignment]
    val_indices: np.ndarray = field(default=None)  # type: ignore[assignment]
    source_indices: np.ndarray | None = None  # positions in the originating bank

    def __post_init__(self):
        if self.role not in ("train_client", "ood_test"):
            raise ValueError(f"unknown environment role: {self.role!r}")
        if len(self.pixels) == 0:
            raise ValueError("environment must contain at least one sample")
        if self.train_indices is None:
            self.train_indices = np.arange(len(self.labels))
        if self.val_indices is None:
            self.val_indices = np.arange(0)

    @property
    def num_samples(self) -> int:
        return len(self.labels)

    @property
    def side(self) -> int:
        return self.pixels.shape[1]

    def train_data(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pixels[self.train_indices], self.labels[self.train_indices]

    def eval_data(self) -> tuple[np.ndarray, np.ndarray]:
        """Validation split if one exists, otherwise the full set."""
        if len(self.val_indices) > 0:
            return self.pixels[self.val_indices], self.labels[self.val_indices]
        return self.pixels, self.labels


# ---------------------------------------------------------------------------
# Procedural glyph prototypes
# ---------------------------------------------------------------------------


def _coords(side: int) -> tuple[np.ndarray, np.ndarray]:
    c = (side - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return xs - c, ys - c


def _segment_dist(xs, ys, p0, p1) -> np.ndarray:
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    length_sq = dx * dx + dy * dy
    if length_sq == 0:
        return np.hypot(xs - p0[0], ys - p0[1])
    t = np.clip(((xs - p0[0]) * dx + (ys - p0[1]) * dy) / length_sq, 0.0, 1.0)
    return np.hypot(xs - (p0[0] + t * dx), ys - (p0[1] + t * dy))


def _stroke(dist: np.ndarray, width: float) -> np.ndarray:
    return np.exp(-((dist / width) ** 2))


def _draw(side: int, dists: list[np.ndarray], width: float) -> np.ndarray:
    shape = np.zeros((side, side))
    for d in dists:
        shape = np.maximum(shape, _stroke(d, width))
    return _PROTO_LO + (_PROTO_HI - _PROTO_LO) * shape


def glyph_prototypes(num_classes: int, side: int) -> list[tuple[int, np.ndarray]]:
    """First ``num_classes`` entries of the shape catalog at resolution ``side``.

    The catalog holds 12 shapes (bars, crosses, rings, corners at distinct
    orientations, radii, and positions).  The leading eight are pairwise
    distinguishable under arbitrary rotation; the trailing entries are
    rotated variants of earlier shapes and make the task deliberately
    ambiguous under strong rotation.
    """
    if side < 8:
        raise ValueError("side must be >= 8")
    xs, ys = _coords(side)
    w = 0.10 * side
    arm = 0.38 * side

    def seg(x0, y0, x1, y1):
        return _segment_dist(xs, ys, (x0, y0), (x1, y1))

    center_dist = np.hypot(xs, ys)
    catalog = [
        ("bar", [seg(-arm, 0, arm, 0)]),
        ("plus", [seg(-arm, 0, arm, 0), seg(0, -arm, 0, arm)]),
        ("ring", [np.abs(center_dist - 0.30 * side)]),
        ("disk", [np.maximum(center_dist - 0.20 * side, 0.0)]),
        ("corner", [seg(0, 0, arm, 0), seg(0, 0, 0, -arm)]),
        ("tee", [seg(-arm, 0, arm, 0), seg(0, 0, 0, arm)]),
        ("rails", [seg(-arm, -0.22 * side, arm, -0.22 * side), seg(-arm, 0.22 * side, arm, 0.22 * side)]),
        ("halo", [np.abs(center_dist - 0.42 * side)]),
        ("slash", [seg(-0.7 * arm, -0.7 * arm, 0.7 * arm, 0.7 * arm)]),
        ("saltire", [seg(-0.7 * arm, -0.7 * arm, 0.7 * arm, 0.7 * arm), seg(-0.7 * arm, 0.7 * arm, 0.7 * arm, -0.7 * arm)]),
        ("dot_ring", [np.abs(center_dist - 0.30 * side), np.maximum(center_dist - 0.08 * side, 0.0)]),
        ("spot", [np.maximum(np.hypot(xs - 0.25 * side, ys) - 0.10 * side, 0.0)]),
    ]
    if num_classes > len(catalog):
        raise ValueError(f"at most {len(catalog)} glyph classes available, got {num_classes}")
    return [(label, _draw(side, dists, w)) for label, (_, dists) in enumerate(catalog[:num_classes])]


def make_glyph_bank(
    num_classes: int,
    side: int,
    samples_per_class: int,
    noise_std: float,
    stream: RngStream,
    prototypes: list[tuple[int, np.ndarray]] | None = None,
) -> list[Glyph]:
    """Noisy samples around each class prototype, deterministic per stream.

    Noise is Gaussian clipped symmetrically at +-3 sigma (so sample means stay
    unbiased); the result is clamped to [0, 1], which is a no-op for
    noise_std <= 0.04 given the prototype intensity range.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    protos = prototypes if prototypes is not None else glyph_prototypes(num_classes, side)
    if len(protos) < num_classes:
        raise ValueError(f"prototype catalog has {len(protos)} classes, need {num_classes}")
    gen = stream.generator
    bank = []
    for label, proto in protos[:num_classes]:
        noise = gen.normal(0.0, noise_std, size=(samples_per_class, side, side))
        noise = np.clip(noise, -3.0 * noise_std, 3.0 * noise_std)
        samples = np.clip(proto[None] + noise, 0.0, 1.0)
        bank.extend(Glyph(pixels=samples[i], label=label) for i in range(samples_per_class))
    return bank


def export_glyph_prototypes(path, prototypes: list[tuple[int, np.ndarray]]) -> None:
    """Write a prototype catalog as {side, classes: [{label, prototype}]} JSON."""
    side = prototypes[0][1].shape[0]
    doc = {
        "side": side,
        "classes": [
            {"label": int(label), "prototype": proto.tolist()} for label, proto in prototypes
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_glyph_prototypes(path) -> list[tuple[int, np.ndarray]]:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    side = int(doc["side"])
    protos = []
    for entry in doc["classes"]:
        proto = np.asarray(entry["prototype"], dtype=np.float64)
        if proto.shape != (side, side):
            raise ValueError(f"prototype for label {entry['label']} is not {side}x{side}")
        protos.append((int(entry["label"]), proto))
    return protos


# ---------------------------------------------------------------------------
# Rotation and augmentation
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def _grid_offsets(side: int) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = _coords(side)
    return xs.ravel(), ys.ravel()


def rotate_images(images: np.ndarray, angles_deg) -> np.ndarray:
    """Rotate each (square) image about its center by its own angle.

    Bilinear interpolation; reads outside the frame are 0; output clamped to
    [0, 1].  Angles are reduced mod 360 first, so multiples of 360 are exact
    identities.
    """
    images = np.asarray(images, dtype=np.float64)
    b, h, w = images.shape
    if h != w:
        raise ValueError(f"rotation requires square images, got {h}x{w}")
    ang = np.deg2rad(np.asarray(angles_deg, dtype=np.float64) % 360.0)
    if ang.shape != (b,):
        raise ValueError("need one angle per image")
    if not ang.any():
        return images.copy()

    xo, yo = _grid_offsets(h)
    c = (h - 1) / 2.0
    cos = np.cos(ang)[:, None]
    sin = np.sin(ang)[:, None]
    sx = cos * xo + sin * yo + c  # (b, h*w) source coords, inverse map
    sy = -sin * xo + cos * yo + c

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    rows = np.arange(b)[:, None]
    out = np.zeros((b, h * w))
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = images[rows, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += wgt * np.where(valid, vals, 0.0)
    return np.clip(out.reshape(b, h, w), 0.0, 1.0)


def rotate_image(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate one square image; see :func:`rotate_images`."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise ValueError("rotate_image expects a 2-d image")
    return rotate_images(pixels[None], [angle_deg])[0]


def _gauss_kernel(sigma: float, kernel: int) -> np.ndarray:
    offsets = np.arange(kernel) - kernel // 2
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_batch(images: np.ndarray, sigma: float, kernel: int) -> np.ndarray:
    k = _gauss_kernel(sigma, kernel)
    out = ndimage.correlate1d(images, k, axis=-2, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=-1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def augment_batch(spec: AugmentationSpec, images: np.ndarray, stream: RngStream) -> np.ndarray:
    """Apply the transform with fresh randomness per image; labels untouched."""
    images = np.asarray(images, dtype=np.float64)
    if spec.kind == "none":
        return images
    if spec.kind == "random_rotation":
        betas = stream.generator.uniform(-spec.alpha_deg, spec.alpha_deg, size=len(images))
        return rotate_images(images, betas)
    if spec.kind == "gaussian_blur":
        return _blur_batch(images, spec.sigma, spec.kernel)
    out = images
    for part in spec.parts:
        out = augment_batch(part, out, stream)
    return out


def apply_augmentation(spec: AugmentationSpec, pixels: np.ndarray, stream: RngStream) -> np.ndarray:
    """Single-image variant of :func:`augment_batch`."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if spec.kind == "random_rotation":
        beta = rng_uniform(stream, -spec.alpha_deg, spec.alpha_deg)
        return rotate_image(pixels, beta)
    return augment_batch(spec, pixels[None], stream)[0]


# ---------------------------------------------------------------------------
# Environments and splits
# ---------------------------------------------------------------------------


def _split_validation(n: int, val_fraction: float, stream: RngStream):
    n_val = int(round(val_fraction * n))
    perm = stream.generator.permutation(n)
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    return train, val


def make_environments(
    bank: list[Glyph],
    angles_deg,
    ood_angle_deg: float,
    stream: RngStream,
    val_fraction: float = 0.1,
) -> list[Environment]:
    """One training environment per angle plus one held-out OOD environment.

    The bank is partitioned disjointly across environments before rotation;
    the partition stream depends only on the bank size and environment count,
    never on the angle values.
    """
    angles = [float(a) for a in angles_deg]
    if len(set(angles)) != len(angles):
        raise ValueError("training angles must be distinct")
    if not angles:
        raise ValueError("need at least one training angle")

    perm = stream.child("partition").generator.permutation(len(bank))
    parts = np.array_split(perm, len(angles) + 1)
    all_pixels = np.stack([g.pixels for g in bank])
    all_labels = np.array([g.label for g in bank], dtype=np.int64)

    envs = []
    for env_id, (angle, part) in enumerate(zip(angles + [float(ood_angle_deg)], parts)):
        role = "train_client" if env_id < len(angles) else "ood_test"
        pixels = rotate_images(all_pixels[part], np.full(len(part), angle))
        if role == "train_client":
            train_idx, val_idx = _split_validation(
                len(part), val_fraction, stream.child("valsplit", env_id)
            )
        else:
            train_idx, val_idx = np.arange(len(part)), np.arange(0)
        envs.append(
            Environment(
                env_id=env_id,
                epsilon_deg=angle,
                pixels=pixels,
                labels=all_labels[part],
                role=role,
                train_indices=train_idx,
                val_indices=val_idx,
                source_indices=part,
            )
        )
    return envs


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    ideal = proportions * total
    counts = np.floor(ideal).astype(np.int64)
    frac = ideal - counts
    leftover = total - int(counts.sum())
    order = np.argsort(-frac, kind="stable")  # ties -> lowest client index
    counts[order[:leftover]] += 1
    return counts


def dirichlet_split(
    env: Environment,
    split: SplitSpec,
    stream: RngStream,
    val_fraction: float = 0.1,
) -> list[Environment]:
    """Partition one environment into clients, class by class.

    For each class, client shares are drawn from a symmetric Dirichlet and
    converted to counts by largest-remainder rounding, so every sample is
    assigned exactly once.
    """
    k = split.num_clients_per_domain
    classes = np.unique(env.labels)
    for c in classes:
        if int((env.labels == c).sum()) < k:
            raise ValueError(
                f"insufficient samples: class {int(c)} has fewer than {k} samples"
            )
    if k == 1:
        return [env]

    gen = stream.generator
    assigned: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in classes:
        idx = np.flatnonzero(env.labels == c)
        shares = gen.dirichlet(np.full(k, split.dirichlet_alpha))
        counts = _largest_remainder(shares, len(idx))
        bounds = np.cumsum(counts)[:-1]
        for j, chunk in enumerate(np.split(idx, bounds)):
            assigned[j].append(chunk)

    children = []
    for j in range(k):
        idx = np.sort(np.concatenate(assigned[j])) if assigned[j] else np.arange(0)
        if len(idx) == 0:
            raise ValueError(f"dirichlet split produced an empty client (client {j})")
        train_idx, val_idx = _split_validation(len(idx), val_fraction, stream.child("val", j))
        children.append(
            Environment(
                env_id=env.env_id * k + j,
                epsilon_deg=env.epsilon_deg,
                pixels=env.pixels[idx],
                labels=env.labels[idx],
                role=env.role,
                train_indices=train_idx,
                val_indices=val_idx,
                source_indices=None if env.source_indices is None else env.source_indices[idx],
            )
        )
    return children


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_exact(f, n: int, path) -> bytes:
    data = f.read(n)
    if len(data) < n:
        raise IdxFormatError(f"truncated file: {path}")
    return data


def _read_header(f, n_fields: int, expected_magic: int, path) -> tuple[int, ...]:
    raw = _read_exact(f, 4 * (n_fields + 1), path)
    fields = struct.unpack(f">{n_fields + 1}i", raw)
    if fields[0] != expected_magic:
        raise IdxFormatError(
            f"bad magic in {path}: expected 0x{expected_magic:08x}, got 0x{fields[0]:08x}"
        )
    return fields[1:]


def load_idx_dataset(images_path, labels_path) -> list[tuple[np.ndarray, int]]:
    """Load an image/label pair of IDX files as [(pixels in [0,1], label)]."""
    with open(images_path, "rb") as f:
        count, rows, cols = _read_header(f, 3, IDX_IMAGES_MAGIC, images_path)
        payload = _read_exact(f, count * rows * cols, images_path)
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        (label_count,) = _read_header(f, 1, IDX_LABELS_MAGIC, labels_path)
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)

    if count != label_count:
        raise IdxFormatError(f"count mismatch: {count} images vs {label_count} labels")
    return [(images[i].astype(np.float64) / 255.0, int(labels[i])) for i in range(count)]
