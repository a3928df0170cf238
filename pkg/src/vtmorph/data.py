"""Pair manifests, subject-disjoint splits, thermal threshold cropping and synthetic pairs."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import spatial

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
THETA_COLUMNS = ["theta_a", "theta_b", "theta_tx", "theta_c", "theta_d", "theta_ty"]
MANIFEST_COLUMNS = ["pair_id", "subject_id", "visible_path", "thermal_path", "split", "pain_class", *THETA_COLUMNS]
SPLITS = ("train", "test")


class ManifestError(ValueError):
    pass


# image io ------------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PNG as float64 H x W in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ValueError(f"{path}: expected 8-bit grayscale (mode 'L'), got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage: the values a written-then-read PNG would hold."""
    return to_uint8(img).astype(np.float64) / 255.0


def write_image(path, img: np.ndarray) -> Path:
    """Write an H x W [0, 1] image as 8-bit grayscale PNG (round-to-nearest)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="L").save(path, format="PNG")
    return path


def to_network(img: np.ndarray) -> np.ndarray:
    """[0, 1] pixels -> [-1, 1] network range."""
    return np.asarray(img) * 2.0 - 1.0


def from_network(x: np.ndarray) -> np.ndarray:
    """[-1, 1] network range -> [0, 1] pixels."""
    return (np.asarray(x) + 1.0) * 0.5


# manifest -------------------------------------------------------------------------------


@dataclass
class ImagePair:
    pair_id: str
    subject_id: str
    visible_path: Path
    thermal_path: Path
    split: str = "train"
    pain_class: int | None = None
    theta_true: np.ndarray | None = None

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        vis, thr = read_image(self.visible_path), read_image(self.thermal_path)
        if vis.shape != thr.shape:
            raise ValueError(f"pair {self.pair_id}: visible {vis.shape} and thermal {thr.shape} differ in size")
        return vis, thr


@dataclass
class Manifest:
    pairs: list[ImagePair] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def subset(self, split: str) -> "Manifest":
        return Manifest([p for p in self.pairs if p.split == split], self.version)

    def subjects(self, split: str | None = None) -> set[str]:
        return {p.subject_id for p in self.pairs if split is None or p.split == split}

    def validate(self, check_files: bool = True) -> "Manifest":
        validate_pairs(self.pairs, check_files=check_files)
        return self


def format_theta(theta) -> list[str]:
    """Six shortest round-trip decimal strings."""
    return [repr(float(v)) for v in np.asarray(theta, dtype=np.float64).reshape(6)]


def parse_theta(text) -> np.ndarray | None:
    """Parse six fields (a sequence) or one field of six space/comma separated values; blank means none."""
    if not isinstance(text, str):
        fields = [(f or "").strip() for f in text]
        if not any(fields):
            return None
        if not all(fields):
            raise ValueError(f"theta has blank fields: {fields}")
        text = " ".join(fields)
    text = (text or "").strip()
    if not text:
        return None
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 6:
        raise ValueError(f"theta needs 6 values, got {len(vals)}: {text!r}")
    return np.array(vals)


def validate_pairs(pairs: Sequence[ImagePair], check_files: bool = True) -> None:
    """Raise ``ManifestError`` unless ``pairs`` satisfy every manifest invariant."""
    if not pairs:
        raise ManifestError("manifest is empty")
    seen: set[str] = set()
    dupes = set()
    for p in pairs:
        if p.pair_id in seen:
            dupes.add(p.pair_id)
        seen.add(p.pair_id)
        if p.split not in SPLITS:
            raise ManifestError(f"pair {p.pair_id}: split must be one of {SPLITS}, got {p.split!r}")
        if p.pain_class is not None and p.pain_class not in (1, 2, 3, 4):
            raise ManifestError(f"pair {p.pair_id}: pain class {p.pain_class} outside 1..4")
    if dupes:
        raise ManifestError(f"duplicate pair ids: {sorted(dupes)}")
    shared = {p.subject_id for p in pairs if p.split == "train"} & {p.subject_id for p in pairs if p.split == "test"}
    if shared:
        raise ManifestError(f"subjects appear in both train and test: {sorted(shared)}")
    if check_files:
        missing = [str(f) for p in pairs for f in (p.visible_path, p.thermal_path) if not Path(f).is_file()]
        if missing:
            raise ManifestError(f"{len(missing)} image file(s) missing: {missing[:10]}")
        for p in pairs:
            with Image.open(p.visible_path) as v, Image.open(p.thermal_path) as t:
                if v.size != t.size:
                    raise ManifestError(f"pair {p.pair_id}: visible {v.size} and thermal {t.size} differ")


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and eagerly validate a manifest CSV. Relative image paths resolve against its folder."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = MANIFEST_COLUMNS[:5]
        if any(col not in header for col in required):
            raise ManifestError(f"manifest header must start with {','.join(MANIFEST_COLUMNS)}; got {header}")
        has_theta = all(col in header for col in THETA_COLUMNS)
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            try:
                pain = (row.get("pain_class") or "").strip()
                pairs.append(ImagePair(
                    pair_id=row["pair_id"].strip(),
                    subject_id=row["subject_id"].strip(),
                    visible_path=_resolve(path.parent, row["visible_path"]),
                    thermal_path=_resolve(path.parent, row["thermal_path"]),
                    split=row["split"].strip(),
                    pain_class=int(pain) if pain else None,
                    theta_true=parse_theta([row[c] for c in THETA_COLUMNS] if has_theta
                                           else row.get("theta_true", "")),
                ))
            except (ValueError, AttributeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    manifest = Manifest(pairs)
    manifest.validate(check_files=check_files)
    return manifest


def _resolve(base: Path, text: str) -> Path:
    p = Path(text.strip())
    return p if p.is_absolute() else base / p


def write_manifest(path, manifest: Manifest | Iterable[ImagePair]) -> Path:
    path = Path(path)
    pairs = manifest.pairs if isinstance(manifest, Manifest) else list(manifest)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for p in pairs:
            w.writerow([
                p.pair_id, p.subject_id, _relative(path.parent, p.visible_path), _relative(path.parent, p.thermal_path),
                p.split, "" if p.pain_class is None else p.pain_class,
                *([""] * 6 if p.theta_true is None else format_theta(p.theta_true)),
            ])
    return path


def _relative(base: Path, p: Path) -> str:
    p = Path(p)
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


# subject-disjoint splitting -----------------------------------------------------------------


def split_subjects(pairs: Sequence[ImagePair], test_fraction: float = 0.2, seed: int = 0) -> Manifest:
    """Assign whole subjects to train or test.

    ``round(test_fraction * n_subjects)`` subjects (clamped to [1, n - 1]) go to
    test; the choice is a seeded permutation of the sorted subject ids.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    subjects = sorted({p.subject_id for p in pairs})
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects to split, got {len(subjects)}")
    n_test = min(max(int(round(test_fraction * len(subjects))), 1), len(subjects) - 1)
    order = np.random.default_rng(seed).permutation(len(subjects))
    test = {subjects[i] for i in order[:n_test]}
    return Manifest([replace(p, split="test" if p.subject_id in test else "train") for p in pairs])


# thermal background cropping ----------------------------------------------------------------


def otsu_threshold(img: np.ndarray, bins: int = 256) -> float:
    """Otsu's between-class-variance threshold; ``img > t`` selects the upper class."""
    hist, edges = np.histogram(np.asarray(img).ravel(), bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(edges[int(np.argmax(between[:-1])) + 1])


class EmptyForegroundError(ValueError):
    pass


def threshold_crop(img: np.ndarray, threshold: float = 0.2, min_component: int = 16,
                   out_size: int | tuple[int, int] | None = None) -> np.ndarray:
    """Cut the thermal face out of a cold background.

    Binarize at ``threshold``, keep the largest 8-connected foreground
    component, zero everything else, crop to that component's bounding box
    and resize back (nearest neighbour) to ``out_size`` (default: input
    size). Nearest-neighbour resampling keeps the operation idempotent.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"threshold_crop expects a 2-D grayscale image, got {img.shape}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if out_size is None:
        out_size = img.shape
    elif np.isscalar(out_size):
        out_size = (int(out_size),) * 2
    out_size = tuple(out_size)
    labels, n = ndimage.label(img > threshold, structure=np.ones((3, 3)))
    if n:
        sizes = np.bincount(labels.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
    if not n or sizes[keep - 1] < min_component:
        raise EmptyForegroundError(
            f"no foreground component of >= {min_component} px above threshold {threshold}; "
            f"Otsu suggests threshold {otsu_threshold(img):.3f}")
    mask = labels == keep
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    crop = np.where(mask, img, 0.0)[r0:r1, c0:c1]
    ri = np.minimum(((np.arange(out_size[0]) + 0.5) * crop.shape[0] / out_size[0]).astype(int), crop.shape[0] - 1)
    ci = np.minimum(((np.arange(out_size[1]) + 0.5) * crop.shape[1] / out_size[1]).astype(int), crop.shape[1] - 1)
    return crop[np.ix_(ri, ci)]


# synthetic pairs -------------------------------------------------------------------------------


@dataclass(frozen=True)
class WarpRange:
    translation: float = 0.25
    rotation_deg: float = 15.0
    scale: tuple[float, float] = (0.85, 1.15)
    shear: float = 0.1

    @classmethod
    def zero(cls) -> "WarpRange":
        return cls(0.0, 0.0, (1.0, 1.0), 0.0)

    @classmethod
    def parse(cls, text: str) -> "WarpRange":
        """``"0"`` for no warp, else ``translation,rotation_deg,scale_lo,scale_hi,shear``."""
        vals = [float(v) for v in str(text).split(",")]
        if vals == [0.0]:
            return cls.zero()
        if len(vals) != 5:
            raise ValueError(f"warp range needs 1 or 5 comma-separated values, got {text!r}")
        return cls(vals[0], vals[1], (vals[2], vals[3]), vals[4])

    def format(self) -> str:
        return f"{self.translation},{self.rotation_deg},{self.scale[0]},{self.scale[1]},{self.shear}"

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        tx, ty = rng.uniform(-1.0, 1.0, 2) * self.translation
        angle = rng.uniform(-1.0, 1.0) * self.rotation_deg
        scale = rng.uniform(*self.scale)
        shear = rng.uniform(-1.0, 1.0) * self.shear
        return spatial.make_theta(tx, ty, angle, scale, shear)


THERMAL_FLOOR = 0.15


def pseudo_thermal(visible: np.ndarray, style_seed: int = 0) -> np.ndarray:
    """Fixed visible -> pseudo-thermal appearance map.

    Inverts intensities, blurs with sigma 1.5, then applies a seeded
    contrast curve whose floor sends the (bright-poster) background to 0.
    """
    rng = np.random.default_rng(style_seed)
    gamma = rng.uniform(0.8, 1.25)
    gain = rng.uniform(0.9, 1.1)
    t = ndimage.gaussian_filter(1.0 - np.asarray(visible, dtype=np.float64), 1.5)
    t = np.clip((t - THERMAL_FLOOR) / (1.0 - THERMAL_FLOOR), 0.0, 1.0)
    return np.clip(gain * t ** gamma, 0.0, 1.0)


def synth_pair(base_img: np.ndarray, warp_range: WarpRange = WarpRange(), style_seed: int = 0,
               rng: np.random.Generator | None = None, max_retries: int = 50,
               max_out_of_frame: float = 0.4):
    """Build ``(visible, thermal, theta_true)`` with ``thermal = warp(T(base), theta_true)``.

    ``rng`` draws the warp (defaults to one seeded by ``style_seed``). Warps
    that move more than ``max_out_of_frame`` of the face mass out of frame
    are redrawn.
    """
    rng = rng if rng is not None else np.random.default_rng(style_seed)
    visible = np.asarray(base_img, dtype=np.float64)
    thermal_src = pseudo_thermal(visible, style_seed)
    mass = thermal_src.sum()
    for _ in range(max_retries):
        theta = warp_range.sample(rng)
        thermal = spatial.warp_array(thermal_src, theta)
        if mass == 0 or thermal.sum() >= (1.0 - max_out_of_frame) * mass:
            return visible, np.clip(thermal, 0.0, 1.0), theta
    raise RuntimeError(f"could not draw a warp keeping {1 - max_out_of_frame:.0%} of the face in frame "
                       f"after {max_retries} tries")


def synth_corpus(base_images: Sequence[tuple[str, np.ndarray]], n: int, out_dir, warp_range: WarpRange,
                 seed: int = 0, test_fraction: float = 0.2) -> Manifest:
    """Write ``n`` synthetic pairs (cycling over ``(subject_id, image)`` bases) plus ``manifest.csv``."""
    if not base_images:
        raise ValueError("no base images to synthesize from")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for k in range(n):
        subject, base = base_images[k % len(base_images)]
        style = int(rng.integers(0, 2**31 - 1))
        vis, thr, theta = synth_pair(base, warp_range, style_seed=style, rng=rng)
        pid = f"P{k:05d}"
        vpath = write_image(out_dir / f"{pid}_vis.png", vis)
        tpath = write_image(out_dir / f"{pid}_thr.png", thr)
        pairs.append(ImagePair(pid, subject, vpath, tpath, "train", None, theta))
    n_subjects = len({p.subject_id for p in pairs})
    manifest = split_subjects(pairs, test_fraction, seed) if n_subjects >= 2 else Manifest(pairs)
    write_manifest(out_dir / "manifest.csv", manifest)
    return manifest


def subject_of(path: Path) -> str:
    """Subject id encoded in a base-image filename: the stem up to the first underscore."""
    return Path(path).stem.split("_")[0]


def load_base_dir(base_dir) -> list[tuple[str, np.ndarray]]:
    files = sorted(Path(base_dir).glob("*.png"))
    return [(subject_of(f), read_image(f)) for f in files]


def load_arrays(manifest: Manifest) -> tuple[np.ndarray, np.ndarray]:
    """Stack a manifest's pairs into ``(visible, thermal)`` arrays of shape N x H x W in [0, 1]."""
    vis, thr = zip(*(p.load() for p in manifest.pairs))
    return np.stack(vis), np.stack(thr)
