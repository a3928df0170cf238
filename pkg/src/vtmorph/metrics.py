"""Registration and generation quality metrics.

Registration scores compare a visible image with a thermal image:
SSIM and NCC of their morphological-gradient edge maps, plus mutual
information of the raw intensities. Generation scores compare real and
generated thermal sets: a Frechet distance between Gaussian fits of
feature embeddings and a perceptual (LPIPS-style) distance, both under a
pluggable feature extractor. The default extractor is a seeded random
conv stack, so the numbers are self-consistent but not comparable to
scores computed with pretrained backbones.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("ssim_edges", "ncc_edges", "mutual_info", "fid", "lpips_proxy")
REGISTRATION_COLUMNS = METRIC_COLUMNS[:3]


class DegenerateInputWarning(UserWarning):
    """An input had zero variance, so a correlation score is undefined."""


def _check_same_shape(x, y, name):
    if x.shape != y.shape:
        raise ValueError(f"{name}: shapes {x.shape} and {y.shape} differ")


def edge_map(img, radius: int = 1) -> np.ndarray:
    """Morphological gradient: grey dilation minus grey erosion over a (2r+1)^2 square."""
    if radius < 1:
        raise ValueError(f"edge_map radius must be >= 1, got {radius}")
    img = np.asarray(img, dtype=np.float64)
    size = 2 * radius + 1
    return ndimage.grey_dilation(img, size=(size, size), mode="nearest") - \
        ndimage.grey_erosion(img, size=(size, size), mode="nearest")


def ssim(x, y, window: int = 11, sigma: float = 1.5, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2) -> float:
    """Mean Gaussian-windowed SSIM of two [0, 1] images.

    Local statistics use a ``window`` x ``window`` Gaussian (reflect padding);
    the mean is taken over pixels whose window lies fully inside the image.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y, "ssim")
    radius = window // 2
    filt = lambda a: ndimage.gaussian_filter(a, sigma, mode="reflect", truncate=radius / sigma)
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    smap = num / den
    if min(x.shape) > 2 * radius:
        smap = smap[radius:-radius, radius:-radius]
    return float(smap.mean())


def ncc(x, y) -> float:
    """Normalized cross-correlation in [-1, 1]; 0 (with a warning) if either input is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    _check_same_shape(x, y, "ncc")
    a = x - x.mean()
    b = y - y.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        warnings.warn("ncc of a zero-variance image is undefined; returning 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    return float(np.clip((a @ b) / math.sqrt(saa * sbb), -1.0, 1.0))


def joint_histogram(x, y, bins: int = 32, value_range=(0.0, 1.0)) -> np.ndarray:
    hist, _, _ = np.histogram2d(np.ravel(x), np.ravel(y), bins=bins, range=[value_range, value_range])
    return hist


def mutual_information(x, y, bins: int = 32, value_range=(0.0, 1.0)) -> float:
    """Mutual information (nats) of the joint intensity histogram; empty cells contribute 0."""
    if bins < 2:
        raise ValueError(f"mutual_information needs bins >= 2, got {bins}")
    x, y = np.asarray(x), np.asarray(y)
    _check_same_shape(x, y, "mutual_information")
    joint = joint_histogram(x, y, bins, value_range)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    i, j = np.nonzero(pxy)
    p = pxy[i, j]
    terms = p * (np.log(p) - (np.log(px[i, 0]) + np.log(py[0, j])))
    # exactly rounded sum: swapping x and y only transposes the terms
    return math.fsum(terms.tolist())


def histogram_entropy(x, bins: int = 32, value_range=(0.0, 1.0)) -> float:
    hist, _ = np.histogram(np.ravel(x), bins=bins, range=value_range)
    p = hist[hist > 0] / hist.sum()
    return float(-(p * np.log(p)).sum())


# generation metrics -------------------------------------------------------------------------


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b, jitter: float = 1e-6, psd_tol: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples).

    ``||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^{1/2})``; the trace of the
    cross term is computed from the eigenvalues of ``Ca^{1/2} Cb Ca^{1/2}``
    with negative eigenvalues clamped to zero.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"frechet_distance: feature widths differ ({a.shape[1]} vs {b.shape[1]})")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("frechet_distance needs at least 2 samples per set")
    d = a.shape[1]
    covs = []
    for name, f in (("a", a), ("b", b)):
        c = np.atleast_2d(np.cov(f, rowvar=False)) + jitter * np.eye(d)
        lo = float(np.linalg.eigvalsh(c).min())
        if lo < -psd_tol:
            hi = float(np.linalg.eigvalsh(c).max())
            raise ValueError(f"covariance of set {name} is not PSD after jitter: min eigenvalue {lo:.3g}, "
                             f"condition estimate {abs(hi / lo):.3g}")
        covs.append(c)
    ca, cb = covs
    sa = _psd_sqrt(ca)
    cross = sa @ cb @ sa
    cross = 0.5 * (cross + cross.T)
    tr_sqrt = float(np.sqrt(np.clip(np.linalg.eigvalsh(cross), 0.0, None)).sum())
    diff = a.mean(axis=0) - b.mean(axis=0)
    return max(float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt), 0.0)


class FeatureExtractor(Protocol):
    seed: int

    def feature_maps(self, images: np.ndarray) -> list[np.ndarray]:
        """Per-layer N x C x h x w activations for an N x H x W batch in [0, 1]."""

    def features(self, images: np.ndarray) -> np.ndarray:
        """N x D embedding of an N x H x W batch in [0, 1]."""


class RandomConvFeatures:
    """Seeded random-weight stride-2 conv + ReLU stack with global average pooling.

    Default: 4 layers of widths (24, 48, 96, 192) giving 192-D features.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (24, 48, 96, 192)):
        self.seed = seed
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = 1
        for w in self.widths:
            std = math.sqrt(2.0 / (cin * 9))
            self.weights.append(rng.normal(0.0, std, (w, cin, 3, 3)))
            cin = w

    @property
    def dim(self) -> int:
        return self.widths[-1]

    def feature_maps(self, images) -> list[np.ndarray]:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        h = x[:, None] * 2.0 - 1.0
        maps = []
        with ad.no_grad(), ad.precision(np.float64):
            t = ad.Tensor(h)
            for w in self.weights:
                t = ad.relu(ad.conv2d(t, ad.Tensor(w), stride=2, padding=1))
                maps.append(t.data)
        return maps

    def features(self, images) -> np.ndarray:
        return self.feature_maps(images)[-1].mean(axis=(2, 3))


def perceptual_distance(x, y, extractor: FeatureExtractor | None = None, eps: float = 1e-10) -> float:
    """LPIPS-style proxy: mean over layers of spatially averaged squared differences of
    channel-unit-normalized feature maps."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_same_shape(x, y, "perceptual_distance")
    extractor = extractor or RandomConvFeatures()
    total = 0.0
    fx, fy = extractor.feature_maps(x), extractor.feature_maps(y)
    for a, b in zip(fx, fy):
        a = a / (np.sqrt((a * a).sum(axis=1, keepdims=True)) + eps)
        b = b / (np.sqrt((b * b).sum(axis=1, keepdims=True)) + eps)
        total += float(((a - b) ** 2).sum(axis=1).mean())
    return total / len(fx)


# reporting --------------------------------------------------------------------------------------


@dataclass
class MetricConfig:
    edge_radius: int = 1
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    mi_bins: int = 32
    feature_seed: int = 0


def registration_scores(visible, thermal, config: MetricConfig | None = None) -> dict[str, float]:
    """Edge-map SSIM, edge-map NCC and raw-intensity MI for one visible/thermal pair."""
    cfg = config or MetricConfig()
    ev, et = edge_map(visible, cfg.edge_radius), edge_map(thermal, cfg.edge_radius)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateInputWarning)
        n = ncc(ev, et)
    return {
        "ssim_edges": ssim(ev, et, cfg.ssim_window, cfg.ssim_sigma, cfg.ssim_c1, cfg.ssim_c2),
        "ncc_edges": n,
        "mutual_info": mutual_information(visible, thermal, cfg.mi_bins),
    }


def percent_change(before: float, after: float) -> float:
    if before == 0:
        return 0.0 if after == 0 else math.copysign(math.inf, after)
    return 100.0 * (after - before) / abs(before)


def ncc_factor(before: float, after: float) -> float:
    if before == 0:
        return 1.0 if after == 0 else math.copysign(math.inf, after)
    return after / before


@dataclass
class MetricReport:
    """Per-pair and aggregate scores before and after registration."""

    pair_ids: list[str] = field(default_factory=list)
    before: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in METRIC_COLUMNS})
    after: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in METRIC_COLUMNS})
    fid: dict[str, float] = field(default_factory=lambda: {"before": math.nan, "after": math.nan})
    feature_seed: int = 0
    unmatched: list[str] = field(default_factory=list)

    def add(self, pair_id: str, before: dict, after: dict) -> None:
        self.pair_ids.append(pair_id)
        for stage, scores in ((self.before, before), (self.after, after)):
            for k in METRIC_COLUMNS:
                if k != "fid":
                    stage[k].append(float(scores.get(k, math.nan)))

    def aggregate(self, stage: str) -> dict[str, float]:
        table = self.before if stage == "before" else self.after
        out = {}
        for k in METRIC_COLUMNS:
            if k == "fid":
                out[k] = self.fid[stage]
            else:
                vals = table[k]
                out[k] = math.fsum(vals) / len(vals) if vals and not any(map(math.isnan, vals)) else math.nan
        return out

    def deltas(self) -> dict[str, float]:
        """Percent change for every column except NCC, which is a multiplicative factor."""
        b, a = self.aggregate("before"), self.aggregate("after")
        out = {}
        for k in METRIC_COLUMNS:
            if math.isnan(b[k]) or math.isnan(a[k]):
                out[k] = math.nan
            else:
                out[k] = ncc_factor(b[k], a[k]) if k == "ncc_edges" else percent_change(b[k], a[k])
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_id", "stage", *METRIC_COLUMNS])
            for i, pid in enumerate(self.pair_ids):
                for stage, table in (("before", self.before), ("after", self.after)):
                    w.writerow([pid, stage] + [fmt(None if k == "fid" else table[k][i]) for k in METRIC_COLUMNS])
            for stage in ("before", "after"):
                agg = self.aggregate(stage)
                w.writerow(["AGGREGATE", stage] + [fmt(agg[k]) for k in METRIC_COLUMNS])
            d = self.deltas()
            w.writerow(["AGGREGATE", "delta"] + [fmt(d[k]) for k in METRIC_COLUMNS])
        return path

    def table(self) -> str:
        """Human-readable layout mirroring the before/after registration table."""
        heads = ["SSIM Edges (^)", "NCC Edges (^)", "Mut. Info. (^)", "FID (v)", "LPIPS (v)"]
        b, a, d = self.aggregate("before"), self.aggregate("after"), self.deltas()

        def cell(v, delta=None, key=None):
            if math.isnan(v):
                return "-"
            if delta is None or math.isnan(delta):
                return f"{v:.3f}"
            tag = f"{delta:.1f}x" if key == "ncc_edges" else f"{delta:+.1f}%"
            return f"{v:.3f} ({tag})"

        rows = [["", *heads],
                ["Before Reg.", *(cell(b[k]) for k in METRIC_COLUMNS)],
                ["After Reg.", *(cell(a[k], d[k], k) for k in METRIC_COLUMNS)]]
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        reg = sum(widths[1:4]) + 6
        lines = [" " * widths[0] + " | " + "Registration Scores".ljust(reg) + " | V2T GAN Scores"]
        for r in rows:
            lines.append(" | ".join(c.ljust(widths[i]) for i, c in enumerate(r)))
        lines.append(f"(generation scores use a seeded random feature extractor, seed {self.feature_seed}; "
                     "not comparable to Inception/VGG-based values)")
        return "\n".join(lines)


def _pair_files(folder: Path) -> dict[str, dict[str, Path]]:
    """Group ``<id>_vis.png``, ``<id>_thr.png`` / ``<id>_thr_reg.png`` and ``<id>_gen.png`` by id."""
    found: dict[str, dict[str, Path]] = {}
    for f in sorted(folder.glob("*.png")):
        stem = f.stem
        for suffix, role in (("_thr_reg", "thermal_reg"), ("_vis", "visible"), ("_thr", "thermal"),
                             ("_gen", "generated")):
            if stem.endswith(suffix):
                found.setdefault(stem[: -len(suffix)], {})[role] = f
                break
    for roles in found.values():
        if "thermal_reg" in roles:
            roles["thermal"] = roles.pop("thermal_reg")
    return found


def evaluate_pairs(before_dir, after_dir, config: MetricConfig | None = None,
                   extractor: FeatureExtractor | None = None) -> MetricReport:
    """Score every pair id present in both folders.

    Registration scores use each folder's visible and thermal images.
    Generation scores (FID, perceptual proxy) compare a folder's thermal
    images with its ``_gen`` images when every matched pair has one.
    Unmatched or incomplete ids are listed in ``report.unmatched``.
    """
    from .data import read_image

    cfg = config or MetricConfig()
    extractor = extractor or RandomConvFeatures(cfg.feature_seed)
    before, after = _pair_files(Path(before_dir)), _pair_files(Path(after_dir))
    report = MetricReport(feature_seed=extractor.seed)
    complete = lambda r: "visible" in r and "thermal" in r
    ids = sorted(set(before) | set(after))
    matched = [i for i in ids if i in before and i in after and complete(before[i]) and complete(after[i])]
    report.unmatched = [i for i in ids if i not in matched]
    for i in report.unmatched:
        log.warning("pair %s is missing from one folder or incomplete; skipped", i)
    gen_sets = {}
    for stage, files in (("before", before), ("after", after)):
        if matched and all("generated" in files[i] for i in matched):
            real = np.stack([read_image(files[i]["thermal"]) for i in matched])
            fake = np.stack([read_image(files[i]["generated"]) for i in matched])
            gen_sets[stage] = (real, fake)
            if len(matched) >= 2:
                report.fid[stage] = frechet_distance(extractor.features(real), extractor.features(fake))
    for k, i in enumerate(matched):
        scores = {}
        for stage, files in (("before", before), ("after", after)):
            s = registration_scores(read_image(files[i]["visible"]), read_image(files[i]["thermal"]), cfg)
            if stage in gen_sets:
                real, fake = gen_sets[stage]
                s["lpips_proxy"] = perceptual_distance(real[k], fake[k], extractor)
            scores[stage] = s
        report.add(i, scores["before"], scores["after"])
    return report
