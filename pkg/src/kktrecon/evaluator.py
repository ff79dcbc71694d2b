"""Reconstruction quality: SSIM, nearest-candidate matching and reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import IMAGE_SHAPE, PIXELS, Dataset, to_image
from .mlp import MlpParams, margin

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DEFAULT_SSIM_THRESHOLD = 0.4
DEFAULT_L2_THRESHOLD = -0.05


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two axes preceding the channel axis."""
    k = taps.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-3)
    out = np.einsum("...hwck,k->...hwc", rows, taps)
    cols = np.lib.stride_tricks.sliding_window_view(out, k, axis=-2)
    return np.einsum("...hwck,k->...hwc", cols, taps)


def _ssim_parts(a: np.ndarray, b: np.ndarray, data_range: float, taps: np.ndarray):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_map(img_a, img_b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every valid 11x11 window, per channel."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3 or min(a.shape[:2]) < WINDOW:
        raise ValueError(f"expected H x W x C images with H, W >= {WINDOW}, got {a.shape}")
    return _ssim_parts(a, b, data_range, gaussian_window())


def ssim(img_a, img_b, data_range: float = 1.0) -> float:
    """Mean SSIM (Gaussian 11x11 window, sigma 1.5, K1=0.01, K2=0.03).

    Channels are scored independently and averaged, which for equal-sized
    channels is the same as averaging the whole local map.
    """
    return float(ssim_map(img_a, img_b, data_range).mean())


class _SsimBank:
    """Per-image statistics cached so all-pairs SSIM only filters the cross term."""

    def __init__(self, images: np.ndarray, data_range: float = 1.0):
        self.images = np.asarray(images, dtype=np.float64)
        self.taps = gaussian_window()
        self.mu = _filter_valid(self.images, self.taps)
        self.var = _filter_valid(self.images ** 2, self.taps) - self.mu ** 2
        self.c1 = (K1 * data_range) ** 2
        self.c2 = (K2 * data_range) ** 2

    def against(self, other: "_SsimBank", i: int, chunk: int = 256) -> np.ndarray:
        """SSIM of image ``i`` of this bank against every image of ``other``."""
        a = self.images[i]
        mu_a, var_a = self.mu[i], self.var[i]
        out = np.empty(len(other.images))
        for s in range(0, len(other.images), chunk):
            b = other.images[s:s + chunk]
            mu_b, var_b = other.mu[s:s + chunk], other.var[s:s + chunk]
            cov = _filter_valid(a * b, self.taps) - mu_a * mu_b
            num = (2 * mu_a * mu_b + self.c1) * (2 * cov + self.c2)
            den = (mu_a * mu_a + mu_b * mu_b + self.c1) * (var_a + var_b + self.c2)
            out[s:s + chunk] = (num / den).reshape(len(b), -1).mean(axis=1)
        return out


def pairwise_ssim(images_a, images_b) -> np.ndarray:
    """All-pairs SSIM; identical images score exactly 1 and no other pair reaches it."""
    bank_a, bank_b = _SsimBank(images_a), _SsimBank(images_b)
    S = np.stack([bank_a.against(bank_b, i) for i in range(len(bank_a.images))])
    # the cached path rounds differently from ssim(); settle the pairs near 1 exactly
    for i, j in zip(*np.nonzero(S > 1 - 1e-9)):
        same = np.array_equal(bank_a.images[i], bank_b.images[j])
        S[i, j] = 1.0 if same else min(S[i, j], np.nextafter(1.0, 0.0))
    return S


def pairwise_neg_rel_l2(samples, candidates) -> np.ndarray:
    """``-||x_i - c_j|| / ||x_i||`` for every pair; higher is better."""
    X = np.asarray(samples, dtype=np.float64)
    Y = np.asarray(candidates, dtype=np.float64)
    sq = (X ** 2).sum(1)[:, None] + (Y ** 2).sum(1)[None, :] - 2 * X @ Y.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    norms = np.linalg.norm(X, axis=1)
    return -dist / np.where(norms > 0, norms, 1.0)[:, None]


@dataclass
class MatchReport:
    index: np.ndarray
    label: np.ndarray
    margin: np.ndarray
    best_candidate: np.ndarray
    score: np.ndarray
    threshold: float
    metric: str = "ssim"
    extra: dict = field(default_factory=dict)

    @property
    def good(self) -> np.ndarray:
        return self.score > self.threshold

    @property
    def good_count(self) -> int:
        return int(self.good.sum())

    def good_count_at(self, threshold: float) -> int:
        return int(np.sum(self.score > threshold))

    def __len__(self):
        return len(self.index)

    CSV_FIELDS = ("index", "label", "margin", "best_candidate", "score", "good")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# metric", self.metric, "threshold", repr(float(self.threshold)), "good_count", self.good_count])
        w.writerow(self.CSV_FIELDS)
        for row in zip(self.index, self.label, self.margin, self.best_candidate, self.score, self.good):
            i, y, m, j, s, g = row
            w.writerow([int(i), int(y), repr(float(m)), int(j), repr(float(s)), int(bool(g))])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MatchReport":
        rows = list(csv.reader(io.StringIO(text)))
        head = rows[0]
        metric, threshold = head[1], float(head[3])
        body = np.array(rows[2:], dtype=object).reshape(-1, len(cls.CSV_FIELDS))
        return cls(
            index=body[:, 0].astype(np.int64),
            label=body[:, 1].astype(np.int64),
            margin=body[:, 2].astype(np.float64),
            best_candidate=body[:, 3].astype(np.int64),
            score=body[:, 4].astype(np.float64),
            threshold=threshold,
            metric=metric,
        )


def similarity_matrix(dataset: Dataset, candidates: np.ndarray, metric: str) -> np.ndarray:
    if metric == "ssim":
        if dataset.dims != PIXELS:
            raise ValueError("SSIM needs 3072-dimensional image samples; use metric='l2'")
        return pairwise_ssim(to_image(dataset.samples), to_image(np.clip(candidates, -1, 1)))
    if metric == "l2":
        return pairwise_neg_rel_l2(dataset.samples, candidates)
    raise ValueError(f"unknown metric {metric!r}")


def match(dataset: Dataset, candidates, params: MlpParams | None = None,
          metric: str | None = None, threshold: float | None = None) -> MatchReport:
    """Match every training sample to its most similar candidate.

    ``candidates`` is a :class:`ReconState` or an ``m x d`` array.  Image data
    defaults to SSIM on de-normalized ``[0, 1]`` images with threshold 0.4;
    other data to negative relative L2 error with threshold -0.05.
    """
    X = getattr(candidates, "X", candidates)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != dataset.dims:
        raise ValueError(f"candidates must be m x {dataset.dims}, got {X.shape}")
    if metric is None:
        metric = "ssim" if dataset.is_image else "l2"
    if threshold is None:
        threshold = DEFAULT_SSIM_THRESHOLD if metric == "ssim" else DEFAULT_L2_THRESHOLD
    S = similarity_matrix(dataset, X, metric)
    best = np.argmax(S, axis=1)
    score = S[np.arange(dataset.n), best]
    margins = (margin(params, dataset.samples, dataset.labels) if params is not None
               else np.full(dataset.n, np.nan))
    return MatchReport(np.arange(dataset.n), dataset.labels.copy(), np.asarray(margins, dtype=np.float64),
                       best, score, float(threshold), metric)


SCATTER_FIELDS = ("margin", "score", "label", "index")


def scatter_data(report: MatchReport) -> list[tuple]:
    """Rows ``(margin, best score, class, sample index)`` in sample order."""
    return [(float(m), float(s), int(y), int(i))
            for m, s, y, i in zip(report.margin, report.score, report.label, report.index)]


def scatter_csv(report: MatchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCATTER_FIELDS)
    for m, s, y, i in scatter_data(report):
        w.writerow([repr(m), repr(s), y, i])
    return buf.getvalue()


def read_scatter_csv(text: str) -> list[tuple]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SCATTER_FIELDS:
        raise ValueError(f"scatter CSV header must be {','.join(SCATTER_FIELDS)}")
    return [(float(m), float(s), int(y), int(i)) for m, s, y, i in rows[1:]]


@dataclass(frozen=True)
class RankedPair:
    index: int
    label: int
    candidate: int
    score: float


def ranked_pairs(report: MatchReport, k: int, per_class: bool = False) -> list[RankedPair]:
    """Top-``k`` (train, reconstruction) pairs by score, best first.

    With ``per_class`` the top ``k`` of every class are returned, classes in
    ascending order.  Equal scores keep sample order.
    """
    if k < 0 or (not per_class and k > len(report)):
        raise ValueError(f"k must be in [0, {len(report)}]")
    order = np.argsort(-report.score, kind="stable")
    pairs = [RankedPair(int(report.index[i]), int(report.label[i]), int(report.best_candidate[i]),
                        float(report.score[i])) for i in order]
    if not per_class:
        return pairs[:k]
    out = []
    for c in sorted(set(int(v) for v in report.label)):
        out.extend([p for p in pairs if p.label == c][:k])
    return out


def _as_tile(sample: np.ndarray) -> np.ndarray:
    """Image tile in [0, 1]: CIFAR layout for 3072-vectors, a gray strip otherwise."""
    if sample.size == PIXELS:
        return to_image(np.clip(sample, -1, 1))
    side = int(np.ceil(np.sqrt(sample.size)))
    padded = np.zeros(side * side)
    padded[:sample.size] = (np.clip(sample, -1, 1) + 1) / 2
    return np.repeat(padded.reshape(side, side, 1), 3, axis=2)


def render_pairs(pairs: list[RankedPair], dataset: Dataset, candidates: np.ndarray, path,
                 columns: int = 10, zoom: int = 2, threshold: float = DEFAULT_SSIM_THRESHOLD) -> None:
    """Write a PNG grid of train/reconstruction pairs with the score above each pair."""
    from PIL import Image, ImageDraw

    tiles = [(_as_tile(dataset.samples[p.index]), _as_tile(candidates[p.candidate]), p.score) for p in pairs]
    th, tw = (tiles[0][0].shape[:2] if tiles else IMAGE_SHAPE[:2])
    th, tw = th * zoom, tw * zoom
    caption = 12
    cell_w, cell_h = 2 * tw + 6, th + caption + 4
    rows = max(1, -(-len(tiles) // columns))
    canvas = Image.new("RGB", (columns * cell_w, rows * cell_h), "white")
    draw = ImageDraw.Draw(canvas)
    for n, (train_img, rec_img, score) in enumerate(tiles):
        r, c = divmod(n, columns)
        x0, y0 = c * cell_w, r * cell_h
        for k, img in enumerate((train_img, rec_img)):
            pil = Image.fromarray(np.rint(img * 255).astype(np.uint8)).resize((tw, th), Image.NEAREST)
            canvas.paste(pil, (x0 + k * (tw + 2), y0 + caption))
        draw.text((x0 + 1, y0), f"{score:.2f}", fill=(0, 0, 180) if score > threshold else (180, 0, 0))
    canvas.save(path, format="PNG")


def render_candidates(candidates: np.ndarray, path, columns: int = 10, zoom: int = 2) -> None:
    from PIL import Image

    tiles = [_as_tile(c) for c in np.asarray(candidates)]
    th, tw = tiles[0].shape[:2]
    rows = -(-len(tiles) // columns)
    canvas = np.ones((rows * (th + 1), columns * (tw + 1), 3))
    for n, t in enumerate(tiles):
        r, c = divmod(n, columns)
        canvas[r * (th + 1):r * (th + 1) + th, c * (tw + 1):c * (tw + 1) + tw] = t
    img = Image.fromarray(np.rint(canvas * 255).astype(np.uint8))
    img.resize((img.width * zoom, img.height * zoom), Image.NEAREST).save(path, format="PNG")
