"""Chest x-ray preprocessing, PFT/x-ray pairing and registration-based effect maps.

The clinical data itself is not part of this package; these functions work
on any user-supplied cohort described by a metadata CSV (see
:func:`load_cohort`).
"""

from __future__ import annotations

import csv
import datetime as dt
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from skimage import exposure
from skimage.transform import resize

from .errors import DegenerateImageError
from .registration import AffineTransform, RegistrationResult, register_affine

COPD_THRESHOLD = 0.7
MAX_PFT_GAP_DAYS = 30


@dataclass(frozen=True)
class PftRecord:
    subject_id: str
    exam_date: dt.date
    fev1: float
    fvc: float

    def __post_init__(self):
        if not self.fvc > 0:
            raise ValueError(f"FVC must be positive, got {self.fvc}")
        if not 0 < self.ratio <= 1.2:
            raise ValueError(f"FEV1/FVC ratio {self.ratio:.3f} outside (0, 1.2]")

    @property
    def ratio(self) -> float:
        return self.fev1 / self.fvc

    @property
    def copd(self) -> bool:
        return self.ratio < COPD_THRESHOLD


@dataclass(frozen=True)
class XrayExam:
    subject_id: str
    exam_date: dt.date
    path: str = ""


@dataclass
class XraySample:
    subject_id: str
    exam_date: dt.date
    image: np.ndarray
    y: float
    days_to_pft: int

    def __post_init__(self):
        if abs(self.days_to_pft) > MAX_PFT_GAP_DAYS:
            raise ValueError(f"x-ray and PFT are {self.days_to_pft} days apart")

    @property
    def copd(self) -> bool:
        return self.y < COPD_THRESHOLD


@dataclass
class PairedStudy:
    x_sample: XraySample
    target_sample: XraySample
    aligned_target: np.ndarray
    gt_map: np.ndarray
    transform: AffineTransform
    converged: bool = True
    flags: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# preprocessing


def center_square(image: np.ndarray) -> np.ndarray:
    rows, cols = image.shape
    side = min(rows, cols)
    r0, c0 = (rows - side) // 2, (cols - side) // 2
    return image[r0:r0 + side, c0:c0 + side]


def equalize(image: np.ndarray, nbins: int = 256) -> np.ndarray:
    """Global histogram equalization; monotone non-decreasing in the input intensity."""
    return exposure.equalize_hist(image, nbins=nbins)


def rescale_unit(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if not hi > lo:
        raise DegenerateImageError("constant image cannot be normalized to [-1, 1]")
    out = 2.0 * (image - lo) / (hi - lo) - 1.0
    # pin the extremes exactly; rounding can leave them a few ulps off
    out[image == lo] = -1.0
    out[image == hi] = 1.0
    return out


def preprocess(image, crop_size: int = 224, resize_size: int = 256, random_crop: bool = False,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Centre square crop, bilinear resize, crop, equalize, rescale to [-1, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 32:
        raise ValueError(f"expected a 2-D image with both sides >= 32, got shape {image.shape}")
    if resize_size < crop_size:
        raise ValueError("resize_size must be >= crop_size")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite pixels")
    if image.max() == image.min():
        raise DegenerateImageError("constant image cannot be normalized to [-1, 1]")
    square = center_square(image)
    resized = resize(square, (resize_size, resize_size), order=1, mode="edge",
                     anti_aliasing=False, preserve_range=True)
    margin = resize_size - crop_size
    if random_crop and margin > 0:
        rng = rng if rng is not None else np.random.default_rng()
        r0, c0 = (int(v) for v in rng.integers(0, margin + 1, size=2))
    else:
        r0 = c0 = margin // 2
    cropped = resized[r0:r0 + crop_size, c0:c0 + crop_size]
    if cropped.max() == cropped.min():
        raise DegenerateImageError("crop is constant")
    return rescale_unit(equalize(cropped))


# ---------------------------------------------------------------------------
# pairing


def _days(a: dt.date, b: dt.date) -> int:
    return (a - b).days


def mutual_nearest(left, right, max_gap_days: int = MAX_PFT_GAP_DAYS):
    """Mutual-nearest-neighbour matching of dated records within each subject.

    ``left`` and ``right`` are sequences of ``(subject_id, date, identifier)``.
    A left and a right record are paired iff each is the other's closest
    record in time (ties broken by earlier date, then identifier) and the
    gap is at most ``max_gap_days``.  Returns ``(pairs, unmatched_left,
    unmatched_right)`` where pairs are index tuples ``(i_left, i_right)``.
    """
    by_subject: dict = {}
    for i, rec in enumerate(left):
        by_subject.setdefault(rec[0], ([], []))[0].append(i)
    for j, rec in enumerate(right):
        by_subject.setdefault(rec[0], ([], []))[1].append(j)

    def nearest(rec, candidates, pool):
        return min(candidates, key=lambda k: (abs(_days(pool[k][1], rec[1])), pool[k][1], str(pool[k][2])),
                   default=None)

    pairs = []
    for subject in sorted(by_subject, key=str):
        li, ri = by_subject[subject]
        for i in li:
            j = nearest(left[i], ri, right)
            if j is None or nearest(right[j], li, left) != i:
                continue
            if abs(_days(left[i][1], right[j][1])) <= max_gap_days:
                pairs.append((i, j))
    paired_l = {i for i, _ in pairs}
    paired_r = {j for _, j in pairs}
    unmatched_l = [i for i in range(len(left)) if i not in paired_l]
    unmatched_r = [j for j in range(len(right)) if j not in paired_r]
    return sorted(pairs), unmatched_l, unmatched_r


@dataclass
class PairingResult:
    pairs: list  # (PftRecord, XrayExam)
    unmatched_pfts: list
    unmatched_xrays: list


def pair_exams(pfts, xrays, max_gap_days: int = MAX_PFT_GAP_DAYS) -> PairingResult:
    """Associate each PFT with its closest x-ray and vice versa.

    ``xrays`` may hold :class:`XrayExam` objects or bare
    ``(subject_id, exam_date)`` tuples.
    """
    xrays = [x if isinstance(x, XrayExam) else XrayExam(*x) for x in xrays]
    left = [(p.subject_id, p.exam_date, f"{p.exam_date.isoformat()}#{i}") for i, p in enumerate(pfts)]
    right = [(x.subject_id, x.exam_date, x.path or f"{x.exam_date.isoformat()}#{j}") for j, x in enumerate(xrays)]
    idx_pairs, ul, ur = mutual_nearest(left, right, max_gap_days)
    return PairingResult(
        pairs=[(pfts[i], xrays[j]) for i, j in idx_pairs],
        unmatched_pfts=[pfts[i] for i in ul],
        unmatched_xrays=[xrays[j] for j in ur],
    )


def load_cohort(csv_path, exclude: Optional[Callable[[dict], bool]] = None):
    """Read a cohort CSV (subject_id, exam_date, kind, fev1, fvc, path).

    ``exclude`` receives each raw row and drops it when it returns True;
    this is where study-specific filters (transplant status, view position)
    plug in.  Relative paths resolve against the CSV's directory.
    """
    base = Path(csv_path).parent
    pfts, xrays = [], []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if exclude is not None and exclude(row):
                continue
            date = dt.date.fromisoformat(row["exam_date"])
            kind = row["kind"].strip().lower()
            if kind == "pft":
                pfts.append(PftRecord(row["subject_id"], date, float(row["fev1"]), float(row["fvc"])))
            elif kind == "xray":
                path = row.get("path", "")
                if path and not Path(path).is_absolute():
                    path = str(base / path)
                xrays.append(XrayExam(row["subject_id"], date, path))
            else:
                raise ValueError(f"unknown record kind {row['kind']!r}")
    return pfts, xrays


def make_samples(pairing: PairingResult, loader: Callable[[str], np.ndarray], **preprocess_kwargs) -> list:
    samples = []
    for pft, exam in pairing.pairs:
        image = preprocess(loader(exam.path), **preprocess_kwargs)
        samples.append(XraySample(pft.subject_id, exam.exam_date, image, pft.ratio,
                                  _days(exam.exam_date, pft.exam_date)))
    return samples


def study_pairs(samples) -> list:
    """All (no-COPD, COPD) sample combinations within each subject."""
    by_subject: dict = {}
    for s in samples:
        by_subject.setdefault(s.subject_id, []).append(s)
    out = []
    for subject in sorted(by_subject, key=str):
        group = sorted(by_subject[subject], key=lambda s: s.exam_date)
        healthy = [s for s in group if not s.copd]
        sick = [s for s in group if s.copd]
        out.extend(itertools.product(healthy, sick))
    return out


def build_gt_map(pair, levels: int = 4) -> PairedStudy:
    """Register the target image onto ``x_sample`` and subtract to obtain the effect map."""
    x_sample, target = pair
    if x_sample.image.shape != target.image.shape:
        raise ValueError("paired images must share a shape")
    reg: RegistrationResult = register_affine(x_sample.image, target.image, levels=levels)
    gt = np.clip(reg.aligned - x_sample.image, -2.0, 2.0)
    return PairedStudy(x_sample, target, reg.aligned, gt, reg.transform, reg.converged, reg.flags)


def write_paired_studies(out_dir, split: str, studies) -> None:
    """Write studies in the toy split layout plus the six transform parameters."""
    from .storage import write_metadata_csv, write_png16

    d = Path(out_dir) / split
    d.mkdir(parents=True, exist_ok=True)
    columns = ("filename", "y", "y_prime", "gt_filename", "seed_index", "subject_id",
               "x_date", "target_date", "a11", "a12", "a13", "a21", "a22", "a23", "converged")
    rows = []
    for k, st in enumerate(studies):
        fname, gt_name = f"{k:06d}.png", f"{k:06d}_gt.png"
        write_png16(d / fname, st.x_sample.image)
        write_png16(d / gt_name, st.gt_map)
        p = st.transform.params
        rows.append(dict(filename=fname, y=st.x_sample.y, y_prime=st.target_sample.y, gt_filename=gt_name,
                         seed_index=k, subject_id=st.x_sample.subject_id,
                         x_date=st.x_sample.exam_date.isoformat(), target_date=st.target_sample.exam_date.isoformat(),
                         a11=p[0], a12=p[1], a13=p[2], a21=p[3], a22=p[4], a23=p[5],
                         converged=int(st.converged)))
    write_metadata_csv(d / "metadata.csv", rows, columns)
