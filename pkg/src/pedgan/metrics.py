"""Pose Score, Pose Variance and Inception Score, plus the keypoint detector adapter."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DetectorError, InputError

# OpenPose COCO-18 ordering.
KEYPOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
J = len(KEYPOINT_NAMES)
B_MAX = 256.0


@dataclass
class KeypointSet:
    """J = 18 slots of (x, y, detected); undetected slots carry no coordinates."""

    parts: list
    image_size: int | None = None
    image_id: str | None = None

    def __post_init__(self):
        if len(self.parts) != J:
            raise InputError(f"keypoint set must have {J} slots, got {len(self.parts)}")
        clean = []
        for slot in self.parts:
            x, y, det = slot
            if det:
                x, y = float(x), float(y)
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise InputError("detected keypoint with non-finite coordinates")
                if self.image_size is not None and not (0 <= x < self.image_size and 0 <= y < self.image_size):
                    raise InputError(f"keypoint ({x}, {y}) outside a {self.image_size}px image")
                clean.append((x, y, True))
            else:
                clean.append((None, None, False))
        self.parts = clean

    @property
    def n_detected(self) -> int:
        return sum(1 for _, _, d in self.parts if d)

    def rescaled(self, target=B_MAX) -> "KeypointSet":
        """Coordinates mapped into a target x target frame (no-op without image_size)."""
        if self.image_size is None or self.image_size == target:
            return self
        f = target / self.image_size
        parts = [(x * f, y * f, True) if d else (None, None, False) for x, y, d in self.parts]
        return KeypointSet(parts, int(target), self.image_id)

    def to_json(self) -> dict:
        d = {"id": self.image_id,
             "keypoints": [[x, y, bool(det)] for x, y, det in self.parts]}
        if self.image_size is not None:
            d["size"] = self.image_size
        return d

    @classmethod
    def from_json(cls, d: dict) -> "KeypointSet":
        return cls([tuple(k) for k in d["keypoints"]], d.get("size"), d.get("id"))

    @classmethod
    def empty(cls, image_size=None, image_id=None) -> "KeypointSet":
        return cls([(None, None, False)] * J, image_size, image_id)


def pose_score(detections) -> float:
    """Mean over images of (#detected parts / 18), rounded once from the exact ratio."""
    if len(detections) == 0:
        raise InputError("pose score needs at least one image")
    return sum(k.n_detected for k in detections) / (J * len(detections))


def pose_variance(detections, b_max=B_MAX) -> float:
    """exp of the mean (over 18 parts x 2 axes) population variance of normalized coordinates.

    Each part's variance uses only the images where it was detected; a part
    detected in fewer than two images contributes zero. Sums are accumulated
    exactly so the result does not depend on image order.
    """
    if len(detections) < 2:
        raise InputError("pose variance needs at least two images")
    scale = Fraction(b_max)
    total = Fraction(0)
    for t in range(J):
        for axis in range(2):
            n, s1, s2 = 0, Fraction(0), Fraction(0)
            for k in detections:
                slot = k.parts[t]
                if slot[2]:
                    v = Fraction(slot[axis]) / scale
                    n += 1
                    s1 += v
                    s2 += v * v
            if n >= 2:
                total += (n * s2 - s1 * s1) / (n * n)
    return math.exp(total / (J * 2))


def part_detection_rates(detections) -> list[float]:
    det = np.array([[d for _, _, d in k.parts] for k in detections], dtype=float)
    return det.mean(0).tolist()


def inception_score(class_probs, splits=1) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns (mean, std) across splits."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InputError("class_probs must be a non-empty Ξ x C matrix")
    if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-6, rtol=0):
        raise InputError("rows of class_probs must be probability vectors")
    if not 1 <= splits <= p.shape[0]:
        raise InputError(f"splits must be in [1, {p.shape[0]}]")
    scores = []
    for part in np.array_split(p, splits):
        py = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(py)), 0.0).sum(1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


@dataclass
class PoseReport:
    pose_score: float
    pose_variance: float | None
    n_images: int
    part_rates: list
    pv_note: str | None = None
    inception: tuple | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "pose_score": self.pose_score,
            "pose_variance": self.pose_variance,
            "n_images": self.n_images,
            "part_detection_rates": dict(zip(KEYPOINT_NAMES, self.part_rates)),
        }
        if self.pv_note:
            d["pose_variance_note"] = self.pv_note
        if self.inception is not None:
            d["inception_score"] = {"mean": self.inception[0], "std": self.inception[1]}
        d.update(self.extra)
        return d

    def table(self) -> str:
        lines = [f"{'images':<16}{self.n_images}", f"{'pose score':<16}{self.pose_score:.4f}"]
        pv = f"{self.pose_variance:.4f}" if self.pose_variance is not None else f"n/a ({self.pv_note})"
        lines.append(f"{'pose variance':<16}{pv}")
        if self.inception is not None:
            lines.append(f"{'inception score':<16}{self.inception[0]:.4f} +- {self.inception[1]:.4f}")
        lines.append("part detection rates:")
        for name, rate in zip(KEYPOINT_NAMES, self.part_rates):
            lines.append(f"  {name:<12}{rate:.3f}")
        return "\n".join(lines)


def pose_report(detections, b_max=B_MAX, class_probs=None, splits=1) -> PoseReport:
    if len(detections) == 0:
        raise InputError("no images to evaluate")
    frame = [k.rescaled(b_max) for k in detections]
    if len(frame) >= 2:
        pv, note = pose_variance(frame, b_max), None
    else:
        pv, note = None, "pose variance needs at least two images"
    inc = inception_score(class_probs, splits) if class_probs is not None else None
    return PoseReport(pose_score(frame), pv, len(frame), part_detection_rates(frame), note, inc)


# -- detectors -----------------------------------------------------------------

# Band index (0 head .. 3 feet) of each keypoint for the synthetic silhouette oracle.
KEYPOINT_BAND = {
    "nose": 0, "r_eye": 0, "l_eye": 0, "r_ear": 0, "l_ear": 0,
    "neck": 1, "r_shoulder": 1, "l_shoulder": 1, "r_elbow": 1, "l_elbow": 1,
    "r_wrist": 1, "l_wrist": 1,
    "r_hip": 2, "l_hip": 2, "r_knee": 2, "l_knee": 2,
    "r_ankle": 3, "l_ankle": 3,
}


class SyntheticBandDetector:
    """Oracle detector for color-band silhouettes.

    The background colour is the median of the border pixels; a band's parts
    are detected when enough of its pixels differ from it, and every keypoint
    assigned to the band is placed at the centroid of those pixels.
    """

    def __init__(self, threshold=40.0, min_fraction=0.02):
        self.threshold = threshold
        self.min_fraction = min_fraction

    def __call__(self, image) -> KeypointSet:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
            raise InputError(f"expected a square H x W x 3 image, got {img.shape}")
        size = img.shape[0]
        border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
        bg = np.median(border, axis=0)
        fg = np.abs(img - bg).max(-1) > self.threshold
        band = size // 4
        centers = []
        for b in range(4):
            rows = slice(b * band, (b + 1) * band if b < 3 else size)
            ys, xs = np.nonzero(fg[rows])
            if len(xs) >= max(1, self.min_fraction * band * size):
                centers.append((xs.mean(), ys.mean() + b * band))
            else:
                centers.append(None)
        parts = []
        for name in KEYPOINT_NAMES:
            c = centers[KEYPOINT_BAND[name]]
            parts.append((c[0], c[1], True) if c is not None else (None, None, False))
        return KeypointSet(parts, size)


DETECTORS = {"synthetic": SyntheticBandDetector}


def get_detector(name):
    try:
        return DETECTORS[name]()
    except KeyError:
        raise InputError(f"unknown detector {name!r}; known: {sorted(DETECTORS)}") from None


def detect_keypoints(image, detector, image_id=None) -> KeypointSet:
    """Run a detector and enforce the 18-slot contract, tagging failures with the image id."""
    try:
        result = detector(image)
    except Exception as exc:
        raise DetectorError(image_id, exc) from exc
    if not isinstance(result, KeypointSet):
        try:
            result = KeypointSet(list(result))
        except Exception as exc:
            raise DetectorError(image_id, f"malformed detector output: {exc}") from exc
    result.image_id = image_id
    return result


def write_detections(path, detections):
    with open(path, "w", encoding="utf-8") as fh:
        for k in detections:
            fh.write(json.dumps(k.to_json()) + "\n")


def read_detections(path) -> list[KeypointSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(KeypointSet.from_json(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise InputError(f"{path}:{n}: bad detection record: {exc}") from exc
    return out
