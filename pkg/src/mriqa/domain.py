"""Shared vocabulary: quality labels, slice predictions, preprocessing, manifests."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InvalidInputError


class QualityLabel(enum.IntEnum):
    """Three-way rating; the integer value doubles as the class index."""

    PASS = 0
    QUESTIONABLE = 1
    FAIL = 2

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, token: str) -> "QualityLabel":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise FormatError(f"unknown label token {token!r}") from None


CLASS_NAMES = tuple(str(q) for q in QualityLabel)
UNLABELED = "unlabeled"


def argmax_label(probabilities: Sequence[float]) -> QualityLabel:
    # np.argmax returns the first maximum, i.e. ties go to Pass < Questionable < Fail
    return QualityLabel(int(np.argmax(np.asarray(probabilities))))


@dataclass(frozen=True)
class SlicePrediction:
    probabilities: tuple[float, float, float]
    label: QualityLabel

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise InvalidInputError(f"not a probability triple: {self.probabilities}")
        if self.label != argmax_label(p):
            raise InvalidInputError("label must be the argmax of the probabilities")

    @classmethod
    def from_probabilities(cls, probabilities: Iterable[float]) -> "SlicePrediction":
        p = tuple(float(v) for v in probabilities)
        return cls(p, argmax_label(p))

    @property
    def confidence(self) -> float:
        return max(self.probabilities)


@dataclass
class VolumeStack:
    volume_id: str
    slices: list[np.ndarray]
    slice_labels: list[QualityLabel] | None = None
    volume_label: QualityLabel | None = None

    def __post_init__(self):
        shapes = {s.shape for s in self.slices}
        if len(shapes) > 1:
            raise InvalidInputError(f"volume {self.volume_id}: slices differ in shape {shapes}")
        if self.slice_labels is not None and len(self.slice_labels) != len(self.slices):
            raise InvalidInputError(f"volume {self.volume_id}: label count != slice count")


def minmax_normalize(image) -> np.ndarray:
    """Rescale to [0, 1]; a constant image maps to all zeros."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("cannot normalize an empty image")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def pad_to_size(image: np.ndarray, size: int) -> np.ndarray:
    """Center ``image`` on a zero ``size x size`` canvas; odd margins favour bottom/right."""
    image = np.asarray(image)
    h, w = image.shape
    if h > size or w > size:
        raise InvalidInputError(f"image {h}x{w} larger than canvas {size}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.zeros((size, size), dtype=image.dtype)
    out[top:top + h, left:left + w] = image
    return out


def preprocess(raw: np.ndarray, size: int) -> np.ndarray:
    return minmax_normalize(pad_to_size(raw, size))


# -- portable graymap --------------------------------------------------------

def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 16-bit binary (P5) graymap; input is scaled from [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    values = np.round(img * 65535).astype(">u2")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8- or 16-bit P5 graymap as raw integer intensities (float64)."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary graymap")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64)


# -- manifest ----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    volume_id: str
    slice_index: int
    image_path: str
    label: QualityLabel | None  # None = unlabeled

    @property
    def key(self) -> tuple[str, int]:
        return (self.volume_id, self.slice_index)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    split_tag: str = "train"

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.key in seen:
                raise FormatError(f"duplicate record {r.key}")
            seen.add(r.key)

    def __len__(self) -> int:
        return len(self.records)

    def labeled(self) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.label is not None], self.split_tag)

    def unlabeled(self) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.label is None], UNLABELED)

    def volumes(self) -> dict[str, list[ManifestRecord]]:
        out: dict[str, list[ManifestRecord]] = {}
        for r in self.records:
            out.setdefault(r.volume_id, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: r.slice_index)
        return out

    def resolve(self, base: str | os.PathLike) -> None:
        """Check that every image path exists (relative paths against ``base``)."""
        for r in self.records:
            if not (Path(base) / r.image_path).is_file():
                raise FormatError(f"missing image {r.image_path} for {r.key}")


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Write the tab-separated manifest; ``extra`` maps record key -> extra column value."""
    lines = [f"# split={manifest.split_tag}"]
    for r in manifest.records:
        label = UNLABELED if r.label is None else str(r.label)
        cols = [r.volume_id, str(r.slice_index), r.image_path, label]
        if extra is not None:
            cols.append(str(extra[r.key]))
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | os.PathLike, extra_column: bool = False):
    """Parse a manifest file. With ``extra_column`` also return {key: 5th column}."""
    records: list[ManifestRecord] = []
    extras: dict[tuple[str, int], str] = {}
    seen: dict[tuple[str, int], int] = {}
    split = "train"
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("split="):
                split = body.split("=", 1)[1]
            continue
        cols = line.split("\t")
        want = 5 if extra_column else 4
        if len(cols) != want:
            raise FormatError(f"{path}:{lineno}: expected {want} tab-separated fields, got {len(cols)}")
        vid, idx, img, tok = cols[:4]
        try:
            sidx = int(idx)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad slice index {idx!r}") from None
        label = None if tok == UNLABELED else _parse_label(tok, path, lineno)
        key = (vid, sidx)
        if key in seen:
            raise FormatError(f"{path}:{lineno}: duplicate record {key} (first at line {seen[key]})")
        seen[key] = lineno
        records.append(ManifestRecord(vid, sidx, img, label))
        if extra_column:
            extras[key] = cols[4]
    if split != UNLABELED and records and all(r.label is None for r in records):
        split = UNLABELED
    manifest = DatasetManifest(records, split)
    return (manifest, extras) if extra_column else manifest


def _parse_label(tok: str, path, lineno: int) -> QualityLabel:
    try:
        return QualityLabel.parse(tok)
    except FormatError:
        raise FormatError(f"{path}:{lineno}: unknown label token {tok!r}") from None


def load_slices(manifest: DatasetManifest, base: str | os.PathLike, size: int) -> np.ndarray:
    """Load and preprocess every slice in manifest order -> ``[n, size, size]``."""
    manifest.resolve(base)
    out = np.empty((len(manifest), size, size), dtype=np.float64)
    for i, r in enumerate(manifest.records):
        out[i] = preprocess(read_pgm(Path(base) / r.image_path), size)
    return out
