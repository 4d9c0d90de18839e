"""Synthetic phantom slices with graded artifacts, grouped into volumes.

True slice quality is defined by the severity band of the injected
artifact; volume labels follow the volume rating rules over the true slice
classes, and the observed (training) labels are then corrupted at volume
level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .domain import (DatasetManifest, ManifestRecord, QualityLabel, minmax_normalize, save_manifest,
                     write_pgm)
from .errors import ConfigError, InvalidInputError
from .selftrain import init_volume_labels

ARTIFACT_KINDS = ("motion_ghost", "gibbs_ringing", "noise", "contrast_loss", "local_blur")


@dataclass
class PhantomConfig:
    size: int = 64
    ellipse_range: tuple[int, int] = (3, 6)
    tissue_levels: tuple[float, ...] = (0.25, 0.45, 0.75)
    level_jitter: float = 0.04
    texture_sigma: float = 3.0
    texture_amplitude: float = 0.05


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str
    severity: float

    def __post_init__(self):
        if self.kind not in ARTIFACT_KINDS:
            raise InvalidInputError(f"unknown artifact kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise InvalidInputError(f"severity {self.severity} outside [0, 1]")


@dataclass
class NoiseModel:
    corruption_rate: float = 0.0
    mixed_rate: float = 0.5

    def __post_init__(self):
        for name in ("corruption_rate", "mixed_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")


@dataclass
class SeverityBands:
    passing: tuple[float, float] = (0.0, 0.15)
    questionable: tuple[float, float] = (0.35, 0.55)
    failing: tuple[float, float] = (0.75, 1.0)

    def __post_init__(self):
        bands = [self.passing, self.questionable, self.failing]
        for lo, hi in bands:
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigError(f"bad severity band {(lo, hi)}")
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if lo <= hi:
                raise ConfigError("severity bands overlap")

    def band(self, label: QualityLabel) -> tuple[float, float]:
        return (self.passing, self.questionable, self.failing)[int(label)]


def generate_phantom_slice(config: PhantomConfig, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """A smooth multi-ellipse slice in [0, 1] on a zero background.

    ``scale`` shrinks the anatomy, mimicking slices away from the volume centre.
    """
    n = config.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    yy = (yy - (n - 1) / 2) / (n / 2)
    xx = (xx - (n - 1) / 2) / (n / 2)
    img = np.zeros((n, n))

    def ellipse(cy, cx, ry, rx, angle):
        c, s = np.cos(angle), np.sin(angle)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    ry, rx = scale * rng.uniform(0.72, 0.85), scale * rng.uniform(0.6, 0.72)
    head = ellipse(0, 0, ry, rx, rng.uniform(-0.15, 0.15))
    img[head] = 0.95 + rng.uniform(-config.level_jitter, config.level_jitter)
    brain = ellipse(0, 0, ry * 0.88, rx * 0.86, 0.0)
    img[brain] = config.tissue_levels[1] + rng.uniform(-config.level_jitter, config.level_jitter)
    lo, hi = config.ellipse_range
    for _ in range(rng.integers(lo, hi + 1)):
        level = config.tissue_levels[rng.integers(len(config.tissue_levels))]
        e = ellipse(rng.uniform(-0.4, 0.4) * ry, rng.uniform(-0.4, 0.4) * rx,
                    rng.uniform(0.08, 0.3) * ry, rng.uniform(0.08, 0.3) * rx, rng.uniform(0, np.pi))
        img[e & brain] = level + rng.uniform(-config.level_jitter, config.level_jitter)
    texture = ndimage.gaussian_filter(rng.normal(size=(n, n)), config.texture_sigma)
    texture /= np.abs(texture).max() + 1e-12
    img = np.where(head, img + config.texture_amplitude * texture, 0.0)
    img = ndimage.gaussian_filter(img, 0.7)
    return minmax_normalize(img)


def inject_artifact(image: np.ndarray, spec: ArtifactSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply one artifact at the given severity; severity 0 returns an exact copy."""
    x = np.asarray(image, dtype=np.float64)
    s = spec.severity
    if s == 0.0:
        return x.copy()
    n = x.shape[0]
    if spec.kind == "motion_ghost":
        shift = int(rng.integers(n // 8, n // 3))
        ghosts = 0.5 * (np.roll(x, shift, axis=0) + np.roll(x, -shift, axis=0))
        out = x + 0.7 * s * (ghosts - x)
    elif spec.kind == "gibbs_ringing":
        out = _clip_keeping_mean(_truncate_spectrum(x, keep=1.0 - 0.9 * s**0.6), x.mean())
    elif spec.kind == "noise":
        out = x + 0.22 * s * rng.normal(size=x.shape)
    elif spec.kind == "contrast_loss":
        fg = x > 0.02
        if not fg.any():
            return x.copy()
        m = x[fg].mean()
        out = np.where(fg, m + (1.0 - 0.8 * s) * (x - m), x)
    else:  # local_blur
        mask = np.zeros_like(x)
        for _ in range(int(rng.integers(2, 5))):
            r = int(rng.integers(n // 6, n // 3))
            cy, cx = rng.integers(r, n - r, size=2)
            mask[cy - r:cy + r, cx - r:cx + r] = 1.0
        mask = ndimage.gaussian_filter(mask, 2.0)
        blurred = ndimage.gaussian_filter(x, 2.5)
        out = x + s * mask * (blurred - x)
    return np.clip(out, 0.0, 1.0)


def _clip_keeping_mean(x: np.ndarray, mean: float, rounds: int = 5) -> np.ndarray:
    """Clamp to [0, 1], then spread the mass lost to clipping over the unclipped pixels."""
    out = np.clip(x, 0.0, 1.0)
    for _ in range(rounds):
        free = (out > 0.0) & (out < 1.0)
        if not free.any():
            break
        out = np.clip(out + free * ((mean - out.mean()) * out.size / free.sum()), 0.0, 1.0)
    return out


def _truncate_spectrum(x: np.ndarray, keep: float) -> np.ndarray:
    """Low-pass by zeroing high frequencies along each axis in turn (separable 1-D FFTs)."""
    out = x
    for axis in (0, 1):
        n = out.shape[axis]
        spec = np.fft.fft(out, axis=axis)
        freqs = np.abs(np.fft.fftfreq(n) * n)
        cutoff = max(1.0, keep * n / 2)
        shape = [1, 1]
        shape[axis] = n
        spec = spec * (freqs <= cutoff).reshape(shape)
        out = np.fft.ifft(spec, axis=axis).real
    return out


# -- datasets -------------------------------------------------------------------

@dataclass
class SynthDataset:
    """In-memory slices plus observed and true labels, in volume-major order."""

    images: np.ndarray  # [n, size, size] float64 in [0, 1]
    volume_ids: list[str]
    slice_index: np.ndarray
    true_slice: np.ndarray  # int class per slice
    observed_slice: np.ndarray  # int class per slice, -1 = unlabeled
    volume_order: list[str] = field(default_factory=list)
    true_volume: dict[str, int] = field(default_factory=dict)
    observed_volume: dict[str, int] = field(default_factory=dict)  # absent = unlabeled
    split: str = "train"

    def __len__(self) -> int:
        return len(self.volume_ids)

    def volume_slices(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, v in enumerate(self.volume_ids):
            out.setdefault(v, []).append(i)
        return {v: np.asarray(ix) for v, ix in out.items()}

    def manifest(self, image_paths: list[str] | None = None) -> DatasetManifest:
        recs = []
        for i, (v, s) in enumerate(zip(self.volume_ids, self.slice_index)):
            lab = self.observed_slice[i]
            path = image_paths[i] if image_paths else f"{v}/{int(s):03d}.pgm"
            recs.append(ManifestRecord(v, int(s), path, None if lab < 0 else QualityLabel(int(lab))))
        return DatasetManifest(recs, self.split)


def _composition(target: QualityLabel, slices: int, mixed: bool, rng: np.random.Generator) -> np.ndarray:
    """True slice classes for one volume whose rating under the volume rules is ``target``."""
    if not mixed:
        return np.full(slices, int(target))
    if target == QualityLabel.PASS:
        fracs = [rng.uniform(0.88, 1.0)]
        rest = 1.0 - fracs[0]
        q = rng.uniform(0, rest)
        fracs += [q, rest - q]
    elif target == QualityLabel.QUESTIONABLE:
        q = rng.uniform(0.5, 0.8)
        f = rng.uniform(0, min(0.15, 1.0 - q))
        fracs = [1.0 - q - f, q, f]
    else:
        f = rng.uniform(0.55, 0.9)
        p = rng.uniform(0, 1.0 - f)
        fracs = [p, 1.0 - f - p, f]
    counts = np.floor(np.asarray(fracs) * slices).astype(int)
    counts[int(target)] += slices - counts.sum()
    labels = np.repeat(np.arange(3), counts)
    rng.shuffle(labels)
    return labels


def generate_volume(target: QualityLabel, slices: int, mixed: bool, rng: np.random.Generator,
                    phantom: PhantomConfig, bands: SeverityBands):
    """Returns (images, true slice classes) for one volume."""
    classes = _composition(target, slices, mixed, rng)
    kinds = rng.choice(len(ARTIFACT_KINDS), size=2, replace=False)
    images = np.empty((slices, phantom.size, phantom.size))
    for k in range(slices):
        z = (k - (slices - 1) / 2) / max(slices / 2, 1)
        base = generate_phantom_slice(phantom, rng, scale=np.sqrt(max(1.0 - 0.6 * z * z, 0.2)))
        lo, hi = bands.band(QualityLabel(int(classes[k])))
        kind = ARTIFACT_KINDS[kinds[rng.integers(2)]]
        # stored as the loader would see it, so files and arrays agree
        images[k] = minmax_normalize(inject_artifact(base, ArtifactSpec(kind, float(rng.uniform(lo, hi))), rng))
    return images, classes


def generate_split(class_counts: tuple[int, int, int] | None, slices: int, noise: NoiseModel, seed: int,
                   prefix: str, split: str, labeled: bool = True, total: int | None = None,
                   phantom: PhantomConfig | None = None, bands: SeverityBands | None = None) -> SynthDataset:
    """Generate one split. ``class_counts`` fixes volumes per class; otherwise
    ``total`` volumes get uniformly random target classes."""
    phantom = phantom or PhantomConfig()
    bands = bands or SeverityBands()
    master = np.random.default_rng(seed)
    if class_counts is not None:
        targets = np.repeat(np.arange(3), class_counts)
    else:
        targets = master.integers(0, 3, size=total or 0)
    nvol = len(targets)
    mixed_flags = master.random(nvol) < noise.mixed_rate
    vol_seeds = master.integers(0, 2**63 - 1, size=nvol)
    images, vids, sidx, true_s, obs_s = [], [], [], [], []
    true_v, obs_v, order = {}, {}, []
    for v in range(nvol):
        vid = f"{prefix}{v:04d}"
        rng = np.random.default_rng(int(vol_seeds[v]))
        imgs, classes = generate_volume(QualityLabel(int(targets[v])), slices, bool(mixed_flags[v]), rng,
                                        phantom, bands)
        order.append(vid)
        true_v[vid] = int(init_volume_labels([QualityLabel(int(c)) for c in classes]))
        images.append(imgs)
        vids += [vid] * slices
        sidx.append(np.arange(slices))
        true_s.append(classes)
    corrupt = np.zeros(nvol, dtype=bool)
    if labeled and nvol:
        flips = int(round(noise.corruption_rate * nvol))
        corrupt[master.permutation(nvol)[:flips]] = True
    for v, vid in enumerate(order):
        if not labeled:
            continue
        lab = true_v[vid]
        if corrupt[v]:
            lab = (lab + int(master.integers(1, 3))) % 3
        obs_v[vid] = lab
    for v, vid in enumerate(order):
        obs_s.append(np.full(slices, obs_v.get(vid, -1)))
    size = phantom.size
    return SynthDataset(
        images=np.concatenate(images) if images else np.zeros((0, size, size)),
        volume_ids=vids,
        slice_index=np.concatenate(sidx) if sidx else np.zeros(0, int),
        true_slice=np.concatenate(true_s) if true_s else np.zeros(0, int),
        observed_slice=np.concatenate(obs_s) if obs_s else np.zeros(0, int),
        volume_order=order,
        true_volume=true_v,
        observed_volume=obs_v,
        split=split,
    )


@dataclass
class BenchmarkData:
    train: SynthDataset
    unlabeled: SynthDataset
    test: SynthDataset


def generate_dataset(volumes_per_class: tuple[int, int, int] = (20, 20, 20), slices: int = 60,
                     noise: NoiseModel | None = None, seed: int = 0, unlabeled_volumes: int = 200,
                     test_counts: tuple[int, int, int] = (25, 9, 6),
                     phantom: PhantomConfig | None = None, bands: SeverityBands | None = None) -> BenchmarkData:
    """Noisy labeled training volumes, an unlabeled pool and a clean test set."""
    noise = noise or NoiseModel()
    seeds = np.random.SeedSequence(seed).generate_state(3)
    clean = NoiseModel(0.0, noise.mixed_rate)
    return BenchmarkData(
        train=generate_split(volumes_per_class, slices, noise, int(seeds[0]), "tr", "train",
                             phantom=phantom, bands=bands),
        unlabeled=generate_split(None, slices, clean, int(seeds[1]), "un", "unlabeled", labeled=False,
                                 total=unlabeled_volumes, phantom=phantom, bands=bands),
        test=generate_split(test_counts, slices, clean, int(seeds[2]), "te", "test",
                            phantom=phantom, bands=bands),
    )


def write_dataset(data: BenchmarkData, out_dir) -> dict[str, Path]:
    """Write graymaps, one manifest per split, the slice truth sidecar and volume truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth_records, truth_extra, vol_lines = [], {}, []
    paths = {}
    for ds in (data.train, data.unlabeled, data.test):
        rel = []
        for i, (v, s) in enumerate(zip(ds.volume_ids, ds.slice_index)):
            p = Path("images") / v / f"{int(s):03d}.pgm"
            (out / p).parent.mkdir(parents=True, exist_ok=True)
            write_pgm(out / p, ds.images[i])
            rel.append(str(p))
        m = ds.manifest(rel)
        save_manifest(m, out / f"{ds.split}.tsv")
        paths[ds.split] = out / f"{ds.split}.tsv"
        truth_records += m.records
        for r, t in zip(m.records, ds.true_slice):
            truth_extra[r.key] = str(QualityLabel(int(t)))
        for vid in ds.volume_order:
            obs = ds.observed_volume.get(vid)
            vol_lines.append("\t".join([vid, ds.split, "unlabeled" if obs is None else str(QualityLabel(obs)),
                                        str(QualityLabel(ds.true_volume[vid]))]))
    save_manifest(DatasetManifest(truth_records, "truth"), out / "truth.tsv", extra=truth_extra)
    (out / "volume_truth.tsv").write_text(
        "# volume_id\tsplit\tobserved_label\ttrue_label\n" + "\n".join(vol_lines) + "\n")
    paths["truth"] = out / "truth.tsv"
    paths["volume_truth"] = out / "volume_truth.tsv"
    return paths
