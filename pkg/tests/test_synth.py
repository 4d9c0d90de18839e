import numpy as np
import pytest

from mriqa.domain import QualityLabel, load_manifest
from mriqa.errors import ConfigError, InvalidInputError
from mriqa.selftrain import init_volume_labels
from mriqa.synth import (ARTIFACT_KINDS, ArtifactSpec, NoiseModel, PhantomConfig, SeverityBands, generate_dataset,
                         generate_phantom_slice, generate_split, inject_artifact, write_dataset)

SMALL = PhantomConfig(size=32)


def phantom(seed):
    return generate_phantom_slice(SMALL, np.random.default_rng(seed))


def test_phantom_deterministic_and_normalized():
    a, b = phantom(3), phantom(3)
    np.testing.assert_array_equal(a, b)
    assert a.min() == 0.0 and a.max() == 1.0


@pytest.mark.parametrize("kind", ARTIFACT_KINDS)
def test_severity_zero_is_identity(kind):
    img = phantom(1)
    np.testing.assert_array_equal(inject_artifact(img, ArtifactSpec(kind, 0.0), np.random.default_rng(0)), img)


def test_artifact_spec_validation():
    with pytest.raises(InvalidInputError):
        ArtifactSpec("noise", 1.5)
    with pytest.raises(InvalidInputError):
        ArtifactSpec("zipper", 0.5)


@pytest.mark.parametrize("kind", ARTIFACT_KINDS)
def test_deviation_grows_with_severity(kind):
    levels = [0.0, 0.25, 0.5, 0.75, 1.0]
    dev = np.zeros(len(levels))
    for seed in range(50):
        img = phantom(seed)
        for i, s in enumerate(levels):
            out = inject_artifact(img, ArtifactSpec(kind, s), np.random.default_rng(seed))
            dev[i] += np.abs(out - img).mean()
    assert np.all(np.diff(dev) >= 0), dev


@pytest.mark.parametrize("severity", [0.3, 0.6, 1.0])
def test_ringing_preserves_mean(severity):
    for seed in range(10):
        img = phantom(seed)
        out = inject_artifact(img, ArtifactSpec("gibbs_ringing", severity), np.random.default_rng(0))
        assert abs(out.mean() - img.mean()) <= 0.01 * img.mean()


def test_outputs_clamped():
    img = phantom(0)
    for kind in ARTIFACT_KINDS:
        out = inject_artifact(img, ArtifactSpec(kind, 1.0), np.random.default_rng(1))
        assert out.min() >= 0 and out.max() <= 1


def test_bands_and_noise_validation():
    with pytest.raises(ConfigError):
        SeverityBands(passing=(0.0, 0.4), questionable=(0.35, 0.55))
    with pytest.raises(ConfigError):
        NoiseModel(corruption_rate=1.2)


def test_split_labels_follow_volume_rules():
    ds = generate_split((2, 2, 2), 10, NoiseModel(0.0, 1.0), 5, "tr", "train", phantom=SMALL)
    assert len(ds) == 60 and ds.images.shape == (60, 32, 32)
    for vid, ix in ds.volume_slices().items():
        assert ds.true_volume[vid] == init_volume_labels(ds.true_slice[ix])
        assert ds.observed_volume[vid] == ds.true_volume[vid]
        assert np.all(ds.observed_slice[ix] == ds.observed_volume[vid])
    assert sorted(ds.true_volume.values()) == [0, 0, 1, 1, 2, 2]


def test_true_slice_classes_match_artifact_bands():
    # pure volumes at severity within band: class mix equals target
    ds = generate_split((1, 1, 1), 6, NoiseModel(0.0, 0.0), 2, "tr", "train", phantom=SMALL)
    np.testing.assert_array_equal(ds.true_slice, np.repeat([0, 1, 2], 6))


def test_corruption_rate_is_exact():
    ds = generate_split(None, 2, NoiseModel(0.3, 0.0), 11, "tr", "train", total=200,
                        phantom=PhantomConfig(size=16))
    flipped = sum(ds.observed_volume[v] != ds.true_volume[v] for v in ds.volume_order)
    assert abs(flipped / 200 - 0.30) <= 0.03


def test_unlabeled_split_has_no_labels():
    ds = generate_split(None, 3, NoiseModel(), 1, "un", "unlabeled", labeled=False, total=4, phantom=SMALL)
    assert np.all(ds.observed_slice == -1) and ds.observed_volume == {}
    assert all(r.label is None for r in ds.manifest().records)


def test_dataset_is_pure_function_of_seed():
    kw = dict(volumes_per_class=(1, 1, 1), slices=3, noise=NoiseModel(0.3), unlabeled_volumes=2,
              test_counts=(1, 1, 1), phantom=SMALL)
    a, b = generate_dataset(seed=7, **kw), generate_dataset(seed=7, **kw)
    for x, y in [(a.train, b.train), (a.unlabeled, b.unlabeled), (a.test, b.test)]:
        np.testing.assert_array_equal(x.images, y.images)
        np.testing.assert_array_equal(x.observed_slice, y.observed_slice)
    assert not np.array_equal(a.train.images, generate_dataset(seed=8, **kw).train.images)


def test_written_dataset_sidecars(tmp_path):
    data = generate_dataset((1, 1, 1), 3, NoiseModel(1.0), 3, unlabeled_volumes=1, test_counts=(1, 0, 1),
                            phantom=SMALL)
    paths = write_dataset(data, tmp_path)
    train = load_manifest(paths["train"])
    truth, true_labels = load_manifest(paths["truth"], extra_column=True)
    assert len(truth) == 9 + 3 + 6
    observed = {r.key: r.label for r in train.records}
    differ = [k for k in observed if observed[k] != QualityLabel.parse(true_labels[k])]
    assert len(differ) == 9  # every labeled volume corrupted at rate 1
    rows = paths["volume_truth"].read_text().splitlines()[1:]
    assert len(rows) == 3 + 1 + 2
