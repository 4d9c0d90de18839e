import filecmp

import numpy as np
import pytest

from mriqa import tensor as T
from mriqa.cli import main, read_predictions
from mriqa.domain import CLASS_NAMES
from mriqa.forest import ForestConfig, fit_forest
from mriqa.nrnet import NRNet, desk_config, save_checkpoint

from test_metrics import T1_SLICE, T1_VOLUME


def synth(out, seed=0, slices=60):
    return main(["synth-gen", "--out", str(out), "--volumes-per-class", "1", "--slices", str(slices),
                 "--unlabeled-volumes", "1", "--test-counts", "1", "1", "1", "--seed", str(seed)])


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)

    def clean(c):
        if c.left_only or c.right_only or c.funny_files:
            return False
        _, mismatch, errors = filecmp.cmpfiles(c.left, c.right, c.common_files, shallow=False)
        return not mismatch and not errors and all(clean(s) for s in c.subdirs.values())
    return clean(cmp)


def test_synth_gen_is_byte_reproducible(tmp_path):
    assert synth(tmp_path / "a", slices=8) == 0
    assert synth(tmp_path / "b", slices=8) == 0
    assert same_tree(tmp_path / "a", tmp_path / "b")
    synth(tmp_path / "c", seed=1, slices=8)
    assert not same_tree(tmp_path / "a", tmp_path / "c")


def write_table_fixture(tmp_path, slice_counts, volume_counts):
    pred = ["# volume_id\tslice_index\tp_pass\tp_questionable\tp_fail\tlabel"]
    truth = ["# split=truth"]
    n = 0
    for actual in range(3):
        for guess in range(3):
            for _ in range(slice_counts[actual][guess]):
                pred.append(f"v{n // 60}\t{n % 60}\t0\t0\t0\t{CLASS_NAMES[guess]}")
                truth.append(f"v{n // 60}\t{n % 60}\tx.pgm\t{CLASS_NAMES[actual]}\t{CLASS_NAMES[actual]}")
                n += 1
    vols = ["# volume_id\tsplit\tobserved_label\ttrue_label"]
    k = 0
    for actual in range(3):
        for guess in range(3):
            for _ in range(volume_counts[actual][guess]):
                pred.append(f"w{k}\t*\t0\t0\t0\t{CLASS_NAMES[guess]}")
                vols.append(f"w{k}\ttest\tunlabeled\t{CLASS_NAMES[actual]}")
                k += 1
    (tmp_path / "pred.tsv").write_text("\n".join(pred) + "\n")
    (tmp_path / "truth.tsv").write_text("\n".join(truth) + "\n")
    (tmp_path / "volume_truth.tsv").write_text("\n".join(vols) + "\n")


def test_eval_reproduces_reference_tables(tmp_path, capsys):
    write_table_fixture(tmp_path, T1_SLICE, T1_VOLUME)
    assert main(["eval", "--pred", str(tmp_path / "pred.tsv"), "--truth", str(tmp_path / "truth.tsv")]) == 0
    out = capsys.readouterr().out
    assert "level=slice class=pass support=1500 sensitivity=0.9473 specificity=1.0000" in out
    assert "level=slice class=fail support=360 sensitivity=0.9917 specificity=1.0000" in out
    assert "level=volume class=questionable support=9 sensitivity=1.0000 specificity=0.9355" in out


@pytest.fixture(scope="module")
def tiny_models(tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    with T.precision("float32"):
        net = NRNet(desk_config(), seed=0)
        save_checkpoint(net, d / "m.ckpt")
    rng = np.random.default_rng(0)
    fit_forest(rng.random((30, 13)), np.repeat([0, 1, 2], 10), ForestConfig(n_trees=3)).save(d / "f.json")
    return d / "m.ckpt", d / "f.json"


def test_assess_writes_one_row_per_slice_plus_volume(tmp_path, tiny_models):
    ckpt, forest = tiny_models
    synth(tmp_path / "data")
    out = tmp_path / "pred.tsv"
    assert main(["assess", "--ckpt", str(ckpt), "--forest", str(forest),
                 "--input", str(tmp_path / "data" / "images" / "te0000"), "--out", str(out)]) == 0
    slices, volumes = read_predictions(out)
    assert len(slices) == 60 and list(volumes) == ["te0000"]
    rows = [line.split("\t") for line in out.read_text().splitlines()[1:]]
    assert all(abs(sum(map(float, r[2:5])) - 1) < 1e-5 for r in rows)


def test_assess_then_eval_round_trip(tmp_path, tiny_models, capsys):
    ckpt, forest = tiny_models
    synth(tmp_path / "data", slices=8)
    out = tmp_path / "pred.tsv"
    assert main(["assess", "--ckpt", str(ckpt), "--forest", str(forest),
                 "--input", str(tmp_path / "data" / "test.tsv"), "--out", str(out)]) == 0
    slices, volumes = read_predictions(out)
    assert len(slices) == 24 and len(volumes) == 3
    capsys.readouterr()
    assert main(["eval", "--pred", str(out), "--truth", str(tmp_path / "data" / "truth.tsv"),
                 "--include-questionable-slices"]) == 0
    text = capsys.readouterr().out
    assert "level=slice accuracy=" in text and "level=volume accuracy=" in text


def test_error_exit_codes(tmp_path, capsys):
    assert main(["assess", "--ckpt", str(tmp_path / "none"), "--forest", "x", "--input", "y",
                 "--out", "z"]) == 2
    bad = tmp_path / "bad.tsv"
    bad.write_text("v\t0\tpass\n")
    assert main(["eval", "--pred", str(bad), "--truth", str(bad)]) == 4
    assert main(["bench", "--variants", "ResNet"]) == 2
    assert main(["bench", "--reps", "2", "--input-size", "16"]) == 2
    assert "error:" in capsys.readouterr().err
