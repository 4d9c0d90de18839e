"""Command-line entry points: synth-gen, train, selftrain, assess, eval, bench."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .domain import CLASS_NAMES, QualityLabel, load_manifest, load_slices, preprocess, read_pgm
from .errors import FormatError, InvalidInputError, MriqaError
from .forest import Forest, predict_volume, volume_features
from .metrics import NO_EXCLUSION, SLICE_EXCLUSION, confusion, metrics
from .nrnet import VARIANTS, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, SliceSet, run_pipeline
from .synth import NoiseModel, generate_dataset, write_dataset
from .training import train

log = logging.getLogger("mriqa")

PRED_HEADER = "# volume_id\tslice_index\tp_pass\tp_questionable\tp_fail\tlabel"
VOLUME_INDEX = "*"


def _config(path: str | None) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def _load_labeled(path: str, size: int) -> SliceSet:
    manifest = load_manifest(path)
    images = load_slices(manifest, Path(path).parent, size)
    labels = [-1 if r.label is None else int(r.label) for r in manifest.records]
    return SliceSet(images, [r.volume_id for r in manifest.records], labels)


def cmd_synth_gen(a) -> int:
    counts = (a.volumes_per_class,) * 3
    data = generate_dataset(counts, a.slices, NoiseModel(a.noise_rate, a.mixed_rate), a.seed,
                            unlabeled_volumes=a.unlabeled_volumes, test_counts=tuple(a.test_counts))
    paths = write_dataset(data, a.out)
    for name, p in paths.items():
        print(f"wrote {name}={p}")
    return 0


def cmd_train(a) -> int:
    cfg = _config(a.config)
    data = _load_labeled(a.manifest, cfg.net.input_size)
    if np.any(data.labels < 0):
        raise InvalidInputError("train needs a fully labeled manifest")
    result = train(data.images, data.labels, cfg.net, cfg.pretrain, seed=a.seed)
    save_checkpoint(result.model, a.out, {"best_epoch": result.best_epoch, "seed": a.seed})
    for rec in result.history:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
    return 0


def cmd_selftrain(a) -> int:
    cfg = _config(a.config)
    labeled = _load_labeled(a.labeled, cfg.net.input_size)
    unlabeled = _load_labeled(a.unlabeled, cfg.net.input_size)
    result = run_pipeline(labeled, unlabeled, cfg, seed=a.seed)
    save_checkpoint(result.model, a.out_ckpt, {"seed": a.seed, "stage": "self-trained"})
    result.forest.save(a.out_forest)
    text = result.trace_text()
    if a.trace:
        Path(a.trace).write_text(text)
    sys.stdout.write(text)
    return 0


def _volumes_from_input(path: Path, size: int) -> dict[str, tuple[list[int], np.ndarray]]:
    """Volume id -> (slice indices, preprocessed slices) from a manifest or directory tree.

    A directory holding graymaps is one volume; otherwise each subdirectory is.
    Slice indices come from the numeric file stem.
    """
    if path.is_file():
        m = load_manifest(path)
        images = load_slices(m, path.parent, size)
        out: dict[str, tuple[list[int], list[np.ndarray]]] = {}
        for r, img in zip(m.records, images):
            out.setdefault(r.volume_id, ([], []))
            out[r.volume_id][0].append(r.slice_index)
            out[r.volume_id][1].append(img)
        return {v: (ix, np.stack(imgs)) for v, (ix, imgs) in out.items()}
    if not path.is_dir():
        raise InvalidInputError(f"no such input {path}")
    dirs = [path] if any(path.glob("*.pgm")) else sorted(p for p in path.iterdir() if p.is_dir())
    vols = {}
    for d in dirs:
        files = sorted(d.glob("*.pgm"))
        if not files:
            continue
        try:
            idx = [int(f.stem) for f in files]
        except ValueError:
            raise FormatError(f"{d}: slice files must be named by integer index") from None
        order = np.argsort(idx, kind="stable")
        vols[d.name] = ([idx[i] for i in order], np.stack([preprocess(read_pgm(files[i]), size) for i in order]))
    if not vols:
        raise InvalidInputError(f"{path}: no graymap slices found")
    return vols


def _pred_row(vid: str, idx, p) -> str:
    label = CLASS_NAMES[int(np.argmax(p))]
    return "\t".join([vid, str(idx)] + [f"{float(v):.6f}" for v in p] + [label])


def cmd_assess(a) -> int:
    model, _ = load_checkpoint(a.ckpt)
    forest = Forest.load(a.forest)
    lines = [PRED_HEADER]
    for vid, (idx, images) in _volumes_from_input(Path(a.input), model.config.input_size).items():
        probs = model.predict(images)
        lines += [_pred_row(vid, i, p) for i, p in zip(idx, probs)]
        lines.append(_pred_row(vid, VOLUME_INDEX, predict_volume(forest, volume_features(probs)).probabilities))
    Path(a.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} predictions to {a.out}")
    return 0


def read_predictions(path) -> tuple[dict, dict]:
    """(slice key -> label, volume id -> label) from an assess output file."""
    slices, volumes = {}, {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(cols)}")
        label = QualityLabel.parse(cols[5])
        if cols[1] == VOLUME_INDEX:
            volumes[cols[0]] = label
        else:
            slices[(cols[0], int(cols[1]))] = label
    return slices, volumes


def read_truth(paths) -> tuple[dict, dict]:
    """Slice truth from a sidecar manifest (5th column) and volume truth from a volume table."""
    slices, volumes = {}, {}
    for path in paths:
        text = Path(path).read_text()
        if text.startswith("# volume_id"):
            for line in text.splitlines()[1:]:
                if line.strip():
                    vid, _, _, true = line.split("\t")
                    volumes[vid] = QualityLabel.parse(true)
        else:
            m, extra = load_manifest(path, extra_column=True)
            slices.update({k: QualityLabel.parse(v) for k, v in extra.items()})
    return slices, volumes


def _report(title: str, pred: dict, truth: dict, excluded) -> list[str]:
    keys = sorted(k for k in pred if k in truth)
    if not keys:
        return [f"# {title}: no overlapping items"]
    cm = confusion([pred[k] for k in keys], [truth[k] for k in keys], excluded)
    rep = metrics(cm)
    return ([f"# {title} confusion (rows actual, columns predicted)"] + cm.table().splitlines()
            + rep.table().splitlines() + [f"level={title} {kv}" for kv in rep.key_values()])


def cmd_eval(a) -> int:
    pred_s, pred_v = read_predictions(a.pred)
    truth_paths = list(a.truth)
    sibling = Path(a.truth[0]).parent / "volume_truth.tsv"
    if sibling.is_file() and str(sibling) not in truth_paths:
        truth_paths.append(str(sibling))
    true_s, true_v = read_truth(truth_paths)
    excluded = NO_EXCLUSION if a.include_questionable_slices else SLICE_EXCLUSION
    out = _report("slice", pred_s, true_s, excluded) + _report("volume", pred_v, true_v, NO_EXCLUSION)
    print("\n".join(out))
    return 0


def cmd_bench(a) -> int:
    from .cost_model import bench, count_macs, mac_table
    from .nrnet import build_variant

    variants = VARIANTS if a.variants == "all" else tuple(a.variants.split(","))
    for v in variants:
        if v not in VARIANTS:
            raise InvalidInputError(f"unknown variant {v!r}")
    report = bench(variants, a.input_size, a.reps, a.seed)
    if a.verbose:
        for v in variants:
            print(f"# {v}\n{mac_table(count_macs(build_variant(v, input_size=a.input_size)))}")
    print(report.table())
    print("\n".join(report.key_values()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mriqa", description="Slice and volume MRI quality assessment.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--volumes-per-class", type=int, default=20)
    p.add_argument("--slices", type=int, default=60)
    p.add_argument("--noise-rate", type=float, default=0.3)
    p.add_argument("--mixed-rate", type=float, default=0.5)
    p.add_argument("--unlabeled-volumes", type=int, default=200)
    p.add_argument("--test-counts", type=int, nargs=3, default=(25, 9, 6), metavar=("PASS", "QUES", "FAIL"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="supervised slice training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selftrain", help="full semi-supervised and self-training protocol")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--config")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--out-forest", required=True)
    p.add_argument("--trace")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("assess", help="rate every slice and volume under a directory or manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--forest", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("eval", help="confusion matrices, sensitivity and specificity")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True, nargs="+")
    p.add_argument("--include-questionable-slices", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="MAC counts and single-slice CPU timing")
    p.add_argument("--variants", default="all")
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    T.set_precision("float32")
    try:
        return args.func(args)
    except MriqaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return InvalidInputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
