"""milasc: multi-instance acoustic scene classification.

Featurize audio, generate synthetic data, train, evaluate, sweep K,
gradient-check and inspect instance-level predictions.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, frontend, io, plots
from .estimator import MILSceneClassifier
from .gradcheck import NonFiniteError
from .model import INSTANCE_STRIDE
from .training import NumericalError

log = logging.getLogger("milasc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
INVALID = (ValueError, KeyError, FileNotFoundError, NotADirectoryError, IsADirectoryError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_featurize(args) -> int:
    meta = data.load_dcase_meta(args.meta, args.audio_root, device_pattern=args.device_pattern)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index_path, store_path = out / data.INDEX_NAME, out / data.FEATURES_NAME
    existing: dict[str, tuple[str, str, str]] = {}
    arrays: dict[str, np.ndarray] = {}
    if index_path.exists() and store_path.exists():
        arrays, _ = io.read_container(store_path)
        with open(index_path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                cid, label, fold, digest = line.rstrip("\n").split("\t")
                existing[cid] = (label, fold, digest)
    done = failed = skipped = 0
    for cid, label_idx, path in zip(meta.clip_ids, meta.labels, meta.audio_paths):
        label = meta.class_names[label_idx]
        try:
            digest = _sha256(path)
            if cid in existing and existing[cid][2] == digest and cid in arrays:
                existing[cid] = (label, args.fold, digest)
                skipped += 1
                continue
            arrays[cid] = frontend.log_mel(frontend.read_wav(path))
            existing[cid] = (label, args.fold, digest)
            done += 1
        except (OSError, frontend.WavError, ValueError) as exc:
            log.error("%s: %s", cid, exc)
            failed += 1
    if done:
        io.write_container(store_path, arrays, {"kind": "log-mel", "bands": str(frontend.N_MELS)})
    lines = ["clip_id\tlabel\tfold\tsha256"]
    lines += [f"{cid}\t{lab}\t{fold}\t{dig}" for cid, (lab, fold, dig) in existing.items()]
    index_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"featurized {done}, unchanged {skipped}, failed {failed}")
    return EXIT_INVALID if failed else EXIT_OK


def _read_spec(path: str | None, overrides: list[str]) -> data.SyntheticSpec:
    pairs: dict[str, str] = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if line:
                if "=" not in line:
                    raise io.FormatError(f"{path}:{lineno}: expected key = value")
                k, _, v = line.partition("=")
                pairs[k.strip()] = v.strip()
    pairs.update(_split_overrides(overrides))
    kinds = {f.name: f.default for f in fields(data.SyntheticSpec)}
    values = {}
    for key, raw in pairs.items():
        if key not in kinds:
            raise io.FormatError(f"unknown synthetic spec key {key!r}")
        default = kinds[key]
        if isinstance(default, bool):
            values[key] = raw.lower() in ("true", "1", "yes")
        elif isinstance(default, tuple):
            values[key] = tuple(int(s) for s in raw.split(","))
        elif isinstance(default, float):
            values[key] = float(raw)
        else:
            values[key] = int(raw)
    spec = data.SyntheticSpec(**values)
    spec.validate()
    return spec


def _split_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise io.FormatError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        out[k.strip()] = v.strip()
    return out


def cmd_synth(args) -> int:
    spec = _read_spec(args.spec, args.set)
    train_ds, train_gt = data.generate_synthetic(spec, "train")
    test_ds, test_gt = data.generate_synthetic(spec, "test")
    meta = {k: str(v) for k, v in spec.to_dict().items()}
    out = data.save_dataset(args.out, [train_ds, test_ds], [train_gt, test_gt], meta)
    spec_lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
                  for k, v in spec.to_dict().items()]
    (out / "spec.txt").write_text("\n".join(spec_lines) + "\n", encoding="utf-8")
    counts = train_ds.class_counts()
    print(f"wrote {len(train_ds)} train + {len(test_ds)} test clips to {out} "
          f"(classes {spec.n_classes}, train counts {counts.tolist()})")
    return EXIT_OK


def _load_config(path: str, overrides: list[str]) -> io.RunConfig:
    rc = io.RunConfig.load(path)
    if overrides:
        merged = rc.to_meta()
        merged.update(_split_overrides(overrides))
        rc = io.RunConfig.from_pairs(merged, path)
    return rc


def _fit(rc: io.RunConfig, out: Path, verbose: bool = True):
    if not rc.dataset:
        raise ValueError("config has no dataset")
    train_ds = data.load_dataset(rc.dataset, rc.train_fold)
    val_ds = data.load_dataset(rc.dataset, rc.val_fold, train_ds.class_names)
    if train_ds.features.shape[1:] != (rc.bands, rc.frames):
        raise ValueError(f"dataset features are {train_ds.features.shape[1:]}, config says "
                         f"({rc.bands}, {rc.frames})")
    est = MILSceneClassifier.from_run_config(rc)
    names = np.asarray(train_ds.class_names)
    out.mkdir(parents=True, exist_ok=True)

    def report(rec):
        if verbose:
            print(f"epoch {rec.epoch:3d}  loss {rec.train_loss:.5f}  "
                  f"val_acc {rec.val_accuracy:.4f}  lr {rec.lr:g}", flush=True)

    est.fit(train_ds.features, names[train_ds.labels],
            eval_set=(val_ds.features, names[val_ds.labels]), callback=report)
    rc.classes = tuple(train_ds.class_names)
    (out / "config.txt").write_text(rc.to_text(), encoding="utf-8")
    (out / "train_log.tsv").write_text(est.result_.log_tsv(), encoding="utf-8")
    est.save(out / "checkpoint.mla", rc)
    return est, val_ds


def cmd_train(args) -> int:
    rc = _load_config(args.config, args.set)
    out = Path(args.out or rc.out)
    rc.out = str(out)
    est, _ = _fit(rc, out)
    r = est.result_
    print(f"best val accuracy {r.best_accuracy:.4f} at epoch {r.best_epoch}; "
          f"checkpoint {out / 'checkpoint.mla'}")
    return EXIT_OK


def _index_arg(meta: str) -> Path:
    p = Path(meta)
    return p / data.INDEX_NAME if p.is_dir() else p


def cmd_evaluate(args) -> int:
    est = MILSceneClassifier.load(args.checkpoint)
    names = [str(c) for c in est.classes_]
    ds = data.load_dataset(_index_arg(args.meta), args.fold, names)
    acc, cm = est.confusion(ds.features, np.asarray(names)[ds.labels])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion.csv").write_text(cm.to_csv(), encoding="utf-8")
    (out / "confusion.svg").write_text(plots.confusion_svg(cm.counts, names, cm.recall),
                                       encoding="utf-8")
    print(f"accuracy {acc:.6f} ({int(np.trace(cm.counts))}/{int(cm.counts.sum())})")
    for name, rec in zip(names, cm.recall):
        print(f"  recall {name}: {rec:.4f}")
    return EXIT_OK


def parse_k_list(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def cmd_sweep_k(args) -> int:
    base = _load_config(args.config, args.set)
    out = Path(args.out or base.out)
    rows = ["k\tbest_val_accuracy\tbest_epoch"]
    ks, accs = [], []
    for k in parse_k_list(args.k_list):
        rc = io.RunConfig.from_pairs({**base.to_meta(), "head": "MD", "k": str(k)})
        est, _ = _fit(rc, out / f"k{k}", verbose=False)
        r = est.result_
        print(f"K={k}: best val accuracy {r.best_accuracy:.4f} (epoch {r.best_epoch})", flush=True)
        rows.append(f"{k}\t{r.best_accuracy!r}\t{r.best_epoch}")
        ks.append(k)
        accs.append(r.best_accuracy)
    (out / "k_sweep.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out / "k_sweep.svg").write_text(
        plots.line_svg(ks, accs, "K (detectors per class)", "validation accuracy",
                       "Influence of K"), encoding="utf-8")
    return EXIT_OK


def cmd_inspect(args) -> int:
    est = MILSceneClassifier.load(args.checkpoint)
    names = [str(c) for c in est.classes_]
    truth = None
    clip = Path(args.clip)
    if clip.suffix.lower() == ".wav" and clip.exists():
        feats = frontend.log_mel(frontend.read_wav(clip))
    else:
        if not args.meta:
            raise ValueError("--clip is not a WAV file; pass --meta to look it up by id")
        index = _index_arg(args.meta)
        arrays, _ = io.read_container(index.parent / data.FEATURES_NAME)
        if args.clip not in arrays:
            raise KeyError(f"clip {args.clip!r} not in {index.parent / data.FEATURES_NAME}")
        feats = arrays[args.clip]
        if (index.parent / data.TRUTH_NAME).exists():
            truth = data.load_ground_truth(index.parent).get(args.clip, set())
    pred = est.predict_instances(feats[None])
    scores, inst, arg = pred.bag_scores[0], pred.instance_scores[0], pred.argmax[0]
    best = int(np.argmax(scores))
    _, hop = frontend.frame_params(frontend.SAMPLE_RATE)
    sec = INSTANCE_STRIDE * hop / frontend.SAMPLE_RATE
    print(f"predicted: {names[best]}")
    print("class\tbag_score\targmax_instance\ttime_s")
    for c, name in enumerate(names):
        j = int(arg[c])
        print(f"{name}\t{scores[c]:.6f}\t{j}\t{j * sec:.2f}-{(j + 1) * sec:.2f}")
    print("instance scores (rows = classes, columns = instances):")
    np.set_printoptions(linewidth=200, precision=3, suppress=True)
    for c, name in enumerate(names):
        print(f"{name}\t" + " ".join(f"{v:.3f}" for v in inst[c]))
    if truth is not None:
        hit = (names[best], int(arg[best])) in truth
        print(f"argmax instance of predicted class on a planted event: {'yes' if hit else 'no'}")
    if args.svg:
        svg = Path(args.svg)
        svg.write_text(plots.instances_svg(feats, inst, names), encoding="utf-8")
        rows = ["class," + ",".join(f"i{j}" for j in range(inst.shape[1]))]
        rows += [f"{name}," + ",".join(repr(float(v)) for v in inst[c])
                 for c, name in enumerate(names)]
        svg.with_suffix(".csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import gradient_suite

    rows = gradient_suite(scale=args.scale, seeds=range(args.seeds))
    worst = 0.0
    print("check\tmax_rel_error\tchecked\tskipped")
    for name, res in rows:
        print(f"{name}\t{res.max_rel_error:.3e}\t{res.checked}\t{res.skipped}")
        worst = max(worst, res.max_rel_error)
    ok = worst < args.tol
    print(f"worst {worst:.3e} -> {'PASS' if ok else 'FAIL'} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="milasc", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("featurize", help="WAV corpus -> log-mel feature store")
    s.add_argument("--audio-root", required=True)
    s.add_argument("--meta", required=True, help="tab-separated path<TAB>label file")
    s.add_argument("--out", required=True)
    s.add_argument("--fold", default="train", help="fold name recorded in the index")
    s.add_argument("--device-pattern", default=None, help="regex; keep matching paths only")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("synth", help="generate a synthetic dataset with instance ground truth")
    s.add_argument("--spec", default=None, help="key = value synthetic spec file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="accuracy + confusion matrix of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--meta", required=True, help="dataset index.tsv (or its directory)")
    s.add_argument("--fold", default="test")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    s.add_argument("--scale", choices=["tiny", "small"], default="small")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("sweep-k", help="train the MD variant for each K")
    s.add_argument("--config", required=True)
    s.add_argument("--k-list", default="2..10")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("inspect", help="instance-level scores for one clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", required=True, help="WAV path or clip id (with --meta)")
    s.add_argument("--meta", default=None)
    s.add_argument("--svg", default=None)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
