"""Command-line entry point: ``egr-forge <subcommand> ... --out DIR``.

Exit status is 0 on success, 2 for invalid configuration or arguments and 1
for failures while running. Every successful run writes ``run.json`` into
its output directory; ``egr-forge replay run.json --out DIR`` re-executes
the recorded command and checks that the outputs match.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .corruptions import Corruption, CorruptionError, CorruptionSpec, KINDS
from .detector import Detector
from .edges import EDGE_MODES, EdgeCache, EdgeConfigError, edge_graph, _check_mode
from .experiments import (
    SYNTH_MARKER,
    cross_eval,
    data_label,
    digest,
    evaluate,
    file_digest,
    off_diagonal_mean,
    read_matrix_csv,
    render_svg,
    version,
    write_history_csv,
    write_matrix_csv,
)
from .manifest import (
    FORGED_SUBSETS,
    SPLITS,
    Manifest,
    ManifestError,
    Sample,
    identity_disjoint_split,
    load_images,
    load_manifest,
    load_split,
    read_image,
    save_manifest,
    save_split,
    write_png,
)
from .synth import SynthSpec, generate_toy_dataset
from .training import ConfigError, TrainConfig, train

RUN_RECORD = "run.json"
# wall-clock columns are left out of replay comparisons
TIMING_COLUMNS = {"history.csv": "seconds"}


class UsageError(ValueError):
    """Bad command-line input detected before any work starts."""


INVALID = (UsageError, ConfigError, CorruptionError, EdgeConfigError, ManifestError)


def _path(text):
    return str(Path(text).expanduser().resolve())


def _existing(path, what):
    if not Path(path).exists():
        raise UsageError(f"{what}: no such file: {path}")
    return path


def _load_manifest(path):
    return load_manifest(_existing(path, "--manifest"))


def _load_split(path):
    return load_split(_existing(path, "--split"))


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corruption_from_args(args):
    if args.kind is None:
        for flag in ("sigma", "radius", "quality"):
            if getattr(args, flag) is not None:
                raise UsageError(f"--{flag} needs --kind")
        return None
    return CorruptionSpec(args.kind, args.sigma, args.radius, args.quality)


def _copy_marker(src_manifest, out):
    marker = src_manifest.root / SYNTH_MARKER
    if marker.exists():
        (out / SYNTH_MARKER).write_bytes(marker.read_bytes())


# ---------------------------------------------------------------------------
# subcommands; each returns (config dict for the digest, list of seeds)


def cmd_synth(args):
    try:
        spec = SynthSpec(
            identities=args.identities,
            images_per_identity=args.images_per_identity,
            seed=args.seed,
            texture=args.texture,
            signature=args.signature,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(args)
    manifest = generate_toy_dataset(spec, out)
    print(f"wrote {len(manifest)} images and manifest.jsonl to {out} (synthetic)")
    return spec.to_dict(), [spec.seed]


def cmd_split(args):
    manifest = _load_manifest(args.manifest)
    ratios = tuple(args.ratios)
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise UsageError("--ratios needs three non-negative numbers with a positive sum")
    assignment = identity_disjoint_split(manifest, ratios, args.seed)
    out = _out(args)
    save_split(assignment, out / "split.json")
    counts = {s: sum(v == s for v in assignment.values()) for s in SPLITS}
    print(f"split {len(assignment)} identities: {counts}")
    return {"ratios": ratios, "manifest": file_digest(args.manifest)}, [args.seed]


def _edge_png(img, mode, threshold):
    return edge_graph(img, mode, threshold).values[:, :, None]


def cmd_edges(args):
    threshold = args.threshold if args.mode == "binary" else None
    _check_mode(args.mode, threshold)
    src = Path(_existing(args.input, "--input"))
    out = _out(args)
    if src.suffix == ".jsonl":
        manifest = load_manifest(src)
        derived = []
        for sample in manifest:
            rel = str(Path(sample.path).with_suffix(".png"))
            write_png(out / rel, _edge_png(read_image(manifest.resolve(sample)), args.mode, threshold))
            derived.append(Sample(rel, sample.label, sample.identity, sample.subset, sample.method))
        save_manifest(Manifest(out, derived), out / "manifest.jsonl")
        _copy_marker(manifest, out)
        print(f"wrote {len(derived)} edge graphs to {out}")
    else:
        write_png(out / (src.stem + ".png"), _edge_png(read_image(src), args.mode, threshold))
        print(f"wrote {out / (src.stem + '.png')}")
    return {"mode": args.mode, "threshold": threshold, "input": file_digest(src)}, []


def cmd_corrupt(args):
    spec = _corruption_from_args(args)
    if spec is None:
        raise UsageError("--kind is required")
    manifest = _load_manifest(args.manifest)
    out = _out(args)
    images = Corruption(spec.kind, spec.sigma, spec.radius, spec.quality, args.seed).transform(
        load_images(manifest)
    )
    derived = []
    for sample, img in zip(manifest, images):
        rel = str(Path(sample.path).with_suffix(".png"))
        write_png(out / rel, img)
        derived.append(Sample(rel, sample.label, sample.identity, sample.subset, sample.method))
    save_manifest(Manifest(out, derived), out / "manifest.jsonl")
    _copy_marker(manifest, out)
    print(f"wrote {len(derived)} {spec.kind}-corrupted images to {out}")
    return {"corruption": spec.to_dict(), "manifest": file_digest(args.manifest)}, [args.seed]


def _read_config(path):
    _existing(path, "--config")
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: invalid JSON: {exc}") from None
    return TrainConfig.from_dict(data)


def _restrict(manifest, subset):
    if subset is None:
        return manifest
    if subset not in FORGED_SUBSETS:
        raise UsageError(f"--subset must be one of {FORGED_SUBSETS}, got {subset!r}")
    return manifest.subset((subset, "REAL"))


def cmd_train(args):
    config = _read_config(args.config)
    if config.init_checkpoint:
        _existing(config.init_checkpoint, "init_checkpoint")
    manifest = _restrict(_load_manifest(args.manifest), args.subset)
    split = _load_split(args.split)
    out = _out(args)
    cache = EdgeCache(args.cache) if args.cache else None
    model, history = train(manifest, split, config, cache=cache)
    cfg = config.to_dict()
    model.save(
        out / "model.egrd",
        {
            "config": cfg,
            "config_digest": digest(cfg),
            "train_subset": args.subset,
            "data": data_label(manifest),
        },
    )
    write_history_csv(out / "history.csv", history)
    best = max(history, key=lambda h: h["val_auc"])
    print(f"trained {len(history)} epochs; best val AUC {best['val_auc']:.4f} (epoch {best['epoch']})")
    return cfg, [config.seed]


def _partition(manifest, args):
    if args.split is None:
        return manifest
    return manifest.select_split(_load_split(args.split), args.partition)


def cmd_eval(args):
    spec = _corruption_from_args(args)
    model = Detector.load(_existing(args.checkpoint, "--checkpoint"))
    manifest = _partition(_restrict(_load_manifest(args.manifest), args.subset), args)
    manifest.check_trainable()
    out = _out(args)
    report = evaluate(model, manifest, spec, args.corruption_seed)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"AUC {report['auc']:.4f}  accuracy {report['accuracy']:.4f}  ({report['data']} data)")
    cfg = {
        "checkpoint": file_digest(args.checkpoint),
        "corruption": None if spec is None else spec.to_dict(),
        "subset": args.subset,
        "partition": args.partition if args.split else None,
    }
    return cfg, [args.corruption_seed] if spec else []


def _parse_checkpoints(items):
    models, digests = {}, {}
    for item in items:
        tag, sep, path = item.partition("=")
        if not sep or tag not in FORGED_SUBSETS:
            raise UsageError(f"--checkpoint expects SUBSET=PATH with SUBSET in {FORGED_SUBSETS}, got {item!r}")
        if tag in models:
            raise UsageError(f"--checkpoint given twice for {tag}")
        path = _existing(_path(path), f"--checkpoint {tag}")
        models[tag] = Detector.load(path)
        digests[tag] = file_digest(path)
    return models, digests


def cmd_cross_eval(args):
    models, digests = _parse_checkpoints(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    split = _load_split(args.split) if args.split else None
    out = _out(args)
    rows, cols, values = cross_eval(models, manifest, split, args.partition)
    write_matrix_csv(out / "cross_auc.csv", rows, cols, values)
    label = data_label(manifest)
    (out / "cross_auc.json").write_text(
        json.dumps(
            {"rows": rows, "cols": cols, "auc": values.tolist(), "data": label},
            indent=2,
        )
        + "\n"
    )
    cross = off_diagonal_mean(rows, cols, values) if len(rows) > 1 else float("nan")
    print(f"{len(rows)}x{len(cols)} AUC matrix ({label} data); mean cross-subset AUC {cross:.4f}")
    return {"checkpoints": digests, "partition": args.partition}, []


def cmd_report(args):
    matrices = {}
    for item in args.csv:
        path, sep, label = item.partition("=")
        path = _existing(_path(path), "--csv")
        label = label if sep else Path(path).parent.name or Path(path).stem
        if label in matrices:
            raise UsageError(f"duplicate series label {label!r}; use PATH=LABEL")
        matrices[label] = read_matrix_csv(path)
    out = _out(args)
    svg = render_svg(matrices, args.title, args.subtitle)
    (out / "chart.svg").write_text(svg, encoding="utf-8")
    print(f"wrote {out / 'chart.svg'}")
    return {"series": list(matrices), "title": args.title}, []


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="egr-forge", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--out", type=_path, required=True, help="output directory")
        return sp

    def corruption_flags(sp, seed_flag):
        sp.add_argument("--kind", choices=KINDS)
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--radius", type=int)
        sp.add_argument("--quality", type=int)
        sp.add_argument(seed_flag, type=int, default=0, help="base noise seed (image i uses seed ^ i)")

    sp = add("synth", cmd_synth, "generate the synthetic pristine/forged dataset")
    sp.add_argument("--identities", type=int, default=SynthSpec.identities)
    sp.add_argument("--images-per-identity", type=int, default=SynthSpec.images_per_identity)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--texture", type=float, default=SynthSpec.texture)
    sp.add_argument("--signature", type=float, default=SynthSpec.signature)

    sp = add("split", cmd_split, "identity-disjoint train/val/test split")
    sp.add_argument("--manifest", type=_path, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ratios", type=float, nargs=3, default=(0.8, 0.1, 0.1))

    sp = add("edges", cmd_edges, "write edge-graph PNGs for an image or a manifest")
    sp.add_argument("--input", type=_path, required=True, help="image file or manifest .jsonl")
    sp.add_argument("--mode", choices=EDGE_MODES, default="magnitude")
    sp.add_argument("--threshold", type=float, default=0.5, help="binary mode only")

    sp = add("corrupt", cmd_corrupt, "apply one corruption to every image of a manifest")
    sp.add_argument("--manifest", type=_path, required=True)
    corruption_flags(sp, "--seed")

    sp = add("train", cmd_train, "train a detector from a JSON config")
    sp.add_argument("--config", type=_path, required=True)
    sp.add_argument("--manifest", type=_path, required=True)
    sp.add_argument("--split", type=_path, required=True)
    sp.add_argument("--subset", help="train on this forged subset plus pristine images")
    sp.add_argument("--cache", type=_path, help="edge-graph cache directory")

    sp = add("eval", cmd_eval, "score a checkpoint on a manifest")
    sp.add_argument("--checkpoint", type=_path, required=True)
    sp.add_argument("--manifest", type=_path, required=True)
    sp.add_argument("--split", type=_path)
    sp.add_argument("--partition", choices=SPLITS, default="test")
    sp.add_argument("--subset", help="evaluate this forged subset plus pristine images")
    corruption_flags(sp, "--corruption-seed")

    sp = add("cross-eval", cmd_cross_eval, "train-subset x test-subset AUC matrix")
    sp.add_argument("--checkpoint", action="append", required=True, metavar="SUBSET=PATH")
    sp.add_argument("--manifest", type=_path, required=True)
    sp.add_argument("--split", type=_path)
    sp.add_argument("--partition", choices=SPLITS, default="test")

    sp = add("report", cmd_report, "render matrix CSVs as an SVG grouped-bar chart")
    sp.add_argument("--csv", action="append", required=True, metavar="PATH[=LABEL]")
    sp.add_argument("--title", default="Cross-subset AUC (x100)")
    sp.add_argument("--subtitle", default="")

    sp = sub.add_parser("replay", help="re-run a recorded command and compare outputs")
    sp.add_argument("record", type=_path, help="run.json of the original run")
    sp.add_argument("--out", type=_path, required=True)
    sp.set_defaults(func=None)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "edges": cmd_edges,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "eval": cmd_eval,
    "cross-eval": cmd_cross_eval,
    "report": cmd_report,
}


def comparable_digest(path):
    """File digest with wall-clock columns blanked."""
    path = Path(path)
    column = TIMING_COLUMNS.get(path.name)
    if column is None:
        return file_digest(path)
    rows = list(csv.reader(io.StringIO(path.read_text())))
    if rows and column in rows[0]:
        k = rows[0].index(column)
        for r in rows[1:]:
            if len(r) > k:
                r[k] = ""
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def output_digests(out):
    out = Path(out)
    return {
        str(p.relative_to(out)): comparable_digest(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != RUN_RECORD
    }


def execute(command, args):
    """Run one subcommand and write its ``run.json``; returns the record."""
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    config, seeds = COMMANDS[command](args)
    record = {
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "config": config,
        "config_digest": digest(config),
        "seeds": seeds,
        "version": version(),
        "started": started.isoformat(timespec="seconds"),
        "wall_seconds": round(time.perf_counter() - t0, 3),
        "outputs": output_digests(args.out),
    }
    Path(args.out, RUN_RECORD).write_text(json.dumps(record, indent=2, default=list) + "\n")
    return record


def replay(record_path, out):
    """Re-execute a recorded run into ``out``; returns the differing outputs."""
    try:
        record = json.loads(Path(_existing(record_path, "record")).read_text())
        command, args = record["command"], dict(record["args"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{record_path}: not a run record ({exc})") from None
    if command not in COMMANDS:
        raise UsageError(f"{record_path}: unknown command {command!r}")
    args["out"] = out
    new = execute(command, argparse.Namespace(**args))
    old, cur = record["outputs"], new["outputs"]
    return sorted(k for k in set(old) | set(cur) if old.get(k) != cur.get(k))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit with 2
        return int(exc.code or 0)
    try:
        if args.command == "replay":
            diff = replay(args.record, args.out)
            if diff:
                print("replay mismatch: " + ", ".join(diff), file=sys.stderr)
                return 1
            print("replay reproduced all outputs")
            return 0
        execute(args.command, args)
    except INVALID as exc:
        print(f"egr-forge {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError) as exc:
        print(f"egr-forge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"egr-forge {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


run = main


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
