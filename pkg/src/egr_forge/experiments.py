"""Evaluation protocols, report files and run provenance."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .corruptions import Corruption
from .manifest import FORGED_SUBSETS, load_images
from .metrics import accuracy, auc, image_fid, pooled_gray_embedder, psnr
from .training import to_nchw

SYNTH_MARKER = "synth.json"


def version():
    try:
        from importlib.metadata import version as _v

        return _v("artifact")
    except Exception:  # pragma: no cover - not installed
        from . import __version__

        return __version__


def digest(obj):
    """sha256 of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def data_label(manifest):
    """``"synthetic"`` for generator output, else ``"external"``."""
    return "synthetic" if (manifest.root / SYNTH_MARKER).exists() else "external"


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


def score_images(model, images):
    return model.predict_scores(to_nchw(images))


def evaluate(model, manifest, corruption=None, corruption_seed=0, embedder=pooled_gray_embedder):
    """Score every sample of ``manifest`` and summarize.

    Returns a dict with ``auc``, ``accuracy``, ``n_pos``, ``n_neg``,
    ``embedder`` and ``data``. ``fid`` (pristine vs forged images) is added
    when both classes have at least two images; ``psnr_stats`` (clean vs
    corrupted) when a corruption is applied.
    """
    clean = load_images(manifest)
    labels = manifest.labels
    images = clean
    report = {}
    if corruption is not None:
        images = Corruption(
            corruption.kind, corruption.sigma, corruption.radius, corruption.quality, corruption_seed
        ).transform(clean)
        values = [psnr(a, b) for a, b in zip(clean, images)]
        finite = [v for v in values if math.isfinite(v)]
        report["psnr_stats"] = {
            "mean": _finite(float(np.mean(finite))) if finite else None,
            "min": _finite(min(values)),
            "max": _finite(max(values)),
            "n_identical": len(values) - len(finite),
        }
        report["corruption"] = corruption.to_dict()
    scores = score_images(model, images)
    report.update(
        auc=auc(scores, labels),
        accuracy=accuracy(scores, labels),
        n_pos=int(labels.sum()),
        n_neg=int(len(labels) - labels.sum()),
        embedder=getattr(embedder, "label", getattr(embedder, "__name__", "custom")),
        data=data_label(manifest),
    )
    pos, neg = images[labels == 1], images[labels == 0]
    if len(pos) >= 2 and len(neg) >= 2:
        report["fid"] = image_fid(neg, pos, embedder)
    return report


def subset_with_pristine(manifest, subset):
    return manifest.subset((subset, "REAL"))


def cross_eval(models, manifest, split=None, partition="test", subsets=FORGED_SUBSETS):
    """AUC matrix of each trained model on each subset's test partition.

    ``models`` maps train-subset tag to detector. Row ``i`` is the model
    trained on ``subsets[i]``, column ``j`` the test subset; every test set
    is that subset's forged images plus the pristine images.
    """
    rows = [s for s in subsets if s in models]
    if split is not None:
        manifest = manifest.select_split(split, partition)
    tests = {}
    for col in subsets:
        m = subset_with_pristine(manifest, col)
        tests[col] = (load_images(m), m.labels)
    values = np.empty((len(rows), len(subsets)))
    for i, row in enumerate(rows):
        for j, col in enumerate(subsets):
            images, labels = tests[col]
            values[i, j] = auc(score_images(models[row], images), labels)
    return rows, list(subsets), values


def write_matrix_csv(path, rows, cols, values):
    """Rows are train subsets, columns test subsets, cells AUC x 100 (2 dp)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train\\test"] + list(cols))
        for r, line in zip(rows, values):
            w.writerow([r] + [f"{100.0 * v:.2f}" for v in line])


def read_matrix_csv(path):
    with open(path, newline="") as fh:
        table = [line for line in csv.reader(fh) if line]
    if len(table) < 2 or len(table[0]) < 2:
        raise ValueError(f"{path}: not a matrix CSV")
    cols = table[0][1:]
    rows, values = [], []
    for n, line in enumerate(table[1:], start=2):
        if len(line) != len(cols) + 1:
            raise ValueError(f"{path}:{n}: expected {len(cols) + 1} cells, got {len(line)}")
        rows.append(line[0])
        try:
            values.append([float(v) for v in line[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    return rows, cols, np.array(values)


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_risk", "val_auc", "seconds"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_risk"])), repr(float(h["val_auc"])), f"{h['seconds']:.3f}"])


PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1")


def render_svg(matrices, title="AUC (x100)", subtitle=""):
    """Standalone grouped-bar SVG.

    ``matrices`` maps a series name to ``(rows, cols, values)``. A single
    matrix groups by row with one bar per column; several matrices group by
    (row, column) cell with one bar per matrix.
    """
    if not matrices:
        raise ValueError("nothing to plot")
    names = list(matrices)
    if len(names) == 1:
        rows, cols, values = matrices[names[0]]
        groups = list(rows)
        series = list(cols)
        data = np.asarray(values, dtype=float)
    else:
        rows, cols, _ = matrices[names[0]]
        for n in names[1:]:
            r, c, _ = matrices[n]
            if list(r) != list(rows) or list(c) != list(cols):
                raise ValueError(f"matrix {n!r} has different rows/columns")
        groups = [f"{r}→{c}" for r in rows for c in cols]
        series = names
        data = np.column_stack([np.asarray(matrices[n][2], dtype=float).ravel() for n in names])

    bar, gap, left, top, height = 12, 14, 50, 50, 220
    width = left + len(groups) * (len(series) * bar + gap) + 20
    legend_y = top + height + 55
    total_h = legend_y + 20 * len(series) + 10
    peak = max(100.0, float(np.nanmax(data))) if data.size else 100.0

    def y(v):
        return top + height * (1 - v / peak)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" '
        f'font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{total_h}" fill="white"/>',
        f'<text x="{left}" y="20" font-size="14">{escape(title)}</text>',
    ]
    if subtitle:
        out.append(f'<text x="{left}" y="36" fill="#555">{escape(subtitle)}</text>')
    for tick in range(0, int(peak) + 1, 25):
        ty = y(tick)
        out.append(f'<line x1="{left}" x2="{width - 10}" y1="{ty:.1f}" y2="{ty:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{ty + 4:.1f}" text-anchor="end">{tick}</text>')
    x = left + gap / 2
    for g, label in enumerate(groups):
        for s in range(len(series)):
            v = data[g, s]
            if np.isfinite(v):
                out.append(
                    f'<rect x="{x + s * bar:.1f}" y="{y(v):.1f}" width="{bar - 1}" '
                    f'height="{top + height - y(v):.1f}" fill="{PALETTE[s % len(PALETTE)]}">'
                    f"<title>{escape(str(series[s]))} {escape(label)}: {v:.2f}</title></rect>"
                )
        cx = x + len(series) * bar / 2
        out.append(
            f'<text x="{cx:.1f}" y="{top + height + 14}" text-anchor="end" '
            f'transform="rotate(-40 {cx:.1f} {top + height + 14})">{escape(label)}</text>'
        )
        x += len(series) * bar + gap
    out.append(f'<line x1="{left}" x2="{width - 10}" y1="{top + height}" y2="{top + height}" stroke="black"/>')
    for s, name in enumerate(series):
        ly = legend_y + 20 * s
        out.append(f'<rect x="{left}" y="{ly - 10}" width="12" height="12" fill="{PALETTE[s % len(PALETTE)]}"/>')
        out.append(f'<text x="{left + 18}" y="{ly}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def outputs_digest(out_dir, exclude=("run.json",)):
    """sha256 of every file under ``out_dir`` keyed by relative path."""
    out_dir = Path(out_dir)
    return {
        str(p.relative_to(out_dir)): file_digest(p)
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and p.name not in exclude
    }


def off_diagonal_mean(rows, cols, values):
    """Mean of the cells whose train and test subsets differ."""
    mask = np.array(rows)[:, None] != np.array(cols)[None, :]
    return float(np.asarray(values)[mask].mean())


def cross_subset_study(manifest, seeds, lams=(0.0, 0.5), epochs=8, subsets=FORGED_SUBSETS, **config):
    """Train one detector per (seed, lambda, subset) and cross-evaluate.

    For every seed the identities are split 8:1:1 with that seed and each
    subset's detector is trained (seeded the same way) on that subset plus
    the pristine images. Returns ``{lam: [(rows, cols, values) per seed]}``.
    """
    from .manifest import identity_disjoint_split
    from .training import TrainConfig, train

    results = {lam: [] for lam in lams}
    for seed in seeds:
        split = identity_disjoint_split(manifest, seed=seed)
        for lam in lams:
            cfg = TrainConfig(lam=lam, epochs=epochs, seed=seed, **config)
            models = {s: train(subset_with_pristine(manifest, s), split, cfg)[0] for s in subsets}
            results[lam].append(cross_eval(models, manifest, split, "test", subsets))
    return results
