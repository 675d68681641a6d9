"""Localisation metrics: IoU with size buckets, parse policy, dataset reports."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .codec import BBox, GridSpec, scale_box, try_parse_box
from .scene import ManifestRecord, read_ppm


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area."""
    ix = max(0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_bruteforce(a: BBox, b: BBox, canvas: int) -> float:
    """Pixel-counting oracle for integer boxes on a small canvas."""
    xs = np.arange(canvas)[None, :]
    ys = np.arange(canvas)[:, None]
    in_a = (xs >= a.x_min) & (xs < a.x_max) & (ys >= a.y_min) & (ys < a.y_max)
    in_b = (xs >= b.x_min) & (xs < b.x_max) & (ys >= b.y_min) & (ys < b.y_max)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def size_bucket(gt: BBox, image_side: int) -> str:
    """Area-based bucket with thresholds scaled linearly from the 224 reference."""
    s = image_side / 224.0
    low = (32.0 * s) ** 2
    high = (96.0 * s) ** 2
    area = gt.area
    if area <= low:
        return "small"
    if area <= high:
        return "medium"
    return "large"


@dataclass(frozen=True)
class PerSample:
    seed: int
    predicted: tuple[int, int, int, int] | None
    gt: tuple[int, int, int, int]
    iou: float
    bucket: str
    parse_failure: bool


@dataclass
class EvalReport:
    method: str
    dataset_id: str
    n_samples: int
    miou: float
    miou_m: float
    miou_l: float
    miou_s: float
    p_at_03: float
    parse_failures: int
    per_sample: list[PerSample]

    def recompute(self) -> "EvalReport":
        """Re-aggregate from per-sample records (self-consistency check)."""
        return _aggregate(self.method, self.dataset_id, self.per_sample)


def _bucket_mean(samples: list[PerSample], bucket: str) -> float:
    vals = [s.iou for s in samples if s.bucket == bucket]
    return float(np.mean(vals)) if vals else 0.0


def _aggregate(method: str, dataset_id: str, samples: list[PerSample]) -> EvalReport:
    ious = [s.iou for s in samples]
    return EvalReport(
        method=method, dataset_id=dataset_id, n_samples=len(samples),
        miou=float(np.mean(ious)) if ious else 0.0,
        miou_m=_bucket_mean(samples, "medium"),
        miou_l=_bucket_mean(samples, "large"),
        miou_s=_bucket_mean(samples, "small"),
        p_at_03=float(np.mean([s.iou >= 0.3 for s in samples])) if samples else 0.0,
        parse_failures=sum(s.parse_failure for s in samples),
        per_sample=samples)


def evaluate(predictor, records: list[ManifestRecord], grid: GridSpec,
             method: str = "model", dataset_id: str = "eval",
             box_scale: int = 1, image_side: int | None = None) -> EvalReport:
    """Greedy-decode every record; parse failures score IoU 0.

    `box_scale` rescales parsed boxes before scoring (used when coordinates
    are expressed at a smaller base resolution than the evaluated images).
    """
    samples = []
    for r in records:
        image = read_ppm(r.image_path)
        side = image_side or image.shape[0]
        text = predictor(r, image)
        box = try_parse_box(text, grid)
        if box is not None and box_scale != 1:
            box = scale_box(box, box_scale)
        gt = r.target_box
        if box is None:
            samples.append(PerSample(seed=r.seed, predicted=None,
                                     gt=gt.as_tuple(), iou=0.0,
                                     bucket=size_bucket(gt, side),
                                     parse_failure=True))
        else:
            samples.append(PerSample(seed=r.seed, predicted=box.as_tuple(),
                                     gt=gt.as_tuple(), iou=iou(box, gt),
                                     bucket=size_bucket(gt, side),
                                     parse_failure=False))
    return _aggregate(method, dataset_id, samples)


def precision_at(report: EvalReport, tau: float = 0.3) -> float:
    """Fraction of samples with IoU >= tau (inclusive)."""
    if not report.per_sample:
        return 0.0
    return float(np.mean([s.iou >= tau for s in report.per_sample]))


SUMMARY_COLUMNS = ("method", "dataset", "n", "miou", "miou_m", "miou_l",
                   "miou_s", "p_at_0.3", "parse_failures")
DETAIL_COLUMNS = ("seed", "pred", "gt", "iou", "bucket", "parse_failure")


def write_report(report: EvalReport, directory: str, stem: str) -> tuple[str, str]:
    """Summary and per-sample detail as tab-separated UTF-8 files."""
    os.makedirs(directory, exist_ok=True)
    summary_path = os.path.join(directory, f"{stem}_summary.tsv")
    detail_path = os.path.join(directory, f"{stem}_detail.tsv")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(SUMMARY_COLUMNS) + "\n")
        fh.write("\t".join([
            report.method, report.dataset_id, str(report.n_samples),
            f"{report.miou:.4f}", f"{report.miou_m:.4f}", f"{report.miou_l:.4f}",
            f"{report.miou_s:.4f}", f"{report.p_at_03:.4f}",
            str(report.parse_failures)]) + "\n")
    with open(detail_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(DETAIL_COLUMNS) + "\n")
        for s in report.per_sample:
            pred = ",".join(map(str, s.predicted)) if s.predicted else "-"
            gt = ",".join(map(str, s.gt))
            fh.write(f"{s.seed}\t{pred}\t{gt}\t{s.iou:.4f}\t{s.bucket}"
                     f"\t{int(s.parse_failure)}\n")
    return summary_path, detail_path


# --- ablation sweeps ----------------------------------------------------

ABLATION_AXES = ("paste-count", "psi-depth", "background", "o-max",
                 "resolution", "s-embedding")


@dataclass(frozen=True)
class SweepBudget:
    steps: int = 1200
    n_train: int = 1024
    n_eval: int = 192
    batch_size: int = 32


def ablation_sweep(axis: str, vlm, vocab, bank, workspace: str,
                   budget: SweepBudget = SweepBudget(), seed: int = 0,
                   image_side: int = 64, grid_n: int = 16) -> list[dict]:
    """Train one insert per setting of `axis` and evaluate on fixed manifests.

    Returns one row per setting: {"setting", "report"} plus axis-specific
    extra reports (paste-count adds per-eval-bucket columns).
    """
    from .scene import (DatasetConfig, constraints_for, generate_dataset,
                        read_manifest, write_dataset)
    from .trainer import TrainConfig, make_predictor, train
    from .vlm import interpolate_pos_embeddings

    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    os.makedirs(workspace, exist_ok=True)
    grid = GridSpec(image_side, grid_n)
    vocab_path = os.path.join(workspace, "vocab.txt")
    vocab.save(vocab_path)

    def gen(name: str, **kwargs) -> str:
        defaults = dict(n_samples=budget.n_train, seed=seed + 7,
                        image_side=image_side, grid_n=grid_n)
        defaults.update(kwargs)
        cfg = DatasetConfig(**defaults)
        return write_dataset(generate_dataset(bank, cfg), workspace, name)

    def run(label: str, manifest: str, eval_manifests: dict[str, str],
            model=None, box_scale: int = 1, **train_overrides) -> dict:
        tcfg = TrainConfig(method="pin", manifest_path=manifest,
                           vocab_path=vocab_path, steps=budget.steps,
                           batch_size=budget.batch_size, seed=seed,
                           image_side=image_side, grid_n=grid_n,
                           **train_overrides)
        result = train(model or vlm, tcfg, vocab=vocab)
        predictor = make_predictor(model or vlm, vocab, grid,
                                   method=result.checkpoint.method)
        row = {"setting": label}
        for tag, mpath in eval_manifests.items():
            report = evaluate(predictor, read_manifest(mpath), grid,
                              method=f"pin[{label}]", dataset_id=tag,
                              box_scale=box_scale)
            row[tag] = report
        return row

    rows = []
    if axis == "paste-count":
        evals = {f"le{a}": gen(f"eval_a{a}", n_samples=budget.n_eval,
                               seed=seed + 100 + a, categories="heldout",
                               constraints=constraints_for(a))
                 for a in (3, 4, 5)}
        for a_max in (2, 3, 4, 5):
            manifest = gen(f"train_a{a_max}", constraints=constraints_for(a_max))
            rows.append(run(f"a_max={a_max}", manifest, evals))
    elif axis == "psi-depth":
        manifest = gen("train_depth")
        evals = {"heldout": gen("eval_depth", n_samples=budget.n_eval,
                                seed=seed + 100, categories="heldout")}
        for depth in (1, 2, 3):
            rows.append(run(f"depth={depth}", manifest, evals, pin_depth=depth))
    elif axis == "background":
        evals = {"heldout": gen("eval_bg", n_samples=budget.n_eval,
                                seed=seed + 100, categories="heldout")}
        for kind in ("textured", "plain-white"):
            manifest = gen(f"train_bg_{kind}", background=kind)
            rows.append(run(f"background={kind}", manifest, evals))
    elif axis == "o-max":
        evals = {"heldout": gen("eval_omax", n_samples=budget.n_eval,
                                seed=seed + 100, categories="heldout")}
        for o_max in (0.0, 0.5):
            manifest = gen(f"train_omax{int(o_max * 10)}",
                           constraints=constraints_for(3, o_max=o_max))
            rows.append(run(f"o_max={o_max}", manifest, evals))
    elif axis == "resolution":
        for factor in (1, 2):
            side = image_side * factor
            model = vlm
            if factor > 1:
                _, model = interpolate_pos_embeddings(vlm, factor)
            manifest = gen(f"train_x{factor}", image_side=side,
                           coord_factor=factor)
            evals = {"heldout": gen(f"eval_x{factor}", n_samples=budget.n_eval,
                                    seed=seed + 100, categories="heldout",
                                    image_side=side, coord_factor=factor)}
            rows.append(run(f"resolution=x{factor}", manifest, evals,
                            model=model, box_scale=factor))
    elif axis == "s-embedding":
        manifest = gen("train_semb")
        evals = {"heldout": gen("eval_semb", n_samples=budget.n_eval,
                                seed=seed + 100, categories="heldout")}
        for variant in ("sinusoidal", "learned-S"):
            rows.append(run(f"S={variant}", manifest, evals, pin_variant=variant))
    return rows


def sweep_table(rows: list[dict]) -> str:
    """Render sweep rows as a tab-separated comparison table."""
    if not rows:
        return ""
    tags = [k for k in rows[0] if k != "setting"]
    lines = ["\t".join(["setting"] + [f"miou[{t}]" for t in tags])]
    for row in rows:
        cells = [row["setting"]] + [f"{row[t].miou:.4f}" for t in tags]
        lines.append("\t".join(cells))
    return "\n".join(lines)
