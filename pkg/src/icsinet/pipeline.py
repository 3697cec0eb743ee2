"""Training, evaluation, inference and agreement reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Sample, atomic_write_text, load_records, load_samples, read_image, write_json, write_png
from .errors import ConfigError, DegenerateTestError, InputError, NumericalError
from .imgproc import augment, preprocess
from .losses import loss_terms
from .metrics import (
    CLASSES,
    error_histogram,
    histogram_csv,
    iou,
    pairwise_agreement,
    render_table,
    report_csv,
    tip_distance,
    welch_t_test,
)
from .model import Model, build_model, param_count
from .nn_ops import grid_to_norm, norm_to_grid
from .optim import OptimState, diffgrad_step
from .tensor import Tensor, backward, no_grad, zero_grads

log = logging.getLogger(__name__)

REFERENCE_SIZE = 512  # tip errors are also reported on a 512-pixel frame
MASK_THRESHOLD = 0.5
LOSS_FIELDS = ("step", "epoch", "lr", "seg", "euc", "js", "total")
VAL_FIELDS = ("step", "epoch", "oolemma_iou", "pipette_iou", "tip_px", "score", "best")


def worker_count() -> int:
    """Worker cap from ``ICSINET_THREADS`` (default: all cores)."""
    raw = os.environ.get("ICSINET_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ICSINET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ICSINET_THREADS must be a positive integer, got {raw!r}")
    return n


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return f"{v:.9g}" if isinstance(v, float) else str(v)


# --- batching -----------------------------------------------------------------------
def to_batch(samples: list[Sample], dtype=np.float32):
    """Images scaled to [0, 1] as [N,1,S,S], masks [N,C,S,S], tips normalized [N,2]."""
    size = samples[0].image.shape[0]
    dtype = np.dtype(dtype)
    x = np.stack([s.image for s in samples]).astype(dtype)[:, None] / dtype.type(255)
    masks = np.stack([s.masks for s in samples]).astype(dtype)
    tips = np.stack([grid_to_norm(np.asarray(s.tip, dtype=np.float64), size) for s in samples])
    return Tensor(x), masks, tips


class BatchStream:
    """Epoch-wise seeded permutations laid end to end and cut into batches."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, epoch]).permutation(self.n)}
        return self._perms[epoch]

    def indices(self, step: int) -> list[int]:
        start = step * self.batch_size
        return [int(self._perm(k // self.n)[k % self.n]) for k in range(start, start + self.batch_size)]


# --- evaluation ------------------------------------------------------------------------------
@dataclass
class FrameResult:
    id: str
    iou: dict[str, float]
    tip_px: float
    tip_px_ref: float
    heatmap_max: float
    pred_tip: tuple[float, float]


@dataclass
class EvalResult:
    frames: list[FrameResult] = field(default_factory=list)
    latency_ms: float = 0.0

    def _stat(self, values):
        arr = np.sort(np.asarray(values, dtype=np.float64))
        return (float(arr.mean()), float(arr.std())) if arr.size else (math.nan, math.nan)

    def iou_stats(self, cls) -> tuple[float, float]:
        return self._stat([f.iou[cls] for f in self.frames])

    def tip_stats(self, ref: bool = False) -> tuple[float, float]:
        return self._stat([f.tip_px_ref if ref else f.tip_px for f in self.frames])

    def summary(self) -> dict:
        out = {"frames": len(self.frames)}
        for cls in CLASSES:
            out[f"{cls}_iou_mean"], out[f"{cls}_iou_std"] = self.iou_stats(cls)
        out["tip_px_mean"], out["tip_px_std"] = self.tip_stats()
        out["tip_px_ref_mean"], out["tip_px_ref_std"] = self.tip_stats(ref=True)
        return out


def predict(model: Model, x: Tensor):
    with no_grad():
        out = model(x, training=False)
    return out.seg.data, out.heatmap.data, out.coords.data


def evaluate(model: Model, samples: list[Sample], batch_size: int = 1) -> EvalResult:
    """Eval-mode metrics; running statistics are left untouched."""
    res = EvalResult()
    size = model.cfg.input_size
    ref = REFERENCE_SIZE / size
    elapsed = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x, _, _ = to_batch(chunk, model.dtype)
        t0 = time.perf_counter()
        seg, heat, coords = predict(model, x)
        elapsed += time.perf_counter() - t0
        for k, smp in enumerate(chunk):
            pred = norm_to_grid(coords[k].astype(np.float64), size)
            d = tip_distance(pred, smp.tip)
            res.frames.append(
                FrameResult(
                    id=smp.id,
                    iou={c: float(iou(seg[k, i] > MASK_THRESHOLD, smp.masks[i])) for i, c in enumerate(CLASSES)},
                    tip_px=d,
                    tip_px_ref=d * ref,
                    heatmap_max=float(heat[k].max()),
                    pred_tip=(float(pred[0]), float(pred[1])),
                )
            )
    res.latency_ms = 1000.0 * elapsed / max(1, len(samples))
    return res


def selection_score(ev: EvalResult) -> float:
    """Best-checkpoint criterion: mean IoU minus a small penalty per pixel of tip error."""
    return float(np.mean([ev.iou_stats(c)[0] for c in CLASSES]) - 0.01 * ev.tip_stats()[0])


# --- training ------------------------------------------------------------------------------
@dataclass
class TrainResult:
    steps: int
    best_step: int | None
    best_score: float | None
    last_eval: dict | None
    out_dir: Path


def _load_split(cfg: RunConfig, key: str, strict: bool = False) -> list[Sample]:
    directory = cfg.data.require(key)
    samples, missing = load_samples(directory, cfg.model.input_size, cfg.preprocess, cfg.data.split_for(key), strict=strict)
    if not samples:
        raise InputError(f"data.{key}: no annotated samples found in {directory}")
    return samples


def train(cfg: RunConfig, out_dir, on_eval=None) -> TrainResult:
    """Run the seeded training loop and write logs and checkpoints to ``out_dir``.

    Files: ``config.json``, ``loss_log.csv`` (one row per step),
    ``val_metrics.csv`` (one row per evaluation), ``best.ckpt`` (written
    when the validation score improves) and ``last.ckpt``.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = _load_split(cfg, "train_dir")
    val_set = _load_split(cfg, "val_dir")
    tc = cfg.train
    atomic_write_text(out / "config.json", cfg.to_json())

    model = build_model(cfg.model)
    params = model.parameters()
    state = OptimState.zeros_like(params)
    log.info("model: %d parameters; %d train / %d val samples", param_count(model), len(train_set), len(val_set))

    stream = BatchStream(len(train_set), tc.batch_size, tc.seed)
    loss_rows: list[list] = []
    val_rows: list[list] = []
    best_score, best_step, last_eval = None, None, None

    def flush():
        atomic_write_text(out / "loss_log.csv", csv_text(LOSS_FIELDS, loss_rows))
        atomic_write_text(out / "val_metrics.csv", csv_text(VAL_FIELDS, val_rows))

    def aug(args):
        step, slot, idx = args
        rng = np.random.default_rng([cfg.augment.seed, tc.seed, step, slot])
        return augment(train_set[idx], cfg.augment, rng)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for step in range(tc.max_steps):
            idx = stream.indices(step)
            batch = list(pool.map(aug, [(step, k, i) for k, i in enumerate(idx)]))
            x, masks, tips = to_batch(batch)
            zero_grads(params)
            terms = loss_terms(model(x, training=True), masks, tips, cfg.loss)
            total = terms["total"]
            if not np.isfinite(total.item()):
                ids = [train_set[i].id for i in idx]
                write_json(out / "nan_dump.json", {"step": step, "sample_ids": ids, "terms": {k: float(v.item()) for k, v in terms.items()}})
                flush()
                raise NumericalError(f"non-finite loss at step {step}; batch sample ids {ids} (details in {out / 'nan_dump.json'})")
            backward(total)
            lr = cfg.optim.lr_at(step, tc.max_steps)
            diffgrad_step(params, [p.grad for p in params], state, cfg.optim, lr)
            epoch = (step + 1) * tc.batch_size / len(train_set)
            loss_rows.append([step + 1, f"{epoch:.4f}", _fmt(lr)] + [_fmt(terms[k].item()) for k in ("seg", "euc", "js", "total")])

            if (step + 1) % tc.eval_every == 0 or step + 1 == tc.max_steps:
                ev = evaluate(model, val_set, batch_size=tc.batch_size)
                score = selection_score(ev)
                improved = best_score is None or score > best_score
                if improved:
                    best_score, best_step = score, step + 1
                    save_checkpoint(out / "best.ckpt", model, state, cfg, step + 1)
                last_eval = ev.summary()
                val_rows.append(
                    [step + 1, f"{epoch:.4f}"]
                    + [_fmt(ev.iou_stats(c)[0]) for c in CLASSES]
                    + [_fmt(ev.tip_stats()[0]), _fmt(score), int(improved)]
                )
                flush()
                if on_eval is not None:
                    on_eval(step + 1, last_eval)
    save_checkpoint(out / "last.ckpt", model, state, cfg, tc.max_steps)
    flush()
    return TrainResult(tc.max_steps, best_step, best_score, last_eval, out)


# --- eval command ---------------------------------------------------------------------------
def eval_report_text(ev: EvalResult, size: int) -> str:
    s = ev.summary()
    lines = [
        f"frames evaluated: {s['frames']}",
        f"mask threshold: {MASK_THRESHOLD}",
        "segmentation IoU, mean (population std):",
    ]
    lines += [f"  {c:<8} {s[f'{c}_iou_mean']:.4f} ({s[f'{c}_iou_std']:.4f})" for c in CLASSES]
    lines.append("needle tip error in pixels, mean (population std):")
    lines.append(f"  at {size}px input      {s['tip_px_mean']:.3f} ({s['tip_px_std']:.3f})")
    lines.append(f"  at {REFERENCE_SIZE}px reference  {s['tip_px_ref_mean']:.3f} ({s['tip_px_ref_std']:.3f})")
    return "\n".join(lines) + "\n"


def cmd_eval(ckpt_path, data_dir, out_dir, bin_width: float = 1.0) -> EvalResult:
    """Evaluate a checkpoint; latency goes to ``timing.json`` so the report stays reproducible."""
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.config
    model = ckpt.build_model()
    samples, missing = load_samples(data_dir, cfg.model.input_size, cfg.preprocess, strict=False)
    if not samples:
        raise InputError(f"no annotated samples in {data_dir}")
    ev = evaluate(model, samples, batch_size=1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = ev.summary() | {"skipped_without_annotation": missing, "checkpoint_step": ckpt.step}
    write_json(out / "report.json", summary)
    atomic_write_text(out / "report.txt", eval_report_text(ev, cfg.model.input_size))
    rows = [
        [f.id] + [_fmt(f.iou[c]) for c in CLASSES] + [_fmt(f.tip_px), _fmt(f.tip_px_ref), _fmt(f.pred_tip[0]), _fmt(f.pred_tip[1]), _fmt(f.heatmap_max)]
        for f in ev.frames
    ]
    header = ["id"] + [f"{c}_iou" for c in CLASSES] + ["tip_px", f"tip_px_{REFERENCE_SIZE}", "pred_x", "pred_y", "heatmap_max"]
    atomic_write_text(out / "per_frame.csv", csv_text(header, rows))
    hist = error_histogram([f.tip_px_ref for f in ev.frames], bin_width)
    atomic_write_text(out / "tip_histogram.csv", histogram_csv(hist))
    write_json(out / "timing.json", {"mean_latency_ms": ev.latency_ms, "frames": len(ev.frames), "batch_size": 1})
    if missing:
        log.warning("%d frame(s) without annotations skipped: %s", len(missing), ", ".join(missing))
    return ev


# --- inference ------------------------------------------------------------------------------------
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
TINTS = {"background": (40, 60, 200), "oolemma": (150, 60, 200), "pipette": (160, 160, 160)}
TIP_COLOR = (255, 230, 0)


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating 0-runs and 1-runs, starting with zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    flat = np.zeros(int(np.prod(rle["size"])), dtype=np.uint8)
    pos, val = 0, 0
    for c in rle["counts"]:
        flat[pos : pos + c] = val
        pos, val = pos + c, 1 - val
    return flat.reshape(rle["size"])


def overlay(image: np.ndarray, masks: np.ndarray, tip, alpha: float = 0.4) -> np.ndarray:
    """RGB overlay: class tints over the grayscale frame and a dot at the tip."""
    base = np.repeat(image[..., None].astype(np.float64), 3, axis=2)
    tint = np.empty_like(base)
    tint[...] = TINTS["background"]
    for i, cls in enumerate(CLASSES):
        tint[masks[i] > 0] = TINTS[cls]
    rgb = (1 - alpha) * base + alpha * tint
    size = image.shape[0]
    r = max(1.5, size / 128 * 2)
    yy, xx = np.mgrid[0:size, 0:size]
    rgb[(xx - tip[0]) ** 2 + (yy - tip[1]) ** 2 <= r * r] = TIP_COLOR
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def infer_image(model: Model, cfg: RunConfig, raw: np.ndarray):
    size = cfg.model.input_size
    img = preprocess(raw, size, cfg.preprocess)
    x = Tensor(img.astype(model.dtype)[None, None] / model.dtype.type(255))
    seg, heat, coords = predict(model, x)
    masks = (seg[0] > MASK_THRESHOLD).astype(np.uint8)
    norm = coords[0].astype(np.float64)
    tip = norm_to_grid(norm, size)
    h0, w0 = raw.shape[:2]
    tip_orig = ((tip[0] + 0.5) * w0 / size - 0.5, (tip[1] + 0.5) * h0 / size - 0.5)
    result = {
        "input_size": size,
        "mask_threshold": MASK_THRESHOLD,
        "masks": {c: rle_encode(masks[i]) for i, c in enumerate(CLASSES)},
        "tip_normalized": [float(norm[0]), float(norm[1])],
        "tip_px": [float(tip[0]), float(tip[1])],
        "tip_px_original": [float(tip_orig[0]), float(tip_orig[1])],
        "original_size": [int(w0), int(h0)],
        "heatmap_max": float(heat[0].max()),
    }
    return result, overlay(img, masks, tip)


def cmd_infer(ckpt_path, input_path, out_dir) -> tuple[list[str], list[str]]:
    """Returns (written stems, failures); a failed image never stops the batch."""
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.build_model()
    src = Path(input_path)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    elif src.exists():
        files = [src]
    else:
        raise InputError(f"input does not exist: {src}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done, failed = [], []
    for f in files:
        try:
            result, rgb = infer_image(model, ckpt.config, read_image(f))
        except InputError as exc:
            log.error("%s", exc)
            failed.append(str(f))
            continue
        result["source"] = f.name
        write_json(out / f"{f.stem}.json", result)
        write_png(out / f"{f.stem}_overlay.png", rgb)
        done.append(f.stem)
    return done, failed


# --- agreement ------------------------------------------------------------------------------------
def welch_p_values(inter, intra) -> dict[str, str]:
    out = {}
    a_stats, b_stats = inter.statistics(), intra.statistics()
    for stat in a_stats:
        try:
            out[stat] = f"{welch_t_test(a_stats[stat], b_stats[stat]).p:.4f}"
        except DegenerateTestError:
            out[stat] = "degenerate"
    return out


def cmd_agreement(annotations_dir, mode: str, out_dir) -> tuple[dict, dict | None]:
    if mode not in ("inter", "intra", "both"):
        raise InputError(f"mode must be inter, intra or both, got {mode!r}")
    records = load_records(annotations_dir)
    modes = ("inter", "intra") if mode == "both" else (mode,)
    reports = {m: pairwise_agreement(records, m) for m in modes}
    p_values = welch_p_values(reports["inter"], reports["intra"]) if mode == "both" else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = render_table(reports, p_values)
    if p_values is not None:
        text += "p: two-sided Welch t-test, interoperator vs intraoperator values; 'degenerate' when both have zero variance\n"
    atomic_write_text(out / "agreement.txt", text)
    atomic_write_text(out / "agreement.csv", report_csv(reports, p_values))
    return reports, p_values
