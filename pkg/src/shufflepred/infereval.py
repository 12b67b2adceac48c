"""Prediction rollouts, per-horizon PSNR/SSIM, CSV/JSON reports and frame grids."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .formats import encode_pgm, write_csv
from .losses import Batch
from .model import ModelBundle, inference
from .synthdata import to_uint8
from .trainer import ClipData

PSNR_CAP = 100.0
CSV_COLUMNS = ("clip_id", "horizon", "psnr_db", "ssim")


def psnr(pred, gt, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical images."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not max_val > 0:
        raise ValueError(f"max_val must be positive, got {max_val}")
    err = float(np.mean((pred - gt) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val ** 2 / err)))


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def fit_window(height: int, width: int, window: int = 11) -> int:
    """Largest odd window <= ``window`` that fits the image."""
    w = min(window, height, width)
    return w if w % 2 == 1 else w - 1


def ssim(pred, gt, window: int = 11, K1: float = 0.01, K2: float = 0.03, L: float = 1.0,
         sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian-weighted windows."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(f"expected equal 2-D images, got {x.shape} vs {y.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if window > min(x.shape):
        raise ValueError(f"window {window} larger than image {x.shape}")
    kernel = gaussian_window(window, sigma)
    C1, C2 = (K1 * L) ** 2, (K2 * L) ** 2

    def filt(img):
        patches = np.lib.stride_tricks.sliding_window_view(img, (window, window))
        return np.einsum("ijkl,kl->ij", patches, kernel)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (sxx + syy + C2)
    return float(np.mean(num / den))


@dataclass
class MetricSeries:
    clip_ids: list[int]
    psnr: np.ndarray   # (clips, k)
    ssim: np.ndarray   # (clips, k)

    def __post_init__(self):
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        self.ssim = np.asarray(self.ssim, dtype=np.float64)
        if self.psnr.shape != self.ssim.shape or self.psnr.shape[0] != len(self.clip_ids):
            raise ValueError("metric arrays disagree in shape")

    @property
    def horizons(self) -> list[int]:
        return list(range(1, self.psnr.shape[1] + 1))

    def per_horizon(self) -> list[dict]:
        out = []
        for i, h in enumerate(self.horizons):
            p, s = self.psnr[:, i], self.ssim[:, i]
            out.append({
                "horizon": h,
                "psnr_mean": float(p.mean()), "psnr_std": float(p.std()), "psnr_median": float(np.median(p)),
                "ssim_mean": float(s.mean()), "ssim_std": float(s.std()), "ssim_median": float(np.median(s)),
            })
        return out

    def rows(self):
        for c, cid in enumerate(self.clip_ids):
            for i, h in enumerate(self.horizons):
                yield (int(cid), h, float(self.psnr[c, i]), float(self.ssim[c, i]))

    def summary(self) -> dict:
        return {"clips": len(self.clip_ids), "horizons": len(self.horizons), "per_horizon": self.per_horizon()}


Predictor = Callable[[Batch], torch.Tensor]


def bundle_predictor(bundle: ModelBundle) -> Predictor:
    def predict(batch: Batch) -> torch.Tensor:
        with inference(bundle):
            return bundle.rollout(batch.context_frames, batch.context_flows, batch.k)
    return predict


def oracle_predictor(batch: Batch) -> torch.Tensor:
    return batch.targets


def predict_frames(predictor, data: ClipData, t: int, k: int, chunk: int = 64) -> np.ndarray:
    """Run ``predictor`` over every clip -> (N, k, H, W) float array."""
    if data.frames.shape[1] < t + k:
        raise ValueError(f"clips have {data.frames.shape[1]} frames, need t + k = {t + k}")
    if isinstance(predictor, ModelBundle):
        cfg = predictor.cfg
        if (cfg.height, cfg.width) != tuple(data.frames.shape[-2:]) or cfg.context != t:
            raise ValueError(f"checkpoint expects {cfg.height}x{cfg.width} frames and t={cfg.context}, "
                             f"data has {tuple(data.frames.shape[-2:])} and t={t}")
        predictor = bundle_predictor(predictor)
    outs = []
    for start in range(0, len(data), chunk):
        batch = data.batch(np.arange(start, min(start + chunk, len(data))), t, k)
        outs.append(predictor(batch).detach().cpu().numpy().reshape(len(batch.frames), k, *data.frames.shape[-2:]))
    return np.concatenate(outs)


def evaluate(predictor, data: ClipData, t: int, k: int, out_dir: str | Path | None = None,
             window: int = 11) -> MetricSeries:
    """Per-clip, per-horizon PSNR/SSIM of predictions against the ground-truth futures.

    ``predictor`` is a ModelBundle, a callable taking a :class:`Batch`, or a
    mapping clip_id -> (k, H, W) array of stored predictions.
    """
    if data.frames.shape[1] < t + k:
        raise ValueError(f"clips have {data.frames.shape[1]} frames, need t + k = {t + k}")
    if isinstance(predictor, Mapping):
        missing = [c for c in data.clip_ids if c not in predictor]
        if missing:
            raise ValueError(f"no stored predictions for clips {missing[:5]}")
        preds = np.stack([np.asarray(predictor[c], dtype=np.float64).reshape(-1, *data.frames.shape[-2:])[:k]
                          for c in data.clip_ids])
        if preds.shape[1] != k:
            raise ValueError(f"stored predictions have {preds.shape[1]} frames, need {k}")
    else:
        preds = predict_frames(predictor, data, t, k)
    gts = data.frames[:, t : t + k, 0].numpy()
    win = fit_window(*gts.shape[-2:], window)
    p = np.array([[psnr(preds[c, i], gts[c, i]) for i in range(k)] for c in range(len(data))])
    s = np.array([[ssim(preds[c, i], gts[c, i], window=win) for i in range(k)] for c in range(len(data))])
    series = MetricSeries(list(data.clip_ids), p, s)
    if out_dir is not None:
        write_metrics(series, out_dir)
    return series


def write_metrics(series: MetricSeries, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "metrics.csv", CSV_COLUMNS, series.rows())
    (out_dir / "summary.json").write_text(json.dumps(series.summary(), indent=2) + "\n", encoding="utf-8")


def context_indices(t: int, samples: int = 3) -> list[int]:
    return [int(i) for i in np.linspace(0, t - 1, min(samples, t)).astype(int)]


def grid_image(context, predictions, ground_truth, gutter: int = 2, context_samples: int = 3) -> np.ndarray:
    """Tile context (subsampled), ground truth and predictions into one uint8 image."""
    context = np.asarray(context, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    shapes = {a.shape[1:] for a in (context, predictions, ground_truth)}
    if len(shapes) != 1 or predictions.shape != ground_truth.shape:
        raise ValueError("context, predictions and ground truth must share frame size (and future length)")
    h, w = context.shape[1:]
    rows = [context[context_indices(len(context), context_samples)], ground_truth, predictions]
    cols = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + gutter), cols * (w + gutter)), 255, dtype=np.uint8)
    for r, frames in enumerate(rows):
        for c, frame in enumerate(frames):
            y, x = r * (h + gutter), c * (w + gutter)
            grid[y : y + h, x : x + w] = to_uint8(frame)
    return grid


def render_grid(context, predictions, ground_truth, path: str | Path, gutter: int = 2,
                context_samples: int = 3) -> np.ndarray:
    grid = grid_image(context, predictions, ground_truth, gutter, context_samples)
    path = Path(path)
    try:
        if path.suffix.lower() == ".png":
            from PIL import Image

            Image.fromarray(grid, mode="L").save(path, format="PNG", optimize=False)
        else:
            path.write_bytes(encode_pgm(grid))
    except OSError as exc:
        raise OSError(f"cannot write grid image {path}: {exc}") from exc
    return grid
