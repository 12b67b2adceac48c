"""Acceptance checks, one test per criterion.

Each test appends a ``criterion N: PASS|FAIL ...`` line that pytest prints in
its terminal summary. Running this file directly prints the same lines.
"""
import copy
import math
import struct
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, GOLDEN
from helpers import GRAD_CFG, finite_difference_check, tiny_batch, tiny_bundle
from shufflepred.cli import main as cli_main
from shufflepred.flowest import BlockParams, estimate_flow
from shufflepred.formats import decode_flo, decode_pgm, encode_flo, encode_pgm, read_checkpoint, write_checkpoint
from shufflepred.infereval import evaluate, fit_window, psnr, ssim
from shufflepred.losses import adversarial_losses, consistency_loss, make_shuffle_sample, shuffle_loss
from shufflepred.model import ModelBundle
from shufflepred.presets import preset
from shufflepred.synthdata import SynthConfig, analytic_flow, forward_warp, generate_dataset, render_frame, simulate, sprite_mask
from shufflepred.trainer import STAGES, TrainLog, evaluate_order_accuracy, prepare_data, train_stage


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="module")
def micro():
    p = preset("micro")
    clips, flows, _ = generate_dataset(p["synth"], 200, seed=1)
    train = prepare_data(clips, flows, "analytic", p["synth"].flow_bound)
    clips, flows, _ = generate_dataset(p["synth"], 50, seed=2)
    test = prepare_data(clips, flows, "analytic", p["synth"].flow_bound)
    return p, train, test


# ------------------------------------------------------------------ 1

def test_criterion_1_loss_oracles():
    t0 = time.perf_counter()
    half = lambda x: torch.full((x.shape[0],), 0.5, dtype=torch.float64)  # noqa: E731
    seq = torch.randn(4, 3, 5, dtype=torch.float64)
    shuf = shuffle_loss(half, make_shuffle_sample(seq, np.random.default_rng(0))).item()
    real = torch.rand(4, 1, 8, 8, dtype=torch.float64)
    d_loss, _ = adversarial_losses(half, real.flip(0), real)
    clip_i = torch.tensor([[0.0], [7.0], [0.0], [7.0]], dtype=torch.float64)
    clip_j = torch.tensor([[3.0], [0.2], [3.0], [0.4]], dtype=torch.float64)
    cons = consistency_loss(clip_i, clip_j, lambda x: x, delta=1.0, same=False).item()
    elapsed = time.perf_counter() - t0
    errs = [abs(shuf - 2 * math.log(2)), abs(d_loss.item() - 2 * math.log(2)), abs(cons - 0.49)]
    ok = max(errs) <= 1e-6 and elapsed < 1.0
    report(1, ok, f"shuffle={shuf:.9f} d_loss={d_loss.item():.9f} consistency={cons:.9f} "
                  f"max_err={max(errs):.1e} time={elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 2

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    bundle = tiny_bundle(GRAD_CFG)
    batch = tiny_batch(GRAD_CFG)
    results = {name: finite_difference_check(bundle, batch, name, h=1e-5)
               for name in ("L_content", "L_motion", "L_generate")}
    elapsed = time.perf_counter() - t0
    worst = max(r["max_rel_err"] for r in results.values())
    ok = worst <= 1e-3 and elapsed < 120
    detail = " ".join(f"{n}={r['max_rel_err']:.1e}({r['checked']} entries)" for n, r in results.items())
    report(2, ok, f"{detail} time={elapsed:.0f}s")
    assert ok, results


# ------------------------------------------------------------------ 3

def test_criterion_3_flow_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    params = BlockParams(patch=5, radius=4)
    recovered = 0
    for _ in range(100):
        u, v = (int(x) for x in rng.integers(-params.radius, params.radius + 1, size=2))
        big = rng.random((40, 40))
        a = big[4:36, 4:36]
        b = big[4 - v : 36 - v, 4 - u : 36 - u]
        flow = estimate_flow(a, b, params)
        ok_case = True
        for by in range(0, 30, 5):
            for bx in range(0, 30, 5):
                if 0 <= by + v <= 27 and 0 <= bx + u <= 27:
                    ok_case &= flow.u[by, bx] == u and flow.v[by, bx] == v
        recovered += ok_case
    cfg = SynthConfig(height=32, width=32, frames=20, n_sprites=1, speed_max=3)
    warps = exact = 0
    for seed in range(10):
        states = simulate(cfg, seed)
        for s0, s1 in zip(states[:-1], states[1:]):
            f0, f1 = render_frame(s0, cfg), render_frame(s1, cfg)
            warped, hit = forward_warp(f0, analytic_flow(s0, s1, cfg), sprite_mask(s0[0], cfg))
            warps += 1
            exact += bool(np.array_equal(warped[hit], f1[hit]) and np.array_equal(hit, sprite_mask(s1[0], cfg)))
    elapsed = time.perf_counter() - t0
    ok = recovered == 100 and exact == warps and elapsed < 60
    report(3, ok, f"block matching {recovered}/100 shifts, warping exact {exact}/{warps} steps, time={elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 4

def test_criterion_4_freeze_contract(micro):
    p, train, _ = micro
    data = train.subset(range(16))
    cfg = replace(p["train"], batch_size=4, early_stop=False, stage_epochs={"content": 1, "motion": 1, "gan": 25})
    bundle = ModelBundle(p["net"], seed=0)
    tlog = TrainLog()
    for stage in ("content", "motion"):
        bundle, tlog = train_stage(bundle, data, cfg, stage, tlog)
    before = {n: bundle.digest([n]) for n in ("content_encoder", "motion_encoder", "generator")}
    bundle, tlog = train_stage(bundle, data, cfg, "gan", tlog)
    steps = len(tlog.stage_records("gan"))
    after = {n: bundle.digest([n]) for n in before}
    ok = (steps == 100 and after["content_encoder"] == before["content_encoder"]
          and after["motion_encoder"] == before["motion_encoder"] and after["generator"] != before["generator"])
    report(4, ok, f"{steps} gan steps; content encoder {'unchanged' if after['content_encoder'] == before['content_encoder'] else 'CHANGED'}, "
                  f"motion encoder {'unchanged' if after['motion_encoder'] == before['motion_encoder'] else 'CHANGED'}, "
                  f"generator {'updated' if after['generator'] != before['generator'] else 'not updated'}")
    assert ok


# ------------------------------------------------------------------ 5

def test_criterion_5_training_smoke(micro):
    p, train, test = micro
    t0 = time.perf_counter()
    cfg = replace(p["train"], seed=0, early_stop=False, stage_epochs={"content": 50, "motion": p["train"].epochs_for("motion")})
    bundle = ModelBundle(p["net"], seed=0)
    bundle, tlog = train_stage(bundle, train, cfg, "content")
    rec = tlog.epoch_means("content", "content_rec")
    below = next((i + 1 for i, r in enumerate(rec) if r < 0.01), None)
    bundle, tlog = train_stage(bundle, train, cfg, "motion", tlog)
    acc = evaluate_order_accuracy(bundle, test, cfg.context, cfg.horizon, seed=0)
    elapsed = time.perf_counter() - t0
    ok = below is not None and acc > 0.9 and elapsed < 1800
    report(5, ok, f"content MSE {rec[0]:.4f} -> {min(rec):.4f} (below 0.01 at epoch {below}); "
                  f"held-out order accuracy {acc:.3f}; time={elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 6

def test_criterion_6_ablation_direction(micro):
    p, train, test = micro
    t, k = p["train"].context, p["train"].horizon
    scores = {1.0: [], 0.0: []}
    t0 = time.perf_counter()
    for seed in (0, 1, 2):
        base = replace(p["train"], seed=seed)
        content, _ = train_stage(ModelBundle(p["net"], seed=seed), train, base, "content")
        # the content stage does not involve lambda3, so both arms share it
        for lam3 in scores:
            cfg = replace(base, weights=replace(base.weights, lambda3=lam3))
            bundle = copy.deepcopy(content)
            for stage in STAGES[1:]:
                bundle, _ = train_stage(bundle, train, cfg, stage)
            scores[lam3].append(float(evaluate(bundle, test, t, k).psnr[:, -1].mean()))
    elapsed = time.perf_counter() - t0
    with_sd, without_sd = np.mean(scores[1.0]), np.mean(scores[0.0])
    ok = with_sd >= without_sd
    report(6, ok, f"final-horizon PSNR lambda3=1: {with_sd:.3f} dB {np.round(scores[1.0], 3).tolist()}, "
                  f"lambda3=0: {without_sd:.3f} dB {np.round(scores[0.0], 3).tolist()}; time={elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 7

def _loop_psnr(x, y):
    err = sum((float(a) - float(b)) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size
    return 100.0 if err == 0 else min(100.0, 10 * math.log10(1.0 / err))


def _loop_ssim(x, y, window):
    r = (window - 1) / 2
    g = [math.exp(-((i - r) ** 2) / (2 * 1.5 ** 2)) for i in range(window)]
    s = sum(g)
    w = [[g[i] * g[j] / (s * s) for j in range(window)] for i in range(window)]
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for r0 in range(x.shape[0] - window + 1):
        for c0 in range(x.shape[1] - window + 1):
            px = [[float(x[r0 + i, c0 + j]) for j in range(window)] for i in range(window)]
            py = [[float(y[r0 + i, c0 + j]) for j in range(window)] for i in range(window)]
            mx = sum(w[i][j] * px[i][j] for i in range(window) for j in range(window))
            my = sum(w[i][j] * py[i][j] for i in range(window) for j in range(window))
            vx = sum(w[i][j] * (px[i][j] - mx) ** 2 for i in range(window) for j in range(window))
            vy = sum(w[i][j] * (py[i][j] - my) ** 2 for i in range(window) for j in range(window))
            cxy = sum(w[i][j] * (px[i][j] - mx) * (py[i][j] - my) for i in range(window) for j in range(window))
            vals.append((2 * mx * my + C1) * (2 * cxy + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2)))
    return sum(vals) / len(vals)


def test_criterion_7_metric_properties():
    rng = np.random.default_rng(3)
    x = rng.random((24, 24))
    ssim_self = ssim(x, x)
    p20 = psnr(np.zeros((10, 10)), np.full((10, 10), 0.1))
    synth = SynthConfig(height=16, width=16, frames=7, n_sprites=1, sprite_size=6)
    clips, flows, _ = generate_dataset(synth, 5, seed=4)
    data = prepare_data(clips, flows, "analytic", synth.flow_bound)
    stored = {cid: rng.random((3, 16, 16)) for cid in data.clip_ids}
    series = evaluate(stored, data, 4, 3)
    win = fit_window(16, 16)
    dev = 0.0
    for c, cid in enumerate(data.clip_ids):
        for h in range(3):
            gt = data.frames[c, 4 + h, 0].numpy()
            dev = max(dev, abs(series.psnr[c, h] - _loop_psnr(stored[cid][h], gt)),
                      abs(series.ssim[c, h] - _loop_ssim(stored[cid][h], gt, win)))
    ok = ssim_self == 1.0 and abs(p20 - 20.0) <= 1e-9 and dev <= 1e-9
    report(7, ok, f"SSIM(x,x)={ssim_self!r} PSNR(MSE=0.01)={p20!r} evaluate vs brute force max dev={dev:.1e}")
    assert ok


# ------------------------------------------------------------------ 8

def _pipeline(root):
    codes = [
        cli_main(["gen-data", "--preset", "micro", "--out", str(root / "data"), "--clips", "12", "--seed", "5"]),
        cli_main(["train", "--preset", "micro", "--data", str(root / "data"), "--ckpt", str(root / "ckpt"),
                  "--stage", "content", "--epochs", "2", "--seed", "5"]),
        cli_main(["predict", "--preset", "micro", "--ckpt", str(root / "ckpt"), "--data", str(root / "data"),
                  "--out", str(root / "pred")]),
        cli_main(["eval", "--preset", "micro", "--pred", str(root / "pred"), "--data", str(root / "data"),
                  "--out", str(root / "eval")]),
    ]
    return codes


def _golden_ok(tmp_path) -> bool:
    ok = (GOLDEN / "tiny.pgm").read_bytes() == encode_pgm(decode_pgm((GOLDEN / "tiny.pgm").read_bytes()))
    raw = (GOLDEN / "tiny.flo").read_bytes()
    ok &= raw == encode_flo(*decode_flo(raw)) and struct.unpack("<f", raw[:4])[0] == 202021.25
    tensors, header, config = read_checkpoint(GOLDEN / "tiny_ckpt")
    write_checkpoint(tmp_path / "ck", tensors, config, header.seed, header.meta)
    for name in ("header.json", "params.bin", "config.json"):
        ok &= (tmp_path / "ck" / name).read_bytes() == (GOLDEN / "tiny_ckpt" / name).read_bytes()
    return bool(ok)


def test_criterion_8_determinism_and_formats(tmp_path, capsys):
    codes = [_pipeline(tmp_path / "run1"), _pipeline(tmp_path / "run2")]
    capsys.readouterr()
    same = {}
    for rel in ("ckpt/trainlog.csv", "eval/metrics.csv", "eval/summary.json", "ckpt/content/params.bin"):
        same[rel] = (tmp_path / "run1" / rel).read_bytes() == (tmp_path / "run2" / rel).read_bytes()
    preds = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1" / "pred").rglob("*.pgm"))
    same["predictions"] = all((tmp_path / "run1" / p).read_bytes() == (tmp_path / "run2" / p).read_bytes() for p in preds)
    golden = _golden_ok(tmp_path)
    ok = all(c == 0 for run in codes for c in run) and all(same.values()) and golden
    report(8, ok, f"exit codes {codes}; identical: {', '.join(k for k, v in same.items() if v)}; "
                  f"golden formats {'ok' if golden else 'MISMATCH'}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
