"""Staged optimization: content -> motion -> gan -> finetune."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .flowest import BlockParams, clip_flows, flow_to_image
from .formats import FormatError, digest_config, read_checkpoint_header, read_csv, write_csv
from .losses import (
    Batch,
    LossWeights,
    _nll,
    adversarial_from_probs,
    batch_consistency_loss,
    combined_objective,
    l1,
    make_shuffle_sample,
    mse,
    shuffle_loss_from_probs,
)
from .model import ModelBundle, NetConfig, load_bundle, save_bundle
from .synthdata import FlowField, VideoClip

log = logging.getLogger(__name__)

STAGES = ("content", "motion", "gan", "finetune")
STAGE_NETWORKS = {
    "content": (("content_encoder", "content_decoder"), ()),
    "motion": (("motion_encoder", "motion_decoder", "motion_predictor"), ("shuffle_disc",)),
    "gan": (("generator",), ("frame_disc",)),
    "finetune": (("content_encoder", "content_decoder", "motion_encoder", "motion_decoder",
                  "motion_predictor", "generator"), ("shuffle_disc", "frame_disc")),
}
LOG_COLUMNS = ("stage", "epoch", "step", "loss_name", "value")
STAGE_OBJECTIVE = {"content": "L_content", "motion": "L_motion", "gan": "L_generate", "finetune": "L_total"}


class TrainingError(RuntimeError):
    pass


class MissingPrerequisite(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, stage: str, epoch: int, step: int, name: str, value: float):
        super().__init__(f"non-finite {name}={value} in stage {stage}, epoch {epoch}, step {step}")
        self.stage, self.epoch, self.step, self.name, self.value = stage, epoch, step, name, value


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "all"
    epochs: int = 50
    stage_epochs: dict | None = None
    batch_size: int = 16
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    context: int = 10
    horizon: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    early_stop: bool = True
    early_stop_window: int = 5
    early_stop_tol: float = 1e-4

    def validate(self) -> None:
        if self.stage not in STAGES + ("all",):
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.context < 3:
            raise ValueError(f"context length must be >= 3, got {self.context}")
        if self.horizon < 3:
            raise ValueError(f"horizon must be >= 3, got {self.horizon}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        self.weights.validate()

    def epochs_for(self, stage: str) -> int:
        if self.stage_epochs and stage in self.stage_epochs:
            return int(self.stage_epochs[stage])
        return self.epochs

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["weights"] = LossWeights(**obj.get("weights", {}))
        return cls(**obj)

    def schedule_digest(self, net: NetConfig, data_info: dict | None = None) -> str:
        """Digest of everything that shapes the trained weights (the stage selector excluded)."""
        d = self.to_json()
        d.pop("stage")
        return digest_config({"net": asdict(net), "train": d, "data": data_info or {}})


# ------------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM update, applied in place. Returns (params, state)."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape or m.shape != p.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}")
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params, state


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.params:
            adam_step(self.params, [p.grad for p in self.params], self.state,
                      self.lr, self.beta1, self.beta2, self.eps)


# -------------------------------------------------------------------- log

@dataclass
class StepRecord:
    stage: str
    epoch: int
    step: int
    losses: dict
    wall_time: float
    rng_digest: str


class TrainLog:
    """Append-only per-step loss record."""

    def __init__(self):
        self.records: list[StepRecord] = []

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"step {record.step} does not follow {self.records[-1].step}")
        self.records.append(record)

    @property
    def next_step(self) -> int:
        return self.records[-1].step + 1 if self.records else 0

    def __len__(self) -> int:
        return len(self.records)

    def stage_records(self, stage: str) -> list[StepRecord]:
        return [r for r in self.records if r.stage == stage]

    def epoch_means(self, stage: str, name: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.stage_records(stage):
            if name in r.losses:
                by_epoch.setdefault(r.epoch, []).append(r.losses[name])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def loss_sequence(self, stage: str | None = None) -> list[tuple]:
        return [(r.stage, r.epoch, r.step, tuple(sorted(r.losses.items())))
                for r in self.records if stage is None or r.stage == stage]

    def rows(self):
        for r in self.records:
            for name in sorted(r.losses):
                yield (r.stage, r.epoch, r.step, name, r.losses[name])

    def write_csv(self, path: str | Path) -> None:
        write_csv(path, LOG_COLUMNS, self.rows())

    @classmethod
    def read_csv(cls, path: str | Path, keep: Sequence[str] | None = None) -> "TrainLog":
        """Rebuild a log from its CSV; wall times and RNG digests are not stored there."""
        tlog = cls()
        current = None
        for row in read_csv(path, LOG_COLUMNS):
            if keep is not None and row["stage"] not in keep:
                continue
            key = (row["stage"], int(row["epoch"]), int(row["step"]))
            if current is None or key != current[0]:
                if current is not None:
                    tlog.append(StepRecord(*current[0], current[1], 0.0, ""))
                current = (key, {})
            current[1][row["loss_name"]] = float(row["value"])
        if current is not None:
            tlog.append(StepRecord(*current[0], current[1], 0.0, ""))
        return tlog

    def summary(self) -> dict:
        out: dict = {}
        for stage in dict.fromkeys(r.stage for r in self.records):
            recs = self.stage_records(stage)
            names = sorted({n for r in recs for n in r.losses})
            out[stage] = {
                "steps": len(recs),
                "epochs": max(r.epoch for r in recs),
                "final_epoch_means": {n: self.epoch_means(stage, n)[-1] for n in names},
                "first_epoch_means": {n: self.epoch_means(stage, n)[0] for n in names},
            }
        return out

    def write_summary(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _rng_digest(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True, default=str)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


# ------------------------------------------------------------------- data

@dataclass
class ClipData:
    """Training tensors: frames (N, T, 1, H, W) and normalized flow images (N, T-1, 2, H, W)."""

    frames: torch.Tensor
    flows: torch.Tensor
    clip_ids: list[int]
    flow_bound: float

    def __len__(self) -> int:
        return self.frames.shape[0]

    def batch(self, index, t: int, k: int) -> Batch:
        index = torch.as_tensor(np.asarray(index), dtype=torch.long)
        return Batch(self.frames[index], self.flows[index], t, k)

    def subset(self, index) -> "ClipData":
        index = list(index)
        return ClipData(self.frames[index], self.flows[index], [self.clip_ids[i] for i in index], self.flow_bound)

    def info(self) -> dict:
        return {"clips": len(self), "shape": list(self.frames.shape[1:]), "flow_bound": self.flow_bound}


def prepare_data(clips: Sequence[VideoClip], flows: Sequence[Sequence[FlowField]] | None = None,
                 provider: str = "analytic", bound: float = 4.0,
                 block: BlockParams = BlockParams()) -> ClipData:
    frames, images = [], []
    for i, clip in enumerate(clips):
        fl = clip_flows(clip.frames, provider, flows[i] if flows is not None else None, block)
        frames.append(clip.frames[:, None])
        images.append(np.stack([flow_to_image(f, bound) for f in fl]))
    return ClipData(torch.from_numpy(np.stack(frames)), torch.from_numpy(np.stack(images)),
                    [c.clip_id for c in clips], float(bound))


# ---------------------------------------------------------------- stages

def _check_prerequisites(bundle: ModelBundle, stage: str) -> None:
    missing = [s for s in STAGES[: STAGES.index(stage)] if s not in bundle.stages_done]
    if missing:
        raise MissingPrerequisite(f"stage {stage!r} needs completed stage(s) {missing}; load their checkpoint first")


def _record(tlog: TrainLog, stage: str, epoch: int, rng, t0: float, values: dict) -> None:
    losses = {}
    step = tlog.next_step
    for name, v in values.items():
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise TrainingDiverged(stage, epoch, step, name, v)
        losses[name] = v
    tlog.append(StepRecord(stage, epoch, step, losses, time.perf_counter() - t0, _rng_digest(rng)))


def _content_step(bundle, batch: Batch, w: LossWeights, main: Adam, **_):
    frames = batch.context_frames
    h = bundle.encode_content(frames)
    cons = batch_consistency_loss(h, w.delta)
    rec = mse(bundle.decode_content(h), frames)
    parts = combined_objective({"consistency": cons, "content_rec": rec}, w)
    main.zero_grad()
    parts["L_content"].backward()
    main.step()
    return {"consistency": cons, "content_rec": rec, "L_content": parts["L_content"]}


def _motion_forward(bundle, batch: Batch, rng):
    h_m = bundle.encode_motion(batch.train_flows)
    rec = mse(bundle.decode_motion(h_m), batch.train_flows)
    pred = bundle.predict_motion_sequence(h_m[:, : batch.t - 1], batch.k)
    sample = make_shuffle_sample(pred, rng)
    return rec, sample


def _order_accuracy(p_ordered, p_shuffled) -> float:
    hits = (p_ordered > 0.5).float().sum() + (p_shuffled < 0.5).float().sum()
    return float(hits) / (p_ordered.numel() + p_shuffled.numel())


def _motion_step(bundle, batch: Batch, w: LossWeights, main: Adam, disc: Adam, rng, **_):
    sd = bundle.shuffle_discriminate
    rec, sample = _motion_forward(bundle, batch, rng)
    # discriminator: classify detached predicted vs shuffled sequences
    sd_loss = shuffle_loss_from_probs(sd(sample.ordered.detach()), sd(sample.shuffled.detach()))
    disc.zero_grad()
    (w.lambda3 * sd_loss).backward()
    disc.step()
    # predictor side: the same objective, through the features
    p_o, p_s = sd(sample.ordered), sd(sample.shuffled)
    shuf = shuffle_loss_from_probs(p_o, p_s)
    parts = combined_objective({"shuffle": shuf, "motion_rec": rec}, w)
    main.zero_grad()
    parts["L_motion"].backward()
    main.step()
    return {"sd_loss": sd_loss, "shuffle": shuf, "motion_rec": rec, "L_motion": parts["L_motion"],
            "sd_accuracy": _order_accuracy(p_o.detach(), p_s.detach())}


def _gan_step(bundle, batch: Batch, w: LossWeights, main: Adam, disc: Adam, **_):
    with torch.no_grad():
        h_c, h_m = bundle.rollout_features(batch.context_frames, batch.context_flows, batch.k)
    fake = bundle.generate(h_c.unsqueeze(1).expand(-1, batch.k, -1), h_m)
    real = batch.targets
    d_loss, _ = adversarial_from_probs(bundle.discriminate_frame(real), bundle.discriminate_frame(fake.detach()))
    disc.zero_grad()
    (w.alpha * d_loss).backward()
    disc.step()
    g_loss = _nll(bundle.discriminate_frame(fake)).mean()
    frame_l1 = l1(fake, real)
    parts = combined_objective({"adversarial": g_loss, "frame_l1": frame_l1}, w)
    main.zero_grad()
    parts["L_generate"].backward()
    main.step()
    return {"d_loss": d_loss, "adversarial": g_loss, "frame_l1": frame_l1, "L_generate": parts["L_generate"]}


def _finetune_step(bundle, batch: Batch, w: LossWeights, main: Adam, disc: Adam, rng, **_):
    frames = batch.context_frames
    h_frames = bundle.encode_content(frames)
    cons = batch_consistency_loss(h_frames, w.delta)
    content_rec = mse(bundle.decode_content(h_frames), frames)
    motion_rec, sample = _motion_forward(bundle, batch, rng)
    h_c = h_frames[:, -1]
    fake = bundle.generate(h_c.unsqueeze(1).expand(-1, batch.k, -1), sample.ordered)
    real = batch.targets
    sd, fd = bundle.shuffle_discriminate, bundle.discriminate_frame
    # discriminators
    sd_loss = shuffle_loss_from_probs(sd(sample.ordered.detach()), sd(sample.shuffled.detach()))
    d_loss, _ = adversarial_from_probs(fd(real), fd(fake.detach()))
    disc.zero_grad()
    (w.lambda3 * sd_loss + w.alpha * d_loss).backward()
    disc.step()
    # everything else
    p_o, p_s = sd(sample.ordered), sd(sample.shuffled)
    shuf = shuffle_loss_from_probs(p_o, p_s)
    g_loss = _nll(fd(fake)).mean()
    frame_l1 = l1(fake, real)
    parts = {"consistency": cons, "content_rec": content_rec, "shuffle": shuf, "motion_rec": motion_rec,
             "adversarial": g_loss, "frame_l1": frame_l1}
    groups = combined_objective(parts, w)
    main.zero_grad()
    groups["L_total"].backward()
    main.step()
    return {**parts, **groups, "sd_loss": sd_loss, "d_loss": d_loss,
            "sd_accuracy": _order_accuracy(p_o.detach(), p_s.detach())}


STEP_FUNCTIONS = {"content": _content_step, "motion": _motion_step, "gan": _gan_step, "finetune": _finetune_step}


def train_stage(bundle: ModelBundle, data: ClipData, config: TrainConfig, stage: str | None = None,
                tlog: TrainLog | None = None) -> tuple[ModelBundle, TrainLog]:
    """Run one stage of the schedule, updating only that stage's networks."""
    stage = stage or config.stage
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    config.validate()
    _check_prerequisites(bundle, stage)
    tlog = tlog if tlog is not None else TrainLog()
    main_nets, disc_nets = STAGE_NETWORKS[stage]
    bundle.only_trainable(main_nets + disc_nets)
    bundle.train()
    opt = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    main = Adam(bundle.parameters_of(main_nets), **opt)
    disc = Adam(bundle.parameters_of(disc_nets), **opt)
    rng = np.random.default_rng([config.seed, STAGES.index(stage)])
    step_fn = STEP_FUNCTIONS[stage]
    objective = STAGE_OBJECTIVE[stage]
    n = len(data)
    t0 = time.perf_counter()
    history: list[float] = []
    for epoch in range(1, config.epochs_for(stage) + 1):
        order = rng.permutation(n)
        values = []
        for start in range(0, n, config.batch_size):
            batch = data.batch(order[start : start + config.batch_size], config.context, config.horizon)
            out = step_fn(bundle, batch, config.weights, main=main, disc=disc, rng=rng)
            _record(tlog, stage, epoch, rng, t0, out)
            values.append(tlog.records[-1].losses[objective])
        history.append(float(np.mean(values)))
        log.info("stage %s epoch %d %s=%.6f", stage, epoch, objective, history[-1])
        w = config.early_stop_window
        if config.early_stop and len(history) > w:
            old = history[-1 - w]
            if (old - history[-1]) / max(abs(old), 1e-12) < config.early_stop_tol:
                log.info("stage %s converged after %d epochs", stage, epoch)
                break
    if stage not in bundle.stages_done:
        bundle.stages_done.append(stage)
    return bundle, tlog


def evaluate_order_accuracy(bundle: ModelBundle, data: ClipData, t: int, k: int, seed: int = 0) -> float:
    """Fraction of correctly classified predicted (natural) and shuffled sequences on ``data``."""
    rng = np.random.default_rng(seed)
    batch = data.batch(np.arange(len(data)), t, k)
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        h_m = bundle.encode_motion(batch.context_flows)
        pred = bundle.predict_motion_sequence(h_m, k)
        sample = make_shuffle_sample(pred, rng)
        acc = _order_accuracy(bundle.shuffle_discriminate(sample.ordered), bundle.shuffle_discriminate(sample.shuffled))
    bundle.train(was_training)
    return acc


# --------------------------------------------------------------- schedule

def stage_dir(ckpt_dir: str | Path, stage: str) -> Path:
    return Path(ckpt_dir) / stage


def _resume(sdir: Path, stage: str, digest: str) -> ModelBundle:
    loaded, saved = load_bundle(sdir)
    if saved.get("run", {}).get("schedule_digest") != digest:
        raise TrainingError(f"{sdir}: checkpoint was produced by a different configuration; refusing to resume")
    if stage not in loaded.stages_done:
        raise TrainingError(f"{sdir}: checkpoint does not record stage {stage!r} as complete")
    return loaded


def run_schedule(data: ClipData, config: TrainConfig, net: NetConfig, ckpt_dir: str | Path,
                 stages: Sequence[str] = STAGES, resume: bool = True) -> tuple[ModelBundle, TrainLog]:
    """Run ``stages`` in order, checkpointing each to ``ckpt_dir/<stage>``.

    Stages that precede the first requested one are loaded from their
    checkpoints. With ``resume``, requested stages that already have a
    matching checkpoint are loaded instead of retrained. The step log in
    ``ckpt_dir/trainlog.csv`` is extended, never truncated.
    """
    stages = list(stages)
    if not stages or any(s not in STAGES for s in stages):
        raise ValueError(f"stages must be a non-empty subset of {STAGES}, got {stages}")
    if stages != sorted(stages, key=STAGES.index) or len(set(stages)) != len(stages):
        raise ValueError(f"stages must be listed in schedule order, got {stages}")
    first = STAGES.index(stages[0])
    if [STAGES[i] for i in range(first, first + len(stages))] != stages:
        raise ValueError(f"stages must be consecutive, got {stages}")
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    digest = config.schedule_digest(net, data.info())
    run_cfg = {"train": config.to_json(), "data": data.info(), "schedule_digest": digest}
    log_path = ckpt_dir / "trainlog.csv"
    if first > 0:
        before = STAGES[first - 1]
        sdir = stage_dir(ckpt_dir, before)
        if not (sdir / "header.json").exists():
            raise MissingPrerequisite(f"stage {stages[0]!r} needs the {before!r} checkpoint in {sdir}")
        bundle = _resume(sdir, before, digest)
        tlog = TrainLog.read_csv(log_path, keep=STAGES[:first]) if log_path.exists() else TrainLog()
    else:
        bundle = ModelBundle(net, seed=config.seed)
        tlog = TrainLog()
    for stage in stages:
        sdir = stage_dir(ckpt_dir, stage)
        if resume and (sdir / "header.json").exists():
            bundle = _resume(sdir, stage, digest)
            if log_path.exists():
                tlog = TrainLog.read_csv(log_path, keep=STAGES[: STAGES.index(stage) + 1])
            log.info("resumed stage %s from %s", stage, sdir)
            continue
        bundle, tlog = train_stage(bundle, data, config, stage=stage, tlog=tlog)
        save_bundle(bundle, sdir, run_cfg)
        tlog.write_csv(log_path)
        tlog.write_summary(ckpt_dir / "summary.json")
    return bundle, tlog


def latest_checkpoint(ckpt_dir: str | Path) -> Path:
    for stage in reversed(STAGES):
        sdir = stage_dir(ckpt_dir, stage)
        if (sdir / "header.json").exists():
            read_checkpoint_header(sdir)
            return sdir
    if (Path(ckpt_dir) / "header.json").exists():
        return Path(ckpt_dir)
    raise FormatError(f"{ckpt_dir}: no checkpoint found")


__all__ = [
    "STAGES", "TrainConfig", "TrainLog", "StepRecord", "AdamState", "Adam", "adam_step", "ClipData",
    "prepare_data", "train_stage", "run_schedule", "evaluate_order_accuracy", "TrainingError",
    "MissingPrerequisite", "TrainingDiverged", "latest_checkpoint", "stage_dir",
]
