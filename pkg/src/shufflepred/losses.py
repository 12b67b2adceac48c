"""Training objectives and shuffled-sequence construction."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0    # consistency
    lambda2: float = 0.01   # content reconstruction
    lambda3: float = 1.0    # shuffle
    lambda4: float = 0.01   # motion reconstruction
    alpha: float = 1.0      # adversarial
    beta: float = 1e-5      # frame l1
    delta: float = 1.0      # consistency margin

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")
        if self.delta <= 0:
            raise ValueError(f"margin delta must be positive, got {self.delta}")


@dataclass
class Batch:
    """A batch of clips: frames (B, T, 1, H, W) and flow images (B, T-1, 2, H, W)."""

    frames: torch.Tensor
    flows: torch.Tensor
    t: int
    k: int

    def __post_init__(self):
        if self.frames.shape[1] < self.t + self.k:
            raise ValueError(f"clips of length {self.frames.shape[1]} cannot cover t={self.t} + k={self.k}")
        if self.flows.shape[1] != self.frames.shape[1] - 1:
            raise ValueError("need exactly one flow image per adjacent frame pair")

    @property
    def context_frames(self):
        return self.frames[:, : self.t]

    @property
    def context_flows(self):
        return self.flows[:, : self.t - 1]

    @property
    def targets(self):
        return self.frames[:, self.t : self.t + self.k]

    @property
    def train_flows(self):
        """Flows m_1 .. m_{t+k-1}: the context flows plus those leading into each target."""
        return self.flows[:, : self.t + self.k - 1]


# ------------------------------------------------------------ consistency

def pair_distance(emb_i: torch.Tensor, emb_j: torch.Tensor) -> torch.Tensor:
    """Mean l2 distance between odd frames of clip i and even frames of clip j.

    ``emb_*`` are (T, d) per-frame content features; frames are 1-indexed so
    the odd frames are rows 0, 2, ... and the even ones rows 1, 3, ...
    """
    n = min(emb_i.shape[0], emb_j.shape[0]) // 2
    if n < 1:
        raise ValueError("clips need at least 2 frames")
    odd = emb_i[0 : 2 * n : 2]
    even = emb_j[1 : 2 * n : 2]
    return torch.linalg.vector_norm(odd - even, dim=-1).mean()


def contrastive_term(distance: torch.Tensor, same: bool, delta: float) -> torch.Tensor:
    if same:
        return distance ** 2
    return torch.clamp(delta - distance, min=0.0) ** 2


def consistency_loss(frames_i, frames_j, encoder, delta: float = 1.0, same: bool | None = None) -> torch.Tensor:
    """Contrastive content loss for one ordered pair of clips.

    ``same`` defaults to whether both arguments are the same object.
    """
    if delta <= 0:
        raise ValueError(f"margin delta must be positive, got {delta}")
    if len(frames_i) < 2 or len(frames_j) < 2:
        raise ValueError("clips need at least 2 frames")
    if same is None:
        same = frames_i is frames_j
    d = pair_distance(encoder(frames_i), encoder(frames_j))
    return contrastive_term(d, same, delta)


def batch_consistency_loss(embeddings: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Sum of the contrastive term over all ordered clip pairs of a (B, T, d) batch."""
    if delta <= 0:
        raise ValueError(f"margin delta must be positive, got {delta}")
    n = embeddings.shape[1] // 2
    if n < 1:
        raise ValueError("clips need at least 2 frames")
    odd = embeddings[:, 0 : 2 * n : 2]     # (B, n, d)
    even = embeddings[:, 1 : 2 * n : 2]
    # dist[i, j] = mean_n || odd[i, n] - even[j, n] ||
    dist = torch.linalg.vector_norm(odd[:, None] - even[None, :], dim=-1).mean(-1)
    same = torch.eye(dist.shape[0], dtype=torch.bool, device=dist.device)
    terms = torch.where(same, dist ** 2, torch.clamp(delta - dist, min=0.0) ** 2)
    return terms.sum()


# ---------------------------------------------------------------- shuffle

@dataclass
class ShuffleSample:
    ordered: torch.Tensor       # (k, d) or (B, k, d)
    permutation: np.ndarray     # (k,) or (B, k)
    shuffled: torch.Tensor


def random_nonidentity_permutation(k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform over the k! - 1 non-identity permutations (rejection of the identity)."""
    if k < 3:
        raise ValueError(f"shuffled sequences need k >= 3, got {k}")
    ident = np.arange(k)
    while True:
        perm = rng.permutation(k)
        if not np.array_equal(perm, ident):
            return perm


def make_shuffle_sample(ordered: torch.Tensor, rng: np.random.Generator) -> ShuffleSample:
    """Shuffle a (k, d) sequence, or each row of a (B, k, d) batch independently."""
    if ordered.dim() == 2:
        perm = random_nonidentity_permutation(ordered.shape[0], rng)
        return ShuffleSample(ordered, perm, ordered[torch.as_tensor(perm)])
    perms = np.stack([random_nonidentity_permutation(ordered.shape[1], rng) for _ in range(ordered.shape[0])])
    index = torch.as_tensor(perms, device=ordered.device)
    shuffled = torch.gather(ordered, 1, index[..., None].expand(-1, -1, ordered.shape[-1]))
    return ShuffleSample(ordered, perms, shuffled)


def _nll(p: torch.Tensor) -> torch.Tensor:
    return -torch.log(torch.clamp(p, EPS, 1.0))


def _nll_not(p: torch.Tensor) -> torch.Tensor:
    return -torch.log(torch.clamp(1.0 - p, EPS, 1.0))


def shuffle_loss_from_probs(p_ordered: torch.Tensor, p_shuffled: torch.Tensor) -> torch.Tensor:
    return (_nll(p_ordered) + _nll_not(p_shuffled)).mean()


def shuffle_loss(sd, sample: ShuffleSample) -> torch.Tensor:
    """-log SD(ordered) - log(1 - SD(shuffled)), averaged over the batch."""
    return shuffle_loss_from_probs(sd(sample.ordered), sd(sample.shuffled))


# ------------------------------------------------------------ adversarial

def adversarial_losses(disc, fake: torch.Tensor, real: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and (non-saturating) generator losses.

    The discriminator loss sees ``fake`` detached, so it never pushes
    gradients into the generator.
    """
    p_real = disc(real)
    d_loss = (_nll(p_real) + _nll_not(disc(fake.detach()))).mean()
    g_loss = _nll(disc(fake)).mean()
    return d_loss, g_loss


def adversarial_from_probs(p_real, p_fake) -> tuple[torch.Tensor, torch.Tensor]:
    return (_nll(p_real) + _nll_not(p_fake)).mean(), _nll(p_fake).mean()


# --------------------------------------------------------- reconstruction

def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def reconstruction_losses(bundle, batch: Batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(content auto-encoder MSE, motion auto-encoder MSE, future-frame L1)."""
    frames = batch.context_frames
    content_rec = mse(bundle.decode_content(bundle.encode_content(frames)), frames)
    flows = batch.train_flows
    motion_rec = mse(bundle.decode_motion(bundle.encode_motion(flows)), flows)
    pred = bundle.rollout(batch.context_frames, batch.context_flows, batch.k)
    frame_l1 = l1(pred, batch.targets)
    return content_rec, motion_rec, frame_l1


# --------------------------------------------------------------- combined

SUB_LOSSES = ("consistency", "content_rec", "shuffle", "motion_rec", "adversarial", "frame_l1")


def combined_objective(parts: dict, weights: LossWeights) -> dict:
    """Weighted group losses; missing sub-losses count as zero."""
    get = lambda name: parts.get(name, 0.0)  # noqa: E731
    out = {
        "L_content": weights.lambda1 * get("consistency") + weights.lambda2 * get("content_rec"),
        "L_motion": weights.lambda3 * get("shuffle") + weights.lambda4 * get("motion_rec"),
        "L_generate": weights.alpha * get("adversarial") + weights.beta * get("frame_l1"),
    }
    out["L_total"] = out["L_content"] + out["L_motion"] + out["L_generate"]
    return out


OBJECTIVE_PARTS = {
    "L_content": ("consistency", "content_rec"),
    "L_motion": ("shuffle", "motion_rec"),
    "L_generate": ("adversarial", "frame_l1"),
}
OBJECTIVE_PARTS["L_total"] = SUB_LOSSES


def objective_terms(bundle, batch: Batch, weights: LossWeights, rng: np.random.Generator | None = None,
                    permutation: np.ndarray | None = None, adversarial: str = "generator",
                    parts: tuple[str, ...] = SUB_LOSSES) -> dict:
    """Sub-losses for one batch, fully differentiable w.r.t. every network.

    ``adversarial`` selects which side of the game is reported: the
    non-saturating ``"generator"`` loss or the ``"discriminator"`` loss
    (here without detaching the fake frames). ``parts`` limits the work to
    the named sub-losses.
    """
    unknown = set(parts) - set(SUB_LOSSES)
    if unknown:
        raise ValueError(f"unknown sub-losses {sorted(unknown)}")
    if adversarial not in ("generator", "discriminator"):
        raise ValueError(f"unknown adversarial side {adversarial!r}")
    out = {}
    frames = batch.context_frames
    t, k = batch.t, batch.k
    if "consistency" in parts or "content_rec" in parts:
        h_frames = bundle.encode_content(frames)
        if "consistency" in parts:
            out["consistency"] = batch_consistency_loss(h_frames, weights.delta)
        if "content_rec" in parts:
            out["content_rec"] = mse(bundle.decode_content(h_frames), frames)
    if "motion_rec" in parts:
        h_flows = bundle.encode_motion(batch.train_flows)
        out["motion_rec"] = mse(bundle.decode_motion(h_flows), batch.train_flows)
        observed = h_flows[:, : t - 1]
    else:
        observed = bundle.encode_motion(batch.context_flows)
    if not {"shuffle", "adversarial", "frame_l1"} & set(parts):
        return out
    predicted = bundle.predict_motion_sequence(observed, k)
    if "shuffle" in parts:
        if permutation is None:
            sample = make_shuffle_sample(predicted, rng if rng is not None else np.random.default_rng(0))
        else:
            perm = torch.as_tensor(np.broadcast_to(permutation, predicted.shape[:2]).copy())
            sample = ShuffleSample(predicted, perm.numpy(),
                                   torch.gather(predicted, 1, perm[..., None].expand(-1, -1, predicted.shape[-1])))
        out["shuffle"] = shuffle_loss(bundle.shuffle_discriminate, sample)
    if "adversarial" in parts or "frame_l1" in parts:
        h_c = bundle.encode_content(frames[:, -1])
        fake = bundle.generate(h_c.unsqueeze(1).expand(-1, k, -1), predicted)
        if "adversarial" in parts:
            p_fake = bundle.discriminate_frame(fake)
            if adversarial == "generator":
                out["adversarial"] = _nll(p_fake).mean()
            else:
                out["adversarial"] = (_nll(bundle.discriminate_frame(batch.targets)) + _nll_not(p_fake)).mean()
        if "frame_l1" in parts:
            out["frame_l1"] = l1(fake, batch.targets)
    return out


def objective(bundle, batch: Batch, weights: LossWeights, name: str = "L_total", **kwargs) -> torch.Tensor:
    """One weighted group objective, evaluating only the sub-losses it needs."""
    if name not in OBJECTIVE_PARTS:
        raise ValueError(f"unknown objective {name!r}; choose from {sorted(OBJECTIVE_PARTS)}")
    parts = objective_terms(bundle, batch, weights, parts=OBJECTIVE_PARTS[name], **kwargs)
    return combined_objective(parts, weights)[name]
