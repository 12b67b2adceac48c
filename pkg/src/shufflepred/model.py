"""Networks for content/motion disentangled frame prediction.

All eight networks live in one :class:`ModelBundle`:

* content encoder / decoder   (frame  <-> content feature)
* motion encoder / decoder    (flow image <-> motion feature)
* motion predictor            (window of t-1 motion features -> next one)
* shuffle discriminator       (sequence of motion features -> P(natural order))
* generator                   ([content, motion] -> frame)
* frame discriminator         (frame -> P(real))

Tensors are batch-first: frames are (B, T, 1, H, W), flow images
(B, T-1, 2, H, W), features (B, T, d).
"""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .formats import FormatError, read_checkpoint, write_checkpoint

NETWORKS = (
    "content_encoder",
    "content_decoder",
    "motion_encoder",
    "motion_decoder",
    "motion_predictor",
    "shuffle_disc",
    "generator",
    "frame_disc",
)
DISCRIMINATORS = ("shuffle_disc", "frame_disc")


@dataclass(frozen=True)
class NetConfig:
    height: int = 64
    width: int = 64
    conv_layers: int = 4
    fc_layers: int = 2
    channels: int = 16          # base width; doubles per conv layer
    latent_dim: int = 128
    fc_hidden: int | None = None  # default: latent_dim
    leaky_slope: float = 0.2
    lstm_layers: int = 2
    lstm_hidden: int = 64
    context: int = 10

    def validate(self) -> None:
        for name in ("conv_layers", "fc_layers", "channels", "latent_dim", "lstm_layers", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.context < 3:
            raise ValueError(f"context length must be >= 3, got {self.context}")

    @property
    def hidden(self) -> int:
        return self.fc_hidden or self.latent_dim

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Feature-map sizes after each stride-2 conv, input first."""
        sizes = [(self.height, self.width)]
        for _ in range(self.conv_layers):
            h, w = sizes[-1]
            sizes.append(((h - 1) // 2 + 1, (w - 1) // 2 + 1))
        return sizes

    def conv_channels(self) -> list[int]:
        return [self.channels * 2 ** i for i in range(self.conv_layers)]


def _fc_stack(sizes: list[int], slope: float, final_act: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2 or final_act:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class ConvTrunk(nn.Module):
    """Stride-2 convs, each followed by instance norm and leaky ReLU."""

    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        layers: list[nn.Module] = []
        chans = [in_channels] + cfg.conv_channels()
        for (a, b), (h, w) in zip(zip(chans[:-1], chans[1:]), cfg.spatial_sizes()[1:]):
            layers.append(nn.Conv2d(a, b, kernel_size=3, stride=2, padding=1))
            # normalizing a single pixel zeroes it
            if h * w > 1:
                layers.append(nn.InstanceNorm2d(b, affine=True))
            layers.append(nn.LeakyReLU(cfg.leaky_slope))
        self.net = nn.Sequential(*layers)
        h, w = cfg.spatial_sizes()[-1]
        self.out_features = chans[-1] * h * w

    def forward(self, x):
        return self.net(x).flatten(1)


class Encoder(nn.Module):
    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        self.in_channels = in_channels
        self.trunk = ConvTrunk(in_channels, cfg)
        sizes = [self.trunk.out_features] + [cfg.hidden] * (cfg.fc_layers - 1) + [cfg.latent_dim]
        self.fc = _fc_stack(sizes, cfg.leaky_slope, final_act=False)

    def forward(self, x):
        return self.fc(self.trunk(x))


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`, ending in a sigmoid."""

    def __init__(self, in_features: int, out_channels: int, cfg: NetConfig):
        super().__init__()
        sizes = cfg.spatial_sizes()
        chans = cfg.conv_channels()
        self.seed_shape = (chans[-1],) + sizes[-1]
        flat = int(np.prod(self.seed_shape))
        fc_sizes = [in_features] + [cfg.hidden] * (cfg.fc_layers - 1) + [flat]
        self.fc = _fc_stack(fc_sizes, cfg.leaky_slope, final_act=True)
        layers: list[nn.Module] = []
        out_chans = chans[::-1][1:] + [out_channels]
        in_chans = chans[::-1]
        targets = sizes[::-1][1:]
        for i, (a, b, (src, dst)) in enumerate(zip(in_chans, out_chans, zip(sizes[::-1][:-1], targets))):
            pad = (dst[0] - 2 * src[0] + 1, dst[1] - 2 * src[1] + 1)
            layers.append(nn.ConvTranspose2d(a, b, kernel_size=3, stride=2, padding=1, output_padding=pad))
            if i == len(out_chans) - 1:
                layers.append(nn.Sigmoid())
            else:
                if dst[0] * dst[1] > 1:
                    layers.append(nn.InstanceNorm2d(b, affine=True))
                layers.append(nn.LeakyReLU(cfg.leaky_slope))
        self.net = nn.Sequential(*layers)

    def forward(self, h):
        return self.net(self.fc(h).view(-1, *self.seed_shape))


class MotionPredictor(nn.Module):
    """Stacked LSTM over a window of t-1 motion features, projected back to d."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.window = cfg.context - 1
        self.inp = nn.Linear(cfg.latent_dim, cfg.lstm_hidden)
        self.lstm = nn.LSTM(cfg.lstm_hidden, cfg.lstm_hidden, num_layers=cfg.lstm_layers, batch_first=True)
        self.out = nn.Linear(cfg.lstm_hidden, cfg.latent_dim)

    def forward(self, window):
        if window.shape[1] != self.window:
            raise ValueError(f"motion predictor expects a window of {self.window} features, got {window.shape[1]}")
        _, (h_n, _) = self.lstm(self.inp(window))
        return self.out(h_n[-1])


class ShuffleDiscriminator(nn.Module):
    """Bidirectional LSTM + linear head scoring P(sequence is in natural order)."""

    min_length = 3

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.lstm = nn.LSTM(cfg.latent_dim, cfg.lstm_hidden, num_layers=cfg.lstm_layers,
                            batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * cfg.lstm_hidden, 1)

    def forward(self, seq):
        if seq.shape[1] < self.min_length:
            raise ValueError(f"shuffle discriminator needs sequences of length >= {self.min_length}, got {seq.shape[1]}")
        _, (h_n, _) = self.lstm(seq)
        # h_n: (layers * 2, B, hidden); last two rows are the top layer's directions
        top = torch.cat([h_n[-2], h_n[-1]], dim=-1)
        return torch.sigmoid(self.head(top)).squeeze(-1)


class FrameDiscriminator(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.trunk = ConvTrunk(1, cfg)
        self.head = nn.Linear(self.trunk.out_features, 1)

    def forward(self, x):
        return torch.sigmoid(self.head(self.trunk(x))).squeeze(-1)


def _init_recurrent(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.LSTM):
            for name, p in m.named_parameters():
                if name.startswith("weight_hh"):
                    nn.init.orthogonal_(p)


class ModelBundle(nn.Module):
    """The eight networks plus per-network trainable flags."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.nets = nn.ModuleDict({
                "content_encoder": Encoder(1, cfg),
                "content_decoder": Decoder(cfg.latent_dim, 1, cfg),
                "motion_encoder": Encoder(2, cfg),
                "motion_decoder": Decoder(cfg.latent_dim, 2, cfg),
                "motion_predictor": MotionPredictor(cfg),
                "shuffle_disc": ShuffleDiscriminator(cfg),
                "generator": Decoder(2 * cfg.latent_dim, 1, cfg),
                "frame_disc": FrameDiscriminator(cfg),
            })
            _init_recurrent(self.nets)
        self.trainable = {name: True for name in NETWORKS}
        self.stages_done: list[str] = []

    def __getitem__(self, name: str) -> nn.Module:
        return self.nets[name]

    # ------------------------------------------------------------ freezing
    def set_trainable(self, names, flag: bool = True) -> None:
        for name in ([names] if isinstance(names, str) else names):
            self.trainable[name] = flag
            self.nets[name].requires_grad_(flag)

    def only_trainable(self, names) -> None:
        for name in NETWORKS:
            self.set_trainable(name, name in names)

    def parameters_of(self, names) -> list[nn.Parameter]:
        return [p for name in names for p in self.nets[name].parameters()]

    def trainable_parameters(self) -> list[nn.Parameter]:
        return self.parameters_of([n for n in NETWORKS if self.trainable[n]])

    # --------------------------------------------------------- operations
    def _check_image(self, x, channels: int):
        h, w = self.cfg.height, self.cfg.width
        if x.shape[-2:] != (h, w):
            raise ValueError(f"expected images of size {h}x{w}, got {tuple(x.shape[-2:])}")
        if channels == 1 and (x.dim() < 3 or x.shape[-3] != 1):
            x = x.unsqueeze(-3)
        if x.shape[-3] != channels:
            raise ValueError(f"expected {channels} channel(s), got {x.shape[-3]}")
        return x

    def _run(self, net: str, x, channels: int):
        x = self._check_image(x, channels)
        lead = x.shape[:-3]
        out = self.nets[net](x.reshape(-1, channels, *x.shape[-2:]))
        return out.reshape(*lead, *out.shape[1:])

    def _decode(self, net: str, h, in_dim: int):
        if h.shape[-1] != in_dim:
            raise ValueError(f"{net} expects features of size {in_dim}, got {h.shape[-1]}")
        lead = h.shape[:-1]
        out = self.nets[net](h.reshape(-1, in_dim))
        return out.reshape(*lead, *out.shape[1:])

    def encode_content(self, x):
        return self._run("content_encoder", x, 1)

    def decode_content(self, h):
        return self._decode("content_decoder", h, self.cfg.latent_dim)

    def encode_motion(self, m):
        return self._run("motion_encoder", m, 2)

    def decode_motion(self, h):
        return self._decode("motion_decoder", h, self.cfg.latent_dim)

    def generate(self, h_content, h_motion):
        return self._decode("generator", torch.cat([h_content, h_motion], dim=-1), 2 * self.cfg.latent_dim)

    def discriminate_frame(self, x):
        return self._run("frame_disc", x, 1)

    def shuffle_discriminate(self, seq):
        squeeze = seq.dim() == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        out = self.nets["shuffle_disc"](seq)
        return out[0] if squeeze else out

    def predict_motion_feature(self, window):
        squeeze = window.dim() == 2
        if squeeze:
            window = window.unsqueeze(0)
        out = self.nets["motion_predictor"](window)
        return out[0] if squeeze else out

    def predict_motion_sequence(self, observed, k: int):
        """Autoregressively extend (B, t-1, d) observed features by ``k`` predictions -> (B, k, d)."""
        if k < 1:
            raise ValueError(f"horizon must be >= 1, got {k}")
        window = observed
        preds = []
        for _ in range(k):
            nxt = self.nets["motion_predictor"](window)
            preds.append(nxt)
            window = torch.cat([window[:, 1:], nxt.unsqueeze(1)], dim=1)
        return torch.stack(preds, dim=1)

    def rollout_features(self, context_frames, context_flows, k: int):
        """Return (h_content (B, d), predicted motion (B, k, d)) for a batch of contexts."""
        t = context_frames.shape[1]
        if t < 3 or context_flows.shape[1] != t - 1:
            raise ValueError(f"need t >= 3 context frames and t-1 flows, got {t} frames / {context_flows.shape[1]} flows")
        if t != self.cfg.context:
            raise ValueError(f"model was built for {self.cfg.context} context frames, got {t}")
        h_c = self.encode_content(context_frames[:, -1])
        h_m = self.encode_motion(context_flows)
        return h_c, self.predict_motion_sequence(h_m, k)

    def rollout(self, context_frames, context_flows, k: int):
        """Predict k future frames (B, k, 1, H, W) from t context frames and t-1 flow images."""
        single = context_frames.dim() == 4
        if single:
            context_frames = context_frames.unsqueeze(0)
            context_flows = context_flows.unsqueeze(0)
        h_c, h_m = self.rollout_features(context_frames, context_flows, k)
        frames = self.generate(h_c.unsqueeze(1).expand(-1, k, -1), h_m)
        return frames[0] if single else frames

    # -------------------------------------------------------- persistence
    def config_dict(self) -> dict:
        return {"net": asdict(self.cfg)}

    def digest(self, names=NETWORKS) -> str:
        h = hashlib.sha256()
        for name in names:
            for pname, p in self.nets[name].state_dict().items():
                h.update(pname.encode())
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def save_bundle(bundle: ModelBundle, directory: str | Path, run_config: dict | None = None) -> None:
    config = {"net": asdict(bundle.cfg), "run": run_config or {}}
    tensors = {f"{n}.{k}": v.detach().cpu().float().numpy() for n in NETWORKS
               for k, v in bundle.nets[n].state_dict().items()}
    meta = {"trainable": dict(bundle.trainable), "stages_done": list(bundle.stages_done)}
    write_checkpoint(directory, tensors, config, bundle.seed, meta)


def load_bundle(directory: str | Path) -> tuple[ModelBundle, dict]:
    tensors, header, config = read_checkpoint(directory)
    try:
        cfg = NetConfig(**config["net"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{directory}: checkpoint config lacks a valid network section ({exc})") from exc
    bundle = ModelBundle(cfg, seed=header.seed)
    expected = {f"{n}.{k}": v.shape for n in NETWORKS for k, v in bundle.nets[n].state_dict().items()}
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"{directory}: parameter names disagree (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, shape in expected.items():
        if tuple(shape) != tensors[name].shape:
            raise FormatError(f"{directory}: {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    for n in NETWORKS:
        prefix = n + "."
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(prefix)}
        bundle.nets[n].load_state_dict(state)
    for n, flag in header.meta.get("trainable", {}).items():
        bundle.set_trainable(n, bool(flag))
    bundle.stages_done = list(header.meta.get("stages_done", []))
    return bundle, config


@contextlib.contextmanager
def inference(bundle: ModelBundle):
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            yield bundle
    finally:
        bundle.train(was_training)


__all__ = [
    "NETWORKS", "DISCRIMINATORS", "NetConfig", "ModelBundle", "Encoder", "Decoder", "MotionPredictor",
    "ShuffleDiscriminator", "FrameDiscriminator", "save_bundle", "load_bundle", "inference",
]
