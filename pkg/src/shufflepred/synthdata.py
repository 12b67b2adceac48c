"""Moving-sprite clips with exactly known optical flow.

Sprites are procedurally drawn stroke glyphs that translate with constant
velocity and bounce off the frame borders. Because every displacement is
known, the generator also returns the ground-truth flow between adjacent
frames.
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .formats import FormatError, read_flo, read_pgm, sha256_bytes, sha256_file, write_flo, write_pgm

FORMAT_VERSION = "shufflepred-dataset/1"


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    frames: int = 20
    n_sprites: int = 2
    speed_min: int = 1
    speed_max: int = 3
    sprite_size: int | None = None  # default: min(H, W) // 4
    integer_velocity: bool = True
    atlas_size: int = 10
    atlas_seed: int = 0

    @property
    def size(self) -> int:
        return self.sprite_size if self.sprite_size is not None else min(self.height, self.width) // 4

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise ValueError(f"frames must be at least 16x16, got {self.height}x{self.width}")
        if self.frames < 3:
            raise ValueError(f"clips need at least 3 frames, got {self.frames}")
        if self.n_sprites < 1:
            raise ValueError("need at least one sprite")
        if not 1 <= self.size < min(self.height, self.width):
            raise ValueError(f"sprite size {self.size} must be in [1, min(H, W)) = [1, {min(self.height, self.width)})")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError(f"speed range must satisfy 0 < min <= max, got ({self.speed_min}, {self.speed_max})")
        # one reflection per step must land back inside the track
        if self.speed_max > min(self.height, self.width) - self.size:
            raise ValueError("speed_max exceeds the free track length; sprites could skip a wall")

    @property
    def flow_bound(self) -> float:
        return float(self.speed_max + 1)


@dataclass
class SpriteState:
    position: np.ndarray  # (x, y), pixels
    velocity: np.ndarray  # (u, v), pixels / frame
    sprite_id: int
    size: int

    def copy(self) -> "SpriteState":
        return SpriteState(self.position.copy(), self.velocity.copy(), self.sprite_id, self.size)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]
    clip_id: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 3:
            raise ValueError(f"clip frames must be (T>=3, H, W), got {self.frames.shape}")
        if not (np.all(self.frames >= 0.0) and np.all(self.frames <= 1.0)):
            raise ValueError("clip pixels must lie in [0, 1]")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class FlowField:
    u: np.ndarray  # (H, W) horizontal displacement
    v: np.ndarray  # (H, W) vertical displacement

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"flow channels must be equal 2-D arrays, got {self.u.shape} and {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow must be finite")

    def stack(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    @classmethod
    def zeros(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w), np.float32), np.zeros((h, w), np.float32))


@dataclass
class DatasetManifest:
    clip_count: int
    frames: int
    height: int
    width: int
    sprites_per_clip: int
    seed: int
    version: str = FORMAT_VERSION
    generator: dict = field(default_factory=dict)
    clip_ids: list[int] = field(default_factory=list)
    checksums: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(**obj)


# ------------------------------------------------------------------ sprites

@functools.lru_cache(maxsize=16)
def make_atlas(size: int, count: int = 10, seed: int = 0) -> np.ndarray:
    """Return ``count`` uint8 glyphs of shape (size, size) drawn from a few thick strokes."""
    rng = np.random.default_rng(seed)
    atlas = np.zeros((count, size, size), dtype=np.uint8)
    radius = max(0.5, size / 10)
    yy, xx = np.mgrid[0:size, 0:size]
    for g in range(count):
        mask = np.zeros((size, size), bool)
        for _ in range(rng.integers(2, 4)):
            p0, p1 = rng.uniform(radius, size - 1 - radius, size=(2, 2))
            for s in np.linspace(0.0, 1.0, 4 * size):
                cx, cy = p0 + s * (p1 - p0)
                mask |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
        texture = rng.integers(140, 256, size=(size, size))
        atlas[g] = np.where(mask, texture, 0)
    atlas.setflags(write=False)
    return atlas


def config_atlas(config: SynthConfig) -> np.ndarray:
    return make_atlas(config.size, config.atlas_size, config.atlas_seed)


def init_states(config: SynthConfig, rng: np.random.Generator) -> list[SpriteState]:
    size = config.size
    hi = np.array([config.width - size, config.height - size], dtype=np.float64)
    states = []
    for _ in range(config.n_sprites):
        sign = rng.choice([-1.0, 1.0], size=2)
        if config.integer_velocity:
            pos = rng.integers(0, hi + 1).astype(np.float64)
            mag = rng.integers(config.speed_min, config.speed_max + 1, size=2).astype(np.float64)
        else:
            pos = rng.uniform(0, hi)
            mag = rng.uniform(config.speed_min, config.speed_max, size=2)
        sid = int(rng.integers(config.atlas_size))
        states.append(SpriteState(pos, sign * mag, sid, size))
    return states


def step_state(state: SpriteState, config: SynthConfig) -> SpriteState:
    """Advance one frame, reflecting off the borders."""
    nxt = state.copy()
    hi = np.array([config.width - state.size, config.height - state.size], dtype=np.float64)
    pos = state.position + state.velocity
    for axis in range(2):
        if pos[axis] > hi[axis]:
            pos[axis] = 2 * hi[axis] - pos[axis]
            nxt.velocity[axis] = -nxt.velocity[axis]
        elif pos[axis] < 0:
            pos[axis] = -pos[axis]
            nxt.velocity[axis] = -nxt.velocity[axis]
    nxt.position = pos
    return nxt


def simulate(config: SynthConfig, seed: int, clip_id: int = 0) -> list[list[SpriteState]]:
    config.validate()
    rng = np.random.default_rng([seed, clip_id])
    states = [init_states(config, rng)]
    for _ in range(config.frames - 1):
        states.append([step_state(s, config) for s in states[-1]])
    return states


def _place(glyph: np.ndarray, position: np.ndarray, h: int, w: int) -> np.ndarray:
    """Float canvas with the glyph bilinearly splatted at a (possibly fractional) position."""
    canvas = np.zeros((h, w), np.float64)
    x, y = position
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    s = glyph.shape[0]
    g = glyph.astype(np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            wgt = wx * wy
            if wgt == 0:
                continue
            r0, c0 = y0 + dy, x0 + dx
            r1, c1 = min(r0 + s, h), min(c0 + s, w)
            canvas[r0:r1, c0:c1] += wgt * g[: r1 - r0, : c1 - c0]
    return canvas


def render_frame(states: Sequence[SpriteState], config: SynthConfig) -> np.ndarray:
    atlas = config_atlas(config)
    frame = np.zeros((config.height, config.width), np.float64)
    for s in states:
        frame = np.maximum(frame, _place(atlas[s.sprite_id], s.position, config.height, config.width))
    return np.clip(np.floor(frame + 0.5), 0, 255).astype(np.uint8)


def sprite_mask(state: SpriteState, config: SynthConfig) -> np.ndarray:
    """Pixels covered by the sprite's glyph, anchored at the integer part of its position."""
    glyph = config_atlas(config)[state.sprite_id] > 0
    mask = np.zeros((config.height, config.width), bool)
    x0, y0 = (int(np.floor(c)) for c in state.position)
    s = state.size
    mask[y0 : y0 + s, x0 : x0 + s] = glyph[: config.height - y0, : config.width - x0]
    return mask


def analytic_flow(state_t: Sequence[SpriteState], state_t1: Sequence[SpriteState], config: SynthConfig) -> FlowField:
    if len(state_t) != len(state_t1) or any(
        a.sprite_id != b.sprite_id or a.size != b.size for a, b in zip(state_t, state_t1)
    ):
        raise ValueError("state lists do not describe the same sprites")
    flow = FlowField.zeros(config.height, config.width)
    # later-listed sprites overwrite earlier ones on overlap
    for a, b in zip(state_t, state_t1):
        m = sprite_mask(a, config)
        d = b.position - a.position
        flow.u[m] = d[0]
        flow.v[m] = d[1]
    return flow


def generate_clip(config: SynthConfig, seed: int, clip_id: int = 0) -> tuple[VideoClip, list[FlowField]]:
    states = simulate(config, seed, clip_id)
    frames = np.stack([render_frame(s, config) for s in states]).astype(np.float32) / np.float32(255.0)
    flows = [analytic_flow(a, b, config) for a, b in zip(states[:-1], states[1:])]
    return VideoClip(frames, clip_id), flows


def generate_dataset(config: SynthConfig, n_clips: int, seed: int) -> tuple[list[VideoClip], list[list[FlowField]], DatasetManifest]:
    if n_clips < 1:
        raise ValueError(f"clip count must be positive, got {n_clips}")
    config.validate()
    clips, flows = [], []
    for cid in range(n_clips):
        c, f = generate_clip(config, seed, cid)
        clips.append(c)
        flows.append(f)
    manifest = DatasetManifest(
        clip_count=n_clips, frames=config.frames, height=config.height, width=config.width,
        sprites_per_clip=config.n_sprites, seed=seed, generator=asdict(config),
        clip_ids=list(range(n_clips)),
    )
    return clips, flows, manifest


def forward_warp(frame: np.ndarray, flow: FlowField, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Splat masked, integer-displaced pixels of ``frame`` to their flow targets.

    Returns the warped image and the boolean mask of pixels that received a value.
    """
    h, w = frame.shape
    out = np.zeros_like(frame)
    hit = np.zeros((h, w), bool)
    ys, xs = np.nonzero(mask)
    du, dv = flow.u[ys, xs], flow.v[ys, xs]
    keep = (du == np.round(du)) & (dv == np.round(dv))
    ty = ys[keep] + dv[keep].astype(int)
    tx = xs[keep] + du[keep].astype(int)
    ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    out[ty[ok], tx[ok]] = frame[ys[keep][ok], xs[keep][ok]]
    hit[ty[ok], tx[ok]] = True
    return out, hit


# ----------------------------------------------------------------- storage

def _frame_name(k: int) -> str:
    return f"frame_{k:03d}.pgm"


def _flow_name(k: int) -> str:
    return f"flow_{k:03d}.flo"


def to_uint8(frames: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 8 bits, rounding half away from zero."""
    return np.clip(np.floor(np.asarray(frames, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_dataset(clips: Sequence[VideoClip], flows: Sequence[Sequence[FlowField]],
                  manifest: DatasetManifest, directory: str | Path) -> None:
    directory = Path(directory)
    if len(clips) != manifest.clip_count or len(flows) != manifest.clip_count:
        raise ValueError(f"manifest declares {manifest.clip_count} clips, got {len(clips)} clips / {len(flows)} flow sets")
    checksums = {}
    clip_ids = []
    for clip, clip_flows in zip(clips, flows):
        if len(clip_flows) != clip.length - 1:
            raise ValueError(f"clip {clip.clip_id}: {len(clip_flows)} flows for {clip.length} frames")
        cdir = directory / "clips" / str(clip.clip_id)
        cdir.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(to_uint8(clip.frames)):
            write_pgm(cdir / _frame_name(k), frame)
            checksums[f"clips/{clip.clip_id}/{_frame_name(k)}"] = sha256_file(cdir / _frame_name(k))
        for k, f in enumerate(clip_flows):
            write_flo(cdir / _flow_name(k), f.u, f.v)
            checksums[f"clips/{clip.clip_id}/{_flow_name(k)}"] = sha256_file(cdir / _flow_name(k))
        clip_ids.append(clip.clip_id)
    manifest.clip_ids = clip_ids
    manifest.checksums = checksums
    # manifest last: its presence marks a complete dataset
    (directory / "manifest.json").write_text(
        json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(directory: str | Path) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
        manifest = DatasetManifest.from_json(obj)
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: manifest missing") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if manifest.version != FORMAT_VERSION:
        raise FormatError(f"{path}: dataset version {manifest.version!r}, expected {FORMAT_VERSION!r}")
    return manifest


def read_dataset(directory: str | Path, verify: bool = True) -> tuple[list[VideoClip], list[list[FlowField]], DatasetManifest]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    on_disk = sorted(int(p.name) for p in (directory / "clips").iterdir() if p.is_dir()) \
        if (directory / "clips").is_dir() else []
    if len(on_disk) != manifest.clip_count or on_disk != sorted(manifest.clip_ids):
        raise FormatError(f"{directory}: manifest declares {manifest.clip_count} clips, found {len(on_disk)} on disk")
    clips, flows = [], []
    for cid in manifest.clip_ids:
        cdir = directory / "clips" / str(cid)
        frames, clip_flows = [], []
        for k in range(manifest.frames):
            path = cdir / _frame_name(k)
            _check(path, directory, manifest, verify)
            img = read_pgm(path)
            if img.shape != (manifest.height, manifest.width):
                raise FormatError(f"{path}: frame is {img.shape}, manifest says {(manifest.height, manifest.width)}")
            frames.append(img)
        for k in range(manifest.frames - 1):
            path = cdir / _flow_name(k)
            _check(path, directory, manifest, verify)
            u, v = read_flo(path)
            if u.shape != (manifest.height, manifest.width):
                raise FormatError(f"{path}: flow is {u.shape}, manifest says {(manifest.height, manifest.width)}")
            clip_flows.append(FlowField(u, v))
        clips.append(VideoClip(np.stack(frames).astype(np.float32) / np.float32(255.0), cid))
        flows.append(clip_flows)
    return clips, flows, manifest


def _check(path: Path, root: Path, manifest: DatasetManifest, verify: bool) -> None:
    if not path.is_file():
        raise FormatError(f"{path}: missing")
    if verify:
        rel = path.relative_to(root).as_posix()
        expected = manifest.checksums.get(rel)
        if expected is None or sha256_file(path) != expected:
            raise FormatError(f"{path}: checksum mismatch")


def dataset_digest(directory: str | Path) -> str:
    """Digest over the manifest and every file it lists."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    parts = [(directory / "manifest.json").read_bytes()]
    parts += [(directory / rel).read_bytes() for rel in sorted(manifest.checksums)]
    return sha256_bytes(b"".join(parts))
