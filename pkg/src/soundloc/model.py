"""Audio/visual encoders, the cosine localization head and the two MLP classifiers."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .archive import read_archive, write_archive
from .errors import InvalidInputError, ShapeMismatchError, VersionMismatchError

COS_EPS = 1e-12
CHECKPOINT_KIND = "soundloc-checkpoint"


@dataclass
class ModelConfig:
    channels: int = 32
    width: int = 16
    num_clusters: int = 4
    num_categories: int = 4
    lam: float = 0.5
    seed: int = 0
    n_frames: int = 201
    n_mels: int = 64

    def __post_init__(self):
        if min(self.channels, self.width, self.num_clusters, self.num_categories) < 1:
            raise InvalidInputError("channels, width, num_clusters and num_categories must be >= 1")
        if self.num_clusters < self.num_categories:
            raise InvalidInputError(
                f"num_clusters ({self.num_clusters}) must be >= num_categories ({self.num_categories})")
        if self.lam < 0:
            raise InvalidInputError("lam must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _conv(cin, cout, stride):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


def _block(cin, cout, stride):
    # batch norm keeps activations O(1), so dot-product maps and logits are not vanishingly small
    return [_conv(cin, cout, stride), nn.BatchNorm2d(cout), nn.ReLU()]


class VisualEncoder(nn.Module):
    """Four conv-BN-ReLU blocks, total stride 8, non-negative features."""

    stride = 8

    def __init__(self, channels, width):
        super().__init__()
        self.body = nn.Sequential(
            *_block(3, width, 2),
            *_block(width, 2 * width, 2),
            *_block(2 * width, 2 * width, 2),
            *_block(2 * width, channels, 1),
        )

    def forward(self, frames):
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise InvalidInputError(f"expected RGB frames (B,3,H,W), got {tuple(frames.shape)}")
        if frames.shape[2] % self.stride or frames.shape[3] % self.stride:
            raise InvalidInputError(f"frame sides must be divisible by {self.stride}")
        return self.body(frames)


class AudioEncoder(nn.Module):
    """Conv stack over the log-mel image followed by global average pooling."""

    def __init__(self, channels, width, n_frames, n_mels):
        super().__init__()
        self.input_shape = (n_frames, n_mels)
        self.body = nn.Sequential(
            # coarse stem along time: the toy tones are stationary and this keeps CPU cost low
            nn.Conv2d(1, width, kernel_size=(5, 3), stride=(4, 2), padding=(2, 1)),
            nn.BatchNorm2d(width), nn.ReLU(),
            *_block(width, 2 * width, 2),
            *_block(2 * width, 2 * width, 2),
            _conv(2 * width, channels, 1),
        )

    def forward(self, specs):
        if specs.dim() != 3 or tuple(specs.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"expected spectrograms (B,{self.input_shape[0]},{self.input_shape[1]}), "
                f"got {tuple(specs.shape)}")
        # log(1e-6) ~ -13.8 is silence; bring the typical range near [-1, 1]
        x = (specs.unsqueeze(1) + 7.0) / 7.0
        return self.body(x).mean(dim=(2, 3))


class MLPHead(nn.Module):
    def __init__(self, channels, num_classes):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(channels, 2 * channels), nn.ReLU(),
                                 nn.Linear(2 * channels, num_classes))

    def forward(self, x):
        return self.net(x)


def cosine_map(g, f):
    """Per-cell cosine between ``g`` (B,C) and the columns of ``f`` (B,C,H,W).

    Cells where either vector has norm below 1e-12 get similarity 0.
    """
    if g.shape[-1] != f.shape[1]:
        raise ShapeMismatchError(f"audio embedding has {g.shape[-1]} channels, feature map {f.shape[1]}")
    dot = torch.einsum("bc,bchw->bhw", g, f)
    gn = g.norm(dim=1)[:, None, None]
    fn = f.norm(dim=1)
    denom = gn * fn
    ok = (gn >= COS_EPS) & (fn >= COS_EPS)
    return torch.where(ok, dot / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dot))


class SoundLocModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.visual = VisualEncoder(c.channels, c.width)
            self.audio = AudioEncoder(c.channels, c.width, c.n_frames, c.n_mels)
            self.head_a = MLPHead(c.channels, c.num_clusters)
            self.head_v = MLPHead(c.channels, c.num_clusters)
        self.loc_conv = nn.Conv2d(1, 1, kernel_size=1)
        with torch.no_grad():
            self.loc_conv.weight.fill_(1.0)
            self.loc_conv.bias.zero_()
        # flipped once a classification phase has run
        self.register_buffer("heads_trained", torch.zeros((), dtype=torch.bool))

    def encode_visual(self, frames):
        return self.visual(frames)

    def encode_audio(self, specs):
        return self.audio(specs)

    def optimizer(self, lr, loc_lr=None, head_lr=None):
        """Adam over all parameters; the scalar 1x1 conv and the heads may use their own rates."""
        loc = list(self.loc_conv.parameters())
        heads = list(self.head_a.parameters()) + list(self.head_v.parameters())
        taken = {id(p) for p in loc + heads}
        rest = [p for p in self.parameters() if id(p) not in taken]
        return torch.optim.Adam([{"params": rest, "lr": lr},
                                 {"params": loc, "lr": lr if loc_lr is None else loc_lr},
                                 {"params": heads, "lr": lr if head_lr is None else head_lr}])

    def localization_logits(self, g, f):
        return self.loc_conv(cosine_map(g, f).unsqueeze(1)).squeeze(1)

    def localization_map(self, g, f):
        """Sounding-area probability map (B,H,W), every entry in (0, 1)."""
        return torch.sigmoid(self.localization_logits(g, f))

    def classify_audio(self, g):
        return self.head_a(g)

    def classify_visual(self, f):
        """Visual logits from a feature map (pooled first) or a pooled vector."""
        if f.dim() == 4:
            f = f.mean(dim=(2, 3))
        return self.head_v(f)


def save_checkpoint(model: SoundLocModel, path, *, stage: str = "init", extra: dict | None = None):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"kind": CHECKPOINT_KIND, "stage": stage, "seed": model.config.seed,
            "config": model.config.to_dict(), "extra": extra or {}}
    write_archive(path, tensors, meta)


def load_checkpoint(path, expected: ModelConfig | None = None):
    """Load a checkpoint written by :func:`save_checkpoint`.

    Returns ``(model, meta)``. When ``expected`` is given its channel count and
    cluster count must agree with the stored configuration.
    """
    tensors, meta = read_archive(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise VersionMismatchError(f"{path} is not a model checkpoint (kind={meta.get('kind')!r})")
    config = ModelConfig.from_dict(meta["config"])
    if expected is not None:
        for name in ("channels", "num_clusters", "n_frames", "n_mels"):
            if getattr(expected, name) != getattr(config, name):
                raise ShapeMismatchError(
                    f"checkpoint {name}={getattr(config, name)} but expected {getattr(expected, name)}")
    model = SoundLocModel(config)
    own = model.state_dict()
    if set(own) != set(tensors):
        raise VersionMismatchError(f"{path}: tensor names do not match this model version")
    state = {}
    for k, arr in tensors.items():
        if tuple(arr.shape) != tuple(own[k].shape):
            raise ShapeMismatchError(f"{path}: tensor {k} has shape {arr.shape}, model expects {tuple(own[k].shape)}")
        state[k] = torch.from_numpy(np.array(arr))
    model.load_state_dict(state)
    model.eval()
    return model, meta
