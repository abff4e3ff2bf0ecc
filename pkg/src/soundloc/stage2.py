"""Multi-source training and inference: per-key object maps, silent-object
filtering, audio/visual category-distribution alignment and class maps."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .dictionary import CategoryAssignment, ObjectDictionary, category_activation
from .errors import InvalidInputError, ShapeMismatchError, UntrainedHeadError
from .model import SoundLocModel
from .stage1 import LOC_CONV_LR, _batches, derangement, loc_loss, pair_logits

KL_FLOOR = 1e-8
DEFAULT_LAMBDA = 0.5
# a peaked audio distribution pulls the visual encoder towards a shortcut when
# trained long or fast; short, gentle fine-tuning keeps the stage-1 maps
STAGE2_LR = 1e-5
STAGE2_STEPS = 50


def category_maps(f, keys, frozen: bool = True):
    """Inner product of every key with every feature column: (B,C,H,W) x (K,C) -> (B,K,H,W)."""
    keys = torch.as_tensor(keys, dtype=f.dtype)
    if keys.shape[-1] != f.shape[-3]:
        raise ShapeMismatchError(f"keys have {keys.shape[-1]} channels, feature map {f.shape[-3]}")
    if frozen:
        keys = keys.detach()
    if f.dim() == 3:
        return torch.einsum("kc,chw->khw", keys, f)
    return torch.einsum("kc,bchw->bkhw", keys, f)


def suppress_silent(m, l):
    """Hadamard filter ``s^k = m^k * l``; ``l`` broadcasts over the key axis."""
    if m.shape[-2:] != l.shape[-2:]:
        raise ShapeMismatchError(f"maps {tuple(m.shape)} and filter {tuple(l.shape)} disagree")
    return m * l.unsqueeze(-3)


def visual_distribution(s):
    """Softmax over keys of the globally average-pooled maps: (..., K, H, W) -> (..., K)."""
    if s.shape[-3] < 2:
        raise InvalidInputError("need at least two maps for a category distribution")
    return torch.softmax(s.mean(dim=(-2, -1)), dim=-1)


def audio_distribution(model: SoundLocModel, g):
    if not bool(model.heads_trained):
        raise UntrainedHeadError("the audio classification head has not been trained (run stage 1)")
    return torch.softmax(model.classify_audio(g), dim=-1)


def consistency_loss(pv, pa):
    """KL(pv || pa) summed over categories and averaged over leading dimensions.

    Terms with ``pv == 0`` contribute 0; ``pa`` is floored at 1e-8.
    """
    pa = pa.clamp_min(KL_FLOOR)
    pos = pv > 0
    safe = torch.where(pos, pv, torch.ones_like(pv))
    terms = torch.where(pos, pv * (torch.log(safe) - torch.log(pa)), torch.zeros_like(pv))
    kl = terms.sum(dim=-1)
    return kl.mean() if kl.dim() else kl


def combine_stage2(l_c, l_loc, lam: float = DEFAULT_LAMBDA, use_lc: bool = True, use_loc: bool = True):
    """``L_2 = L_c + lam * L_loc`` with either term switchable off."""
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    total = 0.0
    if use_lc:
        total = total + l_c
    if use_loc:
        total = total + lam * l_loc
    return total


def infer_class_maps(s, assignment: CategoryAssignment | None = None):
    """Per-cell softmax over the category axis; clusters are summed into categories first."""
    if assignment is not None:
        s = category_activation(s, assignment)
    if s.shape[-3] < 2:
        raise InvalidInputError("need at least two categories")
    if isinstance(s, np.ndarray):
        z = s - s.max(axis=-3, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-3, keepdims=True)
    return torch.softmax(s, dim=-3)


@dataclass
class Stage2Config:
    steps: int = STAGE2_STEPS
    batch_size: int = 32
    lam: float = DEFAULT_LAMBDA
    lr: float = STAGE2_LR
    loc_lr: float = LOC_CONV_LR
    use_lc: bool = True
    use_loc: bool = True
    use_prod: bool = True
    freeze_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError("lam must be non-negative")
        if self.steps < 0 or self.batch_size < 2:
            raise InvalidInputError("invalid stage-2 schedule")


@dataclass
class Stage2Result:
    model: SoundLocModel
    log: list = field(default_factory=list)


def stage2_forward(model, keys, frames, specs, cfg: Stage2Config, perm=None):
    """Loss terms for one multi-source batch: ``{"l_c", "l_loc", "total", "pv", "pa"}``."""
    f = model.encode_visual(frames)
    g = model.encode_audio(specs)
    m = category_maps(f, keys)
    if cfg.use_prod:
        s = suppress_silent(m, model.localization_map(g, f))
    else:
        s = m
    pv = visual_distribution(s)
    pa = audio_distribution(model, g)
    l_c = consistency_loss(pv, pa)
    if perm is None:
        perm = torch.roll(torch.arange(len(frames)), 1)
    maps, match = pair_logits(model, g, f, perm)
    l_loc = loc_loss(maps, match, logits=True)
    total = combine_stage2(l_c, l_loc, cfg.lam, cfg.use_lc, cfg.use_loc)
    return {"l_c": l_c, "l_loc": l_loc, "total": total, "pv": pv, "pa": pa}


def train_stage2(data, model: SoundLocModel, dictionary: ObjectDictionary | None,
                 cfg: Stage2Config | None = None) -> Stage2Result:
    """Optimize ``L_c + lam * L_loc`` on cocktail clips; dictionary keys stay fixed.

    The stage-1 model is copied, never modified in place.
    """
    if dictionary is None:
        raise InvalidInputError("stage 2 needs the stage-1 object dictionary")
    cfg = cfg or Stage2Config()
    if dictionary.C != model.config.channels:
        raise ShapeMismatchError(f"dictionary has C={dictionary.C}, model C={model.config.channels}")
    if dictionary.K != model.config.num_clusters:
        raise ShapeMismatchError(f"dictionary has K={dictionary.K}, model K={model.config.num_clusters}")
    model = copy.deepcopy(model)
    model.train()
    if cfg.freeze_bn:
        # normalization statistics stay those of the single-source stage
        for mod in model.modules():
            if isinstance(mod, torch.nn.modules.batchnorm._BatchNorm):
                mod.eval()
    keys = torch.as_tensor(dictionary.keys, dtype=torch.float32)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = model.optimizer(cfg.lr, cfg.loc_lr)
    bs = min(cfg.batch_size, len(data))
    batches = _batches(len(data), bs, rng)
    logbook = []
    for step in range(cfg.steps):
        idx = next(batches)
        perm = torch.as_tensor(derangement(len(idx), rng))
        out = stage2_forward(model, keys, torch.as_tensor(data.frames[idx]),
                             torch.as_tensor(data.specs[idx]), cfg, perm)
        if isinstance(out["total"], torch.Tensor) and out["total"].requires_grad:
            opt.zero_grad()
            out["total"].backward()
            opt.step()
        total = out["total"]
        logbook.append({"step": step, "loss": float(torch.as_tensor(total).detach()),
                        "l_c": float(out["l_c"].detach()), "l_loc": float(out["l_loc"].detach())})
    model.eval()
    return Stage2Result(model=model, log=logbook)


@torch.no_grad()
def infer_raw_maps(model, keys, frames, specs, use_prod: bool = True, chunk: int = 128):
    """Filtered per-key maps ``s`` (N,K,H,W) and localization maps ``l`` (N,H,W) as numpy."""
    model.eval()
    keys = torch.as_tensor(keys, dtype=torch.float32)
    s_all, l_all = [], []
    for i in range(0, len(frames), chunk):
        f = model.encode_visual(torch.as_tensor(frames[i:i + chunk]))
        g = model.encode_audio(torch.as_tensor(specs[i:i + chunk]))
        l = model.localization_map(g, f)
        m = category_maps(f, keys)
        s_all.append(suppress_silent(m, l) if use_prod else m)
        l_all.append(l)
    return torch.cat(s_all).numpy(), torch.cat(l_all).numpy()
