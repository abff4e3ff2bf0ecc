"""Single-source training: correspondence loss, masked object pooling and the
alternating localization / cluster-classification schedule."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .dictionary import ObjectDictionary, class_means, fit_dictionary
from .errors import InvalidInputError
from .model import ModelConfig, SoundLocModel

log = logging.getLogger(__name__)

BINARIZE_THRESHOLD = 0.05
LEARNING_RATE = 1e-4
# the 1x1 conv starts at w=1, b=0 and must reach a logit scale of several units
LOC_CONV_LR = 1e-2
HEAD_LR = 1e-3
SUPERVISION = ("pseudo", "oracle-a", "oracle-v")


def derangement(n: int, rng) -> np.ndarray:
    """Random permutation with no fixed point (n >= 2)."""
    if n < 2:
        raise InvalidInputError("need at least two clips to build mismatched pairs")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def loc_loss(maps, match, *, logits: bool = False):
    """Mean BCE between match labels and the global max of each localization map.

    ``maps`` is (B, H, W): probabilities, or pre-sigmoid logits with ``logits=True``
    (the max commutes with the sigmoid, so both give the same loss).
    """
    if maps.shape[0] == 0:
        raise InvalidInputError("empty pair batch")
    match = torch.as_tensor(match, dtype=maps.dtype, device=maps.device)
    peak = maps.flatten(1).max(dim=1).values
    if logits:
        return F.binary_cross_entropy_with_logits(peak, match)
    return F.binary_cross_entropy(peak, match)


def pair_logits(model, g, f, perm):
    """Localization logits for matched pairs then mismatched pairs ``(a_i, v_perm(i))``."""
    pos = model.localization_logits(g, f)
    neg = model.localization_logits(g, f[perm])
    maps = torch.cat([pos, neg])
    match = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))])
    return maps, match


def extract_object_representation(f, l, binarize_threshold: float = BINARIZE_THRESHOLD):
    """Localization-weighted pooling of a feature map.

    ``f``: (C, H, W) or (B, C, H, W); ``l``: matching (H, W) or (B, H, W)
    probabilities. Cells below ``binarize_threshold`` get weight 0; a sample
    whose mask is empty falls back to weighting by the raw map.
    """
    if not 0.0 < binarize_threshold < 1.0:
        raise InvalidInputError("binarize_threshold must lie in (0, 1)")
    single = f.dim() == 3
    if single:
        f, l = f.unsqueeze(0), l.unsqueeze(0)
    if f.shape[0] != l.shape[0] or f.shape[2:] != l.shape[1:]:
        raise InvalidInputError(f"feature map {tuple(f.shape)} and map {tuple(l.shape)} disagree")
    w = torch.where(l >= binarize_threshold, l, torch.zeros_like(l))
    empty = w.flatten(1).sum(dim=1) <= 0
    w = torch.where(empty[:, None, None], l, w)
    o = torch.einsum("bchw,bhw->bc", f, w) / w.flatten(1).sum(dim=1, keepdim=True)
    return o[0] if single else o


def classification_loss(audio_logits, visual_logits, labels):
    """Cross-entropy of the audio head plus that of the visual head, each averaged over the batch."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    K = audio_logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= K):
        raise InvalidInputError(f"pseudo labels must lie in [0, {K})")
    return F.cross_entropy(audio_logits, labels) + F.cross_entropy(visual_logits, labels)


@dataclass
class Stage1Schedule:
    """Step counts per phase. ``warmup_steps`` replaces ``loc_steps`` in the first
    localization phase; ``final_loc_steps`` closes the run with one more."""

    alternations: int = 4
    warmup_steps: int = 450
    loc_steps: int = 100
    cls_steps: int = 50
    final_loc_steps: int = 100
    batch_size: int = 32
    lr: float = LEARNING_RATE
    loc_lr: float = LOC_CONV_LR
    head_lr: float = HEAD_LR
    n_init: int = 5
    alternate: bool = True
    supervision: str = "pseudo"
    binarize_threshold: float = BINARIZE_THRESHOLD

    def __post_init__(self):
        if self.supervision not in SUPERVISION:
            raise InvalidInputError(f"supervision must be one of {SUPERVISION}")
        counts = (self.alternations, self.warmup_steps, self.loc_steps, self.cls_steps,
                  self.final_loc_steps)
        if min(counts) < 0 or self.batch_size < 2 or self.n_init < 1:
            raise InvalidInputError("invalid schedule")


@dataclass
class Stage1Result:
    model: SoundLocModel
    reps: np.ndarray
    clip_ids: list
    pseudo_labels: np.ndarray
    dictionary: ObjectDictionary
    log: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]
        if n < batch_size:
            yield order


@torch.no_grad()
def compute_representations(model, frames, specs, threshold=BINARIZE_THRESHOLD, chunk=128):
    """Object representations of all clips under the current weights (no gradient)."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(frames), chunk):
        fr = torch.as_tensor(frames[i:i + chunk])
        sp = torch.as_tensor(specs[i:i + chunk])
        f = model.encode_visual(fr)
        g = model.encode_audio(sp)
        out.append(extract_object_representation(f, model.localization_map(g, f), threshold))
    model.train(was_training)
    return torch.cat(out).numpy().astype(np.float64)


def align_labels(new, previous, K):
    """Relabel ``new`` so it overlaps ``previous`` as much as possible (Hungarian matching)."""
    overlap = np.zeros((K, K))
    np.add.at(overlap, (np.asarray(new), np.asarray(previous)), 1.0)
    rows, cols = linear_sum_assignment(-overlap)
    perm = np.empty(K, dtype=np.int64)
    perm[rows] = cols
    return perm


def cluster_step(model, frames, specs, K, seed, previous_labels=None, threshold=BINARIZE_THRESHOLD,
                 clip_ids=None, n_init=1):
    """Extract representations and cluster them; never touches model weights.

    Keeps the lowest-inertia of ``n_init`` k-means++ restarts. With previous
    pseudo labels, cluster indices are permuted to match them so the
    classification heads keep their meaning across rounds.
    """
    reps = compute_representations(model, frames, specs, threshold)
    best = None
    for r in range(n_init):
        d = fit_dictionary(reps, K, seed * 1000 + r, clip_ids=clip_ids)
        if best is None or d.inertia < best.inertia:
            best = d
    if previous_labels is not None:
        perm = align_labels(best.labels, previous_labels, K)
        inv = np.argsort(perm)
        best.labels = perm[best.labels]
        best.keys = best.keys[inv]
    return reps, best


def _loc_phase(model, opt, data, steps, bs, rng, logbook, step0):
    batches = _batches(len(data.frames), bs, rng)
    for s in range(steps):
        idx = next(batches)
        fr = torch.as_tensor(data.frames[idx])
        sp = torch.as_tensor(data.specs[idx])
        f = model.encode_visual(fr)
        g = model.encode_audio(sp)
        maps, match = pair_logits(model, g, f, torch.as_tensor(derangement(len(idx), rng)))
        loss = loc_loss(maps, match, logits=True)
        opt.zero_grad()
        loss.backward()
        opt.step()
        acc = ((maps.flatten(1).max(dim=1).values > 0).float() == match).float().mean()
        logbook.append({"step": step0 + s, "phase": "loc", "loss": float(loss.detach()),
                        "pair_accuracy": float(acc)})
    return step0 + steps


def _cls_phase(model, opt, data, labels, steps, bs, rng, logbook, step0, freeze_encoders=False):
    batches = _batches(len(data.frames), bs, rng)
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    for s in range(steps):
        idx = next(batches)
        fr = torch.as_tensor(data.frames[idx])
        sp = torch.as_tensor(data.specs[idx])
        if freeze_encoders:
            with torch.no_grad():
                f = model.encode_visual(fr)
                g = model.encode_audio(sp)
        else:
            f = model.encode_visual(fr)
            g = model.encode_audio(sp)
        loss = classification_loss(model.classify_audio(g), model.classify_visual(f),
                                   labels_t[torch.as_tensor(idx)])
        opt.zero_grad()
        loss.backward()
        opt.step()
        logbook.append({"step": step0 + s, "phase": "cls", "loss": float(loss.detach())})
    if steps:
        model.heads_trained.fill_(True)
    return step0 + steps


def train_stage1(data, config: ModelConfig, schedule: Stage1Schedule | None = None,
                 model: SoundLocModel | None = None) -> Stage1Result:
    """Alternate [localization] -> [cluster, no gradient] -> [classification].

    ``data`` is a :class:`~soundloc.data.ClipArrays` of single-source clips.
    With ``schedule.alternate`` off, the backbones only see the localization
    loss; one clustering follows and the heads are then fitted on frozen
    features so the audio head exists for the second stage.
    """
    schedule = schedule or Stage1Schedule()
    K = config.num_clusters
    if len(data) < K:
        raise InvalidInputError(f"{len(data)} clips cannot be split into K={K} clusters")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model if model is not None else SoundLocModel(config)
    model.train()
    opt = model.optimizer(schedule.lr, schedule.loc_lr, schedule.head_lr)
    logbook = []
    step = 0
    clip_ids = data.clip_ids
    true_labels = data.labels
    oracle = schedule.supervision != "pseudo"
    if oracle and (true_labels < 0).any():
        raise InvalidInputError("oracle supervision needs a category label on every clip")
    labels = None

    def next_labels(round_idx):
        nonlocal labels
        if oracle:
            labels = true_labels.copy()
        else:
            _, d = cluster_step(model, data.frames, data.specs, K, config.seed + round_idx, labels,
                                schedule.binarize_threshold, clip_ids, schedule.n_init)
            labels = d.labels
        logbook.append({"step": step, "phase": "cluster", "round": round_idx})
        return labels

    bs = min(schedule.batch_size, len(data))
    for a in range(schedule.alternations):
        n_loc = schedule.warmup_steps if a == 0 else schedule.loc_steps
        step = _loc_phase(model, opt, data, n_loc, bs, rng, logbook, step)
        if schedule.alternate and schedule.cls_steps:
            next_labels(a)
            step = _cls_phase(model, opt, data, labels, schedule.cls_steps, bs, rng, logbook, step)
    if schedule.alternations:
        step = _loc_phase(model, opt, data, schedule.final_loc_steps, bs, rng, logbook, step)

    if not schedule.alternate and schedule.cls_steps and schedule.alternations:
        next_labels(0)
        head_params = list(model.head_a.parameters()) + list(model.head_v.parameters())
        head_opt = torch.optim.Adam(head_params, lr=schedule.head_lr)
        step = _cls_phase(model, head_opt, data, labels, schedule.cls_steps * schedule.alternations,
                          bs, rng, logbook, step, freeze_encoders=True)

    model.eval()
    reps = compute_representations(model, data.frames, data.specs, schedule.binarize_threshold)
    if labels is not None:
        # final keys: Lloyd refinement seeded at the classes the heads were trained on
        init = class_means(reps, labels, K)
        dictionary = fit_dictionary(reps, K, config.seed, init=init, clip_ids=clip_ids)
        pseudo = labels
    else:
        dictionary = fit_dictionary(reps, K, config.seed, clip_ids=clip_ids)
        pseudo = dictionary.labels
    return Stage1Result(model=model, reps=reps, clip_ids=clip_ids, pseudo_labels=np.asarray(pseudo),
                        dictionary=dictionary, log=logbook)


@torch.no_grad()
def pair_accuracy(model, data, rng, negatives: str = "category", chunk: int = 128) -> float:
    """Held-out matched-vs-mismatched accuracy with threshold 0.5 on the map maximum.

    ``negatives="category"`` pairs each audio with a frame of a different
    category; ``"clip"`` uses any other clip (a derangement).
    """
    model.eval()
    n = len(data)
    labels = data.labels
    if negatives == "category":
        partner = np.empty(n, dtype=np.int64)
        for i in range(n):
            cand = np.flatnonzero(labels != labels[i])
            partner[i] = rng.choice(cand)
    elif negatives == "clip":
        partner = derangement(n, rng)
    else:
        raise InvalidInputError("negatives must be 'category' or 'clip'")
    f_all, g_all = [], []
    for i in range(0, n, chunk):
        f_all.append(model.encode_visual(torch.as_tensor(data.frames[i:i + chunk])))
        g_all.append(model.encode_audio(torch.as_tensor(data.specs[i:i + chunk])))
    f, g = torch.cat(f_all), torch.cat(g_all)
    pos = model.localization_map(g, f).flatten(1).max(dim=1).values
    neg = model.localization_map(g, f[torch.as_tensor(partner)]).flatten(1).max(dim=1).values
    correct = (pos >= 0.5).sum() + (neg < 0.5).sum()
    return float(correct) / (2 * n)


def snapshot(model) -> dict:
    return copy.deepcopy({k: v.detach().clone() for k, v in model.state_dict().items()})
