"""Run a trained model over a split and turn its maps into metric reports."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .dictionary import CategoryAssignment, ObjectDictionary, category_activation
from .errors import InvalidInputError
from .stage1 import compute_representations
from .stage2 import infer_class_maps, infer_raw_maps, visual_distribution
from . import kernels


def upsample(maps, size):
    """Bilinear resize of (..., h, w) maps to ``size x size``."""
    maps = np.asarray(maps, dtype=np.float32)
    if maps.shape[-1] == size and maps.shape[-2] == size:
        return maps.astype(np.float64)
    lead = maps.shape[:-2]
    t = torch.from_numpy(maps.reshape(-1, 1, *maps.shape[-2:]))
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up.numpy().reshape(*lead, size, size).astype(np.float64)


def predict_multi(model, dictionary: ObjectDictionary, assignment: CategoryAssignment, arrays,
                  use_prod: bool = True):
    """Category-level raw maps (sum over member clusters) and class maps (N, Ncat, h, w)."""
    s, _ = infer_raw_maps(model, dictionary.keys, arrays.frames, arrays.specs, use_prod)
    raw = category_activation(s.astype(np.float64), assignment)
    return infer_class_maps(raw), raw


def sounding_mass(model, dictionary: ObjectDictionary, assignment: CategoryAssignment, arrays,
                  use_prod: bool = True) -> dict:
    """Mean key-distribution mass on sounding vs silent visible categories of cocktail clips."""
    s, _ = infer_raw_maps(model, dictionary.keys, arrays.frames, arrays.specs, use_prod)
    pv = visual_distribution(torch.as_tensor(s)).numpy()
    per_cat = np.zeros((len(pv), assignment.num_categories))
    np.add.at(per_cat.T, assignment.mapping, pv.T)
    snd, sil = [], []
    for rec, mass in zip(arrays.records, per_cat):
        for cat, flag in zip(rec.categories, rec.sounding):
            (snd if flag else sil).append(mass[cat])
    return {"sounding": float(np.mean(snd)), "silent": float(np.mean(sil))}


def single_source_report(records, loc_maps, image_side) -> dict:
    ious = []
    for rec, lm in zip(records, loc_maps):
        region = metrics.region_mask(upsample(lm, image_side))
        ious.append(metrics.iou(region, rec.box))
    ious = np.array(ious)
    return {"iou@0.5": float((ious >= 0.5).mean()), "auc": metrics.auc(ious),
            "mean_iou": float(ious.mean()), "n": len(ious)}


def _sample_records(rec, class_maps, image_side, perm=None):
    """EvalRecord over the categories visible in a cocktail frame."""
    ious, flags = [], []
    for cat, sounding, box in zip(rec.categories, rec.sounding, rec.boxes):
        src = cat if perm is None else perm[cat]
        region = metrics.region_mask(upsample(class_maps[src], image_side))
        ious.append(metrics.iou(region, box))
        flags.append(bool(sounding))
    return metrics.EvalRecord(ious, flags)


def multi_source_report(records, class_maps, raw_maps, image_side, *, tau=metrics.DEFAULT_NSA_TAU,
                        baseline_seed: int = 0) -> dict:
    """CIoU@0.3, AUC, NSA and sounding mAP over cocktail clips.

    Also reports the same CIoU / mAP with category labels shuffled per sample
    (random-assignment baseline on the same maps).
    """
    if len(records) == 0:
        raise InvalidInputError("empty split")
    n_cat = class_maps.shape[1]
    rng = np.random.default_rng(baseline_seed)
    recs, rand_recs, nsa_samples = [], [], []
    preds, rand_preds, gts = [], [], []
    for i, rec in enumerate(records):
        recs.append(_sample_records(rec, class_maps[i], image_side))
        perm = rng.permutation(n_cat)
        rand_recs.append(_sample_records(rec, class_maps[i], image_side, perm))
        flags = np.zeros(n_cat, dtype=bool)
        for cat, snd in zip(rec.categories, rec.sounding):
            flags[cat] = snd
        nsa_samples.append((raw_maps[i], flags))
        pooled = raw_maps[i].mean(axis=(-2, -1))
        scores = np.exp(pooled - pooled.max())
        scores /= scores.sum()
        for c in range(n_cat):
            up = upsample(class_maps[i][c], image_side)
            try:
                box = metrics.heatmap_to_box(up)
            except metrics.NoBoxError:
                continue
            preds.append((rec.clip_id, c, float(scores[c]), tuple(box)))
            rand_preds.append((rec.clip_id, int(np.flatnonzero(perm == c)[0]), float(scores[c]), tuple(box)))
        for cat, snd, box in zip(rec.categories, rec.sounding, rec.boxes):
            if snd:
                gts.append((rec.clip_id, cat, tuple(box)))
    scores = metrics.ciou_scores(recs)
    return {
        "ciou@0.3": metrics.ciou(recs, 0.3),
        "ciou_mean": float(scores.mean()),
        "auc": metrics.auc(scores),
        "nsa": metrics.nsa(nsa_samples, tau),
        "sounding_map@0.3": metrics.sounding_map(preds, gts, 0.3),
        "random_ciou@0.3": metrics.ciou(rand_recs, 0.3),
        "random_sounding_map@0.3": metrics.sounding_map(rand_preds, gts, 0.3),
        "n": len(records),
        "per_sample": [{"clip_id": r.clip_id, "ciou": float(c)} for r, c in zip(records, scores)],
    }


@torch.no_grad()
def single_source_eval(model, dictionary: ObjectDictionary, arrays, image_side) -> dict:
    """IoU@0.5 / AUC of the sounding-area map plus NMI of nearest-key clusters."""
    model.eval()
    f = model.encode_visual(torch.as_tensor(arrays.frames))
    g = model.encode_audio(torch.as_tensor(arrays.specs))
    report = single_source_report(arrays.records, model.localization_map(g, f).numpy(), image_side)
    labels = arrays.labels
    if (labels >= 0).all():
        reps = compute_representations(model, arrays.frames, arrays.specs)
        clusters, _ = kernels.assign_nearest(reps, dictionary.keys)
        report["nmi"] = metrics.nmi(clusters, labels)
    return report
