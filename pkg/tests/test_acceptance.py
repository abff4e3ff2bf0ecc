"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The learning checks (5 and 6) train on the default 4-category toy set and are
marked slow; the trained seed-0 run is shared between them.
"""
import math
import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from soundloc import metrics
from soundloc.audio import SAMPLE_RATE, AudioClip, log_mel
from soundloc.data import (ToyConfig, downsample2, generate_toy_dataset, load_arrays, load_manifest,
                           render_frame, render_tone, select, synthesize_cocktail)
from soundloc.dictionary import assign_categories, fit_dictionary
from soundloc.evaluation import multi_source_report, predict_multi, sounding_mass
from soundloc.metrics import EvalRecord
from soundloc.model import ModelConfig, SoundLocModel
from soundloc.stage1 import Stage1Schedule, classification_loss, loc_loss, pair_accuracy, pair_logits, train_stage1
from soundloc.stage2 import (Stage2Config, combine_stage2, consistency_loss, suppress_silent, train_stage2,
                             visual_distribution)

import oracles
from instances import (dictionary_from_counts, planted_blobs, random_box, random_detection_case, random_flags,
                       random_grid, random_heatmap)

SEEDS = (0, 1, 2)
# thresholds pinned from the pilot recorded in benchmarks/pilot_record.md
PAIR_ACC_MIN = 0.90
NMI_MIN = 0.80
CIOU_GAP_MIN = 0.25
NSA_MIN = 0.85


def report(capsys, n, name, failures, detail):
    ok = not failures
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] {n} {name}: {detail}", flush=True)
    assert ok, "; ".join(failures)


# ---------------------------------------------------------------- 1. metric oracles

def test_criterion_1_metric_oracles(capsys):
    rng = np.random.default_rng(2024)
    n_inst = 220
    worst = {k: 0.0 for k in ("iou", "ciou", "nsa", "auc", "nmi", "sounding_map")}
    t0 = time.perf_counter()
    for _ in range(n_inst):
        h, w = random_grid(rng)
        mask = rng.random((h, w)) < rng.random()
        box = random_box(rng, h, w)
        want = oracles.iou_sets(oracles.mask_pixels(mask.tolist()), oracles.box_pixels(box, (h, w)))
        worst["iou"] = max(worst["iou"], abs(metrics.iou(mask, box) - want))

        recs, samples = [], []
        n = int(rng.integers(1, 5))
        for _ in range(int(rng.integers(1, 5))):
            flags = random_flags(rng, n, need_true=True)
            maps = [random_heatmap(rng, h, w) for _ in range(n)]
            gts = [random_box(rng, h, w) for _ in range(n)]
            recs.append(EvalRecord([metrics.iou(metrics.region_mask(m), b) for m, b in zip(maps, gts)], flags))
            samples.append(([oracles.iou_sets(oracles.region_pixels(m.tolist()), oracles.box_pixels(b, (h, w)))
                             for m, b in zip(maps, gts)], flags.tolist()))
        worst["ciou"] = max(worst["ciou"], abs(metrics.ciou(recs, 0.3) - oracles.ciou_loop(samples, 0.3)))

        n = int(rng.integers(2, 5))
        maps = np.stack([random_heatmap(rng, h, w) for _ in range(n)])
        flags = random_flags(rng, n, need_false=True)
        got = metrics.nsa_sample(maps, flags, 0.05)
        worst["nsa"] = max(worst["nsa"], abs(got - oracles.nsa_loop(maps.tolist(), flags.tolist(), 0.05)))

        v = rng.random(int(rng.integers(1, 30)))
        v[rng.random(len(v)) < 0.2] = rng.integers(0, 21) / 20
        worst["auc"] = max(worst["auc"], abs(metrics.auc(v) - oracles.auc_loop(v.tolist())))

        m = int(rng.integers(1, 40))
        a, b = rng.integers(0, int(rng.integers(1, 5)), m), rng.integers(0, int(rng.integers(1, 5)), m)
        worst["nmi"] = max(worst["nmi"], abs(metrics.nmi(a, b) - oracles.nmi_loop(a.tolist(), b.tolist())))

        preds, gts = random_detection_case(rng)
        want = oracles.sounding_map_loop(preds, gts, 0.3, (16, 16))
        worst["sounding_map"] = max(worst["sounding_map"], abs(metrics.sounding_map(preds, gts, 0.3) - want))
    elapsed = time.perf_counter() - t0
    failures = [f"{k} off by {v:.1e}" for k, v in worst.items() if v > 1e-9]
    if elapsed >= 30:
        failures.append(f"took {elapsed:.1f}s")
    worst_all = max(worst.values())
    report(capsys, 1, "metric oracle equivalence", failures,
           f"{n_inst} instances x 6 metrics, max abs error {worst_all:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. loss formulas

def test_criterion_2_loss_formulas(capsys):
    t0 = time.perf_counter()
    ln2 = math.log(2.0)
    failures = []
    closed = {
        "loc max 0.5 positive": (loc_loss(torch.tensor([[[0.5, 0.1], [0.2, 0.3]]]), [1.0]).item(), ln2),
        "loc max 0.5 negative": (loc_loss(torch.tensor([[[0.5, 0.1], [0.2, 0.3]]]), [0.0]).item(), ln2),
        "cls uniform": (classification_loss(torch.zeros(5, 4), torch.zeros(5, 4),
                                            torch.tensor([0, 1, 2, 3, 0])).item(), 2 * math.log(4)),
        "kl identity": (consistency_loss(torch.tensor([0.2, 0.3, 0.5]), torch.tensor([0.2, 0.3, 0.5])).item(), 0.0),
        "kl one-hot vs uniform": (consistency_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])).item(), ln2),
        "stage2 sum": (combine_stage2(torch.tensor(0.2), torch.tensor(0.4), 0.5).item(), 0.4),
        "stage2 lambda 0": (combine_stage2(torch.tensor(0.37), torch.tensor(9.0), 0.0).item(), 0.37),
        "visual softmax": (visual_distribution(torch.stack([torch.ones(2, 2), torch.zeros(2, 2)]))[0].item(),
                           math.e / (math.e + 1)),
    }
    for name, (got, want) in closed.items():
        if abs(got - want) > 1e-6:
            failures.append(f"{name}: {got} vs {want}")

    def grad_error(fn, tensors):
        for t in tensors:
            t.grad = None
        fn().backward()
        worst = 0.0
        for t in tensors:
            num = oracles.finite_difference(fn, t)
            worst = max(worst, ((t.grad - num).norm() / max(num.norm().item(), t.grad.norm().item(), 1e-12)).item())
        return worst

    torch.manual_seed(0)
    model = SoundLocModel(ModelConfig(channels=3, width=2)).double()
    with torch.no_grad():
        model.loc_conv.weight.fill_(1.7)
        model.loc_conv.bias.fill_(-0.3)
    g = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
    f = torch.randn(3, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    perm = torch.tensor([1, 2, 0])

    def loc_fn():
        maps, match = pair_logits(model, g, f, perm)
        return loc_loss(maps, match.double(), logits=True)

    err_loc = grad_error(loc_fn, [g, f, model.loc_conv.weight, model.loc_conv.bias])

    keys = torch.randn(3, 4, dtype=torch.float64)
    f2 = torch.randn(2, 4, 2, 2, dtype=torch.float64, requires_grad=True)
    l2 = torch.rand(2, 2, 2, dtype=torch.float64).clamp(0.05, 0.95).requires_grad_(True)
    za = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)

    def kl_fn():
        pv = visual_distribution(suppress_silent(torch.einsum("kc,bchw->bkhw", keys, f2), l2))
        return consistency_loss(pv, torch.softmax(za, dim=-1))

    err_kl = grad_error(kl_fn, [f2, l2, za])
    for name, err in (("localization", err_loc), ("consistency", err_kl)):
        if err > 1e-3:
            failures.append(f"{name} gradient relative error {err:.1e}")
    elapsed = time.perf_counter() - t0
    if elapsed >= 60:
        failures.append(f"took {elapsed:.1f}s")
    report(capsys, 2, "loss formulas", failures,
           f"{len(closed)} closed forms, gradient rel. error loc {err_loc:.1e} / consistency {err_kl:.1e}, "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------- 3. dictionary

def test_criterion_3_dictionary(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    failures = []
    for trial in range(30):
        X = rng.normal(size=(60, 3))
        h = fit_dictionary(X, int(rng.integers(1, 7)), seed=trial).history
        if any(b > a + 1e-9 * max(1.0, a) for a, b in zip(h, h[1:])):
            failures.append(f"objective rose in trial {trial}")
    X, truth = planted_blobs(0)
    blob_nmi = metrics.nmi(fit_dictionary(X, 12, seed=0, n_init=10).labels, truth)
    if blob_nmi != 1.0:
        failures.append(f"planted 12-blob NMI {blob_nmi}")
    mismatches = 0
    for _ in range(500):
        n_cat = int(rng.integers(1, 5))
        K = int(rng.integers(n_cat, 7))
        counts = rng.integers(0, 8, size=(K, n_cat))
        counts[np.arange(n_cat), np.arange(n_cat)] += 1
        d, cats = dictionary_from_counts(counts)
        a = assign_categories(d, cats)
        sizes = counts.sum(axis=1, keepdims=True)
        fr = np.divide(counts, sizes, out=np.zeros(counts.shape), where=sizes > 0)
        want_map, want = oracles.best_map_loop(fr.tolist(), n_cat)
        if abs(a.purity - want) > 1e-9 or a.mapping.tolist() != list(want_map):
            mismatches += 1
    if mismatches:
        failures.append(f"{mismatches}/500 assignments differ from brute force")
    elapsed = time.perf_counter() - t0
    if elapsed >= 60:
        failures.append(f"took {elapsed:.1f}s")
    report(capsys, 3, "dictionary", failures,
           f"30 descent runs, blob NMI {blob_nmi:.3f}, {500 - mismatches}/500 brute-force matches, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4. spectrogram shape

def test_criterion_4_spectrogram_shape(capsys):
    clip = AudioClip(np.random.default_rng(0).normal(0, 0.1, SAMPLE_RATE), SAMPLE_RATE)
    shape = log_mel(clip).shape
    report(capsys, 4, "spectrogram shape", [] if shape == (201, 64) else [f"got {shape}"],
           f"1 s at {SAMPLE_RATE} Hz -> {shape[0]}x{shape[1]}")


# ---------------------------------------------------------------- 5 and 6. toy learning

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-default")
    generate_toy_dataset(ToyConfig(), root)
    recs = load_manifest(root / "manifest.jsonl")
    return {(split, subset): load_arrays(select(recs, split, subset), root)
            for split in ("single", "multi") for subset in ("train", "test")}


@pytest.fixture(scope="module")
def runs(toy):
    """Lazily trained stage-1 models and stage-2 reports keyed by (seed, variant)."""
    stage1, results = {}, {}
    single = toy[("single", "train")]

    def get_stage1(seed, alternate):
        key = (seed, alternate)
        if key not in stage1:
            res = train_stage1(single, ModelConfig(seed=seed), Stage1Schedule(alternate=alternate))
            assignment = assign_categories(res.dictionary, single.labels)
            stage1[key] = (res, assignment)
        return stage1[key]

    def get(seed, variant):
        key = (seed, variant)
        if key not in results:
            t0 = time.perf_counter()
            res, assignment = get_stage1(seed, variant != "noalt")
            cfg = Stage2Config(seed=seed, use_lc=variant != "nolc", use_prod=variant != "noprod")
            model = train_stage2(toy[("multi", "train")], res.model, res.dictionary, cfg).model
            test = toy[("multi", "test")]
            cmaps, raw = predict_multi(model, res.dictionary, assignment, test, cfg.use_prod)
            out = multi_source_report(test.records, cmaps, raw, 64)
            out["stage1"] = res
            out["model"] = model
            out["assignment"] = assignment
            out["seconds"] = time.perf_counter() - t0
            results[key] = out
        return results[key]

    return get


@pytest.mark.slow
def test_criterion_5_end_to_end(capsys, toy, runs):
    t0 = time.perf_counter()
    run = runs(0, "full")
    res = run["stage1"]
    acc = pair_accuracy(res.model, toy[("single", "test")], np.random.default_rng(0))
    nmi = metrics.nmi(res.dictionary.labels, toy[("single", "train")].labels)
    gap = run["ciou@0.3"] - run["random_ciou@0.3"]
    mass = sounding_mass(run["model"], res.dictionary, run["assignment"], toy[("multi", "test")])
    elapsed = time.perf_counter() - t0
    failures = []
    if acc < PAIR_ACC_MIN:
        failures.append(f"pair accuracy {acc:.3f}")
    if nmi < NMI_MIN:
        failures.append(f"NMI {nmi:.3f}")
    if gap < CIOU_GAP_MIN:
        failures.append(f"CIoU gap {gap:.3f}")
    if run["nsa"] < NSA_MIN:
        failures.append(f"NSA {run['nsa']:.3f}")
    if not mass["sounding"] > mass["silent"]:
        failures.append(f"p_v mass sounding {mass['sounding']:.3f} <= silent {mass['silent']:.3f}")
    if elapsed >= 20 * 60:
        failures.append(f"took {elapsed:.0f}s")
    report(capsys, 5, "end-to-end toy learning", failures,
           f"pair acc {acc:.3f}, NMI {nmi:.3f}, CIoU@0.3 {run['ciou@0.3']:.3f} vs random "
           f"{run['random_ciou@0.3']:.3f} (gap {gap:.3f}), NSA {run['nsa']:.3f}, "
           f"p_v mass {mass['sounding']:.3f} sounding / {mass['silent']:.3f} silent, {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.parametrize("variant,name", [("nolc", "without L_c"), ("noprod", "without Prod"),
                                          ("noalt", "without alternation")])
def test_criterion_6_ablation(capsys, runs, variant, name):
    full = [runs(s, "full")["ciou@0.3"] for s in SEEDS]
    ablated = [runs(s, variant)["ciou@0.3"] for s in SEEDS]
    ok = np.mean(ablated) < np.mean(full)
    per_seed = ", ".join(f"{a:.2f}/{b:.2f}" for a, b in zip(full, ablated))
    report(capsys, 6, f"ablation {name}",
           [] if ok else [f"mean CIoU@0.3 {np.mean(ablated):.3f} not below full {np.mean(full):.3f}"],
           f"mean CIoU@0.3 full {np.mean(full):.3f} vs ablated {np.mean(ablated):.3f} "
           f"(per seed full/ablated {per_seed})")


# ---------------------------------------------------------------- 7. synthesis contract

def _check_cocktail(sample, frames, boxes):
    problems = []
    if len(sample.sounding) != 4 or sum(sample.sounding) != 2:
        problems.append(f"sounding flags {sample.sounding}")
    if sorted(sample.categories) != sorted(set(sample.categories)) or len(sample.categories) != 4:
        problems.append(f"categories {sample.categories}")
    side = frames[0].shape[0]
    half = side // 2
    if sample.frame.shape != frames[0].shape:
        problems.append(f"frame shape {sample.frame.shape}")
    quadrants = set()
    for frame, box in zip(frames, sample.boxes):
        oy, ox = (box[1] // half) * half, (box[0] // half) * half
        quadrants.add((oy, ox))
        if not np.allclose(sample.frame[oy:oy + half, ox:ox + half], downsample2(frame)):
            problems.append(f"tile at {(oy, ox)} is not its downsampled solo frame")
    if len(quadrants) != 4:
        problems.append("tiles do not cover the 2x2 grid")
    return problems


def test_criterion_7_synthesis_contract(capsys, tmp_path):
    cfg = ToyConfig(clips_per_category=0, test_clips_per_category=0, multi_train=0, multi_test=0)
    failures = []
    count = [0]

    @settings(max_examples=100, deadline=None, suppress_health_check=list(HealthCheck),
              derandomize=True, database=None)
    @given(st.integers(0, 2**32 - 1), st.permutations(range(4)))
    def generation(seed, cats):
        rng = np.random.default_rng(seed)
        frames, audios, boxes = [], [], []
        for c in cats:
            frame, box = render_frame(cfg, c, rng)
            frames.append(frame)
            boxes.append(box)
            audios.append(render_tone(cfg, c, rng))
        sample = synthesize_cocktail(frames, audios, list(cats), boxes, rng)
        count[0] += 1
        failures.extend(f"seed {seed}: {p}" for p in _check_cocktail(sample, frames, boxes))

    generation()
    summary = generate_toy_dataset(ToyConfig(clips_per_category=1, test_clips_per_category=0,
                                             multi_train=20, multi_test=10, seed=11), tmp_path)
    multi = [r for r in load_manifest(summary["manifest"]) if r.split == "multi"]
    for rec in multi:
        if sum(rec.sounding) != 2 or len(rec.sounding) != 4 or len(set(rec.categories)) != 4:
            failures.append(f"record {rec.clip_id} breaks the 2 sounding / 2 silent layout")
    report(capsys, 7, "synthesis contract", failures[:5],
           f"{count[0]} property generations and {len(multi)} manifest records checked")
