"""``soundloc`` command line: data generation, both training stages, evaluation and
single-pair localization.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, SoundLocError

log = logging.getLogger("soundloc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SEED_ENV = "SOUNDLOC_SEED"


class UsageError(SoundLocError):
    pass


# ---------------------------------------------------------------- helpers

class Artifacts:
    """Collects files written under ``out`` and records them in ``artifacts.json``."""

    def __init__(self, out: Path, command: str):
        self.out = out
        self.command = command
        self.files: list[Path] = []
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise UsageError(f"output directory {out} is not writable")

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(p)
        return p

    def add(self, paths):
        self.files.extend(Path(p) for p in paths)

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return p

    def finish(self) -> Path:
        entries = []
        for p in sorted(set(self.files)):
            data = p.read_bytes()
            entries.append({"path": p.relative_to(self.out).as_posix(), "bytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
        manifest = self.out / "artifacts.json"
        manifest.write_text(json.dumps({"command": self.command, "files": entries},
                                       sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return manifest


def _resolve_seed(args) -> int | None:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def _load_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    seed = _resolve_seed(args)
    return cfg.with_seed(seed) if seed is not None else cfg


def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")
    return Path(path)


def _records(args, split, subset):
    from .data import load_manifest, select

    manifest = _require_file(args.manifest, "--manifest")
    root = Path(args.root) if args.root else manifest.parent
    recs = select(load_manifest(manifest), split, subset)
    if not recs:
        raise UsageError(f"manifest has no {split}/{subset} clips")
    return recs, root


def _write_log(path, logbook):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in logbook:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _override_steps(schedule, steps, fields):
    if steps is None:
        return schedule
    if steps < 0:
        raise UsageError("--steps must be non-negative")
    return dataclasses.replace(schedule, **{f: steps for f in fields})


# ---------------------------------------------------------------- commands

def cmd_gen_toy(args) -> int:
    from .data import generate_toy_dataset

    cfg = _load_config(args)
    out = Path(args.out)
    try:
        summary = generate_toy_dataset(cfg.toy, out)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from exc
    arts = Artifacts(out, "gen-toy")
    arts.add(sorted((out / "media").glob("*")))
    arts.add([out / "manifest.jsonl"])
    arts.write_json("config.json", cfg.to_dict())
    arts.finish()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    import torch

    from .archive import write_archive
    from .data import load_arrays
    from .dictionary import assign_categories, save_dictionary
    from .model import save_checkpoint
    from .stage1 import train_stage1

    cfg = _load_config(args)
    schedule = _override_steps(cfg.stage1, args.steps,
                               ("warmup_steps", "loc_steps", "cls_steps", "final_loc_steps"))
    recs, root = _records(args, "single", "train")
    arts = Artifacts(Path(args.out), "train-stage1")
    torch.set_num_threads(args.threads)
    data = load_arrays(recs, root)
    result = train_stage1(data, cfg.model, schedule)
    if (data.labels >= 0).all():
        result.dictionary.category_assignment = assign_categories(
            result.dictionary, data.labels, num_categories=cfg.model.num_categories)
    save_checkpoint(result.model, arts.path("stage1.ckpt"), stage="1",
                    extra={"schedule": dataclasses.asdict(schedule)})
    save_dictionary(result.dictionary, arts.path("dictionary.slarch"))
    write_archive(arts.path("representations.slarch"),
                  {"reps": result.reps, "pseudo_labels": result.pseudo_labels.astype(np.int64)},
                  {"kind": "soundloc-representations", "clip_ids": result.clip_ids})
    _write_log(arts.path("train_log.jsonl"), result.log)
    arts.write_json("config.json", cfg.to_dict())
    arts.finish()
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    import torch

    from .data import load_arrays
    from .dictionary import load_dictionary
    from .model import load_checkpoint, save_checkpoint
    from .stage2 import train_stage2

    if args.dict is None:
        raise UsageError("stage 2 needs the stage-1 object dictionary: pass --dict")
    cfg = _load_config(args)
    s2 = _override_steps(cfg.stage2, args.steps, ("steps",))
    model, _ = load_checkpoint(_require_file(args.stage1, "--stage1"))
    dictionary = load_dictionary(_require_file(args.dict, "--dict"))
    recs, root = _records(args, "multi", "train")
    arts = Artifacts(Path(args.out), "train-stage2")
    torch.set_num_threads(args.threads)
    result = train_stage2(load_arrays(recs, root), model, dictionary, s2)
    save_checkpoint(result.model, arts.path("stage2.ckpt"), stage="2",
                    extra={"stage2": dataclasses.asdict(s2)})
    _write_log(arts.path("train_log.jsonl"), result.log)
    arts.write_json("config.json", cfg.to_dict())
    arts.finish()
    return EXIT_OK


def _load_predictions(path, n, keys):
    try:
        with np.load(_require_file(path, "--predictions")) as z:
            out = {k: np.asarray(z[k], dtype=np.float64) for k in keys if k in z.files}
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read predictions {path}: {exc}") from exc
    if keys[0] not in out:
        raise UsageError(f"predictions file lacks array {keys[0]!r}")
    for k, arr in out.items():
        if len(arr) != n:
            raise UsageError(f"predictions {k!r} has {len(arr)} rows for {n} clips")
    return out


def cmd_eval(args) -> int:
    import torch

    from .data import load_arrays
    from .dictionary import load_dictionary
    from .evaluation import (multi_source_report, predict_multi, single_source_eval,
                             single_source_report)
    from .model import load_checkpoint

    cfg = _load_config(args)
    recs, root = _records(args, args.split, args.subset)
    if args.predictions is None and args.ckpt is None:
        raise UsageError("eval needs --ckpt (with --dict) or --predictions")
    arts = Artifacts(Path(args.out), "eval")
    torch.set_num_threads(args.threads)
    data = load_arrays(recs, root)
    side = data.frames.shape[-1]
    model = dictionary = None
    if args.ckpt is not None:
        model, _ = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
        if args.dict is not None:
            dictionary = load_dictionary(_require_file(args.dict, "--dict"))
    if args.split == "single":
        if args.predictions is not None:
            maps = _load_predictions(args.predictions, len(recs), ("loc_maps",))["loc_maps"]
            report = single_source_report(recs, maps, side)
        else:
            if dictionary is None:
                raise UsageError("single-source eval with a model needs --dict for NMI")
            report = single_source_eval(model, dictionary, data, side)
    else:
        if args.predictions is not None:
            pred = _load_predictions(args.predictions, len(recs), ("class_maps", "raw_maps"))
            class_maps = pred["class_maps"]
            raw = pred.get("raw_maps", class_maps)
        else:
            if dictionary is None or dictionary.category_assignment is None:
                raise UsageError("multi-source eval needs --dict with a cluster-to-category assignment")
            class_maps, raw = predict_multi(model, dictionary, dictionary.category_assignment, data,
                                            cfg.stage2.use_prod)
        report = multi_source_report(recs, class_maps, raw, side, tau=cfg.eval.nsa_tau,
                                     baseline_seed=cfg.eval.baseline_seed)
    report["split"] = args.split
    report["subset"] = args.subset
    arts.write_json("report.json", report)
    arts.finish()
    print(json.dumps({k: v for k, v in report.items() if k != "per_sample"}, sort_keys=True))
    return EXIT_OK


def _overlay(frame_chw, heat):
    """Blend a heatmap (values in [0, 1]) over an RGB frame in red."""
    img = np.transpose(frame_chw, (1, 2, 0)).astype(np.float64)
    h = heat[..., None]
    color = np.concatenate([np.ones_like(h), np.zeros_like(h), np.zeros_like(h)], axis=-1)
    return (1.0 - 0.6 * h) * img + 0.6 * h * color


def cmd_localize(args) -> int:
    import torch
    from PIL import Image

    from .data import load_frame
    from .dictionary import CategoryAssignment, category_activation, load_dictionary
    from .evaluation import upsample
    from .metrics import NoBoxError, heatmap_to_box
    from .model import load_checkpoint
    from .audio import SAMPLE_RATE, HOP_LENGTH
    from .audio import load_spectrogram
    from .stage2 import infer_class_maps, infer_raw_maps

    model, _ = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
    dictionary = load_dictionary(_require_file(args.dict, "--dict"))
    if dictionary.C != model.config.channels:
        raise UsageError(f"dictionary keys have C={dictionary.C} but the checkpoint has "
                         f"C={model.config.channels}")
    frame = load_frame(_require_file(args.image, "--image"))
    if frame.shape[1] % 8 or frame.shape[2] % 8:
        raise UsageError(f"image sides must be multiples of 8, got {frame.shape[1]}x{frame.shape[2]}")
    duration = (model.config.n_frames - 1) * HOP_LENGTH / SAMPLE_RATE
    spec = load_spectrogram(_require_file(args.audio, "--audio"), duration_s=duration)
    arts = Artifacts(Path(args.out), "localize")
    torch.set_num_threads(args.threads)
    s, l = infer_raw_maps(model, dictionary.keys, frame[None], spec[None], use_prod=not args.no_prod)
    assignment = dictionary.category_assignment
    if assignment is None:
        assignment = CategoryAssignment(np.arange(dictionary.K), float("nan"), dictionary.K)
    raw = category_activation(s.astype(np.float64), assignment)[0]
    class_maps = upsample(infer_class_maps(raw), frame.shape[1])
    area = upsample(l[0], frame.shape[1])
    np.savez(arts.path("heatmaps.npz"), class_maps=class_maps, raw_maps=raw, sounding_area=area)
    boxes = []
    for c, cmap in enumerate(class_maps):
        peak = cmap.max()
        norm = cmap / peak if peak > 0 else cmap
        rgb = np.clip(_overlay(frame, norm), 0.0, 1.0)
        Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(arts.path(f"overlay_cat{c}.png"))
        if args.boxes:
            try:
                box = heatmap_to_box(cmap)
            except NoBoxError:
                continue
            score = float(raw[c].mean())
            boxes.append({"category": c, "box": list(box), "score": score})
    if args.boxes:
        arts.write_json("boxes.json", boxes)
    arts.finish()
    return EXIT_OK


def cmd_synth_cocktail(args) -> int:
    from .audio import SAMPLE_RATE, AudioClip, read_wav, write_wav
    from .data import _save_png, load_frame, synthesize_cocktail

    recs, root = _records(args, "single", None)
    by_id = {r.clip_id: r for r in recs}
    missing = [c for c in args.clips if c not in by_id]
    if missing:
        raise UsageError(f"clip ids not in the single split: {missing}")
    chosen = [by_id[c] for c in args.clips]
    seed = _resolve_seed(args)
    rng = np.random.default_rng(0 if seed is None else seed)
    frames = [np.transpose(load_frame(root / r.frame), (1, 2, 0)) for r in chosen]
    audios = []
    for r in chosen:
        clip = read_wav(root / r.audio)
        if clip.sample_rate != SAMPLE_RATE:
            raise UsageError(f"{r.audio} is not sampled at {SAMPLE_RATE} Hz")
        audios.append(clip.samples)
    sample = synthesize_cocktail(frames, audios, [r.category for r in chosen], [r.box for r in chosen], rng)
    arts = Artifacts(Path(args.out), "synth-cocktail")
    _save_png(arts.path("cocktail.png"), sample.frame)
    write_wav(arts.path("cocktail.wav"), AudioClip(sample.audio, SAMPLE_RATE))
    arts.write_json("record.json", {"clip_ids": list(args.clips), "categories": sample.categories,
                                    "sounding": sample.sounding, "boxes": sample.boxes,
                                    "gains": sample.gains, "frame": "cocktail.png",
                                    "audio": "cocktail.wav"})
    arts.finish()
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soundloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, config=True, seed=True, out=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help=f"global seed (falls back to ${SEED_ENV})")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads")

    def manifest(sp):
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--root", help="media root (default: the manifest's directory)")

    sp = sub.add_parser("gen-toy", help="generate the procedural toy dataset")
    common(sp)
    sp.set_defaults(func=cmd_gen_toy)

    sp = sub.add_parser("train-stage1", help="single-source training and dictionary")
    common(sp)
    manifest(sp)
    sp.add_argument("--steps", type=int, help="override the length of every stage-1 phase")
    sp.set_defaults(func=cmd_train_stage1)

    sp = sub.add_parser("train-stage2", help="multi-source training")
    common(sp)
    manifest(sp)
    sp.add_argument("--stage1", required=True, help="stage-1 checkpoint")
    sp.add_argument("--dict", help="stage-1 object dictionary")
    sp.add_argument("--steps", type=int, help="override the number of stage-2 steps")
    sp.set_defaults(func=cmd_train_stage2)

    sp = sub.add_parser("eval", help="metric report over a manifest split")
    common(sp)
    manifest(sp)
    sp.add_argument("--split", choices=("single", "multi"), default="multi")
    sp.add_argument("--subset", choices=("train", "test"), default="test")
    sp.add_argument("--ckpt")
    sp.add_argument("--dict")
    sp.add_argument("--predictions", help="npz with loc_maps (single) or class_maps[, raw_maps] (multi)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("localize", help="class-aware heatmaps for one image/audio pair")
    common(sp, config=False, seed=False)
    sp.add_argument("--image", required=True)
    sp.add_argument("--audio", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--dict", required=True)
    sp.add_argument("--boxes", action="store_true", help="also write boxes.json")
    sp.add_argument("--no-prod", action="store_true", help="skip the silent-area filter")
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("synth-cocktail", help="tile and mix four single-source clips")
    common(sp, config=False)
    manifest(sp)
    sp.add_argument("--clips", nargs=4, required=True, metavar="CLIP_ID")
    sp.set_defaults(func=cmd_synth_cocktail)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SoundLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
