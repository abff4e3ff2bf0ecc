import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soundloc import data
from soundloc.data import ClipRecord, ToyConfig, synthesize_cocktail
from soundloc.errors import InvalidInputError, PartitionError, SchemaError

CFG = ToyConfig()


def solos(seed, cats=(0, 1, 2, 3)):
    rng = np.random.default_rng(seed)
    frames, audios, boxes = [], [], []
    for c in cats:
        f, b = data.render_frame(CFG, c, rng)
        frames.append(f)
        boxes.append(b)
        audios.append(data.render_tone(CFG, c, rng))
    return frames, audios, list(cats), boxes


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


# ---------------------------------------------------------------- manifests

def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert data.load_manifest(tmp_path / "m.jsonl") == []


def test_manifest_round_trip(tmp_path):
    recs = [ClipRecord("a", "a.wav", "a.png", "single", category=1, box=[0, 0, 3, 3]),
            ClipRecord("b", "b.wav", "b.png", "single", subset="test", category=0, box=[1, 2, 5, 6]),
            ClipRecord("c", "c.wav", "c.png", "multi", categories=[0, 1, 2, 3],
                       sounding=[True, False, True, False], boxes=[[0, 0, 2, 2]] * 4)]
    data.write_manifest(tmp_path / "m.jsonl", recs)
    assert data.load_manifest(tmp_path / "m.jsonl") == recs


def test_manifest_partition_error(tmp_path):
    write_lines(tmp_path / "m.jsonl", [
        {"clip_id": "x", "audio": "x.wav", "frame": "x.png", "split": "single", "category": 0},
        {"clip_id": "x", "audio": "x.wav", "frame": "x.png", "split": "multi", "categories": [0],
         "sounding": [True], "boxes": [[0, 0, 1, 1]]}])
    with pytest.raises(PartitionError):
        data.load_manifest(tmp_path / "m.jsonl")


@pytest.mark.parametrize("bad", [
    "{not json",
    json.dumps([1, 2]),
    json.dumps({"clip_id": "x", "audio": "a", "frame": "f"}),
    json.dumps({"clip_id": "x", "audio": "a", "frame": "f", "split": "single", "extra": 1}),
    json.dumps({"clip_id": "x", "audio": "a", "frame": "f", "split": "both"}),
    json.dumps({"clip_id": "x", "audio": "a", "frame": "f", "split": "single", "box": [3, 0, 1, 2]}),
    json.dumps({"clip_id": "x", "audio": "a", "frame": "f", "split": "multi", "categories": [0],
                "sounding": [], "boxes": []}),
])
def test_manifest_schema_errors_carry_line(tmp_path, bad):
    good = json.dumps({"clip_id": "ok", "audio": "a", "frame": "f", "split": "single"})
    (tmp_path / "m.jsonl").write_text(good + "\n" + bad + "\n")
    with pytest.raises(SchemaError) as info:
        data.load_manifest(tmp_path / "m.jsonl")
    assert info.value.line == 2


# ---------------------------------------------------------------- synthesis

def test_cocktail_geometry_and_flags():
    s = synthesize_cocktail(*solos(0), np.random.default_rng(1))
    assert s.frame.shape == (64, 64, 3)
    assert sum(s.sounding) == 2
    assert sorted(s.categories) == [0, 1, 2, 3]


def test_cocktail_deterministic():
    a = synthesize_cocktail(*solos(0), np.random.default_rng(9))
    b = synthesize_cocktail(*solos(0), np.random.default_rng(9))
    assert np.array_equal(a.frame, b.frame) and np.array_equal(a.audio, b.audio)
    assert a.boxes == b.boxes and a.sounding == b.sounding


def test_cocktail_errors():
    f, a, c, b = solos(0)
    with pytest.raises(InvalidInputError):
        synthesize_cocktail(f, a, [0, 0, 1, 2], b, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        synthesize_cocktail(f, a[:3] + [a[3][:100]], c, b, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        synthesize_cocktail(f[:3], a[:3], c[:3], b[:3], np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cocktail_properties(seed):
    f, a, c, b = solos(seed % 1000)
    s = synthesize_cocktail(f, a, c, b, np.random.default_rng(seed))
    assert sum(s.sounding) == 2 and len(s.sounding) == 4
    # audio is the gain-weighted sum of the two sounding sources
    mix = sum(g * np.asarray(x) for g, x in zip(s.gains, a))
    np.testing.assert_allclose(s.audio, mix, atol=1e-12)
    assert rms(s.audio) <= sum(g * rms(x) for g, x in zip(s.gains, a)) + 1e-12
    assert np.abs(s.audio).max() == pytest.approx(data.MIX_PEAK)
    # each box lies inside a distinct tile
    tiles = set()
    for x0, y0, x1, y1 in s.boxes:
        r, col = y0 // 32, x0 // 32
        assert (y1 - 1) // 32 == r and (x1 - 1) // 32 == col
        tiles.add((r, col))
    assert len(tiles) == 4


def test_cocktail_box_covers_tile_shape():
    f, a, c, b = solos(4)
    s = synthesize_cocktail(f, a, c, b, np.random.default_rng(0))
    for i, (x0, y0, x1, y1) in enumerate(s.boxes):
        # the shape's halved box fits inside the tile box and touches its borders
        sx0, sy0, sx1, sy1 = b[i]
        assert x1 - x0 == -(-sx1 // 2) - sx0 // 2 and y1 - y0 == -(-sy1 // 2) - sy0 // 2


# ---------------------------------------------------------------- rendering

@pytest.mark.parametrize("category", range(8))
def test_box_exactly_covers_shape(category):
    cfg = ToyConfig(num_categories=8, multi_train=0, multi_test=0)
    frame, (x0, y0, x1, y1) = data.render_frame(cfg, category, np.random.default_rng(category))
    inside = frame[y0:y1, x0:x1].reshape(-1, 3)
    vals, counts = np.unique(inside, axis=0, return_counts=True)
    color = vals[counts.argmax()]
    mask = (frame == color).all(axis=-1)
    rows, cols = np.nonzero(mask)
    assert (cols.min(), rows.min(), cols.max() + 1, rows.max() + 1) == (x0, y0, x1, y1)


def test_shape_masks_fill_their_box():
    for shape in data.SHAPES:
        m = data.shape_mask(shape, 30)
        assert m[0].any() and m[-1].any() and m[:, 0].any() and m[:, -1].any()


def test_tones_separated_by_a_mel_band():
    from soundloc.audio import N_MELS, hz_to_mel

    band = hz_to_mel(8000.0) / (N_MELS + 1)
    mels = sorted(hz_to_mel(np.array(data.TONES_HZ)))
    assert min(np.diff(mels)) >= band


def test_toy_config_validation():
    with pytest.raises(InvalidInputError):
        ToyConfig(num_categories=9)
    with pytest.raises(InvalidInputError):
        ToyConfig(missing_categories=4)
    with pytest.raises(InvalidInputError):
        ToyConfig(noise_rate=1.5)
    with pytest.raises(InvalidInputError):
        ToyConfig(image_side=40)


# ---------------------------------------------------------------- generation

def test_generated_dataset(tiny_toy):
    recs = tiny_toy["records"]
    single = [r for r in recs if r.split == "single"]
    multi = [r for r in recs if r.split == "multi"]
    assert len(single) == 4 * (6 + 2) and len(multi) == 8
    assert not {r.clip_id for r in single} & {r.clip_id for r in multi}
    for r in multi:
        assert sum(r.sounding) == 2 and len(r.boxes) == 4
    for r in recs:
        assert (tiny_toy["root"] / r.audio).exists() and (tiny_toy["root"] / r.frame).exists()


def test_generated_counts(tmp_path):
    cfg = ToyConfig(clips_per_category=100, test_clips_per_category=0, multi_train=0, multi_test=0,
                    duration_s=0.05)
    out = data.generate_toy_dataset(cfg, tmp_path)
    assert out["counts"] == {"single/train": 400}


def test_missing_category_knob(tmp_path):
    cfg = ToyConfig(clips_per_category=2, test_clips_per_category=0, multi_train=6, multi_test=0,
                    missing_categories=1, duration_s=0.05)
    data.generate_toy_dataset(cfg, tmp_path)
    recs = data.load_manifest(tmp_path / "manifest.jsonl")
    assert {r.category for r in recs if r.split == "single"} == {0, 1, 2}
    assert all(3 in r.categories for r in recs if r.split == "multi")


def test_noise_rate_knob(tmp_path):
    cfg = ToyConfig(clips_per_category=25, test_clips_per_category=0, multi_train=0, multi_test=0,
                    noise_rate=0.1, duration_s=0.05)
    out = data.generate_toy_dataset(cfg, tmp_path)
    assert abs(out["noisy"] - 10) <= 1
    recs = data.load_manifest(tmp_path / "manifest.jsonl")
    assert sum(r.noisy for r in recs) == out["noisy"]


def test_generation_deterministic(tmp_path):
    cfg = ToyConfig(clips_per_category=1, test_clips_per_category=0, multi_train=2, multi_test=0,
                    duration_s=0.05)
    data.generate_toy_dataset(cfg, tmp_path / "a")
    data.generate_toy_dataset(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*.*")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(InvalidInputError):
        data.generate_toy_dataset(ToyConfig(), blocker / "sub")


def test_load_arrays(tiny_arrays):
    arr = tiny_arrays[("single", "train")]
    assert arr.frames.shape == (24, 3, 64, 64) and arr.frames.dtype == np.float32
    assert arr.specs.shape == (24, 201, 64)
    assert sorted(set(arr.labels.tolist())) == [0, 1, 2, 3]
    sub = arr.subset([0, 2])
    assert sub.clip_ids == [arr.clip_ids[0], arr.clip_ids[2]]
