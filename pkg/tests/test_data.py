import csv
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch
from PIL import Image

from app.core.config import settings
from app.core.errors import DataError, ShapeError
from app.data import (
    ImagePair,
    augment,
    batches,
    denormalize,
    load_dataset,
    load_oracle,
    normalize,
    scan_directory,
    synth_generate,
    write_dataset,
)
from app.data.pipeline import quantize, read_tags, split_by_tag
from app.data.synth import PEDESTRIAN_HEAT, SynthOracle, render, sample_layout, split_generate
from app.diffusion import Rng
from app.metrics import intensity_spread
from app.schemas.manifests import DatasetManifest
from tests.conftest import make_synth_spec


def _write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def _pair(i: int, size: int = 4, tag: str = "day") -> ImagePair:
    value = i / 20.0
    return ImagePair(
        source=torch.full((3, size, size), value),
        target=torch.full((1, size, size), -value),
        tag=tag,
        id=f"p{i:03d}",
    )


# ---------------------------------------------------------------------------
# Normalization and pairs
# ---------------------------------------------------------------------------

def test_normalize_maps_byte_range_to_unit_interval():
    out = normalize(np.array([0, 255], dtype=np.uint8))
    np.testing.assert_array_equal(out, np.array([-1.0, 1.0], dtype=np.float32))
    assert out.dtype == np.float32


def test_denormalize_round_trip_within_one_level():
    pixels = np.arange(256, dtype=np.uint8)
    back = np.rint(denormalize(torch.from_numpy(normalize(pixels))).numpy() * 255)
    assert np.abs(back - pixels).max() <= 1


def test_quantize_is_idempotent():
    x = torch.rand(1, 5, 5) * 2 - 1
    once = quantize(x)
    assert float((once - x).abs().max()) <= 1 / 255 + 1e-6
    assert torch.equal(quantize(once), once)


def test_image_pair_validation():
    with pytest.raises(ShapeError):
        ImagePair(torch.zeros(3, 4, 4), torch.zeros(1, 5, 4))
    with pytest.raises(DataError):
        ImagePair(torch.full((3, 4, 4), 1.5), torch.zeros(1, 4, 4))
    with pytest.raises(DataError):
        ImagePair(torch.zeros(3, 4, 4), torch.zeros(1, 4, 4), tag="dusk")


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def test_synth_generate_is_deterministic():
    spec = make_synth_spec(32)
    a, _ = synth_generate(spec, 6)
    b, _ = synth_generate(spec, 6)
    assert [p.id for p in a] == [f"synth_{i:06d}" for i in range(6)]
    for pa, pb in zip(a, b):
        assert torch.equal(pa.source, pb.source)
        assert torch.equal(pa.target, pb.target)


def test_synth_values_shapes_and_tags():
    pairs, _ = synth_generate(make_synth_spec(32, mode="mixed"), 4, target_channels=3)
    for p in pairs:
        assert p.source.shape == (3, 32, 32)
        assert p.target.shape == (3, 32, 32)
        assert float(p.source.abs().max()) <= 1.0
        assert torch.equal(p.target[0], p.target[2])
    assert [p.tag for p in pairs] == ["day", "night", "day", "night"]


def test_synth_offset_continues_the_sequence():
    spec = make_synth_spec(32)
    full, _ = synth_generate(spec, 5)
    tail, _ = synth_generate(spec, 2, offset=3)
    assert [p.id for p in tail] == ["synth_000003", "synth_000004"]
    assert torch.equal(tail[0].source, full[3].source)


def test_pedestrians_are_the_hottest_objects():
    spec = make_synth_spec(64, pedestrians=(2, 3), vehicles=(0, 0), water=(0, 0))
    yy, xx = np.mgrid[0:64, 0:64].astype(np.float64) + 0.5
    for index in range(5):
        layout = sample_layout(spec, index)
        _, thermal = render(layout, 64)
        mask = np.zeros((64, 64), dtype=bool)
        for person in layout.pedestrians:
            mask |= ((xx - person.cx) / person.rx) ** 2 + ((yy - person.cy) / person.ry) ** 2 <= 1.0
        assert mask.any()
        assert thermal[mask].min() == pytest.approx(PEDESTRIAN_HEAT, abs=1 / 255)
        assert thermal[mask].min() > np.percentile(thermal[~mask], 90)


def test_thermal_ignores_clothing_colour():
    spec = make_synth_spec(64, pedestrians=(1, 1), vehicles=(0, 0), water=(0, 0))
    layout = sample_layout(spec, 0)
    recoloured = layout.model_copy(deep=True)
    recoloured.pedestrians[0].color = (0.9, 0.1, 0.1)
    rgb_a, thermal_a = render(layout, 64)
    rgb_b, thermal_b = render(recoloured, 64)
    np.testing.assert_array_equal(thermal_a, thermal_b)
    assert not np.array_equal(rgb_a, rgb_b)


def test_layout_does_not_depend_on_mode():
    day = sample_layout(make_synth_spec(32, mode="day"), 4)
    night = sample_layout(make_synth_spec(32, mode="night"), 4)
    assert day.model_dump(exclude={"night"}) == night.model_dump(exclude={"night"})


def test_night_scenes_have_compressed_thermal_range():
    day, _ = synth_generate(make_synth_spec(32, mode="day", water=(0, 0)), 10)
    night, _ = synth_generate(make_synth_spec(32, mode="night", water=(0, 0)), 10)
    for d, n in zip(day, night):
        assert float(n.target.std()) < float(d.target.std())
        assert float(n.source.mean()) < float(d.source.mean())


def test_water_reverses_between_day_and_night():
    spec = make_synth_spec(64, pedestrians=(0, 0), vehicles=(0, 0), water=(1, 1))
    layout = sample_layout(spec, 2)
    body = layout.water[0]
    y, x = int(body.cy), int(body.cx)
    _, day = render(layout, 64)
    _, night = render(layout.model_copy(update={"night": True}), 64)
    assert day[y, x] < np.median(day)
    assert night[y, x] > np.median(night)


def test_day_intensity_spread_exceeds_night():
    day, _ = synth_generate(make_synth_spec(32, mode="day"), 100)
    night, _ = synth_generate(make_synth_spec(32, mode="night"), 100)
    spread_day = intensity_spread([p.target for p in day])
    spread_night = intensity_spread([p.target for p in night])
    assert spread_day.std_dev > spread_night.std_dev
    assert spread_day.iqr > spread_night.iqr


def test_degenerate_spec_is_rejected():
    with pytest.raises(DataError):
        synth_generate(make_synth_spec(64, pedestrian_height=(0.0, 0.01)), 2)
    with pytest.raises(DataError):
        synth_generate(make_synth_spec(16), 0)


def test_oracle_maps_generated_sources_to_targets():
    pairs, oracle = synth_generate(make_synth_spec(32), 4)
    for p in pairs:
        assert torch.equal(oracle(p.source), p.target)
    assert len(oracle) == 4
    with pytest.raises(DataError):
        oracle(torch.zeros(3, 32, 32))


def test_oracle_json_round_trip():
    pairs, oracle = synth_generate(make_synth_spec(32, mode="mixed"), 3)
    restored = SynthOracle.from_json(oracle.to_json())
    assert torch.equal(restored(pairs[1].source), pairs[1].target)


def test_split_generate_partitions_indices():
    splits = split_generate(make_synth_spec(32, test_fraction=0.25), 8)
    train_ids = {p.id for p in splits["train"][0]}
    test_ids = {p.id for p in splits["test"][0]}
    assert len(train_ids) == 6 and len(test_ids) == 2
    assert not train_ids & test_ids


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------

def test_augment_flip_is_an_involution_on_aligned_pairs():
    pair, = synth_generate(make_synth_spec(32), 1)[0]
    flipped = augment(pair, Rng(0), force=True)
    assert torch.equal(flipped.source, torch.flip(pair.source, dims=[-1]))
    assert torch.equal(flipped.target, torch.flip(pair.target, dims=[-1]))
    assert flipped.tag == pair.tag and flipped.id == pair.id
    back = augment(flipped, Rng(0), force=True)
    assert torch.equal(back.source, pair.source)
    assert augment(pair, Rng(0), force=False) is pair


def test_batches_keep_final_partial_batch():
    pairs = [_pair(i) for i in range(10)]
    sizes = [b.x.shape[0] for b in batches(pairs, 4)]
    assert sizes == [4, 4, 2]


def test_shuffled_batches_are_a_deterministic_permutation():
    pairs = [_pair(i) for i in range(10)]
    first = [i for b in batches(pairs, 3, shuffle_seed=5) for i in b.ids]
    again = [i for b in batches(pairs, 3, shuffle_seed=5) for i in b.ids]
    other_epoch = [i for b in batches(pairs, 3, shuffle_seed=5, epoch=1) for i in b.ids]
    assert first == again
    assert sorted(first) == sorted(p.id for p in pairs)
    assert first != other_epoch


def test_batch_rows_stay_aligned():
    pairs = [_pair(i) for i in range(5)]
    for batch in batches(pairs, 2, shuffle_seed=1):
        for row, pair_id in enumerate(batch.ids):
            i = int(pair_id[1:])
            assert float(batch.x[row, 0, 0, 0]) == pytest.approx(i / 20.0)
            assert float(batch.y0[row, 0, 0, 0]) == pytest.approx(-i / 20.0)


def test_batches_reject_empty_dataset_and_bad_size():
    with pytest.raises(DataError):
        list(batches([], 4))
    with pytest.raises(ValueError):
        list(batches([_pair(0)], 0))


def test_split_by_tag():
    day, night = split_by_tag([_pair(0, tag="day"), _pair(1, tag="night"), _pair(2, tag="untagged")])
    assert [p.id for p in day] == ["p000"]
    assert [p.id for p in night] == ["p001"]


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------

def test_write_scan_load_round_trip(tmp_path):
    pairs, oracle = synth_generate(make_synth_spec(32, mode="mixed"), 5)
    root = tmp_path / "data"
    write_dataset(pairs, str(root), "test", oracle)

    assert (root / "test" / "manifest.json").exists()
    with open(root / "test" / "tags.csv") as f:
        rows = list(csv.DictReader(f))
    assert {r["id"]: r["tag"] for r in rows} == {p.id: p.tag for p in pairs}

    manifest = scan_directory(str(root), "test")
    assert [e.id for e in manifest.entries] == [p.id for p in pairs]
    loaded = load_dataset(manifest, image_size=32, workers=3)
    for original, back in zip(pairs, loaded):
        assert back.id == original.id and back.tag == original.tag
        assert float((back.source - original.source).abs().max()) <= 1 / 255
        assert float((back.target - original.target).abs().max()) <= 1 / 255

    restored = load_oracle(str(root), "test")
    assert torch.equal(restored(loaded[2].source), pairs[2].target)


def test_decoding_pool_size_comes_from_decode_setting(tmp_path, monkeypatch):
    pairs, _ = synth_generate(make_synth_spec(16), 4)
    write_dataset(pairs, str(tmp_path), "train")
    sizes = []

    class RecordingPool(ThreadPoolExecutor):
        def __init__(self, max_workers=None, **kwargs):
            sizes.append(max_workers)
            super().__init__(max_workers=max_workers, **kwargs)

    monkeypatch.setattr("app.data.pipeline.ThreadPoolExecutor", RecordingPool)
    monkeypatch.setattr(settings, "DECODE_WORKERS", 3)
    monkeypatch.setattr(settings, "EVAL_WORKERS", 1)
    loaded = load_dataset(scan_directory(str(tmp_path), "train"), image_size=16)
    assert sizes == [3]
    assert [p.id for p in loaded] == sorted(p.id for p in pairs)


def test_write_dataset_refuses_non_empty_split(tmp_path):
    pairs, _ = synth_generate(make_synth_spec(16), 2)
    write_dataset(pairs, str(tmp_path), "train")
    with pytest.raises(DataError):
        write_dataset(pairs, str(tmp_path), "train")


def test_load_oracle_missing(tmp_path):
    with pytest.raises(DataError):
        load_oracle(str(tmp_path), "test")


def test_load_normalizes_8bit_extremes(tmp_path):
    _write_png(tmp_path / "train" / "rgb" / "a.png", np.full((4, 4, 3), 255, dtype=np.uint8))
    _write_png(tmp_path / "train" / "thermal" / "a.png", np.zeros((4, 4), dtype=np.uint8))
    pair, = load_dataset(scan_directory(str(tmp_path), "train"), image_size=None)
    assert torch.all(pair.source == 1.0)
    assert torch.all(pair.target == -1.0)
    assert pair.tag == "untagged"


def test_load_resizes_to_image_size(tmp_path):
    _write_png(tmp_path / "train" / "rgb" / "a.png", np.zeros((20, 20, 3), dtype=np.uint8))
    _write_png(tmp_path / "train" / "thermal" / "a.png", np.zeros((20, 20), dtype=np.uint8))
    pair, = load_dataset(scan_directory(str(tmp_path), "train"), image_size=8)
    assert pair.source.shape == (3, 8, 8) and pair.target.shape == (1, 8, 8)


def test_sixteen_bit_thermal_uses_global_clip(tmp_path):
    raw = np.linspace(1000, 5000, 64, dtype=np.float64).reshape(8, 8).astype(np.uint16)
    _write_png(tmp_path / "train" / "rgb" / "a.png", np.zeros((8, 8, 3), dtype=np.uint8))
    _write_png(tmp_path / "train" / "thermal" / "a.png", raw)
    manifest = scan_directory(str(tmp_path), "train")
    lo, hi = manifest.thermal_clip
    assert lo == pytest.approx(np.percentile(raw, 1))
    assert hi == pytest.approx(np.percentile(raw, 99))
    pair, = load_dataset(manifest, image_size=None)
    assert float(pair.target.min()) == pytest.approx(-1.0)
    assert float(pair.target.max()) == pytest.approx(1.0)
    assert float(pair.target[0, 4, 4]) > float(pair.target[0, 2, 2])


def test_missing_thermal_file_names_the_id(tmp_path):
    _write_png(tmp_path / "train" / "rgb" / "lonely.png", np.zeros((4, 4, 3), dtype=np.uint8))
    (tmp_path / "train" / "thermal").mkdir(parents=True)
    with pytest.raises(DataError, match="lonely"):
        scan_directory(str(tmp_path), "train")


def test_undecodable_file_raises_data_error(tmp_path):
    _write_png(tmp_path / "train" / "thermal" / "bad.png", np.zeros((4, 4), dtype=np.uint8))
    (tmp_path / "train" / "rgb").mkdir(parents=True)
    (tmp_path / "train" / "rgb" / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_dataset(scan_directory(str(tmp_path), "train"))


def test_missing_layout_raises_data_error(tmp_path):
    with pytest.raises(DataError):
        scan_directory(str(tmp_path / "nowhere"), "train")


def test_empty_manifest_loads_nothing(tmp_path):
    assert load_dataset(DatasetManifest(root=str(tmp_path), split="train")) == []


def test_tags_csv_rejects_unknown_tags(tmp_path):
    path = tmp_path / "tags.csv"
    path.write_text("id,tag\na,dusk\n")
    with pytest.raises(DataError):
        read_tags(path)


def test_manifest_json_is_readable(tmp_path):
    pairs, _ = synth_generate(make_synth_spec(16), 2)
    write_dataset(pairs, str(tmp_path), "val")
    payload = json.loads((tmp_path / "val" / "manifest.json").read_text())
    assert payload["split"] == "val"
    assert len(payload["entries"]) == 2
