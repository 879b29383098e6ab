import json

import numpy as np
import pytest

from cmstew.data import (Dataset, DatasetError, SegmentClip, SyntheticSpec, generate_synthetic,
                         load_dataset, save_dataset, shift_labels, standardize, window_clips)
from cmstew.numerics import ConfigError


def small_spec(**kw):
    base = dict(train_clips=6, dev_clips=3, clip_len=10, seed=1)
    base.update(kw)
    return SyntheticSpec(**base)


# -- label shift ----------------------------------------------------------------

def test_shift_of_2_8_seconds_is_70_frames():
    labels = np.arange(200.0)
    out = shift_labels(labels, 2.8, 0.04)
    assert out[0] == 70.0
    assert out[129] == 199.0
    assert (out[130:] == 199.0).all()
    assert out.shape == labels.shape


def test_shift_small_example_and_identity():
    assert shift_labels([1, 2, 3, 4, 5], 0.08, 0.04).tolist() == [3, 4, 5, 5, 5]
    labels = np.array([0.1, 0.2, 0.3])
    assert shift_labels(labels, 0.0).tolist() == labels.tolist()
    with pytest.raises(ConfigError):
        shift_labels(labels, 0.2, 0.04)
    with pytest.raises(ConfigError):
        shift_labels(labels, 0.05, 0.04)


# -- windows -------------------------------------------------------------------

def test_five_minute_recording_gives_298_clips():
    rec = np.zeros((7500, 2), dtype=np.float32)
    clips = window_clips(rec, np.zeros(7500))
    assert len(clips) == (7500 - 75) // 25 + 1 == 298
    assert all(c.n_segments == 75 for c in clips)


def test_window_edge_cases():
    rec = np.arange(75 * 2, dtype=np.float32).reshape(75, 2)
    assert len(window_clips(rec, np.zeros(75))) == 1
    with pytest.raises(ConfigError):
        window_clips(rec[:50], np.zeros(50))


def test_non_overlapping_windows_reconstruct_recording():
    rng = np.random.default_rng(0)
    rec = {"a": rng.standard_normal((300, 3)), "v": rng.standard_normal((300, 2))}
    labels = rng.standard_normal(300)
    clips = window_clips(rec, labels, 3.0, 3.0)
    assert len(clips) == 4
    np.testing.assert_array_equal(np.concatenate([c.features["a"] for c in clips]), rec["a"])
    np.testing.assert_array_equal(np.concatenate([c.features["v"] for c in clips]), rec["v"])
    np.testing.assert_array_equal(np.concatenate([c.labels for c in clips]),
                                  labels.astype(np.float32))


# -- clips and IO -----------------------------------------------------------------

def test_clip_rejects_mismatched_lengths():
    with pytest.raises(DatasetError, match="c7"):
        SegmentClip("c7", {"a": np.zeros((5, 2)), "v": np.zeros((4, 2))}, np.zeros(5))


def test_round_trip_is_bit_identical(tmp_path):
    ds = generate_synthetic(small_spec())
    manifest = save_dataset(ds, tmp_path / "ds")
    back = load_dataset(manifest)
    assert back.task == ds.task and back.modalities == ds.modalities
    for split in ds.splits:
        assert [c.clip_id for c in back.splits[split]] == [c.clip_id for c in ds.splits[split]]
        for a, b in zip(ds.splits[split], back.splits[split]):
            np.testing.assert_array_equal(a.labels, b.labels)
            for m in a.features:
                assert a.features[m].dtype == b.features[m].dtype == np.float32
                np.testing.assert_array_equal(a.features[m], b.features[m])


def test_load_restricted_to_one_modality(tmp_path):
    ds = generate_synthetic(small_spec())
    manifest = save_dataset(ds, tmp_path / "ds")
    for split in ("train", "dev", "test"):
        for clip in ds.splits[split]:
            (tmp_path / "ds" / split / f"{clip.clip_id}.strong.csv").unlink(missing_ok=True)
    only_weak = load_dataset(manifest, ["weak"])
    assert set(only_weak.split("dev")[0].features) == {"weak"}
    with pytest.raises(DatasetError, match="missing file"):
        load_dataset(manifest)


def write_manifest(root, entries, dims=None):
    manifest = {"task": "classification", "modalities": dims or {"a": 2},
                "splits": {"train": entries, "dev": []}}
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root / "manifest.json"


def test_loader_errors_name_file_and_row(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n3,oops\n")
    (tmp_path / "y.csv").write_text("1\n")
    path = write_manifest(tmp_path, [{"clip_id": "c1", "features": {"a": "x.csv"}, "labels": "y.csv"}])
    with pytest.raises(DatasetError, match=r"x\.csv: row 2 has a non-numeric cell"):
        load_dataset(path)
    (tmp_path / "x.csv").write_text("1,2\n3\n")
    with pytest.raises(DatasetError, match=r"row 2 has 1 columns"):
        load_dataset(path)


def test_utterance_label_expanded_and_empty_split(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n3,4\n5,6\n")
    (tmp_path / "y.csv").write_text("1\n")
    path = write_manifest(tmp_path, [{"clip_id": "c1", "features": {"a": "x.csv"}, "labels": "y.csv"}])
    ds = load_dataset(path)
    assert ds.split("train")[0].labels.tolist() == [1.0, 1.0, 1.0]
    assert ds.split("dev") == []
    with pytest.raises(DatasetError, match="available"):
        ds.split("holdout")


def test_clip_in_two_splits_rejected(tmp_path):
    (tmp_path / "x.csv").write_text("1,2\n")
    (tmp_path / "y.csv").write_text("1\n")
    entry = {"clip_id": "c1", "features": {"a": "x.csv"}, "labels": "y.csv"}
    manifest = {"task": "classification", "modalities": {"a": 2},
                "splits": {"train": [entry], "dev": [entry]}}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="both"):
        load_dataset(tmp_path / "manifest.json")


# -- standardisation -------------------------------------------------------------

def test_standardize_train_statistics():
    ds = generate_synthetic(small_spec(train_clips=20))
    for clip in ds.splits["train"]:
        clip.features["strong"][:, 0] = 3.0  # constant column
    out = standardize(ds)
    stacked = np.concatenate([c.features["weak"] for c in out.splits["train"]]).astype(np.float64)
    np.testing.assert_allclose(stacked.mean(0), 0, atol=1e-5)
    np.testing.assert_allclose(stacked.std(0), 1, atol=1e-3)
    strong = np.concatenate([c.features["strong"] for c in out.splits["train"]])
    assert (strong[:, 0] == 0).all()
    twice = standardize(out)
    for a, b in zip(out.splits["dev"], twice.splits["dev"]):
        np.testing.assert_allclose(a.features["weak"], b.features["weak"], atol=1e-5)


def test_standardize_needs_train():
    with pytest.raises(DatasetError):
        standardize(Dataset("classification", {"a": 1}, {"train": []}))


# -- synthetic generator -------------------------------------------------------------

def test_synthetic_determinism_and_shapes():
    spec = small_spec()
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for x, y in zip(a.splits["train"], b.splits["train"]):
        np.testing.assert_array_equal(x.features["strong"], y.features["strong"])
        np.testing.assert_array_equal(x.features["weak"], y.features["weak"])
        np.testing.assert_array_equal(x.labels, y.labels)
    clip = a.splits["train"][0]
    assert clip.features["strong"].shape == (10, spec.strong_dim)
    assert clip.features["weak"].shape == (10, spec.weak_dim)
    assert len(set(clip.labels.tolist())) == 1
    assert len(a.splits["dev"]) == 3


def test_synthetic_regression_labels():
    ds = generate_synthetic(small_spec(label_rule="tanh"))
    assert ds.task == "regression"
    labels = np.concatenate([c.labels for c in ds.splits["train"]])
    assert (np.abs(labels) < 1).all() and labels.std() > 0


def test_synthetic_spec_validation(tmp_path):
    with pytest.raises(ConfigError):
        SyntheticSpec(weak_visible=8)
    with pytest.raises(ConfigError):
        SyntheticSpec(label_rule="median")
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"seed": 3, "clip_len": 12}))
    assert SyntheticSpec.from_json(path) == SyntheticSpec(seed=3, clip_len=12)
    path.write_text(json.dumps({"colour": 3}))
    with pytest.raises(ConfigError, match="colour"):
        SyntheticSpec.from_json(path)


@pytest.mark.parametrize("seed", range(20))
def test_synthetic_label_balance(seed):
    ds = generate_synthetic(SyntheticSpec(seed=seed, dev_clips=0))
    frac = np.mean([c.labels[-1] for c in ds.splits["train"]])
    assert 0.35 <= frac <= 0.65
