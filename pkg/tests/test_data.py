import numpy as np
import pytest

from fskws import data
from fskws.data import (EpisodeError, EpisodeSpec, ManifestError, dataset_from_arrays, ingest_manifest,
                        sample_aux_batch, sample_episode)


def toy_dataset(n_classes=15, per_class=12, length=800):
    rng = np.random.default_rng(0)
    clips = {f"kw{k:02d}": [rng.uniform(-0.1, 0.1, length) for _ in range(per_class)] for k in range(n_classes)}
    return dataset_from_arrays(clips, data.IN_DOMAIN, "train")


def test_paper_episode_shape():
    ds = toy_dataset()
    ep = sample_episode(ds, EpisodeSpec(5, 5, 5, 5), np.random.default_rng(0))
    assert ep.support.size == 25 and ep.query.size == 50
    assert set(ep.support_labels) == {1, 2, 3, 4, 5}
    assert set(ep.query_labels) == {1, 2, 3, 4, 5, 6}
    assert (ep.query_labels == 6).sum() == 25


def test_degenerate_open_free_episode():
    ep = sample_episode(toy_dataset(), EpisodeSpec(2, 0, 1, 1), np.random.default_rng(1))
    assert ep.support.size == 2 and ep.query.size == 2
    assert set(ep.query_labels) <= {1, 2}


def test_episode_invariants_over_many_draws():
    ds = toy_dataset()
    rng = np.random.default_rng(2)
    spec = EpisodeSpec(5, 5, 5, 5)
    for _ in range(10_000):
        ep = sample_episode(ds, spec, rng)
        assert not set(ep.support) & set(ep.query)
        assert len(set(ep.support)) == 25 and len(set(ep.query)) == 50
        open_classes = set(ep.classes[5:])
        assert not {int(ds.labels[i]) for i in ep.support} & open_classes
        assert np.all(ep.query_labels[25:] == 6) and np.all((ep.query_labels[:25] >= 1) & (ep.query_labels[:25] <= 5))
        assert all(ds.labels[i] == ep.classes[lab - 1] for i, lab in zip(ep.support, ep.support_labels))


def test_closed_selection_frequency():
    ds = toy_dataset()
    rng = np.random.default_rng(3)
    counts = np.zeros(15)
    trials = 10_000
    for _ in range(trials):
        ep = sample_episode(ds, EpisodeSpec(5, 5, 1, 1), rng)
        counts[ep.classes[:5]] += 1
    # each class is closed with probability 5/15
    p = 5 / 15
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma + 1)


def test_episode_shortfall_errors():
    ds = toy_dataset(n_classes=6, per_class=4)
    with pytest.raises(EpisodeError, match="short by 4"):
        sample_episode(ds, EpisodeSpec(5, 5, 1, 1), np.random.default_rng(0))
    with pytest.raises(EpisodeError, match="short by"):
        sample_episode(ds, EpisodeSpec(2, 1, 3, 3), np.random.default_rng(0))


def test_episode_deterministic():
    ds = toy_dataset()
    a = sample_episode(ds, EpisodeSpec(), np.random.default_rng(9))
    b = sample_episode(ds, EpisodeSpec(), np.random.default_rng(9))
    assert np.array_equal(a.support, b.support) and np.array_equal(a.query, b.query)


def test_episode_spec_validation():
    with pytest.raises(ValueError):
        EpisodeSpec(1, 5, 5, 5)
    with pytest.raises(ValueError):
        EpisodeSpec(5, 5, 0, 5)


def test_aux_batch():
    ds = toy_dataset(n_classes=10, per_class=5)
    idx, labels = sample_aux_batch(ds, 64, np.random.default_rng(0))
    assert idx.size == 64 and np.array_equal(labels, ds.labels[idx])
    one = dataset_from_arrays({"w": [np.zeros(500)]}, data.AUXILIARY, "train")
    idx, labels = sample_aux_batch(one, 1, np.random.default_rng(0))
    assert idx.tolist() == [0] and labels.tolist() == [0]
    empty = dataset_from_arrays({}, data.AUXILIARY, "train")
    with pytest.raises(EpisodeError):
        sample_aux_batch(empty, 4, np.random.default_rng(0))


def test_aux_batch_label_histogram_uniform():
    ds = toy_dataset(n_classes=10, per_class=5)
    _, labels = sample_aux_batch(ds, 100_000, np.random.default_rng(4))
    counts = np.bincount(labels, minlength=10)
    p = 0.1
    assert np.all(np.abs(counts - 10_000) <= 3 * np.sqrt(100_000 * p * (1 - p)))


MANIFEST = """utterance_id,audio_path,word,start_s,end_s
u1,a.wav,The,0.0,0.3
u1,a.wav,cat,0.3,0.7
u2,b.wav,sat,0.1,0.5
"""


def test_manifest_parse(tmp_path):
    (tmp_path / "m.csv").write_text(MANIFEST)
    read = ingest_manifest(tmp_path / "m.csv")
    assert len(read.entries) == 3 and not read.rejected
    assert read.entries[0].word == "the"
    assert read.entries[1].duration == pytest.approx(0.4)


def test_manifest_rejects_reversed_rows(tmp_path):
    (tmp_path / "m.csv").write_text(MANIFEST + "u3,c.wav,dog,0.9,0.4\n")
    read = ingest_manifest(tmp_path / "m.csv")
    assert len(read.entries) == 3 and read.rejected[0][0] == 5


def test_manifest_malformed_row_names_line(tmp_path):
    (tmp_path / "m.csv").write_text(MANIFEST + "u3,c.wav,dog\n")
    with pytest.raises(ManifestError, match=":5:"):
        ingest_manifest(tmp_path / "m.csv")
    (tmp_path / "h.csv").write_text("id,path\n")
    with pytest.raises(ManifestError, match=":1:"):
        ingest_manifest(tmp_path / "h.csv")


def test_manifest_round_trip(tmp_path):
    (tmp_path / "m.csv").write_text(MANIFEST)
    entries = ingest_manifest(tmp_path / "m.csv").entries
    data.write_manifest(tmp_path / "n.csv", entries)
    assert ingest_manifest(tmp_path / "n.csv").entries == entries


def test_split_layout_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    clips = {"go": [np.round(rng.uniform(-0.5, 0.5, 700) * 32768) / 32768 for _ in range(2)],
             "stop": [np.zeros(600)]}
    listing = data.write_split(tmp_path, data.IN_DOMAIN, "test", clips)
    data.update_index(tmp_path, data.IN_DOMAIN, "test", listing)
    assert (tmp_path / "in_domain/test/go/0001.wav").exists()
    ds = data.load_split(tmp_path, data.IN_DOMAIN, "test")
    assert ds.vocabulary == ["go", "stop"] and len(ds) == 3
    assert np.array_equal(ds.waves[1].astype(float), clips["go"][1])


def test_features_cached_and_union():
    a = toy_dataset(n_classes=3, per_class=2)
    b = dataset_from_arrays({"x": [np.ones(900) * 0.01]}, data.AUXILIARY, "train")
    f = a.features()
    assert f.shape == (6, 98, 40) and np.array_equal(a.features([1, 2]), f[1:3])
    u = a.union(b)
    assert u.num_classes == 4 and u.labels[-1] == 3 and u.domains[-1] == data.AUXILIARY
    assert u.keywords(include_silence=False) == {"kw00", "kw01", "kw02", "x"}
