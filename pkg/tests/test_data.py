import numpy as np
import pytest

from dcft import data
from dcft.errors import DataError


def test_token_majority_labels_follow_counts():
    ds = data.token_majority(64, vocab_size=16, seq_len=9, seed=3)
    for seq, label in zip(ds.sequences, ds.labels):
        upper = int((seq >= 8).sum())
        assert label == int(upper > 9 - upper)


def test_generators_are_seeded():
    for task in data.GENERATORS:
        a = data.generate(task, 20, 16, 8, seed=5)
        b = data.generate(task, 20, 16, 8, seed=5)
        assert np.array_equal(np.stack(a.sequences), np.stack(b.sequences))
        assert np.array_equal(a.labels, b.labels)


def test_unknown_task():
    with pytest.raises(DataError):
        data.generate("nope", 4, 16, 8, 0)


def test_csv_round_trip(tmp_path):
    ds = data.marked_parity(10, seed=1)
    path = tmp_path / "d.csv"
    path.write_text(data.to_csv(ds))
    back = data.read_csv(path)
    assert np.array_equal(back.labels, ds.labels)
    assert all(np.array_equal(x, y) for x, y in zip(back.sequences, ds.sequences))


@pytest.mark.parametrize(
    "text",
    ["label,tokens\n1,3 x 4\n", "lbl,tokens\n1,2\n", "label,tokens\n", "label,tokens\n1,\n"],
)
def test_bad_csv(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataError):
        data.read_csv(path)


def test_missing_csv(tmp_path):
    with pytest.raises(DataError, match="not found"):
        data.read_csv(tmp_path / "absent.csv")


def test_bundled_matches_recipe():
    ds = data.bundled("token-majority")
    fresh = data.token_majority(**data.BUNDLED_RECIPE["token-majority"])
    assert np.array_equal(ds.labels, fresh.labels)
    assert len(ds) == 512
    # balanced two-class data so chance accuracy is 0.5
    assert abs(ds.labels.mean() - 0.5) < 0.05


def test_validate_ranges():
    ds = data.Dataset([np.array([0, 20])], [0])
    with pytest.raises(DataError, match="token ids"):
        ds.validate(16, 16, 2)
    ds = data.Dataset([np.array([0, 1])], [3])
    with pytest.raises(DataError, match="labels"):
        ds.validate(16, 16, 2)
    with pytest.raises(DataError, match="max_seq_len"):
        data.Dataset([np.arange(10) % 4], [0]).validate(16, 4, 2)


def test_batches_cover_every_row_once():
    ds = data.token_majority(50, seed=0)
    assert [len(b) for b in ds.batches(16)] == [16, 16, 16, 2]
    rows = [tuple(s) for b in ds.batches(16, np.random.default_rng(0)) for s in b.sequences]
    assert sorted(rows) == sorted(tuple(s) for s in ds.sequences)


def test_linear_probe_solves_token_majority():
    # bag-of-tokens with +1 for the upper half, -1 for the lower half
    ds = data.bundled()
    counts = np.stack([np.bincount(s, minlength=16) for s in ds.sequences]).astype(float)
    w = np.where(np.arange(16) >= 8, 1.0, -1.0)
    assert np.array_equal((counts @ w > 0).astype(int), ds.labels)
    # and a least-squares probe finds a separator without being told
    x = np.hstack([counts, np.ones((len(ds), 1))])
    coef, *_ = np.linalg.lstsq(x, 2.0 * ds.labels - 1.0, rcond=None)
    assert np.mean((x @ coef > 0) == ds.labels) >= 0.99
