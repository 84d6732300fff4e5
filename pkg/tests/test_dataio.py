import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apgl4sr.dataio import (
    DataError,
    Dataset,
    InteractionLog,
    build_dataset,
    five_core_filter,
    pad_left,
    parse_log,
    sample_negative,
    sample_negatives,
)


def test_parse_single_line(tmp_path):
    p = tmp_path / "log.tsv"
    p.write_text("u1\ti1\t100\n")
    ilog = parse_log(p)
    assert ilog.records == [("u1", "i1", 100)]
    assert ilog.malformed == 0


def test_parse_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        ilog = parse_log(p)
    assert len(ilog) == 0
    assert "no interaction records" in caplog.text


def test_parse_malformed_strict_and_lenient(tmp_path, caplog):
    p = tmp_path / "bad.tsv"
    p.write_text("u1\ti1\t5\nu2\ti2\n")
    with pytest.raises(DataError, match="malformed"):
        parse_log(p, strict=True)
    with caplog.at_level(logging.WARNING):
        ilog = parse_log(p)
    assert ilog.malformed == 1
    assert ilog.records == [("u1", "i1", 5)]


def test_parse_custom_delimiter_and_empty_ids(tmp_path):
    p = tmp_path / "log.csv"
    p.write_text("a,x,1\n,y,2\nb,,3\nc,z,notanint\n")
    ilog = parse_log(p, delimiter=",")
    assert ilog.records == [("a", "x", 1)]
    assert ilog.malformed == 3


def test_parse_unreadable(tmp_path):
    with pytest.raises(DataError):
        parse_log(tmp_path / "missing.tsv")


def _block(users, items, ts0=0):
    return [(u, i, ts0 + k) for u in users for k, i in enumerate(items)]


def test_five_core_unchanged_when_dense():
    recs = _block([f"u{k}" for k in range(5)], [f"i{k}" for k in range(5)])
    out = five_core_filter(InteractionLog(recs))
    assert out.records == recs


def test_five_core_cascade():
    # user A only touches items seen once overall: A goes, then those items go
    dense = _block([f"u{k}" for k in range(5)], [f"i{k}" for k in range(5)])
    lonely = [("A", f"solo{k}", k) for k in range(5)]
    out = five_core_filter(InteractionLog(dense + lonely))
    assert out.records == dense


def test_five_core_min_count_one_is_identity():
    recs = [("a", "x", 1), ("b", "y", 2)]
    assert five_core_filter(InteractionLog(recs), 1).records == recs


def test_five_core_empty_result_is_fatal():
    with pytest.raises(DataError, match="removed every record"):
        five_core_filter(InteractionLog([("a", "x", 1)]))


def _peel_one_at_a_time(records, k):
    """Independent oracle: remove one offending user or item per round."""
    records = list(records)
    while True:
        users = Counter(r[0] for r in records)
        items = Counter(r[1] for r in records)
        weak_u = sorted(u for u, c in users.items() if c < k)
        weak_i = sorted(i for i, c in items.items() if c < k)
        if weak_u:
            records = [r for r in records if r[0] != weak_u[0]]
        elif weak_i:
            records = [r for r in records if r[1] != weak_i[0]]
        else:
            return records


records_strategy = st.lists(
    st.tuples(st.sampled_from("abcdefg"), st.sampled_from("pqrstuv"), st.integers(0, 50)),
    min_size=1,
    max_size=120,
)


@settings(max_examples=150, deadline=None)
@given(records_strategy, st.integers(1, 4))
def test_five_core_matches_peeling_oracle(records, k):
    expected = _peel_one_at_a_time(records, k)
    if not expected:
        with pytest.raises(DataError):
            five_core_filter(InteractionLog(records), k)
        return
    out = five_core_filter(InteractionLog(records), k).records
    assert out == expected
    users = Counter(r[0] for r in out)
    items = Counter(r[1] for r in out)
    assert min(users.values()) >= k and min(items.values()) >= k


def test_build_dataset_indexing():
    recs = [("ua", "x", 3), ("ub", "y", 1), ("ua", "z", 1), ("ub", "x", 2), ("ua", "y", 2), ("ub", "z", 3)]
    data = build_dataset(InteractionLog(recs), max_len=5)
    assert data.num_users == 2 and data.num_items == 3
    assert data.user_index == {"ua": 1, "ub": 2}
    assert data.item_index == {"x": 1, "y": 2, "z": 3}
    # ua sorted by time: z(1), y(2), x(3)
    np.testing.assert_array_equal(data.sequences.full(1), [3, 2, 1])
    np.testing.assert_array_equal(data.sequences.full(2), [2, 1, 3])


def test_build_dataset_truncation_rule():
    # 60 interactions, N=50 -> keep last 52; train view = most recent 50 of the first 58
    recs = [("u", f"i{t}", t) for t in range(60)]
    data = build_dataset(InteractionLog(recs), max_len=50)
    train = data.sequences.train_view(1)
    first_58 = np.arange(1, 59)  # item ids follow first appearance = time order
    np.testing.assert_array_equal(train, first_58[-50:])
    assert data.sequences.valid_target(1) == 59
    assert data.sequences.test_target(1) == 60


def test_build_dataset_stable_ties():
    recs = [("u", "a", 5), ("u", "b", 5), ("u", "c", 5), ("u", "d", 1)]
    data = build_dataset(InteractionLog(recs), max_len=10)
    np.testing.assert_array_equal(data.sequences.full(1), [4, 1, 2, 3])


def test_build_dataset_rejects_short_users():
    with pytest.raises(DataError):
        build_dataset(InteractionLog([("u", "a", 1), ("u", "b", 2)]), max_len=5)


def test_padding_id_never_in_sequences_and_splits():
    recs = [(f"u{u}", f"i{(u * 7 + t) % 11}", t) for u in range(6) for t in range(9)]
    data = build_dataset(InteractionLog(recs), max_len=4)
    for u in range(1, data.num_users + 1):
        full = data.sequences.full(u)
        assert 0 not in full
        assert len(full) >= 3
        tv = data.sequences.train_view(u)
        assert len(tv) <= 4
        np.testing.assert_array_equal(np.append(tv, [data.sequences.valid_target(u), data.sequences.test_target(u)]), full)
        np.testing.assert_array_equal(data.sequences.input_view(u, "test"), full[:-1])


def test_serialization_is_byte_identical(tmp_path):
    recs = [(f"u{u}", f"i{(u * 3 + t) % 7}", t) for u in range(5) for t in range(6)]
    a = build_dataset(InteractionLog(recs), 4)
    b = build_dataset(InteractionLog(list(recs)), 4)
    a.save(tmp_path / "a.apgl")
    b.save(tmp_path / "b.apgl")
    assert (tmp_path / "a.apgl").read_bytes() == (tmp_path / "b.apgl").read_bytes()
    back = Dataset.load(tmp_path / "a.apgl")
    assert back.user_index == a.user_index and back.item_index == a.item_index
    for u in range(1, a.num_users + 1):
        np.testing.assert_array_equal(back.sequences.full(u), a.sequences.full(u))


def test_pad_left():
    np.testing.assert_array_equal(pad_left([1, 2], 4), [0, 0, 1, 2])
    np.testing.assert_array_equal(pad_left([1, 2, 3, 4, 5], 3), [3, 4, 5])


def test_sample_negative_forced_and_deterministic():
    rng = np.random.default_rng(0)
    assert all(sample_negative(rng, [1, 2, 1], 3) == 3 for _ in range(20))
    a = sample_negative(np.random.default_rng(7), [1, 5], 50)
    b = sample_negative(np.random.default_rng(7), [1, 5], 50)
    assert a == b


def test_sample_negative_precondition():
    with pytest.raises(DataError):
        sample_negative(np.random.default_rng(0), [1, 2, 3], 3)
    with pytest.raises(DataError):
        sample_negatives(np.random.default_rng(0), [1, 2], 4, 2)


def test_sample_negative_uniformity():
    num_items, draws = 100, 1_000_000
    seq = np.arange(1, 11)
    out = sample_negatives(np.random.default_rng(123), seq, draws, num_items)
    counts = np.bincount(out, minlength=num_items + 1)
    assert counts[: 11].sum() == 0
    p = 1 / 90
    freq = counts[11:] / draws
    sigma = np.sqrt(p * (1 - p) / draws)
    assert np.all(np.abs(freq - p) < 3 * sigma)


def test_scalar_and_batch_negative_samplers_agree_in_distribution():
    rng = np.random.default_rng(5)
    draws = [sample_negative(rng, [1, 2, 3], 10) for _ in range(14_000)]
    counts = np.bincount(draws, minlength=11)[4:]
    # chi-square with 6 dof; 22.46 is the 0.999 quantile
    expected = len(draws) / 7
    assert ((counts - expected) ** 2 / expected).sum() < 22.46
