import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalign.data import (
    FoldPlan,
    Normalizer,
    SentenceRecord,
    SynthSpec,
    TsvSchema,
    load_tsv,
    make_folds,
    nearest_centroid_probe,
    normalize_signals,
    strip_signals,
    synth_generate,
    synth_transfer_benchmark,
    write_tsv,
)
from modalign.errors import ContractError, DataError, ParseError

NER_EYE_EEG = TsvSchema(task="ner", n_eye=2, n_eeg=1)


def _rec(sid, tokens, tags, eye=None, eeg=None):
    return SentenceRecord(sid=sid, tokens=tuple(tokens), tags=tuple(tags), eye=eye, eeg=eeg)


# ---------------------------------------------------------------------------
# TSV loading


def test_load_two_sentence_file(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text(
        "John\tB-PER\t0.1\t0.2\t1.0\n"
        "smiled\tO\t0.3\t0.4\t2.0\n"
        "\n"
        "Rome\tB-LOC\t0.5\t0.6\t3.0\n"
    )
    records = load_tsv(str(path), NER_EYE_EEG)
    assert len(records) == 2
    assert records[0].tokens == ("John", "smiled")
    assert records[0].tags == ("B-PER", "O")
    np.testing.assert_array_equal(records[0].eye, [[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_array_equal(records[0].eeg, [[1.0], [2.0]])
    assert records[1].sid == 1 and len(records[1].tokens) == 1


def test_load_file_without_signal_columns(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text("John\tB-PER\nsmiled\tO\n")
    records = load_tsv(str(path), NER_EYE_EEG)
    assert records[0].eye is None and records[0].eeg is None


def test_load_bad_value_names_line(tmp_path):
    path = tmp_path / "f.tsv"
    lines = ["w\tO\t0.1\t0.2\t1.0"] * 6 + ["w\tO\t0.1\toops\t1.0"]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=":7:"):
        load_tsv(str(path), NER_EYE_EEG)


def test_load_column_mismatch_names_line(tmp_path):
    path = tmp_path / "f.tsv"
    path.write_text("w\tO\t0.1\n")
    with pytest.raises(ParseError, match=":1:"):
        load_tsv(str(path), NER_EYE_EEG)


def test_classification_label_repeats_per_token(tmp_path):
    path = tmp_path / "f.tsv"
    schema = TsvSchema(task="sentiment")
    path.write_text("good\tpositive\nmovie\tpositive\n\nbad\tnegative\n")
    records = load_tsv(str(path), schema)
    assert records[0].label == "positive" and records[0].tags is None
    path.write_text("good\tpositive\nmovie\tnegative\n")
    with pytest.raises(ParseError):
        load_tsv(str(path), schema)


def test_round_trip_identity(tmp_path):
    rng = np.random.default_rng(0)
    records = [
        _rec(0, ["a", "b"], ["O", "B-X"], eye=rng.standard_normal((2, 2)),
             eeg=rng.standard_normal((2, 1))),
        _rec(1, ["c"], ["I-X"], eye=rng.standard_normal((1, 2)),
             eeg=rng.standard_normal((1, 1))),
    ]
    path = tmp_path / "out.tsv"
    write_tsv(str(path), records, NER_EYE_EEG)
    loaded = load_tsv(str(path), NER_EYE_EEG)
    for orig, back in zip(records, loaded):
        assert back.tokens == orig.tokens and back.tags == orig.tags
        np.testing.assert_allclose(back.eye, orig.eye, atol=1e-9)
        np.testing.assert_allclose(back.eeg, orig.eeg, atol=1e-9)


def test_record_shape_validation():
    with pytest.raises(DataError):
        _rec(0, ["a", "b"], ["O"])
    with pytest.raises(DataError):
        _rec(0, ["a"], ["O"], eye=np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# normalization


def _signal_records(matrix, sid_base=0):
    # one token per row, single record per row pair for variety
    recs = []
    half = len(matrix) // 2
    recs.append(_rec(sid_base, ["t"] * half, ["O"] * half, eye=matrix[:half]))
    recs.append(_rec(sid_base + 1, ["t"] * (len(matrix) - half), ["O"] * (len(matrix) - half),
                     eye=matrix[half:]))
    return recs


def test_constant_feature_zeroed():
    data = np.column_stack([np.full(6, 3.7), np.arange(6, dtype=float)])
    train = _signal_records(data)
    normed, norm = normalize_signals(train)
    stacked = np.concatenate([r.eye for r in normed])
    np.testing.assert_array_equal(stacked[:, 0], np.zeros(6))
    assert abs(stacked[:, 1].mean()) < 1e-9
    assert abs(stacked[:, 1].std() - 1.0) < 1e-9


def test_train_split_mean_is_zero():
    rng = np.random.default_rng(1)
    train = _signal_records(rng.standard_normal((20, 3)) * 5 + 2)
    normed, _ = normalize_signals(train)
    stacked = np.concatenate([r.eye for r in normed])
    assert np.all(np.abs(stacked.mean(axis=0)) < 1e-9)


def test_dev_normalized_with_train_constants():
    train_data = np.array([[0.0], [2.0], [4.0], [6.0]])  # mean 3, sd sqrt(5)
    dev_data = np.array([[3.0], [8.0]])
    train = _signal_records(train_data)
    dev = _signal_records(dev_data, sid_base=10)
    _, dev_normed, norm = normalize_signals(train, dev)
    sd = np.sqrt(5.0)
    expected = (dev_data - 3.0) / sd
    np.testing.assert_allclose(np.concatenate([r.eye for r in dev_normed]), expected, atol=1e-12)


def test_normalization_idempotent_after_refit():
    rng = np.random.default_rng(2)
    train = _signal_records(rng.standard_normal((30, 2)) * 4 - 1)
    normed, _ = normalize_signals(train)
    again, _ = normalize_signals(normed)
    for a, b in zip(normed, again):
        np.testing.assert_allclose(a.eye, b.eye, atol=1e-12)


def test_normalizer_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    train = _signal_records(rng.standard_normal((10, 3)))
    norm = Normalizer.fit(train)
    path = tmp_path / "norm.txt"
    norm.save(str(path))
    back = Normalizer.load(str(path))
    np.testing.assert_array_equal(back.eye_mean, norm.eye_mean)
    np.testing.assert_array_equal(back.eye_std, norm.eye_std)


# ---------------------------------------------------------------------------
# folds


def _dummy_records(n):
    return [_rec(i, ["w"], ["O"]) for i in range(n)]


def test_singleton_folds():
    plan = make_folds(_dummy_records(10), 10, seed=0)
    assert sorted(plan.assignment.values()) == list(range(10))


def test_fold_plan_deterministic():
    records = _dummy_records(23)
    assert make_folds(records, 5, seed=9).assignment == make_folds(records, 5, seed=9).assignment
    assert make_folds(records, 5, seed=9).assignment != make_folds(records, 5, seed=10).assignment


def test_fold_sizes_23_by_5():
    plan = make_folds(_dummy_records(23), 5, seed=1)
    sizes = sorted(np.bincount(list(plan.assignment.values())), reverse=True)
    assert sizes == [5, 5, 5, 4, 4]


def test_folds_partition_records():
    records = _dummy_records(17)
    plan = make_folds(records, 4, seed=2)
    seen = []
    for fold in range(4):
        train, held = plan.split(records, fold)
        assert len(train) + len(held) == 17
        seen.extend(r.sid for r in held)
    assert sorted(seen) == list(range(17))


def test_fold_assignment_stable_under_reordering():
    records = _dummy_records(12)
    plan_fwd = make_folds(records, 3, seed=4)
    plan_rev = make_folds(records[::-1], 3, seed=4)
    assert plan_fwd.assignment == plan_rev.assignment


def test_too_many_folds_rejected():
    with pytest.raises(ContractError):
        make_folds(_dummy_records(3), 5, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(2, 10), st.integers(0, 10 ** 6))
def test_fold_sizes_always_balanced(n, k, seed):
    if k > n:
        return
    plan = make_folds(_dummy_records(n), k, seed)
    sizes = np.bincount(list(plan.assignment.values()), minlength=k)
    assert sizes.max() - sizes.min() <= 1
    assert sizes.sum() == n


# ---------------------------------------------------------------------------
# synthetic benchmark


def test_synth_shapes_and_determinism():
    spec = SynthSpec(seed=5, n_train=10, n_dev=4, n_test=6)
    train, dev, test = synth_generate(spec)
    assert len(train) == 10 and len(dev) == 4 and len(test) == 6
    for rec in train + dev + test:
        assert rec.eye is not None and rec.eye.shape == (len(rec.tokens), spec.signal_dim)
        assert spec.min_len <= len(rec.tokens) <= spec.max_len
        assert all(t in ("O", "B-ENT", "I-ENT") for t in rec.tags)
    train2, _, _ = synth_generate(spec)
    for a, b in zip(train, train2):
        assert a.tokens == b.tokens and a.tags == b.tags
        np.testing.assert_array_equal(a.eye, b.eye)


def test_synth_rho_zero_probe_is_chance():
    spec = SynthSpec(seed=6, rho=0.0, n_train=200, n_dev=0, n_test=120)
    train, _, test = synth_generate(spec)
    acc = nearest_centroid_probe(train, test)
    # three conditioning tags; uninformative signals land near uniform guessing
    assert abs(acc - 1.0 / 3.0) < 0.06


def test_synth_rho_one_zero_noise_probe_is_perfect():
    spec = SynthSpec(seed=7, rho=1.0, noise=0.0, n_train=40, n_dev=0, n_test=40)
    train, _, test = synth_generate(spec)
    assert nearest_centroid_probe(train, test) == 1.0


def test_synth_default_rho_probe_clears_ninety_percent():
    spec = SynthSpec(seed=8)
    train, _, test = synth_generate(spec)
    assert nearest_centroid_probe(train, test) >= 0.90


def test_synth_classification_mode():
    spec = SynthSpec(task="sentiment", labels=("neg", "neu", "pos"), seed=9,
                     n_train=12, n_dev=0, n_test=4)
    train, _, test = synth_generate(spec)
    assert all(r.label in ("neg", "neu", "pos") and r.tags is None for r in train)


def test_transfer_benchmark_streams():
    bench = synth_transfer_benchmark(seed=3)
    assert all(r.has_signals for r in bench["source_train"])
    assert all(not r.has_signals for r in bench["target_train"])
    assert all(not r.has_signals for r in bench["target_test"])
    assert len(bench["source_train"]) > len(bench["target_train"])


def test_strip_signals():
    spec = SynthSpec(seed=10, n_train=3, n_dev=0, n_test=0)
    train, _, _ = synth_generate(spec)
    for rec in strip_signals(train):
        assert rec.eye is None and rec.eeg is None
