import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unlearn_lab.errors import FormatError, ParameterError
from unlearn_lab.metrics import accuracy
from unlearn_lab.model_core import TrainConfig, train_classifier
from unlearn_lab.synth_data import (
    MARKOV_SOURCES,
    gen_gaussian_classes,
    gen_markov_sequences,
    load_corpus,
    load_dataset,
    load_dataset_with_split,
    make_split,
    save_corpus,
    save_dataset,
)


def test_gaussian_counts_balanced():
    ds = gen_gaussian_classes(3, 8, 20, 0.5, 7)
    assert ds.n == 60
    assert np.bincount(ds.labels).tolist() == [20, 20, 20]


def test_gaussian_deterministic():
    assert gen_gaussian_classes(3, 8, 20, 0.5, 7) == gen_gaussian_classes(3, 8, 20, 0.5, 7)
    assert gen_gaussian_classes(3, 8, 20, 0.5, 7) != gen_gaussian_classes(3, 8, 20, 0.5, 8)


def test_well_separated_classes_are_learnable():
    ds = gen_gaussian_classes(3, 8, 200, 0.3, 1)
    st_ = train_classifier(ds.features, ds.labels, 3, TrainConfig(tol=1e-6)).state
    assert accuracy(st_, ds.features, ds.labels) >= 0.95


@pytest.mark.parametrize("args", [(1, 8, 20, 0.5), (3, 1, 20, 0.5), (3, 8, 4, 0.5), (3, 8, 20, 0.0)])
def test_gaussian_rejects_bad_params(args):
    with pytest.raises(ParameterError):
        gen_gaussian_classes(*args, seed=0)


def test_markov_support():
    c = gen_markov_sequences(100, 20, 3)
    assert len(c) == 300
    for name, states in MARKOV_SOURCES.items():
        seqs = c.sequences[c.sources == name]
        assert len(seqs) == 100
        assert np.isin(seqs, states).all()


def test_markov_frequencies_approach_uniform():
    c = gen_markov_sequences(500, 20, 0)
    seqs = c.sequences[c.sources == "retain"]
    freq = np.bincount(seqs[:, 1:].ravel(), minlength=10)[[1, 2, 3]] / seqs[:, 1:].size
    np.testing.assert_allclose(freq, 1 / 3, atol=0.02)


def test_markov_rejects_short_sequences():
    with pytest.raises(ParameterError):
        gen_markov_sequences(10, 1, 0)


def test_class_wise_split():
    ds = gen_gaussian_classes(3, 4, 30, 0.5, 0)
    sp = make_split(ds, "class_wise", target_class=2)
    train = sp.train_indices
    assert set(sp.forget_indices) == set(train[ds.labels[train] == 2])


def test_random_split_size():
    ds = gen_gaussian_classes(3, 4, 50, 0.5, 0)
    sp = make_split(ds, "sample_random", fraction=0.1, seed=5)
    assert len(sp.forget_indices) == round(0.1 * len(sp.train_indices))


def test_split_rejects_bad_params():
    ds = gen_gaussian_classes(3, 4, 10, 0.5, 0)
    with pytest.raises(ParameterError):
        make_split(ds, "class_wise", target_class=5)
    with pytest.raises(ParameterError):
        make_split(ds, "sample_random", fraction=1.5)
    with pytest.raises(ParameterError):
        make_split(ds, "sample_random", fraction=0.001)  # rounds to zero samples


@given(seed=st.integers(0, 2**16), mode=st.sampled_from(["class_wise", "sample_random"]),
       frac=st.floats(0.05, 0.9), target=st.integers(0, 2))
def test_split_partition_property(seed, mode, frac, target):
    ds = gen_gaussian_classes(3, 3, 10, 0.5, seed)
    sp = make_split(ds, mode, target_class=target, fraction=frac, seed=seed)
    f, r, t = set(sp.forget_indices), set(sp.retain_indices), set(sp.test_indices)
    assert not (f & r) and not (f & t) and not (r & t)
    assert f | r | t == set(range(ds.n))


def test_dataset_round_trip(tmp_path):
    ds = gen_gaussian_classes(3, 5, 12, 0.7, 11)
    sp = make_split(ds, "class_wise", target_class=1)
    save_dataset(ds, tmp_path / "d.csv", sp)
    back, sp2 = load_dataset_with_split(tmp_path / "d.csv")
    assert back == ds and back.seed == 11
    assert np.array_equal(sp2.forget_indices, sp.forget_indices)


def test_truncated_file_is_a_format_error(tmp_path):
    ds = gen_gaussian_classes(3, 5, 12, 0.7, 11)
    p = tmp_path / "d.csv"
    save_dataset(ds, p)
    lines = p.read_text().splitlines()
    p.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(FormatError) as ei:
        load_dataset(p)
    assert ei.value.field == "n"


def test_corpus_round_trip(tmp_path):
    c = gen_markov_sequences(5, 6, 2)
    save_corpus(c, tmp_path / "c.csv")
    back = load_corpus(tmp_path / "c.csv")
    assert np.array_equal(back.sequences, c.sequences)
    assert list(back.sources) == list(c.sources)
