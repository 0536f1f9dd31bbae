import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twoview.dataset import LeafSample, TaxonRecord, Taxonomy
from twoview.errors import FormatError, ValidationError
from twoview.pairgen import (DEFAULT_RATIO, PairSpec, batch_iterator, generate_pairs, load_pairs,
                             save_pairs)

IMG = np.zeros((2, 2, 3), np.uint8)


def corpus(n_species, n_images, species_per_genus=1):
    tax = [TaxonRecord(f"s{i:02d}", f"g{i // species_per_genus:02d}", "f", "") for i in range(n_species)]
    samples = [LeafSample(f"s{i:02d}_{k}", IMG, f"s{i:02d}") for i in range(n_species) for k in range(n_images)]
    return samples, tax


def test_species_counts_60x6():
    samples, tax = corpus(60, 6)
    ps = generate_pairs(samples, tax, PairSpec("species", "local", 800, 1200, seed=0))
    labels = [p.label for p in ps]
    assert labels.count(1) == 800 and labels.count(0) == 1200
    assert not ps.warnings


def test_pool_sizes_two_by_two():
    samples, tax = corpus(2, 2)
    ps = generate_pairs(samples, tax, PairSpec("species", "local", 2, 4, allow_replacement=False))
    assert ps.positive_pool == 2 and ps.negative_pool == 4
    assert sorted((p.left, p.right, p.label) for p in ps) == sorted(
        [("s00_0", "s00_1", 1), ("s01_0", "s01_1", 1), ("s00_0", "s01_0", 0), ("s00_0", "s01_1", 0),
         ("s00_1", "s01_0", 0), ("s00_1", "s01_1", 0)])


def test_excess_request_without_replacement():
    samples, tax = corpus(2, 2)
    with pytest.raises(ValidationError, match="only 2"):
        generate_pairs(samples, tax, PairSpec("species", "local", 3, 4, allow_replacement=False))


def test_excess_request_with_replacement_warns():
    samples, tax = corpus(2, 2)
    ps = generate_pairs(samples, tax, PairSpec("species", "local", 5, 8))
    assert len(ps) == 13 and ps.warnings


def test_single_group_rejected():
    samples, tax = corpus(1, 4)
    with pytest.raises(ValidationError):
        generate_pairs(samples, tax, PairSpec("species", "local", 2, 3))


def test_empty_input_rejected():
    with pytest.raises(ValidationError):
        generate_pairs([], [], PairSpec())


def test_cap_one_has_empty_positive_pool():
    samples, tax = corpus(3, 1)
    with pytest.raises(ValidationError, match="positive pool is empty"):
        generate_pairs(samples, tax, PairSpec("species", "local", 2, 3))


def test_genus_negatives_cross_genera():
    samples, tax = corpus(6, 3, species_per_genus=3)
    t = Taxonomy(tax)
    ps = generate_pairs(samples, tax, PairSpec("genus", "global", 30, 45, seed=4))
    sp = {s.sample_id: s.species_id for s in samples}
    for p in ps:
        same = t.genus_of(sp[p.left]) == t.genus_of(sp[p.right])
        assert same == bool(p.label)


@given(n_species=st.integers(2, 6), n_images=st.integers(2, 5), spg=st.integers(1, 3),
       pos=st.integers(0, 40), extra=st.integers(0, 30), seed=st.integers(0, 10_000),
       grouping=st.sampled_from(["species", "genus"]))
def test_labels_and_counts_exhaustive(n_species, n_images, spg, pos, extra, seed, grouping):
    samples, tax = corpus(n_species, n_images, spg)
    t = Taxonomy(tax)
    if len({t.label(r.species_id, grouping) for r in tax}) < 2:
        return
    ps = generate_pairs(samples, tax, PairSpec(grouping, "local", pos, pos + extra, seed=seed))
    sp = {s.sample_id: s.species_id for s in samples}
    assert sum(p.label for p in ps) == pos
    assert sum(1 - p.label for p in ps) == pos + extra
    for p in ps:
        assert p.left != p.right
        same = t.label(sp[p.left], grouping) == t.label(sp[p.right], grouping)
        assert same == bool(p.label)


def test_default_ratio_matches_reference_rows():
    # usual stage sizes: 400/600 for the genus model, 800/1200 for the species model
    assert DEFAULT_RATIO == (2, 3)
    for pos, neg in ((400, 600), (800, 1200), (270, 405)):
        spec = PairSpec.with_default_ratio(pos)
        assert (spec.positive_count, spec.negative_count) == (pos, neg)
    assert PairSpec().positive_count * 3 == PairSpec().negative_count * 2


def test_neg_below_pos_rejected():
    with pytest.raises(ValidationError):
        PairSpec(positive_count=5, negative_count=4)


def test_batches():
    pairs = list(range(10))
    assert [len(b) for b in batch_iterator(pairs, 4, seed=1)] == [4, 4, 2]
    assert list(batch_iterator(pairs, 4, seed=1)) == list(batch_iterator(pairs, 4, seed=1))
    singles = list(batch_iterator(pairs, 1, seed=1))
    assert len(singles) == 10 and sorted(b[0] for b in singles) == pairs


def test_batches_differ_by_epoch():
    pairs = list(range(50))
    assert list(batch_iterator(pairs, 50, 0, 0)) != list(batch_iterator(pairs, 50, 0, 1))


def test_pairs_deterministic():
    samples, tax = corpus(4, 4)
    spec = PairSpec("species", "local", 10, 15, seed=9)
    assert generate_pairs(samples, tax, spec).pairs == generate_pairs(samples, tax, spec).pairs


def test_pair_file_roundtrip(tmp_path):
    samples, tax = corpus(3, 3)
    ps = generate_pairs(samples, tax, PairSpec("species", "local", 6, 9, seed=2))
    save_pairs(ps, tmp_path / "p.csv")
    text = (tmp_path / "p.csv").read_text().splitlines()
    assert text[0].startswith("# {") and text[1] == "left_id,right_id,label"
    back = load_pairs(tmp_path / "p.csv")
    assert back.pairs == ps.pairs and back.spec == ps.spec


def test_pair_file_corrupt(tmp_path):
    (tmp_path / "p.csv").write_text("left_id,right_id,label\n")
    with pytest.raises(FormatError):
        load_pairs(tmp_path / "p.csv")
