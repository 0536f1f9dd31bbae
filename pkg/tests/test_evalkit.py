import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twoview import evalkit
from twoview.errors import ValidationError
from twoview.evalkit import Picture, accuracy, confusion_matrix, flat_tree, s_metric


def test_s_single_rank_one():
    assert s_metric({"u": {"p": [Picture("a", ["a", "b"])]}}) == 1.0


def test_s_two_pictures():
    tree = {"u": {"p": [Picture("a", ["a", "b"]), Picture("a", ["b", "a"])]}}
    assert s_metric(tree) == 0.75


def test_s_two_users():
    tree = {"u1": {"p": [Picture("a", ["a"])]},
            "u2": {"q": [Picture("a", ["b", "c", "d", "a"])]}}
    assert s_metric(tree) == 0.625


def test_s_failure_and_absent_score_zero():
    assert s_metric({"u": {"p": [Picture("a", None)], "q": [Picture("a", ["b"])]}}) == 0.0


def test_s_empty_tree():
    with pytest.raises(ValidationError):
        s_metric({})


def _tree_strategy():
    picture = st.builds(lambda r: Picture("t", ["x"] * r + ["t"]), st.integers(0, 4))
    plants = st.dictionaries(st.text("pq", min_size=1, max_size=3), st.lists(picture, min_size=1, max_size=3),
                             min_size=1, max_size=3)
    return st.dictionaries(st.text("uv", min_size=1, max_size=3), plants, min_size=1, max_size=3)


def _hand_s(tree):
    users = []
    for plants in tree.values():
        ps = []
        for pics in plants.values():
            ps.append(sum(1.0 / (p.ranking.index("t") + 1) for p in pics) / len(pics))
        users.append(sum(ps) / len(ps))
    return sum(users) / len(users)


@given(_tree_strategy(), st.randoms())
def test_s_permutation_invariant_and_oracle(tree, rnd):
    users = list(tree.items())
    rnd.shuffle(users)
    shuffled = {}
    for u, plants in users:
        items = list(plants.items())
        rnd.shuffle(items)
        shuffled[u] = dict(items)
    assert abs(s_metric(shuffled) - s_metric(tree)) <= 1e-12
    assert abs(s_metric(tree) - _hand_s(tree)) <= 1e-12


@given(st.lists(st.integers(1, 5), min_size=1, max_size=20))
def test_s_bounds(ranks):
    perfect = {"u": {f"p{i}": [Picture("t", ["t"])] for i in range(len(ranks))}}
    never = {"u": {f"p{i}": [Picture("t", ["x"] * r)] for i, r in enumerate(ranks)}}
    assert s_metric(perfect) == 1.0 and s_metric(never) == 0.0


def test_flat_tree_is_mrr():
    res = [("a", ["a"]), ("b", ["a", "b"]), ("c", ["a", "b", "d"])]
    assert s_metric(flat_tree(res)) == pytest.approx((1 + 0.5 + 0) / 3, abs=1e-15)


def test_accuracy_examples():
    assert accuracy([("a", ["a"]), ("b", ["b", "a"])], 1) == 1.0
    assert accuracy([("a", ["b"]), ("b", ["c"])], 1) == 0.0
    assert accuracy([("a", ["b", "a"]), ("b", ["b"])], 1) == 0.5


@given(st.lists(st.tuples(st.sampled_from("abc"), st.permutations("abcd")), min_size=1, max_size=15))
def test_accuracy_monotone_and_bruteforce(results):
    accs = [accuracy(results, k) for k in range(1, 5)]
    assert accs == sorted(accs)
    for k in range(1, 5):
        assert accs[k - 1] == sum(t in r[:k] for t, r in results) / len(results)


def test_confusion():
    labels, m = confusion_matrix([("a", ["a"]), ("b", ["b"])])
    assert labels == ["a", "b"] and (m == np.eye(2)).all()
    labels, m = confusion_matrix([("a", ["b"])])
    assert m.sum() == 1 and m[labels.index("a"), labels.index("b")] == 1


def test_confusion_unknown_label(tiny):
    with pytest.raises(ValidationError):
        confusion_matrix([("zzz", ["G00S00"])], level="genus", taxonomy=tiny.taxonomy)


@given(st.lists(st.tuples(st.sampled_from("abc"), st.lists(st.sampled_from("abc"), max_size=2)),
                min_size=1, max_size=20))
def test_confusion_total(results):
    assert confusion_matrix(results)[1].sum() == len(results)


@pytest.fixture(scope="module")
def ctx(tiny, tiny_views, toy_models):
    a, b = toy_models
    return evalkit.EvalContext(tiny.train, tiny.test, tiny.taxonomy, a, b, views=tiny_views)


def test_exhaustive_k_hits_every_genus(ctx):
    refs = ctx.build_refs(2, 0)
    rep = evalkit.evaluate(ctx, refs, k=len(refs))
    assert rep.metrics["stage1_hit"] == 1.0
    assert rep.metrics["acc_top1"] <= rep.metrics["acc_top3"] <= rep.metrics["acc_top5"]


def test_sweep_shapes(ctx):
    rep = evalkit.sweep_references(ctx, (1, 2), (1, 3, 100), seed=0)
    rows = rep.tables["grid"]
    assert len(rows) == 6
    for n_r in (1, 2):
        hits = [r["stage1_hit"] for r in rows if r["n_r"] == n_r]
        cands = [r["mean_candidates"] for r in rows if r["n_r"] == n_r]
        assert hits == sorted(hits) and hits[-1] == 1.0
        assert cands == sorted(cands)


def test_stability_single_and_repeatable(ctx):
    one = evalkit.stability_run(ctx, 1, 3, 2, 4)
    assert one.metrics["spread"] == 0.0
    r1 = evalkit.stability_run(ctx, 3, 3, 2, 4)
    r2 = evalkit.stability_run(ctx, 3, 3, 2, 4)
    assert r1.metrics == r2.metrics


def test_scalability_zero_batches_matches_baseline(ctx):
    rep = evalkit.scalability_run(ctx, [], n_r=2, k=4, seed=0, timing_queries=2, timing_repeats=1)
    base = evalkit.evaluate(ctx, ctx.build_refs(2, 0), k=4, top_ks=(1,))
    assert rep.tables["steps"][0]["acc_original"] == base.metrics["acc_top1"]
    assert rep.metrics["acc_drop_original"] == 0.0 and rep.metrics["models_unchanged"]


def test_cap_one_aborts_row(tiny):
    rep = evalkit.unbalanced_run(tiny.train, tiny.test, tiny.taxonomy, caps=(1,), n_r=1, k=2)
    row = rep.tables["caps"][0]
    assert row["status"] == "aborted" and "positive pool" in row["warnings"]


def test_report_write(tmp_path, ctx):
    rep = evalkit.evaluate(ctx, ctx.build_refs(1, 0), k=3)
    paths = rep.write(tmp_path)
    data = json.loads((tmp_path / "evaluate.json").read_text())
    assert set(data["metrics"]) >= {"acc_top1", "acc_top3", "acc_top5", "s_metric"}
    assert any(p.name == "evaluate_confusion.csv" for p in paths)


def test_plots(tmp_path, ctx):
    pytest.importorskip("matplotlib")
    rep = evalkit.sweep_references(ctx, (1,), (1, 2), seed=0)
    evalkit.plot_sweep(rep, tmp_path / "s.png")
    assert (tmp_path / "s.png").stat().st_size > 0
