import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fskws import numerics as nx
from fskws.numerics import Tensor
from fskws.objectives import (EvalReport, PrototypeSet, auroc, auroc_counts, auxsl_combine, closed_accuracy,
                              compute_prototypes, cross_entropy_aux, dummy_proto_loss, query_logits,
                              query_probabilities, reports_to_csv, reports_to_table, roc_sweep_auc, verify_open)


def brute_auroc(pos, neg):
    wins = sum(1 for p, n in itertools.product(pos, neg) if p > n)
    ties = sum(1 for p, n in itertools.product(pos, neg) if p == n)
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def proto_set(closed, dummy):
    return PrototypeSet(Tensor(np.asarray(closed, float)), Tensor(np.asarray(dummy, float)))


# prototypes


def test_prototype_examples():
    emb = np.array([[1.0, 3.0], [3.0, 5.0], [7.0, 7.0], [9.0, 1.0]])
    p = compute_prototypes(emb, np.array([1, 1, 2, 2]), 2).value
    assert p[0].tolist() == [2.0, 4.0] and p[1].tolist() == [8.0, 4.0]
    one = compute_prototypes(emb[:2], np.array([1, 2]), 1).value
    assert np.array_equal(one, emb[:2])
    with pytest.raises(ValueError, match="class 2"):
        compute_prototypes(emb[:2], np.array([1, 1]), 2, n_closed=2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_prototypes_bit_identical_under_support_permutation(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(15, 6)) * 10 ** rng.uniform(-3, 3)
    labels = np.repeat([1, 2, 3], 5)
    perm = rng.permutation(15)
    a = compute_prototypes(emb, labels, 5).value
    b = compute_prototypes(emb[perm], labels[perm], 5).value
    assert np.array_equal(a, b)


# query probabilities


def test_equidistant_query_is_uniform():
    ps = proto_set([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], [np.sqrt(0.5), np.sqrt(0.5)])
    p = query_probabilities(ps, np.zeros((1, 2))).value
    assert np.allclose(p, 1 / 5, atol=1e-12)


def test_two_prototypes_closed_form():
    ps = PrototypeSet(Tensor(np.array([[0.0]])), Tensor(np.array([np.sqrt(np.log(2.0))])))
    p = query_probabilities(ps, np.zeros((1, 1))).value[0]
    assert abs(p[0] - 2 / 3) < 1e-12 and abs(p[1] - 1 / 3) < 1e-12


def test_query_at_prototype_others_far():
    ps = proto_set([[0.0, 0.0], [100.0, 0.0]], [0.0, 100.0])
    p = query_probabilities(ps, np.zeros((1, 2))).value[0]
    assert p[0] == pytest.approx(1.0) and p[1] < 1e-300


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="do not match"):
        query_probabilities(proto_set([[0.0, 0.0], [1.0, 1.0]], [0.0, 0.0]), np.zeros((1, 3)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), shift=st.floats(-50, 50))
def test_rows_sum_to_one_and_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    closed, dummy, q = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=(7, 3))
    p = query_probabilities(proto_set(closed, dummy), q).value
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((p > 0) & (p < 1))
    c = np.full(3, shift)
    p2 = query_probabilities(proto_set(closed + c, dummy + c), q + c).value
    assert np.allclose(p, p2, atol=1e-9)


# losses


def test_dummy_loss_examples():
    logits = np.array([[0.0, -1e4, -1e4], [-1e4, 0.0, -1e4], [-1e4, -1e4, 0.0]])
    assert float(dummy_proto_loss(logits, np.array([1, 2, 3])).value) < 1e-12
    uniform = np.zeros((4, 6))
    assert float(dummy_proto_loss(uniform, np.array([1, 2, 6, 6])).value) == pytest.approx(np.log(6), abs=1e-12)
    # a vanishing probability at the label stays finite
    assert np.isfinite(float(dummy_proto_loss(np.array([[0.0, -1e4]]), np.array([2])).value))
    with pytest.raises(ValueError):
        dummy_proto_loss(uniform, np.array([0, 1, 2, 3]))


def test_dummy_gradient_nonzero_with_open_queries():
    rng = np.random.default_rng(0)
    closed, q = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    labels = np.array([1, 2, 3, 4, 4, 4])

    def loss(tape, p):
        return dummy_proto_loss(query_logits(PrototypeSet(Tensor(closed), p["dummy"]), q), labels)

    rep = nx.finite_diff_check(loss, {"dummy": rng.normal(size=4)})
    assert rep["dummy"]["max_rel_error"] < 1e-6
    tape = nx.Tape()
    d = tape.param("dummy", rng.normal(size=4))
    assert np.abs(tape.backward(loss(tape, {"dummy": d}))["dummy"]).max() > 1e-6


def test_dummy_at_infinity_reduces_to_plain_prototypical_loss():
    rng = np.random.default_rng(5)
    closed, q = rng.normal(size=(3, 2)), rng.normal(size=(6, 2))
    labels = np.array([1, 2, 3, 1, 2, 3])
    far = np.array([1e3, 0.0])  # squared distance ~ 1e6
    with_dummy = float(dummy_proto_loss(query_logits(proto_set(closed, far), q), labels).value)
    d = ((q[:, None, :] - closed[None]) ** 2).sum(-1)
    logp = -d - np.log(np.exp(-d).sum(axis=1, keepdims=True))
    plain = -logp[np.arange(6), labels - 1].mean()
    assert abs(with_dummy - plain) < 1e-6


def test_cross_entropy_aux_examples():
    assert float(cross_entropy_aux(np.zeros((3, 7)), np.array([0, 3, 6])).value) == pytest.approx(np.log(7))
    big = np.full((2, 3), -1e3)
    big[0, 1] = big[1, 2] = 1e3
    assert float(cross_entropy_aux(big, np.array([1, 2])).value) < 1e-12
    with pytest.raises(ValueError):
        cross_entropy_aux(np.zeros((1, 3)), np.array([3]))
    rng = np.random.default_rng(0)
    rep = nx.finite_diff_check(lambda t, p: cross_entropy_aux(p["z"], np.array([0, 2, 1])),
                               {"z": rng.normal(size=(3, 4))})
    assert rep["z"]["max_rel_error"] < 1e-6


def test_auxsl_combine():
    b = auxsl_combine(0.5, 0.25, 1.0)
    assert float(b.l_total.value) == 0.75
    b0 = auxsl_combine(0.5, 0.25, 0.0)
    assert float(b0.l_total.value) == 0.5
    assert float(auxsl_combine(0.3, None).l_total.value) == 0.3
    with pytest.raises(ValueError):
        auxsl_combine(0.5, 0.25, -1.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 100), b=st.floats(0, 100), lam=st.floats(0, 10))
def test_auxsl_bundle_invariant(a, b, lam):
    bundle = auxsl_combine(a, b, lam)
    assert abs(float(bundle.l_total.value) - (a + lam * b)) <= 1e-12 * max(1.0, a + lam * b)


# accuracy and AUROC


def test_closed_accuracy_examples():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.5, 0.4, 0.1], [0.1, 0.1, 0.8]])
    labels = np.array([1, 2, 1, 2, 3])
    # last row is an open query, excluded by default; rows 0, 1 right, 2 (open wins) and 3 wrong
    assert closed_accuracy(p, labels) == 0.5
    assert closed_accuracy(p[[0, 1, 3, 0]], np.array([1, 2, 2, 1])) == 0.75
    assert closed_accuracy(p, labels, include_open=True) == 0.6
    perm = [4, 2, 0, 3, 1]
    assert closed_accuracy(p[perm], labels[perm]) == closed_accuracy(p, labels)
    # ties go to the lowest column
    assert closed_accuracy(np.array([[0.4, 0.4, 0.2]]), np.array([1])) == 1.0


def test_auroc_examples():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.5, 0.5], [0.5, 0.5, 0.5]) == 0.5
    assert auroc([0.9, 0.8], [0.7, 0.85]) == 0.75
    with pytest.raises(ValueError):
        auroc([], [0.1])


@settings(max_examples=200, deadline=None)
@given(pos=st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.7]), min_size=1, max_size=20),
       neg=st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.7]), min_size=1, max_size=20))
def test_auroc_matches_brute_force_with_ties(pos, neg):
    num, den = auroc_counts(pos, neg)
    assert num / den == brute_auroc(pos, neg)
    assert abs(roc_sweep_auc(pos, neg) - num / den) < 1e-9


def test_verify_open():
    assert verify_open([0.05, 0.05, 0.9], 0.5) == "open"
    assert verify_open([0.25, 0.25, 0.5], 0.5) == "closed"
    with pytest.raises(ValueError):
        verify_open([0.5, 0.5], 1.0)


def test_report_serialisation():
    r = EvalReport(5, [0.9, 0.8], [0.7, 0.9], 1000, [0, 1], "baseline")
    csv = reports_to_csv([r]).splitlines()
    assert csv[0] == "strategy,shots,acc_mean,acc_std,auroc_mean,auroc_std,n_episodes,seed_list"
    assert csv[1].startswith("baseline,5,0.850000,0.050000,0.800000,0.100000,1000,")
    assert "baseline" in reports_to_table([r])
