"""Prototype bank: center oracles, EMA algebra, convergence, gradient routing."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfreid import protobank
from hfreid.autograd import Tensor

LABELS = np.array([0, 0, 1, 1])


def _random_reps(seed, n=4, d=5):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.uniform(-1, 1, (n, d))) for _ in range(4)]


def _centers(seed=0):
    z_i, z_r, f_gi, f_gr = _random_reps(seed)
    return protobank.batch_centers(z_i, z_r, f_gi, f_gr, LABELS), (z_i, z_r, f_gi, f_gr)


def test_identical_vectors_center_is_that_vector():
    v = np.array([1.0, -2.0, 0.5])
    reps = Tensor(np.tile(v, (4, 1)))
    centers = protobank.batch_centers(reps, reps, reps, reps, LABELS)
    for fam in protobank.FAMILIES:
        np.testing.assert_allclose(centers.centers[0][fam].data, v, atol=1e-12)


def test_fused_center_is_mean_of_modality_values():
    a, b = np.array([2.0, 0.0]), np.array([0.0, 4.0])
    z_i = Tensor(np.tile(a, (4, 1)))
    z_r = Tensor(np.tile(b, (4, 1)))
    centers = protobank.batch_centers(z_i, z_r, z_i, z_r, LABELS)
    np.testing.assert_allclose(centers.centers[1]["p"].data, (a + b) / 2, atol=1e-12)


def test_centers_match_brute_force_means():
    centers, (z_i, z_r, f_gi, f_gr) = _centers(1)
    for c in (0, 1):
        idx = LABELS == c
        np.testing.assert_allclose(centers.centers[c]["p_ir"].data,
                                   z_i.data[idx].mean(0), atol=1e-7)
        np.testing.assert_allclose(centers.centers[c]["q_rgb"].data,
                                   f_gr.data[idx].mean(0), atol=1e-7)
        np.testing.assert_allclose(
            centers.centers[c]["q"].data,
            np.concatenate([f_gi.data[idx], f_gr.data[idx]]).mean(0), atol=1e-7)
    assert centers.per_identity == 2


def test_unbalanced_batch_rejected():
    z = Tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        protobank.batch_centers(z, z, z, z, np.array([0, 0, 1]))


def test_alpha_endpoints():
    centers, _ = _centers(2)
    one = protobank.PrototypeBank(2, 5, alpha=1.0, dtype=np.float64)
    one.update(centers)  # initialization
    centers2, _ = _centers(3)
    one.update(centers2)
    for c in (0, 1):
        np.testing.assert_allclose(one.store["p"][c], centers2.centers[c]["p"].data,
                                   atol=1e-12)

    zero = protobank.PrototypeBank(2, 5, alpha=0.0, dtype=np.float64)
    zero.update(centers)
    before = {f: zero.store[f].copy() for f in protobank.FAMILIES}
    zero.update(centers2)
    for f in protobank.FAMILIES:
        np.testing.assert_array_equal(zero.store[f], before[f])


def test_alpha_arithmetic():
    bank = protobank.PrototypeBank(1, 1, alpha=0.8, dtype=np.float64)
    zero_center = protobank.BatchCenters(
        centers={0: {f: Tensor(np.zeros(1)) for f in protobank.FAMILIES}},
        per_identity=1)
    one_center = protobank.BatchCenters(
        centers={0: {f: Tensor(np.ones(1)) for f in protobank.FAMILIES}},
        per_identity=1)
    bank.update(zero_center)  # prev = 0
    bank.update(one_center)  # 0.8 * 1 + 0.2 * 0
    assert bank.store["q"][0, 0] == pytest.approx(0.8)


def test_first_observation_initializes_directly():
    centers, _ = _centers(4)
    bank = protobank.PrototypeBank(2, 5, alpha=0.8, dtype=np.float64)
    bank.update(centers)
    for c in (0, 1):
        np.testing.assert_allclose(bank.store["p_ir"][c],
                                   centers.centers[c]["p_ir"].data, atol=1e-12)


def test_absent_identities_unchanged():
    centers, _ = _centers(5)
    bank = protobank.PrototypeBank(3, 5, alpha=0.8, dtype=np.float64)
    bank.update(centers)
    assert not bank.initialized[2]
    assert not bank.store["p"][2].any()


def test_geometric_convergence_ratio():
    alpha = 0.8
    bank = protobank.PrototypeBank(2, 5, alpha=alpha, dtype=np.float64)
    start, _ = _centers(6)
    bank.update(start)
    target, _ = _centers(7)
    prev_err = None
    for _ in range(6):
        bank.update(target)
        err = max(np.abs(bank.store[f] - np.stack(
            [target.centers[c][f].data for c in (0, 1)])).max()
            for f in protobank.FAMILIES)
        if prev_err is not None and prev_err > 1e-12:
            assert err / prev_err == pytest.approx(1 - alpha, abs=1e-9)
        prev_err = err


def test_convex_hull_containment():
    rng = np.random.default_rng(8)
    bank = protobank.PrototypeBank(2, 5, alpha=0.6, dtype=np.float64)
    bank.update(_centers(9)[0])
    for trial in range(5):
        prev = {f: bank.store[f].copy() for f in protobank.FAMILIES}
        centers, _ = _centers(10 + trial)
        bank.update(centers)
        for f in protobank.FAMILIES:
            for c in (0, 1):
                lo = np.minimum(prev[f][c], centers.centers[c][f].data)
                hi = np.maximum(prev[f][c], centers.centers[c][f].data)
                assert np.all(bank.store[f][c] >= lo - 1e-9)
                assert np.all(bank.store[f][c] <= hi + 1e-9)
    del rng


def test_prototype_sets_order_and_alias():
    centers, _ = _centers(20)
    bank = protobank.PrototypeBank(2, 5, alpha=0.8, dtype=np.float64)
    bank.update(centers)
    p_set, q_set = bank.prototype_sets(0)
    assert len(p_set) == 3 and len(q_set) == 3
    np.testing.assert_array_equal(p_set[0], bank.store["p_ir"][0])
    np.testing.assert_array_equal(p_set[1], bank.store["p_rgb"][0])
    np.testing.assert_array_equal(p_set[2], bank.store["p"][0])
    np.testing.assert_array_equal(q_set[2], bank.store["q"][0])
    # reflects the latest update
    bank.update(_centers(21)[0])
    p_set2, _ = bank.prototype_sets(0)
    np.testing.assert_array_equal(p_set2[0], bank.store["p_ir"][0])


def test_uninitialized_identity_rejected():
    bank = protobank.PrototypeBank(2, 5, alpha=0.8)
    with pytest.raises(KeyError):
        bank.prototype_sets(0)


def test_gradient_flows_through_center_term_only():
    rng = np.random.default_rng(22)
    z = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    centers = protobank.batch_centers(z, z, z, z, LABELS)
    bank = protobank.PrototypeBank(2, 3, alpha=0.8, dtype=np.float64)
    bank.update(centers)  # initialize so the next update mixes in history
    z.zero_grad()
    centers2 = protobank.batch_centers(z, z, z, z, LABELS)
    posterior = bank.update(centers2)
    from hfreid import autograd as ag
    loss = ag.sum_(posterior[0]["p"])
    loss.backward()
    assert z.grad is not None and np.any(z.grad)
    # d(post)/d(center) = alpha; center averages 8 of 12 coordinates per column
    assert z.grad.sum() == pytest.approx(0.8 * 3, rel=1e-6)


def test_state_roundtrip():
    centers, _ = _centers(23)
    bank = protobank.PrototypeBank(2, 5, alpha=0.8, dtype=np.float64)
    bank.update(centers)
    arrays = bank.state_arrays()
    other = protobank.PrototypeBank(2, 5, alpha=0.8, dtype=np.float64)
    other.load_state_arrays(arrays)
    for f in protobank.FAMILIES:
        np.testing.assert_array_equal(bank.store[f], other.store[f])
    np.testing.assert_array_equal(bank.initialized, other.initialized)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 0.95), st.integers(0, 2**32 - 1))
def test_repeated_update_converges_to_center(alpha, seed):
    rng = np.random.default_rng(seed)
    target = rng.uniform(-1, 1, 4)
    bank = protobank.PrototypeBank(1, 4, alpha=alpha, dtype=np.float64)
    centers = protobank.BatchCenters(
        centers={0: {f: Tensor(target) for f in protobank.FAMILIES}},
        per_identity=1)
    bank.update(centers)
    start = protobank.BatchCenters(
        centers={0: {f: Tensor(np.zeros(4)) for f in protobank.FAMILIES}},
        per_identity=1)
    bank.update(start)
    for _ in range(200):
        bank.update(centers)
    np.testing.assert_allclose(bank.store["p"][0], target, atol=1e-6)
