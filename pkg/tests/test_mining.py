"""Cross-modal patch mining: selection oracles, gradient isolation, loss_high."""
import numpy as np
import pytest

from hfreid import autograd as ag
from hfreid import encoder as enc
from hfreid import mining, objectives, wavelet
from hfreid.autograd import Tensor

CFG = enc.EncoderConfig(num_classes=4, dtype="float64")


def _img(seed, n=1):
    return np.random.default_rng(seed).random((n, CFG.image_h, CFG.image_w, 3))


def test_fraction_to_k():
    assert mining.fraction_to_k(0.30, 32) == 9
    assert mining.fraction_to_k(0.01, 32) == 1
    assert mining.fraction_to_k(1.0, 32) == 32


def test_ir_mining_texture_confined_to_top_half():
    img = np.zeros((64, 32, 3))
    rng = np.random.default_rng(0)
    img[:32] = rng.random((32, 32, 3))  # high frequency only in the top half
    idx = mining.ir_highfreq_indices(img, 8, CFG)
    rows, cols = CFG.grid
    assert np.all(idx // cols < rows // 2)


def test_constant_image_tie_rule_selects_prefix():
    idx = mining.ir_highfreq_indices(np.full((64, 32, 3), 0.5), 5, CFG)
    np.testing.assert_array_equal(idx, np.arange(5))


def test_k_equals_n_selects_all():
    idx = mining.ir_highfreq_indices(_img(1)[0], CFG.num_patches, CFG)
    np.testing.assert_array_equal(idx, np.arange(CFG.num_patches))


def test_k_out_of_range():
    with pytest.raises(ValueError):
        mining.ir_highfreq_indices(_img(2)[0], 0, CFG)
    with pytest.raises(ValueError):
        mining.ir_highfreq_indices(_img(2)[0], 33, CFG)


def test_cross_modal_similarity_oracles():
    s = mining.cross_modal_similarity([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(s, [[1.0, 0.0]])
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0], [0.0, 2.0]])
    assert not mining.cross_modal_similarity(a, b).any()
    rng = np.random.default_rng(3)
    x, y = rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (9, 6))
    got = mining.cross_modal_similarity(x, y)
    want = np.array([[x[i] @ y[j] for j in range(9)] for i in range(4)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_cross_modal_similarity_shape_mismatch():
    with pytest.raises(ValueError):
        mining.cross_modal_similarity(np.ones((2, 3)), np.ones((4, 5)))


def test_correlation_vector_oracles():
    np.testing.assert_allclose(mining.correlation_vector([[1.0, 3.0], [3.0, 5.0]]),
                               [2.0, 4.0])
    row = np.array([[0.3, -0.2, 0.9]])
    np.testing.assert_allclose(mining.correlation_vector(row), row[0])
    rng = np.random.default_rng(4)
    s = rng.uniform(-1, 1, (5, 7))
    np.testing.assert_allclose(mining.correlation_vector(s), s.mean(axis=0),
                               atol=1e-12)


def test_correlation_vector_linear_in_scale():
    rng = np.random.default_rng(5)
    s = rng.uniform(-1, 1, (4, 6))
    np.testing.assert_allclose(mining.correlation_vector(3.5 * s),
                               3.5 * mining.correlation_vector(s), atol=1e-12)
    # argmax-set invariance under positive scaling
    np.testing.assert_array_equal(
        mining.select_rgb_correlated(mining.correlation_vector(s), 2),
        mining.select_rgb_correlated(mining.correlation_vector(4.0 * s), 2))


def test_select_rgb_correlated_oracles():
    np.testing.assert_array_equal(
        mining.select_rgb_correlated([0.1, 0.9, 0.5], 1), [1])
    np.testing.assert_array_equal(
        mining.select_rgb_correlated([0.1, 0.9, 0.5], 3), [0, 1, 2])
    rng = np.random.default_rng(6)
    s = rng.random(16)
    np.testing.assert_array_equal(mining.select_rgb_correlated(s, 5),
                                  wavelet.topk_select(s, 5))


def test_enhanced_representations_shapes_and_full_sequence_path():
    params = enc.init_params(CFG)
    imgs = _img(7, 2)
    full_idx = np.tile(np.arange(CFG.num_patches), (2, 1))
    z_i, z_r = mining.enhanced_representations(imgs, imgs, full_idx, full_idx,
                                               params, CFG)
    assert z_i.shape == (2, CFG.dim)
    seq = enc.tokenize(imgs, params, CFG)
    f_g, _ = enc.encode_parts(seq, params, CFG)
    np.testing.assert_allclose(z_i.data, f_g.data, atol=1e-10)
    np.testing.assert_allclose(z_r.data, f_g.data, atol=1e-10)


def test_gradient_reaches_patch_projection():
    params = enc.init_params(CFG)
    imgs = _img(8, 2)
    idx = np.tile(np.arange(4), (2, 1))
    z_i, _ = mining.enhanced_representations(imgs, imgs, idx, idx, params, CFG)
    ag.sum_(ag.mul(z_i, z_i)).backward()
    assert params["patch.w"].grad is not None
    assert np.any(params["patch.w"].grad)


def test_no_gradient_into_shadow_or_selection():
    params = enc.init_params(CFG)
    shadow = enc.clone_shadow(params)
    rng = np.random.default_rng(9)
    ir = rng.random((4, 64, 32, 3))
    rgb = rng.random((4, 64, 32, 3))
    ir_idx, rgb_idx = mining.mine_batch(ir, rgb, 9, params, shadow, CFG)
    z_i, z_r = mining.enhanced_representations(ir, rgb, ir_idx, rgb_idx, params, CFG)
    head = (params["head.w"], params["head.b"])
    loss = mining.loss_high(z_i, z_r, np.array([0, 0, 1, 1]),
                            np.array([0, 0, 1, 1]), head)
    loss.backward()
    for k, p in shadow.items():
        assert p.grad is None, f"shadow param {k} received gradient"
    # selection indices are plain integer arrays: nothing to receive gradient
    assert ir_idx.dtype.kind == "i" and rgb_idx.dtype.kind == "i"


def test_selection_consistency_identical_images_shared_weights():
    # same image in both roles, shadow == live: chosen RGB indices maximize
    # average similarity to the IR high-freq subsequence (exhaustive check)
    params = enc.init_params(CFG, seed=3)
    shadow = enc.clone_shadow(params)
    img = _img(10)
    k = 6
    ir_idx, rgb_idx = mining.mine_batch(img, img, k, params, shadow, CFG)
    tokens = enc.tokens_for_subset(img, shadow, CFG, ir_idx)
    ir_emb = mining.shadow_patch_embeddings(tokens, shadow, CFG)[0]
    full = enc.tokenize(img, shadow, CFG)
    rgb_emb = mining.shadow_patch_embeddings(full, shadow, CFG)[0]
    corr = mining.correlation_vector(mining.cross_modal_similarity(ir_emb, rgb_emb))
    best = set(wavelet.topk_select(corr, k).tolist())
    assert set(rgb_idx[0].tolist()) == best


def test_mine_batch_pooled_shapes():
    params = enc.init_params(CFG, seed=4)
    shadow = enc.clone_shadow(params)
    ir, rgb = _img(11, 3), _img(12, 3)
    ir_idx, rgb_idx = mining.mine_batch_pooled(ir, rgb, 5, params, shadow, CFG)
    assert ir_idx.shape == (3, 5) and rgb_idx.shape == (3, 5)
    for row in np.concatenate([ir_idx, rgb_idx]):
        assert np.all(np.diff(row) > 0)


def test_loss_high_matches_term_sum():
    rng = np.random.default_rng(13)
    z_i = rng.uniform(-1, 1, (4, 5))
    z_r = rng.uniform(-1, 1, (4, 5))
    labels = np.array([0, 0, 1, 1])
    w = Tensor(rng.uniform(-1, 1, (5, 2)))
    b = Tensor(np.zeros(2))
    loss = float(mining.loss_high(Tensor(z_i), Tensor(z_r), labels, labels,
                                  (w, b), 0.3).data)
    want = sum(
        float(objectives.cross_entropy(Tensor(z), labels, (w, b)).data)
        + float(objectives.triplet(Tensor(z), labels, 0.3).data)
        for z in (z_i, z_r))
    assert loss == pytest.approx(want, rel=1e-9)


def test_loss_high_uniform_logits_is_ln_c_per_rep():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    labels = np.array([0, 0, 1, 1])
    w = Tensor(np.zeros((2, 4)))
    b = Tensor(np.zeros(4))
    far = Tensor(np.array([[0.0, 0], [0, 0], [50, 0], [50, 0]]))
    loss = float(mining.loss_high(far, far, labels, labels, (w, b), 0.3).data)
    assert loss == pytest.approx(2 * np.log(4), abs=1e-9)  # triplets satisfied


def test_loss_high_single_identity_rejected():
    z = Tensor(np.ones((2, 3)))
    w = Tensor(np.zeros((3, 2)))
    b = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        mining.loss_high(z, z, np.zeros(2, dtype=int), np.zeros(2, dtype=int), (w, b))
