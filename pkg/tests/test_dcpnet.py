import math
from dataclasses import replace

import numpy as np
import pytest

from dcpreg import autodiff as ad, dcpnet, geometry as geo
from dcpreg.errors import DegenerateOutputError, InvalidInputError, ShapeError

import gradcheck
from gradcheck import numeric_grad

from conftest import random_rotation

TINY_V1 = dcpnet.ModelConfig(
    embedding="dgcnn", widths=(4, 4), emb_dims=8, attention=False,
    heads=2, ffn_dims=16, knn_k=3, head="svd", dtype="float64",
)
TINY_V2 = replace(TINY_V1, attention=True)


def unit_points(rng, n=16):
    pts = rng.normal(size=(n, 3))
    pts -= pts.mean(axis=0)
    return pts / np.linalg.norm(pts, axis=1).max()


# ---------------------------------------------------------------------------
# knn graph
# ---------------------------------------------------------------------------

def test_knn_collinear_endpoints():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    g = dcpnet.knn_graph(pts, 1)
    assert g.indices[0, 0] == 1
    assert g.indices[3, 0] == 2


def test_knn_complete_graph(rng):
    pts = rng.normal(size=(6, 3))
    g = dcpnet.knn_graph(pts, 5)
    for i in range(6):
        assert set(g.indices[i]) == set(range(6)) - {i}


def test_knn_matches_bruteforce(rng):
    pts = rng.normal(size=(500, 3))
    g = dcpnet.knn_graph(pts, 20)
    for i in range(0, 500, 13):
        d = np.linalg.norm(pts - pts[i], axis=1)
        d[i] = np.inf
        want = np.argsort(d, kind="stable")[:20]
        assert np.array_equal(g.indices[i], want)


def test_knn_invalid_k(rng):
    pts = rng.normal(size=(5, 3))
    with pytest.raises(InvalidInputError):
        dcpnet.knn_graph(pts, 5)
    with pytest.raises(InvalidInputError):
        dcpnet.knn_graph(pts, 0)


def test_knn_tie_breaks_to_lowest_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [2.0, 0, 0]])
    g = dcpnet.knn_graph(pts, 2)
    assert np.array_equal(g.indices[0], [1, 2])  # both at distance 1


# ---------------------------------------------------------------------------
# pointnet embedding
# ---------------------------------------------------------------------------

def test_pointnet_duplicate_points_identical_rows(rng):
    cfg = replace(TINY_V1, embedding="pointnet")
    model = dcpnet.ModelParams.initialize(cfg, seed=0)
    pts = unit_points(rng, 10)
    pts[7] = pts[2]
    f = dcpnet.pointnet_embed(pts, model)
    assert np.array_equal(f.data[2], f.data[7])


def test_pointnet_permutation_equivariance(rng):
    cfg = replace(TINY_V1, embedding="pointnet")
    model = dcpnet.ModelParams.initialize(cfg, seed=0)
    pts = unit_points(rng, 12)
    perm = rng.permutation(12)
    f = dcpnet.pointnet_embed(pts, model)
    f_perm = dcpnet.pointnet_embed(pts[perm], model)
    assert np.array_equal(f.data[perm], f_perm.data)


def test_pointnet_default_output_shape(rng):
    cfg = dcpnet.ModelConfig(embedding="pointnet", attention=False, dtype="float32")
    assert cfg.resolved_widths == (64, 64, 64, 128)
    model = dcpnet.ModelParams.initialize(cfg, seed=1)
    f = dcpnet.pointnet_embed(unit_points(rng, 1024), model)
    assert f.shape == (1024, 512)


# ---------------------------------------------------------------------------
# edge convolution / dgcnn
# ---------------------------------------------------------------------------

def test_edgeconv_identical_inputs_give_identical_rows(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=0)
    n, k = 6, 3
    f = ad.tensor(np.tile(rng.normal(size=(1, 3)), (n, 1)))
    graph = dcpnet.KnnGraph(k, np.tile(np.arange(k), (n, 1)))
    out = dcpnet.edgeconv_layer(f, graph, model, "embed.l0")
    assert np.allclose(out.data, out.data[0], atol=1e-12)


def test_edgeconv_k1_is_identity_aggregation(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=0)
    pts = unit_points(rng, 8)
    graph = dcpnet.knn_graph(pts, 1)
    out = dcpnet.edgeconv_layer(ad.tensor(pts), graph, model, "embed.l0")
    # Manual single-edge computation: no max needed over one neighbor.
    xi = pts
    xj = pts[graph.indices[:, 0]]
    wa = model.params["embed.l0.wa"].data
    wb = model.params["embed.l0.wb"].data
    b = model.params["embed.l0.b"].data
    st = model.bn_states["embed.l0.bn"]
    pre = xi @ wa + (xj - xi) @ wb + b
    xhat = (pre - st.running_mean) / np.sqrt(st.running_var + st.eps)
    want = np.maximum(model.params["embed.l0.bn.gamma"].data * xhat + model.params["embed.l0.bn.beta"].data, 0)
    assert np.allclose(out.data, want, atol=1e-12)


def test_edgeconv_neighbor_order_invariance(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=0)
    pts = unit_points(rng, 10)
    graph = dcpnet.knn_graph(pts, 4)
    shuffled = graph.indices.copy()
    for row in shuffled:
        rng.shuffle(row)
    out1 = dcpnet.edgeconv_layer(ad.tensor(pts), graph, model, "embed.l0")
    out2 = dcpnet.edgeconv_layer(ad.tensor(pts), dcpnet.KnnGraph(4, shuffled), model, "embed.l0")
    assert np.array_equal(out1.data, out2.data)


def test_dgcnn_output_shape_default(rng):
    cfg = dcpnet.ModelConfig(attention=False, dtype="float32")
    assert cfg.resolved_widths == (64, 64, 128, 256)
    model = dcpnet.ModelParams.initialize(cfg, seed=2)
    f = dcpnet.dgcnn_embed(unit_points(rng, 64), model)
    assert f.shape == (64, 512)


def test_dgcnn_not_rotation_invariant(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=3)
    pts = unit_points(rng, 20)
    rot = geo.euler_zyx_to_matrix(math.radians(30), 0, 0)
    f1 = dcpnet.dgcnn_embed(pts, model)
    f2 = dcpnet.dgcnn_embed(pts @ rot.T, model)
    assert np.abs(f1.data - f2.data).max() > 1e-6


def test_dgcnn_permutation_equivariance(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=3)
    pts = unit_points(rng, 14)
    perm = rng.permutation(14)
    f = dcpnet.dgcnn_embed(pts, model)
    f_perm = dcpnet.dgcnn_embed(pts[perm], model)
    assert np.allclose(f.data[perm], f_perm.data, atol=1e-12)


# ---------------------------------------------------------------------------
# attention residual
# ---------------------------------------------------------------------------

def test_attention_zero_projection_is_identity(rng):
    model = dcpnet.ModelParams.initialize(TINY_V2, seed=4)
    f_x = ad.tensor(rng.normal(size=(10, 8)))
    f_y = ad.tensor(rng.normal(size=(12, 8)))
    phi_x, phi_y = dcpnet.transformer_attention(f_x, f_y, model)
    assert np.array_equal(phi_x.data, f_x.data)
    assert np.array_equal(phi_y.data, f_y.data)


def randomize_attention_output(model, rng):
    if "attn.out.w" not in model.params:
        return
    w = model.params["attn.out.w"]
    w.data = rng.normal(size=w.shape).astype(w.dtype) * 0.3


def test_attention_residual_is_asymmetric(rng):
    model = dcpnet.ModelParams.initialize(TINY_V2, seed=5)
    randomize_attention_output(model, rng)
    a = ad.tensor(rng.normal(size=(9, 8)))
    b = ad.tensor(rng.normal(size=(9, 8)))
    phi_ab, phi_ba = dcpnet.transformer_attention(a, b, model)
    res_ab = phi_ab.data - a.data
    res_ba = phi_ba.data - b.data
    assert np.abs(res_ab - res_ba).max() > 1e-8


@pytest.mark.parametrize("n", [8, 64, 1024])
def test_attention_shape_preserved(n, rng):
    model = dcpnet.ModelParams.initialize(replace(TINY_V2, dtype="float32"), seed=6)
    randomize_attention_output(model, rng)
    f_x = ad.tensor(rng.normal(size=(n, 8)).astype(np.float32))
    f_y = ad.tensor(rng.normal(size=(n, 8)).astype(np.float32))
    phi_x, phi_y = dcpnet.transformer_attention(f_x, f_y, model)
    assert phi_x.shape == (n, 8)
    assert phi_y.shape == (n, 8)


# ---------------------------------------------------------------------------
# pointer + soft correspondence
# ---------------------------------------------------------------------------

def test_pointer_aligned_orthonormal_peaks_on_diagonal():
    phi = ad.tensor(np.eye(4) * 12.0)
    match = dcpnet.pointer_softmatch(phi, phi)
    assert np.array_equal(np.argmax(match.data, axis=1), np.arange(4))
    assert np.allclose(match.data.sum(axis=1), 1.0, atol=1e-12)


def test_pointer_zero_embeddings_uniform():
    phi_x = ad.tensor(np.zeros((3, 5)))
    phi_y = ad.tensor(np.zeros((7, 5)))
    match = dcpnet.pointer_softmatch(phi_x, phi_y)
    assert np.allclose(match.data, 1.0 / 7.0, atol=1e-12)


def test_pointer_analytic_two_target_case():
    phi_x = ad.tensor(np.array([[1.0]]))
    phi_y = ad.tensor(np.array([[0.0], [math.log(3.0)]]))
    match = dcpnet.pointer_softmatch(phi_x, phi_y)
    assert np.allclose(match.data, [[0.25, 0.75]], atol=1e-12)


def test_pointer_scaling_flag():
    phi = ad.tensor(np.eye(4) * 3.0)
    raw = dcpnet.pointer_softmatch(phi, phi, scale_logits=False)
    scaled = dcpnet.pointer_softmatch(phi, phi, scale_logits=True)
    assert not np.allclose(raw.data, scaled.data)


def test_soft_correspondence_onehot_reindexes(rng):
    y = rng.normal(size=(6, 3))
    idx = np.array([3, 1, 4])
    match = np.zeros((3, 6))
    match[np.arange(3), idx] = 1.0
    out = dcpnet.soft_correspondence(ad.tensor(match), y)
    assert np.allclose(out.data, y[idx], atol=1e-12)


def test_soft_correspondence_uniform_gives_centroid(rng):
    y = rng.normal(size=(8, 3))
    match = np.full((5, 8), 1.0 / 8.0)
    out = dcpnet.soft_correspondence(ad.tensor(match), y)
    assert np.allclose(out.data, y.mean(axis=0), atol=1e-12)


def test_soft_correspondence_convex_hull_bound(rng):
    y = rng.normal(size=(10, 3))
    logits = rng.normal(size=(7, 10))
    match = dcpnet.pointer_softmatch(ad.tensor(logits), ad.tensor(np.eye(10)))
    out = dcpnet.soft_correspondence(match, y)
    lo, hi = y.min(axis=0), y.max(axis=0)
    assert (out.data >= lo - 1e-12).all()
    assert (out.data <= hi + 1e-12).all()


def test_softmatch_rows_stochastic_float32(rng):
    cfg = replace(TINY_V2, dtype="float32")
    model = dcpnet.ModelParams.initialize(cfg, seed=8)
    randomize_attention_output(model, np.random.default_rng(0))
    for trial in range(5):
        pts_x = unit_points(np.random.default_rng(trial), 32)
        pts_y = unit_points(np.random.default_rng(trial + 50), 40)
        out = dcpnet.dcp_forward(pts_x, pts_y, model)
        sums = out.match.data.sum(axis=1)
        assert np.abs(sums - 1.0).max() < 1e-6
        assert (out.match.data >= 0).all() and (out.match.data <= 1).all()


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

def test_forward_untrained_is_valid_transform(rng):
    for cfg, seed in ((TINY_V1, 11), (TINY_V2, 12)):
        model = dcpnet.ModelParams.initialize(cfg, seed=seed)
        randomize_attention_output(model, rng)
        x = unit_points(rng, 20)
        y = unit_points(rng, 20)
        transform = dcpnet.dcp_predict(x, y, model)  # validates orthogonality
        assert isinstance(transform, geo.RigidTransform)


def test_v2_with_zero_residual_equals_v1(rng):
    v2 = dcpnet.ModelParams.initialize(TINY_V2, seed=13)
    v1 = dcpnet.ModelParams(TINY_V1, v2.params, v2.bn_states)  # shared weights
    for trial in range(5):
        r = np.random.default_rng(trial)
        x, y = unit_points(r, 16), unit_points(r, 16)
        out1 = dcpnet.dcp_forward(x, y, v1)
        out2 = dcpnet.dcp_forward(x, y, v2)
        assert np.array_equal(out1.rotation.data, out2.rotation.data)
        assert np.array_equal(out1.translation.data, out2.translation.data)
        assert np.array_equal(out1.match.data, out2.match.data)


def test_forward_permutation_of_source_leaves_transform(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=14)
    x, y = unit_points(rng, 18), unit_points(rng, 18)
    perm = rng.permutation(18)
    t1 = dcpnet.dcp_predict(x, y, model)
    t2 = dcpnet.dcp_predict(x[perm], y, model)
    assert np.abs(t1.rotation - t2.rotation).max() < 1e-5
    assert np.abs(t1.translation - t2.translation).max() < 1e-5


def test_forward_gradients_tiny_model(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=15)
    x, y = unit_points(np.random.default_rng(1), 8), unit_points(np.random.default_rng(2), 8)
    gt = geo.RigidTransform.identity()

    def forward():
        out = dcpnet.dcp_forward(x, y, model, training=True)
        return dcpnet.dcp_loss(out.rotation, out.translation, gt)

    model.zero_grad()
    with ad.Tape() as tape:
        loss = forward()
    ad.backward(tape, loss)
    checked = 0
    for name in ("embed.l0.wa", "embed.l0.wb", "embed.l1.bn.gamma", "embed.l2.wb", "embed.l2.b"):
        p = model.params[name]
        num = numeric_grad(lambda: forward().item(), p)
        gradcheck.assert_grads_close(p.grad, num, 1e-4, name)
        checked += 1
    assert checked == 5


# ---------------------------------------------------------------------------
# mlp head
# ---------------------------------------------------------------------------

def test_quaternion_identity_rotation():
    r = dcpnet.quaternion_to_rotation(ad.tensor([1.0, 0.0, 0.0, 0.0]))
    assert np.allclose(r.data, np.eye(3), atol=1e-12)


def test_quaternion_matches_reference(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        r = dcpnet.quaternion_to_rotation(ad.tensor(q))
        qn = q / np.linalg.norm(q)
        w, x, y, z = qn
        want = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
        assert np.allclose(r.data, want, atol=1e-12)


def test_quaternion_zero_norm_rejected():
    with pytest.raises(DegenerateOutputError):
        dcpnet.quaternion_to_rotation(ad.tensor([0.0, 0.0, 0.0, 0.0]))


def test_mlp_head_outputs_proper_rotation(rng):
    cfg = replace(TINY_V1, head="mlp", mlp_head_widths=(8, 4))
    model = dcpnet.ModelParams.initialize(cfg, seed=16)
    x, y = unit_points(rng, 12), unit_points(rng, 12)
    out = dcpnet.dcp_forward(x, y, model)
    r = out.rotation.data
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(r) - 1) < 1e-9
    transform = dcpnet.dcp_predict(x, y, model)
    assert isinstance(transform, geo.RigidTransform)


def test_mlp_head_gradients(rng):
    cfg = replace(TINY_V1, head="mlp", mlp_head_widths=(8, 4))
    model = dcpnet.ModelParams.initialize(cfg, seed=17)
    x, y = unit_points(np.random.default_rng(3), 8), unit_points(np.random.default_rng(4), 8)
    gt = geo.RigidTransform(random_rotation(np.random.default_rng(5)), np.zeros(3))

    def forward():
        out = dcpnet.dcp_forward(x, y, model, training=True)
        return dcpnet.dcp_loss(out.rotation, out.translation, gt)

    model.zero_grad()
    with ad.Tape() as tape:
        loss = forward()
    assert np.isfinite(loss.data)
    ad.backward(tape, loss)
    for name in ("head.fc0.w", "head.rot.w", "head.trans.b"):
        p = model.params[name]
        num = numeric_grad(lambda: forward().item(), p)
        gradcheck.assert_grads_close(p.grad, num, 1e-4, name)


def test_mlp_head_zero_rot_weights_degenerate(rng):
    cfg = replace(TINY_V1, head="mlp", mlp_head_widths=(8, 4))
    model = dcpnet.ModelParams.initialize(cfg, seed=18)
    model.params["head.rot.w"].data[...] = 0.0
    model.params["head.rot.b"].data[...] = 0.0
    with pytest.raises(DegenerateOutputError):
        dcpnet.dcp_forward(unit_points(rng, 10), unit_points(rng, 10), model)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def test_loss_zero_when_equal(rng):
    gt = geo.RigidTransform(random_rotation(rng), rng.normal(size=3))
    loss = dcpnet.dcp_loss(ad.tensor(gt.rotation), ad.tensor(gt.translation), gt)
    assert abs(loss.item()) < 1e-18


def test_loss_translation_offset():
    gt = geo.RigidTransform.identity()
    loss = dcpnet.dcp_loss(ad.tensor(np.eye(3)), ad.tensor([1.0, 0.0, 0.0]), gt)
    assert np.isclose(loss.item(), 1.0)


def test_loss_half_turn_about_z():
    gt = geo.RigidTransform.identity()
    pred_r = geo.euler_zyx_to_matrix(math.pi, 0.0, 0.0)
    loss = dcpnet.dcp_loss(ad.tensor(pred_r), ad.tensor(np.zeros(3)), gt)
    assert np.isclose(loss.item(), 8.0)


def test_loss_lambda_term(rng):
    model = dcpnet.ModelParams.initialize(TINY_V1, seed=19)
    gt = geo.RigidTransform.identity()
    base = dcpnet.dcp_loss(ad.tensor(np.eye(3)), ad.tensor(np.zeros(3)), gt)
    reg = dcpnet.dcp_loss(
        ad.tensor(np.eye(3)), ad.tensor(np.zeros(3)), gt, model=model, weight_lambda=1e-3
    )
    norm_sq = sum(float((t.data**2).sum()) for t in model.params.values())
    assert np.isclose(reg.item() - base.item(), 1e-3 * norm_sq, rtol=1e-9)
