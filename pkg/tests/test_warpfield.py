import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sadfusion import dualquat as dqm
from sadfusion.errors import ConfigError, DegenerateBindingError
from sadfusion.warpfield import (
    CROSS_CLASS_WEIGHT,
    DeformationGraph,
    SurfelBinding,
    bind_surfels,
    blend_transform,
    blend_transforms,
    build_node_neighbors,
    compute_edge_weights,
    warp_surfel,
)

from conftest import random_transforms


def graph_with(positions, transforms=None, radius=0.5, labels=None):
    g = DeformationGraph()
    positions = np.asarray(positions, float)
    g.add_nodes(positions, radius, labels if labels is not None else np.ones(len(positions), int))
    if transforms is not None:
        g.transforms = np.asarray(transforms, float)
    return g


def translation(t):
    return dqm.dq_from_rt(np.array([1.0, 0, 0, 0]), np.asarray(t, float))


# ------------------------------------------------------------------ blending


def test_single_node_blend_returns_its_transform(rng):
    q = random_transforms(rng, 1)
    g = graph_with([[0.1, 0.2, 1.0]], q)
    np.testing.assert_allclose(blend_transform([0.3, 0.1, 0.9], [0], g), q[0], atol=1e-12)


def test_equal_transforms_blend_to_themselves(rng):
    q = random_transforms(rng, 1)
    g = graph_with([[0, 0, 0], [1, 0, 0]], np.vstack([q, q]))
    np.testing.assert_allclose(blend_transform([0, 0, 0], [0, 1], g), q[0], atol=1e-12)


def test_opposite_translations_cancel():
    g = graph_with([[-1, 0, 0], [1, 0, 0]], [translation([1, 0, 0]), translation([-1, 0, 0])], radius=1.0)
    m = dqm.dq_to_matrix(blend_transform([0, 0, 0], [0, 1], g))
    # oracle: average of the two homogeneous matrices
    oracle = 0.5 * (dqm.dq_to_matrix(translation([1, 0, 0])) + dqm.dq_to_matrix(translation([-1, 0, 0])))
    np.testing.assert_allclose(m, oracle, atol=1e-12)
    np.testing.assert_allclose(m, np.eye(4), atol=1e-12)


def test_antipodal_transform_blends_like_the_original(rng):
    q = random_transforms(rng, 2)
    flipped = q.copy()
    flipped[1] *= -1
    p = [[0, 0, 1.0], [0.05, 0, 1.0]]
    a = blend_transform([0.02, 0, 1.0], [0, 1], graph_with(p, q, radius=0.05))
    b = blend_transform([0.02, 0, 1.0], [0, 1], graph_with(p, flipped, radius=0.05))
    np.testing.assert_allclose(dqm.dq_to_matrix(a), dqm.dq_to_matrix(b), atol=1e-12)


def test_weights_fall_off_with_distance():
    g = graph_with([[0, 0, 0], [1, 0, 0]], [translation([1, 0, 0]), translation([0, 0, 0])], radius=0.3)
    near = dqm.dq_translation(blend_transform([0.1, 0, 0], [0, 1], g))
    far = dqm.dq_translation(blend_transform([0.9, 0, 0], [0, 1], g))
    assert near[0] > 0.5 > far[0]


def test_underflowing_weights_raise():
    g = graph_with([[0, 0, 0]], radius=0.01)
    with pytest.raises(DegenerateBindingError):
        blend_transform([100.0, 0, 0], [0], g)


def test_empty_binding_raises():
    with pytest.raises(ValueError):
        blend_transform([0, 0, 0], [], graph_with([[0, 0, 0]]))


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
@settings(max_examples=50)
def test_blend_is_normalized_and_scale_invariant(seed, factor):
    rng = np.random.default_rng(seed)
    transforms = random_transforms(rng, 4, rot_scale=1.0, trans_scale=0.5)
    nodes = rng.integers(0, 4, size=(6, 3))
    weights = rng.random((6, 3)) + 0.01
    a = blend_transforms(SurfelBinding(nodes, weights), transforms)
    b = blend_transforms(SurfelBinding(nodes, weights * factor), transforms)
    np.testing.assert_allclose(np.linalg.norm(a[:, :4], axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.sum(a[:, :4] * a[:, 4:], axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(a, b, atol=1e-12)


# ------------------------------------------------------------------- warping


def test_warp_identity():
    v, n = np.array([[1.0, 2, 3]]), np.array([[0, 0, 1.0]])
    wv, wn = warp_surfel(v, n, dqm.IDENTITY[None])
    np.testing.assert_allclose(wv, v)
    np.testing.assert_allclose(wn, n)


def test_warp_translation_moves_vertex_only():
    v, n = np.array([[1.0, 2, 3]]), np.array([[0.6, 0, 0.8]])
    wv, wn = warp_surfel(v, n, translation([0.1, -0.2, 0.3])[None])
    np.testing.assert_allclose(wv, v + [0.1, -0.2, 0.3], atol=1e-15)
    np.testing.assert_allclose(wn, n, atol=1e-15)


def test_warp_quarter_turn_about_z():
    q = dqm.dq_from_rt(dqm.quat_from_axis_angle(np.array([0, 0, np.pi / 2])), np.zeros(3))
    wv, wn = warp_surfel(np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0]]), q[None])
    np.testing.assert_allclose(wv, [[0, 1, 0]], atol=1e-15)
    np.testing.assert_allclose(wn, [[0, 1, 0]], atol=1e-15)


@given(arrays(np.float64, (6, 3), elements=st.floats(-1, 1)), st.integers(0, 2**32 - 1))
def test_single_transform_preserves_distances(pts, seed):
    q = random_transforms(np.random.default_rng(seed), 1, rot_scale=2.0, trans_scale=1.0)
    normals = np.tile([0, 0, 1.0], (len(pts), 1))
    wv, wn = warp_surfel(pts, normals, np.tile(q, (len(pts), 1)))
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(wv[:, None] - wv[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(wn, axis=1), 1.0, atol=1e-12)


# ------------------------------------------------------------------- binding


def test_single_node_binds_everything(rng):
    b = bind_surfels(rng.normal(size=(20, 3)), graph_with([[0, 0, 0]]), k=4)
    assert b.nodes.shape == (20, 1)
    assert np.all(b.nodes == 0)


def test_coincident_surfel_binds_its_node():
    g = graph_with([[0, 0, 0], [5, 0, 0], [0, 5, 0]])
    b = bind_surfels(np.array([[5.0, 0, 0]]), g, k=1)
    assert b.nodes[0, 0] == 1


def test_line_example():
    g = graph_with([[x, 0, 0] for x in range(4)])
    b = bind_surfels(np.array([[1.4, 0, 0]]), g, k=2)
    assert sorted(b.nodes[0]) == [1, 2]


def test_ties_go_to_lower_node_index():
    g = graph_with([[1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    b = bind_surfels(np.array([[0.0, 0, 0]]), g, k=2)
    assert list(b.nodes[0]) == [0, 1]


def test_empty_graph_raises():
    with pytest.raises(ValueError):
        bind_surfels(np.zeros((1, 3)), DeformationGraph())


def test_nearest_node_matches_brute_force():
    rng = np.random.default_rng(7)
    nodes = rng.random((100, 3))
    surfels = rng.random((1000, 3))
    b = bind_surfels(surfels, graph_with(nodes), k=1)
    d2 = np.sum((surfels[:, None] - nodes[None]) ** 2, axis=-1)
    np.testing.assert_array_equal(b.nodes[:, 0], np.argmin(d2, axis=1))


@given(arrays(np.float64, (30, 3), elements=st.floats(0, 1)), arrays(np.float64, (1, 3), elements=st.floats(0, 1)),
       st.integers(1, 10))
@settings(max_examples=50)
def test_nearest_node_property(surfels, extra, n_nodes):
    nodes = np.vstack([extra, surfels[:n_nodes]])
    b = bind_surfels(surfels, graph_with(nodes), k=1)
    d2 = np.sum((surfels[:, None] - nodes[None]) ** 2, axis=-1)
    np.testing.assert_array_equal(b.nodes[:, 0], np.argmin(d2, axis=1))


def test_label_aware_binding_damps_cross_class_weights():
    g = graph_with([[0, 0, 0], [0.1, 0, 0]], labels=np.array([1, 2]), radius=0.2)
    pts = np.array([[0.04, 0, 0]])
    plain = bind_surfels(pts, g, k=2)
    aware = bind_surfels(pts, g, k=2, surfel_labels=np.array([1]))
    np.testing.assert_array_equal(plain.nodes, aware.nodes)
    assert aware.weights[0, 0] == plain.weights[0, 0]
    assert aware.weights[0, 1] == pytest.approx(CROSS_CLASS_WEIGHT * plain.weights[0, 1])


# --------------------------------------------------------------- graph edges


@given(arrays(np.float64, (12, 3), elements=st.floats(-1, 1), unique=True), st.integers(1, 11))
@settings(max_examples=50)
def test_node_neighbors_have_no_self_loops_or_duplicates(pos, k):
    nb = build_node_neighbors(pos, k)
    assert nb.shape == (12, k)
    for i, row in enumerate(nb):
        assert i not in row
        assert len(set(row)) == len(row)


def test_edge_weight_examples():
    table = {1: 1.0, 2: 1.0, 3: 0.3}  # 1 table, 2 cup, 3 human
    labels = np.array([1, 1, 3, 3, 2])
    nb = np.array([[1], [0], [3], [2], [0]])
    w = compute_edge_weights(labels, nb, table)
    assert w[0, 0] == 1.0  # table-table
    assert w[2, 0] == 0.3  # human-human
    assert w[4, 0] == 0.1  # cup-table


def test_edge_weights_missing_class_is_config_error():
    with pytest.raises(ConfigError, match="3"):
        compute_edge_weights(np.array([1, 3]), np.array([[1], [0]]), {1: 1.0, 2: 1.0})
    with pytest.raises(ConfigError):
        compute_edge_weights(np.array([1, 1]), np.array([[1], [0]]), {1: 1.0}, n_classes=2)


def test_graph_json_dump():
    g = graph_with([[0, 0, 0], [1, 0, 0]], labels=np.array([1, 2]))
    g.neighbors = build_node_neighbors(g.positions, 1)
    g.edge_weights = compute_edge_weights(g.labels, g.neighbors, {1: 1.0, 2: 1.0})
    data = g.to_json()
    assert [n["label"] for n in data["nodes"]] == [1, 2]
    assert data["edges"] == [{"from": 0, "to": 1, "weight": 0.1}, {"from": 1, "to": 0, "weight": 0.1}]
