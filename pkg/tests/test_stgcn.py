import numpy as np
import pytest

from _oracles import joint_weight_loops, rel_err
from skelfuse import tensor as T
from skelfuse.errors import NumericError, UsageError
from skelfuse.graph import (
    PartitionedAdjacency,
    SkeletonSequence,
    SkeletonTemplate,
    build_adjacency,
    default_template,
    normalize_adjacency,
    partition_neighbors,
)
from skelfuse.rng import Rng
from skelfuse.stgcn import (
    StGcnConfig,
    StGcnLayer,
    StGcnNet,
    batch_joint_weights,
    extract_joint_weights,
    gcn_layer_forward,
    gcn_reference_forward,
    stgcn_classify,
)

F = np.float32


def single_vertex_adjacency(alpha=0.001):
    raw = np.zeros((3, 1, 1), dtype=F)
    raw[0, 0, 0] = 1.0
    return normalize_adjacency(PartitionedAdjacency(raw=raw), alpha=alpha)


def chain_adjacency(positions, alpha=0.001):
    m = len(positions)
    tpl = SkeletonTemplate(m, [(i, i + 1) for i in range(m - 1)])
    coords = np.tile(np.asarray(positions, dtype=F)[None, :, :], (2, 1, 1))
    return tpl, normalize_adjacency(partition_neighbors(tpl, SkeletonSequence(coords)),
                                    alpha=alpha)


# ---------------------------------------------------------- reference oracle


def test_reference_single_vertex_identity():
    raw = np.zeros((3, 1, 1), dtype=F)
    raw[0, 0, 0] = 1.0
    feats = Rng(1).uniform(-1, 1, (4, 3, 1))
    out = gcn_reference_forward(feats, PartitionedAdjacency(raw=raw),
                                [np.eye(4, dtype=F)] * 3)
    assert np.allclose(out, feats, atol=1e-6)


def test_reference_two_vertex_edge_sums_neighbors():
    raw = np.zeros((3, 2, 2), dtype=F)
    raw[0] = np.eye(2, dtype=F)
    raw[1][0, 1] = 1.0
    raw[1][1, 0] = 1.0
    feats = np.zeros((2, 1, 2), dtype=F)
    feats[:, 0, 0] = [1.0, 2.0]
    feats[:, 0, 1] = [10.0, 20.0]
    out = gcn_reference_forward(feats, PartitionedAdjacency(raw=raw),
                                [np.eye(2, dtype=F)] * 3)
    # each subset has cardinality 1, so output = own + neighbor feature
    assert np.allclose(out[:, 0, 0], [11.0, 22.0])
    assert np.allclose(out[:, 0, 1], [11.0, 22.0])


def test_reference_matches_matrix_form_on_regular_chain():
    # 2-vertex edge: every non-empty subset has cardinality 1 and degree 1,
    # so Eq.-2 (1/Z) and degree (1/sqrt(d_i d_j)) normalizations coincide as
    # alpha -> 0
    tpl, adj = chain_adjacency([[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], alpha=1e-7)
    rng = Rng(3)
    feats = rng.uniform(-1, 1, (3, 4, 2))
    weights = [rng.uniform(-1, 1, (3, 5)) for _ in range(3)]

    ref = gcn_reference_forward(feats, adj, weights)

    layer = StGcnLayer(Rng(0), 3, 5, vertices=2, temporal_kernel=1, stride=1,
                       name="probe")
    for k in range(3):
        layer.weights[k].value.data[...] = weights[k]
    spatial = layer.spatial(T.Tensor(feats[None]), T.Tensor(adj.normalized))
    assert rel_err(spatial.data[0], ref) < 1e-4


def test_reference_routing_matches_matrix_sparsity():
    # on a 3-chain the two normalizations differ, but which vertices talk to
    # which must agree exactly
    tpl, adj = chain_adjacency([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    rng = Rng(4)
    weights = [rng.uniform(0.5, 1.0, (1, 1)) for _ in range(3)]
    layer = StGcnLayer(Rng(0), 1, 1, vertices=3, temporal_kernel=1, stride=1,
                       name="probe")
    for k in range(3):
        layer.weights[k].value.data[...] = weights[k]
    for probe_vertex in range(3):
        feats = np.zeros((1, 1, 3), dtype=F)
        feats[0, 0, probe_vertex] = 1.0
        ref = gcn_reference_forward(feats, adj, weights)
        spatial = layer.spatial(T.Tensor(feats[None]), T.Tensor(adj.normalized))
        assert np.array_equal(ref[0, 0] != 0, spatial.data[0, 0, 0] != 0)


# ---------------------------------------------------------- layer forward


def test_layer_closed_form_single_vertex():
    # all-ones masks, unit temporal kernel, identity weights, identity-only
    # graph: layer = relu(batchnorm(x / (1 + alpha)))
    alpha = 0.001
    adj = single_vertex_adjacency(alpha)
    layer = StGcnLayer(Rng(0), 2, 2, vertices=1, temporal_kernel=1, stride=1,
                       name="probe")
    for k in range(3):
        layer.weights[k].value.data[...] = np.eye(2, dtype=F)
    layer.tkernel.value.data[...] = np.eye(2, dtype=F).reshape(2, 2, 1, 1)
    x = Rng(5).uniform(-2, 2, (4, 2, 6, 1))
    out = gcn_layer_forward(T.Tensor(x), layer, adj, training=True)

    scaled = x / np.float32(1.0 + alpha)
    mu = scaled.mean(axis=(0, 2, 3), keepdims=True)
    var = scaled.var(axis=(0, 2, 3), keepdims=True)
    expect = np.maximum((scaled - mu) / np.sqrt(var + 1e-5), 0.0)
    assert rel_err(out.data, expect) < 1e-5


def test_layer_zero_input_zero_spatial():
    tpl, adj = chain_adjacency([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    layer = StGcnLayer(Rng(1), 3, 4, vertices=3, temporal_kernel=3, stride=1,
                       name="probe")
    out = layer.spatial(T.Tensor(np.zeros((2, 3, 5, 3), dtype=F)),
                        T.Tensor(adj.normalized))
    assert not out.data.any()


def test_layer_spatial_matches_per_frame_matvec_loop():
    tpl, adj = chain_adjacency([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    rng = Rng(6)
    layer = StGcnLayer(rng, 2, 4, vertices=3, temporal_kernel=1, stride=1,
                       name="probe")
    for k in range(3):
        layer.masks[k].value.data[...] = rng.uniform(0.5, 1.5, (3, 3))
    x = rng.uniform(-1, 1, (2, 2, 5, 3))
    got = layer.spatial(T.Tensor(x), T.Tensor(adj.normalized)).data

    expect = np.zeros_like(got, dtype=np.float64)
    for k in range(3):
        b = (adj.normalized[k] * layer.masks[k].data).astype(np.float64)
        w = layer.weights[k].data.astype(np.float64)
        for n in range(2):
            for t in range(5):
                h = x[n, :, t, :].T.astype(np.float64) @ w   # [V, Cout]
                expect[n, :, t, :] += (b @ h).T
    assert rel_err(got, expect) < 1e-5


def test_layer_per_sample_adjacency_matches_shared():
    tpl = default_template()
    rng = Rng(7)
    coords = rng.uniform(1.0, 2.0, (4, tpl.joint_count, 3))
    adj = build_adjacency(tpl, SkeletonSequence(coords))
    layer = StGcnLayer(rng, 3, 8, vertices=tpl.joint_count, temporal_kernel=3,
                       stride=1, name="probe")
    x = rng.uniform(-1, 1, (3, 3, 6, tpl.joint_count))
    shared = layer.forward(T.Tensor(x), T.Tensor(adj.normalized), training=False)
    stacked = np.stack([adj.normalized] * 3)
    per_sample = layer.forward(T.Tensor(x), T.Tensor(stacked), training=False)
    assert rel_err(shared.data, per_sample.data) < 1e-6


def test_layer_gradients_pass_finite_diff():
    tpl, adj = chain_adjacency([[1.0, 0, 0], [2.0, 0, 0], [3.5, 0, 0]])
    rng = Rng(8)
    layer = StGcnLayer(rng, 2, 3, vertices=3, temporal_kernel=3, stride=1,
                       name="probe")
    x0 = rng.uniform(-1, 1, (1, 2, 4, 3))
    adj_t = T.Tensor(adj.normalized)

    def wrt_input(t):
        return layer.forward(t, adj_t, training=True)

    assert T.finite_diff_check(wrt_input, T.Tensor(x0)) < 1e-3

    x_const = T.Tensor(x0)

    def wrt_mask(t):
        saved = layer.masks[1].value
        layer.masks[1].value = t
        try:
            return layer.forward(x_const, adj_t, training=True)
        finally:
            layer.masks[1].value = saved

    assert T.finite_diff_check(wrt_mask, T.Tensor(layer.masks[1].data.copy())) < 1e-3

    def wrt_weight(t):
        saved = layer.weights[0].value
        layer.weights[0].value = t
        try:
            return layer.forward(x_const, adj_t, training=True)
        finally:
            layer.weights[0].value = saved

    assert T.finite_diff_check(wrt_weight, T.Tensor(layer.weights[0].data.copy())) < 1e-3


def test_layer_nonfinite_names_layer():
    adj = single_vertex_adjacency()
    layer = StGcnLayer(Rng(9), 1, 1, vertices=1, temporal_kernel=1, stride=1,
                       name="layer7")
    x = np.full((1, 1, 2, 1), 1e38, dtype=F)
    layer.weights[0].value.data[...] = 1e38
    with pytest.raises(NumericError):
        layer.forward(T.Tensor(x), T.Tensor(adj.normalized), training=True)


def test_permutation_consistency():
    tpl = default_template()
    m = tpl.joint_count
    rng = Rng(10)
    coords = rng.uniform(1.0, 2.0, (4, m, 3))
    seq = SkeletonSequence(coords)
    adj = build_adjacency(tpl, seq)
    layer = StGcnLayer(rng, 3, 4, vertices=m, temporal_kernel=3, stride=1,
                       name="probe")
    x = rng.uniform(-1, 1, (1, 3, 4, m))
    base = layer.forward(T.Tensor(x), T.Tensor(adj.normalized), training=False).data

    perm = Rng(11).permutation(m)
    adj_p = PartitionedAdjacency(raw=adj.raw[:, perm][:, :, perm],
                                 normalized=adj.normalized[:, perm][:, :, perm])
    for k in range(3):
        layer.masks[k].value.data[...] = layer.masks[k].data[perm][:, perm]
    permuted = layer.forward(T.Tensor(x[:, :, :, perm]), T.Tensor(adj_p.normalized),
                             training=False).data
    assert rel_err(permuted, base[:, :, :, perm]) < 1e-5


# ---------------------------------------------------------- classifier


def make_net(num_classes=4, vertices=15):
    cfg = StGcnConfig(vertices=vertices, num_classes=num_classes,
                      channels=(8, 8), strides=(1, 2), temporal_kernel=3)
    return StGcnNet(cfg, Rng(42))


def test_classify_probabilities_sum_to_one():
    tpl = default_template()
    net = make_net()
    coords = Rng(12).uniform(1.0, 2.0, (8, tpl.joint_count, 3))
    _, probs, feats = stgcn_classify(net, SkeletonSequence(coords), tpl)
    assert abs(float(probs.data.sum()) - 1.0) < 1e-6
    assert len(feats) == 1 and feats[0].data.ndim == 3


def test_classify_deterministic():
    tpl = default_template()
    net = make_net()
    coords = Rng(13).uniform(1.0, 2.0, (8, tpl.joint_count, 3))
    a = stgcn_classify(net, SkeletonSequence(coords), tpl)[1].data
    b = stgcn_classify(net, SkeletonSequence(coords), tpl)[1].data
    assert a.tobytes() == b.tobytes()


def test_classify_two_subjects_averages_feature_maps():
    tpl = default_template()
    net = make_net()
    rng = Rng(14)
    s1 = SkeletonSequence(rng.uniform(1.0, 2.0, (8, tpl.joint_count, 3)))
    s2 = SkeletonSequence(rng.uniform(1.0, 2.0, (8, tpl.joint_count, 3)))
    logits, probs, feats = stgcn_classify(net, [s1, s2], tpl)
    assert len(feats) == 2
    # the head must see the mean of the two subject maps
    merged = 0.5 * (feats[0].data + feats[1].data)
    pooled = merged.mean(axis=(1, 2))[None, :]
    expect = pooled @ net.head_w.data + net.head_b.data
    assert rel_err(logits.data, expect[0]) < 1e-5


def test_config_validation():
    with pytest.raises(UsageError):
        StGcnConfig(vertices=5, num_classes=2, channels=(8, 4), strides=(1, 1))
    with pytest.raises(UsageError):
        StGcnConfig(vertices=5, num_classes=2, temporal_kernel=4)


def test_state_roundtrip():
    net = make_net()
    other = make_net()
    other.layers[0].weights[0].value.data[...] = 0.0
    other.load_state(net.state_tensors())
    for a, b in zip(net.parameters(), other.parameters()):
        assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------- joint weights


def test_joint_weights_constant_features():
    feats = np.full((4, 3, 5), -2.0, dtype=F)
    w = extract_joint_weights(feats)
    assert np.allclose(w.data, 2.0)


def test_joint_weights_zero_map():
    assert not extract_joint_weights(np.zeros((2, 3, 4), dtype=F)).data.any()


def test_joint_weights_matches_triple_loop():
    feats = Rng(15).uniform(-3, 3, (3, 2, 5))
    got = extract_joint_weights(feats).data
    assert np.abs(got - joint_weight_loops(feats)).max() < 1e-6


def test_joint_weights_sign_flip_exact():
    feats = Rng(16).uniform(-2, 2, (8, 6, 15))
    a = extract_joint_weights(feats).data
    b = extract_joint_weights(-feats).data
    assert a.tobytes() == b.tobytes()


def test_joint_weights_positive_homogeneity():
    feats = Rng(17).uniform(-2, 2, (8, 6, 15))
    base = extract_joint_weights(feats).data
    for lam in (0.5, 2.0, 4.0):  # exponent shifts are exact in binary fp
        scaled = extract_joint_weights(np.float32(lam) * feats).data
        assert scaled.tobytes() == (np.float32(lam) * base).tobytes()
    lam = np.float32(1.7)
    assert np.abs(extract_joint_weights(lam * feats).data - lam * base).max() < 1e-6


def test_batch_joint_weights_matches_single():
    feats = Rng(18).uniform(-2, 2, (3, 4, 2, 6))
    batched = batch_joint_weights(T.Tensor(feats)).data
    for i in range(3):
        assert np.allclose(batched[i], extract_joint_weights(feats[i]).data, atol=1e-7)
