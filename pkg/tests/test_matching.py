import numpy as np
import pytest

from mlsgm import autodiff as ad
from mlsgm.activation import GLOBAL_CLASS, InstanceSet
from mlsgm.autodiff import Mlp, Param, ParamStore, finite_diff_check, mlp_forward
from mlsgm.graphs import build_assignment_graph, build_instance_graph, build_label_graph
from mlsgm.matching import (
    decode,
    edge_convolution,
    encode,
    forward,
    init_ilms_params,
    node_convolution,
)
from mlsgm.rng import SplitMix64


def make_graph(n_inst, n_labels, feat_dim=3, embed_dim=4, seed=0, k=2):
    rng = SplitMix64(seed)
    boxes = np.array([[rng.uniform(0, 0.5), rng.uniform(0, 0.5),
                       rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)]
                      for _ in range(n_inst)])
    inst = InstanceSet(
        features=ad.constant(rng.fill_uniform((n_inst, feat_dim), -1.0, 1.0)),
        boxes=boxes,
        scores=np.ones(n_inst),
        class_ids=np.array([GLOBAL_CLASS, *range(n_inst - 1)]),
    )
    emb = rng.fill_uniform((n_labels, embed_dim), -1.0, 1.0)
    return build_assignment_graph(build_instance_graph(inst, k), build_label_graph(emb))


def make_params(store=None, seed=1, feat_dim=3, embed_dim=4, widths=(6, 5)):
    store = store if store is not None else ParamStore()
    params = init_ilms_params(store, SplitMix64(seed), feat_dim, embed_dim, widths)
    return store, params


def zero_params(store):
    for p in store.params():
        p.value[...] = 0.0


def single_layer(w, b, sigmoid_out=False):
    return Mlp([(Param(np.asarray(w, float)), Param(np.asarray(b, float)))],
               sigmoid_out=sigmoid_out)


# ------------------------------------------------------------------ encode

def test_encode_zero_weights_gives_zero_latents():
    g = make_graph(3, 4)
    store, params = make_params()
    zero_params(store)
    state = encode(g, params)
    for attr in (state.inst_node, state.label_node, state.inst_edge,
                 state.label_edge, state.match_edge):
        assert not attr.value.any()


def test_encode_preserves_structure():
    g = make_graph(4, 3)
    _, params = make_params()
    state = encode(g, params)
    assert state.inst_edge.value.shape[0] == len(g.inst.edge_src)
    assert state.label_edge.value.shape[0] == len(g.labels.edge_src)
    assert state.match_edge.value.shape[0] == len(g.match_inst)
    assert state.inst_node.value.shape == (4, params.widths[0])


def test_encode_hand_set_single_layer_heads():
    # 1 instance, 1 label: latents must equal the hand matrix products
    g = make_graph(1, 1, feat_dim=2, embed_dim=2, seed=3)
    from mlsgm.matching import IlmsParams
    wn = np.array([[1.0, 2.0], [0.5, -1.0]])
    wl = np.array([[0.0, 1.0], [1.0, 0.0]])
    wm = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
    params = IlmsParams(
        enc_node_inst=single_layer(wn, [0.1, -0.2]),
        enc_node_label=single_layer(wl, [0.0, 0.0]),
        enc_edge_inst=single_layer(np.zeros((2, 8)), np.zeros(2)),
        enc_edge_label=single_layer(np.zeros((2, 4)), np.zeros(2)),
        enc_edge_match=single_layer(wm, [1.0, 1.0]),
        blocks=[],
        dec_match=single_layer(np.zeros((1, 2)), np.zeros(1), sigmoid_out=True),
        widths=(2,),
    )
    state = encode(g, params)
    x = g.inst.feats.value[0]
    e = g.labels.feats[0]
    assert np.allclose(state.inst_node.value[0], wn @ x + [0.1, -0.2])
    assert np.allclose(state.label_node.value[0], wl @ e)
    assert np.allclose(state.match_edge.value[0], wm @ np.concatenate([x, e]) + 1.0)


# -------------------------------------------------------------- node conv

def test_node_conv_single_instance_uses_only_matching_aggregate():
    g = make_graph(1, 3)
    store, params = make_params(feat_dim=3, embed_dim=4)
    state = encode(g, params)
    out = node_convolution(state, params, 0)
    # reference: instance aggregate over kNN edges is the zero vector
    blk = params.blocks[0]
    v_hat = np.zeros(params.widths[0])
    msg = mlp_forward(blk.rho_tilde_n_o, ad.concat_cols([
        state.match_edge, ad.gather_rows(state.label_node, g.match_label)])).value
    v_tilde = msg.mean(axis=0)
    ref = mlp_forward(blk.phi_n_o, np.concatenate(
        [state.inst_node.value[0], v_hat, v_tilde])[None, :]).value[0]
    assert np.allclose(out.inst_node.value[0], ref, atol=1e-12)


def test_node_conv_hand_one_instance_one_label():
    g = make_graph(1, 1, feat_dim=2, embed_dim=2, seed=5)
    store, params = make_params(seed=7, feat_dim=2, embed_dim=2, widths=(2,))
    state = encode(g, params)
    out = node_convolution(state, params, 0)
    blk = params.blocks[0]
    v = state.inst_node.value[0]
    l = state.label_node.value[0]
    m = state.match_edge.value[0]
    v_tilde = mlp_forward(blk.rho_tilde_n_o, np.concatenate([m, l])[None, :]).value[0]
    expect_v = mlp_forward(blk.phi_n_o, np.concatenate([v, np.zeros(2), v_tilde])[None, :]).value[0]
    l_tilde = mlp_forward(blk.rho_tilde_n_l, np.concatenate([m, v])[None, :]).value[0]
    expect_l = mlp_forward(blk.phi_n_l, np.concatenate([l, np.zeros(2), l_tilde])[None, :]).value[0]
    assert np.allclose(out.inst_node.value[0], expect_v, atol=1e-12)
    assert np.allclose(out.label_node.value[0], expect_l, atol=1e-12)


def test_mean_aggregation_ignores_duplicated_neighbours():
    # with two nodes each incoming set is a single message; duplicating that
    # edge makes the aggregate a mean of identical terms, hence unchanged
    g = make_graph(2, 2, seed=11, k=1)
    store, params = make_params(seed=13)
    base = node_convolution(encode(g, params), params, 0).inst_node.value

    g2 = make_graph(2, 2, seed=11, k=1)
    e = 0
    g2.inst.edge_src = np.concatenate([g2.inst.edge_src, [g2.inst.edge_src[e]]])
    g2.inst.edge_dst = np.concatenate([g2.inst.edge_dst, [g2.inst.edge_dst[e]]])
    g2.inst.edge_attr = np.vstack([g2.inst.edge_attr, g2.inst.edge_attr[e]])
    from mlsgm.graphs import _incidence
    g2.agg_inst_from_inst = _incidence(g2.inst.edge_dst, 2, len(g2.inst.edge_src))
    dup = node_convolution(encode(g2, params), params, 0).inst_node.value
    assert np.allclose(base, dup, atol=1e-9)


def test_mean_aggregate_norm_bounded_by_max_message_norm():
    g = make_graph(5, 4, seed=17)
    store, params = make_params(seed=19)
    state = encode(g, params)
    blk = params.blocks[0]
    msgs = mlp_forward(blk.rho_hat_n_o, ad.concat_cols([
        state.inst_edge, ad.gather_rows(state.inst_node, g.inst.edge_src)])).value
    agg = g.agg_inst_from_inst @ msgs
    max_msg = np.linalg.norm(msgs, axis=1).max()
    for row in agg:
        assert np.linalg.norm(row) <= max_msg + 1e-12


# -------------------------------------------------------------- edge conv

def test_edge_conv_zero_weights_zero_edges():
    g = make_graph(3, 3)
    store, params = make_params()
    state = encode(g, params)
    zero_params(store)
    out = edge_convolution(node_convolution(state, params, 0), params, 0)
    assert not out.inst_edge.value.any()
    assert not out.match_edge.value.any()


def test_edge_conv_hand_matching_edge():
    g = make_graph(1, 1, feat_dim=2, embed_dim=2, seed=23)
    store, params = make_params(seed=29, feat_dim=2, embed_dim=2, widths=(2,))
    state = node_convolution(encode(g, params), params, 0)
    out = edge_convolution(state, params, 0)
    blk = params.blocks[0]
    pair = np.concatenate([state.inst_node.value[0], state.label_node.value[0]])
    e_hat = mlp_forward(blk.rho_e_m, pair[None, :]).value[0]
    expect = mlp_forward(blk.phi_e_m, np.concatenate(
        [state.match_edge.value[0], e_hat])[None, :]).value[0]
    assert np.allclose(out.match_edge.value[0], expect, atol=1e-12)


def test_edge_update_is_per_edge_independent():
    g = make_graph(4, 3, seed=31)
    store, params = make_params(seed=37)
    state = node_convolution(encode(g, params), params, 0)
    out = edge_convolution(state, params, 0)
    # permute matching-edge storage, recompute, unpermute: identical
    perm = np.random.RandomState(0).permutation(len(g.match_inst))
    from dataclasses import replace
    state_p = replace(state, match_edge=ad.constant(state.match_edge.value[perm]))
    g_p = replace(g, match_inst=g.match_inst[perm], match_label=g.match_label[perm])
    state_p = replace(state_p, graph=g_p)
    out_p = edge_convolution(state_p, params, 0)
    assert np.allclose(out_p.match_edge.value, out.match_edge.value[perm], atol=1e-12)


# ------------------------------------------------------------------ decode

def test_decode_zero_weights_all_half():
    g = make_graph(3, 4)
    store, params = make_params()
    zero_params(store)
    s = forward(g, params)
    assert s.value.shape == (3, 4)
    assert np.allclose(s.value, 0.5)


def test_decode_bounded_open_interval():
    g = make_graph(2, 5, seed=41)
    _, params = make_params(seed=43)
    s = forward(g, params)
    assert np.all((s.value > 0.0) & (s.value < 1.0))


def test_forward_shape_contract():
    g = make_graph(3, 4, seed=47)
    _, params = make_params(seed=53)
    assert forward(g, params).value.shape == (3, 4)


# ----------------------------------------------------------------- forward

def test_forward_equals_manual_stage_chain():
    g = make_graph(4, 3, seed=59)
    _, params = make_params(seed=61)
    state = encode(g, params)
    for bi in range(len(params.blocks)):
        state = node_convolution(state, params, bi)
        state = edge_convolution(state, params, bi)
    manual = decode(state, params)
    assert np.array_equal(forward(g, params).value, manual.value)


def _forward_with_instance_order(order, seed=67, widths=(6, 5)):
    rng = SplitMix64(seed)
    n = len(order)
    boxes = np.array([[rng.uniform(0, 0.4), rng.uniform(0, 0.4),
                       rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)]
                      for _ in range(n)])
    feats = rng.fill_uniform((n, 3), -1.0, 1.0)
    emb = rng.fill_uniform((4, 4), -1.0, 1.0)
    inst = InstanceSet(
        features=ad.constant(feats[order]),
        boxes=boxes[order],
        scores=np.ones(n),
        class_ids=np.array([GLOBAL_CLASS, *range(n - 1)]),
    )
    g = build_assignment_graph(build_instance_graph(inst, 2), build_label_graph(emb))
    _, params = make_params(seed=71, widths=widths)
    return forward(g, params).value


def test_instance_permutation_equivariance():
    base = _forward_with_instance_order([0, 1, 2, 3, 4])
    perm = [0, 3, 4, 1, 2]
    permuted = _forward_with_instance_order(perm)
    assert np.allclose(permuted, base[perm], atol=1e-9)


def test_label_permutation_equivariance():
    rng = SplitMix64(73)
    emb = rng.fill_uniform((5, 4), -1.0, 1.0)
    boxes = np.array([[rng.uniform(0, 0.4), rng.uniform(0, 0.4),
                       rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)]
                      for _ in range(3)])
    feats = rng.fill_uniform((3, 3), -1.0, 1.0)
    inst = InstanceSet(features=ad.constant(feats), boxes=boxes,
                       scores=np.ones(3), class_ids=np.array([GLOBAL_CLASS, 0, 1]))
    _, params = make_params(seed=79)
    ig = build_instance_graph(inst, 2)
    base = forward(build_assignment_graph(ig, build_label_graph(emb)), params).value
    sigma = [2, 0, 4, 1, 3]
    permuted = forward(build_assignment_graph(ig, build_label_graph(emb[sigma])), params).value
    assert np.allclose(permuted, base[:, sigma], atol=1e-9)


def test_forward_deterministic():
    g = make_graph(3, 3, seed=83)
    _, params = make_params(seed=89)
    assert np.array_equal(forward(g, params).value, forward(g, params).value)


def test_forward_finite_diff():
    store = ParamStore()
    _, params = make_params(store=store, seed=97, feat_dim=2, embed_dim=2, widths=(3, 2))
    g = make_graph(2, 2, feat_dim=2, embed_dim=2, seed=101)
    target = SplitMix64(103).fill_uniform((2, 2), 0.2, 0.8)

    def loss_fn():
        d = ad.sub(forward(g, params), target)
        return ad.mean_all(ad.mul(d, d))

    assert finite_diff_check(store, loss_fn, step=1e-4) < 1e-4


def test_no_weight_sharing_across_blocks():
    store, params = make_params(widths=(4, 4))
    names = store.names()
    assert len(names) == len(set(names))
    b0 = {n for n in names if ".block0." in n}
    b1 = {n for n in names if ".block1." in n}
    assert len(b0) == len(b1) == 12 * 4  # 12 functions x 2 layers x (w, b)
