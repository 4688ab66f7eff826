"""Instance-label matching: encode the assignment graph, run stacked
graph-network blocks, decode matching-edge scores.

Every aggregation (rho) and update (phi) function is its own two-layer MLP
(hidden width = output width, rectifier between) with no weight sharing
across functions or blocks. Within a block the node convolution reads the
pre-call attributes of all nodes (synchronous update) and the edge
convolution then reads the freshly updated node attributes. Mean
aggregation over an empty neighbour set yields the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, ParamStore, Var, build_mlp, mlp_forward
from .graphs import AssignmentGraph
from .rng import SplitMix64


@dataclass
class BlockParams:
    rho_hat_n_o: Mlp    # instance node <- instance edges
    rho_tilde_n_o: Mlp  # instance node <- matching edges
    phi_n_o: Mlp
    rho_hat_n_l: Mlp    # label node <- label edges
    rho_tilde_n_l: Mlp  # label node <- matching edges
    phi_n_l: Mlp
    rho_e_o: Mlp
    phi_e_o: Mlp
    rho_e_l: Mlp
    phi_e_l: Mlp
    rho_e_m: Mlp
    phi_e_m: Mlp


@dataclass
class IlmsParams:
    enc_node_inst: Mlp
    enc_node_label: Mlp
    enc_edge_inst: Mlp
    enc_edge_label: Mlp
    enc_edge_match: Mlp
    blocks: list[BlockParams]
    dec_match: Mlp
    widths: tuple[int, ...]


@dataclass
class GraphState:
    graph: AssignmentGraph
    inst_node: Var
    label_node: Var
    inst_edge: Var
    label_edge: Var
    match_edge: Var


def init_ilms_params(store: ParamStore, rng: SplitMix64, feat_dim: int,
                     embed_dim: int, widths=(512, 256)) -> IlmsParams:
    """Register every encoder/block/decoder MLP under "ilms." names.

    `widths` are the per-block output widths; the encoder latent width
    equals the first block width. Registration order fixes the seeded
    initialization draws.
    """
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise ValueError("need at least one block width")
    d0 = widths[0]

    def mlp(name, din, dout, sigmoid_out=False):
        return build_mlp(store, f"ilms.{name}", [din, dout, dout], rng, sigmoid_out=sigmoid_out)

    enc_node_inst = mlp("enc.node_inst", feat_dim, d0)
    enc_node_label = mlp("enc.node_label", embed_dim, d0)
    enc_edge_inst = mlp("enc.edge_inst", 8, d0)
    enc_edge_label = mlp("enc.edge_label", 2 * embed_dim, d0)
    enc_edge_match = mlp("enc.edge_match", feat_dim + embed_dim, d0)

    blocks = []
    w_in = d0
    for bi, w_out in enumerate(widths):
        p = f"block{bi}"
        blocks.append(BlockParams(
            rho_hat_n_o=mlp(f"{p}.rho_hat_n_o", 2 * w_in, w_out),
            rho_tilde_n_o=mlp(f"{p}.rho_tilde_n_o", 2 * w_in, w_out),
            phi_n_o=mlp(f"{p}.phi_n_o", w_in + 2 * w_out, w_out),
            rho_hat_n_l=mlp(f"{p}.rho_hat_n_l", 2 * w_in, w_out),
            rho_tilde_n_l=mlp(f"{p}.rho_tilde_n_l", 2 * w_in, w_out),
            phi_n_l=mlp(f"{p}.phi_n_l", w_in + 2 * w_out, w_out),
            rho_e_o=mlp(f"{p}.rho_e_o", 2 * w_out, w_out),
            phi_e_o=mlp(f"{p}.phi_e_o", w_in + w_out, w_out),
            rho_e_l=mlp(f"{p}.rho_e_l", 2 * w_out, w_out),
            phi_e_l=mlp(f"{p}.phi_e_l", w_in + w_out, w_out),
            rho_e_m=mlp(f"{p}.rho_e_m", 2 * w_out, w_out),
            phi_e_m=mlp(f"{p}.phi_e_m", w_in + w_out, w_out),
        ))
        w_in = w_out

    # scalar head; hidden width matches its input so the bottleneck is the
    # final unit only, then a logistic maps scores into (0, 1)
    dec_match = build_mlp(store, "ilms.dec.edge_match",
                          [widths[-1], widths[-1], 1], rng, sigmoid_out=True)
    return IlmsParams(enc_node_inst, enc_node_label, enc_edge_inst,
                      enc_edge_label, enc_edge_match, blocks, dec_match, widths)


def encode(graph: AssignmentGraph, params: IlmsParams) -> GraphState:
    """Per-type encoder heads lift every attribute into the latent width."""
    return GraphState(
        graph=graph,
        inst_node=mlp_forward(params.enc_node_inst, graph.inst.feats),
        label_node=mlp_forward(params.enc_node_label, graph.labels.feats),
        inst_edge=mlp_forward(params.enc_edge_inst, graph.inst.edge_attr),
        label_edge=mlp_forward(params.enc_edge_label, graph.labels.edge_attr),
        match_edge=mlp_forward(params.enc_edge_match, graph.match_attr),
    )


def node_convolution(state: GraphState, params: IlmsParams, block_index: int) -> GraphState:
    """Update every node from its incoming typed edges (synchronous)."""
    blk = params.blocks[block_index]
    g = state.graph

    inst_msg = mlp_forward(blk.rho_hat_n_o, ad.concat_cols([
        state.inst_edge, ad.gather_rows(state.inst_node, g.inst.edge_src)]))
    v_hat = ad.matmul(g.agg_inst_from_inst, inst_msg)
    match_msg_o = mlp_forward(blk.rho_tilde_n_o, ad.concat_cols([
        state.match_edge, ad.gather_rows(state.label_node, g.match_label)]))
    v_tilde = ad.matmul(g.agg_inst_from_match, match_msg_o)
    inst_new = mlp_forward(blk.phi_n_o, ad.concat_cols([state.inst_node, v_hat, v_tilde]))

    label_msg = mlp_forward(blk.rho_hat_n_l, ad.concat_cols([
        state.label_edge, ad.gather_rows(state.label_node, g.labels.edge_src)]))
    l_hat = ad.matmul(g.agg_label_from_label, label_msg)
    match_msg_l = mlp_forward(blk.rho_tilde_n_l, ad.concat_cols([
        state.match_edge, ad.gather_rows(state.inst_node, g.match_inst)]))
    l_tilde = ad.matmul(g.agg_label_from_match, match_msg_l)
    label_new = mlp_forward(blk.phi_n_l, ad.concat_cols([state.label_node, l_hat, l_tilde]))

    return replace(state, inst_node=inst_new, label_node=label_new)


def edge_convolution(state: GraphState, params: IlmsParams, block_index: int) -> GraphState:
    """Update every edge from its (already updated) endpoint nodes."""
    blk = params.blocks[block_index]
    g = state.graph

    pair_o = ad.concat_cols([ad.gather_rows(state.inst_node, g.inst.edge_src),
                             ad.gather_rows(state.inst_node, g.inst.edge_dst)])
    inst_edge = mlp_forward(blk.phi_e_o, ad.concat_cols([
        state.inst_edge, mlp_forward(blk.rho_e_o, pair_o)]))

    pair_l = ad.concat_cols([ad.gather_rows(state.label_node, g.labels.edge_src),
                             ad.gather_rows(state.label_node, g.labels.edge_dst)])
    label_edge = mlp_forward(blk.phi_e_l, ad.concat_cols([
        state.label_edge, mlp_forward(blk.rho_e_l, pair_l)]))

    pair_m = ad.concat_cols([ad.gather_rows(state.inst_node, g.match_inst),
                             ad.gather_rows(state.label_node, g.match_label)])
    match_edge = mlp_forward(blk.phi_e_m, ad.concat_cols([
        state.match_edge, mlp_forward(blk.rho_e_m, pair_m)]))

    return replace(state, inst_edge=inst_edge, label_edge=label_edge, match_edge=match_edge)


def decode(state: GraphState, params: IlmsParams) -> Var:
    """Scores S (n_instances, n_labels) in (0, 1), one per matching edge."""
    s = mlp_forward(params.dec_match, state.match_edge)
    return ad.reshape(s, (state.graph.n_instances, state.graph.n_labels))


def forward(graph: AssignmentGraph, params: IlmsParams) -> Var:
    """encode -> (node convolution; edge convolution) x k -> decode."""
    state = encode(graph, params)
    for bi in range(len(params.blocks)):
        state = node_convolution(state, params, bi)
        state = edge_convolution(state, params, bi)
    return decode(state, params)
