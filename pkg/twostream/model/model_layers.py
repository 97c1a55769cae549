#!/usr/bin/env python3

"""
The standard encoder transformer block and the co-attentional transformer block.

Both are pure functions of their inputs and a BlockParams bundle. A co-attention block is two standard blocks
whose keys and values come from the opposite stream, so the two share one implementation (`_attend_block`).
"""

from dataclasses import dataclass, field, fields
import math
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from twostream.errors import ContractError, DimensionError
from twostream.model.model_config import AttentionConfig
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor


@dataclass
class ForwardContext:
    """
    Per-pass settings threaded through every block: train/eval mode, dropout rate and its rng, layer-norm eps.
    """

    training: bool = False
    dropout: float = 0.0
    rng: Optional[np.random.Generator] = None
    eps: float = 1e-12

    def drop(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.dropout, self.rng, training=self.training)


EVAL = ForwardContext()


Layout = List[Tuple[str, Tuple[int, ...], str]]


def block_layout(cfg: AttentionConfig, with_ffn: bool = True) -> Layout:
    """
    (name, shape, init kind) of every tensor in one block, in creation order.
    """
    width = cfg.attention_width
    layout = [
        ("w_q", (cfg.model_dim, width), "normal"),
        ("b_q", (width,), "zeros"),
        ("w_k", (cfg.cross_dim, width), "normal"),
        ("b_k", (width,), "zeros"),
        ("w_v", (cfg.cross_dim, width), "normal"),
        ("b_v", (width,), "zeros"),
        ("w_o", (width, cfg.model_dim), "normal"),
        ("b_o", (cfg.model_dim,), "zeros"),
        ("ln1_gamma", (cfg.model_dim,), "ones"),
        ("ln1_beta", (cfg.model_dim,), "zeros"),
    ]
    if with_ffn:
        layout += [
            ("w_ff1", (cfg.model_dim, cfg.ffn_dim), "normal"),
            ("b_ff1", (cfg.ffn_dim,), "zeros"),
            ("w_ff2", (cfg.ffn_dim, cfg.model_dim), "normal"),
            ("b_ff2", (cfg.model_dim,), "zeros"),
            ("ln2_gamma", (cfg.model_dim,), "ones"),
            ("ln2_beta", (cfg.model_dim,), "zeros"),
        ]
    return layout


def initial_tensor(shape: Tuple[int, ...], kind: str, rng: np.random.Generator, std: float, dtype: str) -> Tensor:
    """
    Weights from N(0, std²); biases and betas at zero, gammas at one.
    """
    if kind == "normal":
        data = rng.normal(0.0, std, size=shape)
    elif kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    else:
        raise ContractError(f"unknown initializer '{kind}'")
    return Tensor(data, requires_grad=True, dtype=dtype)


@dataclass
class BlockParams:
    """
    Learnable tensors of one block. W_Q maps the query stream into num_heads×head_dim, W_K and W_V map the
    key/value stream into the same width, W_O maps back to the query stream. The FFN tensors are absent on
    co-attention blocks configured without their own feed-forward sub-layer.
    """

    num_heads: int = field(metadata={"tensor": False})
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w_ff1: Optional[Tensor] = None
    b_ff1: Optional[Tensor] = None
    w_ff2: Optional[Tensor] = None
    b_ff2: Optional[Tensor] = None
    ln2_gamma: Optional[Tensor] = None
    ln2_beta: Optional[Tensor] = None

    @classmethod
    def tensor_names(cls) -> List[str]:
        return [f.name for f in fields(cls) if f.metadata.get("tensor", True)]

    @classmethod
    def initialize(
        cls,
        cfg: AttentionConfig,
        rng: np.random.Generator,
        std: float = 0.02,
        dtype: str = "float32",
        with_ffn: bool = True,
    ) -> "BlockParams":
        """
        Draw a fresh block.
        :param cfg: Block widths
        :param rng: Source of the initial weights
        :param std: Standard deviation of the weight matrices
        :param dtype:
        :param with_ffn: Include the feed-forward sub-layer
        :return:
        """
        tensors = {
            name: initial_tensor(shape, kind, rng, std, dtype) for name, shape, kind in block_layout(cfg, with_ffn)
        }
        return cls(num_heads=cfg.num_heads, **tensors)

    @property
    def has_ffn(self) -> bool:
        return self.w_ff1 is not None

    @classmethod
    def from_named(cls, params: Mapping[str, Tensor], prefix: str, num_heads: int) -> "BlockParams":
        return cls(num_heads=num_heads, **{n: params.get(f"{prefix}.{n}") for n in cls.tensor_names()})


def _key_bias(mask: Optional[Sequence[bool]], rows: int, keys: int, like: Tensor) -> Optional[Tensor]:
    """
    Additive attention bias: 0 on visible keys, MASK_BIAS on masked ones. None when nothing is masked.
    """
    if mask is None:
        if keys == 0:
            raise ContractError("attention over an empty key set is undefined")
        return None
    visible = np.asarray(mask, dtype=bool)
    if visible.shape != (keys,):
        raise DimensionError(f"attention mask has shape {visible.shape}, expected ({keys},)")
    if not visible.any():
        raise ContractError("attention with every key position masked is undefined")
    if visible.all():
        return None
    row = np.where(visible, 0.0, ops.MASK_BIAS)
    return ops.constant(np.broadcast_to(row, (rows, keys)), like=like)


def multi_head_attention(
    h_q: Tensor, h_kv: Tensor, params: BlockParams, mask: Optional[Sequence[bool]] = None
) -> Tuple[Tensor, List[Tensor]]:
    """
    Scaled dot-product attention of the rows of h_q over the rows of h_kv, per head.
    :param h_q: T_q × d_q query-stream states
    :param h_kv: T_k × d_k key/value-stream states
    :param params: Block projections
    :param mask: Optional visibility flag per key position; masked keys get exactly zero weight
    :return: The concatenated head outputs (T_q × num_heads·head_dim) and the per-head attention weights
    """
    if h_q.ndim != 2 or h_q.shape[1] != params.w_q.shape[0]:
        raise DimensionError(f"attention queries of shape {h_q.shape} do not match W_Q {params.w_q.shape}")
    if h_kv.ndim != 2 or h_kv.shape[1] != params.w_k.shape[0]:
        raise DimensionError(f"attention keys/values of shape {h_kv.shape} do not match W_K {params.w_k.shape}")
    bias = _key_bias(mask, h_q.shape[0], h_kv.shape[0], h_q)

    q = ops.add(ops.matmul(h_q, params.w_q), params.b_q)
    k = ops.add(ops.matmul(h_kv, params.w_k), params.b_k)
    v = ops.add(ops.matmul(h_kv, params.w_v), params.b_v)
    head_dim = params.w_q.shape[1] // params.num_heads
    scaling = 1.0 / math.sqrt(head_dim)

    contexts, weights = [], []
    for head in range(params.num_heads):
        lo, hi = head * head_dim, (head + 1) * head_dim
        q_h = ops.slice_axis(q, lo, hi, axis=1)
        k_h = ops.slice_axis(k, lo, hi, axis=1)
        v_h = ops.slice_axis(v, lo, hi, axis=1)
        scores = ops.scale(ops.matmul(q_h, ops.transpose(k_h)), scaling)
        if bias is not None:
            scores = ops.add(scores, bias)
        attn = ops.softmax(scores, axis=-1)
        weights.append(attn)
        contexts.append(ops.matmul(attn, v_h))
    return ops.concat(contexts, axis=1), weights


def _attend_block(
    h_q: Tensor, h_kv: Tensor, params: BlockParams, mask: Optional[Sequence[bool]], ctx: ForwardContext
) -> Tensor:
    """
    Attention sub-layer then feed-forward sub-layer, each wrapped in a residual add and layer norm.
    """
    attended, _ = multi_head_attention(h_q, h_kv, params, mask)
    projected = ctx.drop(ops.add(ops.matmul(attended, params.w_o), params.b_o))
    hidden = ops.layer_norm(ops.add(h_q, projected), params.ln1_gamma, params.ln1_beta, ctx.eps)
    if not params.has_ffn:
        return hidden
    inner = ops.gelu(ops.add(ops.matmul(hidden, params.w_ff1), params.b_ff1))
    fed = ctx.drop(ops.add(ops.matmul(inner, params.w_ff2), params.b_ff2))
    return ops.layer_norm(ops.add(hidden, fed), params.ln2_gamma, params.ln2_beta, ctx.eps)


def transformer_block(
    h: Tensor, params: BlockParams, mask: Optional[Sequence[bool]] = None, ctx: ForwardContext = EVAL
) -> Tensor:
    """
    Standard encoder block: H' = LN(H + Attn(H)), out = LN(H' + FFN(H')).
    """
    return _attend_block(h, h, params, mask, ctx)


def co_attention_block(
    h_v: Tensor,
    h_w: Tensor,
    params_v: BlockParams,
    params_w: BlockParams,
    mask_v: Optional[Sequence[bool]] = None,
    mask_w: Optional[Sequence[bool]] = None,
    ctx: ForwardContext = EVAL,
) -> Tuple[Tensor, Tensor]:
    """
    Co-attentional block: each stream's queries attend over the other stream's keys and values.
    :param h_v: Visual states
    :param h_w: Linguistic states
    :param params_v: Visual-stream block (queries from h_v, keys/values from h_w)
    :param params_w: Linguistic-stream block (queries from h_w, keys/values from h_v)
    :param mask_v: Visibility of visual positions, applied when the text stream attends over them
    :param mask_w: Visibility of text positions, applied when the visual stream attends over them
    :param ctx:
    :return: The updated (visual, linguistic) states
    """
    return _attend_block(h_v, h_w, params_v, mask_w, ctx), _attend_block(h_w, h_v, params_w, mask_v, ctx)
