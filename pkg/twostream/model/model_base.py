#!/usr/bin/env python3

"""
The two-stream model and the single-stream baseline.

All learnable tensors live in one ordered name → Tensor mapping (`TwoStreamModel.params`), which is what the
optimizer updates and checkpoints store. Blocks are views into that mapping.
"""

from collections import OrderedDict
from logging import getLogger
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from twostream.errors import ContractError
from twostream.model.model_config import ModelConfig
from twostream.model.model_inputs import FULL_IMAGE_BOX, ImageInput, StreamOutputs, TextInput, compute_spatial5
from twostream.model.model_layers import (
    BlockParams,
    ForwardContext,
    Layout,
    block_layout,
    co_attention_block,
    initial_tensor,
    transformer_block,
)
from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor


logger = getLogger("twostream")

MODES = ("train", "eval")
TEXT_TYPE, VISUAL_TYPE = 0, 1


def _prefixed(prefix: str, layout: Layout) -> Layout:
    return [(f"{prefix}.{name}", shape, kind) for name, shape, kind in layout]


def _linear(prefix: str, rows: int, cols: int) -> Layout:
    return [(f"{prefix}.weight", (rows, cols), "normal"), (f"{prefix}.bias", (cols,), "zeros")]


def _norm(prefix: str, width: int) -> Layout:
    return [(f"{prefix}.gamma", (width,), "ones"), (f"{prefix}.beta", (width,), "zeros")]


def model_layout(config: ModelConfig) -> Layout:
    """
    (name, shape, init kind) of every base-model tensor, pretraining heads included, in creation order.
    """
    c = config
    layout: Layout = [
        ("text.word_embeddings", (c.text_vocab_size, c.text_dim), "normal"),
        ("text.position_embeddings", (c.max_text_len, c.text_dim), "normal"),
        ("text.segment_embeddings", (c.segment_count, c.text_dim), "normal"),
    ]
    layout += _norm("text.emb_ln", c.text_dim)
    visual_width = c.stream_visual_dim
    layout += _linear("visual.spatial_proj", 5, c.visual_feature_dim)
    layout += _linear("visual.feature_proj", c.visual_feature_dim, visual_width)
    layout += _norm("visual.emb_ln", visual_width)

    if c.architecture == "two_stream":
        for i in range(c.text_pre_fusion_layers):
            layout += _prefixed(f"text.pre.{i}", block_layout(c.text_attention()))
        for k in range(c.num_co_blocks):
            layout += _prefixed(f"co.{k}.visual", block_layout(c.co_attention("visual"), c.co_attention_ffn))
            layout += _prefixed(f"co.{k}.text", block_layout(c.co_attention("text"), c.co_attention_ffn))
            layout += _prefixed(f"trm.{k}.visual", block_layout(c.visual_attention()))
            layout += _prefixed(f"trm.{k}.text", block_layout(c.text_attention()))
        for i in range(c.text_post_fusion_layers):
            layout += _prefixed(f"text.post.{i}", block_layout(c.text_attention()))
    else:
        layout.append(("single.type_embeddings", (2, c.text_dim), "normal"))
        for i in range(c.single_stream_layers):
            layout += _prefixed(f"single.{i}", block_layout(c.text_attention()))

    layout += _linear("pretrain.mlm", c.text_dim, c.text_vocab_size)
    layout += _linear("pretrain.region", visual_width, c.num_region_classes)
    layout += _linear("pool.image", visual_width, c.pooled_dim)
    layout += _linear("pool.text", c.text_dim, c.pooled_dim)
    layout += _linear("pretrain.align", c.pooled_dim, 1)
    return layout


def count_parameters(config: ModelConfig) -> int:
    """
    Number of learnable scalars in the base model, computed from the layout without allocating it.
    """
    return int(sum(int(np.prod(shape)) for _, shape, _ in model_layout(config)))


class TwoStreamModel:
    """
    Visual and linguistic transformer streams that exchange information through co-attention blocks.
    """

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]") -> None:
        self.config = config
        self.params = params
        for name, tensor in params.items():
            tensor.name = name
            tensor.requires_grad = True

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "TwoStreamModel":
        rng = np.random.Generator(np.random.PCG64(seed))
        params = OrderedDict(
            (name, initial_tensor(shape, kind, rng, config.init_std, config.dtype))
            for name, shape, kind in model_layout(config)
        )
        model = cls(config, params)
        logger.debug("Initialized %s model with %s parameters", config.architecture, model.parameter_count())
        return model

    # Parameter bookkeeping

    def add_parameters(self, layout: Layout, seed: int) -> None:
        """
        Create additional tensors (task heads) alongside the base model; existing names are left untouched.
        """
        rng = np.random.Generator(np.random.PCG64(seed))
        for name, shape, kind in layout:
            tensor = initial_tensor(shape, kind, rng, self.config.init_std, self.config.dtype)
            if name not in self.params:
                tensor.name = name
                self.params[name] = tensor

    def parameter_count(self, prefix: Optional[str] = None) -> int:
        return int(sum(t.size for n, t in self.params.items() if prefix is None or n.startswith(prefix)))

    def named_parameters(self) -> Iterable[Tuple[str, Tensor]]:
        return self.params.items()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"model has no parameter '{name}'")

    def _block(self, prefix: str, num_heads: int) -> BlockParams:
        return BlockParams.from_named(self.params, prefix, num_heads)

    def _context(self, mode: str, rng: Optional[np.random.Generator]) -> ForwardContext:
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got '{mode}'")
        return ForwardContext(
            training=mode == "train", dropout=self.config.dropout, rng=rng, eps=self.config.layer_norm_eps
        )

    # Embeddings

    def embed_text(self, text: TextInput) -> Tensor:
        """
        Token + position + segment embeddings, summed and layer-normalized.
        """
        text.validate(max_len=self.config.max_text_len)
        if np.any(text.segment_ids < 0) or np.any(text.segment_ids >= self.config.segment_count):
            raise ContractError(
                f"segment ids {text.segment_ids.tolist()} exceed segment_count {self.config.segment_count}"
            )
        summed = ops.add(
            ops.add(
                ops.embedding_lookup(self["text.word_embeddings"], text.token_ids),
                ops.embedding_lookup(self["text.position_embeddings"], text.positions),
            ),
            ops.embedding_lookup(self["text.segment_embeddings"], text.segment_ids),
        )
        return ops.layer_norm(summed, self["text.emb_ln.gamma"], self["text.emb_ln.beta"], self.config.layer_norm_eps)

    def embed_regions(self, image: ImageInput) -> Tensor:
        """
        Row 0 is the IMG token: the mean region feature with the whole-image location. Rows 1..𝒯 are the regions.
        Each row is projected as feature + spatial_proj(spatial5), then mapped to the visual width.
        """
        if image.num_regions == 0:
            raise ContractError("an image needs at least one region")
        if image.region_features.shape[1] != self.config.visual_feature_dim:
            raise ContractError(
                f"region features are {image.region_features.shape[1]} wide, model expects "
                f"{self.config.visual_feature_dim}"
            )
        like = self["visual.feature_proj.weight"]
        features = ops.constant(np.vstack([image.mean_feature()[None, :], image.region_features]), like=like)
        spatial = ops.constant(np.vstack([compute_spatial5(FULL_IMAGE_BOX)[None, :], image.spatial5]), like=like)
        located = ops.add(
            features, ops.add(ops.matmul(spatial, self["visual.spatial_proj.weight"]), self["visual.spatial_proj.bias"])
        )
        projected = ops.add(ops.matmul(located, like), self["visual.feature_proj.bias"])
        return ops.layer_norm(
            projected, self["visual.emb_ln.gamma"], self["visual.emb_ln.beta"], self.config.layer_norm_eps
        )

    # Streams

    def encode_text_prefix(
        self, text: TextInput, mode: str = "eval", rng: Optional[np.random.Generator] = None
    ) -> Tensor:
        """
        Linguistic states after the text-only layers that precede the first co-attention block.
        Nothing visual enters these layers, so the result can be cached per caption.
        """
        if self.config.architecture != "two_stream":
            raise ContractError("only the two-stream model has a text-only prefix")
        ctx = self._context(mode, rng)
        h_w = self.embed_text(text)
        for i in range(self.config.text_pre_fusion_layers):
            h_w = transformer_block(h_w, self._block(f"text.pre.{i}", self.config.text_heads), ctx=ctx)
        return h_w

    def forward(
        self,
        text: TextInput,
        image: ImageInput,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
        text_prefix: Optional[Tensor] = None,
    ) -> StreamOutputs:
        """
        Run both streams.
        :param text: Caption tokens
        :param image: Detected regions
        :param mode: 'train' enables dropout (drawn from rng), 'eval' is deterministic
        :param rng: Dropout source
        :param text_prefix: Cached output of encode_text_prefix for this text
        :return:
        """
        if self.config.architecture == "single_stream":
            return self.forward_single_stream(text, image, mode, rng)
        c = self.config
        ctx = self._context(mode, rng)
        h_w = text_prefix if text_prefix is not None else self.encode_text_prefix(text, mode, rng)
        h_v = self.embed_regions(image)
        for k in range(c.num_co_blocks):
            h_v, h_w = co_attention_block(
                h_v,
                h_w,
                self._block(f"co.{k}.visual", c.visual_heads),
                self._block(f"co.{k}.text", c.text_heads),
                ctx=ctx,
            )
            h_v = transformer_block(h_v, self._block(f"trm.{k}.visual", c.visual_heads), ctx=ctx)
            h_w = transformer_block(h_w, self._block(f"trm.{k}.text", c.text_heads), ctx=ctx)
        for i in range(c.text_post_fusion_layers):
            h_w = transformer_block(h_w, self._block(f"text.post.{i}", c.text_heads), ctx=ctx)
        return StreamOutputs(
            h_v=h_v, h_w=h_w, h_img=ops.slice_axis(h_v, 0, 1, axis=0), h_cls=ops.slice_axis(h_w, 0, 1, axis=0)
        )

    def forward_single_stream(
        self, text: TextInput, image: ImageInput, mode: str = "eval", rng: Optional[np.random.Generator] = None
    ) -> StreamOutputs:
        """
        Baseline: {IMG, v_1..v_𝒯, CLS, w_1..w_T, SEP} through one shared stack, then split back per modality.
        """
        if self.config.architecture != "single_stream":
            raise ContractError("forward_single_stream needs a single_stream model configuration")
        ctx = self._context(mode, rng)
        visual = self.embed_regions(image)
        words = self.embed_text(text)
        types = self["single.type_embeddings"]
        visual = ops.add(visual, ops.embedding_lookup(types, [VISUAL_TYPE] * visual.shape[0]))
        words = ops.add(words, ops.embedding_lookup(types, [TEXT_TYPE] * words.shape[0]))
        hidden = ops.concat([visual, words], axis=0)
        for i in range(self.config.single_stream_layers):
            hidden = transformer_block(hidden, self._block(f"single.{i}", self.config.text_heads), ctx=ctx)
        split = visual.shape[0]
        h_v = ops.slice_axis(hidden, 0, split, axis=0)
        h_w = ops.slice_axis(hidden, split, hidden.shape[0], axis=0)
        return StreamOutputs(
            h_v=h_v, h_w=h_w, h_img=ops.slice_axis(h_v, 0, 1, axis=0), h_cls=ops.slice_axis(h_w, 0, 1, axis=0)
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.params.items()}

    def head_names(self) -> List[str]:
        return sorted({name.split(".")[1] for name in self.params if name.startswith("head.")})
