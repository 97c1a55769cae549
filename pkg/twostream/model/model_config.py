#!/usr/bin/env python3

"""
Architecture hyperparameters for the two-stream model and the single-stream baseline.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from twostream.errors import ContractError


class AttentionConfig(BaseModel):
    """
    Widths of one attention block. `cross_dim` is the width of the stream keys and values come from; it equals
    `model_dim` for self-attention and the opposite stream's width for co-attention.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    model_dim: int = Field(gt=0)
    num_heads: int = Field(gt=0)
    head_dim: int = Field(gt=0)
    ffn_dim: int = Field(gt=0)
    cross_dim: int = Field(gt=0)

    @property
    def attention_width(self) -> int:
        return self.num_heads * self.head_dim


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    architecture: Literal["two_stream", "single_stream"] = "two_stream"
    text_vocab_size: int = Field(default=64, gt=4)
    max_text_len: int = Field(default=24, ge=3)
    segment_count: int = Field(default=2, gt=0)
    text_dim: int = Field(default=64, gt=0)
    text_heads: int = Field(default=4, gt=0)
    text_pre_fusion_layers: int = Field(default=2, ge=0)
    text_post_fusion_layers: int = Field(default=0, ge=0)
    num_co_blocks: int = Field(default=2, ge=0)
    visual_dim: int = Field(default=96, gt=0)
    visual_heads: int = Field(default=4, gt=0)
    visual_feature_dim: int = Field(default=32, gt=0)
    num_region_classes: int = Field(default=8, gt=1)
    pooled_dim: int = Field(default=64, gt=0)
    ffn_multiplier: int = Field(default=4, gt=0)
    co_attention_ffn: bool = True
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    layer_norm_eps: float = Field(default=1e-12, gt=0.0)
    init_std: float = Field(default=0.02, gt=0.0)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_widths(self) -> "ModelConfig":
        if self.text_dim % self.text_heads:
            raise ValueError(f"text_dim {self.text_dim} is not divisible by text_heads {self.text_heads}")
        if self.visual_dim % self.visual_heads:
            raise ValueError(f"visual_dim {self.visual_dim} is not divisible by visual_heads {self.visual_heads}")
        if self.architecture == "two_stream" and self.num_co_blocks < 1:
            raise ValueError("a two_stream model needs at least one co-attention block")
        return self

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """
        The CPU-sized default; keeps the text/visual width mismatch of the full-size model.
        """
        return cls(**overrides)

    @classmethod
    def paper(cls, num_co_blocks: int = 6, **overrides) -> "ModelConfig":
        """
        Full-size preset: 12 text layers at 768 wide with 12 heads, a 1024-wide visual stream with 8 heads.
        The last `num_co_blocks` text layers interleave with co-attention.
        """
        if num_co_blocks not in (2, 4, 6, 8):
            raise ContractError(f"paper preset depth must be one of 2, 4, 6, 8 co-blocks, got {num_co_blocks}")
        settings = dict(
            text_vocab_size=30522,
            max_text_len=36,
            text_dim=768,
            text_heads=12,
            text_pre_fusion_layers=12 - num_co_blocks,
            num_co_blocks=num_co_blocks,
            visual_dim=1024,
            visual_heads=8,
            visual_feature_dim=2048,
            num_region_classes=1601,
            pooled_dim=1024,
        )
        settings.update(overrides)
        return cls(**settings)

    @property
    def stream_visual_dim(self) -> int:
        """Width of the visual states the heads see; the single-stream model embeds regions at text width."""
        return self.visual_dim if self.architecture == "two_stream" else self.text_dim

    @property
    def single_stream_layers(self) -> int:
        return self.text_pre_fusion_layers + self.num_co_blocks + self.text_post_fusion_layers

    def text_attention(self) -> AttentionConfig:
        return AttentionConfig(
            model_dim=self.text_dim,
            num_heads=self.text_heads,
            head_dim=self.text_dim // self.text_heads,
            ffn_dim=self.ffn_multiplier * self.text_dim,
            cross_dim=self.text_dim,
        )

    def visual_attention(self) -> AttentionConfig:
        return AttentionConfig(
            model_dim=self.visual_dim,
            num_heads=self.visual_heads,
            head_dim=self.visual_dim // self.visual_heads,
            ffn_dim=self.ffn_multiplier * self.visual_dim,
            cross_dim=self.visual_dim,
        )

    def co_attention(self, stream: Literal["visual", "text"]) -> AttentionConfig:
        """
        Co-attention block widths for one stream: queries from `stream`, keys/values from the other one.
        """
        own = self.visual_attention() if stream == "visual" else self.text_attention()
        other_dim = self.text_dim if stream == "visual" else self.visual_dim
        return own.model_copy(update={"cross_dim": other_dim})
