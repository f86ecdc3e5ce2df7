"""Multi-scale visual prompting decoder and segmentation heads.

The base pipeline refines base prompts layer by layer: self-attention plus
cross-attention into one pyramid level, combined residually and normalized.
The joint pipeline additionally refines novel prompts from base prompts via
the shared causal attention before each layer, concatenates both groups, and
runs the same refinement on the concatenated set. Per-pixel class scores are
dot products between MLP-projected prompts and the finest feature level; the
novel head only adds a learned residual on top of the frozen base MLP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .blocks import (
    AttentionParams,
    CausalAttentionParams,
    ConfigurationError,
    LayerNormParams,
    MlpParams,
    causal_attend,
    cross_attend,
    layer_norm,
    mlp_forward,
    self_attend,
)

CAUSAL_MODES = ("none", "first-layer", "separate", "shared")


@dataclass
class FeaturePyramid:
    """Flattened per-scale image features, coarse to fine.

    Level l is an (H_l * W_l, C) array; token counts strictly increase toward
    the finest level, which doubles as the head level consumed by the
    segmentation heads. Decoder layer l cross-attends to level (l-1) % count.
    """

    levels: list[np.ndarray]
    dims: list[tuple[int, int]]

    def __post_init__(self):
        if not self.levels:
            raise ConfigurationError("feature pyramid needs at least one level")
        if len(self.levels) != len(self.dims):
            raise ConfigurationError("levels and dims out of sync")
        widths = {lv.shape[1] for lv in self.levels}
        if len(widths) != 1:
            raise ConfigurationError(f"pyramid levels disagree on embedding dim: {sorted(widths)}")
        sizes = [lv.shape[0] for lv in self.levels]
        for (h, w), n in zip(self.dims, sizes):
            if h * w != n:
                raise ConfigurationError(f"level dims {h}x{w} do not match {n} tokens")
        if any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise ConfigurationError(f"pyramid token counts must strictly increase, got {sizes}")

    @property
    def embed_dim(self) -> int:
        return self.levels[0].shape[1]

    @property
    def head_features(self) -> np.ndarray:
        return self.levels[-1]

    @property
    def head_dims(self) -> tuple[int, int]:
        return self.dims[-1]

    def level_for_layer(self, layer_index: int) -> np.ndarray:
        return self.levels[layer_index % len(self.levels)]


@dataclass
class PromptSet:
    """Base and novel visual prompts with per-group trainability."""

    v_base: Tensor
    v_novel: Tensor
    base_class_ids: list[int]
    novel_class_ids: list[int]

    def __post_init__(self):
        if self.v_base.shape[0] < 1:
            raise ConfigurationError("need at least the background prompt")
        if self.v_base.shape[0] != len(self.base_class_ids):
            raise ConfigurationError("base prompt count != base id count")
        if self.v_novel.shape[0] != len(self.novel_class_ids):
            raise ConfigurationError("novel prompt count != novel id count")
        if set(self.base_class_ids) & set(self.novel_class_ids):
            raise ConfigurationError("base and novel class ids overlap")

    @property
    def num_base(self) -> int:
        return self.v_base.shape[0]

    @property
    def num_novel(self) -> int:
        return self.v_novel.shape[0]

    @property
    def class_ids(self) -> list[int]:
        return list(self.base_class_ids) + list(self.novel_class_ids)

    @property
    def base_trainable(self) -> bool:
        return self.v_base.requires_grad

    @base_trainable.setter
    def base_trainable(self, flag: bool) -> None:
        self.v_base.requires_grad = flag

    @property
    def novel_trainable(self) -> bool:
        return self.v_novel.requires_grad

    @novel_trainable.setter
    def novel_trainable(self, flag: bool) -> None:
        self.v_novel.requires_grad = flag

    def tensors(self) -> dict[str, Tensor]:
        return {"prompts.base": self.v_base, "prompts.novel": self.v_novel}


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    norm: LayerNormParams

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.self_attn.tensors(f"{prefix}.self"))
        out.update(self.cross_attn.tensors(f"{prefix}.cross"))
        out.update(self.norm.tensors(f"{prefix}.norm"))
        return out


@dataclass
class DecoderParams:
    """All decoder weights. One shared causal triple regardless of depth;
    the per-layer list exists only for the separate-weights ablation."""

    layers: list[DecoderLayerParams]
    causal: CausalAttentionParams
    head_mlp: MlpParams
    w_novel: Tensor | None = None
    causal_separate: list[CausalAttentionParams] | None = None

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        dim: int,
        num_layers: int,
        head_count: int = 4,
        activation: str = "softplus",
        separate_causal: bool = False,
    ) -> "DecoderParams":
        layers = [
            DecoderLayerParams(
                self_attn=AttentionParams.init(rng, dim, head_count),
                cross_attn=AttentionParams.init(rng, dim, head_count),
                norm=LayerNormParams.init(dim),
            )
            for _ in range(num_layers)
        ]
        causal = CausalAttentionParams.init(rng, dim)
        separate = (
            [CausalAttentionParams.init(rng, dim) for _ in range(num_layers)]
            if separate_causal
            else None
        )
        return cls(
            layers=layers,
            causal=causal,
            head_mlp=MlpParams.init(rng, dim, activation),
            causal_separate=separate,
        )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def causal_param_count(self, mode: str = "shared") -> int:
        if mode == "separate":
            return sum(c.param_count for c in (self.causal_separate or []))
        return self.causal.param_count

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"decoder.layer{i}"))
        out.update(self.causal.tensors("decoder.causal"))
        if self.causal_separate is not None:
            for i, c in enumerate(self.causal_separate):
                out.update(c.tensors(f"decoder.causal{i}"))
        out.update(self.head_mlp.tensors("head.mlp"))
        if self.w_novel is not None:
            out["head.w_novel"] = self.w_novel
        return out


@dataclass
class SegOutput:
    """Per-pixel class scores; pixels are stored row-major along rows."""

    logits: Tensor  # (num_pixels, num_classes)
    probs: Tensor
    height: int
    width: int

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def argmax_map(self) -> np.ndarray:
        # np.argmax keeps the lowest class index on ties
        return self.probs.data.argmax(axis=1).reshape(self.height, self.width)


def _refine_layer(v: Tensor, features: np.ndarray, layer: DecoderLayerParams) -> Tensor:
    # residual around both attention blocks, then the layer's normalization;
    # without the identity path the prompt rows collapse into one another
    combined = v + self_attend(v, layer.self_attn) + cross_attend(v, Tensor(features), layer.cross_attn)
    return layer_norm(combined, layer.norm)


def _check_pyramid(pyramid: FeaturePyramid, params: DecoderParams) -> None:
    if pyramid.embed_dim != params.head_mlp.w1.shape[0]:
        raise ConfigurationError(
            f"pyramid embedding dim {pyramid.embed_dim} does not match decoder dim "
            f"{params.head_mlp.w1.shape[0]}"
        )


def decode_base(prompts: PromptSet, pyramid: FeaturePyramid, params: DecoderParams) -> Tensor:
    """Refine base prompts through all decoder layers (novel prompts absent)."""
    _check_pyramid(pyramid, params)
    v = prompts.v_base
    for i, layer in enumerate(params.layers):
        v = _refine_layer(v, pyramid.level_for_layer(i), layer)
    return v


def _causal_params_for_layer(params: DecoderParams, mode: str, layer_index: int):
    """The causal triple to apply at this layer, or None for identity."""
    if mode == "none":
        return None
    if mode == "first-layer":
        return params.causal if layer_index == 0 else None
    if mode == "separate":
        if params.causal_separate is None:
            raise ConfigurationError("separate causal mode requires per-layer causal params")
        return params.causal_separate[layer_index]
    if mode == "shared":
        return params.causal
    raise ConfigurationError(f"unknown causal mode {mode!r}; expected one of {CAUSAL_MODES}")


def decode_joint(
    prompts: PromptSet,
    pyramid: FeaturePyramid,
    params: DecoderParams,
    causal_mode: str = "shared",
    causal_residual: bool = False,
) -> tuple[Tensor, Tensor]:
    """Refine base and novel prompts jointly.

    Per layer: the causal module rewrites the novel prompts from the current
    base prompts, the groups are concatenated, refined together against the
    layer's pyramid level, and split back preserving order.
    """
    if prompts.num_novel == 0:
        raise ValueError("decode_joint requires novel prompts; use decode_base when N == 0")
    _check_pyramid(pyramid, params)
    b = prompts.num_base
    vb, vn = prompts.v_base, prompts.v_novel
    for i, layer in enumerate(params.layers):
        ca = _causal_params_for_layer(params, causal_mode, i)
        if ca is not None:
            vn = causal_attend(vb, vn, ca, residual=causal_residual)
        va = ad.concat_rows(vb, vn)
        va = _refine_layer(va, pyramid.level_for_layer(i), layer)
        vb, vn = ad.rows(va, 0, b), ad.rows(va, b, va.shape[0])
    return vb, vn


def _head_output(logits_classes_by_pixel: Tensor, height: int, width: int) -> SegOutput:
    logits = logits_classes_by_pixel.T  # (pixels, classes)
    return SegOutput(logits=logits, probs=ad.softmax_rows(logits), height=height, width=width)


def base_head(v_b: Tensor, f_top: Tensor, mlp: MlpParams, height: int, width: int) -> SegOutput:
    """Project refined base prompts to prototypes and score every pixel."""
    protos = mlp_forward(v_b, mlp)
    return _head_output(ad.matmul(protos, f_top.T), height, width)


def novel_head(v_n: Tensor, f_top: Tensor, frozen_mlp: MlpParams, w_n: Tensor) -> Tensor:
    """Novel class scores: (frozen MLP of novel prompts + learned residual) . features.

    Returns raw logits shaped (num_novel, num_pixels); the caller joins them
    with base logits before the shared softmax.
    """
    protos = mlp_forward(v_n, frozen_mlp) + w_n
    return ad.matmul(protos, f_top.T)


def full_forward(
    prompts: PromptSet,
    pyramid: FeaturePyramid,
    params: DecoderParams,
    causal_mode: str = "shared",
    causal_residual: bool = False,
) -> SegOutput:
    """Joint per-pixel prediction over base + novel classes."""
    h, w = pyramid.head_dims
    f_top = Tensor(pyramid.head_features)
    if prompts.num_novel == 0:
        vb = decode_base(prompts, pyramid, params)
        return base_head(vb, f_top, params.head_mlp, h, w)
    if params.w_novel is None:
        raise ConfigurationError("novel head weights are not initialized")
    vb, vn = decode_joint(prompts, pyramid, params, causal_mode, causal_residual)
    base_logits = ad.matmul(mlp_forward(vb, params.head_mlp), f_top.T)
    novel_logits = novel_head(vn, f_top, params.head_mlp, params.w_novel)
    joint = ad.concat_rows(base_logits, novel_logits)
    return _head_output(joint, h, w)
