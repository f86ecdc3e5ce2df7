"""Neural building blocks for the prompt decoder.

Four blocks: multi-head self-attention over prompts, multi-head
cross-attention from prompts into flattened image features, the single-head
novel-to-base attention with one weight triple shared across all decoder
layers, and the three-layer projection MLP used by the segmentation heads.

Parameters are persistent trainable leaves (`autodiff.Tensor`); trainability
is toggled per phase via `set_trainable`, and each struct exposes a
name->tensor mapping for checkpoints and the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, parameter


class ConfigurationError(ValueError):
    """A structural configuration is inconsistent (dims, level counts, ...)."""


ACTIVATIONS = {
    "softplus": ad.softplus,  # smooth default; keeps finite-difference checks honest
    "relu": ad.relu,
}


def _init_weight(rng: np.random.Generator, rows: int, cols: int, scale: float) -> Tensor:
    return parameter(rng.normal(scale=scale, size=(rows, cols)))


@dataclass
class AttentionParams:
    """Projections for one multi-head attention block (all dense C x C)."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    head_count: int
    model_dim: int

    def __post_init__(self):
        if self.model_dim % self.head_count != 0:
            raise ConfigurationError(
                f"model_dim {self.model_dim} is not divisible by head_count {self.head_count}"
            )

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, head_count: int) -> "AttentionParams":
        if dim % head_count != 0:
            raise ConfigurationError(f"model_dim {dim} is not divisible by head_count {head_count}")
        scale = dim ** -0.5
        return cls(
            w_q=_init_weight(rng, dim, dim, scale),
            w_k=_init_weight(rng, dim, dim, scale),
            w_v=_init_weight(rng, dim, dim, scale),
            w_o=_init_weight(rng, dim, dim, scale),
            head_count=head_count,
            model_dim=dim,
        )

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_o": self.w_o,
        }


@dataclass
class CausalAttentionParams:
    """Single-head novel-to-base attention weights, shared across layers."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    # query/key projections start as one shared matrix, so the initial
    # attention pattern follows prompt similarity instead of an arbitrary
    # random bilinear form; the factor sharpens it enough to matter through
    # the unscaled softmax. Values start at the identity: attended content
    # is then a convex mix of the base prompts themselves.
    INIT_SHARPNESS = 3.0

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int) -> "CausalAttentionParams":
        w = rng.normal(scale=dim ** -0.5, size=(dim, dim)) * cls.INIT_SHARPNESS
        return cls(
            w_q=parameter(w.copy()),
            w_k=parameter(w.copy()),
            w_v=parameter(np.eye(dim)),
        )

    @property
    def param_count(self) -> int:
        return self.w_q.size + self.w_k.size + self.w_v.size

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v}


@dataclass
class MlpParams:
    """Three affine C->C layers with a rectifier between 1-2 and 2-3."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, activation: str = "softplus") -> "MlpParams":
        scale = dim ** -0.5
        return cls(
            w1=_init_weight(rng, dim, dim, scale),
            b1=parameter(np.zeros((1, dim))),
            w2=_init_weight(rng, dim, dim, scale),
            b2=parameter(np.zeros((1, dim))),
            w3=_init_weight(rng, dim, dim, scale),
            b3=parameter(np.zeros((1, dim))),
            activation=activation,
        )

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1,
            f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2,
            f"{prefix}.b2": self.b2,
            f"{prefix}.w3": self.w3,
            f"{prefix}.b3": self.b3,
        }


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNormParams":
        return cls(gamma=parameter(np.ones((1, dim))), beta=parameter(np.zeros((1, dim))))

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


def set_trainable(tensors: dict[str, Tensor], flag: bool) -> None:
    for t in tensors.values():
        t.requires_grad = flag


# -- forward functions ---------------------------------------------------------


def _multi_head(queries_in: Tensor, keys_in: Tensor, params: AttentionParams) -> Tensor:
    dim, heads = params.model_dim, params.head_count
    if queries_in.shape[1] != dim or keys_in.shape[1] != dim:
        raise ShapeError(
            f"attention operands must have width {dim}, got {queries_in.shape} and {keys_in.shape}"
        )
    d_head = dim // heads
    scale = d_head ** -0.5
    q = ad.matmul(queries_in, params.w_q)
    k = ad.matmul(keys_in, params.w_k)
    v = ad.matmul(keys_in, params.w_v)
    outs = []
    for h in range(heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh, kh, vh = ad.cols(q, lo, hi), ad.cols(k, lo, hi), ad.cols(v, lo, hi)
        att = ad.softmax_rows(ad.matmul(qh, kh.T) * scale)
        outs.append(ad.matmul(att, vh))
    merged = outs[0] if heads == 1 else ad.concat_cols(outs)
    return ad.matmul(merged, params.w_o)


def self_attend(prompts: Tensor, params: AttentionParams) -> Tensor:
    """Scaled dot-product multi-head self-attention over the prompt rows."""
    return _multi_head(prompts, prompts, params)


def cross_attend(prompts: Tensor, features: Tensor, params: AttentionParams) -> Tensor:
    """Prompts query the flattened image features of one pyramid level."""
    if features.shape[0] == 0:
        raise ShapeError("cross_attend requires a nonempty feature map")
    return _multi_head(prompts, features, params)


def causal_attend(
    v_base: Tensor,
    v_novel: Tensor,
    params: CausalAttentionParams,
    residual: bool = False,
) -> Tensor:
    """Uni-directional refinement of novel prompts by reading base prompts.

    Queries come from the novel prompts, keys and values from the base
    prompts; attention logits are unscaled and there is no output projection.
    Base prompts are read, never written. With ``residual`` the attended
    update is added onto the incoming novel prompts instead of replacing
    them (off by default).
    """
    n = v_novel.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, v_base.shape[1])))
    q = ad.matmul(v_novel, params.w_q)
    k = ad.matmul(v_base, params.w_k)
    v = ad.matmul(v_base, params.w_v)
    attended = ad.matmul(ad.softmax_rows(ad.matmul(q, k.T)), v)
    return v_novel + attended if residual else attended


def mlp_forward(x: Tensor, params: MlpParams) -> Tensor:
    act = ACTIVATIONS[params.activation]
    h = act(ad.matmul(x, params.w1) + params.b1)
    h = act(ad.matmul(h, params.w2) + params.b2)
    return ad.matmul(h, params.w3) + params.b3


def layer_norm(x: Tensor, params: LayerNormParams, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / ad.sqrt(var + eps) * params.gamma + params.beta
