"""Training losses and the optimizer.

Supervised training uses per-pixel cross-entropy. Test-time tuning minimizes
a composite of three terms: a conditional-entropy term (support cross-entropy
plus predictive entropy on the unlabeled image), a marginal term matching the
mean predicted distribution to a region-proportion prior via KL, and a
knowledge-distillation KL that anchors base-class predictions to the frozen
post-base-training model. Logs are epsilon-floored (1e-8) everywhere so every
loss value is finite for valid probability inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-8


class UndefinedLossError(ValueError):
    """The loss has no valid pixels to average over."""


class NanGradientError(RuntimeError):
    """A parameter gradient contains NaN; named in the message."""


@dataclass
class TransductiveConfig:
    alpha: float = 100.0
    gamma: float = 25.0
    ce_only_iters: int = 40
    full_iters: int = 60
    prior_mode: str = "from-predictions"  # or "oracle" (testing only)

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be nonnegative")
        if self.ce_only_iters < 0 or self.full_iters < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.prior_mode not in ("from-predictions", "oracle"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")

    @property
    def total_iters(self) -> int:
        return self.ce_only_iters + self.full_iters


@dataclass
class RegionPrior:
    proportions: np.ndarray  # over all B+N classes, sums to 1

    def __post_init__(self):
        p = np.asarray(self.proportions, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be a probability vector")
        self.proportions = p


def _floored_log(t: Tensor) -> Tensor:
    return ad.log(ad.maximum_scalar(t, LOG_FLOOR))


def pixel_ce(probs: Tensor, labels, ignore_id: int | None = None) -> Tensor:
    """Mean of -log p(true class) over non-ignored pixels.

    `probs` is (num_pixels, num_classes) with rows summing to 1; `labels` is
    an (H, W) or flat integer map of class indices into the prob columns.
    """
    flat = np.asarray(labels).reshape(-1)
    if flat.shape[0] != probs.shape[0]:
        raise ad.ShapeError(f"{flat.shape[0]} labels for {probs.shape[0]} pixels")
    valid = np.ones_like(flat, dtype=bool) if ignore_id is None else flat != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UndefinedLossError("every pixel is ignored; cross-entropy undefined")
    onehot = np.zeros(probs.shape)
    onehot[np.nonzero(valid)[0], flat[valid]] = 1.0
    picked = (probs * Tensor(onehot)).sum(axis=1)
    # ignored rows pick 0 and are masked out of the average
    masked = _floored_log(ad.maximum_scalar(picked, LOG_FLOOR)) * Tensor(valid.astype(np.float64))
    return -masked.sum() * (1.0 / n_valid)


def predictive_entropy(probs: Tensor) -> Tensor:
    """Mean over pixels of -sum_c p log p."""
    return -(probs * _floored_log(probs)).sum(axis=1).mean()


def conditional_entropy(support_ce: Tensor, query_probs: Tensor) -> Tensor:
    """Supervised support cross-entropy plus predictive entropy on the query."""
    return support_ce + predictive_entropy(query_probs)


def marginal_entropy(query_probs: Tensor, prior: RegionPrior) -> Tensor:
    """KL(mean predicted distribution || prior); the marginal slot of the
    composite objective, minimized to pull class proportions toward the prior."""
    q_bar = query_probs.mean(axis=0)
    pi = prior.proportions
    receiving = q_bar.data > LOG_FLOOR
    if np.any((pi <= 0.0) & receiving):
        warnings.warn("prior has zero mass where predictions place mass; flooring at 1e-8")
    log_pi = np.log(np.maximum(pi, LOG_FLOOR))
    return (q_bar * (_floored_log(q_bar) - Tensor(log_pi))).sum()


def estimate_prior(query_probs) -> RegionPrior:
    """Region-proportion prior from the current predictions (a snapshot:
    the result carries no graph history and stays fixed afterwards)."""
    data = query_probs.data if isinstance(query_probs, Tensor) else np.asarray(query_probs)
    mean = data.mean(axis=0)
    return RegionPrior(proportions=mean / mean.sum())


def oracle_prior(labels, class_index_of_id: dict[int, int], num_classes: int) -> RegionPrior:
    """Ground-truth class proportions of a label map (testing aid)."""
    flat = np.asarray(labels).reshape(-1)
    counts = np.zeros(num_classes)
    for cid, idx in class_index_of_id.items():
        counts[idx] = int((flat == cid).sum())
    total = counts.sum()
    if total == 0:
        raise UndefinedLossError("label map has no pixels in the known classes")
    return RegionPrior(proportions=counts / total)


def base_block(joint_probs: Tensor, num_base: int) -> Tensor:
    """Base-class columns of a joint distribution, renormalized per pixel."""
    base = ad.cols(joint_probs, 0, num_base)
    return base / ad.maximum_scalar(base.sum(axis=1, keepdims=True), LOG_FLOOR)


def kd_loss(new_base_probs: Tensor, old_base_probs: np.ndarray) -> Tensor:
    """Mean over pixels of KL(new || old) between base-class distributions.

    `old_base_probs` comes from the frozen post-base-training model and is a
    constant; both inputs are per-pixel distributions over the base classes.
    """
    old_log = np.log(np.maximum(np.asarray(old_base_probs, dtype=np.float64), LOG_FLOOR))
    per_pixel = (new_base_probs * (_floored_log(new_base_probs) - Tensor(old_log))).sum(axis=1)
    return per_pixel.mean()


def transductive_loss(
    conditional: Tensor,
    marginal: Tensor,
    distill: Tensor,
    cfg: TransductiveConfig,
) -> Tensor:
    """alpha * H(O|I) + KL-to-prior (the marginal slot) + gamma * KD."""
    return conditional * cfg.alpha + marginal + distill * cfg.gamma


# -- optimizer -------------------------------------------------------------------


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class AdamW:
    """Adaptive-moment optimizer with bias correction and decoupled weight decay.

    Update per parameter: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    """

    def __init__(
        self,
        lr: float,
        weight_decay: float = 0.05,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, MomentState] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            g = p.grad
            if g is None:
                raise NanGradientError(f"parameter {name!r} has no gradient; run backward first")
            if np.any(np.isnan(g)):
                raise NanGradientError(f"NaN gradient for parameter {name!r}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = MomentState(m=np.zeros_like(p.data), v=np.zeros_like(p.data))
            st.step += 1
            st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
            st.v = self.beta2 * st.v + (1.0 - self.beta2) * g * g
            m_hat = st.m / (1.0 - self.beta1 ** st.step)
            v_hat = st.v / (1.0 - self.beta2 ** st.step)
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)
