"""Pair losses, group penalties, and their proximal operators.

A training pair contributes a squared-error term on the main affinity
prediction of each compound, plus node-information terms that force the
masked readouts themselves to be predictive: each head's readout is
scalarized by a dedicated linear map and regressed on the same label.
The group penalties act on the two head blocks (head plus scalarize
parameters, flattened per group) and are handled by proximal steps, not
by gradients.

Variants:

==========  =====================================================
``ucn``     squared error + uncommon-readout term only
``n``       squared error + both readout terms
``n-gl``    ``n`` with a group lasso prox on the head blocks
``n-sgl``   ``n`` with a sparse group lasso prox on the head blocks
==========  =====================================================

For a block of size p, the group lasso prox at step t is
``(1 - t*lam*sqrt(p)/||b||)_+ * b``; the sparse variant soft-thresholds
elementwise at ``t*alpha*lam`` first and then applies the group prox
with the remaining ``(1-alpha)*lam`` weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardTrace, MpnnModel

VARIANTS = ("ucn", "n", "n-gl", "n-sgl")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "n"
    lam: float = 1e-3
    alpha: float = 0.5
    node_loss_weight: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.node_loss_weight < 0:
            raise ValueError("node_loss_weight must be non-negative")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "lam": self.lam,
            "alpha": self.alpha,
            "node_loss_weight": self.node_loss_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _squared_error(y_hat: Tensor, y: float) -> Tensor:
    d = ad.sub(y_hat, y_hat.tape.constant(np.array([float(y)])))
    return ad.sum_all(ad.mul(d, d))


def loss_mse(trace_i: ForwardTrace, trace_j: ForwardTrace, y_i: float, y_j: float) -> Tensor:
    """Squared error of both main predictions against their labels."""
    if trace_i.tape is not trace_j.tape:
        raise ValueError("pair traces must share one tape")
    return ad.add(_squared_error(trace_i.y_hat, y_i), _squared_error(trace_j.y_hat, y_j))


def _readout_term(trace: ForwardTrace, head: str, y: float) -> Tensor:
    s = trace.binding.linear(f"scalarize_{head}", getattr(trace, f"a_{head}"))
    return _squared_error(s, y)


def loss_node(
    trace_i: ForwardTrace,
    trace_j: ForwardTrace,
    y_i: float,
    y_j: float,
    variant: str = "n",
) -> Tensor:
    """Node-information loss over the masked readouts of both compounds.

    Both head activations come from the traces; only the scalarize maps
    are added here. The ``ucn`` variant keeps just the uncommon terms.
    """
    if trace_i.tape is not trace_j.tape:
        raise ValueError("pair traces must share one tape")
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    total = ad.add(_readout_term(trace_i, "ucn", y_i), _readout_term(trace_j, "ucn", y_j))
    if variant != "ucn":
        common = ad.add(_readout_term(trace_i, "cn", y_i), _readout_term(trace_j, "cn", y_j))
        total = ad.add(total, common)
    return total


def pair_loss(
    trace_i: ForwardTrace,
    trace_j: ForwardTrace,
    y_i: float,
    y_j: float,
    config: LossConfig,
) -> Tensor:
    """Smooth objective for one pair: squared error plus weighted node loss."""
    total = loss_mse(trace_i, trace_j, y_i, y_j)
    node = loss_node(trace_i, trace_j, y_i, y_j, config.variant)
    return ad.add(total, ad.scale(node, config.node_loss_weight))


@dataclass
class PenaltyGroups:
    """Flattened head blocks in a fixed parameter order, for penalties and prox."""

    names_cn: list[str]
    names_ucn: list[str]
    beta_cn: np.ndarray
    beta_ucn: np.ndarray


def extract_penalty_groups(model: MpnnModel) -> PenaltyGroups:
    names_cn = model.group_names("CN_head")
    names_ucn = model.group_names("UCN_head")
    beta_cn = np.concatenate([model.params[n].value.ravel() for n in names_cn])
    beta_ucn = np.concatenate([model.params[n].value.ravel() for n in names_ucn])
    return PenaltyGroups(names_cn, names_ucn, beta_cn, beta_ucn)


def write_penalty_groups(model: MpnnModel, groups: PenaltyGroups) -> None:
    """Scatter flattened blocks back into the model parameters."""
    for names, beta in ((groups.names_cn, groups.beta_cn), (groups.names_ucn, groups.beta_ucn)):
        offset = 0
        for name in names:
            p = model.params[name]
            size = p.value.size
            p.value = beta[offset : offset + size].reshape(p.value.shape).copy()
            offset += size
        if offset != beta.size:
            raise ValueError("group block size does not match its parameters")


def penalty_group_lasso(groups: PenaltyGroups, lam: float) -> float:
    """lam * (sqrt(p_cn)*||b_cn|| + sqrt(p_ucn)*||b_ucn||)."""
    value = 0.0
    for beta in (groups.beta_cn, groups.beta_ucn):
        value += np.sqrt(beta.size) * np.linalg.norm(beta)
    return float(lam * value)


def penalty_sparse_group_lasso(groups: PenaltyGroups, lam: float, alpha: float) -> float:
    """Convex mix of the group penalty and an elementwise l1 penalty."""
    group_part = penalty_group_lasso(groups, lam)
    l1 = float(np.abs(groups.beta_cn).sum() + np.abs(groups.beta_ucn).sum())
    return (1.0 - alpha) * group_part + alpha * lam * l1


def prox_group_lasso(block: np.ndarray, step: float, lam: float, p: int | None = None) -> np.ndarray:
    """Block soft-threshold: minimizes ``0.5*||z-b||^2 + step*lam*sqrt(p)*||z||``."""
    block = np.asarray(block, dtype=np.float64)
    if p is None:
        p = block.size
    threshold = step * lam * np.sqrt(p)
    if threshold == 0.0:
        return block.copy()
    norm = np.linalg.norm(block)
    if norm <= threshold:
        return np.zeros_like(block)
    return (1.0 - threshold / norm) * block


def prox_sparse_group_lasso(
    block: np.ndarray, step: float, lam: float, alpha: float, p: int | None = None
) -> np.ndarray:
    """Elementwise soft-threshold, then the group prox on what survives.

    With ``alpha = 0`` this reduces exactly to :func:`prox_group_lasso`.
    """
    block = np.asarray(block, dtype=np.float64)
    if p is None:
        p = block.size
    soft = step * alpha * lam
    if soft > 0.0:
        block = np.sign(block) * np.maximum(np.abs(block) - soft, 0.0)
    return prox_group_lasso(block, step, (1.0 - alpha) * lam, p)


def apply_prox(model: MpnnModel, config: LossConfig, step: float) -> None:
    """Proximal update of both head blocks in place, per the config's variant."""
    if config.variant not in ("n-gl", "n-sgl"):
        return
    groups = extract_penalty_groups(model)
    for attr in ("beta_cn", "beta_ucn"):
        block = getattr(groups, attr)
        if config.variant == "n-gl":
            updated = prox_group_lasso(block, step, config.lam)
        else:
            updated = prox_sparse_group_lasso(block, step, config.lam, config.alpha)
        setattr(groups, attr, updated)
    write_penalty_groups(model, groups)
