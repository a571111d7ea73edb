"""Symmetric InfoNCE and the two training objectives built from it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ModelParams, SetEncoding, project
from .numerics import Tensor


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossReport:
    mcm: float
    set: float
    total: float
    masked_count: int


def _as(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def per_element_losses(a, b, tau: float) -> Tensor:
    """One-directional losses for every anchor: ``-log softmax_j(a_i . b_j / tau)[i]``.

    ``a`` and ``b`` are (N, d) unit vectors paired by row.
    """
    a, b = _as(a), _as(b)
    logits = nx.matmul(a, b.transpose()) * (1.0 / tau)
    return nx.cross_entropy(logits, np.arange(a.shape[0]))


def per_element_loss(a, b, tau: float, i: int) -> float:
    return float(per_element_losses(a, b, tau).data[i])


def symmetric_element_losses(a, b, tau: float) -> Tensor:
    """Per-element losses summed over both directions (A->B and B->A)."""
    a, b = _as(a), _as(b)
    logits = nx.matmul(a, b.transpose()) * (1.0 / tau)
    idx = np.arange(a.shape[0])
    return nx.cross_entropy(logits, idx) + nx.cross_entropy(logits.transpose(), idx)


def symmetric_element_loss(a, b, tau: float, i: int) -> float:
    return float(symmetric_element_losses(a, b, tau).data[i])


def contrastive_mean(a, b, tau: float) -> Tensor:
    return nx.mean(symmetric_element_losses(a, b, tau))


def mcm_loss(encodings: SetEncoding, targets, mask, params: ModelParams, tau: float) -> Tensor:
    """Masked clip modeling loss for a batch.

    ``encodings.clip_tokens`` is (B, V, K, d_h), ``targets`` the raw clip
    features (B, V, K, d_in) and ``mask`` a boolean (B, V, K) array. Each
    masked prediction is contrasted against the projections of every clip
    target in the batch (including unmasked clips of the same video); in the
    reverse direction each masked target is contrasted against all masked
    predictions. The symmetric per-element losses are averaged over masked
    positions.
    """
    mask = np.asarray(mask, dtype=bool)
    flat_mask = mask.reshape(-1)
    masked = np.flatnonzero(flat_mask)
    if masked.size == 0:
        raise LossConfigError("mcm_loss needs at least one masked position")
    d_h = encodings.clip_tokens.shape[-1]
    tokens = encodings.clip_tokens.reshape(-1, d_h)
    targets = np.asarray(targets)
    dtype = params["input.weight"].data.dtype
    target_proj = project(Tensor(targets.reshape(-1, targets.shape[-1]), dtype=dtype), params, "mcm_b")
    pred_proj = project(nx.getitem(tokens, masked), params, "mcm_a")
    return mcm_from_projections(pred_proj, target_proj, masked, tau)


def mcm_from_projections(pred_proj, target_proj, masked, tau: float) -> Tensor:
    """MCM arithmetic on projected unit vectors.

    ``pred_proj`` (M, d) holds predictions at the flat positions ``masked``;
    ``target_proj`` (P, d) holds every target in the batch.
    """
    pred_proj, target_proj = _as(pred_proj), _as(target_proj)
    masked = np.asarray(masked)
    inv_tau = 1.0 / tau
    forward_logits = nx.matmul(pred_proj, target_proj.transpose()) * inv_tau
    forward = nx.cross_entropy(forward_logits, masked)
    positives = nx.getitem(target_proj, masked)
    reverse_logits = nx.matmul(positives, pred_proj.transpose()) * inv_tau
    reverse = nx.cross_entropy(reverse_logits, np.arange(masked.size))
    return nx.mean(forward + reverse)


def set_loss(cls1, cls2, params: ModelParams, tau: float) -> Tensor:
    """Contrast the two views' summary tokens across the batch."""
    return contrastive_mean(project(cls1, params, "set_a"), project(cls2, params, "set_b"), tau)


def total_loss(encodings: SetEncoding, targets, mask, params: ModelParams, tau: float,
               use_mcm: bool = True, use_set: bool = True) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the enabled terms, plus a float report.

    ``encodings.summary`` is (B, 2, d_h): one summary per view.
    """
    if not (use_mcm or use_set):
        raise LossConfigError("at least one of the MCM and SET losses must be enabled")
    terms = []
    mcm_value = set_value = 0.0
    if use_mcm:
        lm = mcm_loss(encodings, targets, mask, params, tau)
        terms.append(lm)
        mcm_value = lm.item()
    if use_set:
        ls = set_loss(encodings.summary[:, 0], encodings.summary[:, 1], params, tau)
        terms.append(ls)
        set_value = ls.item()
    loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    report = LossReport(mcm_value, set_value, mcm_value + set_value, int(np.count_nonzero(mask)))
    return loss, report
