"""
Training objectives and the finite-difference gradient checker.

All losses are torch functions; gradients come from autograd. The
contrastive kernel implements, per target i with positives P+ and
negatives P-::

    (1/|P+|) sum_{j in P+} -log( e^{s_ij} / (e^{s_ij} + sum_{k in P-} e^{s_ik}) )

with s = (v_i . v_j) / tau, averaged over targets and then over
(image, class) selections.
"""

from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .branches import pseudo_labels
from .models import LossConfig, LossReport, ProjectionSet, SelectionConfig, SelectionSets
from .selection import select_for_cap, select_for_sap

Scalar = Union[float, torch.Tensor]

_MASKED = -1e9


class LossParts(NamedTuple):
    """Unweighted loss terms of one step."""

    cls: Scalar
    cam: Scalar
    cap: Scalar
    sap: Scalar


# ============= CLASSIFICATION / CONSISTENCY =============

def cls_loss(
    scores_cnn: Optional[torch.Tensor],
    scores_vit: Optional[torch.Tensor],
    labels: torch.Tensor,
    scores_token: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Sigmoid multi-label loss (mean over classes) of each active branch, summed.

    ``scores_token`` adds the same term for the class-token classifier of the
    transformer branch; it never counts as a branch on its own.
    """
    if scores_cnn is None and scores_vit is None:
        raise ValueError("cls_loss needs scores from at least one branch")
    terms = [
        F.binary_cross_entropy_with_logits(scores, labels.to(scores.dtype))
        for scores in (scores_cnn, scores_vit, scores_token)
        if scores is not None
    ]
    return torch.stack(terms).sum()


def cam_loss(m_cnn: torch.Tensor, m_vit: torch.Tensor, positives: torch.Tensor) -> torch.Tensor:
    """
    Mean absolute CAM difference over all classes plus over positive classes only.

    Args:
        m_cnn, m_vit: B x C x N x N
        positives: B x C multi-hot
    """
    if m_cnn.shape != m_vit.shape:
        raise ValueError(f"CAM shapes differ: {tuple(m_cnn.shape)} vs {tuple(m_vit.shape)}")
    diff = (m_cnn - m_vit).abs()
    mask = positives.to(diff.dtype)[..., None, None].expand_as(diff)
    count = mask.sum()
    positive_term = (diff * mask).sum() / count if count > 0 else diff.sum() * 0
    return diff.mean() + positive_term


# ============= CONTRASTIVE =============

def _pad(rows: List[List[int]], device) -> Tuple[torch.Tensor, torch.Tensor]:
    width = max((len(r) for r in rows), default=0)
    index = torch.zeros(len(rows), max(width, 1), dtype=torch.long, device=device)
    mask = torch.zeros(len(rows), max(width, 1), dtype=torch.bool, device=device)
    for i, row in enumerate(rows):
        if row:
            index[i, : len(row)] = torch.as_tensor(row, dtype=torch.long)
            mask[i, : len(row)] = True
    return index, mask


def _grouped_contrastive(
    flat: torch.Tensor,
    groups: List[SelectionSets],
    offsets: Sequence[int],
    tau: float,
) -> torch.Tensor:
    """Mean over groups of the mean over targets of the contrastive terms."""
    targets, positives, negatives, owner = [], [], [], []
    for g, (sel, offset) in enumerate(zip(groups, offsets)):
        for target, pos, neg in zip(sel.targets, sel.positives, sel.negatives):
            if not pos:
                continue
            targets.append(target + offset)
            positives.append([j + offset for j in pos])
            negatives.append([k + offset for k in neg])
            owner.append(g)
    if not targets:
        return flat.sum() * 0

    device = flat.device
    anchor = flat[torch.as_tensor(targets, device=device)]
    pos_idx, pos_mask = _pad(positives, device)
    neg_idx, neg_mask = _pad(negatives, device)

    pos_sim = (anchor.unsqueeze(1) * flat[pos_idx]).sum(-1) / tau
    neg_sim = (anchor.unsqueeze(1) * flat[neg_idx]).sum(-1) / tau
    neg_lse = torch.logsumexp(neg_sim.masked_fill(~neg_mask, _MASKED), dim=1, keepdim=True)
    terms = torch.logaddexp(pos_sim, neg_lse) - pos_sim
    pos_weight = pos_mask.to(flat.dtype)
    per_target = (terms * pos_weight).sum(1) / pos_weight.sum(1)

    owner_t = torch.as_tensor(owner, device=device)
    sums = torch.zeros(len(groups), dtype=flat.dtype, device=device).index_add(0, owner_t, per_target)
    counts = torch.zeros(len(groups), dtype=flat.dtype, device=device).index_add(
        0, owner_t, torch.ones_like(per_target)
    )
    valid = counts > 0
    return (sums[valid] / counts[valid]).mean()


def contrastive_loss(vectors: torch.Tensor, sel: SelectionSets, tau: float) -> torch.Tensor:
    """Contrastive loss of one selection over M x d vectors."""
    return _grouped_contrastive(vectors, [sel], [0], tau)


def cap_loss(cap: ProjectionSet, sel: SelectionSets, cfg: LossConfig) -> torch.Tensor:
    """Class-aware projection loss of one image (vectors N^2 x d)."""
    return contrastive_loss(cap.vectors, sel, cfg.tau)


def sap_loss(sap: ProjectionSet, sel: SelectionSets, cfg: LossConfig) -> torch.Tensor:
    """Semantic-aware projection loss of one image (vectors N^2 x d)."""
    return contrastive_loss(sap.vectors, sel, cfg.tau)


def batch_contrastive_loss(
    vectors: torch.Tensor,
    selections: List[List[SelectionSets]],
    tau: float,
) -> torch.Tensor:
    """
    Contrastive loss over a batch.

    Args:
        vectors: B x M x d projections
        selections: per image, one SelectionSets per positive class

    Returns:
        Mean over (image, class) selections with at least one valid target.
    """
    batch, patches, dim = vectors.shape
    flat = vectors.reshape(batch * patches, dim)
    groups, offsets = [], []
    for b, per_image in enumerate(selections):
        for sel in per_image:
            groups.append(sel)
            offsets.append(b * patches)
    if not groups:
        return flat.sum() * 0
    return _grouped_contrastive(flat, groups, offsets, tau)


# ============= TOTAL =============

def _cam_weight(cfg: LossConfig, epoch: int) -> float:
    return cfg.lambda1 if epoch >= cfg.cam_loss_start_epoch else 0.0


def objective(parts: LossParts, cfg: LossConfig, epoch: int) -> Scalar:
    """cls + lambda1 * cam + lambda2 * (sap + cap), the cam term gated by epoch."""
    return parts.cls + _cam_weight(cfg, epoch) * parts.cam + cfg.lambda2 * (parts.sap + parts.cap)


def total_loss(parts: LossParts, cfg: LossConfig, epoch: int) -> LossReport:
    """Scalar report of one step; ``cam`` holds the value that actually entered the total."""
    values = {name: torch.as_tensor(value).detach().item() for name, value in parts._asdict().items()}
    if epoch < cfg.cam_loss_start_epoch:
        values["cam"] = 0.0
    values["total"] = values["cls"] + cfg.lambda1 * values["cam"] + cfg.lambda2 * (values["sap"] + values["cap"])
    return LossReport(**values)


# ============= GRADIENT CHECKING =============

def grad_check(
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-6,
    grad_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
    floor: float = 1e-5,
) -> float:
    """
    Compare an analytic gradient with central differences.

    Args:
        loss_fn: scalar function of ``point``
        point: float64 tensor
        eps: finite-difference step in [1e-6, 1e-4]
        grad_fn: analytic gradient; autograd of ``loss_fn`` when omitted
        floor: lower bound of the relative-error denominator

    Returns:
        Maximum over coordinates of |a - n| / max(|a|, |n|, floor)
    """
    if point.dtype != torch.float64:
        raise ValueError("grad_check requires double precision")
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")

    point = point.detach().clone()
    if grad_fn is None:
        x = point.clone().requires_grad_(True)
        analytic = torch.autograd.grad(loss_fn(x), x)[0].detach()
    else:
        analytic = grad_fn(point).detach()

    numeric = torch.zeros_like(point)
    flat_point, flat_numeric = point.view(-1), numeric.view(-1)
    with torch.no_grad():
        for i in range(flat_point.numel()):
            original = flat_point[i].item()
            flat_point[i] = original + eps
            upper = float(loss_fn(point))
            flat_point[i] = original - eps
            lower = float(loss_fn(point))
            flat_point[i] = original
            flat_numeric[i] = (upper - lower) / (2 * eps)

    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, floor))
    return float(((analytic - numeric).abs() / denom).max())


def _random_multi_hot(classes: int, gen: torch.Generator) -> torch.Tensor:
    labels = (torch.rand(classes, generator=gen) < 0.5).double()
    labels[int(torch.randint(classes, (1,), generator=gen))] = 1.0
    return labels


def run_gradient_suite(instances: int = 100, tau: float = 0.1, seed: int = 0, eps: float = 1e-6) -> Dict[str, float]:
    """
    Gradient checks of cls, cam, cap and sap losses on random float64 instances.

    The contrastive losses are checked through the projection normalisation,
    with selections drawn from random CAMs / affinities.

    Returns:
        Maximum relative error per loss
    """
    gen = torch.Generator().manual_seed(seed)
    classes, grid, dim = 3, 4, 6
    patches = grid * grid
    sel_cfg = SelectionConfig(k_sap_pos=4, k_sap_neg=3, k_cap_pos=3, k_cap_neg=4)
    errors = {"cls": 0.0, "cam": 0.0, "cap": 0.0, "sap": 0.0}

    for _ in range(instances):
        labels = _random_multi_hot(classes, gen)
        positives = [int(c) for c in torch.nonzero(labels).flatten()]

        scores = torch.randn(2, classes, generator=gen, dtype=torch.float64) * 2
        errors["cls"] = max(
            errors["cls"],
            grad_check(lambda s: cls_loss(s[0:1], s[1:2], labels[None]), scores, eps),
        )

        cams = torch.randn(2, 1, classes, grid, grid, generator=gen, dtype=torch.float64)
        errors["cam"] = max(
            errors["cam"],
            grad_check(lambda m: cam_loss(m[0], m[1], labels[None]), cams, eps),
        )

        cnn_cams = torch.randn(classes, grid, grid, generator=gen, dtype=torch.float64)
        affinity = torch.rand(patches, patches, generator=gen, dtype=torch.float64)
        pseudo = pseudo_labels(cnn_cams, positives, 0.3)
        cap_sets = [select_for_cap(affinity, pseudo, c, sel_cfg) for c in positives]
        sap_sets = [select_for_sap(cnn_cams, positives, c, sel_cfg) for c in positives]

        raw = torch.randn(1, patches, dim, generator=gen, dtype=torch.float64)
        errors["cap"] = max(
            errors["cap"],
            grad_check(lambda v: batch_contrastive_loss(F.normalize(v, dim=-1), [cap_sets], tau), raw, eps),
        )
        raw = torch.randn(1, patches, dim, generator=gen, dtype=torch.float64)
        errors["sap"] = max(
            errors["sap"],
            grad_check(lambda v: batch_contrastive_loss(F.normalize(v, dim=-1), [sap_sets], tau), raw, eps),
        )
    return errors

