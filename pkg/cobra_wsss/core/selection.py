"""
Positive / negative patch selection for the two contrastive losses.

Selections are rank based and computed from gradient-stopped signals of the
complementary branch. Ties are broken toward the lower patch index.
"""

from typing import List, Sequence

import torch

from .branches import minmax_normalize, pseudo_labels
from .models import PseudoLabelGrid, SelectionConfig, SelectionSets


def _rank_desc(scores: torch.Tensor) -> List[int]:
    return torch.sort(scores, descending=True, stable=True).indices.tolist()


def _rank_asc(scores: torch.Tensor) -> List[int]:
    return torch.sort(scores, descending=False, stable=True).indices.tolist()


def select_for_cap(
    affinity: torch.Tensor,
    pseudo: PseudoLabelGrid,
    cls: int,
    cfg: SelectionConfig,
) -> SelectionSets:
    """
    Selection sets for the class-aware projection loss.

    Targets are the most confident pseudo-positive patches of ``cls``; each
    target's positives and negatives are the most and least similar patches
    of its affinity row.

    Args:
        affinity: N^2 x N^2 patch affinity of one image
        pseudo: pseudo labels of the same image
        cls: 0-based class index
        cfg: selection sizes

    Returns:
        SelectionSets (empty when no patch is labelled ``cls``)
    """
    affinity = affinity.detach()
    labels = pseudo.labels.detach().flatten()
    scores = pseudo.scores.detach().flatten()
    candidates = torch.nonzero(labels == cls + 1).flatten()
    if candidates.numel() == 0:
        return SelectionSets()

    order = _rank_desc(scores[candidates])
    targets = [int(candidates[i]) for i in order[: cfg.k_sap_pos]]

    positives, negatives = [], []
    num_patches = affinity.shape[-1]
    for target in targets:
        others = torch.tensor(
            [j for j in range(num_patches) if j != target], dtype=torch.long, device=affinity.device
        )
        row = affinity[target, others]
        pos = [int(others[i]) for i in _rank_desc(row)[: cfg.k_cap_pos]]
        taken = set(pos)
        neg = [int(others[i]) for i in _rank_asc(row) if int(others[i]) not in taken][: cfg.k_cap_neg]
        positives.append(pos)
        negatives.append(neg)
    return SelectionSets(targets=targets, positives=positives, negatives=negatives)


def select_for_sap(
    m_cnn: torch.Tensor,
    positives_cls: Sequence[int],
    cls: int,
    cfg: SelectionConfig,
) -> SelectionSets:
    """
    Selection sets for the semantic-aware projection loss.

    Patches are ranked by the normalised CNN CAM of ``cls``: the top
    ``k_sap_pos`` form P+ (and the targets), the bottom ``k_sap_neg`` form P-.

    Args:
        m_cnn: C x N x N CNN CAMs of one image
        positives_cls: image-level positive classes
        cls: 0-based class index, must be in ``positives_cls``
        cfg: selection sizes
    """
    if cls not in positives_cls:
        raise ValueError(f"class {cls} is not an image-level positive")
    scores = minmax_normalize(m_cnn.detach()[cls], dims=(-2, -1)).flatten()
    top = _rank_desc(scores)[: cfg.k_sap_pos]
    taken = set(top)
    bottom = [i for i in _rank_asc(scores) if i not in taken][: cfg.k_sap_neg]
    return SelectionSets(
        targets=list(top),
        positives=[[j for j in top if j != i] for i in top],
        negatives=[list(bottom) for _ in top],
    )


def build_batch_selections(
    cnn_cams: torch.Tensor,
    affinity: torch.Tensor,
    labels: torch.Tensor,
    cfg: SelectionConfig,
    need_cap: bool = True,
    need_sap: bool = True,
):
    """
    Both selection families for every (image, positive class) of a batch.

    Args:
        cnn_cams: B x C x N x N CNN CAMs
        affinity: B x N^2 x N^2 patch affinity
        labels: B x C multi-hot labels

    Returns:
        (cap_selections, sap_selections): per image, a list with one SelectionSets per positive class
    """
    cnn_cams = cnn_cams.detach()
    affinity = affinity.detach()
    cap_sets, sap_sets = [], []
    for b in range(cnn_cams.shape[0]):
        positives = [int(c) for c in torch.nonzero(labels[b] > 0).flatten()]
        cap_image, sap_image = [], []
        if positives and need_cap:
            grid = pseudo_labels(cnn_cams[b], positives, cfg.pseudo_bg_thresh)
            cap_image = [select_for_cap(affinity[b], grid, c, cfg) for c in positives]
        if positives and need_sap:
            sap_image = [select_for_sap(cnn_cams[b], positives, c, cfg) for c in positives]
        cap_sets.append(cap_image)
        sap_sets.append(sap_image)
    return cap_sets, sap_sets
