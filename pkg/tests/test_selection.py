"""
Tests for positive / negative patch selection.
"""

import pytest
import torch

from cobra_wsss.core.models import PseudoLabelGrid, SelectionConfig, SelectionSets
from cobra_wsss.core.selection import build_batch_selections, select_for_cap, select_for_sap


class TestSelectForCap:
    """Affinity-ranked selection around pseudo-labelled targets."""

    def setup_method(self):
        # 2 x 2 grid, only patch 0 carries class 0
        self.pseudo = PseudoLabelGrid(
            labels=torch.tensor([[1, 0], [0, 0]]),
            scores=torch.tensor([[0.9, 0.1], [0.2, 0.0]]),
        )
        self.affinity = torch.tensor(
            [
                [0.0, 0.9, 0.1, 0.5],
                [0.9, 0.0, 0.3, 0.3],
                [0.1, 0.3, 0.0, 0.2],
                [0.5, 0.3, 0.2, 0.0],
            ]
        )

    def test_most_and_least_similar_patches(self):
        cfg = SelectionConfig(k_sap_pos=1, k_cap_pos=1, k_cap_neg=1)
        sel = select_for_cap(self.affinity, self.pseudo, 0, cfg)
        assert sel.targets == [0]
        assert sel.positives == [[1]]
        assert sel.negatives == [[2]]

    def test_partition_when_sizes_cover_the_row(self):
        cfg = SelectionConfig(k_sap_pos=1, k_cap_pos=1, k_cap_neg=2)
        sel = select_for_cap(self.affinity, self.pseudo, 0, cfg)
        assert sorted(sel.positives[0] + sel.negatives[0]) == [1, 2, 3]

    def test_uniform_row_breaks_ties_by_index(self):
        cfg = SelectionConfig(k_sap_pos=1, k_cap_pos=1, k_cap_neg=1)
        sel = select_for_cap(torch.full((4, 4), 0.25), self.pseudo, 0, cfg)
        assert sel.positives == [[1]]
        assert sel.negatives == [[2]]

    def test_no_pseudo_label_gives_empty_selection(self):
        cfg = SelectionConfig(k_sap_pos=1, k_cap_pos=1, k_cap_neg=1)
        assert select_for_cap(self.affinity, self.pseudo, 1, cfg).is_empty

    def test_invariant_to_monotone_affinity_transform(self):
        cfg = SelectionConfig(k_sap_pos=1, k_cap_pos=1, k_cap_neg=2)
        base = select_for_cap(self.affinity, self.pseudo, 0, cfg)
        assert select_for_cap(torch.exp(self.affinity), self.pseudo, 0, cfg) == base
        assert select_for_cap(3 * self.affinity + 1, self.pseudo, 0, cfg) == base

    def test_targets_ranked_by_confidence(self):
        pseudo = PseudoLabelGrid(
            labels=torch.tensor([[1, 1], [1, 0]]),
            scores=torch.tensor([[0.5, 0.9], [0.7, 0.0]]),
        )
        cfg = SelectionConfig(k_sap_pos=2, k_cap_pos=1, k_cap_neg=1)
        assert select_for_cap(self.affinity, pseudo, 0, cfg).targets == [1, 2]


class TestSelectForSap:
    """Rank-based selection from the CNN class map."""

    def setup_method(self):
        self.m_cnn = torch.tensor([[[1.0, 0.8], [0.1, 0.0]]])

    def test_top_and_bottom_patches(self):
        cfg = SelectionConfig(k_sap_pos=2, k_sap_neg=1)
        sel = select_for_sap(self.m_cnn, [0], 0, cfg)
        assert sel.targets == [0, 1]
        assert sel.negatives == [[3], [3]]
        assert sel.positives[0] == [1]
        assert sel.positives[1] == [0]

    def test_single_positive_has_no_partners(self):
        cfg = SelectionConfig(k_sap_pos=1, k_sap_neg=1)
        sel = select_for_sap(self.m_cnn, [0], 0, cfg)
        assert sel.positives == [[]]

    def test_ties_favour_lower_index(self):
        cfg = SelectionConfig(k_sap_pos=1, k_sap_neg=1)
        sel = select_for_sap(torch.tensor([[[0.5, 1.0], [1.0, 0.0]]]), [0], 0, cfg)
        assert sel.targets == [1]

    def test_invariant_to_monotone_map_transform(self):
        gen = torch.Generator().manual_seed(4)
        cfg = SelectionConfig(k_sap_pos=5, k_sap_neg=4)
        maps = torch.rand(2, 4, 4, generator=gen, dtype=torch.float64)
        base = select_for_sap(maps, [0, 1], 1, cfg)
        for transformed in (3 * maps + 1, torch.exp(maps), maps ** 3):
            assert select_for_sap(transformed, [0, 1], 1, cfg) == base

    def test_class_must_be_positive(self):
        with pytest.raises(ValueError):
            select_for_sap(self.m_cnn, [1], 0, SelectionConfig())

    def test_sizes_and_disjointness_on_random_maps(self):
        gen = torch.Generator().manual_seed(2)
        cfg = SelectionConfig(k_sap_pos=5, k_sap_neg=4)
        for _ in range(20):
            sel = select_for_sap(torch.rand(2, 4, 4, generator=gen), [0, 1], 1, cfg)
            for target, pos, neg in zip(sel.targets, sel.positives, sel.negatives):
                assert len(pos) <= cfg.k_sap_pos and len(neg) <= cfg.k_sap_neg
                assert not set(pos) & set(neg)
                assert target not in pos and target not in neg


class TestSelectionSets:
    """Validation of selection records."""

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            SelectionSets(targets=[0], positives=[[1]], negatives=[[1]])

    def test_self_selection_rejected(self):
        with pytest.raises(ValueError):
            SelectionSets(targets=[0], positives=[[0]], negatives=[[1]])

    def test_batch_selections_are_lazy(self):
        cams = torch.rand(2, 3, 4, 4)
        affinity = torch.rand(2, 16, 16)
        labels = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        cfg = SelectionConfig(k_sap_pos=3, k_sap_neg=3, k_cap_pos=3, k_cap_neg=3)
        cap_sets, sap_sets = build_batch_selections(cams, affinity, labels, cfg, need_cap=False)
        assert cap_sets == [[], []]
        assert [len(s) for s in sap_sets] == [2, 1]
