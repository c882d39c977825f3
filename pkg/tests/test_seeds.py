"""
Tests for CAM fusion, multi-scale seeds, trimaps and mask files.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

import cobra_wsss
from cobra_wsss.core import seeds as seeds_module
from cobra_wsss.core.branches import CobraModel
from cobra_wsss.core.exceptions import ConfigError, CrfError, DatasetError, ShapeError
from cobra_wsss.core.models import BranchMode, CamSource, CamStack, MaskSource, Seed, ThresholdConfig, TriMap
from cobra_wsss.core.seeds import (
    UNKNOWN,
    attention_record,
    background_threshold,
    combine_sources,
    crf_hook,
    export_mask,
    fuse_cams,
    load_attention,
    load_bundle,
    make_trimap,
    multiscale_bundle,
    multiscale_seed,
    normalize_cams,
    read_mask,
    save_attention,
    save_bundle,
    scale_maps,
    seed_to_label,
    upsample,
)
from cobra_wsss.core.storage import TensorStore

from .helpers import tiny_config


def _stack(values, source=CamSource.CNN):
    return CamStack(values=torch.tensor(values, dtype=torch.float64), source=source)


class TestFusion:
    """Max-of-average fusion of normalised CAMs."""

    def test_hand_cells(self):
        fused = fuse_cams(_stack([[[[0.2, 1.0]]]]), _stack([[[[0.6, 0.0]]]], CamSource.VIT))
        assert fused.source == CamSource.FUSED
        assert fused.values.flatten().tolist() == pytest.approx([0.6, 0.5])

    def test_equal_inputs_return_transformer_map(self):
        maps = torch.rand(1, 2, 3, 3, dtype=torch.float64)
        fused = fuse_cams(CamStack(values=maps, source=CamSource.CNN), CamStack(values=maps.clone(), source=CamSource.VIT))
        assert torch.equal(fused.values, maps)

    def test_lower_bounds_on_random_cells(self):
        gen = torch.Generator().manual_seed(0)
        m_cnn = torch.rand(10_000, generator=gen, dtype=torch.float64)
        m_tran = torch.rand(10_000, generator=gen, dtype=torch.float64)
        fused = combine_sources(m_cnn, m_tran, MaskSource.FUSE)
        assert bool((fused >= m_tran).all())
        assert bool((fused >= (m_cnn + m_tran) / 2).all())

    def test_monotone_in_both_inputs(self):
        gen = torch.Generator().manual_seed(1)
        m_cnn = torch.rand(1000, generator=gen, dtype=torch.float64)
        m_tran = torch.rand(1000, generator=gen, dtype=torch.float64)
        bump = torch.rand(1000, generator=gen, dtype=torch.float64) * 0.1
        base = combine_sources(m_cnn, m_tran, MaskSource.FUSE)
        assert bool((combine_sources(m_cnn + bump, m_tran, MaskSource.FUSE) >= base).all())
        assert bool((combine_sources(m_cnn, m_tran + bump, MaskSource.FUSE) >= base).all())

    def test_other_sources(self):
        m_cnn, m_tran = torch.tensor([0.2, 1.0]), torch.tensor([0.6, 0.0])
        assert combine_sources(m_cnn, m_tran, MaskSource.AVERAGE).tolist() == pytest.approx([0.4, 0.5])
        assert combine_sources(m_cnn, m_tran, MaskSource.MAX).tolist() == pytest.approx([0.6, 1.0])
        assert torch.equal(combine_sources(m_cnn, m_tran, MaskSource.CNN), m_cnn)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            combine_sources(torch.zeros(2, 2), torch.zeros(3, 3), MaskSource.FUSE)

    def test_normalisation_per_class(self):
        cams = torch.tensor([[[1.0, 3.0]], [[5.0, 5.0]]])
        assert normalize_cams(cams).tolist() == [[[0.0, 1.0]], [[0.0, 0.0]]]


class TestMultiscaleSeeds:
    """Scale summation and per-class normalisation."""

    def setup_method(self):
        torch.manual_seed(0)
        self.cfg = tiny_config().model
        self.model = CobraModel(self.cfg).eval()
        self.image = torch.rand(3, 32, 32)

    def test_single_scale_equals_fused_map(self):
        m_cnn, m_tran, _ = scale_maps(self.model, self.image, 32)
        expected = normalize_cams(upsample(combine_sources(m_cnn, m_tran, MaskSource.FUSE), (32, 32)))
        seed = multiscale_seed(self.model, self.image, [1.0], "a")
        assert torch.allclose(seed.values, expected, atol=1e-6)

    def test_negative_evidence_maps_to_zero(self):
        raw = self.model(self.image.unsqueeze(0)).cak.cams.values[0]
        m_cnn, m_tran, _ = scale_maps(self.model, self.image, 32)
        assert bool((m_cnn[raw <= 0] == 0).all())
        assert float(m_cnn.min()) >= 0.0 and float(m_tran.min()) >= 0.0

    def test_duplicated_scale_is_idempotent(self):
        once = multiscale_seed(self.model, self.image, [1.0])
        twice = multiscale_seed(self.model, self.image, [1.0, 1.0])
        assert torch.allclose(once.values, twice.values, atol=1e-6)

    def test_two_scales_match_composition(self):
        total = None
        for size in (16, 32):
            m_cnn, m_tran, _ = scale_maps(self.model, self.image, size)
            resized = upsample(combine_sources(m_cnn, m_tran, MaskSource.FUSE), (32, 32))
            total = resized if total is None else total + resized
        seed = multiscale_seed(self.model, self.image, [0.5, 1.0])
        assert torch.allclose(seed.values, normalize_cams(total), atol=1e-6)

    def test_seed_range_and_positive_mask(self):
        seed = multiscale_seed(self.model, self.image, [0.5, 1.0], positives=[1])
        assert float(seed.values.min()) >= 0.0 and float(seed.values.max()) <= 1.0
        assert torch.count_nonzero(seed.values[0]) == 0
        assert torch.count_nonzero(seed.values[2]) == 0

    def test_inference_is_deterministic(self):
        first = multiscale_bundle(self.model, self.image, [0.75, 1.0], "a", [0, 2])
        second = multiscale_bundle(self.model, self.image, [0.75, 1.0], "a", [0, 2])
        for source in MaskSource:
            assert torch.equal(first.maps[source], second.maps[source])

    def test_cnn_only_model_has_no_transformer_map(self):
        model = CobraModel(self.cfg, BranchMode.CAK).eval()
        bundle = multiscale_bundle(model, self.image, [1.0], "a", [0])
        assert torch.count_nonzero(bundle.maps[MaskSource.TRAN]) == 0
        assert torch.equal(bundle.maps[MaskSource.FUSE], bundle.maps[MaskSource.CNN])
        assert torch.equal(bundle.obj, torch.ones(4, 4))

    def test_rectangular_image_keeps_its_size(self):
        image = torch.rand(3, 32, 48)
        bundle = multiscale_bundle(self.model, image, [0.5, 1.0], "wide", [0, 2])
        for source in MaskSource:
            assert tuple(bundle.maps[source].shape) == (3, 32, 48)
        assert tuple(bundle.obj.shape) == (4, 6)
        m_cnn, m_tran, _ = scale_maps(self.model, image, (32, 48))
        small_cnn, small_tran, _ = scale_maps(self.model, image, (16, 24))
        total = upsample(combine_sources(m_cnn, m_tran, MaskSource.FUSE), (32, 48)) + upsample(
            combine_sources(small_cnn, small_tran, MaskSource.FUSE), (32, 48)
        )
        expected = normalize_cams(total)
        expected[1] = 0
        assert torch.allclose(bundle.maps[MaskSource.FUSE], expected, atol=1e-6)

    def test_sides_round_to_patch_multiples_separately(self):
        image = torch.rand(3, 30, 45)
        bundle = multiscale_bundle(self.model, image, [1.0], "odd", [1])
        assert tuple(bundle.maps[MaskSource.FUSE].shape) == (3, 30, 45)
        assert tuple(bundle.obj.shape) == (4, 6)
        trimap = make_trimap(bundle.seed(), bundle.obj, bundle.positives, ThresholdConfig())
        assert trimap.labels.shape == (30, 45)

    def test_scale_one_pass_is_reused(self, monkeypatch):
        sizes = []

        def counting(model, image, size):
            sizes.append(size)
            return scale_maps(model, image, size)

        monkeypatch.setattr(seeds_module, "scale_maps", counting)
        multiscale_bundle(self.model, self.image, [0.5, 1.0, 1.5], "a", [0])
        assert sizes == [(16, 16), (32, 32), (48, 48)]
        sizes.clear()
        bundle = multiscale_bundle(self.model, self.image, [0.5], "a", [0])
        assert sizes == [(16, 16), (32, 32)]
        assert tuple(bundle.obj.shape) == (4, 4)

    def test_bundle_round_trip(self, tmp_path):
        bundle = multiscale_bundle(self.model, self.image, [1.0], "img00001", [0, 2])
        save_bundle(bundle, tmp_path / "img00001.cbt")
        loaded = load_bundle(tmp_path / "img00001.cbt")
        assert loaded.id == "img00001"
        assert loaded.positives == [0, 2]
        for source in MaskSource:
            assert torch.equal(loaded.maps[source], bundle.maps[source].float())


class TestTrimap:
    """Foreground, background and unknown bands."""

    def setup_method(self):
        self.cfg = ThresholdConfig(bg_weight=0.3, fg_bg_gap=0.5, bg_clip=(0.05, 0.45))
        self.obj = torch.ones(2, 2)
        self.seed = Seed(id="t", values=torch.tensor([[[0.9, 0.1, 0.5]]]))

    def test_background_threshold(self):
        assert background_threshold(self.obj, (1, 3), self.cfg) == pytest.approx(0.3)
        assert background_threshold(torch.zeros(2, 2), (4, 4), self.cfg) == pytest.approx(0.05)

    def test_three_bands(self):
        trimap = make_trimap(self.seed, self.obj, [0], self.cfg)
        assert trimap.labels.tolist() == [[1, 0, UNKNOWN]]

    def test_argmax_class_in_foreground(self):
        seed = Seed(id="t", values=torch.tensor([[[0.85, 0.0]], [[0.95, 0.0]], [[1.0, 1.0]]]))
        trimap = make_trimap(seed, self.obj, [0, 1], self.cfg)
        assert trimap.labels.tolist() == [[2, 0]]

    def test_wider_gap_never_adds_foreground(self):
        seed = Seed(id="r", values=torch.rand(2, 16, 16))
        previous = background = None
        for gap in (0.0, 0.2, 0.4, 0.55):
            cfg = ThresholdConfig(bg_weight=0.3, fg_bg_gap=gap, bg_clip=(0.05, 0.45))
            labels = make_trimap(seed, self.obj, [0, 1], cfg).labels
            foreground = (labels != 0) & (labels != UNKNOWN)
            if previous is not None:
                assert not (foreground & ~previous).any()
                assert np.array_equal(labels == 0, background)
            previous, background = foreground, labels == 0

    def test_needs_positive(self):
        with pytest.raises(ValueError):
            make_trimap(self.seed, self.obj, [], self.cfg)

    def test_seed_to_label(self):
        seed = Seed(id="s", values=torch.tensor([[[0.9, 0.2]], [[0.4, 0.1]]]))
        assert seed_to_label(seed, [0, 1], 0.3).tolist() == [[1, 0]]


class TestAttentionExport:
    """Scale-1 attention, affinity and object attention per image."""

    def setup_method(self):
        torch.manual_seed(0)
        self.cfg = tiny_config().model
        self.model = CobraModel(self.cfg).eval()

    def test_record_shapes_and_row_sums(self):
        tensors, grid = attention_record(self.model, torch.rand(3, 32, 48))
        assert grid == (4, 6)
        assert tuple(tensors["attention"].shape) == (2, 25, 25)
        assert torch.allclose(tensors["attention"].sum(-1), torch.ones(2, 25), atol=1e-5)
        assert tuple(tensors["affinity"].shape) == (24, 24)
        assert tuple(tensors["obj"].shape) == (24,)
        assert float(tensors["obj"].min()) >= 0.0 and float(tensors["obj"].max()) <= 1.0

    def test_round_trip(self, tmp_path):
        tensors, grid = attention_record(self.model, torch.rand(3, 32, 32))
        save_attention(tensors, grid, "img00003", tmp_path / "img00003.cbt")
        loaded, meta = load_attention(tmp_path / "img00003.cbt")
        assert meta == {"id": "img00003", "grid": [4, 4]}
        for name in ("attention", "affinity", "obj"):
            assert torch.allclose(loaded[name], tensors[name].float())

    def test_matches_bundle_object_attention(self):
        image = torch.rand(3, 32, 32)
        tensors, grid = attention_record(self.model, image)
        bundle = multiscale_bundle(self.model, image, [0.5, 1.0], "a", [0])
        assert torch.allclose(tensors["obj"].reshape(grid), bundle.obj, atol=1e-6)

    def test_cnn_only_model_has_no_attention(self):
        with pytest.raises(ConfigError):
            attention_record(CobraModel(self.cfg, BranchMode.CAK), torch.rand(3, 32, 32))

    def test_missing_tensor_rejected(self, tmp_path):
        TensorStore(tmp_path / "a.cbt").write({"obj": torch.zeros(4)}, {"id": "a"})
        with pytest.raises(DatasetError):
            load_attention(tmp_path / "a.cbt")


class TestMaskFiles:
    """Palette PNG export and the CRF hook."""

    def test_round_trip_preserves_labels(self, tmp_path):
        labels = np.array([[0, 1, 2], [255, 2, 0]], dtype=np.uint8)
        export_mask(TriMap(labels=labels), tmp_path / "m.png")
        assert np.array_equal(read_mask(tmp_path / "m.png"), labels)

    def test_rgb_file_rejected(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (2, 2)).save(tmp_path / "rgb.png")
        with pytest.raises(DatasetError):
            read_mask(tmp_path / "rgb.png")

    def test_unconfigured_crf_is_a_pass_through(self, monkeypatch):
        monkeypatch.delenv("COBRA_CRF_CMD", raising=False)
        seed = Seed(id="c", values=torch.rand(2, 4, 4))
        assert crf_hook(seed, np.zeros((4, 4, 3))) is seed

    def test_external_crf_command(self, tmp_path):
        script = tmp_path / "halve.py"
        script.write_text(
            "import sys\n"
            f"sys.path.insert(0, {str(Path(cobra_wsss.__file__).parents[1])!r})\n"
            "from cobra_wsss.core.storage import TensorStore\n"
            "tensors, meta = TensorStore(sys.argv[2]).read()\n"
            "TensorStore(sys.argv[3]).write({'seed': tensors['seed'] * 0.5}, meta)\n",
            encoding="utf-8",
        )
        seed = Seed(id="c", values=torch.rand(2, 4, 4))
        refined = crf_hook(seed, np.zeros((4, 4, 3)), command=f"{sys.executable} {script}")
        assert torch.allclose(refined.values, seed.values * 0.5)

    def test_failing_crf_command(self, tmp_path):
        script = tmp_path / "fail.py"
        script.write_text("import sys\nsys.exit(3)\n", encoding="utf-8")
        seed = Seed(id="c", values=torch.rand(1, 2, 2))
        with pytest.raises(CrfError):
            crf_hook(seed, np.zeros((2, 2, 3)), command=f"{sys.executable} {script}")
