"""
Tests for the command-line interface and its exit codes.
"""

import json
import sys
from pathlib import Path

import numpy as np

import cobra_wsss
from cobra_wsss.cli.commands import parse_list, run
from cobra_wsss.core.models import LossReport
from cobra_wsss.core.seeds import export_mask, load_attention, read_mask
from cobra_wsss.core.settings import SNAPSHOT_NAME
from cobra_wsss.services import training_service as training_module
from cobra_wsss.utils.formatters import Formatters

TINY_MODEL = [
    "--set", "model.cnn_channels=[4,8,8,8]",
    "--set", "model.embed_dim=8",
    "--set", "model.depth=2",
    "--set", "model.num_heads=2",
    "--set", "model.proj_dim=8",
    "--set", "train.epochs=1",
    "--set", "train.batch_size=4",
    "--set", 'train.selection={"k_sap_pos": 4, "k_sap_neg": 4, "k_cap_pos": 3, "k_cap_neg": 4}',
    "--set", "inference.scales=[1.0]",
]


class TestExitCodes:
    """0 on success, 1 on usage errors, 2 on runtime failures."""

    def test_unknown_flag(self, capsys):
        assert run(["eval", "--bogus"]) == 1
        assert "bogus" in capsys.readouterr().err

    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_missing_directory_is_a_runtime_failure(self, tmp_path):
        assert run(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g")]) == 2

    def test_unknown_override_key(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path / "d"), "--n", "2", "--image-size", "32"]) == 0
        code = run(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--set", "train.nope=1"])
        assert code == 1

    def test_invalid_dataset_options(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path / "d"), "--shapes", "9"]) == 2

    def test_parse_list(self):
        assert parse_list("0.5,1.0") == [0.5, 1.0]
        assert parse_list("1,2", int) == [1, 2]
        assert parse_list("") is None


class TestCommands:
    """Individual commands."""

    def test_eval_identical_directories(self, tmp_path, capsys):
        for name in ("pred", "gt"):
            export_mask(np.array([[0, 1], [2, 255]], dtype=np.uint8), tmp_path / name / "a.png")
        code = run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--out", str(tmp_path / "out")])
        assert code == 0
        payload = json.loads((tmp_path / "out" / "miou_table.json").read_text(encoding="utf-8"))
        assert payload["mIoU"] == 1.0
        assert (tmp_path / "out" / SNAPSHOT_NAME).exists()
        assert "mIoU" in capsys.readouterr().out

    def test_gradcheck(self, tmp_path):
        code = run(["gradcheck", "--tau", "0.1", "--instances", "3", "--out", str(tmp_path)])
        assert code == 0
        errors = json.loads((tmp_path / "gradcheck.json").read_text(encoding="utf-8"))
        assert set(errors) == {"cls", "cam", "cap", "sap"}
        assert max(errors.values()) <= 1e-3

    def test_synth_writes_dataset(self, tmp_path):
        out = tmp_path / "data"
        assert run(["synth", "--out", str(out), "--n", "4", "--image-size", "32", "--classes", "2"]) == 0
        assert len(list((out / "images").glob("*.png"))) == 4
        assert json.loads((out / "meta.json").read_text(encoding="utf-8"))["num_classes"] == 2
        assert (out / SNAPSHOT_NAME).exists()


class TestPipeline:
    """synth -> train -> seed -> mask -> eval -> report."""

    def test_end_to_end(self, tmp_path):
        data, run_dir, seeds = tmp_path / "data", tmp_path / "train", tmp_path / "seeds"
        assert run(["synth", "--out", str(data), "--n", "6", "--image-size", "32", "--seed", "3"]) == 0
        assert run(["train", "--data", str(data), "--out", str(run_dir), *TINY_MODEL]) == 0
        assert (run_dir / "metrics.csv").exists()

        checkpoint = run_dir / "checkpoint_last.cbt"
        assert run(["seed", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(seeds), "--scales", "0.5,1.0"]) == 0
        assert len(list((seeds / "seeds").glob("*.cbt"))) == 6
        snapshot = json.loads((seeds / SNAPSHOT_NAME).read_text(encoding="utf-8"))
        assert snapshot["inference"]["scales"] == [0.5, 1.0]

        assert run(["mask", "--run", str(seeds), "--source", "fuse"]) == 0
        masks = sorted((seeds / "masks").glob("*.png"))
        assert len(masks) == 6
        assert read_mask(masks[0]).shape == (32, 32)

        assert run(["eval", "--pred", str(seeds / "masks"), "--gt", str(data / "masks"), "--out", str(seeds / "eval")]) == 0
        assert run(["report", "--run", str(seeds)]) == 0
        assert len(list((seeds / "report" / "panels").glob("*.html"))) == 6
        report_table = json.loads((seeds / "report" / "miou_table.json").read_text(encoding="utf-8"))
        eval_table = json.loads((seeds / "eval" / "miou_table.json").read_text(encoding="utf-8"))
        assert report_table == eval_table

    def test_seed_with_missing_checkpoint(self, tmp_path):
        assert run(["synth", "--out", str(tmp_path / "d"), "--n", "2", "--image-size", "32"]) == 0
        code = run(["seed", "--checkpoint", str(tmp_path / "none.cbt"), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "s")])
        assert code == 2


class TestRunOptions:
    """Training progress, single checkpoint load, attention export and the CRF flag."""

    def _trained(self, tmp_path):
        data, run_dir = tmp_path / "data", tmp_path / "train"
        assert run(["synth", "--out", str(data), "--n", "4", "--image-size", "32", "--seed", "5"]) == 0
        assert run(["train", "--data", str(data), "--out", str(run_dir), *TINY_MODEL]) == 0
        return data, run_dir / "checkpoint_last.cbt"

    def _seeded(self, tmp_path):
        data, checkpoint = self._trained(tmp_path)
        seeds = tmp_path / "seeds"
        assert run(["seed", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(seeds)]) == 0
        return seeds

    def test_train_reports_epoch_losses(self, tmp_path, monkeypatch):
        reports = []
        original = Formatters.format_loss_report

        def spy(report):
            reports.append(report)
            return original(report)

        monkeypatch.setattr(Formatters, "format_loss_report", staticmethod(spy))
        self._trained(tmp_path)
        assert len(reports) == 1
        assert isinstance(reports[0], LossReport)
        assert "total=" in original(reports[0])

    def test_seed_loads_checkpoint_once(self, tmp_path, monkeypatch):
        data, checkpoint = self._trained(tmp_path)
        calls = []
        original = training_module.load_checkpoint

        def counting(path):
            calls.append(path)
            return original(path)

        monkeypatch.setattr(training_module, "load_checkpoint", counting)
        code = run(["seed", "--checkpoint", str(checkpoint), "--data", str(data), "--out", str(tmp_path / "s")])
        assert code == 0
        assert len(calls) == 1

    def test_seed_exports_attention(self, tmp_path):
        data, checkpoint = self._trained(tmp_path)
        attention = tmp_path / "attention"
        code = run(
            [
                "seed", "--checkpoint", str(checkpoint), "--data", str(data),
                "--out", str(tmp_path / "s"), "--export-attention", str(attention),
            ]
        )
        assert code == 0
        files = sorted(attention.glob("*.cbt"))
        assert [f.stem for f in files] == [f"img{i:05d}" for i in range(4)]
        tensors, meta = load_attention(files[0])
        assert meta == {"id": "img00000", "grid": [4, 4]}
        assert tuple(tensors["attention"].shape) == (2, 17, 17)
        assert tuple(tensors["affinity"].shape) == (16, 16)
        assert tuple(tensors["obj"].shape) == (16,)

    def test_mask_crf_flag(self, tmp_path):
        seeds = self._seeded(tmp_path)
        log = tmp_path / "crf.log"
        script = tmp_path / "erase.py"
        script.write_text(
            "import sys\n"
            f"sys.path.insert(0, {str(Path(cobra_wsss.__file__).parents[1])!r})\n"
            "from cobra_wsss.core.storage import TensorStore\n"
            "tensors, meta = TensorStore(sys.argv[2]).read()\n"
            "TensorStore(sys.argv[3]).write({'seed': tensors['seed'] * 0}, meta)\n"
            f"open({str(log)!r}, 'a').write(meta['id'] + '\\n')\n",
            encoding="utf-8",
        )
        assert run(["mask", "--run", str(seeds), "--crf-cmd", f"{sys.executable} {script}"]) == 0
        assert sorted(log.read_text(encoding="utf-8").split()) == [f"img{i:05d}" for i in range(4)]
        for path in sorted((seeds / "masks").glob("*.png")):
            assert not read_mask(path).any()

    def test_mask_without_crf_keeps_foreground(self, tmp_path, monkeypatch):
        monkeypatch.delenv("COBRA_CRF_CMD", raising=False)
        seeds = self._seeded(tmp_path)
        assert run(["mask", "--run", str(seeds)]) == 0
        masks = [read_mask(path) for path in sorted((seeds / "masks").glob("*.png"))]
        assert len(masks) == 4
        assert all(((mask > 0) & (mask != 255)).any() for mask in masks)

    def test_crf_flag_reads_environment(self, tmp_path, monkeypatch):
        seeds = self._seeded(tmp_path)
        script = tmp_path / "fail.py"
        script.write_text("import sys\nsys.exit(3)\n", encoding="utf-8")
        monkeypatch.setenv("COBRA_CRF_CMD", f"{sys.executable} {script}")
        assert run(["mask", "--run", str(seeds)]) == 2
