import subprocess
import sys

import numpy as np
import pytest

from cladelab.cli import main
from cladelab.formats import read_ppm, write_mask
from cladelab.norms import SegmentationMask
from cladelab.training import make_dataset


@pytest.fixture
def toy_spec(tmp_path):
    path = tmp_path / "toy.spec"
    path.write_text("preset=toy-64\n")
    return path


def _write_voronoi_mask(path, seed=0, num_classes=5):
    scene = make_dataset(2, 64, num_classes, "voronoi", seed=seed)[0]
    write_mask(path, scene.mask)
    return scene


class TestAnalyzeCommand:
    def test_report_and_aggregate_line(self, tmp_path, capsys):
        spec = tmp_path / "paper.spec"
        spec.write_text("preset=paper-256\n")
        out = tmp_path / "report.csv"
        assert main(["analyze", "--spec", str(spec), "--mode", "spade",
                     "--out", str(out)]) == 0
        text = out.read_text()
        assert text.splitlines()[0] == ("layer,kind,cin,cout,h,w,params,flops,"
                                        "norm_params,norm_flops,ratio_params,ratio_flops")
        printed = capsys.readouterr().out
        agg = [l for l in printed.splitlines() if l.startswith("avg_param_ratio=")]
        assert len(agg) == 1
        fields = dict(kv.split("=") for kv in agg[0].split())
        assert float(fields["avg_param_ratio"].rstrip("%")) == pytest.approx(39.21, abs=0.01)
        assert float(fields["total_params"]) > 9e7

    def test_empty_spec_exits_2(self, tmp_path):
        spec = tmp_path / "empty.spec"
        spec.write_text("")
        assert main(["analyze", "--spec", str(spec), "--mode", "clade",
                     "--out", str(tmp_path / "r.csv")]) == 2

    def test_mac_flag(self, tmp_path, capsys):
        spec = tmp_path / "toy.spec"
        spec.write_text("preset=toy-64\n")
        main(["analyze", "--spec", str(spec), "--mode", "clade",
              "--out", str(tmp_path / "a.csv")])
        base = capsys.readouterr().out
        main(["analyze", "--spec", str(spec), "--mode", "clade",
              "--out", str(tmp_path / "b.csv"), "--mac-as-2flops"])
        doubled = capsys.readouterr().out

        def total_flops(text):
            line = [l for l in text.splitlines() if l.startswith("avg_param_ratio=")][0]
            return int(dict(kv.split("=") for kv in line.split())["total_flops"])

        assert total_flops(doubled) > 1.9 * total_flops(base)


class TestSynthCommand:
    @pytest.fixture
    def trained_dir(self, tmp_path, toy_spec):
        out = tmp_path / "run"
        code = main(["train", "--spec", str(toy_spec), "--mode", "clade",
                     "--layout", "voronoi", "--steps", "8", "--seed", "0",
                     "--out", str(out), "--batch", "2", "--eval-interval", "8",
                     "--dataset-size", "8", "--eval-size", "2"])
        assert code == 0
        return out

    def test_train_writes_checkpoint_and_metrics(self, trained_dir):
        assert (trained_dir / "model.ckpt").exists()
        lines = (trained_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,loss_l1,loss_g,loss_d,pixel_acc,miou"
        assert len(lines) >= 2

    def test_synth_deterministic_bytes(self, tmp_path, trained_dir):
        mask_path = tmp_path / "m.mask"
        _write_voronoi_mask(mask_path, seed=3)
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        for out in (a, b):
            assert main(["synth", "--ckpt", str(trained_dir / "model.ckpt"),
                         "--mask", str(mask_path), "--noise-seed", "7",
                         "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_synth_noise_seed_changes_output(self, tmp_path, trained_dir):
        mask_path = tmp_path / "m.mask"
        _write_voronoi_mask(mask_path, seed=3)
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        main(["synth", "--ckpt", str(trained_dir / "model.ckpt"), "--mask",
              str(mask_path), "--noise-seed", "1", "--out", str(a)])
        main(["synth", "--ckpt", str(trained_dir / "model.ckpt"), "--mask",
              str(mask_path), "--noise-seed", "2", "--out", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_bad_checkpoint_exits_3(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        mask_path = tmp_path / "m.mask"
        _write_voronoi_mask(mask_path)
        assert main(["synth", "--ckpt", str(bad), "--mask", str(mask_path),
                     "--out", str(tmp_path / "o.ppm")]) == 3

    def test_resolution_mismatch_exits_4(self, tmp_path, trained_dir):
        mask_path = tmp_path / "small.mask"
        write_mask(mask_path, SegmentationMask(np.zeros((32, 32), np.int32), 5))
        assert main(["synth", "--ckpt", str(trained_dir / "model.ckpt"),
                     "--mask", str(mask_path), "--out", str(tmp_path / "o.ppm")]) == 4

    def test_dump_maps_clade_spread_zero(self, tmp_path, trained_dir):
        mask_path = tmp_path / "m.mask"
        _write_voronoi_mask(mask_path, seed=4)
        out = tmp_path / "maps"
        assert main(["dump-maps", "--ckpt", str(trained_dir / "model.ckpt"),
                     "--mask", str(mask_path), "--out", str(out)]) == 0
        lines = (out / "spread.csv").read_text().strip().splitlines()
        assert lines[0] == "site,class,mean,spread"
        assert len(lines) > 1
        for line in lines[1:]:
            assert line.rsplit(",", 1)[1] == "0"
        assert any(p.suffix == ".pgm" for p in out.iterdir())


class TestTrainSynthEndToEnd:
    def test_stripes_held_out_accuracy(self, tmp_path):
        # train, then synthesize a held-out stripes mask and judge it with
        # the oracle segmenter
        from cladelab.training import oracle_segment, palette_for, pixel_accuracy

        spec_path = tmp_path / "toy2.spec"
        spec_path.write_text("preset=toy-64\nnum_classes=2\n")
        run = tmp_path / "run"
        assert main(["train", "--spec", str(spec_path), "--mode", "clade",
                     "--layout", "stripes", "--steps", "500", "--seed", "0",
                     "--batch", "2", "--out", str(run), "--dataset-size", "64",
                     "--eval-size", "8", "--eval-interval", "250"]) == 0
        held_out = make_dataset(4, 64, 2, "stripes", seed=123)[0]
        mask_path = tmp_path / "held.mask"
        write_mask(mask_path, held_out.mask)
        img_path = tmp_path / "held.ppm"
        assert main(["synth", "--ckpt", str(run / "model.ckpt"),
                     "--mask", str(mask_path), "--noise-seed", "3",
                     "--out", str(img_path)]) == 0
        pred = oracle_segment(read_ppm(img_path), palette_for(2))
        acc = pixel_accuracy(pred, held_out.mask.labels)
        assert acc >= 0.85, acc


class TestBenchCommand:
    def test_bench_reports_median(self, capsys):
        assert main(["bench", "--mode", "clade", "--cin", "8", "--cout", "8",
                     "--hw", "16", "--nc", "4", "--cm", "8",
                     "--repeats", "3"]) == 0
        out = capsys.readouterr().out
        assert "median=" in out and "iqr=" in out

    def test_single_repeat_iqr_na(self, capsys):
        main(["bench", "--mode", "clade", "--cin", "8", "--cout", "8",
              "--hw", "16", "--nc", "4", "--cm", "8", "--repeats", "1"])
        assert "iqr=n/a" in capsys.readouterr().out


class TestConsoleEntry:
    def test_module_invocation(self, tmp_path):
        spec = tmp_path / "toy.spec"
        spec.write_text("preset=toy-64\n")
        proc = subprocess.run(
            [sys.executable, "-m", "cladelab.cli", "analyze", "--spec", str(spec),
             "--mode", "clade", "--out", str(tmp_path / "r.csv")],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert "avg_param_ratio=" in proc.stdout

    def test_threads_env_respected(self, tmp_path):
        spec = tmp_path / "toy.spec"
        spec.write_text("preset=toy-64\n")
        proc = subprocess.run(
            [sys.executable, "-c",
             "import os; os.environ['CLADELAB_THREADS']='1';"
             "import cladelab.cli as c; import sys;"
             "sys.exit(c.main(['analyze','--spec',sys.argv[1],'--mode','clade',"
             "'--out',sys.argv[2]]))",
             str(spec), str(tmp_path / "r.csv")],
            capture_output=True, text=True)
        assert proc.returncode == 0
