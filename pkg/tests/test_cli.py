import hashlib
import json

import numpy as np
import pytest

from anyface_lab import cli
from anyface_lab.dataset import load_dataset, manifest_hash
from anyface_lab.encoders import EncoderPair, retrieval_accuracy
from anyface_lab.errors import DivergenceError
from anyface_lab.ppm import read_ppm, write_ppm
from anyface_lab.verify import SuiteResult


def run(*argv):
    return cli.main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    assert run("gen-data", "--count", 520, "--out", root / "data") == 0
    assert run("gen-data", "--count", 40, "--first-id", 5000, "--out", root / "evald") == 0
    assert run("pretrain-encoders", "--data", root / "data", "--out", root / "enc") == 0
    cfg = {"dataset": str(root / "data"), "encoders": str(root / "enc" / "encoders.tns"),
           "out_dir": str(root / "run"), "steps": 30, "checkpoint_interval": 0}
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert run("train", "--config", root / "cfg.json") == 0
    return root


@pytest.fixture(scope="module")
def ckpt(pipeline):
    return pipeline / "run" / "model_step30.ckpt"


class TestGenData:
    def test_count_and_determinism(self, tmp_path):
        assert run("gen-data", "--count", 64, "--out", tmp_path / "a") == 0
        assert run("gen-data", "--count", 64, "--out", tmp_path / "b") == 0
        assert len(list((tmp_path / "a").glob("sample_*.tns"))) == 64
        assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")

    def test_zero_count(self, tmp_path, capsys):
        assert run("gen-data", "--count", 0, "--out", tmp_path / "a") == 2
        assert "count must be positive" in capsys.readouterr().err

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        assert run("gen-data", "--count", 2, "--out", tmp_path / "file" / "sub") == 2


class TestPretrain:
    def test_missing_data(self, tmp_path):
        assert run("pretrain-encoders", "--data", tmp_path / "nope", "--out", tmp_path) == 2

    def test_metadata_accuracy_reproducible(self, pipeline):
        meta = json.loads((pipeline / "enc" / "encoders.json").read_text())
        world, samples = load_dataset(pipeline / "data")
        enc = EncoderPair.load(pipeline / "enc" / "encoders.tns", world)
        held = [s for s in samples if s.id in set(meta["held_out_ids"])]
        assert abs(retrieval_accuracy(enc, held, criterion="consistent") - meta["accuracy"]) <= 1e-9

    def test_shortfall_exit_code(self, pipeline, tmp_path):
        assert run("pretrain-encoders", "--data", pipeline / "data", "--out", tmp_path, "--epochs", 0) == 3


class TestTrain:
    def test_losses_csv(self, pipeline):
        lines = (pipeline / "run" / "losses.csv").read_text().splitlines()
        assert lines[0] == "step,L_S,L_T,dt,cmt_t,clip,mse,cmt_i,rec"
        assert len(lines) - 1 == 30

    def test_unknown_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"lr": 0.1}')
        assert run("train", "--config", tmp_path / "c.json") == 2
        assert "lr" in capsys.readouterr().err

    def test_missing_artifacts(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"dataset": str(tmp_path / "none")}))
        assert run("train", "--config", tmp_path / "c.json") == 2

    def test_divergence_exit_code(self, pipeline, tmp_path, monkeypatch):
        def boom(self, steps=None, callback=None):
            raise DivergenceError("synthesis loss is not finite at step 7", 7)

        monkeypatch.setattr(cli.Trainer, "train", boom)
        assert run("train", "--config", pipeline / "cfg.json", "--out", tmp_path) == 4


class TestSynth:
    @pytest.mark.parametrize("count", [1, 5])
    def test_arity(self, ckpt, tmp_path, count):
        caps = [a for i in range(count) for a in ("--caption", f"{4 * i},{4 * i + 9}")]
        assert run("synth", "--checkpoint", ckpt, *caps, "--out", tmp_path / "o.ppm") == 0
        assert read_ppm(tmp_path / "o.ppm").shape == (16, 16, 3)
        assert (tmp_path / "o.tns").exists()

    def test_eleven_captions(self, ckpt, tmp_path):
        caps = [a for _ in range(11) for a in ("--caption", "1")]
        assert run("synth", "--checkpoint", ckpt, *caps, "--out", tmp_path / "o.ppm") == 2

    def test_byte_identical(self, ckpt, tmp_path):
        for name in ("a", "b"):
            assert run("synth", "--checkpoint", ckpt, "--caption", "smiling bearded", "--style-seed", 4,
                       "--out", tmp_path / f"{name}.ppm") == 0
        assert sha(tmp_path / "a.ppm") == sha(tmp_path / "b.ppm")

    def test_unknown_word(self, ckpt, tmp_path):
        assert run("synth", "--checkpoint", ckpt, "--caption", "purple", "--out", tmp_path / "o.ppm") == 2


class TestManipulate:
    @pytest.fixture
    def source(self, pipeline, tmp_path):
        _, samples = load_dataset(pipeline / "evald")
        # 8-bit bytes 0 and 255 sit on the atanh singularity
        img = next(s.image for s in samples if np.abs(s.image).max() < 254 / 255)
        return write_ppm(tmp_path / "src.ppm", img)

    def test_zero_split_within_one_level(self, ckpt, source, tmp_path):
        assert run("manipulate", "--checkpoint", ckpt, "--source", source, "--caption", "2",
                   "--m-split", 0, "--out", tmp_path / "m.ppm") == 0
        a = np.frombuffer(source.read_bytes()[-768:], np.uint8).astype(int)
        b = np.frombuffer((tmp_path / "m.ppm").read_bytes()[-768:], np.uint8).astype(int)
        assert np.abs(a - b).max() <= 1

    def test_dataset_sample_source(self, ckpt, pipeline, tmp_path):
        src = pipeline / "evald" / "sample_5000.tns"
        assert run("manipulate", "--checkpoint", ckpt, "--source", src, "--caption", "2",
                   "--m-split", 0, "--out", tmp_path / "m.ppm") == 0
        _, samples = load_dataset(pipeline / "evald")
        np.testing.assert_array_equal(read_ppm(tmp_path / "m.ppm"), read_ppm(write_ppm(tmp_path / "s.ppm", samples[0].image)))

    def test_latent_only_source(self, ckpt, tmp_path):
        from anyface_lab import tns

        tns.write_blocks(tmp_path / "w.tns", [np.zeros((8, 32))])
        assert run("manipulate", "--checkpoint", ckpt, "--source", tmp_path / "w.tns", "--caption", "2",
                   "--m-split", 0, "--out", tmp_path / "m.ppm") == 2

    def test_sweep(self, ckpt, source, tmp_path):
        assert run("manipulate", "--checkpoint", ckpt, "--source", source, "--caption", "2",
                   "--sweep", "--out", tmp_path / "sweep") == 0
        assert len(list((tmp_path / "sweep").glob("*.ppm"))) == 9

    def test_out_of_range_split(self, ckpt, source, tmp_path):
        assert run("manipulate", "--checkpoint", ckpt, "--source", source, "--caption", "2",
                   "--m-split", 9, "--out", tmp_path / "m.ppm") == 2

    def test_white_pixel_not_invertible(self, ckpt, tmp_path):
        img = np.zeros((16, 16, 3))
        img[0, 0, 0] = 1.0
        src = write_ppm(tmp_path / "white.ppm", img)
        assert run("manipulate", "--checkpoint", ckpt, "--source", src, "--caption", "2",
                   "--m-split", 3, "--out", tmp_path / "m.ppm") == 5


class TestEval:
    def test_report_schema(self, ckpt, pipeline, tmp_path):
        assert run("eval", "--checkpoint", ckpt, "--data", pipeline / "evald", "--report", tmp_path / "r.json") == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert {"fid", "rfrr", "diversity"} <= set(report)
        assert 0.0 <= report["rfrr"] <= 1.0

    def test_too_few_samples(self, ckpt, pipeline, tmp_path):
        assert run("eval", "--checkpoint", ckpt, "--data", pipeline / "evald", "--limit", 10,
                   "--report", tmp_path / "r.json") == 2


class TestAblate:
    def test_small_run(self, pipeline, tmp_path):
        spec = {"base": {"dataset": str(pipeline / "data"), "encoders": str(pipeline / "enc" / "encoders.tns"),
                         "steps": 4},
                "variants": {"full": {}, "pairwise": {"latent_loss": "pair"}},
                "seeds": [0], "eval_data": str(pipeline / "evald"), "curve_every": 2}
        (tmp_path / "abl.json").write_text(json.dumps(spec))
        assert run("ablate", "--configs", tmp_path / "abl.json", "--out", tmp_path / "out") == 0
        assert (tmp_path / "out" / "report.json").exists()
        assert (tmp_path / "out" / "curves.csv").read_text().count("\n") == 1 + 2 * 3


class TestGradcheck:
    def test_quick_pass(self, capsys):
        assert run("gradcheck", "--points", 2) == 0
        assert "dt_loss" in capsys.readouterr().out

    def test_failure_lists_operation(self, monkeypatch, capsys):
        import anyface_lab.verify as verify

        monkeypatch.setattr(verify, "run_suite", lambda **kw: [SuiteResult("decode", 3e-3, 1, 0, 0.0)])
        assert run("gradcheck") == 6
        assert "decode" in capsys.readouterr().err


class TestVocab:
    def test_list(self, capsys):
        assert run("list-vocab") == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 48 and lines[2] == "2\tsmiling"

    def test_flag(self, capsys):
        assert run("--list-vocab") == 0
        assert len(capsys.readouterr().out.splitlines()) == 48

    def test_no_command(self):
        assert run() == 2
