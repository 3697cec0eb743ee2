import json
import math

import numpy as np
import pytest

from icsinet import cli
from icsinet.checkpoint import load_checkpoint
from icsinet.config import RunConfig
from icsinet.data import annotation_dict, write_png
from icsinet.errors import ConfigError, InputError
from icsinet.model import ModelConfig
from icsinet.pipeline import (
    BatchStream,
    cmd_agreement,
    cmd_eval,
    cmd_infer,
    rle_decode,
    rle_encode,
    train,
    worker_count,
)


def tiny_cfg(root, steps=3):
    cfg = RunConfig()
    cfg.model = ModelConfig(input_size=32, depth=2, channels=[2, 4, 8], seed=1)
    cfg.train.batch_size = 2
    cfg.train.max_steps = steps
    cfg.train.eval_every = 2
    cfg.data.train_dir = str(root / "train")
    cfg.data.val_dir = str(root / "val")
    return cfg


def write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(cfg.to_json())
    return p


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    res = train(tiny_cfg(tiny_dataset), out)
    return res


def square(x0, y0, s):
    return [[x0, y0], [x0 + s, y0], [x0 + s, y0 + s], [x0, y0 + s]]


def write_operator_file(d, frame, op, rnd, shift, tip):
    ann = annotation_dict(frame, {"oolemma": square(1 + shift, 1, 4), "pipette": square(0, 6, 2)}, tip, image_size=(10, 10), operator=op, round=rnd)
    (d / f"{frame}_{op}_{rnd}.json").write_text(json.dumps(ann))


class TestHelpers:
    def test_rle_round_trip(self, rng):
        for _ in range(20):
            m = (rng.random((7, 9)) < rng.random()).astype(np.uint8)
            np.testing.assert_array_equal(rle_decode(rle_encode(m)), m)
        assert rle_encode(np.ones((2, 2)))["counts"] == [0, 4]

    def test_batch_stream_epochs(self):
        s = BatchStream(5, 2, seed=3)
        seen = [i for step in range(5) for i in s.indices(step)]
        assert sorted(seen[:5]) == list(range(5)) and sorted(seen[5:]) == list(range(5))
        assert BatchStream(5, 2, seed=3).indices(4) == s.indices(4)

    def test_worker_count(self, monkeypatch):
        monkeypatch.setenv("ICSINET_THREADS", "2")
        assert worker_count() == 2
        monkeypatch.setenv("ICSINET_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_count()


class TestTrain:
    def test_zero_steps(self, tiny_dataset, tmp_path):
        res = train(tiny_cfg(tiny_dataset, steps=0), tmp_path)
        assert res.steps == 0 and res.best_step is None
        assert (tmp_path / "last.ckpt").exists()
        assert (tmp_path / "loss_log.csv").read_bytes().decode().count("\r\n") == 1  # header only
        assert (tmp_path / "val_metrics.csv").read_bytes().decode().count("\r\n") == 1
        assert load_checkpoint(tmp_path / "last.ckpt").step == 0

    def test_outputs(self, tiny_run):
        out = tiny_run.out_dir
        for name in ("config.json", "loss_log.csv", "val_metrics.csv", "best.ckpt", "last.ckpt"):
            assert (out / name).exists(), name
        loss = (out / "loss_log.csv").read_bytes().decode().strip().split("\r\n")
        assert loss[0] == "step,epoch,lr,seg,euc,js,total" and len(loss) == 4
        val = (out / "val_metrics.csv").read_bytes().decode().strip().split("\r\n")
        assert [r.split(",")[0] for r in val[1:]] == ["2", "3"]
        assert load_checkpoint(out / "last.ckpt").step == 3

    def test_deterministic(self, tiny_dataset, tiny_run, tmp_path):
        train(tiny_cfg(tiny_dataset), tmp_path)
        for name in ("loss_log.csv", "val_metrics.csv", "last.ckpt"):
            assert (tmp_path / name).read_bytes() == (tiny_run.out_dir / name).read_bytes(), name

    def test_missing_data_dir(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(tiny_dataset)
        cfg.data.val_dir = None
        with pytest.raises(ConfigError, match="val_dir"):
            train(cfg, tmp_path)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_dumps_batch(self, tiny_dataset, tmp_path):
        cfg = tiny_cfg(tiny_dataset)
        cfg.optim.lr = 1e30
        with pytest.raises(FloatingPointError, match="sample ids"):
            train(cfg, tmp_path)
        dump = json.loads((tmp_path / "nan_dump.json").read_text())
        assert len(dump["sample_ids"]) == 2


class TestEval:
    def test_round_trip_and_files(self, tiny_run, tiny_dataset, tmp_path):
        ck = tiny_run.out_dir / "last.ckpt"
        a = cmd_eval(ck, tiny_dataset / "val", tmp_path / "a")
        copy = tmp_path / "copy.ckpt"
        copy.write_bytes(ck.read_bytes())
        b = cmd_eval(copy, tiny_dataset / "val", tmp_path / "b")
        for name in ("report.json", "report.txt", "per_frame.csv", "tip_histogram.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert a.summary() == b.summary()
        timing = json.loads((tmp_path / "a" / "timing.json").read_text())
        assert timing["mean_latency_ms"] > 0
        assert "oolemma" in (tmp_path / "a" / "report.txt").read_text()

    def test_eval_leaves_model_state(self, tiny_run, tiny_dataset, tmp_path):
        ck = tiny_run.out_dir / "last.ckpt"
        before = ck.read_bytes()
        cmd_eval(ck, tiny_dataset / "val", tmp_path)
        assert ck.read_bytes() == before

    def test_missing_annotations_skipped(self, tiny_run, tiny_dataset, tmp_path):
        data = tmp_path / "data"
        data.mkdir()
        for p in (tiny_dataset / "val").glob("00000[01].*"):
            (data / p.name).write_bytes(p.read_bytes())
        (data / "000001.json").unlink()
        cmd_eval(tiny_run.out_dir / "last.ckpt", data, tmp_path / "out")
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["frames"] == 1 and report["skipped_without_annotation"] == ["000001"]


class TestInfer:
    def test_deterministic_and_black(self, tiny_run, tiny_dataset, tmp_path):
        ck = tiny_run.out_dir / "last.ckpt"
        img = tiny_dataset / "val" / "000000.png"
        cmd_infer(ck, img, tmp_path / "a")
        cmd_infer(ck, img, tmp_path / "b")
        assert (tmp_path / "a" / "000000.json").read_bytes() == (tmp_path / "b" / "000000.json").read_bytes()
        black = tmp_path / "black.png"
        write_png(black, np.zeros((40, 50), np.uint8))
        done, failed = cmd_infer(ck, black, tmp_path / "c")
        assert done == ["black"] and not failed
        res = json.loads((tmp_path / "c" / "black.json").read_text())
        assert all(-1 <= v <= 1 for v in res["tip_normalized"])
        assert res["original_size"] == [50, 40]
        assert rle_decode(res["masks"]["oolemma"]).shape == (32, 32)

    def test_bad_file_continues(self, tiny_run, tiny_dataset, tmp_path):
        src = tmp_path / "in"
        src.mkdir()
        (src / "broken.png").write_bytes(b"not a png")
        (src / "good.png").write_bytes((tiny_dataset / "val" / "000001.png").read_bytes())
        done, failed = cmd_infer(tiny_run.out_dir / "last.ckpt", src, tmp_path / "out")
        assert done == ["good"] and len(failed) == 1
        assert (tmp_path / "out" / "good_overlay.png").exists()


class TestAgreementCommand:
    def test_two_operators_three_rounds(self, tmp_path):
        d = tmp_path / "ann"
        d.mkdir()
        for rnd in range(3):
            write_operator_file(d, "f0", "A", rnd, 0, (2.0, 2.0))
            write_operator_file(d, "f0", "B", rnd, rnd % 2, (2.0, 2.0 + rnd))
        reports, p = cmd_agreement(d, "both", tmp_path / "out")
        # inter: per round A vs B; shifts 0,1,0 -> IoU 1, 12/20, 1
        assert sorted(reports["inter"].iou_values["oolemma"]) == pytest.approx([0.6, 1.0, 1.0])
        assert reports["inter"].tip_mean == pytest.approx(1.0)
        text = (tmp_path / "out" / "agreement.txt").read_text()
        assert "Interoperator" in text and "Intraoperator" in text
        assert "[" in text and "Welch" in text
        assert p["pipette_iou"] == "degenerate"
        assert "statistic,mode,n,mean,std_population,p_welch" in (tmp_path / "out" / "agreement.csv").read_text()

    def test_single_operator_single_round(self, tmp_path):
        d = tmp_path / "ann"
        d.mkdir()
        write_operator_file(d, "f0", "A", 0, 0, (1.0, 1.0))
        with pytest.raises(InputError, match="2 operators"):
            cmd_agreement(d, "inter", tmp_path / "out")


class TestCli:
    def test_gen_data(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--count", "3", "--out", str(tmp_path / "d"), "--seed", "2"]) == 0
        assert len(list((tmp_path / "d").glob("*.png"))) == 3

    def test_train_eval_infer(self, tiny_dataset, tmp_path, capsys):
        cfgp = write_cfg(tmp_path, tiny_cfg(tiny_dataset, steps=2))
        assert cli.main(["train", "--config", str(cfgp), "--out", str(tmp_path / "run")]) == 0
        ck = str(tmp_path / "run" / "best.ckpt")
        assert cli.main(["eval", "--ckpt", ck, "--data", str(tiny_dataset / "val"), "--out", str(tmp_path / "ev")]) == 0
        out = capsys.readouterr().out
        assert "latency" in out and "ms" in out
        assert cli.main(["infer", "--ckpt", ck, "--input", str(tiny_dataset / "val"), "--out", str(tmp_path / "inf")]) == 0

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"train": {"batch_size": 0}}')
        assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
        assert "batch_size" in capsys.readouterr().err
        corrupt = tmp_path / "x.ckpt"
        corrupt.write_bytes(b"ICSN\x01")
        assert cli.main(["eval", "--ckpt", str(corrupt), "--data", str(tmp_path), "--out", str(tmp_path / "e")]) == 2
        with pytest.raises(SystemExit):
            cli.main(["agreement", "--annotations", str(tmp_path), "--mode", "sideways", "--out", str(tmp_path)])

    def test_gradcheck(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        assert "checks passed" in capsys.readouterr().out
