"""End-to-end command-line pipeline tests."""

import re

import numpy as np
import pytest

from dfmrec import load_dfm, load_fm, parse_libfm, serialize_libfm
from dfmrec.cli import run

from synth import planted_ranking


@pytest.fixture()
def workdir(tmp_path):
    d, _ = planted_ranking(n_users=8, n_items=10, n_side=4, side_per_item=2,
                           k=2, sigma=0.2, seed=5)
    full = tmp_path / "ratings.libfm"
    full.write_text(serialize_libfm(d))
    return tmp_path, d


def _fields(d):
    uo, uw = d.user_field
    io_, iw = d.item_field
    return f"{uo}:{uw}", f"{io_}:{iw}"


class TestSplit:
    def test_writes_partition(self, workdir, capsys):
        tmp, d = workdir
        uf, itf = _fields(d)
        code = run([
            "split", "--input", str(tmp / "ratings.libfm"),
            "--train-out", str(tmp / "train.libfm"),
            "--test-out", str(tmp / "test.libfm"),
            "--user-field", uf, "--item-field", itf,
            "--split-fraction", "0.5", "--seed", "3",
        ])
        assert code == 0
        train = parse_libfm((tmp / "train.libfm").read_text())
        test = parse_libfm((tmp / "test.libfm").read_text())
        assert len(train) + len(test) == len(d)
        assert train.n_features == d.n_features


class TestTrainPredict:
    def _split(self, tmp, d):
        uf, itf = _fields(d)
        run([
            "split", "--input", str(tmp / "ratings.libfm"),
            "--train-out", str(tmp / "train.libfm"),
            "--test-out", str(tmp / "test.libfm"),
            "--user-field", uf, "--item-field", itf, "--seed", "1",
        ])

    def test_full_pipeline(self, workdir, capsys):
        tmp, d = workdir
        self._split(tmp, d)
        uf, itf = _fields(d)

        code = run([
            "train-fm", "--input", str(tmp / "train.libfm"),
            "--out", str(tmp / "m.fm"), "--k", "2", "--alpha", "1e-2",
            "--seed", "7", "--iters", "10",
        ])
        assert code == 0
        assert load_fm(tmp / "m.fm").k == 2

        code = run([
            "train-dfm", "--input", str(tmp / "train.libfm"),
            "--out", str(tmp / "m.dfm"), "--k", "2", "--alpha", "1e-2",
            "--beta", "1e-2", "--seed", "7", "--iters", "8",
            "--init-iters", "1",
        ])
        assert code == 0
        assert load_dfm(tmp / "m.dfm").k == 2

        # predict: one score per input line, in order
        code = run([
            "predict", "--model", str(tmp / "m.dfm"),
            "--input", str(tmp / "test.libfm"),
            "--out", str(tmp / "preds.txt"),
        ])
        assert code == 0
        test = parse_libfm((tmp / "test.libfm").read_text())
        lines = (tmp / "preds.txt").read_text().strip().split("\n")
        assert len(lines) == len(test)
        float(lines[0])

        # eval: CSV plus figure next to it
        code = run([
            "eval", "--model", str(tmp / "m.dfm"),
            "--input", str(tmp / "test.libfm"),
            "--user-field", uf, "--item-field", itf,
            "--kmax", "5", "--out", str(tmp / "eval.csv"),
        ])
        assert code == 0
        csv_lines = (tmp / "eval.csv").read_text().strip().split("\n")
        assert csv_lines[0] == "K,ndcg"
        assert len(csv_lines) == 6
        assert (tmp / "eval.png").exists()

        # bench: text report with recomputable ratio, csv, figure
        code = run([
            "bench", "--model-fm", str(tmp / "m.fm"),
            "--model-dfm", str(tmp / "m.dfm"),
            "--input", str(tmp / "test.libfm"),
            "--user-field", uf, "--item-field", itf,
            "--reps", "1", "--out", str(tmp / "bench.txt"),
        ])
        assert code == 0
        report = (tmp / "bench.txt").read_text()
        assert "Acceleration Ratio" in report
        csv = (tmp / "bench.csv").read_text().strip().split("\n")
        head = csv[0].split(",")
        vals = csv[1].split(",")
        row = dict(zip(head, vals))
        assert float(row["acceleration_ratio"]) == pytest.approx(
            float(row["ttc_float"]) / float(row["ttc_binary"]), rel=1e-4
        )
        assert (tmp / "bench.png").exists()

    def test_progress_lines_on_stderr(self, workdir, capsys):
        tmp, d = workdir
        self._split(tmp, d)
        run([
            "train-fm", "--input", str(tmp / "train.libfm"),
            "--out", str(tmp / "m.fm"), "--k", "2", "--iters", "3",
        ])
        err = capsys.readouterr().err
        assert re.search(r"^iter=0 obj=[0-9.eE+-]+$", err, re.MULTILINE)

    def test_deterministic_artifacts(self, workdir):
        tmp, d = workdir
        self._split(tmp, d)
        args = [
            "train-dfm", "--input", str(tmp / "train.libfm"),
            "--k", "2", "--beta", "1e-2", "--seed", "11", "--iters", "5",
            "--init-iters", "1",
        ]
        run(args + ["--out", str(tmp / "a.dfm")])
        run(args + ["--out", str(tmp / "b.dfm")])
        assert (tmp / "a.dfm").read_bytes() == (tmp / "b.dfm").read_bytes()

    def test_checkpoint_resume(self, workdir):
        tmp, d = workdir
        self._split(tmp, d)
        code = run([
            "train-dfm", "--input", str(tmp / "train.libfm"),
            "--out", str(tmp / "m.dfm"), "--k", "2", "--iters", "4",
            "--init-iters", "1", "--checkpoint", str(tmp / "state.ckpt"),
        ])
        assert code == 0
        assert (tmp / "state.ckpt").exists()
        code = run([
            "train-dfm", "--input", str(tmp / "train.libfm"),
            "--out", str(tmp / "m2.dfm"), "--k", "2", "--iters", "2",
            "--resume", str(tmp / "state.ckpt"),
        ])
        assert code == 0


class TestGridCommand:
    def test_grid_csv_and_figure(self, workdir):
        tmp, d = workdir
        uf, itf = _fields(d)
        run([
            "split", "--input", str(tmp / "ratings.libfm"),
            "--train-out", str(tmp / "train.libfm"),
            "--test-out", str(tmp / "test.libfm"),
            "--user-field", uf, "--item-field", itf, "--seed", "1",
        ])
        code = run([
            "grid", "--train", str(tmp / "train.libfm"),
            "--test", str(tmp / "test.libfm"),
            "--user-field", uf, "--item-field", itf,
            "--betas", "0,1e-2", "--ks", "2", "--iters", "3",
            "--out", str(tmp / "grid.csv"),
        ])
        assert code == 0
        lines = (tmp / "grid.csv").read_text().strip().split("\n")
        assert lines[0].startswith("beta,k,status,ndcg@1")
        assert len(lines) == 3
        assert (tmp / "grid.png").exists()


class TestExitCodes:
    def test_usage_error_is_1(self):
        assert run(["train-fm", "--no-such-flag"]) == 1
        assert run(["no-such-command"]) == 1

    def test_data_error_is_2(self, tmp_path):
        bad = tmp_path / "bad.libfm"
        bad.write_text("1 2:0.5 2:0.5\n")
        assert run([
            "train-fm", "--input", str(bad), "--out", str(tmp_path / "m.fm"),
        ]) == 2

    def test_model_mismatch_is_2(self, tmp_path):
        data = tmp_path / "d.libfm"
        data.write_text("1 0:1 1:1\n2 1:1 2:1\n")
        run(["train-fm", "--input", str(data), "--out", str(tmp_path / "m.fm"),
             "--k", "2", "--iters", "2"])
        wider = tmp_path / "wider.libfm"
        wider.write_text("1 0:1 9:1\n")
        assert run([
            "predict", "--model", str(tmp_path / "m.fm"),
            "--input", str(wider), "--out", str(tmp_path / "p.txt"),
        ]) == 2

    def test_numeric_failure_is_3(self, tmp_path):
        # sgd with an absurd learning rate on huge targets diverges
        data = tmp_path / "d.libfm"
        data.write_text("".join("1e12 0:100 1:100\n" for _ in range(10)))
        with np.errstate(all="ignore"):
            code = run([
                "train-fm", "--input", str(data),
                "--out", str(tmp_path / "m.fm"), "--solver", "sgd",
                "--k", "2", "--iters", "50",
            ])
        assert code == 3

    def test_help_is_0(self):
        assert run(["--help"]) == 0
        assert run(["train-dfm", "--help"]) == 0
