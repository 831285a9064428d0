import csv
import io
import re
import subprocess
import sys

import pytest

from tiepref.cli import build_parser, main
from tiepref.dataset import read_records
from tiepref.reward import load_checkpoint

COMMANDS = ["gen-data", "fit", "eval", "bias-table", "bias-curve"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    code, _, _ = run(capsys, "gen-data", "--out", path, "--theta", 3, "--dim", 2, "--prompts", 5, "--pairs", 40,
                     "--seed", 1, "--break-ties", "--truth-out", tmp_path / "truth.ckpt")
    assert code == 0
    return tmp_path


class TestGenData:
    def test_theta_one_no_ties(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--theta", 1, "--out", tmp_path / "d.jsonl")
        assert code == 0 and "ties=0 " in out

    def test_deterministic(self, tmp_path, capsys):
        for name in ("a.jsonl", "b.jsonl"):
            run(capsys, "gen-data", "--seed", 7, "--break-ties", "--out", tmp_path / name)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "a_untied.jsonl").read_bytes() == (tmp_path / "b_untied.jsonl").read_bytes()

    def test_counts(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen-data", "--theta", 5, "--dim", 4, "--prompts", 100, "--pairs", 10,
                           "--out", tmp_path / "d.jsonl")
        ds = read_records(tmp_path / "d.jsonl")
        assert code == 0 and len(ds) == 1000 and f"records=1000 ties={ds.n_ties}" in out
        # uniform [-2, 2] rewards at theta 5 tie roughly half the time
        assert 0.35 < ds.n_ties / len(ds) < 0.65

    def test_untied_copy(self, data):
        tied = read_records(data / "d.jsonl")
        untied = read_records(data / "d_untied.jsonl")
        assert untied.n_ties == 0 and len(untied) == len(tied)

    def test_theta_below_one(self, tmp_path, capsys):
        code, out, err = run(capsys, "gen-data", "--theta", 0.5, "--out", tmp_path / "d.jsonl")
        assert code == 2 and "theta" in err and len(err.strip().splitlines()) == 1
        assert not (tmp_path / "d.jsonl").exists()

    def test_unwritable(self, tmp_path, capsys):
        code, _, err = run(capsys, "gen-data", "--out", tmp_path / "missing" / "d.jsonl")
        assert code != 0 and err


class TestFit:
    def test_writes_checkpoint_and_report(self, data, capsys):
        code, out, _ = run(capsys, "fit", "--data", data / "d.jsonl", "--loss", "btt", "--model", "linear",
                           "--epochs", 3, "--checkpoint", data / "m.ckpt", "--report", data / "r.csv")
        assert code == 0 and "wall-ms" in out
        model = load_checkpoint(data / "m.ckpt")
        assert model.kind == "linear"
        rows = list(csv.reader(io.StringIO((data / "r.csv").read_text())))
        assert rows[1] == ["epoch", "loss", "grad_norm"] and len(rows) == 2 + 1 + 3

    def test_bt_on_tied_data_is_usage_error(self, data, capsys):
        for loss in ("bt", "corrected"):
            code, _, err = run(capsys, "fit", "--data", data / "d.jsonl", "--loss", loss,
                               "--checkpoint", data / "m.ckpt")
            assert code == 2 and loss in err and "tied" in err
        assert not (data / "m.ckpt").exists()

    def test_corrected_theta_one_matches_bt(self, data, capsys):
        common = ["--data", data / "d_untied.jsonl", "--epochs", 4, "--lr", 0.01]
        run(capsys, "fit", *common, "--loss", "bt", "--checkpoint", data / "a.ckpt", "--report", data / "a.csv")
        run(capsys, "fit", *common, "--loss", "corrected", "--theta", 1, "--checkpoint", data / "b.ckpt",
            "--report", data / "b.csv")
        body = lambda p: p.read_text().splitlines()[1:]
        assert body(data / "a.csv") == body(data / "b.csv")
        assert (data / "a.ckpt").read_bytes() == (data / "b.ckpt").read_bytes()

    def test_zero_lr_constant_loss(self, data, capsys):
        run(capsys, "fit", "--data", data / "d_untied.jsonl", "--lr", 0, "--epochs", 4, "--convergence", 0,
            "--checkpoint", data / "m.ckpt", "--report", data / "r.csv")
        losses = {line.split(",")[1] for line in (data / "r.csv").read_text().splitlines()[2:]}
        assert len(losses) == 1

    def test_convex_smoke(self, tmp_path, capsys):
        run(capsys, "gen-data", "--theta", 1, "--dim", 2, "--prompts", 4, "--pairs", 25, "--truth-kind", "linear",
            "--out", tmp_path / "d.jsonl", "--truth-out", tmp_path / "t.ckpt")
        from tiepref.dataset import relabel_by_reward, write_records
        ds = relabel_by_reward(read_records(tmp_path / "d.jsonl"), load_checkpoint(tmp_path / "t.ckpt"))
        write_records(ds, tmp_path / "sep.jsonl")
        code, out, _ = run(capsys, "fit", "--data", tmp_path / "sep.jsonl", "--model", "linear", "--lr", 0.05,
                           "--epochs", 500, "--batch-size", 16, "--checkpoint", tmp_path / "m.ckpt",
                           "--report", tmp_path / "r.csv")
        final = float(re.search(r"final loss (\S+)", out).group(1))
        assert code == 0 and final < 0.1

    @pytest.mark.parametrize("model", ["tabular", "mlp", "policy"])
    def test_models(self, data, capsys, model):
        code, _, _ = run(capsys, "fit", "--data", data / "d.jsonl", "--loss", "btt", "--model", model,
                         "--epochs", 2, "--checkpoint", data / "m.ckpt", "--report", data / "r.csv")
        assert code == 0 and load_checkpoint(data / "m.ckpt").kind == model

    def test_theta_from_data_file(self, data, capsys):
        code, out, _ = run(capsys, "fit", "--data", data / "d_untied.jsonl", "--loss", "corrected",
                           "--epochs", 1, "--checkpoint", data / "m.ckpt", "--report", data / "r.csv")
        assert code == 0

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(capsys, "fit", "--data", tmp_path / "none.jsonl")
        assert code == 1 and "none.jsonl" in err


class TestEval:
    def test_truth_accuracy_on_relabeled(self, data, capsys):
        code, out, _ = run(capsys, "eval", "--model", data / "truth.ckpt", "--truth", data / "truth.ckpt",
                           "--data", data / "d.jsonl", "--relabel")
        metrics = dict(line.split(",") for line in out.splitlines()[1:])
        assert code == 0 and float(metrics["accuracy"]) == 1.0 and float(metrics["mean_abs_bias"]) == 0.0

    def test_ties_filtered(self, data, capsys):
        code, out, _ = run(capsys, "eval", "--model", data / "truth.ckpt", "--data", data / "d.jsonl",
                           "--out", data / "m.csv")
        metrics = dict(line.split(",") for line in (data / "m.csv").read_text().splitlines()[1:])
        assert int(metrics["n_ties_filtered"]) == read_records(data / "d.jsonl").n_ties

    def test_needs_input(self, data, capsys):
        code, _, err = run(capsys, "eval", "--model", data / "truth.ckpt")
        assert code == 2


class TestBiasCommands:
    def test_curve_theta_one(self, capsys):
        code, out, _ = run(capsys, "bias-curve", "--theta", 1, "--points", 7)
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and len(rows) == 8 and all(float(r["bias"]) == 0.0 for r in rows)

    def test_curve_invalid_range(self, capsys):
        code, _, err = run(capsys, "bias-curve", "--lo", 3, "--hi", 1)
        assert code == 1 and "range" in err

    def test_table_rejects_theta_one(self, capsys):
        code, _, err = run(capsys, "bias-table", "--thetas", "1,2")
        assert code == 2

    def test_table_default(self, tmp_path, capsys):
        code, out, _ = run(capsys, "bias-table", "--thetas", "2,5,10", "--seed", 0, "--out", tmp_path / "t.csv")
        rows = list(csv.DictReader(io.StringIO((tmp_path / "t.csv").read_text())))
        assert code == 0 and len(rows) == 3 and all(float(r["gap"]) > 0 for r in rows)


class TestHelpAndConfig:
    @pytest.mark.parametrize("command", COMMANDS)
    def test_help_lists_every_flag_with_default(self, command):
        _, subs = build_parser()
        sub = subs[command]
        text = sub.format_help()
        for action in sub._actions:
            if action.dest == "help":
                continue
            assert action.option_strings[-1] in text
            assert action.help and "%(default)" not in action.help
        flags = [a for a in sub._actions if a.dest != "help"]
        assert text.count("(default:") == len(flags)

    def test_config_lower_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# flat settings\ntheta = 1\nprompts=3\n--pairs = 4\nbreak-ties = true\n")
        code, out, _ = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "d.jsonl", "--prompts", 2)
        assert code == 0 and "records=8 ties=0" in out and (tmp_path / "d_untied.jsonl").exists()

    def test_config_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("colour = blue\n")
        code, _, err = run(capsys, "gen-data", "--config", cfg)
        assert code == 2 and "colour" in err

    def test_negative_seed(self, tmp_path, capsys):
        code, _, _ = run(capsys, "gen-data", "--seed", -1, "--out", tmp_path / "d.jsonl")
        assert code == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "tiepref", "bias-curve", "--theta", "2", "--points", "2"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.startswith("delta_r_star,theta,bias,bias_ratio")
