from __future__ import annotations

import json
import subprocess
import sys

import pytest

from concolic_nn.cli import EXIT_IO, EXIT_OK, EXIT_SOLVER, EXIT_USAGE, main
from concolic_nn.nn import forward_concrete, load_input, load_model
from concolic_nn.report import aggregate, read_report, records_from, strip_timing

from conftest import FLIP, RUNNING, needs_z3

MODEL = str(RUNNING / "model.json")
INPUT = str(RUNNING / "input.json")


@pytest.fixture
def scores(tmp_path):
    path = tmp_path / "scores.json"
    path.write_text("[0, 0, 1, 0]")
    return str(path)


def attack_args(tmp_path, *extra, report="report.json"):
    return ["attack", "--model", MODEL, "--input", INPUT, "--report", str(tmp_path / report), *extra]


class TestForward:
    def test_prints_class(self, capsys):
        assert main(["forward", "--model", MODEL, "--input", INPUT]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "class 0, probs [0.681, 0.319]"

    def test_trace_dump(self, tmp_path):
        out = tmp_path / "trace.json"
        assert main(["forward", "--model", MODEL, "--input", INPUT, "--symbolic", "2", "--trace", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["class"] == 0 and doc["symbolic"] == {"x0": 2}
        assert len(doc["trace"]) == 20
        assert doc["trace"][0]["atoms"][0]["relation"] == "=" and doc["trace"][0]["taken"] is False

    def test_trace_without_symbolic(self, tmp_path):
        assert main(["forward", "--model", MODEL, "--input", INPUT, "--trace", "x.json"]) == EXIT_USAGE

    def test_bad_model(self, tmp_path):
        bad = tmp_path / "m.json"
        bad.write_text('{"input_shape": [2], "layers": [{"type": "dense", "weights": [[1]], "bias": [0]}]}')
        assert main(["forward", "--model", str(bad), "--input", INPUT]) == EXIT_IO

    def test_missing_file(self):
        assert main(["forward", "--model", "/nonexistent.json", "--input", INPUT]) == EXIT_IO

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "concolic_nn", "forward", "--model", MODEL, "--input", INPUT],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0 and proc.stdout.startswith("class 0")


class TestUsageErrors:
    def test_zero_pixels(self, tmp_path):
        assert main(attack_args(tmp_path, "--pixels", "0")) == EXIT_USAGE

    def test_too_many_pixels(self, tmp_path):
        assert main(attack_args(tmp_path, "--pixels", "5")) == EXIT_USAGE

    def test_bad_policy(self, tmp_path):
        assert main(attack_args(tmp_path, "--pixels", "1", "--select", "shap")) == EXIT_USAGE

    def test_bad_clamp(self, tmp_path):
        assert main(attack_args(tmp_path, "--pixels", "1", "--clamp", "1", "0")) == EXIT_USAGE

    def test_argparse_errors(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(attack_args(tmp_path, "--pixels", "1", "--order", "random"))
        assert exc.value.code == EXIT_USAGE

    def test_solver_missing(self, tmp_path):
        assert main(attack_args(tmp_path, "--pixels", "1", "--solver", "no-such-solver -in")) == EXIT_SOLVER

    def test_bad_schedule(self):
        with pytest.raises(SystemExit) as exc:
            main(["escalate", "--model", MODEL, "--input", INPUT, "--schedule", "4,2", "--report", "r.json"])
        assert exc.value.code == EXIT_USAGE

    def test_missing_scores_file(self, tmp_path):
        assert main(attack_args(tmp_path, "--pixels", "1", "--select", "scores:/nonexistent")) == EXIT_IO


@needs_z3
class TestAttack:
    def test_running_example(self, tmp_path, scores):
        args = attack_args(tmp_path, "--pixels", "1", "--select", f"scores:{scores}", "--timeout", "30")
        assert main(args) == EXIT_OK
        doc = read_report(tmp_path / "report.json")
        rec = doc["records"][0]
        assert rec["selected"] == [2]
        first = rec["history"][0]
        assert first["iteration"] == 1 and first["depth"] == 0
        assert first["negated"] == "1.028 + 0.1*x0 = 0"
        assert first["model"]["x0"] == pytest.approx(-10.28, abs=1e-6)
        assert rec["outcome"] == "adversarial-found"
        assert rec["original_class"] == 0 and rec["adversarial_class"] == 1
        assert [c["index"] for c in rec["changes"]] == [2]
        written = load_input(rec["adversarial_file"])
        assert forward_concrete(load_model(MODEL), written.data)[0] == 1
        assert doc["aggregate"]["atk_percent"] == 100.0

    def test_report_round_trip(self, tmp_path, scores):
        main(attack_args(tmp_path, "--pixels", "1", "--select", f"scores:{scores}"))
        doc = read_report(tmp_path / "report.json")
        assert aggregate(records_from(doc)) == doc["aggregate"]

    def test_deterministic_modulo_timing(self, tmp_path):
        common = ["--input", str(FLIP / "inputs"), "--model", str(FLIP / "model.json"), "--pixels", "1",
                  "--seed", "7", "--max-iterations", "40", "--adv-dir", str(tmp_path / "adv")]
        assert main(["attack", *common, "--report", str(tmp_path / "a.json")]) == 0
        assert main(["attack", *common, "--report", str(tmp_path / "b.json"), "--jobs", "3"]) == 0
        a = strip_timing(read_report(tmp_path / "a.json"))
        b = strip_timing(read_report(tmp_path / "b.json"))
        assert a == b
        assert len(a["records"]) == 5

    def test_dump_smt(self, tmp_path, scores):
        dump = tmp_path / "smt"
        main(attack_args(tmp_path, "--pixels", "1", "--select", f"scores:{scores}", "--dump-smt", str(dump)))
        rec = read_report(tmp_path / "report.json")["records"][0]
        files = sorted(dump.glob("*.smt2"))
        assert len(files) >= rec["sat"] + rec["unsat"] + rec["unknown"]
        assert "(check-sat)" in files[0].read_text()

    def test_escalation(self, tmp_path):
        report = tmp_path / "esc.json"
        args = ["escalate", "--model", str(FLIP / "model.json"), "--input", str(FLIP / "inputs"),
                "--schedule", "1,2,4", "--seed", "0", "--max-iterations", "40", "--report", str(report)]
        assert main(args) == EXIT_OK
        doc = read_report(report)
        total = doc["total_inputs"]
        assert total == 5
        cumulative = 0
        for stage in doc["stages"]:
            assert stage["attempted"] + stage["already_succeeded"] + stage["skipped"] == total
            assert stage["attempted"] == stage["succeeded"] + stage["failed"]
            assert stage["already_succeeded"] == cumulative
            cumulative += stage["succeeded"]
            assert stage["cumulative_successes"] == cumulative
            assert stage["cumulative_atk_percent"] == pytest.approx(100.0 * cumulative / total)
        first, second = doc["stages"][:2]
        failed = {r["input_id"] for r in first["records"] if r["outcome"] != "adversarial-found"}
        assert failed  # this seed picks pixels that cannot flip the class on their own
        assert {r["input_id"] for r in second["records"]} == failed
        assert doc["stages"][-1]["cumulative_successes"] == total
