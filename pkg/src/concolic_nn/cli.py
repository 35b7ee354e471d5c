"""Command-line entry point: ``concolic-nn {forward,attack,escalate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from .core import BranchPredicate, ConcolicError, to_infix
from .explore import QUEUE, STACK, SearchConfig, check_adversarial
from .nn.model import (
    InputRecord,
    ModelFormatError,
    ModelSpec,
    forward_concolic,
    forward_concrete,
    load_input,
    load_model,
    save_input,
)
from .report import AttackRecord, aggregate, attack_report, escalation_report, write_report
from .select import SelectionError, SelectionPolicy
from .solve import DEFAULT_QUERY_TIMEOUT, DEFAULT_SOLVER, Solver, SolverConfigError

log = logging.getLogger("concolic_nn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_SOLVER = 4


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _schedule(text: str) -> list[int]:
    try:
        steps = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad schedule {text!r}") from None
    if not steps or steps[0] < 1 or any(b <= a for a, b in zip(steps, steps[1:])):
        raise argparse.ArgumentTypeError("schedule must be a strictly increasing list of positive integers")
    return steps


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concolic-nn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    fwd = sub.add_parser("forward", help="run a model on one input")
    fwd.add_argument("--model", required=True)
    fwd.add_argument("--input", required=True)
    fwd.add_argument("--symbolic", type=int, nargs="+", metavar="INDEX",
                     help="flat input positions to make symbolic (enables the trace)")
    fwd.add_argument("--trace", metavar="PATH", help="write the branch trace as JSON ('-' for stdout)")

    def attack_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--model", required=True)
        p.add_argument("--input", required=True, help="input JSON file or a directory of them")
        p.add_argument("--select", default="random", help="random | occlusion | scores:PATH")
        p.add_argument("--baseline", type=float, default=0.0, help="occlusion baseline value")
        p.add_argument("--order", choices=(QUEUE, STACK), default=QUEUE)
        p.add_argument("--timeout", type=_positive_float, default=1800.0, help="per-input attack budget (s)")
        p.add_argument("--query-timeout", type=_positive_float, default=DEFAULT_QUERY_TIMEOUT)
        p.add_argument("--max-iterations", type=int, default=None)
        p.add_argument("--clamp", type=float, nargs=2, metavar=("LO", "HI"))
        p.add_argument("--epsilon", type=float)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--solver", default=DEFAULT_SOLVER,
                       help="solver command line; {timeout_ms} is substituted")
        p.add_argument("--dump-smt", metavar="DIR")
        p.add_argument("--report", required=True, metavar="PATH")
        p.add_argument("--adv-dir", metavar="DIR", help="where adversarial inputs are written "
                       "(default: next to the report)")
        p.add_argument("--jobs", type=_positive_int, default=1)

    atk = sub.add_parser("attack", help="search for adversarial examples")
    attack_flags(atk)
    atk.add_argument("--pixels", type=int, required=True, help="number of symbolic positions")

    esc = sub.add_parser("escalate", help="re-attack failures with growing pixel counts")
    attack_flags(esc)
    esc.add_argument("--schedule", type=_schedule, default=[1, 4, 8, 16, 32])
    return parser


def _load_inputs(path: str) -> list[tuple[str, InputRecord]]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no .json inputs in {p}")
        return [(f.stem, load_input(f)) for f in files]
    return [(p.stem, load_input(p))]


def _input_seed(seed: int, input_id: str) -> int:
    return zlib.crc32(f"{seed}:{input_id}".encode())


class _Runner:
    def __init__(self, args: argparse.Namespace, model: ModelSpec, solver: Solver):
        self.args = args
        self.model = model
        self.solver = solver
        self.config = SearchConfig(
            order=args.order,
            timeout=args.timeout,
            query_timeout=args.query_timeout,
            clamp=tuple(args.clamp) if args.clamp else None,
            epsilon=args.epsilon,
            seed=args.seed,
            max_iterations=args.max_iterations,
        )
        report_dir = Path(args.report).resolve().parent
        self.adv_dir = Path(args.adv_dir) if args.adv_dir else report_dir / "adversarial"

    def policy(self, input_id: str) -> SelectionPolicy:
        return SelectionPolicy.parse(self.args.select, _input_seed(self.args.seed, input_id), self.args.baseline)

    def attack(self, input_id: str, record: InputRecord, pixels: int) -> AttackRecord:
        policy = self.policy(input_id)
        out = AttackRecord(input_id, pixels, policy.describe(), self.config.order, "error", None)
        try:
            if record.shape != self.model.input_shape:
                raise ModelFormatError(f"input shape {record.shape} does not match model {self.model.input_shape}")
            out.original_class, _ = forward_concrete(self.model, record.data)
            chosen = policy.select(self.model, record.data, pixels)
            out.selected = list(chosen)
            sym_vars = [(index, var_id) for var_id, index in enumerate(chosen)]
            result = check_adversarial(self.model, record.data, sym_vars, self.config, self.solver)
        except (ConcolicError, ModelFormatError) as exc:
            out.error = str(exc)
            return out
        stats = result.stats.to_dict()
        out.outcome = result.stats.outcome
        for key in ("iterations", "sat", "unsat", "unknown", "constraints_per_iteration",
                    "constraints_mean", "solver_time_mean", "query_size_mean", "divergent_replays",
                    "history", "wall_time"):
            setattr(out, key, stats[key])
        if result.adversarial is not None:
            out.adversarial_class = result.adversarial_label
            out.changes = [
                {"index": i, "original": record.data[i], "adversarial": result.adversarial[i]}
                for i in range(len(record.data))
                if result.adversarial[i] != record.data[i]
            ]
            self.adv_dir.mkdir(parents=True, exist_ok=True)
            target = self.adv_dir / f"{input_id}.k{pixels}.json"
            save_input(InputRecord(record.shape, result.adversarial, result.adversarial_label), target)
            out.adversarial_file = str(target)
        return out

    def attack_all(self, items: Sequence[tuple[str, InputRecord]], pixels: int) -> list[AttackRecord]:
        if self.args.jobs == 1 or len(items) <= 1:
            return [self.attack(i, r, pixels) for i, r in items]
        with ThreadPoolExecutor(max_workers=self.args.jobs) as pool:
            return list(pool.map(lambda item: self.attack(item[0], item[1], pixels), items))

    def settings(self) -> dict:
        a = self.args
        return {
            "model": a.model,
            "input": a.input,
            "select": a.select,
            "order": a.order,
            "timeout": a.timeout,
            "query_timeout": a.query_timeout,
            "max_iterations": a.max_iterations,
            "clamp": a.clamp,
            "epsilon": a.epsilon,
            "seed": a.seed,
            "solver": a.solver,
        }


def _setup(args) -> tuple[ModelSpec, list[tuple[str, InputRecord]], Solver]:
    model = load_model(args.model)
    items = _load_inputs(args.input)
    try:
        SelectionPolicy.parse(args.select)
    except SelectionError as exc:
        raise UsageError(str(exc)) from None
    if args.clamp and not args.clamp[0] < args.clamp[1]:
        raise UsageError("--clamp requires LO < HI")
    if args.epsilon is not None and args.epsilon < 0:
        raise UsageError("--epsilon must be non-negative")
    solver = Solver(args.solver, args.dump_smt)
    return model, items, solver


def cmd_attack(args) -> int:
    if args.pixels < 1:
        raise UsageError("--pixels must be at least 1")
    model, items, solver = _setup(args)
    for _, record in items:
        if args.pixels > len(record.data):
            raise UsageError(f"--pixels {args.pixels} exceeds input size {len(record.data)}")
    runner = _Runner(args, model, solver)
    records = runner.attack_all(items, args.pixels)
    settings = runner.settings() | {"pixels": args.pixels}
    write_report(attack_report(records, settings), args.report)
    agg = aggregate(records)
    print(f"{agg['successes']}/{agg['attempted']} adversarial ({agg['atk_percent']:.1f}%) -> {args.report}")
    return EXIT_OK


def cmd_escalate(args) -> int:
    model, items, solver = _setup(args)
    runner = _Runner(args, model, solver)
    remaining = list(items)
    succeeded: set[str] = set()
    stages = []
    for pixels in args.schedule:
        eligible = [(i, r) for i, r in remaining if pixels <= len(r.data)]
        records = runner.attack_all(eligible, pixels)
        wins = {r.input_id for r in records if r.success}
        succeeded |= wins
        remaining = [(i, r) for i, r in remaining if i not in wins]
        stage = {
            "pixels": pixels,
            "attempted": len(records),
            "succeeded": len(wins),
            "failed": len(records) - len(wins),
            "already_succeeded": len(items) - len(remaining) - len(wins),
            "skipped": len(remaining) + len(wins) - len(records),
            "cumulative_successes": len(succeeded),
            "cumulative_atk_percent": 100.0 * len(succeeded) / len(items),
            "records": [r.__dict__ for r in records],
            "aggregate": aggregate(records),
        }
        stages.append(stage)
        print(f"k={pixels}: {len(wins)}/{len(records)} new, cumulative {stage['cumulative_atk_percent']:.1f}%")
    settings = runner.settings() | {"schedule": args.schedule}
    write_report(escalation_report(stages, len(items), settings), args.report)
    return EXIT_OK


def _predicate_json(pred: BranchPredicate) -> dict:
    return {
        "atoms": [{"lhs": to_infix(a.lhs), "relation": a.relation, "rhs": to_infix(a.rhs)} for a in pred.atoms],
        "taken": pred.taken,
    }


def cmd_forward(args) -> int:
    model = load_model(args.model)
    record = load_input(args.input)
    label, probs = forward_concrete(model, record.data)
    print(f"class {label}, probs [{', '.join(f'{p:.3f}' for p in probs)}]")
    if args.symbolic:
        for index in args.symbolic:
            if not 0 <= index < len(record.data):
                raise UsageError(f"--symbolic index {index} out of range")
        if len(set(args.symbolic)) != len(args.symbolic):
            raise UsageError("--symbolic indices must be distinct")
        run = forward_concolic(model, record.data, [(i, v) for v, i in enumerate(args.symbolic)])
        doc = {
            "class": run.label,
            "probs": run.probs,
            "symbolic": {f"x{v}": i for v, i in enumerate(args.symbolic)},
            "trace": [_predicate_json(p) for p in run.trace],
        }
        text = json.dumps(doc, indent=1)
        if args.trace in (None, "-"):
            print(text)
        else:
            Path(args.trace).write_text(text, encoding="utf-8")
    elif args.trace:
        raise UsageError("--trace needs --symbolic")
    return EXIT_OK


COMMANDS = {"forward": cmd_forward, "attack": cmd_attack, "escalate": cmd_escalate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"concolic-nn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverConfigError as exc:
        print(f"concolic-nn: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ModelFormatError, SelectionError, json.JSONDecodeError, ConcolicError) as exc:
        print(f"concolic-nn: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
