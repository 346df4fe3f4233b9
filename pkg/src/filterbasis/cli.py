"""Command line: plan -> decompose -> verify -> train -> export -> report.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
Set ``BASIS_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import zoo
from .decomposed_conv import NonFiniteError
from .model_io import (
    ModelIOError,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    sharing_from_dict,
)
from .pipeline import (
    attach_plan,
    decompose_graph,
    make_plan,
    model_summary,
    plan_rows,
    verify_graph,
)
from .planner import PlanError
from .tensor_core import ConvergenceError, ShapeError
from .trainer import (
    LossSpec,
    OptimizerState,
    TrainingDiverged,
    export_for_inference,
    penalty_residuals,
    train,
)

log = logging.getLogger("filterbasis")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class ValidationFailure(Exception):
    pass


class NumericalFailure(Exception):
    pass


@dataclass
class CommandConfig:
    command: str
    model: list[str] = field(default_factory=list)
    out: Optional[str] = None
    m: Optional[list[int]] = None
    s: Union[int, str] = 1
    p: Optional[int] = None
    gamma: float = 1e-2
    epochs: int = 1
    seed: int = 0
    share: str = "none"
    total_splits: Optional[int] = None
    dataset: Optional[str] = None
    original: Optional[str] = None
    fmt: str = "text"
    lr: float = 1e-3
    momentum: float = 0.0
    decay_epochs: tuple = ()
    batch_size: int = 8
    loss: str = "mse"
    preset: Optional[str] = None
    samples: int = 32

    def __post_init__(self):
        if self.p is not None and self.s == "auto":
            raise ValidationFailure("--s auto chooses the split depth; do not also pass --p")
        if self.p is not None and self.s not in (1, "1"):
            raise ValidationFailure("pass either --s or --p, not both")

    @property
    def split_arg(self):
        return ("p", self.p) if self.p is not None else self.s


def _parse_s(text: str) -> Union[int, str]:
    if text == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--s must be an integer or 'auto', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("--s must be >= 1")
    return value


def _parse_m(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--m takes an integer or a comma list, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("--m values must be >= 1")
    return values


def _emit(rows: list[list], header: list[str], fmt: str, stream) -> None:
    if fmt == "csv":
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return
    table = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    for r in table:
        stream.write("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip() + "\n")


def _pct(x: float) -> str:
    return f"{100.0 * x:.1f}%"


# ---------------------------------------------------------------------- commands

def cmd_make_toy(cfg: CommandConfig, stream) -> int:
    if cfg.preset not in zoo.PRESETS:
        raise ValidationFailure(f"unknown preset {cfg.preset!r}; choose from {sorted(zoo.PRESETS)}")
    graph = zoo.PRESETS[cfg.preset](cfg.seed)
    save_model(graph, cfg.out)
    stream.write(f"wrote {cfg.preset} model to {cfg.out}\n")
    return EXIT_OK


def cmd_make_dataset(cfg: CommandConfig, stream) -> int:
    """Label seeded random inputs with a (teacher) model's outputs."""
    graph = load_model(cfg.model[0])
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((cfg.samples,) + tuple(graph.input_shape)).astype(np.float32).astype(np.float64)
    y = graph.forward(x)
    save_dataset(cfg.out, x, y)
    stream.write(f"wrote {cfg.samples} samples to {cfg.out}\n")
    return EXIT_OK


def cmd_plan(cfg: CommandConfig, stream) -> int:
    graph = load_model(cfg.model[0])
    if cfg.m is None:
        raise ValidationFailure("--m is required for plan")
    m = cfg.m[0] if len(cfg.m) == 1 else cfg.m
    plan = make_plan(graph, m, cfg.split_arg, cfg.share, cfg.total_splits)
    log.info("planned %d groups with %s sharing", len(plan.groups), plan.strategy)
    rows, total = plan_rows(graph, plan)
    table = [[r.label, r.m, r.s if r.s else "-", r.p, r.params,
              _pct(r.rate) if r.original else "-", r.macs] for r in rows]
    table.append(["TOTAL", "", "", "", total.params_compressed, _pct(total.ratio), total.flops_compressed])
    _emit(table, ["layer", "m", "s", "p", "params", "rate", "macs"], cfg.fmt, stream)
    if cfg.fmt == "text":
        stream.write(f"original params {total.params_original}, macs {total.flops_original}\n")
    if cfg.out:
        save_model(attach_plan(graph, plan), cfg.out)
    return EXIT_OK


def cmd_decompose(cfg: CommandConfig, stream) -> int:
    graph = load_model(cfg.model[0])
    if "sharing" not in graph.meta:
        raise ValidationFailure(
            f"{cfg.model[0]} has no decomposition plan; run "
            f"`filterbasis plan --model {cfg.model[0]} --m <m> --out <dir>` first"
        )
    plan = sharing_from_dict(graph.meta["sharing"])
    log.info("fitting %d groups", len(plan.groups))
    compressed = decompose_graph(graph, plan)
    rows = [[l.name, l.attrs["s"], graph_m(compressed, l), repr(float(l.attrs["residual"]))]
            for l in compressed.decomposed_layers()]
    _emit(rows, ["layer", "s", "m", "residual"], cfg.fmt, stream)
    save_model(compressed, cfg.out)
    return EXIT_OK


def graph_m(graph, layer) -> int:
    return graph.params[layer.params["basis"]].shape[0]


def cmd_verify(cfg: CommandConfig, stream) -> int:
    graph = load_model(cfg.model[0])
    original = load_model(cfg.original) if cfg.original else None
    results = verify_graph(graph, original, seed=cfg.seed)
    if not results:
        raise ValidationFailure("model has no decomposed layers to verify")
    rows = [[r.layer, f"{r.rel_error:.3e}", "-" if r.residual_drift is None else f"{r.residual_drift:.3e}",
             "PASS" if r.ok else f"FAIL ({r.reason})"] for r in results]
    _emit(rows, ["layer", "rel_error", "residual_drift", "status"], cfg.fmt, stream)
    worst = max(r.rel_error for r in results)
    failed = [r.layer for r in results if not r.ok]
    if cfg.fmt == "text":
        stream.write(f"max relative error {worst:.3e}: {'FAIL' if failed else 'PASS'}\n")
    if failed:
        raise NumericalFailure(f"verification failed for {', '.join(failed)}")
    return EXIT_OK


def cmd_train(cfg: CommandConfig, stream) -> int:
    graph = load_model(cfg.model[0])
    if not graph.decomposed_layers():
        raise ValidationFailure("train needs a decomposed model (run decompose first)")
    if cfg.dataset is None:
        raise ValidationFailure("--dataset is required for train")
    data = load_dataset(cfg.dataset, batch_size=cfg.batch_size)
    spec = LossSpec(kind=cfg.loss, gamma=cfg.gamma)
    opt = OptimizerState(lr=cfg.lr, momentum=cfg.momentum, decay_epochs=tuple(cfg.decay_epochs), seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training %d epochs on %d samples (gamma=%g, lr=%g)", cfg.epochs, len(data), spec.gamma, opt.lr)
    try:
        report = train(graph, data, spec, opt, cfg.epochs)
    except TrainingDiverged as exc:
        (out / "train_report.jsonl").write_text(exc.report.to_lines())
        raise NumericalFailure(str(exc)) from exc
    if cfg.epochs > 0:
        residuals = penalty_residuals(graph, spec)
        for layer in graph.decomposed_layers():
            if layer.name in residuals:
                layer.attrs["residual"] = residuals[layer.name]
        graph.meta["loss"] = {"kind": spec.kind, "gamma": spec.gamma}
        graph.meta["optimizer"] = opt.to_config()
        graph.meta["residuals"] = residuals
    save_model(graph, out)
    (out / "train_report.jsonl").write_text(report.to_lines())
    for r in report.epochs:
        stream.write(f"epoch {r.epoch}: data {r.data_loss:.6e} penalty {r.penalty:.6e} total {r.total:.6e}\n")
    return EXIT_OK


def cmd_export(cfg: CommandConfig, stream) -> int:
    graph = export_for_inference(load_model(cfg.model[0]))
    paths = save_model(graph, cfg.out)
    stream.write(f"exported {len(paths) - 1} blobs to {cfg.out}\n")
    return EXIT_OK


def cmd_report(cfg: CommandConfig, stream) -> int:
    if not cfg.model:
        raise ValidationFailure("report needs at least one --model")
    rows = []
    for path in cfg.model:
        s = model_summary(load_model(path))
        rows.append([Path(path).name, s["params"], s["params_original"], f"{s['ratio']:.12f}",
                     s["macs"], f"{s['residual']:.6e}"])
    _emit(rows, ["model", "params", "params_original", "ratio", "macs", "residual"], cfg.fmt, stream)
    return EXIT_OK


COMMANDS = {
    "make-toy": cmd_make_toy,
    "make-dataset": cmd_make_dataset,
    "plan": cmd_plan,
    "decompose": cmd_decompose,
    "verify": cmd_verify,
    "train": cmd_train,
    "export": cmd_export,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filterbasis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help, model=True, out=False, model_many=False):
        sp = sub.add_parser(name, help=help)
        if model_many:
            sp.add_argument("--model", action="append", required=True, help="model directory (repeatable)")
        elif model:
            sp.add_argument("--model", action="append", required=True, help="model directory")
        if out:
            sp.add_argument("--out", required=True, help="output path")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--format", dest="fmt", choices=("text", "csv"), default="text")
        sp.add_argument("-v", "--verbose", action="count", default=0)
        return sp

    sp = add("make-toy", "write a seeded toy model", model=False, out=True)
    sp.add_argument("--preset", required=True, choices=sorted(zoo.PRESETS))
    sp = add("make-dataset", "label random inputs with a model", out=True)
    sp.add_argument("--samples", type=int, default=32)
    sp = add("plan", "choose m/s/sharing and print the budget")
    sp.add_argument("--out", help="write the model with the plan attached here")
    sp.add_argument("--m", type=_parse_m, required=True, help="basis size, or comma list per group")
    sp.add_argument("--s", type=_parse_s, default=1, help="split count or 'auto'")
    sp.add_argument("--p", type=int, help="split depth (alternative to --s)")
    sp.add_argument("--share", choices=("none", "block", "group", "network"), default="none")
    sp.add_argument("--total-splits", type=int)
    add("decompose", "fit bases/coefficients for a planned model", out=True)
    sp = add("verify", "check decomposed against reconstructed convolutions")
    sp.add_argument("--original", help="uncompressed model (needed once references were exported away)")
    sp = add("train", "fine-tune bases and coefficients", out=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--gamma", type=float, default=1e-2)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--momentum", type=float, default=0.0)
    sp.add_argument("--decay-epochs", type=lambda t: tuple(int(v) for v in t.split(",") if v), default=())
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--loss", choices=("mse", "cross_entropy"), default="mse")
    add("export", "drop reference weights for inference", out=True)
    add("report", "parameter/MAC summary of one or more models", model_many=True)
    return parser


def _config(ns: argparse.Namespace) -> CommandConfig:
    known = {f for f in CommandConfig.__dataclass_fields__}
    kwargs = {k: v for k, v in vars(ns).items() if k in known and v is not None}
    return CommandConfig(**kwargs)


def main(argv: Optional[Sequence[str]] = None, stream=None) -> int:
    stream = stream or sys.stdout
    parser = build_parser()
    ns = parser.parse_args(argv)
    level = os.environ.get("BASIS_LOG", "WARNING").upper()
    if ns.verbose:
        level = "DEBUG" if ns.verbose > 1 else "INFO"
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(getattr(logging, level, logging.WARNING))
    try:
        cfg = _config(ns)
        return COMMANDS[cfg.command](cfg, stream)
    except (ValidationFailure, PlanError, ModelIOError, ShapeError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalFailure, NonFiniteError, ConvergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
