"""Joint fine-tuning of bases and coefficients.

The objective is a task term (mean squared error or cross-entropy) plus
``gamma * sum_l ||W_l - B_l A_l||_F^2`` where ``W_l`` are the weights the layer
was decomposed from, compared in split-matrix space. Everything outside
{B, A} stays frozen. Optimisation is plain SGD (optionally with momentum)
with a step-decay learning rate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .decomposed_conv import NonFiniteError
from .decomposer import split_and_flatten
from .graph import ModelGraph

__all__ = [
    "LossSpec",
    "OptimizerState",
    "EpochRecord",
    "TrainReport",
    "TrainingDiverged",
    "data_loss",
    "penalty",
    "joint_loss",
    "backward",
    "train",
    "export_for_inference",
    "penalty_residuals",
]

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class LossSpec:
    kind: str = "mse"  # "mse" | "cross_entropy"
    gamma: float = 1e-2
    data_term: bool = True
    references: Optional[dict[str, np.ndarray]] = None  # layer -> W; default: graph's stored references

    def __post_init__(self):
        if self.kind not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class OptimizerState:
    lr: float = 1e-4
    decay_factor: float = 10.0
    decay_epochs: tuple = ()
    momentum: float = 0.0
    seed: int = 0
    step: int = 0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in (0-based) ``epoch``: divided by the factor at every decay epoch passed."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        lr = self.lr
        for _ in range(drops):
            lr = lr / self.decay_factor
        return lr

    def to_config(self) -> dict:
        return {
            "lr": self.lr,
            "decay_factor": self.decay_factor,
            "decay_epochs": list(self.decay_epochs),
            "momentum": self.momentum,
            "seed": self.seed,
        }


@dataclass
class EpochRecord:
    epoch: int
    data_loss: float
    penalty: float
    total: float
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    residuals: dict[str, float] = field(default_factory=dict)
    steps: int = 0

    def to_lines(self) -> str:
        lines = [
            json.dumps({"epoch": r.epoch, "data_loss": r.data_loss, "penalty": r.penalty,
                        "total": r.total, "lr": r.lr})
            for r in self.epochs
        ]
        lines.append(json.dumps({"final_residuals": self.residuals, "steps": self.steps}, sort_keys=True))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- loss

def _references(graph: ModelGraph, spec: LossSpec) -> dict[str, np.ndarray]:
    if spec.references is not None:
        return spec.references
    refs = {}
    for layer in graph.decomposed_layers():
        key = layer.params.get("reference")
        if key is not None:
            refs[layer.name] = graph.params[key]
    return refs


def data_loss(out: np.ndarray, y: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Task loss and its gradient w.r.t. the network output."""
    if kind == "mse":
        y = np.asarray(y, dtype=np.float64)
        if y.shape != out.shape:
            raise ValueError(f"target shape {y.shape} does not match output {out.shape}")
        diff = out - y
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    labels = np.asarray(y).astype(np.int64).reshape(-1)
    if out.ndim != 2 or labels.shape[0] != out.shape[0]:
        raise ValueError(f"cross-entropy needs (N, classes) logits and N labels, got {out.shape}, {labels.shape}")
    shifted = out - out.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = out.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _penalty_terms(graph: ModelGraph, refs: dict[str, np.ndarray]):
    for layer in graph.decomposed_layers():
        ref = refs.get(layer.name)
        if ref is None:
            continue
        dl = graph.decomposed(layer)
        target = split_and_flatten(ref, dl.s).mat
        b = dl.basis.matrix
        a = dl.coeffs.mat
        yield layer, dl, b, a, b @ a - target


def penalty(graph: ModelGraph, spec: LossSpec) -> float:
    refs = _references(graph, spec)
    return spec.gamma * sum(float(np.sum(r * r)) for *_, r in _penalty_terms(graph, refs))


def penalty_residuals(graph: ModelGraph, spec: Optional[LossSpec] = None) -> dict[str, float]:
    refs = _references(graph, spec or LossSpec())
    return {layer.name: float(np.linalg.norm(r)) for layer, *_, r in _penalty_terms(graph, refs)}


def joint_loss(graph: ModelGraph, batch, spec: LossSpec) -> float:
    x, y = batch
    total = penalty(graph, spec)
    if spec.data_term:
        total += data_loss(graph.forward(x), y, spec.kind)[0]
    if not np.isfinite(total):
        raise NonFiniteError("non-finite loss")
    return total


def backward(graph: ModelGraph, batch, spec: LossSpec, wrt: Optional[Iterable[str]] = None,
             return_terms: bool = False):
    """Reverse-mode gradients of ``joint_loss`` for the trainable {B, A} (or ``wrt``)."""
    x, y = batch
    names = set(graph.trainable_names() if wrt is None else wrt)
    grads: dict[str, np.ndarray] = {}
    dloss = 0.0
    if spec.data_term:
        tape: list = []
        out = graph.forward(x, tape)
        dloss, dout = data_loss(out, y, spec.kind)
        grads = graph.backward(dout, tape, names)
    pen = 0.0
    if spec.gamma > 0:
        for layer, dl, b, a, r in _penalty_terms(graph, _references(graph, spec)):
            pen += spec.gamma * float(np.sum(r * r))
            gb = 2.0 * spec.gamma * (r @ a.T)  # (p*h*w, m)
            ga = 2.0 * spec.gamma * (b.T @ r)
            bkey, akey = layer.params["basis"], layer.params["coeffs"]
            if bkey in names:
                gt = gb.T.reshape(dl.basis.tensor.shape)
                dst = grads.setdefault(bkey, np.zeros_like(graph.params[bkey]))
                dst[:, : gt.shape[1]] += gt
            if akey in names:
                grads.setdefault(akey, np.zeros_like(graph.params[akey]))
                grads[akey] += ga
    for key in names:
        g = grads.setdefault(key, np.zeros_like(graph.params[key]))
        if not np.all(np.isfinite(g)):
            owner = next((l.name for l in graph.layers if key in l.params.values()), key)
            raise NonFiniteError(f"non-finite gradient for {key}", owner)
    if return_terms:
        return grads, dloss, pen
    return grads


# ---------------------------------------------------------------------- loop

def _iter_batches(dataset, seed: int) -> Sequence:
    if hasattr(dataset, "batches"):
        return dataset.batches(seed=seed)
    return list(dataset)


def train(graph: ModelGraph, dataset, spec: LossSpec, opt: OptimizerState, epochs: int,
          params: Optional[Iterable[str]] = None, max_steps: Optional[int] = None) -> TrainReport:
    """SGD over ``epochs`` passes; updates ``graph`` in place and returns the per-epoch log.

    ``dataset`` is either an object with ``batches(seed=...)`` (reshuffled each
    epoch with ``opt.seed + epoch``) or a fixed sequence of (x, y) batches.
    """
    names = list(graph.trainable_names() if params is None else params)
    report = TrainReport()
    for epoch in range(epochs):
        lr = opt.lr_at(epoch)
        batches = _iter_batches(dataset, opt.seed + epoch)
        if not batches:
            raise ValueError("dataset is empty")
        data_sum = pen_sum = 0.0
        done = 0
        for batch in batches:
            grads, dloss, pen = backward(graph, batch, spec, names, return_terms=True)
            data_sum += dloss
            pen_sum += pen
            if not np.isfinite(dloss + pen) or dloss + pen > DIVERGENCE_LIMIT:
                report.residuals = penalty_residuals(graph, spec)
                raise TrainingDiverged(f"loss {dloss + pen:.3e} at step {opt.step}", report)
            for key in names:
                g = grads[key]
                if opt.momentum:
                    v = opt.velocity.get(key)
                    v = g.copy() if v is None else opt.momentum * v + g
                    opt.velocity[key] = v
                    g = v
                graph.params[key] -= lr * g
            opt.step += 1
            report.steps += 1
            done += 1
            if max_steps is not None and report.steps >= max_steps:
                break
        record = EpochRecord(epoch, data_sum / done, pen_sum / done, (data_sum + pen_sum) / done, lr)
        report.epochs.append(record)
        if max_steps is not None and report.steps >= max_steps:
            break
    report.residuals = penalty_residuals(graph, spec)
    return report


def export_for_inference(graph: ModelGraph) -> ModelGraph:
    """Copy holding only {B, A} and the frozen parameters; reference weights and optimizer state dropped."""
    out = graph.copy()
    for layer in out.layers:
        layer.params.pop("reference", None)
    live = set(out.referenced_params())
    out.params = {k: v for k, v in out.params.items() if k in live}
    out.meta.pop("optimizer", None)
    out.meta["exported"] = True
    return out
