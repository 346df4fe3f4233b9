"""Graph-level steps: plan, decompose, verify and summarise a model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .decomposed_conv import forward as decomposed_forward
from .decomposed_conv import forward_via_reconstruction
from .decomposer import (
    fit,
    fit_shared,
    fit_sliced,
    reconstruct,
    split_and_flatten,
)
from .graph import Layer, ModelGraph
from .model_io import sharing_from_dict, sharing_to_dict
from .planner import Budget, count_flops
from .sharing import (
    SharingError,
    SharingPlan,
    candidate_layers,
    group_budget,
    plan_block_sharing,
    plan_network_sharing_dense,
    plan_no_sharing,
    plan_stage_sharing,
    validate,
)
from .tensor_core import count_macs

__all__ = [
    "PlanRow",
    "make_plan",
    "plan_rows",
    "attach_plan",
    "decompose_graph",
    "VerifyResult",
    "verify_graph",
    "model_summary",
]

VERIFY_TOL = 1e-6


def _safe(name: str) -> str:
    return name.replace(":", "_")


def make_plan(graph: ModelGraph, m: Union[int, list[int]], s: Union[int, str] = 1,
              share: str = "none", total_splits: Optional[int] = None) -> SharingPlan:
    if share == "none":
        return plan_no_sharing(graph, m, s)
    if share == "block":
        return plan_block_sharing(graph, m, s)
    if share == "group":
        return plan_stage_sharing(graph, m, s)
    if share == "network":
        if isinstance(m, list):
            if len(m) != 1:
                raise SharingError("network sharing takes a single m")
            m = m[0]
        if s not in (1, "1", "auto"):
            raise SharingError("network sharing slices full-depth filters; use s=1")
        n_layers = len(candidate_layers(graph))
        return plan_network_sharing_dense(graph, total_splits or n_layers, m)
    raise SharingError(f"unknown sharing strategy {share!r}")


@dataclass
class PlanRow:
    label: str
    m: int
    s: int
    p: int
    params: int
    original: int
    macs: int
    macs_original: int

    @property
    def rate(self) -> float:
        return self.params / self.original if self.original else 0.0


def _out_hw(graph: ModelGraph) -> dict[str, tuple[int, int]]:
    return {l.name: (shape[1], shape[2])
            for l, shape in zip(graph.layers, graph.infer_shapes()) if len(shape) == 3}


def plan_rows(graph: ModelGraph, plan: SharingPlan) -> tuple[list[PlanRow], Budget]:
    """Per-layer rows (coefficients, plus the basis when it is not shared) and shared-basis rows."""
    hw = _out_hw(graph)
    rows = []
    total = Budget()
    for g in plan.groups:
        shared = len(g.members) > 1 or g.sliced
        for name in g.members:
            sh = graph.conv_shape(graph.layer(name))
            s = g.splits[name]
            oh, ow = hw[name]
            if g.sliced:
                basis_macs = g.m * sh.c * sh.w * sh.h * oh * ow
                macs = basis_macs + sh.n * g.m * oh * ow
            else:
                macs = count_flops(sh, g.m, s, oh, ow).flops_compressed
            coeff = g.m * sh.n * s
            basis = 0 if shared else g.m * g.p * sh.w * sh.h
            rows.append(PlanRow(name, g.m, s, sh.c // s, coeff + basis, sh.params, macs, sh.params * oh * ow))
        gb = group_budget(graph, g)
        if shared:
            first = graph.conv_shape(graph.layer(g.members[0]))
            rows.append(PlanRow(f"[basis {g.id}]", g.m, 0, g.basis_depth,
                                g.m * g.basis_depth * first.w * first.h, 0, 0, 0))
        total = total + gb
    macs = sum(r.macs for r in rows)
    macs_orig = sum(r.macs_original for r in rows)
    total = Budget(total.params_original, total.params_compressed, macs_orig, macs)
    if sum(r.params for r in rows) != total.params_compressed:
        raise AssertionError("plan rows do not add up to the planner budget")
    return rows, total


def attach_plan(graph: ModelGraph, plan: SharingPlan) -> ModelGraph:
    problems = validate(plan, graph)
    if problems:
        raise SharingError("; ".join(f"{v.code}: {v.detail}" for v in problems))
    out = graph.copy()
    out.meta["sharing"] = sharing_to_dict(plan)
    return out


def _decomposed_layer(layer: Layer, basis_key: str, s: int, group_id: Optional[str],
                      channels: Optional[int], residual: float) -> Layer:
    params = {"basis": basis_key, "coeffs": f"{layer.name}.coeffs", "reference": f"{layer.name}.reference"}
    if "bias" in layer.params:
        params["bias"] = layer.params["bias"]
    attrs = {k: v for k, v in layer.attrs.items() if k != "compress"}
    attrs.update({"s": s, "stride": layer.stride, "pad": layer.pad, "residual": residual})
    if group_id is not None:
        attrs["share_group"] = group_id
    if channels is not None:
        attrs["basis_channels"] = channels
    return Layer(layer.name, "decomposed_conv", params, attrs)


def decompose_graph(graph: ModelGraph, plan: Optional[SharingPlan] = None) -> ModelGraph:
    """Replace every planned conv by a decomposed conv fitted with truncated SVD.

    The original weights are kept as ``<layer>.reference`` blobs (targets of
    the fine-tuning penalty); ``export_for_inference`` drops them.
    """
    if plan is None:
        if "sharing" not in graph.meta:
            raise SharingError("model has no decomposition plan; run `plan` first")
        plan = sharing_from_dict(graph.meta["sharing"])
    problems = validate(plan, graph)
    if problems:
        raise SharingError("; ".join(f"{v.code}: {v.detail}" for v in problems))
    out = graph.copy()
    replaced: dict[str, Layer] = {}
    residuals = {}
    for g in plan.groups:
        layers = [out.layer(n) for n in g.members]
        for l in layers:
            if l.kind != "conv":
                raise SharingError(f"{l.name} is already decomposed")
        weights = [out.params[l.params["weight"]] for l in layers]
        shared = len(layers) > 1 or g.sliced
        gid = g.id if shared else None
        if g.sliced:
            basis, coeffs, total = fit_sliced(weights, g.m, g.basis_depth, group_id=g.id)
            channels = list(g.channels)
        elif shared:
            sms = [split_and_flatten(w, g.splits[l.name]) for l, w in zip(layers, weights)]
            basis, coeffs, total = fit_shared(sms, g.m, group_id=g.id)
            channels = [None] * len(layers)
        else:
            res = fit(split_and_flatten(weights[0], g.splits[layers[0].name]), g.m)
            basis, coeffs, total = res.basis, [res.coeffs], res.residual
            channels = [None]
        basis_key = f"{_safe(g.id)}.basis" if shared else f"{layers[0].name}.basis"
        out.params[basis_key] = basis.tensor.copy()
        for l, w, a, ch in zip(layers, weights, coeffs, channels):
            sub = basis if ch is None else type(basis)(basis.tensor[:, :ch])
            r = float(np.linalg.norm(w - reconstruct(sub, a, out.conv_shape(l), a.s)))
            new = _decomposed_layer(l, basis_key, a.s, gid, ch, r)
            out.params[f"{l.name}.coeffs"] = a.mat.copy()
            out.params[f"{l.name}.reference"] = w.copy()
            replaced[l.name] = new
            residuals[l.name] = r
        residuals[f"group:{g.id}"] = total
    out.layers = [replaced.get(l.name, l) for l in out.layers]
    live = set(out.referenced_params())
    out.params = {k: v for k, v in out.params.items() if k in live}
    out.meta["residuals"] = residuals
    out.infer_shapes()
    return out


@dataclass
class VerifyResult:
    layer: str
    rel_error: float
    residual_drift: Optional[float]
    ok: bool
    reason: str = ""


def verify_graph(graph: ModelGraph, original: Optional[ModelGraph] = None, seed: int = 0,
                 tol: float = VERIFY_TOL) -> list[VerifyResult]:
    """Check each decomposed layer: decomposed vs reconstructed forward, and
    ``||W - B A||`` against the residual recorded when it was fitted."""
    rng = np.random.default_rng(seed)
    shapes = [tuple(graph.input_shape)] + graph.infer_shapes()[:-1]
    out = []
    for layer, in_shape in zip(graph.layers, shapes):
        if layer.kind != "decomposed_conv":
            continue
        dl = graph.decomposed(layer)
        x = rng.standard_normal((2,) + tuple(in_shape))
        reason = ""
        try:
            a = decomposed_forward(x, dl)
            b = forward_via_reconstruction(x, dl)
            denom = np.linalg.norm(b)
            rel = float(np.linalg.norm(a - b) / denom) if denom > 0 else float(np.linalg.norm(a - b))
        except FloatingPointError as exc:
            rel, reason = math.inf, str(exc)
        ok = rel <= tol
        if not ok and not reason:
            reason = f"decomposed vs reconstructed error {rel:.3e} > {tol:.0e}"
        drift = None
        ref = graph.param(layer, "reference")
        if ref is None and original is not None:
            try:
                orig = original.layer(layer.name)
                ref = original.params[orig.params["weight"]] if orig.kind == "conv" else None
            except KeyError:
                ref = None
        recorded = layer.attrs.get("residual")
        if ref is not None and recorded is not None and ok:
            actual = float(np.linalg.norm(ref - dl.reconstructed_weight()))
            scale = max(float(np.linalg.norm(ref)), 1e-300)
            drift = abs(actual - float(recorded)) / scale
            if not np.isfinite(drift) or drift > tol:
                ok = False
                reason = f"residual {actual:.6e} differs from recorded {float(recorded):.6e}"
        out.append(VerifyResult(layer.name, rel, drift, ok, reason))
    return out


def model_summary(graph: ModelGraph) -> dict:
    """Parameter and MAC totals over the compressible convolutions."""
    compressed = 0
    original = 0
    seen_basis: set[str] = set()
    residual_sq = 0.0
    for layer in graph.layers:
        if layer.kind == "conv" and layer.attrs.get("compress", True):
            size = graph.params[layer.params["weight"]].size
            compressed += size
            original += size
        elif layer.kind == "decomposed_conv":
            key = layer.params["basis"]
            if key not in seen_basis:
                seen_basis.add(key)
                compressed += graph.params[key].size
            compressed += graph.params[layer.params["coeffs"]].size
            original += graph.conv_shape(layer).params
            residual_sq += float(layer.attrs.get("residual", 0.0)) ** 2
    with count_macs() as counter:
        graph.forward(np.zeros((1,) + tuple(graph.input_shape)))
    return {
        "params": compressed,
        "params_original": original,
        "ratio": compressed / original if original else 0.0,
        "macs": counter.total,
        "residual": math.sqrt(residual_sq),
        "layers": len(graph.layers),
    }
