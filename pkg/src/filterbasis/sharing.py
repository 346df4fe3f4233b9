"""Sharing plans: which layers use one basis, with what m and split depth.

Strategies:

* ``none``    every layer has its own basis (singleton groups)
* ``block``   the convolutions of one residual block share a basis
* ``group``   user-given partitions (e.g. the three stages of a ResNet) share a basis
* ``network`` DenseNet-style: one network-wide basis cut into ``total_splits``
  channel chunks; layer ``l`` uses the prefix covering its ``c_l`` input channels.

Graph annotations used: ``attrs["block"]``, ``attrs["group"]`` and
``attrs["compress"]`` (default true) on conv layers.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .graph import Layer, ModelGraph
from .planner import (
    Budget,
    DecompositionPlan,
    LayerShape,
    PlanEntry,
    PlanError,
    count_params,
    count_params_sliced,
    optimal_split,
)

__all__ = [
    "ShareGroup",
    "SharingPlan",
    "SharingError",
    "Violation",
    "candidate_layers",
    "plan_no_sharing",
    "plan_block_sharing",
    "plan_group_sharing",
    "plan_network_sharing_dense",
    "resnet_group_boundaries",
    "plan_stage_sharing",
    "group_budget",
    "plan_budget",
    "to_decomposition_plan",
    "validate",
]

SplitArg = Union[int, str, tuple]  # s, "auto", or ("p", depth)


class SharingError(PlanError):
    pass


@dataclass
class ShareGroup:
    id: str
    members: list[str]
    m: int
    p: int  # split depth; for sliced groups the per-split channel depth
    splits: dict[str, int] = field(default_factory=dict)  # member -> s
    slice_widths: Optional[list[int]] = None  # sliced strategy: splits of the shared basis per member
    channels: Optional[list[int]] = None  # sliced strategy: channel prefix per member
    total_splits: Optional[int] = None

    @property
    def sliced(self) -> bool:
        return self.slice_widths is not None

    @property
    def basis_depth(self) -> int:
        return self.p * self.total_splits if self.sliced else self.p


@dataclass
class SharingPlan:
    strategy: str
    groups: list[ShareGroup] = field(default_factory=list)

    def group_of(self, layer: str) -> Optional[ShareGroup]:
        for g in self.groups:
            if layer in g.members:
                return g
        return None


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str


def candidate_layers(graph: ModelGraph) -> list[Layer]:
    return [
        l for l in graph.layers
        if (l.kind == "conv" and l.attrs.get("compress", True)) or l.kind == "decomposed_conv"
    ]


def _shape(graph: ModelGraph, name: str) -> LayerShape:
    return graph.conv_shape(graph.layer(name))


def _group_split(graph: ModelGraph, members: Sequence[str], m: int, s: SplitArg) -> tuple[int, dict[str, int]]:
    """Shared split depth p for a group, and each member's split count.

    An explicit ``s`` applies to every member, so members must agree on
    ``c / s``. With ``"auto"`` the depth comes from the first member's optimal
    split and every member uses as many splits as that depth allows.
    """
    first = _shape(graph, members[0])
    if isinstance(s, tuple):  # ("p", depth): fixed split depth
        p = int(s[1])
        if p < 1 or first.c % p:
            raise SharingError(f"{members[0]}: split depth p={p} does not divide c={first.c}")
        s = "auto"
    elif s == "auto":
        p = optimal_split(first, m)[3]
    else:
        s = int(s)
        if s < 1 or first.c % s:
            raise SharingError(f"{members[0]}: s={s} does not divide c={first.c}")
        p = first.c // s
    splits = {}
    for name in members:
        sh = _shape(graph, name)
        if s == "auto":
            if sh.c % p:
                raise SharingError(f"{name}: split depth p={p} does not divide c={sh.c}")
            splits[name] = sh.c // p
        elif sh.c % s or sh.c // s != p:
            raise SharingError(
                f"{members[0]} (c={first.c}) and {name} (c={sh.c}) need different "
                f"basis sizes p*w*h with s={s}"
            )
        else:
            splits[name] = s
    return p, splits


def _cap_m(graph: ModelGraph, members: Sequence[str], m: int, p: int, splits: dict[str, int]) -> int:
    sh = _shape(graph, members[0])
    rows = p * sh.w * sh.h
    cols = sum(_shape(graph, n).n * splits[n] for n in members)
    return min(m, rows, cols)


def _make_group(graph: ModelGraph, gid: str, members: list[str], m: int, s: SplitArg) -> ShareGroup:
    kernels = {(_shape(graph, n).w, _shape(graph, n).h) for n in members}
    if len(kernels) > 1:
        raise SharingError(f"group {gid}: members have different kernel sizes {sorted(kernels)}")
    p, splits = _group_split(graph, members, m, s)
    return ShareGroup(gid, list(members), _cap_m(graph, members, m, p, splits), p, splits)


def _per_group(values: Union[int, Sequence[int]], count: int, what: str) -> list[int]:
    if isinstance(values, int):
        return [values] * count
    values = list(values)
    if len(values) != count:
        raise SharingError(f"{what}: got {len(values)} values for {count} groups")
    return values


def plan_no_sharing(graph: ModelGraph, m: Union[int, Sequence[int]], s: SplitArg = 1) -> SharingPlan:
    layers = candidate_layers(graph)
    ms = _per_group(m, len(layers), "m")
    return SharingPlan("none", [
        _make_group(graph, l.name, [l.name], mi, s) for l, mi in zip(layers, ms)
    ])


def plan_block_sharing(graph: ModelGraph, m: Union[int, Sequence[int]], s: SplitArg = 1) -> SharingPlan:
    """One group per residual block (``attrs["block"]``); unannotated layers stay alone."""
    layers = candidate_layers(graph)
    if not any("block" in l.attrs for l in layers):
        raise SharingError("graph has no residual-block annotations (attrs['block'])")
    blocks: "OrderedDict[str, list[str]]" = OrderedDict()
    for l in layers:
        key = f"block:{l.attrs['block']}" if "block" in l.attrs else l.name
        blocks.setdefault(key, []).append(l.name)
    ms = _per_group(m, len(blocks), "m")
    return SharingPlan("block", [
        _make_group(graph, gid, members, mi, s) for (gid, members), mi in zip(blocks.items(), ms)
    ])


def plan_group_sharing(graph: ModelGraph, boundaries: Sequence[Sequence[str]],
                       m: Union[int, Sequence[int]], s: SplitArg = 1) -> SharingPlan:
    """Groups given explicitly as lists of layer names; must not overlap."""
    seen: dict[str, int] = {}
    known = {l.name for l in candidate_layers(graph)}
    for gi, members in enumerate(boundaries):
        for name in members:
            if name not in known:
                raise SharingError(f"group {gi}: {name!r} is not a decomposable layer")
            if name in seen:
                raise SharingError(f"{name!r} appears in groups {seen[name]} and {gi}")
            seen[name] = gi
    ms = _per_group(m, len(boundaries), "m")
    groups = []
    for gi, (members, mi) in enumerate(zip(boundaries, ms)):
        if not members:
            continue
        groups.append(_make_group(graph, f"group:{gi}", list(members), mi, s))
    return SharingPlan("group", groups)


def resnet_group_boundaries(graph: ModelGraph) -> list[tuple[object, list[str]]]:
    """(stage, members) partition by ``attrs["group"]``.

    A layer whose input depth differs from the stage's width (the
    stage-transition conv) becomes its own singleton group. Unannotated
    candidates are singletons with stage ``None``.
    """
    stages: "OrderedDict[object, list[Layer]]" = OrderedDict()
    loose = []
    for l in candidate_layers(graph):
        if "group" in l.attrs:
            stages.setdefault(l.attrs["group"], []).append(l)
        else:
            loose.append((None, [l.name]))
    out = []
    for stage, layers in stages.items():
        depths = [graph.conv_shape(l).c for l in layers]
        widths = [graph.conv_shape(l).n for l in layers]
        common = max(sorted(set(widths)), key=widths.count)
        out.extend((stage, [l.name]) for l, c in zip(layers, depths) if c != common)
        out.append((stage, [l.name for l, c in zip(layers, depths) if c == common]))
    return out + loose


def plan_stage_sharing(graph: ModelGraph, m: Union[int, Sequence[int]], s: SplitArg = 1) -> SharingPlan:
    """Group sharing over annotated stages, ``m`` given per stage (in stage order)."""
    parts = resnet_group_boundaries(graph)
    stages = list(OrderedDict.fromkeys(st for st, _ in parts if st is not None))
    if not stages:
        raise SharingError("graph has no stage annotations (attrs['group'])")
    per_stage = dict(zip(stages, _per_group(m, len(stages), "m")))
    fallback = max(per_stage.values())
    return plan_group_sharing(
        graph, [members for _, members in parts], [per_stage.get(st, fallback) for st, _ in parts], s
    )


def plan_network_sharing_dense(graph: ModelGraph, total_splits: int, m: int) -> SharingPlan:
    """One basis for all layers; layer ``l`` uses ceil(c_l / depth) of ``total_splits`` splits."""
    layers = candidate_layers(graph)
    if not layers:
        return SharingPlan("network")
    shapes = [graph.conv_shape(l) for l in layers]
    chans = [sh.c for sh in shapes]
    steps = {b - a for a, b in zip(chans[:-1], chans[1:])}
    if any(st <= 0 for st in steps) or len(steps) > 1:
        raise SharingError(f"input channels must grow by a constant positive step, got {chans}")
    if total_splits < 1 or chans[-1] % total_splits:
        raise SharingError(f"total_splits={total_splits} must divide the last layer's depth {chans[-1]}")
    if len({(sh.w, sh.h) for sh in shapes}) > 1:
        raise SharingError("network-wide sharing needs one kernel size")
    depth = chans[-1] // total_splits
    widths = [math.ceil(c / depth) for c in chans]
    sh = shapes[-1]
    m = min(m, depth * total_splits * sh.w * sh.h, sum(x.n for x in shapes))
    group = ShareGroup(
        "network:0",
        [l.name for l in layers],
        m,
        depth,
        splits={l.name: 1 for l in layers},
        slice_widths=widths,
        channels=chans,
        total_splits=total_splits,
    )
    return SharingPlan("network", [group])


# ---------------------------------------------------------------------- budgets

def group_budget(graph: ModelGraph, group: ShareGroup) -> Budget:
    shapes = [_shape(graph, n) for n in group.members]
    if group.sliced:
        return count_params_sliced(shapes, group.m, group.basis_depth)
    if len(set(shapes)) == 1:
        return count_params(shapes[0], group.m, group.splits[group.members[0]], len(shapes))
    total = Budget()
    for i, (name, sh) in enumerate(zip(group.members, shapes)):
        b = count_params(sh, group.m, group.splits[name])
        if i:  # basis stored once
            b = Budget(b.params_original, b.params_compressed - group.m * group.p * sh.w * sh.h)
        total = total + b
    return total


def plan_budget(graph: ModelGraph, plan: SharingPlan) -> Budget:
    total = Budget()
    for g in plan.groups:
        total = total + group_budget(graph, g)
    return total


def to_decomposition_plan(plan: SharingPlan, graph: ModelGraph) -> DecompositionPlan:
    entries = []
    for g in plan.groups:
        shared = g.id if (len(g.members) > 1 or g.sliced) else None
        for name in g.members:
            s = g.splits[name]
            entries.append(PlanEntry(name, g.m, s, _shape(graph, name).c // s, shared))
    return DecompositionPlan(entries, {"strategy": plan.strategy})


# ---------------------------------------------------------------------- validation

def validate(plan: SharingPlan, graph: ModelGraph) -> list[Violation]:
    out: list[Violation] = []
    owner: dict[str, str] = {}
    names = {l.name for l in graph.layers}
    for g in plan.groups:
        for name in g.members:
            if name in owner:
                out.append(Violation("multi-membership", f"{name} in {owner[name]} and {g.id}"))
            owner[name] = g.id
            if name not in names:
                out.append(Violation("unknown-layer", f"{g.id}: {name}"))
        if any(n not in names for n in g.members):
            continue
        if g.m < 1:
            out.append(Violation("m-range", f"{g.id}: m={g.m}"))
        shapes = {n: _shape(graph, n) for n in g.members}
        if g.sliced:
            w = g.slice_widths or []
            if len(w) != len(g.members):
                out.append(Violation("slice-count", f"{g.id}: {len(w)} widths for {len(g.members)} members"))
            if any(b < a for a, b in zip(w[:-1], w[1:])):
                out.append(Violation("slice-order", f"{g.id}: widths {w} decrease"))
            if w and (min(w) < 1 or max(w) > g.total_splits):
                out.append(Violation("slice-range", f"{g.id}: widths {w} outside [1, {g.total_splits}]"))
            for name, k, c in zip(g.members, w, g.channels or []):
                if shapes[name].c != c or c > k * g.p:
                    out.append(Violation("slice-depth", f"{name}: c={shapes[name].c}, slice {k}x{g.p}"))
        else:
            sizes = {}
            for name, sh in shapes.items():
                s = g.splits.get(name, 0)
                if s < 1 or sh.c % s:
                    out.append(Violation("split", f"{name}: s={s} does not divide c={sh.c}"))
                    continue
                sizes[name] = (sh.c // s) * sh.w * sh.h
            if len(set(sizes.values())) > 1:
                out.append(Violation("basis-size", f"{g.id}: split sizes {sizes}"))
        if out:
            continue
        # independent recount of stored parameters
        first = shapes[g.members[0]]
        basis = g.m * g.basis_depth * first.w * first.h
        coeffs = sum(g.m * shapes[n].n * g.splits[n] for n in g.members)
        predicted = group_budget(graph, g).params_compressed
        if basis + coeffs != predicted:
            out.append(Violation("param-mismatch", f"{g.id}: counted {basis + coeffs}, planner {predicted}"))
    return out
