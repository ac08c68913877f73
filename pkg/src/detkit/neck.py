"""Feature-fusion neck graphs: FPN, PAFPN, BiFPN-style and GFPN variants.

A neck is described declaratively by a :class:`NeckGraphSpec`:

* ``levels`` are pyramid levels listed finest first (P2, P3, ...). For a level
  ``k`` the *upper* neighbour is level ``k - 1`` (finer, reached by
  downsampling) and the *lower* neighbour is level ``k + 1`` (coarser, reached
  by nearest upsampling).
* Backbone features occupy layer 0 of every level and are named after it.
* Fusion nodes sit at (level, layer) and run either top-down (``td``) or
  bottom-up (``bu``). Inside a top-down layer coarser nodes are evaluated
  first, so a node may take its lower neighbour from its own layer; a
  bottom-up layer mirrors that for the upper neighbour.
* Unless a node lists explicit ``inputs``, its sources come from
  ``link_policy``: ``fpn``, ``pafpn``, ``queen_fusion``, or ``log2n`` /
  ``dense`` (queen fusion plus same-level skip links across layers).

Every node concatenates its (resampled) sources and runs one fusion block.
"""

from __future__ import annotations

import graphlib
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .blocks import C2fBlock, ConvBlock, SPPFBlock, c2f_ema
from .tensor import DimensionError

LINK_POLICIES = ("fpn", "pafpn", "queen_fusion", "log2n", "dense")
FUSION_OPS = ("c2f", "c2f_ema", "conv3x3")
DEFAULT_STRIDES = (4, 8, 16, 32)


class GraphError(ValueError):
    """Invalid neck graph; ``diagnostics`` lists every problem found."""

    def __init__(self, message: str, diagnostics: Iterable["Diagnostic"] = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


@dataclass(frozen=True)
class Diagnostic:
    node: str
    message: str

    def __str__(self) -> str:
        return f"{self.node}: {self.message}"


@dataclass(frozen=True)
class Level:
    name: str
    stride: int
    channels: int


@dataclass(frozen=True)
class NodeSpec:
    name: str
    level: str
    layer: int
    op: str = "c2f"
    out_channels: int = 0
    in_channels: int | None = None
    direction: str = "td"
    inputs: tuple[str, ...] | None = None


@dataclass(frozen=True)
class NeckGraphSpec:
    name: str
    levels: tuple[Level, ...]
    nodes: tuple[NodeSpec, ...]
    heads: dict[str, str]
    link_policy: str = "log2n"
    prune_upsample: bool = False
    num_classes: int = 10
    head_channels: int = 16
    c2f_n: int = 1
    ema_groups: int = 8
    notices: tuple[str, ...] = ()

    def level(self, name: str) -> Level:
        for lv in self.levels:
            if lv.name == name:
                return lv
        raise KeyError(name)

    def level_index(self, name: str) -> int:
        return [lv.name for lv in self.levels].index(name)

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def with_node(self, name: str, **changes) -> "NeckGraphSpec":
        """Copy with one node's fields replaced."""
        nodes = tuple(replace(n, **changes) if n.name == name else n for n in self.nodes)
        if nodes == self.nodes and not any(n.name == name for n in self.nodes):
            raise KeyError(name)
        return replace(self, nodes=nodes)


# ---------------------------------------------------------------------------
# link policies


def log2n_sources(l: int) -> list[int]:
    """Layers feeding layer ``l`` under log2(n) links: l - 2^i for 2^i <= l."""
    if l < 1:
        raise ValueError(f"layer index must be >= 1, got {l}")
    out, step = [], 1
    while step <= l:
        out.append(l - step)
        step *= 2
    return out


def dense_sources(l: int) -> list[int]:
    if l < 1:
        raise ValueError(f"layer index must be >= 1, got {l}")
    return list(range(l))


def _positions(spec: NeckGraphSpec) -> dict[tuple[int, int], str]:
    pos = {(k, 0): lv.name for k, lv in enumerate(spec.levels)}
    for n in spec.nodes:
        pos[(spec.level_index(n.level), n.layer)] = n.name
    return pos


def _latest(pos, k: int, max_layer: int) -> str | None:
    layers = [l for (kk, l) in pos if kk == k and l <= max_layer]
    return pos[(k, max(layers))] if layers else None


def node_sources(spec: NeckGraphSpec, node: NodeSpec, prune: bool | None = None) -> list[str]:
    """Source names of one node, explicit inputs taking precedence over policy."""
    if node.inputs is not None:
        return list(node.inputs)
    policy = spec.link_policy
    if policy not in LINK_POLICIES:
        raise GraphError(f"unknown link policy {policy!r}", [Diagnostic(node.name, f"unknown link policy {policy!r}")])
    prune = spec.prune_upsample if prune is None else prune
    pos = _positions(spec)
    k, l = spec.level_index(node.level), node.layer
    td = node.direction == "td"
    n_levels = len(spec.levels)

    srcs = [_latest(pos, k, l - 1)]
    upper = _latest(pos, k - 1, l - 1 if td else l) if k > 0 else None
    lower = _latest(pos, k + 1, l if td else l - 1) if k + 1 < n_levels else None
    if policy == "fpn":
        srcs.append(lower if td else upper)
    elif policy == "pafpn":
        srcs.append(lower if td else upper)
    else:
        srcs.append(upper)
        if td or not prune:
            srcs.append(lower)
        if policy == "log2n":
            skips = log2n_sources(l)[1:]
        elif policy == "dense":
            skips = dense_sources(l)[:-1]
        else:
            skips = []
        srcs.extend(pos.get((k, s)) for s in skips)

    seen: list[str] = []
    for s in srcs:
        if s is not None and s != node.name and s not in seen:
            seen.append(s)
    return seen


def edges(spec: NeckGraphSpec, prune: bool | None = None) -> dict[str, list[str]]:
    return {n.name: node_sources(spec, n, prune) for n in spec.nodes}


def queen_fusion_edges(spec: NeckGraphSpec, prune: bool | None = None) -> list[tuple[str, str]]:
    """(source, destination) pairs under queen fusion.

    Each node takes its same-level predecessor and its diagonal upper and lower
    neighbours. With ``prune`` the upsampled (lower) input of bottom-up nodes is
    dropped, as in the efficient RepGFPN variant. Explicit node inputs are
    ignored here.
    """
    qspec = replace(spec, link_policy="queen_fusion", nodes=tuple(replace(n, inputs=None) for n in spec.nodes))
    return [(s, n.name) for n in qspec.nodes for s in node_sources(qspec, n, prune)]


# ---------------------------------------------------------------------------
# channel plan and validation


def plan_channels(spec: NeckGraphSpec) -> NeckGraphSpec:
    """Fill every missing ``in_channels`` with the sum of its sources' outputs."""
    out_ch = {lv.name: lv.channels for lv in spec.levels}
    out_ch.update({n.name: n.out_channels for n in spec.nodes})
    src = edges(spec)
    nodes = []
    for n in spec.nodes:
        if n.in_channels is None:
            n = replace(n, in_channels=sum(out_ch.get(s, 0) for s in src[n.name]))
        nodes.append(n)
    return replace(spec, nodes=tuple(nodes))


def _is_pow2_ratio(a: int, b: int) -> bool:
    r = a / b
    return r > 0 and math.log2(r).is_integer()


def validate_channels(spec: NeckGraphSpec) -> list[Diagnostic]:
    """Every violation found, each naming the node at fault; empty means valid."""
    diags: list[Diagnostic] = []
    level_names = [lv.name for lv in spec.levels]
    if len(set(level_names)) != len(level_names):
        diags.append(Diagnostic("levels", "duplicate level names"))
    for a, b in zip(spec.levels, spec.levels[1:]):
        if b.stride <= a.stride:
            diags.append(Diagnostic(b.name, f"stride {b.stride} not coarser than {a.name} stride {a.stride}"))
    for lv in spec.levels:
        if lv.channels < 1 or lv.stride < 1:
            diags.append(Diagnostic(lv.name, "channels and stride must be positive"))

    names = level_names + [n.name for n in spec.nodes]
    if len(set(names)) != len(names):
        diags.append(Diagnostic("nodes", "duplicate node names"))
    known = set(names)
    bad_level = False
    for n in spec.nodes:
        if n.level not in level_names:
            diags.append(Diagnostic(n.name, f"unknown level {n.level!r}"))
            bad_level = True
        if n.op not in FUSION_OPS:
            diags.append(Diagnostic(n.name, f"unknown fusion op {n.op!r}"))
        if n.direction not in ("td", "bu"):
            diags.append(Diagnostic(n.name, f"unknown direction {n.direction!r}"))
        if n.layer < 1:
            diags.append(Diagnostic(n.name, "fusion nodes live at layer >= 1"))
        if n.out_channels < 1:
            diags.append(Diagnostic(n.name, "out_channels must be positive"))
    if bad_level:
        return diags
    if spec.link_policy not in LINK_POLICIES and any(n.inputs is None for n in spec.nodes):
        diags.append(Diagnostic("graph", f"unknown link policy {spec.link_policy!r}"))
        return diags

    src = edges(spec)
    for dst, ss in src.items():
        for s in ss:
            if s not in known:
                diags.append(Diagnostic(dst, f"unknown input {s!r}"))
        if not ss:
            diags.append(Diagnostic(dst, "node has no inputs"))
    if any(d.message.startswith("unknown input") for d in diags):
        return diags

    try:
        order = list(graphlib.TopologicalSorter(src).static_order())
    except graphlib.CycleError as exc:
        cycle = exc.args[1]
        diags.append(Diagnostic(cycle[0], "cycle: " + " -> ".join(cycle)))
        return diags
    del order

    lv_of = {lv.name: lv for lv in spec.levels}
    lv_of.update({n.name: lv_of[n.level] for n in spec.nodes})
    out_ch = {lv.name: lv.channels for lv in spec.levels}
    out_ch.update({n.name: n.out_channels for n in spec.nodes})
    for n in spec.nodes:
        dst_stride = lv_of[n.name].stride
        for s in src[n.name]:
            if not _is_pow2_ratio(lv_of[s].stride, dst_stride):
                diags.append(
                    Diagnostic(n.name, f"input {s} stride {lv_of[s].stride} cannot be resampled to {dst_stride}")
                )
        total = sum(out_ch[s] for s in src[n.name])
        if n.in_channels is not None and n.in_channels != total:
            diags.append(Diagnostic(n.name, f"declares {n.in_channels} input channels, sources concatenate to {total}"))
        if n.op == "c2f_ema":
            hidden = max(1, n.out_channels // 2)
            if hidden % spec.ema_groups:
                diags.append(Diagnostic(n.name, f"C2f-EMA hidden width {hidden} not divisible by {spec.ema_groups} groups"))

    for level, node in spec.heads.items():
        if level not in level_names:
            diags.append(Diagnostic(node, f"head on unknown level {level!r}"))
        elif node not in known:
            diags.append(Diagnostic(node, f"head node for {level} does not exist"))
        elif lv_of[node].name != level:
            diags.append(Diagnostic(node, f"head for {level} is on level {lv_of[node].name}"))
    if not spec.heads:
        diags.append(Diagnostic("graph", "no detection heads"))
    return diags


# ---------------------------------------------------------------------------
# gradient distance


def gradient_distances(spec: NeckGraphSpec, outputs: Iterable[str] | None = None) -> dict[str, int | None]:
    """Shortest edge count from every graph vertex to the nearest output (None if unreachable)."""
    outputs = list(spec.heads.values()) if outputs is None else list(outputs)
    src = edges(spec)
    consumers: dict[str, list[str]] = {lv.name: [] for lv in spec.levels}
    consumers.update({n.name: [] for n in spec.nodes})
    for dst, ss in src.items():
        for s in ss:
            consumers.setdefault(s, []).append(dst)
    # reverse BFS from the outputs along producer links
    dist: dict[str, int | None] = {v: None for v in consumers}
    queue = deque()
    for o in outputs:
        dist[o] = 0
        queue.append(o)
    while queue:
        v = queue.popleft()
        for s in src.get(v, []):
            if dist[s] is None:
                dist[s] = dist[v] + 1
                queue.append(s)
    return dist


def shortest_gradient_distance(spec: NeckGraphSpec, outputs: Iterable[str] | None = None) -> int:
    """Max over vertices of the shortest path length to an output."""
    dist = gradient_distances(spec, outputs)
    missing = [v for v, d in dist.items() if d is None]
    if missing:
        raise GraphError(
            f"{len(missing)} node(s) cannot reach an output", [Diagnostic(v, "unreachable from outputs") for v in missing]
        )
    return max(dist.values())


# ---------------------------------------------------------------------------
# presets built in code (chains for the gradient-distance checks)


def chain_spec(n: int, policy: str = "fpn", channels: int = 8) -> NeckGraphSpec:
    """Single-level graph of ``n`` vertices: the input plus ``n - 1`` fusion nodes."""
    if n < 2:
        raise ValueError("a chain needs at least 2 vertices")
    nodes = tuple(NodeSpec(f"L{l}", "P3", l, "conv3x3", channels) for l in range(1, n))
    spec = NeckGraphSpec(
        name=f"{policy}_chain{n}",
        levels=(Level("P3", 8, channels),),
        nodes=nodes,
        heads={"P3": f"L{n - 1}"},
        link_policy=policy,
    )
    return plan_channels(spec)


# ---------------------------------------------------------------------------
# executable graph


@dataclass(frozen=True)
class BackboneStub:
    """Stem plus strided conv + C2f stages, SPPF on the deepest level."""

    stem: ConvBlock
    stages: tuple[tuple[tuple[ConvBlock, ...], C2fBlock], ...]
    sppf: SPPFBlock
    level_names: tuple[str, ...]

    @classmethod
    def create(cls, levels: tuple[Level, ...], seed: int | np.random.Generator = 0, in_channels: int = 3, n: int = 1):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        first = levels[0]
        if first.stride < 2 or not _is_pow2_ratio(first.stride, 1):
            raise GraphError(f"finest stride must be a power of two >= 2, got {first.stride}")
        stem_c = max(1, first.channels // 2)
        stem = ConvBlock.create(in_channels, stem_c, 3, 2, seed=rng)
        stride, c = 2, stem_c
        stages = []
        for lv in levels:
            downs = []
            while stride < lv.stride:
                downs.append(ConvBlock.create(c, lv.channels, 3, 2, seed=rng))
                c, stride = lv.channels, stride * 2
            if stride != lv.stride:
                raise GraphError(f"level {lv.name} stride {lv.stride} is not reachable by doubling")
            c2f = C2fBlock.create(c, lv.channels, n=n, shortcut=True, seed=rng)
            c = lv.channels
            stages.append((tuple(downs), c2f))
        sppf = SPPFBlock.create(c, c, 5, seed=rng)
        return cls(stem, tuple(stages), sppf, tuple(lv.name for lv in levels))

    def __call__(self, image: np.ndarray) -> dict[str, np.ndarray]:
        y = self.stem(image)
        feats = {}
        for name, (downs, c2f) in zip(self.level_names, self.stages):
            for d in downs:
                y = d(y)
            y = c2f(y)
            feats[name] = y
        last = self.level_names[-1]
        feats[last] = self.sppf(feats[last])
        return feats


@dataclass(frozen=True)
class DecoupledHead:
    cls_branch: tuple[ConvBlock, ConvBlock, ConvBlock]
    box_branch: tuple[ConvBlock, ConvBlock, ConvBlock]

    @classmethod
    def create(cls, c_in: int, width: int, num_classes: int, seed: np.random.Generator):
        def branch(c_out):
            return (
                ConvBlock.create(c_in, width, 3, seed=seed),
                ConvBlock.create(width, width, 3, seed=seed),
                ConvBlock.create(width, c_out, 1, seed=seed, act="identity"),
            )

        return cls(branch(num_classes), branch(4))

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = b = x
        for m in self.cls_branch:
            c = m(c)
        for m in self.box_branch:
            b = m(b)
        return c, b


@dataclass
class NeckGraph:
    spec: NeckGraphSpec
    sources: dict[str, list[str]]
    order: list[str]
    backbone: BackboneStub
    fusion: dict[str, object]
    resample: dict[tuple[str, str], tuple[ConvBlock, ...]]
    heads: dict[str, DecoupledHead]

    @property
    def strides(self) -> dict[str, int]:
        return {lv: self.spec.level(lv).stride for lv in self.spec.heads}

    def forward(self, image: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return forward(self, image)


def build_graph(spec: NeckGraphSpec, seed: int = 0) -> NeckGraph:
    spec = plan_channels(spec)
    diags = validate_channels(spec)
    if diags:
        raise GraphError("invalid neck graph:\n" + "\n".join(map(str, diags)), diags)
    rng = np.random.default_rng(seed)
    src = edges(spec)
    order = [v for v in graphlib.TopologicalSorter(src).static_order() if v in src]
    backbone = BackboneStub.create(spec.levels, rng, n=spec.c2f_n)

    stride = {lv.name: lv.stride for lv in spec.levels}
    stride.update({n.name: spec.level(n.level).stride for n in spec.nodes})
    out_ch = {lv.name: lv.channels for lv in spec.levels}
    out_ch.update({n.name: n.out_channels for n in spec.nodes})

    fusion: dict[str, object] = {}
    resample: dict[tuple[str, str], tuple[ConvBlock, ...]] = {}
    for name in order:
        n = spec.node(name)
        for s in src[name]:
            steps = int(round(math.log2(stride[name] / stride[s])))
            if steps > 0:
                resample[(s, name)] = tuple(
                    ConvBlock.create(out_ch[s], out_ch[s], 3, 2, seed=rng) for _ in range(steps)
                )
        if n.op == "c2f":
            fusion[name] = C2fBlock.create(n.in_channels, n.out_channels, n=spec.c2f_n, seed=rng)
        elif n.op == "c2f_ema":
            fusion[name] = c2f_ema(n.in_channels, n.out_channels, n=spec.c2f_n, groups=spec.ema_groups, seed=rng)
        else:
            fusion[name] = ConvBlock.create(n.in_channels, n.out_channels, 3, seed=rng)
    heads = {
        lv: DecoupledHead.create(out_ch[node], spec.head_channels, spec.num_classes, rng)
        for lv, node in spec.heads.items()
    }
    return NeckGraph(spec, src, order, backbone, fusion, resample, heads)


def forward(graph: NeckGraph, image: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Backbone, fusion nodes in topological order, then one decoupled head per level.

    Returns ``{level: (class_map, box_map)}`` with ``num_classes`` and 4
    channels at the level's stride.
    """
    image = T.as_tensor(image)
    coarsest = graph.spec.levels[-1].stride
    _, _, h, w = image.shape
    if h % coarsest or w % coarsest:
        raise DimensionError(f"input {h}x{w} not divisible by coarsest stride {coarsest}", ("H", "W"))
    feats = graph.backbone(image)
    stride = {lv.name: lv.stride for lv in graph.spec.levels}
    for name in graph.order:
        n = graph.spec.node(name)
        dst_stride = stride[n.level]
        parts = []
        for s in graph.sources[name]:
            x = feats[s]
            src_stride = stride[s] if s in stride else stride[graph.spec.node(s).level]
            if src_stride > dst_stride:
                x = T.upsample_nearest(x, src_stride // dst_stride)
            for conv in graph.resample.get((s, name), ()):
                x = conv(x)
            parts.append(x)
        feats[name] = graph.fusion[name](T.concat(parts, axis=1))
    return {lv: graph.heads[lv](feats[node]) for lv, node in graph.spec.heads.items()}


# ---------------------------------------------------------------------------
# reporting


REPORT_COLUMNS = ("node", "level", "layer", "dir", "op", "stride", "in_ch", "out_ch", "dist", "inputs")


def neck_report(spec: NeckGraphSpec) -> tuple[str, bool]:
    """Plain-text node table plus summary; returns (text, valid)."""
    spec = plan_channels(spec)
    diags = validate_channels(spec)
    structural = any(d.message.startswith(("cycle", "unknown")) for d in diags)
    src = {} if structural else edges(spec)
    dist = {} if structural else gradient_distances(spec)
    rows = [REPORT_COLUMNS]
    for lv in spec.levels:
        rows.append((lv.name, lv.name, "0", "-", "input", str(lv.stride), "-", str(lv.channels), _fmt(dist.get(lv.name)), "-"))
    for n in spec.nodes:
        rows.append(
            (
                n.name,
                n.level,
                str(n.layer),
                n.direction,
                n.op,
                str(spec.level(n.level).stride) if n.level in [lv.name for lv in spec.levels] else "?",
                str(n.in_channels),
                str(n.out_channels),
                _fmt(dist.get(n.name)),
                ",".join(src.get(n.name, n.inputs or ())),
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(REPORT_COLUMNS))]
    lines = ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows]
    lines.append("")
    lines.append(f"preset: {spec.name}  policy: {spec.link_policy}  prune_upsample: {str(spec.prune_upsample).lower()}")
    lines.append("heads: " + ", ".join(f"{lv}={node}" for lv, node in spec.heads.items()))
    known = [d for d in dist.values() if d is not None]
    lines.append(f"max gradient distance: {max(known) if known else '-'}")
    unreachable = sorted(v for v, d in dist.items() if d is None)
    if unreachable:
        lines.append("unreachable: " + ", ".join(unreachable))
    for note in spec.notices:
        lines.append(f"notice: {note}")
    if diags:
        lines.append(f"validation: FAILED ({len(diags)} problem(s))")
        lines.extend(f"  {d}" for d in diags)
    else:
        lines.append("validation: ok")
    return "\n".join(lines) + "\n", not diags and not unreachable


def _fmt(v) -> str:
    return "-" if v is None else str(v)


def build_sod_neck(base_channels: int = 16, seed: int = 0, p2_stride: int = 4, num_classes: int = 10) -> NeckGraph:
    """Executable small-object neck: four heads, C2f-EMA fusion, pruned log2n links.

    ``p2_stride=2`` gives the literal 320x320 P2 reading for a 640 input.
    """
    from .data_io import load_preset

    spec = load_preset("sod", {"base_channels": base_channels, "num_classes": num_classes})
    if p2_stride != 4:
        levels = tuple(replace(lv, stride=p2_stride) if lv.name == "P2" else lv for lv in spec.levels)
        spec = replace(spec, levels=levels)
    return build_graph(spec, seed)
