"""Annotation, detection and neck-config formats.

Annotation lines follow the VisDrone layout::

    bbox_left,bbox_top,bbox_width,bbox_height,score,category,truncation,occlusion

Detection CSV files carry the header ``image_id,class_id,x1,y1,x2,y2,score``
with six-decimal fixed-point values and LF line endings.

Parsers never raise on bad records. Each problem becomes a
:class:`ParseDiagnostic` with its line number and field.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import yaml

from .losses import Box
from .metrics import Detection, GroundTruth
from .neck import LINK_POLICIES, Level, NeckGraphSpec, NodeSpec

DETECTION_COLUMNS = ("image_id", "class_id", "x1", "y1", "x2", "y2", "score")
DEFAULT_LEVEL_STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32}


@dataclass(frozen=True)
class ParseDiagnostic:
    line: int
    field: str | None
    message: str
    source: str = ""

    def __str__(self) -> str:
        where = f"{self.source}:{self.line}" if self.source else f"line {self.line}"
        return f"{where}: {self.field + ': ' if self.field else ''}{self.message}"


@dataclass(frozen=True)
class CategoryMap:
    names: dict[int, str]
    ignored: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(set(self.names.values())) != len(self.names):
            raise ValueError("category names must be unique")

    def name(self, cid: int) -> str:
        return self.names.get(cid, str(cid))

    @property
    def object_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c for c in self.names if c not in self.ignored))

    @classmethod
    def from_mapping(cls, data: dict, ignored: Sequence[int] = ()) -> "CategoryMap":
        return cls({int(k): str(v) for k, v in data.items()}, frozenset(int(i) for i in ignored))


VISDRONE = CategoryMap(
    {
        0: "ignored-regions",
        1: "pedestrian",
        2: "people",
        3: "bicycle",
        4: "car",
        5: "van",
        6: "truck",
        7: "tricycle",
        8: "awning-tricycle",
        9: "bus",
        10: "motorcycle",
        11: "others",
    },
    ignored=frozenset({0, 11}),
)


# ---------------------------------------------------------------------------
# annotations


ANNOTATION_FIELDS = ("bbox_left", "bbox_top", "bbox_width", "bbox_height", "score", "category", "truncation", "occlusion")


@dataclass(frozen=True)
class AnnotationLine:
    bbox_left: int
    bbox_top: int
    bbox_width: int
    bbox_height: int
    score: float
    category: int
    truncation: int
    occlusion: int

    @property
    def box(self) -> Box:
        return Box(
            float(self.bbox_left),
            float(self.bbox_top),
            float(self.bbox_left + self.bbox_width),
            float(self.bbox_top + self.bbox_height),
        )


@dataclass
class ParsedAnnotations:
    records: list[AnnotationLine] = field(default_factory=list)
    ground_truths: list[GroundTruth] = field(default_factory=list)
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)


def parse_annotations(
    text: str, image_id: str = "", categories: CategoryMap = VISDRONE, source: str = ""
) -> ParsedAnnotations:
    out = ParsedAnnotations()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) == 9 and parts[-1] == "":
            parts.pop()  # tolerated trailing comma
        if len(parts) != 8:
            out.diagnostics.append(ParseDiagnostic(lineno, None, f"expected 8 fields, got {len(parts)}", source))
            continue
        values: list[Any] = []
        bad = False
        for name, p in zip(ANNOTATION_FIELDS, parts):
            try:
                values.append(float(p) if name == "score" else int(p))
            except ValueError:
                out.diagnostics.append(ParseDiagnostic(lineno, name, f"not a number: {p!r}", source))
                bad = True
                break
        if bad:
            continue
        rec = AnnotationLine(*values)
        if rec.bbox_width <= 0 or rec.bbox_height <= 0:
            out.diagnostics.append(
                ParseDiagnostic(lineno, "bbox_width" if rec.bbox_width <= 0 else "bbox_height", "degenerate box", source)
            )
            continue
        out.records.append(rec)
        out.ground_truths.append(GroundTruth(image_id, rec.category, rec.box, rec.category in categories.ignored))
    return out


def _fmt_score(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def serialize_annotations(records: Sequence[AnnotationLine]) -> str:
    lines = []
    for r in records:
        lines.append(
            ",".join(
                [str(r.bbox_left), str(r.bbox_top), str(r.bbox_width), str(r.bbox_height), _fmt_score(r.score)]
                + [str(r.category), str(r.truncation), str(r.occlusion)]
            )
        )
    return "".join(line + "\n" for line in lines)


def load_ground_truth(path, categories: CategoryMap = VISDRONE) -> ParsedAnnotations:
    """One annotation file, or a directory of ``<image_id>.txt`` files."""
    path = Path(path)
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    total = ParsedAnnotations()
    for f in files:
        try:
            text = f.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            total.diagnostics.append(ParseDiagnostic(0, None, f"unreadable: {exc}", str(f)))
            continue
        part = parse_annotations(text, f.stem, categories, str(f))
        total.records.extend(part.records)
        total.ground_truths.extend(part.ground_truths)
        total.diagnostics.extend(part.diagnostics)
    return total


# ---------------------------------------------------------------------------
# detections


@dataclass
class ParsedDetections:
    detections: list[Detection] = field(default_factory=list)
    diagnostics: list[ParseDiagnostic] = field(default_factory=list)

    @property
    def schema_ok(self) -> bool:
        return not any(d.line == 1 for d in self.diagnostics)


def _check_header(header: list[str], source: str) -> ParseDiagnostic | None:
    header = [h.strip() for h in header]
    for col in DETECTION_COLUMNS:
        if col not in header:
            return ParseDiagnostic(1, col, "missing column", source)
    for pos, (got, want) in enumerate(zip(header, DETECTION_COLUMNS), start=1):
        if got != want:
            return ParseDiagnostic(1, want, f"column {pos} is {got!r}, expected {want!r}", source)
    if len(header) > len(DETECTION_COLUMNS):
        return ParseDiagnostic(1, header[len(DETECTION_COLUMNS)], "unexpected extra column", source)
    return None


def read_detections(text: str, source: str = "") -> ParsedDetections:
    out = ParsedDetections()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        out.diagnostics.append(ParseDiagnostic(1, "image_id", "missing header", source))
        return out
    problem = _check_header(lines[0].split(","), source)
    if problem:
        out.diagnostics.append(problem)
        return out
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != len(DETECTION_COLUMNS):
            out.diagnostics.append(
                ParseDiagnostic(lineno, None, f"expected {len(DETECTION_COLUMNS)} fields, got {len(parts)}", source)
            )
            continue
        image_id = parts[0]
        try:
            class_id = int(parts[1])
        except ValueError:
            out.diagnostics.append(ParseDiagnostic(lineno, "class_id", f"not an integer: {parts[1]!r}", source))
            continue
        nums = []
        for col, p in zip(DETECTION_COLUMNS[2:], parts[2:]):
            try:
                nums.append(float(p))
            except ValueError:
                out.diagnostics.append(ParseDiagnostic(lineno, col, f"not a number: {p!r}", source))
                break
        if len(nums) != 5:
            continue
        x1, y1, x2, y2, score = nums
        if not 0.0 <= score <= 1.0:
            out.diagnostics.append(ParseDiagnostic(lineno, "score", f"{score} outside [0, 1]", source))
            continue
        if x2 < x1 or y2 < y1:
            out.diagnostics.append(ParseDiagnostic(lineno, "x2" if x2 < x1 else "y2", "inverted box corners", source))
            continue
        out.detections.append(Detection(image_id, class_id, Box(x1, y1, x2, y2), score))
    return out


def write_detections(dets: Sequence[Detection]) -> str:
    buf = io.StringIO()
    buf.write(",".join(DETECTION_COLUMNS) + "\n")
    for d in dets:
        vals = ",".join(f"{v:.6f}" for v in (*d.box, d.score))
        buf.write(f"{d.image_id},{d.class_id},{vals}\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# neck configs


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None, source: str = ""):
        self.line, self.field, self.source = line, field, source
        where = ":".join(str(p) for p in (source or "<config>", line) if p is not None)
        super().__init__(f"{where}: {field + ': ' if field else ''}{message}")


_TOP_KEYS = {
    "name", "link_policy", "prune_upsample", "base_channels", "num_classes", "head_channels",
    "c2f_n", "ema_groups", "levels", "nodes", "heads",
}  # fmt: skip
_LEVEL_KEYS = {"name", "stride", "channels", "width"}
_NODE_KEYS = {"name", "level", "layer", "op", "direction", "channels", "width", "in_channels", "inputs"}


def _compose(text: str, source: str):
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(str(getattr(exc, "problem", exc)), mark.line + 1 if mark else None, None, source) from None
    if root is None:
        raise ConfigError("empty config", 1, None, source)
    lines: dict[tuple, int] = {}
    constructor = yaml.SafeLoader("")

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            return {k.value: walk(v, path + (k.value,)) for k, v in node.value}
        if isinstance(node, yaml.SequenceNode):
            return [walk(v, path + (i,)) for i, v in enumerate(node.value)]
        return constructor.construct_object(node, deep=True)

    return walk(root, ()), lines


def load_neck_config(text: str, source: str = "", overrides: dict | None = None) -> NeckGraphSpec:
    """Parse a neck config; errors carry the line and field they refer to.

    Channel counts may be absolute (``channels``) or multiples of
    ``base_channels`` (``width``). Node widths default to their level's.
    """
    data, lines = _compose(text, source)

    def err(msg, path=(), fld=None):
        while path and path not in lines:
            path = path[:-1]
        return ConfigError(msg, lines.get(path), fld, source)

    if not isinstance(data, dict):
        raise err("top level must be a mapping")
    for k in data:
        if k not in _TOP_KEYS:
            raise err("unknown key", (k,), k)
    data = {**data, **(overrides or {})}

    def need(mapping, key, path, kind):
        if key not in mapping:
            raise err("required", path, key)
        val = mapping[key]
        if not isinstance(val, kind) or isinstance(val, bool) and kind is not bool:
            raise err(f"expected {getattr(kind, '__name__', kind)}", path + (key,), key)
        return val

    def opt(mapping, key, path, kind, default):
        return need(mapping, key, path, kind) if key in mapping else default

    policy = opt(data, "link_policy", (), str, "log2n")
    if policy not in LINK_POLICIES:
        raise err(f"unknown link policy {policy!r} (choose from {', '.join(LINK_POLICIES)})", ("link_policy",), "link_policy")
    base = opt(data, "base_channels", (), int, 16)
    if base < 1:
        raise err("must be positive", ("base_channels",), "base_channels")

    def channels(m, path, default):
        if "channels" in m and "width" in m:
            raise err("give channels or width, not both", path)
        if "channels" in m:
            return need(m, "channels", path, int)
        if "width" in m:
            w = need(m, "width", path, (int, float))
            return int(round(w * base))
        if default is None:
            raise err("required (channels or width)", path, "channels")
        return default

    levels, defaulted = [], []
    for i, lv in enumerate(need(data, "levels", (), list)):
        path = ("levels", i)
        if not isinstance(lv, dict):
            raise err("level must be a mapping", path)
        for k in lv:
            if k not in _LEVEL_KEYS:
                raise err("unknown key", path + (k,), k)
        name = need(lv, "name", path, str)
        if "stride" in lv:
            stride = need(lv, "stride", path, int)
        elif name in DEFAULT_LEVEL_STRIDES:
            stride = DEFAULT_LEVEL_STRIDES[name]
            defaulted.append(name)
        else:
            raise err(f"no default stride for level {name!r}", path, "stride")
        levels.append(Level(name, stride, channels(lv, path, None)))
    if not levels:
        raise err("at least one level required", ("levels",), "levels")
    level_ch = {lv.name: lv.channels for lv in levels}

    nodes = []
    for i, n in enumerate(need(data, "nodes", (), list)):
        path = ("nodes", i)
        if not isinstance(n, dict):
            raise err("node must be a mapping", path)
        for k in n:
            if k not in _NODE_KEYS:
                raise err("unknown key", path + (k,), k)
        level = need(n, "level", path, str)
        inputs = opt(n, "inputs", path, list, None)
        nodes.append(
            NodeSpec(
                name=need(n, "name", path, str),
                level=level,
                layer=need(n, "layer", path, int),
                op=opt(n, "op", path, str, "c2f"),
                out_channels=channels(n, path, level_ch.get(level, 0)),
                in_channels=opt(n, "in_channels", path, int, None),
                direction=opt(n, "direction", path, str, "td"),
                inputs=tuple(str(s) for s in inputs) if inputs is not None else None,
            )
        )
    heads = need(data, "heads", (), dict)
    notices = ()
    if defaulted:
        strides = tuple(lv.stride for lv in levels)
        notices = (f"stride defaulted for {', '.join(defaulted)}; strides are {strides}",)
    return NeckGraphSpec(
        name=opt(data, "name", (), str, source or "custom"),
        levels=tuple(levels),
        nodes=tuple(nodes),
        heads={str(k): str(v) for k, v in heads.items()},
        link_policy=policy,
        prune_upsample=opt(data, "prune_upsample", (), bool, False),
        num_classes=opt(data, "num_classes", (), int, 10),
        head_channels=opt(data, "head_channels", (), int, base),
        c2f_n=opt(data, "c2f_n", (), int, 1),
        ema_groups=opt(data, "ema_groups", (), int, 8),
        notices=notices,
    )


def dump_neck_config(spec: NeckGraphSpec) -> str:
    """Serialize with absolute channel counts; loads back to an equal spec."""
    data = {
        "name": spec.name,
        "link_policy": spec.link_policy,
        "prune_upsample": spec.prune_upsample,
        "num_classes": spec.num_classes,
        "head_channels": spec.head_channels,
        "c2f_n": spec.c2f_n,
        "ema_groups": spec.ema_groups,
        "levels": [{"name": lv.name, "stride": lv.stride, "channels": lv.channels} for lv in spec.levels],
        "nodes": [],
        "heads": dict(spec.heads),
    }
    for n in spec.nodes:
        d = {"name": n.name, "level": n.level, "layer": n.layer, "op": n.op, "direction": n.direction,
             "channels": n.out_channels}  # fmt: skip
        if n.in_channels is not None:
            d["in_channels"] = n.in_channels
        if n.inputs is not None:
            d["inputs"] = list(n.inputs)
        data["nodes"].append(d)
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("detkit.presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str, overrides: dict | None = None) -> NeckGraphSpec:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(preset_names())})", field="preset")
    text = resources.files("detkit.presets").joinpath(f"{name}.yaml").read_text(encoding="utf-8")
    return load_neck_config(text, f"{name}.yaml", overrides)
