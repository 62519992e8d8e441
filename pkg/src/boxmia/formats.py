"""File formats: detection dumps, canvas images, config files, reports.

Everything here is deterministic on purpose.  Dumps and reports serialize
with sorted keys and no ambient state (no timestamps, no hostnames), so a
rerun with the same inputs is byte-identical; float fields rely on Python's
shortest-roundtrip repr and survive a write/read cycle unchanged.

Schema policy differs by direction of trust.  Detection dumps may come from
third-party tools, so unknown keys are ignored with a warning; config files
drive experiments, where a silently ignored typo would corrupt results, so
unknown keys are an error.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import yaml
from PIL import Image, PngImagePlugin

from .canvas import Accumulation, BoxMode, Canvas, CanvasConfig, Transform
from .core import (
    BBox,
    DetectionSet,
    MembershipLabel,
    MembershipRecord,
    ScoredBox,
    Source,
)
from .learners import CnnSpec, GbtSpec, TrainConfig
from .pipeline import (
    AttackExperiment,
    AttackKind,
    AttackMetrics,
    DefenseKind,
    DefenseSpec,
    SurrogateTaskConfig,
)
from .postprocess import PostprocessConfig
from .privacy import PrivacyParams
from .simulator import SimulatorConfig, World, leaky_preset

__all__ = [
    "DUMP_VERSION",
    "DumpFormatError",
    "DumpVersionError",
    "save_dump",
    "load_dump",
    "save_world",
    "load_world",
    "load_records_dir",
    "ImageFormat",
    "export_canvas",
    "import_canvas",
    "ConfigError",
    "DefensePlan",
    "RunConfig",
    "config_to_dict",
    "config_from_dict",
    "save_config",
    "load_config",
    "metrics_to_dict",
    "write_report",
]


# -- detection dumps -------------------------------------------------------

DUMP_VERSION = "1"

_WORLD_FILES = ("target_in", "target_out", "shadow_in", "shadow_out")


class DumpFormatError(ValueError):
    """A detection dump violates the schema; the message names the path."""


class DumpVersionError(DumpFormatError):
    """The dump declares a version this reader does not understand."""


def _box_to_list(sb: ScoredBox) -> dict:
    d: dict = {"bbox": [sb.box.x0, sb.box.y0, sb.box.x1, sb.box.y1], "score": sb.score}
    if sb.class_id is not None:
        d["class_id"] = sb.class_id
    return d


def _image_to_dict(det: DetectionSet) -> dict:
    return {
        "image_id": det.image_id,
        "width": det.width,
        "height": det.height,
        "detections": [_box_to_list(sb) for sb in det.boxes],
    }


def save_dump(items: Sequence[MembershipRecord] | Sequence[DetectionSet], path: str) -> None:
    """Write one homogeneous group of detections as a versioned JSON dump.

    Membership records must all carry the same label and source, which become
    the dump's provenance block; plain detection sets produce a dump without
    membership annotations.  Per-image ``meta`` is bookkeeping, not payload,
    and is not serialized (``DetectionSet`` equality ignores it, so reloaded
    dumps still compare equal to their originals).
    """
    items = list(items)
    if not items:
        raise ValueError("refusing to write an empty dump")
    provenance: dict = {"source": "boxmia"}
    if isinstance(items[0], MembershipRecord):
        labels = {r.label for r in items}
        sources = {r.source for r in items}
        if len(labels) != 1 or len(sources) != 1:
            raise ValueError("a dump holds one (label, source) group; got a mixture")
        provenance["membership"] = items[0].label.value
        provenance["split"] = items[0].source.value
        images = [_image_to_dict(r.detections) for r in items]
    else:
        images = [_image_to_dict(det) for det in items]
    doc = {"version": DUMP_VERSION, "provenance": provenance, "images": images}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"), allow_nan=False)
        fh.write("\n")


def _require(doc: Mapping, key: str, path: str, kind: type, kind_name: str):
    if key not in doc:
        raise DumpFormatError(f"{path}.{key}: missing required field")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise DumpFormatError(f"{path}.{key}: expected {kind_name}, got {type(value).__name__}")
    return value


def _warn_unknown(doc: Mapping, known: tuple[str, ...], path: str) -> None:
    for key in doc:
        if key not in known:
            warnings.warn(f"ignoring unknown dump key {path}.{key}", stacklevel=3)


def _number(doc: Mapping, key: str, path: str) -> float:
    value = _require(doc, key, path, (int, float), "number")
    return float(value)


def _parse_detection(d, path: str) -> ScoredBox:
    if not isinstance(d, dict):
        raise DumpFormatError(f"{path}: expected object, got {type(d).__name__}")
    _warn_unknown(d, ("bbox", "score", "class_id"), path)
    bbox = _require(d, "bbox", path, list, "array")
    if len(bbox) != 4 or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in bbox):
        raise DumpFormatError(f"{path}.bbox: expected 4 numbers, got {bbox!r}")
    score = _number(d, "score", path)
    if not 0.0 <= score <= 1.0:
        raise DumpFormatError(f"{path}.score: {score!r} outside [0, 1]")
    class_id = d.get("class_id")
    if class_id is not None and (isinstance(class_id, bool) or not isinstance(class_id, int)):
        raise DumpFormatError(f"{path}.class_id: expected integer, got {class_id!r}")
    try:
        return ScoredBox(
            box=BBox(float(bbox[0]), float(bbox[1]), float(bbox[2]), float(bbox[3])),
            score=score,
            class_id=class_id,
        )
    except ValueError as exc:
        raise DumpFormatError(f"{path}: {exc}") from None


def _parse_image(d, path: str) -> DetectionSet:
    if not isinstance(d, dict):
        raise DumpFormatError(f"{path}: expected object, got {type(d).__name__}")
    _warn_unknown(d, ("image_id", "width", "height", "detections"), path)
    image_id = _require(d, "image_id", path, str, "string")
    width = _number(d, "width", path)
    height = _number(d, "height", path)
    detections = _require(d, "detections", path, list, "array")
    boxes = [
        _parse_detection(det, f"{path}.detections[{i}]") for i, det in enumerate(detections)
    ]
    try:
        return DetectionSet(image_id=image_id, width=width, height=height, boxes=tuple(boxes))
    except ValueError as exc:
        raise DumpFormatError(f"{path}: {exc}") from None


def load_dump(path: str) -> list[MembershipRecord] | list[DetectionSet]:
    """Read and validate a detection dump.

    Returns membership records when the provenance block carries both a
    membership label and a split, plain detection sets when it carries
    neither; exactly one of the two is a schema error.  Validation failures
    name the offending JSON path.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DumpFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise DumpFormatError("$: expected top-level object")
    _warn_unknown(doc, ("version", "provenance", "images"), "$")
    version = _require(doc, "version", "$", str, "string")
    if version != DUMP_VERSION:
        raise DumpVersionError(f"$.version: unknown dump version {version!r}")
    provenance = doc.get("provenance", {})
    if not isinstance(provenance, dict):
        raise DumpFormatError("$.provenance: expected object")
    _warn_unknown(provenance, ("source", "membership", "split"), "$.provenance")
    images = _require(doc, "images", "$", list, "array")
    sets = [_parse_image(img, f"$.images[{i}]") for i, img in enumerate(images)]

    membership = provenance.get("membership")
    split = provenance.get("split")
    if membership is None and split is None:
        return sets
    if membership is None or split is None:
        raise DumpFormatError(
            "$.provenance: membership and split must be given together"
        )
    try:
        label = MembershipLabel(membership)
    except ValueError:
        raise DumpFormatError(f"$.provenance.membership: unknown value {membership!r}") from None
    try:
        source = Source(split)
    except ValueError:
        raise DumpFormatError(f"$.provenance.split: unknown value {split!r}") from None
    return [MembershipRecord(detections=s, label=label, source=source) for s in sets]


def save_world(world: World, out_dir: str) -> list[str]:
    """Write the four world splits as dumps with fixed names; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in _WORLD_FILES:
        p = os.path.join(out_dir, f"{name}.json")
        save_dump(getattr(world, name), p)
        paths.append(p)
    return paths


def load_world(in_dir: str) -> World:
    """Reassemble a world from a directory written by :func:`save_world`."""
    groups = {}
    for name in _WORLD_FILES:
        p = os.path.join(in_dir, f"{name}.json")
        if not os.path.exists(p):
            raise FileNotFoundError(f"world directory {in_dir} is missing {name}.json")
        records = load_dump(p)
        expect_label, expect_split = name.split("_")[1], name.split("_")[0]
        for r in records:
            if not isinstance(r, MembershipRecord):
                raise DumpFormatError(f"{p}: world dumps need membership provenance")
            if r.label.value != expect_label or r.source.value != expect_split:
                raise DumpFormatError(f"{p}: provenance does not match file name {name}")
        groups[name] = tuple(records)
    return World(**groups)


def load_records_dir(in_dir: str, source: Optional[Source] = None) -> list[MembershipRecord]:
    """Load every dump in a directory, optionally keeping one source side.

    Files are visited in sorted name order so the result is stable; dumps
    without membership provenance are rejected, since callers here feed the
    attack pipeline, which needs labels.
    """
    names = sorted(n for n in os.listdir(in_dir) if n.endswith(".json"))
    records: list[MembershipRecord] = []
    for name in names:
        loaded = load_dump(os.path.join(in_dir, name))
        for r in loaded:
            if not isinstance(r, MembershipRecord):
                raise DumpFormatError(f"{name}: dump lacks membership provenance")
            if source is None or r.source is source:
                records.append(r)
    return records


# -- canvas images ---------------------------------------------------------


class ImageFormat(Enum):
    PGM = "pgm"
    PNG = "png"


_PIXEL_MAX = 65535


def _quantize(canvas: Canvas) -> tuple[np.ndarray, float]:
    pixels = canvas.pixels
    if float(pixels.min()) < 0.0:
        raise ValueError("canvas intensities must be non-negative for export")
    peak = float(pixels.max())
    # Peak maps to the top code; an empty canvas keeps scale 1 so importing
    # returns exact zeros rather than dividing by a degenerate factor.
    scale = _PIXEL_MAX / peak if peak > 0.0 else 1.0
    raw = np.rint(pixels * scale).astype(np.uint16)
    return raw, scale


def _format_for(path: str, fmt: Optional[ImageFormat]) -> ImageFormat:
    if fmt is not None:
        return fmt
    ext = os.path.splitext(path)[1].lower().lstrip(".")
    try:
        return ImageFormat(ext)
    except ValueError:
        raise ValueError(f"cannot infer image format from {path!r}; pass fmt") from None


def export_canvas(canvas: Canvas, path: str, fmt: Optional[ImageFormat] = None) -> float:
    """Write a canvas as a 16-bit grayscale image; returns the scale used.

    Intensities map affinely with the canvas peak at 65535.  The scale
    factor needed to undo the mapping travels with the image: PNG carries it
    in a text chunk, PGM (which has no metadata) in a JSON sidecar next to
    the file.  PGM bytes depend only on the canvas contents, so golden-file
    comparisons are exact.
    """
    fmt = _format_for(path, fmt)
    raw, scale = _quantize(canvas)
    if fmt is ImageFormat.PGM:
        header = f"P5\n{canvas.size} {canvas.size}\n{_PIXEL_MAX}\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(raw.astype(">u2").tobytes())
        sidecar = {"scale": scale, "size": canvas.size}
        with open(path + ".json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    else:
        info = PngImagePlugin.PngInfo()
        info.add_text("boxmia-scale", repr(scale))
        Image.fromarray(raw).save(path, format="PNG", pnginfo=info)
    return scale


def _read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 PGM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if maxval != _PIXEL_MAX:
        raise ValueError(f"{path}: expected 16-bit PGM (maxval {_PIXEL_MAX}), got {maxval}")
    raw = np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)
    return raw.astype(np.uint16)


def import_canvas(path: str, fmt: Optional[ImageFormat] = None) -> tuple[np.ndarray, float]:
    """Read an exported image back to float intensities plus the scale.

    The returned array is raw codes divided by the recorded scale, equal to
    the exported canvas up to the half-code quantization of the writer.
    """
    fmt = _format_for(path, fmt)
    if fmt is ImageFormat.PGM:
        raw = _read_pgm(path)
        with open(path + ".json", "r", encoding="utf-8") as fh:
            scale = float(json.load(fh)["scale"])
    else:
        with Image.open(path) as im:
            text = getattr(im, "text", {})
            if "boxmia-scale" not in text:
                raise ValueError(f"{path}: PNG lacks the boxmia-scale text chunk")
            scale = float(text["boxmia-scale"])
            raw = np.asarray(im, dtype=np.uint16)
    return raw.astype(np.float64) / scale, scale


# -- config files ----------------------------------------------------------


class ConfigError(ValueError):
    """A config file violates the schema; the message names the key path."""


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected integer, got {value!r}")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected number, got {value!r}")
    return float(value)


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path}: expected boolean, got {value!r}")
    return value


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected string, got {value!r}")
    return value


def _pair(cast: Callable) -> Callable:
    def parse(value, path: str):
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"{path}: expected a pair, got {value!r}")
        return (cast(value[0], f"{path}[0]"), cast(value[1], f"{path}[1]"))

    return parse


def _seq(cast: Callable) -> Callable:
    def parse(value, path: str):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(cast(v, f"{path}[{i}]") for i, v in enumerate(value))

    return parse


def _enum(enum_cls) -> Callable:
    def parse(value, path: str):
        try:
            return enum_cls(value)
        except ValueError:
            choices = ", ".join(repr(m.value) for m in enum_cls)
            raise ConfigError(f"{path}: expected one of {choices}, got {value!r}") from None

    return parse


def _optional(cast: Callable) -> Callable:
    def parse(value, path: str):
        return None if value is None else cast(value, path)

    return parse


def _struct(cls, table: dict) -> Callable:
    """Strict mapping parser: unknown keys error, missing keys use defaults."""

    def parse(value, path: str):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected mapping, got {value!r}")
        unknown = sorted(set(value) - set(table))
        if unknown:
            raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
        kwargs = {k: cast(value[k], f"{path}.{k}") for k, cast in table.items() if k in value}
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None

    return parse


_parse_simulator = _struct(
    SimulatorConfig,
    {
        "image_width": _as_float,
        "image_height": _as_float,
        "objects_per_image": _pair(_as_int),
        "proposals_per_object": _pair(_as_int),
        "jitter_in": _as_float,
        "jitter_out": _as_float,
        "score_in": _pair(_as_float),
        "score_out": _pair(_as_float),
        "overfit_level": _as_float,
    },
)

_parse_canvas = _struct(
    CanvasConfig,
    {
        "size": _as_int,
        "box_mode": _enum(BoxMode),
        "uniform_fraction": _as_float,
        "rescale_scores": _as_bool,
        "accumulation": _enum(Accumulation),
    },
)

_parse_postprocess = _struct(
    PostprocessConfig,
    {
        "score_threshold": _as_float,
        "nms_threshold": _as_float,
        "rpn_nms_threshold": _optional(_as_float),
        "head_nms_threshold": _optional(_as_float),
    },
)

_parse_cnn = _struct(
    CnnSpec,
    {
        "conv_channels": _seq(_as_int),
        "fc_units": _seq(_as_int),
        "kernel_size": _as_int,
        "dropout_rate": _as_float,
    },
)

_parse_gbt = _struct(
    GbtSpec,
    {
        "max_depth": _as_int,
        "n_estimators": _as_int,
        "learning_rate": _as_float,
        "reg_lambda": _as_float,
        "min_child_weight": _as_float,
    },
)

_parse_train = _struct(
    TrainConfig,
    {
        "learning_rate": _as_float,
        "epochs": _as_int,
        "batch_size": _as_int,
        "momentum": _as_float,
        "weight_decay": _as_float,
        "seed": _as_int,
    },
)

_parse_experiment = _struct(
    AttackExperiment,
    {
        "kind": _enum(AttackKind),
        "canvas_cfg": _parse_canvas,
        "postprocess_cfg": _parse_postprocess,
        "augmentations": _seq(_enum(Transform)),
        "cnn_spec": _parse_cnn,
        "gbt_spec": _parse_gbt,
        "train_cfg": _parse_train,
        "n_max": _as_int,
        "balance": _as_bool,
        "holdout_fraction": _as_float,
        "seed": _as_int,
    },
)

_parse_privacy = _struct(
    PrivacyParams,
    {
        "noise_scale": _as_float,
        "clip_bound": _as_float,
        "delta": _as_float,
        "epochs": _as_float,
    },
)

_parse_defense_spec = _struct(
    DefenseSpec,
    {
        "kind": _enum(DefenseKind),
        "dropout_rate": _as_float,
        "privacy": _optional(_parse_privacy),
    },
)

_parse_task = _struct(
    SurrogateTaskConfig,
    {
        "input_dim": _as_int,
        "n_per_split": _as_int,
        "n_test": _as_int,
        "label_noise": _as_float,
    },
)


@dataclass(frozen=True)
class DefensePlan:
    """The defense study's rows plus the surrogate task they all share."""

    rows: tuple[DefenseSpec, ...]
    task: SurrogateTaskConfig = field(default_factory=SurrogateTaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(self.rows))
        if not self.rows:
            raise ValueError("defense plan needs at least one row")


_parse_defense_plan = _struct(
    DefensePlan,
    {
        "rows": _seq(_parse_defense_spec),
        "task": _parse_task,
        "train": _parse_train,
    },
)


@dataclass(frozen=True)
class RunConfig:
    """One file that configures every CLI subcommand.

    Sections a subcommand does not use are simply ignored by it;
    ``shadow_simulator`` set to null means "same as simulator", which is the
    plain (non-transfer) setup.
    """

    seed: int = 0
    n_per_split: int = 100
    simulator: SimulatorConfig = field(default_factory=leaky_preset)
    shadow_simulator: Optional[SimulatorConfig] = None
    experiment: AttackExperiment = field(default_factory=AttackExperiment)
    sweep_levels: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    defense: Optional[DefensePlan] = None


_parse_run = _struct(
    RunConfig,
    {
        "seed": _as_int,
        "n_per_split": _as_int,
        "simulator": _parse_simulator,
        "shadow_simulator": _optional(_parse_simulator),
        "experiment": _parse_experiment,
        "sweep_levels": _seq(_as_float),
        "defense": _optional(_parse_defense_plan),
    },
)


def config_from_dict(data: dict) -> RunConfig:
    return _parse_run(data, "$")


def _plain(value):
    """Dataclass tree to YAML/JSON-ready plain data; enums become values."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True, default_flow_style=False)


# -- reports ---------------------------------------------------------------


def metrics_to_dict(m: AttackMetrics) -> dict:
    return {
        "tp": m.tp,
        "fn": m.fn,
        "fp": m.fp,
        "tn": m.tn,
        "accuracy": m.accuracy,
        "recall_in": m.recall_in,
        "recall_out": m.recall_out,
        "average_recall": m.average_recall,
    }


def _jsonable(value):
    """Make report payloads strict-JSON safe; infinities become "inf"."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def write_report(payload: dict, path: str) -> None:
    """Write an experiment report: pretty-printed, sorted, deterministic."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
