"""File formats shared by the engine and external tensor exporters.

Tensor files ("FSAT"): little-endian header [magic "FSAT" | u32 version=1 |
u32 dtype code (0 = float32 LE) | u32 ndim | ndim x u64 dims] followed by
the row-major float32 payload. Storage is 32-bit, compute is 64-bit: the
reader widens, the writer narrows, and read->write reproduces a file
byte for byte.

Run configs are flat UTF-8 key=value text; metrics reports are key=value
text with a fixed key order. All writers are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    NonFiniteValueError,
    TruncatedPayloadError,
    ValidationError,
    VersionMismatchError,
)
from .feedback import FeedbackConfig
from .head import ATTENTION_MODES, HeadWeights

MAGIC = b"FSAT"
VERSION = 1
DTYPE_F32 = 0

WEIGHT_FILES = (
    "w_q", "w_k", "w_v", "proj",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "joint_proj", "tau",
)


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_tensor(path, array) -> None:
    """Serialize an array (ndim 0..2) as a float32 FSAT file."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > 2:
        raise ValidationError(f"tensor files hold ndim <= 2, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"refusing to write non-finite values to {path}")
    dims = arr.shape
    header = struct.pack("<4sIII", MAGIC, VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *dims) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    _atomic_write_bytes(path, header + payload)


def read_tensor(path) -> np.ndarray:
    """Load an FSAT file, widened to float64."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 16:
        raise TruncatedPayloadError(f"{path}: header needs 16 bytes, file has {len(blob)}")
    magic, version, dtype, ndim = struct.unpack_from("<4sIII", blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise VersionMismatchError(f"{path}: unsupported dtype code {dtype}")
    dims_end = 16 + 8 * ndim
    if len(blob) < dims_end:
        raise TruncatedPayloadError(f"{path}: header truncated inside dims")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 16) if ndim else ()
    if any(d < 1 for d in dims):
        raise TruncatedPayloadError(f"{path}: zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 4 * count
    if len(blob) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(blob) - dims_end} bytes, dims {dims} need {4 * count}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=dims_end)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return values.astype(np.float64).reshape(dims)


def write_weights_bundle(directory, weights: HeadWeights) -> None:
    """Write each head parameter to <dir>/<name>.fsat (tau as a 0-D tensor)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in WEIGHT_FILES:
        value = weights.tau if name == "tau" else getattr(weights, name)
        write_tensor(directory / f"{name}.fsat", value)


def read_weights_bundle(directory, use_residual: bool = False,
                        use_ffn: bool = False) -> HeadWeights:
    """Assemble HeadWeights from a directory written by write_weights_bundle."""
    directory = Path(directory)
    loaded = {name: read_tensor(directory / f"{name}.fsat") for name in WEIGHT_FILES}
    tau = loaded.pop("tau")
    if tau.ndim != 0 and tau.size != 1:
        raise ValidationError(f"tau tensor must hold one value, got shape {tau.shape}")
    return HeadWeights(
        **loaded, tau=float(tau.reshape(())),
        use_residual=use_residual, use_ffn=use_ffn,
    )


@dataclass(frozen=True)
class RunConfig:
    """One pipeline invocation, as described by a key=value config file.

    Paths are resolved relative to the config file location. `weights`
    is a directory laid out by write_weights_bundle.
    """

    tokens: Path
    weights: Path
    text: Path
    output_dir: Path
    attention_mode: str = "qk"
    external_attention: Path | None = None
    labels: Path | None = None
    use_residual: bool = False
    use_ffn: bool = False
    feedback: FeedbackConfig = field(default_factory=FeedbackConfig)


_PATH_KEYS = ("tokens", "weights", "text", "output_dir", "external_attention", "labels")
_CONFIG_KEYS = _PATH_KEYS + (
    "attention_mode", "use_residual", "use_ffn",
    "lambda", "p", "similarity_metric", "pruning_mode",
    "ratio", "threshold", "scaling", "strategy", "iterations",
)
_REQUIRED_KEYS = ("tokens", "weights", "text", "output_dir")


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"key {key!r}: expected a boolean, got {value!r}")


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a number, got {value!r}") from None


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected an integer, got {value!r}") from None


def parse_config_text(text: str, base_dir) -> RunConfig:
    """Parse key=value lines (# comments allowed) into a RunConfig."""
    base_dir = Path(base_dir)
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}")
        raw[key] = value

    for key in _REQUIRED_KEYS:
        if not raw.get(key):
            raise ConfigError(f"missing required key {key!r}")

    def path_of(key: str) -> Path | None:
        value = raw.get(key, "")
        return (base_dir / value) if value else None

    mode = raw.get("attention_mode", "qk").lower()
    if mode not in ATTENTION_MODES:
        raise ConfigError(
            f"key 'attention_mode': must be one of {ATTENTION_MODES}, got {mode!r}"
        )

    kwargs = {}
    if "lambda" in raw:
        kwargs["lam"] = _parse_float("lambda", raw["lambda"])
    if "p" in raw:
        kwargs["p"] = _parse_float("p", raw["p"])
    if "similarity_metric" in raw:
        kwargs["similarity_metric"] = raw["similarity_metric"].lower()
    if "pruning_mode" in raw:
        kwargs["pruning_mode"] = raw["pruning_mode"].lower()
    if "ratio" in raw:
        kwargs["ratio"] = _parse_float("ratio", raw["ratio"])
    if raw.get("threshold"):
        kwargs["threshold"] = _parse_float("threshold", raw["threshold"])
    if "scaling" in raw:
        kwargs["scaling"] = _parse_bool("scaling", raw["scaling"])
    if "strategy" in raw:
        kwargs["strategy"] = raw["strategy"].lower()
    if "iterations" in raw:
        kwargs["iterations"] = _parse_int("iterations", raw["iterations"])
    feedback = FeedbackConfig(**kwargs)

    return RunConfig(
        tokens=path_of("tokens"),
        weights=path_of("weights"),
        text=path_of("text"),
        output_dir=path_of("output_dir"),
        attention_mode=mode,
        external_attention=path_of("external_attention"),
        labels=path_of("labels"),
        use_residual=_parse_bool("use_residual", raw["use_residual"]) if "use_residual" in raw else False,
        use_ffn=_parse_bool("use_ffn", raw["use_ffn"]) if "use_ffn" in raw else False,
        feedback=feedback,
    )


def read_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def config_to_text(config: RunConfig, base_dir) -> str:
    """Inverse of parse_config_text; paths are written relative to base_dir."""
    base_dir = Path(base_dir)

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        try:
            return os.path.relpath(p, base_dir)
        except ValueError:
            return str(p)

    fb = config.feedback
    lines = [
        f"tokens = {rel(config.tokens)}",
        f"weights = {rel(config.weights)}",
        f"text = {rel(config.text)}",
        f"output_dir = {rel(config.output_dir)}",
        f"attention_mode = {config.attention_mode}",
    ]
    if config.external_attention is not None:
        lines.append(f"external_attention = {rel(config.external_attention)}")
    if config.labels is not None:
        lines.append(f"labels = {rel(config.labels)}")
    lines += [
        f"use_residual = {str(config.use_residual).lower()}",
        f"use_ffn = {str(config.use_ffn).lower()}",
        f"lambda = {fb.lam!r}",
        f"p = {fb.p!r}",
        f"similarity_metric = {fb.similarity_metric}",
        f"pruning_mode = {fb.pruning_mode}",
        f"ratio = {fb.ratio!r}",
        f"threshold = {'' if fb.threshold is None else repr(fb.threshold)}",
        f"scaling = {str(fb.scaling).lower()}",
        f"strategy = {fb.strategy}",
        f"iterations = {fb.iterations}",
    ]
    return "\n".join(lines) + "\n"


def write_config(path, config: RunConfig) -> None:
    path = Path(path)
    _atomic_write_text(path, config_to_text(config, path.parent))


@dataclass
class MetricsReport:
    """All metrics one run produced; every fraction lies in [0, 1].

    retention_* map k to the retention fraction; stage_retention_* map
    head stage names to per-stage retention; timings are wall-clock
    milliseconds and are exempt from run-to-run reproducibility.
    """

    retention_init: dict[int, float] = field(default_factory=dict)
    retention_adapted: dict[int, float] = field(default_factory=dict)
    stage_retention_init: dict[str, float] = field(default_factory=dict)
    stage_retention_adapted: dict[str, float] = field(default_factory=dict)
    miou_init: float | None = None
    miou_adapted: float | None = None
    timings_ms: dict[str, float] = field(default_factory=dict)


def _check_fraction(key: str, value: float) -> float:
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"metric {key!r} = {value} lies outside [0, 1]")
    return value


def metrics_to_text(report: MetricsReport) -> str:
    lines = []
    for k in sorted(report.retention_init):
        lines.append(f"retention_init_k{k} = {_check_fraction('retention_init', report.retention_init[k])!r}")
    for k in sorted(report.retention_adapted):
        lines.append(f"retention_adapted_k{k} = {_check_fraction('retention_adapted', report.retention_adapted[k])!r}")
    for stage, value in report.stage_retention_init.items():
        lines.append(f"stage_retention_init_{stage} = {_check_fraction(stage, value)!r}")
    for stage, value in report.stage_retention_adapted.items():
        lines.append(f"stage_retention_adapted_{stage} = {_check_fraction(stage, value)!r}")
    if report.miou_init is not None:
        lines.append(f"miou_init = {_check_fraction('miou_init', report.miou_init)!r}")
    if report.miou_adapted is not None:
        lines.append(f"miou_adapted = {_check_fraction('miou_adapted', report.miou_adapted)!r}")
    for stage, value in report.timings_ms.items():
        lines.append(f"time_ms_{stage} = {value!r}")
    return "\n".join(lines) + "\n"


def write_metrics(path, report: MetricsReport) -> None:
    _atomic_write_text(path, metrics_to_text(report))


def parse_metrics_text(text: str) -> MetricsReport:
    report = MetricsReport()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        number = _parse_float(key, value)
        if key.startswith("retention_init_k"):
            report.retention_init[_parse_int(key, key.removeprefix("retention_init_k"))] = _check_fraction(key, number)
        elif key.startswith("retention_adapted_k"):
            report.retention_adapted[_parse_int(key, key.removeprefix("retention_adapted_k"))] = _check_fraction(key, number)
        elif key.startswith("stage_retention_init_"):
            report.stage_retention_init[key.removeprefix("stage_retention_init_")] = _check_fraction(key, number)
        elif key.startswith("stage_retention_adapted_"):
            report.stage_retention_adapted[key.removeprefix("stage_retention_adapted_")] = _check_fraction(key, number)
        elif key == "miou_init":
            report.miou_init = _check_fraction(key, number)
        elif key == "miou_adapted":
            report.miou_adapted = _check_fraction(key, number)
        elif key.startswith("time_ms_"):
            report.timings_ms[key.removeprefix("time_ms_")] = number
        else:
            raise ConfigError(f"unknown metrics key {key!r}")
    return report


def read_metrics(path) -> MetricsReport:
    return parse_metrics_text(Path(path).read_text(encoding="utf-8"))
