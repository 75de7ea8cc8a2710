"""Dataset files, sharding, run configuration, and report persistence."""

from __future__ import annotations

import copy
import csv
import gzip
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .costs import (ConstantStep, DiminishingStep, ExponentialStep, Limits, MLConstants,
                    SystemProfile)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_BYTES = 1 << 33


class IdxError(ValueError):
    pass


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ---------------------------------------------------------------------------
# IDX files


def load_idx(path, expect: str | None = None, scale: bool = False) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed).

    ``expect`` is ``"images"`` (3-D, magic 0x803) or ``"labels"`` (1-D,
    magic 0x801); ``None`` accepts either. ``scale`` maps bytes to [0, 1].
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw, expect=expect, scale=scale)


def parse_idx(raw: bytes, expect: str | None = None, scale: bool = False) -> np.ndarray:
    if len(raw) < 4:
        raise IdxError("truncated file: missing magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    wanted = {"images": IMAGE_MAGIC, "labels": LABEL_MAGIC}
    if expect is not None and magic != wanted[expect]:
        raise IdxError(f"wrong magic 0x{magic:08x} for {expect} (expected 0x{wanted[expect]:08x})")
    if magic not in wanted.values():
        raise IdxError(f"unsupported magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError("truncated file: incomplete dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > MAX_IDX_BYTES:
            raise IdxError("dimension overflow")
    body = raw[header:]
    if len(body) < count:
        raise IdxError(f"truncated file: expected {count} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)
    if scale:
        return arr.astype(float) / 255.0
    return arr.copy()


def write_idx(path, arr: np.ndarray):
    """Write a uint8 array as IDX (gzip when ``path`` ends in .gz)."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise IdxError("IDX writer handles unsigned bytes only")
    magic = {1: LABEL_MAGIC, 3: IMAGE_MAGIC}.get(arr.ndim)
    if magic is None:
        raise IdxError("IDX writer handles 1-D labels or 3-D images")
    data = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape) + arr.tobytes()
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


# ---------------------------------------------------------------------------
# Sharding


@dataclass(frozen=True)
class ShardPlan:
    N: int
    shards: tuple[np.ndarray, ...]
    seed: int


def shard_uniform(n_samples: int, N: int, seed: int) -> ShardPlan:
    """Seeded shuffle, then contiguous near-equal slices (sizes differ by at most one)."""
    if N < 1 or n_samples < N:
        raise ValueError("need at least one sample per worker")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return ShardPlan(N, tuple(np.array_split(perm, N)), seed)


# ---------------------------------------------------------------------------
# Configuration

NODE_FIELDS = ("F", "p", "r", "s", "C", "alpha")
MODES = ("constant", "exponential", "diminishing", "full")


def _positive(value, path, allow_inf=False) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity") and allow_inf:
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    v = float(value)
    if math.isinf(v) and allow_inf:
        return v
    if not (v > 0 and math.isfinite(v)):
        raise ConfigError(path, f"must be positive and finite, got {value!r}")
    return v


def _require(section: Mapping, key: str, path: str):
    if not isinstance(section, Mapping):
        raise ConfigError(path, "expected an object")
    if key not in section:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return section[key]


def two_class_values(mean: float, ratio: float, count: int, first: int, integer: bool) -> list:
    """First ``first`` workers at ``ratio`` times the rest, with ``mean`` as the class average."""
    low = 2.0 * mean / (1.0 + ratio)
    high = ratio * low
    vals = [high] * first + [low] * (count - first)
    if integer:
        vals = [max(1, int(round(v))) for v in vals]
    return vals


def _worker_values(spec, count: int, path: str, integer: bool) -> list:
    if isinstance(spec, Mapping):
        tc = _require(spec, "two_class", path)
        mean = _positive(_require(tc, "mean", f"{path}.two_class"), f"{path}.two_class.mean")
        ratio = _positive(_require(tc, "ratio", f"{path}.two_class"), f"{path}.two_class.ratio")
        first = int(tc.get("first", count // 2))
        if not 0 <= first <= count:
            raise ConfigError(f"{path}.two_class.first", "must lie in [0, count]")
        return two_class_values(mean, ratio, count, first, integer)
    if isinstance(spec, list):
        if len(spec) != count:
            raise ConfigError(path, f"expected {count} entries, got {len(spec)}")
        return [_positive(v, f"{path}[{i}]", allow_inf=integer) for i, v in enumerate(spec)]
    return [_positive(spec, path, allow_inf=integer)] * count


def build_profile(system: Mapping, overrides: Mapping | None = None) -> SystemProfile:
    """Construct a SystemProfile from the ``system`` config section.

    ``overrides`` may set ``F_ratio`` / ``s_ratio`` on two-class worker fields.
    """
    system = copy.deepcopy(dict(system))
    workers = dict(_require(system, "workers", "system"))
    for key, field_name in (("F_ratio", "F"), ("s_ratio", "s")):
        if overrides and key in overrides:
            spec = workers.get(field_name)
            if not (isinstance(spec, Mapping) and "two_class" in spec):
                raise ConfigError(f"system.workers.{field_name}", f"{key} sweep needs a two_class spec")
            spec = copy.deepcopy(dict(spec))
            spec["two_class"] = dict(spec["two_class"], ratio=overrides[key])
            workers[field_name] = spec
    server = _require(system, "server", "system")
    count = int(_require(workers, "count", "system.workers"))
    if count < 1:
        raise ConfigError("system.workers.count", "must be at least 1")
    dim = _require(system, "dim", "system")
    if not isinstance(dim, int) or dim < 1:
        raise ConfigError("system.dim", "must be a positive integer")
    arrays = {}
    for name in NODE_FIELDS:
        is_s = name == "s"
        head = _positive(_require(server, name, "system.server"), f"system.server.{name}", allow_inf=is_s)
        tail = _worker_values(_require(workers, name, "system.workers"), count,
                              f"system.workers.{name}", integer=is_s)
        arrays[name] = [head] + tail
    for i, v in enumerate(arrays["s"]):
        if not (math.isinf(v) or float(v).is_integer()):
            raise ConfigError("system.s", f"node {i}: quantization parameter must be an integer or inf")
    q_table = {_s_key(k): float(v) for k, v in system.get("q_table", {}).items()}
    M_table = {_s_key(k): float(v) for k, v in system.get("M_table", {}).items()}
    return SystemProfile(F=np.array(arrays["F"]), p=np.array(arrays["p"]), r=np.array(arrays["r"]),
                         s=tuple(arrays["s"]), C=np.array(arrays["C"]),
                         alpha=np.array(arrays["alpha"]), dim=dim,
                         q_table=q_table, M_table=M_table)


def _s_key(k):
    if isinstance(k, str) and k.lower() in ("inf", "infinity"):
        return math.inf
    return int(k)


@dataclass
class RunConfig:
    """Validated run configuration; ``system`` is kept in its declarative form."""

    system: dict
    ml: MLConstants | None
    limits: Limits
    steps: dict = field(default_factory=dict)
    samples_per_worker: int = 1
    optimizer: dict = field(default_factory=dict)
    simulation: dict = field(default_factory=dict)
    estimate: dict = field(default_factory=dict)
    seed: int = 0

    def profile(self, **overrides) -> SystemProfile:
        return build_profile(self.system, overrides)

    @property
    def N(self) -> int:
        return int(self.system["workers"]["count"])

    def step_rule(self, mode: str):
        if mode == "constant":
            return ConstantStep(self.steps["constant"]["gamma"])
        if mode == "exponential":
            e = self.steps["exponential"]
            return ExponentialStep(e["gamma"], e["rho"])
        if mode == "diminishing":
            d = self.steps["diminishing"]
            return DiminishingStep(d["gamma"], d["rho"])
        raise ValueError(f"mode {mode!r} has no fixed step-size rule")

    def to_dict(self) -> dict:
        out = {
            "system": copy.deepcopy(self.system),
            "limits": {"T_max": self.limits.T_max, "C_max": self.limits.C_max},
            "steps": copy.deepcopy(self.steps),
            "samples_per_worker": self.samples_per_worker,
            "optimizer": copy.deepcopy(self.optimizer),
            "simulation": copy.deepcopy(self.simulation),
            "seed": self.seed,
        }
        if self.ml is not None:
            out["ml"] = {"L": self.ml.L, "sigma": self.ml.sigma, "G": self.ml.G,
                         "f_init": self.ml.f_init, "f_star_lb": self.ml.f_star_lb}
            if self.ml.D is not None:
                out["ml"]["D"] = self.ml.D
        if self.estimate:
            out["estimate"] = copy.deepcopy(self.estimate)
        return out

    def with_limits(self, T_max: float | None = None, C_max: float | None = None) -> "RunConfig":
        cfg = copy.deepcopy(self)
        cfg.limits = Limits(T_max if T_max is not None else self.limits.T_max,
                            C_max if C_max is not None else self.limits.C_max)
        return cfg


def config_from_dict(data: Mapping) -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "expected an object")
    system = dict(_require(data, "system", ""))
    build_profile(system)  # validates
    ml = None
    if "ml" in data:
        m = data["ml"]
        vals = {k: _positive(_require(m, k, "ml"), f"ml.{k}") for k in ("L", "sigma", "G")}
        f_init = _require(m, "f_init", "ml")
        f_star = m.get("f_star_lb", 0.0)
        if not isinstance(f_init, (int, float)) or not isinstance(f_star, (int, float)):
            raise ConfigError("ml.f_init", "expected numbers for f_init and f_star_lb")
        if f_init < f_star:
            raise ConfigError("ml.f_init", "must be at least ml.f_star_lb")
        ml = MLConstants(vals["L"], vals["sigma"], vals["G"], float(f_init), float(f_star), m.get("D"))
    elif "estimate" not in data:
        raise ConfigError("ml", "missing required field (or provide an estimate section)")
    lim = _require(data, "limits", "")
    limits = Limits(_positive(_require(lim, "T_max", "limits"), "limits.T_max"),
                    _positive(_require(lim, "C_max", "limits"), "limits.C_max"))
    steps = copy.deepcopy(dict(data.get("steps", {})))
    for mode, params in steps.items():
        if mode not in ("constant", "exponential", "diminishing"):
            raise ConfigError(f"steps.{mode}", "unknown step-size rule")
        _positive(_require(params, "gamma", f"steps.{mode}"), f"steps.{mode}.gamma")
        if mode != "constant":
            rho = _positive(_require(params, "rho", f"steps.{mode}"), f"steps.{mode}.rho")
            if mode == "exponential" and rho >= 1:
                raise ConfigError("steps.exponential.rho", "must be below 1")
        if ml is not None and params["gamma"] > 1.0 / ml.L * (1 + 1e-12):
            raise ConfigError(f"steps.{mode}.gamma", "must not exceed 1/L")
    spw = data.get("samples_per_worker", 1)
    if not isinstance(spw, int) or spw < 1:
        raise ConfigError("samples_per_worker", "must be a positive integer")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    return RunConfig(system=system, ml=ml, limits=limits, steps=steps, samples_per_worker=spw,
                     optimizer=copy.deepcopy(dict(data.get("optimizer", {}))),
                     simulation=copy.deepcopy(dict(data.get("simulation", {}))),
                     estimate=copy.deepcopy(dict(data.get("estimate", {}))), seed=seed)


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, default=_json_default) + "\n")


def reference_config_path() -> Path:
    return Path(str(resources.files("fedgp") / "fixtures" / "paper-sec7.json"))


def load_reference_config() -> RunConfig:
    return load_config(reference_config_path())


# ---------------------------------------------------------------------------
# Reports


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats with strings so the JSON stays standard."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def report_json(report: Mapping) -> str:
    """Standard JSON (non-finite floats as strings, numpy values unwrapped)."""
    return json.dumps(_clean(json.loads(json.dumps(report, default=_json_default))), indent=2)


def save_report(report: Mapping, path):
    Path(path).write_text(report_json(report) + "\n")


def sweep_columns(N: int) -> list[str]:
    return (["sweep_var", "value", "mode", "baseline", "energy", "time", "conv_error", "K0"]
            + [f"K{n}" for n in range(1, N + 1)] + ["B", "gamma", "rho", "status", "relaxed_energy"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_sweep_csv(rows: Iterable[Mapping], N: int, path_or_buf):
    cols = sweep_columns(N)
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in cols])
    finally:
        if own:
            fh.close()


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
