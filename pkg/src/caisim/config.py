"""Scenario files, accelerator profiles, and their validation.

Profiles resolve from CAISIM_PROFILE_DIR when set, otherwise from the
package's bundled profile directory. Scenario paths given to the CLI may
also name a bundled scenario by stem (e.g. "rag_closed_loop").
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path

from .errors import ConfigError
from .prompts import PromptMode
from .resources import GpuProfile, load_profile_file, perf_scale
from .workflows import WorkloadKind

PROFILE_DIR_ENV = "CAISIM_PROFILE_DIR"

_REQUIRED_GROUPS = {
    WorkloadKind.VIDEO_QA: {"GPU_A", "GPU_B"},
    WorkloadKind.OPENEVOLVE: {"GPU_A"},
    WorkloadKind.RAG: {"GPU_A"},
}

_LOAD_KINDS = ("poisson", "closed_loop", "trace")


def _data_dir(kind: str) -> Path:
    return Path(str(importlib_resources.files("caisim") / "data" / kind))


def profile_dir() -> Path:
    override = os.environ.get(PROFILE_DIR_ENV)
    return Path(override) if override else _data_dir("profiles")


def load_profiles(directory: Path | None = None) -> dict[str, GpuProfile]:
    directory = directory or profile_dir()
    profiles: dict[str, GpuProfile] = {}
    for path in sorted(Path(directory).glob("*.json")):
        prof = load_profile_file(path)
        profiles[prof.name] = prof
    if not profiles:
        raise ConfigError("profiles", f"no profile files found in {directory}")
    return profiles


def shipped_scenario_dir() -> Path:
    return _data_dir("scenarios")


def resolve_scenario_path(ref: str) -> Path:
    """A literal path, or the stem of a bundled scenario."""
    p = Path(ref)
    if p.exists():
        return p
    stem = p.stem if p.suffix == ".json" else p.name
    shipped = shipped_scenario_dir() / f"{stem}.json"
    if shipped.exists():
        return shipped
    raise ConfigError("scenario", f"no such scenario file or bundled scenario: {ref}")


@dataclass
class ScenarioConfig:
    """Validated experiment description; raw dict retained for echo/sweeps."""

    raw: dict
    seed: int
    horizon_s: float | None
    sample_interval_s: float
    workload_kind: WorkloadKind
    workload_params: dict
    devices: list[dict]
    routing_kind: str
    routing_seed_stream: str
    sticky_first_touch: str
    load: dict
    kv_capacity_blocks: int
    kv_block_size: int
    mm_capacity_bytes: int
    cpu_cores: int
    dram_capacity_bytes: int
    prompt_mode: PromptMode
    event_cap: int | None = None


def _require(raw: dict, key: str, path: str):
    if key not in raw:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return raw[key]


def parse_scenario(raw: dict, profiles: dict[str, GpuProfile]) -> ScenarioConfig:
    raw = copy.deepcopy(raw)
    seed = int(_require(raw, "seed", ""))

    workload = _require(raw, "workload", "")
    kind_str = _require(workload, "kind", "workload")
    try:
        kind = WorkloadKind(kind_str)
    except ValueError as exc:
        raise ConfigError("workload.kind", f"unknown workload {kind_str!r}") from exc
    params = workload.get("params", {})

    load = _require(raw, "load", "")
    load_kind = _require(load, "kind", "load")
    if load_kind not in _LOAD_KINDS:
        raise ConfigError("load.kind", f"must be one of {_LOAD_KINDS}, got {load_kind!r}")
    horizon_s = raw.get("horizon_s")
    if load_kind == "poisson":
        rate = _require(load, "rate_qps", "load")
        if float(rate) <= 0:
            raise ConfigError("load.rate_qps", "must be positive")
        if horizon_s is None:
            raise ConfigError("horizon_s", "required for poisson load")
    if load_kind == "closed_loop":
        n = load.get("n", params.get("iterations"))
        if n is None:
            raise ConfigError("load.n", "required for closed_loop load")
        if int(n) < 1:
            raise ConfigError("load.n", "must be >= 1")
        load["n"] = int(n)
    if load_kind == "trace" and "path" not in load:
        raise ConfigError("load.path", "required for trace load")

    if kind is WorkloadKind.OPENEVOLVE:
        if "iterations" not in params:
            raise ConfigError("workload.params.iterations", "missing required field")
        if not params.get("seed_programs"):
            raise ConfigError("workload.params.seed_programs", "missing required field")
    if kind is WorkloadKind.VIDEO_QA:
        order = params.get("video_order", "unique")
        if order not in ("unique", "sequential", "paired"):
            raise ConfigError("workload.params.video_order", f"unknown order {order!r}")
        if order != "unique" and "n_videos" not in params:
            raise ConfigError("workload.params.n_videos", "missing required field")
    if kind is WorkloadKind.RAG:
        k = int(params.get("k", 5))
        db_chunks = int(params.get("db_chunks", 1000))
        if k > db_chunks:
            raise ConfigError("workload.params.k", f"k={k} exceeds db_chunks={db_chunks}")

    devices_raw = _require(raw, "devices", "")
    if not devices_raw:
        raise ConfigError("devices", "at least one device is required")
    devices: list[dict] = []
    seen_ids = set()
    for i, dev in enumerate(devices_raw):
        dev = dict(dev)
        dev_id = _require(dev, "id", f"devices.{i}")
        if dev_id in seen_ids:
            raise ConfigError(f"devices.{i}.id", f"duplicate device id {dev_id!r}")
        seen_ids.add(dev_id)
        prof_name = _require(dev, "profile", f"devices.{i}")
        prof = profiles.get(prof_name)
        if prof is None:
            raise ConfigError(f"devices.{i}.profile", f"unknown profile {prof_name!r}")
        dev["profile_obj"] = prof
        _require(dev, "group", f"devices.{i}")
        freq = dev.get("frequency_mhz")
        if freq is not None:
            try:
                perf_scale(prof, float(freq))
            except Exception as exc:
                raise ConfigError(f"devices.{i}.frequency_mhz", str(exc)) from exc
        devices.append(dev)

    groups = {d["group"] for d in devices}
    missing = _REQUIRED_GROUPS[kind] - groups
    if missing:
        raise ConfigError("devices", f"workload {kind.value} needs device groups {sorted(missing)}")

    routing = raw.get("routing", {"kind": "round_robin"})
    caches = raw.get("caches", {})
    cpu = raw.get("cpu", {})
    mode_str = raw.get("prompt_mode", "DEFAULT")
    try:
        prompt_mode = PromptMode(mode_str)
    except ValueError as exc:
        raise ConfigError("prompt_mode", f"unknown mode {mode_str!r}") from exc

    return ScenarioConfig(
        raw=raw,
        seed=seed,
        horizon_s=float(horizon_s) if horizon_s is not None else None,
        sample_interval_s=float(raw.get("sample_interval_s", 1.0)),
        workload_kind=kind,
        workload_params=params,
        devices=devices,
        routing_kind=routing.get("kind", "round_robin"),
        routing_seed_stream=routing.get("seed_stream", "routing"),
        sticky_first_touch=routing.get("sticky_first_touch", "least_loaded"),
        load=load,
        kv_capacity_blocks=int(caches.get("kv_capacity_blocks", 4096)),
        kv_block_size=int(caches.get("kv_block_size", 16)),
        mm_capacity_bytes=int(caches.get("mm_capacity_bytes", 10 * 1024**3)),
        cpu_cores=int(cpu.get("cores", 16)),
        dram_capacity_bytes=int(cpu.get("dram_capacity_bytes", 64 * 1024**3)),
        prompt_mode=prompt_mode,
        event_cap=raw.get("event_cap"),
    )


def load_scenario(path, profiles: dict[str, GpuProfile] | None = None) -> ScenarioConfig:
    path = resolve_scenario_path(str(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"malformed JSON: {exc}") from exc
    return parse_scenario(raw, profiles or load_profiles())


def set_by_path(raw: dict, dotted: str, value) -> None:
    """Assign into a nested dict/list using a dotted path.

    List elements address by integer index or by their "id" field, e.g.
    devices.llm0.frequency_mhz.
    """
    parts = dotted.split(".")
    node = raw
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            idx = None
            if part.isdigit():
                idx = int(part)
            else:
                for j, item in enumerate(node):
                    if isinstance(item, dict) and item.get("id") == part:
                        idx = j
                        break
            if idx is None or idx >= len(node):
                raise ConfigError(dotted, f"no list element {part!r}")
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = value
            else:
                if part not in node:
                    raise ConfigError(dotted, f"unknown field {part!r}")
                node = node[part]
        else:
            raise ConfigError(dotted, f"cannot descend into scalar at {part!r}")
