"""Pipeline DAGs for the three built-in workloads and their helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import ConfigError
from .resources import CpuPool, StageServiceModel, WorkVector


class WorkloadKind(enum.Enum):
    VIDEO_QA = "video_qa"
    OPENEVOLVE = "openevolve"
    RAG = "rag"


class CacheUse(enum.Enum):
    NONE = "NONE"
    KV = "KV"
    MM = "MM"
    BOTH = "BOTH"


@dataclass
class StageSpec:
    id: str
    resource: str  # "CPU" or a device group such as "GPU_A"
    service_model: StageServiceModel
    cache_use: CacheUse = CacheUse.NONE
    depends_on: list[str] = field(default_factory=list)


@dataclass
class WorkflowSpec:
    kind: WorkloadKind
    stages: dict[str, StageSpec]
    iterations: int | None = None  # closed-loop request count, when intrinsic

    def __post_init__(self):
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        seen: set[str] = set()
        done: set[str] = set()

        def visit(stage_id: str) -> None:
            if stage_id in done:
                return
            if stage_id in seen:
                raise ConfigError("workflow", f"dependency cycle involving {stage_id!r}")
            seen.add(stage_id)
            for dep in self.stages[stage_id].depends_on:
                if dep not in self.stages:
                    raise ConfigError("workflow", f"{stage_id!r} depends on unknown stage {dep!r}")
                visit(dep)
            done.add(stage_id)

        for sid in self.stages:
            visit(sid)

    def sinks(self) -> list[str]:
        depended = {d for s in self.stages.values() for d in s.depends_on}
        return [sid for sid in self.stages if sid not in depended]


@dataclass
class Request:
    id: int
    arrival_us: int
    payload: dict = field(default_factory=dict)
    per_stage: dict = field(default_factory=dict)
    completion_us: int | None = None
    replica_by_group: dict = field(default_factory=dict)

    @property
    def latency_us(self) -> int | None:
        if self.completion_us is None:
            return None
        return self.completion_us - self.arrival_us


def _model(params: dict, key: str, default: dict | None = None) -> StageServiceModel:
    obj = params.get(key, default or {})
    return StageServiceModel(
        fixed_time=float(obj.get("fixed_s", 0.0)),
        compute_time=float(obj.get("compute_s", 0.0)),
        per_token_prefill=float(obj.get("per_token_prefill_s", 0.0)),
        per_token_decode=float(obj.get("per_token_decode_s", 0.0)),
        per_frame_encode=float(obj.get("per_frame_encode_s", 0.0)),
    )


def _cpu_stage_model(params: dict, key: str, default_s: float) -> StageServiceModel:
    return StageServiceModel(fixed_time=float(params.get(key, default_s)))


def build_workflow(kind: WorkloadKind, params: dict) -> WorkflowSpec:
    """Construct the stage DAG for one of the built-in pipelines."""
    if kind is WorkloadKind.VIDEO_QA:
        stages = {
            "decode": StageSpec("decode", "CPU", _cpu_stage_model(params, "decode_s", 0.5)),
            "stt": StageSpec("stt", "GPU_B", _model(params, "stt"), depends_on=["decode"]),
            "frame_prep": StageSpec(
                "frame_prep", "CPU", _cpu_stage_model(params, "frame_prep_s", 0.5),
                depends_on=["decode"],
            ),
            "mm_llm": StageSpec(
                "mm_llm", "GPU_A", _model(params, "mm_llm"), cache_use=CacheUse.BOTH,
                depends_on=["stt", "frame_prep"],
            ),
        }
        return WorkflowSpec(kind, stages)

    if kind is WorkloadKind.OPENEVOLVE:
        if "iterations" not in params:
            raise ConfigError("workload.params.iterations", "required for openevolve")
        stages = {
            "build_prompt": StageSpec(
                "build_prompt", "CPU", _cpu_stage_model(params, "build_prompt_s", 0.5)),
            "llm": StageSpec(
                "llm", "GPU_A", _model(params, "llm"), cache_use=CacheUse.KV,
                depends_on=["build_prompt"],
            ),
            "evaluate": StageSpec(
                "evaluate", "CPU", _cpu_stage_model(params, "evaluate_s", 1.0),
                depends_on=["llm"],
            ),
            "db_insert": StageSpec(
                "db_insert", "CPU", _cpu_stage_model(params, "db_insert_s", 0.1),
                depends_on=["evaluate"],
            ),
        }
        return WorkflowSpec(kind, stages, iterations=int(params["iterations"]))

    if kind is WorkloadKind.RAG:
        stages = {
            "embed": StageSpec("embed", "CPU", _cpu_stage_model(params, "embed_s", 0.3)),
            "vector_search": StageSpec(
                "vector_search", "CPU", StageServiceModel(), depends_on=["embed"]),
            "generate": StageSpec(
                "generate", "GPU_A", _model(params, "llm"), cache_use=CacheUse.KV,
                depends_on=["vector_search"],
            ),
        }
        return WorkflowSpec(kind, stages)

    raise ConfigError("workload.kind", f"unknown workload {kind!r}")


@dataclass
class RetrievalCost:
    duration_s: float
    dram_delta_bytes: int
    spilled: bool


def rag_retrieval(pool: CpuPool, k: int, db_bytes: int, db_chunks: int,
                  per_chunk_scan_s: float, per_result_s: float,
                  working_set_fraction: float, spill_penalty: float = 2.0) -> RetrievalCost:
    """Linear-scan retrieval cost plus the DRAM working set it pins.

    If the working set would not fit in the pool's remaining DRAM, the
    duration is multiplied by spill_penalty (data pulled from a lower
    tier) and the result is flagged.
    """
    if k > db_chunks:
        raise ConfigError("workload.params.k", f"k={k} exceeds db_chunks={db_chunks}")
    duration = per_chunk_scan_s * db_chunks + per_result_s * k
    delta = int(working_set_fraction * db_bytes)
    spilled = pool.dram_used + delta > pool.dram_capacity
    if spilled:
        duration *= spill_penalty
    return RetrievalCost(duration_s=duration, dram_delta_bytes=delta, spilled=spilled)
