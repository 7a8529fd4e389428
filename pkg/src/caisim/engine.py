"""Event-driven execution of a scenario: queues, stages, caches, power."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from . import metrics
from .caches import PrefixKvCache, MmCache
from .errors import LivelockError, MmCannotFitError
from .loadgen import ArrivalSchedule, closed_loop, load_trace, poisson_arrivals
from .prompts import (ProgramDb, PromptMode, PromptTemplate, Segment,
                      Volatility, render, tokenize)
from .resources import (CpuPool, GpuDevice, WorkVector, power_breakpoints,
                        service_time)
from .routing import RoutingPolicy
from .simcore import DEFAULT_EVENT_CAP, EventQueue, RngStream, to_s, to_us
from .workflows import (CacheUse, Request, WorkloadKind, build_workflow,
                        rag_retrieval)


@dataclass
class SimResult:
    report: dict
    samples: list
    device_ids: list[str]


class _StageState:
    __slots__ = ("pending_deps", "start_us", "end_us", "kv_match", "mm_hit", "dram_hold")

    def __init__(self, pending_deps: int):
        self.pending_deps = pending_deps
        self.start_us = None
        self.end_us = None
        self.kv_match = None
        self.mm_hit = None
        self.dram_hold = 0


class Simulation:
    """One self-contained simulation instance; never shares mutable state."""

    def __init__(self, scenario):
        self.scenario = scenario
        self.seed = scenario.seed
        self.queue = EventQueue()
        self.horizon_us = to_us(scenario.horizon_s) if scenario.horizon_s else None
        self.event_cap = scenario.event_cap or DEFAULT_EVENT_CAP

        self.pool = CpuPool(scenario.cpu_cores, scenario.dram_capacity_bytes)
        self.devices: list[GpuDevice] = []
        self.groups: dict[str, list[GpuDevice]] = {}
        for dev_cfg in scenario.devices:
            dev = GpuDevice(
                device_id=dev_cfg["id"],
                profile=dev_cfg["profile_obj"],
                group=dev_cfg["group"],
                frequency_mhz=dev_cfg.get("frequency_mhz"),
                slots=dev_cfg.get("slots"),
                busy_util_pct=float(dev_cfg.get("busy_util_pct", 100.0)),
            )
            dev.kv_cache = PrefixKvCache(scenario.kv_capacity_blocks, scenario.kv_block_size)
            dev.mm_cache = MmCache(scenario.mm_capacity_bytes)
            self.devices.append(dev)
            self.groups.setdefault(dev.group, []).append(dev)

        self.workflow = build_workflow(scenario.workload_kind, scenario.workload_params)
        rng = lambda name: RngStream(self.seed, name)
        self.routing = RoutingPolicy(
            scenario.routing_kind, rng=rng(scenario.routing_seed_stream),
            sticky_first_touch=scenario.sticky_first_touch,
        )
        self.logic = _make_logic(self, scenario.workload_kind, scenario.workload_params,
                                 scenario.prompt_mode, rng)

        self.schedule = self._build_schedule(scenario, rng)

        self.cpu_queue: deque = deque()
        self.dev_queues: dict[str, deque] = {d.id: deque() for d in self.devices}
        self.requests: list[Request] = []
        self.completed: list[Request] = []
        self.dram_spills = 0
        self._next_arrival_idx = 0
        self._total_requests = self._request_count()

    def _build_schedule(self, scenario, rng) -> ArrivalSchedule:
        load = scenario.load
        kind = load["kind"]
        if kind == "poisson":
            return poisson_arrivals(float(load["rate_qps"]), scenario.horizon_s,
                                    rng("arrivals"))
        if kind == "closed_loop":
            n = int(load.get("n") or self.workflow.iterations or 1)
            return closed_loop(n)
        return load_trace(load["path"])

    def _request_count(self) -> int:
        intrinsic = self.logic.request_count()
        if self.schedule.kind == "closed_loop":
            n = self.schedule.n
            return min(n, intrinsic) if intrinsic is not None else n
        n = len(self.schedule.times_us)
        return min(n, intrinsic) if intrinsic is not None else n

    # -- event plumbing -------------------------------------------------

    def run(self) -> SimResult:
        if self.schedule.kind == "closed_loop":
            if self._total_requests > 0:
                self.queue.push(0, "arrival", 0)
                self._next_arrival_idx = 1
        else:
            for idx in range(self._total_requests):
                self.queue.push(self.schedule.times_us[idx], "arrival", idx)
        processed = 0
        while len(self.queue) > 0:
            if processed >= self.event_cap:
                raise LivelockError(f"event cap {self.event_cap} exceeded")
            ev = self.queue.pop()
            if self.horizon_us is not None and ev.time_us > self.horizon_us:
                break
            if ev.kind == "arrival":
                self._on_arrival(ev.payload, ev.time_us)
            elif ev.kind == "stage_done":
                self._on_stage_done(*ev.payload, t_us=ev.time_us)
            processed += 1
        return self._finish()

    def _on_arrival(self, idx: int, t_us: int) -> None:
        req = Request(id=idx, arrival_us=t_us, payload=self.logic.payload(idx))
        for stage_id, stage in self.workflow.stages.items():
            req.per_stage[stage_id] = _StageState(len(stage.depends_on))
        content_key = req.payload.get("content_key")
        for group, replicas in self.groups.items():
            dev = self.routing.route(content_key, replicas)
            req.replica_by_group[group] = dev
            dev.inflight_requests += 1
        self.requests.append(req)
        for stage_id, stage in self.workflow.stages.items():
            if not stage.depends_on:
                self._enqueue_stage(req, stage_id, t_us)

    def _resource_for(self, req: Request, stage_id: str):
        stage = self.workflow.stages[stage_id]
        if stage.resource == "CPU":
            return self.pool
        return req.replica_by_group[stage.resource]

    def _enqueue_stage(self, req: Request, stage_id: str, t_us: int) -> None:
        resource = self._resource_for(req, stage_id)
        if isinstance(resource, CpuPool):
            self.cpu_queue.append((req, stage_id))
            self._dispatch_cpu(t_us)
        else:
            self.dev_queues[resource.id].append((req, stage_id))
            self._dispatch_device(resource, t_us)

    def _dispatch_cpu(self, t_us: int) -> None:
        while self.cpu_queue and self.pool.busy_cores < self.pool.cores:
            req, stage_id = self.cpu_queue.popleft()
            self._start_stage(req, stage_id, self.pool, t_us)

    def _dispatch_device(self, dev: GpuDevice, t_us: int) -> None:
        q = self.dev_queues[dev.id]
        while q and dev.active < dev.slots:
            req, stage_id = q.popleft()
            self._start_stage(req, stage_id, dev, t_us)

    def _start_stage(self, req: Request, stage_id: str, resource, t_us: int) -> None:
        stage = self.workflow.stages[stage_id]
        state = req.per_stage[stage_id]
        state.start_us = t_us
        work = self.logic.stage_work(req, stage_id, resource, t_us)
        duration_us = to_us(service_time(stage.service_model, resource, work))
        if isinstance(resource, CpuPool):
            resource.acquire_core(t_us)
        else:
            resource.begin_service(t_us)
        self.queue.push(t_us + duration_us, "stage_done", (req, stage_id, resource))

    def _on_stage_done(self, req: Request, stage_id: str, resource, t_us: int) -> None:
        state = req.per_stage[stage_id]
        state.end_us = t_us
        if isinstance(resource, CpuPool):
            resource.release_core(t_us)
        else:
            resource.end_service(t_us)
        self.logic.stage_end(req, stage_id, resource, t_us)
        for other_id, other in self.workflow.stages.items():
            if stage_id in other.depends_on:
                other_state = req.per_stage[other_id]
                other_state.pending_deps -= 1
                if other_state.pending_deps == 0:
                    self._enqueue_stage(req, other_id, t_us)
        if all(s.end_us is not None for s in req.per_stage.values()):
            req.completion_us = t_us
            self.completed.append(req)
            for dev in set(req.replica_by_group.values()):
                dev.inflight_requests -= 1
            if self.schedule.kind == "closed_loop" and self._next_arrival_idx < self._total_requests:
                self.queue.push(t_us, "arrival", self._next_arrival_idx)
                self._next_arrival_idx += 1
        if isinstance(resource, CpuPool):
            self._dispatch_cpu(t_us)
        else:
            self._dispatch_device(resource, t_us)

    # -- reporting ------------------------------------------------------

    def _finish(self) -> SimResult:
        unfinished = len(self.requests) - len(self.completed)
        if self.horizon_us is not None and (unfinished > 0 or len(self.queue) > 0):
            makespan_us = self.horizon_us
        else:
            makespan_us = self.queue.clock_us
        samples = metrics.sample_timeline(self.pool, self.devices, makespan_us,
                                          self.scenario.sample_interval_s)
        energy_per_device = {}
        for dev in self.devices:
            energy_per_device[dev.id] = metrics.energy(power_breakpoints(dev, makespan_us))
        total_power_samples = [sum(s.gpu_powers) for s in samples]
        latencies = sorted(to_s(r.latency_us) for r in self.completed)
        lat_report = None
        if latencies:
            lat_report = {
                f"p{p}": metrics.percentile(latencies, p) for p in (25, 50, 90, 95, 99)
            }
        kv_agg = _merge_cache_stats(
            [d.kv_cache.snapshot_stats(end_us=makespan_us) for d in self.devices], "kv")
        mm_agg = _merge_cache_stats(
            [d.mm_cache.snapshot_stats() for d in self.devices], "mm")
        report = {
            "seed": self.seed,
            "scenario": self.scenario.raw,
            "requests": {"completed": len(self.completed), "unfinished": unfinished},
            "latency_s": lat_report,
            "e2e_makespan_s": to_s(makespan_us),
            "energy_wh": {
                "total": sum(energy_per_device.values()),
                "per_device": energy_per_device,
            },
            "p99_power_w": metrics.percentile(total_power_samples, 99) if samples else 0.0,
            "cost_usd": metrics.cost(to_s(makespan_us), self.devices),
            "kv": kv_agg,
            "mm": mm_agg,
            "dominance": metrics.dominance(samples) if samples else None,
            "dram_spills": self.dram_spills,
        }
        return SimResult(report=report, samples=samples,
                         device_ids=[d.id for d in self.devices])


def _merge_cache_stats(stats: list[dict], kind: str) -> dict:
    if kind == "kv":
        total = sum(s["total_tokens"] for s in stats)
        hits = sum(s["hit_tokens"] for s in stats)
        lifetime_sum = sum(s["lifetime_sum_s"] for s in stats)
        lifetime_samples = sum(s["lifetime_samples"] for s in stats)
        return {
            "hit_rate_pct": 100.0 * hits / total if total else 0.0,
            "hit_tokens": hits,
            "total_tokens": total,
            "lookups": sum(s["lookups"] for s in stats),
            "evictions": sum(s["evictions"] for s in stats),
            "admission_failures": sum(s["admission_failures"] for s in stats),
            "avg_block_lifetime_s": lifetime_sum / lifetime_samples if lifetime_samples else 0.0,
            "lifetime_defined": lifetime_samples > 0,
        }
    lookups = sum(s["lookups"] for s in stats)
    hits = sum(s["hit_objects"] for s in stats)
    return {
        "hit_rate_pct": 100.0 * hits / lookups if lookups else 0.0,
        "lookups": lookups,
        "hit_objects": hits,
        "evictions": sum(s["evictions"] for s in stats),
        "cannot_fit": sum(s["cannot_fit"] for s in stats),
    }


# -- workload logic -----------------------------------------------------


class _BaseLogic:
    def __init__(self, sim: Simulation):
        self.sim = sim

    def request_count(self):
        return None

    def payload(self, idx: int) -> dict:
        return {}

    def stage_work(self, req, stage_id, resource, t_us) -> WorkVector:
        return WorkVector()

    def stage_end(self, req, stage_id, resource, t_us) -> None:
        pass


def _fast_tokens(namespace: int, count: int) -> list[int]:
    # Cheap deterministic token ids for bulk synthetic corpora (retrieval
    # chunks); prompt-visible text still goes through the real tokenizer.
    base = (namespace * 1_000_003) & 0xFFFFFFFF
    return [((base + i) * 2654435761) & 0xFFFFFFFF for i in range(count)]


class _VideoQaLogic(_BaseLogic):
    def __init__(self, sim, params, prompt_mode, rng):
        super().__init__(sim)
        self.params = params
        self.n_videos = int(params.get("n_videos", 0))
        self.requests_per_video = int(params.get("requests_per_video", 1))
        self.order = params.get("video_order", "unique")
        self.frames = int(params.get("frames_per_video", 100))
        self.video_bytes = int(params.get("frame_bytes", 80_000_000)) * self.frames
        self.question_tokens = int(params.get("question_tokens", 8))
        self.transcript_tokens = int(params.get("transcript_tokens", 120))
        self.decode_tokens = int(params.get("decode_tokens", 256))
        self._video_seq = self._make_video_sequence()
        self._transcripts: dict[str, list[int]] = {}

    def _make_video_sequence(self) -> list[str] | None:
        if self.order == "unique":
            return None
        seq: list[str] = []
        if self.order == "sequential":
            for v in range(self.n_videos):
                seq += [f"v{v}"] * self.requests_per_video
        elif self.order == "paired":
            for g in range(0, self.n_videos, 2):
                pair = [f"v{g}", f"v{g + 1}"] if g + 1 < self.n_videos else [f"v{g}"]
                for _ in range(self.requests_per_video):
                    seq += pair
        else:
            raise ValueError(f"unknown video_order {self.order!r}")
        return seq

    def request_count(self):
        return len(self._video_seq) if self._video_seq is not None else None

    def payload(self, idx: int) -> dict:
        key = self._video_seq[idx] if self._video_seq is not None else f"v{idx}"
        return {"video_key": key, "content_key": key, "frames": self.frames}

    def _prompt_tokens(self, req) -> list[int]:
        key = req.payload["video_key"]
        transcript = self._transcripts.get(key)
        if transcript is None:
            transcript = tokenize(" ".join(f"{key}t{i}" for i in range(self.transcript_tokens)))
            self._transcripts[key] = transcript
        question = tokenize(" ".join(f"q{req.id}w{i}" for i in range(self.question_tokens)))
        return transcript + question

    def stage_work(self, req, stage_id, resource, t_us) -> WorkVector:
        if stage_id != "mm_llm":
            return WorkVector()
        state = req.per_stage[stage_id]
        try:
            hit = resource.mm_cache.access(req.payload["video_key"], self.video_bytes, t_us)
        except MmCannotFitError:
            hit = False
        state.mm_hit = hit
        prompt = self._prompt_tokens(req)
        req.payload["prompt_tokens"] = prompt
        state.kv_match = resource.kv_cache.lookup(prompt, t_us)
        return WorkVector(
            uncached_prefill_tokens=len(prompt) - state.kv_match.hit_tokens,
            decode_tokens=self.decode_tokens,
            uncached_frames=0 if hit else self.frames,
        )

    def stage_end(self, req, stage_id, resource, t_us) -> None:
        if stage_id != "mm_llm":
            return
        state = req.per_stage[stage_id]
        resource.kv_cache.commit(req.payload["prompt_tokens"], t_us, state.kv_match)


class _OpenEvolveLogic(_BaseLogic):
    def __init__(self, sim, params, prompt_mode, rng):
        super().__init__(sim)
        self.params = params
        self.mode = prompt_mode
        self.n_top = int(params.get("n_top", 4))
        self.n_diverse = int(params.get("n_diverse", 10))
        self.program_tokens = int(params.get("program_tokens", 160))
        self.decode_tokens = int(params.get("decode_tokens", 256))
        improv = params.get("improvement", {})
        self.improv_base = float(improv.get("base", 0.45))
        self.improv_noise = float(improv.get("noise", 0.25))
        self.sample_rng = rng("prompt_sampling")
        self.score_rng = rng("scores")
        self.db = ProgramDb()
        for i, seed_prog in enumerate(params.get("seed_programs", [])):
            self.db.insert(f"s{i}", float(seed_prog["score"]), self.program_tokens)
        if len(self.db) == 0:
            raise ValueError("openevolve workload needs seed_programs")
        self._tokens: dict[str, list[int]] = {}

    def request_count(self):
        return int(self.params["iterations"])

    def payload(self, idx: int) -> dict:
        return {"iteration": idx}

    def _program_token_list(self, pid: str) -> list[int]:
        toks = self._tokens.get(pid)
        if toks is None:
            toks = tokenize(" ".join(f"p{pid}w{i}" for i in range(self.program_tokens)))
            self._tokens[pid] = toks
        return toks

    def _build_prompt(self, req) -> list[int]:
        current = self.db.latest()
        sample = self.db.sample(self.n_top, self.n_diverse, self.sample_rng,
                                exclude={current.program_id})
        segments = [Segment(current.program_id, Volatility.DYNAMIC, "",
                            sort_key=current.insertion_index)]
        segments += [Segment(e.program_id, Volatility.SLOW, "", sort_key=e.insertion_index)
                     for e in sample.top]
        segments += [Segment(e.program_id, Volatility.DYNAMIC, "", sort_key=e.insertion_index)
                     for e in sample.diverse]
        template = PromptTemplate(segments=segments, mode=self.mode)
        tokens: list[int] = []
        for seg in render(template):
            tokens += self._program_token_list(seg.id)
        return tokens

    def stage_work(self, req, stage_id, resource, t_us) -> WorkVector:
        if stage_id != "llm":
            return WorkVector()
        prompt = req.payload["prompt_tokens"]
        state = req.per_stage[stage_id]
        state.kv_match = resource.kv_cache.lookup(prompt, t_us)
        return WorkVector(
            uncached_prefill_tokens=len(prompt) - state.kv_match.hit_tokens,
            decode_tokens=self.decode_tokens,
        )

    def stage_end(self, req, stage_id, resource, t_us) -> None:
        if stage_id == "build_prompt":
            req.payload["prompt_tokens"] = self._build_prompt(req)
        elif stage_id == "llm":
            state = req.per_stage[stage_id]
            resource.kv_cache.commit(req.payload["prompt_tokens"], t_us, state.kv_match)
        elif stage_id == "db_insert":
            score = self.improv_base + self.improv_noise * self.score_rng.random()
            self.db.insert(f"g{req.payload['iteration']}", score, self.program_tokens)


class _RagLogic(_BaseLogic):
    def __init__(self, sim, params, prompt_mode, rng):
        super().__init__(sim)
        self.params = params
        self.k = int(params.get("k", 5))
        self.db_chunks = int(params.get("db_chunks", 1000))
        self.db_bytes = int(params.get("db_bytes", 3_600_000_000))
        self.chunk_tokens = int(params.get("chunk_tokens", 2000))
        self.query_tokens = int(params.get("query_tokens", 32))
        self.decode_tokens = int(params.get("decode_tokens", 256))
        self.per_chunk_scan_s = float(params.get("per_chunk_scan_s", 0.005))
        self.per_result_s = float(params.get("per_result_s", 0.02))
        self.working_set_fraction = float(params.get("working_set_fraction", 0.8))
        self.spill_penalty = float(params.get("dram_spill_penalty", 2.0))
        self.retrieval_rng = rng("retrieval")
        self._chunk_tokens: dict[int, list[int]] = {}

    def payload(self, idx: int) -> dict:
        return {"k": self.k}

    def _chunks_for(self, req) -> list[int]:
        ids = req.payload.get("chunk_ids")
        if ids is None:
            ids = self.retrieval_rng.sample(range(self.db_chunks), self.k)
            req.payload["chunk_ids"] = ids
        return ids

    def stage_work(self, req, stage_id, resource, t_us) -> WorkVector:
        if stage_id == "vector_search":
            cost = rag_retrieval(self.sim.pool, self.k, self.db_bytes, self.db_chunks,
                                 self.per_chunk_scan_s, self.per_result_s,
                                 self.working_set_fraction, self.spill_penalty)
            if cost.spilled:
                self.sim.dram_spills += 1
            state = req.per_stage[stage_id]
            state.dram_hold = cost.dram_delta_bytes
            self.sim.pool.dram_add(t_us, cost.dram_delta_bytes)
            return WorkVector(unit_work=cost.duration_s)
        if stage_id == "generate":
            tokens = tokenize(" ".join(f"r{req.id}q{i}" for i in range(self.query_tokens)))
            for cid in self._chunks_for(req):
                chunk = self._chunk_tokens.get(cid)
                if chunk is None:
                    chunk = _fast_tokens(cid, self.chunk_tokens)
                    self._chunk_tokens[cid] = chunk
                tokens += chunk
            req.payload["prompt_tokens"] = tokens
            state = req.per_stage[stage_id]
            state.kv_match = resource.kv_cache.lookup(tokens, t_us)
            return WorkVector(
                uncached_prefill_tokens=len(tokens) - state.kv_match.hit_tokens,
                decode_tokens=self.decode_tokens,
            )
        return WorkVector()

    def stage_end(self, req, stage_id, resource, t_us) -> None:
        if stage_id == "vector_search":
            state = req.per_stage[stage_id]
            if state.dram_hold:
                self.sim.pool.dram_remove(t_us, state.dram_hold)
        elif stage_id == "generate":
            state = req.per_stage[stage_id]
            resource.kv_cache.commit(req.payload["prompt_tokens"], t_us, state.kv_match)


def _make_logic(sim, kind: WorkloadKind, params: dict, prompt_mode: PromptMode, rng):
    if kind is WorkloadKind.VIDEO_QA:
        return _VideoQaLogic(sim, params, prompt_mode, rng)
    if kind is WorkloadKind.OPENEVOLVE:
        return _OpenEvolveLogic(sim, params, prompt_mode, rng)
    return _RagLogic(sim, params, prompt_mode, rng)


def execute_request(sim: Simulation, request_idx: int, t_us: int) -> None:
    """Schedule a request's stage events on the simulation's queue."""
    sim.queue.push(t_us, "arrival", request_idx)
