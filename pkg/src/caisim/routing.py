"""Replica-selection policies for stages served by a device group."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .resources import GpuDevice
from .simcore import RngStream

POLICY_KINDS = ("random", "round_robin", "sticky", "cache_aware")


class RoutingPolicy:
    """Stateful router; one instance per simulation run.

    STICKY pins a content key to the replica chosen at first touch; the
    default first-touch rule is fewest-assigned-keys (deterministic and
    balanced at desk scale), with key hashing available behind a flag.
    """

    def __init__(self, kind: str, rng: RngStream | None = None,
                 sticky_first_touch: str = "least_loaded"):
        if kind not in POLICY_KINDS:
            raise ConfigError("routing.kind", f"unknown policy {kind!r}")
        self.kind = kind
        self.rng = rng
        self.sticky_first_touch = sticky_first_touch
        self.affinity: dict[str, str] = {}
        self.assigned_counts: dict[str, int] = {}
        self._rr_counter = 0

    def route(self, content_key: str | None, replicas: list[GpuDevice]) -> GpuDevice:
        if not replicas:
            raise ValueError("no replicas to route to")
        if len(replicas) == 1:
            return replicas[0]
        if self.kind == "random":
            assert self.rng is not None
            return replicas[int(self.rng.random() * len(replicas))]
        if self.kind == "round_robin":
            choice = replicas[self._rr_counter % len(replicas)]
            self._rr_counter += 1
            return choice
        if content_key is None:
            raise ConfigError("routing", f"policy {self.kind!r} requires a content key")
        if self.kind == "sticky":
            return self._route_sticky(content_key, replicas)
        return self._route_cache_aware(content_key, replicas)

    def _route_sticky(self, key: str, replicas: list[GpuDevice]) -> GpuDevice:
        assigned = self.affinity.get(key)
        if assigned is not None:
            for dev in replicas:
                if dev.id == assigned:
                    return dev
        if self.sticky_first_touch == "key_hash":
            import hashlib
            digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
            choice = replicas[int.from_bytes(digest, "big") % len(replicas)]
        else:
            # fewest assigned keys, then fewest in-flight, then lowest id
            choice = min(
                replicas,
                key=lambda d: (self.assigned_counts.get(d.id, 0), d.inflight_requests, d.id),
            )
        self.affinity[key] = choice.id
        self.assigned_counts[choice.id] = self.assigned_counts.get(choice.id, 0) + 1
        return choice

    def _route_cache_aware(self, key: str, replicas: list[GpuDevice]) -> GpuDevice:
        # most resident cached bytes for the key; ties -> fewest in-flight,
        # then lowest id
        def score(dev: GpuDevice):
            resident = dev.mm_cache.resident_bytes(key) if dev.mm_cache else 0
            return (-resident, dev.inflight_requests, dev.id)

        return min(replicas, key=score)


def route(policy: RoutingPolicy, content_key: str | None, replicas: list[GpuDevice]) -> GpuDevice:
    return policy.route(content_key, replicas)
