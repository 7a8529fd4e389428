"""Block-chained prefix KV cache and hint-aware multi-modal object cache.

KV blocks are keyed by a 128-bit chain hash of (parent chain hash, block
token ids), so a one-token change near the front of a prompt invalidates
every block after it. The MM cache stores whole encoded media objects and
honors madvise-style reuse hints when choosing eviction victims.
"""

from __future__ import annotations

import enum
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

from .errors import MmCannotFitError

DEFAULT_BLOCK_SIZE = 16

_ROOT_HASH = bytes(16)


def chain_hashes(tokens: list[int], block_size: int) -> list[bytes]:
    """Chain digests for every full leading block of a token sequence."""
    out: list[bytes] = []
    parent = _ROOT_HASH
    n_full = len(tokens) // block_size
    for b in range(n_full):
        h = hashlib.blake2b(digest_size=16)
        h.update(parent)
        for tok in tokens[b * block_size:(b + 1) * block_size]:
            h.update(int(tok).to_bytes(4, "big", signed=False))
        parent = h.digest()
        out.append(parent)
    return out


@dataclass
class TokenBlock:
    chain_hash: bytes
    inserted_at_us: int
    last_used_at_us: int
    ref_count: int = 0


@dataclass
class PrefixMatch:
    hit_blocks: int
    hit_tokens: int
    held_hashes: list[bytes] = field(default_factory=list)


@dataclass
class KvCacheStats:
    lookups: int = 0
    hit_tokens: int = 0
    total_tokens: int = 0
    evictions: int = 0
    lifetime_sum_us: int = 0
    lifetime_samples: int = 0
    admission_failures: int = 0


class PrefixKvCache:
    """LRU cache of chained token blocks with in-flight reference pinning."""

    def __init__(self, capacity_blocks: int, block_size: int = DEFAULT_BLOCK_SIZE):
        if capacity_blocks < 1:
            raise ValueError("capacity_blocks must be >= 1")
        self.capacity_blocks = capacity_blocks
        self.block_size = block_size
        # insertion/recency order: least recently used first
        self.resident: OrderedDict[bytes, TokenBlock] = OrderedDict()
        self.stats = KvCacheStats()

    def __len__(self) -> int:
        return len(self.resident)

    def lookup(self, tokens: list[int], now_us: int = 0) -> PrefixMatch:
        """Longest resident chain of full leading blocks.

        Matched blocks are recency-refreshed and reference-pinned until the
        paired commit releases them; a partial trailing block never counts.
        """
        hashes = chain_hashes(tokens, self.block_size)
        held: list[bytes] = []
        hit_blocks = 0
        for digest in hashes:
            block = self.resident.get(digest)
            if block is None:
                break
            hit_blocks += 1
            block.last_used_at_us = now_us
            block.ref_count += 1
            self.resident.move_to_end(digest)
            held.append(digest)
        self.stats.lookups += 1
        self.stats.total_tokens += len(tokens)
        self.stats.hit_tokens += hit_blocks * self.block_size
        return PrefixMatch(hit_blocks, hit_blocks * self.block_size, held)

    def commit(self, tokens: list[int], now_us: int = 0, match: PrefixMatch | None = None) -> None:
        """Make every full block of the prompt resident, evicting LRU.

        Releases references taken by the paired lookup. If eviction stalls
        because every candidate is referenced, the remaining blocks are
        dropped and the request proceeds uncached (counted in stats).
        """
        hashes = chain_hashes(tokens, self.block_size)
        admitted_all = True
        for digest in hashes:
            block = self.resident.get(digest)
            if block is not None:
                block.last_used_at_us = now_us
                self.resident.move_to_end(digest)
                continue
            if not self._make_room(now_us):
                self.stats.admission_failures += 1
                admitted_all = False
                break
            self.resident[digest] = TokenBlock(digest, now_us, now_us)
        if match is not None:
            self._release(match)
        if not admitted_all:
            return

    def _make_room(self, now_us: int) -> bool:
        while len(self.resident) >= self.capacity_blocks:
            victim = None
            for digest, block in self.resident.items():
                if block.ref_count == 0:
                    victim = digest
                    break
            if victim is None:
                return False
            block = self.resident.pop(victim)
            self.stats.evictions += 1
            self.stats.lifetime_sum_us += now_us - block.inserted_at_us
            self.stats.lifetime_samples += 1
        return True

    def _release(self, match: PrefixMatch) -> None:
        for digest in match.held_hashes:
            block = self.resident.get(digest)
            if block is not None:
                block.ref_count -= 1
        match.held_hashes = []

    def snapshot_stats(self, end_us: int | None = None) -> dict:
        """Cumulative hit rate, average block lifetime, eviction count.

        With end_us, never-evicted blocks contribute (end - inserted_at)
        so the lifetime average stays total over all blocks ever resident.
        """
        s = self.stats
        lifetime_sum = s.lifetime_sum_us
        samples = s.lifetime_samples
        if end_us is not None:
            for block in self.resident.values():
                lifetime_sum += end_us - block.inserted_at_us
                samples += 1
        hit_rate = 100.0 * s.hit_tokens / s.total_tokens if s.total_tokens else 0.0
        return {
            "hit_rate_pct": hit_rate,
            "avg_block_lifetime_s": (lifetime_sum / samples) / 1e6 if samples else 0.0,
            "lifetime_sum_s": lifetime_sum / 1e6,
            "lifetime_samples": samples,
            "lifetime_defined": samples > 0,
            "evictions": s.evictions,
            "lookups": s.lookups,
            "hit_tokens": s.hit_tokens,
            "total_tokens": s.total_tokens,
            "admission_failures": s.admission_failures,
        }


def kv_lookup(cache: PrefixKvCache, tokens: list[int], now_us: int = 0) -> PrefixMatch:
    return cache.lookup(tokens, now_us)


def kv_commit(cache: PrefixKvCache, tokens: list[int], now_us: int = 0,
              match: PrefixMatch | None = None) -> None:
    cache.commit(tokens, now_us, match)


def kv_stats(cache: PrefixKvCache, end_us: int | None = None) -> dict:
    return cache.snapshot_stats(end_us)


class MmHint(enum.Enum):
    NONE = "NONE"
    WILLNEED = "WILLNEED"
    DONTNEED = "DONTNEED"
    PINNED = "PINNED"


# Victim scan order on insertion pressure; PINNED is never a candidate.
_EVICT_ORDER = (MmHint.DONTNEED, MmHint.NONE, MmHint.WILLNEED)


@dataclass
class MmEntry:
    object_key: str
    size: int
    hint: MmHint
    inserted_at_us: int
    last_used_at_us: int


@dataclass
class MmCacheStats:
    lookups: int = 0
    hit_objects: int = 0
    evictions: int = 0
    cannot_fit: int = 0


class MmCache:
    """Object-keyed media cache (whole-object hits only)."""

    def __init__(self, capacity_bytes: int):
        self.capacity_bytes = capacity_bytes
        self.entries: OrderedDict[str, MmEntry] = OrderedDict()  # LRU first
        self.used_bytes = 0
        self.pending_hints: dict[str, MmHint] = {}
        self.stats = MmCacheStats()

    def resident_bytes(self, key: str) -> int:
        entry = self.entries.get(key)
        return entry.size if entry else 0

    def hint(self, key: str, hint: MmHint) -> None:
        """Update reuse hint; hints on absent keys apply at insertion."""
        entry = self.entries.get(key)
        if entry is not None:
            entry.hint = hint
        else:
            self.pending_hints[key] = hint

    def access(self, key: str, size: int, now_us: int) -> bool:
        """Touch an object; on miss, insert it after hint-aware eviction.

        Raises MmCannotFitError when pinned bytes leave no room; the access
        is still counted as a miss and nothing is inserted.
        """
        self.stats.lookups += 1
        entry = self.entries.get(key)
        if entry is not None and entry.size >= size:
            entry.last_used_at_us = now_us
            self.entries.move_to_end(key)
            self.stats.hit_objects += 1
            return True
        if entry is not None:  # partial object: treat as miss, replace
            self._evict_entry(key, now_us)
        pinned = sum(e.size for e in self.entries.values() if e.hint is MmHint.PINNED)
        if size > self.capacity_bytes - pinned:
            self.stats.cannot_fit += 1
            raise MmCannotFitError(
                f"object {key!r} ({size} B) cannot fit: {pinned} B pinned of "
                f"{self.capacity_bytes} B capacity"
            )
        self._make_room(size, now_us)
        hint = self.pending_hints.pop(key, MmHint.NONE)
        self.entries[key] = MmEntry(key, size, hint, now_us, now_us)
        self.used_bytes += size
        return False

    def _make_room(self, size: int, now_us: int) -> None:
        while self.used_bytes + size > self.capacity_bytes:
            victim = None
            for hint_class in _EVICT_ORDER:
                for key, entry in self.entries.items():  # LRU order within class
                    if entry.hint is hint_class:
                        victim = key
                        break
                if victim is not None:
                    break
            assert victim is not None, "pinned-bytes check should have caught this"
            self._evict_entry(victim, now_us)

    def _evict_entry(self, key: str, now_us: int) -> None:
        entry = self.entries.pop(key)
        self.used_bytes -= entry.size
        self.stats.evictions += 1

    def snapshot_stats(self) -> dict:
        s = self.stats
        hit_rate = 100.0 * s.hit_objects / s.lookups if s.lookups else 0.0
        return {
            "hit_rate_pct": hit_rate,
            "lookups": s.lookups,
            "hit_objects": s.hit_objects,
            "evictions": s.evictions,
            "cannot_fit": s.cannot_fit,
            "used_bytes": self.used_bytes,
        }


def mm_access(cache: MmCache, key: str, size: int, now_us: int) -> bool:
    return cache.access(key, size, now_us)


def mm_hint(cache: MmCache, key: str, hint: MmHint) -> None:
    cache.hint(key, hint)
