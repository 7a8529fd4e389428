"""Prompt templates with volatility classes, a synthetic tokenizer, and the
iterative program database used by the code-evolution workload.

The tokenizer splits on whitespace and hashes each word to a 32-bit id:
deterministic, model-free, and sufficient for prefix-cache behavior, which
only depends on token-sequence equality.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .simcore import RngStream


def tokenize(text: str) -> list[int]:
    """Whitespace split; each word becomes a stable 32-bit hash id."""
    return [
        int.from_bytes(hashlib.blake2b(word.encode("utf-8"), digest_size=4).digest(), "big")
        for word in text.split()
    ]


class Volatility(enum.Enum):
    STATIC = "STATIC"
    SLOW = "SLOW"
    DYNAMIC = "DYNAMIC"


class PromptMode(enum.Enum):
    DEFAULT = "DEFAULT"
    OPTIMIZED = "OPTIMIZED"


@dataclass
class Segment:
    id: str
    volatility: Volatility
    text: str
    sort_key: int = 0


@dataclass
class PromptTemplate:
    segments: list[Segment]
    mode: PromptMode = PromptMode.DEFAULT


def render(template: PromptTemplate, mode: PromptMode | None = None) -> list[Segment]:
    """Order the template's segments for emission.

    DEFAULT keeps the authored order. OPTIMIZED emits STATIC segments first
    (authored order), then SLOW, then DYNAMIC sorted by sort_key, so that
    slowly-changing content forms a stable leading prefix.
    """
    mode = mode or template.mode
    if mode is PromptMode.DEFAULT:
        return list(template.segments)
    dynamic = [s for s in template.segments if s.volatility is Volatility.DYNAMIC]
    keys = [s.sort_key for s in dynamic]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate sort_key among DYNAMIC segments")
    ordered = [s for s in template.segments if s.volatility is Volatility.STATIC]
    ordered += [s for s in template.segments if s.volatility is Volatility.SLOW]
    ordered += sorted(dynamic, key=lambda s: s.sort_key)
    return ordered


def load_template(path) -> PromptTemplate:
    """Read a template file: {"segments": [{id, volatility, text}]}."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    segments = []
    for i, seg in enumerate(obj.get("segments", [])):
        try:
            segments.append(
                Segment(
                    id=str(seg["id"]),
                    volatility=Volatility(seg["volatility"]),
                    text=str(seg["text"]),
                    sort_key=i,
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: segments.{i}", str(exc)) from exc
    return PromptTemplate(segments=segments)


@dataclass
class ProgramDbEntry:
    program_id: str
    score: float
    insertion_index: int
    token_len: int


@dataclass
class DbSample:
    top: list[ProgramDbEntry]
    diverse: list[ProgramDbEntry]
    truncated: bool = False

    @property
    def entries(self) -> list[ProgramDbEntry]:
        return self.top + self.diverse


class ProgramDb:
    """Insertion-ordered store of generated programs and their scores."""

    def __init__(self) -> None:
        self._entries: list[ProgramDbEntry] = []
        self._by_id: dict[str, ProgramDbEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def insert(self, program_id: str, score: float, token_len: int) -> ProgramDbEntry:
        if program_id in self._by_id:
            raise ValueError(f"duplicate program_id {program_id!r}")
        index = self._entries[-1].insertion_index + 1 if self._entries else 0
        entry = ProgramDbEntry(program_id, score, index, token_len)
        self._entries.append(entry)
        self._by_id[program_id] = entry
        return entry

    def latest(self) -> ProgramDbEntry:
        return self._entries[-1]

    def sample(self, n_top: int, n_diverse: int, rng: RngStream,
               exclude: set[str] | None = None) -> DbSample:
        """Top n_top by score plus n_diverse uniform picks from the rest.

        Score ties break toward the older entry. Diverse picks come back in
        selection order and carry their insertion_index as sort key.
        """
        if not self._entries:
            raise ValueError("program database is empty")
        pool = [e for e in self._entries if not exclude or e.program_id not in exclude]
        ranked = sorted(pool, key=lambda e: (-e.score, e.insertion_index))
        top = ranked[:n_top]
        rest = [e for e in pool if e not in top]
        truncated = n_top + n_diverse > len(pool)
        k = min(n_diverse, len(rest))
        diverse = rng.sample(rest, k) if k else []
        return DbSample(top=top, diverse=diverse, truncated=truncated)


def db_insert(db: ProgramDb, program_id: str, score: float, token_len: int) -> ProgramDbEntry:
    return db.insert(program_id, score, token_len)


def db_sample(db: ProgramDb, n_top: int, n_diverse: int, rng: RngStream) -> DbSample:
    return db.sample(n_top, n_diverse, rng)
