"""Map free-text charge names and article references onto the label pool.

Charges resolve in three stages: exact pool match, rule-based normalization,
then cosine nearest neighbor between the input's embedding and the cached
pool-label embeddings. Articles are numeric and resolve by integer
extraction; there is no fuzzy path for them.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass

import numpy as np

from .corpus import LabelPool
from .gateway import LlmGateway

MAPPING_METHODS = ("exact", "normalized", "embedding")

DEFAULT_STRIP_PREFIXES = ("the crime of ", "crime of ", "犯")
DEFAULT_STRIP_SUFFIXES = ("罪",)

_EDGE_PUNCT = " \t\r\n\"'`()[]{}<>《》【】“”‘’.,;:。，；：、!?！？-"


class LabelMappingError(Exception):
    pass


def normalize_label(
    s: str,
    prefixes: tuple[str, ...] = DEFAULT_STRIP_PREFIXES,
    suffixes: tuple[str, ...] = DEFAULT_STRIP_SUFFIXES,
) -> str:
    """Trim, strip surrounding punctuation, drop marker prefixes/suffixes,
    and lowercase. Runs to a fixpoint, so the result is idempotent."""
    t = s.casefold()
    while True:
        before = t
        t = t.strip().strip(_EDGE_PUNCT)
        for prefix in prefixes:
            if t.startswith(prefix):
                t = t[len(prefix):]
        for suffix in suffixes:
            if t.endswith(suffix):
                t = t[: -len(suffix)]
        if t == before:
            return t


@dataclass(frozen=True)
class MappingOutcome:
    input: str
    mapped: str
    method: str
    similarity: float | None = None

    def __post_init__(self):
        if self.method not in MAPPING_METHODS:
            raise ValueError(f"unknown mapping method {self.method!r}")
        if (self.similarity is not None) != (self.method == "embedding"):
            raise ValueError("similarity must be present exactly for embedding mappings")

    def as_dict(self) -> dict:
        return {
            "input": self.input,
            "mapped": self.mapped,
            "method": self.method,
            "similarity": self.similarity,
        }


class ChargeMapper:
    """Maps generated charge text onto the closed charge pool.

    Pool embeddings are computed once on first use and reused for every
    mapping; after that warm-up the mapper is read-only and safe to share
    across threads. Non-exact mappings are appended to ``audit_log``.
    """

    def __init__(
        self,
        pool: LabelPool,
        gateway: LlmGateway | None = None,
        *,
        min_similarity: float | None = None,
    ):
        if not pool.charges:
            raise ValueError("label pool has no charges")
        self.pool = pool
        self.gateway = gateway
        self.min_similarity = min_similarity
        self.audit_log: list[MappingOutcome] = []
        self._exact = set(pool.charges)
        self._normalized: dict[str, str] = {}
        for charge in pool.charges:
            self._normalized.setdefault(normalize_label(charge), charge)
        self._pool_matrix: np.ndarray | None = None
        self._lock = threading.Lock()

    def _ensure_pool_embeddings(self) -> np.ndarray:
        with self._lock:
            if self._pool_matrix is None:
                if self.gateway is None:
                    raise LabelMappingError("no embedding gateway configured")
                vectors = self.gateway.embed(list(self.pool.charges))
                matrix = np.array([v.values for v in vectors], dtype=np.float64)
                norms = np.linalg.norm(matrix, axis=1)
                norms[norms == 0.0] = 1.0
                self._pool_matrix = matrix / norms[:, None]
            return self._pool_matrix

    def map_charge(self, s: str) -> MappingOutcome:
        if s in self._exact:
            return MappingOutcome(input=s, mapped=s, method="exact")
        normalized = normalize_label(s)
        if normalized in self._normalized:
            outcome = MappingOutcome(
                input=s, mapped=self._normalized[normalized], method="normalized"
            )
            self.audit_log.append(outcome)
            return outcome
        matrix = self._ensure_pool_embeddings()
        vector = np.array(self.gateway.embed([s])[0].values, dtype=np.float64)
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            norm = 1.0
        similarities = matrix @ (vector / norm)
        best = int(np.argmax(similarities))  # argmax takes the first maximum: pool order
        score = float(similarities[best])
        if self.min_similarity is not None and score < self.min_similarity:
            raise LabelMappingError(
                f"best match {self.pool.charges[best]!r} for {s!r} scores "
                f"{score:.4f}, below floor {self.min_similarity}"
            )
        outcome = MappingOutcome(
            input=s, mapped=self.pool.charges[best], method="embedding", similarity=score
        )
        self.audit_log.append(outcome)
        return outcome


_ARTICLE_NUMBER_RE = re.compile(r"\d+")


def map_article(s: str, pool: LabelPool) -> int:
    """Extract the first article number and require pool membership."""
    m = _ARTICLE_NUMBER_RE.search(s)
    if m is None:
        raise LabelMappingError(f"no article number found in {s!r}")
    number = int(m.group(0))
    if number not in pool.articles:
        raise LabelMappingError(f"article {number} is not in the label pool")
    return number
