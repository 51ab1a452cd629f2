"""Wikipedia knowledge infusion for short crisis texts.

Candidate words (and phrases up to three words) are scored for entity
relatedness; everything above a threshold becomes an entity whose Wikipedia
lead text is fetched, truncated and concatenated. The result is appended to
the original text behind a single "[SEP]" marker before encoding. A JSON
cache makes the whole pipeline deterministic and offline-testable; live
Tagme/Wikipedia clients are optional plugins behind the same interfaces.
"""

from __future__ import annotations

import json
import logging
import os
import string
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .exceptions import CrisisFusionError

logger = logging.getLogger(__name__)

SEP_TOKEN = "[SEP]"
DEFAULT_THRESHOLD = 0.1
DEFAULT_MAX_CHARS = 500
DEFAULT_MAX_SPAN_WORDS = 3
DEFAULT_RATE_LIMIT = 3.0  # requests per second for live clients

# Function words are not scored: their relatedness is noise and each lookup
# costs an API call in live mode.
STOP_WORDS = frozenset(
    """a an and are as at be but by for from had has have he her his i if in
    is it its me my no not of on or our she so that the their them they this
    to up us was we were will with you your""".split()
)

_STRIP_CHARS = string.punctuation.replace("[", "").replace("]", "")


class KnowledgeError(CrisisFusionError, RuntimeError):
    pass


class RelatednessScorer(Protocol):
    def score(self, span: str) -> tuple[float, str | None]:
        """Relatedness in [0, 1] plus an optional canonical entity title."""
        ...


class WikiClient(Protocol):
    def fetch(self, title: str) -> str:
        """Lead text for a title; empty string when unknown."""
        ...


@dataclass(frozen=True)
class Entity:
    word: str
    relatedness: float
    title: str


@dataclass(frozen=True)
class EnrichedText:
    """Original text plus its extracted entities and the fused sequence."""

    original: str
    entities: tuple[Entity, ...]
    wiki_text: str
    fused: str


def normalize_span(span: str) -> str:
    words = [w.strip(_STRIP_CHARS) for w in span.lower().split()]
    return " ".join(w for w in words if w)


class KnowledgeCache:
    """Persistent map of entity texts and relatedness scores.

    File layout: {"entities": {title: {"text": ..., "ts": ...}}, "scores":
    {word: gamma}}. Round-trips losslessly; score keys are normalized spans.
    """

    def __init__(self, entities: dict | None = None, scores: dict | None = None):
        self.entities: dict[str, dict] = dict(entities or {})
        self.scores: dict[str, float] = dict(scores or {})
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeCache":
        path = Path(path)
        if not path.is_file():
            raise KnowledgeError(f"knowledge cache not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        return cls(entities=payload.get("entities", {}), scores=payload.get("scores", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        payload = {"entities": self.entities, "scores": self.scores}
        path.write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")
        return path

    def get_score(self, span: str) -> float | None:
        return self.scores.get(normalize_span(span))

    def put_score(self, span: str, gamma: float) -> None:
        with self._lock:
            self.scores[normalize_span(span)] = gamma

    def get_text(self, title: str) -> str | None:
        entry = self.entities.get(title)
        return entry["text"] if entry is not None else None

    def put_text(self, title: str, text: str) -> None:
        with self._lock:
            self.entities[title] = {"text": text, "ts": time.time()}


class CachedScorer:
    """Offline scorer backed purely by a cache snapshot; unknown spans score 0."""

    def __init__(self, cache: KnowledgeCache):
        self.cache = cache

    def score(self, span: str) -> tuple[float, str | None]:
        if not span.strip():
            return 0.0, None
        gamma = self.cache.get_score(span)
        return (gamma if gamma is not None else 0.0), None


class CachedWikiClient:
    """Offline client; titles are matched exactly, then case-insensitively."""

    def __init__(self, cache: KnowledgeCache):
        self.cache = cache
        self._lower = {title.lower(): title for title in cache.entities}

    def fetch(self, title: str) -> str:
        text = self.cache.get_text(title)
        if text is not None:
            return text
        canonical = self._lower.get(title.lower())
        if canonical is not None:
            return self.cache.get_text(canonical) or ""
        return ""


class FixtureScorer:
    """Test scorer over a literal {normalized span: (gamma, title)} table."""

    def __init__(self, table: dict[str, tuple[float, str | None]] | dict[str, float]):
        self.table = {
            normalize_span(k): (v if isinstance(v, tuple) else (v, None))
            for k, v in table.items()
        }

    def score(self, span: str) -> tuple[float, str | None]:
        if not span.strip():
            return 0.0, None
        return self.table.get(normalize_span(span), (0.0, None))


class FixtureWikiClient:
    def __init__(self, pages: dict[str, str]):
        self.pages = dict(pages)

    def fetch(self, title: str) -> str:
        return self.pages.get(title, "")


class RateLimiter:
    def __init__(self, per_second: float = DEFAULT_RATE_LIMIT):
        self.interval = 1.0 / per_second if per_second > 0 else 0.0
        self._last = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            delay = self._last + self.interval - now
            if delay > 0:
                time.sleep(delay)
                now = time.monotonic()
            self._last = now


class TagmeScorer:
    """Live relatedness scorer using the Tagme annotation service.

    Reads the API token from the TAGME_TOKEN environment variable unless given
    explicitly. Scores are written through to the cache so later runs stay
    offline.
    """

    ENDPOINT = "https://tagme.d4science.org/tagme/tag"

    def __init__(self, cache: KnowledgeCache, token: str | None = None,
                 rate_limit: float = DEFAULT_RATE_LIMIT, timeout: float = 10.0):
        self.cache = cache
        self.token = token or os.environ.get("TAGME_TOKEN")
        if not self.token:
            raise KnowledgeError("Tagme token missing: set TAGME_TOKEN or pass token=")
        self.limiter = RateLimiter(rate_limit)
        self.timeout = timeout
        self._titles: dict[str, str] = {}

    def score(self, span: str) -> tuple[float, str | None]:
        if not span.strip():
            return 0.0, None
        key = normalize_span(span)
        cached = self.cache.get_score(span)
        if cached is not None:
            return cached, self._titles.get(key)
        import requests

        self.limiter.wait()
        response = requests.get(
            self.ENDPOINT,
            params={"text": span, "gcube-token": self.token, "lang": "en"},
            timeout=self.timeout,
        )
        response.raise_for_status()
        annotations = response.json().get("annotations", [])
        gamma, title = 0.0, None
        for ann in annotations:
            rho = float(ann.get("rho", 0.0))
            if rho > gamma:
                gamma, title = rho, ann.get("title")
        self.cache.put_score(span, gamma)
        if title:
            self._titles[key] = title
        return gamma, title


class LiveWikiClient:
    """Live Wikipedia lead-section client with write-through caching."""

    ENDPOINT = "https://en.wikipedia.org/api/rest_v1/page/summary/{title}"

    def __init__(self, cache: KnowledgeCache, rate_limit: float = DEFAULT_RATE_LIMIT,
                 timeout: float = 10.0):
        self.cache = cache
        self.limiter = RateLimiter(rate_limit)
        self.timeout = timeout

    def fetch(self, title: str) -> str:
        cached = self.cache.get_text(title)
        if cached is not None:
            return cached
        import requests

        self.limiter.wait()
        try:
            response = requests.get(
                self.ENDPOINT.format(title=title.replace(" ", "_")), timeout=self.timeout
            )
            if response.status_code == 404:
                text = ""
            else:
                response.raise_for_status()
                text = response.json().get("extract", "") or ""
        except requests.RequestException as exc:
            logger.warning("wiki fetch failed for %r: %s", title, exc)
            raise
        self.cache.put_text(title, text)
        return text


def _candidate_spans(words: list[str], max_span_words: int):
    """All spans up to max_span_words whose boundary words are not stop words."""
    for start in range(len(words)):
        for length in range(min(max_span_words, len(words) - start), 0, -1):
            chunk = words[start : start + length]
            first = normalize_span(chunk[0])
            last = normalize_span(chunk[-1])
            if not first or not last:
                continue
            if first in STOP_WORDS or last in STOP_WORDS:
                continue
            yield start, length, " ".join(chunk)


def extract_entities(
    text: str,
    scorer: RelatednessScorer,
    threshold: float = DEFAULT_THRESHOLD,
    max_span_words: int = DEFAULT_MAX_SPAN_WORDS,
    counters: dict | None = None,
) -> list[Entity]:
    """Words and phrases whose relatedness exceeds the threshold.

    Candidates are every span of up to ``max_span_words`` words
    (``max_span_words=1`` restricts to single words). The result keeps
    original text order, longer spans before shorter ones at the same
    position, with duplicates collapsed to the first occurrence. A scorer
    failure skips that span and counts a warning; it never aborts the text.
    """
    if not 0 <= threshold < 1:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    words = text.split()
    seen: dict[str, tuple[float, str | None]] = {}
    entities: list[Entity] = []
    emitted: set[str] = set()
    for _start, _length, span in _candidate_spans(words, max_span_words):
        key = normalize_span(span)
        if key in seen:
            gamma, title = seen[key]
        else:
            try:
                gamma, title = scorer.score(span)
            except Exception as exc:  # noqa: BLE001 - degrade per span
                logger.warning("scorer failed on %r: %s", span, exc)
                if counters is not None:
                    counters["scorer_failures"] = counters.get("scorer_failures", 0) + 1
                gamma, title = 0.0, None
            seen[key] = (gamma, title)
        if gamma > threshold and key not in emitted:
            emitted.add(key)
            entities.append(Entity(word=span, relatedness=gamma, title=title or span))
    return entities


def _truncate_at_word(text: str, max_chars: int) -> str:
    if len(text) <= max_chars:
        return text
    if text[max_chars].isspace():
        return text[:max_chars].rstrip()
    cut = text.rfind(" ", 0, max_chars)
    if cut <= 0:
        return text[:max_chars]
    return text[:cut].rstrip()


def build_wiki_text(
    entities: list[Entity],
    client: WikiClient,
    max_chars_per_entity: int = DEFAULT_MAX_CHARS,
    counters: dict | None = None,
) -> str:
    """Fetched texts in entity order, each capped at a word boundary, space-joined."""
    parts = []
    for entity in entities:
        try:
            text = client.fetch(entity.title)
        except Exception as exc:  # noqa: BLE001 - degrade per entity
            logger.warning("wiki fetch failed for %r: %s", entity.title, exc)
            if counters is not None:
                counters["fetch_failures"] = counters.get("fetch_failures", 0) + 1
            text = ""
        text = _truncate_at_word(text.strip(), max_chars_per_entity)
        if text:
            parts.append(text)
    return " ".join(parts)


def enrich(
    text: str,
    scorer: RelatednessScorer,
    client: WikiClient,
    threshold: float = DEFAULT_THRESHOLD,
    max_chars_per_entity: int = DEFAULT_MAX_CHARS,
    max_span_words: int = DEFAULT_MAX_SPAN_WORDS,
    counters: dict | None = None,
) -> EnrichedText:
    """Assemble the fused sequence: text, one [SEP], then the wiki text.

    Degrades to the original text when no entity survives or every fetch
    fails; never raises for knowledge-side problems.
    """
    entities = extract_entities(text, scorer, threshold, max_span_words, counters)
    wiki_text = build_wiki_text(entities, client, max_chars_per_entity, counters)
    fused = f"{text} {SEP_TOKEN} {wiki_text}" if wiki_text else text
    return EnrichedText(
        original=text,
        entities=tuple(entities),
        wiki_text=wiki_text,
        fused=fused,
    )


def enrich_records(
    records: list[dict],
    scorer: RelatednessScorer,
    client: WikiClient,
    threshold: float = DEFAULT_THRESHOLD,
    max_chars_per_entity: int = DEFAULT_MAX_CHARS,
    max_span_words: int = DEFAULT_MAX_SPAN_WORDS,
) -> tuple[list[dict], dict]:
    """Enrich manifest records in place order; returns new records and counters."""
    counters: dict[str, int] = {"enriched": 0, "degraded": 0}
    out = []
    for rec in records:
        enriched = enrich(
            rec["clean_text"], scorer, client, threshold, max_chars_per_entity,
            max_span_words, counters,
        )
        new = dict(rec)
        new["entities"] = [
            {"word": e.word, "relatedness": e.relatedness, "title": e.title}
            for e in enriched.entities
        ]
        new["wiki_text"] = enriched.wiki_text
        new["fused_text"] = enriched.fused
        counters["enriched" if enriched.wiki_text else "degraded"] += 1
        out.append(new)
    return out, counters
