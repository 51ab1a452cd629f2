import csv
from pathlib import Path

import pytest

from crisisfusion.knowledge import CachedScorer, CachedWikiClient, KnowledgeCache

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def knowledge_cache() -> KnowledgeCache:
    return KnowledgeCache.load(FIXTURES / "knowledge_cache.json")


@pytest.fixture(scope="session")
def cached_scorer(knowledge_cache) -> CachedScorer:
    return CachedScorer(knowledge_cache)


@pytest.fixture(scope="session")
def cached_client(knowledge_cache) -> CachedWikiClient:
    return CachedWikiClient(knowledge_cache)


def write_annotations(path: Path, rows: list[dict]) -> Path:
    """Rows as dicts with the canonical column names; missing keys left empty."""
    columns = ["sample_id", "event_name", "image_path", "text", "image_label", "text_label", "split"]
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, delimiter="\t")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    return path
