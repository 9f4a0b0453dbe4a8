"""Vertical crawlers: turn source documents into address tags.

Each source (a forum, an API, an onion index, a label site) has its own
parser that scrapes identifying fields and pairs them with every
address found in the document. Crawls run from a bootstrap directory of
previously fetched raw documents, from an injected fetcher, or both;
live HTTP fetching is a pluggable fetcher so nothing here ever needs
network access in tests.
"""

from __future__ import annotations

import json
import logging
import re
import time
import urllib.request
import urllib.robotparser
from dataclasses import dataclass, field
from datetime import datetime, timezone
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Iterable

from .addresses import BITCOIN, CurrencyProfile, extract_addresses, get_profile
from .cron import parse_schedule
from .tags import TAG_LEVELS, Tag, TagKey, TagStore, TagStoreError

logger = logging.getLogger(__name__)


class CrawlError(Exception):
    """Crawl aborted; `summary` holds the partial counts."""

    def __init__(self, message: str, summary: "CrawlSummary | None" = None):
        super().__init__(message)
        self.summary = summary


@dataclass(frozen=True)
class SourceDocument:
    uri: str
    body: bytes
    media: str  # "html" | "json"
    fetched_at: datetime | None = None

    @property
    def text(self) -> str:
        return self.body.decode("utf-8", errors="replace")


@dataclass(frozen=True)
class ExtractedTag:
    address: str
    tag: Tag


@dataclass
class CrawlerConfig:
    type: str
    source: str
    schedule: str = "0 0 * * *"
    level: str = "address"
    data: str | Path | None = None
    currency: str = "bitcoin"

    def __post_init__(self):
        parse_schedule(self.schedule)  # validates
        if self.level not in TAG_LEVELS:
            raise ValueError(f"invalid crawler level {self.level!r}")
        expected = registered_tag_type(self.source)
        if expected is None:
            raise ValueError(f"no parser registered for source {self.source!r}")
        if self.type != expected:
            raise ValueError(
                f"source {self.source!r} produces {expected!r} tags, "
                f"config says {self.type!r}")
        get_profile(self.currency)  # validates

    @property
    def profile(self) -> CurrencyProfile:
        return get_profile(self.currency)


@dataclass
class CrawlSummary:
    documents: int = 0
    tags_created: int = 0
    tags_updated: int = 0
    diagnostics: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Source-specific parsers


class _TextCollector(HTMLParser):
    """Flattens an HTML document into its non-empty text chunks."""

    def __init__(self):
        super().__init__()
        self.chunks: list[str] = []
        self.title: str = ""
        self._in_title = False

    def handle_starttag(self, tag, attrs):
        if tag == "title":
            self._in_title = True

    def handle_endtag(self, tag):
        if tag == "title":
            self._in_title = False

    def handle_data(self, data):
        text = data.strip()
        if not text:
            return
        if self._in_title:
            self.title += text
        self.chunks.append(text)


def _html_chunks(doc: SourceDocument) -> _TextCollector:
    collector = _TextCollector()
    collector.feed(doc.text)
    return collector


_PROFILE_LABELS = {
    "Name": "account",
    "Posts": "num_posts",
    "Activity": "num_activities",
    "Position": "position",
    "Date Registered": "date_registered",
    "Last Active": "last_seen",
}
_INT_FIELDS = {"num_posts", "num_activities"}
_UID_RE = re.compile(r"[?;&]u=(\d+)")
_LABEL_RE = re.compile(
    r"^(%s):\s*(.*)$" % "|".join(re.escape(l) for l in _PROFILE_LABELS))


def parse_bitcointalk(doc: SourceDocument,
                      profile: CurrencyProfile) -> list[ExtractedTag]:
    """Forum profile page -> one user tag per address in the page."""
    collector = _html_chunks(doc)
    info: dict = {}
    m = _UID_RE.search(doc.uri)
    if m:
        info["id"] = int(m.group(1))
    pending = None
    for chunk in collector.chunks:
        if pending is not None:
            info[pending] = _coerce_profile_value(pending, chunk)
            pending = None
            continue
        m = _LABEL_RE.match(chunk)
        if m:
            key = _PROFILE_LABELS[m.group(1)]
            if m.group(2):
                info[key] = _coerce_profile_value(key, m.group(2))
            else:
                pending = key
    text = " ".join(collector.chunks)
    return [ExtractedTag(address=a, tag=Tag("user", "bitcointalk", dict(info)))
            for a in extract_addresses(text, profile)]


def _coerce_profile_value(key: str, raw: str):
    if key in _INT_FIELDS:
        m = re.match(r"\d+", raw)
        if m:
            return int(m.group(0))
    return raw


def parse_twitter(doc: SourceDocument,
                  profile: CurrencyProfile) -> list[ExtractedTag]:
    """Tweet/user JSON records -> user tags for addresses in tweet text."""
    payload = json.loads(doc.text)
    if isinstance(payload, dict) and "statuses" in payload:
        records = payload["statuses"]
    elif isinstance(payload, dict):
        records = [payload]
    else:
        records = payload
    out = []
    for record in records:
        user = record.get("user")
        if not isinstance(user, dict):
            continue
        info = {"id": user.get("id"), "account": user.get("screen_name")}
        text = record.get("full_text") or record.get("text") or ""
        for address in extract_addresses(text, profile):
            out.append(ExtractedTag(address=address,
                                    tag=Tag("user", "twitter", dict(info))))
    return out


_ONION_RE = re.compile(r"\b[a-z2-7]{16,56}\.onion\b")


def parse_tor_ahmia(doc: SourceDocument,
                    profile: CurrencyProfile) -> list[ExtractedTag]:
    """Onion landing page -> service tags named after the page title."""
    collector = _html_chunks(doc)
    text = " ".join(collector.chunks)
    onion_match = _ONION_RE.search(doc.uri) or _ONION_RE.search(text)
    info = {"provider": collector.title.strip(),
            "onion": onion_match.group(0) if onion_match else ""}
    return [ExtractedTag(address=a, tag=Tag("service", "tor", dict(info)))
            for a in extract_addresses(text, profile)]


def parse_blockchain_info(doc: SourceDocument,
                          profile: CurrencyProfile) -> list[ExtractedTag]:
    """Submitted label records -> text tags on the labelled address."""
    payload = json.loads(doc.text)
    records = payload if isinstance(payload, list) else [payload]
    out = []
    for record in records:
        address = record.get("address", "")
        if not profile.is_valid(address):
            logger.warning("skipping label with invalid address %r", address)
            continue
        info = {"label": str(record.get("label", "")),
                "signed": bool(record.get("signed", False))}
        out.append(ExtractedTag(address=address,
                                tag=Tag("text", "blockchain.info", info)))
    return out


# source -> (tag type, parser). The tor source produces "tor"-sourced
# tags; the registry key is the crawler name.
_PARSERS: dict[str, tuple[str, Callable]] = {}


def register_parser(source: str, tag_type: str, fn: Callable):
    _PARSERS[source] = (tag_type, fn)


def registered_tag_type(source: str) -> str | None:
    entry = _PARSERS.get(source)
    return entry[0] if entry else None


register_parser("bitcointalk", "user", parse_bitcointalk)
register_parser("twitter", "user", parse_twitter)
register_parser("tor-ahmia", "service", parse_tor_ahmia)
register_parser("blockchain.info", "text", parse_blockchain_info)


def parse_source(doc: SourceDocument, source: str,
                 profile: CurrencyProfile = BITCOIN,
                 diagnostics: list[dict] | None = None) -> list[ExtractedTag]:
    """Run the source's parser; an unparseable document yields [] plus a
    diagnostic record instead of aborting the batch."""
    entry = _PARSERS.get(source)
    if entry is None:
        raise CrawlError(f"no parser registered for source {source!r}")
    _, fn = entry
    try:
        return fn(doc, profile)
    except Exception as e:  # noqa: BLE001 - any parser failure is a diagnostic
        record = {"uri": doc.uri, "source": source, "error": f"{e}"}
        logger.warning("unparseable document %s (%s): %s", doc.uri, source, e)
        if diagnostics is not None:
            diagnostics.append(record)
        return []


# ---------------------------------------------------------------------------
# Crawl execution


def bootstrap_documents(data: str | Path, source: str) -> Iterable[SourceDocument]:
    """Yield documents from `<data>/<source>/<doc-id>.(html|json)`."""
    root = Path(data) / source
    if not root.is_dir():
        return
    for path in sorted(root.iterdir()):
        if path.suffix not in (".html", ".json"):
            continue
        yield SourceDocument(
            uri=path.as_uri(),
            body=path.read_bytes(),
            media=path.suffix.lstrip("."),
            fetched_at=datetime.now(timezone.utc),
        )


def run_crawl(store: TagStore, config: CrawlerConfig,
              fetcher: Iterable[SourceDocument] | None = None) -> CrawlSummary:
    """Crawl bootstrap data and/or fetched documents into the tag store.

    Tags identical to one already present at an address (same type,
    source, and info) are skipped, so re-running a crawl over the same
    documents is a no-op. A tag whose (type, source) exists at the
    address with different info is appended and counted as updated;
    anything else is appended and counted as created. Fetcher failures
    are logged and end the fetch phase; a store failure aborts with the
    partial summary attached to the raised CrawlError.
    """
    summary = CrawlSummary()
    profile = config.profile

    def documents():
        if config.data is not None:
            yield from bootstrap_documents(config.data, config.source)
        if fetcher is None:
            return
        it = iter(fetcher)
        while True:
            try:
                yield next(it)
            except StopIteration:
                return
            except Exception as e:  # noqa: BLE001
                logger.error("fetcher failed, ending fetch phase: %s", e)
                return

    for doc in documents():
        summary.documents += 1
        for et in parse_source(doc, config.source, profile,
                               diagnostics=summary.diagnostics):
            if not profile.is_valid(et.address):
                summary.diagnostics.append(
                    {"uri": doc.uri, "source": config.source,
                     "error": f"extracted address fails profile: {et.address!r}"})
                continue
            existing = store.tags_for(config.level, et.address)
            if et.tag in existing:
                continue
            same_origin = any(t.type == et.tag.type and t.source == et.tag.source
                              for t in existing)
            try:
                store.put_tags(TagKey(config.level, et.address), [et.tag],
                               append=True)
            except TagStoreError as e:
                raise CrawlError(f"tag store failure: {e}", summary=summary) from e
            if same_origin:
                summary.tags_updated += 1
            else:
                summary.tags_created += 1
    return summary


# ---------------------------------------------------------------------------
# Live fetching and scheduling


def _default_opener(url: str, user_agent: str, timeout: float) -> tuple[bytes, str]:
    req = urllib.request.Request(url, headers={"User-Agent": user_agent})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read(), resp.headers.get("Content-Type", "")


class HttpFetcher:
    """Polite HTTP GET fetcher: min-delay between requests, robots.txt
    disallow rules honored per host. The opener, clock, and sleep are
    injectable so the politeness contract is testable offline."""

    def __init__(self, urls: Iterable[str], min_delay: float = 1.0,
                 user_agent: str = "chaintag-crawler", timeout: float = 30.0,
                 respect_robots: bool = True,
                 opener: Callable[[str, str, float], tuple[bytes, str]] | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.urls = list(urls)
        self.min_delay = min_delay
        self.user_agent = user_agent
        self.timeout = timeout
        self.respect_robots = respect_robots
        self.opener = opener or _default_opener
        self.clock = clock
        self.sleep = sleep
        self._robots: dict[str, urllib.robotparser.RobotFileParser] = {}
        self._last_fetch: float | None = None

    def _allowed(self, url: str) -> bool:
        if not self.respect_robots:
            return True
        from urllib.parse import urlsplit
        parts = urlsplit(url)
        base = f"{parts.scheme}://{parts.netloc}"
        rp = self._robots.get(base)
        if rp is None:
            rp = urllib.robotparser.RobotFileParser()
            try:
                body, _ = self._fetch(f"{base}/robots.txt")
                rp.parse(body.decode("utf-8", errors="replace").splitlines())
            except Exception:  # noqa: BLE001 - unreachable robots allows all
                rp.allow_all = True
            self._robots[base] = rp
        return rp.can_fetch(self.user_agent, url)

    def _fetch(self, url: str) -> tuple[bytes, str]:
        if self._last_fetch is not None:
            wait = self.min_delay - (self.clock() - self._last_fetch)
            if wait > 0:
                self.sleep(wait)
        try:
            return self.opener(url, self.user_agent, self.timeout)
        finally:
            self._last_fetch = self.clock()

    def __iter__(self):
        for url in self.urls:
            if not self._allowed(url):
                logger.info("robots.txt disallows %s; skipping", url)
                continue
            try:
                body, content_type = self._fetch(url)
            except Exception as e:  # noqa: BLE001
                logger.warning("fetch failed for %s: %s", url, e)
                continue
            media = "json" if "json" in content_type else "html"
            yield SourceDocument(uri=url, body=body, media=media,
                                 fetched_at=datetime.now(timezone.utc))


@dataclass
class ScheduledCrawl:
    config: CrawlerConfig
    fetcher_factory: Callable[[], Iterable[SourceDocument]] | None = None


class CrawlScheduler:
    """Single-loop scheduler; one in-flight crawl per (source, level).

    The clock and sleep function are injectable, so tests drive it with
    virtual time.
    """

    def __init__(self, store: TagStore, jobs: list[ScheduledCrawl],
                 now_fn: Callable[[], datetime] | None = None,
                 sleep_fn: Callable[[float], None] = time.sleep):
        keys = [(j.config.source, j.config.level) for j in jobs]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate (source, level) crawl jobs")
        self.store = store
        self.jobs = jobs
        self.now_fn = now_fn or (lambda: datetime.now(timezone.utc))
        self.sleep_fn = sleep_fn
        self.runs: list[tuple[datetime, str, CrawlSummary]] = []

    def run(self, max_runs: int) -> list[tuple[datetime, str, CrawlSummary]]:
        completed = 0
        while completed < max_runs:
            now = self.now_fn()
            due = [(parse_schedule(j.config.schedule).next_fire_after(now), i)
                   for i, j in enumerate(self.jobs)]
            fire_at, idx = min(due)
            wait = (fire_at - now).total_seconds()
            if wait > 0:
                self.sleep_fn(wait)
            job = self.jobs[idx]
            fetcher = job.fetcher_factory() if job.fetcher_factory else None
            summary = run_crawl(self.store, job.config, fetcher)
            self.runs.append((fire_at, job.config.source, summary))
            completed += 1
        return self.runs
