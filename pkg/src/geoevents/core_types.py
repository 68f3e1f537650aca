"""Domain types shared by every detection stage, plus tweet parsing and config IO."""

from __future__ import annotations

import dataclasses
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

Bounds = tuple[float, float, float, float]  # (lat_min, lat_max, lon_min, lon_max)

# Lower Manhattan / Brooklyn-ish box; any city bounding box works.
DEFAULT_REGION: Bounds = (40.55, 40.95, -74.25, -73.70)


class ParseError(ValueError):
    """A tweet record is missing a required field or has a malformed one."""


class RangeError(ValueError):
    """Latitude or longitude outside of the valid range."""


class SequencingError(ValueError):
    """A query window was appended out of order."""


class ConfigError(ValueError):
    """Invalid detector configuration."""


@dataclass(frozen=True)
class Tweet:
    id: str
    timestamp: int
    lat: float
    lon: float
    text: str
    hashtags: tuple[str, ...] = ()
    mentions: tuple[str, ...] = ()
    image_refs: tuple[str, ...] = ()

    @property
    def tags(self) -> tuple[str, ...]:
        """Hashtags and mentions, as occurrences."""
        return self.hashtags + self.mentions


_MARKER_TOKEN = re.compile(r"([#@])(\w+)", re.UNICODE)


def scan_markers(text: str) -> tuple[list[str], list[str]]:
    """Return (hashtags, mentions) found in ``text``, lowercased, one entry per occurrence.

    A marker only starts a token at a word boundary, so ``a#b`` and
    e-mail addresses are ignored.
    """
    hashtags: list[str] = []
    mentions: list[str] = []
    for m in _MARKER_TOKEN.finditer(text):
        start = m.start()
        if start > 0 and (text[start - 1].isalnum() or text[start - 1] == "_"):
            continue
        (hashtags if m.group(1) == "#" else mentions).append(m.group(2).lower())
    return hashtags, mentions


def make_tweet(id: str, timestamp: int, lat: float, lon: float, text: str,
               image_refs: Iterable[str] = ()) -> Tweet:
    if not -90.0 <= lat <= 90.0:
        raise RangeError(f"tweet {id}: lat {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise RangeError(f"tweet {id}: lon {lon} outside [-180, 180]")
    hashtags, mentions = scan_markers(text)
    return Tweet(str(id), int(timestamp), float(lat), float(lon), text,
                 tuple(hashtags), tuple(mentions), tuple(image_refs))


def parse_tweet(record: Mapping[str, Any]) -> Tweet:
    """Build a Tweet from one decoded JSONL record (keys id, ts, lat, lon, text, images)."""
    for key in ("id", "ts", "lat", "lon", "text"):
        if key not in record:
            raise ParseError(f"missing field {key!r}")
    try:
        ts = record["ts"]
        if isinstance(ts, bool) or not float(ts).is_integer():
            raise ParseError(f"field 'ts' must be integral seconds, got {ts!r}")
        lat = float(record["lat"])
        lon = float(record["lon"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed numeric field in record {record.get('id')!r}: {exc}") from exc
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise RangeError(f"tweet {record['id']}: non-finite coordinates")
    images = record.get("images") or []
    if not isinstance(images, list):
        raise ParseError("field 'images' must be an array")
    text = record["text"]
    if not isinstance(text, str):
        raise ParseError("field 'text' must be a string")
    return make_tweet(str(record["id"]), int(ts), lat, lon, text, [str(p) for p in images])


def serialize_tweet(tweet: Tweet) -> dict[str, Any]:
    rec: dict[str, Any] = {"id": tweet.id, "ts": tweet.timestamp, "lat": tweet.lat,
                           "lon": tweet.lon, "text": tweet.text}
    if tweet.image_refs:
        rec["images"] = list(tweet.image_refs)
    return rec


def read_tweets(path: str | Path) -> list[Tweet]:
    tweets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                tweets.append(parse_tweet(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except (ParseError, RangeError) as exc:
                raise type(exc)(f"{path}:{lineno}: {exc}") from exc
    return tweets


def write_tweets(path: str | Path, tweets: Iterable[Tweet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tweets:
            fh.write(json.dumps(serialize_tweet(t), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class StreamWindow:
    window_id: int
    start: int
    end: int
    tweets: tuple[Tweet, ...]

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("window end must be after start")
        prev = None
        for t in self.tweets:
            if not self.start <= t.timestamp < self.end:
                raise ValueError(f"tweet {t.id} at {t.timestamp} outside window "
                                 f"[{self.start}, {self.end})")
            if prev is not None and t.timestamp < prev:
                raise ValueError("window tweets must be ordered by timestamp")
            prev = t.timestamp


def split_windows(tweets: Iterable[Tweet], start: int, length_s: int,
                  first_id: int = 0) -> list[StreamWindow]:
    """Cut a time-ordered tweet list into consecutive half-open windows starting at ``start``."""
    ordered = sorted(tweets, key=lambda t: (t.timestamp, t.id))
    ordered = [t for t in ordered if t.timestamp >= start]
    if not ordered:
        return []
    n = (ordered[-1].timestamp - start) // length_s + 1
    buckets: list[list[Tweet]] = [[] for _ in range(n)]
    for t in ordered:
        buckets[(t.timestamp - start) // length_s].append(t)
    return [StreamWindow(first_id + i, start + i * length_s, start + (i + 1) * length_s,
                         tuple(b)) for i, b in enumerate(buckets)]


@dataclass(frozen=True)
class SlidingWindows:
    """FIFO of the latest ``capacity`` query windows."""

    capacity: int = 6
    windows: tuple[StreamWindow, ...] = ()

    def __post_init__(self):
        if len(self.windows) > self.capacity:
            raise ValueError("too many windows for capacity")
        ids = [w.window_id for w in self.windows]
        if any(b != a + 1 for a, b in zip(ids, ids[1:])):
            raise SequencingError("window ids must be consecutive")

    @property
    def latest(self) -> StreamWindow | None:
        return self.windows[-1] if self.windows else None

    def tweets(self) -> list[Tweet]:
        return [t for w in self.windows for t in w.tweets]

    def __len__(self):
        return len(self.windows)


def advance(sliding: SlidingWindows, new: StreamWindow) -> SlidingWindows:
    if sliding.windows and new.window_id != sliding.windows[-1].window_id + 1:
        raise SequencingError(f"expected window {sliding.windows[-1].window_id + 1}, "
                              f"got {new.window_id}")
    kept = deque(sliding.windows, maxlen=sliding.capacity)
    kept.append(new)
    return SlidingWindows(sliding.capacity, tuple(kept))


@dataclass(frozen=True)
class DetectorConfig:
    query_window_minutes: int = 30
    sliding_window_count: int = 6
    quadtree_max_depth: int = 30
    quadtree_split_threshold: int = 50
    verification_window_minutes: int = 5
    verification_rounds: int = 2
    top_keyword_count: int = 5
    coherence_threshold: float = 1.5
    crops_per_image: int = 500
    crop_size: int = 32
    min_images: int = 3
    train_crop_fraction: float = 2.0 / 3.0
    human_area_total_threshold: float = 0.40
    human_area_single_threshold: float = 0.20
    powerlaw_pvalue_threshold: float = 0.1
    bootstrap_iterations: int = 100
    powerlaw_min_tail: int = 10
    rng_seed: int = 0
    region: Bounds = DEFAULT_REGION
    excluded_keywords: tuple[str, ...] = ("nyc", "newyork", "ny", "brooklyn", "manhattan",
                                          "usa", "america")
    ae_epochs: int = 30
    ae_learning_rate: float = 1e-3
    ae_batch_size: int = 64
    threshold_search_cap: int = 100
    workers: int = 1

    def __post_init__(self):
        positive = ("query_window_minutes", "sliding_window_count", "quadtree_max_depth",
                    "quadtree_split_threshold", "verification_window_minutes",
                    "top_keyword_count", "coherence_threshold", "crops_per_image", "crop_size",
                    "min_images", "human_area_total_threshold", "human_area_single_threshold",
                    "powerlaw_pvalue_threshold", "bootstrap_iterations", "powerlaw_min_tail",
                    "ae_epochs", "ae_batch_size", "threshold_search_cap", "workers")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.verification_rounds < 0:
            raise ConfigError("verification_rounds must be >= 0")
        if not 0.0 < self.train_crop_fraction < 1.0:
            raise ConfigError("train_crop_fraction must lie in (0, 1)")
        if self.ae_learning_rate < 0:
            raise ConfigError("ae_learning_rate must be >= 0")
        lat0, lat1, lon0, lon1 = self.region
        if not (-90 <= lat0 < lat1 <= 90 and -180 <= lon0 < lon1 <= 180):
            raise ConfigError(f"invalid region {self.region}")

    @property
    def query_window_seconds(self) -> int:
        return self.query_window_minutes * 60

    @property
    def verification_window_seconds(self) -> int:
        return self.verification_window_minutes * 60


def _coerce(value: str, default: Any, key: str) -> Any:
    try:
        if isinstance(default, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            if "/" in value:
                num, den = value.split("/")
                return float(num) / float(den)
            return float(value)
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if key == "region":
                if len(parts) != 4:
                    raise ValueError("region needs lat_min,lat_max,lon_min,lon_max")
                return tuple(float(p) for p in parts)
            return tuple(p.lower() for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return value


def load_config(path: str | Path | None = None, **overrides: Any) -> DetectorConfig:
    """Read a flat ``key = value`` file ('#' comments allowed) into a DetectorConfig."""
    defaults = DetectorConfig()
    values: dict[str, Any] = {}
    known = {f.name: f for f in dataclasses.fields(DetectorConfig)}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in known:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(value, getattr(defaults, key), key)
    values.update(overrides)
    return dataclasses.replace(defaults, **values)


def dump_config(config: DetectorConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def cell_contains(cell: Bounds, lat: float, lon: float) -> bool:
    return cell[0] <= lat <= cell[1] and cell[2] <= lon <= cell[3]


@dataclass(frozen=True)
class EventCandidate:
    cluster_id: str
    level: int
    cell: Bounds
    tweets: tuple[Tweet, ...]
    top_keywords: tuple[tuple[str, int], ...] = ()
    centroid_vector: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.tweets:
            raise ValueError("candidate needs at least one tweet")
        for t in self.tweets:
            if not cell_contains(self.cell, t.lat, t.lon):
                raise ValueError(f"tweet {t.id} lies outside candidate cell")
        if list(self.top_keywords) != sorted(self.top_keywords, key=lambda kv: (-kv[1], kv[0])):
            raise ValueError("top_keywords must be sorted by count desc, then keyword")

    @property
    def tweet_ids(self) -> frozenset[str]:
        return frozenset(t.id for t in self.tweets)

    @property
    def span(self) -> tuple[int, int]:
        ts = [t.timestamp for t in self.tweets]
        return min(ts), max(ts)


@dataclass(frozen=True)
class DetectedEvent:
    candidate: EventCandidate
    detection_window_id: int
    coherence: Any = None  # CoherenceReport when the image stage ran
    merged_from: tuple[str, ...] = ()
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.merged_from:
            object.__setattr__(self, "merged_from", (self.candidate.cluster_id,))

    @property
    def event_id(self) -> str:
        return self.candidate.cluster_id
