"""Seeded synthetic tweet streams with planted events, decoy hotspots and images.

Everything a run needs lands in one directory::

    stream.jsonl        tweets
    truth.jsonl         planted events (tweet ids and time span)
    images/*.png        tweet images
    annotations.jsonl   person boxes per image
    vectors.txt         word-vector table covering the generated vocabulary
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import textures
from .core_types import DEFAULT_REGION, Bounds, Tweet, make_tweet, write_tweets
from .embedding import save_vectors
from .imagecoherence import HumanAnnotation, PersonBox, save_image, write_annotations

VECTOR_DIM = 64
VOCAB_SEED = 20190501
TAG_POOL_SIZE = 1500

TOPICS: dict[str, tuple[str, ...]] = {
    "fire": ("fire", "smoke", "flames", "firefighters", "fdny", "blaze", "sirens", "evacuation",
             "burning", "alarm", "ladder", "engine", "ashes", "hydrant", "rescue", "heat",
             "firetruck", "emergency", "roof", "soot", "hose", "smokealarm", "inferno",
             "firecrew", "embers"),
    "flood": ("flood", "flooding", "water", "rain", "storm", "drainage", "puddles", "basement",
              "pump", "sandbags", "downpour", "flashflood", "submerged", "river", "overflow",
              "wet", "soaked", "stormdrain", "deluge", "rainfall", "waterlogged", "torrent",
              "umbrella", "levee", "mud"),
    "protest": ("protest", "march", "rally", "signs", "chant", "demonstrators", "police",
                "justice", "crowd", "megaphone", "activists", "banner", "solidarity", "strike",
                "picket", "petition", "marchers", "speech", "organizers", "civilrights",
                "unity", "voices", "standup", "resist", "sitin"),
    "parade": ("parade", "floats", "marching", "band", "confetti", "costumes", "drums",
               "balloons", "spectators", "procession", "trumpets", "dancers", "majorettes",
               "flags", "festive", "streamers", "baton", "grandmarshal", "cheer", "sidewalk",
               "bleachers", "carnival", "pageant", "brass", "fanfare"),
    "concert": ("concert", "stage", "encore", "guitar", "setlist", "crowdsurf", "drummer",
                "vocals", "amplifier", "tour", "livemusic", "soundcheck", "mosh", "lights",
                "headliner", "opener", "bassist", "chorus", "singalong", "ticket", "venue",
                "acoustic", "riff", "frontrow", "backstage"),
    "marathon": ("marathon", "runners", "finishline", "mile", "race", "pace", "medal",
                 "hydration", "sprint", "stride", "cheering", "bib", "course", "relay",
                 "endurance", "split", "kilometer", "startline", "sneakers", "stretch",
                 "waterstation", "cramp", "podium", "jog", "finisher"),
}

HOTSPOT_TOPICS: dict[str, tuple[str, ...]] = {
    "plaza": ("plaza", "tourists", "billboards", "selfie", "crowds", "neon", "shopping",
              "souvenirs", "streetfood", "buskers", "sightseeing", "landmark", "vendors",
              "pretzel", "hotdog", "photos", "screens", "skyline", "citylights", "strolling",
              "benches", "fountain", "pigeons", "taxi", "meetup"),
    "market": ("market", "farmers", "produce", "stalls", "bakery", "cheese", "flowers",
               "organic", "honey", "apples", "bread", "coffee", "brunch", "vendorstall",
               "tasting", "spices", "pickles", "jam", "cider", "baskets", "greens", "herbs",
               "pastry", "samples", "localfood"),
    "station": ("station", "commute", "platform", "delay", "subway", "train", "tracks",
                "rushhour", "turnstile", "metrocard", "transfer", "express", "local",
                "conductor", "announcement", "crowded", "escalator", "tunnel", "downtown",
                "uptown", "schedule", "signal", "doors", "seats", "railway"),
}

FILLER = ("today", "right", "now", "people", "everyone", "look", "this", "crazy", "wow",
          "omg", "near", "here", "street", "corner", "block", "going", "seeing", "saw",
          "happening", "outside", "morning", "afternoon", "tonight", "friends", "work",
          "home", "lunch", "walk", "city", "day", "time", "really", "pretty", "whole",
          "place", "again", "still", "love", "hate", "traffic", "weather", "news", "dinner",
          "phone", "bus", "weekend", "feel", "tired", "happy", "bored")

REGION_NAMES = ("nyc", "newyork", "ny", "brooklyn", "manhattan", "usa", "america")

_STOPISH = ("the", "a", "is", "and", "so", "of", "to", "in", "it", "at", "on", "my", "just",
            "lol", "with", "for", "this", "that", "was", "are")


def _pseudo_words(n: int, rng: np.random.Generator) -> list[str]:
    onsets = ["b", "br", "c", "ch", "d", "dr", "f", "fl", "g", "gr", "h", "j", "k", "l", "m",
              "n", "p", "pl", "r", "s", "sh", "st", "t", "tr", "v", "w", "z"]
    vowels = ["a", "e", "i", "o", "u", "ai", "ee", "oo", "ou"]
    codas = ["", "n", "r", "s", "t", "k", "m", "x", "ll", "nd"]
    taken = set(w for ws in TOPICS.values() for w in ws)
    taken |= set(w for ws in HOTSPOT_TOPICS.values() for w in ws) | set(FILLER)
    out: list[str] = []
    while len(out) < n:
        syl = int(rng.integers(2, 4))
        w = "".join(rng.choice(onsets) + rng.choice(vowels) + rng.choice(codas)
                    for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass(frozen=True)
class Vocabulary:
    tag_pool: tuple[str, ...]
    tokens: tuple[str, ...]
    matrix: np.ndarray


def build_vocabulary(dimension: int = VECTOR_DIM, pool_size: int = TAG_POOL_SIZE,
                     seed: int = VOCAB_SEED) -> Vocabulary:
    """Topic words cluster around a per-topic centre; everything else is a random unit vector.

    Named words come first and are drawn from their own stream, so the
    table for any ``pool_size`` starts with the same rows.
    """
    rng = np.random.default_rng([seed, 0])

    def unit(v):
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    tokens, rows = [], []
    for words in list(TOPICS.values()) + list(HOTSPOT_TOPICS.values()):
        centre = unit(rng.normal(size=dimension))
        for w in words:
            tokens.append(w)
            rows.append(unit(centre + 0.6 * unit(rng.normal(size=dimension))))
    for w in FILLER + REGION_NAMES:
        tokens.append(w)
        rows.append(unit(rng.normal(size=dimension)))
    pool_rng = np.random.default_rng([seed, 1])
    pool = _pseudo_words(pool_size, pool_rng)
    for w in pool:
        tokens.append(w)
        rows.append(unit(pool_rng.normal(size=dimension)))
    return Vocabulary(tuple(pool), tuple(tokens), np.round(np.array(rows), 6))


# --------------------------------------------------------------------- scenario

@dataclass(frozen=True)
class PlantedEvent:
    """A burst of on-topic tweets around ``epicenter``; ``hotspot`` marks a decoy
    (event-like text, unrelated images) that is not part of the ground truth."""

    topic: str
    epicenter: tuple[float, float]
    radius: float = 0.004
    start: int = 0                  # seconds after scenario start
    end: int = 1800
    tweets: int = 90
    zipf_exponent: float = 1.1
    image_count: int = 3
    human_images: int = 0
    hotspot: bool = False

    def vocabulary(self) -> tuple[str, ...]:
        return (HOTSPOT_TOPICS if self.hotspot else TOPICS)[self.topic]


@dataclass(frozen=True)
class ScenarioConfig:
    region: Bounds = DEFAULT_REGION
    start: int = 1_560_000_000
    duration: int = 2400
    background_rate: float = 20.0   # tweets per minute
    events: tuple[PlantedEvent, ...] = ()
    seed: int = 0
    image_size: int = 64
    background_image_prob: float = 0.02
    background_tag_prob: float = 0.3

    def __post_init__(self):
        if self.duration <= 0 or self.background_rate < 0:
            raise ValueError("duration must be positive and rates non-negative")
        s, n, w, e = self.region
        for ev in self.events:
            lat, lon = ev.epicenter
            if not (s <= lat < n and w <= lon < e):
                raise ValueError(f"epicenter {ev.epicenter} outside region")
            if not 0 <= ev.start < ev.end <= self.duration:
                raise ValueError("event span must lie inside the scenario")
            if ev.topic not in (HOTSPOT_TOPICS if ev.hotspot else TOPICS):
                raise ValueError(f"unknown topic {ev.topic!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def default_scenario(seed: int, events: int = 1, hotspots: int = 0,
                     region: Bounds = DEFAULT_REGION, **kwargs) -> ScenarioConfig:
    """One query window plus the verification tail, with seeded event placements."""
    rng = np.random.default_rng([seed, 7])
    s, n, w, e = region
    planted = []
    topics = list(TOPICS)
    spots = list(HOTSPOT_TOPICS)
    for i in range(events + hotspots):
        hot = i >= events
        pool = spots if hot else topics
        topic = pool[int(rng.integers(len(pool)))]
        pool.remove(topic)
        lat = float(rng.uniform(s + 0.1 * (n - s), n - 0.1 * (n - s)))
        lon = float(rng.uniform(w + 0.1 * (e - w), e - 0.1 * (e - w)))
        start = int(rng.integers(0, 600))
        planted.append(PlantedEvent(topic, (lat, lon), start=start, end=start + 1500,
                                    hotspot=hot, human_images=0 if hot else 1))
    return ScenarioConfig(region=region, events=tuple(planted), seed=seed, **kwargs)


# -------------------------------------------------------------------- generator

@dataclass
class GeneratedStream:
    tweets: list[Tweet]
    truth: list[dict]
    images: dict[str, np.ndarray] = field(default_factory=dict)
    annotations: list[HumanAnnotation] = field(default_factory=list)
    vocabulary: Vocabulary | None = None
    scenario: ScenarioConfig | None = None

    @property
    def end(self) -> int:
        return self.scenario.start + self.scenario.duration


def _zipf_probs(n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** s
    return p / p.sum()


def _filler(rng: np.random.Generator, k: int) -> list[str]:
    words = FILLER + _STOPISH
    return [words[i] for i in rng.integers(0, len(words), k)]


def _event_text(ev: PlantedEvent, probs: np.ndarray, rng: np.random.Generator) -> str:
    vocab = ev.vocabulary()
    k = int(rng.integers(2, 5))
    picks = list(dict.fromkeys(rng.choice(len(vocab), size=k, p=probs)))
    parts: list[str] = []
    for j, idx in enumerate(picks):
        parts.extend(_filler(rng, int(rng.integers(1, 3))))
        word = vocab[idx]
        parts.append("#" + word if j == 0 or rng.random() < 0.5 else word.capitalize())
    if rng.random() < 0.1:
        parts.append("#" + REGION_NAMES[int(rng.integers(len(REGION_NAMES)))])
    return " ".join(parts)


def _background_text(vocab: Vocabulary, scenario: ScenarioConfig,
                     rng: np.random.Generator) -> str:
    parts = _filler(rng, int(rng.integers(3, 8)))
    pool = vocab.tag_pool
    if rng.random() < scenario.background_tag_prob:
        parts.insert(int(rng.integers(len(parts) + 1)), "#" + pool[int(rng.integers(len(pool)))])
    if rng.random() < 0.15:
        parts.insert(int(rng.integers(len(parts) + 1)),
                     pool[int(rng.integers(len(pool)))].capitalize())
    return " ".join(parts)


def _selfie_boxes(rng: np.random.Generator) -> tuple[PersonBox, ...]:
    side = float(np.sqrt(rng.uniform(0.25, 0.45)))
    x0, y0 = rng.uniform(0.0, 1.0 - side, 2)
    return (PersonBox(float(x0), float(y0), float(x0 + side), float(y0 + side),
                      float(rng.uniform(0.8, 1.0))),)


def _small_boxes(rng: np.random.Generator) -> tuple[PersonBox, ...]:
    out = []
    for _ in range(int(rng.integers(0, 3))):
        w, h = rng.uniform(0.03, 0.12, 2)
        x0, y0 = rng.uniform(0.0, 0.85, 2)
        out.append(PersonBox(float(x0), float(y0), float(x0 + w), float(y0 + h),
                             float(rng.uniform(0.5, 1.0))))
    return tuple(out)


def generate_stream(scenario: ScenarioConfig, vocabulary: Vocabulary | None = None
                    ) -> GeneratedStream:
    vocab = vocabulary or build_vocabulary()
    rng = np.random.default_rng([scenario.seed, 1])
    s, n, w, e = scenario.region
    size = scenario.image_size
    raw: list[dict] = []

    # background: uniform in space and time
    count = int(rng.poisson(scenario.background_rate * scenario.duration / 60.0))
    for _ in range(count):
        raw.append({"ts": int(rng.integers(0, scenario.duration)),
                    "lat": float(rng.uniform(s, n)), "lon": float(rng.uniform(w, e)),
                    "text": _background_text(vocab, scenario, rng), "event": None,
                    "image": "noise" if rng.random() < scenario.background_image_prob else None})

    for k, ev in enumerate(scenario.events):
        probs = _zipf_probs(len(ev.vocabulary()), ev.zipf_exponent)
        carriers = set(rng.choice(ev.tweets, size=min(ev.image_count + ev.human_images, ev.tweets),
                                  replace=False).tolist())
        humans = set(sorted(carriers)[:ev.human_images])
        for j in range(ev.tweets):
            lat = float(np.clip(rng.normal(ev.epicenter[0], ev.radius), s, np.nextafter(n, s)))
            lon = float(np.clip(rng.normal(ev.epicenter[1], ev.radius), w, np.nextafter(e, w)))
            text = _event_text(ev, probs, rng)
            image = None
            if j in carriers:
                image = "human" if j in humans else "event"
                if "#" + ev.vocabulary()[0] not in text.split():
                    text = "#" + ev.vocabulary()[0] + " " + text
            raw.append({"ts": int(rng.integers(ev.start, ev.end)), "lat": lat, "lon": lon,
                        "text": text, "event": k, "image": image})

    raw.sort(key=lambda r: (r["ts"], r["lat"], r["lon"], r["text"]))
    tweets: list[Tweet] = []
    members: dict[int, list[str]] = {k: [] for k in range(len(scenario.events))}
    images: dict[str, np.ndarray] = {}
    annotations: list[HumanAnnotation] = []
    # per-event pixel sources, drawn in event order so output is seed-stable
    families = {k: textures.random_family(np.random.default_rng([scenario.seed, 2, k]))
                for k in range(len(scenario.events))}
    event_imgs = {k: iter(textures.coherent_images(
        ev.image_count + ev.human_images, size, np.random.default_rng([scenario.seed, 3, k]),
        families[k])) for k, ev in enumerate(scenario.events) if not ev.hotspot}
    img_rng = np.random.default_rng([scenario.seed, 4])
    for i, r in enumerate(raw):
        tid = f"t{scenario.seed}-{i:06d}"
        refs = ()
        if r["image"] is not None:
            iid = f"img-{tid}"
            ev_k = r["event"]
            if r["image"] in ("event", "human") and ev_k is not None and ev_k in event_imgs:
                pixels = next(event_imgs[ev_k])
            else:
                pixels = textures.incoherent_images(1, size, img_rng)[0]
            images[iid] = pixels
            boxes = _selfie_boxes(img_rng) if r["image"] == "human" else _small_boxes(img_rng)
            annotations.append(HumanAnnotation(iid, boxes))
            refs = (f"images/{iid}.png",)
        tweets.append(make_tweet(tid, scenario.start + r["ts"], r["lat"], r["lon"], r["text"],
                                 refs))
        if r["event"] is not None:
            members[r["event"]].append(tid)

    truth = []
    for k, ev in enumerate(scenario.events):
        if ev.hotspot:
            continue
        truth.append({"event_id": f"e{k}", "topic": ev.topic,
                      "start": scenario.start + ev.start, "end": scenario.start + ev.end,
                      "epicenter": list(ev.epicenter), "tweet_ids": members[k]})
    return GeneratedStream(tweets, truth, images, annotations, vocab, scenario)


def write_scenario(stream: GeneratedStream, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_tweets(out / "stream.jsonl", stream.tweets)
    with open(out / "truth.jsonl", "w", encoding="utf-8") as fh:
        for rec in stream.truth:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    for iid, pixels in sorted(stream.images.items()):
        save_image(out / "images" / f"{iid}.png", pixels)
    write_annotations(out / "annotations.jsonl", stream.annotations)
    vocab = stream.vocabulary or build_vocabulary()
    save_vectors(out / "vectors.txt", vocab.tokens, vocab.matrix)
    if stream.scenario is not None:
        (out / "scenario.json").write_text(json.dumps(stream.scenario.to_dict(), sort_keys=True))
    return out


def read_truth(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def scenario_from_dict(data: dict) -> ScenarioConfig:
    evs = tuple(PlantedEvent(**{**e, "epicenter": tuple(e["epicenter"])})
                for e in data.get("events", ()))
    rest = {k: v for k, v in data.items() if k != "events"}
    if "region" in rest:
        rest["region"] = tuple(rest["region"])
    return ScenarioConfig(events=evs, **rest)

