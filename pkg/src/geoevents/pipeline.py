"""Per-window detection: quad-tree, embedding, clustering, multi-level power-law
checks, verification, pruning, image gate and duplicate merging."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import powerlaw
from .clustering import adaptive_threshold
from .core_types import (Bounds, DetectedEvent, DetectorConfig, EventCandidate,
                         SlidingWindows, Tweet)
from .embedding import (TweetVector, VectorTable, embed_keywords, embed_text,
                        extract_keywords, stop_words)
from .imagecoherence import HumanAnnotation, ImageAnalysis, ImageStore, analyze_candidate
from .quadtree import QuadTree, QuadTreeNode, build, in_region, quadrant_index

log = logging.getLogger(__name__)


class PipelineConfigError(ValueError):
    pass


def top_tags(tweets: Iterable[Tweet], x: int,
             excluded: frozenset[str] = frozenset()) -> tuple[tuple[str, int], ...]:
    """The ``x`` most frequent hashtags/mentions (by occurrence), ties by name."""
    c = Counter(k for t in tweets for k in t.tags if k not in excluded)
    return tuple(sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:x])


# ------------------------------------------------------------ power-law stage

class PowerLawStage:
    """Power-law checks on keyword count samples, memoised on the sample."""

    def __init__(self, config: DetectorConfig):
        self.config = config
        self._cache: dict[tuple[int, ...], tuple[bool, powerlaw.PowerLawFit | None]] = {}

    def check(self, counts: Sequence[int]):
        key = tuple(sorted(counts))
        if key not in self._cache:
            c = self.config
            self._cache[key] = powerlaw.counts_pass_powerlaw(
                list(key), c.powerlaw_pvalue_threshold, c.bootstrap_iterations,
                c.rng_seed, c.powerlaw_min_tail)
        return self._cache[key]


@dataclass
class _Subset:
    node: QuadTreeNode
    code: str
    tweets: list[Tweet]


def _level_subsets(tree: QuadTree, tweets: Sequence[Tweet], keywords: Mapping[str, list[str]],
                   min_distinct: int):
    """Walk the tree below the root, yielding each non-empty (cell, subset) of ``tweets``.

    Descent stops once a subset has fewer than ``min_distinct`` distinct
    keywords, since its sub-cells cannot have more.
    """
    stack = [_Subset(tree.root, "", list(tweets))]
    while stack:
        s = stack.pop()
        distinct = {k for t in s.tweets for k in keywords[t.id]}
        if len(distinct) < min_distinct:
            continue
        yield s
        if s.node.is_leaf:
            continue
        parts: list[list[Tweet]] = [[], [], [], []]
        for t in s.tweets:
            parts[quadrant_index(s.node.bounds, t.lat, t.lon)].append(t)
        for q in range(3, -1, -1):
            if parts[q]:
                stack.append(_Subset(s.node.children[q], s.code + str(q), parts[q]))


@dataclass
class ClusterStageResult:
    candidates: list[EventCandidate]
    threshold: float | None
    n_clusters: int
    n_vectors: int


def cluster_candidates(tweets: Sequence[Tweet], tree: QuadTree,
                       embed: Callable[[Tweet], TweetVector | None], config: DetectorConfig,
                       stage: PowerLawStage, prefix: str = "",
                       require_ids: frozenset[str] | None = None) -> ClusterStageResult:
    """Cluster at the root, then run the power-law check on every cluster at every level.

    With ``require_ids``, only subsets touching one of those tweets become candidates.
    """
    ordered = sorted(tweets, key=lambda t: (t.timestamp, t.id))
    vectors, by_id = [], {}
    for t in ordered:
        v = embed(t)
        if v is not None:
            vectors.append(v)
            by_id[t.id] = t
    if not vectors:
        return ClusterStageResult([], None, 0, 0)
    search = adaptive_threshold(vectors, cap=config.threshold_search_cap, seed=config.rng_seed)
    vec_of = {v.tweet_id: v.vector for v in vectors}
    keywords = {t.id: extract_keywords(t.text) for t in by_id.values()}
    out = []
    for label, members in enumerate(search.assignment.members):
        cluster = [by_id[i] for i in members]
        for s in _level_subsets(tree, cluster, keywords, config.powerlaw_min_tail):
            if require_ids is not None and not any(t.id in require_ids for t in s.tweets):
                continue
            counts = powerlaw.keyword_counts(keywords[t.id] for t in s.tweets)
            ok, _ = stage.check(counts)
            if not ok:
                continue
            out.append(EventCandidate(
                cluster_id=f"{prefix}c{label}:L{s.node.depth}:{s.code or 'root'}",
                level=s.node.depth, cell=s.node.bounds, tweets=tuple(s.tweets),
                top_keywords=top_tags(s.tweets, config.top_keyword_count),
                centroid_vector=tuple(np.mean([vec_of[t.id] for t in s.tweets], axis=0))))
    return ClusterStageResult(out, search.threshold, search.assignment.n_clusters, len(vectors))


def keyword_embedder(table: VectorTable):
    return lambda t: embed_keywords(extract_keywords(t.text), table, t.id)


def text_embedder(table: VectorTable):
    return lambda t: embed_text(t.text, table, t.id)


# ---------------------------------------------------------------- verification

def best_overlap(candidate: EventCandidate, others: Sequence[EventCandidate]) -> int:
    ids = candidate.tweet_ids
    return max((len(ids & o.tweet_ids) for o in others), default=0)


def match_candidates(candidates: Sequence[EventCandidate],
                     new: Sequence[EventCandidate]) -> list[EventCandidate]:
    """Candidates sharing more than half of their tweets with some new cluster."""
    return [c for c in candidates if 2 * best_overlap(c, new) > len(c.tweets)]


def verify(candidates: Sequence[EventCandidate], base_tweets: Sequence[Tweet],
           verification_rounds: Sequence[Sequence[Tweet]], table: VectorTable,
           config: DetectorConfig, stage: PowerLawStage | None = None,
           region: Bounds | None = None) -> tuple[list[EventCandidate], list[dict]]:
    """Re-cluster on raw text over the window tweets plus each verification batch.

    Round ``r`` pools ``base_tweets`` with ``verification_rounds[r]``.
    """
    stage = stage or PowerLawStage(config)
    region = region or config.region
    kept = list(candidates)
    rounds = []
    for r, extra in enumerate(verification_rounds):
        if not kept:
            break
        pool = {t.id: t for t in base_tweets}
        pool.update((t.id, t) for t in extra if in_region(region, t.lat, t.lon))
        tweets = sorted(pool.values(), key=lambda t: (t.timestamp, t.id))
        tree = build(tweets, region, config.quadtree_max_depth, config.quadtree_split_threshold)
        res = cluster_candidates(tweets, tree, text_embedder(table), config, stage,
                                 prefix=f"v{r}:")
        before = len(kept)
        kept = match_candidates(kept, res.candidates)
        rounds.append({"round": r, "extra_tweets": len(extra), "new_candidates":
                       len(res.candidates), "kept": len(kept), "dropped": before - len(kept)})
    return kept, rounds


# --------------------------------------------------------------------- pruning

@dataclass(frozen=True)
class PruneReport:
    removed_tweet_ids: tuple[str, ...]
    top_keywords: tuple[tuple[str, int], ...]
    containment_fraction: float
    verdict: str  # kept | rejected


def excluded_keywords(config: DetectorConfig) -> frozenset[str]:
    return stop_words() | frozenset(k.lower() for k in config.excluded_keywords)


def prune(candidate: EventCandidate, excluded: Iterable[str],
          config: DetectorConfig) -> tuple[PruneReport, EventCandidate | None]:
    """Drop tweets whose tags are all singletons, single-tweet or excluded, then
    require at least half of the rest to carry one of the top tags."""
    excluded = frozenset(k.lower() for k in excluded)
    occurrences = Counter(k for t in candidate.tweets for k in t.tags)
    tweet_freq = Counter(k for t in candidate.tweets for k in set(t.tags))

    def weak(k):
        return occurrences[k] == 1 or tweet_freq[k] == 1 or k in excluded

    removed = [t.id for t in candidate.tweets if t.tags and all(weak(k) for k in t.tags)]
    gone = set(removed)
    remaining = [t for t in candidate.tweets if t.id not in gone]
    top = top_tags(remaining, config.top_keyword_count, excluded)
    names = {k for k, _ in top}
    covered = sum(1 for t in remaining if names.intersection(t.tags))
    frac = covered / len(remaining) if remaining else 0.0
    verdict = "kept" if remaining and frac >= 0.5 else "rejected"
    report = PruneReport(tuple(removed), top, frac, verdict)
    if verdict == "rejected":
        return report, None
    return report, replace(candidate, tweets=tuple(remaining), top_keywords=top)


# --------------------------------------------------------------------- merging

class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller index wins so groups are labelled deterministically
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _cells_overlap(a: Bounds, b: Bounds) -> bool:
    return a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]


def are_duplicates(a: DetectedEvent, b: DetectedEvent) -> bool:
    ia, ib = a.candidate.tweet_ids, b.candidate.tweet_ids
    if 2 * len(ia & ib) > min(len(ia), len(ib)):
        return True
    if abs(a.detection_window_id - b.detection_window_id) > 1:
        return False
    if not _cells_overlap(a.candidate.cell, b.candidate.cell):
        return False
    ka = {k for k, _ in a.candidate.top_keywords}
    return bool(ka.intersection(k for k, _ in b.candidate.top_keywords))


def _rejected(e: DetectedEvent) -> bool:
    return e.provenance.get("image_verdict") == "reject"


def group_survives(group: Sequence[DetectedEvent]) -> bool:
    """A group is dropped only when its image evidence is all negative: some
    member was rejected by the gate and none was accepted.  Bypassed members
    carry no evidence either way."""
    verdicts = {e.provenance.get("image_verdict") for e in group}
    return "accept" in verdicts or "reject" not in verdicts


def merge_duplicates(events: Sequence[DetectedEvent],
                     history: Sequence[DetectedEvent] = ()) -> list[DetectedEvent]:
    """Union duplicate events transitively and keep one representative per group.

    ``history`` holds events from earlier windows; the result covers history
    and new events together, so an event seen again in the next window is
    reported once.  Groups are formed over every event given, including ones
    the image gate rejected, then judged by ``group_survives``.  The
    representative is the deepest member the gate did not reject.
    """
    allev = list(history) + list(events)
    uf = UnionFind(len(allev))
    for i in range(len(allev)):
        for j in range(i + 1, len(allev)):
            if are_duplicates(allev[i], allev[j]):
                uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(len(allev)):
        groups.setdefault(uf.find(i), []).append(i)
    out = []
    for members in groups.values():
        group = [allev[i] for i in members]
        if not group_survives(group):
            continue
        alive = [e for e in group if not _rejected(e)]
        rep = min(alive, key=lambda e: (-e.candidate.level, e.detection_window_id,
                                        -len(e.candidate.tweets), e.event_id))
        merged = sorted({cid for i in members for cid in allev[i].merged_from})
        windows = sorted({allev[i].detection_window_id for i in members})
        prov = dict(rep.provenance)
        prov["windows"] = windows
        prov["group_size"] = len(members)
        out.append(DetectedEvent(rep.candidate, rep.detection_window_id, rep.coherence,
                                 tuple(merged), prov))
    out.sort(key=lambda e: (e.detection_window_id, e.event_id))
    return out


# -------------------------------------------------------------------- detection

@dataclass
class WindowTrace:
    window_id: int
    n_tweets: int = 0
    dropped_outside_region: int = 0
    tree_depth: int = 0
    threshold: float | None = None
    n_clusters: int = 0
    powerlaw_candidates: int = 0
    verification: list = field(default_factory=list)
    verified: int = 0
    pruned_kept: int = 0
    image_verdicts: dict = field(default_factory=dict)
    events: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StageOutput:
    """Everything up to (and including) the image analysis for one window."""

    window_id: int
    pruned: list[tuple[EventCandidate, PruneReport]]
    analyses: dict[str, ImageAnalysis]
    trace: WindowTrace

    def events(self, image_stage: bool = True) -> list[DetectedEvent]:
        out = []
        for cand, report in self.pruned:
            analysis = self.analyses.get(cand.cluster_id) if image_stage else None
            prov = {"stages": ["quadtree", "embedding", "clustering", "powerlaw",
                               "verification", "pruning"],
                    "containment": report.containment_fraction,
                    "removed_tweets": len(report.removed_tweet_ids)}
            coherence = None
            if analysis is not None:
                prov["stages"].append("image")
                prov["image_verdict"] = analysis.verdict
                if analysis.degraded:
                    prov["image_degraded"] = True
                coherence = analysis.report
            out.append(DetectedEvent(cand, self.window_id, coherence, (cand.cluster_id,), prov))
        return out


def run_stages(sliding: SlidingWindows, verification_feed: Sequence[Tweet],
               config: DetectorConfig, table: VectorTable | None,
               images: ImageStore | None = None,
               annotations: Mapping[str, HumanAnnotation] | None = None,
               image_stage: bool = True, stage: PowerLawStage | None = None,
               image_cache: dict | None = None) -> StageOutput:
    if table is None:
        raise PipelineConfigError("a word-vector table is required")
    latest = sliding.latest
    wid = latest.window_id if latest else -1
    trace = WindowTrace(wid)
    if latest is None:
        return StageOutput(wid, [], {}, trace)
    stage = stage or PowerLawStage(config)
    region = config.region
    all_tweets = sliding.tweets()
    tweets = [t for t in all_tweets if in_region(region, t.lat, t.lon)]
    trace.n_tweets = len(tweets)
    trace.dropped_outside_region = len(all_tweets) - len(tweets)
    if trace.dropped_outside_region:
        log.warning("window %d: %d tweets outside the region ignored", wid,
                    trace.dropped_outside_region)
    if not tweets:
        return StageOutput(wid, [], {}, trace)
    tree = build(tweets, region, config.quadtree_max_depth, config.quadtree_split_threshold)
    trace.tree_depth = tree.depth
    current = frozenset(t.id for t in latest.tweets)
    res = cluster_candidates(tweets, tree, keyword_embedder(table), config, stage,
                             prefix=f"w{wid}:", require_ids=current)
    trace.threshold, trace.n_clusters = res.threshold, res.n_clusters
    trace.powerlaw_candidates = len(res.candidates)

    vlen = config.verification_window_seconds
    rounds = [[t for t in verification_feed
               if latest.end + r * vlen <= t.timestamp < latest.end + (r + 1) * vlen]
              for r in range(config.verification_rounds)]
    verified, trace.verification = verify(res.candidates, tweets, rounds, table, config,
                                          stage, region)
    trace.verified = len(verified)

    excluded = excluded_keywords(config)
    pruned = []
    for cand in verified:
        report, kept = prune(cand, excluded, config)
        if kept is not None:
            pruned.append((kept, report))
    trace.pruned_kept = len(pruned)

    analyses: dict[str, ImageAnalysis] = {}
    if image_stage and pruned:
        store = images or ImageStore()
        anns = annotations or {}
        cache = image_cache if image_cache is not None else {}

        def analyse(cand):
            return analyze_candidate(cand, store, anns, config, cache)

        # each candidate is independent; results are keyed by id so order is irrelevant
        cands = [c for c, _ in pruned]
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                results = list(pool.map(analyse, cands))
        else:
            results = [analyse(c) for c in cands]
        analyses = {c.cluster_id: a for c, a in zip(cands, results)}
        trace.image_verdicts = dict(Counter(a.verdict for a in results))
    return StageOutput(wid, pruned, analyses, trace)


def detect(sliding: SlidingWindows, verification_feed: Sequence[Tweet], config: DetectorConfig,
           table: VectorTable | None, images: ImageStore | None = None,
           annotations: Mapping[str, HumanAnnotation] | None = None,
           image_stage: bool = True, history: Sequence[DetectedEvent] = (),
           stage: PowerLawStage | None = None) -> list[DetectedEvent]:
    """Events found in the newest window of ``sliding``, duplicates merged."""
    out = run_stages(sliding, verification_feed, config, table, images, annotations,
                     image_stage, stage)
    return merge_duplicates(out.events(image_stage), history)
