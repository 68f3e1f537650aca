"""Stream runner, event serialization, precision / pseudo-recall and the image-gate ablation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core_types import (DetectedEvent, DetectorConfig, ParseError, SlidingWindows, Tweet,
                         advance, split_windows)
from .embedding import VectorTable
from .imagecoherence import HumanAnnotation, ImageStore
from .pipeline import PowerLawStage, StageOutput, merge_duplicates, run_stages


@dataclass
class StreamResult:
    stages: list[StageOutput]

    def events(self, image_stage: bool = True) -> list[DetectedEvent]:
        raw = [e for s in self.stages for e in s.events(image_stage)]
        return merge_duplicates(raw)

    @property
    def traces(self) -> list[dict]:
        return [s.trace.to_dict() for s in self.stages]


def run_stream(tweets: Sequence[Tweet], config: DetectorConfig, table: VectorTable,
               images: ImageStore | None = None,
               annotations: Mapping[str, HumanAnnotation] | None = None,
               image_stage: bool = True, start: int | None = None,
               end: int | None = None) -> StreamResult:
    """Detect over every complete query window in ``[start, end)``.

    ``start`` defaults to the first timestamp and ``end`` to one past the last.
    Verification batches are cut at ``end``, so the last window may be
    verified against fewer (or no) follow-up tweets.
    """
    if not tweets:
        return StreamResult([])
    ordered = sorted(tweets, key=lambda t: (t.timestamp, t.id))
    start = ordered[0].timestamp if start is None else start
    end = ordered[-1].timestamp + 1 if end is None else end
    length = config.query_window_seconds
    tail = config.verification_rounds * config.verification_window_seconds
    usable = [t for t in ordered if start <= t.timestamp < end]
    n_windows = max(0, (end - start) // length)
    if n_windows == 0:
        return StreamResult([])
    windows = split_windows([t for t in usable if t.timestamp < start + n_windows * length],
                            start, length, 0)
    stage = PowerLawStage(config)
    cache: dict = {}
    sliding = SlidingWindows(config.sliding_window_count)
    out = []
    for w in windows:
        sliding = advance(sliding, w)
        feed = [t for t in usable if w.end <= t.timestamp < w.end + tail]
        out.append(run_stages(sliding, feed, config, table, images, annotations,
                              image_stage, stage, cache))
    return StreamResult(out)


# ------------------------------------------------------------------ serialization

def event_record(event: DetectedEvent) -> dict:
    c = event.candidate
    return {
        "event_id": event.event_id,
        "window": event.detection_window_id,
        "level": c.level,
        "cell": list(c.cell),
        "tweet_ids": sorted(c.tweet_ids),
        "span": list(c.span),
        "top_keywords": [[k, n] for k, n in c.top_keywords],
        "coherence": event.coherence.to_dict() if event.coherence is not None else None,
        "merged_from": list(event.merged_from),
        "provenance": dict(event.provenance),
    }


def write_events(path: str | Path, events: Iterable[DetectedEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(event_record(e), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{n}: {exc}") from exc
    return out


# -------------------------------------------------------------------- metrics

@dataclass
class EvalResult:
    precision: float
    pseudo_recall: float
    n_true: int
    n_total: int
    detected: int
    true_detections: int
    vacuous_precision: bool = False
    matches: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _span(rec: Mapping) -> tuple[int, int]:
    if "span" in rec:
        return int(rec["span"][0]), int(rec["span"][1])
    return int(rec["start"]), int(rec["end"])


def evaluate(detected: Sequence[Mapping], truth: Sequence[Mapping]) -> EvalResult:
    """A detection matches a true event when more than half of its tweets belong to
    that event and the time spans overlap."""
    truth_sets = [(t["event_id"], set(t["tweet_ids"]), _span(t)) for t in truth]
    found: set[str] = set()
    matches = []
    hits = 0
    for d in detected:
        ids = set(d["tweet_ids"])
        d0, d1 = _span(d)
        match = None
        for tid, members, (t0, t1) in truth_sets:
            if ids and 2 * len(ids & members) > len(ids) and d0 <= t1 and t0 <= d1:
                match = tid
                break
        matches.append({"event_id": d["event_id"], "truth": match})
        if match is not None:
            hits += 1
            found.add(match)
    n_total = len(truth_sets)
    vacuous = not detected
    precision = 1.0 if vacuous else hits / len(detected)
    recall = len(found) / n_total if n_total else 1.0
    return EvalResult(precision, recall, len(found), n_total, len(detected), hits, vacuous,
                      matches)


def evaluate_events(events: Sequence[DetectedEvent], truth: Sequence[Mapping]) -> EvalResult:
    return evaluate([event_record(e) for e in events], truth)


@dataclass
class AblationResult:
    with_gate: EvalResult
    without_gate: EvalResult
    events_with: list[DetectedEvent]
    events_without: list[DetectedEvent]

    def to_dict(self) -> dict:
        return {"image_gate_on": self.with_gate.to_dict(),
                "image_gate_off": self.without_gate.to_dict()}


def ablate(tweets: Sequence[Tweet], truth: Sequence[Mapping], config: DetectorConfig,
           table: VectorTable, images: ImageStore | None = None,
           annotations: Mapping[str, HumanAnnotation] | None = None,
           start: int | None = None, end: int | None = None) -> AblationResult:
    """Detect with and without the image gate.

    The text stages do not depend on the gate, so they run once and the two
    variants differ only in whether gate verdicts are applied before merging.
    """
    res = run_stream(tweets, config, table, images, annotations, True, start, end)
    on, off = res.events(True), res.events(False)
    return AblationResult(evaluate_events(on, truth), evaluate_events(off, truth), on, off)
