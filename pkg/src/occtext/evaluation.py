"""Occluded-text metrics and the recognizer/detector client contracts."""
from __future__ import annotations

import abc
import json
import math
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from rapidfuzz.distance import Levenshtein

from .core import Rect, Scenario

DETECTION_THRESHOLD = 0.35


def normalize_text(text: str | Sequence[str]) -> str:
    """Join OCR lines with spaces, uppercase, collapse whitespace runs, strip."""
    if not isinstance(text, str):
        text = " ".join(text)
    return re.sub(r"\s+", " ", text.upper()).strip()


def text_similarity(recognized: str | Sequence[str], target: str) -> float:
    """``1 - levenshtein / max(len)`` on normalized strings."""
    b = normalize_text(target)
    if not b:
        raise ValueError("empty target text")
    a = normalize_text(recognized)
    sim = 1.0 - Levenshtein.distance(a, b) / max(len(a), len(b))
    return min(1.0, max(0.0, sim))


def occlusion_alignment(r_occ: Rect, r_text: Rect) -> float:
    """Geometric mean of ``|I|/|R_occ|`` and ``|I|/|R_text|``."""
    if r_occ.area <= 0 or r_text.area <= 0:
        raise ValueError("degenerate rectangle")
    inter = r_occ.intersection_area(r_text)
    if inter <= 0:
        return 0.0
    return min(1.0, math.sqrt((inter / r_occ.area) * (inter / r_text.area)))


@dataclass(frozen=True)
class Detection:
    rect: Rect
    confidence: float


class RecognizerClient(abc.ABC):
    @abc.abstractmethod
    def invoke(self, image: np.ndarray | Path, context: dict) -> str | list[str]: ...


class DetectorClient(abc.ABC):
    @abc.abstractmethod
    def invoke(self, image: np.ndarray | Path, phrase: str, context: dict) -> list[Detection]: ...


@dataclass(frozen=True)
class EvalRecord:
    scenario_id: str
    seed: int
    text_sim: float
    occ_align: float
    detected: bool
    mode: str = "full"
    valid: bool = True
    error: str = ""

    def __post_init__(self):
        if self.valid and not self.detected and self.occ_align != 0.0:
            raise ValueError("occ_align must be 0 when the occluder is not detected")

    @classmethod
    def invalid(cls, scenario_id: str, seed: int, error: str, mode: str = "full") -> "EvalRecord":
        return cls(scenario_id, seed, 0.0, 0.0, False, mode, False, error)

    def to_json(self) -> str:
        d = {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "mode": self.mode,
            "valid": self.valid,
        }
        if self.valid:
            d.update(text_sim=round(self.text_sim, 6), occ_align=round(self.occ_align, 6), detected=self.detected)
        else:
            d["error"] = self.error
        return json.dumps(d, sort_keys=True)


def evaluate_sample(
    image,
    scenario: Scenario,
    recognizer: RecognizerClient,
    detector: DetectorClient,
    seed: int | None = None,
    mode: str = "full",
    threshold: float = DETECTION_THRESHOLD,
) -> EvalRecord:
    seed = scenario.seed if seed is None else seed
    context = {"scenario": scenario, "seed": seed, "mode": mode}
    try:
        recognized = recognizer.invoke(image, context)
        detections = detector.invoke(image, scenario.occluder_phrase, context)
    except Exception as exc:
        return EvalRecord.invalid(scenario.scenario_id, seed, f"{type(exc).__name__}: {exc}", mode)
    sim = text_similarity(recognized, scenario.target_text)
    best = max(detections, key=lambda d: d.confidence, default=None)
    if best is None or best.confidence < threshold:
        return EvalRecord(scenario.scenario_id, seed, sim, 0.0, False, mode)
    return EvalRecord(scenario.scenario_id, seed, sim, occlusion_alignment(best.rect, scenario.text_region), True, mode)


@dataclass(frozen=True)
class Summary:
    text_sim: float
    occ_align: float
    detect_rate: float
    count: int

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.text_sim, self.occ_align, self.detect_rate)


def aggregate(records: Iterable[EvalRecord]) -> Summary:
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    bad = [r for r in records if not r.valid]
    if bad:
        raise ValueError(f"{len(bad)} invalid records, first: {bad[0].scenario_id} seed {bad[0].seed}: {bad[0].error}")
    n = len(records)
    return Summary(
        math.fsum(r.text_sim for r in records) / n,
        math.fsum(r.occ_align for r in records) / n,
        sum(r.detected for r in records) / n,
        n,
    )


# ---------------------------------------------------------------------------
# Clients


def _subst(template, context: dict):
    """Expand ``$target`` / ``$text_rect`` placeholders used in mock files."""
    sc: Scenario = context["scenario"]
    if template == "$target":
        return sc.target_text
    if template == "$text_rect":
        return list(sc.text_region.as_tuple())
    return template


def _run_key(context: dict) -> str:
    return f"{context['scenario'].scenario_id}/{context['seed']}"


class MockRecognizer(RecognizerClient):
    """Answers from a table: ``{"default": ..., "runs": {"<scenario_id>/<seed>": ...}}``.

    Values are strings (``"$target"`` echoes the scenario target) or ``{"error": msg}``.
    """

    def __init__(self, table: dict):
        self.default = table.get("default", "$target")
        self.runs = table.get("runs", {})

    @classmethod
    def from_file(cls, path: str | Path) -> "MockRecognizer":
        return cls(json.loads(Path(path).read_text()))

    def invoke(self, image, context):
        ans = self.runs.get(_run_key(context), self.default)
        if isinstance(ans, dict) and "error" in ans:
            raise RuntimeError(ans["error"])
        return _subst(ans, context)


class MockDetector(DetectorClient):
    """Answers from a table like :class:`MockRecognizer`.

    A value is ``null`` (no detection), ``{"box": [l, t, r, b] | "$text_rect",
    "confidence": c}``, a list of such boxes, or ``{"error": msg}``.
    """

    def __init__(self, table: dict):
        self.default = table.get("default", {"box": "$text_rect", "confidence": 1.0})
        self.runs = table.get("runs", {})

    @classmethod
    def from_file(cls, path: str | Path) -> "MockDetector":
        return cls(json.loads(Path(path).read_text()))

    def invoke(self, image, phrase, context):
        ans = self.runs.get(_run_key(context), self.default)
        if ans is None:
            return []
        if isinstance(ans, dict) and "error" in ans:
            raise RuntimeError(ans["error"])
        boxes = ans if isinstance(ans, list) else [ans]
        return [Detection(Rect(*_subst(b["box"], context)), float(b.get("confidence", 1.0))) for b in boxes]


def _image_path(image, tmp: Path) -> Path:
    if isinstance(image, (str, Path)):
        return Path(image)
    from .glyph import save_gray

    p = tmp / "image.pgm"
    save_gray(p, image)
    return p


class SubprocessRecognizer(RecognizerClient):
    """Runs ``command`` with ``{image}`` replaced by a file path; stdout lines are the OCR text."""

    def __init__(self, command: str, timeout: float = 120.0):
        self.command = command
        self.timeout = timeout

    def invoke(self, image, context):
        with tempfile.TemporaryDirectory() as tmp:
            path = _image_path(image, Path(tmp))
            args = [a.replace("{image}", str(path)) for a in shlex.split(self.command)]
            out = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout, check=True)
        return [line for line in out.stdout.splitlines() if line.strip()]


class SubprocessDetector(DetectorClient):
    """Runs ``command`` with ``{image}`` and ``{phrase}`` substituted.

    Stdout must be a JSON list of ``{"box": [l, t, r, b], "confidence": c}`` in
    normalized coordinates.
    """

    def __init__(self, command: str, timeout: float = 120.0):
        self.command = command
        self.timeout = timeout

    def invoke(self, image, phrase, context):
        with tempfile.TemporaryDirectory() as tmp:
            path = _image_path(image, Path(tmp))
            args = [a.replace("{image}", str(path)).replace("{phrase}", phrase) for a in shlex.split(self.command)]
            out = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout, check=True)
        return [Detection(Rect(*d["box"]), float(d["confidence"])) for d in json.loads(out.stdout or "[]")]
