"""Personality instruments as data, and scoring of response vectors.

Item banks are JSON documents::

    {"name": ..., "response_min": 1, "response_max": 5, "n_items": 60,
     "items": [{"id", "text", "domain", "facet"?, "keying", "kind"}, ...]}

Domain and facet scores are item means after reverse-coding, so every score
stays on the response scale.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class Domain(str, Enum):
    O = "O"
    C = "C"
    E = "E"
    A = "A"
    N = "N"


DOMAINS: tuple[str, ...] = ("O", "C", "E", "A", "N")
DOMAIN_NAMES = {
    "O": "Openness",
    "C": "Conscientiousness",
    "E": "Extraversion",
    "A": "Agreeableness",
    "N": "Neuroticism",
}

# Structural rules for the two instruments the pipeline depends on.
KNOWN_LAYOUTS = {
    "BFI2": {"n_items": 60, "range": (1, 5), "per_domain": 12, "per_facet": 4, "facets_per_domain": 3},
    "Mini-Markers": {"n_items": 40, "range": (1, 9), "per_domain": 8},
}


class ScaleError(ValueError):
    """Malformed item bank or response data."""


@dataclass(frozen=True)
class ItemDefinition:
    id: str
    text: str
    domain: str
    keying: str = "positive"
    kind: str = "statement"
    facet: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ScaleError(f"item {self.id!r}: unknown domain {self.domain!r}")
        if self.keying not in ("positive", "reversed"):
            raise ScaleError(f"item {self.id!r}: keying must be 'positive' or 'reversed'")
        if self.kind not in ("statement", "adjective"):
            raise ScaleError(f"item {self.id!r}: kind must be 'statement' or 'adjective'")

    @property
    def reversed(self) -> bool:
        return self.keying == "reversed"


@dataclass(frozen=True)
class ScaleDefinition:
    name: str
    items: tuple[ItemDefinition, ...]
    response_min: int
    response_max: int
    response_labels: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        object.__setattr__(self, "response_labels", tuple(self.response_labels))
        _validate_scale(self)

    @property
    def item_ids(self) -> list[str]:
        return [it.id for it in self.items]

    def item(self, item_id: str) -> ItemDefinition:
        return self._by_id[item_id]

    @cached_property
    def _by_id(self) -> dict[str, ItemDefinition]:
        return {it.id: it for it in self.items}

    def domain_items(self, domain: str) -> list[ItemDefinition]:
        return [it for it in self.items if it.domain == domain]

    @property
    def facets(self) -> list[str]:
        """Facet names in first-appearance order."""
        seen: dict[str, None] = {}
        for it in self.items:
            if it.facet is not None:
                seen.setdefault(it.facet, None)
        return list(seen)

    def facet_domain(self, facet: str) -> str:
        for it in self.items:
            if it.facet == facet:
                return it.domain
        raise KeyError(facet)

    @property
    def midpoint(self) -> float:
        return (self.response_min + self.response_max) / 2


def _validate_scale(scale: ScaleDefinition) -> None:
    if scale.response_min >= scale.response_max:
        raise ScaleError(f"{scale.name}: response_min must be below response_max")
    seen: set[str] = set()
    for it in scale.items:
        if it.id in seen:
            raise ScaleError(f"{scale.name}: duplicate item id {it.id!r}")
        seen.add(it.id)
    with_facet = [it.facet is not None for it in scale.items]
    if any(with_facet) and not all(with_facet):
        missing = next(it.id for it in scale.items if it.facet is None)
        raise ScaleError(f"{scale.name}: item {missing!r} has no facet while others do")
    facet_domain: dict[str, str] = {}
    for it in scale.items:
        if it.facet is None:
            continue
        if facet_domain.setdefault(it.facet, it.domain) != it.domain:
            raise ScaleError(f"{scale.name}: facet {it.facet!r} spans domains (item {it.id!r})")

    layout = KNOWN_LAYOUTS.get(scale.name)
    if layout is None:
        return
    if len(scale.items) != layout["n_items"]:
        raise ScaleError(f"{scale.name}: expected {layout['n_items']} items, got {len(scale.items)}")
    if (scale.response_min, scale.response_max) != layout["range"]:
        raise ScaleError(f"{scale.name}: expected response range {layout['range']}")
    for d in DOMAINS:
        n = len(scale.domain_items(d))
        if n != layout["per_domain"]:
            raise ScaleError(f"{scale.name}: domain {d} has {n} items, expected {layout['per_domain']}")
    if "per_facet" in layout:
        if not all(with_facet):
            raise ScaleError(f"{scale.name}: every item needs a facet")
        for f in scale.facets:
            ids = [it.id for it in scale.items if it.facet == f]
            if len(ids) != layout["per_facet"]:
                raise ScaleError(f"{scale.name}: facet {f!r} has {len(ids)} items ({', '.join(ids)})")
        for d in DOMAINS:
            n = len({it.facet for it in scale.domain_items(d)})
            if n != layout["facets_per_domain"]:
                raise ScaleError(f"{scale.name}: domain {d} has {n} facets")
    elif any(with_facet):
        first = next(it.id for it in scale.items if it.facet is not None)
        raise ScaleError(f"{scale.name}: item {first!r} must not carry a facet")


def scale_from_dict(doc: Mapping) -> ScaleDefinition:
    try:
        items = [
            ItemDefinition(
                id=str(raw["id"]),
                text=str(raw["text"]),
                domain=str(raw["domain"]),
                keying=str(raw.get("keying", "positive")),
                kind=str(raw.get("kind", "statement")),
                facet=raw.get("facet"),
            )
            for raw in doc["items"]
        ]
        scale = ScaleDefinition(
            name=str(doc["name"]),
            items=tuple(items),
            response_min=int(doc["response_min"]),
            response_max=int(doc["response_max"]),
            response_labels=tuple(doc.get("response_labels", ())),
        )
    except KeyError as exc:
        raise ScaleError(f"item bank is missing field {exc.args[0]!r}") from None
    declared = doc.get("n_items")
    if declared is not None and int(declared) != len(items):
        raise ScaleError(f"{scale.name}: declared n_items={declared} but found {len(items)} items")
    return scale


def load_scale(path: str | Path) -> ScaleDefinition:
    """Read and validate an item-bank file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScaleError(f"{path}: not valid JSON ({exc})") from None
    return scale_from_dict(doc)


BUNDLED = {
    "bfi2": "bfi2.json",
    "mini_markers": "mini_markers.json",
    "bfi": "bfi.json",
    "ipip50": "ipip50.json",
}


def data_path(name: str) -> Path:
    return Path(str(resources.files("psychoforge") / "data" / name))


@lru_cache(maxsize=None)
def bundled_scale(key: str) -> ScaleDefinition:
    """Load one of the shipped instruments: bfi2, mini_markers, bfi, ipip50."""
    return load_scale(data_path(BUNDLED[key]))


@dataclass(frozen=True)
class ResponseVector:
    scale_name: str
    answers: Mapping[str, int]

    def validate(self, scale: ScaleDefinition) -> None:
        if self.scale_name != scale.name:
            raise ScaleError(f"responses are for {self.scale_name!r}, not {scale.name!r}")
        for it in scale.items:
            if it.id not in self.answers:
                raise ScaleError(f"missing answer for item {it.id!r}")
            check_range(self.answers[it.id], scale, it.id)
        extra = set(self.answers) - set(scale.item_ids)
        if extra:
            raise ScaleError(f"unknown item id {sorted(extra)[0]!r}")

    def as_list(self, scale: ScaleDefinition) -> list[int]:
        return [int(self.answers[i]) for i in scale.item_ids]


@dataclass(frozen=True)
class ScoreReport:
    domain_scores: dict[str, float]
    facet_scores: dict[str, float] | None = None


def check_range(answer, scale: ScaleDefinition, item_id: str = "") -> None:
    if isinstance(answer, bool) or int(answer) != answer:
        raise ScaleError(f"answer {answer!r} for {item_id or 'item'} is not an integer")
    if not scale.response_min <= answer <= scale.response_max:
        where = f" for item {item_id!r}" if item_id else ""
        raise ScaleError(
            f"answer {answer}{where} outside [{scale.response_min}, {scale.response_max}]"
        )


def reverse_code(answer: int, scale: ScaleDefinition) -> int:
    check_range(answer, scale)
    return scale.response_min + scale.response_max - answer


def keyed_value(item: ItemDefinition, answer: int, scale: ScaleDefinition) -> int:
    return reverse_code(answer, scale) if item.reversed else int(answer)


def score(responses: ResponseVector, scale: ScaleDefinition) -> ScoreReport:
    """Domain (and facet) means after reverse-coding."""
    responses.validate(scale)
    by_domain: dict[str, list[int]] = {}
    by_facet: dict[str, list[int]] = {}
    for it in scale.items:
        v = keyed_value(it, responses.answers[it.id], scale)
        by_domain.setdefault(it.domain, []).append(v)
        if it.facet is not None:
            by_facet.setdefault(it.facet, []).append(v)
    domains = {d: sum(v) / len(v) for d, v in by_domain.items()}
    facets = {f: sum(v) / len(v) for f, v in by_facet.items()} or None
    return ScoreReport(domain_scores=domains, facet_scores=facets)


# Response matrices: one row per respondent, header of item ids. An optional
# leading "agent_id" column carries respondent labels.

def write_response_matrix(
    path: str | Path,
    responses: Sequence[ResponseVector],
    scale: ScaleDefinition,
    agent_ids: Sequence[str] | None = None,
) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = (["agent_id"] if agent_ids is not None else []) + scale.item_ids
        w.writerow(header)
        for k, rv in enumerate(responses):
            row = rv.as_list(scale)
            w.writerow(([agent_ids[k]] if agent_ids is not None else []) + row)


def read_response_matrix(
    path: str | Path, scale: ScaleDefinition
) -> tuple[list[str], list[ResponseVector]]:
    """Return (agent ids, validated response vectors)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ScaleError(f"{path}: empty response matrix")
    header, body = rows[0], rows[1:]
    has_ids = header and header[0] == "agent_id"
    cols = header[1:] if has_ids else header
    missing = [i for i in scale.item_ids if i not in cols]
    if missing:
        raise ScaleError(f"{path}: response matrix lacks column {missing[0]!r}")
    ids, out = [], []
    for n, row in enumerate(body, start=1):
        if not row:
            continue
        vals = row[1:] if has_ids else row
        if len(vals) != len(cols):
            raise ScaleError(f"{path}: row {n} has {len(vals)} values, expected {len(cols)}")
        try:
            answers = {c: int(v) for c, v in zip(cols, vals)}
        except ValueError:
            raise ScaleError(f"{path}: row {n} contains a non-integer answer") from None
        rv = ResponseVector(scale.name, answers)
        rv.validate(scale)
        out.append(rv)
        ids.append(row[0] if has_ids else f"agent_{n:04d}")
    return ids, out


def domain_matrix(reports: Iterable[ScoreReport]) -> list[list[float]]:
    """Rows of domain scores in O, C, E, A, N order."""
    return [[r.domain_scores[d] for d in DOMAINS] for r in reports]
