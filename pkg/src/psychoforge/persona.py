"""Persona prompts, the Mini-Markers questionnaire and the scenario batteries.

All prompt text comes from templates under ``data/templates`` so rendered
output is byte-stable and pinned by golden fixtures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from string import Template
from typing import Mapping

from .scales import ResponseVector, ScaleDefinition, bundled_scale, data_path


class PromptFormat(str, Enum):
    LIKERT = "Likert"
    EXPANDED = "Expanded"


class PersonaError(ValueError):
    pass


@dataclass(frozen=True)
class PersonaProfile:
    agent_id: str
    bfi2: ResponseVector
    format: PromptFormat = PromptFormat.EXPANDED


@dataclass(frozen=True)
class ExpansionTable:
    """Sentence for each (BFI2 item, Likert answer level)."""

    sentences: Mapping[str, tuple[str, ...]]
    levels: int = 5

    def __post_init__(self):
        for item_id, row in self.sentences.items():
            if len(row) != self.levels:
                raise PersonaError(f"expansion for {item_id!r} has {len(row)} levels, expected {self.levels}")
            for s in row:
                if not s.strip():
                    raise PersonaError(f"empty expansion sentence for {item_id!r}")
                if not s.startswith("I "):
                    raise PersonaError(f"expansion for {item_id!r} is not first-person: {s!r}")

    def sentence(self, item_id: str, answer: int) -> str:
        try:
            return self.sentences[item_id][answer - 1]
        except (KeyError, IndexError):
            raise PersonaError(f"no expansion for item {item_id!r} at level {answer}") from None

    def check_complete(self, scale: ScaleDefinition) -> None:
        missing = [i for i in scale.item_ids if i not in self.sentences]
        if missing:
            raise PersonaError(f"expansion table lacks item {missing[0]!r}")

    def level_of(self, item_id: str, sentence: str) -> int:
        """Inverse lookup used to decode rendered personas."""
        return self.sentences[item_id].index(sentence) + 1


def load_expansion_table(path: str | Path | None = None) -> ExpansionTable:
    path = Path(path) if path else data_path("expansion_bfi2.json")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return ExpansionTable({k: tuple(v) for k, v in doc["items"].items()}, int(doc.get("levels", 5)))


@dataclass(frozen=True)
class ScenarioDefinition:
    name: str
    battery: str
    text: str
    anchor_low: str
    anchor_high: str
    response_range: tuple[int, int] = (1, 10)


SCENARIOS_PER_BATTERY = 5


def load_scenarios(path: str | Path | None = None) -> dict[str, list[ScenarioDefinition]]:
    """Scenario batteries keyed by ``risk`` / ``ethics``, in prompt order."""
    path = Path(path) if path else data_path("scenarios.json")
    doc = json.loads(path.read_text(encoding="utf-8"))
    rng = (int(doc.get("response_min", 1)), int(doc.get("response_max", 10)))
    out: dict[str, list[ScenarioDefinition]] = {}
    for raw in doc["scenarios"]:
        sc = ScenarioDefinition(raw["name"], raw["battery"], raw["text"], raw["anchor_low"], raw["anchor_high"], rng)
        out.setdefault(sc.battery, []).append(sc)
    for battery, items in out.items():
        if len(items) != SCENARIOS_PER_BATTERY:
            raise PersonaError(f"battery {battery!r} has {len(items)} scenarios, expected {SCENARIOS_PER_BATTERY}")
    return out


@lru_cache(maxsize=None)
def _template(name: str) -> Template:
    return Template(data_path(f"templates/{name}").read_text(encoding="utf-8"))


def persona_lines(profile: PersonaProfile, scale: ScaleDefinition, table: ExpansionTable | None) -> list[str]:
    """One line per BFI2 item, in item order."""
    profile.bfi2.validate(scale)
    answers = profile.bfi2.answers
    if profile.format == PromptFormat.LIKERT:
        return [f"{it.text}: {answers[it.id]};" for it in scale.items]
    if table is None:
        raise PersonaError("the Expanded format needs an expansion table")
    return [table.sentence(it.id, answers[it.id]) for it in scale.items]


def render_questionnaire(scale: ScaleDefinition | None = None) -> str:
    """Instruction block with the rating legend, then the numbered adjective list."""
    scale = scale or bundled_scale("mini_markers")
    labels = scale.response_labels
    legend = "\n".join(f"{scale.response_min + k} - {lab}" for k, lab in enumerate(labels))
    items = "\n".join(f"{n}. {it.text} _" for n, it in enumerate(scale.items, start=1))
    return _template("questionnaire.txt").substitute(legend=legend, items=items).rstrip("\n")


def render_persona_prompt(
    profile: PersonaProfile,
    table: ExpansionTable | None = None,
    bfi2: ScaleDefinition | None = None,
    questionnaire: ScaleDefinition | None = None,
) -> str:
    bfi2 = bfi2 or bundled_scale("bfi2")
    fmt = PromptFormat(profile.format)
    if fmt == PromptFormat.EXPANDED:
        if table is None:
            raise PersonaError("the Expanded format needs an expansion table")
        table.check_complete(bfi2)
    persona = "\n".join(persona_lines(profile, bfi2, table))
    tpl = _template("likert.txt" if fmt == PromptFormat.LIKERT else "expanded.txt")
    return tpl.substitute(persona=persona, questionnaire=render_questionnaire(questionnaire))


def render_scenarios(
    profile: PersonaProfile,
    battery: str,
    table: ExpansionTable,
    scenarios: Mapping[str, list[ScenarioDefinition]] | None = None,
    bfi2: ScaleDefinition | None = None,
) -> str:
    """Scenario prompt with the persona always in the Expanded format."""
    bfi2 = bfi2 or bundled_scale("bfi2")
    scenarios = scenarios or load_scenarios()
    if battery not in scenarios:
        raise PersonaError(f"unknown battery {battery!r}")
    expanded = PersonaProfile(profile.agent_id, profile.bfi2, PromptFormat.EXPANDED)
    persona = "\n".join(persona_lines(expanded, bfi2, table))
    blocks = "\n\n".join(
        f"### Scenario {n} ###\nScenario Name: {sc.name}\n{sc.text}"
        for n, sc in enumerate(scenarios[battery], start=1)
    )
    return _template(f"scenarios_{battery}.txt").substitute(persona=persona, scenarios=blocks)
