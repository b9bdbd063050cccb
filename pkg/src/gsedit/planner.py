"""Instruction planning: decompose an open-set edit request into an ordered
plan of atomic tasks.

The pipeline is ground -> segment -> order. The default rule backend is a
deterministic verb/pattern lexicon; a remote LLM backend can ground abstract
phrasing through the ``POST /plan`` wire contract. Ordering builds dependency
edges (a task whose subject mentions a noun another task introduces must run
later) and breaks ties by a fixed complexity ranking.
"""

from __future__ import annotations

import enum
import heapq
import json
import os
import re
from dataclasses import dataclass, field as dc_field

from .errors import (
    CyclicDependency,
    EmptyInstruction,
    MalformedResponse,
    NeedsLLM,
    UnclassifiableClause,
)
from . import transport

PLAN_VERSION = 1


class TaskCategory(enum.Enum):
    COLOR_ADJUSTMENT = "ColorAdjustment"
    TEXTURE_REPLACEMENT = "TextureReplacement"
    MATERIAL_PROPERTIES = "MaterialProperties"
    LOCAL_GEOMETRY_MODIFICATION = "LocalGeometryModification"
    CATEGORY_SWAPPING = "CategorySwapping"
    STYLE_TRANSFER = "StyleTransfer"
    BACKGROUND_EDITING = "BackgroundEditing"


# Higher-priority (harder) tasks run first within a dependency layer.
COMPLEXITY_RANK = {
    TaskCategory.CATEGORY_SWAPPING: 0,
    TaskCategory.LOCAL_GEOMETRY_MODIFICATION: 1,
    TaskCategory.TEXTURE_REPLACEMENT: 2,
    TaskCategory.MATERIAL_PROPERTIES: 2,
    TaskCategory.COLOR_ADJUSTMENT: 2,
    TaskCategory.BACKGROUND_EDITING: 3,
    TaskCategory.STYLE_TRANSFER: 4,
}


@dataclass
class AtomicTask:
    category: TaskCategory
    prompt: str
    subject: str = ""
    introduces: str | None = None
    order: int = -1
    complexity_rank: int = -1

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValueError("task prompt must be non-empty")
        if self.complexity_rank < 0:
            self.complexity_rank = COMPLEXITY_RANK[self.category]


@dataclass
class EditPlan:
    tasks: list[AtomicTask]
    provenance: dict = dc_field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)


# -- lexicon -------------------------------------------------------------------

IMPERATIVE_VERBS = {
    "turn", "make", "repaint", "paint", "replace", "change", "add", "give",
    "convert", "set", "put", "transform", "recolor", "colour", "color", "dye",
    "swap", "attach",
}

COLOR_WORDS = (
    "red|green|blue|white|black|yellow|orange|purple|pink|brown|gray|grey|"
    "cyan|magenta|violet|turquoise|golden|beige|crimson|teal"
)

MATERIAL_WORDS = (
    "metal|metallic|wood|wooden|marble|glass|plastic|stone|gold|silver|steel|"
    "fabric|leather|brick|concrete|ceramic|rubber|chrome|copper"
)

_ARTICLES = ("the ", "a ", "an ")


def strip_article(phrase: str) -> str:
    p = phrase.strip().lower()
    for art in _ARTICLES:
        if p.startswith(art):
            p = p[len(art):]
            break
    return p.strip()


def _subject_tokens(phrase: str) -> set[str]:
    tokens = set()
    for tok in re.split(r"[\s,]+", strip_article(phrase)):
        tok = tok.strip(".!?,;:'\"").lower()
        # possessive forms count as mentions of the bare noun
        tok = re.sub(r"(?:'s|’s)$", "", tok)
        if tok:
            tokens.add(tok)
    return tokens


def _mentions(subject: str, noun: str | None) -> bool:
    if not noun:
        return False
    noun = strip_article(noun)
    if strip_article(subject) == noun:
        return True
    return noun in _subject_tokens(subject)


_SENTENCE_BOUNDARY = re.compile(r"[.!?;]+")
_CLAUSE_DELIM = re.compile(r"(,|\band\b|\bthen\b)", flags=re.IGNORECASE)


def _split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_BOUNDARY.split(text) if s.strip()]


def _first_word(text: str) -> str:
    words = text.split()
    return words[0].strip(",.!?;:").lower() if words else ""


def _split_clauses(sentence: str) -> list[str]:
    """Split on comma/and/then only when the next chunk starts an imperative
    clause, so noun phrases like "black and white" survive intact."""
    pieces = _CLAUSE_DELIM.split(sentence)
    clauses: list[str] = []
    current = ""
    pending = ""
    for piece in pieces:
        stripped = piece.strip()
        if stripped == "," or stripped.lower() in ("and", "then"):
            pending += piece
            continue
        if not stripped:
            continue
        if current and _first_word(stripped) in IMPERATIVE_VERBS:
            clauses.append(" ".join(current.split()))
            current = piece
        elif current:
            current = current + pending + piece
        else:
            current = piece
        pending = ""
    if current.strip():
        clauses.append(" ".join(current.split()))
    return clauses


def _classify(clause: str) -> AtomicTask:
    """Map one imperative clause onto a task category via the pattern lexicon."""
    text = clause.strip().rstrip(".")
    low = text.lower()

    if re.search(r"\bstyle\b", low):
        m = re.search(
            r"(?:turn|change|convert|make)\s+(?:the\s+)?(.+?)\s+(?:in)?to\b", low)
        subject = strip_article(m.group(1)) if m else "scene"
        return AtomicTask(TaskCategory.STYLE_TRANSFER, text, subject=subject)

    if re.search(r"\bbackground\b", low):
        m = re.search(r"background\s+(?:in)?to\s+(?:a\s+|an\s+|the\s+)?(.+)$", low)
        return AtomicTask(TaskCategory.BACKGROUND_EDITING, text,
                          subject="background",
                          introduces=strip_article(m.group(1)) if m else None)

    m = re.search(
        r"change\s+(?:(?:the\s+)?(.+?)\s+)?from\s+(\w+)\s+to\s+(\w+)", low)
    if m and re.fullmatch(MATERIAL_WORDS, m.group(3)):
        return AtomicTask(TaskCategory.MATERIAL_PROPERTIES, text,
                          subject=strip_article(m.group(1) or ""))

    m = re.search(
        r"(?:turn|convert|change|transform|swap)\s+(?:the\s+)?(.+?)\s+(?:in)?to\s+(?:a|an)\s+(.+)$",
        low)
    if m:
        return AtomicTask(TaskCategory.CATEGORY_SWAPPING, text,
                          subject=strip_article(m.group(1)),
                          introduces=strip_article(m.group(2)))

    m = re.search(r"replace\s+(?:the\s+)?(.+?)\s+with\s+(?:a\s+|an\s+)?(.+)$", low)
    if m:
        return AtomicTask(TaskCategory.TEXTURE_REPLACEMENT, text,
                          subject=strip_article(m.group(1)))

    m = re.search(
        r"(?:add|attach|put)\s+(?:a\s+|an\s+|the\s+)?(.+?)\s+(?:to|on|onto)\s+(?:the\s+)?(.+)$",
        low)
    if m:
        return AtomicTask(TaskCategory.LOCAL_GEOMETRY_MODIFICATION, text,
                          subject=strip_article(m.group(2)),
                          introduces=strip_article(m.group(1)))
    m = re.search(r"give\s+(?:the\s+)?(.+?)\s+(?:a\s+|an\s+|the\s+)?(.+)$", low)
    if m:
        introduced = re.sub(r"^pair\s+of\s+", "", strip_article(m.group(2)))
        return AtomicTask(TaskCategory.LOCAL_GEOMETRY_MODIFICATION, text,
                          subject=strip_article(m.group(1)),
                          introduces=introduced)

    m = re.search(
        rf"(?:repaint|paint|make|turn|recolor|color|colour|dye)\s+(?:the\s+)?(.+?)\s+(?:{COLOR_WORDS})$",
        low)
    if m:
        return AtomicTask(TaskCategory.COLOR_ADJUSTMENT, text,
                          subject=strip_article(m.group(1)))

    m = re.search(rf"make\s+(?:the\s+)?(.+?)\s+(?:{MATERIAL_WORDS})$", low)
    if m:
        return AtomicTask(TaskCategory.MATERIAL_PROPERTIES, text,
                          subject=strip_article(m.group(1)))

    raise UnclassifiableClause(f"no lexicon pattern matches: {clause!r}")


# -- backends ------------------------------------------------------------------

class RuleBackend:
    """Deterministic grounding: imperative text passes through unchanged;
    anything else is rejected for an LLM to handle."""

    name = "rule"

    def ground(self, instruction: str) -> str:
        for sentence in _split_sentences(instruction):
            if _first_word(sentence) not in IMPERATIVE_VERBS:
                raise NeedsLLM(
                    f"cannot ground non-imperative sentence: {sentence!r}")
        return instruction

    def tasks(self, grounded: str) -> list[AtomicTask]:
        return segment(grounded)


class LLMBackend:
    """Remote grounding/segmentation through the POST /plan contract."""

    name = "llm"

    def __init__(self, endpoint: str, timeout: float = transport.DEFAULT_TIMEOUT,
                 retries: int = transport.DEFAULT_RETRIES,
                 backoff: float = transport.DEFAULT_BACKOFF):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def _call(self, instruction: str) -> dict:
        doc = transport.post_json(
            f"{self.endpoint}/plan",
            {"instruction": instruction, "schema_version": PLAN_VERSION},
            timeout=self.timeout, retries=self.retries, backoff=self.backoff)
        return _validate_plan_response(doc)

    def ground(self, instruction: str) -> str:
        return " ".join(self._call(instruction)["grounded"])

    def tasks(self, instruction_or_grounded: str) -> list[AtomicTask]:
        doc = self._call(instruction_or_grounded)
        return [
            AtomicTask(category=TaskCategory(t["category"]), prompt=t["prompt"],
                       subject=t.get("subject", ""),
                       introduces=t.get("introduces"))
            for t in doc["tasks"]
        ]


def _validate_plan_response(doc) -> dict:
    """All-or-nothing schema check; invalid payloads never yield partial plans."""
    if not isinstance(doc, dict):
        raise MalformedResponse("plan response must be a JSON object")
    grounded = doc.get("grounded")
    tasks = doc.get("tasks")
    if not isinstance(grounded, list) or not all(isinstance(s, str) for s in grounded):
        raise MalformedResponse("plan response field 'grounded' must be a string list")
    if not isinstance(tasks, list) or not tasks:
        raise MalformedResponse("plan response field 'tasks' must be a non-empty list")
    valid = {c.value for c in TaskCategory}
    for t in tasks:
        if not isinstance(t, dict):
            raise MalformedResponse("each task must be an object")
        if t.get("category") not in valid:
            raise MalformedResponse(f"unknown task category {t.get('category')!r}")
        if not isinstance(t.get("prompt"), str) or not t["prompt"].strip():
            raise MalformedResponse("task prompt must be a non-empty string")
        if t.get("introduces") is not None and not isinstance(t["introduces"], str):
            raise MalformedResponse("task 'introduces' must be a string or null")
    return doc


# -- operations ------------------------------------------------------------------

def ground(instruction: str, backend=None) -> str:
    if not instruction or not instruction.strip():
        raise EmptyInstruction("instruction is empty")
    backend = backend or RuleBackend()
    return backend.ground(instruction)


def segment(grounded: str) -> list[AtomicTask]:
    """Split grounded imperative text into unordered atomic tasks."""
    tasks: list[AtomicTask] = []
    for sentence in _split_sentences(grounded):
        for clause in _split_clauses(sentence):
            tasks.append(_classify(clause))
    if not tasks:
        raise UnclassifiableClause("no clauses found")
    return tasks


def dependency_edges(tasks: list[AtomicTask]) -> list[tuple[int, int]]:
    """(a, b) edges meaning task b must run after task a."""
    edges = []
    for i, a in enumerate(tasks):
        for j, b in enumerate(tasks):
            if i != j and _mentions(b.subject, a.introduces):
                edges.append((i, j))
    return edges


def order(tasks: list[AtomicTask], provenance: dict | None = None) -> EditPlan:
    """Topological order over dependency edges; within a layer, harder
    categories first (fixed complexity ranking), input order for ties."""
    if not tasks:
        raise ValueError("cannot order an empty task list")
    edges = dependency_edges(tasks)
    indeg = [0] * len(tasks)
    adj: list[list[int]] = [[] for _ in tasks]
    for a, b in edges:
        adj[a].append(b)
        indeg[b] += 1
    ready = [(tasks[i].complexity_rank, i) for i in range(len(tasks)) if indeg[i] == 0]
    heapq.heapify(ready)
    sequence: list[AtomicTask] = []
    while ready:
        _, i = heapq.heappop(ready)
        sequence.append(tasks[i])
        for j in adj[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, (tasks[j].complexity_rank, j))
    if len(sequence) != len(tasks):
        raise CyclicDependency("task dependencies contain a cycle")
    ordered = [
        AtomicTask(category=t.category, prompt=t.prompt, subject=t.subject,
                   introduces=t.introduces, order=k,
                   complexity_rank=t.complexity_rank)
        for k, t in enumerate(sequence)
    ]
    return EditPlan(tasks=ordered, provenance=provenance or {})


def decompose(instruction: str, backend=None) -> EditPlan:
    """Full pipeline. The rule backend composes order(segment(ground(...)));
    the LLM backend supplies grounded text and tasks per the wire contract,
    then the same deterministic ordering is applied."""
    if not instruction or not instruction.strip():
        raise EmptyInstruction("instruction is empty")
    backend = backend or RuleBackend()
    grounded = backend.ground(instruction)
    if isinstance(backend, LLMBackend):
        tasks = backend.tasks(instruction)
    else:
        tasks = segment(grounded)
    return order(tasks, provenance={
        "backend": backend.name,
        "raw_instruction": instruction,
        "grounded_text": grounded,
    })


# -- plan file -------------------------------------------------------------------

def plan_to_dict(plan: EditPlan) -> dict:
    return {
        "version": PLAN_VERSION,
        "raw_instruction": plan.provenance.get("raw_instruction", ""),
        "grounded_text": plan.provenance.get("grounded_text", ""),
        "backend": plan.provenance.get("backend", ""),
        "tasks": [
            {
                "category": t.category.value,
                "prompt": t.prompt,
                "subject": t.subject,
                "introduces": t.introduces,
                "order": t.order,
            }
            for t in plan.tasks
        ],
    }


def plan_from_dict(doc: dict) -> EditPlan:
    if doc.get("version") != PLAN_VERSION:
        raise ValueError(f"unsupported plan version {doc.get('version')}")
    tasks = [
        AtomicTask(category=TaskCategory(t["category"]), prompt=t["prompt"],
                   subject=t.get("subject", ""), introduces=t.get("introduces"),
                   order=int(t["order"]))
        for t in sorted(doc["tasks"], key=lambda t: t["order"])
    ]
    return EditPlan(tasks=tasks, provenance={
        "backend": doc.get("backend", ""),
        "raw_instruction": doc.get("raw_instruction", ""),
        "grounded_text": doc.get("grounded_text", ""),
    })


def save_plan(path: str | os.PathLike, plan: EditPlan) -> None:
    with open(path, "w") as f:
        json.dump(plan_to_dict(plan), f, indent=1)
        f.write("\n")


def load_plan(path: str | os.PathLike) -> EditPlan:
    with open(path) as f:
        return plan_from_dict(json.load(f))
