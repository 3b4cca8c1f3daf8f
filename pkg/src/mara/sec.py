"""Self-reflective evidence controller.

The controller walks a sliding window over the ranked candidates. At each
step the generator judges whether window + memory is enough to answer:

* ``Sufficient``: generate the answer from window + memory and stop.
* ``Partially Sufficient``: ask which passages to keep, append them to the
  memory (oldest evicted beyond capacity), advance the window.
* ``Insufficient``: advance the window.

When every window is used up the answer comes from memory alone, or the
controller abstains if memory is empty.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from mara.errors import (
    EmptyInput,
    InvalidConfig,
    InvalidInput,
    MissingBinding,
    ProviderError,
    SessionAborted,
    UnparseableSignal,
)
from mara.providers import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, GenerationRequest, digest

log = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).with_name("templates")
TEMPLATE_IDS = ("sufficiency", "feedback", "memory_update", "answer", "judge")
_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


# -- templates ---------------------------------------------------------------

def load_template(template_id: str, template_dir=None) -> str:
    if template_id not in TEMPLATE_IDS:
        raise InvalidInput(f"unknown template {template_id!r}")
    path = Path(template_dir or TEMPLATE_DIR) / f"{template_id}.txt"
    text = path.read_text(encoding="utf-8")
    # files end with one newline for editors; it is not part of the prompt
    return text[:-1] if text.endswith("\n") else text


def placeholders(template: str) -> list[str]:
    return list(dict.fromkeys(_PLACEHOLDER.findall(template)))


def render(template: str, bindings: Mapping[str, str]) -> str:
    """Substitute ``{name}`` placeholders in one pass; bound values are not re-scanned."""
    for name in placeholders(template):
        if name not in bindings:
            raise MissingBinding(name)
    return _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template)


def render_prompt(template_id: str, bindings: Mapping[str, str], template_dir=None) -> str:
    return render(load_template(template_id, template_dir), bindings)


# -- signals -----------------------------------------------------------------

class SufficiencySignal(enum.Enum):
    SUFFICIENT = "Sufficient"
    PARTIALLY_SUFFICIENT = "Partially Sufficient"
    INSUFFICIENT = "Insufficient"

    def __str__(self):
        return self.value


def match_signal(text: str) -> SufficiencySignal | None:
    norm = " ".join(text.lower().split())
    # "insufficient" and "partially sufficient" both contain "sufficient"
    if "partially sufficient" in norm:
        return SufficiencySignal.PARTIALLY_SUFFICIENT
    if "insufficient" in norm:
        return SufficiencySignal.INSUFFICIENT
    if "sufficient" in norm:
        return SufficiencySignal.SUFFICIENT
    return None


def parse_signal(text: str, strict: bool = False) -> SufficiencySignal:
    sig = match_signal(text)
    if sig is not None:
        return sig
    if strict:
        raise UnparseableSignal(f"no sufficiency signal in {text[:80]!r}")
    log.warning("unrecognised sufficiency response %r; treating as Insufficient", text[:80])
    return SufficiencySignal.INSUFFICIENT


# -- state -------------------------------------------------------------------

@dataclass(frozen=True)
class SecConfig:
    window_size: int = 3
    stride: int | None = None
    max_memory_entries: int = 5
    enable_feedback: bool = False
    strict_parse: bool = False
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.window_size)
        if self.window_size < 1:
            raise InvalidConfig("window_size must be >= 1")
        if self.stride < 1:
            raise InvalidConfig("stride must be >= 1")
        if self.max_memory_entries < 1:
            raise InvalidConfig("max_memory_entries must be >= 1")
        if self.max_tokens < 1 or self.temperature < 0:
            raise InvalidConfig("max_tokens must be >= 1 and temperature >= 0")

    def to_dict(self) -> dict:
        return {"window_size": self.window_size, "stride": self.stride,
                "max_memory_entries": self.max_memory_entries,
                "enable_feedback": self.enable_feedback, "strict_parse": self.strict_parse,
                "max_tokens": self.max_tokens, "temperature": self.temperature}


@dataclass(frozen=True)
class MemoryEntry:
    source: str
    text: str
    step: int

    def __post_init__(self):
        if not self.text:
            raise InvalidInput("memory entries need non-empty text")


@dataclass
class SecSession:
    query: str
    candidates: list[str]
    window_start: int = 0
    memory: list[MemoryEntry] = field(default_factory=list)
    generator_calls: int = 0
    sufficiency_calls: int = 0
    steps: int = 0
    signals: list[SufficiencySignal] = field(default_factory=list)
    feedback_log: list[str] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    pending_feedback: str | None = None
    answer: str | None = None
    answered_from: str | None = None
    finished: bool = False

    @property
    def exhausted(self) -> bool:
        return self.window_start >= len(self.candidates)


@dataclass(frozen=True)
class Transition:
    step: int
    window: tuple[str, ...]
    signal: SufficiencySignal
    memory_size: int
    calls: int
    halted: bool


@dataclass(frozen=True)
class SecOutcome:
    kind: str                      # "answer" or "abstain"
    answer: str | None
    calls_made: int
    sufficiency_calls: int
    memory: tuple[MemoryEntry, ...]
    signals: tuple[SufficiencySignal, ...]
    answered_from: str | None      # "window", "memory" or None
    transcript: tuple[dict, ...] = field(default=(), repr=False)
    memory_trajectory: tuple[int, ...] = ()

    @property
    def abstained(self) -> bool:
        return self.kind == "abstain"

    def to_dict(self, transcript: bool = False) -> dict:
        d = {
            "result": self.kind,
            "answer": self.answer,
            "answered_from": self.answered_from,
            "calls_made": self.calls_made,
            "sufficiency_calls": self.sufficiency_calls,
            "signals": [s.value for s in self.signals],
            "memory": [{"source": e.source, "text": e.text, "step": e.step} for e in self.memory],
        }
        if transcript:
            d["transcript"] = list(self.transcript)
        return d


# -- controller --------------------------------------------------------------

def _one_line(text: str) -> str:
    return " ".join(str(text).split())


class EvidenceController:
    """Runs the sliding-window loop for one query.

    ``passages`` maps a doc id to the text shown to the generator; ``attachments``
    maps a doc id to payload refs sent alongside (image pages).
    """

    def __init__(self, generator, config: SecConfig | None = None,
                 passages: Mapping[str, str] | Callable[[str], str] | None = None,
                 attachments: Callable[[str], Sequence[str]] | None = None,
                 template_dir=None):
        self.generator = generator
        self.config = config or SecConfig()
        self._passages = passages
        self._attachments = attachments
        self.templates = {t: load_template(t, template_dir) for t in ("sufficiency", "feedback",
                                                                       "memory_update", "answer")}

    def passage(self, doc_id: str) -> str:
        p = self._passages
        if p is None:
            return f"(document {doc_id})"
        text = p(doc_id) if callable(p) else p.get(doc_id)
        return _one_line(text) if text else f"(document {doc_id})"

    def _format(self, docs: Iterable[str], memory: Iterable[MemoryEntry], feedback: str | None = None) -> str:
        lines = []
        if feedback:
            lines.append(f"[feedback] {_one_line(feedback)}")
        lines += [f"[passage {d}] {self.passage(d)}" for d in docs]
        lines += [f"[memory {e.source}] {_one_line(e.text)}" for e in memory]
        return "\n".join(lines)

    def _call(self, session: SecSession, role: str, template_id: str, prompt: str,
              attachments=(), signal: SufficiencySignal | None = None) -> str:
        request = GenerationRequest(prompt, tuple(attachments), self.config.max_tokens, self.config.temperature)
        try:
            response = self.generator.generate(request)
        except ProviderError as exc:
            raise SessionAborted(session, exc) from exc
        session.generator_calls += 1
        session.transcript.append({
            "step": session.steps,
            "role": role,
            "template_id": template_id,
            "prompt_digest": digest(prompt),
            "response": response,
            "parsed_signal": None,
        })
        return response

    def _window_attachments(self, docs):
        if self._attachments is None:
            return ()
        return tuple(ref for d in docs for ref in self._attachments(d))

    def start(self, query: str, candidates: Sequence) -> SecSession:
        ids = [c if isinstance(c, str) else c.doc_id for c in candidates]
        if not ids:
            raise InvalidInput("the controller needs at least one candidate")
        return SecSession(query=query, candidates=ids)

    def step(self, session: SecSession) -> Transition:
        if session.finished or session.exhausted:
            raise InvalidInput("session has no window left to examine")
        cfg = self.config
        session.steps += 1
        calls_before = session.generator_calls
        start = session.window_start
        window = session.candidates[start:start + cfg.window_size]
        attachments = self._window_attachments(window)
        context = self._format(window, session.memory, session.pending_feedback)
        session.pending_feedback = None

        prompt = render(self.templates["sufficiency"],
                        {"user_question": session.query, "retrieved_passages": context})
        response = self._call(session, "sufficiency", "sufficiency", prompt, attachments)
        session.sufficiency_calls += 1
        sig = match_signal(response)
        if sig is None:
            sig = parse_signal(response, strict=cfg.strict_parse)
            session.warnings.append(f"step {session.steps}: unrecognised signal {response[:80]!r}")
        session.transcript[-1]["parsed_signal"] = sig.value
        session.signals.append(sig)

        if sig is SufficiencySignal.SUFFICIENT:
            prompt = render(self.templates["answer"],
                            {"user_question": session.query,
                             "retrieved_passages": self._format(window, session.memory)})
            session.answer = self._call(session, "answer", "answer", prompt, attachments)
            session.answered_from = "window"
            session.finished = True
            return Transition(session.steps, tuple(window), sig, len(session.memory),
                              session.generator_calls - calls_before, True)

        if cfg.enable_feedback:
            prompt = render(self.templates["feedback"],
                            {"user_question": session.query,
                             "retrieved_passages": self._format(window, session.memory),
                             "previous_sufficiency_result": sig.value})
            trace = self._call(session, "feedback", "feedback", prompt, attachments)
            session.feedback_log.append(trace)
            session.pending_feedback = trace

        if sig is SufficiencySignal.PARTIALLY_SUFFICIENT:
            current = "\n".join(f"[memory {e.source}] {_one_line(e.text)}" for e in session.memory)
            prompt = render(self.templates["memory_update"],
                            {"user_question": session.query, "current_memory": current,
                             "retrieved_passages": self._format(window, ())})
            response = self._call(session, "memory_update", "memory_update", prompt, attachments)
            for source, text in parse_keep_list(response, window, self.passage):
                session.memory.append(MemoryEntry(source, text, session.steps))
            overflow = len(session.memory) - cfg.max_memory_entries
            if overflow > 0:
                del session.memory[:overflow]

        session.window_start = min(len(session.candidates), start + cfg.stride)
        return Transition(session.steps, tuple(window), sig, len(session.memory),
                          session.generator_calls - calls_before, False)

    def finish(self, session: SecSession) -> None:
        """Answer from memory alone once every window is used, or leave the session abstained."""
        if session.finished:
            return
        session.finished = True
        if session.memory:
            prompt = render(self.templates["answer"],
                            {"user_question": session.query,
                             "retrieved_passages": self._format((), session.memory)})
            session.steps += 1
            session.answer = self._call(session, "fallback_answer", "answer", prompt)
            session.answered_from = "memory"

    def run(self, query: str, candidates: Sequence) -> SecOutcome:
        session = self.start(query, candidates)
        trajectory = []
        while not session.finished and not session.exhausted:
            self.step(session)
            trajectory.append(len(session.memory))
        self.finish(session)
        return outcome_of(session, tuple(trajectory))


def outcome_of(session: SecSession, trajectory: tuple[int, ...] = ()) -> SecOutcome:
    kind = "answer" if session.answer is not None else "abstain"
    return SecOutcome(kind, session.answer, session.generator_calls, session.sufficiency_calls,
                      tuple(session.memory), tuple(session.signals), session.answered_from,
                      tuple(session.transcript), trajectory)


def run(query: str, candidates: Sequence, generator, config: SecConfig | None = None,
        passages=None, attachments=None, template_dir=None) -> SecOutcome:
    return EvidenceController(generator, config, passages, attachments, template_dir).run(query, candidates)


def step(session: SecSession, generator, config: SecConfig | None = None, passages=None) -> Transition:
    return EvidenceController(generator, config, passages).step(session)


_KEEP_RE = re.compile(r"keep in memory\W*?:", re.IGNORECASE)
_REMOVE_RE = re.compile(r"[-*\s]*\**\s*remove from memory", re.IGNORECASE)
_NONE_ITEMS = {"", "none", "n/a", "nothing", "[]"}


def parse_keep_list(response: str, window: Sequence[str], passage=None) -> list[tuple[str, str]]:
    """Extract ``(source_doc_id, text)`` pairs from the "Keep in Memory" section.

    Items naming a window document (``passage d1``, ``d1``, or a 1-based
    position) resolve to that document's passage; anything else is kept as
    free text with source ``"unattributed"``.
    """
    m = _KEEP_RE.search(response)
    if m is None:
        return []
    body = response[m.end():]
    stop = _REMOVE_RE.search(body)
    if stop is not None:
        body = body[:stop.start()]
    body = body.replace("**", "")
    items = []
    for chunk in re.split(r"[,\n;]", body):
        item = chunk.strip().strip("-*•").strip().strip("[]").strip().strip("\"'`").strip()
        if item.lower() in _NONE_ITEMS:
            continue
        items.append(item)

    out = []
    seen = set()
    for item in items:
        name = re.sub(r"^(passage|document|doc)\s+", "", item, flags=re.IGNORECASE).strip()
        doc = None
        if name in window:
            doc = name
        elif name.isdigit() and 1 <= int(name) <= len(window) and name not in window:
            doc = window[int(name) - 1]
        if doc is not None:
            if doc in seen:
                continue
            seen.add(doc)
            text = passage(doc) if passage is not None else f"(document {doc})"
            out.append((doc, text))
        else:
            out.append(("unattributed", item))
    return out


# -- statistics --------------------------------------------------------------

def call_stats(outcomes: Sequence) -> dict:
    """Per-query controller call statistics.

    ``total_calls``/``avg_calls`` count sufficiency calls (one per window
    examined); ``total_generator_calls``/``avg_generator_calls`` count every
    generator call including answers, feedback and memory updates.
    """
    if not outcomes:
        raise EmptyInput("call_stats needs at least one outcome")
    suff = total = 0
    for o in outcomes:
        if isinstance(o, int):
            suff += o
            total += o
        else:
            suff += o.sufficiency_calls
            total += o.calls_made
    n = len(outcomes)
    return {
        "total_calls": suff,
        "queries": n,
        "avg_calls": round(suff / n, 2),
        "total_generator_calls": total,
        "avg_generator_calls": round(total / n, 2),
    }


def transcript_lines(outcome_or_session) -> str:
    rows = outcome_or_session.transcript
    return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows)


def max_sufficiency_calls(k: int, stride: int) -> int:
    return math.ceil(k / stride)
