"""Core domain types: documents with stable sentence identifiers, conversations
with per-turn generation traces, and the algorithm presets that drive the
engine.

All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence


class EmptyDocumentError(ValueError):
    """Raised when a document has no text after whitespace trimming."""


class Speaker(str, Enum):
    USER = "user"
    AGENT = "agent"


class Answerability(str, Enum):
    ANSWERABLE = "answerable"
    UNANSWERABLE = "unanswerable"


class RestrictionMode(str, Enum):
    ONLY_SELECTED = "only_selected"
    MARKED = "marked"


class TransitionSequence(str, Enum):
    UU_AU = "uu-au"
    UU_AC_AU = "uu-ac-au"
    UU_AC_SS_AU = "uu-ac-ss-au"

    @property
    def states(self) -> tuple[str, ...]:
        return tuple(self.value.split("-"))


#: The only turn shapes the engine may produce: straight generation,
#: generation gated by an answerability check, and the full four-stage path.
LEGAL_TRANSITIONS: frozenset[tuple[str, ...]] = frozenset(
    {("uu", "au"), ("uu", "ac", "au"), ("uu", "ac", "ss", "au")}
)

DEFAULT_NO_ANSWER_TEXT = "CANNOTANSWER"

#: Delimiters for marked-mode restricted documents; chosen to be unlikely in
#: encyclopedic text. Overridable via restrict_document().
DEFAULT_MARKERS = ("[[", "]]")


@dataclass(frozen=True)
class Sentence:
    sentence_id: int
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class Document:
    """A grounding passage with a stable, deterministic sentence segmentation.

    Invariants (checked on construction): sentence ids are contiguous from 0,
    spans are in increasing order with only whitespace between them, and each
    span's slice of ``text`` equals the sentence's own text.
    """

    id: str
    title: str
    text: str
    sentences: tuple[Sentence, ...]

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise EmptyDocumentError("document text is empty")
        if not self.sentences:
            raise ValueError("document has no sentences")
        prev_end = 0
        for i, s in enumerate(self.sentences):
            if s.sentence_id != i:
                raise ValueError(f"sentence ids not contiguous at index {i}")
            if s.start < prev_end:
                raise ValueError(f"sentence {i} overlaps or is out of order")
            gap = self.text[prev_end : s.start]
            if gap and not gap.isspace():
                raise ValueError(f"non-whitespace gap before sentence {i}: {gap!r}")
            if self.text[s.start : s.end] != s.text:
                raise ValueError(f"sentence {i} text does not match its span")
            if not s.text.strip():
                raise ValueError(f"sentence {i} is blank")
            prev_end = s.end
        tail = self.text[prev_end:]
        if tail and not tail.isspace():
            raise ValueError(f"trailing non-whitespace text after last span: {tail!r}")

    @property
    def sentence_ids(self) -> frozenset[int]:
        return frozenset(range(len(self.sentences)))

    def sentence_texts(self) -> tuple[str, ...]:
        return tuple(s.text for s in self.sentences)


@dataclass(frozen=True)
class RestrictedDocument:
    """A view of a document narrowed to selected sentences.

    ``only_selected`` renders exactly the selected sentences in original
    order; ``marked`` renders the full text with markers delimiting each
    selected sentence.
    """

    source_id: str
    mode: RestrictionMode
    selected_ids: frozenset[int]
    rendered_text: str


def restrict_document(
    doc: Document,
    selected_ids: Iterable[int],
    mode: RestrictionMode,
    markers: tuple[str, str] = DEFAULT_MARKERS,
) -> RestrictedDocument:
    selected = frozenset(selected_ids)
    unknown = selected - doc.sentence_ids
    if unknown:
        raise ValueError(f"selected ids not in document: {sorted(unknown)}")
    if mode is RestrictionMode.ONLY_SELECTED:
        kept = [s.text for s in doc.sentences if s.sentence_id in selected]
        rendered = " ".join(kept)
    else:
        open_m, close_m = markers
        parts: list[str] = []
        prev_end = 0
        for s in doc.sentences:
            parts.append(doc.text[prev_end : s.start])
            if s.sentence_id in selected:
                parts.append(f"{open_m}{s.text}{close_m}")
            else:
                parts.append(s.text)
            prev_end = s.end
        parts.append(doc.text[prev_end:])
        rendered = "".join(parts)
    return RestrictedDocument(
        source_id=doc.id, mode=mode, selected_ids=selected, rendered_text=rendered
    )


@dataclass(frozen=True)
class Utterance:
    speaker: Speaker
    text: str
    turn_index: int


@dataclass(frozen=True)
class StateExchange:
    """One raw prompt/completion round-trip within a turn."""

    state: str
    prompt_text: str
    completion_text: str
    decoding_used: str


@dataclass(frozen=True)
class Anomaly:
    """A recoverable oddity observed during generation (never raised)."""

    kind: str
    state: str
    detail: str


@dataclass(frozen=True)
class TurnTrace:
    algorithm_id: str
    transitions: tuple[str, ...]
    answerability: Answerability | None = None
    selected_sentence_ids: frozenset[int] | None = None
    raw_exchanges: tuple[StateExchange, ...] = ()
    errors: tuple[Anomaly, ...] = ()


@dataclass(frozen=True)
class Conversation:
    document_id: str
    utterances: tuple[Utterance, ...]
    traces: tuple[TurnTrace, ...] = ()

    @property
    def n_pairs(self) -> int:
        return len(self.utterances) // 2

    def pairs(self) -> list[tuple[Utterance, Utterance]]:
        return [
            (self.utterances[2 * i], self.utterances[2 * i + 1])
            for i in range(self.n_pairs)
        ]


@dataclass(frozen=True)
class AlgorithmSpec:
    """One generation algorithm: a transition sequence plus which of the
    classification-like states run on the assistant backend instead of the
    generator."""

    id: str
    sequence: TransitionSequence
    assistant_states: frozenset[str] = frozenset()
    restriction_mode: RestrictionMode = RestrictionMode.ONLY_SELECTED
    no_answer_text: str = DEFAULT_NO_ANSWER_TEXT

    def __post_init__(self) -> None:
        extra = self.assistant_states - {"ac", "ss"}
        if extra:
            raise ValueError(f"assistant_states may only contain ac/ss: {sorted(extra)}")
        missing = self.assistant_states - set(self.sequence.states)
        if missing:
            raise ValueError(
                f"assistant_states {sorted(missing)} not present in sequence {self.sequence.value}"
            )
        if not self.no_answer_text:
            raise ValueError("no_answer_text must be non-empty")


#: The five shipped presets, one per published configuration: the plain
#: two-state generator, the answerability-gated variants with and without an
#: assistant, and the sentence-selection variants with and without one.
ALGORITHM_PRESETS: dict[str, AlgorithmSpec] = {
    spec.id: spec
    for spec in (
        AlgorithmSpec(id="uu-au", sequence=TransitionSequence.UU_AU),
        AlgorithmSpec(id="uu-ac-au", sequence=TransitionSequence.UU_AC_AU),
        AlgorithmSpec(
            id="uu-ac-au+assistant",
            sequence=TransitionSequence.UU_AC_AU,
            assistant_states=frozenset({"ac"}),
        ),
        AlgorithmSpec(id="uu-ac-ss-au", sequence=TransitionSequence.UU_AC_SS_AU),
        AlgorithmSpec(
            id="uu-ac-ss-au+assistant",
            sequence=TransitionSequence.UU_AC_SS_AU,
            assistant_states=frozenset({"ac", "ss"}),
        ),
    )
}


# ---------------------------------------------------------------------------
# Sentence segmentation
# ---------------------------------------------------------------------------

_TERMINATORS = frozenset(".!?")
_CLOSERS = frozenset("\"')]”’")

#: Tokens (lowercased, no trailing period) that block a sentence break after
#: a period. Fixed and shipped so segmentation is reproducible.
ABBREVIATIONS: frozenset[str] = frozenset(
    {
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "rev",
        "gen", "sen", "rep", "gov", "capt", "sgt", "col", "lt", "maj",
        "cmdr", "adm", "hon", "fr", "messrs", "mme", "mlle",
        "etc", "vs", "cf", "al", "eg", "ie", "e.g", "i.e", "a.m", "p.m",
        "fig", "figs", "vol", "vols", "ch", "sec", "dept", "univ",
        "assn", "inc", "ltd", "co", "corp", "est", "approx",
    }
)


def _abbreviation_before(text: str, period_index: int) -> bool:
    j = period_index
    while j > 0 and (text[j - 1].isalnum() or text[j - 1] == "."):
        j -= 1
    token = text[j:period_index].lstrip(".").lower()
    return token in ABBREVIATIONS


def _sentence_breaks(text: str) -> list[tuple[int, int]]:
    """Return (end_of_sentence, start_of_next) index pairs.

    A break occurs after a terminator (plus any closing quotes/brackets)
    that is followed by whitespace and then a capital letter, unless the
    token before a lone period is a known abbreviation.
    """
    breaks: list[tuple[int, int]] = []
    n = len(text)
    i = 0
    while i < n:
        if text[i] not in _TERMINATORS:
            i += 1
            continue
        run_end = i
        while run_end + 1 < n and text[run_end + 1] in _TERMINATORS:
            run_end += 1
        end = run_end + 1
        while end < n and text[end] in _CLOSERS:
            end += 1
        if end < n and text[end].isspace():
            nxt = end
            while nxt < n and text[nxt].isspace():
                nxt += 1
            is_lone_period = text[i] == "." and run_end == i
            blocked = is_lone_period and _abbreviation_before(text, i)
            if nxt < n and text[nxt].isupper() and not blocked:
                breaks.append((end, nxt))
        i = run_end + 1
    return breaks


def segment_document(raw_title: str, raw_text: str, doc_id: str | None = None) -> Document:
    """Segment raw text into sentences with stable 0-based identifiers.

    Rule-based and deterministic: splits on ``. ! ?`` followed by whitespace
    and a capital letter, with a fixed abbreviation list. For pre-segmented
    input use :func:`document_from_sentences` instead.
    """
    text = raw_text.strip()
    if not text:
        raise EmptyDocumentError("document text is empty after trimming")
    title = raw_title.strip()
    if doc_id is None:
        digest = hashlib.sha1(f"{title}\n{text}".encode("utf-8")).hexdigest()
        doc_id = digest[:12]
    sentences: list[Sentence] = []
    start = 0
    for end, nxt in _sentence_breaks(text):
        sentences.append(
            Sentence(sentence_id=len(sentences), start=start, end=end, text=text[start:end])
        )
        start = nxt
    sentences.append(
        Sentence(sentence_id=len(sentences), start=start, end=len(text), text=text[start:])
    )
    return Document(id=doc_id, title=title, text=text, sentences=tuple(sentences))


def document_from_sentences(
    doc_id: str, title: str, sentence_texts: Sequence[str]
) -> Document:
    """Build a document from pre-segmented sentences (joined with single
    spaces), bypassing the rule-based splitter."""
    cleaned = [s.strip() for s in sentence_texts if s.strip()]
    if not cleaned:
        raise EmptyDocumentError("no non-blank sentences given")
    sentences: list[Sentence] = []
    pos = 0
    parts: list[str] = []
    for i, s in enumerate(cleaned):
        if i > 0:
            pos += 1
        sentences.append(Sentence(sentence_id=i, start=pos, end=pos + len(s), text=s))
        parts.append(s)
        pos += len(s)
    return Document(id=doc_id, title=title, text=" ".join(parts), sentences=tuple(sentences))


# ---------------------------------------------------------------------------
# Conversation validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    detail: str
    turn_index: int | None = None


def validate_conversation(
    conv: Conversation,
    doc: Document,
    no_answer_text: str = DEFAULT_NO_ANSWER_TEXT,
) -> list[Violation]:
    """Check every structural invariant of a conversation against its
    grounding document. Violations are returned as data, never raised."""
    out: list[Violation] = []
    if conv.document_id != doc.id:
        out.append(Violation("document_mismatch", f"{conv.document_id} != {doc.id}"))
    n = len(conv.utterances)
    if n % 2 != 0:
        out.append(Violation("odd_utterance_count", f"{n} utterances"))
    for i, utt in enumerate(conv.utterances):
        expected = Speaker.USER if i % 2 == 0 else Speaker.AGENT
        if utt.speaker is not expected:
            out.append(
                Violation("alternation", f"utterance {i} spoken by {utt.speaker.value}", i // 2)
            )
        if not utt.text.strip():
            out.append(Violation("empty_utterance", f"utterance {i} is blank", i // 2))
        if utt.turn_index != i // 2:
            out.append(
                Violation("turn_index", f"utterance {i} has turn_index {utt.turn_index}", i // 2)
            )
    if len(conv.traces) != n // 2:
        out.append(
            Violation("trace_count", f"{len(conv.traces)} traces for {n // 2} pairs")
        )
    for t_idx, trace in enumerate(conv.traces):
        if trace.transitions not in LEGAL_TRANSITIONS:
            out.append(
                Violation("illegal_transitions", str(list(trace.transitions)), t_idx)
            )
        has_ac = "ac" in trace.transitions
        if has_ac and trace.answerability is None:
            out.append(Violation("missing_answerability", "ac ran without a verdict", t_idx))
        if not has_ac and trace.answerability is not None:
            out.append(Violation("unexpected_answerability", "verdict without ac", t_idx))
        has_ss = "ss" in trace.transitions
        answerable = trace.answerability is Answerability.ANSWERABLE
        if has_ss and answerable and trace.selected_sentence_ids is None:
            out.append(Violation("missing_selection", "ss ran without selected ids", t_idx))
        if trace.selected_sentence_ids is not None and not (has_ss and answerable):
            out.append(Violation("unexpected_selection", "selected ids without ss", t_idx))
        if trace.selected_sentence_ids is not None:
            unknown = trace.selected_sentence_ids - doc.sentence_ids
            if unknown:
                out.append(
                    Violation("selection_out_of_range", str(sorted(unknown)), t_idx)
                )
        if trace.answerability is Answerability.UNANSWERABLE:
            agent_pos = 2 * t_idx + 1
            if agent_pos < n and conv.utterances[agent_pos].text != no_answer_text:
                out.append(
                    Violation(
                        "no_answer_contract",
                        f"agent text {conv.utterances[agent_pos].text!r} != {no_answer_text!r}",
                        t_idx,
                    )
                )
            late = [x.state for x in trace.raw_exchanges if x.state in ("ss", "au")]
            if late:
                out.append(
                    Violation("generation_after_unanswerable", ",".join(late), t_idx)
                )
    return out


# ---------------------------------------------------------------------------
# JSONL record schemas
# ---------------------------------------------------------------------------


def document_to_dict(doc: Document) -> dict:
    return {
        "id": doc.id,
        "title": doc.title,
        "text": doc.text,
        "sentences": [
            {"sentence_id": s.sentence_id, "span": [s.start, s.end], "text": s.text}
            for s in doc.sentences
        ],
    }


def document_from_dict(data: dict) -> Document:
    sentences = tuple(
        Sentence(
            sentence_id=s["sentence_id"],
            start=s["span"][0],
            end=s["span"][1],
            text=s["text"],
        )
        for s in data["sentences"]
    )
    return Document(
        id=data["id"], title=data["title"], text=data["text"], sentences=sentences
    )


def _trace_to_dict(trace: TurnTrace, keep_raw: bool) -> dict:
    out: dict = {
        "algorithm_id": trace.algorithm_id,
        "transitions": list(trace.transitions),
        "answerability": trace.answerability.value if trace.answerability else None,
        "selected_sentence_ids": (
            sorted(trace.selected_sentence_ids)
            if trace.selected_sentence_ids is not None
            else None
        ),
        "errors": [
            {"kind": a.kind, "state": a.state, "detail": a.detail} for a in trace.errors
        ],
    }
    if keep_raw:
        out["raw_exchanges"] = [
            {
                "state": x.state,
                "prompt_text": x.prompt_text,
                "completion_text": x.completion_text,
                "decoding_used": x.decoding_used,
            }
            for x in trace.raw_exchanges
        ]
    return out


def conversation_to_dict(conv: Conversation, keep_raw: bool = False) -> dict:
    """Serialize a conversation. Raw prompt/completion exchanges are stripped
    unless ``keep_raw`` is set."""
    return {
        "document_id": conv.document_id,
        "utterances": [
            {"speaker": u.speaker.value, "text": u.text, "turn_index": u.turn_index}
            for u in conv.utterances
        ],
        "traces": [_trace_to_dict(t, keep_raw) for t in conv.traces],
    }


def conversation_from_dict(data: dict) -> Conversation:
    utterances = tuple(
        Utterance(
            speaker=Speaker(u["speaker"]), text=u["text"], turn_index=u["turn_index"]
        )
        for u in data["utterances"]
    )
    traces = []
    for t in data.get("traces", []):
        traces.append(
            TurnTrace(
                algorithm_id=t["algorithm_id"],
                transitions=tuple(t["transitions"]),
                answerability=(
                    Answerability(t["answerability"]) if t.get("answerability") else None
                ),
                selected_sentence_ids=(
                    frozenset(t["selected_sentence_ids"])
                    if t.get("selected_sentence_ids") is not None
                    else None
                ),
                raw_exchanges=tuple(
                    StateExchange(
                        state=x["state"],
                        prompt_text=x["prompt_text"],
                        completion_text=x["completion_text"],
                        decoding_used=x["decoding_used"],
                    )
                    for x in t.get("raw_exchanges", [])
                ),
                errors=tuple(
                    Anomaly(kind=a["kind"], state=a["state"], detail=a["detail"])
                    for a in t.get("errors", [])
                ),
            )
        )
    return Conversation(
        document_id=data["document_id"], utterances=utterances, traces=tuple(traces)
    )


def to_jsonl_line(record: dict) -> str:
    """One JSON object per line with stable field order for byte-stable files."""
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))
