"""Per-state prompt rendering and output parsing.

Generation-time prompts are completion-style: few-shot exemplar blocks
followed by the target document and dialogue, ending at a speaker cue the
model must continue. The classification-like states (answerability, sentence
selection) have two variants: an instruction-style prompt for an assistant
model and a completion-style one for the plain generator, with different
exemplar counts.

Rendering is pure: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .core import (
    DEFAULT_NO_ANSWER_TEXT,
    Answerability,
    Anomaly,
    Conversation,
    Document,
    RestrictedDocument,
    Speaker,
    Utterance,
    conversation_from_dict,
    conversation_to_dict,
    document_from_dict,
    document_to_dict,
)


class MissingExemplars(ValueError):
    """Raised when an exemplar set cannot supply what a prompt needs."""


class ModelKind:
    GENERATOR = "generator"
    ASSISTANT = "assistant"


SPEAKER_TAGS = {Speaker.USER: "User:", Speaker.AGENT: "Agent:"}


# ---------------------------------------------------------------------------
# Seed conversations (the exemplar source)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TurnLabel:
    turn_index: int
    answerability: Answerability
    sentence_ids: tuple[int, ...] | None = None


@dataclass(frozen=True)
class SeedConversation:
    """A hand-written demonstration: a document, a full conversation, and a
    per-turn answerability label (plus gold sentence ids for answerable
    turns). One seed feeds exemplars for every state."""

    document: Document
    conversation: Conversation
    labels: tuple[TurnLabel, ...]

    def __post_init__(self) -> None:
        if len(self.labels) != self.conversation.n_pairs:
            raise ValueError(
                f"{len(self.labels)} labels for {self.conversation.n_pairs} pairs"
            )
        for i, label in enumerate(self.labels):
            if label.turn_index != i:
                raise ValueError("labels must be ordered by turn_index")


def seed_to_dict(seed: SeedConversation) -> dict:
    return {
        "document": document_to_dict(seed.document),
        "conversation": conversation_to_dict(seed.conversation),
        "turn_labels": [
            {
                "turn_index": lab.turn_index,
                "answerability": lab.answerability.value,
                "sentence_ids": list(lab.sentence_ids) if lab.sentence_ids is not None else None,
            }
            for lab in seed.labels
        ],
    }


def seed_from_dict(data: dict) -> SeedConversation:
    labels = tuple(
        TurnLabel(
            turn_index=lab["turn_index"],
            answerability=Answerability(lab["answerability"]),
            sentence_ids=(
                tuple(lab["sentence_ids"]) if lab.get("sentence_ids") is not None else None
            ),
        )
        for lab in data["turn_labels"]
    )
    return SeedConversation(
        document=document_from_dict(data["document"]),
        conversation=conversation_from_dict(data["conversation"]),
        labels=labels,
    )


def load_seeds(path: str | Path) -> list[SeedConversation]:
    seeds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                seeds.append(seed_from_dict(json.loads(line)))
    return seeds


# ---------------------------------------------------------------------------
# Exemplar sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcExemplar:
    document: Document
    history: tuple[Utterance, ...]
    query: str
    answerable: bool


@dataclass(frozen=True)
class SsExemplar:
    document: Document
    query: str
    sentence_ids: tuple[int, ...]


@dataclass(frozen=True)
class ExemplarCounts:
    """Default exemplar budget per state and model kind."""

    uu: int = 2
    au: int = 2
    ac_assistant_positive: int = 3
    ac_assistant_negative: int = 3
    ac_generator_positive: int = 2
    ac_generator_negative: int = 2
    ss_assistant: int = 6
    ss_generator: int = 3


@dataclass(frozen=True)
class ExemplarSet:
    """Exemplars for all four states, typically drawn from seed demonstrations.

    Built via :meth:`from_seeds` the counts follow :class:`ExemplarCounts`;
    direct construction accepts any sizes (used e.g. for sampled few-shot
    demos).
    """

    uu_exemplars: tuple[tuple[Document, Conversation], ...] = ()
    au_exemplars: tuple[tuple[Document, Conversation], ...] = ()
    ac_exemplars_assistant: tuple[AcExemplar, ...] = ()
    ac_exemplars_generator: tuple[AcExemplar, ...] = ()
    ss_exemplars_assistant: tuple[SsExemplar, ...] = ()
    ss_exemplars_generator: tuple[SsExemplar, ...] = ()

    @classmethod
    def from_seeds(
        cls, seeds: Sequence[SeedConversation], counts: ExemplarCounts = ExemplarCounts()
    ) -> "ExemplarSet":
        if not seeds:
            raise MissingExemplars("no seed conversations given")
        pairs = [(s.document, s.conversation) for s in seeds]
        if len(pairs) < max(counts.uu, counts.au):
            raise MissingExemplars(
                f"need {max(counts.uu, counts.au)} seed conversations, have {len(pairs)}"
            )

        positives: list[AcExemplar] = []
        negatives: list[AcExemplar] = []
        selections: list[SsExemplar] = []
        for seed in seeds:
            utterances = seed.conversation.utterances
            for label in seed.labels:
                i = label.turn_index
                query = utterances[2 * i].text
                history = tuple(utterances[: 2 * i])
                answerable = label.answerability is Answerability.ANSWERABLE
                exemplar = AcExemplar(
                    document=seed.document, history=history, query=query, answerable=answerable
                )
                (positives if answerable else negatives).append(exemplar)
                if answerable and label.sentence_ids is not None:
                    selections.append(
                        SsExemplar(
                            document=seed.document,
                            query=query,
                            sentence_ids=tuple(sorted(label.sentence_ids)),
                        )
                    )

        def take_ac(n_pos: int, n_neg: int) -> tuple[AcExemplar, ...]:
            if len(positives) < n_pos or len(negatives) < n_neg:
                raise MissingExemplars(
                    f"need {n_pos} answerable and {n_neg} unanswerable labeled turns, "
                    f"have {len(positives)}/{len(negatives)}"
                )
            interleaved: list[AcExemplar] = []
            for k in range(max(n_pos, n_neg)):
                if k < n_pos:
                    interleaved.append(positives[k])
                if k < n_neg:
                    interleaved.append(negatives[k])
            return tuple(interleaved)

        def take_ss(n: int) -> tuple[SsExemplar, ...]:
            if len(selections) < n:
                raise MissingExemplars(
                    f"need {n} sentence-labeled answerable turns, have {len(selections)}"
                )
            return tuple(selections[:n])

        return cls(
            uu_exemplars=tuple(pairs[: counts.uu]),
            au_exemplars=tuple(pairs[: counts.au]),
            ac_exemplars_assistant=take_ac(
                counts.ac_assistant_positive, counts.ac_assistant_negative
            ),
            ac_exemplars_generator=take_ac(
                counts.ac_generator_positive, counts.ac_generator_negative
            ),
            ss_exemplars_assistant=take_ss(counts.ss_assistant),
            ss_exemplars_generator=take_ss(counts.ss_generator),
        )


# ---------------------------------------------------------------------------
# Prompt text
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptText:
    text: str
    state: str
    model_kind: str
    dropped_exemplars: int = 0

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("prompt text is empty")


@dataclass(frozen=True)
class PromptBudget:
    """Token budget for a rendered prompt. When exceeded, whole exemplars are
    dropped from the front (never truncated mid-exemplar)."""

    max_tokens: int
    counter: Callable[[str], int]


def _render_dialogue(utterances: Iterable[Utterance]) -> str:
    return "\n".join(f"{SPEAKER_TAGS[u.speaker]} {u.text}" for u in utterances)


def _render_document(title: str, text: str) -> str:
    return f"Title: {title}\nDocument: {text}"


def _render_conversation_block(doc: Document, conv: Conversation) -> str:
    return (
        f"{_render_document(doc.title, doc.text)}\n\n"
        f"Conversation:\n{_render_dialogue(conv.utterances)}"
    )


def _assemble(
    preamble: str,
    exemplar_blocks: Sequence[str],
    target_block: str,
    state: str,
    model_kind: str,
    budget: PromptBudget | None,
) -> PromptText:
    def render(blocks: Sequence[str]) -> str:
        pieces = [preamble] if preamble else []
        pieces.extend(blocks)
        pieces.append(target_block)
        return "\n\n".join(pieces)

    blocks = list(exemplar_blocks)
    dropped = 0
    text = render(blocks)
    if budget is not None:
        while blocks and budget.counter(text) > budget.max_tokens:
            blocks.pop(0)
            dropped += 1
            text = render(blocks)
    return PromptText(text=text, state=state, model_kind=model_kind, dropped_exemplars=dropped)


UU_PREAMBLE = (
    "The following are conversations between a user and an agent. The user asks "
    "questions about the given document and the agent answers them."
)

AU_PREAMBLE_TEMPLATE = (
    "The following are conversations between a user and an agent. The agent answers "
    "the user's questions using only information found in the given document. When "
    "the document does not contain the answer, the agent replies {no_answer}."
)

AC_ASSISTANT_INSTRUCTION = (
    "Read the document and the conversation. Decide whether the final question is "
    "answerable or unanswerable using only the document. Reply with exactly one "
    "word: answerable or unanswerable."
)

AC_GENERATOR_PREAMBLE = (
    "Each question below is marked answerable or unanswerable depending on whether "
    "the document contains its answer."
)

SS_ASSISTANT_INSTRUCTION = (
    "Select the sentences of the document that contain the answer to the question. "
    "Reply with the identifiers of the relevant sentences, separated by commas."
)

SS_GENERATOR_PREAMBLE = (
    "For each question, the identifiers of the document sentences containing the "
    "answer are listed."
)


def build_uu_prompt(
    doc: Document,
    history: Sequence[Utterance],
    exemplars: ExemplarSet,
    budget: PromptBudget | None = None,
) -> PromptText:
    """Prompt the generator for the next user question; ends at a ``User:`` cue."""
    if not exemplars.uu_exemplars:
        raise MissingExemplars("uu prompt needs at least one exemplar conversation")
    if len(history) % 2 != 0:
        raise ValueError("history must end after an agent turn (or be empty)")
    blocks = [_render_conversation_block(d, c) for d, c in exemplars.uu_exemplars]
    dialogue = _render_dialogue(history)
    lines = f"{dialogue}\nUser:" if dialogue else "User:"
    target = f"{_render_document(doc.title, doc.text)}\n\nConversation:\n{lines}"
    return _assemble(UU_PREAMBLE, blocks, target, "uu", ModelKind.GENERATOR, budget)


def build_au_prompt(
    doc_star: Document | RestrictedDocument,
    history_plus_query: Sequence[Utterance],
    exemplars: ExemplarSet,
    no_answer_text: str = DEFAULT_NO_ANSWER_TEXT,
    budget: PromptBudget | None = None,
    title: str | None = None,
) -> PromptText:
    """Prompt for the agent response; ends at an ``Agent:`` cue.

    ``doc_star`` may be the full document or a restricted view of it; pass
    ``title`` explicitly when giving a restricted view (it carries only the
    source document id).
    """
    if not exemplars.au_exemplars:
        raise MissingExemplars("au prompt needs at least one exemplar conversation")
    if not history_plus_query or history_plus_query[-1].speaker is not Speaker.USER:
        raise ValueError("history must end with the user query awaiting a response")
    if isinstance(doc_star, RestrictedDocument):
        doc_title = title if title is not None else doc_star.source_id
        doc_text = doc_star.rendered_text
    else:
        doc_title = doc_star.title if title is None else title
        doc_text = doc_star.text
    blocks = [_render_conversation_block(d, c) for d, c in exemplars.au_exemplars]
    target = (
        f"{_render_document(doc_title, doc_text)}\n\n"
        f"Conversation:\n{_render_dialogue(history_plus_query)}\nAgent:"
    )
    preamble = AU_PREAMBLE_TEMPLATE.format(no_answer=no_answer_text)
    return _assemble(preamble, blocks, target, "au", ModelKind.GENERATOR, budget)


def _render_ac_exemplar(ex: AcExemplar, model_kind: str) -> str:
    label = "answerable" if ex.answerable else "unanswerable"
    parts = [_render_document(ex.document.title, ex.document.text)]
    if ex.history:
        parts.append(f"Conversation:\n{_render_dialogue(ex.history)}")
    if model_kind == ModelKind.ASSISTANT:
        parts.append(f"Question: {ex.query}\nVerdict: {label}")
    else:
        parts.append(f"Question: {ex.query}\nThis question is {label}.")
    return "\n\n".join(parts)


def build_ac_prompt(
    doc: Document,
    history: Sequence[Utterance],
    query: str,
    exemplars: ExemplarSet,
    model_kind: str,
    budget: PromptBudget | None = None,
) -> PromptText:
    """Prompt for the answerability verdict on the current query."""
    pool = (
        exemplars.ac_exemplars_assistant
        if model_kind == ModelKind.ASSISTANT
        else exemplars.ac_exemplars_generator
    )
    if not pool:
        raise MissingExemplars(f"ac prompt ({model_kind}) has no exemplars")
    if not any(e.answerable for e in pool) or not any(not e.answerable for e in pool):
        raise MissingExemplars("ac prompt needs both answerable and unanswerable exemplars")
    blocks = [_render_ac_exemplar(e, model_kind) for e in pool]
    parts = [_render_document(doc.title, doc.text)]
    if history:
        parts.append(f"Conversation:\n{_render_dialogue(history)}")
    if model_kind == ModelKind.ASSISTANT:
        preamble = AC_ASSISTANT_INSTRUCTION
        parts.append(f"Question: {query}\nVerdict:")
    else:
        preamble = AC_GENERATOR_PREAMBLE
        parts.append(f"Question: {query}\nThis question is")
    return _assemble(preamble, blocks, "\n\n".join(parts), "ac", model_kind, budget)


def _render_numbered_sentences(doc: Document) -> str:
    return "\n".join(f"{s.sentence_id}: {s.text}" for s in doc.sentences)


def _render_ss_exemplar(ex: SsExemplar) -> str:
    ids = ", ".join(str(i) for i in ex.sentence_ids)
    return (
        f"Title: {ex.document.title}\n"
        f"Sentences:\n{_render_numbered_sentences(ex.document)}\n\n"
        f"Question: {ex.query}\nRelevant sentences: {ids}"
    )


def build_ss_prompt(
    doc: Document,
    query: str,
    exemplars: ExemplarSet,
    model_kind: str,
    budget: PromptBudget | None = None,
) -> PromptText:
    """Prompt for the identifiers of the sentences relevant to the query.

    Every document sentence is rendered with its numeric identifier.
    """
    if not doc.sentences:
        raise ValueError("document has no sentences")
    pool = (
        exemplars.ss_exemplars_assistant
        if model_kind == ModelKind.ASSISTANT
        else exemplars.ss_exemplars_generator
    )
    if not pool:
        raise MissingExemplars(f"ss prompt ({model_kind}) has no exemplars")
    blocks = [_render_ss_exemplar(e) for e in pool]
    target = (
        f"Title: {doc.title}\n"
        f"Sentences:\n{_render_numbered_sentences(doc)}\n\n"
        f"Question: {query}\nRelevant sentences:"
    )
    preamble = (
        SS_ASSISTANT_INSTRUCTION if model_kind == ModelKind.ASSISTANT else SS_GENERATOR_PREAMBLE
    )
    return _assemble(preamble, blocks, target, "ss", model_kind, budget)


# ---------------------------------------------------------------------------
# Output parsing
# ---------------------------------------------------------------------------


def parse_ac_output(completion: str) -> tuple[Answerability, Anomaly | None]:
    """Deterministic verdict extraction.

    Searches case-insensitively for "unanswerable" before "answerable" (the
    latter is a substring of the former). Unparsable output falls back to
    answerable with a recorded anomaly so generation keeps flowing.
    """
    lowered = completion.lower()
    if "unanswerable" in lowered:
        return Answerability.UNANSWERABLE, None
    if "answerable" in lowered:
        return Answerability.ANSWERABLE, None
    return (
        Answerability.ANSWERABLE,
        Anomaly(
            kind="parse_error",
            state="ac",
            detail=f"no verdict token in {completion[:80]!r}; defaulting to answerable",
        ),
    )


_INT_RE = re.compile(r"\d+")


def parse_ss_output(completion: str, max_id: int) -> tuple[frozenset[int], Anomaly | None]:
    """Extract sentence identifiers in [0, max_id], deduplicated.

    Out-of-range integers are dropped and reported as an anomaly.
    """
    if max_id < 0:
        raise ValueError("max_id must be >= 0")
    seen = {int(m) for m in _INT_RE.findall(completion)}
    in_range = frozenset(i for i in seen if 0 <= i <= max_id)
    out_of_range = sorted(seen - in_range)
    anomaly = None
    if out_of_range:
        anomaly = Anomaly(
            kind="out_of_range_ids",
            state="ss",
            detail=f"dropped ids {out_of_range} (max id {max_id})",
        )
    return in_range, anomaly
