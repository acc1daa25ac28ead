"""Turn-level state machine execution.

One invocation of :func:`run_turn` produces a single user/agent utterance
pair by walking the algorithm's transition sequence: generate the question,
optionally classify its answerability, optionally select the relevant
sentences, then produce (or, for unanswerable questions, deterministically
emit) the agent response. :func:`run_conversation` repeats this, and
:func:`run_corpus` maps it over a document stream under a bounded worker
pool.

A single conversation is strictly sequential; only whole conversations run
concurrently. When a question is judged unanswerable, the response step is
deterministic: no sentence-selection or generation call is made and the
configured no-answer text is emitted verbatim.
"""

from __future__ import annotations

import dataclasses
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from .backends import (
    BackendError,
    CompletionBackend,
    DecodingMode,
    DecodingParams,
)
from .core import (
    AlgorithmSpec,
    Anomaly,
    Answerability,
    Conversation,
    Document,
    RestrictedDocument,
    Speaker,
    StateExchange,
    TurnTrace,
    Utterance,
    restrict_document,
)
from .prompts import (
    ExemplarSet,
    ModelKind,
    PromptBudget,
    build_ac_prompt,
    build_au_prompt,
    build_ss_prompt,
    build_uu_prompt,
    parse_ac_output,
    parse_ss_output,
)

logger = logging.getLogger(__name__)

GENERATOR_ROLE = "generator"
ASSISTANT_ROLE = "assistant"

#: Completions are cut at the first line break or speaker tag: completion-
#: style prompting makes models continue the dialogue past their own turn.
UTTERANCE_STOPS = ("\n", "User:", "Agent:")


class EngineError(Exception):
    pass


class MissingBackendError(EngineError):
    pass


class EmptyCompletionError(EngineError):
    """A generative state produced no usable text; the conversation is
    discarded rather than padded with fabricated content."""


@dataclass(frozen=True)
class RunConfig:
    """Decoding and scheduling configuration for generation runs.

    User-utterance generation samples with nucleus p=0.9 by default; every
    other state decodes greedily. ``rng_seed`` is forwarded to backends that
    support server-side reproducible sampling.
    """

    n_turns: int = 5
    uu_decoding: DecodingParams | None = None
    other_decoding: DecodingParams | None = None
    max_new_tokens: int = 128
    rng_seed: int | None = None
    parallelism: int = 1
    prompt_budget: PromptBudget | None = None

    def __post_init__(self) -> None:
        if self.n_turns < 1:
            raise ValueError("n_turns must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")

    def resolved_uu_decoding(self) -> DecodingParams:
        base = self.uu_decoding or DecodingParams(
            mode=DecodingMode.NUCLEUS,
            top_p=0.9,
            temperature=1.0,
            max_new_tokens=self.max_new_tokens,
        )
        return dataclasses.replace(
            base, stop_sequences=UTTERANCE_STOPS, seed=self.rng_seed
        )

    def resolved_other_decoding(self, stops: tuple[str, ...]) -> DecodingParams:
        base = self.other_decoding or DecodingParams(
            mode=DecodingMode.GREEDY, max_new_tokens=self.max_new_tokens
        )
        return dataclasses.replace(base, stop_sequences=stops)


def truncate_completion(text: str) -> str:
    """Cut a completion at the first newline or speaker tag and trim."""
    cut = len(text)
    for stop in UTTERANCE_STOPS:
        idx = text.find(stop)
        if idx >= 0:
            cut = min(cut, idx)
    return text[:cut].strip()


def _backend_for(
    state: str, algo: AlgorithmSpec, backends: Mapping[str, CompletionBackend]
) -> tuple[CompletionBackend, str]:
    if state in algo.assistant_states:
        backend = backends.get(ASSISTANT_ROLE)
        if backend is None:
            raise MissingBackendError(
                f"algorithm {algo.id!r} assigns state {state!r} to the assistant, "
                "but no assistant backend was provided"
            )
        return backend, ModelKind.ASSISTANT
    backend = backends.get(GENERATOR_ROLE)
    if backend is None:
        raise MissingBackendError("a generator backend is required")
    return backend, ModelKind.GENERATOR


def run_turn(
    doc: Document,
    history: Sequence[Utterance],
    algo: AlgorithmSpec,
    backends: Mapping[str, CompletionBackend],
    cfg: RunConfig,
    exemplars: ExemplarSet,
) -> tuple[Utterance, Utterance, TurnTrace]:
    """Generate one user/agent pair, returning both utterances and the trace.

    The trace records the states actually visited: under an unanswerable
    verdict the sequence collapses to uu-ac-au regardless of the algorithm,
    with no sentence-selection or generative response call.
    """
    if len(history) % 2 != 0:
        raise ValueError("history must contain whole user/agent pairs")
    turn_index = len(history) // 2
    states = algo.sequence.states
    exchanges: list[StateExchange] = []
    anomalies: list[Anomaly] = []
    transitions: list[str] = []

    def note_dropped(state: str, dropped: int) -> None:
        if dropped:
            anomalies.append(
                Anomaly(
                    kind="exemplars_dropped",
                    state=state,
                    detail=f"dropped {dropped} exemplar(s) to fit the prompt budget",
                )
            )

    # uu: next user question, sampled rather than greedy.
    backend, _ = _backend_for("uu", algo, backends)
    prompt = build_uu_prompt(doc, history, exemplars, budget=cfg.prompt_budget)
    note_dropped("uu", prompt.dropped_exemplars)
    decoding = cfg.resolved_uu_decoding()
    result = backend.complete(prompt.text, decoding, tag="uu")
    exchanges.append(StateExchange("uu", prompt.text, result.text, decoding.describe()))
    transitions.append("uu")
    question = truncate_completion(result.text)
    if not question:
        raise EmptyCompletionError(f"uu produced no question for document {doc.id}")

    answerability: Answerability | None = None
    selected: frozenset[int] | None = None
    doc_star: Document | RestrictedDocument = doc

    if "ac" in states:
        backend, model_kind = _backend_for("ac", algo, backends)
        prompt = build_ac_prompt(
            doc, history, question, exemplars, model_kind, budget=cfg.prompt_budget
        )
        note_dropped("ac", prompt.dropped_exemplars)
        decoding = cfg.resolved_other_decoding(("\n",))
        result = backend.complete(prompt.text, decoding, tag="ac")
        exchanges.append(StateExchange("ac", prompt.text, result.text, decoding.describe()))
        transitions.append("ac")
        answerability, anomaly = parse_ac_output(result.text)
        if anomaly:
            anomalies.append(anomaly)

    if answerability is Answerability.UNANSWERABLE:
        # Deterministic response: no ss, no generation.
        transitions.append("au")
        agent_text = algo.no_answer_text
    else:
        if "ss" in states:
            backend, model_kind = _backend_for("ss", algo, backends)
            prompt = build_ss_prompt(
                doc, question, exemplars, model_kind, budget=cfg.prompt_budget
            )
            note_dropped("ss", prompt.dropped_exemplars)
            decoding = cfg.resolved_other_decoding(("\n",))
            result = backend.complete(prompt.text, decoding, tag="ss")
            exchanges.append(
                StateExchange("ss", prompt.text, result.text, decoding.describe())
            )
            transitions.append("ss")
            ids, anomaly = parse_ss_output(result.text, max_id=len(doc.sentences) - 1)
            if anomaly:
                anomalies.append(anomaly)
            if ids:
                selected = ids
                doc_star = restrict_document(doc, ids, algo.restriction_mode)
            else:
                selected = frozenset()
                anomalies.append(
                    Anomaly(
                        kind="selection_fallback",
                        state="ss",
                        detail="empty or unparsable sentence selection; using full document",
                    )
                )
        backend, _ = _backend_for("au", algo, backends)
        query_utterance = Utterance(Speaker.USER, question, turn_index)
        prompt = build_au_prompt(
            doc_star,
            tuple(history) + (query_utterance,),
            exemplars,
            no_answer_text=algo.no_answer_text,
            budget=cfg.prompt_budget,
            title=doc.title,
        )
        note_dropped("au", prompt.dropped_exemplars)
        decoding = cfg.resolved_other_decoding(UTTERANCE_STOPS)
        result = backend.complete(prompt.text, decoding, tag="au")
        exchanges.append(StateExchange("au", prompt.text, result.text, decoding.describe()))
        transitions.append("au")
        agent_text = truncate_completion(result.text)
        if not agent_text:
            raise EmptyCompletionError(f"au produced no response for document {doc.id}")

    trace = TurnTrace(
        algorithm_id=algo.id,
        transitions=tuple(transitions),
        answerability=answerability,
        selected_sentence_ids=selected,
        raw_exchanges=tuple(exchanges),
        errors=tuple(anomalies),
    )
    user = Utterance(Speaker.USER, question, turn_index)
    agent = Utterance(Speaker.AGENT, agent_text, turn_index)
    return user, agent, trace


def run_conversation(
    doc: Document,
    algo: AlgorithmSpec,
    backends: Mapping[str, CompletionBackend],
    cfg: RunConfig,
    exemplars: ExemplarSet,
) -> Conversation:
    """Generate a full conversation of ``cfg.n_turns`` user/agent pairs.

    Raises on backend failure; partial conversations are never emitted.
    """
    utterances: list[Utterance] = []
    traces: list[TurnTrace] = []
    for _ in range(cfg.n_turns):
        user, agent, trace = run_turn(doc, utterances, algo, backends, cfg, exemplars)
        utterances.extend((user, agent))
        traces.append(trace)
    return Conversation(
        document_id=doc.id, utterances=tuple(utterances), traces=tuple(traces)
    )


@dataclass
class CorpusSummary:
    """Success/failure tally for a corpus run; safe for concurrent updates."""

    succeeded: int = 0
    failed: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)
    anomaly_counts: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record_success(self, conv: Conversation) -> None:
        with self._lock:
            self.succeeded += 1
            for trace in conv.traces:
                for anomaly in trace.errors:
                    key = anomaly.kind
                    self.anomaly_counts[key] = self.anomaly_counts.get(key, 0) + 1

    def record_failure(self, doc_id: str, error: Exception) -> None:
        with self._lock:
            self.failed += 1
            self.failures.append((doc_id, f"{type(error).__name__}: {error}"))


def run_corpus(
    docs: Iterable[Document],
    algo: AlgorithmSpec,
    backends: Mapping[str, CompletionBackend],
    cfg: RunConfig,
    exemplars: ExemplarSet,
    summary: CorpusSummary | None = None,
) -> Iterator[Conversation]:
    """Generate one conversation per document.

    Output order matches input order regardless of parallelism. Per-document
    failures are logged, counted in ``summary`` and skipped.
    """
    if summary is None:
        summary = CorpusSummary()

    def worker(doc: Document) -> Conversation:
        return run_conversation(doc, algo, backends, cfg, exemplars)

    doc_list = list(docs)
    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        futures = [(doc, pool.submit(worker, doc)) for doc in doc_list]
        for doc, future in futures:
            try:
                conv = future.result()
            except (BackendError, EngineError, ValueError) as exc:
                logger.warning("document %s failed: %s", doc.id, exc)
                summary.record_failure(doc.id, exc)
                continue
            summary.record_success(conv)
            yield conv
