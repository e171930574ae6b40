"""Dialogue data model and the flattening convention.

A dialogue of N utterances is flattened as::

    u1 [EOU] u2 [EOU] ... uN [EOU] [CONTEXT]

Each utterance span in the flattened sequence *includes* its trailing [EOU],
which is the utterance's representative token. The final [CONTEXT] token
stands for the whole dialogue and belongs to no span.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyDialogue, EmptyUtterance, ParseError

PAD_ID = 0
UNK_ID = 1
EOU_ID = 2
CONTEXT_ID = 3
N_RESERVED = 4

RESERVED_TOKENS = {"[PAD]": PAD_ID, "[UNK]": UNK_ID, "[EOU]": EOU_ID, "[CONTEXT]": CONTEXT_ID}


@dataclass(frozen=True)
class Dialogue:
    """Ordered utterances of content token ids; [EOU] markers are not stored."""

    utterances: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "utterances", tuple(tuple(int(t) for t in u) for u in self.utterances)
        )

    @property
    def n_utterances(self) -> int:
        return len(self.utterances)

    @property
    def flat_length(self) -> int:
        return sum(len(u) + 1 for u in self.utterances) + 1

    def validate(self) -> None:
        if not self.utterances:
            raise EmptyDialogue("dialogue has no utterances")
        for i, u in enumerate(self.utterances):
            if not u:
                raise EmptyUtterance(f"utterance {i} has no content tokens")
            if any(t < 0 for t in u):
                raise ValueError(f"utterance {i} contains a negative token id")


@dataclass(frozen=True)
class Segmentation:
    spans: tuple[tuple[int, int], ...]
    rep_indices: tuple[int, ...]
    context_index: int
    total_len: int

    @property
    def n_utterances(self) -> int:
        return len(self.spans)

    def content_pairs(self) -> list[tuple[int, int]]:
        """(token index, representative index) for every non-representative token."""
        pairs = []
        for (start, _end), rep in zip(self.spans, self.rep_indices):
            pairs.extend((t, rep) for t in range(start, rep))
        return pairs

    def utterance_of(self) -> list[int]:
        """Utterance index per flattened position; -1 for positions outside every span."""
        owner = [-1] * self.total_len
        for i, (start, end) in enumerate(self.spans):
            for t in range(start, end):
                owner[t] = i
        return owner

    def special_positions(self) -> list[int]:
        return sorted(set(self.rep_indices) | {self.context_index})


def flatten_dialogue(
    d: Dialogue, eou_id: int = EOU_ID, context_id: int = CONTEXT_ID
) -> tuple[list[int], Segmentation]:
    d.validate()
    tokens: list[int] = []
    spans = []
    reps = []
    for u in d.utterances:
        start = len(tokens)
        tokens.extend(u)
        tokens.append(eou_id)
        spans.append((start, len(tokens)))
        reps.append(len(tokens) - 1)
    tokens.append(context_id)
    seg = Segmentation(
        spans=tuple(spans),
        rep_indices=tuple(reps),
        context_index=len(tokens) - 1,
        total_len=len(tokens),
    )
    return tokens, seg


def segmentation_from_lengths(span_lengths: Sequence[int]) -> Segmentation:
    """Build a segmentation directly from span lengths (each including its [EOU])."""
    spans = []
    start = 0
    for n in span_lengths:
        spans.append((start, start + int(n)))
        start += int(n)
    return Segmentation(
        spans=tuple(spans),
        rep_indices=tuple(end - 1 for _, end in spans),
        context_index=start,
        total_len=start + 1,
    )


def validate_segmentation(seg: Segmentation, T: int) -> list[str]:
    """Return every violated segmentation invariant; an empty list means valid."""
    problems = []
    if seg.total_len != T:
        problems.append(f"total_len {seg.total_len} does not match T={T}")
    if not seg.spans:
        problems.append("no utterance spans (N must be >= 1)")
    if len(seg.rep_indices) != len(seg.spans):
        problems.append(
            f"{len(seg.rep_indices)} representative indices for {len(seg.spans)} spans"
        )
    expected_start = 0
    for i, (start, end) in enumerate(seg.spans):
        if end - start < 2:
            problems.append(f"span {i} {(start, end)} shorter than 2 tokens")
        if start < expected_start:
            problems.append(f"span {i} {(start, end)} overlaps the previous span")
        elif start > expected_start:
            problems.append(f"gap before span {i}: positions {expected_start}..{start - 1} uncovered")
        expected_start = max(expected_start, end)
        if i < len(seg.rep_indices) and seg.rep_indices[i] != end - 1:
            problems.append(
                f"rep index {seg.rep_indices[i]} of span {i} is not its last position {end - 1}"
            )
    if seg.spans and expected_start != T - 1:
        problems.append(f"spans end at {expected_start}, expected to tile [0, {T - 1})")
    if seg.context_index != T - 1:
        problems.append(f"context_index {seg.context_index} is not T-1={T - 1}")
    for r in seg.rep_indices:
        if not 0 <= r < T - 1:
            problems.append(f"rep index {r} outside [0, {T - 1})")
        if r == seg.context_index:
            problems.append(f"rep index {r} collides with context_index")
    return problems


@dataclass
class VocabularyMap:
    """Token string <-> id mapping with four reserved ids at the bottom."""

    token_to_id: dict[str, int] = field(default_factory=lambda: dict(RESERVED_TOKENS))

    def __post_init__(self):
        for tok, idx in RESERVED_TOKENS.items():
            if self.token_to_id.get(tok) != idx:
                raise ValueError(f"reserved token {tok} must map to id {idx}")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @classmethod
    def build(cls, tokens: Iterable[str]) -> VocabularyMap:
        """Assign ids to the distinct non-reserved tokens in sorted order."""
        mapping = dict(RESERVED_TOKENS)
        for tok in sorted(set(tokens) - set(RESERVED_TOKENS)):
            mapping[tok] = len(mapping)
        return cls(mapping)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, token: str) -> int:
        # reserved surface forms in text are treated as ordinary unknown tokens
        if token in RESERVED_TOKENS:
            return UNK_ID
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        return self.id_to_token.get(idx, "[UNK]")

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> VocabularyMap:
        return cls({str(k): int(v) for k, v in json.loads(text).items()})


def _record_to_dialogue(record, vocab: VocabularyMap | None, line: int) -> Dialogue:
    if not isinstance(record, dict):
        raise ParseError("record is not an object", line)
    by_id = "utterance_ids" in record
    if not by_id and "utterances" not in record:
        raise ParseError('record has neither "utterances" nor "utterance_ids"', line)
    raw = record["utterance_ids" if by_id else "utterances"]
    if not isinstance(raw, list) or not raw:
        raise ParseError("dialogue must contain at least one utterance", line)
    utterances = []
    for i, utt in enumerate(raw):
        if not isinstance(utt, list) or not utt:
            raise ParseError(f"utterance {i} must be a non-empty list of tokens", line)
        if by_id:
            if not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for t in utt):
                raise ParseError(f"utterance {i} must contain non-negative integer ids", line)
            utterances.append(tuple(utt))
            continue
        if not all(isinstance(t, str) and t and not any(c.isspace() for c in t) for t in utt):
            raise ParseError(f"utterance {i} must contain whitespace-free strings", line)
        if vocab is None:
            raise ParseError("string tokens require a vocabulary", line)
        utterances.append(tuple(vocab.encode(t) for t in utt))
    speakers = record.get("speakers")
    if speakers is not None and not isinstance(speakers, list):
        raise ParseError('"speakers" must be a list when present', line)
    return Dialogue(tuple(utterances))


def read_records(path: str | Path) -> list[tuple[int, object]]:
    text = Path(path).read_text(encoding="utf-8")
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
    return records


def load_dialogues(path: str | Path, vocab: VocabularyMap | None = None) -> list[Dialogue]:
    """Read a line-delimited dialogue file.

    String-token records are mapped through ``vocab`` (unknown tokens become
    [UNK]); ``utterance_ids`` records bypass the vocabulary. Blank lines are
    skipped. Raises ``ParseError`` carrying the 1-based line number, or
    ``OSError`` if the file cannot be read.
    """
    return [_record_to_dialogue(rec, vocab, line) for line, rec in read_records(path)]


def corpus_tokens(path: str | Path) -> list[str]:
    """All string tokens appearing in a dialogue file, for building a vocabulary."""
    out = []
    for _, rec in read_records(path):
        if isinstance(rec, dict) and isinstance(rec.get("utterances"), list):
            for utt in rec["utterances"]:
                if isinstance(utt, list):
                    out.extend(t for t in utt if isinstance(t, str))
    return out


def save_dialogues(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    lines = [json.dumps({"utterance_ids": [list(u) for u in d.utterances]}) for d in dialogues]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
