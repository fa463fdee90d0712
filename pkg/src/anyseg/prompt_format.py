"""Unified text-query / vision-query token format.

Phrases are wrapped as ``<p> ... </p>``; visual prompts appear as ``<p> <region> </p>``;
each segmentation target in a response is marked by ``<SEG>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

PAD, BOS, EOS, IMAGE, P_OPEN, P_CLOSE, SEG, REGION = (
    "<pad>", "<bos>", "<eos>", "<image>", "<p>", "</p>", "<SEG>", "<region>",
)
SPECIAL_TOKENS = (PAD, BOS, EOS, IMAGE, P_OPEN, P_CLOSE, SEG, REGION)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six")

BASE_WORDS = (
    *SHAPES, *COLORS, *NUMBER_WORDS,
    "segment", "all", "objects", "the", "a", "an", "and", "in", "image", "please", "sure",
    "it", "is", "are", "they", "there", "shape", "shapes", "largest", "smallest", "same",
    "color", "as", "describe", "this", "picture", "briefly", "with", "masks", "how", "many",
    "yes", "no", "instances", "like", "object", "what", "of", "here", "region", "from",
    ".", ",", "?", ":",
)

TEXT_TASKS = ("generic", "referring", "reasoning", "gcg")
VISION_TASKS = ("interactive", "vgd")
CHAT_TASKS = ("conversation", "caption")
SEG_TASKS = TEXT_TASKS + VISION_TASKS
ALL_TASKS = SEG_TASKS + CHAT_TASKS

# instruction / response wording per task; {spans} and {segs} are filled by the builders
TEMPLATES = {
    "generic": ("segment all objects from {spans} .", "sure , {segs} ."),
    "referring": ("please segment {spans} .", "sure , it is {segs} ."),
    "reasoning": ("please segment {spans} .", "sure , it is {segs} ."),
    "gcg": ("describe the image briefly with masks .", "there is {segs} ."),
    "interactive": ("segment the object in {spans} .", "sure , it is {segs} ."),
    "vgd": ("segment all instances like {spans} .", "sure , they are {segs} ."),
}


class VocabularyError(ValueError):
    pass


class SpanError(ValueError):
    def __init__(self, msg: str, index: int):
        super().__init__(f"{msg} at index {index}")
        self.index = index


class Vocabulary:
    """Closed word-level vocabulary; special tokens occupy the first ids."""

    def __init__(self, words: Sequence[str] = BASE_WORDS):
        symbols = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        if len(set(symbols)) != len(symbols):
            raise VocabularyError("duplicate symbols in vocabulary")
        self.symbols = tuple(symbols)
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.n_special = len(SPECIAL_TOKENS)

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, sym):
        return sym in self._ids

    def id(self, sym: str) -> int:
        return self._ids[sym]

    @property
    def pad(self):
        return 0

    def special_ids(self) -> dict[str, int]:
        return {s: self._ids[s] for s in SPECIAL_TOKENS}

    def encode(self, text: str) -> list[int]:
        out = []
        for tok in text.split():
            if tok not in self._ids:
                raise VocabularyError(f"untokenizable symbol {tok!r} in {text!r}")
            out.append(self._ids[tok])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.symbols[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        symbols = Path(path).read_text().split("\n")
        symbols = [s for s in symbols if s]
        if tuple(symbols[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"{path}: special tokens must come first in canonical order")
        return cls(symbols[len(SPECIAL_TOKENS):])


DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class TokenSequence:
    """Instruction followed by response; ``prompt_len`` is the instruction length P."""

    ids: tuple[int, ...]
    prompt_len: int
    task: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 <= self.prompt_len <= len(self.ids):
            raise ValueError("prompt_len outside sequence")

    def __len__(self):
        return len(self.ids)

    @property
    def roles(self) -> list[str]:
        return ["instruction"] * self.prompt_len + ["response"] * (len(self.ids) - self.prompt_len)

    @property
    def instruction(self) -> tuple[int, ...]:
        return self.ids[: self.prompt_len]

    @property
    def response(self) -> tuple[int, ...]:
        return self.ids[self.prompt_len:]

    def response_mask(self) -> list[bool]:
        return [i >= self.prompt_len for i in range(len(self.ids))]

    def with_response(self, response: Sequence[int]) -> "TokenSequence":
        return TokenSequence(self.instruction + tuple(response), self.prompt_len, self.task)


@dataclass(frozen=True)
class PromptSpan:
    """Content between one ``<p>`` and its ``</p>``: token indices ``[start, end)``."""

    start: int
    end: int
    contains_region: bool = False
    in_response: bool = False


def _wrap(phrase: str) -> str:
    return f"{P_OPEN} {phrase} {P_CLOSE}"


def _assemble(task: str, instruction: str, response: str, vocab: Vocabulary) -> TokenSequence:
    ins = vocab.encode(f"{BOS} {IMAGE} {instruction}")
    res = vocab.encode(f"{response} {EOS}")
    return TokenSequence(tuple(ins + res), len(ins), task)


def build_text_query(task_kind: str, phrases: Sequence[str], vocab: Vocabulary = DEFAULT_VOCAB,
                     templates: dict = TEMPLATES) -> TokenSequence:
    if task_kind not in TEXT_TASKS:
        raise ValueError(f"{task_kind!r} is not a text-query task")
    if not phrases:
        raise ValueError("at least one phrase is required")
    for ph in phrases:
        vocab.encode(ph)
    ins_t, res_t = templates[task_kind]
    spans = " , ".join(_wrap(p) for p in phrases)
    if task_kind == "gcg":
        # phrases are generated, each grounded right after its closing tag
        segs = " and ".join(f"{_wrap(p)} {SEG}" for p in phrases)
    else:
        segs = " ".join([SEG] * len(phrases))
    return _assemble(task_kind, ins_t.format(spans=spans), res_t.format(segs=segs), vocab)


def build_vision_query(task_kind: str, n_regions: int, vocab: Vocabulary = DEFAULT_VOCAB,
                       templates: dict = TEMPLATES) -> TokenSequence:
    if task_kind not in VISION_TASKS:
        raise ValueError(f"{task_kind!r} is not a vision-query task")
    if n_regions < 1:
        raise ValueError("n_regions must be >= 1")
    ins_t, res_t = templates[task_kind]
    spans = " , ".join([_wrap(REGION)] * n_regions)
    segs = " ".join([SEG] * n_regions)
    return _assemble(task_kind, ins_t.format(spans=spans), res_t.format(segs=segs), vocab)


def build_chat(task_kind: str, question: str, answer: str,
               vocab: Vocabulary = DEFAULT_VOCAB) -> TokenSequence:
    """Plain instruction/response pair with no segmentation request."""
    if task_kind not in CHAT_TASKS:
        raise ValueError(f"{task_kind!r} is not a chat task")
    return _assemble(task_kind, question, answer, vocab)


def extract_phrase_spans(seq, vocab: Vocabulary = DEFAULT_VOCAB) -> list[PromptSpan]:
    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
    prompt_len = seq.prompt_len if isinstance(seq, TokenSequence) else len(ids)
    p_open, p_close, region = vocab.id(P_OPEN), vocab.id(P_CLOSE), vocab.id(REGION)
    spans = []
    open_at = None
    for i, t in enumerate(ids):
        if t == p_open:
            if open_at is not None:
                raise SpanError("nested <p>", i)
            open_at = i
        elif t == p_close:
            if open_at is None:
                raise SpanError("</p> without <p>", i)
            if i == open_at + 1:
                raise SpanError("empty <p></p> span", i)
            has_region = region in ids[open_at + 1:i]
            spans.append(PromptSpan(open_at + 1, i, has_region, open_at >= prompt_len))
            open_at = None
        elif t == region and open_at is None:
            raise SpanError("<region> outside a <p></p> span", i)
    if open_at is not None:
        raise SpanError("unclosed <p>", open_at)
    return spans


def locate_seg_positions(seq: TokenSequence, vocab: Vocabulary = DEFAULT_VOCAB) -> list[int]:
    seg = vocab.id(SEG)
    return [i for i in range(seq.prompt_len, len(seq.ids)) if seq.ids[i] == seg]


def condition_spans(seq: TokenSequence, vocab: Vocabulary = DEFAULT_VOCAB) -> list[PromptSpan]:
    """Spans whose pooled states act as class vectors.

    GCG phrases only exist in the generated response, so it reads output-side spans;
    every other task reads the instruction-side spans.
    """
    spans = extract_phrase_spans(seq, vocab)
    want_response = seq.task == "gcg"
    return [s for s in spans if s.in_response == want_response]
