"""Render feature tuples as natural-language prompts and tokenize them.

The serialization template and answer words are fixed strings; a prompt wraps
one serialized record in an instruction that ends with the "Synergy:" cue.
Tokenization is word-level over a closed vocabulary built from the corpus,
with left padding so the final position always holds a real token.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import SequenceTooLongError, TemplateError
from .ingest import LabeledExample, SynergyRecord

SERIALIZATION_TEMPLATE = (
    "The first drug is {d1}. The second drug is {d2}. The cell line is {c}. "
    "Tissue is {t}. The first drug's sensitivity using relative inhibition is {ri1}. "
    "The second drug's sensitivity using relative inhibition is {ri2}."
)

# The serialized record carries its own final period, so the slot is not
# followed by one here.
DEFAULT_INSTRUCTION = (
    "Decide in a single word if the synergy of the drug combination in the "
    "cell line is positive or not. {input} Synergy:"
)
ALTERNATE_INSTRUCTION = (
    "Determine cancer drug combination synergy for the following drugs. "
    "Allowed synergies: Positive, Not positive. {input} Synergy:"
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")


def format_number(value: float, precision: int = 3) -> str:
    """Render a real with at most ``precision`` fractional digits.

    Rounding is half-even on the binary value; trailing zeros (and a bare
    trailing point) are trimmed, so 0.0 renders as "0".
    """
    text = f"{value:.{precision}f}"
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return "0" if text in ("", "-0") else text


def serialize_record(example: LabeledExample | SynergyRecord, precision: int = 3) -> str:
    """Serialize the feature tuple (label and loewe excluded) into a sentence."""
    record = example.record if isinstance(example, LabeledExample) else example
    return SERIALIZATION_TEMPLATE.format(
        d1=record.drug1,
        d2=record.drug2,
        c=record.cell_line,
        t=record.tissue,
        ri1=format_number(record.ri1, precision),
        ri2=format_number(record.ri2, precision),
    )


@dataclass(frozen=True)
class PromptTemplate:
    instruction: str = DEFAULT_INSTRUCTION
    answer_words: tuple[str, str] = ("Positive", "Not positive")

    def validate(self) -> None:
        if self.instruction.count("{input}") != 1:
            raise TemplateError(
                f"instruction must contain exactly one {{input}} slot, "
                f"found {self.instruction.count('{input}')}")
        positive, negative = self.answer_words
        if not positive or not negative or positive == negative:
            raise TemplateError("answer words must be distinct and non-empty")

    @property
    def positive_word(self) -> str:
        return self.answer_words[0]

    @property
    def negative_word(self) -> str:
        return self.answer_words[1]


def build_prompt(serialized: str, template: PromptTemplate = PromptTemplate()) -> str:
    template.validate()
    return template.instruction.replace("{input}", serialized)


def label_to_completion(label: int, template: PromptTemplate = PromptTemplate()) -> str:
    return template.positive_word if label == 1 else template.negative_word


@dataclass(frozen=True)
class SerializedExample:
    prompt: str
    completion: str
    label: int


def serialize_examples(
    examples: Iterable[LabeledExample],
    template: PromptTemplate = PromptTemplate(),
    precision: int = 3,
) -> list[SerializedExample]:
    template.validate()
    out = []
    for ex in examples:
        prompt = build_prompt(serialize_record(ex, precision), template)
        out.append(SerializedExample(prompt, label_to_completion(ex.label, template), ex.label))
    return out


@dataclass
class WordTokenizer:
    """Word-level tokenizer over a fixed vocabulary with reserved pad/unk ids."""

    token_to_id: dict[str, int]
    pad_id: int = 0
    unk_id: int = 1

    def __post_init__(self):
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id)

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return TOKEN_PATTERN.findall(text)

    def encode_tokens(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, self.unk_id) for tok in self.tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token.get(int(i), UNK_TOKEN) for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token, idx in sorted(self.token_to_id.items(), key=lambda kv: kv[1]):
                fh.write(f"{token}\t{idx}\n")

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        mapping: dict[str, int] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                token, idx = line.rstrip("\n").split("\t")
                mapping[token] = int(idx)
        return cls(mapping, pad_id=mapping[PAD_TOKEN], unk_id=mapping[UNK_TOKEN])


def build_vocabulary(corpus: Iterable[str], max_size: int) -> WordTokenizer:
    """Frequency-ranked word vocabulary truncated to max_size - 2 entries.

    Ids 0 and 1 are reserved for pad and unk. Equal-frequency tokens are
    ordered lexicographically, so the result does not depend on corpus order.
    """
    if max_size < 2:
        raise ValueError(f"max_size must be >= 2 to hold pad and unk, got {max_size}")
    counts: dict[str, int] = {}
    for text in corpus:
        for token in WordTokenizer.tokenize(text):
            counts[token] = counts.get(token, 0) + 1
    ranked = sorted(counts, key=lambda t: (-counts[t], t))[: max_size - 2]
    mapping = {PAD_TOKEN: 0, UNK_TOKEN: 1}
    for offset, token in enumerate(ranked):
        mapping[token] = 2 + offset
    return WordTokenizer(mapping)


@dataclass(frozen=True)
class TokenizedExample:
    """Left-padded token ids with a mask (1 = real token) and the label."""

    ids: np.ndarray
    mask: np.ndarray
    label: int


def encode(text: str, tokenizer: WordTokenizer, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode text left-padded to ``length``; overflow is an error.

    Padding occupies a strict prefix, so the final position is always the
    last token of the text.
    """
    token_ids = tokenizer.encode_tokens(text)
    if not token_ids:
        raise ValueError("cannot encode empty text: final position must hold a real token")
    if len(token_ids) > length:
        raise SequenceTooLongError(measured=len(token_ids), limit=length)
    pad = length - len(token_ids)
    ids = np.full(length, tokenizer.pad_id, dtype=np.int64)
    ids[pad:] = token_ids
    mask = np.zeros(length, dtype=np.int64)
    mask[pad:] = 1
    return ids, mask


def tokenize_examples(
    serialized: Sequence[SerializedExample],
    tokenizer: WordTokenizer,
    length: int,
) -> list[TokenizedExample]:
    out = []
    for ex in serialized:
        ids, mask = encode(ex.prompt, tokenizer, length)
        out.append(TokenizedExample(ids, mask, ex.label))
    return out


def stack_examples(examples: Sequence[TokenizedExample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack tokenized examples into (ids, labels) arrays for an estimator."""
    ids = np.stack([ex.ids for ex in examples])
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return ids, labels


def longest_prompt_length(prompts: Iterable[str], tokenizer: WordTokenizer) -> int:
    return max(len(tokenizer.encode_tokens(p)) for p in prompts)
