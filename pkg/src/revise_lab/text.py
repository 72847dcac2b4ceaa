"""Word-level tokenizer, vocab, and the prompt/target string conventions.

The generation target is always "<answer> because <explanation>"; parsing
splits at the first "because". Everything is lowercased so answer equality
checks are case-insensitive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

PROMPT_TEMPLATE = "answer the question by reasoning step by step. question: {} answer:"

_PUNCT_RE = re.compile(r"[^\w\s]")
_WS_RE = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return _WS_RE.sub(" ", _PUNCT_RE.sub(" ", text.lower())).strip()


def words(text: str) -> list[str]:
    norm = normalize(text)
    return norm.split(" ") if norm else []


@dataclass
class Vocab:
    id_to_token: tuple[str, ...]
    token_to_id: dict = field(repr=False)
    because_id: int = UNK_ID

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode_word(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode_id(self, idx: int) -> str:
        return self.id_to_token[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            toks = tuple(line.rstrip("\n") for line in fh)
        if toks[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise ValueError(f"vocab file {path} is missing the reserved token header")
        mapping = {t: i for i, t in enumerate(toks)}
        return cls(toks, mapping, because_id=mapping.get("because", UNK_ID))


def build_vocab(corpus, min_count: int = 1) -> Vocab:
    """Frequency-sorted vocab; ties break lexicographically, rare words -> UNK."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("build_vocab: empty corpus")
    counts: dict[str, int] = {}
    for line in corpus:
        for w in words(line):
            counts[w] = counts.get(w, 0) + 1
    kept = sorted(
        (w for w, c in counts.items() if c >= min_count),
        key=lambda w: (-counts[w], w),
    )
    id_to_token = RESERVED_TOKENS + tuple(kept)
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    return Vocab(id_to_token, token_to_id, because_id=token_to_id.get("because", UNK_ID))


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.encode_word(w) for w in words(text)]


def detokenize(ids, vocab: Vocab) -> str:
    return " ".join(vocab.decode_id(i) for i in ids)


def format_prompt(question: str) -> str:
    q = question.strip().lower()
    if not q:
        raise ValueError("format_prompt: empty question")
    return PROMPT_TEMPLATE.format(q)


def format_target(answer: str, explanation: str) -> str:
    a, e = answer.strip().lower(), explanation.strip().lower()
    if not a:
        raise ValueError("format_target: empty answer")
    if not e:
        raise ValueError("format_target: empty explanation")
    return f"{a} because {e}"


@dataclass
class TargetString:
    """Parsed generation output: answer tokens, explanation tokens."""

    answer: list[int]
    explanation: list[int]
    degenerate: bool = False


def parse_output(generated, vocab: Vocab) -> TargetString:
    """Split a generated id sequence at the first "because".

    No separator: the whole output is the answer. Leading separator: empty
    answer, flagged degenerate (never fatal; the failure classifier needs
    these cases).
    """
    ids = [i for i in generated if i not in (PAD_ID, BOS_ID, EOS_ID)]
    if vocab.because_id in ids:
        cut = ids.index(vocab.because_id)
        answer, explanation = ids[:cut], ids[cut + 1 :]
    else:
        answer, explanation = ids, []
    return TargetString(answer, explanation, degenerate=not answer)
