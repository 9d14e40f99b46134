"""Synthetic desk-scale tasks and HANS-style diagnostic data.

Two generators live here. The local-pattern task labels a sequence positive
when a designated token pair appears side by side. The HANS-style probe
builds premise/hypothesis pairs from a tiny grammar so that three shallow
heuristics (lexical overlap, subsequence, constituent) can be tested in
isolation: its training split only contains pairs where "every hypothesis
word appears in the premise" coincides with the gold label, and its
diagnostic split adds the pairs where it does not.

Token ids are small integers; the layout is fixed by :data:`GRAMMAR`.
"""

from __future__ import annotations

import csv
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError

PAD, CLS, SEP = 0, 1, 2
N_SPECIAL = 3

ENTAILMENT = "entailment"
NON_ENTAILMENT = "non_entailment"
POSITIVE = "positive"
NEGATIVE = "negative"

HEURISTICS = ("lexical_overlap", "subsequence", "constituent")
SUBSETS = ("heuristic_entailed", "heuristic_nonentailed")

# label name -> class index, per task
LABELS = {
    "hans-style": (NON_ENTAILMENT, ENTAILMENT),
    "local": (NEGATIVE, POSITIVE),
}


@dataclass(frozen=True)
class ToyGrammar:
    """Vocabulary partitioned into disjoint role classes.

    Nouns fill both agent and patient slots so that word-order swaps stay
    inside the grammar.
    """

    comma: int = 3
    connectives: dict = field(default_factory=lambda: {"if": 4, "and": 5, "near": 6})
    negation: int = 7
    nouns: tuple = tuple(range(8, 18))
    transitive_verbs: tuple = tuple(range(18, 24))
    intransitive_verbs: tuple = tuple(range(24, 30))

    @property
    def size(self) -> int:
        return 30

    def role_classes(self) -> dict[str, tuple[int, ...]]:
        return {
            "special": (PAD, CLS, SEP),
            "punctuation": (self.comma,),
            "connectives": tuple(self.connectives.values()),
            "negation": (self.negation,),
            "nouns": self.nouns,
            "transitive_verbs": self.transitive_verbs,
            "intransitive_verbs": self.intransitive_verbs,
        }


GRAMMAR = ToyGrammar()
IF, AND, NEAR = GRAMMAR.connectives["if"], GRAMMAR.connectives["and"], GRAMMAR.connectives["near"]
COMMA, NOT = GRAMMAR.comma, GRAMMAR.negation


@dataclass(frozen=True)
class Case:
    """One labelled example.

    For pair tasks ``premise``/``hypothesis`` hold the two sentences; the
    local-pattern task stores its single sequence in ``premise`` with an
    empty ``hypothesis``. ``heuristic`` and ``subset`` are ``None`` for cases
    outside the six diagnostic cells.
    """

    premise: tuple[int, ...]
    hypothesis: tuple[int, ...]
    label: str
    heuristic: str | None = None
    subset: str | None = None


DiagnosticCase = Case


@dataclass
class HansCorpus:
    train: list[Case]
    dev: list[Case]
    diagnostic: list[Case]


# ---------------------------------------------------------------------------
# Encoding to model input
# ---------------------------------------------------------------------------


def encode(case: Case, max_len: int) -> np.ndarray:
    """``[CLS] premise [SEP] hypothesis [SEP]`` (or ``[CLS] sequence``), right-padded with PAD."""
    if case.hypothesis:
        ids = [CLS, *case.premise, SEP, *case.hypothesis, SEP]
    else:
        ids = [CLS, *case.premise]
    if len(ids) > max_len:
        raise InputError(f"encoded length {len(ids)} exceeds max_len {max_len}")
    return np.array(ids + [PAD] * (max_len - len(ids)), dtype=np.int64)


def encode_all(cases: Sequence[Case], max_len: int) -> np.ndarray:
    return np.stack([encode(c, max_len) for c in cases]) if cases else np.zeros((0, max_len), dtype=np.int64)


def label_index(label: str, task: str) -> int:
    try:
        return LABELS[task].index(label)
    except ValueError:
        raise InputError(f"label {label!r} is not valid for task {task!r}") from None


def infer_task(cases: Iterable[Case]) -> str:
    for c in cases:
        return "hans-style" if c.label in LABELS["hans-style"] else "local"
    raise InputError("cannot infer task from an empty corpus")


# ---------------------------------------------------------------------------
# Local-pattern task
# ---------------------------------------------------------------------------

LOCAL_ALPHABET = tuple(range(8, 24))
LOCAL_BIGRAM = (8, 9)


def has_bigram(seq: Sequence[int], bigram: tuple[int, int] = LOCAL_BIGRAM) -> bool:
    a, b = bigram
    return any(x == a and y == b for x, y in zip(seq, seq[1:]))


def _local_sequence(rng: np.random.Generator, length: int, positive: bool, bigram) -> tuple[int, ...]:
    a, b = bigram
    alphabet = np.array(LOCAL_ALPHABET)
    while True:
        seq = [int(x) for x in rng.choice(alphabet, size=length)]
        if positive:
            pos = int(rng.integers(0, length - 1))
            seq[pos], seq[pos + 1] = a, b
            return tuple(seq)
        if rng.random() < 0.5:
            # hard negative: both tokens present, never adjacent in order
            i, j = (int(v) for v in rng.choice(length, size=2, replace=False))
            seq[i], seq[j] = a, b
        if not has_bigram(seq, bigram):
            return tuple(seq)


def gen_local_pattern_task(seed: int, size: int, length: int = 15, bigram=LOCAL_BIGRAM) -> list[Case]:
    """Balanced sequences labelled positive iff ``bigram`` occurs adjacently, in order.

    Exactly ``size // 2`` negatives and ``size - size // 2`` positives, shuffled.
    """
    if size <= 0:
        raise InputError(f"size must be positive, got {size}")
    if length < 2:
        raise InputError(f"sequence length must be at least 2, got {length}")
    rng = np.random.default_rng(seed)
    n_neg = size // 2
    labels = [NEGATIVE] * n_neg + [POSITIVE] * (size - n_neg)
    order = rng.permutation(size)
    cases = []
    for idx in order:
        label = labels[idx]
        seq = _local_sequence(rng, length, label == POSITIVE, bigram)
        cases.append(Case(premise=seq, hypothesis=(), label=label))
    return cases


# ---------------------------------------------------------------------------
# HANS-style probe
# ---------------------------------------------------------------------------


def _pick(rng: np.random.Generator, pool: Sequence[int], count: int) -> list[int]:
    return [int(x) for x in rng.choice(np.array(pool), size=count, replace=False)]


def _templates(rng: np.random.Generator, heuristic: str) -> dict[str, tuple[list[int], list[int]]]:
    """Premise/hypothesis for both diagnostic subsets of one heuristic, from fresh words.

    Every hypothesis is built only from premise words.
    """
    g = GRAMMAR
    if heuristic == "lexical_overlap":
        a, b = _pick(rng, g.nouns, 2)
        u, w = _pick(rng, g.intransitive_verbs, 2)
        (v,) = _pick(rng, g.transitive_verbs, 1)
        return {
            # "a slept and b ran" -> "b ran and a slept"
            "heuristic_entailed": ([a, u, AND, b, w], [b, w, AND, a, u]),
            # "a paid b" -> "b paid a"
            "heuristic_nonentailed": ([a, v, b], [b, v, a]),
        }
    if heuristic == "subsequence":
        a, b = _pick(rng, g.nouns, 2)
        (w,) = _pick(rng, g.intransitive_verbs, 1)
        return {
            # "a and b danced" -> "b danced"
            "heuristic_entailed": ([a, AND, b, w], [b, w]),
            # "a near b danced" -> "b danced"
            "heuristic_nonentailed": ([a, NEAR, b, w], [b, w]),
        }
    if heuristic == "constituent":
        a, b, c, e = _pick(rng, g.nouns, 4)
        v1, v2 = _pick(rng, g.transitive_verbs, 2)
        first, second = [a, v1, b], [c, v2, e]
        return {
            # "a saw b and c met e" -> "a saw b"
            "heuristic_entailed": ([*first, AND, *second], list(first)),
            # "if a saw b , c met e" -> "a saw b"
            "heuristic_nonentailed": ([IF, *first, COMMA, *second], list(first)),
        }
    raise InputError(f"unknown heuristic {heuristic!r}")


def _break_overlap(rng: np.random.Generator, premise: list[int], hypothesis: list[int]) -> list[int]:
    """Swap every content word of the hypothesis for one of the same class absent from the premise."""
    g = GRAMMAR
    out = []
    used = set(premise)
    for tok in hypothesis:
        cls = next((c for c in (g.nouns, g.transitive_verbs, g.intransitive_verbs) if tok in c), None)
        if cls is None:
            out.append(tok)
            continue
        fresh = [t for t in cls if t not in used]
        pick = int(rng.choice(fresh))
        used.add(pick)
        out.append(pick)
    return out


def overlaps(case: Case) -> bool:
    """True when every hypothesis token occurs in the premise."""
    vocab = set(case.premise)
    return all(t in vocab for t in case.hypothesis)


def _biased_split(rng: np.random.Generator, size: int) -> list[Case]:
    n_ent = size - size // 2
    labels = [ENTAILMENT] * n_ent + [NON_ENTAILMENT] * (size // 2)
    cases = []
    for idx in rng.permutation(size):
        label = labels[idx]
        heuristic = HEURISTICS[int(rng.integers(len(HEURISTICS)))]
        # only the entailed templates' premises: the heuristic-breaking
        # structures (swap, "near", "if") must stay unseen in training
        premise, hypothesis = _templates(rng, heuristic)["heuristic_entailed"]
        if label == ENTAILMENT:
            cases.append(Case(tuple(premise), tuple(hypothesis), ENTAILMENT, heuristic, "heuristic_entailed"))
        else:
            broken = _break_overlap(rng, premise, hypothesis)
            cases.append(Case(tuple(premise), tuple(broken), NON_ENTAILMENT, heuristic, None))
    return cases


def gen_hans_style(seed: int, per_case_count: int, train_size: int | None = None, dev_size: int | None = None) -> HansCorpus:
    """Generate the biased training/dev splits and the six-cell diagnostic split.

    In the training and dev splits an example is labelled entailment exactly
    when its hypothesis overlaps the premise, so the overlap heuristic is
    never contradicted there. The diagnostic split holds ``per_case_count``
    cases for each (heuristic, subset) cell.
    """
    if per_case_count <= 0:
        raise InputError(f"per_case_count must be positive, got {per_case_count}")
    rng = np.random.default_rng(seed)
    train_size = train_size if train_size is not None else 8 * per_case_count
    dev_size = dev_size if dev_size is not None else 2 * per_case_count
    train = _biased_split(rng, train_size)
    dev = _biased_split(rng, dev_size)
    diagnostic = []
    for heuristic in HEURISTICS:
        for _ in range(per_case_count):
            cells = _templates(rng, heuristic)
            for subset in SUBSETS:
                premise, hypothesis = cells[subset]
                label = ENTAILMENT if subset == "heuristic_entailed" else NON_ENTAILMENT
                diagnostic.append(Case(tuple(premise), tuple(hypothesis), label, heuristic, subset))
    return HansCorpus(train=train, dev=dev, diagnostic=diagnostic)


def is_contiguous_subsequence(needle: Sequence[int], haystack: Sequence[int]) -> bool:
    n = len(needle)
    return any(tuple(haystack[i:i + n]) == tuple(needle) for i in range(len(haystack) - n + 1))


def clause_units(premise: Sequence[int]) -> list[tuple[int, ...]]:
    """Clauses of a toy-grammar premise: split on connectives and commas, drop empties."""
    breaks = {COMMA, IF, AND}
    units, current = [], []
    for tok in premise:
        if tok in breaks:
            if current:
                units.append(tuple(current))
            current = []
        else:
            current.append(tok)
    if current:
        units.append(tuple(current))
    return units


def satisfies_invariant(case: Case) -> bool:
    """Check the structural property a case's heuristic tag promises."""
    if case.heuristic == "lexical_overlap":
        return overlaps(case)
    if case.heuristic == "subsequence":
        return is_contiguous_subsequence(case.hypothesis, case.premise)
    if case.heuristic == "constituent":
        return tuple(case.hypothesis) in clause_units(case.premise)
    return True


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def score_by_heuristic(predictions: Sequence, cases: Sequence[Case]) -> dict[tuple[str, str], float | None]:
    """Accuracy per (heuristic, subset) cell; ``None`` for a cell with no cases.

    ``predictions`` are label names or class indices (0 = non_entailment).
    """
    if len(predictions) != len(cases):
        raise InputError(f"{len(predictions)} predictions for {len(cases)} cases")
    names = LABELS["hans-style"]
    hits: Counter = Counter()
    totals: Counter = Counter()
    for pred, case in zip(predictions, cases):
        if case.heuristic is None or case.subset is None:
            continue
        if not isinstance(pred, str):
            pred = names[int(pred)]
        key = (case.heuristic, case.subset)
        totals[key] += 1
        hits[key] += pred == case.label
    return {
        (h, s): (hits[(h, s)] / totals[(h, s)] if totals[(h, s)] else None)
        for h in HEURISTICS
        for s in SUBSETS
    }


def heuristic_rows(table: dict[tuple[str, str], float | None]) -> list[dict]:
    return [{"heuristic": h, "subset": s, "accuracy": table[(h, s)]} for h in HEURISTICS for s in SUBSETS]


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def format_case(case: Case) -> str:
    return "\t".join(
        [
            case.label,
            case.heuristic or "-",
            case.subset or "-",
            " ".join(str(t) for t in case.premise),
            " ".join(str(t) for t in case.hypothesis),
        ]
    )


def write_corpus(path, cases: Iterable[Case]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for case in cases:
            fh.write(format_case(case) + "\n")
    return path


def _ids(field_text: str, lineno: int) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in field_text.split())
    except ValueError:
        raise FormatError(f"line {lineno}: token ids must be integers, got {field_text!r}") from None


def read_corpus(path) -> list[Case]:
    valid_labels = set(LABELS["hans-style"]) | set(LABELS["local"])
    cases = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            label, heuristic, subset, premise, hypothesis = parts
            if label not in valid_labels:
                raise FormatError(f"{path}:{lineno}: unknown label {label!r}")
            heuristic = None if heuristic == "-" else heuristic
            subset = None if subset == "-" else subset
            if heuristic is not None and heuristic not in HEURISTICS:
                raise FormatError(f"{path}:{lineno}: unknown heuristic {heuristic!r}")
            if subset is not None and subset not in SUBSETS:
                raise FormatError(f"{path}:{lineno}: unknown subset {subset!r}")
            cases.append(Case(_ids(premise, lineno), _ids(hypothesis, lineno), label, heuristic, subset))
    return cases


# ---------------------------------------------------------------------------
# Published HANS TSV files
# ---------------------------------------------------------------------------

HANS_REQUIRED = ("gold_label", "heuristic", "sentence1", "sentence2")
_HANS_LABELS = {"entailment": ENTAILMENT, "non-entailment": NON_ENTAILMENT}
_WORD = re.compile(r"[a-z0-9]+")


def hash_tokenize(text: str, vocab_size: int) -> tuple[int, ...]:
    """Lowercase, split on anything that is not a letter or digit, hash each word into the vocabulary.

    Ids below the special tokens are never produced. This is a throwaway
    tokenizer for plumbing checks: unrelated words can share an id.
    """
    span = vocab_size - N_SPECIAL
    if span <= 0:
        raise InputError(f"vocab_size {vocab_size} leaves no room for words")
    return tuple(N_SPECIAL + zlib.crc32(w.encode("utf-8")) % span for w in _WORD.findall(text.lower()))


def load_hans_tsv(path, vocab_size: int = 64) -> list[Case]:
    """Read a HANS-format TSV; all rows are parsed before anything is returned."""
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = reader.fieldnames or []
        for column in HANS_REQUIRED:
            if column not in header:
                raise FormatError(f"{path}: missing column {column!r}")
        cases = []
        for row in reader:
            lineno = reader.line_num
            raw = (row.get("gold_label") or "").strip()
            if raw not in _HANS_LABELS:
                raise FormatError(f"{path}:{lineno}: unknown label {raw!r}")
            heuristic = (row.get("heuristic") or "").strip()
            if heuristic not in HEURISTICS:
                raise FormatError(f"{path}:{lineno}: unknown heuristic {heuristic!r}")
            label = _HANS_LABELS[raw]
            subset = "heuristic_entailed" if label == ENTAILMENT else "heuristic_nonentailed"
            cases.append(
                Case(
                    hash_tokenize(row["sentence1"] or "", vocab_size),
                    hash_tokenize(row["sentence2"] or "", vocab_size),
                    label,
                    heuristic,
                    subset,
                )
            )
    return cases


def cell_counts(cases: Iterable[Case]) -> dict[str, int]:
    counts: Counter = Counter()
    for c in cases:
        if c.heuristic and c.subset:
            counts[f"{c.heuristic}/{c.subset}"] += 1
    return dict(sorted(counts.items()))


def label_counts(cases: Iterable[Case]) -> dict[str, int]:
    return dict(sorted(Counter(c.label for c in cases).items()))
