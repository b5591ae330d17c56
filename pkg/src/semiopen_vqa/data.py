"""Procedural grid-world VQA data: generation, encoding and the dataset file format.

Each image is a ``G x G`` grid; a cell is empty or holds one coloured shape.
Questions come from three templates:

* closed  ``is there a <color> <shape>``  -> yes / no
* open    ``what color is the <shape>``   -> colour (shape is unique in the image)
* open    ``how many <shape>s``           -> count

Dataset file (UTF-8, one JSON object per line)::

    {"format": "semiopen-vqa-dataset", "version": 1, "grid_size": G, "answers": [...]}
    {"image": "cr -- ...", "question": "...", "tokens": [...], "answer": "...", "qtype": "closed"}
    ...

``image`` lists the cells row-major, space separated; each cell is a shape code
(``c``ircle, ``s``quare, ``t``riangle) followed by a colour code (``r``ed,
``g``reen, ``b``lue, ``y``ellow), or ``--`` when empty.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
SHAPE_CODES = {"circle": "c", "square": "s", "triangle": "t"}
COLOR_CODES = {"red": "r", "green": "g", "blue": "b", "yellow": "y"}
CELL_FEATURES = len(SHAPES) + len(COLORS)

FORMAT_NAME = "semiopen-vqa-dataset"
FORMAT_VERSION = 1

PAD = "<pad>"
QUESTION_TOKENS = (PAD, "is", "there", "a", "what", "color", "the", "how", "many") + COLORS + SHAPES \
    + tuple(s + "s" for s in SHAPES)


class DatasetFormatError(ValueError):
    pass


Cell = tuple  # (shape, color) or () for an empty cell


@dataclass(frozen=True)
class ImageGrid:
    grid_size: int
    cells: tuple[Cell, ...]

    def __post_init__(self):
        if len(self.cells) != self.grid_size ** 2:
            raise ValueError(f"grid of size {self.grid_size} needs {self.grid_size ** 2} cells, got {len(self.cells)}")

    def features(self, dtype=np.float64) -> np.ndarray:
        """One-hot ``(G*G, 7)`` matrix: shape block then colour block; empty cells are zero."""
        out = np.zeros((len(self.cells), CELL_FEATURES), dtype=dtype)
        for i, cell in enumerate(self.cells):
            if cell:
                out[i, SHAPES.index(cell[0])] = 1.0
                out[i, len(SHAPES) + COLORS.index(cell[1])] = 1.0
        return out

    def to_codes(self) -> str:
        return " ".join(SHAPE_CODES[c[0]] + COLOR_CODES[c[1]] if c else "--" for c in self.cells)

    @classmethod
    def from_codes(cls, text: str, grid_size: int) -> "ImageGrid":
        shape_of = {v: k for k, v in SHAPE_CODES.items()}
        color_of = {v: k for k, v in COLOR_CODES.items()}
        cells = []
        for code in text.split():
            if code == "--":
                cells.append(())
            elif len(code) == 2 and code[0] in shape_of and code[1] in color_of:
                cells.append((shape_of[code[0]], color_of[code[1]]))
            else:
                raise ValueError(f"bad cell code {code!r}")
        return cls(grid_size, tuple(cells))


@dataclass(frozen=True)
class AnswerVocabulary:
    answers: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.answers[:2] != ("yes", "no"):
            raise ValueError("answer vocabulary must start with 'yes', 'no'")
        if len(set(self.answers)) != len(self.answers):
            raise ValueError("duplicate answers in vocabulary")
        object.__setattr__(self, "index", {a: i for i, a in enumerate(self.answers)})

    @classmethod
    def for_grid(cls, grid_size: int) -> "AnswerVocabulary":
        counts = tuple(str(k) for k in range(grid_size * grid_size + 1))
        return cls(("yes", "no") + COLORS + counts)

    def __len__(self) -> int:
        return len(self.answers)

    def encode(self, answer: str) -> int:
        try:
            return self.index[answer]
        except KeyError:
            raise KeyError(f"answer {answer!r} not in vocabulary") from None

    def decode(self, idx: int) -> str:
        return self.answers[idx]

    @property
    def closed_classes(self) -> list[int]:
        return [0, 1]

    @property
    def open_classes(self) -> list[int]:
        return list(range(2, len(self.answers)))


@dataclass(frozen=True)
class QuestionVocabulary:
    tokens: tuple[str, ...] = QUESTION_TOKENS

    @property
    def pad_id(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown question token {token!r}") from None

    def decode(self, idx: int) -> str:
        return self.tokens[idx]


@dataclass(frozen=True)
class VqaSample:
    image: ImageGrid
    question_text: str
    question_tokens: tuple[str, ...]
    answer: str
    answer_class: int
    qtype: str  # "closed" | "open"


# ---------------------------------------------------------------- generation

def _place(rng: random.Random, cells: list, free: list[int], objects: list[tuple[str, str]]) -> None:
    for obj in objects:
        cells[free.pop(rng.randrange(len(free)))] = obj


def _distractors(rng: random.Random, n: int, allowed: list[tuple[str, str]]) -> list[tuple[str, str]]:
    return [allowed[rng.randrange(len(allowed))] for _ in range(n)]


def generate_dataset(n_samples: int, grid_size: int = 4, seed: int = 0, max_count: int = 6,
                     max_distractors: int = 6) -> tuple[list[VqaSample], AnswerVocabulary]:
    """Generate ``n_samples`` question/image pairs whose answers hold by construction.

    Question type is a fair coin.  Closed answers are a fair yes/no coin.  Open
    answers are drawn uniformly from the colours and the counts
    ``0..min(max_count, G*G)``, and the image is then built around the answer.
    Only integer draws from :class:`random.Random` are used.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    vocab = AnswerVocabulary.for_grid(grid_size)
    rng = random.Random(seed)
    n_cells = grid_size * grid_size
    k_max = min(max_count, n_cells)
    all_objects = [(s, c) for s in SHAPES for c in COLORS]
    samples = []
    for _ in range(n_samples):
        cells: list = [()] * n_cells
        free = list(range(n_cells))
        if rng.randrange(2) == 0:
            shape = SHAPES[rng.randrange(len(SHAPES))]
            color = COLORS[rng.randrange(len(COLORS))]
            yes = rng.randrange(2) == 0
            targets = [(shape, color)] * (1 + rng.randrange(min(3, n_cells))) if yes else []
            _place(rng, cells, free, targets)
            others = [o for o in all_objects if o != (shape, color)]
            n_extra = rng.randrange(min(max_distractors, len(free)) + 1)
            _place(rng, cells, free, _distractors(rng, n_extra, others))
            text = f"is there a {color} {shape}"
            answer, qtype = ("yes" if yes else "no"), "closed"
        else:
            pick = rng.randrange(len(COLORS) + k_max + 1)
            shape = SHAPES[rng.randrange(len(SHAPES))]
            others = [o for o in all_objects if o[0] != shape]
            if pick < len(COLORS):
                answer = COLORS[pick]
                _place(rng, cells, free, [(shape, answer)])
                text = f"what color is the {shape}"
            else:
                k = pick - len(COLORS)
                _place(rng, cells, free, [(shape, COLORS[rng.randrange(len(COLORS))]) for _ in range(k)])
                answer = str(k)
                text = f"how many {shape}s"
            n_extra = rng.randrange(min(max_distractors, len(free)) + 1)
            _place(rng, cells, free, _distractors(rng, n_extra, others))
            qtype = "open"
        samples.append(VqaSample(ImageGrid(grid_size, tuple(cells)), text, tuple(text.split()),
                                 answer, vocab.encode(answer), qtype))
    return samples, vocab


# ----------------------------------------------------------------- encoding

@dataclass
class EncodedSample:
    image: np.ndarray          # (N, CELL_FEATURES)
    question_ids: np.ndarray   # (M,)
    answer: int
    closed: bool
    truncated: bool


def encode_question(tokens, qvocab: QuestionVocabulary, max_tokens: int) -> tuple[np.ndarray, bool]:
    ids = [qvocab.encode(t) for t in tokens]
    truncated = len(ids) > max_tokens
    if truncated:
        log.warning("question truncated from %d to %d tokens", len(ids), max_tokens)
        ids = ids[:max_tokens]
    ids += [qvocab.pad_id] * (max_tokens - len(ids))
    return np.asarray(ids, dtype=np.int64), truncated


def decode_question(ids, qvocab: QuestionVocabulary) -> tuple[str, ...]:
    return tuple(qvocab.decode(int(i)) for i in ids if int(i) != qvocab.pad_id)


def encode_sample(s: VqaSample, vocab: AnswerVocabulary, max_tokens: int,
                  qvocab: QuestionVocabulary | None = None) -> EncodedSample:
    qvocab = qvocab or QuestionVocabulary()
    ids, truncated = encode_question(s.question_tokens, qvocab, max_tokens)
    return EncodedSample(s.image.features(), ids, vocab.encode(s.answer), s.qtype == "closed", truncated)


@dataclass
class EncodedDataset:
    images: np.ndarray     # (S, N, F)
    questions: np.ndarray  # (S, M) int64
    answers: np.ndarray    # (S,) int64
    closed: np.ndarray     # (S,) bool

    def __len__(self) -> int:
        return len(self.answers)

    def subset(self, idx) -> "EncodedDataset":
        return EncodedDataset(self.images[idx], self.questions[idx], self.answers[idx], self.closed[idx])


def encode_dataset(samples, vocab: AnswerVocabulary, max_tokens: int,
                   qvocab: QuestionVocabulary | None = None) -> EncodedDataset:
    enc = [encode_sample(s, vocab, max_tokens, qvocab) for s in samples]
    if not enc:
        raise ValueError("cannot encode an empty dataset")
    return EncodedDataset(
        np.stack([e.image for e in enc]),
        np.stack([e.question_ids for e in enc]),
        np.asarray([e.answer for e in enc], dtype=np.int64),
        np.asarray([e.closed for e in enc], dtype=bool),
    )


# -------------------------------------------------------------------- files

def save_dataset(samples, vocab: AnswerVocabulary, path) -> None:
    grid = samples[0].image.grid_size if samples else 0
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "grid_size": grid,
              "answers": list(vocab.answers)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            rec = {"image": s.image.to_codes(), "question": s.question_text,
                   "tokens": list(s.question_tokens), "answer": s.answer, "qtype": s.qtype}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> tuple[list[VqaSample], AnswerVocabulary]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].strip():
        raise DatasetFormatError(f"{path}: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DatasetFormatError(f"{path}: missing header (line 1 is not a header record)") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{path}: missing header")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {header.get('version')!r} "
                                 f"(expected {FORMAT_VERSION})")
    vocab = AnswerVocabulary(tuple(header["answers"]))
    grid = int(header["grid_size"])
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image = ImageGrid.from_codes(rec["image"], grid)
            qtype = rec["qtype"]
            if qtype not in ("closed", "open"):
                raise ValueError(f"bad qtype {qtype!r}")
            samples.append(VqaSample(image, rec["question"], tuple(rec["tokens"]), rec["answer"],
                                     vocab.encode(rec["answer"]), qtype))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{path}: malformed record on line {lineno}: {exc}") from None
    return samples, vocab
