"""Synthetic shape scenes with grammar-generated captions and questions.

A scene places 1-3 distinct (shape, color) objects on distinct cells of a
4x4 grid.  Captions follow

    a <color> <shape> [<relation> a <color> <shape>]

and describe the first two objects after sorting by (shape, color); the
relation is read off their cells.  Instruction samples pose a question,
append the short-answer prompt, and supervise a single-word answer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

GRID = 4
SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
RELATIONS = ("above", "below", "left of", "right of")
COUNT_WORDS = ("one", "two", "three")
SHORT_ANSWER_PROMPT = "Answer the question using a single word or phrase."
PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)

_RGB = {"red": (230, 40, 40), "green": (40, 200, 60), "blue": (50, 70, 235)}


def tokenize(text: str) -> list[str]:
    return text.lower().replace("?", " ?").replace(".", " .").split()


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int

    @property
    def sort_key(self):
        return SHAPES.index(self.shape), COLORS.index(self.color)


def relation(first: SceneObject, second: SceneObject) -> str:
    if first.row < second.row:
        return "above"
    if first.row > second.row:
        return "below"
    return "left of" if first.col < second.col else "right of"


def caption_for(scene: tuple[SceneObject, ...]) -> str:
    objs = sorted(scene, key=lambda o: o.sort_key)
    text = f"a {objs[0].color} {objs[0].shape}"
    if len(objs) > 1:
        text += f" {relation(objs[0], objs[1])} a {objs[1].color} {objs[1].shape}"
    return text


def question_templates() -> list[str]:
    out = [f"what color is the {s} ?" for s in SHAPES]
    out += [f"what shape is the {c} one ?" for c in COLORS]
    out.append("how many shapes are there ?")
    return out


def enumerate_sentences() -> list[str]:
    """Every caption, question and answer the grammar can produce."""
    singles = [f"a {c} {s}" for c in COLORS for s in SHAPES]
    pairs = [f"{a} {r} {b}" for a in singles for r in RELATIONS for b in singles]
    return singles + pairs + question_templates() + [SHORT_ANSWER_PROMPT] + list(COLORS + SHAPES + COUNT_WORDS)


class Vocabulary:
    def __init__(self, words):
        self.words = tuple(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ConfigurationError("duplicate vocabulary entries")

    @classmethod
    def from_grammar(cls) -> "Vocabulary":
        words = sorted({w for s in enumerate_sentences() for w in tokenize(s)})
        return cls(SPECIALS + tuple(words))

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad(self) -> int:
        return self.index[PAD]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.index[w] for w in tokenize(text))
        except KeyError as exc:
            raise ConfigurationError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids if self.words[i] not in SPECIALS)


@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray  # (R, R, 3) uint8
    scene: tuple[SceneObject, ...]
    caption: str
    prompt: tuple[int, ...]  # unsupervised ids between <bos> and the answer
    answer: tuple[int, ...]  # supervised ids, followed by <eos>

    def sequence(self, vocab: Vocabulary) -> tuple[list[int], list[bool]]:
        ids = [vocab.bos, *self.prompt, *self.answer, vocab.eos]
        supervised = [False] * (1 + len(self.prompt)) + [True] * (len(self.answer) + 1)
        return ids, supervised


def render(scene, resolution: int = 64) -> np.ndarray:
    if resolution % GRID:
        raise ConfigurationError(f"resolution {resolution} is not divisible by the {GRID}x{GRID} grid")
    cell = resolution / GRID
    img = np.zeros((resolution, resolution, 3), dtype=np.uint8)
    ys, xs = np.mgrid[0:resolution, 0:resolution] + 0.5
    for obj in scene:
        cy, cx = (obj.row + 0.5) * cell, (obj.col + 0.5) * cell
        dy, dx = ys - cy, xs - cx
        # areas differ (about 0.25, 0.40, 0.64 of a cell) so even fully pooled cells tell shapes apart
        if obj.shape == "circle":
            mask = dy**2 + dx**2 <= (0.28 * cell) ** 2
        elif obj.shape == "square":
            mask = (np.abs(dy) <= 0.4 * cell) & (np.abs(dx) <= 0.4 * cell)
        else:
            top, height = -0.45 * cell, 0.9 * cell
            frac = (dy - top) / height
            mask = (frac >= 0) & (frac <= 1) & (np.abs(dx) <= 0.45 * cell * frac)
        img[mask] = _RGB[obj.color]
    return img


def random_scene(rng: np.random.Generator) -> tuple[SceneObject, ...]:
    n = int(rng.integers(1, 4))
    kinds = list(itertools.product(SHAPES, COLORS))
    picked = rng.choice(len(kinds), size=n, replace=False)
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    return tuple(SceneObject(kinds[k][0], kinds[k][1], int(c) // GRID, int(c) % GRID) for k, c in zip(picked, cells))


def random_question(scene, rng: np.random.Generator) -> tuple[str, str]:
    shapes = [o.shape for o in scene]
    colors = [o.color for o in scene]
    options = []
    for o in scene:
        if shapes.count(o.shape) == 1:
            options.append((f"what color is the {o.shape} ?", o.color))
        if colors.count(o.color) == 1:
            options.append((f"what shape is the {o.color} one ?", o.shape))
    options.append(("how many shapes are there ?", COUNT_WORDS[len(scene) - 1]))
    return options[int(rng.integers(len(options)))]


def make_dataset(n: int, seed: int, vocab: Vocabulary | None = None, resolution: int = 64,
                 instruct: bool = False, caption_fraction: float = 0.5) -> list[SceneSample]:
    """Deterministic scenes for ``seed``.

    With ``instruct`` set, a ``1 - caption_fraction`` share of the samples
    become question/short-answer pairs; the rest stay plain captions.
    """
    if n < 1:
        raise ConfigurationError("dataset size must be at least 1")
    vocab = vocab or Vocabulary.from_grammar()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        scene = random_scene(rng)
        caption = caption_for(scene)
        prompt, answer = (), vocab.encode(caption)
        if instruct and rng.random() >= caption_fraction:
            question, reply = random_question(scene, rng)
            prompt = vocab.encode(f"{question} {SHORT_ANSWER_PROMPT}")
            answer = vocab.encode(reply)
        out.append(SceneSample(render(scene, resolution), scene, caption, prompt, answer))
    return out
