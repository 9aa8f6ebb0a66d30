"""Synthetic glyph-grid world: images, task samples, sequence formatting.

Sixteen fixed 4x4 glyph bitmaps (named 'A'..'P', pairwise Hamming distance
at least 3) are stamped into the cells of a 4x4 grid on a 16x16 canvas. Four
task families are drawn from it: perception and comprehension supervise
text, generation and editing supervise a target image. Grounding boxes are
absolute pixel coordinates serialized as "<x0,y0,x1,y1>".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BOI, BOS, EOI, EOS, IMG_SLOT, InterleavedSequence, Vocabulary
from .config import rng_for
from .errors import ContractError

CELL = 4
GRID_CELLS = 4
CANVAS = CELL * GRID_CELLS

_GLYPH_ROWS = {
    "A": (".#..", "..#.", "#..#", "####"),
    "B": ("###.", "##..", "##..", "#.##"),
    "C": ("##..", "###.", "#.##", ".#.#"),
    "D": ("#.##", ".#.#", "..##", "...."),
    "E": (".##.", "..##", ".###", "##.."),
    "F": ("##.#", "..##", "#...", "...#"),
    "G": ("...#", "#.#.", "#.##", "#..."),
    "H": ("#...", ".###", "...#", "#..#"),
    "I": (".##.", ".#.#", "..##", "###."),
    "J": (".#..", "##.#", "##.#", "..##"),
    "K": (".#..", ".#..", "..##", "#.##"),
    "L": ("#.#.", "..#.", ".#.#", "..#."),
    "M": ("##.#", ".###", "....", ".##."),
    "N": ("..##", ".##.", "...#", "#.##"),
    "O": ("##.#", "#...", "..#.", "##.#"),
    "P": ("..##", "..#.", "#.##", ".###"),
}

GLYPHS = {
    name: np.array([[1.0 if ch == "#" else 0.0 for ch in row] for row in rows])
    for name, rows in _GLYPH_ROWS.items()
}
GLYPH_NAMES = sorted(GLYPHS)

TASKS = ("perception", "comprehension", "generation", "editing")

PERCEPTION_TEMPLATES = (
    "What is the text in <mask> in this image?",
    "Where is <text> in this image?",
    "Extract all the text in this image.",
    "Locate all the text in this image.",
    "Locate and extract all the text in this image.",
)
GENERATION_TEMPLATE = "Generate an image according to the caption."
EDITING_TEMPLATE = "Fill the masked part in this image with <text>"
QA_PREFIX = "Answer the following question based on the image. "
QA_QUESTION = " Question: "
QA_ANSWER = " Answer: "
COMPREHENSION_QUESTIONS = (
    "How many glyphs does this image contain?",
    "Which glyph comes first in reading order?",
)


def cell_box(row: int, col: int) -> tuple[int, int, int, int]:
    """Pixel box of a grid cell; x runs along columns, y along rows."""
    return (col * CELL, row * CELL, col * CELL + CELL, row * CELL + CELL)


def box_str(box) -> str:
    x0, y0, x1, y1 = box
    return f"<{x0},{y0},{x1},{y1}>"


def render(spec) -> np.ndarray:
    """Stamp glyphs onto a black canvas; placements must not share a cell."""
    img = np.zeros((CANVAS, CANVAS))
    used = set()
    for name, row, col in spec:
        if name not in GLYPHS:
            raise ContractError(f"unknown glyph {name!r}")
        if not (0 <= row < GRID_CELLS and 0 <= col < GRID_CELLS):
            raise ContractError(f"cell ({row}, {col}) outside the {GRID_CELLS}x{GRID_CELLS} grid")
        if (row, col) in used:
            raise ContractError(f"cell ({row}, {col}) placed twice")
        used.add((row, col))
        img[row * CELL:(row + 1) * CELL, col * CELL:(col + 1) * CELL] = GLYPHS[name]
    return img


@dataclass
class SyntheticSample:
    task: str
    input_image: np.ndarray
    instruction: str
    task_label: int
    answer: str | None = None
    target_image: np.ndarray | None = None
    boxes: list | None = None
    placements: list = field(default_factory=list)


def _place(rng: np.random.Generator, k: int):
    """k distinct glyphs at k distinct cells, in reading order."""
    names = [GLYPH_NAMES[i] for i in rng.choice(len(GLYPH_NAMES), size=k, replace=False)]
    cells = rng.choice(GRID_CELLS * GRID_CELLS, size=k, replace=False)
    placements = [(name, int(c) // GRID_CELLS, int(c) % GRID_CELLS)
                  for name, c in zip(names, cells)]
    placements.sort(key=lambda p: (p[1], p[2]))
    return placements


def _perception(rng: np.random.Generator) -> SyntheticSample:
    which = int(rng.integers(len(PERCEPTION_TEMPLATES)))
    template = PERCEPTION_TEMPLATES[which]
    # the two locate-everything answers spell out one box per glyph, so cap
    # their glyph count to keep every sequence inside the LM position budget
    max_glyphs = 2 if which >= 3 else 4
    placements = _place(rng, int(rng.integers(1, max_glyphs + 1)))
    img = render(placements)
    if which == 0:
        name, row, col = placements[int(rng.integers(len(placements)))]
        box = cell_box(row, col)
        instruction = template.replace("<mask>", box_str(box))
        answer, boxes = name, [box]
    elif which == 1:
        name, row, col = placements[int(rng.integers(len(placements)))]
        box = cell_box(row, col)
        instruction = template.replace("<text>", name)
        answer, boxes = box_str(box), [box]
    elif which == 2:
        instruction = template
        answer, boxes = "".join(p[0] for p in placements), None
    elif which == 3:
        instruction = template
        boxes = [cell_box(r, c) for _, r, c in placements]
        answer = " ".join(box_str(b) for b in boxes)
    else:
        instruction = template
        boxes = [cell_box(r, c) for _, r, c in placements]
        answer = " ".join(f"{p[0]}{box_str(b)}" for p, b in zip(placements, boxes))
    return SyntheticSample("perception", img, instruction, 1, answer=answer,
                           boxes=boxes, placements=placements)


def _comprehension(rng: np.random.Generator) -> SyntheticSample:
    placements = _place(rng, int(rng.integers(1, 5)))
    img = render(placements)
    which = int(rng.integers(len(COMPREHENSION_QUESTIONS)))
    instruction = COMPREHENSION_QUESTIONS[which]
    answer = str(len(placements)) if which == 0 else placements[0][0]
    return SyntheticSample("comprehension", img, instruction, 1, answer=answer,
                           placements=placements)


def _generation(rng: np.random.Generator) -> SyntheticSample:
    n_runs = int(rng.integers(1, 3))
    rows = rng.choice(GRID_CELLS, size=n_runs, replace=False)
    names = list(GLYPH_NAMES)
    parts, placements = [], []
    for row in sorted(int(r) for r in rows):
        length = int(rng.integers(1, 4))
        col = int(rng.integers(0, GRID_CELLS - length + 1))
        chosen = [names.pop(int(rng.integers(len(names)))) for _ in range(length)]
        parts.append(f"{''.join(chosen)} at ({row},{col})")
        placements += [(ch, row, col + i) for i, ch in enumerate(chosen)]
    caption = "text: " + "; ".join(parts)
    return SyntheticSample("generation", np.zeros((CANVAS, CANVAS)),
                           f"{GENERATION_TEMPLATE} {caption}", 0,
                           target_image=render(placements), placements=placements)


def _editing(rng: np.random.Generator) -> SyntheticSample:
    placements = _place(rng, int(rng.integers(1, 5)))
    target = render(placements)
    name, row, col = placements[int(rng.integers(len(placements)))]
    masked = target.copy()
    masked[row * CELL:(row + 1) * CELL, col * CELL:(col + 1) * CELL] = 0.0
    instruction = EDITING_TEMPLATE.replace("<text>", name)
    return SyntheticSample("editing", masked, instruction, 0, target_image=target,
                           boxes=[cell_box(row, col)], placements=placements)


_MAKERS = {"perception": _perception, "comprehension": _comprehension,
           "generation": _generation, "editing": _editing}


def make_sample(task: str, rng: np.random.Generator) -> SyntheticSample:
    if task not in _MAKERS:
        raise ContractError(f"task must be one of {TASKS}, got {task!r}")
    return _MAKERS[task](rng)


def format_sequence(sample: SyntheticSample, vocab: Vocabulary, queries: int,
                    image_slots: int) -> InterleavedSequence:
    """Tokenize one sample into the training-time interleaved stream.

    Text tasks wrap the question between the QA prefix and the answer and
    supervise the answer characters plus the closing <EOS>; image tasks
    bracket the instruction between the input and target image spans and
    supervise the target span's slots.
    """
    input_slots = [BOI] + [IMG_SLOT] * queries + [EOI]
    if sample.task_label == 1:
        head = [BOS] + vocab.encode(QA_PREFIX)
        span_start = len(head) + 1
        mid = vocab.encode(QA_QUESTION + sample.instruction + QA_ANSWER)
        answer_ids = vocab.encode(sample.answer) + [EOS]
        tokens = head + input_slots + mid + answer_ids
        first = len(tokens) - len(answer_ids)
        n_t = list(range(first, len(tokens)))
        return InterleavedSequence(
            tokens=tokens, n_t=n_t, text_targets=list(answer_ids),
            input_image=sample.input_image, input_span=(span_start, span_start + queries),
            task_label=1)
    head = [BOS]
    span_start = len(head) + 1
    mid = vocab.encode(f" {sample.instruction} ")
    tokens = head + input_slots + mid + [BOI] + [IMG_SLOT] * image_slots + [EOI] + [EOS]
    slot0 = len(head) + len(input_slots) + len(mid) + 1
    return InterleavedSequence(
        tokens=tokens, n_i=list(range(slot0, slot0 + image_slots)),
        input_image=sample.input_image, input_span=(span_start, span_start + queries),
        target_image=sample.target_image, task_label=0)


def filter_caption(text: str, mode: str = "words"):
    """(keep, reason) per the dataset-cleaning rule: length cap and ASCII only."""
    if mode not in ("words", "chars"):
        raise ContractError(f"mode must be words or chars, got {mode!r}")
    if any(ord(ch) > 127 for ch in text):
        return False, "non-ascii"
    count = len(text.split()) if mode == "words" else len(text)
    if count > 100:
        return False, "too-long"
    return True, None


def default_vocabulary() -> Vocabulary:
    """Every character the task generators can emit, plus digits for safety."""
    chars = set("0123456789") | set(GLYPH_NAMES)
    for text in PERCEPTION_TEMPLATES + COMPREHENSION_QUESTIONS + (
            GENERATION_TEMPLATE, EDITING_TEMPLATE, QA_PREFIX, QA_QUESTION, QA_ANSWER,
            "text: ; at (),", "<>"):
        chars |= set(text)
    return Vocabulary(chars)


def sample_at(seed: int, index: int) -> SyntheticSample:
    """Pure function of (seed, index); tasks cycle through the four families."""
    task = TASKS[index % len(TASKS)]
    return make_sample(task, rng_for(seed, f"sample/{index}"))


def make_dataset(seed: int, size: int) -> list[SyntheticSample]:
    return [sample_at(seed, i) for i in range(size)]


def _image_to_list(img):
    return None if img is None else [int(v) for v in np.asarray(img).reshape(-1)]


def _image_from_list(values):
    if values is None:
        return None
    return np.array(values, dtype=np.float64).reshape(CANVAS, CANVAS)


def write_dataset(samples, path) -> None:
    """JSON-lines, one sample per line, byte-stable for a fixed input."""
    lines = []
    for s in samples:
        record = {
            "task": s.task,
            "instruction": s.instruction,
            "answer": s.answer,
            "task_label": s.task_label,
            "boxes": None if s.boxes is None else [list(b) for b in s.boxes],
            "placements": [[name, row, col] for name, row, col in s.placements],
            "input_image": _image_to_list(s.input_image),
            "target_image": _image_to_list(s.target_image),
        }
        lines.append(json.dumps(record, sort_keys=True, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> list[SyntheticSample]:
    samples = []
    for line in Path(path).read_text().splitlines():
        if not line:
            continue
        r = json.loads(line)
        samples.append(SyntheticSample(
            task=r["task"],
            input_image=_image_from_list(r["input_image"]),
            instruction=r["instruction"],
            task_label=r["task_label"],
            answer=r["answer"],
            target_image=_image_from_list(r["target_image"]),
            boxes=None if r["boxes"] is None else [tuple(b) for b in r["boxes"]],
            placements=[(name, row, col) for name, row, col in r["placements"]],
        ))
    return samples


def write_pgm(img: np.ndarray, path) -> None:
    """8-bit binary PGM dump of a [0,1] image, for eyeballing."""
    arr = np.asarray(img)
    data = (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, pixels = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ContractError("not a binary PGM file")
    width, height = (int(v) for v in dims.split())
    arr = np.frombuffer(pixels, dtype=np.uint8, count=width * height)
    return arr.reshape(height, width).astype(np.float64) / float(int(maxval))
