"""Vision encoder, query resampler, and causal LM over interleaved sequences.

A sequence mixes character tokens with bracketed image spans. An input image
enters as resampled vision tokens spliced over its placeholder slots; a
target image span contributes K_img slot positions whose hidden states, sent
through the condition head, drive the diffusion decoder. Text supervision
lives on N_T positions (teacher-forced: the logits for position t come from
the hidden state at t-1), image supervision on N_I.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import DiffusionHead
from .errors import ConfigError, ContractError, SequenceError, ShapeError, VocabularyError
from .layers import Affine, CrossBlock, Linear, Module, SelfBlock, norm, prefixed

SPECIAL_TOKENS = ("<PAD>", "<BOS>", "<EOS>", "<BOI>", "<EOI>", "<IMG_SLOT>")
PAD, BOS, EOS, BOI, EOI, IMG_SLOT = range(6)


class Vocabulary:
    """Character-level vocabulary with six reserved leading ids."""

    def __init__(self, chars):
        ordered = sorted(set(chars))
        for ch in ordered:
            if len(ch) != 1:
                raise VocabularyError(f"char tokens must be single characters, got {ch!r}")
        self.tokens = list(SPECIAL_TOKENS) + ordered
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            if ch not in self.index:
                raise VocabularyError(f"character {ch!r} not in vocabulary")
            ids.append(self.index[ch])
        return ids

    def decode(self, ids, keep_specials: bool = False) -> str:
        parts = []
        for i in ids:
            tok = self.tokens[i]
            if i < len(SPECIAL_TOKENS):
                if keep_specials:
                    parts.append(tok)
            else:
                parts.append(tok)
        return "".join(parts)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        if lines[:6] != list(SPECIAL_TOKENS):
            raise VocabularyError(f"vocabulary file must start with {SPECIAL_TOKENS}")
        vocab = cls.__new__(cls)
        vocab.tokens = lines
        vocab.index = {tok: i for i, tok in enumerate(lines)}
        if len(vocab.index) != len(lines):
            raise VocabularyError("vocabulary file contains duplicate tokens")
        return vocab


@dataclass
class InterleavedSequence:
    """One token stream with text supervision (N_T) and image supervision (N_I).

    input_span marks the slot positions [start, end) holding the input
    image's resampled tokens; n_i lists the target span's slot positions.
    """

    tokens: list[int]
    n_t: list[int] = field(default_factory=list)
    text_targets: list[int] = field(default_factory=list)
    n_i: list[int] = field(default_factory=list)
    input_image: np.ndarray | None = None
    input_span: tuple[int, int] | None = None
    target_image: np.ndarray | None = None
    task_label: int | None = None
    truncated: bool = False
    generated_image: np.ndarray | None = None


def validate_sequence(seq: InterleavedSequence, image_slots: int) -> None:
    """Structural checks; raises SequenceError on a malformed stream."""
    tokens = seq.tokens
    length = len(tokens)
    if length == 0:
        raise SequenceError("empty token stream")
    if set(seq.n_t) & set(seq.n_i):
        raise SequenceError("text and image supervision positions overlap")
    if len(seq.n_t) != len(seq.text_targets):
        raise SequenceError("text targets misaligned with supervised positions")
    if any(i < 1 or i >= length for i in seq.n_t):
        raise SequenceError("supervised text position out of range (0 cannot be predicted)")

    spans = []
    at = 0
    while at < length:
        tok = tokens[at]
        if tok == BOI:
            end = at + 1
            while end < length and tokens[end] == IMG_SLOT:
                end += 1
            if end >= length or tokens[end] != EOI:
                raise SequenceError(f"image span at {at} lacks its closing delimiter")
            spans.append((at + 1, end))
            at = end + 1
            continue
        if tok in (EOI, IMG_SLOT):
            raise SequenceError(f"stray image token at position {at}")
        at += 1

    input_spans = [s for s in spans if s == seq.input_span]
    target_spans = [s for s in spans if s != seq.input_span]
    if seq.input_span is not None and not input_spans:
        raise SequenceError("declared input span does not match any image span")
    if len(target_spans) > 1:
        raise SequenceError("more than one target image span")
    if seq.n_i:
        if not target_spans:
            raise SequenceError("image supervision positions without a target span")
        start, end = target_spans[0]
        if end - start != image_slots:
            raise SequenceError(
                f"target span carries {end - start} slots, expected {image_slots}")
        if seq.n_i != list(range(start, end)):
            raise SequenceError("n_i must cover exactly the target span's slots")
        if seq.target_image is None:
            raise SequenceError("image supervision requires a target image")
    elif target_spans:
        raise SequenceError("target image span present but n_i is empty")


class VisionEncoder(Module):
    """Patch embedding plus learned positions and self-attention blocks."""

    def __init__(self, grid: int, channels: int, patch: int, dim: int, heads: int,
                 blocks: int, rng: np.random.Generator):
        if grid % patch != 0:
            raise ConfigError(f"patch {patch} must divide grid {grid}")
        self.grid = grid
        self.channels = channels
        self.patch = patch
        n_tokens = (grid // patch) ** 2
        self.embed = Linear(patch * patch * channels, dim, rng)
        self.pos = T.Tensor(rng.normal(0.0, 0.02, size=(n_tokens, dim)), requires_grad=True)
        self.blocks = [SelfBlock(dim, heads, rng) for _ in range(blocks)]

    def patchify(self, img: np.ndarray) -> np.ndarray:
        arr = np.asarray(img, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        g = arr.shape[0]
        if arr.shape[1] != g or arr.shape[2] != self.channels:
            raise ShapeError(f"expected square {self.channels}-channel image, got {arr.shape}")
        if g % self.patch != 0:
            raise ConfigError(f"image side {g} not divisible by patch {self.patch}")
        side = g // self.patch
        tiles = arr.reshape(side, self.patch, side, self.patch, self.channels)
        return tiles.transpose(0, 2, 1, 3, 4).reshape(side * side,
                                                      self.patch * self.patch * self.channels)

    def encode_image(self, img: np.ndarray) -> T.Tensor:
        patches = self.patchify(img)
        n = patches.shape[0]
        if n > self.pos.shape[0]:
            raise ConfigError(f"image yields {n} patches, built for {self.pos.shape[0]}")
        x = T.add(self.embed(T.Tensor(patches)), T.narrow_rows(self.pos, 0, n))
        for block in self.blocks:
            x = block(x)
        return x

    def forward(self, img):
        return self.encode_image(img)

    def named_params(self):
        yield from prefixed("embed", self.embed)
        yield "pos", self.pos
        for i, block in enumerate(self.blocks):
            yield from prefixed(f"block{i}", block)


class Resampler(Module):
    """K learned queries cross-attending to however many vision tokens."""

    def __init__(self, queries: int, dim: int, heads: int, blocks: int,
                 rng: np.random.Generator):
        self.queries = T.Tensor(rng.normal(0.0, 0.02, size=(queries, dim)),
                                requires_grad=True)
        self.blocks = [CrossBlock(dim, heads, rng) for _ in range(blocks)]

    def resample(self, vision_tokens: T.Tensor) -> T.Tensor:
        if vision_tokens.shape[0] < 1:
            raise ContractError("resampler needs at least one vision token")
        x = self.queries
        for block in self.blocks:
            x = block(x, vision_tokens)
        return x

    def forward(self, vision_tokens):
        return self.resample(vision_tokens)

    def named_params(self):
        yield "queries", self.queries
        for i, block in enumerate(self.blocks):
            yield from prefixed(f"block{i}", block)


class CausalLM(Module):
    """Decoder-only LM emitting text logits at N_T and condition vectors at N_I."""

    def __init__(self, vocab_size: int, dim: int, heads: int, blocks: int,
                 cond_dim: int, image_slots: int, max_len: int,
                 rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.image_slots = image_slots
        self.max_len = max_len
        self.embedding = T.Tensor(rng.normal(0.0, 0.02, size=(vocab_size, dim)),
                                  requires_grad=True)
        self.pos = T.Tensor(rng.normal(0.0, 0.02, size=(max_len, dim)), requires_grad=True)
        self.blocks = [SelfBlock(dim, heads, rng, causal=True) for _ in range(blocks)]
        self.final_norm = Affine(dim)
        self.text_head = Linear(dim, vocab_size, rng)
        self.cond_head = Linear(dim, cond_dim, rng)

    def hidden_states(self, seq: InterleavedSequence,
                      vision_tokens: T.Tensor | None = None) -> T.Tensor:
        length = len(seq.tokens)
        if length > self.max_len:
            raise SequenceError(f"sequence length {length} exceeds maximum {self.max_len}")
        emb = T.take_rows(self.embedding, seq.tokens)
        if seq.input_span is not None:
            if vision_tokens is None:
                raise SequenceError("sequence declares an input image but none was encoded")
            start, end = seq.input_span
            if end - start != vision_tokens.shape[0]:
                raise SequenceError(
                    f"input span holds {end - start} slots, got {vision_tokens.shape[0]} tokens")
            emb = T.concat_rows([T.narrow_rows(emb, 0, start), vision_tokens,
                                 T.narrow_rows(emb, end, length - end)])
        x = T.add(emb, T.narrow_rows(self.pos, 0, length))
        for block in self.blocks:
            x = block(x)
        return norm(x, self.final_norm)

    def lm_forward(self, seq: InterleavedSequence,
                   vision_tokens: T.Tensor | None = None) -> dict:
        validate_sequence(seq, self.image_slots)
        hidden = self.hidden_states(seq, vision_tokens)
        out = {"text_logits": None, "image_conditions": None}
        if seq.n_t:
            prior = [i - 1 for i in seq.n_t]
            out["text_logits"] = self.text_head(T.take_rows(hidden, prior))
        if seq.n_i:
            out["image_conditions"] = self.cond_head(T.take_rows(hidden, seq.n_i))
        return out

    def forward(self, seq):
        return self.lm_forward(seq)

    def named_params(self):
        yield "embedding", self.embedding
        yield "pos", self.pos
        for i, block in enumerate(self.blocks):
            yield from prefixed(f"block{i}", block)
        yield from prefixed("final_norm", self.final_norm)
        yield from prefixed("text_head", self.text_head)
        yield from prefixed("cond_head", self.cond_head)


def lm_forward(lm: CausalLM, seq: InterleavedSequence, vision_tokens=None) -> dict:
    return lm.lm_forward(seq, vision_tokens)


DEFAULT_MAX_LEN = 160


class HarmonyModel(Module):
    """The full stack: vision encoder, resampler, LM, and diffusion decoder."""

    def __init__(self, cfg: dict, vocab_size: int, rng: np.random.Generator,
                 max_len: int = DEFAULT_MAX_LEN):
        m = cfg["model"]
        self.cfg = cfg
        self.vision = VisionEncoder(m["grid"], m["channels"], m["patch"], m["dim"],
                                    m["heads"], m["vision_blocks"], rng)
        self.resampler = Resampler(m["queries"], m["dim"], m["heads"],
                                   m["resampler_blocks"], rng)
        self.lm = CausalLM(vocab_size, m["dim"], m["heads"], m["lm_blocks"],
                           m["cond_dim"], m["image_slots"], max_len, rng)
        d = cfg["diffusion"]
        self.diffusion = DiffusionHead(m["grid"], m["channels"], m["patch"], m["dim"],
                                       m["heads"], d["blocks"], m["cond_dim"],
                                       d["steps"], d["beta_min"], d["beta_max"], rng)
        self.slide_registry = None
        self.dense_registry = None

    def encode(self, img: np.ndarray) -> T.Tensor:
        return self.resampler.resample(self.vision.encode_image(img))

    def forward_sequence(self, seq: InterleavedSequence) -> dict:
        vision_tokens = None
        if seq.input_image is not None:
            vision_tokens = self.encode(seq.input_image)
        return self.lm.lm_forward(seq, vision_tokens)

    def forward(self, seq):
        return self.forward_sequence(seq)

    def named_params(self):
        yield from prefixed("vision", self.vision)
        yield from prefixed("resampler", self.resampler)
        yield from prefixed("lm", self.lm)
        yield from prefixed("diffusion", self.diffusion)

    def param_groups(self) -> dict:
        return {
            "vision": list(self.vision.params()),
            "resampler": list(self.resampler.params()),
            "lm": list(self.lm.params()),
            "diffusion": list(self.diffusion.params()),
        }

    def lora_sites(self, placement: str):
        if placement in ("vision_encoder", "both"):
            for i, block in enumerate(self.vision.blocks):
                yield f"vision.block{i}.attn.wq", block.attn, "wq"
                yield f"vision.block{i}.attn.wv", block.attn, "wv"
        if placement in ("llm", "both"):
            for i, block in enumerate(self.lm.blocks):
                yield f"lm.block{i}.attn.wq", block.attn, "wq"
                yield f"lm.block{i}.attn.wv", block.attn, "wv"

    def slide_layers(self):
        if self.slide_registry is None:
            return []
        return list(self.slide_registry)

    def generate(self, prompt: InterleavedSequence, mode: str, max_len: int,
                 rng: np.random.Generator) -> InterleavedSequence:
        """Continue a prompt greedily (text) or via the diffusion decoder (image).

        The routing gates fire once on the prompt pass and stay pinned for
        the rest of the call.
        """
        if mode not in ("text", "image"):
            raise ContractError(f"mode must be text or image, got {mode!r}")
        from .experts import routing_locked

        with T.no_grad():
            vision_tokens = None
            if prompt.input_image is not None:
                vision_tokens = self.encode(prompt.input_image)
            self.lm.hidden_states(prompt, vision_tokens)  # fires the gates

            out = InterleavedSequence(
                tokens=list(prompt.tokens),
                input_image=prompt.input_image,
                input_span=prompt.input_span,
                task_label=prompt.task_label,
            )
            layers = self.slide_layers()
            lock = routing_locked(layers) if layers else None
            if lock is not None:
                lock.__enter__()
            try:
                if mode == "text":
                    produced = 0
                    while produced < max_len and len(out.tokens) < self.lm.max_len:
                        hidden = self.lm.hidden_states(out, vision_tokens)
                        last = T.narrow_rows(hidden, len(out.tokens) - 1, 1)
                        logits = self.lm.text_head(last).data[0]
                        nxt = int(np.argmax(logits))
                        out.tokens.append(nxt)
                        produced += 1
                        if nxt == EOS:
                            break
                    out.truncated = not out.tokens or out.tokens[-1] != EOS
                else:
                    start = len(out.tokens) + 1
                    k = self.lm.image_slots
                    out.tokens += [BOI] + [IMG_SLOT] * k + [EOI]
                    slots = list(range(start, start + k))
                    hidden = self.lm.hidden_states(out, vision_tokens)
                    cond = self.lm.cond_head(T.take_rows(hidden, slots))
                    out.generated_image = self.diffusion.sample(cond, rng)
            finally:
                if lock is not None:
                    lock.__exit__(None, None, None)
        return out


def generate(model: HarmonyModel, prompt: InterleavedSequence, mode: str,
             max_len: int, rng: np.random.Generator) -> InterleavedSequence:
    return model.generate(prompt, mode, max_len, rng)
