"""Word-level tokenizer and the decoder-only causal language model."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, SequenceLengthError
from .nn import Block, LayerNorm, Linear, Module, normal
from .tensor import DegenerateBatchError, Tensor, concat, cross_entropy, embedding_lookup, stack

PAD, BOS, EOS, IMG, UNK = "<pad>", "<bos>", "<eos>", "<img>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, IMG, UNK)

_TOKEN_RE = re.compile(r"[A-Za-z0-9']+|[^\sA-Za-z0-9']")
_ATTACHED = set(".,;:!?")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


class Tokenizer:
    """Word-level vocabulary; punctuation marks are separate tokens.

    ``detokenize(tokenize(s)) == s`` for text whose words are separated by
    single spaces with punctuation attached to the preceding word.
    """

    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIAL_TOKENS)
        seen = set(vocab)
        for w in words:
            if w not in seen:
                seen.add(w)
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}
        self.pad_id, self.bos_id, self.eos_id, self.img_id, self.unk_id = (self.index[s] for s in SPECIAL_TOKENS)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(split_words(t))
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in split_words(text)]

    def detokenize(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        for i in ids:
            word = self.vocab[int(i)]
            if word in SPECIAL_TOKENS:
                continue
            if out and word in _ATTACHED:
                out[-1] += word
            else:
                out.append(word)
        return " ".join(out)

    def to_dict(self) -> dict:
        return {"vocab": self.vocab}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        vocab = list(d["vocab"])
        if tuple(vocab[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ConfigError("tokenizer vocabulary does not start with the special tokens")
        return cls(vocab[len(SPECIAL_TOKENS):])


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 256
    embed_dim: int = 96
    depth: int = 2
    heads: int = 4
    max_seq_len: int = 128
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigError("vocab_size smaller than the special-token set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultimodalSequence:
    """One assembled ``[BOS, image, instruction, response, EOS]`` sequence.

    ``token_ids`` holds the IMG id on every image row.  ``target_ids[t]`` is
    the token at ``t + 1``; ``loss_mask`` is true where that next token is a
    response token or the closing EOS.
    """

    embeddings: Tensor
    token_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray
    image_span: tuple[int, int]
    instruction_span: tuple[int, int]
    response_span: tuple[int, int]

    def __len__(self) -> int:
        return len(self.token_ids)


def sequence_layout(num_image: int, num_instruction: int, num_response: int, with_eos: bool = True):
    """Spans of (image, instruction, response) and the total length."""
    image = (1, 1 + num_image)
    instruction = (image[1], image[1] + num_instruction)
    response = (instruction[1], instruction[1] + num_response)
    return image, instruction, response, response[1] + int(with_eos)


class LanguageModel(Module):
    def __init__(self, config: LMConfig, rng: np.random.Generator):
        self.config = config
        d = config.embed_dim
        self.tok_embed = normal(rng, config.vocab_size, d)
        self.pos_embed = normal(rng, config.max_seq_len, d)
        self.blocks = [Block(d, config.heads, config.mlp_ratio, rng, causal=True) for _ in range(config.depth)]
        self.ln_final = LayerNorm(d)
        self.head = Linear(d, config.vocab_size, rng)

    def embed_tokens(self, ids) -> Tensor:
        return embedding_lookup(self.tok_embed, ids)

    def forward(self, embeddings: Tensor) -> Tensor:
        """Next-token logits ``[..., L, V]`` for input embeddings ``[..., L, d]``."""
        length = embeddings.shape[-2]
        if length > self.config.max_seq_len:
            raise SequenceLengthError(f"sequence of length {length} exceeds max_seq_len {self.config.max_seq_len}")
        single = embeddings.ndim == 2
        x = embeddings.reshape(1, *embeddings.shape) if single else embeddings
        x = x + self.pos_embed[:length]
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.ln_final(x))
        return logits.reshape(logits.shape[1:]) if single else logits


def assemble_sequence(
    lm: LanguageModel,
    tokenizer: Tokenizer,
    h_v: Tensor,
    instruction: Sequence[int],
    response: Sequence[int],
    with_eos: bool = True,
) -> MultimodalSequence:
    """Lay out ``[BOS, H_v rows, instruction, response, EOS]`` as input embeddings.

    With ``with_eos=False`` the result is a generation prefix.
    """
    n = h_v.shape[0]
    image, instr, resp, length = sequence_layout(n, len(instruction), len(response), with_eos)
    if length > lm.config.max_seq_len:
        raise SequenceLengthError(
            f"assembled length {length} (image {n}, instruction {len(instruction)}, "
            f"response {len(response)}) exceeds max_seq_len {lm.config.max_seq_len}"
        )
    tail = list(instruction) + list(response) + ([tokenizer.eos_id] if with_eos else [])
    ids = np.array([tokenizer.bos_id] + [tokenizer.img_id] * n + tail, dtype=np.int64)
    parts = [lm.embed_tokens(ids[:1]), h_v]
    if tail:
        parts.append(lm.embed_tokens(ids[image[1]:]))
    embeddings = concat(parts, axis=0)

    targets = np.full(length, tokenizer.pad_id, dtype=np.int64)
    targets[:-1] = ids[1:]
    mask = np.zeros(length, dtype=bool)
    if with_eos:
        mask[resp[0] - 1 : length - 1] = True
    return MultimodalSequence(embeddings, ids, targets, mask, image, instr, resp)


@dataclass
class SequenceBatch:
    embeddings: Tensor  # [B, L, d]
    target_ids: np.ndarray  # [B, L]
    loss_mask: np.ndarray  # [B, L]


def collate(seqs: Sequence[MultimodalSequence], pad_id: int = 0) -> SequenceBatch:
    """Right-pad sequences to a common length; padding never reaches the loss."""
    longest = max(len(s) for s in seqs)
    d = seqs[0].embeddings.shape[1]
    rows, targets, masks = [], [], []
    for s in seqs:
        extra = longest - len(s)
        emb = s.embeddings
        if extra:
            emb = concat([emb, Tensor(np.zeros((extra, d), dtype=emb.dtype))], axis=0)
        rows.append(emb)
        targets.append(np.pad(s.target_ids, (0, extra), constant_values=pad_id))
        masks.append(np.pad(s.loss_mask, (0, extra), constant_values=False))
    return SequenceBatch(stack(rows, axis=0), np.stack(targets), np.stack(masks))


def caption_loss(lm: LanguageModel, seq: MultimodalSequence | SequenceBatch) -> Tensor:
    """Mean next-token cross-entropy over response (and closing EOS) positions."""
    if isinstance(seq, MultimodalSequence) and seq.response_span[0] == seq.response_span[1]:
        raise DegenerateBatchError("caption_loss needs a non-empty response")
    if not np.any(seq.loss_mask):
        raise DegenerateBatchError("caption_loss: no supervised positions")
    logits = lm(seq.embeddings)
    return cross_entropy(logits, seq.target_ids, seq.loss_mask)
