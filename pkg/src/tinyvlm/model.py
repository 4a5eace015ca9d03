"""The three-part captioning model: vision encoder -> projector -> language model."""

from __future__ import annotations

import hashlib
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .language import (
    LanguageModel,
    LMConfig,
    MultimodalSequence,
    SequenceBatch,
    Tokenizer,
    assemble_sequence,
    caption_loss,
    collate,
)
from .nn import Module, Parameter
from .projector import Projector, ProjectorConfig
from .tensor import DegenerateBatchError, Tensor
from .vision import VisionEncoder, ViTConfig

COMPONENTS = ("encoder", "projector", "lm")


class CaptionModel(Module):
    def __init__(
        self,
        vit: ViTConfig,
        projector: ProjectorConfig,
        lm: LMConfig,
        tokenizer: Tokenizer,
        seed: int = 0,
    ):
        if projector.in_dim != vit.embed_dim:
            raise ConfigError(f"projector in_dim {projector.in_dim} != encoder embed_dim {vit.embed_dim}")
        if projector.out_dim != lm.embed_dim:
            raise ConfigError(f"projector out_dim {projector.out_dim} != language model embed_dim {lm.embed_dim}")
        if len(tokenizer) > lm.vocab_size:
            raise ConfigError(f"tokenizer has {len(tokenizer)} tokens but vocab_size is {lm.vocab_size}")
        if lm.max_seq_len < vit.num_patches + 3:
            raise ConfigError("max_seq_len leaves no room for text after the image tokens")
        self.tokenizer = tokenizer
        self.seed = seed
        # one stream per component so changing one config leaves the others' init unchanged
        streams = np.random.SeedSequence(seed).spawn(3)
        self.encoder = VisionEncoder(vit, np.random.default_rng(streams[0]))
        self.projector = Projector(projector, np.random.default_rng(streams[1]))
        self.lm = LanguageModel(lm, np.random.default_rng(streams[2]))

    @classmethod
    def build(cls, tokenizer: Tokenizer, seed: int = 0, vit: ViTConfig | None = None,
              lm_dim: int = 96, lm_depth: int = 2, lm_heads: int = 4, max_seq_len: int = 128,
              vocab_size: int | None = None) -> "CaptionModel":
        vit = vit or ViTConfig()
        lm = LMConfig(vocab_size=vocab_size or len(tokenizer), embed_dim=lm_dim, depth=lm_depth,
                      heads=lm_heads, max_seq_len=max_seq_len)
        return cls(vit, ProjectorConfig(in_dim=vit.embed_dim, out_dim=lm_dim), lm, tokenizer, seed)

    @property
    def configs(self) -> dict:
        return {
            "vit": self.encoder.config.to_dict(),
            "projector": self.projector.config.to_dict(),
            "lm": self.lm.config.to_dict(),
        }

    @property
    def image_size(self) -> int:
        return self.encoder.config.image_size

    @property
    def num_image_tokens(self) -> int:
        return self.encoder.config.num_patches

    def component(self, name: str) -> Module:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name in COMPONENTS:
            yield from self.component(name).named_parameters(f"{prefix}{name}.")

    def visual_tokens(self, images) -> Tensor:
        """H_v for a batch ``[B, S, S, 3]`` -> ``[B, N, d_lm]``."""
        return self.projector(self.encoder(images))

    def assemble(self, h_v: Tensor, instruction: Sequence[int], response: Sequence[int],
                 with_eos: bool = True) -> MultimodalSequence:
        return assemble_sequence(self.lm, self.tokenizer, h_v, instruction, response, with_eos)

    def build_batch(self, images, instructions: Sequence[Sequence[int]],
                    responses: Sequence[Sequence[int]], h_v: Tensor | None = None) -> SequenceBatch:
        if any(len(r) == 0 for r in responses):
            raise DegenerateBatchError("every sample needs a non-empty response")
        h_v = self.visual_tokens(images) if h_v is None else h_v
        seqs = [self.assemble(h_v[i], instr, resp) for i, (instr, resp) in enumerate(zip(instructions, responses))]
        return collate(seqs, self.tokenizer.pad_id)

    def loss(self, images, instructions, responses) -> Tensor:
        return caption_loss(self.lm, self.build_batch(images, instructions, responses))

    def checksum(self, component: str | None = None) -> str:
        """SHA-256 over parameter names and raw bytes (one component or all)."""
        h = hashlib.sha256()
        params = self.component(component).named_parameters() if component else self.named_parameters()
        for name, p in params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()
