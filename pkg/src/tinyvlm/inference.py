"""Checkpoint persistence and greedy caption generation.

Checkpoint byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"TVLMCKPT"
    8       4     u32 format version (1)
    12      8     u64 header length H
    20      H     UTF-8 JSON header: configs, tokenizer vocabulary, seed and a
                  tensor table [{name, shape, dtype, offset, nbytes}]
    20+H    ...   tensor payloads, raw little-endian, offsets relative to here
    end-32  32    SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, SequenceLengthError
from .language import LMConfig, Tokenizer
from .model import CaptionModel
from .projector import ProjectorConfig
from .tensor import default_dtype, no_grad
from .vision import ViTConfig

MAGIC = b"TVLMCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


def save_checkpoint(model: CaptionModel, path) -> None:
    table, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        p.check_finite(name)
        raw = np.ascontiguousarray(p.data, dtype=p.data.dtype.newbyteorder("<")).tobytes()
        table.append({"name": name, "shape": list(p.shape), "dtype": p.data.dtype.newbyteorder("<").str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"configs": model.configs, "tokenizer": model.tokenizer.to_dict(), "seed": model.seed, "tensors": table},
        sort_keys=True,
    ).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> CaptionModel:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated to {len(blob)} bytes)")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupted or truncated file)")
    magic, version, header_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    try:
        header = json.loads(body[_PREFIX.size : _PREFIX.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = body[_PREFIX.size + header_len :]
    entries = {e["name"]: e for e in header["tensors"]}
    if len(entries) != len(header["tensors"]):
        raise CheckpointError(f"{path}: duplicate tensor names in table")

    cfg = header["configs"]
    dtypes = {np.dtype(e["dtype"]).newbyteorder("=") for e in entries.values()}
    with default_dtype(dtypes.pop() if len(dtypes) == 1 else np.float32):
        model = CaptionModel(
            ViTConfig(**cfg["vit"]),
            ProjectorConfig(**cfg["projector"]),
            LMConfig(**cfg["lm"]),
            Tokenizer.from_dict(header["tokenizer"]),
            seed=header.get("seed", 0),
        )
    expected = dict(model.named_parameters())
    for name, p in expected.items():
        entry = entries.get(name)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tuple(entry['shape'])}, expected {p.shape}")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        dtype = np.dtype(entry["dtype"])
        if len(raw) != entry["nbytes"] or entry["nbytes"] != p.size * dtype.itemsize:
            raise CheckpointError(f"{path}: tensor {name!r} payload is truncated")
        p.data = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(p.shape)
    extra = sorted(set(entries) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    return model


def generate_caption(
    model: CaptionModel,
    image: np.ndarray,
    prompt: str,
    max_new_tokens: int = 64,
    mode: str = "greedy",
) -> str:
    """Decode a caption for one preprocessed image (``S x S x 3`` in [0, 1])."""
    return model.tokenizer.detokenize(generate_ids(model, image, prompt, max_new_tokens, mode))


def generate_ids(model: CaptionModel, image, prompt: str, max_new_tokens: int = 64, mode: str = "greedy"):
    if mode != "greedy":
        raise ValueError(f"unsupported decoding mode {mode!r}")
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be at least 1")
    tok = model.tokenizer
    prompt_ids = tok.tokenize(prompt)
    limit = model.lm.config.max_seq_len
    room = limit - model.num_image_tokens - 2  # BOS plus at least one generated token
    if len(prompt_ids) > room:
        raise SequenceLengthError(f"prompt of {len(prompt_ids)} tokens exceeds the {room} available")
    out: list[int] = []
    with no_grad():
        h_v = model.visual_tokens(np.asarray(image)[None])[0]
        for _ in range(max_new_tokens):
            seq = model.assemble(h_v, prompt_ids, out, with_eos=False)
            logits = model.lm(seq.embeddings).data[-1]
            nxt = int(np.argmax(logits))  # first maximum -> lowest id on ties
            if nxt == tok.eos_id:
                break
            out.append(nxt)
            if len(seq) + 1 >= limit:  # emitted sequence is now max_seq_len long
                break
    return out
