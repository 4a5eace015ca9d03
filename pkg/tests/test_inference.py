import json
import struct

import numpy as np
import pytest

from conftest import tiny_dataset, tiny_model
from tinyvlm.errors import CheckpointError, SequenceLengthError
from tinyvlm.inference import MAGIC, generate_caption, generate_ids, load_checkpoint, save_checkpoint
from tinyvlm.training import TrainConfig, run_stage


@pytest.fixture(scope="module")
def trained():
    model = tiny_model(seed=3)
    ds = tiny_dataset(model, n=4)
    run_stage(model, [ds], TrainConfig(stage=2, base_lr=3e-3, total_steps=20, batch_size=4))
    return model, ds


PROMPT = "Describe the scene."


def _rewrite_header(path, edit):
    """Patch the JSON header and recompute the trailer, yielding a well-formed but inconsistent file."""
    import hashlib

    blob = path.read_bytes()[:-32]
    hlen = struct.unpack_from("<Q", blob, 12)[0]
    header = json.loads(blob[20 : 20 + hlen])
    edit(header)
    new = json.dumps(header).encode()
    body = blob[:12] + struct.pack("<Q", len(new)) + new + blob[20 + hlen :]
    path.write_bytes(body + hashlib.sha256(body).digest())


class TestCheckpoint:
    def test_round_trip_parameters(self, trained, tmp_path):
        model, _ = trained
        save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.checksum() == model.checksum()
        assert loaded.tokenizer == model.tokenizer and loaded.configs == model.configs

    def test_round_trip_generation(self, trained, tmp_path):
        model, ds = trained
        save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        for img in ds.images:
            assert generate_ids(loaded, img, PROMPT, 12) == generate_ids(model, img, PROMPT, 12)

    def test_layout(self, trained, tmp_path):
        save_checkpoint(trained[0], tmp_path / "m.ckpt")
        blob = (tmp_path / "m.ckpt").read_bytes()
        magic, version, _ = struct.unpack_from("<8sIQ", blob)
        assert magic == MAGIC and version == 1

    def test_truncated(self, trained, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(trained[0], p)
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(CheckpointError, match="checksum mismatch"):
            load_checkpoint(p)

    def test_flipped_byte(self, trained, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(trained[0], p)
        blob = bytearray(p.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(p)

    def test_renamed_tensor_is_named(self, trained, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(trained[0], p)

        def rename(h):
            for t in h["tensors"]:
                if t["name"] == "lm.head.weight":
                    t["name"] = "lm.head.weights"

        _rewrite_header(p, rename)
        with pytest.raises(CheckpointError, match="missing tensor 'lm.head.weight'"):
            load_checkpoint(p)

    def test_wrong_shape_is_named(self, trained, tmp_path):
        p = tmp_path / "m.ckpt"
        save_checkpoint(trained[0], p)

        def reshape(h):
            for t in h["tensors"]:
                if t["name"] == "projector.layers.0.bias":
                    t["shape"] = [t["shape"][0] + 1]

        _rewrite_header(p, reshape)
        with pytest.raises(CheckpointError, match="projector.layers.0.bias"):
            load_checkpoint(p)

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


class TestGeneration:
    def test_deterministic(self, trained):
        model, ds = trained
        assert generate_caption(model, ds.images[0], PROMPT, 20) == generate_caption(model, ds.images[0], PROMPT, 20)

    def test_budget_monotone(self, trained):
        model, ds = trained
        for img in ds.images:
            for k in (1, 3, 7):
                short = generate_ids(model, img, PROMPT, k)
                longer = generate_ids(model, img, PROMPT, k + 10)
                assert len(short) <= k and longer[: len(short)] == short

    def test_single_token_budget(self, trained):
        model, ds = trained
        assert len(generate_ids(model, ds.images[0], PROMPT, 1)) <= 1

    def test_stops_at_eos(self, trained):
        model, ds = trained
        model_eos = tiny_model(seed=3)
        model_eos.lm.head.bias.data[:] = 0
        model_eos.lm.head.weight.data[:] = 0
        model_eos.lm.head.bias.data[model_eos.tokenizer.eos_id] = 10.0
        assert generate_ids(model_eos, ds.images[0], PROMPT, 5) == []

    def test_tie_breaks_to_lowest_id(self, trained):
        model, ds = trained
        m = tiny_model(seed=1)
        m.lm.head.weight.data[:] = 0
        m.lm.head.bias.data[:] = 0
        m.lm.head.bias.data[[10, 7, 30]] = 4.0
        assert generate_ids(m, ds.images[0], PROMPT, 3) == [7, 7, 7]

    def test_never_exceeds_context(self, trained):
        model, ds = trained
        m = tiny_model(seed=1, max_seq_len=16)
        m.lm.head.weight.data[:] = 0
        m.lm.head.bias.data[:] = 0
        m.lm.head.bias.data[9] = 4.0
        prompt_len = len(m.tokenizer.tokenize(PROMPT))
        out = generate_ids(m, ds.images[0], PROMPT, 100)
        assert 1 + m.num_image_tokens + prompt_len + len(out) <= 16

    def test_prompt_too_long(self, trained):
        m = tiny_model(max_seq_len=10)
        with pytest.raises(SequenceLengthError):
            generate_ids(m, trained[1].images[0], "a " * 20, 3)

    def test_bad_budget(self, trained):
        model, ds = trained
        with pytest.raises(ValueError):
            generate_ids(model, ds.images[0], PROMPT, 0)
