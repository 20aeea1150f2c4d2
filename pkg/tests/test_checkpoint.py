import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from synthetic import MICRO, random_pairs
from uniseq.checkpoint import (
    MAGIC, Checkpoint, dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint,
)
from uniseq.errors import BadMagicError, CheckpointError, CompatibilityError, TruncatedFileError, VersionMismatchError
from uniseq.numerics import adam_step
from uniseq.training import TrainPlan, batch_loss, gradients, train


@pytest.fixture(scope="module")
def trained():
    pairs = random_pairs(np.random.default_rng(0), n=4)
    return train(TrainPlan(lr=1e-2, batch_size=2, epochs=2, seed=3), pairs, MICRO), pairs


def test_round_trip_bitwise(trained, tmp_path):
    ck, _ = trained
    save_checkpoint(tmp_path / "c.ummc", ck)
    back = load_checkpoint(tmp_path / "c.ummc")
    assert back.config == ck.config and back.step == ck.step and back.history == ck.history
    assert back.provenance == ck.provenance and back.rng_state == ck.rng_state
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].data.tobytes() == ck.params[k].data.tobytes()
        assert back.adam.m[k].tobytes() == ck.adam.m[k].tobytes()
        assert back.adam.v[k].tobytes() == ck.adam.v[k].tobytes()
    assert (back.adam.lr, back.adam.beta1, back.adam.beta2, back.adam.eps, back.adam.step) == \
        (ck.adam.lr, ck.adam.beta1, ck.adam.beta2, ck.adam.eps, ck.adam.step)
    assert dumps_checkpoint(back) == dumps_checkpoint(ck)


def test_rng_state_resumes_stream(trained):
    ck, _ = trained
    back = loads_checkpoint(dumps_checkpoint(ck))
    a, b = np.random.default_rng(), np.random.default_rng()
    a.bit_generator.state, b.bit_generator.state = ck.rng_state, back.rng_state
    assert np.array_equal(a.integers(0, 2**63, 10), b.integers(0, 2**63, 10))


def test_identical_next_step(trained):
    ck, pairs = trained
    back = loads_checkpoint(dumps_checkpoint(ck))
    assert batch_loss(back.params, pairs).item() == batch_loss(ck.params, pairs).item()
    original = loads_checkpoint(dumps_checkpoint(ck))
    for c in (original, back):
        _, g = gradients(c.params, pairs)
        adam_step(c.params, g, c.adam)
    assert batch_loss(back.params, pairs).item() == batch_loss(original.params, pairs).item()


def test_little_endian_header(trained):
    ck, _ = trained
    blob = dumps_checkpoint(ck)
    assert blob[:4] == MAGIC
    version, n = struct.unpack("<II", blob[4:12])
    assert version == 1
    header = json.loads(blob[12:12 + n])
    assert header["config"] == MICRO.to_dict()


def test_bad_magic(trained):
    blob = bytearray(dumps_checkpoint(trained[0]))
    blob[0:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        loads_checkpoint(bytes(blob))


def test_version_mismatch(trained):
    blob = bytearray(dumps_checkpoint(trained[0]))
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        loads_checkpoint(bytes(blob))


def test_truncated(trained):
    blob = dumps_checkpoint(trained[0])
    for cut in (6, 20, len(blob) // 2, len(blob) - 1):
        with pytest.raises(TruncatedFileError):
            loads_checkpoint(blob[:cut])


def test_trailing_bytes(trained):
    with pytest.raises(CheckpointError):
        loads_checkpoint(dumps_checkpoint(trained[0]) + b"\0")


def test_mismatched_config_names_tensor(trained):
    blob = dumps_checkpoint(trained[0])
    with pytest.raises(CompatibilityError, match="embed.tokens"):
        loads_checkpoint(blob, expect=replace(MICRO, num_text=11))
    with pytest.raises(CompatibilityError, match="dropout"):
        loads_checkpoint(blob, expect=replace(MICRO, dropout=0.1))


def test_errors_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedFileError, CompatibilityError}
    assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)


def test_atomic_write_leaves_no_temp(trained, tmp_path):
    save_checkpoint(tmp_path / "c.ummc", trained[0])
    save_checkpoint(tmp_path / "c.ummc", trained[0])
    assert [p.name for p in tmp_path.iterdir()] == ["c.ummc"]


def test_checkpoint_without_rng(trained):
    ck = trained[0]
    bare = Checkpoint(ck.config, ck.params, ck.adam)
    assert loads_checkpoint(dumps_checkpoint(bare)).rng_state is None
