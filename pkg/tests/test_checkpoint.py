import struct

import numpy as np
import pytest

from roomdistill import checkpoint as ckpt
from roomdistill.exceptions import CheckpointCorrupt
from roomdistill.optimizer import FieldOptimizer


@pytest.fixture
def state(tiny_config, tiny_field):
    rng = np.random.Generator(np.random.PCG64([3, 2]))
    rng.uniform(size=5)
    moments = FieldOptimizer(tiny_field).moment_arrays()
    moments[0] = (np.full_like(moments[0][0], 0.5), np.full_like(moments[0][1], 0.25))
    return ckpt.Checkpoint(
        config_text=tiny_config.to_text(),
        stage=2,
        next_iteration=17,
        stage_complete=False,
        field_arrays=tiny_field.named_parameter_arrays(),
        optimizer_step=17,
        moments=moments,
        rng_state=rng.bit_generator.state,
        prompt="a cozy living room",
        negative_prompt="oversaturated, blurry",
    )


def test_round_trip(state, tiny_field):
    loaded = ckpt.loads(ckpt.dumps(state))
    assert loaded.config_text == state.config_text
    assert loaded.cursor == (2, 17)
    assert not loaded.stage_complete
    assert loaded.optimizer_step == 17
    assert loaded.prompt == "a cozy living room"
    assert loaded.negative_prompt == "oversaturated, blurry"
    assert loaded.depth_field_arrays is None
    assert [n for n, _ in loaded.field_arrays] == [n for n, _ in state.field_arrays]
    for (_, a), (_, b) in zip(loaded.field_arrays, state.field_arrays):
        assert a.dtype == np.float32
        assert np.array_equal(a, b.astype(np.float32))
    assert np.all(loaded.moments[0][0] == 0.5)
    assert np.all(loaded.moments[0][1] == 0.25)
    assert len(loaded.moments) == len(state.moments)


def test_dumps_is_stable(state):
    assert ckpt.dumps(state) == ckpt.dumps(ckpt.loads(ckpt.dumps(state)))


def test_rng_state_round_trips(state):
    loaded = ckpt.loads(ckpt.dumps(state))
    a = np.random.Generator(np.random.PCG64())
    b = np.random.Generator(np.random.PCG64())
    a.bit_generator.state = state.rng_state
    b.bit_generator.state = loaded.rng_state
    assert np.array_equal(a.integers(0, 2**31, size=10), b.integers(0, 2**31, size=10))


def test_rng_buffered_word_round_trips(state):
    rng = np.random.Generator(np.random.PCG64(5))
    rng.integers(0, 2**16, dtype=np.uint32)
    state.rng_state = rng.bit_generator.state
    loaded = ckpt.loads(ckpt.dumps(state))
    assert loaded.rng_state == state.rng_state


def test_completed_stage_with_depth_field(state, tiny_field):
    state.stage_complete = True
    state.depth_field_arrays = tiny_field.freeze_copy().named_parameter_arrays()
    loaded = ckpt.loads(ckpt.dumps(state))
    assert loaded.stage_complete
    assert len(loaded.depth_field_arrays) == len(state.field_arrays)


def test_bad_magic(state):
    data = bytearray(ckpt.dumps(state))
    data[0:8] = b"NOTACKPT"
    with pytest.raises(CheckpointCorrupt, match="magic"):
        ckpt.loads(bytes(data))


def test_unknown_version(state):
    data = bytearray(ckpt.dumps(state))
    data[8:12] = struct.pack("<I", 99)
    with pytest.raises(CheckpointCorrupt, match="version"):
        ckpt.loads(bytes(data))


@pytest.mark.parametrize("cut", [4, 20, 200, -1])
def test_truncated(state, cut):
    data = ckpt.dumps(state)
    with pytest.raises(CheckpointCorrupt):
        ckpt.loads(data[:cut])


def test_trailing_bytes(state):
    with pytest.raises(CheckpointCorrupt, match="trailing"):
        ckpt.loads(ckpt.dumps(state) + b"\0")


def test_missing_section(state):
    data = ckpt.dumps(state)
    header = ckpt.MAGIC + struct.pack("<II", ckpt.VERSION, 6)
    # drop the trailing prompt section and claim one fewer
    prompt = f"{state.prompt}\n{state.negative_prompt}".encode()
    tail = struct.pack("<H", 6) + b"prompt" + struct.pack("<Q", len(prompt)) + prompt
    assert data.endswith(tail)
    body = data[len(header) : -len(tail)]
    short = ckpt.MAGIC + struct.pack("<II", ckpt.VERSION, 5) + body
    with pytest.raises(CheckpointCorrupt, match="missing sections: prompt"):
        ckpt.loads(short)


def test_save_and_load(tmp_path, state):
    path = tmp_path / "stage2.ckpt"
    ckpt.save(state, path)
    assert path.exists()
    assert not (tmp_path / "stage2.ckpt.tmp").exists()
    assert ckpt.load(path).cursor == state.cursor


def test_load_missing_file(tmp_path):
    with pytest.raises(CheckpointCorrupt):
        ckpt.load(tmp_path / "nowhere.ckpt")
