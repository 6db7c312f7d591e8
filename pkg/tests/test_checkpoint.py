import struct

import numpy as np
import pytest

from pvada.checkpoint import MAGIC, dumps, load_checkpoint, loads, save_checkpoint
from pvada.exceptions import CheckpointError
from pvada.model import ModelConfig, forward, init_params
from pvada.tensor import no_grad

CONFIG = ModelConfig(k=4, dim=4, num_oa_blocks=2, voxel_size=0.3, num_classes=3, head_dims=(6,),
                     interaction="z2")


def trained_like(dtype=np.float32):
    params = init_params(CONFIG, seed=3, dtype=dtype)
    rng = np.random.default_rng(0)
    for s in params.norms.values():
        s.running_mean[:] = rng.normal(size=s.running_mean.shape)
        s.running_var[:] = rng.uniform(0.5, 2, size=s.running_var.shape)
    return params


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_restores_everything(tmp_path, dtype):
    params = trained_like(dtype)
    save_checkpoint(tmp_path / "m.pvada", params, classes=["a", "b", "c"], extra={"epoch": 7})
    back, meta = load_checkpoint(tmp_path / "m.pvada")
    assert back.config == CONFIG
    assert meta["classes"] == ["a", "b", "c"] and meta["extra"] == {"epoch": 7}
    assert list(back.tensors) == list(params.tensors)
    for name, t in params.named_parameters():
        assert back[name].dtype == dtype and back[name].data.tobytes() == t.data.tobytes()
    for name, s in params.norms.items():
        assert back.norms[name].running_var.tobytes() == s.running_var.tobytes()
        assert back.norms[name].momentum == s.momentum


def test_restored_model_predicts_identically(tmp_path):
    params = trained_like(np.float64)
    save_checkpoint(tmp_path / "m.pvada", params)
    back, _ = load_checkpoint(tmp_path / "m.pvada")
    pts = np.random.default_rng(1).normal(size=(40, 3))
    with no_grad():
        assert np.array_equal(forward(pts, params).logits.data, forward(pts, back).logits.data)


def test_serialization_is_deterministic():
    assert dumps(trained_like()) == dumps(trained_like())


def test_byte_layout_header_and_first_record():
    params = trained_like()
    raw = dumps(params)
    assert raw[:6] == MAGIC
    version, meta_len = struct.unpack_from("<II", raw, 6)
    assert version == 1
    pos = 14 + meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    assert count == len(params.tensors) + 2 * len(params.norms)
    pos += 4
    (name_len,) = struct.unpack_from("<H", raw, pos)
    name = raw[pos + 2:pos + 2 + name_len].decode()
    assert name == next(iter(params.tensors))
    dtype, ndim = struct.unpack_from("<BB", raw, pos + 2 + name_len)
    shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4 + name_len)
    assert dtype == 0 and shape == params[name].shape


def test_bad_magic():
    raw = dumps(trained_like())
    with pytest.raises(CheckpointError, match="bad magic") as info:
        loads(b"NOTPVA" + raw[6:])
    assert info.value.position == "byte 0"


def test_unsupported_version():
    raw = bytearray(dumps(trained_like()))
    raw[6:10] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version 9"):
        loads(bytes(raw))


@pytest.mark.parametrize("cut", [3, 12, 40, -1])
def test_truncation_is_reported_with_position(cut):
    raw = dumps(trained_like())
    with pytest.raises(CheckpointError) as info:
        loads(raw[:cut])
    assert info.value.position is not None and info.value.position.startswith("byte")


def test_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        loads(dumps(trained_like()) + b"\0\0")


def test_layout_must_match_config():
    params = trained_like()
    other = init_params(ModelConfig(k=4, dim=5, num_oa_blocks=2, voxel_size=0.3, num_classes=3, head_dims=(6,),
                                    interaction="z2"))
    other.config = params.config  # lie about the architecture
    with pytest.raises(CheckpointError):
        loads(dumps(other))
