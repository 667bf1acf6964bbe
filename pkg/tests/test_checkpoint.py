import struct

import numpy as np
import pytest

from bnexpand.arch import build_model, override_spec, spec_digest, spec_from_dict
from bnexpand.checkpoint import (
    MAGIC,
    PACKED_MAGIC,
    Checkpoint,
    dumps,
    export_packed,
    load_checkpoint,
    load_packed,
    loads,
    restore,
    save_checkpoint,
    snapshot,
)
from bnexpand.errors import CheckpointError, SpecError


# Test helpers.

def tiny_spec(k=2, bases=2):
    return spec_from_dict({
        "name": "tiny", "input": [3, 8, 8], "classes": 5,
        "stem": {"channels": 4},
        "blocks": [{"kind": "basic", "channels": 4},
                   {"kind": "basic", "channels": 8, "stride": 2}],
        "groups": "v2", "bases": bases, "quant": {"k": k}})


def trained(spec, seed=0):
    """A model whose batch norm statistics moved away from their defaults."""
    model = build_model(spec, seed)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        model.forward(rng.standard_normal((4, 3, 8, 8)).astype(np.float32),
                      train=True)
    return model


def batch(seed=1):
    return np.random.default_rng(seed).standard_normal((3, 3, 8, 8)) \
        .astype(np.float32)


# Tests.

def test_roundtrip(tmp_path):
    model = trained(tiny_spec())
    extra = {"train.seed": np.array([7], dtype=np.int64),
             "train.losses": np.array([2.5, 1.25])}
    path = tmp_path / "model.ckpt"
    save_checkpoint(snapshot(model, 4, extra), path)

    loaded = load_checkpoint(path, model.spec)
    assert loaded.epoch == 4
    assert loaded.digest == spec_digest(model.spec)
    assert loaded.tensors["train.seed"].dtype == np.int64
    assert loaded.tensors["train.losses"].tolist() == [2.5, 1.25]

    fresh = build_model(model.spec, 99)
    restore(fresh, loaded)
    assert np.array_equal(fresh.forward(batch()), model.forward(batch()))


def test_layout():
    ckpt = Checkpoint(b"\x01" * 32, 3, {"w": np.array([1.5], dtype=np.float32)})
    raw = dumps(ckpt)
    assert raw[:8] == MAGIC
    assert struct.unpack_from("<I", raw, 8) == (1,)
    assert raw[12:44] == b"\x01" * 32
    assert struct.unpack_from("<II", raw, 44) == (3, 1)
    assert struct.unpack_from("<H", raw, 52) == (1,)
    assert raw[54:55] == b"w"
    assert raw[55] == 0
    assert struct.unpack_from("<BI", raw, 56) == (1, 1)
    assert struct.unpack_from("<f", raw, 61) == (1.5,)
    assert len(raw) == 65


def test_bad_magic():
    raw = dumps(snapshot(build_model(tiny_spec())))
    with pytest.raises(CheckpointError) as e:
        loads(b"NOTACKPT" + raw[8:])
    assert e.value.offset == 0


def test_bad_version():
    raw = bytearray(dumps(snapshot(build_model(tiny_spec()))))
    raw[8:12] = struct.pack("<I", 2)
    with pytest.raises(CheckpointError) as e:
        loads(bytes(raw))
    assert "version" in str(e.value)


@pytest.mark.parametrize("cut", [5, 20, 50, 200])
def test_truncated(cut):
    raw = dumps(snapshot(build_model(tiny_spec())))
    with pytest.raises(CheckpointError) as e:
        loads(raw[:-cut] if cut > 60 else raw[:cut])
    assert "truncated" in str(e.value)


def test_trailing_bytes():
    raw = dumps(snapshot(build_model(tiny_spec())))
    with pytest.raises(CheckpointError):
        loads(raw + b"\x00")


def test_wrong_spec(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(snapshot(build_model(tiny_spec())), path)
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path, tiny_spec(bases=3))
    assert e.value.offset == 12

    ckpt = load_checkpoint(path)
    with pytest.raises(CheckpointError):
        restore(build_model(tiny_spec(bases=3)), ckpt)


def test_restore_across_bitwidths():
    source = trained(tiny_spec(k=2))
    target = build_model(tiny_spec(k=1), 5)
    restore(target, snapshot(source), strict=False, check_spec=False)
    a, b = source.state_dict(), target.state_dict()
    assert all(np.array_equal(a[name], b[name]) for name in a)


def test_restore_missing_tensors():
    model = build_model(tiny_spec())
    ckpt = snapshot(model)
    del ckpt.tensors["head.weight"]
    with pytest.raises(SpecError):
        restore(model, ckpt)
    restore(model, ckpt, strict=False)


def test_model_state_skips_training_state():
    model = build_model(tiny_spec())
    ckpt = snapshot(model, extra={"train.lr": np.array([0.1]),
                                  "optim.head.weight": np.zeros((5, 8))})
    assert set(ckpt.model_state()) == set(model.state_dict())


@pytest.mark.parametrize("k", [1, 2, 4])
def test_packed_export_is_exact(tmp_path, k):
    model = trained(tiny_spec(k=k))
    path = tmp_path / "model.bnx"
    size = export_packed(model, path)
    assert path.stat().st_size == size
    assert path.read_bytes()[:8] == PACKED_MAGIC

    packed = load_packed(path, model.spec, engine="reference")
    assert np.array_equal(packed.forward(batch()), model.forward(batch()))

    packed.engine = model.engine = "packed"
    assert np.array_equal(packed.forward(batch()), model.forward(batch()))


def test_packed_is_smaller(tmp_path):
    spec = override_spec(tiny_spec(), bases=1)
    model = build_model(spec)
    save_checkpoint(snapshot(model), tmp_path / "model.ckpt")
    export_packed(model, tmp_path / "model.bnx")
    assert (tmp_path / "model.bnx").stat().st_size \
        < (tmp_path / "model.ckpt").stat().st_size


def test_packed_full_precision(tmp_path):
    model = trained(tiny_spec(k=32, bases=1))
    export_packed(model, tmp_path / "model.bnx")
    packed = load_packed(tmp_path / "model.bnx", model.spec, engine="reference")
    assert np.array_equal(packed.forward(batch()), model.forward(batch()))


def test_packed_wrong_spec(tmp_path):
    export_packed(build_model(tiny_spec()), tmp_path / "model.bnx")
    with pytest.raises(CheckpointError):
        load_packed(tmp_path / "model.bnx", tiny_spec(bases=3))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "model.bnx")
