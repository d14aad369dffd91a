import numpy as np
import pytest

from skiplab.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from skiplab.errors import CheckpointError
from skiplab.model import Model, ModelConfig, apply_lora
from skiplab.routing import init_routers


def tiny_config(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, d_ff=24, vocab_size=19, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


def build(seed=0, with_routers=True, with_lora=False):
    cfg = tiny_config()
    model = Model(cfg, dtype=np.float32, seed=seed)
    if with_lora:
        apply_lora(model, rank=4, scale=2.0, seed=seed + 1)
    routers = init_routers(cfg, seed=seed + 2, dtype=np.float32) if with_routers else None
    return model, routers


def test_roundtrip_bit_identical(tmp_path):
    model, routers = build(with_lora=True)
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    loaded, loaded_routers = load_checkpoint(path)
    for (name, a), (name2, b) in zip(sorted(model.named_tensors().items()),
                                     sorted(loaded.named_tensors().items())):
        assert name == name2
        np.testing.assert_array_equal(a.data, b.data)
    assert len(loaded_routers) == len(routers)
    for r0, r1 in zip(routers, loaded_routers):
        np.testing.assert_array_equal(r0.w.data, r1.w.data)


def test_save_load_save_byte_identical(tmp_path):
    model, routers = build(with_lora=True)
    p1, p2 = tmp_path / "a.skpt", tmp_path / "b.skpt"
    save_checkpoint(model, routers, p1)
    loaded, loaded_routers = load_checkpoint(p1)
    save_checkpoint(loaded, loaded_routers, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_payload_alignment(tmp_path):
    model, routers = build()
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    header_len = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    import json

    header = json.loads(raw[12: 12 + header_len])
    base = (12 + header_len + 63) // 64 * 64
    assert base % 64 == 0
    for entry in header["tensors"]:
        assert (base + entry["offset"]) % 64 == 0


def test_truncated_file_rejected(tmp_path):
    model, routers = build()
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    raw = path.read_bytes()
    broken = tmp_path / "broken.skpt"
    broken.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(broken)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.skpt"
    path.write_bytes(b"NOPE" + b"\x00" * 100)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unknown_version_rejected(tmp_path):
    model, routers = build()
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = np.uint32(99).tobytes()
    bad = tmp_path / "v99.skpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)


def test_config_mismatch_rejected(tmp_path):
    model, routers = build()
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    other = tiny_config(n_layers=3)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expect_config=other)


def test_no_partial_model_on_failure(tmp_path):
    model, routers = build()
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    raw = path.read_bytes()
    broken = tmp_path / "broken.skpt"
    broken.write_bytes(raw[:-40])
    with pytest.raises(CheckpointError):
        load_checkpoint(broken)


def test_dense_checkpoint_has_no_routers(tmp_path):
    model, _ = build(with_routers=False)
    path = tmp_path / "m.skpt"
    save_checkpoint(model, None, path)
    _, routers = load_checkpoint(path)
    assert routers == []


def test_lora_specs_survive_roundtrip(tmp_path):
    model, routers = build(with_lora=True)
    path = tmp_path / "m.skpt"
    save_checkpoint(model, routers, path)
    loaded, _ = load_checkpoint(path)
    src = {k: ad for m in model.modules for k, ad in m.lora.items()}
    dst = {k: ad for m in loaded.modules for k, ad in m.lora.items()}
    assert set(src) == set(dst)
    for key in src:
        assert src[key].rank == dst[key].rank
        assert src[key].scale == dst[key].scale
