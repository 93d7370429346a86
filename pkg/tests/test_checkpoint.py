import hashlib
import json
import struct

import numpy as np
import pytest

from ssattn import checkpoint
from ssattn.model import Deraformer, ModelConfig

SMALL = ModelConfig(levels=2, channels=(4, 8), irm_blocks=(2, 2), heads=(1, 2), latent_blocks=1,
                    latent_heads=2, window_side=2, alpha=0.35)


@pytest.fixture
def model():
    m = Deraformer(SMALL)
    rng = np.random.default_rng(0)
    for p in m.parameters():
        p.data = p.data + rng.normal(size=p.shape)
    return m


class TestCheckpoint:
    def test_roundtrip_bitwise(self, model, tmp_path):
        path = checkpoint.save(model, tmp_path / "m.bin")
        back = checkpoint.load(path)
        assert back.cfg == model.cfg
        for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.data, p2.data)
        assert checkpoint.encode(back) == path.read_bytes()

    def test_header_layout(self, model):
        blob = checkpoint.encode(model)
        assert blob[:8] == b"SSATTNCK"
        assert struct.unpack("<I", blob[8:12])[0] == 1
        (n,) = struct.unpack("<I", blob[44:48])
        cfg_json = blob[48:48 + n]
        assert hashlib.sha256(cfg_json).digest() == blob[12:44] == model.cfg.digest()
        assert json.loads(cfg_json)["alpha"] == 0.35
        (count,) = struct.unpack("<I", blob[48 + n:52 + n])
        assert count == len(model.parameters())

    def test_first_record(self, model):
        blob = checkpoint.encode(model)
        (n,) = struct.unpack("<I", blob[44:48])
        pos = 52 + n
        (ln,) = struct.unpack("<H", blob[pos:pos + 2])
        name, p = next(iter(model.named_parameters()))
        assert blob[pos + 2:pos + 2 + ln].decode() == name
        pos += 2 + ln
        ndim = blob[pos]
        dims = struct.unpack(f"<{ndim}I", blob[pos + 1:pos + 1 + 4 * ndim])
        assert dims == p.shape
        start = pos + 1 + 4 * ndim
        vals = np.frombuffer(blob[start:start + 8 * p.size], dtype="<f8")
        np.testing.assert_array_equal(vals, p.data.reshape(-1))

    @pytest.mark.parametrize("corrupt", ["magic", "digest", "truncate", "trailing"])
    def test_corruption_detected(self, model, corrupt):
        blob = bytearray(checkpoint.encode(model))
        if corrupt == "magic":
            blob[0:1] = b"X"
        elif corrupt == "digest":
            blob[20] ^= 0xFF
        elif corrupt == "truncate":
            blob = blob[:-3]
        else:
            blob += b"\0"
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.decode(bytes(blob))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            checkpoint.load(tmp_path / "nope.bin")
