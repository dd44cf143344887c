import struct

import numpy as np
import pytest
import torch

from mfdnet.blocks import TransformerBlock
from mfdnet.params import ParamFormatError, ParamStore


def _store():
    rng = np.random.default_rng(0)
    return ParamStore({"a.weight": rng.standard_normal((3, 2, 1, 1)).astype(np.float32),
                       "a.bias": rng.standard_normal(3).astype(np.float32),
                       "scale": np.array(np.pi),
                       "b": rng.standard_normal((2, 5))}, init_seed=-7)


def test_round_trip_bit_exact():
    s = _store()
    back = ParamStore.from_bytes(s.to_bytes())
    assert back.equals(s)
    assert back.init_seed == -7
    assert list(back) == list(s)
    assert back.to_bytes() == s.to_bytes()


def test_special_values_round_trip():
    arr = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 1e-45, np.finfo(np.float32).max], dtype=np.float32)
    back = ParamStore.from_bytes(ParamStore({"x": arr}).to_bytes())
    assert back["x"].tobytes() == arr.tobytes()


def test_header_layout():
    data = _store().to_bytes()
    assert data[:4] == b"MFDP"
    version, count, seed = struct.unpack_from("<HIq", data, 4)
    assert (version, count, seed) == (1, 4, -7)
    (name_len,) = struct.unpack_from("<H", data, 18)
    assert data[20:20 + name_len] == b"a.weight"


def test_big_endian_input_normalized():
    arr = np.arange(4, dtype=">f4")
    s = ParamStore({"x": arr})
    assert s["x"].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(ParamStore.from_bytes(s.to_bytes())["x"], np.arange(4))


def test_module_round_trip():
    torch.manual_seed(1)
    m = TransformerBlock(4)
    s = ParamStore.from_module(m, init_seed=1)
    torch.manual_seed(2)
    m2 = TransformerBlock(4)
    ParamStore.from_bytes(s.to_bytes()).load_into(m2)
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    assert s.num_scalars() == sum(p.numel() for p in m.parameters())


def test_truncation_reports_offset():
    data = _store().to_bytes()
    for cut in (2, 10, 25, len(data) - 1):
        with pytest.raises(ParamFormatError) as e:
            ParamStore.from_bytes(data[:cut], base_offset=100)
        assert e.value.offset >= 100


def test_trailing_and_bad_magic():
    data = _store().to_bytes()
    with pytest.raises(ParamFormatError, match="trailing"):
        ParamStore.from_bytes(data + b"\0")
    with pytest.raises(ParamFormatError, match="magic"):
        ParamStore.from_bytes(b"XXXX" + data[4:])


def test_load_into_mismatch():
    with pytest.raises(KeyError):
        ParamStore({"nope": np.zeros(1, np.float32)}).load_into(TransformerBlock(2, heads=1))
    with pytest.raises(TypeError):
        ParamStore({"x": np.zeros(2, np.int32)})
