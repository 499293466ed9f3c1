import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from casa.errors import DataError, FormatError, IoError, PairingError, ShapeError
from casa.tensor_store import (
    DeltaMap,
    LoraAdapter,
    LoraPair,
    RawTensor,
    WeightMap,
    adapter_weights,
    checkpoint_bytes,
    compute_fft_delta,
    load_checkpoint,
    materialize_lora_delta,
    pair_lora,
    resolve_layer_key,
    save_checkpoint,
)


def _write(path, header: dict, payload: bytes):
    text = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(text)) + text + payload)


def test_load_identity(tmp_path):
    p = tmp_path / "w.safetensors"
    _write(p, {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}},
           struct.pack("<4f", 1, 0, 0, 1))
    w = load_checkpoint(p)
    assert list(w.keys()) == ["w"]
    np.testing.assert_array_equal(w["w"], np.eye(2))
    assert w["w"].dtype == np.float64
    assert w.dtype_of("w") == "F32"


def test_header_length_past_eof(tmp_path):
    p = tmp_path / "bad.safetensors"
    p.write_bytes(struct.pack("<Q", 10_000) + b"{}")
    with pytest.raises(FormatError):
        load_checkpoint(p)


@pytest.mark.parametrize("blob", [b"", b"\x01\x00", struct.pack("<Q", 3) + b"{x}", struct.pack("<Q", 2) + b"[]"])
def test_malformed_headers(tmp_path, blob):
    p = tmp_path / "bad.safetensors"
    p.write_bytes(blob)
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_offsets_out_of_bounds(tmp_path):
    p = tmp_path / "oob.safetensors"
    _write(p, {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, b"\x00" * 8)
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_size_mismatch(tmp_path):
    p = tmp_path / "sz.safetensors"
    _write(p, {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 8]}}, b"\x00" * 16)
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_nan_is_rejected_with_key(tmp_path):
    p = tmp_path / "nan.safetensors"
    _write(p, {"layer.q": {"dtype": "F64", "shape": [1, 2], "data_offsets": [0, 16]}},
           struct.pack("<2d", 1.0, float("nan")))
    with pytest.raises(DataError, match="layer.q"):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_checkpoint(tmp_path / "nope.safetensors")


def test_unwritable_path(tmp_path):
    with pytest.raises(IoError):
        save_checkpoint(WeightMap(entries={}), tmp_path / "missing_dir" / "x.safetensors")


def test_non_matrix_tensors_kept_as_extras(tmp_path):
    p = tmp_path / "mix.safetensors"
    _write(p, {
        "b": {"dtype": "F32", "shape": [3], "data_offsets": [0, 12]},
        "w": {"dtype": "F32", "shape": [1, 1], "data_offsets": [12, 16]},
    }, struct.pack("<4f", 1, 2, 3, 4))
    w = load_checkpoint(p)
    assert list(w.keys()) == ["w"]
    assert w.skipped == ("b",)
    np.testing.assert_array_equal(w.extras["b"].data, np.array([1, 2, 3], dtype=np.float32))


def test_entries_are_read_only(tmp_path):
    w = WeightMap(entries={"a": np.ones((2, 2))})
    with pytest.raises(ValueError):
        w["a"][0, 0] = 5


def test_save_empty():
    data = checkpoint_bytes(WeightMap(entries={}))
    assert data == struct.pack("<Q", 2) + b"{}"


@pytest.mark.parametrize("tag,fmt", [("F32", "<f"), ("F64", "<d")])
def test_save_scalar_encoding(tag, fmt):
    data = checkpoint_bytes(WeightMap(entries={"x": np.array([[3.0]])}, dtype=tag))
    (n,) = struct.unpack("<Q", data[:8])
    assert data[8 + n:] == struct.pack(fmt, 3.0)


def test_header_keys_sorted_and_payload_in_same_order():
    w = WeightMap(entries={"z": np.ones((1, 1)), "a": 2 * np.ones((1, 1))}, dtype="F32")
    data = checkpoint_bytes(w)
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    assert list(header) == ["a", "z"]
    assert header["a"]["data_offsets"] == [0, 4]
    assert data[8 + n:] == struct.pack("<2f", 2.0, 1.0)


def test_save_rejects_non_finite():
    d = DeltaMap(entries={"k": np.array([[np.inf]])}, kind="fft")
    with pytest.raises(DataError):
        checkpoint_bytes(d)


def _three_tensor_map(rng):
    return WeightMap(
        entries={
            "l0.w": rng.standard_normal((5, 3)).astype(np.float32).astype(np.float64),
            "l1.w": rng.standard_normal((4, 4)).astype(np.float32).astype(np.float64),
            "l2.w": rng.standard_normal((2, 6)).astype(np.float32).astype(np.float64),
        },
        dtype="F32",
    )


def test_roundtrip_payload_bytes(tmp_path, rng):
    p1, p2 = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    save_checkpoint(_three_tensor_map(rng), p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_save_load_save_idempotent(tmp_path, rng):
    w = WeightMap(
        entries={"a": rng.standard_normal((3, 2)), "b.weight": rng.standard_normal((2, 2))},
        dtype="F64",
        dtypes={"b.weight": "BF16"},
        extras={"n": RawTensor("I64", (2,), np.array([7, -1], dtype="<i8"))},
        metadata={"format": "pt"},
    )
    first = checkpoint_bytes(w)
    p = tmp_path / "x.safetensors"
    p.write_bytes(first)
    assert checkpoint_bytes(load_checkpoint(p)) == first


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_f32_roundtrip_is_bitwise(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "x.safetensors"
    save_checkpoint(WeightMap(entries={"x": arr.astype(np.float64)}, dtype="F32"), p)
    back = load_checkpoint(p)["x"].astype(np.float32)
    assert back.tobytes() == arr.tobytes()


@given(hnp.arrays(np.uint16, (3, 4), elements=st.integers(0, 0x7F7F)))
def test_bf16_roundtrip_is_bitwise(tmp_path_factory, raw):
    # 0x7F80 and above are Inf/NaN patterns; stay below them
    p = tmp_path_factory.mktemp("bf") / "x.safetensors"
    p.write_bytes(checkpoint_bytes(WeightMap(entries={}, extras={"x": RawTensor("BF16", (3, 4), raw)})))
    loaded = load_checkpoint(p)
    assert loaded.dtype_of("x") == "BF16"
    assert checkpoint_bytes(loaded) == p.read_bytes()


# ---------------------------------------------------------------------------
# LoRA pairing


def test_pair_default_alpha(rng):
    raw = WeightMap(entries={"q.lora_A.weight": rng.standard_normal((4, 48)),
                             "q.lora_B.weight": rng.standard_normal((64, 4))})
    ad = pair_lora(raw)
    assert list(ad.pairs) == ["q"]
    assert ad.pairs["q"].rank == 4
    assert ad.pairs["q"].alpha == 4.0
    assert not ad.pairs["q"].has_alpha


def test_pair_missing_b():
    raw = WeightMap(entries={"q.lora_A.weight": np.ones((4, 48))})
    with pytest.raises(PairingError, match="q"):
        pair_lora(raw)


def test_pair_shape_mismatch():
    raw = WeightMap(entries={"q.lora_A.weight": np.ones((4, 8)), "q.lora_B.weight": np.ones((6, 3))})
    with pytest.raises(PairingError, match="q"):
        pair_lora(raw)


def test_pair_down_up_with_alpha_and_unmatched(rng):
    raw = WeightMap(
        entries={"x.lora_down.weight": rng.standard_normal((2, 5)),
                 "x.lora_up.weight": rng.standard_normal((3, 2)),
                 "y.lora_mid.weight": np.ones((2, 2))},
        extras={"x.alpha": RawTensor("F32", (), np.array(8.0, dtype="<f4"))},
    )
    ad = pair_lora(raw)
    assert ad.pairs["x"].alpha == 8.0
    assert ad.pairs["x"].convention == (".lora_down.weight", ".lora_up.weight")
    assert ad.unmatched == ("y.lora_mid.weight",)


def test_alpha_scaling(rng):
    A, B = rng.standard_normal((4, 6)), rng.standard_normal((5, 4))
    ad = LoraAdapter(pairs={"k": LoraPair(A=A, B=B, alpha=8.0, has_alpha=True)})
    delta = materialize_lora_delta(ad)
    assert delta.kind == "lora"
    expected = np.zeros((5, 6))
    for i in range(5):
        for j in range(6):
            expected[i, j] = 2.0 * sum(B[i, r] * A[r, j] for r in range(4))
    np.testing.assert_allclose(delta["k"], expected, rtol=1e-13, atol=1e-13)


def test_adapter_layout_roundtrip(tmp_path, rng):
    ad = LoraAdapter(pairs={
        "a": LoraPair(A=rng.standard_normal((2, 3)), B=rng.standard_normal((4, 2)), alpha=6.0, has_alpha=True, dtype="F64"),
        "b": LoraPair(A=rng.standard_normal((1, 3)), B=rng.standard_normal((4, 1)), alpha=1.0,
                      convention=(".lora_down.weight", ".lora_up.weight"), dtype="F64"),
    })
    p = tmp_path / "ad.safetensors"
    save_checkpoint(adapter_weights(ad), p)
    back = pair_lora(load_checkpoint(p))
    assert set(back.pairs) == {"a", "b"}
    assert back.pairs["a"].alpha == 6.0 and back.pairs["b"].alpha == 1.0
    assert "b.alpha" not in load_checkpoint(p).extras
    np.testing.assert_array_equal(back.pairs["a"].B, ad.pairs["a"].B)


def test_zero_b_gives_zero_delta():
    ad = LoraAdapter(pairs={"k": LoraPair(A=np.ones((2, 3)), B=np.zeros((4, 2)), alpha=2.0)})
    assert not materialize_lora_delta(ad)["k"].any()


def test_rank_one_hand_example():
    ad = LoraAdapter(pairs={"k": LoraPair(A=np.array([[0.0, 2.0]]), B=np.array([[1.0], [0.0]]), alpha=1.0)})
    np.testing.assert_array_equal(materialize_lora_delta(ad)["k"], [[0, 2], [0, 0]])


def test_materialized_rank_bounded(rng):
    for _ in range(20):
        ad = LoraAdapter(pairs={"k": LoraPair(A=rng.standard_normal((4, 30)), B=rng.standard_normal((25, 4)), alpha=4.0)})
        s = np.linalg.svd(materialize_lora_delta(ad)["k"], compute_uv=False)
        assert s[4] / s[0] < 1e-10


# ---------------------------------------------------------------------------
# deltas


def test_fft_delta_hand_example():
    s = WeightMap(entries={"k": np.array([[1.0, 2], [3, 4]])})
    t = WeightMap(entries={"k": np.array([[2.0, 2], [3, 5]])})
    d = compute_fft_delta(s, t)
    assert d.kind == "fft"
    np.testing.assert_array_equal(d["k"], np.eye(2))


def test_fft_delta_self_is_zero(rng):
    s = WeightMap(entries={f"l{i}": rng.standard_normal((3, 4)) for i in range(3)})
    assert all(not v.any() for v in compute_fft_delta(s, s).entries.values())


def test_fft_delta_reconstructs_target_exactly(rng):
    # relative drift keeps t/2 <= s <= 2t, where t - s is exact (Sterbenz) and so is s + (t - s)
    s = WeightMap(entries={f"l{i}": rng.standard_normal((6, 5)) for i in range(8)})
    t = WeightMap(entries={k: v * (1 + 1e-3 * rng.uniform(-1, 1, v.shape)) for k, v in s.items()})
    d = compute_fft_delta(s, t)
    for k in s.keys():
        assert np.array_equal(s[k] + d[k], t[k])


def test_fft_delta_reconstruction_general_drift(rng):
    s = WeightMap(entries={f"l{i}": rng.standard_normal((6, 5)) for i in range(8)})
    t = WeightMap(entries={k: v + rng.standard_normal(v.shape) for k, v in s.items()})
    d = compute_fft_delta(s, t)
    for k in s.keys():
        scale = np.maximum(np.abs(s[k]), np.abs(t[k]))
        assert np.all(np.abs(s[k] + d[k] - t[k]) <= 2 * np.spacing(scale))


def test_fft_delta_one_sided_keys_and_shape_error():
    s = WeightMap(entries={"a": np.ones((2, 2)), "only_s": np.ones((1, 1))})
    t = WeightMap(entries={"a": np.ones((2, 2)), "only_t": np.ones((1, 1))})
    assert list(compute_fft_delta(s, t).keys()) == ["a"]
    with pytest.raises(ShapeError, match="a"):
        compute_fft_delta(s, WeightMap(entries={"a": np.ones((2, 3))}))


def test_resolve_layer_key():
    keys = {"blocks.0.q.weight", "x"}
    assert resolve_layer_key("blocks.0.q", keys) == "blocks.0.q.weight"
    assert resolve_layer_key("base_model.model.blocks.0.q", keys) == "blocks.0.q.weight"
    assert resolve_layer_key("x", keys) == "x"
    assert resolve_layer_key("nope", keys) is None
