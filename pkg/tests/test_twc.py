import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from inv.config import toy_2d_config
from inv.errors import CorruptData, InvalidArgument
from inv.model import InvArtifact, StructureBlock, split_model
from inv.nn import init_network
from inv.twc import (
    CODEC_LZMA,
    CODEC_STORED,
    CODEC_ZLIB,
    StreamingDecoder,
    StreamingEncoder,
    TwcPayload,
    blocks_from_matrix,
    build_temporal_matrix,
    compression_report,
    expand16,
    megabits_per_second,
    truncate16,
    truncate_values,
    twc_decode,
    twc_encode,
)

finite_f32 = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12),
    elements=st.floats(-2.0**100, 2.0**100, width=32, allow_nan=False),
)


def _bf16_reference(x: float) -> float:
    """Scalar round-to-nearest-even onto 8 significant bits, via exact fractions."""
    if x == 0:
        return x
    m, e = math.frexp(x)  # x = m * 2^e, 0.5 <= |m| < 1
    scaled = m * 256  # 8 significant bits
    r = round(scaled)  # Python rounds half to even
    return math.ldexp(r, e - 8)


def _smooth_matrix(frames=12, cols=800, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.normal(0, 0.1, cols)
    steps = rng.normal(0, 1e-4, (frames, cols)).cumsum(axis=0)
    return (base + steps).astype(np.float32)


# --- truncation -------------------------------------------------------------


def test_truncation_matches_scalar_reference():
    rng = np.random.default_rng(3)
    x = (rng.standard_normal(5000) * np.exp(rng.uniform(-20, 20, 5000))).astype(np.float32)
    got = truncate_values(x).astype(np.float64)
    want = np.array([_bf16_reference(float(v)) for v in x])
    assert np.array_equal(got, want)


def test_truncation_relative_error_bound():
    rng = np.random.default_rng(4)
    x = (rng.uniform(1, 2, 200_000) * 2.0 ** rng.integers(-60, 60, 200_000)).astype(np.float32)
    x *= rng.choice([-1, 1], x.size).astype(np.float32)
    rel = np.abs(truncate_values(x).astype(np.float64) - x) / np.abs(x)
    assert rel.max() <= 2.0**-8
    # absolute error is uniform on [0, 2^-8] for mantissa m uniform on [1, 2),
    # so the mean relative error is 2^-9 * E[1/m] = 2^-9 * ln 2
    assert rel.mean() == pytest.approx(2.0**-9 * math.log(2), rel=0.02)


def test_truncation_of_random_normals():
    x = np.random.default_rng(5).standard_normal(100_000).astype(np.float32)
    rel = np.abs(truncate_values(x).astype(np.float64) - x) / np.abs(x)
    assert rel.max() <= 2.0**-8
    assert 0.5 * 2.0**-9 < rel.mean() < 2.0**-9
    assert truncate_values(np.float32(1.0)) == 1.0


def test_toward_zero_mode_bound():
    x = np.float32(1.0) + np.float32(2.0**-8) * np.arange(256, dtype=np.float32) / 256
    t = expand16(truncate16(x, toward_zero=True))
    assert np.all(t == 1.0)
    assert np.max(np.abs(t - x) / x) <= 2.0**-7


def test_truncation_special_values():
    assert truncate16(np.float32(0.0)) == 0
    assert truncate16(np.float32(-0.0)) == 0x8000
    big = np.float32(np.finfo(np.float32).max)
    assert np.isfinite(truncate_values(big))
    for bad in (np.inf, -np.inf, np.nan):
        with pytest.raises(InvalidArgument):
            truncate16(np.float32(bad))


def test_truncation_ties_to_even():
    # 1 + 2^-8 sits exactly halfway between 1 and 1 + 2^-7; 1 has the even mantissa
    assert truncate_values(np.float32(1 + 2.0**-8)) == 1.0
    assert truncate_values(np.float32(1 + 3 * 2.0**-8)) == np.float32(1 + 2 * 2.0**-7)


# --- batched codec ------------------------------------------------------------


@pytest.mark.parametrize("codec", [CODEC_STORED, CODEC_ZLIB, CODEC_LZMA])
def test_roundtrip_equals_truncation(codec):
    m = _smooth_matrix()
    back = twc_decode(twc_encode(m, codec).to_bytes())
    assert back.tobytes() == truncate_values(m).tobytes()


@settings(max_examples=40, deadline=None)
@given(finite_f32)
def test_roundtrip_property(m):
    back = twc_decode(twc_encode(m).to_bytes())
    assert back.tobytes() == truncate_values(m).tobytes()


def test_identical_frames_compress_to_five_percent():
    row = np.random.default_rng(0).normal(0, 0.1, 4000).astype(np.float32)
    m = np.tile(row, (20, 1))
    assert len(twc_encode(m).to_bytes()) <= 0.05 * m.nbytes


def test_single_frame_at_most_fifty_five_percent():
    row = np.random.default_rng(0).normal(0, 0.1, (1, 4000)).astype(np.float32)
    assert len(twc_encode(row).to_bytes()) <= 0.55 * row.nbytes


def test_smooth_sequence_beats_independent_frames():
    m = _smooth_matrix(frames=20, cols=4000)
    joint = len(twc_encode(m).to_bytes())
    separate = sum(len(twc_encode(m[i : i + 1]).to_bytes()) for i in range(len(m)))
    assert joint < separate


def test_payload_grows_with_frames():
    m = _smooth_matrix(frames=12)
    sizes = [len(twc_encode(m[:n]).to_bytes()) for n in range(1, 13)]
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))


def test_identical_frame_costs_less_than_a_row():
    m = _smooth_matrix(frames=8, cols=2000)
    before = len(twc_encode(m).to_bytes())
    after = len(twc_encode(np.vstack([m, m[-1:]])).to_bytes())
    assert before <= after < before + 2 * m.shape[1]


def test_every_single_byte_corruption_detected():
    blob = bytearray(twc_encode(_smooth_matrix(frames=3, cols=50)).to_bytes())
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0x01
        with pytest.raises(CorruptData):
            twc_decode(bytes(bad))


def test_truncated_payload_rejected():
    blob = twc_encode(_smooth_matrix(frames=3, cols=50)).to_bytes()
    for n in (0, 5, len(blob) - 1):
        with pytest.raises(CorruptData):
            twc_decode(blob[:n])


def test_unknown_codec_rejected_even_with_valid_crc():
    p = twc_encode(_smooth_matrix(frames=2, cols=10))
    p.codec = 9
    with pytest.raises(CorruptData):
        twc_decode(p.to_bytes())


def test_header_layout():
    m = _smooth_matrix(frames=4, cols=7)
    blob = twc_encode(m, CODEC_STORED).to_bytes()
    assert blob[0] == CODEC_STORED
    assert int.from_bytes(blob[1:5], "little") == 4
    assert int.from_bytes(blob[5:9], "little") == 7
    assert len(blob) == 9 + 4 * 7 * 2 + 4
    assert TwcPayload.from_bytes(blob).frames == 4


def test_encoding_is_deterministic():
    m = _smooth_matrix()
    assert twc_encode(m).to_bytes() == twc_encode(m.copy()).to_bytes()


# --- streaming ----------------------------------------------------------------


def test_streaming_matches_batched_decode():
    m = _smooth_matrix(frames=10)
    enc, dec = StreamingEncoder(), StreamingDecoder()
    rows = [dec.decode(enc.encode(r).to_bytes()) for r in m]
    assert np.stack(rows).tobytes() == twc_decode(twc_encode(m)).tobytes()


def test_streaming_rejects_multi_frame_payload():
    with pytest.raises(CorruptData):
        StreamingDecoder().decode(twc_encode(_smooth_matrix(frames=2, cols=5)))


def test_streaming_rejects_row_length_change():
    enc, dec = StreamingEncoder(), StreamingDecoder()
    dec.decode(enc.encode(np.zeros(5, np.float32)))
    with pytest.raises(CorruptData):
        dec.decode(StreamingEncoder().encode(np.zeros(6, np.float32)))


# --- temporal matrix and reports ------------------------------------------------


def _toy_artifact(n=4):
    cfg = toy_2d_config()
    _, cb = split_model(init_network(cfg, 0), 1)
    frames = [StructureBlock(i, split_model(init_network(cfg, i + 1), 1)[0].layers) for i in range(n)]
    return InvArtifact(cfg, cb, frames, warmup_count=2)


def test_temporal_matrix_roundtrip():
    art = _toy_artifact()
    m = build_temporal_matrix(art.frames)
    assert m.shape == (4, (34 * 64 + 64))
    back = blocks_from_matrix(m, art.frames[0].shapes)
    assert all(a.same_bits(b) for a, b in zip(back, art.frames))


def test_megabits_for_point_three_megabytes():
    assert megabits_per_second(0.3e6, 30) == 72.0


def test_report_fields():
    art = _toy_artifact()
    raw = sum(len(f.tobytes()) for f in art.frames)
    rep = compression_report(art, 1000, fps=30)
    assert rep.raw_bytes == raw
    assert rep.bytes_per_frame == 250.0
    assert rep.ratio == pytest.approx(raw / 1000)
    assert rep.mbps == pytest.approx(250 * 8 * 30 / 1e6)
    # one byte per frame at 1 fps is 8 bits per second
    assert compression_report(art, 4, fps=1).mbps == pytest.approx(8e-6)
    payload = twc_encode(build_temporal_matrix(art.frames))
    assert compression_report(art, payload).compressed_bytes == len(payload.to_bytes())
