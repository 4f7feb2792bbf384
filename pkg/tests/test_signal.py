import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vamod.errors import ChannelCountError, CorruptFileError, DomainError, FormatError
from vamod.signal import (
    AudioBuffer,
    apply_gain_db,
    pre_emphasis,
    read_wav,
    segment,
    sine,
    write_wav,
)


def _raw_wav(path, fmt_tag, channels, rate, bits, payload):
    """Hand-rolled WAV writer so tests can produce files vamod refuses to."""
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * channels * bits // 8,
                      channels * bits // 8, bits)
    body = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    path.write_bytes(b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body)


class TestReadWav:
    def test_pcm16_scaling(self, tmp_path):
        p = tmp_path / "a.wav"
        _raw_wav(p, 1, 1, 44100, 16, struct.pack("<3h", 32767, 0, -32768))
        buf = read_wav(p)
        np.testing.assert_allclose(buf.samples, [32767 / 32768, 0.0, -1.0], atol=1e-9)
        assert buf.sample_rate_hz == 44100

    def test_float32_passthrough(self, tmp_path):
        p = tmp_path / "a.wav"
        _raw_wav(p, 3, 1, 48000, 32, struct.pack("<f", 0.5))
        buf = read_wav(p)
        assert buf.sample_rate_hz == 48000
        np.testing.assert_array_equal(buf.samples, [0.5])

    def test_stereo_rejected(self, tmp_path):
        p = tmp_path / "a.wav"
        _raw_wav(p, 1, 2, 44100, 16, struct.pack("<4h", 1, 2, 3, 4))
        with pytest.raises(ChannelCountError):
            read_wav(p)

    def test_unsupported_encoding(self, tmp_path):
        p = tmp_path / "a.wav"
        _raw_wav(p, 7, 1, 44100, 8, b"\x00\x01")  # mu-law
        with pytest.raises(FormatError):
            read_wav(p)

    def test_pcm24_rejected(self, tmp_path):
        p = tmp_path / "a.wav"
        _raw_wav(p, 1, 1, 44100, 24, b"\x00" * 6)
        with pytest.raises(FormatError):
            read_wav(p)

    def test_not_riff(self, tmp_path):
        p = tmp_path / "a.wav"
        p.write_bytes(b"OggS" + b"\x00" * 40)
        with pytest.raises(FormatError):
            read_wav(p)

    def test_truncated_data(self, tmp_path):
        p = tmp_path / "a.wav"
        _raw_wav(p, 1, 1, 44100, 16, struct.pack("<4h", 1, 2, 3, 4))
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(CorruptFileError):
            read_wav(p)

    def test_missing_file(self, tmp_path):
        from vamod.errors import IoError

        with pytest.raises(IoError):
            read_wav(tmp_path / "nope.wav")


class TestWriteWav:
    def test_float32_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        buf = AudioBuffer(rng.uniform(-1, 1, 44100).astype(np.float32).astype(np.float64))
        p = tmp_path / "a.wav"
        write_wav(buf, p, "float32")
        back = read_wav(p)
        np.testing.assert_array_equal(back.samples, buf.samples)
        assert back.sample_rate_hz == buf.sample_rate_hz

    def test_pcm16_clips(self, tmp_path):
        p = tmp_path / "a.wav"
        write_wav(AudioBuffer(np.array([1.5])), p, "pcm16")
        raw = p.read_bytes()
        assert struct.unpack("<h", raw[-2:])[0] == 32767

    def test_pcm16_quantization_bound(self, tmp_path):
        p = tmp_path / "a.wav"
        write_wav(AudioBuffer(np.array([0.25])), p, "pcm16")
        assert abs(read_wav(p).samples[0] - 0.25) <= 1 / 32768

    def test_pcm16_round_trip_bound_random(self, tmp_path):
        rng = np.random.default_rng(1)
        buf = AudioBuffer(rng.uniform(-1, 1, 1000))
        p = tmp_path / "a.wav"
        write_wav(buf, p, "pcm16")
        err = np.abs(read_wav(p).samples - buf.samples)
        assert err.max() <= 1 / 32768

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(DomainError):
            write_wav(AudioBuffer(np.array([])), tmp_path / "a.wav")

    def test_unwritable_path(self, tmp_path):
        from vamod.errors import IoError

        with pytest.raises(IoError):
            write_wav(AudioBuffer(np.array([0.1])), tmp_path / "no" / "dir" / "a.wav")


class TestPreEmphasis:
    def test_impulse(self):
        out = pre_emphasis(AudioBuffer(np.array([1.0, 0.0, 0.0])))
        np.testing.assert_allclose(out.samples, [1.0, -0.95, 0.0])

    def test_dc(self):
        out = pre_emphasis(AudioBuffer(np.array([1.0, 1.0, 1.0])))
        np.testing.assert_allclose(out.samples, [1.0, 0.05, 0.05])

    def test_nyquist(self):
        out = pre_emphasis(AudioBuffer(np.array([1.0, -1.0, 1.0])))
        np.testing.assert_allclose(out.samples, [1.0, -1.95, 1.95])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        x, y = rng.uniform(-1, 1, 64), rng.uniform(-1, 1, 64)
        lhs = pre_emphasis(AudioBuffer(a * x + b * y)).samples
        rhs = a * pre_emphasis(AudioBuffer(x)).samples + b * pre_emphasis(AudioBuffer(y)).samples
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_length_preserved(self):
        assert len(pre_emphasis(AudioBuffer(np.zeros(17)))) == 17


class TestGain:
    def test_identity(self):
        np.testing.assert_array_equal(apply_gain_db(AudioBuffer(np.array([0.5])), 0.0).samples, [0.5])

    def test_minus_15(self):
        out = apply_gain_db(AudioBuffer(np.array([1.0])), -15.0)
        np.testing.assert_allclose(out.samples, [0.17783], atol=1e-5)

    def test_plus_15(self):
        out = apply_gain_db(AudioBuffer(np.array([0.1])), 15.0)
        np.testing.assert_allclose(out.samples, [0.56234], atol=1e-5)

    def test_non_finite_rejected(self):
        with pytest.raises(DomainError):
            apply_gain_db(AudioBuffer(np.array([0.1])), np.nan)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-40, 40))
    def test_round_trip(self, g):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, 32)
        back = apply_gain_db(apply_gain_db(AudioBuffer(x), g), -g).samples
        np.testing.assert_allclose(back, x, atol=1e-12)


class TestSegment:
    def test_one_second_at_44100(self):
        segs = segment(AudioBuffer(np.zeros(44100)), 100.0)
        assert len(segs) == 10
        assert all(len(s) == 4410 for s in segs)

    def test_short_buffer_empty(self):
        assert segment(AudioBuffer(np.zeros(4409)), 100.0) == []

    def test_remainder_dropped(self):
        x = np.arange(8821, dtype=np.float64)
        segs = segment(AudioBuffer(x), 100.0)
        assert len(segs) == 2
        np.testing.assert_array_equal(np.concatenate([s.samples for s in segs]), x[:8820])

    def test_concat_reproduces_prefix(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, 10000)
        segs = segment(AudioBuffer(x, 8000), 100.0)
        joined = np.concatenate([s.samples for s in segs])
        np.testing.assert_array_equal(joined, x[: len(joined)])

    def test_bad_length(self):
        with pytest.raises(DomainError):
            segment(AudioBuffer(np.zeros(10)), 0.0)


class TestSine:
    def test_probe_tone_peak_to_peak(self):
        buf = sine(50.0, 0.25, 1.0, 44100)
        assert len(buf) == 44100
        assert buf.samples.max() - buf.samples.min() == pytest.approx(0.5, abs=1e-4)

    def test_zero_amplitude(self):
        assert np.all(sine(440.0, 0.0, 0.1).samples == 0.0)

    def test_starts_at_zero(self):
        assert sine(997.0, 0.8, 0.01).samples[0] == 0.0

    def test_nyquist_rejected(self):
        with pytest.raises(DomainError):
            sine(22050.0, 0.5, 0.1, 44100)
        with pytest.raises(DomainError):
            sine(0.0, 0.5, 0.1, 44100)
