import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpllsim.numerics import (AdcSpec, FixedFormat, enob, ideal_snr, quantize, spectral_snr,
                              wrap_phase)

# high-precision references (mpmath, 30 digits)
WRAP_MINUS_6_2 = 0.08318530717958629929
ENOB_63 = 10.172757475083058
ENOB_86 = 13.993355481727574
SNR_7_5MHZ = 72.20818753952375

Q14 = FixedFormat(14, True, 1 / 8192)


class TestQuantize:
    def test_zero(self):
        assert quantize(0.0, Q14) == 0

    def test_top_saturates(self):
        assert quantize(1.0, Q14) == 8191
        assert quantize(-5.0, Q14) == -8192

    def test_negative_half(self):
        assert quantize(-0.5, Q14) == -4096

    def test_half_even(self):
        unit = FixedFormat(8, True, 1.0)
        assert [quantize(x, unit) for x in (0.5, 1.5, 2.5, -0.5, -1.5)] == [0, 2, 2, 0, -2]

    def test_array(self):
        out = quantize(np.array([0.0, 0.25, 2.0]), Q14)
        assert out.dtype == np.int64
        assert out.tolist() == [0, 2048, 8191]

    def test_unsigned_range(self):
        fmt = FixedFormat(16, False)
        assert (fmt.min_code, fmt.max_code) == (0, 65535)
        assert quantize(-3.0, fmt) == 0

    def test_bad_format(self):
        with pytest.raises(ValueError):
            FixedFormat(0)
        with pytest.raises(ValueError):
            FixedFormat(14, scale=0.0)

    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_monotone(self, a, b):
        lo, hi = min(a, b), max(a, b)
        assert quantize(lo, Q14) <= quantize(hi, Q14)

    @given(st.integers(-8192, 8191))
    def test_idempotent_on_codes(self, code):
        x = Q14.to_real(code)
        assert quantize(x, Q14) == code
        assert quantize(Q14.to_real(quantize(x, Q14)), Q14) == code


class TestWrap:
    def test_examples(self):
        assert wrap_phase(0.0) == 0.0
        assert wrap_phase(math.pi) == -math.pi
        assert wrap_phase(-6.2) == pytest.approx(WRAP_MINUS_6_2, abs=1e-15)

    def test_rejects_non_finite(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(ValueError):
                wrap_phase(bad)

    def test_array_half_open(self):
        out = wrap_phase(np.array([math.pi, -math.pi, 3 * math.pi, -1e-18]))
        assert np.all(out >= -math.pi) and np.all(out < math.pi)

    @given(st.floats(-50, 50), st.integers(-10**6, 10**6))
    def test_periodic(self, x, n):
        a, b = wrap_phase(x), wrap_phase(x + 2 * math.pi * n)
        d = abs(a - b)
        assert min(d, 2 * math.pi - d) < 1e-9

    @given(st.floats(-1e3, 1e3))
    def test_range_and_congruence(self, x):
        w = wrap_phase(x)
        assert -math.pi <= w < math.pi
        k = (x - w) / (2 * math.pi)
        assert abs(k - round(k)) < 1e-9


class TestSnr:
    def test_full_band(self):
        assert spectral_snr(AdcSpec(63.0), 62.5e6) == 63.0
        assert spectral_snr(AdcSpec(73.0), 62.5e6) == 73.0

    def test_narrow_band(self):
        assert spectral_snr(AdcSpec(63.0), 7.5e6) == pytest.approx(SNR_7_5MHZ, abs=1e-12)
        assert round(spectral_snr(AdcSpec(63.0), 7.5e6), 1) == 72.2

    def test_band_out_of_range(self):
        with pytest.raises(ValueError):
            spectral_snr(AdcSpec(63.0), 0.0)
        with pytest.raises(ValueError):
            spectral_snr(AdcSpec(63.0), 62.6e6)

    def test_spec_cannot_beat_ideal(self):
        with pytest.raises(ValueError):
            AdcSpec(90.0, bits=14)
        AdcSpec(ideal_snr(14), bits=14)

    def test_enob(self):
        assert enob(63.0) == pytest.approx(ENOB_63, abs=1e-12)
        assert enob(86.0) == pytest.approx(ENOB_86, abs=1e-12)
        assert round(enob(63.0), 1) == 10.2
        assert enob(1.76) == 0.0

    @pytest.mark.parametrize("bits", range(1, 25))
    def test_enob_inverts_ideal(self, bits):
        assert enob(6.02 * bits + 1.76) == pytest.approx(bits, abs=1e-12)

    @given(st.floats(0.0, 86.0), st.sampled_from([1e6, 8e6, 125e6]))
    def test_full_band_identity(self, snr, fs):
        assert spectral_snr(AdcSpec(snr, 14, fs), fs / 2) == snr
