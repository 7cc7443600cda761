import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from dpllsim.plant import (DacSpec, DelayLine, Injection, LinkModel, LinkShape, NoiseKind,
                           NoiseSource, NoiseSpec, PlantModel, VcoSpec, dac_code, dac_map,
                           delay_response, delay_step, discretize_link, link_response,
                           load_response_csv, noise_step, total_latency, vco_code, vco_map)

VCO_32768 = 31250476.844434272  # 32768 * 62.5e6 / 65535, mpmath


class TestMaps:
    def test_vco_endpoints(self):
        assert vco_map(0) == 0.0
        assert vco_map(65535) == 62.5e6
        assert vco_map(32768) == pytest.approx(VCO_32768, rel=1e-15)
        assert VcoSpec().gain == 31.25e6

    def test_vco_range(self):
        with pytest.raises(ValueError):
            vco_map(65536)
        with pytest.raises(ValueError):
            vco_map(-1)

    @given(st.integers(0, 65534))
    def test_vco_monotone(self, code):
        assert vco_map(code) < vco_map(code + 1)

    def test_vco_code(self):
        spec = VcoSpec(quiescent_offset=31.25e6)
        assert vco_code(0.0, spec) == 32768  # rint(32767.5) is even
        assert vco_code(5.0, spec) == 65535
        assert vco_code(-5.0, spec) == 0

    def test_dac(self):
        assert dac_map(0) == 0.0
        assert dac_map(-8192) == -1.0
        assert dac_map(4096) == 0.5
        assert dac_map(8191) == pytest.approx(1 - 2 / 2**14)
        with pytest.raises(ValueError):
            dac_map(8192)

    @given(st.integers(-8192, 8190))
    def test_dac_monotone_roundtrip(self, code):
        assert dac_map(code) < dac_map(code + 1)
        assert dac_code(dac_map(code)) == code

    def test_dac_asymmetric_range(self):
        spec = DacSpec(v_min=0.0, v_max=2.0)
        assert dac_map(-8192, spec) == 0.0
        assert dac_code(1.0, spec) == 0


class TestDelay:
    def test_identity(self):
        d = DelayLine(0)
        assert [delay_step(d, x) for x in (1.0, 2.0)] == [1.0, 2.0]

    def test_impulse(self):
        d = DelayLine(5)
        out = d.process([1.0] + [0.0] * 9)
        assert out.tolist() == [0.0] * 5 + [1.0] + [0.0] * 4

    def test_from_seconds(self):
        assert DelayLine.from_seconds(2.0e-6, 8e6).samples == 16

    @given(st.lists(st.floats(-1e6, 1e6), max_size=50), st.integers(0, 20))
    def test_pure_shift(self, x, d):
        out = DelayLine(d).process(x)
        assert out[d:].tolist() == x[: max(len(x) - d, 0)]

    def test_phase_50khz(self):
        assert np.angle(delay_response(50e3, 2.0e-6), deg=True) == pytest.approx(-36.0, abs=1e-12)

    def test_negative(self):
        with pytest.raises(ValueError):
            DelayLine(-1)


class TestLink:
    m = LinkModel()

    def test_dc(self):
        assert abs(link_response(1e-3, self.m)) == pytest.approx(1.0, abs=1e-9)

    def test_null_at_125k(self):
        assert abs(link_response(125e3, self.m)) < 1e-12
        f = np.linspace(1e3, 124e3, 500)
        assert np.all(np.abs(link_response(f, self.m)) > 0)

    @pytest.mark.parametrize("n", range(5))
    def test_nulls(self, n):
        f = (2 * n + 1) / (4 * self.m.tau_link)
        assert abs(link_response(f, self.m)) < 1e-9

    def test_62k5(self):
        assert abs(link_response(62.5e3, self.m)) == pytest.approx(0.5, abs=1e-12)
        h = link_response(62.5e3, self.m, shape=LinkShape.ROUND_TRIP)
        assert abs(h) == pytest.approx(math.sqrt(0.5), abs=1e-12)

    def test_single_pass(self):
        m = LinkModel(double_pass=False)
        assert abs(link_response(125e3, m)) == pytest.approx(1.0)

    def test_phase(self):
        f = 10e3
        want = -2 * np.pi * f * (self.m.tau_aom + self.m.tau_link)
        assert np.angle(link_response(f, self.m)) == pytest.approx(want)

    def test_measured_aom(self, tmp_path):
        path = tmp_path / "aom.csv"
        f = np.geomspace(10, 1e6, 50)
        h = delay_response(f, 1.5e-6)
        ph = np.rad2deg(np.unwrap(np.angle(h)))
        rows = "\n".join(f"{float(a)!r},0.0,{float(p)!r}" for a, p in zip(f, ph))
        path.write_text("freq_hz,mag_db,phase_deg\n" + rows + "\n")
        meas = load_response_csv(path)
        fq = np.array([1e3, 3e4])
        assert np.allclose(link_response(fq, self.m, aom_vco=meas), link_response(fq, self.m), atol=2e-3)

    def test_bad_csv(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("f,mag,phase\n1,0,0\n2,0,0\n")
        with pytest.raises(ValueError):
            load_response_csv(path)

    def test_negative_delay(self):
        with pytest.raises(ValueError):
            LinkModel(tau_link=-1.0)


class TestLatency:
    def test_examples(self):
        assert total_latency({"demodulation": 207e-9, "rest": 200e-9}) == pytest.approx(407e-9, rel=1e-15)
        assert total_latency([407e-9, 158e-9]) == pytest.approx(565e-9, rel=1e-15)
        assert total_latency([2.0e-6, 1.5e-6, 0.5e-6]) == pytest.approx(4.0e-6, rel=1e-15)
        assert LinkModel().total_delay == pytest.approx(4.0e-6, rel=1e-15)

    def test_negative(self):
        with pytest.raises(ValueError):
            total_latency([1.0, -1e-9])


class TestNoise:
    def test_zero_level(self):
        src = NoiseSource(NoiseSpec(NoiseKind.WHITE_PHASE, 0.0), 1e6)
        assert not src.block(1000).any()

    def test_adc_snr(self):
        src = NoiseSource(NoiseSpec(NoiseKind.ADC_SNR, 63.0, seed=9), 125e6, carrier_amplitude=1.0)
        n = src.block(10**6)
        snr = 10 * np.log10(0.5 / np.mean(n**2))
        assert snr == pytest.approx(63.0, abs=0.3)

    def test_white_phase_psd(self):
        s0 = 1e-10
        x = NoiseSource(NoiseSpec(NoiseKind.WHITE_PHASE, s0, seed=2), 1e6).block(1 << 18)
        _, p = signal.welch(x, fs=1e6, nperseg=4096)
        assert np.mean(p[1:-1]) == pytest.approx(s0, rel=0.1)

    def test_white_frequency_psd(self):
        h0 = 4.0
        fs = 1e6
        phi = NoiseSource(NoiseSpec(NoiseKind.WHITE_FREQUENCY, h0, seed=2), fs).block(1 << 18)
        nu = np.diff(phi) * fs / (2 * np.pi)
        _, p = signal.welch(nu, fs=fs, nperseg=4096)
        assert np.mean(p[1:-1]) == pytest.approx(h0, rel=0.1)

    def test_seeds(self):
        spec = NoiseSpec(NoiseKind.WHITE_PHASE, 1.0, seed=5)
        a = NoiseSource(spec, 1e6).block(10**6)
        b = NoiseSource(spec, 1e6).block(10**6)
        c = NoiseSource(NoiseSpec(NoiseKind.WHITE_PHASE, 1.0, seed=6), 1e6).block(10**6)
        assert a.tobytes() == b.tobytes()
        assert abs(np.corrcoef(a, c)[0, 1]) < 0.01

    def test_base_seed_changes_stream(self):
        spec = NoiseSpec(NoiseKind.WHITE_PHASE, 1.0, seed=5)
        a = NoiseSource(spec, 1e6, base_seed=1).block(100)
        b = NoiseSource(spec, 1e6, base_seed=2).block(100)
        assert not np.array_equal(a, b)

    @given(st.lists(st.integers(0, 300), min_size=1, max_size=6))
    def test_chunking(self, sizes):
        spec = NoiseSpec(NoiseKind.WHITE_FREQUENCY, 2.0, seed=1)
        whole = NoiseSource(spec, 1e6).block(sum(sizes))
        src = NoiseSource(spec, 1e6)
        parts = np.concatenate([src.block(n) for n in sizes])
        assert parts.tobytes() == whole.tobytes()

    def test_step(self):
        spec = NoiseSpec(NoiseKind.WHITE_PHASE, 1.0, seed=3)
        src = NoiseSource(spec, 1e6)
        first = noise_step(src, spec)
        assert first == NoiseSource(spec, 1e6).block(1)[0]
        with pytest.raises(ValueError):
            noise_step(src, NoiseSpec(NoiseKind.WHITE_PHASE, 2.0))

    def test_spec_validation(self):
        assert NoiseSpec("white_phase", 1.0).injection is Injection.DETECTION
        assert NoiseSpec("white_frequency", 1.0).injection is Injection.LINK
        with pytest.raises(ValueError):
            NoiseSpec(NoiseKind.WHITE_PHASE, -1.0)
        with pytest.raises(ValueError):
            NoiseSpec(NoiseKind.ADC_SNR, 60.0, injection="link")


class TestDiscretize:
    def test_fiber_link_desk_scale(self):
        m = discretize_link(LinkModel(kc=2e6), 8e6, front_end_latency=0.26e-6)
        assert m.actuator_delay == 14
        assert m.taps == ((0, 0.5), (32, 0.5))
        assert (m.remote_delay, m.noise_delay) == (16, 16)

    def test_response_matches_link(self):
        fs = 8e6
        link = LinkModel(tau_fpga=0.0)
        m = discretize_link(link, fs)
        f = np.geomspace(100, 1e5, 20)
        want = link_response(f, link, shape=LinkShape.ROUND_TRIP)
        assert np.allclose(m.response(f), want, atol=1e-9)

    def test_single_pass(self):
        m = discretize_link(LinkModel(double_pass=False), 8e6)
        assert m.taps == ((16, 1.0),)

    def test_needs_delay(self):
        with pytest.raises(ValueError):
            PlantModel(fs=1.0, kc=1.0, actuator_delay=0)
