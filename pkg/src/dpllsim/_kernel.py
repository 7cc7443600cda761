"""Compiled sample loop for the closed-loop engine.

One call advances every plant and channel by ``n`` samples. All state lives in
the arrays passed in, so consecutive calls continue exactly where the previous
one stopped (chunking never changes the result).
"""

import math

import numpy as np
from numba import njit

PI = math.pi
TWO_PI = 2.0 * math.pi
NCO_BITS = 48
INV_MODULUS = 1.0 / float(1 << NCO_BITS)
MASK48 = np.uint64((1 << NCO_BITS) - 1)
HALF48 = np.uint64(1 << (NCO_BITS - 1))

# channel test point slots
TP_ADC_IN, TP_I, TP_Q, TP_PHASE, TP_INC, TP_FILTER_OUT, TP_DAC_OUT = range(7)
# plant test point slots
TP_REMOTE, TP_BEAT = range(2)

# per-channel gain columns
G_KP, G_KI, G_KII, G_KD, G_DCOEF = range(5)
# per-channel filter state columns
F_ACC1, F_ACC2, F_PREV, F_D = range(4)


@njit(cache=True, nogil=True)
def _clamp(x, lim):
    if x > lim:
        return lim
    if x < -lim:
        return -lim
    return x


@njit(cache=True, nogil=True)
def _rint(y):
    """Round half to even."""
    r = math.floor(y + 0.5)
    if r - y == 0.5 and r % 2.0 != 0.0:
        r -= 1.0
    return r


@njit(cache=True, nogil=True)
def _nco_phase(acc, lut_shift):
    if lut_shift > 0:
        acc = (acc >> np.uint64(lut_shift)) << np.uint64(lut_shift)
    return TWO_PI * (float(acc) * INV_MODULUS)


@njit(cache=True, nogil=True)
def advance(n, g0, fs,
            # plant front end
            pk_beat, pacc_beat, pk_nco, pacc_nco, pamp, adc_step, adc_lo, adc_hi,
            lut_shift, sos, zi, prev_phase, loss_count,
            # plant propagation
            tap_d, tap_w, remote_delay, noise_delay, a_ring, l_ring, a_phase,
            n_link, n_det, n_act, n_adc,
            # channels
            src_kind, src_idx, setpoint, fe_plant, act_plant, act_gain, act_delay,
            act_alpha, act_y, v_ring, gains, fstate, branch_limit, out_offset,
            out_limit, dither_amp, dither_k, dither_acc, q_mode, q_step, vco_center,
            vco_max, sat_count, stim,
            # recording
            ch_slot, rec_ch, pl_slot, rec_pl):
    n_pl = pk_beat.shape[0]
    n_ch = src_kind.shape[0]
    n_sec = sos.shape[1]
    n_tap = tap_d.shape[1]
    ra = a_ring.shape[1]
    rv = v_ring.shape[1]
    inc_hz = np.zeros(n_pl)
    fe = np.zeros((n_pl, 5))  # adc_in, i, q, phase, increment
    u_now = np.zeros(n_ch)
    to_hz = fs / TWO_PI

    for j in range(n):
        g = g0 + j

        # actuators and plant phase
        for p in range(n_pl):
            dphi = 0.0
            for c in range(n_ch):
                if act_plant[c] != p:
                    continue
                v_del = v_ring[c, (g - act_delay[c]) % rv]
                act_y[c] += act_alpha[c] * (v_del - act_y[c])
                dphi += act_gain[c] * act_y[c]
            a_phase[p] += TWO_PI * dphi / fs
            a_ring[p, g % ra] = a_phase[p] + n_act[p, j]
            l_ring[p, g % ra] = n_link[p, j]

            meas = n_det[p, j] + l_ring[p, (g - noise_delay[p]) % ra]
            for t in range(n_tap):
                w = tap_w[p, t]
                if w != 0.0:
                    meas += w * a_ring[p, (g - tap_d[p, t]) % ra]
            if pl_slot[TP_REMOTE] >= 0:
                rec_pl[p, pl_slot[TP_REMOTE], j] = a_ring[p, (g - remote_delay[p]) % ra] + n_link[p, j]
            if pl_slot[TP_BEAT] >= 0:
                rec_pl[p, pl_slot[TP_BEAT], j] = meas

            # beat tone, ADC
            x = pamp[p] * math.cos(_nco_phase(pacc_beat[p], 0) + meas) + n_adc[p, j]
            pacc_beat[p] = (pacc_beat[p] + pk_beat[p]) & MASK48
            code = _rint(x / adc_step)
            if code > adc_hi:
                code = adc_hi
            elif code < adc_lo:
                code = adc_lo
            x = code * adc_step

            # NCO mix (i = x cos, q = -x sin) and low-pass
            theta = _nco_phase(pacc_nco[p], lut_shift[p])
            pacc_nco[p] = (pacc_nco[p] + pk_nco[p]) & MASK48
            yi = x * math.cos(theta)
            yq = -x * math.sin(theta)
            for s in range(n_sec):
                b0 = sos[p, s, 0]
                b1 = sos[p, s, 1]
                b2 = sos[p, s, 2]
                a1 = sos[p, s, 4]
                a2 = sos[p, s, 5]
                oi = b0 * yi + zi[p, 0, s, 0]
                zi[p, 0, s, 0] = b1 * yi - a1 * oi + zi[p, 0, s, 1]
                zi[p, 0, s, 1] = b2 * yi - a2 * oi
                yi = oi
                oq = b0 * yq + zi[p, 1, s, 0]
                zi[p, 1, s, 0] = b1 * yq - a1 * oq + zi[p, 1, s, 1]
                zi[p, 1, s, 1] = b2 * yq - a2 * oq
                yq = oq

            if yi == 0.0 and yq == 0.0:
                phase = prev_phase[p]
                loss_count[p] += 1
            else:
                phase = math.atan2(yq, yi)
                if phase >= PI:
                    phase = -PI
            d = phase - prev_phase[p]
            if d >= PI:
                d -= TWO_PI
            elif d < -PI:
                d += TWO_PI
            prev_phase[p] = phase
            inc_hz[p] = d * to_hz
            fe[p, 0] = x
            fe[p, 1] = yi
            fe[p, 2] = yq
            fe[p, 3] = phase
            fe[p, 4] = d

        # loop filters, dither, output stage
        for c in range(n_ch):
            if src_kind[c] == 0:
                e = setpoint[c] - inc_hz[src_idx[c]]
            else:
                e = setpoint[c] - u_now[src_idx[c]]
            lim = branch_limit[c]
            acc1 = fstate[c, F_ACC1] + e
            if gains[c, G_KI] != 0.0 and abs(gains[c, G_KI] * acc1) > lim:
                acc1 = fstate[c, F_ACC1]
            acc2 = fstate[c, F_ACC2] + acc1
            if gains[c, G_KII] != 0.0 and abs(gains[c, G_KII] * acc2) > lim:
                acc2 = fstate[c, F_ACC2]
            diff = gains[c, G_KD] * (e - fstate[c, F_PREV])
            dout = fstate[c, F_D] + gains[c, G_DCOEF] * (diff - fstate[c, F_D])
            u = (gains[c, G_KP] * e + _clamp(gains[c, G_KI] * acc1, lim)
                 + _clamp(gains[c, G_KII] * acc2, lim) + dout)
            fstate[c, F_ACC1] = acc1
            fstate[c, F_ACC2] = acc2
            fstate[c, F_PREV] = e
            fstate[c, F_D] = dout
            u = u + out_offset[c]
            sat = abs(u) > out_limit[c]
            u = _clamp(u, out_limit[c])
            u_now[c] = u

            v = u + stim[c, j]
            if dither_amp[c] != 0.0:
                v += dither_amp[c] if dither_acc[c] < HALF48 else -dither_amp[c]
                dither_acc[c] = (dither_acc[c] + dither_k[c]) & MASK48

            if q_mode[c] == 1:
                code = _rint(v / q_step[c])
                hi = 1.0 / q_step[c] - 1.0
                if code > hi:
                    code = hi
                    sat = True
                elif code < -hi - 1.0:
                    code = -hi - 1.0
                    sat = True
                v = code * q_step[c]
            elif q_mode[c] == 2:
                code = _rint(vco_center[c] + v * vco_max[c] / 2.0)
                if code > vco_max[c]:
                    code = vco_max[c]
                    sat = True
                elif code < 0.0:
                    code = 0.0
                    sat = True
                v = (code - vco_center[c]) * 2.0 / vco_max[c]
            elif v > 1.0 or v < -1.0:
                sat = True
            if sat:
                sat_count[c] += 1
            v_ring[c, g % rv] = v

            p = fe_plant[c]
            for k in range(5):
                if ch_slot[k] >= 0:
                    rec_ch[c, ch_slot[k], j] = fe[p, k]
            if ch_slot[TP_FILTER_OUT] >= 0:
                rec_ch[c, ch_slot[TP_FILTER_OUT], j] = u
            if ch_slot[TP_DAC_OUT] >= 0:
                rec_ch[c, ch_slot[TP_DAC_OUT], j] = v
