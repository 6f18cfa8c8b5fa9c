"""Slow reference computations kept independent of the package internals."""

import math

import numpy as np


def mfcc_bruteforce(samples, n_mfcc=40, n_fft=2048, hop=512, n_mels=128, sr=16000,
                    fmin=0.0, fmax=8000.0, floor=1e-10):
    """MFCC from explicit loops: reflect-pad framing, periodic Hann, direct DFT
    sums, per-bin triangular weights, and an explicit DCT-II matrix."""
    x = [float(v) for v in samples]
    pad = n_fft // 2
    n = len(x)
    # reflection without repeating the edge sample
    padded = [x[pad - i] for i in range(pad)] + x + [x[n - 2 - i] for i in range(pad)]
    n_frames = 1 + (len(padded) - n_fft) // hop

    hann = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n_fft) for i in range(n_fft)])
    k = np.arange(n_fft // 2 + 1)[:, None]
    t = np.arange(n_fft)[None, :]
    cos_t = np.cos(2 * np.pi * k * t / n_fft)
    sin_t = np.sin(2 * np.pi * k * t / n_fft)

    def mel(h):
        return 2595.0 * math.log10(1.0 + h / 700.0)

    def inv_mel(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    m_lo, m_hi = mel(fmin), mel(fmax)
    edges = [inv_mel(m_lo + (m_hi - m_lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        for b in range(n_fft // 2 + 1):
            f = b * sr / n_fft
            if lo < f <= c:
                fb[m, b] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[m, b] = (hi - f) / (hi - c)

    dct = np.zeros((n_mels, n_mels))
    for q in range(n_mels):
        scale = math.sqrt(1.0 / n_mels) if q == 0 else math.sqrt(2.0 / n_mels)
        for j in range(n_mels):
            dct[q, j] = scale * math.cos(math.pi * q * (2 * j + 1) / (2 * n_mels))

    out = np.zeros((n_mfcc, n_frames))
    for fr in range(n_frames):
        seg = np.array(padded[fr * hop:fr * hop + n_fft]) * hann
        re = cos_t @ seg
        im = sin_t @ seg
        power = re * re + im * im
        energies = fb @ power
        logmel = np.array([math.log(max(e, floor)) for e in energies])
        out[:, fr] = (dct @ logmel)[:n_mfcc]
    return out


def numeric_partial(loss, params, name, flat_index, eps=1e-4):
    """Central difference of ``loss(params)`` w.r.t. one scalar entry."""
    def shifted(delta):
        p = dict(params)
        arr = params[name].copy()
        arr.flat[flat_index] += delta
        p[name] = arr
        return loss(p)
    return (shifted(eps) - shifted(-eps)) / (2 * eps)


def grad_agrees(analytic, numeric, rel=1e-3, abs_=1e-6):
    err = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    return err <= abs_ or (scale > 0 and err / scale <= rel)


def binomial_tail_abs_score(eta, threshold):
    """P(|score| > threshold) when each of eta rewards is +-1 with probability 1/2."""
    total = 0.0
    for k in range(eta + 1):
        score = 2 * k - eta
        if abs(score) > threshold:
            total += math.comb(eta, k) / 2 ** eta
    return total


def switch_pattern(net, trace):
    """Which ReLUs are active and which max-pool inputs win, for every unit in a forward pass.

    Central differences are only a valid oracle when this pattern is the same
    at both ends of the perturbation interval.
    """
    from speechrl.neuralnet import TimeMaxPool
    pattern = []
    for layer, cache in zip(net.layers, trace.caches):
        if isinstance(layer, TimeMaxPool):
            pattern.append(cache[0])
        elif getattr(layer, "relu", False):
            pattern.append(cache[1] > 0)
    return pattern
