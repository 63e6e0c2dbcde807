"""Independent reference implementations used as test oracles.

Written against textbook formulas on 2x2 covariance matrices, sharing no code
with the package.
"""
import math

import numpy as np


def _relu_expectations(S):
    """E[relu(u) relu(v)] and E[step(u) step(v)] for (u, v) ~ N(0, S)."""
    saa, sab, sbb = S[0, 0], S[0, 1], S[1, 1]
    norm = math.sqrt(saa * sbb)
    cos = min(1.0, max(-1.0, sab / norm))
    th = math.acos(cos)
    e_phi = norm * (math.sin(th) + (math.pi - th) * cos) / (2 * math.pi)
    e_dphi = (math.pi - th) / (2 * math.pi)
    return e_phi, e_dphi


def _erf_expectations(S):
    """E[erf(u) erf(v)] and E[erf'(u) erf'(v)] for (u, v) ~ N(0, S)."""
    saa, sab, sbb = S[0, 0], S[0, 1], S[1, 1]
    da, db = 1 + 2 * saa, 1 + 2 * sbb
    e_phi = 2 / math.pi * math.asin(2 * sab / math.sqrt(da * db))
    e_dphi = 4 / math.pi / math.sqrt(da * db - 4 * sab * sab)
    return e_phi, e_dphi


def _expectations(act, S):
    if act == "linear":
        return S[0, 1], 1.0
    if act == "relu":
        return _relu_expectations(S)
    if act == "erf":
        return _erf_expectations(S)
    raise ValueError(act)


def _self_expectation(act, s):
    return _expectations(act, np.array([[s, s], [s, s]]))[0]


def standard_ntk(act, L, var, kxx, kxy, kyy):
    """NTK of an L-hidden-layer bias-free MLP with all weights N(0, var) in NTK scaling.

    Theta^0 = K_in; Theta^l = var E[phi'phi'] Theta^{l-1} + E[phi phi], where the
    expectations are over pre-activations with covariance var * Sigma^{l-1} and
    Sigma^0 = K_in.
    """
    sig = np.array([[kxx, kxy], [kxy, kyy]], dtype=float)
    theta = kxy
    for _ in range(L):
        pre = var * sig
        e_ab, ed_ab = _expectations(act, pre)
        theta = var * ed_ab * theta + e_ab
        sig = np.array([[_self_expectation(act, pre[0, 0]), e_ab],
                        [e_ab, _self_expectation(act, pre[1, 1])]])
    return theta


def standard_nngp(act, L, var, kxx, kxy, kyy):
    sig = np.array([[kxx, kxy], [kxy, kyy]], dtype=float)
    for _ in range(L):
        pre = var * sig
        e_ab = _expectations(act, pre)[0]
        sig = np.array([[_self_expectation(act, pre[0, 0]), e_ab],
                        [e_ab, _self_expectation(act, pre[1, 1])]])
    return sig[0, 1]


def random_input_pair(rng, n0=8):
    x, y = rng.standard_normal((2, n0)) * np.exp(rng.uniform(-0.5, 0.5, (2, 1)))
    return x @ x / n0, x @ y / n0, y @ y / n0
