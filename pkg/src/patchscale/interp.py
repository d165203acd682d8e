"""Align-corners linear interpolation matrices shared by token and pixel resampling."""
from __future__ import annotations

import numpy as np


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """[n_out, n_in] matrix of align-corners linear interpolation weights.

    Output sample ``i`` sits at input coordinate ``i * (n_in - 1) / (n_out - 1)``,
    so the first and last samples coincide with the input end points.  Each
    row holds at most two nonzero weights summing to 1.
    """
    if n_out < 1 or n_in < 1:
        raise ValueError(f"interpolation sizes must be >= 1, got {n_out} from {n_in}")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        # exact rational position avoids drift at the knots
        num, den = i * (n_in - 1), n_out - 1
        lo, rem = divmod(num, den)
        if rem == 0:
            m[i, lo] = 1.0
        else:
            frac = rem / den
            m[i, lo] = 1.0 - frac
            m[i, lo + 1] = frac
    return m


def knot_positions(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Pairs (input index, output index) where an output sample lands exactly on an input knot."""
    if n_in == 1 or n_out == 1:
        return [(0, 0)]
    return [(j, i) for i in range(n_out) for j in range(n_in)
            if i * (n_in - 1) == j * (n_out - 1)]
