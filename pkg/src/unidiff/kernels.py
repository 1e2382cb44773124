"""Pixel-level hot loops used by the shapes-world verifier.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin. The
public names bind to the numba versions unless ``UNIDIFF_NO_NUMBA=1`` is set
or numba is not importable. Both variants stay importable so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("UNIDIFF_NO_NUMBA", "0") not in ("1", "true", "yes")

NCC_EPS = 1e-8


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- nearest palette colour ------------------------------------------------------

def nearest_color_numpy(image: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Index of the nearest reference colour (squared RGB distance) per pixel."""
    image = np.asarray(image, dtype=np.float32)
    colors = np.asarray(colors, dtype=np.float32)
    dist = ((image[:, :, None, :] - colors[None, None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=-1).astype(np.int64)


@_njit
def _nearest_color_loop(image, colors):
    height, width, _ = image.shape
    k = colors.shape[0]
    out = np.empty((height, width), dtype=np.int64)
    for y in range(height):
        for x in range(width):
            best = 0
            best_d = np.inf
            for j in range(k):
                d = 0.0
                for ch in range(3):
                    diff = np.float32(image[y, x, ch]) - colors[j, ch]
                    d += diff * diff
                if d < best_d:
                    best_d = d
                    best = j
            out[y, x] = best
    return out


def nearest_color_numba(image: np.ndarray, colors: np.ndarray) -> np.ndarray:
    return _nearest_color_loop(
        np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(colors, dtype=np.float32)
    )


# -- sliding normalized cross-correlation --------------------------------------

def ncc_map_numpy(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Zero-mean normalized cross-correlation of ``template`` at every valid offset.

    Windows or templates with zero variance score 0.
    """
    image = np.asarray(image, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    th, tw = template.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(image, (th, tw), axis=(0, 1))
    # windows: (H-th+1, W-tw+1, C, th, tw)
    windows = np.moveaxis(windows, 2, -1).reshape(windows.shape[0], windows.shape[1], -1)
    t = template.reshape(-1)
    t = t - t.mean()
    t_norm = np.sqrt((t * t).sum())
    w = windows - windows.mean(axis=-1, keepdims=True)
    w_norm = np.sqrt((w * w).sum(axis=-1))
    num = w @ t
    denom = w_norm * t_norm
    return np.where(denom > NCC_EPS, num / np.maximum(denom, NCC_EPS), 0.0)


@_njit
def _ncc_map_loop(image, template):
    height, width, channels = image.shape
    th, tw = template.shape[0], template.shape[1]
    n = th * tw * channels
    t_mean = 0.0
    for i in range(th):
        for j in range(tw):
            for c in range(channels):
                t_mean += template[i, j, c]
    t_mean /= n
    t_norm = 0.0
    for i in range(th):
        for j in range(tw):
            for c in range(channels):
                d = template[i, j, c] - t_mean
                t_norm += d * d
    t_norm = np.sqrt(t_norm)
    out = np.zeros((height - th + 1, width - tw + 1))
    for y in range(height - th + 1):
        for x in range(width - tw + 1):
            w_mean = 0.0
            for i in range(th):
                for j in range(tw):
                    for c in range(channels):
                        w_mean += image[y + i, x + j, c]
            w_mean /= n
            num = 0.0
            w_norm = 0.0
            for i in range(th):
                for j in range(tw):
                    for c in range(channels):
                        wd = image[y + i, x + j, c] - w_mean
                        num += wd * (template[i, j, c] - t_mean)
                        w_norm += wd * wd
            denom = np.sqrt(w_norm) * t_norm
            if denom > 1e-8:
                out[y, x] = num / denom
    return out


def ncc_map_numba(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    return _ncc_map_loop(
        np.ascontiguousarray(image, dtype=np.float64), np.ascontiguousarray(template, dtype=np.float64)
    )


# -- stencil match scores -------------------------------------------------------

def stencil_counts_numpy(labels: np.ndarray, stencils: np.ndarray, cell: int, n_labels: int) -> np.ndarray:
    """Count label occurrences under each stencil in each grid cell.

    ``labels`` is ``(H, W)`` integer, ``stencils`` is ``(S, cell, cell)`` boolean.
    Returns ``(rows, cols, S, n_labels)`` integer counts.
    """
    height, width = labels.shape
    rows, cols = height // cell, width // cell
    cells = labels.reshape(rows, cell, cols, cell).transpose(0, 2, 1, 3).reshape(rows, cols, cell * cell)
    onehot = (cells[..., None] == np.arange(n_labels)).astype(np.int64)
    flat = stencils.reshape(stencils.shape[0], -1).astype(np.int64)
    return np.einsum("rcpk,sp->rcsk", onehot, flat)


@_njit
def _stencil_counts_loop(labels, stencils, cell, n_labels):
    height, width = labels.shape
    rows, cols = height // cell, width // cell
    n_st = stencils.shape[0]
    out = np.zeros((rows, cols, n_st, n_labels), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            for s in range(n_st):
                for i in range(cell):
                    for j in range(cell):
                        if stencils[s, i, j]:
                            out[r, c, s, labels[r * cell + i, c * cell + j]] += 1
    return out


def stencil_counts_numba(labels: np.ndarray, stencils: np.ndarray, cell: int, n_labels: int) -> np.ndarray:
    return _stencil_counts_loop(
        np.ascontiguousarray(labels, dtype=np.int64), np.ascontiguousarray(stencils, dtype=np.bool_), cell, n_labels
    )


if USE_NUMBA:
    nearest_color = nearest_color_numba
    ncc_map = ncc_map_numba
    stencil_counts = stencil_counts_numba
else:
    nearest_color = nearest_color_numpy
    ncc_map = ncc_map_numpy
    stencil_counts = stencil_counts_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
