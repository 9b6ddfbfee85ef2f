"""Minimal self-contained SVG plots (no rendering dependency)."""
from __future__ import annotations

from html import escape

import numpy as np


def _svg(width: int, height: int, body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "\n".join(body) + "\n</svg>\n")


def _blue(v: float) -> str:
    v = float(np.clip(v, 0.0, 1.0))
    r = int(round(247 - v * (247 - 8)))
    g = int(round(251 - v * (251 - 48)))
    b = int(round(255 - v * (255 - 107)))
    return f"rgb({r},{g},{b})"


def confusion_svg(counts: np.ndarray, class_names: list[str], recall: np.ndarray) -> str:
    """Row-normalised heat map, counts in cells, per-class recall on the right."""
    n = len(class_names)
    cell, left, top = 36, 110, 30
    width, height = left + cell * n + 80, top + cell * n + 110
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, np.maximum(rows, 1))
    body = [f'<text x="{left}" y="18">predicted</text>']
    for i in range(n):
        y = top + i * cell
        body.append(f'<text x="{left - 6}" y="{y + cell / 2 + 4}" text-anchor="end">'
                    f'{escape(class_names[i])}</text>')
        for j in range(n):
            x = left + j * cell
            ink = "white" if frac[i, j] > 0.5 else "black"
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="{_blue(frac[i, j])}" stroke="#ccc"/>')
            body.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                        f'fill="{ink}">{int(counts[i, j])}</text>')
        rec = "n/a" if np.isnan(recall[i]) else f"{100 * recall[i]:.1f}%"
        body.append(f'<text x="{left + n * cell + 8}" y="{y + cell / 2 + 4}">{rec}</text>')
    body.append(f'<text x="{left + n * cell + 8}" y="{top - 8}">recall</text>')
    for j in range(n):
        x = left + j * cell + cell / 2
        y = top + n * cell + 8
        body.append(f'<text x="{x}" y="{y}" transform="rotate(60 {x} {y})">'
                    f'{escape(class_names[j])}</text>')
    return _svg(width, height, body)


def line_svg(xs, ys, xlabel: str, ylabel: str, title: str = "") -> str:
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    width, height, pad = 480, 320, 50
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = min(ys.min(), 0.0), max(ys.max(), 1e-9)
    y1 = y1 + 0.05 * (y1 - y0)

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
    body = [
        f'<text x="{width / 2}" y="20" text-anchor="middle">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-width="2"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for x, y in zip(xs, ys):
        body.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="steelblue"/>')
        body.append(f'<text x="{px(x):.1f}" y="{height - pad + 14}" text-anchor="middle">'
                    f'{x:g}</text>')
        body.append(f'<text x="{px(x):.1f}" y="{py(y) - 6:.1f}" text-anchor="middle">{y:.3f}</text>')
    return _svg(width, height, body)


def instances_svg(spectrogram: np.ndarray, instance_scores: np.ndarray,
                  class_names: list[str], stride: int = 8) -> str:
    """Spectrogram (bands x frames) with the per-class instance score rows
    aligned underneath; each instance spans ``stride`` frames."""
    bands, frames = spectrogram.shape
    n_cls, m = instance_scores.shape
    px, left = 3, 90
    spec_h, row_h = bands * 3, 14
    width = left + frames * px + 10
    height = spec_h + n_cls * row_h + 30
    lo, hi = np.percentile(spectrogram, [1, 99])
    norm = np.clip((spectrogram - lo) / max(hi - lo, 1e-12), 0, 1)
    body = []
    for b in range(bands):
        y = (bands - 1 - b) * 3
        for t in range(frames):
            body.append(f'<rect x="{left + t * px}" y="{y}" width="{px}" height="3" '
                        f'fill="{_blue(norm[b, t])}"/>')
    for c in range(n_cls):
        y = spec_h + 10 + c * row_h
        body.append(f'<text x="{left - 4}" y="{y + 11}" text-anchor="end">'
                    f'{escape(class_names[c])}</text>')
        best = int(np.argmax(instance_scores[c]))
        for j in range(m):
            stroke = ' stroke="red" stroke-width="2"' if j == best else ""
            body.append(f'<rect x="{left + j * stride * px}" y="{y}" width="{stride * px}" '
                        f'height="{row_h - 2}" fill="{_blue(instance_scores[c, j])}"{stroke}/>')
    return _svg(width, height, body)
