"""Score and anomaly-week rasters as plain text pixmaps plus CSV grids.

The portable pixmap (P3) text format keeps map output dependency-free and
byte-diffable in tests.
"""
from __future__ import annotations

import numpy as np

# Diverging ramp endpoints for scores: -1 red, 0 white, +1 green.
_SCORE_NEG = (215, 25, 28)
_SCORE_POS = (26, 150, 65)
_WHITE = (255, 255, 255)
_GRAY = (150, 150, 150)    # scored as FN: no timing score
_BLACK = (0, 0, 0)         # pixel missing from the input
# Sequential ramp for first-anomaly weeks: early bright, late dark.
_WEEK_LIGHT = (255, 245, 235)
_WEEK_DARK = (127, 39, 4)


def _lerp(a: tuple, b: tuple, u: float) -> tuple[int, int, int]:
    return tuple(int(round(a[c] + (b[c] - a[c]) * u)) for c in range(3))


def score_color(score: float | None) -> tuple[int, int, int]:
    """Diverging color for a pd_score in [-1, 1]; gray when unscored."""
    if score is None:
        return _GRAY
    s = float(np.clip(score, -1.0, 1.0))
    if s < 0:
        return _lerp(_WHITE, _SCORE_NEG, -s)
    return _lerp(_WHITE, _SCORE_POS, s)


def week_color(week: int | None, week_min: int, week_max: int) -> tuple[int, int, int]:
    """Sequential color for a first-anomaly week; white when never flagged."""
    if week is None:
        return _WHITE
    if week_max <= week_min:
        return _WEEK_DARK
    u = (week - week_min) / (week_max - week_min)
    return _lerp(_WEEK_LIGHT, _WEEK_DARK, float(np.clip(u, 0.0, 1.0)))


def render_score_map(scores: dict[tuple[int, int], float | None], nx: int, ny: int) -> list[list[tuple]]:
    """Grid of RGB triples from per-pixel scores (None = FN gray, absent = black)."""
    grid = []
    for y in range(ny):
        row = []
        for x in range(nx):
            if (x, y) in scores:
                row.append(score_color(scores[(x, y)]))
            else:
                row.append(_BLACK)
        grid.append(row)
    return grid


def render_week_map(weeks: dict[tuple[int, int], int | None], nx: int, ny: int) -> list[list[tuple]]:
    flagged = [w for w in weeks.values() if w is not None]
    week_min = min(flagged) if flagged else 0
    week_max = max(flagged) if flagged else 0
    grid = []
    for y in range(ny):
        row = []
        for x in range(nx):
            if (x, y) in weeks:
                row.append(week_color(weeks[(x, y)], week_min, week_max))
            else:
                row.append(_BLACK)
        grid.append(row)
    return grid


def write_ppm(grid: list[list[tuple]], path) -> None:
    """Plain (P3) pixmap: one raster row per text line."""
    height = len(grid)
    width = len(grid[0]) if height else 0
    lines = ["P3", f"{width} {height}", "255"]
    for row in grid:
        lines.append(" ".join(f"{r} {g} {b}" for r, g, b in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_value_grid(values: dict[tuple[int, int], float | int | None], nx: int, ny: int, path) -> None:
    """CSV grid of the mapped quantity; empty cells for missing/unscored pixels."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for y in range(ny):
            cells = []
            for x in range(nx):
                v = values.get((x, y))
                cells.append("" if v is None else format(v, ".9g"))
            fh.write(",".join(cells) + "\n")
