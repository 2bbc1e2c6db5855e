"""Plain-text file formats used by the command line.

* grid CSV: header ``detector_bins,<I>`` then one ``edge`` value per line
  (a second column, when present on the first ``J`` rows, gives mean
  energies)
* response CSV: header ``i,j,M_ij`` then sparse triplets (0-based)
* spectrum CSV: header ``bin_index,count``
* latent-truth CSV: header ``level,bin,value``
* parameter and config files: flat ``key = value`` lines, ``#`` comments
* fit plan: one ``step:<block> aug:<full|reduced|observed> [refresh]`` per line

Every parser raises ``ParseError`` carrying the 1-based line number.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .counts import AugmentedCounts
from .em import AugLevel, CmStep
from .spectral import (Absorption, DeltaLine, EnergyGrid, FreeContinuum, GaussianLine,
                       ObservedSpectrum, PowerLaw, ResponseMatrix, SpectralError,
                       SpectralParams)


class ParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        where = f"{path}:" if path else ""
        super().__init__(f"{where}line {line}: {message}")
        self.path = path
        self.line = line


def _read(source) -> tuple[str, str]:
    """Return ``(text, name)``: multi-line strings are content, anything else a path."""
    if isinstance(source, str) and "\n" in source:
        return source, ""
    return Path(source).read_text(), str(source)


def _rows(text: str):
    """Yield ``(lineno, fields)`` for non-blank, non-comment CSV lines."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, [f.strip() for f in next(csv.reader([line]))]


def _float(tok, name, lineno):
    try:
        return float(tok)
    except ValueError:
        raise ParseError(name, lineno, f"not a number: {tok!r}") from None


def _int(tok, name, lineno):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(name, lineno, f"not an integer: {tok!r}") from None
    if v != int(v):
        raise ParseError(name, lineno, f"not an integer: {tok!r}")
    return int(v)


def _r(x) -> str:
    """Shortest round-tripping text for a float."""
    return repr(float(x))


def _write(text: str, path) -> str:
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


# --------------------------------------------------------------------------
# Grid
# --------------------------------------------------------------------------

def read_grid(source) -> EnergyGrid:
    text, name = _read(source)
    rows = list(_rows(text))
    if not rows or rows[0][1][0] != "detector_bins" or len(rows[0][1]) != 2:
        raise ParseError(name, rows[0][0] if rows else 1, "expected header 'detector_bins,<I>'")
    I = _int(rows[0][1][1], name, rows[0][0])
    edges, means = [], []
    for lineno, f in rows[1:]:
        if len(f) not in (1, 2):
            raise ParseError(name, lineno, "expected 'edge' or 'edge,mean_energy'")
        edges.append(_float(f[0], name, lineno))
        if len(f) == 2:
            means.append(_float(f[1], name, lineno))
    if means and len(means) != len(edges) - 1:
        raise ParseError(name, rows[-1][0], "mean energies must be given for every bin")
    try:
        return EnergyGrid(np.array(edges), I, np.array(means) if means else None)
    except SpectralError as exc:
        raise ParseError(name, rows[-1][0], str(exc)) from None


def write_grid(grid: EnergyGrid, path=None) -> str:
    lines = [f"detector_bins,{grid.detector_bins}"]
    E = grid.mean_energies
    for j, e in enumerate(grid.edges):
        lines.append(f"{_r(e)},{_r(E[j])}" if j < E.size else _r(e))
    return _write("\n".join(lines) + "\n", path)


# --------------------------------------------------------------------------
# Response
# --------------------------------------------------------------------------

def read_response(source, shape=None) -> ResponseMatrix:
    text, name = _read(source)
    rows = list(_rows(text))
    if not rows or rows[0][1] != ["i", "j", "M_ij"]:
        raise ParseError(name, rows[0][0] if rows else 1, "expected header 'i,j,M_ij'")
    ii, jj, vv = [], [], []
    for lineno, f in rows[1:]:
        if len(f) != 3:
            raise ParseError(name, lineno, "expected 'i,j,M_ij'")
        i, j = _int(f[0], name, lineno), _int(f[1], name, lineno)
        if i < 0 or j < 0:
            raise ParseError(name, lineno, "negative index")
        ii.append(i)
        jj.append(j)
        vv.append(_float(f[2], name, lineno))
    if shape is None:
        shape = (max(ii, default=-1) + 1, max(jj, default=-1) + 1)
    dense = np.zeros(shape)
    try:
        np.add.at(dense, (np.array(ii, dtype=int), np.array(jj, dtype=int)), vv)
        return ResponseMatrix(dense)
    except (IndexError, SpectralError) as exc:
        raise ParseError(name, rows[-1][0], str(exc)) from None


def write_response(rsp: ResponseMatrix, path=None) -> str:
    lines = ["i,j,M_ij"]
    dense = rsp.dense
    for i, j in zip(*np.nonzero(dense)):
        lines.append(f"{i},{j},{_r(dense[i, j])}")
    return _write("\n".join(lines) + "\n", path)


# --------------------------------------------------------------------------
# Spectrum and latent counts
# --------------------------------------------------------------------------

def read_spectrum(source) -> ObservedSpectrum:
    text, name = _read(source)
    rows = list(_rows(text))
    if not rows or rows[0][1] != ["bin_index", "count"]:
        raise ParseError(name, rows[0][0] if rows else 1, "expected header 'bin_index,count'")
    counts = {}
    for lineno, f in rows[1:]:
        if len(f) != 2:
            raise ParseError(name, lineno, "expected 'bin_index,count'")
        i, c = _int(f[0], name, lineno), _int(f[1], name, lineno)
        if i < 0 or c < 0:
            raise ParseError(name, lineno, "bin and count must be nonnegative")
        if i in counts:
            raise ParseError(name, lineno, f"bin {i} listed twice")
        counts[i] = c
    n = max(counts, default=-1) + 1
    if sorted(counts) != list(range(n)):
        raise ParseError(name, rows[-1][0], "bins must be 0..I-1 without gaps")
    return ObservedSpectrum(np.array([counts[i] for i in range(n)], dtype=np.int64))


def write_spectrum(spec: ObservedSpectrum, path=None) -> str:
    lines = ["bin_index,count"] + [f"{i},{int(c)}" for i, c in enumerate(spec.counts)]
    return _write("\n".join(lines) + "\n", path)


LATENT_LEVELS = ("y_plus", "ydot_plus", "ydot_c", "ydot_l", "yddot_c", "yddot_l")


def write_latent(latent: AugmentedCounts, path=None) -> str:
    lines = ["level,bin,value"]
    for level in LATENT_LEVELS:
        for j, v in enumerate(getattr(latent, level)):
            lines.append(f"{level},{j},{int(v)}")
    return _write("\n".join(lines) + "\n", path)


def read_latent(source) -> AugmentedCounts:
    text, name = _read(source)
    rows = list(_rows(text))
    if not rows or rows[0][1] != ["level", "bin", "value"]:
        raise ParseError(name, 1, "expected header 'level,bin,value'")
    vals = {k: {} for k in LATENT_LEVELS}
    for lineno, f in rows[1:]:
        if len(f) != 3 or f[0] not in vals:
            raise ParseError(name, lineno, "expected '<level>,bin,value'")
        vals[f[0]][_int(f[1], name, lineno)] = _int(f[2], name, lineno)
    arr = {k: np.array([v[i] for i in sorted(v)], dtype=np.int64) for k, v in vals.items()}
    return AugmentedCounts(*(arr[k] for k in LATENT_LEVELS))


# --------------------------------------------------------------------------
# key = value files
# --------------------------------------------------------------------------

def read_keyvalue(source) -> dict:
    """Parse ``key = value`` lines into ``{key: (value, lineno)}``."""
    text, name = _read(source)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ParseError(name, lineno, "expected 'key = value'")
        if key in out:
            raise ParseError(name, lineno, f"duplicate key {key!r}")
        out[key] = (val, lineno)
    return out


def _vec(entry, name):
    val, lineno = entry
    return np.array([_float(t, name, lineno) for t in val.split(",") if t.strip()])


PARAM_KEYS = {"continuum", "gamma", "beta", "theta", "omega", "line", "nu", "mu", "sigma2",
              "line_bin", "xi", "effective_area", "background"}


def read_params(source) -> SpectralParams:
    """Model parameters from a ``key = value`` file.

    ``continuum`` is ``powerlaw`` (``gamma``, ``beta``) or ``free``
    (``theta`` and optional ``omega``, comma lists); ``line`` is
    ``gaussian`` (``nu``, ``mu``, ``sigma2``), ``delta`` (``nu``,
    ``line_bin``) or ``none``.  ``xi``, ``effective_area`` and
    ``background`` are optional.
    """
    kv = read_keyvalue(source)
    name = _read(source)[1]
    for k, (_, lineno) in kv.items():
        if k not in PARAM_KEYS:
            raise ParseError(name, lineno, f"unknown key {k!r}")

    def need(key, owner_line):
        if key not in kv:
            raise ParseError(name, owner_line, f"missing key {key!r}")
        return kv[key]

    def num(key, owner_line):
        val, lineno = need(key, owner_line)
        return _float(val, name, lineno)

    last = max((ln for _, ln in kv.values()), default=1)
    try:
        kind, kline = kv.get("continuum", ("powerlaw", last))
        if kind == "powerlaw":
            cont = PowerLaw(num("gamma", kline), num("beta", kline))
        elif kind == "free":
            theta = _vec(need("theta", kline), name)
            omega = _vec(kv["omega"], name) if "omega" in kv else np.zeros(theta.size - 1)
            cont = FreeContinuum(theta, omega)
        else:
            raise ParseError(name, kline, f"unknown continuum {kind!r}")
        kind, lline = kv.get("line", ("none", last))
        if kind == "gaussian":
            line = GaussianLine(num("nu", lline), num("mu", lline), num("sigma2", lline))
        elif kind == "delta":
            b, bl = need("line_bin", lline)
            line = DeltaLine(num("nu", lline), _int(b, name, bl))
        elif kind == "none":
            line = None
        else:
            raise ParseError(name, lline, f"unknown line {kind!r}")
        xi = num("xi", last) if "xi" in kv else None
        d = _vec(kv["effective_area"], name) if "effective_area" in kv else None
        bkg = _vec(kv["background"], name) if "background" in kv else None
        return SpectralParams(cont, line, Absorption(d, xi), bkg)
    except SpectralError as exc:
        raise ParseError(name, last, str(exc)) from None


def _fmt_vec(v) -> str:
    return ",".join(_r(x) for x in np.asarray(v))


def write_params(params: SpectralParams, path=None) -> str:
    c = params.continuum
    if isinstance(c, PowerLaw):
        lines = ["continuum = powerlaw", f"gamma = {_r(c.gamma)}", f"beta = {_r(c.beta)}"]
    else:
        lines = ["continuum = free", f"theta = {_fmt_vec(c.theta)}",
                 f"omega = {_fmt_vec(c.omega)}"]
    line = params.line
    if isinstance(line, GaussianLine):
        lines += ["line = gaussian", f"nu = {_r(line.nu)}", f"mu = {_r(line.mu)}",
                  f"sigma2 = {_r(line.sigma2)}"]
    elif isinstance(line, DeltaLine):
        lines += ["line = delta", f"nu = {_r(line.nu)}", f"line_bin = {line.bin}"]
    else:
        lines.append("line = none")
    a = params.absorption
    if a.xi is not None:
        lines.append(f"xi = {_r(a.xi)}")
    if a.effective_area is not None:
        lines.append(f"effective_area = {_fmt_vec(a.effective_area)}")
    if params.background is not None:
        lines.append(f"background = {_fmt_vec(params.background)}")
    return _write("\n".join(lines) + "\n", path)


# --------------------------------------------------------------------------
# Fit plans
# --------------------------------------------------------------------------

def parse_fit_plan(source) -> list:
    """Parse ``step:<block> aug:<level> [refresh]`` lines into ``CmStep``s."""
    text, name = _read(source)
    steps = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        block, level, refresh = None, AugLevel.FULL, False
        for tok in line.split():
            if tok == "refresh":
                refresh = True
                continue
            key, sep, val = tok.partition(":")
            if key == "step" and sep and val:
                block = val
            elif key == "aug" and sep:
                try:
                    level = AugLevel.parse(val)
                except ValueError as exc:
                    raise ParseError(name, lineno, str(exc)) from None
            else:
                raise ParseError(name, lineno, f"unrecognised token {tok!r}")
        if block is None:
            raise ParseError(name, lineno, "step has no step: field")
        steps.append(CmStep(block, level, refresh))
    if not steps:
        raise ParseError(name, 1, "empty plan")
    return steps


def format_fit_plan(steps) -> str:
    out = io.StringIO()
    for s in steps:
        out.write(f"step:{s.block} aug:{s.aug.name.lower()}{' refresh' if s.refresh else ''}\n")
    return out.getvalue()
