"""Longitudinal population frame, CSV I/O and the panel sampling design."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import DesignError, FrameLookupError, IntegrityError, ParseError, SchemaError
from .rng import stream

ALL_DOMAINS = "*"

DEFAULT_SCHEMA = {
    "domain": "domain",
    "unit": "unit",
    "period": "period",
    "in_sample": "in_sample",
    "y": "y",
}


@dataclass(frozen=True)
class UnitRecord:
    domain_id: str
    unit_id: str
    period: int
    y: Optional[float]
    x: tuple
    in_sample: bool


@dataclass(frozen=True, eq=False)
class LongFrame:
    """Unit x period rows of a finite population.

    Stored column-wise. ``y`` holds NaN exactly where the response is
    absent; use :attr:`has_y` or :attr:`records` rather than reading NaN as
    a value. Instances are treated as immutable: the arrays are flagged
    read-only on construction.
    """

    domain: np.ndarray
    unit: np.ndarray
    period: np.ndarray
    x: np.ndarray
    y: np.ndarray
    in_sample: np.ndarray
    aux_names: tuple

    def __post_init__(self):
        n = len(self.domain)
        domain = np.asarray([str(d) for d in self.domain], dtype=object)
        unit = np.asarray([str(u) for u in self.unit], dtype=object)
        period = np.asarray(self.period, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, len(self.aux_names)))
        y = np.asarray(self.y, dtype=np.float64)
        in_sample = np.asarray(self.in_sample, dtype=bool)
        aux_names = tuple(str(a) for a in self.aux_names)
        for name, arr in (("unit", unit), ("period", period), ("y", y), ("in_sample", in_sample)):
            if len(arr) != n:
                raise IntegrityError(f"column {name!r} has {len(arr)} entries, expected {n}")
        if x.shape != (n, len(aux_names)):
            raise IntegrityError(f"auxiliary matrix has shape {x.shape}, expected {(n, len(aux_names))}")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise IntegrityError(f"row {bad} has a non-finite auxiliary value")
        if np.any(period < 1):
            bad = int(np.argmax(period < 1))
            raise IntegrityError(f"row {bad} has period {period[bad]} < 1")
        missing = in_sample & ~np.isfinite(y)
        if np.any(missing):
            bad = int(np.argmax(missing))
            raise IntegrityError(
                f"row {bad} ({domain[bad]}, {unit[bad]}, {period[bad]}) is in the sample but has no response"
            )
        seen = {}
        for i, key in enumerate(zip(domain, unit, period.tolist())):
            if key in seen:
                raise IntegrityError(f"duplicate (domain, unit, period) triple {key} at rows {seen[key]} and {i}")
            seen[key] = i
        for arr in (period, x, y, in_sample):
            arr.setflags(write=False)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "unit", unit)
        object.__setattr__(self, "period", period)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "in_sample", in_sample)
        object.__setattr__(self, "aux_names", aux_names)

    @classmethod
    def from_records(cls, records: Iterable[UnitRecord], aux_names: Sequence[str]) -> "LongFrame":
        records = list(records)
        p = len(aux_names)
        return cls(
            domain=[r.domain_id for r in records],
            unit=[r.unit_id for r in records],
            period=[r.period for r in records],
            x=np.array([r.x for r in records], dtype=float).reshape(len(records), p),
            y=[np.nan if r.y is None else r.y for r in records],
            in_sample=[r.in_sample for r in records],
            aux_names=aux_names,
        )

    # -- sizes -------------------------------------------------------------

    @property
    def N_L(self) -> int:
        return len(self.domain)

    @property
    def n_L(self) -> int:
        return int(self.in_sample.sum())

    @property
    def n_periods(self) -> int:
        """M, the largest period index."""
        return int(self.period.max()) if self.N_L else 0

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def has_y(self) -> np.ndarray:
        return np.isfinite(self.y)

    @cached_property
    def domains(self) -> tuple:
        """Domain ids in order of first appearance."""
        return tuple(dict.fromkeys(self.domain.tolist()))

    @cached_property
    def domain_codes(self) -> np.ndarray:
        lookup = {d: i for i, d in enumerate(self.domains)}
        codes = np.fromiter((lookup[d] for d in self.domain), dtype=np.int64, count=self.N_L)
        codes.setflags(write=False)
        return codes

    @cached_property
    def sample_index(self) -> np.ndarray:
        idx = np.flatnonzero(self.in_sample)
        idx.setflags(write=False)
        return idx

    @cached_property
    def nonsample_index(self) -> np.ndarray:
        idx = np.flatnonzero(~self.in_sample)
        idx.setflags(write=False)
        return idx

    @property
    def records(self) -> list:
        return [
            UnitRecord(
                domain_id=self.domain[i],
                unit_id=self.unit[i],
                period=int(self.period[i]),
                y=float(self.y[i]) if np.isfinite(self.y[i]) else None,
                x=tuple(float(v) for v in self.x[i]),
                in_sample=bool(self.in_sample[i]),
            )
            for i in range(self.N_L)
        ]

    def columns(self, names: Optional[Sequence[str]] = None) -> np.ndarray:
        """Auxiliary matrix restricted to ``names`` (all columns if None)."""
        if names is None:
            return self.x
        idx = []
        for name in names:
            try:
                idx.append(self.aux_names.index(name))
            except ValueError:
                raise SchemaError(f"auxiliary column {name!r} not in frame ({', '.join(self.aux_names)})") from None
        return self.x[:, idx]

    def with_response(self, y) -> "LongFrame":
        """Copy of the frame with the response vector replaced."""
        return LongFrame(self.domain, self.unit, self.period, self.x, y, self.in_sample, self.aux_names)

    def with_sample(self, in_sample) -> "LongFrame":
        return LongFrame(self.domain, self.unit, self.period, self.x, self.y, in_sample, self.aux_names)

    def is_balanced(self) -> bool:
        units_by_period = {}
        for d, u, t in zip(self.domain, self.unit, self.period.tolist()):
            units_by_period.setdefault(t, set()).add((d, u))
        sets = list(units_by_period.values())
        return len(units_by_period) == self.n_periods and all(s == sets[0] for s in sets)


# -- CSV ------------------------------------------------------------------


def _resolve_schema(schema: Optional[Mapping], header: Sequence[str]) -> dict:
    resolved = dict(DEFAULT_SCHEMA)
    if schema:
        resolved.update({k: v for k, v in schema.items() if k != "aux"})
    aux = list(schema.get("aux", [])) if schema else []
    if not aux:
        taken = {resolved[k] for k in DEFAULT_SCHEMA}
        aux = [c for c in header if c not in taken]
    resolved["aux"] = aux
    missing = [c for c in [resolved[k] for k in DEFAULT_SCHEMA] + aux if c not in header]
    if missing:
        raise SchemaError(f"missing column(s) {', '.join(repr(c) for c in missing)} in header {list(header)}")
    return resolved


def load_frame(path, schema: Optional[Mapping] = None) -> LongFrame:
    """Read a frame from CSV.

    ``schema`` maps the logical columns ``domain, unit, period, in_sample, y``
    to header names and lists the auxiliaries under ``aux``. Without an
    ``aux`` entry every remaining column is an auxiliary.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        sch = _resolve_schema(schema, header)
        pos = {name: i for i, name in enumerate(header)}
        domain, unit, period, in_sample, y, x = [], [], [], [], [], []
        for row_idx, row in enumerate(reader):
            if not row:
                continue
            get = lambda key: row[pos[sch[key]]].strip()  # noqa: E731
            domain.append(get("domain"))
            unit.append(get("unit"))
            try:
                period.append(int(get("period")))
            except ValueError:
                raise ParseError(f"row {row_idx}: period {get('period')!r} is not an integer", row_idx) from None
            flag = get("in_sample")
            if flag not in ("0", "1"):
                raise ParseError(f"row {row_idx}: in_sample must be 0 or 1, got {flag!r}", row_idx)
            in_sample.append(flag == "1")
            raw_y = get("y")
            if raw_y == "":
                y.append(np.nan)
            else:
                try:
                    y.append(float(raw_y))
                except ValueError:
                    raise ParseError(f"row {row_idx}: response {raw_y!r} is not numeric", row_idx) from None
                if not math.isfinite(y[-1]):
                    raise ParseError(f"row {row_idx}: response {raw_y!r} is not finite", row_idx)
            values = []
            for name in sch["aux"]:
                raw = row[pos[name]].strip()
                try:
                    v = float(raw)
                except ValueError:
                    raise ParseError(f"row {row_idx}: auxiliary {name}={raw!r} is not numeric", row_idx) from None
                if not math.isfinite(v):
                    raise ParseError(f"row {row_idx}: auxiliary {name}={raw!r} is not finite", row_idx)
                values.append(v)
            x.append(values)
    return LongFrame(
        domain=domain,
        unit=unit,
        period=period,
        x=np.array(x, dtype=float).reshape(len(x), len(sch["aux"])),
        y=y,
        in_sample=in_sample,
        aux_names=sch["aux"],
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def frame_to_csv(frame: LongFrame) -> str:
    """Serialise with the fixed header order domain, unit, period, in_sample, y, aux..."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["domain", "unit", "period", "in_sample", "y", *frame.aux_names])
    for i in range(frame.N_L):
        yv = frame.y[i]
        writer.writerow(
            [
                frame.domain[i],
                frame.unit[i],
                int(frame.period[i]),
                int(frame.in_sample[i]),
                _fmt(yv) if np.isfinite(yv) else "",
                *(_fmt(v) for v in frame.x[i]),
            ]
        )
    return buf.getvalue()


def write_frame(frame: LongFrame, path) -> None:
    Path(path).write_text(frame_to_csv(frame), encoding="utf-8")


# -- design ---------------------------------------------------------------


def draw_panel_sample(frame: LongFrame, fraction: float, seed: int) -> LongFrame:
    """Simple random sample of units without replacement in period 1, carried to all periods.

    The sample size is ``floor(fraction * N)`` with N the per-period
    population size. Units are identified by (domain, unit).
    """
    if not 0 < fraction <= 1:
        raise DesignError(f"fraction must lie in (0, 1], got {fraction}")
    if not frame.is_balanced():
        raise DesignError("panel sampling requires a balanced frame (same units in every period)")
    first = np.flatnonzero(frame.period == 1)
    keys = list(zip(frame.domain[first], frame.unit[first]))
    N = len(keys)
    n = math.floor(fraction * N + 1e-9)
    if n < 1:
        raise DesignError(f"fraction {fraction} of N={N} selects no units")
    rng = stream(seed, "panel_sample")
    chosen = {keys[i] for i in rng.choice(N, size=n, replace=False)}
    flags = np.fromiter(((d, u) in chosen for d, u in zip(frame.domain, frame.unit)), dtype=bool, count=frame.N_L)
    if np.any(flags & ~frame.has_y):
        bad = int(np.argmax(flags & ~frame.has_y))
        raise DesignError(f"sampled row {bad} has no response value")
    return frame.with_sample(flags)


def subset_mask(frame: LongFrame, domain, period: int) -> np.ndarray:
    """Row indices (sampled and non-sampled) of one domain x period cell.

    ``domain`` may be :data:`ALL_DOMAINS` to select every domain.
    """
    if period not in set(frame.period.tolist()):
        raise FrameLookupError(f"period {period} not in frame")
    sel = frame.period == period
    if domain != ALL_DOMAINS:
        if str(domain) not in frame.domains:
            raise FrameLookupError(f"domain {domain!r} not in frame")
        sel = sel & (frame.domain == str(domain))
    idx = np.flatnonzero(sel)
    if idx.size == 0:
        raise FrameLookupError(f"no rows for domain {domain!r} in period {period}")
    return idx
