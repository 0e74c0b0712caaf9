"""Mixed continuous/categorical datasets with detection-limit censoring."""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataValidationError(ValueError):
    pass


class DataParseError(ValueError):
    pass


class Censor(enum.IntEnum):
    OBSERVED = 0
    LEFT = 1   # true value below the bound ("<b")
    RIGHT = 2  # true value above the bound (">b")


@dataclass(frozen=True)
class CensorMark:
    kind: Censor
    bound: float = math.nan


@dataclass(frozen=True)
class Transform:
    """Per-column standardization record: z = (f(x) - mean) / sd."""

    mean: float
    sd: float
    log: bool = False

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if self.log:
            x = np.log(x)
        return (x - self.mean) / self.sd

    def inverse(self, z):
        x = np.asarray(z, dtype=float) * self.sd + self.mean
        return np.exp(x) if self.log else x


@dataclass(frozen=True, eq=False)
class MixedDataset:
    """Standardized continuous block plus integer-coded categorical block.

    ``continuous`` holds observed values and, for censored cells, the
    detection bound.  ``censor`` holds :class:`Censor` codes and ``bounds``
    the bound (NaN for observed cells).  Categorical codes run 1..L_m.
    """

    continuous: np.ndarray
    censor: np.ndarray
    bounds: np.ndarray
    categorical: np.ndarray
    levels: tuple[int, ...]
    column_names: tuple[str, ...]
    transforms: tuple[Transform, ...]
    level_labels: tuple[tuple[str, ...], ...] = ()
    # raw values as read, so emission reproduces them exactly
    original: np.ndarray | None = None

    def __post_init__(self):
        n, q = self.continuous.shape
        if n == 0:
            raise DataValidationError("dataset is empty")
        if q == 0:
            raise DataValidationError("at least one continuous variable is required")
        if self.censor.shape != (n, q) or self.bounds.shape != (n, q):
            raise DataValidationError("censor/bounds shape must match the continuous block")
        if self.categorical.shape != (n, len(self.levels)):
            raise DataValidationError("categorical block shape does not match levels")
        for j, lm in enumerate(self.levels):
            if lm < 2:
                raise DataValidationError(f"categorical variable {self.column_names[q + j]!r} has a single level")
            col = self.categorical[:, j]
            if col.min() < 1 or col.max() > lm:
                raise DataValidationError(f"categorical variable {self.column_names[q + j]!r} has codes outside 1..{lm}")
        if len(self.column_names) != q + len(self.levels):
            raise DataValidationError("column_names must cover every variable")
        if not self.level_labels:
            object.__setattr__(
                self, "level_labels", tuple(tuple(str(v) for v in range(1, lm + 1)) for lm in self.levels)
            )
        if self.original is not None and self.original.shape != (n, q):
            raise DataValidationError("original values must match the continuous block")
        for arr in (self.continuous, self.censor, self.bounds, self.categorical, self.original):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.continuous.shape[0]

    @property
    def q(self) -> int:
        return self.continuous.shape[1]

    @property
    def M(self) -> int:
        return self.q + len(self.levels)

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(self.censor))

    @property
    def column_means(self) -> np.ndarray:
        """Marginal means of the continuous block (censored cells at their bound)."""
        return self.continuous.mean(axis=0)

    def mark(self, i: int, m: int) -> CensorMark:
        kind = Censor(int(self.censor[i, m]))
        return CensorMark(kind, float(self.bounds[i, m]) if kind else math.nan)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.continuous, self.censor, self.categorical):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def standardize(values, log: bool = False) -> tuple[np.ndarray, Transform]:
    """Center and scale one continuous column.

    ``values`` holds observations with censored cells already replaced by
    their bound; those enter the mean and (n-1) sd like any other value.
    """
    x = np.asarray(values, dtype=float)
    if log:
        if np.any(x <= 0):
            raise DataValidationError("log transform requires strictly positive values")
        x = np.log(x)
    if np.unique(x).size < 2:
        raise DataValidationError("column has zero variance")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    z = (x - mean) / sd
    # drop residual round-off in the column mean
    z = z - z.mean()
    return z, Transform(mean, sd, log)


def from_raw(
    continuous,
    categorical,
    names: Sequence[str],
    censor=None,
    level_labels: Sequence[Sequence[str]] | None = None,
    log_columns: Sequence[str] = (),
) -> MixedDataset:
    """Build a standardized dataset from raw arrays.

    ``continuous`` holds raw values with censored cells set to their bound;
    ``categorical`` holds codes 1..L_m.
    """
    raw = np.array(continuous, dtype=float)
    if raw.ndim != 2:
        raise DataValidationError("continuous block must be 2-D")
    n, q = raw.shape
    cat = np.array(categorical, dtype=np.int64).reshape(n, -1)
    cens = np.zeros((n, q), dtype=np.int8) if censor is None else np.array(censor, dtype=np.int8)
    if not np.all(np.isfinite(raw)):
        raise DataValidationError("continuous block has missing or non-finite values")
    cont = np.empty_like(raw)
    transforms = []
    for m in range(q):
        z, tr = standardize(raw[:, m], log=names[m] in log_columns)
        cont[:, m] = z
        transforms.append(tr)
    bounds = np.where(cens > 0, cont, np.nan)
    if level_labels is None:
        level_labels = [[str(v) for v in range(1, int(cat[:, j].max()) + 1)] for j in range(cat.shape[1])]
    labels = []
    for j, lab in enumerate(level_labels):
        # levels never observed are dropped and the codes compacted
        used = np.unique(cat[:, j])
        if used[0] < 1 or used[-1] > len(lab):
            raise DataValidationError(f"categorical variable {names[q + j]!r} has codes outside 1..{len(lab)}")
        if used.size != len(lab):
            remap = np.zeros(len(lab) + 1, dtype=np.int64)
            remap[used] = np.arange(1, used.size + 1)
            cat[:, j] = remap[cat[:, j]]
            lab = [lab[u - 1] for u in used]
        labels.append(tuple(str(v) for v in lab))
    labels = tuple(labels)
    levels = tuple(len(lab) for lab in labels)
    return MixedDataset(
        continuous=cont,
        censor=cens,
        bounds=bounds,
        categorical=cat,
        levels=levels,
        column_names=tuple(names),
        transforms=tuple(transforms),
        level_labels=labels,
        original=raw,
    )


def raw_continuous(ds: MixedDataset) -> np.ndarray:
    """Continuous block in original units."""
    if ds.original is not None:
        return ds.original
    return np.column_stack([tr.inverse(ds.continuous[:, m]) for m, tr in enumerate(ds.transforms)])


# ---------------------------------------------------------------------------
# ingest / emit


@dataclass
class IngestSpec:
    path: Path
    continuous: list[str]
    categorical: list[str] = field(default_factory=list)
    ignore: list[str] = field(default_factory=list)
    log_transform: list[str] = field(default_factory=list)
    delimiter: str = ","

    def __post_init__(self):
        self.path = Path(self.path)
        if not self.continuous:
            raise DataValidationError("at least one continuous column must be declared")
        overlap = set(self.continuous) & set(self.categorical)
        if overlap:
            raise DataValidationError(f"columns declared both continuous and categorical: {sorted(overlap)}")
        extra = set(self.log_transform) - set(self.continuous)
        if extra:
            raise DataValidationError(f"log_transform lists non-continuous columns: {sorted(extra)}")

    @classmethod
    def from_file(cls, path) -> IngestSpec:
        """Read a flat ``key = value`` dataset spec.

        Keys: path, continuous, categorical, ignore, log_transform (comma
        lists), delimiter.  Relative data paths resolve against the spec.
        """
        path = Path(path)
        conf = read_keyvalue(path)
        if "path" not in conf:
            raise DataValidationError(f"{path}: missing 'path'")
        data_path = Path(conf["path"])
        if not data_path.is_absolute():
            data_path = path.parent / data_path
        delim = conf.get("delimiter", ",")
        if delim in ("tab", "\\t"):
            delim = "\t"
        return cls(
            path=data_path,
            continuous=split_list(conf.get("continuous", "")),
            categorical=split_list(conf.get("categorical", "")),
            ignore=split_list(conf.get("ignore", "")),
            log_transform=split_list(conf.get("log_transform", "")),
            delimiter=delim,
        )


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataParseError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_cell(token: str) -> tuple[float, Censor]:
    tok = token.strip()
    if not tok:
        raise DataParseError("missing value")
    kind = Censor.OBSERVED
    if tok[0] == "<":
        kind, tok = Censor.LEFT, tok[1:]
    elif tok[0] == ">":
        kind, tok = Censor.RIGHT, tok[1:]
    try:
        value = float(tok)
    except ValueError:
        raise DataParseError(f"unrecognized token {token!r}") from None
    if not math.isfinite(value):
        raise DataParseError(f"non-finite value {token!r}")
    return value, kind


def ingest(spec: IngestSpec) -> MixedDataset:
    """Read a CSV with header into a standardized :class:`MixedDataset`."""
    with open(spec.path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter=spec.delimiter))
    if not rows:
        raise DataValidationError(f"{spec.path}: no header row")
    header, body = rows[0], rows[1:]
    body = [r for r in body if any(c.strip() for c in r)]
    if not body:
        raise DataValidationError(f"{spec.path}: dataset is empty")
    index = {name: j for j, name in enumerate(header)}
    for name in spec.continuous + spec.categorical:
        if name not in index:
            raise DataValidationError(f"{spec.path}: column {name!r} not found")
    n, q = len(body), len(spec.continuous)
    raw = np.empty((n, q))
    cens = np.zeros((n, q), dtype=np.int8)
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataParseError(f"{spec.path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        for m, name in enumerate(spec.continuous):
            try:
                raw[i, m], cens[i, m] = parse_cell(row[index[name]])
            except DataParseError as exc:
                raise DataParseError(f"{spec.path}: row {i + 2}, column {name!r}: {exc}") from None
    cat = np.empty((n, len(spec.categorical)), dtype=np.int64)
    labels = []
    for j, name in enumerate(spec.categorical):
        mapping: dict[str, int] = {}
        for i, row in enumerate(body):
            tok = row[index[name]].strip()
            if not tok:
                raise DataParseError(f"{spec.path}: row {i + 2}, column {name!r}: missing value")
            cat[i, j] = mapping.setdefault(tok, len(mapping) + 1)
        if len(mapping) < 2:
            raise DataValidationError(f"categorical column {name!r} has a single distinct level")
        labels.append(tuple(mapping))
    return from_raw(
        raw,
        cat,
        spec.continuous + spec.categorical,
        censor=cens,
        level_labels=labels,
        log_columns=spec.log_transform,
    )


def format_value(x: float) -> str:
    return repr(float(x))


def emit(ds: MixedDataset, path, delimiter: str = ",") -> None:
    """Write ``ds`` in original units with ``<b`` / ``>b`` censor tokens."""
    raw = raw_continuous(ds)
    prefix = {Censor.OBSERVED: "", Censor.LEFT: "<", Censor.RIGHT: ">"}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(ds.column_names)
        for i in range(ds.n):
            row = [prefix[Censor(int(ds.censor[i, m]))] + format_value(raw[i, m]) for m in range(ds.q)]
            row += [ds.level_labels[j][ds.categorical[i, j] - 1] for j in range(len(ds.levels))]
            w.writerow(row)


def spec_for(ds: MixedDataset, path) -> IngestSpec:
    """Ingest spec matching a file produced by :func:`emit`."""
    return IngestSpec(
        path=path,
        continuous=list(ds.column_names[: ds.q]),
        categorical=list(ds.column_names[ds.q :]),
        log_transform=[ds.column_names[m] for m, tr in enumerate(ds.transforms) if tr.log],
    )
