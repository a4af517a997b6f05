"""Star catalog ingestion, admissible-pair database and k-vector range search."""

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .attitude import radec_to_vector
from .errors import CatalogParseError, EmptyCatalogError

CATALOG_COLUMNS = ("id", "ra_deg", "dec_deg", "vmag")
DB_FORMAT_VERSION = 1
BUNDLED_CATALOG = "hip2_bright.csv"


@dataclass(frozen=True)
class Star:
    catalog_id: int
    direction: np.ndarray
    magnitude: float


class StarCatalog:
    """Array-backed list of :class:`Star` with id lookup."""

    def __init__(self, ids, directions, magnitudes):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.directions = np.asarray(directions, dtype=float)
        self.magnitudes = np.asarray(magnitudes, dtype=float)
        if len(np.unique(self.ids)) != len(self.ids):
            raise CatalogParseError("catalog ids are not unique")
        self.index_of = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k):
        return Star(int(self.ids[k]), self.directions[k], float(self.magnitudes[k]))

    def vector(self, catalog_id):
        return self.directions[self.index_of[catalog_id]]

    def vectors(self, catalog_ids):
        return self.directions[[self.index_of[i] for i in catalog_ids]]


def _parse_rows(lines, source_name):
    reader = csv.reader(lines)
    header = None
    for line_number, row in enumerate(reader, start=1):
        if not row or row[0].startswith("#"):
            continue
        if header is None:
            header = [c.strip() for c in row]
            missing = set(CATALOG_COLUMNS) - set(header)
            if missing:
                raise CatalogParseError(f"{source_name}: header lacks {sorted(missing)}", line_number)
            cols = [header.index(c) for c in CATALOG_COLUMNS]
            continue
        try:
            values = [row[c] for c in cols]
            yield int(values[0]), float(values[1]), float(values[2]), float(values[3])
        except (ValueError, IndexError) as exc:
            raise CatalogParseError(f"{source_name}: malformed record {row!r} ({exc})", line_number) from None
    if header is None:
        raise CatalogParseError(f"{source_name}: missing header row")


def load_catalog(source=None, magnitude_threshold=5.0):
    """Read a ``id,ra_deg,dec_deg,vmag`` CSV and keep stars strictly brighter
    than ``magnitude_threshold``.

    ``source`` may be a path, an open text stream or an iterable of lines;
    ``None`` loads the bundled Hipparcos extract.
    """
    if source is None:
        text = resources.files("quatera_rsi.data").joinpath(BUNDLED_CATALOG).read_text()
        lines, name = io.StringIO(text), BUNDLED_CATALOG
    elif isinstance(source, (str, Path)):
        lines, name = open(source, newline=""), str(source)
    else:
        lines, name = source, getattr(source, "name", "<stream>")
    try:
        rows = [r for r in _parse_rows(lines, name) if r[3] < magnitude_threshold]
    finally:
        if isinstance(source, (str, Path)):
            lines.close()
    if not rows:
        raise EmptyCatalogError(f"no stars brighter than magnitude {magnitude_threshold} in {name}")
    ids, ra, dec, mag = map(np.array, zip(*rows))
    return StarCatalog(ids, radec_to_vector(np.radians(ra), np.radians(dec)), mag)


def convert_hip2(hip2_path, out, magnitude_limit=6.0):
    """Write the bright part of an ESA I/311 ``hip2.dat`` file as catalog CSV.

    The Hipparcos magnitude ``Hpmag`` is written into the ``vmag`` column.
    Returns the number of stars written.
    """
    n = 0
    with open(hip2_path) as src:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CATALOG_COLUMNS)
        for line_number, line in enumerate(src, start=1):
            fields = line.split()
            if not fields:
                continue
            try:
                hip, ra, dec, hpmag = int(fields[0]), float(fields[4]), float(fields[5]), float(fields[19])
            except (ValueError, IndexError):
                raise CatalogParseError(f"{hip2_path}: malformed hip2 record", line_number) from None
            if hpmag < magnitude_limit:
                writer.writerow([hip, f"{math.degrees(ra):.9f}", f"{math.degrees(dec):.9f}", f"{hpmag:.4f}"])
                n += 1
    return n


# -- pair database -----------------------------------------------------------------

@dataclass
class PairDatabase:
    """Unordered star pairs sorted ascending by the cosine of their separation."""

    cos_angle: np.ndarray
    id_a: np.ndarray
    id_b: np.ndarray
    max_pair_angle: float
    # python-list mirrors for the per-query hot path
    _cos_list: list = field(init=False, repr=False)
    _a_list: list = field(init=False, repr=False)
    _b_list: list = field(init=False, repr=False)

    def __post_init__(self):
        self._cos_list = self.cos_angle.tolist()
        self._a_list = self.id_a.tolist()
        self._b_list = self.id_b.tolist()

    def __len__(self):
        return len(self.cos_angle)

    def entries(self, start=0, stop=None):
        stop = len(self) if stop is None else stop
        return list(zip(self._cos_list[start:stop], self._a_list[start:stop], self._b_list[start:stop]))

    def linear_scan(self, cos_lo, cos_hi):
        """Reference implementation of a range query (all matching indices)."""
        return np.flatnonzero((self.cos_angle >= cos_lo) & (self.cos_angle <= cos_hi))

    def save(self, path, kvector=None):
        kvector = kvector or build_kvector(self)
        np.savez(path, format_version=DB_FORMAT_VERSION, cos_angle=self.cos_angle, id_a=self.id_a,
                 id_b=self.id_b, max_pair_angle=self.max_pair_angle, k=kvector.k,
                 slope=kvector.slope, intercept=kvector.intercept)

    def to_csv(self, out):
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["cos_angle", "id_a", "id_b"])
        for c, a, b in zip(self._cos_list, self._a_list, self._b_list):
            writer.writerow([repr(c), a, b])

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != DB_FORMAT_VERSION:
                raise ValueError(f"unsupported pair database version {version}")
            db = cls(data["cos_angle"], data["id_a"], data["id_b"], float(data["max_pair_angle"]))
            kv = KVector(data["k"], float(data["slope"]), float(data["intercept"]))
        return db, kv


def build_pair_database(catalog, fov_diagonal, margin=math.radians(0.5)):
    """All unordered pairs of ``catalog`` separated by at most ``fov_diagonal + margin``."""
    max_angle = fov_diagonal + margin
    cos_min = math.cos(max_angle)
    v = catalog.directions
    cos_parts, a_parts, b_parts = [], [], []
    chunk = 512
    for start in range(0, len(v), chunk):
        block = v[start:start + chunk] @ v.T
        rows, cols = np.nonzero(block >= cos_min)
        rows = rows + start
        keep = cols > rows
        rows, cols = rows[keep], cols[keep]
        cos_parts.append(np.clip(block[rows - start, cols], -1.0, 1.0))
        a_parts.append(catalog.ids[rows])
        b_parts.append(catalog.ids[cols])
    cos_angle = np.concatenate(cos_parts) if cos_parts else np.empty(0)
    id_a = np.concatenate(a_parts) if a_parts else np.empty(0, dtype=np.int64)
    id_b = np.concatenate(b_parts) if b_parts else np.empty(0, dtype=np.int64)
    order = np.lexsort((id_b, id_a, cos_angle))
    return PairDatabase(cos_angle[order], id_a[order], id_b[order], max_angle)


# -- k-vector ---------------------------------------------------------------------

@dataclass(frozen=True)
class KVector:
    """Linear index map over sorted values.

    Bin boundaries are ``z(j) = intercept + slope * j`` for ``j = 0..m`` and
    ``k[j]`` counts entries with value ``<= z(j)``.  ``k is None`` marks a
    database too small for the map; queries then scan directly.
    """

    k: np.ndarray
    slope: float
    intercept: float

    @property
    def direct_scan(self):
        return self.k is None


def build_kvector(db, xi=None):
    y = db.cos_angle
    m = len(y)
    if m < 2:
        return KVector(None, 0.0, 0.0)
    span = float(y[-1] - y[0])
    if xi is None:
        xi = max(span, 1.0) * 1e-12 * m
    slope = (span + 2.0 * xi) / m
    intercept = float(y[0]) - xi
    z = intercept + slope * np.arange(m + 1)
    k = np.searchsorted(y, z, side="right")
    k[0], k[m] = 0, m
    return KVector(k, slope, intercept)


def kvector_bounds(kv, db, cos_lo, cos_hi):
    """Index slice ``(start, stop)`` of entries with ``cos_lo <= cos <= cos_hi``."""
    cos_list = db._cos_list
    m = len(cos_list)
    if m == 0 or cos_hi < cos_lo:
        return 0, 0
    if kv.k is None:
        lo, hi = 0, m
    else:
        j_lo = math.floor((cos_lo - kv.intercept) / kv.slope) - 1
        j_hi = math.floor((cos_hi - kv.intercept) / kv.slope) + 2
        j_lo = min(max(j_lo, 0), m)
        j_hi = min(max(j_hi, 0), m)
        lo, hi = int(kv.k[j_lo]), int(kv.k[j_hi])
    start = bisect.bisect_left(cos_list, cos_lo, lo, hi)
    stop = bisect.bisect_right(cos_list, cos_hi, start, hi)
    return start, stop


def kvector_range(kv, db, cos_lo, cos_hi):
    """Entries ``(cos_angle, id_a, id_b)`` whose cosine lies in ``[cos_lo, cos_hi]``."""
    start, stop = kvector_bounds(kv, db, cos_lo, cos_hi)
    return db.entries(start, stop)
