"""Delimited-text ingestion and result serialization."""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .glm import DesignError, DesignSpec, SignalMatrix
from .inference import TIE_BREAK_RULE, TIE_RTOL, AdjustedPValueMap
from .permute import RNG_ALGORITHM


class IngestError(ValueError):
    """Malformed input file; the message names the file, row and column."""


RESULT_COLUMNS = ("channel", "time_index", "statistic", "p_adjusted", "significant", "procedure")


def _sniff_delimiter(path: Path, delimiter: Optional[str]) -> str:
    if delimiter:
        return "\t" if delimiter in ("tab", "\\t") else delimiter
    with open(path, newline="") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                return "\t" if "\t" in line else ","
    return ","


def _rows(path, delimiter=None) -> list[tuple[int, list[str]]]:
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: file not found")
    delim = _sniff_delimiter(path, delimiter)
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), start=1):
            if not row or (len(row) == 1 and not row[0].strip()) or row[0].startswith("#"):
                continue
            out.append((lineno, [cell.strip() for cell in row]))
    if not out:
        raise IngestError(f"{path}: no data rows")
    return out


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_matrix(path, delimiter=None) -> tuple[np.ndarray, Optional[list[str]]]:
    """Numeric matrix from delimited text; an all-text first row is a header."""
    rows = _rows(path, delimiter)
    header = None
    if not any(_is_number(c) for c in rows[0][1]):
        header = rows[0][1]
        rows = rows[1:]
    if not rows:
        raise IngestError(f"{path}: header but no data rows")
    width = len(header) if header else len(rows[0][1])
    data = np.empty((len(rows), width))
    for i, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise IngestError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise IngestError(f"{path}: non-numeric value {cell!r} at row {lineno}, "
                                  f"column {j + 1}") from None
            if not np.isfinite(data[i, j]):
                raise IngestError(f"{path}: non-finite value at row {lineno}, column {j + 1}")
    return data, header


def read_manifest(path) -> list[tuple[str, Optional[int]]]:
    """Channel manifest: one ``name`` or ``name,width`` per line."""
    out = []
    for lineno, row in _rows(path, ","):
        name = row[0]
        width = None
        if len(row) > 1 and row[1]:
            try:
                width = int(row[1])
            except ValueError:
                raise IngestError(f"{path}: row {lineno}: width {row[1]!r} is not an integer") from None
        out.append((name, width))
    return out


def read_design(path, contrast: Optional[Sequence[str]] = None, contrast_matrix=None,
                delimiter=None, intercept: bool = True) -> DesignSpec:
    """Design from a delimited file with named columns.

    Text columns are treatment-coded against their first (sorted) level,
    numeric columns enter as they are, and an intercept is prepended.  The
    hypothesis tests every design column generated by the ``contrast``
    names (default: the first file column) unless an explicit contrast
    matrix file over the expanded columns is given.
    """
    rows = _rows(path, delimiter)
    header = rows[0][1]
    body = rows[1:]
    if not body:
        raise IngestError(f"{path}: design file needs a header and at least one row")
    if len(set(header)) != len(header):
        raise IngestError(f"{path}: duplicate column names in header")
    for lineno, row in body:
        if len(row) != len(header):
            raise IngestError(f"{path}: row {lineno} has {len(row)} columns, expected {len(header)}")
    columns, names, owner = [], [], []
    labels_by_column = {}
    if intercept:
        columns.append(np.ones(len(body)))
        names.append("intercept")
        owner.append(None)
    for j, name in enumerate(header):
        cells = [row[j] for _, row in body]
        if all(_is_number(c) for c in cells):
            columns.append(np.array([float(c) for c in cells]))
            names.append(name)
            owner.append(name)
        else:
            values = np.array(cells)
            levels = sorted(set(cells))
            if len(levels) < 2:
                raise IngestError(f"{path}: column {name!r} has a single level")
            labels_by_column[name] = values
            for level in levels[1:]:
                columns.append((values == level).astype(float))
                names.append(f"{name}[{level}]")
                owner.append(name)
    X = np.column_stack(columns)
    if contrast_matrix is not None:
        G, _ = read_matrix(contrast_matrix)
        if G.shape[1] != X.shape[1]:
            raise IngestError(f"{contrast_matrix}: contrast has {G.shape[1]} columns, the design "
                              f"expands to {X.shape[1]} ({', '.join(names)})")
        tested = [h for h in header if h in labels_by_column]
    else:
        tested = list(contrast) if contrast else [header[0]]
        for name in tested:
            if name not in header:
                raise IngestError(f"{path}: contrast column {name!r} not found in header")
        sel = [k for k, o in enumerate(owner) if o in tested]
        G = np.zeros((len(sel), X.shape[1]))
        G[np.arange(len(sel)), sel] = 1.0
    groups = next((labels_by_column[h] for h in tested if h in labels_by_column), None)
    try:
        return DesignSpec(X, G, group_labels=groups, column_names=tuple(names))
    except DesignError as exc:
        raise DesignError(f"{path}: {exc} (columns: {', '.join(names)})") from None


def ingest(data_paths, design_path, contrast=None, contrast_matrix=None, channels=None,
           delimiter=None, sampling_rate=None) -> tuple[SignalMatrix, DesignSpec]:
    """Load signals and design, checking every dimension.

    ``data_paths`` is one path or a list of per-channel paths.  With a
    ``channels`` manifest the single data file is split into equal column
    blocks, one per manifest line.
    """
    if isinstance(data_paths, (str, Path)):
        data_paths = [data_paths]
    mats = [read_matrix(p, delimiter)[0] for p in data_paths]
    names = None
    if channels is not None:
        if len(mats) != 1:
            raise IngestError("a channel manifest needs exactly one wide data file")
        manifest = read_manifest(channels)
        wide = mats[0]
        c = len(manifest)
        if wide.shape[1] % c:
            raise IngestError(f"{data_paths[0]}: {wide.shape[1]} columns do not split into {c} channels")
        m = wide.shape[1] // c
        for name, width in manifest:
            if width is not None and width != m:
                raise IngestError(f"{channels}: channel {name!r} declares {width} columns, "
                                  f"blocks have {m}")
        mats = [wide[:, k * m:(k + 1) * m] for k in range(c)]
        names = [name for name, _ in manifest]
    elif len(mats) > 1:
        names = [Path(p).stem for p in data_paths]
    for p, mat in zip(data_paths[1:], mats[1:]):
        if mat.shape != mats[0].shape:
            raise IngestError(f"{p}: shape {mat.shape} differs from the first channel {mats[0].shape}")
    data = mats[0] if len(mats) == 1 else np.stack(mats, axis=2)
    design = read_design(design_path, contrast, contrast_matrix, delimiter)
    if design.n != data.shape[0]:
        raise IngestError(f"{design_path}: {design.n} design rows but {data.shape[0]} observations")
    return SignalMatrix(data, sampling_rate, names), design


def _fmt(x) -> str:
    return repr(float(x))


def _comment_line(meta: dict) -> str:
    return "# " + json.dumps(meta, sort_keys=True, separators=(",", ":"))


def emit_results(maps, config: dict, out_prefix, channel_names=None, extra: Optional[dict] = None):
    """Write ``<prefix>.csv`` (long table) and ``<prefix>.json`` (metadata).

    ``maps`` is a flat list of :class:`AdjustedPValueMap`.  Time indices and
    depths are 1-based in both files.  Returns the two paths.
    """
    out_prefix = Path(out_prefix)
    csv_path = out_prefix.with_suffix(".csv")
    json_path = out_prefix.with_suffix(".json")
    header_meta = {"config": config, "rng": RNG_ALGORITHM, "version": __version__}
    try:
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            fh.write(_comment_line(header_meta) + "\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RESULT_COLUMNS)
            for res in maps:
                ch = channel_names[res.channel] if channel_names else str(res.channel)
                for s in range(res.p.shape[0]):
                    writer.writerow([ch, s + 1, _fmt(res.statistic[s]), _fmt(res.p[s]),
                                     int(bool(res.significant[s])), res.procedure.value])
        meta = dict(header_meta)
        meta["seed"] = config.get("seed")
        meta["tie_break"] = TIE_BREAK_RULE
        meta["tie_rtol"] = TIE_RTOL
        meta["results"] = [_map_metadata(res, channel_names) for res in maps]
        if extra:
            meta.update(extra)
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {out_prefix}: {exc}") from exc
    return csv_path, json_path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _map_metadata(res: AdjustedPValueMap, channel_names) -> dict:
    return {
        "procedure": res.procedure.value,
        "channel": channel_names[res.channel] if channel_names else str(res.channel),
        "alpha": res.alpha,
        "n_perm": res.n_perm,
        "tau": res.tau,
        "J_D": res.J_D,
        "n_significant": int(np.sum(res.significant)),
        "clusters": [
            {"start": c.start + 1, "end": c.end + 1, "length": c.end - c.start + 1,
             "mass": float(c.mass), "p_head": [float(x) for x in c.p_head],
             "p_tail": [float(x) for x in c.p_tail]}
            for c in res.clusters
        ],
    }


def read_results(path) -> dict:
    """Parse an emitted results table into ``{(procedure, channel): arrays}``."""
    out = {}
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        key = (row["procedure"], row["channel"])
        entry = out.setdefault(key, {"time_index": [], "statistic": [], "p_adjusted": [],
                                     "significant": []})
        entry["time_index"].append(int(row["time_index"]))
        entry["statistic"].append(float(row["statistic"]))
        entry["p_adjusted"].append(float(row["p_adjusted"]))
        entry["significant"].append(row["significant"] == "1")
    return {k: {name: np.array(v) for name, v in entry.items()} for k, entry in out.items()}


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def write_metrics(metrics_rows: list[dict], meta: dict, out_prefix, records: Optional[list] = None):
    """Simulation outputs: metrics table, per-replication decisions and metadata."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    table = out_prefix.with_name(out_prefix.name + "_metrics.csv")
    _write_table(table, metrics_rows, meta)
    paths.append(table)
    if records is not None:
        rec_path = out_prefix.with_name(out_prefix.name + "_replications.csv")
        _write_table(rec_path, records, meta)
        paths.append(rec_path)
    meta_path = out_prefix.with_name(out_prefix.name + "_metadata.json")
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    paths.append(meta_path)
    return paths


def _write_table(path, rows: list[dict], meta: dict):
    with open(path, "w", newline="") as fh:
        fh.write(_comment_line(meta) + "\n")
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
