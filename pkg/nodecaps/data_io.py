"""Dataset manifests, loaders, split generation and the sparse text format.

On-disk formats (all plain text, UTF-8):

* edges: one ``u v`` pair per line, 0-indexed, each undirected edge once;
  ``#`` lines and blank lines are ignored.
* labels: one integer class id per line, line ``i`` is node ``i``.
* features: ``dense-csv`` (one comma-separated row per node) or
  ``sparse-triplet`` (``node feature value`` per line).
* sparse matrices: a header ``n_rows n_cols nnz`` followed by one
  ``row col value`` triplet per line, rows ascending.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .config import DATA_DIR, FIXTURE_DIR, MANIFEST_DIR
from .errors import (
    CountMismatchError,
    DanglingEdgeError,
    DatasetError,
    FormatError,
    InfeasibleSplitError,
    LabelRangeError,
    ValidationError,
)
from .graph import SPLIT_NAMES, GraphDataset, SparseMatrix

__all__ = [
    "DatasetManifest",
    "SplitSpec",
    "known_datasets",
    "resolve_manifest",
    "load_manifest",
    "load_dataset",
    "write_dataset",
    "generate_split",
    "export_sparse",
    "import_sparse",
    "row_normalize",
]

log = logging.getLogger(__name__)

FEATURE_KINDS = ("dense-csv", "sparse-triplet")


@dataclass(frozen=True)
class DatasetManifest:
    """Where a dataset's files live and the counts they must match."""

    name: str
    edges: Path
    features: Path
    labels: Path
    n_nodes: int
    n_features: int
    n_classes: int
    feature_kind: str = "dense-csv"
    n_edges: int | None = None

    def __post_init__(self):
        if self.feature_kind not in FEATURE_KINDS:
            raise ValidationError(
                f"feature_kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}"
            )
        for name in ("n_nodes", "n_features", "n_classes"):
            if getattr(self, name) < 1:
                raise ValidationError(f"manifest {self.name!r}: {name} must be positive")

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Path) -> DatasetManifest:
        try:
            return cls(
                name=str(data["name"]),
                edges=base_dir / data["edges"],
                features=base_dir / data["features"],
                labels=base_dir / data["labels"],
                n_nodes=int(data["n_nodes"]),
                n_features=int(data["n_features"]),
                n_classes=int(data["n_classes"]),
                feature_kind=data.get("feature_kind", "dense-csv"),
                n_edges=data.get("n_edges"),
            )
        except KeyError as exc:
            raise DatasetError(f"manifest is missing the {exc.args[0]!r} field") from None

    def to_dict(self, base_dir: Path | None = None) -> dict[str, Any]:
        def rel(path: Path) -> str:
            if base_dir is not None:
                try:
                    return str(path.relative_to(base_dir))
                except ValueError:
                    pass
            return str(path)

        data: dict[str, Any] = {
            "name": self.name,
            "edges": rel(self.edges),
            "features": rel(self.features),
            "labels": rel(self.labels),
            "feature_kind": self.feature_kind,
            "n_nodes": self.n_nodes,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
        }
        if self.n_edges is not None:
            data["n_edges"] = self.n_edges
        return data


@dataclass(frozen=True)
class SplitSpec:
    per_class_train: int = 20
    val_size: int = 500
    split_seed: int = 0

    def __post_init__(self):
        if self.per_class_train < 1 or self.val_size < 0:
            raise ValidationError(
                f"per_class_train must be >= 1 and val_size >= 0, got "
                f"{self.per_class_train}, {self.val_size}"
            )


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def known_datasets() -> list[str]:
    names = sorted(p.stem for p in MANIFEST_DIR.glob("*.json"))
    return ["toy", *names]


def load_manifest(path: str | Path, base_dir: Path | None = None) -> DatasetManifest:
    """Read a manifest JSON; relative file paths resolve against ``base_dir``
    (default: the manifest's own directory)."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}", path=str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})", path=str(path)) from exc
    return DatasetManifest.from_dict(data, base_dir if base_dir is not None else path.parent)


def resolve_manifest(name_or_path: str | Path, data_dir: Path | None = None) -> DatasetManifest:
    """Find a manifest by file path, dataset directory, or known corpus name.

    Known corpora keep their files under ``<data_dir>/<name>/``.
    """
    data_dir = Path(data_dir or DATA_DIR)
    candidate = Path(name_or_path)
    if candidate.is_file():
        return load_manifest(candidate)
    if candidate.is_dir() and (candidate / "manifest.json").is_file():
        return load_manifest(candidate / "manifest.json")

    name = str(name_or_path).lower()
    if name == "toy":
        return load_manifest(FIXTURE_DIR / "toy" / "manifest.json")
    local = data_dir / name / "manifest.json"
    if local.is_file():
        return load_manifest(local)
    shipped = MANIFEST_DIR / f"{name}.json"
    if shipped.is_file():
        return load_manifest(shipped, base_dir=data_dir / name)
    raise DatasetError(
        f"unknown dataset {str(name_or_path)!r}: not a manifest path and not one of "
        f"{', '.join(known_datasets())}",
        path=str(name_or_path),
    )


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _data_lines(path: Path) -> Iterator[tuple[int, list[str]]]:
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}", path=str(path))
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield number, stripped.replace(",", " ").split()


def _parse(path: Path, number: int, token: str, kind: type):
    try:
        return kind(token)
    except ValueError:
        raise FormatError(
            f"{path}:{number}: expected {kind.__name__}, got {token!r}",
            path=str(path),
            line_number=number,
        ) from None


def _read_labels(manifest: DatasetManifest) -> np.ndarray:
    labels = []
    for number, tokens in _data_lines(manifest.labels):
        if len(tokens) != 1:
            raise FormatError(
                f"{manifest.labels}:{number}: expected one label per line",
                path=str(manifest.labels),
                line_number=number,
            )
        label = _parse(manifest.labels, number, tokens[0], int)
        if not 0 <= label < manifest.n_classes:
            raise LabelRangeError(
                f"{manifest.labels}:{number}: label {label} outside [0, {manifest.n_classes})",
                path=str(manifest.labels),
                line_number=number,
            )
        labels.append(label)
    if len(labels) != manifest.n_nodes:
        raise CountMismatchError(
            f"{manifest.name}: manifest declares {manifest.n_nodes} nodes but "
            f"{manifest.labels} has {len(labels)} labels",
            expected=manifest.n_nodes,
            found=len(labels),
        )
    return np.array(labels, dtype=np.int64)


def _read_features(manifest: DatasetManifest) -> np.ndarray:
    n, f = manifest.n_nodes, manifest.n_features
    path = manifest.features
    if manifest.feature_kind == "dense-csv":
        rows = []
        for number, tokens in _data_lines(path):
            if len(tokens) != f:
                raise CountMismatchError(
                    f"{path}:{number}: expected {f} feature columns, found {len(tokens)}",
                    path=str(path),
                    line_number=number,
                )
            rows.append([_parse(path, number, t, float) for t in tokens])
        if len(rows) != n:
            raise CountMismatchError(
                f"{manifest.name}: manifest declares {n} nodes but {path} has {len(rows)} rows",
                expected=n,
                found=len(rows),
            )
        return np.array(rows, dtype=np.float64).reshape(n, f)

    features = np.zeros((n, f))
    for number, tokens in _data_lines(path):
        if len(tokens) != 3:
            raise FormatError(
                f"{path}:{number}: expected 'node feature value'",
                path=str(path),
                line_number=number,
            )
        node = _parse(path, number, tokens[0], int)
        column = _parse(path, number, tokens[1], int)
        if not (0 <= node < n and 0 <= column < f):
            raise CountMismatchError(
                f"{path}:{number}: entry ({node}, {column}) outside the declared {n} x {f}",
                path=str(path),
                line_number=number,
            )
        features[node, column] = _parse(path, number, tokens[2], float)
    return features


def _read_edges(manifest: DatasetManifest) -> SparseMatrix:
    n = manifest.n_nodes
    path = manifest.edges
    pairs: set[tuple[int, int]] = set()
    duplicates = loops = 0
    for number, tokens in _data_lines(path):
        if len(tokens) != 2:
            raise FormatError(
                f"{path}:{number}: expected 'u v'", path=str(path), line_number=number
            )
        u = _parse(path, number, tokens[0], int)
        v = _parse(path, number, tokens[1], int)
        for endpoint in (u, v):
            if not 0 <= endpoint < n:
                raise DanglingEdgeError(
                    f"{path}:{number}: edge endpoint {endpoint} is not a node (n={n})",
                    path=str(path),
                    line_number=number,
                )
        if u == v:
            loops += 1
            continue
        pair = (min(u, v), max(u, v))
        if pair in pairs:
            duplicates += 1
        pairs.add(pair)

    if duplicates:
        log.warning("%s: merged %d duplicate edges", manifest.name, duplicates)
    if loops:
        log.warning("%s: dropped %d self-loops", manifest.name, loops)
    if manifest.n_edges is not None and manifest.n_edges != len(pairs):
        log.info(
            "%s: manifest lists %d edges, %d distinct undirected edges loaded",
            manifest.name,
            manifest.n_edges,
            len(pairs),
        )

    ordered = sorted(pairs)
    rows = [u for u, v in ordered] + [v for u, v in ordered]
    cols = [v for u, v in ordered] + [u for u, v in ordered]
    return SparseMatrix.from_triplets(n, n, rows, cols, np.ones(len(rows)))


def row_normalize(features: np.ndarray) -> np.ndarray:
    """Scale each row to sum 1; all-zero rows stay zero."""
    features = np.asarray(features, dtype=np.float64)
    sums = features.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(sums != 0, features / sums, 0.0)
    return scaled


def load_dataset(manifest: DatasetManifest, *, row_normalize_features: bool = False) -> GraphDataset:
    labels = _read_labels(manifest)
    features = _read_features(manifest)
    if row_normalize_features:
        features = row_normalize(features)
    adjacency = _read_edges(manifest)
    log.info(
        "loaded %s: %d nodes, %d edges, %d features, %d classes",
        manifest.name,
        manifest.n_nodes,
        adjacency.nnz // 2,
        manifest.n_features,
        manifest.n_classes,
    )
    return GraphDataset(adjacency, features, labels, manifest.n_classes, {}, manifest.name)


def write_dataset(
    dataset: GraphDataset, directory: str | Path, feature_kind: str = "dense-csv"
) -> DatasetManifest:
    """Write ``dataset`` in the loader's formats plus a ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    features_name = "features.csv" if feature_kind == "dense-csv" else "features.txt"
    manifest = DatasetManifest(
        name=dataset.name,
        edges=directory / "edges.txt",
        features=directory / features_name,
        labels=directory / "labels.txt",
        n_nodes=dataset.n_nodes,
        n_features=dataset.n_features,
        n_classes=dataset.n_classes,
        feature_kind=feature_kind,
        n_edges=dataset.adjacency.nnz // 2,
    )

    edge_lines = []
    for i in range(dataset.n_nodes):
        cols, _ = dataset.adjacency.row(i)
        edge_lines.extend(f"{i} {j}" for j in cols if j > i)
    manifest.edges.write_text("".join(line + "\n" for line in edge_lines), encoding="utf-8")

    manifest.labels.write_text(
        "".join(f"{int(label)}\n" for label in dataset.labels), encoding="utf-8"
    )

    if feature_kind == "dense-csv":
        text = "".join(",".join(repr(float(x)) for x in row) + "\n" for row in dataset.features)
    else:
        nodes, columns = np.nonzero(dataset.features)
        text = "".join(
            f"{i} {j} {float(dataset.features[i, j])!r}\n" for i, j in zip(nodes, columns)
        )
    manifest.features.write_text(text, encoding="utf-8")

    (directory / "manifest.json").write_text(
        json.dumps(manifest.to_dict(directory), indent=2) + "\n", encoding="utf-8"
    )
    return manifest


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def generate_split(dataset: GraphDataset, spec: SplitSpec) -> dict[str, np.ndarray]:
    """Seeded per-class train sample, a validation sample of the rest, test = remainder."""
    n, per_class = dataset.n_nodes, spec.per_class_train
    needed = per_class * dataset.n_classes + spec.val_size
    if needed > n:
        raise InfeasibleSplitError(
            f"{dataset.name}: split needs {needed} nodes but the graph has {n}",
            needed=needed,
            n_nodes=n,
        )

    rng = np.random.default_rng(spec.split_seed)
    train = np.zeros(n, dtype=bool)
    for label in range(dataset.n_classes):
        members = np.flatnonzero(dataset.labels == label)
        if len(members) < per_class:
            raise InfeasibleSplitError(
                f"{dataset.name}: class {label} has {len(members)} nodes, "
                f"fewer than {per_class} training nodes per class",
                label=label,
            )
        train[rng.choice(members, size=per_class, replace=False)] = True

    val = np.zeros(n, dtype=bool)
    remainder = np.flatnonzero(~train)
    val[rng.choice(remainder, size=spec.val_size, replace=False)] = True
    test = ~(train | val)
    return dict(zip(SPLIT_NAMES, (train, val, test)))


# ---------------------------------------------------------------------------
# Sparse matrix text format
# ---------------------------------------------------------------------------


def export_sparse(m: SparseMatrix, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{m.n_rows} {m.n_cols} {m.nnz}"]
    for i in range(m.n_rows):
        cols, vals = m.row(i)
        lines.extend(f"{i} {int(j)} {float(v)!r}" for j, v in zip(cols, vals))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_sparse(path: str | Path) -> SparseMatrix:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"matrix file not found: {path}", path=str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}:1: missing 'n_rows n_cols nnz' header", path=str(path), line_number=1)

    header = lines[0].split()
    if len(header) != 3:
        raise FormatError(f"{path}:1: header must be 'n_rows n_cols nnz'", path=str(path), line_number=1)
    n_rows, n_cols, nnz = (_parse(path, 1, token, int) for token in header)

    rows, cols, vals = [], [], []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 3:
            raise FormatError(
                f"{path}:{number}: expected 'row col value'", path=str(path), line_number=number
            )
        r, c = _parse(path, number, tokens[0], int), _parse(path, number, tokens[1], int)
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            raise FormatError(
                f"{path}:{number}: entry ({r}, {c}) outside {n_rows} x {n_cols}",
                path=str(path),
                line_number=number,
            )
        if rows and r < rows[-1]:
            raise FormatError(f"{path}:{number}: rows must be ascending", path=str(path), line_number=number)
        rows.append(r)
        cols.append(c)
        vals.append(_parse(path, number, tokens[2], float))

    if len(vals) != nnz:
        raise FormatError(
            f"{path}: header declares {nnz} entries but {len(vals)} were read", path=str(path)
        )
    matrix = SparseMatrix.from_triplets(n_rows, n_cols, rows, cols, vals)
    if matrix.nnz != nnz:
        raise FormatError(f"{path}: duplicate (row, col) entries", path=str(path))
    return matrix
