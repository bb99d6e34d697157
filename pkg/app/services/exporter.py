"""Reading inputs and writing run artifacts (CSV matrices, partitions, chain files, reports)."""
import csv
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from app.core.exceptions import DataError, DimensionError
from app.models.schemas import ChainHeader, ChainRecord
from app.services.diagnostics import ConvergenceRow, PPCReport
from app.services.sampler import ChainOutput, Draw
from app.services.state import compact_labels

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ============================================================================
# Low-level helpers
# ============================================================================

def atomic_write(path: PathLike, text: str) -> Path:
    """Write to a sibling temporary file, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp_path, path)
    return path


def _read_lines(path: PathLike) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\r\n") for line in f]


def read_binary_csv(path: PathLike, name: str = "data") -> np.ndarray:
    """Headerless CSV of 0/1 cells, one row per line."""
    rows = [row for row in csv.reader(_read_lines(path)) if row and any(c.strip() for c in row)]
    if not rows:
        raise DataError(f"{name} file {path} is empty")
    width = len(rows[0])
    matrix = np.zeros((len(rows), width), dtype=np.uint8)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DimensionError(f"{name} row {i + 1} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise DataError(f"{name} cell ({i + 1}, {j + 1}) is not binary: {cell!r}")
            matrix[i, j] = cell == "1"
    logger.info("Read %s %s: %d x %d", name, path, *matrix.shape)
    return matrix


def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_matrix_csv(path: PathLike, matrix: np.ndarray, header: Optional[Sequence[str]] = None) -> Path:
    matrix = np.atleast_2d(np.asarray(matrix))
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in matrix:
        writer.writerow([_format_cell(v) for v in row])
    return atomic_write(path, buffer.getvalue())


def read_labels(path: PathLike) -> np.ndarray:
    """One integer label per line."""
    values = [line.strip() for line in _read_lines(path) if line.strip()]
    if not values:
        raise DataError(f"label file {path} is empty")
    try:
        return np.array([int(v) for v in values], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"label file {path} has a non-integer line: {exc}") from exc


def write_labels(path: PathLike, Z: np.ndarray) -> Path:
    return atomic_write(path, "".join(f"{int(z)}\n" for z in np.asarray(Z).ravel()))


def write_partition(path: PathLike, Z: np.ndarray) -> Path:
    """One block per line as space-separated 0-based subject ids, blocks ordered by first member."""
    Z = compact_labels(Z)
    lines = [" ".join(str(i) for i in np.flatnonzero(Z == k)) for k in range(int(Z.max()) + 1)]
    return atomic_write(path, "\n".join(lines) + "\n")


def read_partition(path: PathLike) -> np.ndarray:
    """Labels from a block-per-line partition file; every subject must appear exactly once."""
    blocks = [line.split() for line in _read_lines(path) if line.strip()]
    if not blocks:
        raise DataError(f"partition file {path} is empty")
    members = [int(i) for block in blocks for i in block]
    N = len(members)
    if sorted(members) != list(range(N)):
        raise DataError(f"partition file {path} does not cover subjects 0..{N - 1} exactly once")
    Z = np.empty(N, dtype=np.int64)
    for k, block in enumerate(blocks):
        Z[[int(i) for i in block]] = k
    return Z


def read_partial_clusters(path: PathLike, N: int) -> np.ndarray:
    """Must-link labels: one label per line, or one block per line."""
    lines = [line for line in _read_lines(path) if line.strip()]
    if len(lines) == N and all(len(line.split()) == 1 for line in lines):
        Z = read_labels(path)
    else:
        Z = read_partition(path)
    if Z.size != N:
        raise DimensionError(f"partial clusters cover {Z.size} subjects, data has {N}")
    return compact_labels(Z)


def records_to_csv(rows: Iterable[Union[BaseModel, Dict[str, Any]]]) -> str:
    dicts = [r.model_dump(mode="json") if isinstance(r, BaseModel) else dict(r) for r in rows]
    buffer = io.StringIO()
    if dicts:
        writer = csv.DictWriter(buffer, fieldnames=list(dicts[0]), lineterminator="\n")
        writer.writeheader()
        for d in dicts:
            writer.writerow({k: "" if v is None else _format_cell(v) for k, v in d.items()})
    return buffer.getvalue()


# ============================================================================
# Chain files
# ============================================================================

def chain_to_jsonl(output: ChainOutput, config: Optional[Dict[str, Any]] = None) -> str:
    header = ChainHeader(
        chain=output.chain,
        seed=output.seed,
        config_hash=output.config_hash,
        n_subjects=output.n_subjects,
        n_features=output.n_features,
        mode=output.mode,
        rule=output.rule,
        retained=len(output),
        config=config or {},
    )
    lines = [header.model_dump_json()]
    lines.extend(draw.to_record().model_dump_json() for draw in output.draws)
    return "\n".join(lines) + "\n"


def read_chain(path: PathLike) -> ChainOutput:
    """Chain file written by ``ResultExporter.write_chain``; a file without draws is an error."""
    lines = [line for line in _read_lines(path) if line.strip()]
    if not lines:
        raise DataError(f"chain file {path} is empty")
    try:
        header = ChainHeader.model_validate_json(lines[0])
        records = [ChainRecord.model_validate_json(line) for line in lines[1:]]
    except (ValidationError, json.JSONDecodeError) as exc:
        raise DataError(f"chain file {path} is malformed: {exc}") from exc
    if not records:
        raise DataError(f"chain file {path} holds no retained draws")
    if len(records) != header.retained:
        logger.warning("Chain file %s declares %d draws but holds %d", path, header.retained, len(records))
    output = ChainOutput(
        chain=header.chain,
        seed=header.seed,
        config_hash=header.config_hash,
        mode=header.mode,
        rule=header.rule,
        n_subjects=header.n_subjects,
        n_features=header.n_features,
    )
    output.draws = [Draw.from_record(r, header.n_features) for r in records]
    return output


def read_chains(paths: Sequence[PathLike]) -> List[ChainOutput]:
    outputs = [read_chain(p) for p in paths]
    shapes = {(o.n_subjects, o.n_features) for o in outputs}
    if len(shapes) > 1:
        raise DimensionError(f"chain files disagree on data dimensions: {sorted(shapes)}")
    hashes = {o.config_hash for o in outputs}
    if len(hashes) > 1:
        logger.warning("Chain files come from %d different configurations", len(hashes))
    return outputs


# ============================================================================
# Run directory
# ============================================================================

class ResultExporter:
    """Writes the artifacts of each command into one output directory."""

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_simulation(self, Y: np.ndarray, Z: np.ndarray, Q: np.ndarray) -> List[Path]:
        return [
            write_matrix_csv(self.path("data.csv"), Y),
            write_labels(self.path("truth_Z.txt"), Z),
            write_matrix_csv(self.path("truth_Q.csv"), Q),
        ]

    def write_chain(self, output: ChainOutput, config: Optional[Dict[str, Any]] = None) -> Path:
        return atomic_write(self.path(f"chain_{output.chain}.jsonl"), chain_to_jsonl(output, config))

    def write_summary(
        self,
        coclustering: np.ndarray,
        ls_Z: np.ndarray,
        selected_Q: np.ndarray,
        marginals: np.ndarray,
        t_tilde_pmf: Dict[int, float],
    ) -> List[Path]:
        M = marginals.shape[1]
        return [
            write_matrix_csv(self.path("coclustering.csv"), coclustering),
            write_partition(self.path("ls_partition.txt"), ls_Z),
            write_matrix_csv(self.path("selected_Q.csv"), selected_Q),
            write_matrix_csv(
                self.path("state_marginals.csv"), marginals, header=[f"state_{m}" for m in range(M)]
            ),
            atomic_write(
                self.path("T_tilde.csv"),
                records_to_csv({"t_tilde": k, "probability": v} for k, v in sorted(t_tilde_pmf.items())),
            ),
        ]

    def write_convergence(self, rows: Sequence[ConvergenceRow]) -> Path:
        table = (
            {
                "parameter": r.parameter,
                "rhat": r.rhat,
                "rhat_flag": r.rhat_flag,
                "geweke_z": ";".join(_format_cell(z) for z in r.geweke_z),
                "geweke_flag": r.geweke_flag,
            }
            for r in rows
        )
        return atomic_write(self.path("convergence.csv"), records_to_csv(table))

    def write_ppc(self, report: PPCReport) -> List[Path]:
        means = (
            {
                "feature": l,
                "observed": report.observed_means[l],
                "lower": report.mean_interval[0, l],
                "upper": report.mean_interval[1, l],
                "covered": bool(report.mean_covered[l]),
                "ppp": report.mean_ppp[l],
            }
            for l in range(report.observed_means.size)
        )
        iu = zip(*np.triu_indices(report.observed_lor.shape[0], k=1))
        pairs = (
            {
                "feature_a": a,
                "feature_b": b,
                "observed_lor": report.observed_lor[a, b],
                "lower": report.lor_interval[0, a, b],
                "upper": report.lor_interval[1, a, b],
                "covered": bool(report.lor_covered[a, b]),
                "ppp": report.lor_ppp[a, b],
                "slord": report.slord[a, b],
                "flag": bool(report.slord_flag[a, b]),
            }
            for a, b in iu
        )
        return [
            atomic_write(self.path("ppc_coverage.csv"), records_to_csv(means)),
            atomic_write(self.path("slord.csv"), records_to_csv(pairs)),
        ]

    def write_bench(self, records: Sequence[BaseModel], rows: Sequence[BaseModel]) -> List[Path]:
        return [
            atomic_write(self.path("bench_records.csv"), records_to_csv(records)),
            atomic_write(self.path("bench_results.csv"), records_to_csv(rows)),
        ]
