from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union
import json
import logging

import numpy as np
import pandas as pd

from accelflow.core.metrics import RunRecord

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["iter", "t", "kl", "lyapunov", "mse", "wall_nanos"]
FLOAT_FORMAT = "%.17g"


class ExportService:
    """Service for writing run records, traces, aggregate tables and metadata."""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def export_records(self, records: Sequence[RunRecord], name: str, wall_time: bool = True) -> Path:
        """
        Write one run's records as `<name>.csv`.

        Args:
            records: RunRecords in iteration order.
            name: File stem, e.g. `gaussian_fig1_0`.
            wall_time: Write measured wall_nanos; False leaves the column empty.

        Returns:
            Path of the written file
        """
        df = self._records_dataframe(records, wall_time)
        return self._export_csv(df, f"{name}.csv")

    def export_traces(self, times: Sequence[float], positions: Sequence[np.ndarray], name: str) -> Path:
        """Write `<name>_traces.csv` with columns iter,t,x_0..x_{N-1} (d = 1), iteration 0 included."""
        matrix = np.vstack([np.asarray(p, dtype=float).reshape(-1) for p in positions])
        df = pd.DataFrame(matrix, columns=[f"x_{i}" for i in range(matrix.shape[1])])
        df.insert(0, "t", np.asarray(times, dtype=float))
        df.insert(0, "iter", np.arange(len(times), dtype=np.int64))
        return self._export_csv(df, f"{name}_traces.csv")

    def export_table(self, rows: List[Dict[str, Any]], columns: Sequence[str], filename: str) -> Path:
        """Write an aggregate table (mse_vs_N.csv, sweep_K.csv, ...) with a fixed column order."""
        df = pd.DataFrame(rows, columns=list(columns))
        for column in df.columns:
            if column in ("N", "iter", "runs", "K"):
                df[column] = df[column].astype("Int64")
        return self._export_csv(df, filename)

    def export_metadata(self, metadata: Dict[str, Any], filename: str) -> Path:
        """Export metadata as JSON."""
        path = self.output_dir / filename
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path

    def _records_dataframe(self, records: Sequence[RunRecord], wall_time: bool) -> pd.DataFrame:
        return pd.DataFrame({
            "iter": pd.array([r.iteration for r in records], dtype="Int64"),
            "t": pd.Series([r.time_t for r in records], dtype="float64"),
            "kl": pd.Series([r.kl_estimate for r in records], dtype="float64"),
            "lyapunov": pd.Series([r.lyapunov for r in records], dtype="float64"),
            "mse": pd.Series([r.mse_contrib for r in records], dtype="float64"),
            "wall_nanos": pd.array([r.wall_nanos if wall_time else None for r in records], dtype="Int64"),
        }, columns=RECORD_COLUMNS)

    def _export_csv(self, df: pd.DataFrame, filename: str) -> Path:
        """Export a DataFrame as CSV; missing values are empty fields."""
        path = self.output_dir / filename
        df.to_csv(path, index=False, na_rep="", float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.debug(f"Wrote {len(df)} rows to {path}")
        return path


def read_records(path: Union[str, Path]) -> pd.DataFrame:
    """Read a run CSV back; empty fields become NaN."""
    return pd.read_csv(path)


def load_metadata(path: Union[str, Path]) -> Optional[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
