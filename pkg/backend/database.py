import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from errors import ReportError
from harness import emit_report, load_summary
from models import Report
from settings import reports_dir

logger = logging.getLogger(__name__)


class ReportStore:
    """Report directories on disk, one per experiment name"""

    def __init__(self, root: Optional[str] = None):
        self.root = Path(root) if root is not None else reports_dir()
        self.index_file = self.root / "index.json"

    async def initialize(self):
        """Create the reports directory and an empty index"""
        self.root.mkdir(parents=True, exist_ok=True)
        if not self.index_file.exists():
            self._write_index({})
            logger.info(f"Created report index at {self.index_file}")

    def _read_index(self) -> Dict[str, Dict[str, Any]]:
        try:
            content = self.index_file.read_text(encoding="utf-8").strip()
            return json.loads(content) if content else {}
        except (FileNotFoundError, json.JSONDecodeError, ValueError) as e:
            logger.warning(f"Could not load report index, starting fresh: {e}")
            return {}

    def _write_index(self, index: Dict[str, Dict[str, Any]]) -> None:
        self.index_file.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    def directory(self, name: str) -> Path:
        if not name or "/" in name or name.startswith("."):
            raise ReportError(f"invalid report name '{name}'")
        return self.root / name

    async def save(self, report: Report) -> Path:
        """Write the report files and record it in the index"""
        out = self.directory(report.name)
        emit_report(report, out)
        index = self._read_index()
        index[report.name] = {
            "seed": report.seed,
            "makespan": report.metrics.makespan,
            "completed_jobs": report.metrics.completed_jobs,
        }
        try:
            self._write_index(index)
        except OSError as e:
            raise ReportError(f"cannot update {self.index_file}: {e.strerror or e}") from None
        return out

    async def list_reports(self) -> List[Dict[str, Any]]:
        return [{"name": name, **entry} for name, entry in sorted(self._read_index().items())]

    async def load_summary(self, name: str) -> Optional[Dict[str, Any]]:
        out = self.directory(name)
        if not (out / "summary.json").exists():
            return None
        return load_summary(out)

    async def load_cdf(self, name: str) -> Optional[pd.DataFrame]:
        path = self.directory(name) / "cdf.csv"
        if not path.exists():
            return None
        return pd.read_csv(path)
