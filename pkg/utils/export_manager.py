"""Export manager for run artifacts (traces, tables, summaries) with atomic writes"""
import csv
import json
import os
import tempfile
import shutil
from datetime import datetime
from typing import List, Dict, Optional, Any, Sequence


class ExportError(Exception):
    """Custom exception for export errors"""
    pass


def write_atomic(filepath: str, text: str) -> str:
    """
    Write text to ``filepath`` via a temp file in the same directory + rename.

    A reader never sees a half-written file; on failure the target is untouched.
    """
    target_dir = os.path.dirname(os.path.abspath(filepath))
    os.makedirs(target_dir, exist_ok=True)
    temp_fd, temp_path = tempfile.mkstemp(suffix='.tmp', dir=target_dir, text=True)
    try:
        with os.fdopen(temp_fd, 'w', newline='', encoding='utf-8') as f:
            f.write(text)
        shutil.move(temp_path, filepath)
        return filepath
    except PermissionError as e:
        _discard(temp_path)
        raise ExportError(f"Permission denied: Cannot write to '{filepath}'") from e
    except Exception as e:
        _discard(temp_path)
        raise ExportError(f"Failed to write file: {str(e)}") from e


def _discard(path: str):
    try:
        os.unlink(path)
    except OSError:
        pass


class ResultsExporter:
    """
    Export run results to CSV / text / JSON

    Safety features:
    - Temporary file writing → rename on success
    - Proper CSV escaping via the csv module
    - Metadata as ``#`` comment lines; the only timestamp is the single
      ``# generated:`` line, so reruns differ in that line alone
    """

    def __init__(self, stamp: bool = True):
        self.stamp = stamp
        self.last_export_path = None

    def export_to_csv(self, data: List[Dict[str, Any]], filepath: str,
                      metadata: Optional[Dict[str, Any]] = None,
                      fieldnames: Optional[Sequence[str]] = None) -> str:
        """
        Export rows to CSV format

        Args:
            data: List of row dictionaries
            filepath: Output file path
            metadata: Optional metadata written as comment lines above the header
            fieldnames: Column order; defaults to the keys of the first row

        Returns:
            The written path
        """
        return self._export_to_delimited(data, filepath, ',', metadata, fieldnames)

    def export_to_tsv(self, data: List[Dict[str, Any]], filepath: str,
                      metadata: Optional[Dict[str, Any]] = None,
                      fieldnames: Optional[Sequence[str]] = None) -> str:
        return self._export_to_delimited(data, filepath, '\t', metadata, fieldnames)

    def _export_to_delimited(self, data, filepath, delimiter, metadata, fieldnames) -> str:
        if not data and not fieldnames:
            raise ExportError("No data to export")
        headers = list(fieldnames) if fieldnames else list(data[0].keys())

        lines: List[str] = []
        if metadata is not None:
            lines.extend(self._comment_lines(metadata))

        class _Sink:
            def write(self, s):
                lines.append(s)

        writer = csv.DictWriter(
            _Sink(),
            fieldnames=headers,
            delimiter=delimiter,
            quoting=csv.QUOTE_MINIMAL,
            lineterminator='\n'
        )
        writer.writeheader()
        for row in data:
            clean_row = {k: (v if v is not None else '') for k, v in row.items()}
            writer.writerow(clean_row)

        write_atomic(filepath, ''.join(lines))
        self.last_export_path = filepath
        return filepath

    def _comment_lines(self, metadata: Dict[str, Any]) -> List[str]:
        lines = []
        if self.stamp:
            lines.append(f"# generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}\n")
        for key, value in metadata.items():
            safe_value = str(value).replace('\n', ' ').replace('\r', '')
            lines.append(f"# {key}: {safe_value}\n")
        return lines

    def export_text(self, text: str, filepath: str) -> str:
        write_atomic(filepath, text if text.endswith('\n') else text + '\n')
        self.last_export_path = filepath
        return filepath

    def export_json(self, payload: Dict[str, Any], filepath: str) -> str:
        """Write a JSON summary; a ``generated`` timestamp key is added when stamping."""
        body = dict(payload)
        if self.stamp:
            body = {"generated": datetime.now().strftime('%Y-%m-%d %H:%M:%S'), **body}
        return self.export_text(json.dumps(body, indent=2, sort_keys=False, default=_jsonable), filepath)


def _jsonable(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    if hasattr(value, 'item'):
        return value.item()
    return str(value)


def safe_filename(label: str, limit: int = 40) -> str:
    """Filesystem-safe fragment from a free-form label."""
    safe = "".join(c if (c.isalnum() or c in ('-', '_', '.')) else '_' for c in label).strip('_')
    return safe[:limit] or "run"
