"""
Logging setup for Fair Translate
Root logger configuration plus the JSON-lines training log
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def configure_logging(log_file: Optional[Union[str, Path]] = None, level: int = logging.INFO):
    """
    Configure the root logger

    Args:
        log_file: Optional file that receives a copy of every record
        level: Logging level
    """
    handlers = []
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    handlers.append(logging.StreamHandler())

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )


class JsonLinesWriter:
    """Appends one JSON document per line"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, 'a', encoding='utf-8')

    def write(self, record: Dict[str, Any]):
        self._handle.write(json.dumps(record, sort_keys=True) + '\n')
        self._handle.flush()

    def close(self):
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> 'JsonLinesWriter':
        return self

    def __exit__(self, *exc):
        self.close()


def read_json_lines(path: Union[str, Path]) -> list:
    """Read back a JSON-lines log"""
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def write_history_csv(history: List[Dict[str, Any]], path: Union[str, Path]):
    """Write per-epoch history dicts as CSV; columns are the union of keys in first-seen order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = []
    for entry in history:
        columns.extend(k for k in entry if k not in columns)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for entry in history:
            writer.writerow(entry)
