"""
Record/replay cassette for backend calls.

A cassette is a UTF-8 JSON-lines file; each line is one recorded exchange:

    {"kind": "completion", "digest": "<sha256 of the prompt>", "response": "There are 3 cars."}
    {"kind": "embedding", "digest": "<sha256 of the request>", "response": {"dimension": 768, "vectors": [[...]]}}

Replay mode only reads. Record mode appends, one writer at a time.
"""

import json
import threading
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .utils import CassetteMissError, ValidationError, logger


class Cassette:
    """
    In-memory view of a cassette file with optional append-on-record.

    Args:
        path: Cassette file location; may not exist yet in record mode
        writable: Whether ``record`` may append to the file
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, writable: bool = False):
        self.path = Path(path) if path else None
        self.writable = writable
        self._entries: Dict[Tuple[str, str], Any] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    key = (entry["kind"], entry["digest"])
                    self._entries[key] = entry["response"]
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise ValidationError([f"line {line_no}: malformed cassette entry ({e})"], context=str(self.path))
        logger.debug(f"Loaded {len(self._entries)} cassette entries from {self.path}")

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: Tuple[str, str]) -> bool:
        return key in self._entries

    def lookup(self, kind: str, digest: str) -> Any:
        """
        Return the recorded response.

        Raises:
            CassetteMissError: if nothing was recorded for (kind, digest)
        """
        try:
            return self._entries[(kind, digest)]
        except KeyError:
            raise CassetteMissError(kind, digest)

    def record(self, kind: str, digest: str, response: Any) -> None:
        """Store a response and append it to the cassette file."""
        if not self.writable:
            raise ValidationError(["cassette opened read-only"], context=str(self.path))
        with self._lock:
            if (kind, digest) in self._entries:
                return
            self._entries[(kind, digest)] = response
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps({"kind": kind, "digest": digest, "response": response}, ensure_ascii=False) + "\n")
