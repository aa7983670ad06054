import hashlib
import logging
import re
import sys
from typing import Any, Dict, List, Optional


# Set up logging
logger = logging.getLogger("scenerag")
logger.setLevel(logging.INFO)

# Console handler
console_handler = logging.StreamHandler(sys.stdout)
console_handler.setLevel(logging.INFO)
formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
console_handler.setFormatter(formatter)
logger.addHandler(console_handler)


class SceneRagError(Exception):
    """Base exception class for scenerag errors."""
    pass


class ValidationError(SceneRagError):
    """
    Raised when input data violates an invariant.

    Carries the complete list of violations so callers can report all of them
    at once instead of failing on the first one.
    """

    def __init__(self, errors: List[str], context: Optional[str] = None):
        self.errors = list(errors)
        self.context = context
        prefix = f"{context}: " if context else ""
        super().__init__(prefix + "; ".join(self.errors))


class ProviderError(SceneRagError):
    """Embedding or chat-completion backend failure (transport, timeout, bad payload)."""
    pass


class RefusalError(ProviderError):
    """The chat backend refused to answer; the message is the backend's text verbatim."""
    pass


class CassetteMissError(SceneRagError):
    """A replay lookup found no recorded entry for the request digest."""

    def __init__(self, kind: str, digest: str):
        self.kind = kind
        self.digest = digest
        super().__init__(f"cassette miss for {kind} digest {digest}")


class StageError(SceneRagError):
    """A pipeline stage failed; keeps the stage name and the original cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


def setup_logger(level: str = 'INFO', log_file: Optional[str] = None) -> None:
    """
    Set up the logger with custom settings.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_file: Optional file path to write logs
    """
    numeric_level = getattr(logging, level.upper(), logging.INFO)
    logger.setLevel(numeric_level)
    console_handler.setLevel(numeric_level)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)


_WHITESPACE = re.compile(r"\s+")


def canonical_label(label: Any, synonyms: Optional[Dict[str, str]] = None) -> str:
    """
    Canonicalize a category or predicate label.

    Lowercases, trims and collapses internal whitespace, then applies the
    optional synonym map (keys are canonicalized the same way).

    Args:
        label: Raw label
        synonyms: Optional variant -> canonical label map

    Returns:
        The canonical label (may be empty if the input was blank)
    """
    text = _WHITESPACE.sub(" ", str(label).strip().lower())
    if synonyms and text in synonyms:
        return synonyms[text]
    return text


def prompt_digest(text: str) -> str:
    """Stable SHA-256 hex digest of the exact UTF-8 bytes of ``text``."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    0 success, 1 validation error, 2 provider/transport error, 3 cassette miss.
    A StageError maps by its cause.
    """
    if isinstance(error, StageError):
        return exit_code_for(error.cause)
    if isinstance(error, CassetteMissError):
        return 3
    if isinstance(error, ProviderError):
        return 2
    return 1
