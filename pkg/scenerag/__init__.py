"""
scenerag: scene-graph retrieval-augmented visual question answering

Turns structured scene graphs into per-category text chunks, retrieves the
chunks closest to a question from an ephemeral in-memory index, builds the
semantic-enhanced prompt for a chat-completion backend and scores structured
answers with recall, precision, F1 and an overall score.
"""

__version__ = '0.1.0'

from .client import QAResult, SceneRagClient
from .config import SessionConfig, load_config
from .utils import (
    CassetteMissError,
    ProviderError,
    SceneRagError,
    StageError,
    ValidationError,
    exit_code_for,
    setup_logger,
)

__all__ = [
    "SceneRagClient",
    "QAResult",
    "SessionConfig",
    "load_config",
    "SceneRagError",
    "ValidationError",
    "ProviderError",
    "CassetteMissError",
    "StageError",
    "exit_code_for",
    "setup_logger",
]
