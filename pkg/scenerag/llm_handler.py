import os
import threading
import time
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

import openai

from .cassette import Cassette
from .chunking import Chunk
from .utils import (
    CassetteMissError,
    ProviderError,
    RefusalError,
    SceneRagError,
    ValidationError,
    logger,
    prompt_digest,
)

PROMPT_TEMPLATE = "Based on the information extracted from the image: {data}, please answer the following question: {question}."
DATA_JOINER = "; "
EMPTY_DATA = "none"

EVAL_TEMPLATE_VERSION = "v1"
EVAL_ATTRIBUTES = ("category", "quantity", "location", "relationship")
EVAL_QUESTION = (
    "What are the categories, quantities, locations, and relationships of the objects in the image?"
)
EVAL_INSTRUCTION = """Answer only with one JSON object in this exact shape:
{"objects": [{"category": "<label>", "count": <integer>, "locations": ["<cell>", ...]}], "relationships": [{"subject": "<label>", "predicate": "<label>", "object": "<label>"}]}
Use lowercase singular category labels. Locations must be cells of a 3x3 grid over the image: top-left, top-center, top-right, center-left, center, center-right, bottom-left, bottom-center, bottom-right. List every object category you can identify with its number of instances and every relationship between object categories."""

# Per-attribute question templates shipped with the evaluation set (versioned with EVAL_TEMPLATE_VERSION).
QUESTION_TEMPLATES = {
    "category": "What kinds of objects are in the image?",
    "quantity": "How many {category} are there in the image?",
    "location": "Where is the {category} located in the image?",
    "relationship": "How is the {category} related to the other objects in the image?",
}

LIVE, RECORD, REPLAY = "live", "record", "replay"
MODES = (LIVE, RECORD, REPLAY)


@dataclass(frozen=True)
class PromptText:
    text: str
    data_section: str
    question: str

    @property
    def digest(self) -> str:
        return prompt_digest(self.text)


@dataclass
class CompletionConfig:
    """Decoding and endpoint settings for the chat backend."""

    model: str = "Qwen2-72B-Instruct"
    temperature: float = 0.0
    max_tokens: int = 512
    base_url: Optional[str] = None
    api_key_env: str = "SCENERAG_API_KEY"
    auth_header: str = "Authorization"
    timeout: float = 60.0
    max_in_flight: int = 4

    def validate(self) -> List[str]:
        errors = []
        if self.temperature < 0:
            errors.append(f"temperature must be >= 0, got {self.temperature}")
        if self.timeout <= 0:
            errors.append(f"timeout must be > 0, got {self.timeout}")
        if self.max_tokens < 1:
            errors.append(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.max_in_flight < 1:
            errors.append(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        return errors


@dataclass(frozen=True)
class AnswerRecord:
    prompt_digest: str
    text: str
    latency_ms: float
    backend: str
    mode: str


def build_prompt(chunks: Sequence[Chunk], question: str) -> PromptText:
    """
    Compose the semantic-enhanced prompt.

    Chunk texts are joined with "; " in retrieval rank order; an empty
    retrieval renders the data section as "none".

    Raises:
        ValidationError: if the question is empty
    """
    if not question or not question.strip():
        raise ValidationError(["question must not be empty"])
    data = DATA_JOINER.join(chunk.text for chunk in chunks) if chunks else EMPTY_DATA
    text = PROMPT_TEMPLATE.format(data=data, question=question)
    return PromptText(text=text, data_section=data, question=question)


def build_eval_prompt(chunks: Sequence[Chunk], instruction_schema: Sequence[str] = EVAL_ATTRIBUTES) -> PromptText:
    """
    Compose the integrated evaluation prompt.

    The integrated question goes through the regular template, followed by a
    blank line and the structured-output instruction block.

    Raises:
        ValidationError: if the schema does not list the four attributes
    """
    missing = [attribute for attribute in EVAL_ATTRIBUTES if attribute not in instruction_schema]
    if missing:
        raise ValidationError([f"instruction schema misses attributes {missing}"])
    base = build_prompt(chunks, EVAL_QUESTION)
    return PromptText(text=f"{base.text}\n\n{EVAL_INSTRUCTION}", data_section=base.data_section, question=EVAL_QUESTION)


class LLMHandler:
    """
    Gateway to an OpenAI-compatible chat-completion backend with record/replay.
    """

    def __init__(
        self,
        config: Optional[CompletionConfig] = None,
        mode: str = LIVE,
        cassette: Optional[Cassette] = None,
        client: Any = None,
    ):
        """
        Initialize the LLM handler.

        Args:
            config: Completion settings (model, temperature, endpoint, timeout)
            mode: live, record or replay
            cassette: Cassette used by record and replay modes
            client: Pre-built OpenAI-compatible client; created lazily otherwise
        """
        if mode not in MODES:
            raise ValidationError([f"unknown mode '{mode}'"])
        self.config = config or CompletionConfig()
        self.mode = mode
        self.cassette = cassette
        self._client = client
        self._in_flight = threading.BoundedSemaphore(self.config.max_in_flight)

    @property
    def backend(self) -> str:
        return f"{self.config.base_url or 'openai'}/{self.config.model}"

    @property
    def client(self):
        """OpenAI client, built on first live use so replay never touches the network."""
        if self._client is None:
            api_key = os.getenv(self.config.api_key_env)
            if not api_key:
                raise ProviderError(f"API key is required. Set the {self.config.api_key_env} environment variable.")
            headers = {}
            if self.config.auth_header.lower() != "authorization":
                headers[self.config.auth_header] = api_key
            self._client = openai.OpenAI(
                api_key=api_key,
                base_url=self.config.base_url,
                timeout=self.config.timeout,
                default_headers=headers or None,
            )
        return self._client

    def complete(self, prompt: PromptText, mode: Optional[str] = None) -> AnswerRecord:
        """
        Obtain an answer for a prompt.

        Live and record modes send a single-turn user message; record mode also
        appends the answer to the cassette. Replay mode looks the prompt digest
        up in the cassette and performs no network activity.

        Raises:
            CassetteMissError: replay miss, naming the digest
            RefusalError: the backend refused (message verbatim)
            ProviderError: transport or timeout failure
        """
        mode = mode or self.mode
        digest = prompt.digest
        start = time.perf_counter()

        if mode == REPLAY:
            if self.cassette is None:
                raise CassetteMissError("completion", digest)
            text = self.cassette.lookup("completion", digest)
            return AnswerRecord(digest, text, (time.perf_counter() - start) * 1000, self.backend, REPLAY)

        with self._in_flight:
            text = self._call_backend(prompt.text)
        latency = (time.perf_counter() - start) * 1000
        logger.debug(f"Completion {digest[:12]} took {latency:.1f} ms")

        if mode == RECORD:
            if self.cassette is None:
                raise SceneRagError("record mode requires a cassette")
            self.cassette.record("completion", digest, text)
        return AnswerRecord(digest, text, latency, self.backend, mode)

    def _call_backend(self, prompt_text: str) -> str:
        try:
            response = self.client.chat.completions.create(
                model=self.config.model,
                messages=[{"role": "user", "content": prompt_text}],
                temperature=self.config.temperature,
                max_tokens=self.config.max_tokens,
            )
        except openai.APITimeoutError as e:
            raise ProviderError(f"chat completion timed out after {self.config.timeout}s: {e}")
        except openai.OpenAIError as e:
            raise ProviderError(f"chat completion failed: {e}")

        choices = getattr(response, "choices", None)
        if not choices:
            raise ProviderError("chat completion returned no choices")
        message = getattr(choices[0], "message", None)
        if message is None:
            raise ProviderError("chat completion choice has no message")
        refusal = getattr(message, "refusal", None)
        if isinstance(refusal, str) and refusal:
            raise RefusalError(refusal)
        return message.content or ""
