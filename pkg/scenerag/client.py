import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from .cassette import Cassette
from .chunking import Chunk, render_scene
from .config import SessionConfig, load_synonyms
from .embeddings import build_embedder, embed
from .evaluation import ImageEvaluation, MetricsReport, PredictedScene, aggregate, evaluate_image, parse_structured_answer
from .index import EphemeralIndex
from .ingest import IngestSummary, ingest_convert
from .llm_handler import EVAL_QUESTION, RECORD, LLMHandler, build_eval_prompt, build_prompt
from .relations import load_params, suggest_predicates
from .report import ReportWriter
from .scene import SceneGraph, StructuredScene, build_structured_scene, load_scene_file
from .utils import SceneRagError, StageError, ValidationError, logger

STAGES = ("load", "structure", "chunk", "embed_index", "retrieve", "prompt", "complete")


@dataclass(frozen=True)
class QAResult:
    image_id: str
    question: str
    retrieved: Tuple[Tuple[Chunk, float], ...]
    prompt_digest: str
    answer: str
    mode: str
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> Dict[str, Any]:
        """
        Serialize the result.

        Timings are left out unless asked for so replayed results are
        byte-identical across runs; the stage order is always listed.
        """
        document: Dict[str, Any] = {
            "image_id": self.image_id,
            "question": self.question,
            "retrieved": [
                {"category": chunk.category, "text": chunk.text, "score": score}
                for chunk, score in self.retrieved
            ],
            "prompt_digest": self.prompt_digest,
            "answer": self.answer,
            "mode": self.mode,
            "stages": list(self.timings) or list(STAGES),
        }
        if include_timings:
            document["timings_ms"] = dict(self.timings)
        return document


def load_questions(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """
    Read a questions file.

    Either JSON lines or a JSON array; each record has ``image_id`` and
    optionally ``question`` and ``reference``. An image is evaluated once, so
    each ``image_id`` may appear in one record only.

    Raises:
        ValidationError: on malformed or duplicate records (all of them listed)
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    errors: List[str] = []
    if stripped.startswith("["):
        try:
            records = json.loads(text)
        except json.JSONDecodeError as e:
            raise ValidationError([f"invalid JSON: {e}"], context=str(path))
    else:
        records = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                errors.append(f"line {line_no}: invalid JSON ({e})")

    seen: Dict[str, int] = {}
    for position, record in enumerate(records):
        if not isinstance(record, dict) or record.get("image_id") is None:
            errors.append(f"record {position}: missing image_id")
            continue
        image_id = str(record["image_id"])
        if image_id in seen:
            errors.append(f"record {position}: duplicate image_id '{image_id}' (first in record {seen[image_id]})")
        else:
            seen[image_id] = position
        if "question" in record and not isinstance(record["question"], str):
            errors.append(f"record {position}: question must be a string")
    if errors:
        raise ValidationError(errors, context=str(path))
    return [dict(record, image_id=str(record["image_id"])) for record in records]


class SceneRagClient:
    """
    Main client class for scene-graph question answering.

    Wires structuring, chunking, ephemeral indexing, retrieval, prompting and
    completion into question sessions and batch evaluations.
    """

    def __init__(
        self,
        config: Optional[SessionConfig] = None,
        embedder=None,
        llm_handler: Optional[LLMHandler] = None,
        cassette: Optional[Cassette] = None,
    ):
        """
        Initialize the client.

        Args:
            config: Session configuration (validated here)
            embedder: Embedding provider; built from ``config.embedding`` if omitted
            llm_handler: Completion gateway; built from ``config.completion`` if omitted
            cassette: Cassette for record/replay; opened from ``config.cassette`` if omitted
        """
        self.config = config or SessionConfig()
        self.config.validate()

        if cassette is None and self.config.cassette:
            cassette = Cassette(self.config.cassette, writable=self.config.mode == RECORD)
        self.cassette = cassette
        self.embedder = embedder or build_embedder(self.config.embedding, self.cassette, self.config.mode)
        self.llm_handler = llm_handler or LLMHandler(self.config.completion, self.config.mode, self.cassette)
        self.synonyms = load_synonyms(self.config.synonyms)
        self.report_writer = ReportWriter(dataset=self.config.dataset_name, model=self.config.completion.model)

        self._index_cache: Dict[str, EphemeralIndex] = {}
        self._cache_lock = threading.Lock()

    def answer_question(
        self,
        scene_file: Union[str, Path],
        question: str,
        output_path: Optional[Union[str, Path]] = None,
        k: Optional[int] = None,
    ) -> QAResult:
        """
        Answer one question about one scene.

        The scene is validated before any provider is contacted. The index
        lives only inside this call.

        Args:
            scene_file: Canonical scene-graph file
            question: User question
            output_path: Where to write the serialized result (optional)
            k: Number of chunks to retrieve (defaults to ``config.k``)

        Returns:
            QAResult with retrieved chunks, prompt digest, answer and stage timings

        Raises:
            StageError: naming the failing stage and its cause
        """
        k = self.config.k if k is None else k
        timings: Dict[str, float] = {}

        def stage(name: str, fn: Callable, *args):
            start = time.perf_counter()
            try:
                value = fn(*args)
            except Exception as e:
                logger.error(f"Stage {name} failed: {str(e)}")
                raise StageError(name, e) from e
            timings[name] = (time.perf_counter() - start) * 1000
            return value

        def load() -> SceneGraph:
            if not question or not question.strip():
                raise ValidationError(["question must not be empty"])
            if k < 1:
                raise ValidationError([f"k must be >= 1, got {k}"])
            return load_scene_file(scene_file, self.synonyms)

        logger.info(f"Answering question on {scene_file}: {question}")
        scene = stage("load", load)
        structured = stage("structure", build_structured_scene, scene)
        chunks = stage("chunk", render_scene, structured)

        with EphemeralIndex(scene.image_id, self.embedder) as index:
            stage("embed_index", index.insert_many, chunks)
            hits = stage("retrieve", self._retrieve, index, question, k)

        prompt = stage("prompt", build_prompt, [chunk for chunk, _ in hits], question)
        answer = stage("complete", self.llm_handler.complete, prompt)

        result = QAResult(
            image_id=scene.image_id,
            question=question,
            retrieved=tuple(hits),
            prompt_digest=prompt.digest,
            answer=answer.text,
            mode=answer.mode,
            timings=timings,
        )
        if output_path:
            self.save_result(result, output_path)
        return result

    def _retrieve(self, index: EphemeralIndex, question: str, k: int) -> List[Tuple[Chunk, float]]:
        if len(index) == 0:
            return []
        return index.top_k(embed(question, self.embedder), k)

    def _index_for(self, structured: StructuredScene, chunks: List[Chunk]) -> EphemeralIndex:
        with self._cache_lock:
            index = self._index_cache.get(structured.image_id)
            if index is None:
                index = EphemeralIndex(structured.image_id, self.embedder)
                index.insert_many(chunks)
                self._index_cache[structured.image_id] = index
            return index

    def clear_index_cache(self) -> None:
        with self._cache_lock:
            for index in self._index_cache.values():
                index.close()
            self._index_cache = {}

    def _evaluate_item(self, record: Dict[str, Any], gt: StructuredScene) -> ImageEvaluation:
        image_id = gt.image_id
        question = record.get("question") or EVAL_QUESTION
        try:
            chunks = render_scene(gt)
            if self.config.cache_index:
                hits = self._retrieve(self._index_for(gt, chunks), question, self.config.k)
            else:
                with EphemeralIndex(image_id, self.embedder) as index:
                    index.insert_many(chunks)
                    hits = self._retrieve(index, question, self.config.k)
            prompt = build_eval_prompt([chunk for chunk, _ in hits])
            answer = self.llm_handler.complete(prompt)
            prediction = parse_structured_answer(answer.text, image_id, self.synonyms)
        except SceneRagError as e:
            logger.error(f"Evaluation of image {image_id} failed: {str(e)}")
            prediction = PredictedScene(image_id=image_id, parse_ok=False)
        except Exception as e:
            logger.exception(f"Unexpected error evaluating image {image_id}: {str(e)}")
            prediction = PredictedScene(image_id=image_id, parse_ok=False)

        if not prediction.parse_ok:
            logger.warning(f"No structured answer for image {image_id}; scored as a parse failure")
        return evaluate_image(prediction, gt)

    def _load_ground_truth(self, dataset_dir: Path, image_ids: Sequence[str]) -> Dict[str, StructuredScene]:
        structured: Dict[str, StructuredScene] = {}
        missing = [image_id for image_id in image_ids if not (dataset_dir / f"{image_id}.json").exists()]
        if missing:
            raise ValidationError([f"no scene file for image '{image_id}'" for image_id in missing], context=str(dataset_dir))
        for image_id in image_ids:
            if image_id in structured:
                continue
            scene = load_scene_file(dataset_dir / f"{image_id}.json", self.synonyms)
            if scene.image_id != image_id:
                raise ValidationError([f"scene file {image_id}.json holds image '{scene.image_id}'"], context=str(dataset_dir))
            structured[image_id] = build_structured_scene(scene)
        return structured

    def run_eval(
        self,
        dataset_dir: Optional[Union[str, Path]] = None,
        questions_file: Optional[Union[str, Path]] = None,
        report_path: Optional[Union[str, Path]] = None,
    ) -> MetricsReport:
        """
        Evaluate a dataset of scenes with the integrated evaluation prompt.

        Each record of the questions file is one evaluation image; without a
        questions file every ``*.json`` scene in the dataset is evaluated once.
        Per-image failures are scored as parse failures and the run goes on;
        missing or invalid scene files abort the run.

        Args:
            dataset_dir: Directory of canonical scene files named ``<image_id>.json``
            questions_file: Optional questions file
            report_path: Where to write the report (format from the extension)

        Returns:
            Aggregated MetricsReport
        """
        dataset_dir = Path(dataset_dir or self.config.dataset or "")
        if not dataset_dir.is_dir():
            raise ValidationError([f"dataset directory does not exist: {dataset_dir}"])
        questions_file = questions_file or self.config.questions

        if questions_file:
            records = load_questions(questions_file)
        else:
            records = [{"image_id": path.stem} for path in sorted(dataset_dir.glob("*.json"))]
        if not records:
            raise ValidationError([f"no images to evaluate in {dataset_dir}"])

        structured = self._load_ground_truth(dataset_dir, [record["image_id"] for record in records])
        logger.info(f"Evaluating {len(records)} items from {dataset_dir} with {self.config.workers} workers")

        try:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                results = list(tqdm(
                    pool.map(lambda record: self._evaluate_item(record, structured[record["image_id"]]), records),
                    total=len(records),
                    desc="Evaluating",
                    unit="image",
                ))
        finally:
            self.clear_index_cache()

        report = aggregate(results, self.config.pooling, self.config.averaging, self.config.threshold)
        logger.info(f"Evaluation complete: overall score {report.overall_score}, {report.parse_failures} parse failures")

        report_path = report_path or self.config.report
        if report_path:
            self.save_report(report, report_path)
        return report

    def ingest(
        self,
        source_format: str,
        path_in: Union[str, Path],
        path_out: Union[str, Path],
        strict: bool = False,
    ) -> IngestSummary:
        """Convert an annotation dump into canonical scene files."""
        return ingest_convert(source_format, path_in, path_out, strict=strict, synonyms=self.synonyms)

    def rank_relations(
        self,
        scene_file: Union[str, Path],
        params_file: Union[str, Path],
        top: int = 5,
        predicate_labels: Optional[Sequence[str]] = None,
    ) -> List[Dict[str, Any]]:
        """Rank predicates for the feature-carrying relationships of a scene."""
        scene = load_scene_file(scene_file, self.synonyms)
        params = load_params(params_file)
        return suggest_predicates(scene, params, predicate_labels, top)

    def export(self, report: MetricsReport, format: str = "json") -> str:
        """
        Export a report in the specified format.

        Args:
            report: Aggregated metrics
            format: Output format (json, text, markdown)
        """
        return self.report_writer.export_report(report, format)

    def save_report(self, report: MetricsReport, filename: Union[str, Path], format: Optional[str] = None) -> None:
        """
        Save a report to a file.

        Args:
            report: Aggregated metrics
            filename: Name of the file to save to
            format: Output format; inferred from the extension if not given
        """
        filename = str(filename)
        if not format:
            if filename.endswith(".md"):
                format = "markdown"
            elif filename.endswith(".txt"):
                format = "text"
            else:
                format = "json"

        with open(filename, "w", encoding="utf-8") as f:
            f.write(self.export(report, format))
        logger.info(f"Saved {format} report to {filename}")

    def save_result(self, result: QAResult, filename: Union[str, Path], include_timings: bool = False) -> None:
        with open(filename, "w", encoding="utf-8") as f:
            f.write(json.dumps(result.to_dict(include_timings), indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        logger.info(f"Saved answer for image {result.image_id} to {filename}")
