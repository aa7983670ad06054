"""
Answer parsing and scoring.

A structured model answer is parsed into a PredictedScene and compared with
the ground-truth StructuredScene on four attributes: category, quantity,
location and relationship. Per-image recall/precision/F1 are averaged over the
dataset; per-(attribute, class) recalls feed the overall score, the fraction
of classes whose recall reaches the threshold.
"""

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

from .llm_handler import EVAL_ATTRIBUTES, EVAL_TEMPLATE_VERSION
from .scene import GridCell, StructuredScene
from .utils import ValidationError, canonical_label, logger

ATTRIBUTES = EVAL_ATTRIBUTES
DEFAULT_THRESHOLD = 0.55

Triple = Tuple[str, str, str]
ClassKey = Tuple[str, str]


@dataclass(frozen=True)
class PredictedScene:
    image_id: str
    # category -> predicted count; None when the answer names the category without a usable count
    categories: Dict[str, Optional[int]] = field(default_factory=dict)
    locations: Dict[str, FrozenSet[GridCell]] = field(default_factory=dict)
    relations: FrozenSet[Triple] = frozenset()
    parse_ok: bool = True


@dataclass(frozen=True)
class AttributeScores:
    """
    Scores for one attribute of one image.

    ``gt_total`` of zero means the attribute is undefined for the image and is
    left out of dataset means.
    """

    recall: float
    precision: float
    f1: float
    matched: int = 0
    gt_total: int = 0
    pred_total: int = 0

    @property
    def defined(self) -> bool:
        return self.gt_total > 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "matched": self.matched,
            "gt_total": self.gt_total,
            "pred_total": self.pred_total,
        }


@dataclass(frozen=True)
class ImageEvaluation:
    image_id: str
    scores: Dict[str, AttributeScores]
    # (attribute, class) -> (matched, ground-truth occurrences)
    class_counts: Dict[ClassKey, Tuple[int, int]]
    parse_ok: bool


@dataclass(frozen=True)
class MetricsReport:
    per_image: Tuple[ImageEvaluation, ...]
    means: Dict[str, Optional[Dict[str, float]]]
    class_recalls: Dict[ClassKey, float]
    overall_score: Optional[float]
    parse_failures: int
    pooling: str = "micro"
    averaging: str = "per_image"
    threshold: float = DEFAULT_THRESHOLD
    template_version: str = EVAL_TEMPLATE_VERSION

    @property
    def image_count(self) -> int:
        return len(self.per_image)

    def to_dict(self) -> Dict[str, Any]:
        classes: Dict[str, Dict[str, float]] = {attribute: {} for attribute in ATTRIBUTES}
        for (attribute, label), recall in self.class_recalls.items():
            classes[attribute][label] = recall
        return {
            "template_version": self.template_version,
            "pooling": self.pooling,
            "averaging": self.averaging,
            "threshold": self.threshold,
            "images": self.image_count,
            "parse_failures": self.parse_failures,
            "means": self.means,
            "class_recalls": classes,
            "overall_score": self.overall_score,
            "per_image": [
                {
                    "image_id": item.image_id,
                    "parse_ok": item.parse_ok,
                    "scores": {attribute: item.scores[attribute].to_dict() for attribute in ATTRIBUTES},
                }
                for item in self.per_image
            ],
        }


def _find_block(text: str) -> Optional[Dict[str, Any]]:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, dict) and (
            isinstance(value.get("objects"), list) or isinstance(value.get("relationships"), list)
        ):
            return value
        start = text.find("{", start + 1)
    return None


def _read_count(value: Any) -> Optional[int]:
    if isinstance(value, bool):
        return None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if isinstance(value, str) and value.strip().isdigit():
        value = int(value.strip())
    if isinstance(value, int) and value >= 1:
        return value
    return None


def _read_triple(entry: Any, synonyms: Optional[Dict[str, str]]) -> Optional[Triple]:
    if isinstance(entry, dict):
        parts = [entry.get("subject"), entry.get("predicate"), entry.get("object")]
    elif isinstance(entry, (list, tuple)) and len(entry) == 3:
        parts = list(entry)
    else:
        return None
    if not all(isinstance(part, str) for part in parts):
        return None
    subject, predicate, obj = (canonical_label(part, synonyms) for part in parts)
    if not (subject and predicate and obj):
        return None
    return (subject, predicate, obj)


def parse_structured_answer(
    text: str, image_id: str = "", synonyms: Optional[Dict[str, str]] = None
) -> PredictedScene:
    """
    Parse a structured answer produced for the evaluation prompt.

    The first JSON object holding an ``objects`` or ``relationships`` list is
    used; surrounding prose and code fences are ignored. Unknown location names
    are dropped. Text without such a block yields ``parse_ok=False`` and empty
    fields; it never raises.

    Args:
        text: Raw model answer
        image_id: Image the answer belongs to
        synonyms: Optional label synonym map

    Returns:
        PredictedScene with canonical labels
    """
    block = _find_block(text or "")
    if block is None:
        logger.debug(f"No structured block in answer for image {image_id}")
        return PredictedScene(image_id=image_id, parse_ok=False)

    categories: Dict[str, Optional[int]] = {}
    locations: Dict[str, set] = {}
    for entry in block.get("objects") or []:
        if not isinstance(entry, dict) or not isinstance(entry.get("category"), str):
            continue
        category = canonical_label(entry["category"], synonyms)
        if not category:
            continue
        count = _read_count(entry.get("count"))
        previous = categories.get(category)
        if previous is not None and count is not None:
            count += previous
        categories[category] = count if count is not None else previous

        raw_cells = entry.get("locations", entry.get("location", []))
        if isinstance(raw_cells, str):
            raw_cells = [raw_cells]
        cells = locations.setdefault(category, set())
        for name in raw_cells if isinstance(raw_cells, list) else []:
            if not isinstance(name, str):
                continue
            try:
                cells.add(GridCell.from_name(name))
            except ValidationError:
                logger.debug(f"Dropping unknown location '{name}' for {category}")

    relations = set()
    for entry in block.get("relationships") or []:
        triple = _read_triple(entry, synonyms)
        if triple is not None:
            relations.add(triple)

    return PredictedScene(
        image_id=image_id,
        categories=categories,
        locations={category: frozenset(cells) for category, cells in locations.items()},
        relations=frozenset(relations),
        parse_ok=True,
    )


def f1(p: float, r: float) -> float:
    """
    Harmonic mean of precision and recall; 0 when both are 0.

    Raises:
        ValidationError: if p or r lies outside [0, 1]
    """
    if not (0.0 <= p <= 1.0) or not (0.0 <= r <= 1.0):
        raise ValidationError([f"precision and recall must lie in [0, 1], got p={p}, r={r}"])
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def _scores(matched: int, gt_total: int, pred_total: int) -> AttributeScores:
    recall = matched / gt_total if gt_total else 0.0
    precision = matched / pred_total if pred_total else 0.0
    return AttributeScores(recall, precision, f1(precision, recall), matched, gt_total, pred_total)


def _counts(pred: PredictedScene, gt: StructuredScene, attribute: str) -> Tuple[int, int, int, Dict[str, Tuple[int, int]]]:
    per_class: Dict[str, Tuple[int, int]] = {}

    if attribute == "category":
        for summary in gt.summaries:
            per_class[summary.category] = (int(summary.category in pred.categories), 1)
        return sum(m for m, _ in per_class.values()), len(gt.summaries), len(pred.categories), per_class

    if attribute == "quantity":
        for summary in gt.summaries:
            per_class[summary.category] = (int(pred.categories.get(summary.category) == summary.count), 1)
        predicted = sum(1 for count in pred.categories.values() if count is not None)
        return sum(m for m, _ in per_class.values()), len(gt.summaries), predicted, per_class

    if attribute == "location":
        for summary in gt.summaries:
            hit = len(set(summary.cells) & pred.locations.get(summary.category, frozenset()))
            per_class[summary.category] = (hit, len(summary.cells))
        predicted = sum(len(cells) for cells in pred.locations.values())
        matched = sum(m for m, _ in per_class.values())
        return matched, sum(t for _, t in per_class.values()), predicted, per_class

    if attribute == "relationship":
        gt_triples = set(gt.relation_triples)
        pooled: Dict[str, List[int]] = defaultdict(lambda: [0, 0])
        for triple in gt_triples:
            pooled[triple[1]][1] += 1
            if triple in pred.relations:
                pooled[triple[1]][0] += 1
        per_class = {predicate: (m, t) for predicate, (m, t) in pooled.items()}
        return len(gt_triples & pred.relations), len(gt_triples), len(pred.relations), per_class

    raise ValidationError([f"unknown attribute '{attribute}'"])


def attribute_scores(pred: PredictedScene, gt: StructuredScene, attribute: str) -> AttributeScores:
    """
    Recall, precision and F1 of one attribute for one image.

    category: set overlap of category labels. quantity: a ground-truth category
    matches when its predicted count is exactly right. location: grid cells
    shared per category. relationship: exact (subject, predicate, object)
    category triples.

    Raises:
        ValidationError: on an image_id mismatch or an unknown attribute
    """
    if pred.image_id != gt.image_id:
        raise ValidationError([f"prediction for '{pred.image_id}' scored against ground truth of '{gt.image_id}'"])
    matched, gt_total, pred_total, _ = _counts(pred, gt, attribute)
    return _scores(matched, gt_total, pred_total)


def evaluate_image(pred: PredictedScene, gt: StructuredScene) -> ImageEvaluation:
    """Score all four attributes and collect per-class counts for pooling."""
    if pred.image_id != gt.image_id:
        raise ValidationError([f"prediction for '{pred.image_id}' scored against ground truth of '{gt.image_id}'"])
    scores = {}
    class_counts: Dict[ClassKey, Tuple[int, int]] = {}
    for attribute in ATTRIBUTES:
        matched, gt_total, pred_total, per_class = _counts(pred, gt, attribute)
        scores[attribute] = _scores(matched, gt_total, pred_total)
        for label, counts in per_class.items():
            class_counts[(attribute, label)] = counts
    return ImageEvaluation(gt.image_id, scores, class_counts, pred.parse_ok)


def overall_score(per_class_recalls: Mapping[Any, float], threshold: float = DEFAULT_THRESHOLD) -> float:
    """
    Fraction of classes whose recall is at least ``threshold`` (inclusive).

    Raises:
        ValidationError: if the map is empty
    """
    if not per_class_recalls:
        raise ValidationError(["overall score needs at least one class recall"])
    passing = sum(1 for recall in per_class_recalls.values() if recall >= threshold)
    return passing / len(per_class_recalls)


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _dataset_means(results: Sequence[ImageEvaluation], averaging: str) -> Dict[str, Optional[Dict[str, float]]]:
    means: Dict[str, Optional[Dict[str, float]]] = {}
    for attribute in ATTRIBUTES:
        rows = [item.scores[attribute] for item in results if item.scores[attribute].defined]
        if not rows:
            means[attribute] = None
        elif averaging == "pooled":
            pooled = _scores(sum(r.matched for r in rows), sum(r.gt_total for r in rows), sum(r.pred_total for r in rows))
            means[attribute] = {"recall": pooled.recall, "precision": pooled.precision, "f1": pooled.f1}
        else:
            means[attribute] = {
                "recall": _mean([r.recall for r in rows]),
                "precision": _mean([r.precision for r in rows]),
                "f1": _mean([r.f1 for r in rows]),
            }
    return means


def _class_recalls(results: Sequence[ImageEvaluation], pooling: str) -> Dict[ClassKey, float]:
    totals: Dict[ClassKey, List[int]] = defaultdict(lambda: [0, 0])
    ratios: Dict[ClassKey, List[float]] = defaultdict(list)
    for item in results:
        for key, (matched, gt_total) in item.class_counts.items():
            if gt_total == 0:
                continue
            totals[key][0] += matched
            totals[key][1] += gt_total
            ratios[key].append(matched / gt_total)

    if pooling == "macro":
        recalls = {key: _mean(values) for key, values in ratios.items()}
    else:
        recalls = {key: matched / gt_total for key, (matched, gt_total) in totals.items()}
    return dict(sorted(recalls.items()))


def aggregate(
    results: Sequence[ImageEvaluation],
    pooling: str = "micro",
    averaging: str = "per_image",
    threshold: float = DEFAULT_THRESHOLD,
) -> MetricsReport:
    """
    Fold per-image evaluations into a dataset report.

    Args:
        results: One evaluation per image
        pooling: ``micro`` sums matches and ground truth per class over the
            dataset; ``macro`` averages the per-image class recalls
        averaging: ``per_image`` averages image scores; ``pooled`` divides
            dataset-wide sums
        threshold: Recall threshold of the overall score

    Raises:
        ValidationError: for an empty dataset or an unknown switch
    """
    if not results:
        raise ValidationError(["cannot aggregate an empty dataset"])
    if pooling not in ("micro", "macro"):
        raise ValidationError([f"unknown pooling '{pooling}'"])
    if averaging not in ("per_image", "pooled"):
        raise ValidationError([f"unknown averaging '{averaging}'"])

    ordered = tuple(sorted(results, key=lambda item: item.image_id))
    class_recalls = _class_recalls(ordered, pooling)
    if class_recalls:
        score = overall_score(class_recalls, threshold)
    else:
        logger.warning("No ground-truth classes in the dataset; overall score undefined")
        score = None

    return MetricsReport(
        per_image=ordered,
        means=_dataset_means(ordered, averaging),
        class_recalls=class_recalls,
        overall_score=score,
        parse_failures=sum(1 for item in ordered if not item.parse_ok),
        pooling=pooling,
        averaging=averaging,
        threshold=threshold,
    )
