"""
Scene graph model and structured visual representation.

A scene graph holds the detected objects of one image (category + bounding box)
and the predicate-labelled relationships between them. From it we derive the
per-category summary used for retrieval: instance count, occupied cells of a
3x3 grid and relationship phrases.
"""

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .utils import ValidationError, canonical_label, logger

ObjectId = Union[int, str]
Point = Tuple[float, float]

ROWS = ("top", "center", "bottom")
COLS = ("left", "center", "right")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates (origin top-left, y downward)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class ObjectInstance:
    id: ObjectId
    category: str
    bbox: BoundingBox
    feature: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class Relationship:
    subject_id: ObjectId
    predicate: str
    object_id: ObjectId
    union_feature: Optional[Tuple[float, ...]] = None


@dataclass(frozen=True)
class SceneGraph:
    image_id: str
    width: int
    height: int
    objects: Tuple[ObjectInstance, ...] = ()
    relationships: Tuple[Relationship, ...] = ()

    def object_by_id(self) -> Dict[ObjectId, ObjectInstance]:
        return {obj.id: obj for obj in self.objects}

    def to_dict(self) -> Dict[str, Any]:
        """Serialize to the canonical scene-graph document."""
        objects = []
        for obj in self.objects:
            entry: Dict[str, Any] = {
                "id": obj.id,
                "category": obj.category,
                "bbox": obj.bbox.as_list(),
            }
            if obj.feature is not None:
                entry["feature"] = list(obj.feature)
            objects.append(entry)

        relationships = []
        for rel in self.relationships:
            entry = {
                "subject_id": rel.subject_id,
                "predicate": rel.predicate,
                "object_id": rel.object_id,
            }
            if rel.union_feature is not None:
                entry["union_feature"] = list(rel.union_feature)
            relationships.append(entry)

        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "objects": objects,
            "relationships": relationships,
        }


@dataclass(frozen=True, order=True)
class GridCell:
    """
    One of the nine regions of the 3x3 grid.

    Ordering is row-major (top-left first, bottom-right last).
    """

    row_index: int
    col_index: int

    @property
    def row(self) -> str:
        return ROWS[self.row_index]

    @property
    def col(self) -> str:
        return COLS[self.col_index]

    @property
    def name(self) -> str:
        if self.row_index == 1 and self.col_index == 1:
            return "center"
        return f"{self.row}-{self.col}"

    def __str__(self) -> str:
        return self.name

    @classmethod
    def from_name(cls, name: str) -> "GridCell":
        """
        Parse a cell name such as ``top-left`` or ``center``.

        Accepts ``middle`` as an alias for ``center`` and ``center-center``
        for the middle cell; spaces and underscores may replace the hyphen.

        Raises:
            ValidationError: if the name is not one of the nine cells
        """
        text = canonical_label(name).replace("_", "-").replace(" ", "-").replace("middle", "center")
        if text in ("center", "center-center"):
            return cls(1, 1)
        parts = text.split("-")
        if len(parts) == 2 and parts[0] in ROWS and parts[1] in COLS:
            return cls(ROWS.index(parts[0]), COLS.index(parts[1]))
        raise ValidationError([f"unknown grid cell '{name}'"])


ALL_CELLS: Tuple[GridCell, ...] = tuple(GridCell(r, c) for r in range(3) for c in range(3))


@dataclass(frozen=True)
class CategorySummary:
    category: str
    count: int
    cells: Tuple[GridCell, ...]
    relation_phrases: Tuple[str, ...] = ()


@dataclass(frozen=True)
class StructuredScene:
    image_id: str
    summaries: Tuple[CategorySummary, ...] = ()
    # distinct (subject category, predicate, object category) in input order
    relation_triples: Tuple[Tuple[str, str, str], ...] = ()

    def summary_for(self, category: str) -> Optional[CategorySummary]:
        for summary in self.summaries:
            if summary.category == category:
                return summary
        return None

    @property
    def categories(self) -> List[str]:
        return [s.category for s in self.summaries]


def bbox_center(b: BoundingBox) -> Point:
    """
    Center point of a bounding box.

    Args:
        b: A valid bounding box

    Returns:
        ((x_min + x_max) / 2, (y_min + y_max) / 2)
    """
    return ((b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2)


def grid_cell(p: Point, width: int, height: int) -> GridCell:
    """
    Locate a point in the 3x3 grid of a width x height image.

    Bins are half-open [k*W/3, (k+1)*W/3); the last bin is closed at the
    right/bottom edge so the mapping is total on the closed image rectangle.

    Raises:
        ValidationError: if the point lies outside the image or the
            dimensions are not positive
    """
    x, y = p
    errors = []
    if width <= 0 or height <= 0:
        errors.append(f"non-positive image dimensions {width}x{height}")
    else:
        if not (0 <= x <= width):
            errors.append(f"x={x} outside [0, {width}]")
        if not (0 <= y <= height):
            errors.append(f"y={y} outside [0, {height}]")
    if errors:
        raise ValidationError(errors)

    col = min(math.floor(3 * x / width), 2)
    row = min(math.floor(3 * y / height), 2)
    return GridCell(row, col)


def count_by_category(objects: Iterable[ObjectInstance]) -> Dict[str, int]:
    """Number of instances per category; absent categories are absent from the map."""
    return dict(Counter(obj.category for obj in objects))


def build_structured_scene(g: SceneGraph) -> StructuredScene:
    """
    Build the per-category structured representation of a scene.

    Relationship phrases attach to the summaries of both the subject's and the
    object's category, in input order, without duplicates.

    Args:
        g: A validated scene graph

    Returns:
        StructuredScene with one summary per category, sorted by label
    """
    counts = count_by_category(g.objects)
    cells: Dict[str, set] = {category: set() for category in counts}
    for obj in g.objects:
        cells[obj.category].add(grid_cell(bbox_center(obj.bbox), g.width, g.height))

    by_id = g.object_by_id()
    phrases: Dict[str, List[str]] = {category: [] for category in counts}
    triples: List[Tuple[str, str, str]] = []
    for rel in g.relationships:
        subj_cat = by_id[rel.subject_id].category
        obj_cat = by_id[rel.object_id].category
        triple = (subj_cat, rel.predicate, obj_cat)
        if triple not in triples:
            triples.append(triple)
        phrase = f"{subj_cat} {rel.predicate} {obj_cat}"
        for category in (subj_cat, obj_cat):
            if phrase not in phrases[category]:
                phrases[category].append(phrase)

    summaries = tuple(
        CategorySummary(
            category=category,
            count=counts[category],
            cells=tuple(sorted(cells[category])),
            relation_phrases=tuple(phrases[category]),
        )
        for category in sorted(counts)
    )
    return StructuredScene(image_id=g.image_id, summaries=summaries, relation_triples=tuple(triples))


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _read_feature(raw: Any, where: str, errors: List[str]) -> Optional[Tuple[float, ...]]:
    if raw is None:
        return None
    if not isinstance(raw, Sequence) or isinstance(raw, str) or not all(_is_number(v) for v in raw):
        errors.append(f"{where}: feature must be a list of finite numbers")
        return None
    return tuple(float(v) for v in raw)


def validate_scene_graph(raw: Mapping[str, Any], synonyms: Optional[Dict[str, str]] = None) -> SceneGraph:
    """
    Validate a parsed canonical scene-graph record.

    Collects every violation before failing so the caller sees the complete
    list at once.

    Args:
        raw: Parsed JSON document (see docs/scene_graph_schema.json)
        synonyms: Optional label synonym map applied to categories and predicates

    Returns:
        A SceneGraph satisfying all invariants

    Raises:
        ValidationError: with the full list of violations
    """
    errors: List[str] = []
    if not isinstance(raw, Mapping):
        raise ValidationError(["record is not an object"])

    image_id = raw.get("image_id")
    if image_id is None or str(image_id).strip() == "":
        errors.append("missing image_id")
    image_id = str(image_id)

    width, height = raw.get("width"), raw.get("height")
    dims_ok = True
    for name, value in (("width", width), ("height", height)):
        if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
            errors.append(f"non-positive dimensions: {name}={value!r}")
            dims_ok = False

    objects: List[ObjectInstance] = []
    seen_ids = set()
    for position, entry in enumerate(raw.get("objects") or []):
        where = f"object[{position}]"
        if not isinstance(entry, Mapping):
            errors.append(f"{where}: not an object")
            continue
        obj_id = entry.get("id")
        if obj_id is None or isinstance(obj_id, (bool, float, list, dict)):
            errors.append(f"{where}: missing or invalid id")
            continue
        where = f"object {obj_id!r}"
        if obj_id in seen_ids:
            errors.append(f"{where}: duplicate object id")
            continue
        seen_ids.add(obj_id)

        category = canonical_label(entry.get("category") or "", synonyms)
        if not category:
            errors.append(f"{where}: empty category")

        box = entry.get("bbox")
        if not isinstance(box, Sequence) or isinstance(box, str) or len(box) != 4 or not all(_is_number(v) for v in box):
            errors.append(f"{where}: bbox must be 4 finite numbers")
            continue
        x_min, y_min, x_max, y_max = box
        if min(box) < 0:
            errors.append(f"{where}: negative bbox coordinate")
        if x_min > x_max or y_min > y_max:
            errors.append(f"{where}: inverted bbox {list(box)}")
        elif dims_ok and (x_max > width or y_max > height):
            errors.append(f"{where}: bbox {list(box)} out of image bounds {width}x{height}")

        feature = _read_feature(entry.get("feature"), where, errors)
        objects.append(ObjectInstance(obj_id, category, BoundingBox(x_min, y_min, x_max, y_max), feature))

    relationships: List[Relationship] = []
    for position, entry in enumerate(raw.get("relationships") or []):
        where = f"relationship[{position}]"
        if not isinstance(entry, Mapping):
            errors.append(f"{where}: not an object")
            continue
        subject_id, object_id = entry.get("subject_id"), entry.get("object_id")
        predicate = canonical_label(entry.get("predicate") or "", synonyms)
        if not predicate:
            errors.append(f"{where}: empty predicate")
        for role, ref in (("subject", subject_id), ("object", object_id)):
            if not isinstance(ref, (int, str)) or isinstance(ref, bool) or ref not in seen_ids:
                errors.append(f"{where}: dangling reference {role} id {ref!r}")
        if subject_id == object_id:
            errors.append(f"{where}: self-loop on id {subject_id!r}")
        union_feature = _read_feature(entry.get("union_feature"), where, errors)
        relationships.append(Relationship(subject_id, predicate, object_id, union_feature))

    if errors:
        raise ValidationError(errors, context=f"scene {image_id}")

    return SceneGraph(
        image_id=image_id,
        width=width,
        height=height,
        objects=tuple(objects),
        relationships=tuple(relationships),
    )


def load_scene_file(path: Union[str, Path], synonyms: Optional[Dict[str, str]] = None) -> SceneGraph:
    """
    Read and validate a canonical scene-graph file.

    Raises:
        ValidationError: if the file is not valid JSON or the record is invalid
        OSError: if the file cannot be read
    """
    path = Path(path)
    logger.debug(f"Loading scene file: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError([f"invalid JSON: {e}"], context=str(path))
    return validate_scene_graph(raw, synonyms)


def write_scene_file(scene: SceneGraph, path: Union[str, Path]) -> None:
    """Write a scene graph as a canonical UTF-8 JSON document."""
    Path(path).write_text(
        json.dumps(scene.to_dict(), indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
