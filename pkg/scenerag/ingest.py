"""
Converters from annotation dumps to canonical scene-graph files.

Supported source formats:

- ``canonical``: canonical documents (a directory of ``*.json`` files, a JSON
  file holding one document or a list of them, or JSON lines)
- ``vg150-annotations``: Visual-Genome-style records with ``x/y/w/h`` boxes,
  ``names`` lists and nested ``subject``/``object`` references
- ``aug-annotations``: COCO-like dumps with ``images``, ``annotations``,
  ``categories``, ``predicates`` and ``relationships`` tables

Every converted record goes through ``validate_scene_graph`` and is written to
``<out>/<image_id>.json``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

from tqdm import tqdm

from .scene import validate_scene_graph, write_scene_file
from .utils import ValidationError, logger

SOURCE_FORMATS = ("vg150-annotations", "aug-annotations", "canonical")


@dataclass
class IngestSummary:
    images: int = 0
    objects: int = 0
    relationships: int = 0
    rejects: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "images": self.images,
            "objects": self.objects,
            "relationships": self.relationships,
            "rejected": len(self.rejects),
            "rejects": self.rejects,
        }


def _read_json_records(path: Path) -> List[Any]:
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        records = []
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValidationError([f"line {line_no}: invalid JSON ({e})"], context=str(path))
        return records
    return data if isinstance(data, list) else [data]


def _canonical_records(path: Path) -> Iterator[Tuple[str, Any]]:
    if path.is_dir():
        for file in sorted(path.glob("*.json")):
            try:
                yield file.name, json.loads(file.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                yield file.name, ValidationError([f"invalid JSON: {e}"])
        return
    for position, record in enumerate(_read_json_records(path)):
        yield f"record {position}", record


def _vg_ref(rel: Dict[str, Any], role: str) -> Any:
    nested = rel.get(role)
    if isinstance(nested, dict):
        return nested.get("object_id", nested.get("id"))
    return rel.get(f"{role}_id")


def _vg_label(obj: Dict[str, Any]) -> Any:
    names = obj.get("names")
    if isinstance(names, list) and names:
        return names[0]
    return obj.get("name", obj.get("category"))


def _xywh(box: Any) -> Any:
    if isinstance(box, (list, tuple)) and len(box) == 4 and all(isinstance(v, (int, float)) for v in box):
        x, y, w, h = box
        return [x, y, x + w, y + h]
    return box


def vg_to_canonical(record: Dict[str, Any]) -> Dict[str, Any]:
    """Convert one Visual-Genome-style image record to a canonical document."""
    image = record.get("image") if isinstance(record.get("image"), dict) else record
    objects = []
    for obj in record.get("objects") or []:
        if not isinstance(obj, dict):
            objects.append(obj)
            continue
        entry = {
            "id": obj.get("object_id", obj.get("id")),
            "category": _vg_label(obj),
            "bbox": _xywh([obj.get("x"), obj.get("y"), obj.get("w"), obj.get("h")]) if "x" in obj else obj.get("bbox"),
        }
        if obj.get("feature") is not None:
            entry["feature"] = obj["feature"]
        objects.append(entry)

    relationships = []
    for rel in record.get("relationships") or []:
        if not isinstance(rel, dict):
            relationships.append(rel)
            continue
        entry = {
            "subject_id": _vg_ref(rel, "subject"),
            "predicate": rel.get("predicate"),
            "object_id": _vg_ref(rel, "object"),
        }
        if rel.get("union_feature") is not None:
            entry["union_feature"] = rel["union_feature"]
        relationships.append(entry)

    return {
        "image_id": record.get("image_id", image.get("image_id", image.get("id"))),
        "width": image.get("width"),
        "height": image.get("height"),
        "objects": objects,
        "relationships": relationships,
    }


def _table(dump: Dict[str, Any], name: str) -> Iterator[Tuple[str, Any]]:
    """Entries of one dump table, labelled ``name[position]``; malformed entries come back as errors."""
    table = dump.get(name) or []
    if not isinstance(table, list):
        yield name, ValidationError([f"{name} must be a list"])
        return
    for position, entry in enumerate(table):
        if isinstance(entry, dict):
            yield f"{name}[{position}]", entry
        else:
            yield f"{name}[{position}]", ValidationError([f"{name} entry must be an object, got {type(entry).__name__}"])


def aug_to_canonical(dump: Dict[str, Any]) -> Iterator[Tuple[str, Any]]:
    """
    Split a COCO-like aerial dump into canonical documents, one per image.

    Boxes are ``[x, y, w, h]``; category and predicate ids are resolved through
    the dump's ``categories`` and ``predicates`` tables. Table entries that are
    not objects are yielded first as ``(label, ValidationError)`` pairs.
    """
    malformed: List[Tuple[str, ValidationError]] = []

    def entries(name: str) -> Iterator[Dict[str, Any]]:
        for label, entry in _table(dump, name):
            if isinstance(entry, ValidationError):
                malformed.append((label, entry))
            else:
                yield entry

    categories = {c.get("id"): c.get("name") for c in entries("categories")}
    predicates = {p.get("id"): p.get("name") for p in entries("predicates")}

    annotations: Dict[Any, List[Dict[str, Any]]] = {}
    for ann in entries("annotations"):
        entry = {"id": ann.get("id"), "category": categories.get(ann.get("category_id"), ""), "bbox": _xywh(ann.get("bbox"))}
        annotations.setdefault(ann.get("image_id"), []).append(entry)

    relations: Dict[Any, List[Dict[str, Any]]] = {}
    for rel in entries("relationships"):
        entry = {
            "subject_id": rel.get("subject_id"),
            "predicate": predicates.get(rel.get("predicate_id"), rel.get("predicate", "")),
            "object_id": rel.get("object_id"),
        }
        relations.setdefault(rel.get("image_id"), []).append(entry)

    images = list(entries("images"))
    yield from malformed

    for image in images:
        image_id = image.get("id")
        yield f"image {image_id}", {
            "image_id": image_id,
            "width": image.get("width"),
            "height": image.get("height"),
            "objects": annotations.get(image_id, []),
            "relationships": relations.get(image_id, []),
        }


def _source_records(source_format: str, path_in: Path) -> Iterator[Tuple[str, Any]]:
    if source_format == "canonical":
        yield from _canonical_records(path_in)
    elif source_format == "vg150-annotations":
        for position, record in enumerate(_read_json_records(path_in)):
            label = f"record {position}"
            if isinstance(record, dict) and record.get("image_id", record.get("id")) is not None:
                label = f"record {position} (image {record.get('image_id', record.get('id'))})"
            yield label, vg_to_canonical(record) if isinstance(record, dict) else record
    else:
        dumps = _read_json_records(path_in)
        for dump in dumps:
            if not isinstance(dump, dict):
                raise ValidationError(["aug dump must be a JSON object"], context=str(path_in))
            yield from aug_to_canonical(dump)


def _output_name(image_id: str) -> str:
    return image_id.replace("/", "_").replace("\\", "_") + ".json"


def ingest_convert(
    source_format: str,
    path_in: Union[str, Path],
    path_out: Union[str, Path],
    strict: bool = False,
    synonyms: Optional[Dict[str, str]] = None,
) -> IngestSummary:
    """
    Convert an annotation dump into canonical scene-graph files.

    Args:
        source_format: One of ``vg150-annotations``, ``aug-annotations``, ``canonical``
        path_in: Source file or directory
        path_out: Output directory (created if needed)
        strict: Abort on the first invalid record instead of skipping it
        synonyms: Optional label synonym map

    Returns:
        Conversion summary with counts and the list of rejected records

    Raises:
        ValidationError: unknown format, unreadable source, or an invalid
            record in strict mode (naming the record)
    """
    if source_format not in SOURCE_FORMATS:
        raise ValidationError([f"unknown source format '{source_format}', expected one of {SOURCE_FORMATS}"])
    path_in, path_out = Path(path_in), Path(path_out)
    if not path_in.exists():
        raise ValidationError([f"input path does not exist: {path_in}"])
    path_out.mkdir(parents=True, exist_ok=True)

    summary = IngestSummary()
    for label, raw in tqdm(_source_records(source_format, path_in), desc=f"Ingesting {source_format}", unit="image"):
        try:
            if isinstance(raw, ValidationError):
                raise raw
            scene = validate_scene_graph(raw, synonyms)
        except ValidationError as e:
            if strict:
                raise ValidationError(e.errors, context=label)
            logger.warning(f"Skipping {label}: {e}")
            summary.rejects.append({"record": label, "errors": e.errors})
            continue

        write_scene_file(scene, path_out / _output_name(scene.image_id))
        summary.images += 1
        summary.objects += len(scene.objects)
        summary.relationships += len(scene.relationships)

    logger.info(
        f"Converted {summary.images} images ({summary.objects} objects, "
        f"{summary.relationships} relationships), rejected {len(summary.rejects)}"
    )
    return summary
