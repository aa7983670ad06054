"""
Inference-only prototype-based relation scoring.

Entities and predicates are represented in a shared semantic space as a
class prototype (a linear map of the label's word vector) plus a gated,
instance-specific residual computed from visual features:

    o = W_role t + sigmoid(FC([W_role t, M(e)])) * M(e)
    p = W_p t_p + sigmoid(FC([G(o_s, o_o), M(e_union)])) * M(e_union)
    G(a, b) = ReLU(a + b) - (a - b)^2

No training happens here. Parameters come from a parameter file or from a
seeded initializer.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .scene import SceneGraph
from .utils import ValidationError, logger

SUBJECT = "subject"
OBJECT = "object"


def _as_vector(values, name: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise ValidationError([f"{name} must be a vector, got shape {vector.shape}"])
    return vector


@dataclass(frozen=True)
class AffineMap:
    """y = weight @ x + bias with weight of shape (out_dim, in_dim)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        errors = []
        if weight.ndim != 2:
            errors.append(f"weight must be 2-d, got shape {weight.shape}")
        elif bias.shape != (weight.shape[0],):
            errors.append(f"bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            errors.append("affine map has non-finite entries")
        if errors:
            raise ValidationError(errors)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = _as_vector(x, "input")
        if x.shape[0] != self.in_dim:
            raise ValidationError([f"dimension mismatch: map expects {self.in_dim}, got {x.shape[0]}"])
        return self.weight @ x + self.bias

    def linear(self, x: np.ndarray) -> np.ndarray:
        """Linear part only (weight @ x), used for the class prototypes."""
        x = _as_vector(x, "input")
        if x.shape[0] != self.in_dim:
            raise ValidationError([f"dimension mismatch: map expects {self.in_dim}, got {x.shape[0]}"])
        return self.weight @ x


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


@dataclass(frozen=True)
class GateLayer:
    """sigmoid(FC(concat(a, b))) with FC mapping 2d -> d."""

    fc: AffineMap

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = _as_vector(a, "gate input")
        b = _as_vector(b, "gate input")
        if a.shape != b.shape:
            raise ValidationError([f"dimension mismatch: gate inputs {a.shape[0]} vs {b.shape[0]}"])
        return sigmoid(self.fc(np.concatenate([a, b])))


class ClassEmbeddingTable:
    """Label -> word vector lookup (entity categories and predicates share the table)."""

    def __init__(self, vectors: Dict[str, Sequence[float]]):
        self.vectors = {label: np.asarray(v, dtype=np.float64) for label, v in vectors.items()}
        dims = {v.shape for v in self.vectors.values()}
        errors = []
        if len(dims) > 1:
            errors.append(f"class vectors have mixed shapes {sorted(dims)}")
        if any(not np.all(np.isfinite(v)) for v in self.vectors.values()):
            errors.append("class table has non-finite entries")
        if errors:
            raise ValidationError(errors)
        self.dim = next(iter(dims))[0] if dims else 0

    def __contains__(self, label: str) -> bool:
        return label in self.vectors

    def __getitem__(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise ValidationError([f"unknown label '{label}'"])

    @property
    def labels(self) -> List[str]:
        return sorted(self.vectors)


@dataclass(frozen=True)
class RelationParams:
    """All parameters of the relation scorer; immutable after load."""

    w_subject: AffineMap
    w_object: AffineMap
    w_predicate: AffineMap
    m_entity: AffineMap
    m_union: AffineMap
    gate_entity: GateLayer
    gate_predicate: GateLayer
    class_table: ClassEmbeddingTable
    dim: int

    def __post_init__(self):
        d, d_w = self.dim, self.class_table.dim
        errors = []
        for name in ("w_subject", "w_object", "w_predicate"):
            m = getattr(self, name)
            if (m.out_dim, m.in_dim) != (d, d_w):
                errors.append(f"{name} has shape {(m.out_dim, m.in_dim)}, expected {(d, d_w)}")
        if self.m_entity.out_dim != d or self.m_union.out_dim != d:
            errors.append(f"visual-to-semantic maps must output dimension {d}")
        for name in ("gate_entity", "gate_predicate"):
            fc = getattr(self, name).fc
            if (fc.out_dim, fc.in_dim) != (d, 2 * d):
                errors.append(f"{name} has shape {(fc.out_dim, fc.in_dim)}, expected {(d, 2 * d)}")
        if errors:
            raise ValidationError(errors, context="relation parameters")

    @property
    def visual_dim(self) -> int:
        return self.m_entity.in_dim


def visual_to_semantic(e: np.ndarray, m: AffineMap) -> np.ndarray:
    """Map a visual feature into the semantic space: m.weight @ e + m.bias."""
    return m(e)


def gated_instance_vector(prototype: np.ndarray, mapped_visual: np.ndarray, gate: GateLayer) -> np.ndarray:
    """v = sigmoid(FC([prototype, mapped_visual])) * mapped_visual."""
    mapped_visual = _as_vector(mapped_visual, "mapped visual")
    return gate(prototype, mapped_visual) * mapped_visual


def fuse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetric fusion ReLU(a + b) - (a - b)^2, elementwise."""
    a = _as_vector(a, "fuse input")
    b = _as_vector(b, "fuse input")
    if a.shape != b.shape:
        raise ValidationError([f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}"])
    return np.maximum(a + b, 0.0) - (a - b) ** 2


def entity_representation(category: str, e: np.ndarray, params: RelationParams, role: str = SUBJECT) -> np.ndarray:
    """
    Representation of a subject or object instance.

    Raises:
        ValidationError: unknown category, unknown role or dimension mismatch
    """
    if role == SUBJECT:
        w = params.w_subject
    elif role == OBJECT:
        w = params.w_object
    else:
        raise ValidationError([f"unknown role '{role}'"])
    prototype = w.linear(params.class_table[category])
    mapped = visual_to_semantic(e, params.m_entity)
    return prototype + gated_instance_vector(prototype, mapped, params.gate_entity)


def union_residual(o_subj: np.ndarray, o_obj: np.ndarray, e_union: np.ndarray, params: RelationParams) -> np.ndarray:
    """u_p: the gated residual of the union feature, conditioned on the fused pair."""
    return gated_instance_vector(fuse(o_subj, o_obj), visual_to_semantic(e_union, params.m_union), params.gate_predicate)


def predicate_representation(
    o_subj: np.ndarray,
    o_obj: np.ndarray,
    e_union: np.ndarray,
    predicate: str,
    params: RelationParams,
) -> np.ndarray:
    """p = W_p t_p + u_p."""
    prototype = params.w_predicate.linear(params.class_table[predicate])
    return prototype + union_residual(o_subj, o_obj, e_union, params)


def predicate_query(o_subj: np.ndarray, o_obj: np.ndarray, e_union: np.ndarray, params: RelationParams) -> np.ndarray:
    """
    Label-free query for predicate ranking: fuse(o_s, o_o) + u_p.

    The predicate prototype is what we are trying to find, so the query keeps
    only the pair context and the union residual.
    """
    return fuse(o_subj, o_obj) + union_residual(o_subj, o_obj, e_union, params)


def rank_predicates(query: np.ndarray, params: RelationParams, predicate_labels: Iterable[str]) -> List[Tuple[str, float]]:
    """
    Rank predicate labels by cosine similarity to their prototypes W_p t_p.

    Ties are broken by label in lexicographic order.

    Raises:
        ValidationError: unknown label, dimension mismatch or zero-norm query
            ("degenerate query")
    """
    query = _as_vector(query, "query")
    if query.shape[0] != params.dim:
        raise ValidationError([f"query dimension {query.shape[0]} does not match semantic dimension {params.dim}"])
    query_norm = np.linalg.norm(query)
    if query_norm == 0.0:
        raise ValidationError(["degenerate query"])

    scored = []
    for label in predicate_labels:
        prototype = params.w_predicate.linear(params.class_table[label])
        norm = np.linalg.norm(prototype)
        score = 0.0 if norm == 0.0 else float(np.dot(query, prototype) / (query_norm * norm))
        scored.append((label, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored


def suggest_predicates(
    scene: SceneGraph,
    params: RelationParams,
    predicate_labels: Optional[Iterable[str]] = None,
    top: int = 5,
) -> List[Dict[str, object]]:
    """
    Rank predicates for every relationship of a scene that carries features.

    A relationship qualifies when both endpoints have an object feature and the
    relationship has a union feature; others are skipped.

    Returns:
        One record per qualifying relationship with the annotated predicate and
        the top-ranked (label, score) pairs
    """
    labels = sorted(predicate_labels) if predicate_labels is not None else [
        label for label in params.class_table.labels
        if label in {rel.predicate for rel in scene.relationships}
    ]
    by_id = scene.object_by_id()
    suggestions = []
    for rel in scene.relationships:
        subject, obj = by_id[rel.subject_id], by_id[rel.object_id]
        if subject.feature is None or obj.feature is None or rel.union_feature is None:
            logger.debug(f"Skipping relationship {rel.subject_id}->{rel.object_id}: no features")
            continue
        o_subj = entity_representation(subject.category, np.asarray(subject.feature), params, SUBJECT)
        o_obj = entity_representation(obj.category, np.asarray(obj.feature), params, OBJECT)
        query = predicate_query(o_subj, o_obj, np.asarray(rel.union_feature), params)
        ranked = rank_predicates(query, params, labels)[:top]
        suggestions.append({
            "subject_id": rel.subject_id,
            "object_id": rel.object_id,
            "annotated": rel.predicate,
            "ranked": ranked,
        })
    return suggestions


def init_params(
    seed: int,
    d: int,
    d_v: int,
    d_w: int,
    labels: Iterable[str],
    scale: float = 0.5,
) -> RelationParams:
    """
    Seeded pseudo-random parameters for tests and offline experiments.

    Class vectors are drawn in sorted label order, so the same label set gives
    the same table regardless of input order.
    """
    rng = np.random.default_rng(seed)

    def affine(out_dim: int, in_dim: int) -> AffineMap:
        return AffineMap(rng.normal(0.0, scale, (out_dim, in_dim)), rng.normal(0.0, scale, out_dim))

    w_subject, w_object, w_predicate = affine(d, d_w), affine(d, d_w), affine(d, d_w)
    m_entity, m_union = affine(d, d_v), affine(d, d_v)
    gate_entity, gate_predicate = GateLayer(affine(d, 2 * d)), GateLayer(affine(d, 2 * d))
    table = ClassEmbeddingTable({label: rng.normal(0.0, 1.0, d_w) for label in sorted(set(labels))})
    return RelationParams(
        w_subject=w_subject,
        w_object=w_object,
        w_predicate=w_predicate,
        m_entity=m_entity,
        m_union=m_union,
        gate_entity=gate_entity,
        gate_predicate=gate_predicate,
        class_table=table,
        dim=d,
    )


_MAP_NAMES = ("w_subject", "w_object", "w_predicate", "m_entity", "m_union")
_GATE_NAMES = ("gate_entity", "gate_predicate")


def _array_entry(array: np.ndarray) -> Dict[str, object]:
    return {"shape": list(array.shape), "data": array.reshape(-1).tolist()}


def _read_array(entry: Dict[str, object], name: str) -> np.ndarray:
    try:
        shape = tuple(int(n) for n in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError([f"{name}: malformed array entry ({e})"])
    if data.size != int(np.prod(shape)):
        raise ValidationError([f"{name}: {data.size} values do not fill shape {shape}"])
    return data.reshape(shape)


def save_params(params: RelationParams, path: Union[str, Path]) -> None:
    """
    Write parameters to the text parameter file (docs/formats.md).

    Floats are written with their shortest round-trip representation, so
    ``load_params(save_params(p))`` is bit-exact.
    """
    arrays: Dict[str, object] = {}
    for name in _MAP_NAMES:
        m = getattr(params, name)
        arrays[f"{name}.weight"] = _array_entry(m.weight)
        arrays[f"{name}.bias"] = _array_entry(m.bias)
    for name in _GATE_NAMES:
        fc = getattr(params, name).fc
        arrays[f"{name}.weight"] = _array_entry(fc.weight)
        arrays[f"{name}.bias"] = _array_entry(fc.bias)
    document = {
        "format": "scenerag-relation-params/1",
        "dim": params.dim,
        "arrays": arrays,
        "class_table": {label: params.class_table[label].tolist() for label in params.class_table.labels},
    }
    Path(path).write_text(json.dumps(document, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: Union[str, Path]) -> RelationParams:
    """
    Read a parameter file.

    Raises:
        ValidationError: on malformed content or inconsistent shapes
    """
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        arrays = document["arrays"]
        dim = int(document["dim"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ValidationError([f"malformed parameter file ({e})"], context=str(path))

    def affine(name: str) -> AffineMap:
        return AffineMap(_read_array(arrays.get(f"{name}.weight", {}), f"{name}.weight"),
                         _read_array(arrays.get(f"{name}.bias", {}), f"{name}.bias"))

    maps = {name: affine(name) for name in _MAP_NAMES}
    gates = {name: GateLayer(affine(name)) for name in _GATE_NAMES}
    table = ClassEmbeddingTable(document.get("class_table", {}))
    logger.debug(f"Loaded relation parameters from {path}: d={dim}, {len(table.labels)} labels")
    return RelationParams(class_table=table, dim=dim, **maps, **gates)
