from dataclasses import dataclass
from typing import List

from .scene import CategorySummary, StructuredScene

NO_RELATIONSHIPS = "none"


@dataclass(frozen=True)
class Chunk:
    """One category's textual rendering; the unit stored in the vector index."""

    category: str
    text: str
    source_image: str


def render_chunk(s: CategorySummary, source_image: str = "") -> Chunk:
    """
    Render a category summary with the chunk grammar (docs/chunk_grammar.md).

    Example:
        ``car: 3, location: [center-left, center], relationships: car near tree, man in car``
    """
    cells = ", ".join(cell.name for cell in s.cells)
    relationships = ", ".join(s.relation_phrases) if s.relation_phrases else NO_RELATIONSHIPS
    text = f"{s.category}: {s.count}, location: [{cells}], relationships: {relationships}"
    return Chunk(category=s.category, text=text, source_image=source_image)


def render_scene(sc: StructuredScene) -> List[Chunk]:
    """One chunk per category, sorted by category label."""
    summaries = sorted(sc.summaries, key=lambda s: s.category)
    return [render_chunk(s, sc.image_id) for s in summaries]
