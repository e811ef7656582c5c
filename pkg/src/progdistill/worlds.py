"""Synthetic scene worlds: the ground-truth stand-in for an image plus its
scene graph.

A scene is a set of named, attributed boxes on an abstract canvas. Patches are
views into a scene (never pixels) whose visible-object set is recomputed from
geometry. The oracle answers structured queries exactly from the ground truth,
which is what makes it usable as a teacher.

All types are immutable after construction; generation and the oracle are pure
functions, so scenes and patches can be shared freely across parallel workers.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from .util import read_jsonl, write_jsonl

Rect = tuple[int, int, int, int]  # (x, y, w, h)

# An object counts as visible in a patch iff this fraction of its own box
# area lies inside the patch region.
VISIBILITY_THRESHOLD = 0.5

UNKNOWN = "unknown"


class WorldConfigError(ValueError):
    pass


class CropError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def rect_area(r: Rect) -> int:
    return max(0, r[2]) * max(0, r[3])


def rect_intersection(a: Rect, b: Rect) -> Rect:
    x = max(a[0], b[0])
    y = max(a[1], b[1])
    x2 = min(a[0] + a[2], b[0] + b[2])
    y2 = min(a[1] + a[3], b[1] + b[3])
    return (x, y, max(0, x2 - x), max(0, y2 - y))


def overlap_ratio(obj_bbox: Rect, region: Rect) -> float:
    """Fraction of the object's own area covered by the region."""
    area = rect_area(obj_bbox)
    if area == 0:
        return 0.0
    return rect_area(rect_intersection(obj_bbox, region)) / area


def rect_iou(a: Rect, b: Rect) -> float:
    inter = rect_area(rect_intersection(a, b))
    union = rect_area(a) + rect_area(b) - inter
    if union == 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    id: str
    name: str
    attributes: frozenset[str]
    bbox: Rect
    relations: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class SceneGraph:
    scene_id: str
    canvas: tuple[int, int]
    objects: tuple[SceneObject, ...]
    seed: int

    def object_by_id(self, object_id: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def objects_named(self, name: str) -> list[SceneObject]:
        return [o for o in self.objects if o.name == name]

    @property
    def names(self) -> set[str]:
        return {o.name for o in self.objects}


@dataclass(frozen=True)
class ScenePatch:
    """A view of a scene restricted to a region.

    `visible_objects` is always derived via crop(); patches are never stored
    with a stale visibility set. `origin_label` records which find() query
    produced the patch, when any did.
    """
    scene_id: str
    region: Rect
    origin_label: str | None = None
    visible_objects: tuple[str, ...] = ()


@dataclass(frozen=True)
class PatchList:
    """An ordered group of patches carrying the provenance of the find() that
    produced them (kept even when the list is empty)."""
    patches: tuple[ScenePatch, ...]
    origin_label: str | None = None

    def __len__(self) -> int:
        return len(self.patches)

    def __getitem__(self, index: int) -> ScenePatch:
        return self.patches[index]

    def __iter__(self):
        return iter(self.patches)


@dataclass
class WorldConfig:
    nouns: tuple[str, ...]
    attribute_families: dict[str, tuple[str, ...]]
    relations: tuple[str, ...]
    objects_per_scene: tuple[int, int] = (3, 8)
    ambiguity_rate: float = 0.25
    canvas: tuple[int, int] = (100, 100)

    def validate(self) -> None:
        if not self.nouns:
            raise WorldConfigError("noun vocabulary is empty")
        if not self.attribute_families:
            raise WorldConfigError("attribute vocabulary is empty")
        for family, values in self.attribute_families.items():
            if not values:
                raise WorldConfigError(f"attribute family {family!r} is empty")
        attrs = self.all_attributes()
        if set(self.nouns) & attrs:
            raise WorldConfigError("noun and attribute vocabularies overlap")
        seen: set[str] = set()
        for values in self.attribute_families.values():
            if seen & set(values):
                raise WorldConfigError("attribute families overlap")
            seen |= set(values)
        lo, hi = self.objects_per_scene
        if lo < 1 or hi < lo:
            raise WorldConfigError("objects_per_scene range invalid")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise WorldConfigError("ambiguity_rate outside [0, 1]")

    def all_attributes(self) -> set[str]:
        out: set[str] = set()
        for values in self.attribute_families.values():
            out |= set(values)
        return out

    def family_of(self, attribute: str) -> str | None:
        for family, values in self.attribute_families.items():
            if attribute in values:
                return family
        return None

    def to_dict(self) -> dict:
        return {
            "nouns": list(self.nouns),
            "attribute_families": {k: list(v) for k, v in self.attribute_families.items()},
            "relations": list(self.relations),
            "objects_per_scene": list(self.objects_per_scene),
            "ambiguity_rate": self.ambiguity_rate,
            "canvas": list(self.canvas),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(
            nouns=tuple(d["nouns"]),
            attribute_families={k: tuple(v) for k, v in d["attribute_families"].items()},
            relations=tuple(d["relations"]),
            objects_per_scene=tuple(d.get("objects_per_scene", (3, 8))),
            ambiguity_rate=float(d.get("ambiguity_rate", 0.25)),
            canvas=tuple(d.get("canvas", (100, 100))),
        )


def default_world_config() -> WorldConfig:
    # Vocabulary sized so question-form/signature keys recur across scenes at
    # desk scale; count students need repeated evidence per key.
    return WorldConfig(
        nouns=("flower", "table", "dog", "car", "chair", "book",
               "cup", "lamp", "tree", "bird"),
        attribute_families={
            "color": ("red", "blue", "green"),
            "size": ("small", "large"),
        },
        relations=("near", "above", "below"),
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_world(seed: int, config: WorldConfig) -> SceneGraph:
    """Deterministically generate one scene: same (seed, config) -> same scene.

    With probability `ambiguity_rate`, an object is nested inside an earlier
    object's box, so that the host's find()-patch shows two objects.
    """
    config.validate()
    rng = random.Random(f"world:{seed}")
    width, height = config.canvas
    lo, hi = config.objects_per_scene
    count = rng.randint(lo, hi)

    placed: list[tuple[str, frozenset[str], Rect]] = []
    for idx in range(count):
        name = rng.choice(config.nouns)
        attrs = frozenset(rng.choice(values)
                          for values in config.attribute_families.values())
        hosts = [p for p in placed if p[2][2] >= 12 and p[2][3] >= 12]
        if hosts and rng.random() < config.ambiguity_rate:
            host = rng.choice(hosts)
            hx, hy, hw, hh = host[2]
            w = rng.randint(3, min(7, hw - 4))
            h = rng.randint(3, min(7, hh - 4))
            x = rng.randint(hx + 1, hx + hw - w - 1)
            y = rng.randint(hy + 1, hy + hh - h - 1)
            bbox = (x, y, w, h)
        else:
            bbox = (0, 0, 12, 12)
            for _ in range(40):
                w = rng.randint(12, 20)
                h = rng.randint(12, 20)
                x = rng.randint(0, width - w)
                y = rng.randint(0, height - h)
                bbox = (x, y, w, h)
                clean = all(overlap_ratio(bbox, other[2]) < VISIBILITY_THRESHOLD
                            and overlap_ratio(other[2], bbox) < VISIBILITY_THRESHOLD
                            for other in placed)
                if clean:
                    break
        placed.append((name, attrs, bbox))

    # Ids are arbitrary labels: shuffling them decouples the oracle's
    # smallest-id tie-break from placement order (hosts are placed before the
    # objects nested inside them).
    ids = [f"o{idx:02d}" for idx in range(count)]
    rng.shuffle(ids)
    objects = []
    for idx, (name, attrs, bbox) in enumerate(placed):
        relations: tuple[tuple[str, str], ...] = ()
        others = [oid for oid in ids if oid != ids[idx]]
        if others and rng.random() < 0.3:
            relations = ((rng.choice(config.relations), rng.choice(others)),)
        objects.append(SceneObject(id=ids[idx], name=name, attributes=attrs,
                                   bbox=bbox, relations=relations))
    return SceneGraph(scene_id=f"s{seed:07d}", canvas=config.canvas,
                      objects=tuple(objects), seed=seed)


def crop(scene: SceneGraph, region: Rect,
         origin_label: str | None = None) -> ScenePatch:
    """View of `scene` restricted to `region`; visibility recomputed here."""
    canvas_rect = (0, 0, scene.canvas[0], scene.canvas[1])
    if rect_area(rect_intersection(region, canvas_rect)) == 0:
        raise CropError(f"region {region} does not intersect canvas")
    visible = tuple(o.id for o in scene.objects
                    if overlap_ratio(o.bbox, region) >= VISIBILITY_THRESHOLD)
    return ScenePatch(scene_id=scene.scene_id, region=region,
                      origin_label=origin_label, visible_objects=visible)


def full_patch(scene: SceneGraph) -> ScenePatch:
    return crop(scene, (0, 0, scene.canvas[0], scene.canvas[1]))


# ---------------------------------------------------------------------------
# Structured queries and the oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VerifyAttribute:
    name: str
    attribute: str


@dataclass(frozen=True)
class ChooseOption:
    options: tuple[str, ...]
    center: str | None = None


@dataclass(frozen=True)
class AskAttributeFamily:
    family: str
    center: str | None = None


@dataclass(frozen=True)
class AskName:
    center: str | None = None


@dataclass(frozen=True)
class Exists:
    name: str


StructuredQuery = Union[VerifyAttribute, ChooseOption, AskAttributeFamily,
                        AskName, Exists]


def resolve_target(scene: SceneGraph, patch: ScenePatch,
                   center: str | None) -> SceneObject | None:
    """Pick the queried object among the patch's visible objects.

    Center token match first; otherwise all visible objects are candidates.
    Ties break to the smallest object id so resolution is deterministic.
    """
    visible = [scene.object_by_id(oid) for oid in patch.visible_objects]
    if center is not None:
        candidates = [o for o in visible if o.name == center]
    else:
        candidates = visible
    if not candidates:
        return None
    return min(candidates, key=lambda o: o.id)


def oracle_answer(scene: SceneGraph, patch: ScenePatch, query: StructuredQuery,
                  attribute_families: Mapping[str, Sequence[str]]) -> str:
    """Exact answer from the ground-truth scene restricted to the patch."""
    if isinstance(query, VerifyAttribute):
        target = resolve_target(scene, patch, query.name)
        if target is None:
            return UNKNOWN
        return "yes" if query.attribute in target.attributes else "no"

    if isinstance(query, AskAttributeFamily):
        target = resolve_target(scene, patch, query.center)
        if target is None:
            return UNKNOWN
        family_values = set(attribute_families.get(query.family, ()))
        for attr in sorted(target.attributes):
            if attr in family_values:
                return attr
        return UNKNOWN

    if isinstance(query, AskName):
        target = resolve_target(scene, patch, query.center)
        return target.name if target is not None else UNKNOWN

    if isinstance(query, Exists):
        visible = [scene.object_by_id(oid) for oid in patch.visible_objects]
        return "yes" if any(o.name == query.name for o in visible) else "no"

    if isinstance(query, ChooseOption):
        visible = [scene.object_by_id(oid) for oid in patch.visible_objects]
        target = resolve_target(scene, patch, query.center)
        if target is not None:
            for option in query.options:
                if option == target.name or option in target.attributes:
                    return option
        for option in query.options:
            if any(option == o.name or option in o.attributes for o in visible):
                return option
        return query.options[0] if query.options else UNKNOWN

    raise TypeError(f"unsupported query: {query!r}")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def scene_to_record(scene: SceneGraph) -> dict:
    return {
        "scene_id": scene.scene_id,
        "canvas": list(scene.canvas),
        "seed": scene.seed,
        "objects": [
            {
                "id": o.id,
                "name": o.name,
                "attributes": sorted(o.attributes),
                "bbox": list(o.bbox),
                "relations": [[rel, target] for rel, target in o.relations],
            }
            for o in scene.objects
        ],
    }


def scene_from_record(record: dict) -> SceneGraph:
    objects = tuple(
        SceneObject(
            id=od["id"],
            name=od["name"],
            attributes=frozenset(od.get("attributes", ())),
            bbox=tuple(od["bbox"]),
            relations=tuple((rel, target) for rel, target in od.get("relations", ())),
        )
        for od in record["objects"]
    )
    return SceneGraph(scene_id=record["scene_id"], canvas=tuple(record["canvas"]),
                      objects=objects, seed=int(record.get("seed", -1)))


def scene_from_gqa_record(record: dict) -> SceneGraph:
    """Load a GQA-shaped scene-graph record: objects keyed by id, each with
    name/attributes/x/y/w/h (and optional relations [{name, object}])."""
    scene_id = str(record.get("scene_id") or record.get("image_id") or "gqa")
    width = int(record.get("width", 100))
    height = int(record.get("height", 100))
    objects = []
    for oid in sorted(record["objects"]):
        od = record["objects"][oid]
        relations = tuple(
            (rd["name"], str(rd["object"])) for rd in od.get("relations", ())
        )
        objects.append(SceneObject(
            id=str(oid),
            name=od["name"],
            attributes=frozenset(od.get("attributes", ())),
            bbox=(int(od["x"]), int(od["y"]), int(od["w"]), int(od["h"])),
            relations=relations,
        ))
    return SceneGraph(scene_id=scene_id, canvas=(width, height),
                      objects=tuple(objects), seed=-1)


@dataclass
class WorldStore:
    """In-memory scene_id -> SceneGraph map shared by backends."""
    scenes: dict[str, SceneGraph] = field(default_factory=dict)

    def add(self, scene: SceneGraph) -> None:
        self.scenes[scene.scene_id] = scene

    def get(self, scene_id: str) -> SceneGraph:
        return self.scenes[scene_id]

    def __contains__(self, scene_id: str) -> bool:
        return scene_id in self.scenes

    def __len__(self) -> int:
        return len(self.scenes)

    def ids(self) -> list[str]:
        return sorted(self.scenes)

    def save_jsonl(self, path: str | Path) -> int:
        return write_jsonl(path, (scene_to_record(self.scenes[sid])
                                  for sid in self.ids()))

    @classmethod
    def load_jsonl(cls, path: str | Path,
                   record_format: str = "native") -> "WorldStore":
        loader = scene_from_record if record_format == "native" else scene_from_gqa_record
        store = cls()
        for record in read_jsonl(path):
            store.add(loader(record))
        return store


def generate_worlds(seeds: Iterable[int], config: WorldConfig) -> WorldStore:
    store = WorldStore()
    for seed in seeds:
        store.add(generate_world(seed, config))
    return store
