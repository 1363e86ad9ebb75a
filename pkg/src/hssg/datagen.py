"""Synthetic scene sequences, their JSONL file format, and label embeddings.

Scenes are rooms of axis-aligned boxes with class-dependent sizes. Ground
truth relationships are *derived* from the final geometry by fixed rules,
so any stored predicate can be re-checked against the boxes. Frames slide
a spatial window across the room, sample noisy surface points for the
visible instances, and keep instance ids stable across frames.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, GenerationError
from .geometry import AxisAlignedBox, box_distance
from .rng import stream_rng


@dataclass(frozen=True)
class LabelSpace:
    object_classes: tuple
    predicate_classes: tuple

    def __post_init__(self):
        if len(set(self.object_classes)) != len(self.object_classes):
            raise ConfigError("duplicate object class names")
        if len(set(self.predicate_classes)) != len(self.predicate_classes):
            raise ConfigError("duplicate predicate class names")

    @property
    def num_objects(self) -> int:
        return len(self.object_classes)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_classes)

    def object_index(self, name: str) -> int:
        return self.object_classes.index(name)

    def predicate_index(self, name: str) -> int:
        return self.predicate_classes.index(name)


DEFAULT_OBJECT_CLASSES = (
    "floor", "wall", "ceiling", "door", "window", "chair", "table", "sofa",
    "bed", "cabinet", "shelf", "desk", "lamp", "monitor", "plant", "pillow",
    "curtain", "sink", "toilet", "bathtub", "refrigerator", "oven",
    "microwave", "trash_bin", "box", "picture", "cup",
)

DEFAULT_PREDICATE_CLASSES = (
    "supported_by", "attached_to", "close_by", "standing_on", "lying_on",
    "hanging_on", "connected_to", "leaning_against", "part_of", "belongs_to",
    "built_in", "covering", "inside", "higher_than", "lower_than", "same_as",
)

DEFAULT_LABEL_SPACE = LabelSpace(DEFAULT_OBJECT_CLASSES, DEFAULT_PREDICATE_CLASSES)

# Nominal (l, w, h) in meters. Several classes deliberately share similar
# footprints so geometry alone does not fully determine the class.
CLASS_SIZES = {
    "floor": (6.0, 6.0, 0.1),
    "wall": (4.0, 0.15, 2.6),
    "ceiling": (6.0, 6.0, 0.1),
    "door": (0.9, 0.08, 2.0),
    "window": (1.2, 0.08, 1.1),
    "chair": (0.5, 0.5, 0.9),
    "table": (1.4, 0.8, 0.75),
    "sofa": (2.0, 0.9, 0.8),
    "bed": (2.0, 1.6, 0.5),
    "cabinet": (0.8, 0.45, 1.8),
    "shelf": (0.9, 0.3, 1.7),
    "desk": (1.3, 0.7, 0.73),
    "lamp": (0.25, 0.25, 1.5),
    "monitor": (0.6, 0.12, 0.4),
    "plant": (0.4, 0.4, 1.0),
    "pillow": (0.6, 0.4, 0.15),
    "curtain": (1.5, 0.05, 2.2),
    "sink": (0.55, 0.45, 0.2),
    "toilet": (0.4, 0.65, 0.75),
    "bathtub": (1.7, 0.75, 0.55),
    "refrigerator": (0.7, 0.7, 1.8),
    "oven": (0.6, 0.6, 0.85),
    "microwave": (0.5, 0.35, 0.3),
    "trash_bin": (0.3, 0.3, 0.45),
    "box": (0.4, 0.35, 0.3),
    "picture": (0.7, 0.03, 0.5),
    "cup": (0.09, 0.09, 0.12),
}

# Furniture the generator actually places (floor is added separately).
# The list deliberately spans several near-identical footprints
# (table/desk, cabinet/shelf/refrigerator, box/microwave/trash_bin) so
# per-frame geometry alone leaves residual class ambiguity.
DEFAULT_ACTIVE_CLASSES = (
    "chair", "table", "sofa", "bed", "cabinet", "shelf", "desk", "lamp",
    "monitor", "plant", "pillow", "sink", "toilet", "bathtub",
    "refrigerator", "oven", "microwave", "trash_bin", "box", "cup",
)

# Classes small enough to sit on top of something else.
STACKABLE_CLASSES = ("monitor", "plant", "pillow", "box", "cup", "lamp", "trash_bin")

SUPPORT_GAP = 0.02       # m, bottom face within this of a top face
ATTACH_GAP = 0.05        # m, lateral gap below this counts as attached
CLOSE_BY_DISTANCE = 1.0  # m, centroid distance


@dataclass(frozen=True)
class SyntheticSceneSpec:
    num_objects: int = 8
    frames_per_scene: int = 6
    points_per_instance: int = 320
    noise_std: float = 0.01
    room: tuple = (6.0, 6.0, 3.0)
    seed: int = 0
    active_classes: tuple = DEFAULT_ACTIVE_CLASSES
    size_jitter: float = 0.25
    stack_prob: float = 0.35
    attach_prob: float = 0.2
    label_space: LabelSpace = DEFAULT_LABEL_SPACE

    def validate(self):
        if self.num_objects < 2:
            raise ConfigError("need at least 2 objects for any relationship to exist")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.points_per_instance < 1:
            raise ConfigError("points_per_instance must be >= 1")
        if self.frames_per_scene < 1:
            raise ConfigError("frames_per_scene must be >= 1")
        for name in self.active_classes:
            if name not in self.label_space.object_classes:
                raise ConfigError(f"active class {name!r} not in the label space")
            if name not in CLASS_SIZES:
                raise ConfigError(f"no size model for class {name!r}")


@dataclass(frozen=True)
class SceneObject:
    instance_id: int
    class_index: int
    box: AxisAlignedBox


@dataclass(frozen=True)
class Scene:
    scene_id: str
    label_space: LabelSpace
    objects: tuple
    relations: tuple  # (src_instance_id, predicate_index, dst_instance_id)


@dataclass(frozen=True)
class FrameInstance:
    instance_id: int
    class_index: int
    points: np.ndarray  # (p, 3) f32
    relations: tuple    # (target_instance_id, predicate_index), targets visible in frame


@dataclass(frozen=True)
class FrameObservation:
    frame_index: int
    instances: tuple

    def __post_init__(self):
        ids = [inst.instance_id for inst in self.instances]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate instance ids in frame {self.frame_index}")


@dataclass(frozen=True)
class SceneSequence:
    scene_id: str
    label_space: LabelSpace
    frames: tuple


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _boxes_overlap(a: AxisAlignedBox, b: AxisAlignedBox) -> bool:
    return bool(np.all(a.min_corner < b.max_corner) and np.all(b.min_corner < a.max_corner))


def _xy_gap(a: AxisAlignedBox, b: AxisAlignedBox) -> float:
    gaps = np.maximum(
        0.0, np.maximum(a.min_corner[:2] - b.max_corner[:2], b.min_corner[:2] - a.max_corner[:2])
    )
    return float(np.hypot(gaps[0], gaps[1]))


def _z_overlap(a: AxisAlignedBox, b: AxisAlignedBox) -> bool:
    return bool(a.min_corner[2] < b.max_corner[2] and b.min_corner[2] < a.max_corner[2])


def derive_relations(objects, label_space: LabelSpace):
    """Apply the geometric predicate rules to final boxes.

    supported_by: bottom face within SUPPORT_GAP of a top face, overlapping
    footprints. attached_to (both directions): lateral gap in (0, ATTACH_GAP)
    with overlapping heights. close_by (both directions): centroid distance
    below CLOSE_BY_DISTANCE.
    """
    sup = label_space.predicate_index("supported_by")
    att = label_space.predicate_index("attached_to")
    clo = label_space.predicate_index("close_by")
    rels = []
    for a in objects:
        for b in objects:
            if a.instance_id == b.instance_id:
                continue
            ab, bb = a.box, b.box
            if abs(float(ab.min_corner[2] - bb.max_corner[2])) <= SUPPORT_GAP:
                lo = np.maximum(ab.min_corner[:2], bb.min_corner[:2])
                hi = np.minimum(ab.max_corner[:2], bb.max_corner[:2])
                if np.all(hi > lo):
                    rels.append((a.instance_id, sup, b.instance_id))
            gap = _xy_gap(ab, bb)
            if 0.0 < gap < ATTACH_GAP and _z_overlap(ab, bb):
                rels.append((a.instance_id, att, b.instance_id))
            if float(np.linalg.norm(ab.center - bb.center)) < CLOSE_BY_DISTANCE:
                rels.append((a.instance_id, clo, b.instance_id))
    return tuple(sorted(set(rels)))


def _jittered_size(rng, name: str, jitter: float) -> np.ndarray:
    nominal = np.array(CLASS_SIZES[name], dtype=np.float64)
    return nominal * (1.0 + rng.uniform(-jitter, jitter, size=3))


def generate_scene(spec: SyntheticSceneSpec, index: int = 0) -> Scene:
    """Place one floor slab plus spec.num_objects furniture boxes."""
    spec.validate()
    rng = stream_rng(spec.seed, "scene", index)
    rx, ry, _ = spec.room
    space = spec.label_space

    floor_box = AxisAlignedBox(np.array([0.0, 0.0, -0.1]), np.array([rx, ry, 0.0]))
    objects = [SceneObject(0, space.object_index("floor"), floor_box)]

    for i in range(1, spec.num_objects + 1):
        name = spec.active_classes[rng.integers(len(spec.active_classes))]
        size = _jittered_size(rng, name, spec.size_jitter)
        placed = None
        for _ in range(60):
            roll = rng.random()
            supports = [
                o for o in objects[1:]
                if o.box.extents[0] >= size[0] and o.box.extents[1] >= size[1]
                and o.box.max_corner[2] < 1.2
            ]
            if roll < spec.stack_prob and name in STACKABLE_CLASSES and supports:
                base = supports[rng.integers(len(supports))].box
                slack = base.extents[:2] - size[:2]
                corner = base.min_corner[:2] + rng.random(2) * slack
                z0 = float(base.max_corner[2]) + rng.uniform(0.0, SUPPORT_GAP * 0.75)
            elif roll < spec.stack_prob + spec.attach_prob and len(objects) > 1:
                nbr = objects[1 + rng.integers(len(objects) - 1)].box
                gap = rng.uniform(0.005, ATTACH_GAP - 0.005)
                side = rng.integers(4)
                if side == 0:
                    corner = np.array([nbr.max_corner[0] + gap,
                                       nbr.min_corner[1] + rng.uniform(-0.2, 0.2)])
                elif side == 1:
                    corner = np.array([nbr.min_corner[0] - gap - size[0],
                                       nbr.min_corner[1] + rng.uniform(-0.2, 0.2)])
                elif side == 2:
                    corner = np.array([nbr.min_corner[0] + rng.uniform(-0.2, 0.2),
                                       nbr.max_corner[1] + gap])
                else:
                    corner = np.array([nbr.min_corner[0] + rng.uniform(-0.2, 0.2),
                                       nbr.min_corner[1] - gap - size[1]])
                z0 = 0.0
            else:
                corner = rng.random(2) * (np.array([rx, ry]) - size[:2])
                z0 = 0.0
            if corner[0] < 0 or corner[1] < 0 or corner[0] + size[0] > rx or corner[1] + size[1] > ry:
                continue
            box = AxisAlignedBox(
                np.array([corner[0], corner[1], z0]),
                np.array([corner[0] + size[0], corner[1] + size[1], z0 + size[2]]),
            )
            if any(_boxes_overlap(box, o.box) for o in objects[1:]):
                continue
            placed = box
            break
        if placed is None:
            raise GenerationError(
                f"could not place object {i} ({name}) after 60 attempts; room too full"
            )
        objects.append(SceneObject(i, space.object_index(name), placed))

    return Scene(
        scene_id=f"scene_{spec.seed}_{index:04d}",
        label_space=space,
        objects=tuple(objects),
        relations=derive_relations(objects, space),
    )


# ---------------------------------------------------------------------------
# frame generation
# ---------------------------------------------------------------------------


def _surface_points(rng, box: AxisAlignedBox, count: int, noise_std: float) -> np.ndarray:
    e = np.maximum(box.extents, 1e-9)
    areas = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.random(count)
    v = rng.random(count)
    pts = np.empty((count, 3), dtype=np.float64)
    for axis in range(3):
        lo_face, hi_face = 2 * axis, 2 * axis + 1
        on_lo, on_hi = faces == lo_face, faces == hi_face
        others = [a for a in range(3) if a != axis]
        for sel, corner in ((on_lo, box.min_corner[axis]), (on_hi, box.max_corner[axis])):
            pts[sel, axis] = corner
            pts[sel, others[0]] = box.min_corner[others[0]] + u[sel] * e[others[0]]
            pts[sel, others[1]] = box.min_corner[others[1]] + v[sel] * e[others[1]]
    if noise_std > 0:
        pts = pts + rng.normal(0.0, noise_std, size=pts.shape)
    return pts.astype(np.float32)


def generate_frames(scene: Scene, spec: SyntheticSceneSpec, index: int = 0) -> SceneSequence:
    """Slide an x-axis window across the scene.

    Surface samples are clipped to the window, so objects at the window
    border are observed partially, with degraded geometry; overlapping
    windows make instances recur across consecutive frames. Every object
    is guaranteed to appear in at least one frame (its best window gets an
    unclipped sample if clipping starved it everywhere).
    """
    spec.validate()
    n_frames = spec.frames_per_scene
    lo = min(float(o.box.min_corner[0]) for o in scene.objects)
    hi = max(float(o.box.max_corner[0]) for o in scene.objects)
    if n_frames == 1:
        centers, width = [0.5 * (lo + hi)], (hi - lo) + 1.0
    else:
        step = (hi - lo) / (n_frames - 1)
        centers = [lo + k * step for k in range(n_frames)]
        width = 2.0 * step

    observed = {t: {} for t in range(n_frames)}  # frame -> {instance_id: points}
    for t, center in enumerate(centers):
        w_lo, w_hi = center - width / 2, center + width / 2
        for o in scene.objects:
            if float(o.box.min_corner[0]) > w_hi or float(o.box.max_corner[0]) < w_lo:
                continue
            rng = stream_rng(spec.seed, "frame_points", index, t, o.instance_id)
            pts = _surface_points(rng, o.box, spec.points_per_instance, spec.noise_std)
            inside = pts[(pts[:, 0] >= w_lo) & (pts[:, 0] <= w_hi)]
            if inside.shape[0]:
                observed[t][o.instance_id] = inside

    covered = set()
    for t in observed:
        covered.update(observed[t])
    for o in scene.objects:
        if o.instance_id in covered:
            continue
        best = min(range(n_frames), key=lambda t: abs(float(o.box.center[0]) - centers[t]))
        rng = stream_rng(spec.seed, "frame_points_full", index, best, o.instance_id)
        observed[best][o.instance_id] = _surface_points(
            rng, o.box, spec.points_per_instance, spec.noise_std)

    rel_by_src = {}
    for src, pred, dst in scene.relations:
        rel_by_src.setdefault(src, []).append((dst, pred))

    by_id = {o.instance_id: o for o in scene.objects}
    frames = []
    for t in range(n_frames):
        visible_ids = set(observed[t])
        instances = []
        for oid in sorted(observed[t]):
            o = by_id[oid]
            rels = tuple(
                (dst, pred) for dst, pred in sorted(rel_by_src.get(oid, []))
                if dst in visible_ids
            )
            instances.append(FrameInstance(oid, o.class_index, observed[t][oid], rels))
        frames.append(FrameObservation(frame_index=t, instances=tuple(instances)))

    return SceneSequence(scene_id=scene.scene_id, label_space=scene.label_space, frames=tuple(frames))


def generate_dataset(spec: SyntheticSceneSpec, num_scenes: int):
    """One SceneSequence per scene index, all from the same spec seed."""
    out = []
    for i in range(num_scenes):
        scene = generate_scene(spec, index=i)
        out.append(generate_frames(scene, spec, index=i))
    return out


# ---------------------------------------------------------------------------
# JSONL scene-sequence files
# ---------------------------------------------------------------------------


def _frame_to_json(frame: FrameObservation) -> dict:
    return {
        "type": "frame",
        "frame_index": frame.frame_index,
        "instances": [
            {
                "id": inst.instance_id,
                "class": inst.class_index,
                "points": [float(v) for v in inst.points.reshape(-1)],
                "relations": [[int(t), int(p)] for t, p in inst.relations],
            }
            for inst in frame.instances
        ],
    }


def write_scene_file(path, sequences):
    """Serialize scene sequences: one header line per scene, then its frames."""
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            header = {
                "type": "header",
                "scene_id": seq.scene_id,
                "object_classes": list(seq.label_space.object_classes),
                "predicate_classes": list(seq.label_space.predicate_classes),
            }
            f.write(json.dumps(header) + "\n")
            for frame in seq.frames:
                f.write(json.dumps(_frame_to_json(frame)) + "\n")


def read_scene_file(path):
    sequences = []
    scene_id = None
    space = None
    frames = []

    def flush():
        if scene_id is not None:
            sequences.append(SceneSequence(scene_id, space, tuple(frames)))

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: invalid JSON: {e}") from e
            kind = obj.get("type")
            if kind == "header":
                flush()
                scene_id = obj["scene_id"]
                space = LabelSpace(tuple(obj["object_classes"]), tuple(obj["predicate_classes"]))
                frames = []
            elif kind == "frame":
                if space is None:
                    raise DataError(f"{path}:{line_no}: frame before any header")
                if frames and obj["frame_index"] <= frames[-1].frame_index:
                    raise DataError(f"{path}:{line_no}: frame indices must strictly increase")
                instances = []
                for inst in obj["instances"]:
                    if not 0 <= inst["class"] < space.num_objects:
                        raise DataError(f"{path}:{line_no}: class index {inst['class']} out of range")
                    flat = np.asarray(inst["points"], dtype=np.float32)
                    if flat.size % 3 != 0:
                        raise DataError(f"{path}:{line_no}: point list length not a multiple of 3")
                    rels = []
                    for t, p in inst["relations"]:
                        if not 0 <= p < space.num_predicates:
                            raise DataError(f"{path}:{line_no}: predicate index {p} out of range")
                        rels.append((int(t), int(p)))
                    instances.append(FrameInstance(
                        instance_id=int(inst["id"]),
                        class_index=int(inst["class"]),
                        points=flat.reshape(-1, 3),
                        relations=tuple(rels),
                    ))
                frames.append(FrameObservation(int(obj["frame_index"]), tuple(instances)))
            else:
                raise DataError(f"{path}:{line_no}: unknown record type {kind!r}")
    flush()
    return sequences


# ---------------------------------------------------------------------------
# label embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: dict
    dim: int

    def lookup(self, name: str) -> np.ndarray:
        try:
            return self.vectors[name]
        except KeyError:
            raise DataError(f"no embedding for label {name!r}") from None


def pseudo_embedding(label: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm stand-in vector for a label."""
    if dim < 2:
        raise ConfigError(f"embedding dim must be >= 2, got {dim}")
    rng = stream_rng(seed, "pseudo_embedding", label)
    v = rng.standard_normal(dim)
    v = v / np.linalg.norm(v)
    return v.astype(np.float32)


def pseudo_embedding_table(object_classes, dim: int, seed: int) -> EmbeddingTable:
    return EmbeddingTable(
        vectors={name: pseudo_embedding(name, dim, seed) for name in object_classes},
        dim=dim,
    )


def load_embedding_table(path, object_classes) -> EmbeddingTable:
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            name, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError as e:
                raise DataError(f"{path}:{line_no}: bad float: {e}") from e
            if dim is None:
                dim = vec.size
                if dim < 2:
                    raise DataError(f"{path}:{line_no}: embedding dim must be >= 2")
            elif vec.size != dim:
                raise DataError(f"{path}:{line_no}: dimension {vec.size} != {dim}")
            vectors[name] = vec
    if dim is None:
        raise DataError(f"{path}: empty embedding table")
    for name in object_classes:
        if name not in vectors:
            raise DataError(f"embedding table {path} is missing class {name!r}")
    return EmbeddingTable(vectors=vectors, dim=dim)
