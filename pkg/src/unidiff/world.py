"""Deterministic shapes world.

A scene is at most three coloured shapes on a 4x4 grid of 16-pixel cells over
a 64x64 black canvas. Every object is drawn as a filled stencil in its palette
colour with a one-pixel gray outline; the outline keeps black objects visible
and makes shape/size discrimination exact for the verifier.

This module builds a :class:`TaskSample` for each task kind (prompt, input
image, input mask, target image, optional identity crop) and checks generated
images against the scene with :func:`verify`.
"""

from __future__ import annotations

import functools
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from unidiff import kernels
from unidiff.codec import from_uint8
from unidiff.text import COLORS, SHAPES

CANVAS = 64
GRID = 4
CELL = CANVAS // GRID
SIZES = ("small", "large")
KINDS = ("t2i", "inpaint", "outpaint", "edit", "depth", "pose", "seg", "layout", "id")
TASK_TOKEN = {
    "t2i": "<t2i>", "inpaint": "<t2i>", "outpaint": "<t2i>", "id": "<t2i>",
    "edit": "<ie>", "depth": "<depth>", "pose": "<pose>", "seg": "<seg>", "layout": "<lg>",
}
EDIT_OPS = ("add", "remove", "recolor", "move")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "above": (-1, 0), "below": (1, 0)}
LAYOUT_BLOCKS = ("blue", "green", "yellow")
COUNT_WORDS = {1: "a", 2: "two", 3: "three"}
WORD_COUNTS = {"a": 1, "one": 1, "two": 2, "three": 3}
N_GLYPHS = 64
GLYPH = 16

PALETTE_U8 = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
}
OUTLINE_U8 = (128, 128, 128)
# classification targets for generated pixels: the palette plus the outline gray
LABEL_COLORS = from_uint8(np.array([PALETTE_U8[c] for c in COLORS] + [OUTLINE_U8], dtype=np.uint8))
GRAY_LABEL = len(COLORS)
BACKGROUND = from_uint8(np.zeros(3, dtype=np.uint8))


class SceneError(ValueError):
    pass


class AmbiguousReferentError(ValueError):
    pass


# -- scenes ---------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]
    size: str = "large"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise SceneError(f"unknown color {self.color!r}")
        if self.size not in SIZES:
            raise SceneError(f"unknown size {self.size!r}")
        r, c = self.cell
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise SceneError(f"cell {self.cell} outside the {GRID}x{GRID} grid")
        object.__setattr__(self, "cell", (int(r), int(c)))

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "cell": list(self.cell), "size": self.size}


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        objects = tuple(self.objects)
        object.__setattr__(self, "objects", objects)
        if len(objects) > 3:
            raise SceneError(f"at most 3 objects per scene, got {len(objects)}")
        cells = [o.cell for o in objects]
        if len(set(cells)) != len(cells):
            raise SceneError("two objects share a cell")

    @property
    def occupied(self) -> set[tuple[int, int]]:
        return {o.cell for o in self.objects}

    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(GRID) for c in range(GRID) if (r, c) not in self.occupied]

    def to_dict(self) -> dict:
        return {"objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        return cls(tuple(SceneObject(o["shape"], o["color"], tuple(o["cell"]), o["size"]) for o in data["objects"]))


def heldout(scene: Scene, extra: tuple = ()) -> bool:
    """Stable 10% split of scenes reserved for evaluation; ``extra`` extends the key (glyph, slot)."""
    key = repr((sorted((o.shape, o.color, o.cell, o.size) for o in scene.objects), extra)).encode()
    return zlib.crc32(key) % 10 == 0


# -- stencils and rendering -------------------------------------------------------

def _fill_mask(shape: str, size: str) -> np.ndarray:
    radius = 6.0 if size == "large" else 3.5
    y, x = np.mgrid[0:CELL, 0:CELL].astype(np.float64)
    dy, dx = y - (CELL - 1) / 2, x - (CELL - 1) / 2
    inside = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "circle":
        return dx * dx + dy * dy <= (radius + 0.3) ** 2
    if shape == "square":
        return inside
    if shape == "triangle":
        return inside & (np.abs(dx) <= (dy + radius) / 2 + 0.5)
    if shape == "cross":
        arm = radius / 3
        return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    raise SceneError(f"unknown shape {shape!r}")


def _dilate(mask: np.ndarray) -> np.ndarray:
    padded = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for oy in range(3):
        for ox in range(3):
            out |= padded[oy:oy + mask.shape[0], ox:ox + mask.shape[1]]
    return out


@functools.lru_cache(maxsize=None)
def stencils() -> tuple[tuple[tuple[str, str], ...], np.ndarray, np.ndarray]:
    """All ``(shape, size)`` keys with their fill and outline masks, ``(8, 16, 16)`` each."""
    keys, fills, outlines = [], [], []
    for shape in SHAPES:
        for size in SIZES:
            fill = _fill_mask(shape, size)
            keys.append((shape, size))
            fills.append(fill)
            outlines.append(_dilate(fill) & ~fill)
    fills_arr, outlines_arr = np.array(fills), np.array(outlines)
    fills_arr.setflags(write=False)
    outlines_arr.setflags(write=False)
    return tuple(keys), fills_arr, outlines_arr


def object_mask(obj: SceneObject, part: str = "all") -> np.ndarray:
    """Canvas-sized boolean mask of an object's fill, outline, or both."""
    keys, fills, outlines = stencils()
    k = keys.index((obj.shape, obj.size))
    local = {"fill": fills[k], "outline": outlines[k], "all": fills[k] | outlines[k]}[part]
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    r, c = obj.cell
    mask[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL] = local
    return mask


def _render_u8(scene: Scene) -> np.ndarray:
    canvas = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    for obj in scene.objects:
        canvas[object_mask(obj, "outline")] = OUTLINE_U8
        canvas[object_mask(obj, "fill")] = PALETTE_U8[obj.color]
    return canvas


def render(scene: Scene) -> np.ndarray:
    return from_uint8(_render_u8(scene))


def cell_slice(cell: tuple[int, int]) -> tuple[slice, slice]:
    r, c = cell
    return slice(r * CELL, (r + 1) * CELL), slice(c * CELL, (c + 1) * CELL)


# -- identity glyphs --------------------------------------------------------------

def _glyph_candidates(rng: np.random.Generator) -> np.ndarray:
    pattern = rng.integers(0, 2, size=(8, 8)).astype(bool)
    colors = [c for c in COLORS if c != "black"]
    fg, bg = rng.choice(len(colors), size=2, replace=False)
    tile = np.where(pattern[..., None], PALETTE_U8[colors[fg]], PALETTE_U8[colors[bg]]).astype(np.uint8)
    return from_uint8(np.kron(tile, np.ones((2, 2, 1), dtype=np.uint8)))


@functools.lru_cache(maxsize=1)
def glyph_library(aligned_limit: float = 0.8, shifted_limit: float = 0.45) -> np.ndarray:
    """64 deterministic 16x16 two-colour glyphs.

    Candidates are rejected until every pair has aligned NCC below
    ``aligned_limit`` and the best NCC of one glyph anywhere over the other
    (on a black canvas) stays below ``shifted_limit``.
    """
    rng = np.random.default_rng(20250101)
    pad = GLYPH - 1
    accepted: list[np.ndarray] = []
    canvases: list[np.ndarray] = []
    while len(accepted) < N_GLYPHS:
        glyph = _glyph_candidates(rng)
        flat = glyph.reshape(-1) - glyph.mean()
        ok = True
        canvas = np.full((GLYPH + 2 * pad, GLYPH + 2 * pad, 3), BACKGROUND, dtype=np.float32)
        canvas[pad:pad + GLYPH, pad:pad + GLYPH] = glyph
        for other, other_canvas in zip(accepted, canvases):
            o = other.reshape(-1) - other.mean()
            aligned = float(flat @ o / (np.linalg.norm(flat) * np.linalg.norm(o)))
            if aligned >= aligned_limit:
                ok = False
                break
            if kernels.ncc_map(other_canvas, glyph).max() >= shifted_limit:
                ok = False
                break
        if ok:
            accepted.append(glyph)
            canvases.append(canvas)
    lib = np.stack(accepted).astype(np.float32)
    lib.setflags(write=False)
    return lib


def glyph(glyph_id: int) -> np.ndarray:
    if not 0 <= glyph_id < N_GLYPHS:
        raise ValueError(f"unknown glyph id {glyph_id}; library has {N_GLYPHS}")
    return glyph_library()[glyph_id].copy()


# -- descriptions -------------------------------------------------------------------

def group_objects(scene: Scene) -> list[tuple[str, str, int]]:
    """``(color, shape, count)`` groups in order of first appearance."""
    groups: dict[tuple[str, str], int] = {}
    for o in scene.objects:
        groups[(o.color, o.shape)] = groups.get((o.color, o.shape), 0) + 1
    return [(color, shape, n) for (color, shape), n in groups.items()]


def relation(a: tuple[int, int], b: tuple[int, int]) -> str:
    """Relation phrase of cell ``a`` with respect to cell ``b``."""
    dr, dc = b[0] - a[0], b[1] - a[1]
    if abs(dc) >= abs(dr):
        return "left of" if dc > 0 else "right of"
    return "above" if dr > 0 else "below"


def relation_holds(rel: str, a: tuple[int, int], b: tuple[int, int]) -> bool:
    return {
        "left of": a[1] < b[1],
        "right of": a[1] > b[1],
        "above": a[0] < b[0],
        "below": a[0] > b[0],
    }[rel]


def describe(scene: Scene) -> str:
    groups = group_objects(scene)
    if len(groups) == 2 and len(scene.objects) == 2:
        a, b = scene.objects
        return f"a {a.color} {a.shape} {relation(a.cell, b.cell)} a {b.color} {b.shape}"
    return " and ".join(f"{COUNT_WORDS[n]} {color} {shape}" for color, shape, n in groups)


@dataclass(frozen=True)
class Description:
    groups: tuple[tuple[str, str, int], ...]
    relation: str | None = None


def parse_description(text: str) -> Description:
    words = text.split()
    groups: list[tuple[str, str, int]] = []
    rel = None
    i = 0
    while i < len(words):
        if len(words) - i < 3 or words[i] not in WORD_COUNTS:
            raise ValueError(f"cannot parse description at {' '.join(words[i:])!r}")
        count, color, shape = WORD_COUNTS[words[i]], words[i + 1], words[i + 2]
        if color not in COLORS or shape not in SHAPES:
            raise ValueError(f"bad phrase {' '.join(words[i:i + 3])!r}")
        groups.append((color, shape, count))
        i += 3
        if i == len(words):
            break
        if words[i] == "and":
            i += 1
        elif words[i] in ("left", "right") and i + 1 < len(words) and words[i + 1] == "of":
            rel = f"{words[i]} of"
            i += 2
        elif words[i] in ("above", "below"):
            rel = words[i]
            i += 1
        else:
            raise ValueError(f"unexpected word {words[i]!r}")
    return Description(tuple(groups), rel)


# -- task samples -------------------------------------------------------------------

@dataclass
class TaskSample:
    kind: str
    prompt: str
    input_image: np.ndarray
    input_mask: np.ndarray
    target_image: np.ndarray
    scene: Scene
    external: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def _black() -> np.ndarray:
    return render(Scene())


def _ones() -> np.ndarray:
    return np.ones((CANVAS, CANVAS), dtype=np.float32)


def _prompt(token: str, text: str) -> str:
    return f"{token} {text}".strip()


def make_t2i(scene: Scene) -> TaskSample:
    return TaskSample("t2i", _prompt("<t2i>", describe(scene)), _black(), _ones(), render(scene), scene)


def _region_mask(region: tuple[int, int, int, int]) -> np.ndarray:
    r0, c0, r1, c1 = region
    if not (0 <= r0 < r1 <= GRID and 0 <= c0 < c1 <= GRID):
        raise SceneError(f"region {region} is not a cell rectangle inside the canvas")
    mask = np.zeros((CANVAS, CANVAS), dtype=np.float32)
    mask[r0 * CELL:r1 * CELL, c0 * CELL:c1 * CELL] = 1.0
    return mask


def make_inpaint(scene: Scene, region: tuple[int, int, int, int], guided: bool = True) -> TaskSample:
    """Blank out a cell rectangle; the mask marks it for generation."""
    mask = _region_mask(region)
    target = render(scene)
    image = np.where(mask[..., None] > 0, BACKGROUND, target).astype(np.float32)
    prompt = _prompt("<t2i>", describe(scene)) if guided else ""
    return TaskSample("inpaint", prompt, image, mask, target, scene, meta={"region": tuple(region), "guided": guided})


def make_outpaint(scene: Scene, region: tuple[int, int, int, int], guided: bool = True) -> TaskSample:
    """Keep only the cell rectangle ``region``; everything else is generated."""
    mask = 1.0 - _region_mask(region)
    target = render(scene)
    image = np.where(mask[..., None] > 0, BACKGROUND, target).astype(np.float32)
    prompt = _prompt("<t2i>", describe(scene)) if guided else ""
    return TaskSample("outpaint", prompt, image, mask.astype(np.float32), target, scene,
                      meta={"region": tuple(region), "guided": guided})


def referent(scene: Scene, index: int) -> str:
    obj = scene.objects[index]
    same_shape = [o for o in scene.objects if o.shape == obj.shape]
    if len(same_shape) == 1:
        return obj.shape
    same = [o for o in same_shape if o.color == obj.color]
    if len(same) == 1:
        return f"{obj.color} {obj.shape}"
    raise AmbiguousReferentError(f"no unique referent for object {index} in {scene}")


@dataclass(frozen=True)
class Edit:
    op: str
    index: int | None = None
    color: str | None = None
    direction: str | None = None
    new_object: SceneObject | None = None

    def to_dict(self) -> dict:
        return {
            "op": self.op, "index": self.index, "color": self.color, "direction": self.direction,
            "new_object": self.new_object.to_dict() if self.new_object else None,
        }


def apply_edit(scene: Scene, edit: Edit) -> Scene:
    objs = list(scene.objects)
    if edit.op == "add":
        if edit.new_object is None:
            raise SceneError("add needs new_object")
        if edit.new_object.cell in scene.occupied:
            raise SceneError(f"cell {edit.new_object.cell} is occupied")
        return Scene(tuple(objs + [edit.new_object]))
    if edit.index is None or not 0 <= edit.index < len(objs):
        raise SceneError(f"{edit.op} needs a valid object index")
    obj = objs[edit.index]
    if edit.op == "remove":
        del objs[edit.index]
    elif edit.op == "recolor":
        if edit.color not in COLORS:
            raise SceneError(f"unknown color {edit.color!r}")
        objs[edit.index] = replace(obj, color=edit.color)
    elif edit.op == "move":
        if edit.direction not in DIRECTIONS:
            raise SceneError(f"unknown direction {edit.direction!r}")
        dr, dc = DIRECTIONS[edit.direction]
        cell = (obj.cell[0] + dr, obj.cell[1] + dc)
        if cell in scene.occupied or not (0 <= cell[0] < GRID and 0 <= cell[1] < GRID):
            raise SceneError(f"cannot move to {cell}")
        objs[edit.index] = replace(obj, cell=cell)
    else:
        raise SceneError(f"unknown edit op {edit.op!r}")
    return Scene(tuple(objs))


def edit_instruction(scene: Scene, edit: Edit) -> str:
    if edit.op == "add":
        o = edit.new_object
        return f"<ie> add a {o.color} {o.shape}"
    ref = referent(scene, edit.index)
    if edit.op == "remove":
        return f"<ie> remove the {ref}"
    if edit.op == "recolor":
        return f"<ie> recolor the {ref} to {edit.color}"
    if edit.op == "move":
        return f"<ie> move the {ref} {edit.direction}"
    raise SceneError(f"unknown edit op {edit.op!r}")


def make_edit(scene: Scene, edit: Edit) -> TaskSample:
    prompt = edit_instruction(scene, edit)
    edited = apply_edit(scene, edit)
    return TaskSample("edit", prompt, render(scene), _ones(), render(edited), scene,
                      meta={"edit": edit, "edited": edited})


def depth_level(row: int, size: str) -> int:
    """1..8; large beats small, and lower rows are closer (brighter)."""
    return 1 + row + (GRID if size == "large" else 0)


def depth_intensity(row: int, size: str) -> int:
    return 32 * depth_level(row, size) - 1


def make_depth(scene: Scene) -> TaskSample:
    canvas = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    for obj in scene.objects:
        canvas[object_mask(obj)] = depth_intensity(obj.cell[0], obj.size)
    return TaskSample("depth", "<depth>", render(scene), _ones(), from_uint8(canvas), scene)


def pose_marker(cell: tuple[int, int]) -> np.ndarray:
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    ys, xs = cell_slice(cell)
    local = np.zeros((CELL, CELL), dtype=bool)
    local[4:12, 7:9] = True
    local[7:9, 4:12] = True
    mask[ys, xs] = local
    return mask


def make_pose(scene: Scene) -> TaskSample:
    canvas = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    for obj in scene.objects:
        canvas[pose_marker(obj.cell)] = PALETTE_U8["white"]
    return TaskSample("pose", "<pose>", render(scene), _ones(), from_uint8(canvas), scene)


def seg_region(scene: Scene, target: str) -> np.ndarray:
    if target == "background":
        mask = np.ones((CANVAS, CANVAS), dtype=bool)
        for obj in scene.objects:
            mask &= ~object_mask(obj)
        return mask
    matches = [o for o in scene.objects if o.shape == target]
    if len(matches) != 1:
        raise AmbiguousReferentError(f"segmentation target {target!r} matches {len(matches)} objects")
    return object_mask(matches[0])


def make_seg(scene: Scene, target: str, color: str) -> TaskSample:
    if color not in COLORS:
        raise SceneError(f"unknown color {color!r}")
    region = seg_region(scene, target)
    pixels = _render_u8(scene)
    pixels[region] = PALETTE_U8[color]
    return TaskSample("seg", f"<seg> {target} : {color}", render(scene), _ones(), from_uint8(pixels), scene,
                      meta={"target": target, "color": color})


def make_layout(scene: Scene) -> TaskSample:
    if len(scene.objects) > len(LAYOUT_BLOCKS):
        raise SceneError(f"layout supports at most {len(LAYOUT_BLOCKS)} objects")
    pixels = np.zeros((CANVAS, CANVAS, 3), dtype=np.uint8)
    clauses = []
    for obj, block in zip(scene.objects, LAYOUT_BLOCKS):
        pixels[cell_slice(obj.cell)] = PALETTE_U8[block]
        clauses.append(f"{obj.shape} in {block} block")
    prompt = " ".join(["<lg>", describe(scene)] + clauses).replace("  ", " ").strip()
    return TaskSample("layout", prompt, from_uint8(pixels), _ones(), render(scene), scene,
                      meta={"blocks": LAYOUT_BLOCKS[: len(scene.objects)]})


def make_id(glyph_id: int, scene: Scene, slot: tuple[int, int]) -> TaskSample:
    tile = glyph(glyph_id)
    if tuple(slot) in scene.occupied:
        raise SceneError(f"identity slot {slot} is occupied")
    target = render(scene)
    target[cell_slice(tuple(slot))] = tile
    prompt = _prompt("<t2i> <p> <p> <p> <p>", describe(scene))
    return TaskSample("id", prompt, _black(), _ones(), target, scene, external=tile,
                      meta={"glyph": glyph_id, "slot": tuple(slot)})


# -- random generators ----------------------------------------------------------------

SCENE_CATEGORIES = ("single_object", "color", "two_object", "counting", "position")


def _random_object(rng: np.random.Generator, cell, shape=None, color=None) -> SceneObject:
    return SceneObject(
        shape if shape is not None else SHAPES[rng.integers(len(SHAPES))],
        color if color is not None else COLORS[rng.integers(len(COLORS))],
        cell,
        SIZES[rng.integers(2)],
    )


def random_scene(rng: np.random.Generator, n_objects: int | None = None, category: str | None = None) -> Scene:
    if category is None:
        n = int(rng.integers(1, 4)) if n_objects is None else n_objects
        cells = rng.choice(GRID * GRID, size=n, replace=False)
        return Scene(tuple(_random_object(rng, divmod(int(c), GRID)) for c in cells))
    if category == "single_object":
        return random_scene(rng, 1)
    if category == "counting":
        n = int(rng.integers(2, 4))
        shape, color = SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))]
        cells = rng.choice(GRID * GRID, size=n, replace=False)
        return Scene(tuple(_random_object(rng, divmod(int(c), GRID), shape, color) for c in cells))
    cells = [divmod(int(c), GRID) for c in rng.choice(GRID * GRID, size=2, replace=False)]
    if category == "color":
        shape = SHAPES[rng.integers(len(SHAPES))]
        c1, c2 = rng.choice(len(COLORS), size=2, replace=False)
        return Scene((_random_object(rng, cells[0], shape, COLORS[c1]), _random_object(rng, cells[1], shape, COLORS[c2])))
    if category == "two_object":
        s1, s2 = rng.choice(len(SHAPES), size=2, replace=False)
        return Scene((_random_object(rng, cells[0], SHAPES[s1]), _random_object(rng, cells[1], SHAPES[s2])))
    if category == "position":
        while True:
            scene = Scene((_random_object(rng, cells[0]), _random_object(rng, cells[1])))
            if len(group_objects(scene)) == 2:
                return scene
    raise ValueError(f"unknown scene category {category!r}")


def _training_scene(rng, heldout_split: bool, **kw) -> Scene:
    while True:
        scene = random_scene(rng, **kw)
        if heldout(scene) == heldout_split:
            return scene


def random_region(rng: np.random.Generator) -> tuple[int, int, int, int]:
    while True:
        r0, r1 = sorted(int(v) for v in rng.choice(GRID + 1, size=2, replace=False))
        c0, c1 = sorted(int(v) for v in rng.choice(GRID + 1, size=2, replace=False))
        if (r1 - r0) * (c1 - c0) < GRID * GRID:
            return r0, c0, r1, c1


def random_edit(scene: Scene, rng: np.random.Generator) -> Edit | None:
    options: list[Edit] = []
    free = scene.free_cells()
    if len(scene.objects) < 3 and free:
        cell = free[rng.integers(len(free))]
        options.append(Edit("add", new_object=_random_object(rng, cell)))
    for i, obj in enumerate(scene.objects):
        try:
            referent(scene, i)
        except AmbiguousReferentError:
            continue
        options.append(Edit("remove", index=i))
        others = [c for c in COLORS if c != obj.color]
        options.append(Edit("recolor", index=i, color=others[rng.integers(len(others))]))
        for name, (dr, dc) in DIRECTIONS.items():
            cell = (obj.cell[0] + dr, obj.cell[1] + dc)
            if 0 <= cell[0] < GRID and 0 <= cell[1] < GRID and cell not in scene.occupied:
                options.append(Edit("move", index=i, direction=name))
    if not options:
        return None
    # choose the op uniformly first so "move" does not dominate
    ops = sorted({e.op for e in options}, key=EDIT_OPS.index)
    op = ops[rng.integers(len(ops))]
    pool = [e for e in options if e.op == op]
    return pool[rng.integers(len(pool))]


def random_sample(kind: str, rng: np.random.Generator, heldout_split: bool = False) -> TaskSample:
    """Draw one sample of ``kind`` from the training (or held-out) scene split."""
    if kind == "t2i":
        return make_t2i(_training_scene(rng, heldout_split))
    if kind in ("inpaint", "outpaint"):
        scene = _training_scene(rng, heldout_split)
        guided = bool(rng.integers(2))
        maker = make_inpaint if kind == "inpaint" else make_outpaint
        return maker(scene, random_region(rng), guided)
    if kind == "edit":
        while True:
            scene = _training_scene(rng, heldout_split)
            edit = random_edit(scene, rng)
            if edit is not None:
                return make_edit(scene, edit)
    if kind == "depth":
        return make_depth(_training_scene(rng, heldout_split))
    if kind == "pose":
        return make_pose(_training_scene(rng, heldout_split))
    if kind == "seg":
        scene = _training_scene(rng, heldout_split)
        unique = [o.shape for o in scene.objects if sum(p.shape == o.shape for p in scene.objects) == 1]
        targets = unique + ["background"]
        target = targets[rng.integers(len(targets))]
        return make_seg(scene, target, COLORS[rng.integers(len(COLORS))])
    if kind == "layout":
        return make_layout(_training_scene(rng, heldout_split))
    if kind == "id":
        while True:
            scene = random_scene(rng, n_objects=int(rng.integers(0, 3)))
            free = scene.free_cells()
            slot = free[rng.integers(len(free))]
            glyph_id = int(rng.integers(N_GLYPHS))
            if heldout(scene, (glyph_id, slot)) == heldout_split:
                return make_id(glyph_id, scene, slot)
    raise ValueError(f"unknown task kind {kind!r}")


# -- verification --------------------------------------------------------------------

@dataclass(frozen=True)
class VerifyThresholds:
    match: float = 0.7
    rmse: float = 0.08
    correlation: float = 0.6
    agreement: float = 0.9
    pixel_tol: float = 0.125


@dataclass(frozen=True)
class Detection:
    shape: str
    color: str
    cell: tuple[int, int]
    size: str
    score: float


@dataclass
class VerificationReport:
    passed: bool
    checks: dict[str, bool]
    scores: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_checks(cls, checks: dict[str, bool], scores: dict[str, float]) -> "VerificationReport":
        return cls(all(checks.values()), checks, scores)


def label_image(image: np.ndarray) -> np.ndarray:
    return kernels.nearest_color(np.asarray(image, dtype=np.float32), LABEL_COLORS)


def cell_scores(image: np.ndarray) -> np.ndarray:
    """Match score of every ``(shape, size, color)`` candidate in every cell.

    Score = min(fraction of fill pixels labelled with the colour, fraction of
    outline pixels labelled gray). Shape ``(GRID, GRID, 8 stencils, 8 colors)``.
    """
    keys, fills, outlines = stencils()
    labels = label_image(image)
    all_stencils = np.concatenate([fills, outlines])
    counts = kernels.stencil_counts(labels, all_stencils, CELL, len(LABEL_COLORS))
    n = len(keys)
    fill_frac = counts[:, :, :n, : len(COLORS)] / fills.reshape(n, -1).sum(axis=1)[None, None, :, None]
    outline_frac = counts[:, :, n:, GRAY_LABEL] / outlines.reshape(n, -1).sum(axis=1)[None, None, :]
    return np.minimum(fill_frac, outline_frac[..., None])


def detect_objects(image: np.ndarray, threshold: float = 0.7) -> list[Detection]:
    keys, _, _ = stencils()
    scores = cell_scores(image)
    found = []
    for r in range(GRID):
        for c in range(GRID):
            flat = scores[r, c].reshape(-1)
            best = int(np.argmax(flat))
            if flat[best] >= threshold:
                k, color = divmod(best, len(COLORS))
                shape, size = keys[k]
                found.append(Detection(shape, COLORS[color], (r, c), size, float(flat[best])))
    return found


def _object_checks(desc: Description, scene: Scene | None, found: list[Detection]) -> dict[str, bool]:
    checks = {}
    shapes_found = {d.shape for d in found}
    checks["presence"] = all(shape in shapes_found for _, shape, _ in desc.groups)
    color_ok = True
    for color, shape, _ in desc.groups:
        same_shape = [d for d in found if d.shape == shape]
        if same_shape and not any(d.color == color for d in same_shape):
            color_ok = False
    checks["color"] = color_ok
    if any(n >= 2 for _, _, n in desc.groups):
        expected: dict[str, int] = {}
        for _, shape, n in desc.groups:
            expected[shape] = expected.get(shape, 0) + n
        checks["count"] = all(sum(d.shape == s for d in found) == n for s, n in expected.items())
    if desc.relation is not None:
        (c1, s1, _), (c2, s2, _) = desc.groups
        first = [d for d in found if (d.color, d.shape) == (c1, s1)]
        second = [d for d in found if (d.color, d.shape) == (c2, s2)]
        if first and second:
            checks["position"] = any(relation_holds(desc.relation, a.cell, b.cell) for a in first for b in second)
        else:
            checks["position"] = True
    return checks


def _masked_rmse(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    diff = (np.asarray(a, np.float64) - np.asarray(b, np.float64))[mask]
    return float(np.sqrt(np.mean(diff * diff)))


def pixel_agreement(generated: np.ndarray, target: np.ndarray, reference: np.ndarray, tol: float) -> float:
    """Fraction of agreeing pixels over those that differ from ``reference`` in either image.

    Restricting to informative pixels keeps a blank or copied output from
    scoring well just because most of the canvas is background.
    """
    generated = np.asarray(generated, np.float64)
    target = np.asarray(target, np.float64)
    reference = np.asarray(reference, np.float64)
    support = (np.abs(target - reference).max(axis=-1) > tol) | (np.abs(generated - reference).max(axis=-1) > tol)
    if not support.any():
        return 1.0
    agree = np.abs(generated - target).max(axis=-1) <= tol
    return float(agree[support].mean())


def untouched_mask(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Pixels of grid cells that an edit leaves unchanged."""
    mask = np.zeros((CANVAS, CANVAS), dtype=bool)
    for r in range(GRID):
        for c in range(GRID):
            ys, xs = cell_slice((r, c))
            if np.array_equal(source[ys, xs], target[ys, xs]):
                mask[ys, xs] = True
    return mask


def max_correlation(image: np.ndarray, template: np.ndarray) -> float:
    return float(kernels.ncc_map(image, template).max())


def _instruction_check(sample: TaskSample, found: list[Detection]) -> bool:
    edit: Edit = sample.meta["edit"]
    by_cell = {d.cell: d for d in found}
    scene = sample.scene
    if edit.op == "add":
        o = edit.new_object
        return any(d.cell not in scene.occupied and (d.shape, d.color) == (o.shape, o.color) for d in found)
    obj = scene.objects[edit.index]
    if edit.op == "remove":
        return obj.cell not in by_cell
    if edit.op == "recolor":
        d = by_cell.get(obj.cell)
        return d is not None and d.shape == obj.shape and d.color == edit.color
    if edit.op == "move":
        dr, dc = DIRECTIONS[edit.direction]
        new = (obj.cell[0] + dr, obj.cell[1] + dc)
        d = by_cell.get(new)
        return obj.cell not in by_cell and d is not None and (d.shape, d.color) == (obj.shape, obj.color)
    raise SceneError(f"unknown edit op {edit.op!r}")


def verify(kind: str, sample: TaskSample, generated: np.ndarray,
           thresholds: VerifyThresholds = VerifyThresholds()) -> VerificationReport:
    generated = np.asarray(generated, dtype=np.float32)
    if generated.shape != sample.target_image.shape:
        raise ValueError(f"generated shape {generated.shape} != target shape {sample.target_image.shape}")
    checks: dict[str, bool] = {}
    scores: dict[str, float] = {}
    scene_desc = parse_description(describe(sample.scene))

    if kind in ("t2i", "id", "inpaint", "outpaint", "layout", "edit"):
        found = detect_objects(generated, thresholds.match)

    if kind == "t2i":
        checks.update(_object_checks(scene_desc, sample.scene, found))
    elif kind in ("inpaint", "outpaint"):
        known = sample.input_mask < 0.5
        rmse = _masked_rmse(generated, sample.input_image, known)
        scores["preservation_rmse"] = rmse
        checks["preservation"] = rmse <= thresholds.rmse
        if sample.meta.get("guided", True):
            checks.update(_object_checks(scene_desc, sample.scene, found))
    elif kind == "edit":
        keep = untouched_mask(sample.input_image, sample.target_image)
        rmse = _masked_rmse(generated, sample.input_image, keep)
        scores["preservation_rmse"] = rmse
        checks["instruction"] = _instruction_check(sample, found)
        checks["preservation"] = rmse <= thresholds.rmse
    elif kind in ("depth", "pose", "seg"):
        reference = sample.input_image if kind == "seg" else _black()
        agreement = pixel_agreement(generated, sample.target_image, reference, thresholds.pixel_tol)
        scores["agreement"] = agreement
        checks["agreement"] = agreement >= thresholds.agreement
    elif kind == "layout":
        checks.update({k: v for k, v in _object_checks(scene_desc, sample.scene, found).items()
                       if k in ("presence", "color")})
        checks["cell"] = all(
            any(d.cell == o.cell and d.shape == o.shape for d in found) for o in sample.scene.objects
        )
    elif kind == "id":
        corr = max_correlation(generated, sample.external)
        scores["correlation"] = corr
        checks["identity"] = corr >= thresholds.correlation
        checks.update(_object_checks(scene_desc, sample.scene, found))
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    return VerificationReport.from_checks(checks, scores)


def sample_record(sample: TaskSample) -> dict:
    """JSON-able description of a sample, minus the pixel arrays."""
    meta = {}
    for k, v in sample.meta.items():
        if isinstance(v, Edit):
            meta[k] = v.to_dict()
        elif isinstance(v, Scene):
            meta[k] = v.to_dict()
        elif isinstance(v, tuple):
            meta[k] = list(v)
        else:
            meta[k] = v
    return {"kind": sample.kind, "prompt": sample.prompt, "scene": sample.scene.to_dict(), "meta": meta}


def single_object_scenes() -> Iterable[Scene]:
    """All 4 shapes x 8 colors x 16 cells x 2 sizes single-object scenes."""
    for shape in SHAPES:
        for color in COLORS:
            for r in range(GRID):
                for c in range(GRID):
                    for size in SIZES:
                        yield Scene((SceneObject(shape, color, (r, c), size),))


def task_kinds() -> Sequence[str]:
    return KINDS
