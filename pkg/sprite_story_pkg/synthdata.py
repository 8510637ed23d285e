"""Procedural sprite scenes with exact segmentation masks, pose keypoints and captions.

A scene shows one or two sprite characters on a textured background. The identity
palette controls the face (skin hue, hair colour, eye geometry) and the clothing
palette controls the torso texture, so both are independent ground-truth labels.
Masks are exact by construction: every pixel belongs to exactly one region, index
0 being the background and index ``k`` the ``k``-th character.

Everything here is a pure function of ``(spec, seed)``.
"""
import os
import json
import colorsys
import functools
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from safetensors.numpy import load_file, save_file

from .encoders import PAD_ID, rasterize_pose
from .errors import CheckpointError, ValidationError

DATASET_FORMAT_VERSION = 1
LATENT_FACTOR = 8
FACE_CROP_SIZE = 16
BODY_CROP_SIZE = 32
SCENE_CACHE_SIZE = 256

IDENTITY_PALETTE_SIZE = 24
TRAIN_IDENTITIES = tuple(range(16))
HELDOUT_IDENTITIES = tuple(range(16, 24))
CLOTHING_PALETTE_SIZE = 8
BACKGROUND_PALETTE_SIZE = 8
CAPTION_TEMPLATE_COUNT = 4
MAX_CAPTION_LEN = 8

KEYPOINT_NAMES = ("head", "neck", "hip", "left_hand", "right_hand", "left_foot", "right_foot")
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

VOCAB = (
    "<pad>", "a", "the", "in", "at", "on", "with", "and",
    "one", "two", "sprite", "sprites",
    "standing", "waving", "cheering", "walking", "running", "sitting", "dancing", "jumping",
    "meadow", "desert", "ocean", "forest", "snow", "night", "city", "cave",
    "red", "orange", "yellow", "green", "blue", "purple", "pink", "gray",
    "plain", "striped", "checked", "dotted",
    "shirt", "wearing", "friends", "together", "near", "under", "sky", "sun",
    "moon", "rain", "tree", "house", "river", "morning", "evening", "happy",
    "tired", "small", "big", "left", "right", "story", "day", "of",
)
WORD_TO_ID = {word: index for index, word in enumerate(VOCAB)}

BACKGROUND_NAMES = ("meadow", "desert", "ocean", "forest", "snow", "night", "city", "cave")
BACKGROUND_COLORS = (
    (120, 200, 110), (230, 200, 130), (70, 130, 200), (40, 110, 60),
    (235, 240, 250), (30, 30, 70), (150, 150, 160), (90, 70, 60),
)
CLOTHING_NAMES = ("red", "orange", "yellow", "green", "blue", "purple", "pink", "gray")
CLOTHING_COLORS = (
    (210, 40, 40), (240, 140, 30), (240, 220, 40), (40, 170, 60),
    (40, 80, 220), (140, 50, 180), (240, 120, 180), (120, 120, 120),
)
PATTERN_NAMES = ("plain", "striped", "checked", "dotted")
PATTERN_SECONDARY = (245, 245, 245)
PANTS_COLOR = (50, 50, 70)
EYE_COLOR = (10, 10, 10)


def identity_face_color(identity_id: int) -> Tuple[int, int, int]:
    r, g, b = colorsys.hsv_to_rgb(identity_id / IDENTITY_PALETTE_SIZE, 0.45, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def identity_hair_color(identity_id: int) -> Tuple[int, int, int]:
    hue = ((identity_id * 7) % IDENTITY_PALETTE_SIZE) / IDENTITY_PALETTE_SIZE
    r, g, b = colorsys.hsv_to_rgb(hue, 0.8, 0.45)
    return int(r * 255), int(g * 255), int(b * 255)


def identity_eye_geometry(identity_id: int) -> Tuple[int, int]:
    """Return (eye gap from the face centre, eye height) in canvas-64 pixels."""
    return 2 + identity_id % 3, 1 + (identity_id // 3) % 2


@dataclass(frozen=True)
class SceneSpec:
    """What to render: characters, their palettes, pose seed, background and caption."""

    num_characters: int
    identity_ids: Tuple[int, ...]
    canvas_size: int = 64
    pose_seed: int = 0
    background_id: int = 0
    caption_template_id: int = 0
    clothing_ids: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "identity_ids", tuple(int(i) for i in self.identity_ids))
        if self.clothing_ids is not None:
            object.__setattr__(self, "clothing_ids", tuple(int(c) for c in self.clothing_ids))

    def validate(self) -> None:
        if self.num_characters not in (1, 2):
            raise ValidationError(
                f"num_characters must be 1 or 2, got {self.num_characters}; "
                "three or more characters are not supported"
            )
        if len(self.identity_ids) != self.num_characters:
            raise ValidationError(
                f"identity_ids has {len(self.identity_ids)} entries for {self.num_characters} characters"
            )
        if self.canvas_size < 32 or self.canvas_size % LATENT_FACTOR != 0:
            raise ValidationError(
                f"canvas_size {self.canvas_size} must be >= 32 and divisible by {LATENT_FACTOR}"
            )
        for identity_id in self.identity_ids:
            if not 0 <= identity_id < IDENTITY_PALETTE_SIZE:
                raise ValidationError(f"identity_id {identity_id} outside palette of {IDENTITY_PALETTE_SIZE}")
        for clothing_id in self.resolved_clothing_ids():
            if not 0 <= clothing_id < CLOTHING_PALETTE_SIZE:
                raise ValidationError(f"clothing_id {clothing_id} outside palette of {CLOTHING_PALETTE_SIZE}")

    def resolved_clothing_ids(self) -> Tuple[int, ...]:
        if self.clothing_ids is not None:
            return self.clothing_ids
        return tuple(identity_id % CLOTHING_PALETTE_SIZE for identity_id in self.identity_ids)

    def to_dict(self) -> Dict:
        return {
            "num_characters": self.num_characters,
            "identity_ids": list(self.identity_ids),
            "canvas_size": self.canvas_size,
            "pose_seed": self.pose_seed,
            "background_id": self.background_id,
            "caption_template_id": self.caption_template_id,
            "clothing_ids": list(self.resolved_clothing_ids()),
        }

    @classmethod
    def from_dict(cls, values: Dict) -> "SceneSpec":
        return cls(
            num_characters=int(values["num_characters"]),
            identity_ids=tuple(values["identity_ids"]),
            canvas_size=int(values.get("canvas_size", 64)),
            pose_seed=int(values.get("pose_seed", 0)),
            background_id=int(values.get("background_id", 0)),
            caption_template_id=int(values.get("caption_template_id", 0)),
            clothing_ids=tuple(values["clothing_ids"]) if values.get("clothing_ids") is not None else None,
        )


@dataclass(frozen=True, eq=False)
class CharacterReference:
    """One character's crops, visible mask, keypoints and palette labels."""

    face_crop: np.ndarray
    body_crop: np.ndarray
    mask: np.ndarray
    pose: np.ndarray
    identity_id: int
    clothing_id: int
    face_box: Tuple[int, int, int, int]
    body_box: Tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class Scene:
    """A rendered scene. ``masks[0]`` is the background, ``masks[k]`` character ``k``."""

    spec: SceneSpec
    seed: int
    image: np.ndarray
    masks: np.ndarray
    characters: Tuple[CharacterReference, ...]
    caption: np.ndarray
    keypoints: np.ndarray
    pose_map: np.ndarray = field(repr=False)

    @property
    def num_characters(self) -> int:
        return len(self.characters)

    def tensors(self) -> Dict[str, np.ndarray]:
        """Flat little-endian arrays for the per-scene blob."""
        return {
            "image": self.image.astype("<f4"),
            "masks": self.masks.astype(np.uint8),
            "keypoints": self.keypoints.astype("<i4"),
            "caption": self.caption.astype("<i8"),
            "pose_map": self.pose_map.astype("<f4"),
            "face_crops": np.stack([c.face_crop for c in self.characters]).astype("<f4"),
            "body_crops": np.stack([c.body_crop for c in self.characters]).astype("<f4"),
            "face_boxes": np.asarray([c.face_box for c in self.characters], dtype="<i4"),
            "body_boxes": np.asarray([c.body_box for c in self.characters], dtype="<i4"),
            "character_ids": np.asarray(
                [(c.identity_id, c.clothing_id) for c in self.characters], dtype="<i8"
            ),
        }

    @classmethod
    def from_tensors(cls, spec: SceneSpec, seed: int, tensors: Dict[str, np.ndarray]) -> "Scene":
        characters = []
        for k in range(spec.num_characters):
            identity_id, clothing_id = (int(v) for v in tensors["character_ids"][k])
            characters.append(CharacterReference(
                face_crop=_frozen(tensors["face_crops"][k]),
                body_crop=_frozen(tensors["body_crops"][k]),
                mask=_frozen(tensors["masks"][k + 1]),
                pose=_frozen(tensors["keypoints"][k]),
                identity_id=identity_id,
                clothing_id=clothing_id,
                face_box=tuple(int(v) for v in tensors["face_boxes"][k]),
                body_box=tuple(int(v) for v in tensors["body_boxes"][k]),
            ))
        return cls(
            spec=spec,
            seed=seed,
            image=_frozen(tensors["image"]),
            masks=_frozen(tensors["masks"]),
            characters=tuple(characters),
            caption=_frozen(tensors["caption"]),
            keypoints=_frozen(tensors["keypoints"]),
            pose_map=_frozen(tensors["pose_map"]),
        )


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bitwise equality of every array and label of two scenes."""
    if a.spec != b.spec or a.seed != b.seed:
        return False
    ta, tb = a.tensors(), b.tensors()
    return all(ta[key].shape == tb[key].shape and np.array_equal(ta[key], tb[key]) for key in ta)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def encode_caption(words: Sequence[str], max_len: int = MAX_CAPTION_LEN) -> np.ndarray:
    """Map words (or one whitespace-separated string) to vocabulary ids."""
    if isinstance(words, str):
        words = words.lower().split()
    unknown = [word for word in words if word not in WORD_TO_ID or word == VOCAB[PAD_ID]]
    if unknown:
        raise ValidationError(f"Words outside the caption vocabulary: {unknown}")
    if len(words) > max_len:
        raise ValidationError(f"Caption has {len(words)} words, at most {max_len} are allowed")
    return np.asarray([WORD_TO_ID[word] for word in words], dtype=np.int64)


def decode_caption(ids: Sequence[int]) -> str:
    return " ".join(VOCAB[int(i)] for i in ids if int(i) != PAD_ID)


def _action_word(keypoints: np.ndarray) -> str:
    neck_y = keypoints[1, 1]
    raised = int(keypoints[3, 1] < neck_y) + int(keypoints[4, 1] < neck_y)
    return ("standing", "waving", "cheering")[raised]


def _caption_words(spec: SceneSpec, keypoints: np.ndarray) -> List[str]:
    count = ["one", "sprite"] if spec.num_characters == 1 else ["two", "sprites"]
    background = BACKGROUND_NAMES[spec.background_id % BACKGROUND_PALETTE_SIZE]
    action = _action_word(keypoints[0])
    color = CLOTHING_NAMES[spec.resolved_clothing_ids()[0]]
    template = spec.caption_template_id % CAPTION_TEMPLATE_COUNT
    if template == 0:
        return count + [action, "in", "the", background]
    if template == 1:
        return count + ["in", "the", background]
    if template == 2:
        return count + ["wearing", color, "shirt", "at", background]
    return ["the", background, "with"] + count + [action]


def _pattern_image(clothing_id: int, size: int) -> np.ndarray:
    primary = np.asarray(CLOTHING_COLORS[clothing_id], dtype=np.uint8)
    secondary = np.asarray(PATTERN_SECONDARY, dtype=np.uint8)
    ys, xs = np.mgrid[0:size, 0:size]
    pattern = PATTERN_NAMES[clothing_id % len(PATTERN_NAMES)]
    if pattern == "striped":
        use_secondary = (ys // 2) % 2 == 1
    elif pattern == "checked":
        use_secondary = ((xs // 3) + (ys // 3)) % 2 == 1
    elif pattern == "dotted":
        use_secondary = (xs % 4 == 1) & (ys % 4 == 1)
    else:
        use_secondary = np.zeros((size, size), dtype=bool)
    return np.where(use_secondary[..., None], secondary, primary).astype(np.uint8)


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.canvas_size
    color = np.asarray(BACKGROUND_COLORS[spec.background_id % BACKGROUND_PALETTE_SIZE], dtype=np.int16)
    canvas = np.broadcast_to(color, (size, size, 3)).copy()
    ground = int(round(size * 0.75))
    canvas[ground:] = (canvas[ground:] * 3) // 4
    canvas += rng.integers(-6, 7, size=(size, size, 1), dtype=np.int16)
    return np.clip(canvas, 0, 255).astype(np.uint8)


def _sample_keypoints(spec: SceneSpec, k: int, layout_rng: np.random.Generator) -> np.ndarray:
    """Keypoints (x, y) for character ``k``; layout from the scene seed, articulation from the pose seed."""
    s = spec.canvas_size / 64.0
    if spec.num_characters == 1:
        cx = 32 + int(layout_rng.integers(-6, 7))
    else:
        cx = (18, 46)[k] + int(layout_rng.integers(-3, 4))
    head_y = 14 + int(layout_rng.integers(-2, 3))

    pose_rng = np.random.default_rng([spec.pose_seed, k])
    lean = int(pose_rng.integers(-2, 3))
    neck = (cx, head_y + 8)
    hip = (cx + lean, head_y + 24)
    left_hand = (neck[0] - int(pose_rng.integers(5, 12)), neck[1] + int(pose_rng.integers(-8, 15)))
    right_hand = (neck[0] + int(pose_rng.integers(5, 12)), neck[1] + int(pose_rng.integers(-8, 15)))
    left_foot = (hip[0] - int(pose_rng.integers(2, 9)), hip[1] + int(pose_rng.integers(13, 17)))
    right_foot = (hip[0] + int(pose_rng.integers(2, 9)), hip[1] + int(pose_rng.integers(13, 17)))
    points = np.asarray([(cx, head_y), neck, hip, left_hand, right_hand, left_foot, right_foot], dtype=np.float64)
    return np.round(points * s).astype(np.int32)


def _draw_character(
    canvas: np.ndarray, keypoints: np.ndarray, identity_id: int, clothing_id: int, size: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Paint one sprite onto ``canvas`` in place; return its silhouette and head masks."""
    s = size / 64.0
    head_r = max(2, int(round(6 * s)))
    torso_w = max(2, int(round(8 * s)))
    limb_w = max(1, int(round(3 * s)))
    pts = [tuple(int(v) for v in p) for p in keypoints]
    head, neck, hip, l_hand, r_hand, l_foot, r_foot = pts

    def part(draw_fn) -> np.ndarray:
        layer = Image.new("L", (size, size), 0)
        draw_fn(ImageDraw.Draw(layer))
        return np.asarray(layer) > 0

    head_box = (head[0] - head_r, head[1] - head_r, head[0] + head_r, head[1] + head_r)
    legs = part(lambda d: (d.line([hip, l_foot], fill=1, width=limb_w), d.line([hip, r_foot], fill=1, width=limb_w)))
    arms = part(lambda d: (d.line([neck, l_hand], fill=1, width=limb_w), d.line([neck, r_hand], fill=1, width=limb_w)))
    torso = part(lambda d: d.line([neck, hip], fill=1, width=torso_w))
    head_mask = part(lambda d: d.ellipse(head_box, fill=1))
    hair = part(lambda d: d.chord(head_box, 200, 340, fill=1)) & head_mask
    gap, eye_h = identity_eye_geometry(identity_id)
    gap = max(1, int(round(gap * s)))
    eye_h = max(1, int(round(eye_h * s)))
    eyes = part(lambda d: (
        d.rectangle((head[0] - gap, head[1], head[0] - gap, head[1] + eye_h - 1), fill=1),
        d.rectangle((head[0] + gap, head[1], head[0] + gap, head[1] + eye_h - 1), fill=1),
    )) & head_mask

    canvas[legs] = PANTS_COLOR
    canvas[arms] = CLOTHING_COLORS[clothing_id]
    canvas[torso] = _pattern_image(clothing_id, size)[torso]
    canvas[head_mask] = identity_face_color(identity_id)
    canvas[hair] = identity_hair_color(identity_id)
    canvas[eyes] = EYE_COLOR
    return legs | arms | torso | head_mask, head_mask


def _bbox(mask: np.ndarray) -> Tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0, 0, 0, 0
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def masked_crop(canvas: np.ndarray, mask: np.ndarray, box: Tuple[int, int, int, int], out_size: int) -> np.ndarray:
    y0, x0, y1, x1 = box
    if y1 <= y0 or x1 <= x0:
        return np.zeros((out_size, out_size, 3), dtype=np.float32)
    crop = canvas[y0:y1, x0:x1] * mask[y0:y1, x0:x1, None].astype(np.uint8)
    resized = Image.fromarray(crop, mode="RGB").resize((out_size, out_size), Image.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


def generate_scene(spec: SceneSpec, seed: int) -> Scene:
    """Render ``spec`` deterministically; identical ``(spec, seed)`` gives identical scenes."""
    spec.validate()
    return _generate_scene_cached(spec, int(seed))


@functools.lru_cache(maxsize=SCENE_CACHE_SIZE)
def _generate_scene_cached(spec: SceneSpec, seed: int) -> Scene:
    return _render_scene(spec, seed)


def _render_scene(spec: SceneSpec, seed: int) -> Scene:
    size = spec.canvas_size
    layout_rng = np.random.default_rng([seed, spec.num_characters, spec.background_id])
    canvas = _background(spec, layout_rng)
    clothing_ids = spec.resolved_clothing_ids()

    keypoints = np.stack([_sample_keypoints(spec, k, layout_rng) for k in range(spec.num_characters)])
    silhouettes, heads = [], []
    for k in range(spec.num_characters):
        silhouette, head = _draw_character(canvas, keypoints[k], spec.identity_ids[k], clothing_ids[k], size)
        silhouettes.append(silhouette)
        heads.append(head)

    # later characters occlude earlier ones
    visible = []
    covered = np.zeros((size, size), dtype=bool)
    for silhouette in reversed(silhouettes):
        visible.append(silhouette & ~covered)
        covered |= silhouette
    visible.reverse()
    masks = np.stack([~covered] + visible).astype(np.uint8)

    characters = []
    for k in range(spec.num_characters):
        body_box = _bbox(visible[k])
        head_visible = heads[k] & visible[k]
        fy0, fx0, fy1, fx1 = _bbox(head_visible)
        by0, bx0, by1, bx1 = body_box
        face_box = (max(fy0, by0), max(fx0, bx0), min(fy1, by1), min(fx1, bx1))
        characters.append(CharacterReference(
            face_crop=_frozen(masked_crop(canvas, head_visible, face_box, FACE_CROP_SIZE)),
            body_crop=_frozen(masked_crop(canvas, visible[k], body_box, BODY_CROP_SIZE)),
            mask=_frozen(masks[k + 1]),
            pose=_frozen(keypoints[k]),
            identity_id=spec.identity_ids[k],
            clothing_id=clothing_ids[k],
            face_box=face_box,
            body_box=body_box,
        ))

    caption = encode_caption(_caption_words(spec, keypoints))
    pose_map = rasterize_pose(keypoints, size, canvas_size=size)
    return Scene(
        spec=spec,
        seed=seed,
        image=_frozen(canvas.astype(np.float32) / 255.0),
        masks=_frozen(masks),
        characters=tuple(characters),
        caption=_frozen(caption),
        keypoints=_frozen(keypoints),
        pose_map=_frozen(pose_map),
    )


def perturb_pose(scene: Scene, seed: int) -> Scene:
    """Re-render ``scene`` with a new articulation; identities, clothing and layout are kept."""
    if scene.num_characters < 1:
        raise ValidationError("perturb_pose needs a scene with at least one character")
    spec = replace(scene.spec, pose_seed=int(seed))
    spec.validate()
    return _render_scene(spec, scene.seed)


class SceneDataset:
    """Immutable ordered collection of ``(spec, seed)`` entries.

    Scenes are rendered on access, or read from per-scene blobs when the dataset was
    loaded from a directory written by :func:`save_dataset`.
    """

    def __init__(self, entries: Sequence[Tuple[SceneSpec, int]], mix: float, seed: int, root: Optional[str] = None):
        self._entries = tuple((spec, int(scene_seed)) for spec, scene_seed in entries)
        self.mix = float(mix)
        self.seed = int(seed)
        self.root = root

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Scene]:
        for index in range(len(self)):
            yield self[index]

    def __getitem__(self, index: int) -> Scene:
        spec, scene_seed = self._entries[index]
        if self.root is not None:
            return _load_scene_blob(self.root, index, spec, scene_seed)
        return generate_scene(spec, scene_seed)

    @property
    def entries(self) -> Tuple[Tuple[SceneSpec, int], ...]:
        return self._entries

    def specs(self) -> List[SceneSpec]:
        return [spec for spec, _ in self._entries]

    def identity_sequence(self) -> List[Tuple[int, ...]]:
        return [spec.identity_ids for spec, _ in self._entries]

    def reference_scene(self, index: int, perturb_seed: int) -> Scene:
        """Same characters as scene ``index`` in a different pose."""
        return perturb_pose(self[index], perturb_seed)


def generate_dataset(
    count: int,
    mix: float = 0.6,
    seed: int = 0,
    identity_pool: Sequence[int] = TRAIN_IDENTITIES,
    canvas_size: int = 64,
) -> SceneDataset:
    """Reproducible dataset with ``round(count * mix)`` single-character scenes."""
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if not 0.0 <= mix <= 1.0:
        raise ValidationError(f"mix must lie in [0, 1], got {mix}")
    if len(identity_pool) < 2:
        raise ValidationError("identity_pool needs at least two identities")

    rng = np.random.default_rng(seed)
    num_single = int(round(count * mix))
    kinds = rng.permutation(np.asarray([1] * num_single + [2] * (count - num_single)))
    pool = np.asarray(identity_pool)
    entries = []
    for kind in kinds:
        num_characters = int(kind)
        spec = SceneSpec(
            num_characters=num_characters,
            identity_ids=tuple(int(i) for i in rng.choice(pool, size=num_characters, replace=False)),
            canvas_size=canvas_size,
            pose_seed=int(rng.integers(0, 2**31 - 1)),
            background_id=int(rng.integers(0, BACKGROUND_PALETTE_SIZE)),
            caption_template_id=int(rng.integers(0, CAPTION_TEMPLATE_COUNT)),
            clothing_ids=tuple(int(c) for c in rng.integers(0, CLOTHING_PALETTE_SIZE, size=num_characters)),
        )
        entries.append((spec, int(rng.integers(0, 2**31 - 1))))
    return SceneDataset(entries, mix=mix, seed=seed)


def _scene_blob_path(root: str, index: int) -> str:
    return os.path.join(root, "scenes", f"scene_{index:05d}.safetensors")


def save_dataset(dataset: SceneDataset, path: str) -> str:
    """Write ``manifest.json`` and one safetensors blob per scene under ``path``."""
    os.makedirs(os.path.join(path, "scenes"), exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(dataset),
        "mix": dataset.mix,
        "seed": dataset.seed,
        "scenes": [
            {"spec": spec.to_dict(), "seed": scene_seed, "blob": os.path.relpath(_scene_blob_path(path, i), path)}
            for i, (spec, scene_seed) in enumerate(dataset.entries)
        ],
    }
    for index, (spec, scene_seed) in enumerate(dataset.entries):
        save_file(generate_scene(spec, scene_seed).tensors(), _scene_blob_path(path, index))
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as manifest_file:
        json.dump(manifest, manifest_file, indent=2, sort_keys=True)
    return path


def load_dataset(path: str) -> SceneDataset:
    """Open a dataset directory written by :func:`save_dataset`."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"Dataset manifest not found at {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as manifest_file:
            manifest = json.load(manifest_file)
        entries = [(SceneSpec.from_dict(item["spec"]), int(item["seed"])) for item in manifest["scenes"]]
        if manifest.get("format_version") != DATASET_FORMAT_VERSION:
            raise CheckpointError(f"Unsupported dataset format version {manifest.get('format_version')}")
        return SceneDataset(entries, mix=float(manifest["mix"]), seed=int(manifest["seed"]), root=path)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Corrupt dataset manifest at {manifest_path}: {e}") from e


def _load_scene_blob(root: str, index: int, spec: SceneSpec, scene_seed: int) -> Scene:
    blob_path = _scene_blob_path(root, index)
    if not os.path.exists(blob_path):
        raise CheckpointError(f"Scene blob missing: {blob_path}")
    return Scene.from_tensors(spec, scene_seed, load_file(blob_path))
