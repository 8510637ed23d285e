"""Generation, evaluation metrics and attention inspection on trained checkpoints.

Metrics use the frozen toy encoders: ``face_sim`` and ``char_sim`` compare crops of
generated images with the same crops of the reference, ``clip_t_analog`` measures
caption agreement through the contrastively aligned scene tower, and ``attn_iou``
compares binarized region maps with ground-truth masks at the finest attention layer.
"""
import os
import json
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

from .backbone import DDIMSampler, add_noise
from .config import EvalConfig
from .encoders import images_to_tensor, rasterize_pose
from .errors import ValidationError
from .losses import downsample_masks
from .ppr import ConditioningBundle, interpolate_conditioning
from .synthdata import (
    BACKGROUND_PALETTE_SIZE,
    BODY_CROP_SIZE,
    CAPTION_TEMPLATE_COUNT,
    FACE_CROP_SIZE,
    HELDOUT_IDENTITIES,
    NUM_KEYPOINTS,
    TRAIN_IDENTITIES,
    Scene,
    SceneDataset,
    decode_caption,
    encode_caption,
    generate_dataset,
    generate_scene,
    identity_face_color,
    masked_crop,
)
from .trainer import StoryModel, load_story_model
from .workspace import WorkspaceManager


@dataclass(frozen=True)
class EvalReport:
    face_sim: float
    char_sim: float
    clip_t_analog: float
    attn_iou: Optional[float]
    n_samples: int
    baseline_face_sim: Optional[float] = None
    baseline_char_sim: Optional[float] = None
    pose_error_px: Optional[float] = None

    def to_dict(self) -> Dict:
        return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in asdict(self).items()}


def to_uint8(image) -> np.ndarray:
    """(3, H, W) tensor or (H, W, 3) array in [0, 1] to an (H, W, 3) uint8 array."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().float()
        if image.dim() == 3 and image.shape[0] == 3:
            image = image.permute(1, 2, 0)
        image = image.numpy()
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_png(image, path: str) -> str:
    array = np.asarray(image)
    if array.dtype != np.uint8:
        array = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)
    return path


def face_crop_from(image, scene: Scene, k: int) -> np.ndarray:
    """Face crop of character ``k`` cut from ``image`` with the layout of ``scene``."""
    character = scene.characters[k]
    return masked_crop(to_uint8(image), character.mask.astype(bool), character.face_box, FACE_CROP_SIZE)


def body_crop_from(image, scene: Scene, k: int) -> np.ndarray:
    character = scene.characters[k]
    return masked_crop(to_uint8(image), character.mask.astype(bool), character.body_box, BODY_CROP_SIZE)


@torch.no_grad()
def character_similarities(model: StoryModel, images, targets: Sequence[Scene], reference: Scene) -> Tuple[List[float], List[float]]:
    """Per-character face and body cosine similarity between generated images and the reference.

    Blank crops are scored, not rejected.
    """
    encoders, device = model.encoders, model.encoders.device
    face_sims, char_sims = [], []
    for k in range(reference.num_characters):
        ref_face = encoders.face(images_to_tensor(face_crop_from(reference.image, reference, k), device))
        ref_body = encoders.character(images_to_tensor(body_crop_from(reference.image, reference, k), device)).mean(dim=1)
        faces = np.stack([face_crop_from(img, scene, k) for img, scene in zip(images, targets)])
        bodies = np.stack([body_crop_from(img, scene, k) for img, scene in zip(images, targets)])
        gen_face = encoders.face(images_to_tensor(faces, device))
        gen_body = encoders.character(images_to_tensor(bodies, device)).mean(dim=1)
        face_sims += (gen_face @ ref_face.t()).squeeze(-1).tolist()
        char_sims += F.cosine_similarity(gen_body, ref_body.expand_as(gen_body), dim=-1).tolist()
    return face_sims, char_sims


def binarize_maps(maps: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Per-map max normalisation followed by a threshold."""
    peak = maps.flatten(-2).amax(dim=-1).clamp_min(1e-12)[..., None, None]
    return maps / peak > threshold


def attention_iou(maps: torch.Tensor, masks: torch.Tensor, threshold: float = 0.5) -> float:
    """Mean IoU over samples and regions between binarized maps and downsampled masks."""
    predicted = binarize_maps(maps, threshold)
    target = downsample_masks(masks, tuple(maps.shape[-2:])).to(maps.device) > 0.5
    intersection = (predicted & target).flatten(-2).sum(-1).float()
    union = (predicted | target).flatten(-2).sum(-1).float()
    iou = torch.where(union > 0, intersection / union.clamp_min(1.0), torch.ones_like(union))
    return float(iou.mean())


LEAKAGE_ORIENTATION = {
    "rows": "attention region j (0 = background)",
    "columns": "scene mask k (0 = background)",
    "entry": "mean of region map A_j inside mask M_k; every column sums to 1",
}


def leakage_matrix(maps: torch.Tensor, masks) -> np.ndarray:
    """L[j][k] = mean of region map A_j inside mask M_k, for (N+1, h, w) maps.

    Every column sums to one because the maps sum to one at each pixel.
    Rows index attention regions and columns index masks.
    """
    targets = downsample_masks(masks, tuple(maps.shape[-2:]))[0].to(maps.device, maps.dtype)
    mass = torch.einsum("jhw,khw->jk", maps, targets)
    area = targets.flatten(1).sum(dim=1).clamp_min(1e-12)
    return (mass / area[None, :]).detach().cpu().double().numpy()


def diagonal_dominance(matrix: np.ndarray) -> float:
    """Mean diagonal of a leakage matrix: the share of each mask's attention owned by its region."""
    return float(np.trace(matrix) / matrix.shape[0])


def locate_face(image: np.ndarray, identity_id: int, tolerance: float = 0.12) -> Optional[Tuple[float, float]]:
    """Centroid (x, y) of pixels matching an identity's face colour, or ``None``."""
    color = np.asarray(identity_face_color(identity_id), dtype=np.float32) / 255.0
    distance = np.abs(np.asarray(image, dtype=np.float32) - color).max(axis=-1)
    ys, xs = np.nonzero(distance < tolerance)
    if xs.size == 0:
        return None
    return float(xs.mean()), float(ys.mean())


def pose_error(images, targets: Sequence[Scene]) -> Optional[float]:
    """Mean distance in pixels between requested and detected head positions."""
    errors = []
    for image, scene in zip(images, targets):
        array = to_uint8(image).astype(np.float32) / 255.0
        for k, character in enumerate(scene.characters):
            found = locate_face(array, character.identity_id)
            if found is not None:
                errors.append(float(np.hypot(*(np.asarray(found) - scene.keypoints[k, 0]))))
    return float(np.mean(errors)) if errors else None


def target_scenes(reference: Scene, count: int, seed: int) -> List[Scene]:
    """Same characters as ``reference`` in new poses, backgrounds and captions."""
    spec = reference.spec
    return [
        generate_scene(replace(
            spec,
            pose_seed=seed * 1009 + j + 1,
            background_id=(spec.background_id + j + 1) % BACKGROUND_PALETTE_SIZE,
            caption_template_id=j % CAPTION_TEMPLATE_COUNT,
        ), reference.seed)
        for j in range(count)
    ]


def eval_dataset(config: EvalConfig, canvas_size: int = 64) -> SceneDataset:
    mix = 1.0 if config.single_character_only else 0.6
    return generate_dataset(config.num_references, mix=mix, seed=config.seed, identity_pool=HELDOUT_IDENTITIES,
                            canvas_size=canvas_size)


def expand_bundle(bundle: ConditioningBundle, batch: int) -> ConditioningBundle:
    return bundle.with_tokens(bundle.c_i.expand(batch, -1, -1))


def load_pose_file(path: str, canvas_size: int = 64) -> np.ndarray:
    """Read keypoints from ``.npy`` or a YAML/JSON list and rasterize them at canvas size."""
    if path.endswith(".npy"):
        keypoints = np.load(path)
    else:
        with open(path, "r", encoding="utf-8") as pose_file:
            keypoints = np.asarray(yaml.safe_load(pose_file), dtype=np.float64)
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.ndim == 2:
        keypoints = keypoints[None]
    if keypoints.shape[0] > 2:
        raise ValidationError(f"Pose file describes {keypoints.shape[0]} characters; at most 2 are supported")
    return rasterize_pose(keypoints, canvas_size, canvas_size=canvas_size, channels=NUM_KEYPOINTS)


class Evaluation(WorkspaceManager):
    """Loads story checkpoints and runs generation, evaluation and attention inspection."""

    def __init__(self, workspace_path: Optional[str] = None, eval_config: Optional[EvalConfig] = None,
                 device: Optional[str] = None):
        super().__init__(workspace_path, component="Evaluation")
        self.eval_config = eval_config or self.load_eval_config()
        self.device = device
        self.report_settings("Evaluation initialised with following settings:", {
            "steps": self.eval_config.steps,
            "guidance": self.eval_config.guidance,
            "gamma": self.eval_config.gamma,
            "references": self.eval_config.num_references,
            "prompts_per_ref": self.eval_config.prompts_per_ref,
            "seed": self.eval_config.seed,
        })

    def load(self, checkpoint: str) -> StoryModel:
        model, manifest, _ = load_story_model(checkpoint, self.device)
        model.eval()
        self.logger.info(f"Loaded '{manifest['kind']}' checkpoint {checkpoint} at step {manifest.get('step', 0)}")
        return model

    def generate(
        self,
        model: StoryModel,
        reference: Scene,
        prompts: Sequence[str],
        out_dir: str,
        pose: Optional[np.ndarray] = None,
        zero_character: bool = False,
        guidance: Optional[float] = None,
        steps: Optional[int] = None,
        seed: int = 0,
        gamma: Optional[float] = None,
        interpolate_with: Optional[Scene] = None,
        alpha: float = 0.5,
    ) -> Tuple[List[str], str]:
        """One image per prompt from a single conditioning bundle; returns paths and the bundle digest."""
        config = self.eval_config
        if reference.num_characters > 2:
            raise ValidationError("At most 2 reference characters are supported")
        os.makedirs(out_dir, exist_ok=True)
        prompts = list(prompts) or [""]
        captions = [encode_caption(prompt) if prompt.strip() else [] for prompt in prompts]

        bundle = model.conditioning([reference], zero_character=zero_character)
        if interpolate_with is not None:
            if interpolate_with.num_characters != reference.num_characters:
                raise ValidationError("Interpolated references must hold the same number of characters")
            other = model.conditioning([interpolate_with], zero_character=zero_character)
            bundle = interpolate_conditioning(bundle, other, alpha)
        digest = bundle.digest()

        sampler = DDIMSampler(model.diffusion)
        pose_tensor = None if pose is None else torch.from_numpy(np.asarray(pose, dtype=np.float32))[None].to(model.device)
        paths = []
        for index, caption in enumerate(captions):
            image = sampler.sample(
                model.text_context([caption]), bundle, pose_tensor,
                steps=steps or config.steps,
                guidance=config.guidance if guidance is None else guidance,
                seed=seed + index,
                gamma=config.gamma if gamma is None else gamma,
            )[0]
            path = save_png(to_uint8(image), os.path.join(out_dir, f"story_{index:03d}.png"))
            paths.append(path)
            self.logger.info(
                f"Generated {path} for prompt '{decode_caption(caption) or '<null>'}' with bundle sha256 {digest}"
            )
        return paths, digest

    def evaluate(
        self,
        model: StoryModel,
        eval_set: Optional[SceneDataset] = None,
        prompts_per_ref: Optional[int] = None,
        self_check: bool = False,
        zero_character: bool = False,
        use_pose: bool = True,
        baseline: bool = True,
    ) -> EvalReport:
        """Deterministic metrics over held-out references."""
        config = self.eval_config
        eval_set = eval_set if eval_set is not None else eval_dataset(config, model.config.canvas_size)
        prompts_per_ref = prompts_per_ref or config.prompts_per_ref
        for spec in eval_set.specs():
            overlap = set(spec.identity_ids) & set(TRAIN_IDENTITIES)
            if overlap:
                raise ValidationError(f"Evaluation identities {sorted(overlap)} are training identities")

        sampler = DDIMSampler(model.diffusion)
        face, char, clip_t, iou, base_face, base_char, pose_errors = [], [], [], [], [], [], []
        n_samples = 0
        for index, reference in enumerate(eval_set):
            if self_check:
                targets = [reference]
                images = [reference.image]
            else:
                targets = [t for t in target_scenes(reference, prompts_per_ref, config.seed + index)
                           for _ in range(config.images_per_prompt)]
                images = self._sample(model, sampler, reference, targets, index, zero_character, use_pose)
            faces, chars = character_similarities(model, images, targets, reference)
            face += faces
            char += chars
            batch = images_to_tensor(np.stack([to_uint8(img) for img in images]).astype(np.float32) / 255.0, model.device)
            clip_t += model.encoders.text_image_similarity(batch, [t.caption for t in targets]).tolist()
            n_samples += len(images)

            if not self_check:
                iou.append(self._noised_target_iou(model, reference, targets, index))
                if use_pose:
                    error = pose_error(images, targets)
                    if error is not None:
                        pose_errors.append(error)
                if baseline:
                    null_images = self._sample(model, sampler, reference, targets, index, zero_character,
                                               use_pose, unconditioned=True)
                    faces, chars = character_similarities(model, null_images, targets, reference)
                    base_face += faces
                    base_char += chars

        report = EvalReport(
            face_sim=float(np.mean(face)),
            char_sim=float(np.mean(char)),
            clip_t_analog=float(np.mean(clip_t)),
            attn_iou=float(np.mean(iou)) if iou else None,
            n_samples=n_samples,
            baseline_face_sim=float(np.mean(base_face)) if base_face else None,
            baseline_char_sim=float(np.mean(base_char)) if base_char else None,
            pose_error_px=float(np.mean(pose_errors)) if pose_errors else None,
        )
        self.logger.info(f"Evaluation report: {report.to_dict()}")
        return report

    def _sample(self, model, sampler, reference, targets, index, zero_character, use_pose, unconditioned=False):
        config = self.eval_config
        bundle = model.conditioning([reference], zero_character=zero_character)
        if unconditioned:
            bundle = bundle.zeros_like()
        bundle = expand_bundle(bundle, len(targets))
        pose = None
        if use_pose:
            pose = torch.from_numpy(np.stack([t.pose_map for t in targets])).to(model.device)
        images = sampler.sample(
            model.text_context([t.caption for t in targets]), bundle, pose,
            steps=config.steps, guidance=config.guidance, seed=config.seed * 7919 + index, gamma=config.gamma,
        )
        return list(images)

    @torch.no_grad()
    def _region_maps(self, model: StoryModel, reference: Scene, scenes: Sequence[Scene], seed: int):
        """Records of every layer for the noised ``scenes`` conditioned on ``reference``."""
        config = self.eval_config
        images = images_to_tensor(np.stack([s.image for s in scenes]), model.device)
        z0 = model.diffusion.vae.encode_image(images)
        generator = torch.Generator().manual_seed(seed)
        eps = torch.randn(z0.shape, generator=generator).to(z0.device, z0.dtype)
        t = torch.full((len(scenes),), config.record_timestep, dtype=torch.long)
        z_t = add_noise(model.diffusion.schedule, z0, t, eps)
        bundle = expand_bundle(model.conditioning([reference]), len(scenes))
        pose = torch.from_numpy(np.stack([s.pose_map for s in scenes])).to(model.device)
        _, records = model.diffusion.predict_noise_with_records(
            z_t, t.to(model.device), model.text_context([s.caption for s in scenes]), bundle,
            pose=pose, record=True, gamma=config.gamma,
        )
        return records

    def _noised_target_iou(self, model, reference, targets, index) -> float:
        unique = list({id(t): t for t in targets}.values())
        records = self._region_maps(model, reference, unique, self.eval_config.seed + index)
        finest = max(records, key=lambda r: r.A.shape[-1])
        masks = torch.from_numpy(np.stack([t.masks for t in unique]))
        return attention_iou(finest.A, masks, self.eval_config.iou_threshold)

    def inspect_attn(self, model: StoryModel, scene: Scene, out_dir: str, reference: Optional[Scene] = None,
                     seed: Optional[int] = None) -> Dict[str, Dict]:
        """Write every layer's region maps as grayscale PNGs and the leakage matrices as JSON."""
        os.makedirs(out_dir, exist_ok=True)
        seed = self.eval_config.seed if seed is None else seed
        records = self._region_maps(model, reference or scene, [scene], seed)
        canvas = scene.spec.canvas_size
        result: Dict[str, Dict] = {}
        for record in records:
            maps = record.A[0]
            for k in range(maps.shape[0]):
                scaled = F.interpolate(maps[k][None, None].float(), size=(canvas, canvas), mode="nearest")[0, 0]
                save_png(scaled.clamp(0, 1).cpu().numpy(), os.path.join(out_dir, f"{record.layer_id}_region_{k}.png"))
            matrix = leakage_matrix(maps, scene.masks)
            result[record.layer_id] = {
                "matrix": np.round(matrix, 6).tolist(),
                "diagonal_dominance": round(diagonal_dominance(matrix), 6),
            }
        with open(os.path.join(out_dir, "leakage.json"), "w", encoding="utf-8") as leakage_file:
            json.dump({"orientation": LEAKAGE_ORIENTATION, "layers": result}, leakage_file, indent=2, sort_keys=True)
        self.logger.info(f"Attention maps and leakage matrices written to {out_dir}")
        return result


def write_report(report: EvalReport, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as report_file:
        report_file.write(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def cmd_generate(checkpoint: str, reference: Scene, prompts: Sequence[str], out_dir: str,
                 pose_file: Optional[str] = None, workspace: Optional[str] = None,
                 device: Optional[str] = None, **options) -> Tuple[List[str], str]:
    evaluation = Evaluation(workspace, device=device)
    model = evaluation.load(checkpoint)
    pose = load_pose_file(pose_file, reference.spec.canvas_size) if pose_file else None
    return evaluation.generate(model, reference, prompts, out_dir, pose=pose, **options)


def cmd_eval(checkpoint: str, out_path: str, eval_set: Optional[SceneDataset] = None,
             prompts_per_ref: Optional[int] = None, workspace: Optional[str] = None,
             eval_config: Optional[EvalConfig] = None, device: Optional[str] = None, **options) -> EvalReport:
    evaluation = Evaluation(workspace, eval_config, device=device)
    model = evaluation.load(checkpoint)
    report = evaluation.evaluate(model, eval_set, prompts_per_ref, **options)
    write_report(report, out_path)
    return report


def cmd_inspect_attn(checkpoint: str, scene: Scene, out_dir: str, workspace: Optional[str] = None,
                     eval_config: Optional[EvalConfig] = None, device: Optional[str] = None,
                     seed: Optional[int] = None) -> Dict[str, Dict]:
    evaluation = Evaluation(workspace, eval_config, device=device)
    return evaluation.inspect_attn(evaluation.load(checkpoint), scene, out_dir, seed=seed)
