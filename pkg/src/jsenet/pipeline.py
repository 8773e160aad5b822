"""Scene preparation, two-stage training, and voting inference."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from jsenet import tensor as T
from jsenet.checkpoint import model_tensors, save_checkpoint, write_tensors
from jsenet.config import TrainConfig
from jsenet.edgegen import emg_gt
from jsenet.errors import ContractError, InputError, TrainingDivergedError
from jsenet.geometry import PointCloud, augment, grid_subsample, project_nearest, sample_sphere
from jsenet.labels import (
    SemanticEdgeLabels,
    generate_edge_labels,
    one_hot,
    skew_weights,
    to_binary_edges,
    transfer_to_subsampled,
)
from jsenet.losses import LossComponents, loss_bce, loss_dual, loss_edge, loss_seg, loss_total
from jsenet.model import JSENet, JSENetOutputs, SphereInput
from jsenet.ply import read_ply, write_cloud
from jsenet.settings import get_threads

logger = logging.getLogger(__name__)

MIN_SPHERE_POINTS = 8
LOG_COLUMNS = ["step", "epoch", "stage", "lr", "total", "seg", "edge", "bce", "dual"]


def parallel_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """Order-preserving map over a thread pool capped by JSENET_THREADS."""
    workers = min(threads or get_threads(), max(len(items), 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --- Scenes ---

@dataclass
class Scene:
    """A training / evaluation scene: the original cloud and its grid-subsampled version."""

    name: str
    original: PointCloud
    cloud: PointCloud
    edges: SemanticEdgeLabels

    @property
    def num_classes(self) -> int:
        return self.edges.num_classes


def prepare_scene(
    cloud: PointCloud,
    config: TrainConfig,
    name: str = "scene",
    edges: SemanticEdgeLabels | None = None,
) -> Scene:
    """Edge labels on the raw cloud, then subsample and OR the bitmasks per cell."""
    if len(cloud) == 0:
        raise InputError(f"scene '{name}' has no points")
    if cloud.labels.max() >= config.num_classes:
        raise InputError(f"scene '{name}' has label {cloud.labels.max()} but num_classes = {config.num_classes}")
    if edges is None:
        edges = generate_edge_labels(cloud, config.edge_radius, config.num_classes)
    elif len(edges) != len(cloud):
        raise InputError(f"scene '{name}': {len(edges)} edge labels for {len(cloud)} points")
    sub = grid_subsample(cloud, config.grid_cell)
    merged = transfer_to_subsampled(edges, sub.assignment, len(sub.cloud))
    logger.info(
        "Prepared scene '%s': %d points -> %d after %.3f m subsampling", name, len(cloud), len(sub.cloud), config.grid_cell
    )
    return Scene(name, cloud, sub.cloud, merged)


def prepare_scenes(clouds: dict[str, PointCloud], config: TrainConfig) -> list[Scene]:
    return parallel_map(lambda item: prepare_scene(item[1], config, item[0]), list(clouds.items()))


# --- Spheres ---

@dataclass
class SphereBatch:
    """One training sphere with its supervision targets."""

    inputs: SphereInput
    labels: np.ndarray
    edges: SemanticEdgeLabels
    center: np.ndarray


def draw_center(scene: Scene, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Uniform center in the scene's bounding box, redrawn while the sphere is too sparse."""
    positions = scene.cloud.positions
    low, high = positions.min(axis=0), positions.max(axis=0)
    r2 = config.sphere_radius**2
    for _ in range(config.max_sphere_retries):
        center = rng.uniform(low, high)
        if np.count_nonzero(np.sum((positions - center) ** 2, axis=1) <= r2) >= MIN_SPHERE_POINTS:
            return center
        logger.debug("Sphere at %s too sparse, redrawing", np.round(center, 3))
    logger.warning(
        "No dense sphere in scene '%s' after %d draws; centering on a random point",
        scene.name, config.max_sphere_retries,
    )
    return positions[rng.integers(len(positions))].copy()


def make_batch(model: JSENet, scene: Scene, rng: np.random.Generator) -> SphereBatch:
    config = model.config
    center = draw_center(scene, rng, config)
    sphere = sample_sphere(scene.cloud, center, config.sphere_radius)
    rows = sphere.source_indices
    if config.augment:
        sphere = augment(sphere, int(rng.integers(2**31)))
    return SphereBatch(model.prepare(sphere), sphere.labels, scene.edges.permuted(rows), center)


def compute_losses(outputs: JSENetOutputs, batch: SphereBatch, stage: int, config: TrainConfig) -> LossComponents:
    """Stage 1 supervises the streams and side heads, stage 2 the refined outputs.

    A stream switched off by `config.streams` adds no terms.
    """
    k = config.num_classes
    target = one_hot(batch.labels, k)
    edge_map = batch.edges.class_map()
    beta_k, beta = skew_weights(batch.edges)
    parts = LossComponents()
    if stage == 1:
        if config.streams != "sed_only":
            parts.seg.append(loss_seg(target, T.softmax_rows(outputs.ssp_unrefined)))
        parts.seg.extend(loss_seg(target, T.softmax_rows(head)) for head in outputs.ssp_heads)
        if config.streams != "ss_only":
            parts.edge.append(loss_edge(edge_map, T.sigmoid(outputs.sep_unrefined), beta_k))
        binary = to_binary_edges(batch.edges).reshape(-1, 1)
        parts.bce.extend(loss_bce(binary, T.sigmoid(head), beta) for head in outputs.binary_heads)
        return parts
    parts.seg.append(loss_seg(target, T.softmax_rows(outputs.ssp_refined)))
    parts.edge.append(loss_edge(edge_map, outputs.sep_refined, beta_k))
    if config.use_dual_loss and outputs.act_input is not None:
        activations = emg_gt(target, batch.inputs.mean_filter)
        parts.dual.append(loss_dual(activations, outputs.act_input, beta))
        parts.dual.append(loss_dual(activations, outputs.act_refined, beta))
    return parts


# --- Training ---

@dataclass
class TrainResult:
    checkpoint: Path
    best_loss: dict[int, float] = field(default_factory=dict)
    steps: int = 0


class Trainer:
    """Stage 1 fits theta and phi without refinement; stage 2 fits gamma with the streams frozen."""

    def __init__(self, model: JSENet, scenes: list[Scene], out_dir: str | Path):
        if not scenes:
            raise InputError("training needs at least one scene")
        for scene in scenes:
            if scene.num_classes != model.config.num_classes:
                raise InputError(f"scene '{scene.name}' has {scene.num_classes} classes, model {model.config.num_classes}")
        self.model = model
        self.config = model.config
        self.scenes = scenes
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.rng = self.stage_rng(1)
        self.step = 0
        self.log_path = self.out_dir / "loss_log.csv"

    def stage_rng(self, stage: int) -> np.random.Generator:
        """Sphere and augmentation draws of one stage depend only on the seed and the stage."""
        return np.random.default_rng([self.config.seed, stage])

    def _set_modes(self, stage: int) -> None:
        self.model.train()
        if stage == 2:
            self.model.theta.eval()
            self.model.phi.eval()

    def _dump(self, batch: SphereBatch, stage: int, values: dict[str, float]) -> Path:
        dump = self.out_dir / f"diverged_step{self.step}.jsec"
        tensors = model_tensors(self.model)
        tensors["sphere/positions"] = batch.inputs.cloud.positions
        tensors["sphere/center"] = batch.center
        write_tensors(dump, tensors)
        logger.error("Loss diverged at step %d (stage %d): %s; state dumped to %s", self.step, stage, values, dump)
        return dump

    def train_step(self, stage: int, optimizer: T.MomentumOptimizer) -> dict[str, float]:
        scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
        batch = make_batch(self.model, scene, self.rng)
        optimizer.zero_grad()
        with T.Tape() as tape:
            outputs = self.model.forward(batch.inputs, refine=stage == 2, freeze_streams=stage == 2)
            parts = compute_losses(outputs, batch, stage, self.config)
            values = parts.values()
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(
                    f"non-finite loss at step {self.step}", str(self._dump(batch, stage, values))
                )
            total = loss_total(parts, self.config.loss_weights())
            tape.backward(total)
        optimizer.step()
        self.step += 1
        return {"total": total.item(), **values}

    def run_stage(self, stage: int, epochs: int, writer: csv.writer) -> float:
        optimizer = T.MomentumOptimizer(self.model.stage_parameters(stage), self.config.lr, self.config.momentum)
        self.rng = self.stage_rng(stage)
        self._set_modes(stage)
        best = float("inf")
        for epoch in range(epochs):
            optimizer.lr = self.config.learning_rate(epoch)
            epoch_losses = []
            for _ in range(self.config.steps_per_epoch):
                values = self.train_step(stage, optimizer)
                best = min(best, values["total"])
                epoch_losses.append(values["total"])
                writer.writerow([self.step, epoch, stage, optimizer.lr] + [values[c] for c in LOG_COLUMNS[4:]])
            logger.info(
                "stage %d epoch %d/%d lr %.2e mean loss %.4f", stage, epoch + 1, epochs, optimizer.lr, np.mean(epoch_losses)
            )
            if (epoch + 1) % self.config.checkpoint_every == 0:
                save_checkpoint(self.out_dir / f"stage{stage}_epoch{epoch + 1:04d}.jsec", self.model)
        return best

    def run(self, stages: Iterable[int] = (1, 2)) -> TrainResult:
        result = TrainResult(self.out_dir / "model.jsec")
        epochs = {1: self.config.stage1_epochs, 2: self.config.stage2_epochs}
        with self.log_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(LOG_COLUMNS)
            for stage in stages:
                if stage == 2 and not self.config.use_jrm:
                    logger.info("Refinement disabled; skipping stage 2")
                    continue
                if epochs[stage] == 0:
                    continue
                result.best_loss[stage] = self.run_stage(stage, epochs[stage], writer)
                save_checkpoint(self.out_dir / f"stage{stage}.jsec", self.model)
        self.model.eval()
        save_checkpoint(result.checkpoint, self.model)
        result.steps = self.step
        return result


def train(config: TrainConfig, scenes: list[Scene], out_dir: str | Path, model: JSENet | None = None,
          stages: Iterable[int] = (1, 2)) -> TrainResult:
    """Two-stage training; pass a stage-1 `model` with stages=(2,) to retrain the refinement only."""
    return Trainer(model or JSENet(config), scenes, out_dir).run(stages)


# --- Voting inference ---

class VoteAccumulator:
    """Running sums of mask probabilities and edge values per subsampled point.

    Contributions are kept per sphere center and summed in sorted center order,
    so the result does not depend on the order spheres were processed in.
    """

    def __init__(self, num_points: int, num_classes: int):
        self.num_points = num_points
        self.num_classes = num_classes
        self._votes: dict[tuple[float, ...], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def add(self, center: np.ndarray, rows: np.ndarray, probs: np.ndarray, edges: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        if probs.shape != (len(rows), self.num_classes) or edges.shape != probs.shape:
            raise ContractError(f"vote shapes {probs.shape}/{edges.shape} do not match {len(rows)} rows")
        key = tuple(float(c) for c in center)
        if key in self._votes:
            prev_rows, prev_probs, prev_edges = self._votes[key]
            if np.array_equal(prev_rows, rows) and np.array_equal(prev_probs, probs) and np.array_equal(prev_edges, edges):
                return
            raise ContractError(f"conflicting votes for sphere center {key}")
        self._votes[key] = (rows, np.asarray(probs, dtype=np.float64), np.asarray(edges, dtype=np.float64))

    @property
    def counts(self) -> np.ndarray:
        counts = np.zeros(self.num_points, dtype=np.int64)
        for rows, _, _ in self._votes.values():
            np.add.at(counts, rows, 1)
        return counts

    def finalize(self) -> tuple[np.ndarray, np.ndarray]:
        probs = np.zeros((self.num_points, self.num_classes))
        edges = np.zeros((self.num_points, self.num_classes))
        counts = np.zeros(self.num_points, dtype=np.int64)
        for key in sorted(self._votes):
            rows, p, e = self._votes[key]
            np.add.at(probs, rows, p)
            np.add.at(edges, rows, e)
            np.add.at(counts, rows, 1)
        if self.num_points and counts.min() == 0:
            raise ContractError(f"{np.count_nonzero(counts == 0)} points were never visited")
        return probs / counts[:, None], edges / counts[:, None]


def sphere_grid(cloud: PointCloud, spacing: float) -> np.ndarray:
    """Centers of the occupied cells of a regular grid; with spacing <= radius every point is covered."""
    coords = np.floor(cloud.positions / spacing).astype(np.int64)
    cells = np.unique(coords, axis=0)
    return (cells + 0.5) * spacing


@dataclass
class Prediction:
    cloud: PointCloud
    probs: np.ndarray
    edges: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=1).astype(np.int64)

    def edge_labels(self, threshold: float = 0.5) -> SemanticEdgeLabels:
        k = self.edges.shape[1]
        weights = np.left_shift(np.uint64(1), np.arange(k, dtype=np.uint64))
        bits = np.bitwise_or.reduce(np.where(self.edges >= threshold, weights, np.uint64(0)), axis=1)
        return SemanticEdgeLabels(bits.astype(np.uint64), k)


def predict_sphere(model: JSENet, sphere: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    with T.no_grad():
        outputs = model.forward(model.prepare(sphere))
        return outputs.probabilities(), outputs.edge_maps()


def infer_voting(
    model: JSENet,
    scene: Scene,
    centers: np.ndarray | None = None,
    threads: int | None = None,
) -> Prediction:
    """Average per-sphere outputs over the subsampled scene, then project to the original points."""
    config = model.config
    model.eval()
    cloud = scene.cloud
    radius = config.sphere_radius
    centers = sphere_grid(cloud, radius) if centers is None else np.asarray(centers, dtype=np.float64).reshape(-1, 3)

    covered = np.zeros(len(cloud), dtype=bool)
    for center in centers:
        covered |= np.sum((cloud.positions - center) ** 2, axis=1) <= radius * radius
    if not covered.all():
        extra = cloud.positions[~covered]
        logger.warning("%d points not covered by the sphere grid; adding spheres on them", len(extra))
        centers = np.concatenate([centers, _cover(cloud.positions, extra, radius)], axis=0)

    def run(center: np.ndarray):
        sphere = sample_sphere(cloud, center, radius)
        if len(sphere) == 0:
            return center, None
        return center, (sphere.source_indices, *predict_sphere(model, sphere))

    votes = VoteAccumulator(len(cloud), config.num_classes)
    for center, result in parallel_map(run, list(centers), threads):
        if result is not None:
            votes.add(center, *result)
    probs, edges = votes.finalize()
    logger.info("Voted %d spheres over %d points of '%s'", len(centers), len(cloud), scene.name)
    return Prediction(
        scene.original,
        project_nearest(cloud, scene.original, probs),
        project_nearest(cloud, scene.original, edges),
    )


def _cover(positions: np.ndarray, uncovered: np.ndarray, radius: float) -> np.ndarray:
    """Greedy extra centers, each on a still-uncovered point."""
    centers = []
    remaining = uncovered
    while len(remaining):
        center = remaining[0]
        centers.append(center)
        remaining = remaining[np.sum((remaining - center) ** 2, axis=1) > radius * radius]
    return np.asarray(centers).reshape(-1, 3)


# --- Prediction files ---

def write_prediction(path: str | Path, prediction: Prediction) -> None:
    """PLY with the predicted label and per-class `prob_k` / `edge_k` float properties."""
    extra = {f"prob_{k}": prediction.probs[:, k] for k in range(prediction.probs.shape[1])}
    extra.update({f"edge_{k}": prediction.edges[:, k] for k in range(prediction.edges.shape[1])})
    cloud = prediction.cloud
    write_cloud(path, PointCloud(cloud.positions, cloud.colors, prediction.labels), extra=extra)


def read_prediction(path: str | Path) -> Prediction:
    vertex = read_ply(path).get("vertex")
    if vertex is None:
        raise InputError(f"'{path}' has no vertex element")
    k = len([name for name in vertex if name.startswith("prob_")])
    if k == 0 or any(f"edge_{i}" not in vertex or f"prob_{i}" not in vertex for i in range(k)):
        raise InputError(f"'{path}' is not a prediction file (prob_k / edge_k properties missing)")
    positions = np.stack([vertex[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
    probs = np.stack([vertex[f"prob_{i}"].astype(np.float64) for i in range(k)], axis=1)
    edges = np.stack([vertex[f"edge_{i}"].astype(np.float64) for i in range(k)], axis=1)
    labels = vertex["label"].astype(np.int64) if "label" in vertex else probs.argmax(axis=1)
    return Prediction(PointCloud(positions, labels=labels), probs, edges)
