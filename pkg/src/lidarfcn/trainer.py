"""Label rasters, the weighted two-branch loss, augmentation, and training.

Loss over a scan with point set P (occupied, non-ignored cells) and vehicle
subset V:

    L = sum_{p in P} w1(p) w2(p) L_obj(p) + w_box sum_{p in V} w2(p) L_box(p)

where L_obj is the softmax cross-entropy of the 2-channel objectness head,
L_box the squared L2 distance between the 24-channel box head and the
encoded target, w1 rebalances negatives to k|V| total weight, and w2 = n/n(p)
rebalances vehicles by their cell count n(p) against the dataset mean n.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import boxcodec, tensornet
from .boxcodec import Box3D
from .pointmap import (TAG_BACKGROUND, TAG_IGNORE, PointMap, ProjectionConfig,
                       RawScan, RigidTransform, apply_rigid_transform,
                       project_scan)

log = logging.getLogger(__name__)

CLASS_CAR = "car"
CLASS_IGNORE = "ignore"

# (Box3D, class) pairs; class is CLASS_CAR or CLASS_IGNORE.
BoxList = list


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LossConfig:
    k: float = 4.0           # negative-balance factor
    w_box: float = 0.05      # box-branch weight
    n_bar: float = 0.0       # mean vehicle cell count; 0 = not yet computed

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.w_box < 0:
            raise ValueError("w_box must be nonnegative")


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-5
    momentum: float = 0.9
    max_rotation: float = math.radians(10.0)   # z-rotation range, radians
    max_translation: tuple = (1.0, 1.0, 0.2)   # per-axis range, meters
    seed: int = 0
    lr_decay_step: int = 0                     # 0 disables step decay
    lr_decay_factor: float = 0.1
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.max_rotation < 0 or any(t < 0 for t in self.max_translation):
            raise ValueError("augmentation ranges must be nonnegative")


@dataclass
class LabelMap:
    """Per-cell training targets aligned with a PointMap."""

    label: np.ndarray        # (H, W) int8; 1 on vehicle cells
    ignore: np.ndarray       # (H, W) bool; excluded from both losses
    vehicle_id: np.ndarray   # (H, W) int64; -1 off vehicles
    point_count: np.ndarray  # (H, W) int64; n(p) on vehicle cells, else 0
    targets: np.ndarray      # (24, H, W) float64; encoded boxes on vehicle cells
    occupied: np.ndarray     # (H, W) bool, from the source point map

    @property
    def p_mask(self) -> np.ndarray:
        """Cells of the point set P: occupied and not ignored."""
        return self.occupied & ~self.ignore

    @property
    def v_mask(self) -> np.ndarray:
        return self.label == 1

    def num_p(self) -> int:
        return int(self.p_mask.sum())

    def num_v(self) -> int:
        return int(self.v_mask.sum())


def car_boxes(boxes: BoxList) -> list:
    return [b for b, cls in boxes if cls == CLASS_CAR]


def tag_points(points: np.ndarray, boxes: BoxList,
               margin: float = 0.0) -> np.ndarray:
    """Class tags by box containment; car boxes win over ignore boxes.

    Vehicle ids follow the order of car boxes in `boxes`; the first
    containing car box claims a point.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tags = np.full(len(points), TAG_BACKGROUND, dtype=np.int64)
    for box, cls in boxes:
        if cls != CLASS_IGNORE:
            continue
        tags[box.contains(points, margin)] = TAG_IGNORE
    for vid, box in enumerate(car_boxes(boxes)):
        inside = box.contains(points, margin) & (tags < 0)
        tags[inside] = vid
    return tags


def build_labels(scan: RawScan, boxes: BoxList, pmap: PointMap) -> LabelMap:
    """Rasterize per-point tags and per-vehicle box encodings onto the map."""
    cars = car_boxes(boxes)
    h, w = pmap.cfg.shape
    label = np.zeros((h, w), dtype=np.int8)
    ignore = np.zeros((h, w), dtype=bool)
    vid_grid = np.full((h, w), -1, dtype=np.int64)
    count = np.zeros((h, w), dtype=np.int64)
    targets = np.zeros((24, h, w))

    occ = pmap.occupied
    src = pmap.source_index[occ]
    tags = scan.tags[src]
    if tags.max(initial=-2) >= len(cars):
        raise ValueError(
            f"vehicle id {tags.max()} has no box; only {len(cars)} car boxes"
        )
    ignore[occ] = tags == TAG_IGNORE
    label[occ] = (tags >= 0).astype(np.int8)
    vid_grid[occ] = np.where(tags >= 0, tags, -1)

    rows, cols = np.nonzero(label == 1)
    vids = vid_grid[rows, cols]
    per_vehicle = np.bincount(vids, minlength=len(cars))
    count[rows, cols] = per_vehicle[vids]
    for vid, box in enumerate(cars):
        sel = vids == vid
        if not sel.any():
            log.info("vehicle %d has no projected points", vid)
            continue
        anchors = scan.points[pmap.source_index[rows[sel], cols[sel]]]
        enc = boxcodec.encode_box_at(box, anchors)
        targets[:, rows[sel], cols[sel]] = enc.T
    return LabelMap(label, ignore, vid_grid, count, targets, occ.copy())


def objectness_loss(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], numerically stable."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def box_loss(output: np.ndarray, target: np.ndarray) -> float:
    """Squared L2 distance; defined on vehicle cells only."""
    diff = np.asarray(output, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(diff @ diff)


def sample_weights(labels: LabelMap, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell (w1, w2); zero outside the point set P.

    Negatives share w1 = k|V|/(|P|-|V|) so their total equals k|V|; each
    vehicle's cells carry w2 = n_bar/n(p) so the vehicle totals n_bar.
    """
    if cfg.n_bar <= 0:
        raise ValueError("n_bar must be positive (compute it from the dataset)")
    p_mask, v_mask = labels.p_mask, labels.v_mask
    num_p, num_v = labels.num_p(), labels.num_v()
    if num_p <= num_v:
        raise ValueError("no background cells; w1 undefined")
    neg_mask = p_mask & ~v_mask
    if num_v > 0:
        neg_w = cfg.k * num_v / (num_p - num_v)
    else:
        # Degenerate vehicle-free scan: pretend one average-size vehicle.
        neg_w = cfg.k * cfg.n_bar / num_p
    w1 = np.where(v_mask, 1.0, np.where(neg_mask, neg_w, 0.0))
    w2 = np.where(neg_mask, 1.0, 0.0)
    counts = labels.point_count[v_mask]
    w2[v_mask] = cfg.n_bar / counts
    return w1, w2


def total_loss(objectness: np.ndarray, boxes_out: np.ndarray,
               labels: LabelMap, cfg: LossConfig):
    """Weighted combined loss and its analytic head gradients.

    Returns (total, objectness_term, box_term, d_objectness, d_boxes).
    Ignored cells contribute exactly zero to all five outputs.
    """
    w1, w2 = sample_weights(labels, cfg)
    w12 = w1 * w2
    p_mask, v_mask = labels.p_mask, labels.v_mask

    shifted = objectness - objectness.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    norm = exp.sum(axis=0, keepdims=True)
    logp = shifted - np.log(norm)
    probs = exp / norm

    lbl = (labels.label == 1).astype(np.int64)
    per_cell_obj = -np.take_along_axis(logp, lbl[None], axis=0)[0]
    obj_term = float(np.sum(per_cell_obj * w12, where=p_mask, dtype=np.float64))

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, lbl[None], 1.0, axis=0)
    d_obj = (probs - onehot) * (w12 * p_mask)[None]

    diff = boxes_out - labels.targets
    per_cell_box = np.sum(diff * diff, axis=0)
    box_term = float(cfg.w_box * np.sum(per_cell_box * w2, where=v_mask,
                                        dtype=np.float64))
    d_box = (2.0 * cfg.w_box) * diff * (w2 * v_mask)[None]

    total = obj_term + box_term
    if not math.isfinite(total):
        per = np.where(p_mask, per_cell_obj * w12, 0.0) \
            + np.where(v_mask, cfg.w_box * per_cell_box * w2, 0.0)
        bad = np.argwhere(~np.isfinite(per))
        cell = tuple(bad[0]) if len(bad) else "unknown"
        raise FloatingPointError(f"non-finite loss at cell {cell}")
    return total, obj_term, box_term, d_obj.astype(objectness.dtype), \
        d_box.astype(boxes_out.dtype)


def augment(scan: RawScan, boxes: BoxList, cfg: TrainConfig,
            rng: np.random.Generator):
    """One random rigid transform applied to the scan and all its boxes."""
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
    trans = np.array([rng.uniform(-t, t) for t in cfg.max_translation])
    t = RigidTransform.rot_z(angle, trans)
    moved = [(box.transformed(t.rotation, t.translation), cls)
             for box, cls in boxes]
    return apply_rigid_transform(scan, t), moved


def mean_vehicle_cells(frames, proj_cfg: ProjectionConfig) -> float:
    """Dataset statistic n_bar: mean occupied-cell count over all vehicles."""
    counts = []
    for scan, boxes in frames:
        pmap = project_scan(scan, proj_cfg)
        occ = pmap.occupied
        tags = scan.tags[pmap.source_index[occ]]
        per = np.bincount(tags[tags >= 0], minlength=len(car_boxes(boxes)))
        counts.extend(int(c) for c in per if c > 0)
    if not counts:
        raise ValueError("dataset contains no projected vehicle points")
    return float(np.mean(counts))


@dataclass
class LossRow:
    iteration: int
    objectness: float
    box: float
    total: float

    def csv(self) -> str:
        return f"{self.iteration},{self.objectness!r},{self.box!r},{self.total!r}"


LOSS_CSV_HEADER = "iteration,objectness_loss,box_loss,total"


def train(frames, proj_cfg: ProjectionConfig, net: tensornet.NetworkSpec,
          params: dict, loss_cfg: LossConfig, cfg: TrainConfig,
          start_iteration: int = 0, dtype=np.float32,
          callback=None) -> list[LossRow]:
    """SGD loop: sample, augment, project, label, forward, loss, backward, step.

    Mutates `params` in place and returns the per-iteration loss log.
    Raises TrainingDiverged when the total loss exceeds the divergence limit.
    """
    if not frames:
        raise ValueError("training needs a nonempty dataset")
    proj_cfg.require_network_compatible()
    rng = np.random.default_rng(cfg.seed + start_iteration)
    velocity = {}
    rows = []
    for j in range(cfg.iterations):
        it = start_iteration + j
        scan, boxes = frames[int(rng.integers(len(frames)))]
        scan, boxes = augment(scan, boxes, cfg, rng)
        pmap = project_scan(scan, proj_cfg)
        labels = build_labels(scan, boxes, pmap)
        x = pmap.channels(dtype)
        obj, box, cache = tensornet.forward(net, params, x, want_cache=True)
        total, obj_term, box_term, d_obj, d_box = total_loss(
            obj, box, labels, loss_cfg)
        rows.append(LossRow(it, obj_term, box_term, total))
        if total > cfg.divergence_limit:
            raise TrainingDiverged(
                f"loss {total:.3e} exceeded {cfg.divergence_limit:.1e} "
                f"at iteration {it}"
            )
        if cfg.lr > 0:
            lr = cfg.lr
            if cfg.lr_decay_step > 0:
                lr *= cfg.lr_decay_factor ** (it // cfg.lr_decay_step)
            grads = tensornet.backward(net, params, cache, d_obj, d_box)
            tensornet.sgd_step(params, grads, velocity, lr, cfg.momentum)
        if callback is not None:
            callback(it, rows[-1])
    return rows
