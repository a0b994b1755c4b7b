"""Test-phase pipeline: threshold objectness, decode candidates, cluster.

Every occupied cell whose positive logit beats the background logit yields a
candidate: the 24-channel box output decoded back to world-frame corners at
that cell's source point. Candidates are clustered by neighbor counting:
a candidate's score is the number of candidates (itself included) within
Euclidean distance delta in the 24-d corner space; picks proceed from high
score to low, each pick consuming every candidate whose source point lies
inside the picked box, until the best remaining score drops below min_score.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import boxcodec, tensornet
from .boxcodec import Box3D, BoxFitError
from .pointmap import PointMap, ProjectionConfig, RawScan, project_scan

log = logging.getLogger(__name__)


@dataclass
class DetectConfig:
    delta: float = 2.0            # neighbor radius in the 24-d corner space
    min_score: int = 5            # neighbor-count cutoff, self included
    containment_margin: float = 0.1  # face padding when consuming points
    box_fit_tol: float = 0.5      # worst corner residual accepted by the fit

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.min_score < 1:
            raise ValueError("min_score must be at least 1")


@dataclass
class Candidate:
    corners24: np.ndarray  # decoded world-frame corners, concatenated
    row: int
    col: int
    point: np.ndarray      # source point of the cell
    prob: float            # positive-channel softmax probability


@dataclass
class Detection:
    box: Box3D
    score: int             # neighbor count at pick time
    confidence: float      # mean positive probability over consumed cells
    num_consumed: int = 1


def extract_candidates(objectness: np.ndarray, boxmap: np.ndarray,
                       pmap: PointMap, scan: RawScan) -> list[Candidate]:
    """One candidate per occupied cell predicted positive."""
    if objectness.shape[1:] != pmap.cfg.shape or boxmap.shape[1:] != pmap.cfg.shape:
        raise ValueError("head shapes do not match the point map")
    probs = tensornet.softmax2(np.asarray(objectness, dtype=np.float64))
    positive = pmap.occupied & (objectness[1] > objectness[0])
    rows, cols = np.nonzero(positive)
    if len(rows) == 0:
        return []
    anchors = scan.points[pmap.source_index[rows, cols]]
    encs = boxmap[:, rows, cols].T
    corners = boxcodec.decode_boxes(encs, anchors).reshape(-1, 24)
    return [
        Candidate(corners[i], int(rows[i]), int(cols[i]), anchors[i],
                  float(probs[1, rows[i], cols[i]]))
        for i in range(len(rows))
    ]


def _neighbor_counts(x: np.ndarray, delta: float) -> np.ndarray:
    """counts[i] = #{j : ||x_j - x_i|| < delta}, self included."""
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.count_nonzero(d2 < delta * delta, axis=1)


def nms(candidates: list[Candidate], delta: float, min_score: int = 5,
        containment_margin: float = 0.1,
        box_fit_tol: float = 0.5) -> list[Detection]:
    """Neighbor-count non-max suppression over the 24-d corner encodings.

    Scores are recomputed over the remaining set after every pick; ties on
    equal score break toward the lower (row, col) source cell.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    alive = list(range(len(candidates)))
    corners = (np.stack([c.corners24 for c in candidates])
               if candidates else np.zeros((0, 24)))
    points = (np.stack([c.point for c in candidates])
              if candidates else np.zeros((0, 3)))
    detections = []
    while alive:
        idx = np.array(alive)
        counts = _neighbor_counts(corners[idx], delta)
        order = np.lexsort((
            [candidates[i].col for i in alive],
            [candidates[i].row for i in alive],
            -counts,
        ))
        best = order[0]
        score = int(counts[best])
        if score < min_score:
            break
        pick = candidates[alive[best]]
        try:
            box = boxcodec.params_from_corners(pick.corners24.reshape(8, 3),
                                               tol=box_fit_tol)
        except BoxFitError as err:
            log.info("dropping pick at cell (%d, %d): %s",
                     pick.row, pick.col, err)
            box = None
        inside = box.contains(points[idx], margin=containment_margin) \
            if box is not None else np.zeros(len(idx), dtype=bool)
        inside[best] = True
        consumed = [alive[i] for i in np.nonzero(inside)[0]]
        if box is not None:
            conf = float(np.mean([candidates[i].prob for i in consumed]))
            detections.append(Detection(box, score, conf, len(consumed)))
        alive = [i for i in alive if i not in set(consumed)]
    return detections


def detect(net: tensornet.NetworkSpec, params: dict, scan: RawScan,
           proj_cfg: ProjectionConfig,
           cfg: DetectConfig | None = None) -> list[Detection]:
    """Project, run the network, decode candidates, suppress."""
    cfg = cfg or DetectConfig()
    pmap = project_scan(scan, proj_cfg)
    obj, boxmap = tensornet.forward(net, params, pmap.channels(np.float32))
    candidates = extract_candidates(obj, boxmap, pmap, scan)
    return nms(candidates, cfg.delta, cfg.min_score,
               cfg.containment_margin, cfg.box_fit_tol)


DETECTION_CSV_HEADER = ("scan_id,cx,cy,cz,length,width,height,yaw,"
                        "score,confidence")


def detection_csv_rows(scan_id: str, detections: list[Detection]) -> list[str]:
    rows = []
    for d in detections:
        c = d.box.center
        rows.append(
            f"{scan_id},{c[0]!r},{c[1]!r},{c[2]!r},{d.box.length!r},"
            f"{d.box.width!r},{d.box.height!r},{d.box.yaw!r},"
            f"{d.score},{d.confidence!r}"
        )
    return rows
