"""Loop constraint generation from re-observed text entities.

ID texts shortcut the association stage: equal content is already a strong
cue, so candidates go straight to a point cloud check.  Generic texts run the
consistency verification first.  Accepted pairs become relative-pose
constraints between the two anchor frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from .association import AssociationParams, Ltem, build_ltem, verify_candidate
from .database import Observation, ObservationDatabase
from .entities import TextCategory, TextEntity, TooFewPoints
from .geometry import Pose

MIN_TRAVEL_DISTANCE = 10.0
MAX_LOOP_OFFSET = 1.5
COOLDOWN_FRAMES = 10
LOOP_SIGMA_T = 0.1
LOOP_SIGMA_R = 0.05
UNREFINED_SIGMA_SCALE = 2.0


class LoopSource(Enum):
    ID_TEXT = "id"
    GENERIC_TEXT = "generic"


@dataclass(frozen=True)
class LocalCloud:
    """Per-frame LiDAR returns in that frame's own coordinates."""

    frame: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    tolerance: float = 1e-6
    max_correspondence: float = 0.5
    min_fitness: float = 0.6
    max_rms: float = 0.15
    min_points: int = 50


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    fitness: float
    rms: float
    converged: bool
    accepted: bool


@dataclass(frozen=True)
class LoopConstraint:
    """Relative pose mapping frame_j coordinates into frame_i (frame_j earlier)."""

    frame_i: int
    frame_j: int
    relative_pose: Pose
    information: np.ndarray
    source: LoopSource

    def __post_init__(self):
        if self.frame_j >= self.frame_i:
            raise ValueError(f"constraint must point backward: {self.frame_i} <= {self.frame_j}")
        info = np.asarray(self.information, dtype=float).reshape(6, 6)
        object.__setattr__(self, "information", info)

    def to_json(self) -> dict:
        return {
            "i": self.frame_i,
            "j": self.frame_j,
            "pose": self.relative_pose.to_json(),
            "info_diag": [float(x) for x in np.diag(self.information)],
            "source": self.source.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LoopConstraint":
        return cls(
            frame_i=obj["i"],
            frame_j=obj["j"],
            relative_pose=Pose.from_json(obj["pose"]),
            information=np.diag(obj["info_diag"]),
            source=LoopSource(obj["source"]),
        )


def relative_pose_from_entities(text_in_i: Pose, text_in_j: Pose) -> Pose:
    """Motion from frame j into frame i given one text seen from both."""
    return text_in_i @ text_in_j.inverse()


def _kabsch(source: np.ndarray, target: np.ndarray) -> Pose:
    """Least-squares rigid transform taking source points onto target points."""
    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    h = (source - centroid_s).T @ (target - centroid_t)
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return Pose(rot, centroid_t - rot @ centroid_s)


def icp_verify(
    cloud_i: LocalCloud, cloud_j: LocalCloud, init: Pose, params: IcpParams = IcpParams()
) -> IcpResult:
    """Point-to-point ICP aligning cloud_j onto cloud_i, seeded at `init`.

    Returns the refined j-to-i pose with fitness (inlier fraction at the
    correspondence cutoff) and inlier RMS.  Raises TooFewPoints when either
    cloud is below params.min_points.
    """
    target = cloud_i.points
    source = cloud_j.points
    if len(target) < params.min_points or len(source) < params.min_points:
        raise TooFewPoints(f"clouds have {len(target)} and {len(source)} points")
    tree = cKDTree(target)
    pose = init
    last_rms = np.inf
    fitness = 0.0
    rms = np.inf
    converged = False
    for _ in range(params.max_iterations):
        moved = pose.apply(source)
        dist, index = tree.query(moved, distance_upper_bound=params.max_correspondence)
        matched = np.isfinite(dist)
        fitness = float(matched.sum()) / len(source)
        if matched.sum() < 3:
            break
        rms = float(np.sqrt(np.mean(dist[matched] ** 2)))
        if abs(last_rms - rms) < params.tolerance:
            converged = True
            break
        last_rms = rms
        pose = _kabsch(source[matched], target[index[matched]])
    accepted = converged and fitness >= params.min_fitness and rms <= params.max_rms
    return IcpResult(pose=pose, fitness=fitness, rms=rms, converged=converged, accepted=accepted)


@dataclass(frozen=True)
class DetectorParams:
    s_min: float = MIN_TRAVEL_DISTANCE
    max_offset: float = MAX_LOOP_OFFSET
    cooldown_frames: int = COOLDOWN_FRAMES
    loop_sigma_t: float = LOOP_SIGMA_T
    loop_sigma_r: float = LOOP_SIGMA_R
    unrefined_scale: float = UNREFINED_SIGMA_SCALE
    gate_generic_with_icp: bool = True
    refine_poses: bool = True
    association: AssociationParams = field(default_factory=AssociationParams)
    icp: IcpParams = field(default_factory=IcpParams)


class DetectorState:
    """Streaming state: odometry, per-frame clouds, the text database, cooldowns."""

    def __init__(self, params: DetectorParams = DetectorParams()):
        self.params = params
        self.db = ObservationDatabase()
        self.stamps: list[float] = []
        self.poses: list[Pose] = []
        self.clouds: dict[int, LocalCloud] = {}
        self._cum: np.ndarray = np.zeros(0)
        self._accepted: list[tuple[int, int]] = []

    def add_odometry(self, stamp: float, pose: Pose) -> int:
        frame = len(self.poses)
        if not self.poses:
            self._cum = np.zeros(1)
        else:
            step = float(np.linalg.norm(pose.translation - self.poses[-1].translation))
            self._cum = np.append(self._cum, self._cum[-1] + step)
        self.stamps.append(stamp)
        self.poses.append(pose)
        return frame

    def add_cloud(self, frame: int, points: np.ndarray) -> None:
        self.clouds[frame] = LocalCloud(frame=frame, points=points)

    def travel_between(self, frame_j: int, frame_i: int) -> float:
        return float(self._cum[frame_i] - self._cum[frame_j])

    @property
    def cum_path(self) -> np.ndarray:
        return self._cum

    def in_cooldown(self, frame_i: int, frame_j: int) -> bool:
        window = self.params.cooldown_frames
        return any(
            abs(frame_i - i) < window and abs(frame_j - j) < window for i, j in self._accepted
        )

    def record_accepted(self, frame_i: int, frame_j: int) -> None:
        self._accepted.append((frame_i, frame_j))


def _information_matrix(params: DetectorParams, refined: bool) -> np.ndarray:
    sigma_t = params.loop_sigma_t
    sigma_r = params.loop_sigma_r
    if not refined:
        sigma_t *= params.unrefined_scale
        sigma_r *= params.unrefined_scale
    diag = [1.0 / sigma_t**2] * 3 + [1.0 / sigma_r**2] * 3
    return np.diag(diag)


def _icp_between(state: DetectorState, frame_i: int, frame_j: int, init: Pose):
    cloud_i = state.clouds.get(frame_i)
    cloud_j = state.clouds.get(frame_j)
    if cloud_i is None or cloud_j is None:
        return None
    try:
        return icp_verify(cloud_i, cloud_j, init, state.params.icp)
    except TooFewPoints:
        return None


def _candidate_observations(state: DetectorState, entity: TextEntity, frame: int):
    """Prior sightings of the same content far enough back along the path."""
    out = []
    for obs in state.db.frames_observing(entity.content):
        if obs.frame >= frame:
            continue
        if state.travel_between(obs.frame, frame) <= state.params.s_min:
            continue
        out.append(obs)
    return out


def _close_loop(
    state: DetectorState,
    frame: int,
    entity: TextEntity,
    obs: Observation,
    source: LoopSource,
) -> LoopConstraint | None:
    prior = relative_pose_from_entities(entity.pose_in_anchor, obs.pose)
    icp = _icp_between(state, frame, obs.frame, prior)
    if source is LoopSource.ID_TEXT:
        # content alone cannot distinguish repeated installations of one sign,
        # so the cloud check is mandatory for ID texts
        if icp is None or not icp.accepted:
            return None
    elif state.params.gate_generic_with_icp and icp is not None and not icp.accepted:
        return None
    use_refined = state.params.refine_poses and icp is not None and icp.accepted
    pose = icp.pose if use_refined else prior
    # the relative translation measures how far apart the two poses really
    # are; a large value means "same sign seen from elsewhere", not a revisit
    if float(np.linalg.norm(pose.translation)) > state.params.max_offset:
        return None
    return LoopConstraint(
        frame_i=frame,
        frame_j=obs.frame,
        relative_pose=pose,
        information=_information_matrix(state.params, refined=use_refined),
        source=source,
    )


def process_frame(
    state: DetectorState, frame: int, entities: list[TextEntity]
) -> list[LoopConstraint]:
    """Ingest one frame's text entities and emit any resulting loop constraints.

    Entities are inserted into the database here; candidate retrieval happens
    first so an observation never matches itself.  At most one constraint per
    (frame, candidate frame) pair is produced, and accepted pairs suppress
    nearby pairs for cooldown_frames in both indices.
    """
    candidates: list[tuple[TextEntity, Observation]] = []
    for entity in entities:
        for obs in _candidate_observations(state, entity, frame):
            candidates.append((entity, obs))
    for entity in entities:
        state.db.insert(frame, entity)
    if not candidates:
        return []
    # ordered by candidate frame, then db insertion order
    candidates.sort(key=lambda pair: pair[1].frame)
    params = state.params
    map_c: Ltem | None = None
    constraints: list[LoopConstraint] = []
    done_pairs: set[tuple[int, int]] = set()
    for entity, obs in candidates:
        pair = (frame, obs.frame)
        if pair in done_pairs or state.in_cooldown(*pair):
            continue
        if entity.category is TextCategory.ID:
            constraint = _close_loop(state, frame, entity, obs, LoopSource.ID_TEXT)
        else:
            if map_c is None:
                map_c = build_ltem(
                    state.db,
                    state.poses,
                    frame,
                    "past",
                    params.association.d_ltem,
                    params.association.r_merge,
                    state.cum_path,
                )
            match = verify_candidate(
                state.db,
                state.poses,
                entity,
                frame,
                obs.frame,
                params.association,
                map_c=map_c,
                cum_path=state.cum_path,
            )
            if match is None:
                continue
            constraint = _close_loop(state, frame, entity, obs, LoopSource.GENERIC_TEXT)
        if constraint is None:
            continue
        constraints.append(constraint)
        done_pairs.add(pair)
        state.record_accepted(*pair)
    return constraints
