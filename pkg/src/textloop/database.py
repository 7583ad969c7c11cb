"""Observation store indexed both by text content and by frame."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .entities import TextCategory, TextEntity


@dataclass(frozen=True)
class Observation:
    """One anchored sighting of a text string."""

    frame: int
    content: str
    category: TextCategory
    pose: Pose
    confidence: float


class ObservationDatabase:
    """Bidirectional index: content -> observations and frame -> observations.

    Insertion order is preserved in both views.  Exact duplicates (same frame,
    content, and pose bit for bit) are rejected.
    """

    def __init__(self):
        self._by_content: dict[str, list[Observation]] = {}
        self._by_frame: dict[int, list[Observation]] = {}
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def contents(self) -> list[str]:
        return list(self._by_content.keys())

    @property
    def frames(self) -> list[int]:
        return list(self._by_frame.keys())

    def insert(self, frame: int, entity: TextEntity) -> bool:
        """Add an observation; returns False for an exact duplicate."""
        obs = Observation(
            frame=frame,
            content=entity.content,
            category=entity.category,
            pose=entity.pose_in_anchor,
            confidence=entity.confidence,
        )
        for prior in self._by_content.get(obs.content, ()):
            if (
                prior.frame == frame
                and np.array_equal(prior.pose.rotation, obs.pose.rotation)
                and np.array_equal(prior.pose.translation, obs.pose.translation)
            ):
                return False
        self._by_content.setdefault(obs.content, []).append(obs)
        self._by_frame.setdefault(frame, []).append(obs)
        self._count += 1
        return True

    def frames_observing(self, content: str) -> list[Observation]:
        """All observations of a content string, oldest first; [] when unseen."""
        return list(self._by_content.get(content, ()))

    def entities_in_frame(self, frame: int) -> list[Observation]:
        """All observations anchored to a frame; [] when the frame saw no text."""
        return list(self._by_frame.get(frame, ()))

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as stream:
            for frame in self._by_frame:
                for obs in self._by_frame[frame]:
                    stream.write(
                        json.dumps(
                            {
                                "frame": obs.frame,
                                "content": obs.content,
                                "category": obs.category.value,
                                "pose": obs.pose.to_json(),
                                "conf": obs.confidence,
                            }
                        )
                        + "\n"
                    )

    @classmethod
    def load_jsonl(cls, path) -> "ObservationDatabase":
        db = cls()
        with open(path) as stream:
            for line in stream:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                db.insert(
                    obj["frame"],
                    TextEntity(
                        content=obj["content"],
                        category=TextCategory(obj["category"]),
                        pose_in_anchor=Pose.from_json(obj["pose"]),
                        anchor_frame=obj["frame"],
                        confidence=obj["conf"],
                    ),
                )
        return db
