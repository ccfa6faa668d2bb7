"""Annotation I/O, window slicing and the synthetic pinhole-camera scene generator."""

from __future__ import annotations

import dataclasses
import gzip
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import GapError, ParseError, ProjectionError, SchemaError
from .geometry import (
    ACCEL,
    DEFAULT_RATIO,
    EGO_FIELDS,
    SPEED,
    YAW,
    BoundingBox,
    Corpus,
    ImageGeometry,
    Split,
    TrajectorySample,
    measure_visible_aspect_ratio,
)

DEFAULT_FPS = 30.0
DEFAULT_OBS = 15
DEFAULT_PRED = 45

PED_HEIGHT_M = 1.7
PED_WIDTH_M = 0.5
GAIT_JITTER = 0.15
MIN_DEPTH_M = 0.5
EARTH_RADIUS_M = 6_378_137.0
TRUTH_KEY = "_truth"


@dataclass(frozen=True, eq=False)
class RawTrack:
    video_id: str
    ped_id: str
    frames: np.ndarray  # (n,) int64
    boxes: np.ndarray  # (n, 4)
    walking: np.ndarray  # (n,) bool
    ego: np.ndarray  # (n, 6), columns per EGO_FIELDS
    geometry: ImageGeometry
    fps: float = DEFAULT_FPS
    truth: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.frames)


# --------------------------------------------------------------------------
# JSON-Lines annotations
# --------------------------------------------------------------------------


def _open_text(path: Path, mode: str):
    if str(path).endswith(".gz"):
        if "w" in mode:
            raw = open(path, "wb")
            # mtime=0 keeps compressed output byte-reproducible.
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return _ClosingWrapper(io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n")


class _ClosingWrapper:
    def __init__(self, text, raw):
        self._text, self._raw = text, raw

    def write(self, s):
        return self._text.write(s)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._text.close()
        self._raw.close()


def _require(obj: dict, key: str, line: int):
    if key not in obj:
        raise SchemaError(f"missing field {key!r}", line)
    return obj[key]


def _parse_record(obj: Any, line: int) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError("record is not an object", line)
    box = _require(obj, "box", line)
    if not isinstance(box, list) or len(box) != 4:
        raise SchemaError("box must be a list of 4 numbers", line)
    state = _require(obj, "state", line)
    if state not in ("walking", "standing"):
        raise SchemaError(f"state must be 'walking' or 'standing', got {state!r}", line)
    ego = _require(obj, "ego", line)
    image = _require(obj, "image", line)
    if not isinstance(ego, dict) or not isinstance(image, dict):
        raise SchemaError("ego and image must be objects", line)
    try:
        rec = {
            "video_id": str(_require(obj, "video_id", line)),
            "ped_id": str(_require(obj, "ped_id", line)),
            "frame": int(_require(obj, "frame", line)),
            "box": [float(v) for v in box],
            "walking": state == "walking",
            "ego": [float(_require(ego, k, line)) for k in EGO_FIELDS],
            "image": (int(_require(image, "w", line)), int(_require(image, "h", line))),
        }
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad value: {exc}", line) from None
    BoundingBox(*rec["box"])  # validates ordering and finiteness
    truth = obj.get(TRUTH_KEY)
    if truth is not None:
        rec["truth"] = {k: np.asarray(v, dtype=np.float64) for k, v in truth.items()}
    return rec


def parse_annotations(path, fps: float = DEFAULT_FPS) -> list[RawTrack]:
    """Read a JSON-Lines (optionally ``.gz``) annotation file into tracks.

    One track per ``(video_id, ped_id)``, in order of first appearance.
    """
    path = Path(path)
    groups: dict[tuple[str, str], list[dict]] = {}
    with _open_text(path, "r") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"malformed JSON: {exc.msg}", lineno) from None
            rec = _parse_record(obj, lineno)
            key = (rec["video_id"], rec["ped_id"])
            recs = groups.setdefault(key, [])
            if recs and rec["frame"] <= recs[-1]["frame"]:
                raise GapError(
                    f"frame {rec['frame']} does not follow {recs[-1]['frame']} for {key}", lineno
                )
            if recs and rec["image"] != recs[0]["image"]:
                raise SchemaError(f"image size changes within track {key}", lineno)
            recs.append(rec)

    tracks = []
    for (video_id, ped_id), recs in groups.items():
        truth = None
        if all("truth" in r for r in recs):
            keys = recs[0]["truth"].keys()
            truth = {k: np.stack([r["truth"][k] for r in recs]) for k in keys}
        w, h = recs[0]["image"]
        tracks.append(
            RawTrack(
                video_id=video_id,
                ped_id=ped_id,
                frames=np.array([r["frame"] for r in recs], dtype=np.int64),
                boxes=np.array([r["box"] for r in recs], dtype=np.float64),
                walking=np.array([r["walking"] for r in recs], dtype=bool),
                ego=np.array([r["ego"] for r in recs], dtype=np.float64),
                geometry=ImageGeometry(w, h),
                fps=fps,
                truth=truth,
            )
        )
    return tracks


def _track_lines(track: RawTrack) -> Iterable[str]:
    g = track.geometry
    for i in range(len(track)):
        rec = {
            "video_id": track.video_id,
            "ped_id": track.ped_id,
            "frame": int(track.frames[i]),
            "box": [float(v) for v in track.boxes[i]],
            "state": "walking" if track.walking[i] else "standing",
            "ego": {k: float(track.ego[i, j]) for j, k in enumerate(EGO_FIELDS)},
            "image": {"w": g.width, "h": g.height},
        }
        if track.truth is not None:
            rec[TRUTH_KEY] = {k: np.asarray(v[i]).tolist() for k, v in track.truth.items()}
        yield json.dumps(rec, separators=(",", ":"))


def serialize_annotations(tracks: Sequence[RawTrack], path) -> None:
    with _open_text(Path(path), "w") as fh:
        for track in tracks:
            for line in _track_lines(track):
                fh.write(line + "\n")


# --------------------------------------------------------------------------
# window slicing
# --------------------------------------------------------------------------


def window_starts(n: int, o: int, tau: int, stride: int) -> range:
    return range(0, max(0, n - (o + tau) + 1), stride)


def slice_windows(
    track: RawTrack, o: int = DEFAULT_OBS, tau: int = DEFAULT_PRED, stride: int | None = None
) -> list[TrajectorySample]:
    """Cut a track into (observation, future) windows.

    ``stride`` defaults to half the window (50% overlap). Windows that span a
    frame gap are dropped.
    """
    if stride is None:
        stride = (o + tau) // 2
    if o < 1 or tau < 1 or stride < 1:
        raise ValueError("o, tau and stride must be >= 1")
    total = o + tau
    out = []
    for start in window_starts(len(track), o, tau, stride):
        stop = start + total
        if np.any(np.diff(track.frames[start:stop]) != 1):
            continue
        mid = start + o
        truth = None
        if track.truth is not None and "full_box" in track.truth:
            truth = window_truth(
                track.truth["full_box"][start:stop],
                track.ego[start:stop],
                track.walking[start:stop],
                o,
            )
        out.append(
            TrajectorySample(
                sample_id=f"{track.video_id}/{track.ped_id}/{int(track.frames[start])}",
                video_id=track.video_id,
                ped_id=track.ped_id,
                obs_boxes=track.boxes[start:mid].copy(),
                fut_boxes=track.boxes[mid:stop].copy(),
                obs_walking=track.walking[start:mid].copy(),
                fut_walking=track.walking[mid:stop].copy(),
                obs_ego=track.ego[start:mid].copy(),
                fut_ego=track.ego[mid:stop].copy(),
                geometry=track.geometry,
                start_frame=int(track.frames[start]),
                truth=truth,
            )
        )
    return out


def corpus_from_tracks(
    tracks: Sequence[RawTrack],
    o: int = DEFAULT_OBS,
    tau: int = DEFAULT_PRED,
    stride: int | None = None,
    split: Split = Split.TRAIN,
    ratio: float | None = None,
) -> Corpus:
    """Slice every track and wrap the windows in a corpus.

    When ``ratio`` is None the visible aspect ratio is measured on the
    windows themselves (falling back to the default if nothing is fully
    visible).
    """
    samples = tuple(s for t in tracks for s in slice_windows(t, o, tau, stride))
    fps = tracks[0].fps if tracks else DEFAULT_FPS
    corpus = Corpus(samples=samples, split=split, fps=fps, visible_aspect_ratio=DEFAULT_RATIO)
    if ratio is None and samples:
        try:
            ratio = measure_visible_aspect_ratio(corpus)
        except ValueError:
            ratio = DEFAULT_RATIO
    return Corpus(
        samples=samples, split=split, fps=fps, visible_aspect_ratio=ratio or DEFAULT_RATIO
    )


def load_corpus(path, o=DEFAULT_OBS, tau=DEFAULT_PRED, stride=None, fps=DEFAULT_FPS,
                split=Split.TRAIN, ratio=None) -> Corpus:
    return corpus_from_tracks(parse_annotations(path, fps=fps), o, tau, stride, split, ratio)


# --------------------------------------------------------------------------
# generator-side ground truth
# --------------------------------------------------------------------------

# Written independently of the scenario engine so the two can be compared.
_SCALE_EDGES = [50.0, 80.0, 100.0, 150.0, 200.0, 300.0]
_SCALE_NAMES = ["0-50", "50-80", "80-100", "100-150", "150-200", "200-300", "300+"]
_SPEED_EDGES = [5.0, 10.0, 20.0, 30.0]
_SPEED_NAMES = ["0-5", "5-10", "10-20", "20-30", "30+"]


def window_truth(full_boxes: np.ndarray, ego: np.ndarray, walking: np.ndarray, o: int) -> dict:
    heights = full_boxes[:o, 3] - full_boxes[:o, 1]
    mean_h = math.fsum(heights) / o
    scale = _SCALE_NAMES[int(np.searchsorted(_SCALE_EDGES, mean_h, side="right"))]

    speeds = ego[:, SPEED]
    if np.all(speeds < 0.1):
        speed = "0"
    else:
        mean_v = math.fsum(speeds) / len(speeds)
        speed = _SPEED_NAMES[int(np.searchsorted(_SPEED_EDGES, mean_v, side="left"))]

    def majority(w):
        n_walk = int(np.count_nonzero(w))
        if 2 * n_walk == len(w):
            return None
        return "walking" if 2 * n_walk > len(w) else "standing"

    yaw = ego[:, YAW]
    return {
        "full_obs_boxes": full_boxes[:o].copy(),
        "full_fut_boxes": full_boxes[o:].copy(),
        "scale_bin": scale,
        "speed_bin": speed,
        "obs_state": majority(walking[:o]),
        "fut_state": majority(walking[o:]),
        "ego_action": "turn" if yaw.max() - yaw.min() >= 5.0 else "straight",
        "ego_motion": "change" if np.any(np.abs(ego[:, ACCEL]) >= 0.3) else "constant",
    }


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    focal: float = 1000.0
    width: int = 1920
    height: int = 1080
    mount_height: float = 1.4

    @property
    def geometry(self) -> ImageGeometry:
        return ImageGeometry(self.width, self.height)


@dataclass(frozen=True, eq=False)
class PedestrianAgent:
    """Pedestrian placed relative to the ego camera at frame 0.

    ``lateral`` (m, right positive) and ``depth`` (m, forward) are in the
    initial camera frame; ``heading`` is a world heading in degrees.
    """

    ped_id: str
    lateral: float
    depth: float
    heading: float
    walk_speed: float
    walking: np.ndarray  # (duration,) bool schedule
    gait_phase: float = 0.0


@dataclass(frozen=True, eq=False)
class SceneScript:
    video_id: str
    duration: int
    ego_speed0: float  # km/h
    accel: np.ndarray  # (duration,) m/s^2
    yaw_rate: np.ndarray  # (duration,) deg/s
    pedestrians: tuple[PedestrianAgent, ...]
    camera: Camera = field(default_factory=Camera)
    fps: float = DEFAULT_FPS
    seed: int = 0
    yaw0: float = 0.0
    origin: tuple[float, float] = (43.65, -79.38)

    def __post_init__(self):
        if len(self.accel) != self.duration or len(self.yaw_rate) != self.duration:
            raise ValueError("ego schedules must span the script duration")
        if self.ego_speed0 < 0:
            raise ValueError("ego speed must be non-negative")
        for p in self.pedestrians:
            if len(p.walking) != self.duration:
                raise ValueError(f"state schedule of {p.ped_id} must span the duration")
            if p.walk_speed < 0:
                raise ValueError("walk speed must be non-negative")


def project_to_image(world_pos, camera: Camera, width_m: float = PED_WIDTH_M):
    """Project an upright pedestrian billboard standing at camera-frame ground point.

    ``world_pos`` is ``(lateral, depth)`` in metres. Returns the clamped
    :class:`BoundingBox` and the unclamped box as an array.
    """
    lateral, depth = float(world_pos[0]), float(world_pos[1])
    if depth <= MIN_DEPTH_M:
        raise ProjectionError(f"pedestrian at depth {depth:.3f} m is behind or too close to the camera")
    full = _project(np.array([lateral]), np.array([depth]), camera, np.array([width_m]))[0]
    return BoundingBox.from_array(_clamp(full[None], camera)[0]), full


def _project(lateral, depth, camera: Camera, width_m) -> np.ndarray:
    f = camera.focal
    cx, cy = camera.width / 2.0, camera.height / 2.0
    u = cx + f * lateral / depth
    half_w = 0.5 * f * width_m / depth
    top = cy + f * (camera.mount_height - PED_HEIGHT_M) / depth
    bottom = cy + f * camera.mount_height / depth
    return np.stack([u - half_w, top, u + half_w, bottom], axis=-1)


def _clamp(boxes: np.ndarray, camera: Camera) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, float(camera.width))
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, float(camera.height))
    return out


def _ego_trajectory(script: SceneScript):
    """Integrate speed, yaw and ground position; returns (speed km/h, yaw deg, east, north)."""
    dt = 1.0 / script.fps
    n = script.duration
    speed = np.empty(n)
    yaw = np.empty(n)
    east = np.empty(n)
    north = np.empty(n)
    speed[0], yaw[0], east[0], north[0] = script.ego_speed0, script.yaw0, 0.0, 0.0
    for t in range(1, n):
        speed[t] = max(0.0, speed[t - 1] + script.accel[t - 1] * dt * 3.6)
        yaw[t] = yaw[t - 1] + script.yaw_rate[t - 1] * dt
        v = speed[t - 1] / 3.6
        th = math.radians(yaw[t - 1])
        east[t] = east[t - 1] + v * dt * math.sin(th)
        north[t] = north[t - 1] + v * dt * math.cos(th)
    return speed, yaw, east, north


def _ego_array(script: SceneScript, speed, yaw, east, north) -> np.ndarray:
    lat0, lon0 = script.origin
    lat = lat0 + np.degrees(north / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(east / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return np.stack([speed, script.accel, yaw, script.yaw_rate, lat, lon], axis=1).astype(np.float64)


def _camera_coords(script: SceneScript, ped: PedestrianAgent, east, north, th):
    """Per-frame (lateral, depth) of a pedestrian in the moving camera frame."""
    dt = 1.0 / script.fps
    th0 = math.radians(script.yaw0)
    # initial world position from the frame-0 camera frame
    pe = ped.lateral * math.cos(th0) + ped.depth * math.sin(th0)
    pn = -ped.lateral * math.sin(th0) + ped.depth * math.cos(th0)
    hd = math.radians(ped.heading)
    step = np.where(ped.walking, ped.walk_speed * dt, 0.0)
    travelled = np.concatenate([[0.0], np.cumsum(step[:-1])])
    rx = pe + travelled * math.sin(hd) - east
    rz = pn + travelled * math.cos(hd) - north
    return rx * np.cos(th) - rz * np.sin(th), rx * np.sin(th) + rz * np.cos(th)


def render_script(script: SceneScript, min_visible_px: float = 2.0) -> list[RawTrack]:
    """Simulate a script and return one track per pedestrian that is ever visible.

    A track covers the first contiguous run of frames in which at least
    ``min_visible_px`` of the pedestrian's width is inside the image.
    """
    cam = script.camera
    dt = 1.0 / script.fps
    speed, yaw, east, north = _ego_trajectory(script)
    ego = _ego_array(script, speed, yaw, east, north)
    th = np.radians(yaw)
    rng = np.random.default_rng(script.seed)
    tracks = []
    frames = np.arange(script.duration, dtype=np.int64)
    for ped in script.pedestrians:
        lateral, depth = _camera_coords(script, ped, east, north, th)
        if np.any(depth <= MIN_DEPTH_M):
            raise ProjectionError(
                f"{script.video_id}/{ped.ped_id} passes behind the camera plane"
            )
        # gait: periodic width jitter while walking, fixed stance otherwise
        stance = rng.uniform(-1.0, 1.0)
        gait = np.where(ped.walking, np.sin(2 * np.pi * frames * dt / 1.1 + ped.gait_phase), stance)
        width_m = PED_WIDTH_M * (1.0 + GAIT_JITTER * gait)
        full = _project(lateral, depth, cam, width_m)
        clamped = _clamp(full, cam)
        visible = (clamped[:, 2] - clamped[:, 0]) >= min_visible_px
        if not visible.any():
            continue
        first = int(np.argmax(visible))
        rest = np.flatnonzero(~visible[first:])
        stop = first + int(rest[0]) if rest.size else script.duration
        sl = slice(first, stop)
        tracks.append(
            RawTrack(
                video_id=script.video_id,
                ped_id=ped.ped_id,
                frames=frames[sl].copy(),
                boxes=clamped[sl].copy(),
                walking=np.asarray(ped.walking, dtype=bool)[sl].copy(),
                ego=ego[sl].copy(),
                geometry=cam.geometry,
                fps=script.fps,
                truth={"full_box": full[sl].copy()},
            )
        )
    return tracks


def generate_synthetic_corpus(
    scripts: Sequence[SceneScript],
    o: int = DEFAULT_OBS,
    tau: int = DEFAULT_PRED,
    stride: int | None = None,
    split: Split = Split.TRAIN,
) -> Corpus:
    """Render scripts and slice them; every sample carries ``truth`` labels."""
    tracks = [t for s in scripts for t in render_script(s)]
    corpus = corpus_from_tracks(tracks, o, tau, stride, split)
    if scripts:
        corpus = Corpus(
            samples=corpus.samples,
            split=split,
            fps=scripts[0].fps,
            visible_aspect_ratio=corpus.visible_aspect_ratio,
        )
    return corpus


# --------------------------------------------------------------------------
# random script families
# --------------------------------------------------------------------------

SPEED_CHOICES_KMH = (0.0, 3.0, 7.5, 15.0, 25.0, 40.0)


def _schedule_segment(rng, n, p_active, lo, hi, allow_negative=True):
    sched = np.zeros(n)
    if rng.random() < p_active:
        a, b = sorted(rng.integers(0, n, size=2))
        b = max(b, a + n // 4)
        mag = rng.uniform(lo, hi)
        if allow_negative and rng.random() < 0.5:
            mag = -mag
        sched[a:b] = mag
    return sched


def _random_pedestrian(rng, ped_id, duration, cam, min_depth, walking_only, p_switch, p_edge):
    walking_start = True if walking_only else bool(rng.random() < 0.6)
    sched = np.full(duration, walking_start)
    if not walking_only and rng.random() < p_switch:
        sched[int(rng.integers(duration // 6, duration - duration // 6)):] = not walking_start
    walk_speed = rng.uniform(0.8, 1.6)
    side = float(rng.choice([-1.0, 1.0]))
    depth = float(np.exp(rng.uniform(np.log(min_depth + 0.5), np.log(45.0))))
    if rng.random() < p_edge:
        # straddle the image border: centre within a box width of the edge
        half_fov = 0.5 * cam.width / cam.focal * depth
        lateral = side * (half_fov + rng.uniform(-0.3, 0.3) * PED_WIDTH_M)
    else:
        # sidewalk placement: off the ego path, inside the initial field of view
        max_lat = 0.45 * cam.width / cam.focal * depth
        lateral = side * rng.uniform(min(2.0, 0.5 * max_lat), min(8.0, max_lat))
    return PedestrianAgent(
        ped_id=ped_id,
        lateral=float(lateral),
        depth=depth,
        heading=float(rng.uniform(0.0, 360.0)),
        walk_speed=float(walk_speed),
        walking=sched,
        gait_phase=float(rng.uniform(0, 2 * np.pi)),
    )


def random_script(
    seed: int,
    video_id: str | None = None,
    duration: int = 90,
    n_pedestrians: int = 2,
    camera: Camera | None = None,
    ego_speed: float | None = None,
    allow_turns: bool = True,
    allow_accel: bool = True,
    walking_only: bool = False,
    p_switch: float = 0.3,
    p_edge: float = 0.2,
    min_depth: float = 3.5,
    fps: float = DEFAULT_FPS,
    max_tries: int = 30,
) -> SceneScript:
    """Draw a plausible urban scene.

    Pedestrians are placed so they stay at least ``min_depth`` metres ahead of
    the camera over the whole script (which also keeps box bottoms inside the
    image); candidates that violate this are redrawn up to ``max_tries`` times
    and dropped after that. A fraction ``p_edge`` starts straddling the left
    or right image border, which yields horizontally truncated boxes.
    """
    rng = np.random.default_rng(seed)
    cam = camera or Camera()
    dt = 1.0 / fps
    v0 = float(rng.choice(SPEED_CHOICES_KMH)) if ego_speed is None else float(ego_speed)
    if v0 > 0:
        v0 = max(0.0, v0 * rng.uniform(0.85, 1.15))
    accel = _schedule_segment(rng, duration, 0.4 if allow_accel else 0.0, 0.35, 1.2)
    # keep speed non-negative: a braking segment cannot exceed what is available
    v = v0
    for t in range(duration):
        nxt = v + accel[t] * dt * 3.6
        if nxt < 0:
            accel[t] = 0.0
            nxt = v
        v = nxt
    yaw_rate = _schedule_segment(rng, duration, 0.35 if allow_turns and v0 > 0 else 0.0, 4.0, 14.0)
    if v0 == 0.0:
        accel[:] = 0.0

    script = SceneScript(
        video_id=video_id or f"syn{seed:06d}",
        duration=duration,
        ego_speed0=v0,
        accel=accel,
        yaw_rate=yaw_rate,
        pedestrians=(),
        camera=cam,
        fps=fps,
        seed=seed,
    )
    _, yaw, east, north = _ego_trajectory(script)
    th = np.radians(yaw)

    peds = []
    for k in range(n_pedestrians):
        for _ in range(max_tries):
            ped = _random_pedestrian(rng, f"p{k}", duration, cam, min_depth, walking_only,
                                     p_switch, p_edge)
            if _camera_coords(script, ped, east, north, th)[1].min() >= min_depth:
                peds.append(ped)
                break
    return dataclasses.replace(script, pedestrians=tuple(peds))


def random_scripts(n: int, seed: int = 0, **kwargs) -> list[SceneScript]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [random_script(int(s), video_id=f"syn{i:05d}", **kwargs) for i, s in enumerate(seeds)]
