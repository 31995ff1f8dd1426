"""Dataset records, ego-frame geometry, command inference, the synthetic
multi-region scenario generator, GPS-noise injection, K-means clustering,
and JSONL IO.

The generator builds a benchmark around a "conflict pair": two regions whose
rendered scenes, speeds, and commands are identically distributed while the
correct trajectories differ by regional rule (driving side, turn on red).
Any model blind to the region input is therefore provably suboptimal on
those records, which is the property the training experiments lean on.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .planner import Command, NUM_WAYPOINTS
from .seeding import derive_seed

WAYPOINT_TIMES = (0.5, 1.0, 1.5, 2.0, 2.5)
DEFAULT_KAPPA_THRESH = 0.05
# extra turn radius of the far-side (crossing) turn at an intersection
WIDE_TURN_EXTRA = 6.0
GPS_NOISE_PRESETS = {"clean": 0.0, "gps1": 1.0, "gps3": 3.0}


class RecordFormatError(ValueError):
    """A JSONL record failed to parse or validate."""


@dataclass
class DrivingRecord:
    id: str
    image: np.ndarray          # [h, w, ch], values in [0, 1]
    speed: float               # m/s
    command: Command
    region_id: int
    region_name: str
    waypoints: np.ndarray | None   # [5, 2] meters, ego frame; None = unlabeled
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.waypoints is not None:
            self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
            if self.waypoints.shape != (NUM_WAYPOINTS, 2):
                raise RecordFormatError(
                    f"record {self.id!r}: waypoints must be 5x2")
            if not np.isfinite(self.waypoints).all():
                raise RecordFormatError(
                    f"record {self.id!r}: waypoints must be finite")

    @property
    def labeled(self) -> bool:
        return self.waypoints is not None


@dataclass
class PoseTrace:
    """Timestamped world poses with strictly increasing timestamps."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray   # radians, world frame, 0 along +x

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.heading = np.asarray(self.heading, dtype=np.float64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.heading) == n):
            raise ValueError("pose trace arrays must share one length")
        if n < 1 or np.any(np.diff(self.t) <= 0):
            raise ValueError("pose timestamps must be strictly increasing")


@dataclass(frozen=True)
class RegionProfile:
    """Regional rule set driving the scenario generator."""

    name: str
    handedness: str = "right"            # "right" or "left"
    turn_on_red_allowed: bool = True
    speed_limit: float = 11.0            # m/s
    turn_radius_mean: float = 7.0        # m
    turn_radius_std: float = 0.5         # m
    yield_aggressiveness: float = 0.5    # in [0, 1], scales creep speed

    def __post_init__(self):
        if self.handedness not in ("right", "left"):
            raise ValueError("handedness must be 'right' or 'left'")
        if self.speed_limit <= 0:
            raise ValueError("speed_limit must be positive")
        if self.turn_radius_mean <= 0:
            raise ValueError("turn_radius_mean must be positive")
        if self.turn_radius_std < 0:
            raise ValueError("turn_radius_std must be nonnegative")
        if not (0.0 <= self.yield_aggressiveness <= 1.0):
            raise ValueError("yield_aggressiveness must be in [0, 1]")

    @property
    def creep_speed(self) -> float:
        # crawl speed while waiting out a signal, m/s
        return 0.3 + 0.5 * self.yield_aggressiveness

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# ego-frame geometry


def to_ego_frame(world_point, ego_pose) -> tuple[float, float]:
    """World (x, y) -> ego (x right, y forward) for pose (x, y, heading)."""
    px, py = world_point
    ex, ey, heading = ego_pose
    dx, dy = px - ex, py - ey
    rot = -(heading - math.pi / 2.0)
    c, s = math.cos(rot), math.sin(rot)
    return (c * dx - s * dy, s * dx + c * dy)


def to_world_frame(ego_point, ego_pose) -> tuple[float, float]:
    """Inverse of :func:`to_ego_frame`."""
    ex, ey, heading = ego_pose
    rot = heading - math.pi / 2.0
    c, s = math.cos(rot), math.sin(rot)
    gx, gy = ego_point
    return (ex + c * gx - s * gy, ey + s * gx + c * gy)


def extract_waypoints(trace: PoseTrace, t0: float) -> np.ndarray:
    """Sample future positions at 0.5 s steps over 2.5 s, in the ego frame
    of the pose at t0. Positions interpolate linearly between trace poses."""
    times = t0 + np.asarray(WAYPOINT_TIMES)
    if t0 < trace.t[0] - 1e-9 or times[-1] > trace.t[-1] + 1e-9:
        raise ValueError(
            f"trace [{trace.t[0]}, {trace.t[-1]}] does not cover "
            f"[{t0}, {times[-1]}]")
    xs = np.interp(times, trace.t, trace.x)
    ys = np.interp(times, trace.t, trace.y)
    ex = float(np.interp(t0, trace.t, trace.x))
    ey = float(np.interp(t0, trace.t, trace.y))
    heading = float(np.interp(t0, trace.t, trace.heading))
    pose = (ex, ey, heading)
    return np.array([to_ego_frame((px, py), pose) for px, py in zip(xs, ys)])


def _menger_curvature(a, b, c) -> float:
    ab = b - a
    bc = c - b
    ca = a - c
    lab = float(np.hypot(*ab))
    lbc = float(np.hypot(*bc))
    lca = float(np.hypot(*ca))
    if min(lab, lbc, lca) < 1e-9:
        return 0.0
    cross = ab[0] * bc[1] - ab[1] * bc[0]
    return 2.0 * cross / (lab * lbc * lca)


def infer_command(waypoints, kappa_thresh: float = DEFAULT_KAPPA_THRESH) -> Command:
    """Classify a waypoint polyline by mean signed curvature.

    Curvature is the Menger curvature averaged over the interior point
    triples; leftward curvature is positive. Degenerate triples contribute
    zero, so a stationary trajectory reads as forward.
    """
    pts = np.asarray(waypoints, dtype=np.float64)
    if pts.shape != (NUM_WAYPOINTS, 2):
        raise ValueError("waypoints must be 5x2")
    kappas = [_menger_curvature(pts[i], pts[i + 1], pts[i + 2])
              for i in range(len(pts) - 2)]
    mean_kappa = float(np.mean(kappas))
    if mean_kappa > kappa_thresh:
        return Command.LEFT
    if mean_kappa < -kappa_thresh:
        return Command.RIGHT
    return Command.FORWARD


def arc_waypoints(speed: float, curvature: float) -> np.ndarray:
    """Constant-curvature unicycle rollout sampled at the waypoint times.

    Positive curvature bends left (toward -x in the ego frame)."""
    out = np.zeros((NUM_WAYPOINTS, 2))
    for i, t in enumerate(WAYPOINT_TIMES):
        s = speed * t
        if abs(curvature) < 1e-12:
            out[i] = (0.0, s)
        else:
            out[i] = ((math.cos(curvature * s) - 1.0) / curvature,
                      math.sin(curvature * s) / curvature)
    return out


# ---------------------------------------------------------------------------
# synthetic scenario generation


@dataclass(frozen=True)
class _Scenario:
    index: int
    kind: str             # forward | red_forward | turn | red_turn
    speed_frac: float
    turn_frac: float
    approach_frac: float
    radius_z: float       # clipped standard normal for the radius draw
    noise: tuple          # speckle pixels (row, col, r, g, b)

    @property
    def red(self) -> bool:
        return self.kind in ("red_forward", "red_turn")


_SCENARIO_KINDS = ("forward", "turn", "red_turn", "red_forward")
_SCENARIO_PROBS = (0.35, 0.35, 0.2, 0.1)
_NOISE_PIXELS = 12


def _draw_scenario(index: int, seed: int, image_h: int, image_w: int) -> _Scenario:
    rng = np.random.default_rng(derive_seed(seed, "scenario", index))
    kind = rng.choice(_SCENARIO_KINDS, p=_SCENARIO_PROBS)
    speed_frac = float(rng.uniform(0.4, 1.0))
    turn_frac = float(rng.uniform(0.4, 0.55))
    approach_frac = float(rng.uniform(0.3, 0.45))
    radius_z = float(np.clip(rng.standard_normal(), -2.0, 2.0))
    rows = rng.integers(0, image_h, _NOISE_PIXELS)
    cols = rng.integers(0, image_w, _NOISE_PIXELS)
    vals = rng.uniform(0.0, 1.0, (_NOISE_PIXELS, 3))
    noise = tuple((int(r), int(c), float(v[0]), float(v[1]), float(v[2]))
                  for r, c, v in zip(rows, cols, vals))
    return _Scenario(index=index, kind=str(kind), speed_frac=speed_frac,
                     turn_frac=turn_frac, approach_frac=approach_frac,
                     radius_z=radius_z, noise=noise)


def _records_in(kind: str) -> int:
    return 2 if kind in ("turn", "red_turn") else 1


def render_scene(kind: str, image_h: int, image_w: int, noise=()) -> np.ndarray:
    """Schematic top-down raster: road strip, intersection box, signal
    pixels, plus shared speckle noise. Region-independent by construction."""
    img = np.full((image_h, image_w, 3), 0.12)
    x0, x1 = 3 * image_w // 8, 5 * image_w // 8
    img[:, x0:x1, :] = 0.35
    img[::4, image_w // 2, :] = 0.85
    if kind != "forward":
        y0, y1 = 3 * image_h // 8, 5 * image_h // 8
        img[y0:y1, :, :] = 0.35
        img[y0:y1, x0:x1, :] = 0.42
        sr0, sr1 = max(y0 - 5, 0), max(y0 - 2, 0)
        sc0, sc1 = min(x1 + 2, image_w - 4), min(x1 + 5, image_w - 1)
        img[sr0:sr1, sc0:sc1, :] = 0.06
        red = kind in ("red_turn", "red_forward")
        img[sr0:sr1, sc0:sc1, 0 if red else 1] = 0.95
    for row, col, r, g, b in noise:
        img[row, col] = (r, g, b)
    return np.clip(img, 0.0, 1.0)


def _near_side(profile: RegionProfile) -> Command:
    # the curbside turn that never crosses oncoming traffic
    return Command.RIGHT if profile.handedness == "right" else Command.LEFT


def _turn_radius(profile: RegionProfile, scenario: _Scenario,
                 command: Command) -> float:
    base = max(profile.turn_radius_mean
               + profile.turn_radius_std * scenario.radius_z, 0.5)
    if command == _near_side(profile):
        return base
    return base + WIDE_TURN_EXTRA


def _scenario_records(scenario: _Scenario, profile: RegionProfile,
                      region_id: int, image_h: int, image_w: int
                      ) -> list[DrivingRecord]:
    image = render_scene(scenario.kind, image_h, image_w, scenario.noise)
    limit = profile.speed_limit
    records = []

    def emit(command: Command, observed_speed: float, waypoints: np.ndarray,
             tags: list[str]) -> None:
        rid = f"{profile.name}/s{scenario.index:05d}-{command.to_name()}"
        records.append(DrivingRecord(
            id=rid, image=image, speed=float(observed_speed), command=command,
            region_id=region_id, region_name=profile.name,
            waypoints=waypoints, tags=tags))

    if scenario.kind == "forward":
        v = scenario.speed_frac * limit
        tags = ["forward"]
        if scenario.speed_frac > 0.75:
            tags.append("high_speed")
        emit(Command.FORWARD, v, arc_waypoints(v, 0.0), tags)
    elif scenario.kind == "red_forward":
        v_obs = scenario.approach_frac * limit
        emit(Command.FORWARD, v_obs, arc_waypoints(profile.creep_speed, 0.0),
             ["forward", "red_light"])
    else:
        turn_speed = scenario.turn_frac * limit
        for command in (Command.LEFT, Command.RIGHT):
            radius = _turn_radius(profile, scenario, command)
            curvature = (1.0 if command == Command.LEFT else -1.0) / radius
            if scenario.kind == "turn":
                emit(command, turn_speed, arc_waypoints(turn_speed, curvature),
                     [command.to_name()])
            else:
                near = command == _near_side(profile)
                may_go = near and profile.turn_on_red_allowed
                v_traj = turn_speed if may_go else profile.creep_speed
                tags = [command.to_name(), "red_light"]
                if near:
                    tags.append("turn_on_red")
                emit(command, scenario.approach_frac * limit,
                     arc_waypoints(v_traj, curvature), tags)
    return records


def generate_region_dataset(profiles, n_per_region: int, seed: int,
                            image_h: int = 36, image_w: int = 64,
                            threads: int = 1) -> list[DrivingRecord]:
    """Generate ``n_per_region`` records per region profile.

    Scenario draws (kind, speeds, radius jitter, raster noise) are shared
    across regions per scenario index, so matched records differ only where
    the regional rules say they must. Record ids carry the scenario index;
    :func:`scenario_key` recovers it for cross-region pairing.
    """
    profiles = list(profiles)
    if not profiles:
        raise ValueError("at least one region profile is required")
    if n_per_region < 1:
        raise ValueError("n_per_region must be positive")

    scenarios: list[_Scenario] = []
    count = 0
    index = 0
    while count < n_per_region:
        scenario = _draw_scenario(index, seed, image_h, image_w)
        scenarios.append(scenario)
        count += _records_in(scenario.kind)
        index += 1

    def region_records(args) -> list[DrivingRecord]:
        region_id, profile = args
        out: list[DrivingRecord] = []
        for scenario in scenarios:
            out.extend(_scenario_records(scenario, profile, region_id,
                                         image_h, image_w))
        return out[:n_per_region]

    jobs = list(enumerate(profiles))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_region = list(pool.map(region_records, jobs))
    else:
        per_region = [region_records(job) for job in jobs]
    records: list[DrivingRecord] = []
    for chunk in per_region:
        records.extend(chunk)
    return records


def scenario_key(record_id: str) -> str:
    """Suffix shared by matched records across regions."""
    return record_id.split("/", 1)[1]


# ---------------------------------------------------------------------------
# GPS noise


def inject_gps_noise(records, sigma: float, seed: int) -> list[DrivingRecord]:
    """Add iid zero-mean Gaussian noise (std ``sigma`` meters) to every
    waypoint coordinate of labeled records. ``sigma`` = 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return [dataclasses.replace(r) for r in records]
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        if r.waypoints is None:
            out.append(dataclasses.replace(r))
        else:
            noisy = r.waypoints + rng.normal(0.0, sigma, (NUM_WAYPOINTS, 2))
            out.append(dataclasses.replace(r, waypoints=noisy))
    return out


# ---------------------------------------------------------------------------
# K-means (Lloyd)


def kmeans_cluster(points, k: int, seed: int,
                   max_iterations: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with seeded distinct-point initialization.

    Assignment ties break toward the lowest centroid index; empty clusters
    keep their previous centroid. Stops at an assignment fixpoint or after
    ``max_iterations``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("points must be a nonempty [n, 2] array")
    if not (1 <= k <= len(pts)):
        raise ValueError(f"k must be in [1, {len(pts)}]")
    rng = np.random.default_rng(seed)
    centroids = pts[rng.choice(len(pts), size=k, replace=False)].copy()
    assignments = None
    for _ in range(max_iterations):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            members = pts[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return assignments, centroids


def kmeans_objective(points, assignments, centroids) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(((pts - centroids[assignments]) ** 2).sum())


# ---------------------------------------------------------------------------
# JSONL IO


def record_to_json(record: DrivingRecord) -> dict:
    doc = {
        "id": record.id,
        "shape": list(record.image.shape),
        "image": record.image.ravel().tolist(),
        "speed": float(record.speed),
        "command": record.command.to_name(),
        "region_id": int(record.region_id),
        "region_name": record.region_name,
    }
    if record.waypoints is not None:
        doc["waypoints"] = [[float(x), float(y)] for x, y in record.waypoints]
    doc["tags"] = list(record.tags)
    return doc


def record_from_json(doc: dict) -> DrivingRecord:
    required = ("id", "shape", "image", "speed", "command", "region_id",
                "region_name", "tags")
    for key in required:
        if key not in doc:
            raise RecordFormatError(f"missing key {key!r}")
    shape = tuple(int(s) for s in doc["shape"])
    flat = np.asarray(doc["image"], dtype=np.float64)
    if int(np.prod(shape)) != flat.size:
        raise RecordFormatError(
            f"shape {shape} does not match image length {flat.size}")
    if not np.isfinite(flat).all():
        raise RecordFormatError("image contains non-finite values")
    if flat.size and (flat.min() < 0.0 or flat.max() > 1.0):
        raise RecordFormatError("image values must lie in [0, 1]")
    waypoints = doc.get("waypoints")
    if waypoints is not None:
        waypoints = np.asarray(waypoints, dtype=np.float64)
    return DrivingRecord(
        id=str(doc["id"]), image=flat.reshape(shape), speed=float(doc["speed"]),
        command=Command.from_name(doc["command"]),
        region_id=int(doc["region_id"]), region_name=str(doc["region_name"]),
        waypoints=waypoints, tags=[str(t) for t in doc["tags"]])


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record),
                                separators=(",", ":")) + "\n")


def read_records(path) -> list[DrivingRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                records.append(record_from_json(doc))
            except (json.JSONDecodeError, RecordFormatError, ValueError,
                    TypeError) as exc:
                raise RecordFormatError(f"{path}:{lineno}: {exc}") from exc
    return records
