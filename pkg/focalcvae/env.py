"""A deterministic 2-D two-arm cube handover world.

The scene is a side view: a table along the bottom, a cube resting on it,
two 2-link arms hanging from fixed bases above. The left arm picks the cube
up, hands it to the right arm, which places it in a target zone on the far
side of the table. Observations are a 32x32 RGB image, a depth image that
depends only on geometry, and the 12-value proprioception vector.

World coordinates: ``x`` in ``[-1, 1]`` left to right, ``y`` in
``[-0.2, 1.8]`` bottom to top. Image row 0 is the top of the world.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from focalcvae.errors import ConfigurationError, UsageError
from focalcvae.rng import Rng

logger = logging.getLogger(__name__)

DEGRADATIONS = ("none", "color-match", "dim", "shadow")
DEGRADATION_CODES = {name: code for code, name in enumerate(DEGRADATIONS)}

IMAGE_SIZE = 32
WORLD_X = (-1.0, 1.0)
WORLD_Y = (-0.2, 1.8)
TABLE_HEIGHT = 0.3
CUBE_SIDE = 0.1875
# Spawn bands; their midpoint lies more than GRASP_RADIUS from either band.
CUBE_X_BANDS = ((-0.9, -0.75), (-0.25, -0.1))
TARGET_ZONE = (0.3, 0.7)

LINK_LENGTHS = (0.6, 0.6)
LEFT_BASE = (-0.5, 1.5)
RIGHT_BASE = (0.5, 1.5)
ARM_WIDTH = 0.045
GRIPPER_HALF = 0.06

SERVO_GAIN = 0.6
GRIP_THRESHOLD = 0.5
GRASP_RADIUS = 0.12
LIFT_MARGIN = 0.1
WAYPOINT_TOLERANCE = 0.05

LEFT_HOME = (-0.6, 0.9)
RIGHT_HOME = (0.6, 0.9)
HANDOVER = (-0.05, 0.85)
RIGHT_STANDBY = (0.25, 0.85)

# Depth encodes proximity to the camera over a fixed scene range.
SCENE_NEAR, SCENE_FAR = 1.0, 2.0
DISTANCE = {"background": 2.0, "table": 1.65, "cube": 1.25, "arm": 1.1}

DIM_FACTOR = 0.3
DIM_NOISE = 0.02
SHADOW_FACTOR = 0.5

PROPRIO_DIM = 12
ACTION_DIM = 6
ACTION_LOW = np.array([-math.pi, -math.pi, 0.0, -math.pi, -math.pi, 0.0])
ACTION_HIGH = np.array([math.pi, math.pi, 1.0, math.pi, math.pi, 1.0])
GRIP_INDICES = (2, 5)

PHASES = ("approach", "grasp", "pass", "place", "done")

Point = Tuple[float, float]


def check_degradation(name: str) -> str:
    if name not in DEGRADATION_CODES:
        raise ConfigurationError(f"degradation must be one of {DEGRADATIONS}, got {name!r}")
    return name


@dataclass(frozen=True)
class Palette:
    background: Tuple[float, float, float]
    table: Tuple[float, float, float]
    cube: Tuple[float, float, float]
    zone: Tuple[float, float, float]
    arm: Tuple[float, float, float]


def _colour_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return float(np.max(np.abs(np.subtract(a, b))))


def random_palette(rng: Rng) -> Palette:
    """Random scene colours with a cube that stands out from table and background."""

    def colour() -> Tuple[float, float, float]:
        return tuple(float(c) for c in rng.uniform(0.0, 1.0, 3, dtype=np.float64))

    background, table = colour(), colour()
    cube = colour()
    for _ in range(100):
        if _colour_distance(cube, background) >= 0.25 and _colour_distance(cube, table) >= 0.25:
            break
        cube = colour()
    else:
        cube = tuple(1.0 - c for c in background)
    return Palette(background, table, cube, colour(), colour())


@dataclass(frozen=True)
class WorldState:
    """Arm joints ``(shoulder, elbow)`` are absolute and relative angles in radians.

    Grippers are open (0.0) or closed (1.0) flags. The cube position is its
    bottom-centre point.
    """

    left_joints: Point
    right_joints: Point
    left_grip: float
    right_grip: float
    left_velocity: Tuple[float, float, float]
    right_velocity: Tuple[float, float, float]
    cube: Point
    held_by: Optional[str]
    table_height: float
    zone: Point
    palette: Palette
    degradation: str
    t: int = field(default=0, compare=False)
    noise_key: int = field(default=0, compare=False)

    @property
    def cube_centre(self) -> Point:
        return (self.cube[0], self.cube[1] + 0.5 * CUBE_SIDE)

    def pose(self) -> np.ndarray:
        """Current ``[θ1L, θ2L, gL, θ1R, θ2R, gR]``."""
        return np.array([*self.left_joints, self.left_grip, *self.right_joints, self.right_grip])

    def proprio(self) -> np.ndarray:
        return np.concatenate([self.pose(), np.array([*self.left_velocity, *self.right_velocity])])


# ---- kinematics -----------------------------------------------------------


def forward_kinematics(base: Point, joints: Point) -> Tuple[Point, Point]:
    """Elbow and tip positions of a 2-link arm."""
    l1, l2 = LINK_LENGTHS
    a1 = joints[0]
    a2 = joints[0] + joints[1]
    elbow = (base[0] + l1 * math.cos(a1), base[1] + l1 * math.sin(a1))
    tip = (elbow[0] + l2 * math.cos(a2), elbow[1] + l2 * math.sin(a2))
    return elbow, tip


def inverse_kinematics(base: Point, target: Point, elbow_sign: float) -> Point:
    """Closed-form 2-link IK; out-of-reach targets give the stretched pose toward them."""
    l1, l2 = LINK_LENGTHS
    dx, dy = target[0] - base[0], target[1] - base[1]
    cos2 = (dx * dx + dy * dy - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    theta2 = elbow_sign * math.acos(max(-1.0, min(1.0, cos2)))
    theta1 = math.atan2(dy, dx) - math.atan2(l2 * math.sin(theta2), l1 + l2 * math.cos(theta2))
    return (_wrap(theta1), _wrap(theta2))


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def reachable(base: Point, target: Point, margin: float = 0.02) -> bool:
    return math.dist(base, target) <= sum(LINK_LENGTHS) - margin


def tips(state: WorldState) -> Tuple[Point, Point]:
    return forward_kinematics(LEFT_BASE, state.left_joints)[1], forward_kinematics(RIGHT_BASE, state.right_joints)[1]


# ---- dynamics -------------------------------------------------------------


def reset(rng: Rng, degradation: str = "none") -> WorldState:
    """A fresh episode: random palette and cube position, arms at home."""
    check_degradation(degradation)
    palette = random_palette(rng.fork(0))
    place = rng.fork(1)
    for _ in range(100):
        band = CUBE_X_BANDS[int(place.integers(0, len(CUBE_X_BANDS)))]
        x = float(place.uniform(*band, dtype=np.float64))
        if reachable(LEFT_BASE, (x, TABLE_HEIGHT + 0.5 * CUBE_SIDE)):
            break
        logger.debug("cube at x=%.3f unreachable, resampling", x)
    else:
        raise ConfigurationError("could not place a reachable cube")
    return WorldState(
        left_joints=inverse_kinematics(LEFT_BASE, LEFT_HOME, 1.0),
        right_joints=inverse_kinematics(RIGHT_BASE, RIGHT_HOME, -1.0),
        left_grip=0.0,
        right_grip=0.0,
        left_velocity=(0.0, 0.0, 0.0),
        right_velocity=(0.0, 0.0, 0.0),
        cube=(x, TABLE_HEIGHT),
        held_by=None,
        table_height=TABLE_HEIGHT,
        zone=TARGET_ZONE,
        palette=palette,
        degradation=degradation,
        t=0,
        noise_key=int(rng.fork(2).integers(0, 2**31)),
    )


def clamp_action(action: Sequence[float]) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64).reshape(ACTION_DIM), ACTION_LOW, ACTION_HIGH)


def _servo(current: float, target: float) -> float:
    return current + SERVO_GAIN * (target - current)


def step(state: WorldState, action: Sequence[float]) -> WorldState:
    """Advance one tick toward the commanded pose and update the grasp latch.

    Joints servo toward their targets; a gripper command at or above
    ``GRIP_THRESHOLD`` closes the gripper, anything below opens it.
    """
    a = clamp_action(action)
    old = state.pose()
    new = np.array([_servo(c, t) for c, t in zip(old, a)])
    for i in GRIP_INDICES:
        new[i] = 1.0 if a[i] >= GRIP_THRESHOLD else 0.0
    left_j, right_j = (new[0], new[1]), (new[3], new[4])
    left_g, right_g = float(new[2]), float(new[5])
    velocity = new - old

    left_tip = forward_kinematics(LEFT_BASE, left_j)[1]
    right_tip = forward_kinematics(RIGHT_BASE, right_j)[1]
    arm_tips = {"left": left_tip, "right": right_tip}
    closed_before = {"left": state.left_grip > 0.5, "right": state.right_grip > 0.5}
    closed_now = {"left": left_g > 0.5, "right": right_g > 0.5}

    cube, held = state.cube, state.held_by
    if held is not None and not closed_now[held]:
        cube, held = (cube[0], state.table_height), None
    centre = (cube[0], cube[1] + 0.5 * CUBE_SIDE)
    for arm in ("left", "right"):
        if closed_now[arm] and not closed_before[arm] and math.dist(arm_tips[arm], centre) < GRASP_RADIUS:
            held = arm
    if held is not None:
        tip = arm_tips[held]
        cube = (min(max(tip[0], WORLD_X[0]), WORLD_X[1]), max(tip[1] - 0.5 * CUBE_SIDE, state.table_height))

    return replace(
        state,
        left_joints=(float(left_j[0]), float(left_j[1])),
        right_joints=(float(right_j[0]), float(right_j[1])),
        left_grip=left_g,
        right_grip=right_g,
        left_velocity=tuple(float(v) for v in velocity[:3]),
        right_velocity=tuple(float(v) for v in velocity[3:]),
        cube=cube,
        held_by=held,
        t=state.t + 1,
    )


# ---- rendering ------------------------------------------------------------


def _pixel_centres(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """World ``x`` of each column and ``y`` of each row."""
    pixel = (WORLD_X[1] - WORLD_X[0]) / size
    xs = WORLD_X[0] + (np.arange(size) + 0.5) * pixel
    ys = WORLD_Y[1] - (np.arange(size) + 0.5) * pixel
    return xs, ys


def _segment_mask(px: np.ndarray, py: np.ndarray, a: Point, b: Point, width: float) -> np.ndarray:
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    length_sq = max(vx * vx + vy * vy, 1e-12)
    t = np.clip(((px - ax) * vx + (py - ay) * vy) / length_sq, 0.0, 1.0)
    return (px - (ax + t * vx)) ** 2 + (py - (ay + t * vy)) ** 2 <= width * width


def _scene_masks(state: WorldState, size: int) -> List[Tuple[str, np.ndarray]]:
    """Layers in painter's order (far to near)."""
    xs, ys = _pixel_centres(size)
    px, py = np.meshgrid(xs, ys, indexing="xy")
    table = py <= state.table_height
    zone = table & (py > state.table_height - 2.0 * (xs[1] - xs[0])) & (px >= state.zone[0]) & (px < state.zone[1])
    cx, cy = state.cube
    half = 0.5 * CUBE_SIDE
    cube = (px >= cx - half) & (px < cx + half) & (py >= cy) & (py < cy + CUBE_SIDE)
    arms = np.zeros_like(table)
    grippers = np.zeros_like(table)
    for base, joints in ((LEFT_BASE, state.left_joints), (RIGHT_BASE, state.right_joints)):
        elbow, tip = forward_kinematics(base, joints)
        arms |= _segment_mask(px, py, base, elbow, ARM_WIDTH) | _segment_mask(px, py, elbow, tip, ARM_WIDTH)
        grippers |= (np.abs(px - tip[0]) <= GRIPPER_HALF) & (np.abs(py - tip[1]) <= GRIPPER_HALF)
    return [("table", table), ("zone", zone), ("cube", cube), ("arm", arms | grippers)]


def _proximity(distance: float) -> float:
    return (SCENE_FAR - distance) / (SCENE_FAR - SCENE_NEAR)


def render_depth(state: WorldState, size: int = IMAGE_SIZE) -> np.ndarray:
    """``[1, H, W]`` proximity in ``[0, 1]``; a pure function of geometry."""
    depth = np.full((size, size), _proximity(DISTANCE["background"]))
    for layer, mask in _scene_masks(state, size):
        depth[mask] = _proximity(DISTANCE["table" if layer == "zone" else layer])
    return depth[None].astype(np.float32)


def render_rgb(state: WorldState, size: int = IMAGE_SIZE) -> np.ndarray:
    """``[3, H, W]`` colour image in ``[0, 1]`` with the state's degradation applied."""
    palette = state.palette
    cube_colour = palette.background if state.degradation == "color-match" else palette.cube
    colours = {"table": palette.table, "zone": palette.zone, "cube": cube_colour, "arm": palette.arm}
    rgb = np.empty((size, size, 3))
    rgb[:] = palette.background
    for layer, mask in _scene_masks(state, size):
        rgb[mask] = colours[layer]
    rgb = rgb.transpose(2, 0, 1)

    if state.degradation in ("dim", "shadow"):
        noise = Rng(state.noise_key, (state.t,))
        if state.degradation == "dim":
            rgb = rgb * DIM_FACTOR + noise.normal((3, size, size), dtype=np.float64) * DIM_NOISE
        else:
            xs, ys = _pixel_centres(size)
            px, py = np.meshgrid(xs, ys, indexing="xy")
            angle = noise.uniform(0.0, 2.0 * math.pi, dtype=np.float64)
            offset = noise.uniform(-0.5, 0.5, dtype=np.float64)
            shaded = (px * math.cos(angle) + (py - 0.8) * math.sin(angle)) > offset
            rgb = np.where(shaded[None], rgb * SHADOW_FACTOR, rgb)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def render(state: WorldState, size: int = IMAGE_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    return render_rgb(state, size), render_depth(state, size)


@dataclass
class Frame:
    rgb: np.ndarray
    depth: np.ndarray
    proprio: np.ndarray
    action: Optional[np.ndarray] = None


def observe(state: WorldState) -> Frame:
    rgb, depth = render(state)
    return Frame(rgb, depth, state.proprio().astype(np.float32))


# ---- expert and phases ----------------------------------------------------


def _arm_command(base: Point, target: Point, elbow_sign: float, grip: float) -> List[float]:
    return [*inverse_kinematics(base, target, elbow_sign), grip]


def in_zone(state: WorldState) -> bool:
    return state.zone[0] <= state.cube[0] < state.zone[1]


def scripted_expert(state: WorldState) -> np.ndarray:
    """Waypoint controller with access to the true state."""
    left_tip, right_tip = tips(state)
    centre = state.cube_centre
    if state.held_by == "left":
        left = _arm_command(LEFT_BASE, HANDOVER, 1.0, 1.0)
        if math.dist(left_tip, HANDOVER) < WAYPOINT_TOLERANCE:
            close = 1.0 if math.dist(right_tip, centre) < WAYPOINT_TOLERANCE else 0.0
            right = _arm_command(RIGHT_BASE, centre, -1.0, close)
        else:
            right = _arm_command(RIGHT_BASE, RIGHT_STANDBY, -1.0, 0.0)
    elif state.held_by == "right":
        place = (0.5 * (state.zone[0] + state.zone[1]), state.table_height + 0.5 * CUBE_SIDE + 0.06)
        left = _arm_command(LEFT_BASE, LEFT_HOME, 1.0, 0.0)
        release = math.dist(right_tip, place) < WAYPOINT_TOLERANCE
        right = _arm_command(RIGHT_BASE, place, -1.0, 0.0 if release else 1.0)
    elif in_zone(state):
        left = _arm_command(LEFT_BASE, LEFT_HOME, 1.0, 0.0)
        right = _arm_command(RIGHT_BASE, RIGHT_HOME, -1.0, 0.0)
    else:
        close = 1.0 if math.dist(left_tip, centre) < WAYPOINT_TOLERANCE else 0.0
        left = _arm_command(LEFT_BASE, centre, 1.0, close)
        right = _arm_command(RIGHT_BASE, RIGHT_STANDBY, -1.0, 0.0)
    return clamp_action(left + right)


def phase_label(state: WorldState) -> str:
    if state.held_by == "left":
        return "pass"
    if state.held_by == "right":
        return "place"
    if in_zone(state):
        return "done"
    left_tip, right_tip = tips(state)
    near = min(math.dist(left_tip, state.cube_centre), math.dist(right_tip, state.cube_centre))
    return "grasp" if near < GRASP_RADIUS else "approach"


@dataclass
class EpisodeResult:
    touched: bool = False
    lifted: bool = False
    transferred: bool = False
    touched_step: Optional[int] = None
    lifted_step: Optional[int] = None
    transferred_step: Optional[int] = None

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if (self.transferred and not self.lifted) or (self.lifted and not self.touched):
            raise UsageError(f"phase lattice violated: {self}")


class PhaseTracker:
    """Marks touched, lifted and transferred the first time each happens."""

    def __init__(self):
        self.result = EpisodeResult()

    def update(self, state: WorldState, t: int) -> None:
        r = self.result
        left_tip, right_tip = tips(state)
        centre = state.cube_centre
        if not r.touched and min(math.dist(left_tip, centre), math.dist(right_tip, centre)) < GRASP_RADIUS:
            r.touched, r.touched_step = True, t
        if r.touched and not r.lifted and state.held_by and state.cube[1] > state.table_height + LIFT_MARGIN:
            r.lifted, r.lifted_step = True, t
        if r.lifted and not r.transferred and state.held_by is None and in_zone(state):
            r.transferred, r.transferred_step = True, t
        r.check()


# ---- episodes and evaluation ----------------------------------------------

ChunkPolicy = Callable[[Frame], np.ndarray]


def expert_policy(state_ref: List[WorldState]) -> ChunkPolicy:
    """Adapter exposing the expert as a one-action chunk policy over the live state."""

    def act(frame: Frame) -> np.ndarray:
        return scripted_expert(state_ref[0])[None]

    return act


def random_policy(rng: Rng, chunk: int = 1) -> ChunkPolicy:
    def act(frame: Frame) -> np.ndarray:
        return rng.uniform(0.0, 1.0, (chunk, ACTION_DIM), dtype=np.float64) * (ACTION_HIGH - ACTION_LOW) + ACTION_LOW

    return act


def run_episode(
    state: WorldState,
    policy: ChunkPolicy,
    length: int,
    state_ref: Optional[List[WorldState]] = None,
    on_step: Optional[Callable[[int, WorldState, Frame], None]] = None,
) -> EpisodeResult:
    """Roll out ``length`` steps executing each predicted chunk to completion.

    A chunk of ``k`` actions is requested every ``k`` steps; the policy is
    never consulted mid-chunk.
    """
    tracker = PhaseTracker()
    queue: List[np.ndarray] = []
    chunk_len: Optional[int] = None
    calls = 0
    for t in range(length):
        if state_ref is not None:
            state_ref[0] = state
        if not queue:
            frame = observe(state)
            if on_step is not None:
                on_step(t, state, frame)
            chunk = np.asarray(policy(frame), dtype=np.float64)
            if chunk.ndim != 2 or chunk.shape[1] != ACTION_DIM or chunk.shape[0] < 1:
                raise UsageError(f"policy returned a chunk of shape {chunk.shape}")
            if chunk_len is not None and chunk.shape[0] != chunk_len:
                raise UsageError(f"chunk length changed from {chunk_len} to {chunk.shape[0]}")
            chunk_len = chunk.shape[0]
            queue = list(chunk)
            calls += 1
        elif on_step is not None:
            on_step(t, state, observe(state))
        state = step(state, queue.pop(0))
        tracker.update(state, t + 1)
    if chunk_len is not None and calls != math.ceil(length / chunk_len):
        raise UsageError(f"{calls} chunks requested for {length} steps of chunk length {chunk_len}")
    return tracker.result


@dataclass
class EvaluationTable:
    degradation: str
    results: List[EpisodeResult]

    def summary(self) -> Dict[str, float]:
        n = len(self.results)
        row: Dict[str, float] = {"degradation": self.degradation, "rollouts": n}
        for phase in ("touched", "lifted", "transferred"):
            hits = [r for r in self.results if getattr(r, phase)]
            row[f"{phase}_pct"] = 100.0 * len(hits) / n if n else 0.0
            steps = [getattr(r, f"{phase}_step") for r in hits]
            row[f"{phase}_mean_step"] = float(np.mean(steps)) if steps else float("nan")
        return row

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"rollout": i, "touched": r.touched, "lifted": r.lifted, "transferred": r.transferred}
                for i, r in enumerate(self.results)
            ]
        )


def evaluate_policy(
    make_policy: Callable[[List[WorldState]], ChunkPolicy],
    n_rollouts: int,
    degradation: str,
    seed: int,
    length: int = 60,
) -> EvaluationTable:
    """Roll out ``n_rollouts`` episodes; rollout ``i`` starts from ``reset(Rng(seed).fork(i))``.

    ``make_policy`` receives a one-element list holding the live state so
    state-based controllers (the expert) can read it; learned policies
    ignore it and use the frame.
    """
    check_degradation(degradation)
    root = Rng(seed)
    results = []
    for i in range(n_rollouts):
        state_ref: List[WorldState] = [None]
        policy = make_policy(state_ref)
        results.append(run_episode(reset(root.fork(i), degradation), policy, length, state_ref))
    table = EvaluationTable(degradation, results)
    logger.info("evaluation %s", table.summary())
    return table
