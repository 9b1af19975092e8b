"""Deterministic synthetic grid world with egocentric rendering.

An agent stands at a cell centre facing one of ``360 / rotation_deg``
headings. Objects are coloured cylinders that occupy a cell each; walls are
blocked cells. Frames are rendered with a pinhole camera, a per-pixel depth
buffer and seeded sensor noise, and carry tight boxes for every object with
enough visible pixels.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional

import numpy as np


class WorldError(Exception):
    pass


class PlacementError(WorldError):
    pass


class RejectionError(WorldError):
    pass


class Action(IntEnum):
    MOVE_FORWARD = 0
    MOVE_BACKWARD = 1
    ROTATE_LEFT = 2
    ROTATE_RIGHT = 3


ACTIONS = tuple(Action)


@dataclass(frozen=True)
class WorldConfig:
    grid_size: int = 12
    image_size: int = 32
    channels: int = 3
    num_classes: int = 8
    min_objects: int = 4
    max_objects: int = 8
    min_visible_pixels: int = 4
    fov_deg: float = 90.0
    rotation_deg: int = 90
    wall_density: float = 0.06
    radius_range: tuple[float, float] = (0.25, 0.42)
    height_range: tuple[float, float] = (0.35, 0.9)
    camera_height: float = 0.5
    fog_distance: float = 7.0
    illumination_jitter: float = 0.25
    appearance_domain: int = 0
    min_start_objects: int = 3
    max_rejections: int = 400
    scene_types: int = 2

    def __post_init__(self):
        if self.scene_types < 1 or self.num_classes % self.scene_types:
            raise ValueError("scene_types must divide num_classes")
        if self.scene_types > 1 and self.num_classes // self.scene_types < 2:
            raise ValueError("each scene type needs at least two classes")
        if 360 % self.rotation_deg:
            raise ValueError("rotation_deg must divide 360")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects > max_objects")


# Domain A palette: the eight corners of a shrunken colour cube.
_PALETTE_A = np.array(list(itertools.product([0.15, 0.85], repeat=3)), dtype=np.float64)


def _hue_rotation(deg: float) -> np.ndarray:
    """Rotation of RGB space about the grey diagonal."""
    a = np.deg2rad(deg)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(a) * kx + (1 - np.cos(a)) * kx @ kx


@dataclass(frozen=True)
class Domain:
    palette: np.ndarray
    noise: float
    wall_color: np.ndarray
    floor_color: np.ndarray
    ceiling_color: np.ndarray


def class_colours(colours: np.ndarray, num_classes: int, scene_types: int) -> np.ndarray:
    """Class -> colour table under the scene-type grouping.

    Classes split into ``scene_types`` consecutive groups of size G. Slot 0 of
    each group is an anchor with a colour of its own; slot s > 0 of every
    group shares one colour, so those classes are told apart only by the
    scene they appear in.
    """
    if scene_types <= 1:
        return colours[:num_classes]
    g = num_classes // scene_types
    table = np.empty((num_classes, colours.shape[1]))
    for k in range(num_classes):
        grp, slot = divmod(k, g)
        table[k] = colours[grp] if slot == 0 else colours[scene_types + slot - 1]
    return table


def appearance_domain(domain_id: int, num_classes: int = 8, channels: int = 3, scene_types: int = 1) -> Domain:
    """Fixed class -> appearance mapping and noise model for a domain.

    Domain 0 ("A") is the training domain. Domain 1 ("B") rotates every class
    colour about the grey axis, compresses saturation, and uses heavier
    sensor noise and different room colours.
    """
    base = _PALETTE_A
    if num_classes > len(base) or channels != 3:
        rng = np.random.default_rng(12345)
        base = rng.uniform(0.1, 0.9, size=(num_classes, channels))
    base = class_colours(base, num_classes, scene_types)
    if domain_id == 0:
        return Domain(base, 0.06, np.array([0.55, 0.5, 0.45]), np.array([0.3, 0.3, 0.3]), np.array([0.45, 0.45, 0.5]))
    if domain_id == 1:
        if channels == 3:
            rot = _hue_rotation(28.0)
            pal = 0.5 + 0.85 * (base - 0.5) @ rot.T
        else:
            pal = 0.5 + 0.85 * (base - 0.5)
        return Domain(np.clip(pal, 0.0, 1.0), 0.09, np.array([0.45, 0.5, 0.58]), np.array([0.38, 0.34, 0.3]), np.array([0.52, 0.5, 0.44]))
    raise WorldError(f"unknown appearance domain {domain_id}")


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float]
    radius: float
    height: float
    appearance: tuple[float, ...]

    @property
    def cell(self) -> tuple[int, int]:
        return int(np.floor(self.center[0])), int(np.floor(self.center[1]))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    grid_size: int
    walls: frozenset
    objects: tuple[SceneObject, ...]
    appearance_domain: int
    illumination: tuple[float, ...]
    scene_type: int = 0

    def blocked(self, cell: tuple[int, int]) -> bool:
        x, y = cell
        if not (0 <= x < self.grid_size and 0 <= y < self.grid_size):
            return True
        return cell in self.walls or cell in self.object_cells

    @property
    def object_cells(self) -> frozenset:
        return frozenset(o.cell for o in self.objects)

    def free_cells(self) -> list[tuple[int, int]]:
        occ = self.object_cells
        return [
            (x, y)
            for x in range(self.grid_size)
            for y in range(self.grid_size)
            if (x, y) not in self.walls and (x, y) not in occ
        ]

    def wall_grid(self) -> np.ndarray:
        g = np.zeros((self.grid_size, self.grid_size), dtype=bool)
        for x, y in self.walls:
            g[x, y] = True
        return g


@dataclass(frozen=True)
class Pose:
    cell: tuple[int, int]
    heading: int


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: tuple[float, float, float, float]
    object_index: int


@dataclass(frozen=True, eq=False)
class Frame:
    image: np.ndarray
    annotations: tuple[Annotation, ...]
    pose: Pose


# ---------------------------------------------------------------- scenes


def generate_scene(seed: int, config: WorldConfig, max_retries: int = 50) -> SceneSpec:
    """Random room layout, object placement and illumination for ``seed``."""
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    g = config.grid_size
    walls = set()
    for i in range(g):
        walls.update({(i, 0), (i, g - 1), (0, i), (g - 1, i)})
    interior = [(x, y) for x in range(1, g - 1) for y in range(1, g - 1)]
    n_walls = int(round(config.wall_density * len(interior)))
    for k in rng.permutation(len(interior))[:n_walls]:
        walls.add(interior[k])
    free = [c for c in interior if c not in walls]
    if not free:
        raise PlacementError("no free cell")
    domain = appearance_domain(config.appearance_domain, config.num_classes, config.channels, config.scene_types)
    scene_type = int(rng.integers(config.scene_types))
    group = config.num_classes // config.scene_types
    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    if n_obj > len(free) - 1:
        raise PlacementError(f"cannot place {n_obj} objects in {len(free)} free cells")
    objects = []
    taken = set()
    for _ in range(n_obj):
        for _attempt in range(max_retries):
            cell = free[int(rng.integers(len(free)))]
            if cell not in taken:
                break
        else:
            raise PlacementError(f"could not place object after {max_retries} retries")
        taken.add(cell)
        radius = float(rng.uniform(*config.radius_range))
        slack = 0.5 - radius
        cx = cell[0] + 0.5 + float(rng.uniform(-slack, slack))
        cy = cell[1] + 0.5 + float(rng.uniform(-slack, slack))
        cls = scene_type * group + int(rng.integers(group))
        objects.append(
            SceneObject(
                class_id=cls,
                center=(cx, cy),
                radius=radius,
                height=float(rng.uniform(*config.height_range)),
                appearance=tuple(float(v) for v in domain.palette[cls]),
            )
        )
    j = config.illumination_jitter
    illum = tuple(float(v) for v in 1.0 + rng.uniform(-j, j, size=config.channels))
    return SceneSpec(
        seed=int(seed),
        grid_size=g,
        walls=frozenset(walls),
        objects=tuple(objects),
        appearance_domain=config.appearance_domain,
        illumination=illum,
        scene_type=scene_type,
    )


# ---------------------------------------------------------------- motion


def _lattice_direction(heading: int) -> tuple[int, int]:
    k = int(np.round(heading / 45.0)) % 8
    return [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)][k]


def step(scene: SceneSpec, pose: Pose, action: Action, config: WorldConfig) -> Pose:
    """Apply one action; blocked moves leave the pose unchanged."""
    action = Action(action)
    if action == Action.ROTATE_LEFT:
        return Pose(pose.cell, (pose.heading + config.rotation_deg) % 360)
    if action == Action.ROTATE_RIGHT:
        return Pose(pose.cell, (pose.heading - config.rotation_deg) % 360)
    dx, dy = _lattice_direction(pose.heading)
    sign = 1 if action == Action.MOVE_FORWARD else -1
    target = (pose.cell[0] + sign * dx, pose.cell[1] + sign * dy)
    if scene.blocked(target):
        return pose
    return Pose(target, pose.heading)


# ---------------------------------------------------------------- rendering


def _wall_depths(scene: SceneSpec, pose: Pose, config: WorldConfig, focal: float) -> np.ndarray:
    """Forward depth to the first wall along each pixel column's ray (grid DDA)."""
    w = config.image_size
    th = np.deg2rad(pose.heading)
    fwd = np.array([np.cos(th), np.sin(th)])
    left = np.array([-np.sin(th), np.cos(th)])
    offs = (w / 2.0 - (np.arange(w) + 0.5)) / focal
    # forward component of every direction is 1, so the ray parameter is depth
    d = fwd[None, :] + offs[:, None] * left[None, :]
    d[np.abs(d) < 1e-12] = 0.0
    o = np.array(pose.cell, dtype=np.float64) + 0.5
    cell = np.broadcast_to(np.array(pose.cell, dtype=np.int64), (w, 2)).copy()
    stepv = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = np.where(d > 0, (cell + 1 - o) / d, np.where(d < 0, (cell - o) / d, np.inf))
        t_delta = np.where(d != 0, np.abs(1.0 / d), np.inf)
    g = scene.grid_size
    grid = scene.wall_grid()
    out = np.full(w, np.nan)
    active = np.ones(w, dtype=bool)
    cols = np.arange(w)
    for _ in range(4 * g):
        axis = (t_max[:, 1] < t_max[:, 0]).astype(np.int64)
        t_hit = t_max[cols, axis]
        cell[cols, axis] += stepv[cols, axis]
        t_max[cols, axis] += t_delta[cols, axis]
        x, y = cell[:, 0], cell[:, 1]
        outside = (x < 0) | (x >= g) | (y < 0) | (y >= g)
        hit = outside | grid[np.clip(x, 0, g - 1), np.clip(y, 0, g - 1)]
        newly = hit & active
        out[newly] = t_hit[newly]
        active &= ~hit
        if not active.any():
            break
    return out


def rasterize(scene: SceneSpec, pose: Pose, config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free [H, W, C] view plus the per-pixel owner map (object index or -1)."""
    h = w = config.image_size
    c = config.channels
    domain = appearance_domain(scene.appearance_domain, config.num_classes, c, config.scene_types)
    focal = (w / 2.0) / np.tan(np.deg2rad(config.fov_deg) / 2.0)
    horizon = h / 2.0
    cam_h = config.camera_height
    illum = np.asarray(scene.illumination)

    def fogged(color, depth):
        k = 1.0 - np.exp(-depth / config.fog_distance)
        return (1.0 - k) * color + k * domain.ceiling_color

    img = np.empty((h, w, c))
    img[: h // 2] = domain.ceiling_color * illum
    img[h // 2 :] = domain.floor_color * illum
    depth = np.full((h, w), np.inf)
    owner = np.full((h, w), -1, dtype=np.int64)
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5

    wall_z = _wall_depths(scene, pose, config, focal)
    for u in range(w):
        z = wall_z[u]
        top = horizon - focal * (1.0 - cam_h) / z
        bot = horizon + focal * cam_h / z
        mask = (rows >= top) & (rows <= bot)
        shade = fogged(domain.wall_color, z) * illum
        img[mask, u] = shade
        depth[mask, u] = z

    th = np.deg2rad(pose.heading)
    fwd = np.array([np.cos(th), np.sin(th)])
    left = np.array([-np.sin(th), np.cos(th)])
    cam = np.array(pose.cell, dtype=np.float64) + 0.5
    for idx, obj in enumerate(scene.objects):
        rel = np.asarray(obj.center) - cam
        z = float(rel @ fwd)
        if z <= 0.15:
            continue
        x_left = float(rel @ left)
        uc = w / 2.0 - focal * x_left / z
        half = focal * obj.radius / z
        col_mask = np.abs(cols - uc) <= half
        if not col_mask.any():
            continue
        top = horizon - focal * (obj.height - cam_h) / z
        bot = horizon + focal * cam_h / z
        row_mask = (rows >= top) & (rows <= bot)
        region = row_mask[:, None] & col_mask[None, :]
        region &= z < depth
        if not region.any():
            continue
        color = fogged(np.asarray(obj.appearance), z) * illum
        img[region] = color
        depth[region] = z
        owner[region] = idx
    return img, owner


def render(scene: SceneSpec, pose: Pose, config: WorldConfig) -> Frame:
    """Egocentric view of ``scene`` from ``pose``.

    Pure function of its arguments; the image is quantised to float32
    precision so that cache round trips are lossless.
    """
    h = w = config.image_size
    domain = appearance_domain(scene.appearance_domain, config.num_classes, config.channels, config.scene_types)
    img, owner = rasterize(scene, pose, config)
    rng = np.random.default_rng([scene.seed, pose.cell[0], pose.cell[1], pose.heading, scene.appearance_domain, 0xF8A3])
    img = img + domain.noise * rng.normal(size=img.shape)
    image = np.transpose(img, (2, 0, 1)).astype(np.float32).astype(np.float64)

    annotations = []
    for idx, obj in enumerate(scene.objects):
        ys, xs = np.nonzero(owner == idx)
        if len(ys) < config.min_visible_pixels:
            continue
        x0, x1 = xs.min(), xs.max() + 1
        y0, y1 = ys.min(), ys.max() + 1
        box = ((x0 + x1) / 2.0 / w, (y0 + y1) / 2.0 / h, (x1 - x0) / w, (y1 - y0) / h)
        annotations.append(Annotation(obj.class_id, tuple(float(v) for v in box), idx))
    return Frame(image=image, annotations=tuple(annotations), pose=pose)


# ---------------------------------------------------------------- tasks


@dataclass
class Rollout:
    actions: tuple[Action, ...]
    frames: tuple[Frame, ...]


@dataclass
class TaskInstance:
    """A (scene, start pose) pair plus its cached tree of reachable frames.

    ``poses``/``frames`` hold every distinct pose reachable within ``n``
    actions; ``trajectories[k]`` indexes the ``n+1`` frames of the k-th
    action sequence in lexicographic order.
    """

    task_id: str
    scene: SceneSpec
    start: Pose
    n: int
    poses: list[Pose] = field(default_factory=list)
    frames: list[Frame] = field(default_factory=list)
    trajectories: Optional[np.ndarray] = None

    @property
    def initial_frame(self) -> Frame:
        return self.frames[0]

    def rollout(self, actions) -> Rollout:
        idx = trajectory_index(actions)
        rows = self.trajectories[idx]
        return Rollout(tuple(Action(a) for a in actions), tuple(self.frames[i] for i in rows))


def trajectory_index(actions) -> int:
    k = 0
    for a in actions:
        k = k * len(ACTIONS) + int(a)
    return k


def all_action_lists(n: int) -> list[tuple[Action, ...]]:
    return list(itertools.product(ACTIONS, repeat=n))


def build_tree(task: TaskInstance, config: WorldConfig) -> None:
    """Render every pose reachable in ``task.n`` steps and index all trajectories."""
    pose_ids: dict[Pose, int] = {}
    poses: list[Pose] = []

    def pid(p: Pose) -> int:
        if p not in pose_ids:
            pose_ids[p] = len(poses)
            poses.append(p)
        return pose_ids[p]

    pid(task.start)
    # breadth-first over prefixes; rows of `level` are pose ids of each prefix
    level = np.array([[0]], dtype=np.int64)
    for _ in range(task.n):
        nxt = []
        for row in level:
            cur = poses[row[-1]]
            for a in ACTIONS:
                nxt.append(np.append(row, pid(step(task.scene, cur, a, config))))
        level = np.array(nxt, dtype=np.int64)
    task.poses = poses
    task.frames = [render(task.scene, p, config) for p in poses]
    task.trajectories = level


def enumerate_trajectories(task: TaskInstance, n: int, config: WorldConfig) -> list[Rollout]:
    """All ``4**n`` rollouts from the task's start pose, lexicographic in actions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if task.trajectories is None or task.n != n:
        task.n = n
        build_tree(task, config)
    return [task.rollout(acts) for acts in all_action_lists(n)]


@dataclass(frozen=True)
class SplitConfig:
    name: str
    seed_base: int
    appearance_domain: int = 0


SPLITS = {
    "train": SplitConfig("train", 0),
    "test": SplitConfig("test", 1_000_000),
    "pretrain": SplitConfig("pretrain", 2_000_000),
    "test_b": SplitConfig("test_b", 3_000_000, appearance_domain=1),
    "pretrain_b": SplitConfig("pretrain_b", 4_000_000, appearance_domain=1),
}


def _objects_in_cone(scene: SceneSpec, pose: Pose, config: WorldConfig) -> int:
    """Upper bound on visible objects: those whose extent enters the view cone."""
    th = np.deg2rad(pose.heading)
    fwd = np.array([np.cos(th), np.sin(th)])
    left = np.array([-np.sin(th), np.cos(th)])
    cam = np.array(pose.cell, dtype=np.float64) + 0.5
    half = np.tan(np.deg2rad(config.fov_deg) / 2.0)
    count = 0
    for obj in scene.objects:
        rel = np.asarray(obj.center) - cam
        z = rel @ fwd
        if z > 0.15 and abs(rel @ left) <= half * z + obj.radius * 2:
            count += 1
    return count


def sample_start(scene: SceneSpec, seed: int, config: WorldConfig) -> tuple[Pose, Frame]:
    """Rejection-sample a start pose whose frame shows enough objects."""
    rng = np.random.default_rng([int(seed), 0x57A27])
    free = scene.free_cells()
    headings = list(range(0, 360, config.rotation_deg))
    for _ in range(config.max_rejections):
        cell = free[int(rng.integers(len(free)))]
        pose = Pose(cell, headings[int(rng.integers(len(headings)))])
        if _objects_in_cone(scene, pose, config) < config.min_start_objects:
            continue
        frame = render(scene, pose, config)
        if len(frame.annotations) >= config.min_start_objects:
            return pose, frame
    raise RejectionError(f"scene {scene.seed}: no start pose with >= {config.min_start_objects} objects")


def sample_task(seed: int, split: SplitConfig, config: WorldConfig, n: int | None = None) -> TaskInstance:
    """Task ``seed`` of ``split``: a fresh scene plus a start pose showing >= 3 objects.

    With ``n`` given, the rollout tree of depth ``n`` is rendered as well.
    """
    cfg = dataclasses.replace(config, appearance_domain=split.appearance_domain)
    scene_seed = split.seed_base + int(seed)
    scene = generate_scene(scene_seed, cfg)
    pose, frame = sample_start(scene, scene_seed, cfg)
    task = TaskInstance(task_id=f"{split.name}-{seed}", scene=scene, start=pose, n=n or 0, poses=[pose], frames=[frame])
    if n:
        build_tree(task, cfg)
    return task


def sample_tasks(count: int, split: SplitConfig, config: WorldConfig, n: int, first_seed: int = 0) -> list[TaskInstance]:
    """``count`` tasks from consecutive seeds, skipping scenes that fail rejection."""
    tasks = []
    s = first_seed
    while len(tasks) < count:
        try:
            tasks.append(sample_task(s, split, config, n))
        except WorldError:
            pass
        s += 1
    return tasks


def sample_frames(count: int, split: SplitConfig, config: WorldConfig, first_seed: int = 0) -> list[Frame]:
    """Independent single frames (one per fresh scene) for detector pre-training."""
    frames = []
    s = first_seed
    while len(frames) < count:
        try:
            frames.append(sample_task(s, split, config).initial_frame)
        except WorldError:
            pass
        s += 1
    return frames
