"""Relative pose and visibility probing of trained encoders.

The probe asks a frozen encoder a geometric question: given the current view
and the goal view, where is the goal pose relative to the observer, and how
much of the goal image is visible from here?  A small head is trained on the
encoder's token grid; navigation reward never enters.

Ground truth comes from the simulator.  Translation and rotation are planar
(2 and 2x2); visibility partitions the goal image columns into patches and
ray-tests each patch's central hit point against the observer's view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from . import world
from .autodiff import Tensor
from .encoders import Linear, Module
from .world import DEFAULT_FOV, FloorPlan, Pose

PATCH_COLUMNS = 4


# ---------------------------------------------------------------------------
# pose algebra
# ---------------------------------------------------------------------------

def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def relative_pose(obs_pose: Pose, goal_pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(translation, rotation) of the goal pose in the observer's frame."""
    delta = np.array([goal_pose.x - obs_pose.x, goal_pose.y - obs_pose.y])
    t_star = rotation_matrix(-obs_pose.theta) @ delta
    r_star = rotation_matrix(goal_pose.theta - obs_pose.theta)
    return t_star, r_star


def compose_pose(obs_pose: Pose, t_star: np.ndarray, r_star: np.ndarray) -> Pose:
    """Apply a relative pose to an observer pose; inverse of relative_pose."""
    xy = np.array([obs_pose.x, obs_pose.y]) + rotation_matrix(obs_pose.theta) @ t_star
    heading = obs_pose.theta + float(np.arctan2(r_star[1, 0], r_star[0, 0]))
    return Pose(float(xy[0]), float(xy[1]), _wrap(heading))


def _wrap(a: float) -> float:
    return float((a + np.pi) % (2.0 * np.pi) - np.pi)


def project_to_rotation(r_raw: np.ndarray) -> np.ndarray:
    """Nearest rotation matrices (Frobenius) to a [..., 2, 2] batch."""
    u, _, vt = np.linalg.svd(r_raw)
    uv = u @ vt
    det = np.linalg.det(uv)
    fix = np.ones(r_raw.shape[:-2] + (2,))
    fix[..., 1] = np.sign(det)
    return (u * fix[..., None, :]) @ vt


# ---------------------------------------------------------------------------
# visibility
# ---------------------------------------------------------------------------

def compute_visibility(plan: FloorPlan, obs_pose: Pose, goal_pose: Pose,
                       image_width: int = 32, fov: float = DEFAULT_FOV) -> float:
    """Fraction of goal-image column patches visible from the observer.

    The goal image's columns are split into patches of PATCH_COLUMNS columns.
    A patch counts as visible when its central ray's hit point lies inside
    the observer's field of view and the segment from the observer to that
    point is unoccluded, with one cell size of tolerance.
    """
    if image_width % PATCH_COLUMNS != 0:
        raise ValueError("image width must be a multiple of the patch width")
    centers = np.arange(0, image_width, PATCH_COLUMNS) + (PATCH_COLUMNS - 1) / 2.0
    offsets = fov * (0.5 - centers / (image_width - 1))
    hit_x, hit_y = patch_hit_points(plan, goal_pose, offsets)
    visible = [
        point_visible_from(plan, obs_pose, float(px), float(py), fov=fov)
        for px, py in zip(hit_x, hit_y)
    ]
    return float(np.mean(visible))


def patch_hit_points(plan: FloorPlan, goal_pose: Pose,
                     offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Where the goal camera's rays at the given angular offsets hit walls."""
    angles = goal_pose.theta + offsets
    depth, _, _ = world.raycast(plan, (goal_pose.x, goal_pose.y), angles)
    return goal_pose.x + depth * np.cos(angles), goal_pose.y + depth * np.sin(angles)


def point_visible_from(plan: FloorPlan, obs_pose: Pose, px: float, py: float,
                       fov: float = DEFAULT_FOV) -> bool:
    """True when the point is inside the observer's view cone and unoccluded.

    The occlusion test walks the raw grid along the segment from the observer
    to the point pulled back by one cell size, so a point sitting on (or just
    inside) its own wall does not occlude itself.
    """
    dx, dy = px - obs_pose.x, py - obs_pose.y
    dist = float(np.hypot(dx, dy))
    if dist == 0.0:
        return True
    bearing = _wrap(np.arctan2(dy, dx) - obs_pose.theta)
    if abs(bearing) > fov / 2.0:
        return False
    if dist <= plan.cell_size:
        return True
    shrink = plan.cell_size / dist
    end = (px - dx * shrink, py - dy * shrink)
    return not world.segment_hits(plan.grid, plan.cell_size,
                                  (obs_pose.x, obs_pose.y), end)[0]


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

POSES_PER_PAIR = 10


@dataclass
class ProbePair:
    """One supervision record: two views plus their exact relative geometry."""
    obs: np.ndarray
    goal: np.ndarray
    t_star: np.ndarray
    r_star: np.ndarray
    v_star: float
    plan_id: str
    obs_pose: Pose
    goal_pose: Pose

    def __post_init__(self) -> None:
        if not (0.0 <= self.v_star <= 1.0):
            raise ValueError("visibility must lie in [0, 1]")
        if not np.allclose(self.r_star @ self.r_star.T, np.eye(2), atol=1e-9):
            raise ValueError("rotation target must be orthonormal")
        if not np.isclose(np.linalg.det(self.r_star), 1.0, atol=1e-9):
            raise ValueError("rotation target must have determinant +1")


def generate_probe_dataset(plans: dict[str, FloorPlan], pairs_per_plan: int,
                           seed: int, image_size: int = 32,
                           fov: float = DEFAULT_FOV,
                           min_geodesic: float = 1.0,
                           heading_jitter: float = np.pi / 3.0,
                           max_tries: int = 200) -> Iterator[ProbePair]:
    """Path-sampled probe records, POSES_PER_PAIR per endpoint pair.

    For each pair of sampled free endpoints, the records pair evenly spaced
    poses along the shortest path with the path's end pose.  Headings follow
    the path direction plus uniform jitter, so the rotation target cannot be
    read off a translation prior.  The last record pairs the end pose with
    itself.
    """
    for plan_index, plan_id in enumerate(sorted(plans)):
        plan = plans[plan_id]
        rng = np.random.default_rng([seed, plan_index])
        for _ in range(pairs_per_plan):
            poses = _sample_path_poses(rng, plan, min_geodesic, max_tries)
            if heading_jitter > 0.0:
                poses = [
                    Pose(p.x, p.y,
                         _wrap(p.theta + rng.uniform(-heading_jitter,
                                                     heading_jitter)))
                    for p in poses
                ]
            goal_pose = poses[-1]
            goal_img = world.render(plan, goal_pose, image_size, image_size, fov)
            for obs_pose in poses:
                t_star, r_star = relative_pose(obs_pose, goal_pose)
                yield ProbePair(
                    obs=world.render(plan, obs_pose, image_size, image_size, fov),
                    goal=goal_img,
                    t_star=t_star,
                    r_star=r_star,
                    v_star=compute_visibility(plan, obs_pose, goal_pose,
                                              image_width=image_size, fov=fov),
                    plan_id=plan_id,
                    obs_pose=obs_pose,
                    goal_pose=goal_pose,
                )


def _sample_path_poses(rng: np.random.Generator, plan: FloorPlan,
                       min_geodesic: float, max_tries: int) -> list[Pose]:
    for _ in range(max_tries):
        start = world.sample_free_pose(rng, plan)
        end = world.sample_free_pose(rng, plan)
        field = world.distance_field(plan, (end.x, end.y))
        iy, ix = world.cell_of(plan, start.x, start.y)
        if not np.isfinite(field[iy, ix]) or field[iy, ix] < min_geodesic:
            continue
        path = world.greedy_descent_path(plan, field, (start.x, start.y))
        if len(path) < 2:
            continue
        picks = np.round(np.linspace(0, len(path) - 1, POSES_PER_PAIR)).astype(int)
        return [_path_pose(plan, path, int(i)) for i in picks]
    raise RuntimeError("could not sample a reachable endpoint pair")


def _path_pose(plan: FloorPlan, path: list[tuple[int, int]], i: int) -> Pose:
    x, y = world.cell_center(plan, *path[i])
    ahead = path[min(i + 1, len(path) - 1)]
    behind = path[max(i - 1, 0)] if ahead == path[i] else path[i]
    ax, ay = world.cell_center(plan, *ahead)
    bx, by = world.cell_center(plan, *behind)
    theta = float(np.arctan2(ay - by, ax - bx)) if (ax, ay) != (bx, by) else 0.0
    return Pose(x, y, theta)


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------

def _record_dtype(image_size: int) -> np.dtype:
    return np.dtype([
        ("obs", "<f4", (3, image_size, image_size)),
        ("goal", "<f4", (3, image_size, image_size)),
        ("t", "<f8", (2,)),
        ("r", "<f8", (2, 2)),
        ("v", "<f8"),
        ("obs_pose", "<f8", (3,)),
        ("goal_pose", "<f8", (3,)),
    ])


def pairs_to_array(pairs: Iterable[ProbePair], image_size: int) -> np.ndarray:
    pairs = list(pairs)
    out = np.zeros(len(pairs), dtype=_record_dtype(image_size))
    for i, p in enumerate(pairs):
        out[i] = (p.obs, p.goal, p.t_star, p.r_star, p.v_star,
                  p.obs_pose.as_array(), p.goal_pose.as_array())
    return out


def write_probe_dataset(path: str | Path, records: np.ndarray, seed: int) -> None:
    """Raw records plus a JSON sidecar describing them."""
    path = Path(path)
    image_size = records.dtype["obs"].shape[-1]
    records.tofile(path)
    sidecar = {"image_dims": [3, image_size, image_size],
               "count": int(len(records)), "seed": int(seed)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def read_probe_dataset(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    dtype = _record_dtype(sidecar["image_dims"][-1])
    expected = sidecar["count"] * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ValueError(
            f"dataset size mismatch: sidecar promises {expected} bytes, "
            f"file has {actual}")
    return np.fromfile(path, dtype=dtype), sidecar


# ---------------------------------------------------------------------------
# probe head
# ---------------------------------------------------------------------------

@dataclass
class ProbeHeadConfig:
    """Capacity-matched head: projection dim is solved per backbone."""
    mlp_hidden: int = 1024
    target_params: int = 300_000
    tolerance: float = 0.10
    proj_dim: int | None = None

    def resolve_proj_dim(self, num_tokens: int, token_dim: int) -> int:
        if self.proj_dim is not None:
            return self.proj_dim
        fixed = self.mlp_hidden + self.mlp_hidden * 7 + 7
        per_dim = token_dim + 1 + num_tokens * self.mlp_hidden
        dim = max(1, round((self.target_params - fixed) / per_dim))
        return dim


class ProbeHead(Module):
    """Token-wise projection, flatten, one-hidden-layer MLP, three outputs."""

    def __init__(self, name: str, rng: np.random.Generator, num_tokens: int,
                 token_dim: int, config: ProbeHeadConfig | None = None):
        super().__init__(name)
        self.config = config or ProbeHeadConfig()
        self.num_tokens = num_tokens
        self.token_dim = token_dim
        self.proj_dim = self.config.resolve_proj_dim(num_tokens, token_dim)
        hidden = self.config.mlp_hidden
        self.proj = self.child(Linear(f"{name}.proj", rng, token_dim, self.proj_dim))
        self.mlp = self.child(Linear(f"{name}.mlp", rng,
                                     num_tokens * self.proj_dim, hidden))
        self.t_head = self.child(Linear(f"{name}.t", rng, hidden, 2))
        self.r_head = self.child(Linear(f"{name}.r", rng, hidden, 4))
        self.v_head = self.child(Linear(f"{name}.v", rng, hidden, 1))
        total = self.param_count()
        lo = self.config.target_params * (1.0 - self.config.tolerance)
        hi = self.config.target_params * (1.0 + self.config.tolerance)
        if not lo <= total <= hi:
            raise ValueError(
                f"head has {total} parameters, outside +-"
                f"{self.config.tolerance:.0%} of {self.config.target_params}")

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """tokens [N, T, C] -> (t [N, 2], r_raw [N, 2, 2], v [N])."""
        n, t, c = tokens.shape
        if (t, c) != (self.num_tokens, self.token_dim):
            raise ValueError(
                f"token grid {(t, c)} does not match configured "
                f"{(self.num_tokens, self.token_dim)}")
        x = self.proj(ad.reshape(tokens, (n * t, c)))
        x = ad.relu(self.mlp(ad.reshape(x, (n, t * self.proj_dim))))
        t_pred = self.t_head(x)
        r_raw = ad.reshape(self.r_head(x), (n, 2, 2))
        v_pred = ad.reshape(ad.sigmoid(self.v_head(x)), (n,))
        return t_pred, r_raw, v_pred


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------

@dataclass
class ProbeLossConfig:
    tau: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly between 0 and 1")


def probe_loss(t_pred: Tensor, r_raw: Tensor, v_pred: Tensor,
               t_star: np.ndarray, r_star: np.ndarray, v_star: np.ndarray,
               tau: float) -> Tensor:
    """Sum over records of |v - v*| plus gated L1 pose error.

    Pose supervision only flows where the target visibility exceeds tau; the
    rotation term compares raw matrix entries.
    """
    gate = Tensor((v_star > tau).astype(np.float64))
    v_term = ad.tsum(ad.tabs(v_pred - Tensor(v_star)))
    t_err = ad.tsum(ad.tabs(t_pred - Tensor(t_star)), axis=1)
    r_err = ad.tsum(ad.tabs(ad.reshape(r_raw, (r_raw.shape[0], 4))
                            - Tensor(r_star.reshape(-1, 4))), axis=1)
    return v_term + ad.tsum(gate * (t_err + r_err))


def pose_errors(t_pred: np.ndarray, r_pred: np.ndarray, t_star: np.ndarray,
                r_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Euclidean distance and absolute wrapped heading error per record."""
    dist = np.linalg.norm(t_pred - t_star, axis=1)
    rot = project_to_rotation(r_pred)
    ang_pred = np.arctan2(rot[:, 1, 0], rot[:, 0, 0])
    ang_star = np.arctan2(r_star[:, 1, 0], r_star[:, 0, 0])
    ang = np.abs((ang_pred - ang_star + np.pi) % (2.0 * np.pi) - np.pi)
    return dist, ang


def probe_metrics(t_pred: np.ndarray, r_pred: np.ndarray, v_pred: np.ndarray,
                  t_star: np.ndarray, r_star: np.ndarray, v_star: np.ndarray,
                  tau: float) -> dict:
    """Pose accuracy at two thresholds plus visibility accuracy.

    Pose accuracy counts only records whose target visibility exceeds tau;
    with no such records those entries are None rather than zero.
    """
    if len(v_star) == 0:
        raise ValueError("metrics are undefined on an empty set")
    vis_ok = np.abs(v_pred - v_star) <= 0.05
    eligible = v_star > tau
    out = {
        "pose_acc_1m_10deg": None,
        "pose_acc_2m_20deg": None,
        "visibility_acc": float(np.mean(vis_ok)),
        "num_pairs": int(len(v_star)),
        "num_visible_pairs": int(np.sum(eligible)),
    }
    if eligible.any():
        dist, ang = pose_errors(t_pred[eligible], r_pred[eligible],
                                t_star[eligible], r_star[eligible])
        out["pose_acc_1m_10deg"] = float(np.mean(
            (dist <= 1.0) & (ang <= np.deg2rad(10.0))))
        out["pose_acc_2m_20deg"] = float(np.mean(
            (dist <= 2.0) & (ang <= np.deg2rad(20.0))))
    return out


def mean_pose_predictions(train_records: np.ndarray,
                          count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Constant predictions at the training set's mean pose and visibility.

    The translation-prior floor: any probe must beat this to demonstrate that
    the encoder carries pose information.
    """
    t_mean = train_records["t"].mean(axis=0)
    r_mean = project_to_rotation(train_records["r"].mean(axis=0))
    v_mean = train_records["v"].mean()
    return (np.tile(t_mean, (count, 1)),
            np.tile(r_mean, (count, 1, 1)),
            np.full(count, v_mean))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def encoder_tokens(encoder: Module, obs: np.ndarray, goal: np.ndarray,
                   trainable: bool) -> Tensor:
    """Token grid for a batch; detached from the encoder unless trainable."""
    if trainable:
        return encoder.tokens(Tensor(obs), Tensor(goal))
    with ad.no_grad():
        tokens = encoder.tokens(Tensor(obs), Tensor(goal))
    return Tensor(tokens.data)


def train_probe(encoder: Module, train_records: np.ndarray,
                val_records: np.ndarray, head_config: ProbeHeadConfig | None = None,
                loss_config: ProbeLossConfig | None = None, epochs: int = 10,
                batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
                train_encoder: bool = False) -> tuple[ProbeHead, dict]:
    """Fit a probe head on frozen encoder features; returns (head, report).

    With train_encoder the encoder's own parameters receive the probing
    gradient as well (supervised pretraining); otherwise every encoder
    parameter must be frozen, and any encoder gradient is a hard failure.
    """
    from .rl import Adam

    loss_config = loss_config or ProbeLossConfig()
    rng = np.random.default_rng([seed, 0x9B0BE])
    head = ProbeHead("probe", rng, encoder.num_tokens, encoder.token_dim,
                     head_config)
    enc_params = encoder.parameters()
    enc_names = {p.name for p in enc_params}
    if train_encoder:
        trainable = head.parameters() + [p for p in enc_params if not p.frozen]
    else:
        frozen_bits = {p.name: p.data.copy() for p in enc_params}
        if any(not p.frozen for p in enc_params):
            raise ValueError("encoder must be fully frozen for probing")
        trainable = head.parameters()
    optimizer = Adam(trainable, lr=lr)
    shuffle = np.random.default_rng([seed, 0x5F0FF])

    n = len(train_records)
    epoch_losses: list[float] = []
    for _ in range(epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            batch = train_records[order[lo:lo + batch_size]]
            tokens = encoder_tokens(encoder, batch["obs"], batch["goal"],
                                    train_encoder)
            t_pred, r_raw, v_pred = head(tokens)
            loss = probe_loss(t_pred, r_raw, v_pred, batch["t"], batch["r"],
                              batch["v"], loss_config.tau) * (1.0 / len(batch))
            grads = ad.backward(loss)
            if not train_encoder:
                leaked = [k for k in grads if k in enc_names]
                assert not leaked, f"gradient reached frozen encoder: {leaked}"
            optimizer.step(grads)
            total += float(loss.data) * len(batch)
        epoch_losses.append(total / n)

    if not train_encoder:
        for p in enc_params:
            assert np.array_equal(p.data, frozen_bits[p.name]), \
                f"frozen encoder parameter changed: {p.name}"

    report = {
        "epoch_losses": epoch_losses,
        "tau": loss_config.tau,
        "train_pairs": int(n),
        "val": evaluate_probe(encoder, head, val_records, loss_config.tau),
        "baseline": baseline_metrics(train_records, val_records,
                                     loss_config.tau),
    }
    return head, report


def evaluate_probe(encoder: Module, head: ProbeHead, records: np.ndarray,
                   tau: float, batch_size: int = 64) -> dict:
    preds_t, preds_r, preds_v = [], [], []
    for lo in range(0, len(records), batch_size):
        batch = records[lo:lo + batch_size]
        tokens = encoder_tokens(encoder, batch["obs"], batch["goal"], False)
        with ad.no_grad():
            t_pred, r_raw, v_pred = head(tokens)
        preds_t.append(t_pred.data)
        preds_r.append(r_raw.data)
        preds_v.append(v_pred.data)
    return probe_metrics(np.concatenate(preds_t), np.concatenate(preds_r),
                         np.concatenate(preds_v), records["t"], records["r"],
                         records["v"], tau)


def baseline_metrics(train_records: np.ndarray, val_records: np.ndarray,
                     tau: float) -> dict:
    t_pred, r_pred, v_pred = mean_pose_predictions(train_records,
                                                   len(val_records))
    return probe_metrics(t_pred, r_pred, v_pred, val_records["t"],
                         val_records["r"], val_records["v"], tau)
