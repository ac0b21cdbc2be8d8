"""Synthetic latent world standing in for a talking-head encoder/generator.

Each transmitted frame is a unit-norm latent that mixes an identity code
through map ``A`` with a pose/expression feature through map ``B``, plus
isotropic encoder noise:

    z = normalize(leakage_gain * A @ id_code + pose_gain * B @ q + eps)

``q`` is the pose feature ``[yaw_deg/90] ++ expr_code``. The columns of
``[A | B]`` are drawn once per world from the seeded generator and jointly
orthonormalized, so identity and pose occupy exact complementary
subspaces and pose-swapped pairs differ only inside ``col(A)``.

Identity codes share a global component (mean pairwise cosine around
``ID_SHARED_COS``) with rejection sampling keeping every pair below the
0.8 separation cap. Faces are alike; that is what makes naive latent
comparison against a reference weak while leaving a learnable signal.

Cross-reenactment (puppeteering) is exactly ``embed(world, l, pose_of_k)``:
the driving pose is preserved, the identity swapped.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    SeparationUnsatisfiableError,
    TooFewIdentitiesError,
    UnknownIdentityError,
)
from .numerics import Rng, l2_normalize

# Mean pairwise cosine of identity codes (shared facial structure) and the
# hard separation cap enforced by rejection sampling.
ID_SHARED_COS = 0.62
ID_COS_CAP = 0.8
REJECTION_BUDGET = 10_000

# Derived RNG stream ids, fixed so worlds are reproducible field by field.
_STREAM_MIXING = 1
_STREAM_IDENTITIES = 2
_STREAM_SPLIT = 3

WORLD_MAGIC = b"EBLW"
WORLD_VERSION = 1


@dataclass(frozen=True)
class WorldConfig:
    latent_dim: int = 257
    num_identities: int = 16
    id_dim: int = 32
    pose_dim: int = 16
    leakage_gain: float = 0.35
    pose_gain: float = 1.0
    noise_sigma: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim <= 0 or self.id_dim <= 0 or self.pose_dim <= 1:
            raise ConfigError("dimensions must be positive (pose_dim >= 2)")
        if self.id_dim + self.pose_dim > self.latent_dim:
            raise ConfigError(
                f"id_dim + pose_dim = {self.id_dim + self.pose_dim} exceeds "
                f"latent_dim = {self.latent_dim}"
            )
        if self.num_identities < 1:
            raise ConfigError("need at least one identity")
        if self.leakage_gain < 0:
            raise ConfigError("leakage_gain must be >= 0")
        if self.pose_gain <= 0:
            raise ConfigError("pose_gain must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class PoseState:
    """Instantaneous pose/expression: yaw in degrees plus expression code."""

    yaw_deg: float
    expr_code: np.ndarray

    def __post_init__(self):
        if abs(self.yaw_deg) > 90.0:
            raise ConfigError(f"|yaw| = {abs(self.yaw_deg)} exceeds 90 degrees")
        object.__setattr__(self, "expr_code", np.asarray(self.expr_code, dtype=np.float64))

    @staticmethod
    def neutral(pose_dim: int) -> "PoseState":
        return PoseState(0.0, np.zeros(pose_dim - 1))

    def feature(self) -> np.ndarray:
        """Pose feature [yaw/90] ++ expr, length pose_dim."""
        return np.concatenate(([self.yaw_deg / 90.0], self.expr_code))


@dataclass(frozen=True)
class LatentFrame:
    z: np.ndarray
    true_identity: int
    true_pose: PoseState
    t: int = 0


@dataclass(frozen=True)
class ReferencePortrait:
    identity: int
    embedded: np.ndarray
    neutral: bool = True


@dataclass(frozen=True)
class FaceNormal:
    n: np.ndarray


def face_normal(pose: PoseState) -> FaceNormal:
    """Ground-truth face normal from yaw: [sin(yaw), 0, cos(yaw)]."""
    rad = np.deg2rad(pose.yaw_deg)
    return FaceNormal(l2_normalize(np.array([np.sin(rad), 0.0, np.cos(rad)])))


def normal_from_yaw_deg(yaw_deg: float) -> np.ndarray:
    rad = np.deg2rad(yaw_deg)
    return np.array([np.sin(rad), 0.0, np.cos(rad)])


@dataclass(frozen=True)
class Identity:
    id_index: int
    id_code: np.ndarray


class World:
    """Immutable synthetic world: mixing maps plus identity codes."""

    def __init__(self, config: WorldConfig, A: np.ndarray, B: np.ndarray, id_codes: np.ndarray):
        self.config = config
        self.A = A
        self.B = B
        self.id_codes = id_codes
        self.A.setflags(write=False)
        self.B.setflags(write=False)
        self.id_codes.setflags(write=False)

    @property
    def num_identities(self) -> int:
        return self.config.num_identities

    def identity(self, index: int) -> Identity:
        self._check_identity(index)
        return Identity(index, self.id_codes[index])

    def _check_identity(self, index: int) -> None:
        if not 0 <= index < self.config.num_identities:
            raise UnknownIdentityError(f"identity {index} not in world of {self.config.num_identities}")

    def embed(self, identity: int, pose: PoseState, rng: Rng | None = None, t: int = 0) -> LatentFrame:
        """Encode one frame; ``rng`` supplies the noise draw (None = clean)."""
        self._check_identity(identity)
        cfg = self.config
        q = pose.feature()
        if q.size != cfg.pose_dim:
            raise ConfigError(f"pose feature length {q.size} != pose_dim {cfg.pose_dim}")
        raw = cfg.leakage_gain * (self.A @ self.id_codes[identity]) + cfg.pose_gain * (self.B @ q)
        if rng is not None and cfg.noise_sigma > 0:
            raw = raw + rng.normal(size=cfg.latent_dim, scale=cfg.noise_sigma)
        return LatentFrame(l2_normalize(raw), identity, pose, t)

    def embed_batch(
        self,
        identities: np.ndarray,
        yaws_deg: np.ndarray,
        exprs: np.ndarray,
        rng: Rng | None = None,
    ) -> np.ndarray:
        """Vectorized embed: rows of unit-norm latents, same formula as embed()."""
        cfg = self.config
        ids = np.asarray(identities, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.num_identities):
            raise UnknownIdentityError("identity index out of range")
        q = np.concatenate([np.asarray(yaws_deg, dtype=np.float64)[:, None] / 90.0, exprs], axis=1)
        raw = cfg.leakage_gain * (self.id_codes[ids] @ self.A.T) + cfg.pose_gain * (q @ self.B.T)
        if rng is not None and cfg.noise_sigma > 0:
            raw = raw + rng.normal(size=raw.shape, scale=cfg.noise_sigma)
        return raw / np.linalg.norm(raw, axis=1, keepdims=True)

    def reference(self, identity: int) -> ReferencePortrait:
        """Clean neutral portrait embedding (curated image, no stream noise)."""
        frame = self.embed(identity, PoseState.neutral(self.config.pose_dim), rng=None)
        return ReferencePortrait(identity, frame.z, neutral=True)


def build_world(cfg: WorldConfig) -> World:
    """Draw mixing maps and identities once; the result is immutable."""
    cfg.validate()
    rng_mix = Rng(cfg.seed, _STREAM_MIXING)
    joint = rng_mix.normal(size=(cfg.latent_dim, cfg.id_dim + cfg.pose_dim))
    q, r = np.linalg.qr(joint)
    # fix QR sign ambiguity so equal seeds give byte-identical worlds
    q = q * np.sign(np.diag(r))
    A = np.ascontiguousarray(q[:, : cfg.id_dim])
    B = np.ascontiguousarray(q[:, cfg.id_dim :])

    rng_ids = Rng(cfg.seed, _STREAM_IDENTITIES)
    shared = l2_normalize(rng_ids.normal(size=cfg.id_dim))
    codes: list[np.ndarray] = []
    attempts = 0
    while len(codes) < cfg.num_identities:
        attempts += 1
        if attempts > REJECTION_BUDGET:
            raise SeparationUnsatisfiableError(
                f"could not draw {cfg.num_identities} identities below cosine {ID_COS_CAP} "
                f"in {REJECTION_BUDGET} attempts"
            )
        g = rng_ids.normal(size=cfg.id_dim)
        g -= (g @ shared) * shared
        gn = float(np.linalg.norm(g))
        if gn < 1e-9:
            continue
        cand = np.sqrt(ID_SHARED_COS) * shared + np.sqrt(1.0 - ID_SHARED_COS) * (g / gn)
        if all(abs(float(cand @ c)) < ID_COS_CAP for c in codes):
            codes.append(cand)
    return World(cfg, A, B, np.array(codes))


@dataclass
class PoseWalkParams:
    """Bounded random walk over pose with rest-dwell behaviour.

    Yaw takes Gaussian steps reflected at ``yaw_max_deg``. Expression
    wanders with clipped Gaussian steps inside ``[-expr_max, expr_max]``
    per coordinate; with probability ``rest_prob`` per frame the speaker
    snaps back toward the resting face (pose feature near zero), which is
    where reference portraits live.
    """

    step_sigma_deg: float = 4.0
    yaw_max_deg: float = 45.0
    expr_step_sigma: float = 0.08
    expr_max: float = 1.0
    rest_prob: float = 0.05
    rest_dwell: tuple[int, int] = (3, 10)
    start_at_rest: bool = False


@dataclass(frozen=True)
class SessionStream:
    frames: list[LatentFrame]
    reference: ReferencePortrait
    driving_id: int
    target_id: int
    label: int

    def latents(self) -> np.ndarray:
        return np.stack([f.z for f in self.frames])

    def yaws(self) -> np.ndarray:
        return np.array([f.true_pose.yaw_deg for f in self.frames])


def _reflect(value: float, bound: float) -> float:
    """Fold a scalar into [-bound, bound] by reflection."""
    if bound <= 0:
        return 0.0
    period = 4.0 * bound
    x = (value + bound) % period
    if x < 0:
        x += period
    if x > 2.0 * bound:
        x = period - x
    return x - bound


def walk_poses(num_frames: int, params: PoseWalkParams, pose_dim: int, rng: Rng) -> list[PoseState]:
    """Generate the pose trajectory for one session."""
    d = pose_dim - 1
    if params.start_at_rest:
        yaw = 0.0
        expr = np.zeros(d)
    else:
        yaw = float(rng.uniform(-params.yaw_max_deg / 2.0, params.yaw_max_deg / 2.0))
        expr = rng.uniform(-params.expr_max, params.expr_max, size=d)
    poses = []
    rest_left = 0
    for _ in range(num_frames):
        if rest_left > 0:
            rest_left -= 1
            yaw = float(np.clip(yaw * 0.5, -params.yaw_max_deg, params.yaw_max_deg))
            expr = expr * 0.3
        else:
            if params.rest_prob > 0 and float(rng.random()) < params.rest_prob:
                lo, hi = params.rest_dwell
                rest_left = int(rng.integers(lo, hi + 1))
            yaw = _reflect(yaw + float(rng.normal(scale=params.step_sigma_deg)), params.yaw_max_deg)
            expr = np.clip(
                expr + rng.normal(size=d, scale=params.expr_step_sigma * max(params.expr_max, 1e-9)),
                -params.expr_max,
                params.expr_max,
            )
        poses.append(PoseState(yaw, expr.copy()))
    return poses


def sample_session(
    world: World,
    driving_id: int,
    target_id: int,
    num_frames: int,
    pose_walk_params: PoseWalkParams | None = None,
    rng: Rng | None = None,
) -> SessionStream:
    """One call: neutral reference of the target, stream driven by ``driving_id``.

    label = 1 iff the driving identity differs from the target (attack).
    """
    if num_frames < 1:
        raise ConfigError("num_frames must be >= 1")
    world._check_identity(driving_id)
    world._check_identity(target_id)
    params = pose_walk_params or PoseWalkParams()
    rng = rng or Rng(world.config.seed, 97)
    poses = walk_poses(num_frames, params, world.config.pose_dim, rng)
    yaws = np.array([p.yaw_deg for p in poses])
    exprs = np.stack([p.expr_code for p in poses])
    zs = world.embed_batch(np.full(num_frames, driving_id), yaws, exprs, rng=rng)
    frames = [LatentFrame(zs[i], driving_id, poses[i], i) for i in range(num_frames)]
    return SessionStream(
        frames=frames,
        reference=world.reference(target_id),
        driving_id=driving_id,
        target_id=target_id,
        label=int(driving_id != target_id),
    )


def make_split(world: World, test_fraction: float, seed: int | None = None) -> tuple[list[int], list[int]]:
    """Disjoint identity split; test count = max(1, round(frac * N)), half-up."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must be in (0, 1)")
    n = world.config.num_identities
    n_test = max(1, int(np.floor(test_fraction * n + 0.5)))
    if n_test >= n:
        raise TooFewIdentitiesError(f"split leaves no training identities (N={n}, test={n_test})")
    rng = Rng(world.config.seed if seed is None else seed, _STREAM_SPLIT)
    order = rng.permutation(n)
    test_ids = sorted(int(i) for i in order[:n_test])
    train_ids = sorted(int(i) for i in order[n_test:])
    return train_ids, test_ids


# ---------------------------------------------------------------------------
# Serialization: versioned binary world file plus JSON-lines session dump.

def save_world(world: World, path: str) -> None:
    cfg = world.config
    with open(path, "wb") as fh:
        fh.write(WORLD_MAGIC)
        fh.write(struct.pack("<H", WORLD_VERSION))
        fh.write(
            struct.pack(
                "<IIIIdddQ",
                cfg.latent_dim,
                cfg.num_identities,
                cfg.id_dim,
                cfg.pose_dim,
                cfg.leakage_gain,
                cfg.pose_gain,
                cfg.noise_sigma,
                cfg.seed,
            )
        )
        for arr in (world.A, world.B, world.id_codes):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_world(path: str) -> World:
    from .errors import BadMagicError, TruncatedError

    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 6 or data[:4] != WORLD_MAGIC:
        raise BadMagicError("not a world file")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != WORLD_VERSION:
        raise BadMagicError(f"unsupported world version {version}")
    header = struct.calcsize("<IIIIdddQ")
    if len(data) < 6 + header:
        raise TruncatedError("world header truncated")
    latent_dim, num_ids, id_dim, pose_dim, leak, pose_gain, sigma, seed = struct.unpack_from(
        "<IIIIdddQ", data, 6
    )
    cfg = WorldConfig(latent_dim, num_ids, id_dim, pose_dim, leak, pose_gain, sigma, seed)
    off = 6 + header
    sizes = [latent_dim * id_dim, latent_dim * pose_dim, num_ids * id_dim]
    need = off + 8 * sum(sizes)
    if len(data) < need:
        raise TruncatedError("world payload truncated")
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).copy())
        off += 8 * count
    A = arrays[0].reshape(latent_dim, id_dim)
    B = arrays[1].reshape(latent_dim, pose_dim)
    codes = arrays[2].reshape(num_ids, id_dim)
    return World(cfg, A, B, codes)


def dump_session_jsonl(session: SessionStream, path: str) -> None:
    """One frame per line for ad-hoc inspection; not a wire format."""
    with open(path, "w") as fh:
        meta = {
            "driving_id": session.driving_id,
            "target_id": session.target_id,
            "label": session.label,
        }
        fh.write(json.dumps({"meta": meta}) + "\n")
        for f in session.frames:
            fh.write(
                json.dumps(
                    {
                        "t": f.t,
                        "identity": f.true_identity,
                        "yaw": f.true_pose.yaw_deg,
                        "z": [float(x) for x in f.z],
                    }
                )
                + "\n"
            )
