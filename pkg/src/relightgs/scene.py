"""Domain types: Gaussian frames and sequences, cameras, environment maps, material maps."""

from dataclasses import dataclass, field, replace

import numpy as np

from .color import SH_COEFFS, eval_sh

QUAT_TOL = 1e-6
QUAT_RENORM_TOL = 1e-3
ROT_TOL = 1e-5
NORMAL_TOL = 1e-3


class SceneError(ValueError):
    """Base class for malformed scene data."""


class InvalidGaussianError(SceneError):
    def __init__(self, field_name, index, message=None):
        self.field = field_name
        self.index = int(index)
        super().__init__(message or f"invalid {field_name} at gaussian {index}")


def quat_to_rotmat(q):
    """Rotation matrices from wxyz quaternions, shape (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """wxyz quaternions from rotation matrices (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    for k, m in enumerate(R):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q[k] = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q[k] = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q[k] = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q[k] = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def axis_angle_to_quat(v):
    """wxyz quaternions from rotation vectors (axis * angle)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * angle
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(angle > 1e-12, np.sin(half) / angle, 0.5)
    return np.concatenate([np.cos(half), v * k], axis=-1)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Gaussian:
    """A single splat; PBR fields are None until populated."""

    mean: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray | None = None
    base_color: np.ndarray | None = None
    roughness: float | None = None
    ao: float | None = None

    def rotation(self):
        return quat_to_rotmat(np.asarray(self.quat, dtype=np.float64)[None])[0]

    def precision(self):
        R = self.rotation()
        return R @ np.diag(1.0 / np.asarray(self.scale, dtype=np.float64) ** 2) @ R.T


@dataclass(frozen=True, eq=False)
class GaussianFrame:
    """One time step of N Gaussians stored as structure-of-arrays.

    Identity is positional: row ``i`` is the same Gaussian in every frame of
    a sequence. ``sh`` is the degree-3 colour block (N, 16, 3) and may be
    absent; the PBR attributes are either all present or all absent.
    """

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray | None = None
    base_color: np.ndarray | None = None
    roughness: np.ndarray | None = None
    ao: np.ndarray | None = None
    t: int = 0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = np.asarray(self.means).reshape(-1, 3).shape[0]
        object.__setattr__(self, "means", _frozen(np.reshape(self.means, (n, 3))))
        object.__setattr__(self, "quats", _frozen(np.reshape(self.quats, (n, 4))))
        object.__setattr__(self, "scales", _frozen(np.reshape(self.scales, (n, 3))))
        object.__setattr__(self, "opacities", _frozen(np.reshape(self.opacities, (n,))))
        if self.sh is not None:
            object.__setattr__(self, "sh", _frozen(np.reshape(self.sh, (n, SH_COEFFS, 3))))
        pbr = [self.base_color is not None, self.roughness is not None, self.ao is not None]
        if any(pbr) and not all(pbr):
            raise SceneError("base_color, roughness and ao must be given together")
        if all(pbr):
            object.__setattr__(self, "base_color", _frozen(np.reshape(self.base_color, (n, 3))))
            object.__setattr__(self, "roughness", _frozen(np.reshape(self.roughness, (n,))))
            object.__setattr__(self, "ao", _frozen(np.reshape(self.ao, (n,))))
        if int(self.t) < 0:
            raise SceneError("time index must be >= 0")

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        return Gaussian(self.means[i], self.quats[i], self.scales[i], float(self.opacities[i]),
                        None if self.sh is None else self.sh[i],
                        None if self.base_color is None else self.base_color[i],
                        None if self.roughness is None else float(self.roughness[i]),
                        None if self.ao is None else float(self.ao[i]))

    @classmethod
    def from_gaussians(cls, gaussians, t=0):
        gs = list(gaussians)
        kw = dict(means=[g.mean for g in gs], quats=[g.quat for g in gs], scales=[g.scale for g in gs],
                  opacities=[g.opacity for g in gs], t=t)
        if gs and gs[0].sh is not None:
            kw["sh"] = [g.sh for g in gs]
        if gs and gs[0].base_color is not None:
            kw.update(base_color=[g.base_color for g in gs], roughness=[g.roughness for g in gs],
                      ao=[g.ao for g in gs])
        return cls(**kw)

    @classmethod
    def empty(cls, t=0):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), t=t)

    @property
    def has_sh(self):
        return self.sh is not None

    @property
    def has_pbr(self):
        return self.base_color is not None

    def replace(self, **changes):
        return replace(self, _cache={}, **changes)

    def validate(self):
        """Check every invariant; raise InvalidGaussianError naming the first offender."""
        fields = [("position", self.means), ("orientation", self.quats), ("scale", self.scales),
                  ("opacity", self.opacities)]
        if self.has_sh:
            fields.append(("color", self.sh.reshape(len(self), -1)))
        if self.has_pbr:
            fields += [("base_color", self.base_color), ("roughness", self.roughness), ("ao", self.ao)]
        for name, arr in fields:
            bad = ~np.isfinite(arr.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise InvalidGaussianError(name, np.flatnonzero(bad)[0], f"non-finite {name} at gaussian {np.flatnonzero(bad)[0]}")
        qn = np.linalg.norm(self.quats, axis=1)
        bad = np.abs(qn - 1.0) > QUAT_TOL
        if bad.any():
            raise InvalidGaussianError("orientation", np.flatnonzero(bad)[0], "quaternion not unit length")
        bad = ~(self.scales > 0).all(axis=1)
        if bad.any():
            raise InvalidGaussianError("scale", np.flatnonzero(bad)[0], "scale must be positive")
        ranged = [("opacity", self.opacities)]
        if self.has_pbr:
            ranged += [("base_color", self.base_color), ("roughness", self.roughness), ("ao", self.ao)]
        for name, arr in ranged:
            a = arr.reshape(len(self), -1)
            bad = ((a < 0) | (a > 1)).any(axis=1)
            if bad.any():
                i = np.flatnonzero(bad)[0]
                raise InvalidGaussianError(name, i, f"{name} out of [0, 1] at gaussian {i}")
        return self

    # derived quantities, cached per frame
    def rotations(self):
        if "R" not in self._cache:
            self._cache["R"] = quat_to_rotmat(self.quats)
        return self._cache["R"]

    def covariances(self):
        R = self.rotations()
        return np.einsum("nij,nj,nkj->nik", R, self.scales ** 2, R)

    def precisions(self):
        if "P" not in self._cache:
            R = self.rotations()
            self._cache["P"] = np.einsum("nij,nj,nkj->nik", R, 1.0 / self.scales ** 2, R)
        return self._cache["P"]

    def normal_axes(self):
        """Unit axis of the smallest scale component, unoriented."""
        if "n" not in self._cache:
            R = self.rotations()
            k = np.argmin(self.scales, axis=1)
            self._cache["n"] = np.ascontiguousarray(R[np.arange(len(self)), :, k])
        return self._cache["n"]

    def colors(self, eye):
        """View-dependent RGB seen from camera centre ``eye``; clamped at zero."""
        if not self.has_sh:
            if self.has_pbr:
                return np.array(self.base_color)
            return np.full((len(self), 3), 0.5)
        d = self.means - np.asarray(eye, dtype=np.float64)
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return eval_sh(self.sh, d)


@dataclass
class GaussianSequence:
    frames: list

    def __post_init__(self):
        if not self.frames:
            raise SceneError("sequence needs at least one frame")
        n = len(self.frames[0])
        for f in self.frames:
            if len(f) != n:
                raise SceneError("all frames in a sequence must have equal length")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def num_gaussians(self):
        return len(self.frames[0])


@dataclass(eq=False)
class CameraView:
    """Pinhole camera in OpenCV convention (x right, y down, z forward).

    Depth in this package is distance along the unit pixel ray, not z.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    image: np.ndarray | None = None
    name: str = "cam"

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.image is not None:
            self.image = np.asarray(self.image, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError(f"camera {self.name}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SceneError(f"camera {self.name}: principal point outside image")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=ROT_TOL) or np.linalg.det(R) < 0:
            raise SceneError(f"camera {self.name}: rotation block not orthonormal")
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1]):
            raise SceneError(f"camera {self.name}: last row must be 0 0 0 1")
        if self.image is not None and self.image.shape[:2] != (self.height, self.width):
            raise SceneError(f"camera {self.name}: image shape does not match resolution")
        return self

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def center(self):
        return -self.rotation.T @ self.world_to_camera[:3, 3]

    def pixel_rays(self, pixels=None):
        """Origins and unit world directions through pixel centres.

        ``pixels`` is an optional flat index array (row-major); default is all.
        """
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        pixels = np.asarray(pixels)
        u = pixels % self.width + 0.5
        v = pixels // self.width + 0.5
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u, dtype=np.float64)], axis=-1)
        d = d @ self.rotation  # R^T d for row vectors
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def project(self, points):
        """Pixel coordinates (u, v) and camera-space z for world points."""
        p = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.world_to_camera[:3, 3]
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[..., 0] / z + self.cx
            v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def with_image(self, image):
        return CameraView(self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                          self.world_to_camera, image, self.name)


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera matrix for an OpenCV camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0]) if abs(f[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)  # camera y points down
    R = np.stack([r, d, f])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


def make_camera(eye, target, width, height, fov_deg=40.0, up=(0.0, 1.0, 0.0), name="cam", image=None):
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraView(width, height, f, f, width / 2, height / 2, look_at(eye, target, up), image, name)


@dataclass(eq=False)
class MaterialMapSet:
    ao: np.ndarray          # (H, W)
    basecolor: np.ndarray   # (H, W, 3)
    depth: np.ndarray       # (H, W), 0 = background
    normal: np.ndarray      # (H, W, 3)
    valid: np.ndarray       # (H, W) bool

    def validate(self):
        v = self.valid
        if (self.ao[v] < 0).any() or (self.ao[v] > 1).any():
            raise SceneError("ao map outside [0, 1]")
        if (self.basecolor[v] < 0).any() or (self.basecolor[v] > 1).any():
            raise SceneError("base color map outside [0, 1]")
        if (self.depth[v] <= 0).any():
            raise SceneError("valid pixel without depth")
        nn = np.linalg.norm(self.normal[v], axis=-1)
        if (np.abs(nn - 1) > NORMAL_TOL).any():
            raise SceneError("valid pixel without unit normal")
        return self

    @classmethod
    def empty(cls, height, width):
        return cls(np.zeros((height, width)), np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width, 3)), np.zeros((height, width), dtype=bool))
