"""Surface extraction: TSDF fusion of rendered depth, marching cubes, Chamfer distance."""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_mc

from .raster import rasterize

FUSE_ALPHA = 0.99


class FusionError(ValueError):
    pass


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray          # (V, 3)
    faces: np.ndarray             # (F, 3) int
    normals: np.ndarray | None = None  # (V, 3)
    uvs: np.ndarray | None = None      # (F, 3, 2) per-corner texture coordinates

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def vertex_normals(self):
        v = self.vertices[self.faces]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        n = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(n, self.faces[:, k], fn)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return np.where(ln > 0, n / np.where(ln > 0, ln, 1), 0.0)

    def translated(self, offset):
        return TriangleMesh(self.vertices + np.asarray(offset), self.faces.copy(), self.normals, self.uvs)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere mesh by repeated midpoint subdivision of an icosahedron."""
    from .rt import icosahedron

    v, f = icosahedron(1.0)
    verts = list(v)
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(nf)
    verts = np.array(verts)
    return TriangleMesh(np.asarray(center) + radius * verts, faces, verts.copy())


# --------------------------------------------------------------------------- TSDF

@dataclass(eq=False)
class TSDFVolume:
    """Voxel grid with truncated signed distances (in units of the truncation band).

    Voxel (i, j, k) has its centre at ``origin + voxel_size * (i, j, k)``;
    ``weight`` counts fused observations, zero meaning unobserved.
    """

    origin: np.ndarray
    voxel_size: float
    truncation: float
    tsdf: np.ndarray
    weight: np.ndarray

    @property
    def shape(self):
        return self.tsdf.shape

    def centers(self):
        idx = np.indices(self.shape).reshape(3, -1).T
        return self.origin + self.voxel_size * idx


def fusion_bounds(depths, cams, pad_fraction=0.05, margin=0.0):
    pts = []
    for (depth, alpha), cam in zip(depths, cams):
        ok = (alpha >= FUSE_ALPHA) & (depth > 0)
        if ok.any():
            o, d = cam.pixel_rays(np.flatnonzero(ok.ravel()))
            pts.append(o + d * depth.ravel()[ok.ravel()][:, None])
    if not pts:
        raise FusionError("empty fusion: no confident foreground pixel in any view")
    pts = np.concatenate(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = pad_fraction * float((hi - lo).max()) + margin
    return lo - pad, hi + pad


def integrate(volume, depth, alpha, cam):
    """Fuse one ray-distance depth map into ``volume`` in place (running average, unit weights)."""
    X = volume.centers()
    uv, z = cam.project(X)
    W, H = cam.width, cam.height
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0])
        row = np.floor(uv[:, 1])
    inside = (z > 0) & (col >= 0) & (col < W) & (row >= 0) & (row < H)
    pix = np.where(inside, row, 0).astype(np.int64) * W + np.where(inside, col, 0).astype(np.int64)
    D = depth.ravel()[pix]
    ok = inside & (alpha.ravel()[pix] >= FUSE_ALPHA) & (D > 0)
    dist = np.linalg.norm(X - cam.center, axis=1)
    sdf = D - dist
    trunc = volume.truncation
    ok &= sdf >= -trunc
    val = np.minimum(1.0, sdf / trunc)
    t = volume.tsdf.reshape(-1)
    w = volume.weight.reshape(-1)
    t[ok] = (t[ok] * w[ok] + val[ok]) / (w[ok] + 1.0)
    w[ok] += 1.0


def tsdf_fuse(frame, views, voxel_size=0.01, truncation=None, threads=None, depths=None):
    """Fuse the rasterizer's depth maps of ``views`` into a TSDF volume.

    Only pixels with accumulated alpha >= 0.99 contribute. Bounds are the
    box of all back-projected confident points, padded by 5 % of its largest
    extent plus the truncation band.
    """
    views = list(views)
    if not views:
        raise FusionError("fusion needs at least one view")
    trunc = 4.0 * voxel_size if truncation is None or truncation <= 0 else float(truncation)
    if depths is None:
        depths = []
        for cam in views:
            gb = rasterize(frame, cam, attachments=(), threads=threads)
            depths.append((gb.depth, gb.alpha))
    lo, hi = fusion_bounds(depths, views, margin=trunc)
    shape = tuple(int(np.ceil((hi[a] - lo[a]) / voxel_size)) + 1 for a in range(3))
    vol = TSDFVolume(lo, float(voxel_size), trunc, np.ones(shape), np.zeros(shape))
    for (depth, alpha), cam in zip(depths, views):
        integrate(vol, depth, alpha, cam)
    return vol


def marching_cubes(volume, level=0.0):
    """Zero level set of a TSDF (or any SDF grid) as a triangle mesh in world units.

    Cubes touching an unobserved voxel are skipped; a volume without a sign
    change yields an empty mesh. Normals point towards positive values.
    """
    vals = np.asarray(volume.tsdf, dtype=np.float64)
    if vals.min() >= level or vals.max() <= level or min(vals.shape) < 2:
        return TriangleMesh.empty()
    observed = np.asarray(volume.weight) > 0
    cube = observed[:-1, :-1, :-1].copy()
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                cube &= observed[di:di + vals.shape[0] - 1, dj:dj + vals.shape[1] - 1, dk:dk + vals.shape[2] - 1]
    # skimage keys each cube by its upper corner
    mask = np.zeros(vals.shape, dtype=bool)
    mask[1:, 1:, 1:] = cube
    if not mask.any():
        return TriangleMesh.empty()
    try:
        v, f, n, _ = _skimage_mc(vals, level, spacing=(volume.voxel_size,) * 3, gradient_direction="ascent",
                                 mask=mask, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    # reverse the winding so face normals agree with the outward vertex normals
    return TriangleMesh(np.asarray(volume.origin) + v, f[:, ::-1], -n)


def sdf_volume(fn, lo, hi, voxel_size):
    """Sample an analytic signed-distance function on a fully observed grid."""
    lo = np.asarray(lo, dtype=np.float64)
    shape = tuple(int(np.ceil((hi[a] - lo[a]) / voxel_size)) + 1 for a in range(3))
    vol = TSDFVolume(lo, float(voxel_size), float("inf"), np.zeros(shape), np.ones(shape))
    vol.tsdf = fn(vol.centers()).reshape(shape)
    return vol


# --------------------------------------------------------------------------- Chamfer

def _mesh_seed(mesh, seed):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    h.update(int(seed).to_bytes(8, "little", signed=True))
    return int.from_bytes(h.digest()[:8], "little")


def sample_surface(mesh, count, seed=0):
    """Area-weighted uniform points on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.face_areas()
    f = rng.choice(len(area), size=count, p=area / area.sum())
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u = np.where(flip, 1 - u, u)
    v = np.where(flip, 1 - v, v)
    tri = mesh.vertices[mesh.faces[f]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def chamfer(mesh_a, mesh_b, samples=100_000, seed=0):
    """Symmetric mean nearest-point distance between surface samples.

    Each mesh draws its samples from a seed derived from its own content,
    so the result does not depend on argument order.
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("chamfer distance needs two non-empty meshes")
    pa = sample_surface(mesh_a, samples, _mesh_seed(mesh_a, seed))
    pb = sample_surface(mesh_b, samples, _mesh_seed(mesh_b, seed))
    da = cKDTree(pb).query(pa)[0].mean()
    db = cKDTree(pa).query(pb)[0].mean()
    return float(0.5 * (da + db))


# --------------------------------------------------------------------------- UV atlas

def uv_atlas(mesh, margin=0.1):
    """Per-triangle atlas: triangle k occupies its own grid cell as a right triangle."""
    F = len(mesh.faces)
    g = max(int(np.ceil(np.sqrt(F))), 1)
    k = np.arange(F)
    cu, cv = (k % g) / g, (k // g) / g
    s = 1.0 / g
    m = margin * s
    corners = np.array([[m, m], [s - 2 * m, m], [m, s - 2 * m]])
    uvs = np.stack([cu, cv], axis=1)[:, None, :] + corners[None]
    return TriangleMesh(mesh.vertices, mesh.faces, mesh.normals, uvs)


# --------------------------------------------------------------------------- I/O

def save_obj(mesh, path):
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        normals = mesh.normals if mesh.normals is not None else mesh.vertex_normals()
        for n in normals:
            fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        if mesh.uvs is not None:
            for t in np.asarray(mesh.uvs).reshape(-1, 2):
                fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        for k, (a, b, c) in enumerate(mesh.faces + 1):
            if mesh.uvs is not None:
                t = 3 * k + 1
                fh.write(f"f {a}/{t}/{a} {b}/{t + 1}/{b} {c}/{t + 2}/{c}\n")
            else:
                fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")


def load_obj(path):
    verts, norms, tex, faces, fuv = [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                tex.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                idx = [p.split("/") for p in parts[1:4]]
                faces.append([int(i[0]) - 1 for i in idx])
                if len(idx[0]) > 1 and idx[0][1]:
                    fuv.append([int(i[1]) - 1 for i in idx])
    uvs = np.asarray(tex)[np.asarray(fuv)] if fuv and len(fuv) == len(faces) else None
    normals = np.asarray(norms) if len(norms) == len(verts) and norms else None
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces).reshape(-1, 3), normals, uvs)


def save_ply(mesh, path):
    """Binary little-endian PLY with positions, normals and triangle faces."""
    normals = mesh.normals if mesh.normals is not None else mesh.vertex_normals()
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(mesh.vertices)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property float nx\nproperty float ny\nproperty float nz\n"
              f"element face {len(mesh.faces)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    vdata = np.concatenate([mesh.vertices, normals], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vdata.tobytes())
        for f in mesh.faces:
            fh.write(struct.pack("<Biii", 3, int(f[0]), int(f[1]), int(f[2])))


def load_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        nv = nf = 0
        while True:
            line = fh.readline().strip()
            if line.startswith(b"element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith(b"element face"):
                nf = int(line.split()[-1])
            elif line == b"end_header":
                break
            elif line.startswith(b"format") and b"binary_little_endian" not in line:
                raise ValueError("only binary little-endian PLY is supported")
        v = np.frombuffer(fh.read(nv * 24), dtype="<f4").reshape(nv, 6).astype(np.float64)
        rec = np.frombuffer(fh.read(nf * 13), dtype=np.dtype([("n", "u1"), ("i", "<i4", 3)]))
    return TriangleMesh(v[:, :3], rec["i"].astype(np.int64), v[:, 3:])
