"""File formats: GS4D frames, ``.splat`` import, camera records, RGBE/PFM/PNG images."""

import os
import re
import struct

import numpy as np

from .color import SH_COEFFS, rgb_to_sh_dc, srgb_to_linear
from .envmap import EnvironmentMap
from .scene import (QUAT_RENORM_TOL, QUAT_TOL, CameraView, GaussianFrame, InvalidGaussianError,
                    SceneError)

GS4D_MAGIC = b"GS4D"
GS4D_VERSION = 1
FLAG_SH = 1
FLAG_PBR = 2


class FormatError(SceneError):
    """Malformed file contents."""


# --------------------------------------------------------------------------- GS4D

def frame_flags(frame):
    return (FLAG_SH if frame.has_sh else 0) | (FLAG_PBR if frame.has_pbr else 0)


def encode_gaussian_frame(frame):
    n = len(frame)
    parts = [struct.pack("<4sIII", GS4D_MAGIC, GS4D_VERSION, n, frame_flags(frame))]
    arrays = [frame.means, frame.quats, frame.scales, frame.opacities]
    if frame.has_sh:
        arrays.append(frame.sh)
    if frame.has_pbr:
        arrays += [frame.base_color, frame.roughness, frame.ao]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def save_gaussian_frame(frame, path):
    with open(path, "wb") as fh:
        fh.write(encode_gaussian_frame(frame))


def decode_gaussian_frame(buf, t=0):
    if len(buf) < 16:
        raise FormatError("truncated GS4D header")
    magic, version, n, flags = struct.unpack_from("<4sIII", buf, 0)
    if magic != GS4D_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != GS4D_VERSION:
        raise FormatError(f"unsupported GS4D version {version}")
    if flags & ~(FLAG_SH | FLAG_PBR):
        raise FormatError(f"unknown flag bits {flags:#x}")
    widths = [3, 4, 3, 1]
    if flags & FLAG_SH:
        widths.append(SH_COEFFS * 3)
    if flags & FLAG_PBR:
        widths += [3, 1, 1]
    expected = 16 + 4 * n * sum(widths)
    if len(buf) != expected:
        raise FormatError(f"attribute count mismatch: expected {expected} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float64)
    cols = np.split(data, np.cumsum([w * n for w in widths])[:-1])
    cols = [c.reshape(n, w) for c, w in zip(cols, widths)]
    names = ["position", "orientation", "scale", "opacity"]
    if flags & FLAG_SH:
        names.append("color")
    if flags & FLAG_PBR:
        names += ["base_color", "roughness", "ao"]
    for name, c in zip(names, cols):
        bad = ~np.isfinite(c).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InvalidGaussianError(name, i, f"non-finite {name} at gaussian {i}")
    quats = _checked_quats(cols[1])
    kw = dict(means=cols[0], quats=quats, scales=cols[2], opacities=cols[3][:, 0], t=t)
    k = 4
    if flags & FLAG_SH:
        kw["sh"] = cols[k].reshape(n, SH_COEFFS, 3)
        k += 1
    if flags & FLAG_PBR:
        kw.update(base_color=cols[k], roughness=cols[k + 1][:, 0], ao=cols[k + 2][:, 0])
    return GaussianFrame(**kw).validate()


def _checked_quats(q):
    norm = np.linalg.norm(q, axis=1)
    dev = np.abs(norm - 1.0)
    bad = dev > QUAT_RENORM_TOL
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InvalidGaussianError("orientation", i, f"quaternion norm {norm[i]:.6g} at gaussian {i}")
    # only touch quaternions that need it so float32 round trips stay bit-exact
    fix = dev > QUAT_TOL
    if fix.any():
        q = q.copy()
        q[fix] /= norm[fix, None]
    return q


def load_gaussian_frame(path, t=0):
    """Load a GS4D file, or import a ``.splat`` point list by extension."""
    path = os.fspath(path)
    if path.endswith(".splat"):
        return load_splat(path, t=t)
    with open(path, "rb") as fh:
        return decode_gaussian_frame(fh.read(), t=t)


def load_splat(path, t=0):
    """Import the common 32-byte ``.splat`` layout (pos, scale, RGBA8, quat8)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) % 32:
        raise FormatError(".splat size is not a multiple of 32 bytes")
    rec = np.frombuffer(buf, dtype=np.dtype([("pos", "<f4", 3), ("scale", "<f4", 3),
                                             ("rgba", "u1", 4), ("rot", "u1", 4)]))
    n = rec.shape[0]
    pos = rec["pos"].astype(np.float64)
    scale = rec["scale"].astype(np.float64)
    for name, arr in (("position", pos), ("scale", scale)):
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise InvalidGaussianError(name, i)
    q = (rec["rot"].astype(np.float64) - 128.0) / 128.0
    q /= np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    rgba = rec["rgba"].astype(np.float64) / 255.0
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rgba[:, :3])
    return GaussianFrame(pos, q, scale, rgba[:, 3], sh=sh, t=t).validate()


def save_sequence(sequence, directory, pattern="frame_{:04d}.gs4d"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, frame in enumerate(sequence):
        p = os.path.join(directory, pattern.format(k))
        save_gaussian_frame(frame, p)
        paths.append(p)
    return paths


def load_sequence(directory, pattern=r"frame_(\d+)\.gs4d$"):
    from .scene import GaussianSequence

    rx = re.compile(pattern)
    found = sorted((int(m.group(1)), f) for f in os.listdir(directory) if (m := rx.search(f)))
    if not found:
        raise FormatError(f"no frames in {directory}")
    return GaussianSequence([load_gaussian_frame(os.path.join(directory, f), t=k) for k, f in found])


# --------------------------------------------------------------------------- cameras

_CAMERA_KEYS = ("name", "width", "height", "fx", "fy", "cx", "cy", "world_to_camera", "image_path")


def save_cameras(cameras, path, image_paths=None):
    lines = []
    for k, cam in enumerate(cameras):
        lines.append("[camera]")
        lines.append(f"name = {cam.name}")
        lines.append(f"width = {cam.width}")
        lines.append(f"height = {cam.height}")
        for key in ("fx", "fy", "cx", "cy"):
            lines.append(f"{key} = {float(getattr(cam, key))!r}")
        lines.append("world_to_camera = " + " ".join(repr(float(x)) for x in cam.world_to_camera.ravel()))
        if image_paths is not None and image_paths[k] is not None:
            lines.append(f"image_path = {image_paths[k]}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def load_cameras(path, load_images=True):
    """Parse camera records; images are read relative to the file's directory."""
    base = os.path.dirname(os.path.abspath(path))
    records, cur = [], None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line == "[camera]":
                cur = {}
                records.append(cur)
                continue
            if cur is None or "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected '[camera]' or 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _CAMERA_KEYS:
                raise FormatError(f"{path}:{lineno}: unknown camera key {key!r}")
            cur[key] = value
    cams = []
    for rec in records:
        missing = [k for k in _CAMERA_KEYS[:-1] if k not in rec]
        if missing:
            raise FormatError(f"camera record missing {missing}")
        m = np.array([float(x) for x in rec["world_to_camera"].split()])
        if m.size != 16:
            raise FormatError("world_to_camera needs 16 floats")
        image = None
        if load_images and rec.get("image_path"):
            image = load_image(os.path.join(base, rec["image_path"]))
        cams.append(CameraView(int(rec["width"]), int(rec["height"]), float(rec["fx"]), float(rec["fy"]),
                               float(rec["cx"]), float(rec["cy"]), m.reshape(4, 4), image, rec["name"]))
    return cams


def load_image(path):
    """Linear RGB float image from PNG (sRGB decoded) or PFM (already linear)."""
    if str(path).lower().endswith(".pfm"):
        img = read_pfm(path)
        return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img
    return srgb_to_linear(read_png(path))


# --------------------------------------------------------------------------- PNG

def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return a


def write_png(path, image8):
    from PIL import Image

    a = np.asarray(image8)
    if a.dtype != np.uint8:
        raise TypeError("write_png expects uint8 data")
    Image.fromarray(a).save(path)


# --------------------------------------------------------------------------- PFM

def write_pfm(path, image):
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        kind = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) data")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise FormatError(f"not a PFM file: {kind!r}")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise FormatError("PFM payload size mismatch")
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


# --------------------------------------------------------------------------- Radiance RGBE

def read_hdr(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_hdr(buf)


def decode_hdr(buf):
    pos = 0
    first = True
    fmt = None
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("unterminated RGBE header")
        line = buf[pos:end].strip()
        pos = end + 1
        if first:
            if not line.startswith(b"#?"):
                raise FormatError("missing #? signature")
            first = False
            continue
        if not line:
            break
        if line.startswith(b"FORMAT="):
            fmt = line[7:]
    if fmt not in (None, b"32-bit_rle_rgbe"):
        raise FormatError(f"unsupported RGBE format {fmt!r}")
    end = buf.find(b"\n", pos)
    res = buf[pos:end].split()
    pos = end + 1
    if len(res) != 4 or res[0] != b"-Y" or res[2] != b"+X":
        raise FormatError("only '-Y H +X W' orientation is supported")
    h, w = int(res[1]), int(res[3])
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    p = 0
    for y in range(h):
        if 8 <= w < 32768 and p + 4 <= data.size and data[p] == 2 and data[p + 1] == 2 and data[p + 2] < 128:
            if (int(data[p + 2]) << 8 | int(data[p + 3])) != w:
                raise FormatError("scanline width mismatch")
            p += 4
            for c in range(4):
                x = 0
                while x < w:
                    if p >= data.size:
                        raise FormatError("truncated RLE data")
                    count = int(data[p])
                    p += 1
                    if count > 128:
                        count -= 128
                        if x + count > w:
                            raise FormatError("bad RLE run")
                        rgbe[y, x:x + count, c] = data[p]
                        p += 1
                    else:
                        if count == 0 or x + count > w:
                            raise FormatError("bad RLE dump")
                        rgbe[y, x:x + count, c] = data[p:p + count]
                        p += count
                    x += count
        else:
            n = 4 * w
            if p + n > data.size:
                raise FormatError("truncated flat scanline")
            rgbe[y] = data[p:p + n].reshape(w, 4)
            p += n
    return rgbe_to_float(rgbe)


def rgbe_to_float(rgbe):
    e = rgbe[..., 3].astype(np.int32)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return rgbe[..., :3].astype(np.float64) * f[..., None]


def float_to_rgbe(rgb):
    rgb = np.maximum(np.asarray(rgb, dtype=np.float64), 0.0)
    v = rgb.max(axis=-1)
    m, e = np.frexp(v)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = v > 1e-32
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(ok, m * 256.0 / v, 0.0)
    out[..., :3] = np.where(ok[..., None], np.floor(rgb * scale[..., None]), 0).astype(np.uint8)
    out[..., 3] = np.where(ok, e + 128, 0).astype(np.uint8)
    return out


def write_hdr(path, rgb):
    """Write flat (uncompressed) RGBE scanlines."""
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
        fh.write(f"-Y {h} +X {w}\n".encode())
        fh.write(float_to_rgbe(rgb).tobytes())


def load_environment(path):
    p = str(path).lower()
    if p.endswith(".hdr") or p.endswith(".pic"):
        return EnvironmentMap(read_hdr(path))
    if p.endswith(".pfm"):
        return EnvironmentMap(read_pfm(path))
    raise FormatError(f"unsupported environment map {path}")
