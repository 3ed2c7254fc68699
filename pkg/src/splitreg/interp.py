"""Trilinear sampling engine shared by warping, integration, and adjoints.

One interpolation implementation serves every consumer: image warps, the
squaring steps of velocity integration, and their reverse-mode adjoints.
Out-of-bounds positions are clamped to the border per axis before
interpolation; the derivative with respect to a clamped coordinate is zero.
Axes of size 1 degenerate gracefully (no interpolation along them).

The per-voxel work is compiled with numba (serial loops, ``nogil`` so
region-level threads overlap); every reduction has a fixed order, which
keeps results bit-identical regardless of how many regions run in parallel.
``gather`` is linear in the sampled field, so its exact adjoint is the
weighted scatter of :meth:`SamplePlan.scatter_sum`; the adjoint of one
squaring step combines that scatter with the interpolant's spatial gradient.
"""

from __future__ import annotations

import numpy as np
from numba import njit

Dims = tuple[int, int, int]


@njit(cache=True, nogil=True)
def _gather_kernel(src, nx, ny, nz, px, py, pz, out):
    syz = ny * nz
    for i in range(px.shape[0]):
        x, y, z = px[i], py[i], pz[i]
        if x < 0.0:
            x = 0.0
        elif x > nx - 1.0:
            x = nx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > ny - 1.0:
            y = ny - 1.0
        if z < 0.0:
            z = 0.0
        elif z > nz - 1.0:
            z = nz - 1.0
        if nx == 1:
            ix = 0
            tx = 0.0
            dx = 0
        else:
            ix = int(x)
            if ix > nx - 2:
                ix = nx - 2
            tx = x - ix
            dx = syz
        if ny == 1:
            iy = 0
            ty = 0.0
            dy = 0
        else:
            iy = int(y)
            if iy > ny - 2:
                iy = ny - 2
            ty = y - iy
            dy = nz
        if nz == 1:
            iz = 0
            tz = 0.0
            dz = 0
        else:
            iz = int(z)
            if iz > nz - 2:
                iz = nz - 2
            tz = z - iz
            dz = 1
        b = ix * syz + iy * nz + iz
        wz0 = 1.0 - tz
        c00 = src[b] * wz0 + src[b + dz] * tz
        c01 = src[b + dy] * wz0 + src[b + dy + dz] * tz
        c10 = src[b + dx] * wz0 + src[b + dx + dz] * tz
        c11 = src[b + dx + dy] * wz0 + src[b + dx + dy + dz] * tz
        wy0 = 1.0 - ty
        c0 = c00 * wy0 + c01 * ty
        c1 = c10 * wy0 + c11 * ty
        out[i] = c0 * (1.0 - tx) + c1 * tx


@njit(cache=True, nogil=True)
def _gather_grad_kernel(src, nx, ny, nz, px, py, pz, out, grad):
    syz = ny * nz
    for i in range(px.shape[0]):
        x, y, z = px[i], py[i], pz[i]
        ax = (x >= 0.0) and (x <= nx - 1.0) and (nx > 1)
        ay = (y >= 0.0) and (y <= ny - 1.0) and (ny > 1)
        az = (z >= 0.0) and (z <= nz - 1.0) and (nz > 1)
        if x < 0.0:
            x = 0.0
        elif x > nx - 1.0:
            x = nx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > ny - 1.0:
            y = ny - 1.0
        if z < 0.0:
            z = 0.0
        elif z > nz - 1.0:
            z = nz - 1.0
        if nx == 1:
            ix = 0
            tx = 0.0
            dx = 0
        else:
            ix = int(x)
            if ix > nx - 2:
                ix = nx - 2
            tx = x - ix
            dx = syz
        if ny == 1:
            iy = 0
            ty = 0.0
            dy = 0
        else:
            iy = int(y)
            if iy > ny - 2:
                iy = ny - 2
            ty = y - iy
            dy = nz
        if nz == 1:
            iz = 0
            tz = 0.0
            dz = 0
        else:
            iz = int(z)
            if iz > nz - 2:
                iz = nz - 2
            tz = z - iz
            dz = 1
        b = ix * syz + iy * nz + iz
        v000 = src[b]
        v001 = src[b + dz]
        v010 = src[b + dy]
        v011 = src[b + dy + dz]
        v100 = src[b + dx]
        v101 = src[b + dx + dz]
        v110 = src[b + dx + dy]
        v111 = src[b + dx + dy + dz]
        wz0 = 1.0 - tz
        c00 = v000 * wz0 + v001 * tz
        c01 = v010 * wz0 + v011 * tz
        c10 = v100 * wz0 + v101 * tz
        c11 = v110 * wz0 + v111 * tz
        wy0 = 1.0 - ty
        wx0 = 1.0 - tx
        c0 = c00 * wy0 + c01 * ty
        c1 = c10 * wy0 + c11 * ty
        out[i] = c0 * wx0 + c1 * tx
        grad[i, 0] = (c1 - c0) if ax else 0.0
        grad[i, 1] = (wx0 * (c01 - c00) + tx * (c11 - c10)) if ay else 0.0
        if az:
            grad[i, 2] = wx0 * (wy0 * (v001 - v000) + ty * (v011 - v010)) + tx * (
                wy0 * (v101 - v100) + ty * (v111 - v110)
            )
        else:
            grad[i, 2] = 0.0


@njit(cache=True, nogil=True)
def _scatter_kernel(vals, nx, ny, nz, px, py, pz, out):
    syz = ny * nz
    for i in range(px.shape[0]):
        x, y, z = px[i], py[i], pz[i]
        if x < 0.0:
            x = 0.0
        elif x > nx - 1.0:
            x = nx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > ny - 1.0:
            y = ny - 1.0
        if z < 0.0:
            z = 0.0
        elif z > nz - 1.0:
            z = nz - 1.0
        if nx == 1:
            ix = 0
            tx = 0.0
            dx = 0
        else:
            ix = int(x)
            if ix > nx - 2:
                ix = nx - 2
            tx = x - ix
            dx = syz
        if ny == 1:
            iy = 0
            ty = 0.0
            dy = 0
        else:
            iy = int(y)
            if iy > ny - 2:
                iy = ny - 2
            ty = y - iy
            dy = nz
        if nz == 1:
            iz = 0
            tz = 0.0
            dz = 0
        else:
            iz = int(z)
            if iz > nz - 2:
                iz = nz - 2
            tz = z - iz
            dz = 1
        b = ix * syz + iy * nz + iz
        g = vals[i]
        wx0 = 1.0 - tx
        wy0 = 1.0 - ty
        wz0 = 1.0 - tz
        out[b] += wx0 * wy0 * wz0 * g
        out[b + dz] += wx0 * wy0 * tz * g
        out[b + dy] += wx0 * ty * wz0 * g
        out[b + dy + dz] += wx0 * ty * tz * g
        out[b + dx] += tx * wy0 * wz0 * g
        out[b + dx + dz] += tx * wy0 * tz * g
        out[b + dx + dy] += tx * ty * wz0 * g
        out[b + dx + dy + dz] += tx * ty * tz * g


@njit(cache=True, nogil=True)
def _svf_step_kernel(u, nx, ny, nz, out):
    """One squaring step: out(x) = u(x) + u(x + u(x)), all components."""
    syz = ny * nz
    n = u.shape[0]
    for i in range(n):
        ivx = i // syz
        rem = i - ivx * syz
        ivy = rem // nz
        ivz = rem - ivy * nz
        x = ivx + u[i, 0]
        y = ivy + u[i, 1]
        z = ivz + u[i, 2]
        if x < 0.0:
            x = 0.0
        elif x > nx - 1.0:
            x = nx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > ny - 1.0:
            y = ny - 1.0
        if z < 0.0:
            z = 0.0
        elif z > nz - 1.0:
            z = nz - 1.0
        if nx == 1:
            ix = 0
            tx = 0.0
            dx = 0
        else:
            ix = int(x)
            if ix > nx - 2:
                ix = nx - 2
            tx = x - ix
            dx = syz
        if ny == 1:
            iy = 0
            ty = 0.0
            dy = 0
        else:
            iy = int(y)
            if iy > ny - 2:
                iy = ny - 2
            ty = y - iy
            dy = nz
        if nz == 1:
            iz = 0
            tz = 0.0
            dz = 0
        else:
            iz = int(z)
            if iz > nz - 2:
                iz = nz - 2
            tz = z - iz
            dz = 1
        b = ix * syz + iy * nz + iz
        wx0 = 1.0 - tx
        wy0 = 1.0 - ty
        wz0 = 1.0 - tz
        for c in range(3):
            c00 = u[b, c] * wz0 + u[b + dz, c] * tz
            c01 = u[b + dy, c] * wz0 + u[b + dy + dz, c] * tz
            c10 = u[b + dx, c] * wz0 + u[b + dx + dz, c] * tz
            c11 = u[b + dx + dy, c] * wz0 + u[b + dx + dy + dz, c] * tz
            c0 = c00 * wy0 + c01 * ty
            c1 = c10 * wy0 + c11 * ty
            out[i, c] = u[i, c] + c0 * wx0 + c1 * tx


@njit(cache=True, nogil=True)
def _svf_adjoint_kernel(u, g, nx, ny, nz, g_in):
    """Adjoint of one squaring step.

    ``g_in`` must enter holding a copy of ``g`` (the identity pathway); this
    kernel adds the sampled-value pathway (weighted scatter) and the sample-
    position pathway (spatial gradient of the interpolant).
    """
    syz = ny * nz
    n = u.shape[0]
    for i in range(n):
        ivx = i // syz
        rem = i - ivx * syz
        ivy = rem // nz
        ivz = rem - ivy * nz
        x = ivx + u[i, 0]
        y = ivy + u[i, 1]
        z = ivz + u[i, 2]
        ax = (x >= 0.0) and (x <= nx - 1.0) and (nx > 1)
        ay = (y >= 0.0) and (y <= ny - 1.0) and (ny > 1)
        az = (z >= 0.0) and (z <= nz - 1.0) and (nz > 1)
        if x < 0.0:
            x = 0.0
        elif x > nx - 1.0:
            x = nx - 1.0
        if y < 0.0:
            y = 0.0
        elif y > ny - 1.0:
            y = ny - 1.0
        if z < 0.0:
            z = 0.0
        elif z > nz - 1.0:
            z = nz - 1.0
        if nx == 1:
            ix = 0
            tx = 0.0
            dx = 0
        else:
            ix = int(x)
            if ix > nx - 2:
                ix = nx - 2
            tx = x - ix
            dx = syz
        if ny == 1:
            iy = 0
            ty = 0.0
            dy = 0
        else:
            iy = int(y)
            if iy > ny - 2:
                iy = ny - 2
            ty = y - iy
            dy = nz
        if nz == 1:
            iz = 0
            tz = 0.0
            dz = 0
        else:
            iz = int(z)
            if iz > nz - 2:
                iz = nz - 2
            tz = z - iz
            dz = 1
        b = ix * syz + iy * nz + iz
        wx0 = 1.0 - tx
        wy0 = 1.0 - ty
        wz0 = 1.0 - tz
        w000 = wx0 * wy0 * wz0
        w001 = wx0 * wy0 * tz
        w010 = wx0 * ty * wz0
        w011 = wx0 * ty * tz
        w100 = tx * wy0 * wz0
        w101 = tx * wy0 * tz
        w110 = tx * ty * wz0
        w111 = tx * ty * tz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for c in range(3):
            gc = g[i, c]
            v000 = u[b, c]
            v001 = u[b + dz, c]
            v010 = u[b + dy, c]
            v011 = u[b + dy + dz, c]
            v100 = u[b + dx, c]
            v101 = u[b + dx + dz, c]
            v110 = u[b + dx + dy, c]
            v111 = u[b + dx + dy + dz, c]
            # position pathway
            c00 = v000 * wz0 + v001 * tz
            c01 = v010 * wz0 + v011 * tz
            c10 = v100 * wz0 + v101 * tz
            c11 = v110 * wz0 + v111 * tz
            c0 = c00 * wy0 + c01 * ty
            c1 = c10 * wy0 + c11 * ty
            if ax:
                gx += gc * (c1 - c0)
            if ay:
                gy += gc * (wx0 * (c01 - c00) + tx * (c11 - c10))
            if az:
                gz += gc * (
                    wx0 * (wy0 * (v001 - v000) + ty * (v011 - v010))
                    + tx * (wy0 * (v101 - v100) + ty * (v111 - v110))
                )
            # value pathway (adjoint of the gather)
            g_in[b, c] += w000 * gc
            g_in[b + dz, c] += w001 * gc
            g_in[b + dy, c] += w010 * gc
            g_in[b + dy + dz, c] += w011 * gc
            g_in[b + dx, c] += w100 * gc
            g_in[b + dx + dz, c] += w101 * gc
            g_in[b + dx + dy, c] += w110 * gc
            g_in[b + dx + dy + dz, c] += w111 * gc
        g_in[i, 0] += gx
        g_in[i, 1] += gy
        g_in[i, 2] += gz


def _flat64(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).ravel()


class SamplePlan:
    """Fixed batch of continuous positions on a grid, ready to sample.

    Gathering several fields at the same positions (image, masks, distance
    masks) reuses the stored coordinates; values, spatial gradients, and the
    exact scatter adjoint all share one kernel family.
    """

    def __init__(self, dims: Dims, px, py, pz):
        self.dims = tuple(int(d) for d in dims)
        self.px = _flat64(px)
        self.py = _flat64(py)
        self.pz = _flat64(pz)
        self.n = self.px.size

    def gather(self, field: np.ndarray) -> np.ndarray:
        """Trilinearly sample ``field`` (grid-shaped or flat) at the positions."""
        src = _flat64(field)
        out = np.empty(self.n)
        _gather_kernel(src, *self.dims, self.px, self.py, self.pz, out)
        return out

    def gather_with_grad(self, field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values plus d(sample)/d(position), zero where clamped/degenerate."""
        src = _flat64(field)
        out = np.empty(self.n)
        grad = np.empty((self.n, 3))
        _gather_grad_kernel(src, *self.dims, self.px, self.py, self.pz, out, grad)
        return out, grad

    def scatter_sum(self, values: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`gather`: accumulate ``values`` onto the grid."""
        nvox = self.dims[0] * self.dims[1] * self.dims[2]
        out = np.zeros(nvox)
        _scatter_kernel(
            np.ascontiguousarray(values, dtype=np.float64),
            *self.dims, self.px, self.py, self.pz, out,
        )
        return out


_identity_cache: dict[Dims, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def identity_coords(dims: Dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat voxel-index coordinates (x, y, z), each of length prod(dims)."""
    key = tuple(int(d) for d in dims)
    hit = _identity_cache.get(key)
    if hit is None:
        nx, ny, nz = key
        ix, iy, iz = np.meshgrid(
            np.arange(nx, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            np.arange(nz, dtype=np.float64),
            indexing="ij",
        )
        hit = (ix.ravel(), iy.ravel(), iz.ravel())
        for a in hit:
            a.flags.writeable = False
        _identity_cache[key] = hit
    return hit


def plan_for_displacement(dims: Dims, vectors: np.ndarray) -> SamplePlan:
    """Plan sampling at x + u(x) for a displacement ``vectors`` (dims + (3,))."""
    ix, iy, iz = identity_coords(dims)
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    return SamplePlan(dims, ix + v[:, 0], iy + v[:, 1], iz + v[:, 2])


def svf_step(u: np.ndarray, dims: Dims) -> np.ndarray:
    """u + u(x + u(x)) for a flat (n_voxels, 3) displacement."""
    out = np.empty_like(u)
    _svf_step_kernel(u, *dims, out)
    return out


def svf_step_adjoint(u: np.ndarray, g: np.ndarray, dims: Dims) -> np.ndarray:
    """Pull a gradient back through one squaring step (exact adjoint)."""
    g_in = g.copy()
    _svf_adjoint_kernel(u, g, *dims, g_in)
    return g_in


def nearest_indices(dims: Dims, px: np.ndarray, py: np.ndarray,
                    pz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-voxel indices with border clamp; ties round half-up per axis."""
    out = []
    for p, d in zip((px, py, pz), dims):
        pc = np.clip(np.asarray(p, dtype=np.float64), 0.0, d - 1.0)
        out.append(np.floor(pc + 0.5).astype(np.int64))
    return out[0], out[1], out[2]


def downsample_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Box-mean downsample by ``factor`` per axis; partial edge blocks allowed.

    Output dims are ceil(d / factor); each output voxel is the mean of the
    input voxels its block actually covers, so non-divisible extents stay
    exact and deterministic.
    """
    if factor == 1:
        return np.asarray(arr, dtype=np.float64).copy()
    out = np.asarray(arr, dtype=np.float64)
    for axis in range(3):
        d = out.shape[axis]
        starts = np.arange(0, d, factor)
        counts = np.minimum(starts + factor, d) - starts
        out = np.add.reduceat(out, starts, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = counts.size
        out = out / counts.reshape(shape)
    return out


def upsample_vectors(vectors: np.ndarray, coarse_dims: Dims, fine_dims: Dims,
                     ratio: float) -> np.ndarray:
    """Trilinearly upsample a coarse vector field to ``fine_dims``.

    ``ratio`` is the voxel-size ratio coarse/fine; vector components are in
    voxel units, so they scale by ``ratio``. Block-center alignment matches
    :func:`downsample_mean`.
    """
    axes = [
        (np.arange(d, dtype=np.float64) + 0.5) / ratio - 0.5
        for d in fine_dims
    ]
    px, py, pz = np.meshgrid(*axes, indexing="ij")
    plan = SamplePlan(coarse_dims, px.ravel(), py.ravel(), pz.ravel())
    vec = np.asarray(vectors, dtype=np.float64)
    comps = [ratio * plan.gather(np.ascontiguousarray(vec[..., c])) for c in range(3)]
    return np.stack(comps, axis=-1).reshape(tuple(fine_dims) + (3,))
