"""Trilinear (Q1) motion field on a regular vertex lattice.

Vertex ``(i, j, k)`` sits at ``spacing * (i, j, k)`` in volume (voxel)
coordinates. Coefficients are stored as an ``(N, M, L, 3)`` array and flow
vectors are always expressed in volume voxels, whatever the lattice pitch.
The regulariser and the voxel divergence use lattice coordinates, in which
every voxel is a unit cube.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def basis_eval(i, x):
    """Trilinear hat function of vertex ``i`` at grid coordinate ``x``."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(i, dtype=float))
    return float(np.prod(np.maximum(0.0, 1.0 - d)))


@dataclass
class MotionGrid:
    coeffs: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 4 or self.coeffs.shape[3] != 3:
            raise ValueError("coefficients must have shape (N, M, L, 3)")
        if min(self.coeffs.shape[:3]) < 2:
            raise ValueError("need at least 2 vertices per axis")
        self.spacing = float(self.spacing)

    @classmethod
    def zeros(cls, dims, spacing=1.0):
        return cls(np.zeros(tuple(dims) + (3,)), spacing)

    @classmethod
    def covering(cls, extent, spacing, min_vertices=2):
        """Zero field whose lattice covers ``[0, extent]`` with the given pitch."""
        dims = [max(min_vertices, int(np.ceil(e / spacing - 1e-9)) + 1) for e in extent]
        return cls.zeros(dims, spacing)

    @property
    def dims(self):
        return self.coeffs.shape[:3]

    @property
    def n_voxels(self):
        N, M, L = self.dims
        return (N - 1) * (M - 1) * (L - 1)

    def copy(self):
        return MotionGrid(self.coeffs.copy(), self.spacing)

    def with_coeffs(self, coeffs):
        return MotionGrid(np.asarray(coeffs).reshape(self.coeffs.shape), self.spacing)

    def vertex_positions(self):
        axes = [np.arange(n) * self.spacing for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    # -- evaluation -------------------------------------------------------
    def interp_weights(self, x):
        """Corner indices, weights and weight gradients for points ``x`` (Q, 3).

        Returns ``(idx, w, dw)`` with ``idx`` flat vertex indices (Q, 8),
        ``w`` (Q, 8) and ``dw = d w / d x`` (Q, 8, 3). Points outside the
        lattice are clamped onto it, so their weight gradient is zero along
        the clamped axes.
        """
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        dims = np.array(self.dims)
        g = x / self.spacing
        inside = (g >= 0) & (g <= dims - 1)
        g = np.clip(g, 0, dims - 1)
        i0 = np.minimum(np.floor(g).astype(np.int64), dims - 2)
        f = g - i0
        idx = np.empty((len(x), 8), dtype=np.int64)
        w = np.empty((len(x), 8))
        dw = np.empty((len(x), 8, 3))
        N, M, L = self.dims
        scale = inside / self.spacing
        n = 0
        for a in (0, 1):
            wa = f[:, 0] if a else 1 - f[:, 0]
            da = (1.0 if a else -1.0) * scale[:, 0]
            for b in (0, 1):
                wb = f[:, 1] if b else 1 - f[:, 1]
                db = (1.0 if b else -1.0) * scale[:, 1]
                for c in (0, 1):
                    wc = f[:, 2] if c else 1 - f[:, 2]
                    dc = (1.0 if c else -1.0) * scale[:, 2]
                    idx[:, n] = ((i0[:, 0] + a) * M + (i0[:, 1] + b)) * L + (i0[:, 2] + c)
                    w[:, n] = wa * wb * wc
                    dw[:, n, 0] = da * wb * wc
                    dw[:, n, 1] = wa * db * wc
                    dw[:, n, 2] = wa * wb * dc
                    n += 1
        return idx, w, dw

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        idx, w, _ = self.interp_weights(x)
        flat = self.coeffs.reshape(-1, 3)
        out = np.einsum("qn,qnl->ql", w, flat[idx])
        return out.reshape(x.shape)

    def jacobian(self, x):
        """Spatial Jacobian ``du_l / dx_m`` at points ``x``, shape (Q, 3, 3)."""
        idx, _, dw = self.interp_weights(x)
        flat = self.coeffs.reshape(-1, 3)
        return np.einsum("qnm,qnl->qlm", dw, flat[idx])

    def scatter(self, idx, w, values):
        """Adjoint of ``eval``: accumulate per-point vectors onto vertices."""
        out = np.zeros(self.coeffs.size // 3 * 3).reshape(-1, 3)
        contrib = w[:, :, None] * values[:, None, :]
        for l in range(3):
            out[:, l] = np.bincount(idx.ravel(), weights=contrib[:, :, l].ravel(),
                                    minlength=out.shape[0])
        return out.reshape(self.coeffs.shape)


# -- divergence ----------------------------------------------------------
def divergence(coeffs):
    """Per-voxel divergence: 1/4 of the summed edge differences along each axis.

    For a unit-pitch lattice this is the exact integral of div u over the voxel.
    """
    u = np.asarray(coeffs)
    out = 0.0
    for l in range(3):
        d = np.diff(u[..., l], axis=l)
        sl = [slice(None)] * 3
        for m in range(3):
            if m != l:
                sl[m] = slice(None, -1)
        acc = np.zeros_like(d[tuple(sl)])
        for b in (0, 1):
            for c in (0, 1):
                s = list(sl)
                others = [m for m in range(3) if m != l]
                s[others[0]] = slice(b, d.shape[others[0]] - 1 + b)
                s[others[1]] = slice(c, d.shape[others[1]] - 1 + c)
                acc = acc + d[tuple(s)]
        out = out + acc
    return 0.25 * out


def divergence_adjoint(phi, dims):
    """Transpose of ``divergence``: voxel values -> vertex coefficients."""
    phi = 0.25 * np.asarray(phi)
    out = np.zeros(tuple(dims) + (3,))
    for l in range(3):
        others = [m for m in range(3) if m != l]
        shape = list(dims)
        shape[l] -= 1
        t = np.zeros(shape)
        for b in (0, 1):
            for c in (0, 1):
                s = [slice(None)] * 3
                s[others[0]] = slice(b, shape[others[0]] - 1 + b)
                s[others[1]] = slice(c, shape[others[1]] - 1 + c)
                t[tuple(s)] += phi
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[l] = slice(1, None)
        lo[l] = slice(None, -1)
        out[tuple(hi) + (l,)] += t
        out[tuple(lo) + (l,)] -= t
    return out


def voxel_divergence(grid: MotionGrid, v=None):
    """Net flux out of voxel ``v`` in lattice coordinates (unit voxel).

    Without ``v`` the (N-1, M-1, L-1) array for all voxels is returned.
    """
    if v is None:
        return divergence(grid.coeffs)
    i, j, k = v
    return float(divergence(grid.coeffs[i:i + 2, j:j + 2, k:k + 2])[0, 0, 0])


def _assemble_divergence(dims):
    from scipy import sparse
    N, M, L = dims
    vox = np.arange((N - 1) * (M - 1) * (L - 1)).reshape(N - 1, M - 1, L - 1)
    vi, vj, vk = np.meshgrid(np.arange(N - 1), np.arange(M - 1), np.arange(L - 1), indexing="ij")
    rows, cols, vals = [], [], []
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                vert = ((vi + a) * M + (vj + b)) * L + (vk + c)
                for l, off in enumerate((a, b, c)):
                    rows.append(vox.ravel())
                    cols.append(3 * vert.ravel() + l)
                    vals.append(np.full(vox.size, 0.25 if off else -0.25))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(vox.size, 3 * N * M * L))


class DivergenceOperator:
    """Divergence ``D`` (vertices -> voxels), its transpose and ``D D^T``."""

    def __init__(self, dims):
        self.dims = tuple(int(d) for d in dims)
        if min(self.dims) < 2:
            raise ValueError("need at least 2 vertices per axis")
        N, M, L = self.dims
        self.voxel_dims = (N - 1, M - 1, L - 1)
        self.shape = ((N - 1) * (M - 1) * (L - 1), 3 * N * M * L)
        self._D = None
        self._DDt = None

    @property
    def matrix(self):
        """Sparse CSR form of ``D``, assembled on first use."""
        if self._D is None:
            self._D = _assemble_divergence(self.dims)
        return self._D

    def matvec(self, u):
        return self.matrix @ np.ravel(u)

    def rmatvec(self, phi):
        return self.matrix.T @ np.ravel(phi)

    def normal(self, phi):
        """``D D^T phi``, the pressure Poisson operator."""
        if self._DDt is None:
            self._DDt = (self.matrix @ self.matrix.T).tocsr()
        return self._DDt @ np.ravel(phi)

    def as_linear_operator(self):
        from scipy.sparse.linalg import LinearOperator
        return LinearOperator(self.shape, matvec=self.matvec, rmatvec=self.rmatvec)


# -- smoothness ------------------------------------------------------------
_MASS_DIAG = (1.0 / 3.0, 2.0 / 3.0, 1.0 / 6.0)   # end, interior, off-diagonal
_STIFF_DIAG = (1.0, 2.0, -1.0)


def _apply_1d(f, axis, stencil):
    end, interior, off = stencil
    n = f.shape[axis]
    diag = np.full(n, interior)
    diag[0] = diag[-1] = end
    shape = [1] * f.ndim
    shape[axis] = n
    out = f * diag.reshape(shape)
    lo = [slice(None)] * f.ndim
    hi = [slice(None)] * f.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(lo)] += off * f[tuple(hi)]
    out[tuple(hi)] += off * f[tuple(lo)]
    return out


def stiffness_apply(coeffs, spacing=1.0):
    """Assembled Q1 Laplacian stiffness ``A`` applied per component.

    ``sum_l u_l^T A u_l`` is the exact integral of ``sum_l |grad u_l|^2``.
    ``A = Sx My Mz + Mx Sy Mz + Mx My Sz`` with 1D mass ``M`` and stiffness ``S``;
    the factors are shared between terms and all components go at once.
    """
    mz = _apply_1d(coeffs, 2, _MASS_DIAG)
    sz = _apply_1d(coeffs, 2, _STIFF_DIAG)
    my_mz = _apply_1d(mz, 1, _MASS_DIAG)
    xy = _apply_1d(my_mz, 0, _STIFF_DIAG)
    xy += _apply_1d(_apply_1d(mz, 1, _STIFF_DIAG) + _apply_1d(sz, 1, _MASS_DIAG), 0, _MASS_DIAG)
    return xy * spacing


def gradient_energy(grid: MotionGrid):
    """``(value, gradient)`` of the integral of ``sum_l |grad u_l|^2``.

    Derivatives and the integral are taken in lattice coordinates (unit
    vertex pitch), so the weight of the term does not depend on the pitch.
    """
    Au = stiffness_apply(grid.coeffs)
    return float(np.sum(grid.coeffs * Au)), 2.0 * Au


def soft_divergence_energy(grid: MotionGrid):
    """``(value, gradient)`` of the summed squared voxel divergence (lattice coordinates)."""
    div = divergence(grid.coeffs)
    return float(np.sum(div ** 2)), 2.0 * divergence_adjoint(div, grid.dims)


# -- resampling ------------------------------------------------------------
def _interp_matrix(n_fine, h_fine, n_coarse, h_coarse):
    x = np.clip(np.arange(n_fine) * h_fine / h_coarse, 0, n_coarse - 1)
    i0 = np.minimum(np.floor(x).astype(int), n_coarse - 2)
    f = x - i0
    P = np.zeros((n_fine, n_coarse))
    P[np.arange(n_fine), i0] = 1 - f
    P[np.arange(n_fine), i0 + 1] += f
    return P


def _apply_axes(coeffs, mats):
    out = coeffs
    for ax, P in enumerate(mats):
        out = np.moveaxis(np.tensordot(P, out, axes=([1], [ax])), 0, ax)
    return out


def prolongate(grid: MotionGrid, new_dims, new_spacing):
    """Sample the trilinear field at the vertices of a new lattice.

    Flow values are in volume voxels, so no magnitude rescaling is needed.
    """
    mats = [_interp_matrix(nf, new_spacing, nc, grid.spacing)
            for nf, nc in zip(new_dims, grid.dims)]
    return MotionGrid(_apply_axes(grid.coeffs, mats), new_spacing)


def restrict(grid: MotionGrid, new_dims, new_spacing):
    """Least-squares transfer onto a coarser lattice (left inverse of ``prolongate``)."""
    mats = [np.linalg.pinv(_interp_matrix(nc, grid.spacing, nf, new_spacing))
            for nc, nf in zip(grid.dims, new_dims)]
    return MotionGrid(_apply_axes(grid.coeffs, mats), new_spacing)
