"""Z-buffered triangle rasterization with perspective-correct barycentrics."""
from __future__ import annotations

import numpy as np


def rasterize(uv: np.ndarray, depth: np.ndarray, triangles: np.ndarray, width: int,
              height: int, near: float = 1e-3):
    """Rasterize projected triangles.

    ``uv`` are pixel coordinates and ``depth`` camera-space z per vertex. Returns
    ``(tri_id, bary, zbuf)`` where ``tri_id`` is -1 on empty pixels and ``bary``
    holds perspective-correct barycentric weights of the visible triangle.
    Triangles with a vertex at depth <= ``near`` are skipped.
    """
    zbuf = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    P = uv[triangles]                         # (m, 3, 2)
    Z = depth[triangles]                      # (m, 3)
    ok = np.all(Z > near, axis=1)
    lo = np.floor(P.min(axis=1) - 0.5).astype(np.int64) + 1
    hi = np.floor(P.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [width - 1, height - 1])
    ok &= np.all(hi >= lo, axis=1)
    for k in np.flatnonzero(ok):
        (x0, y0), (x1, y1), (x2, y2) = P[k]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        js = np.arange(lo[k, 0], hi[k, 0] + 1) + 0.5
        is_ = np.arange(lo[k, 1], hi[k, 1] + 1) + 0.5
        px, py = np.meshgrid(js, is_)
        b0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        b1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        b2 = 1.0 - b0 - b1
        inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
        if not inside.any():
            continue
        iz = b0 / Z[k, 0] + b1 / Z[k, 1] + b2 / Z[k, 2]
        z = 1.0 / iz
        rows = (py - 0.5).astype(np.int64)
        cols = (px - 0.5).astype(np.int64)
        sub = zbuf[rows, cols]
        win = inside & (z < sub)
        if not win.any():
            continue
        r, c = rows[win], cols[win]
        zw = z[win]
        zbuf[r, c] = zw
        tri_id[r, c] = k
        bary[r, c] = np.stack([b0[win] / Z[k, 0], b1[win] / Z[k, 1], b2[win] / Z[k, 2]], -1) * zw[:, None]
    return tri_id, bary, zbuf


def interpolate(attr: np.ndarray, triangles: np.ndarray, tri_id: np.ndarray, bary: np.ndarray):
    """Barycentric interpolation of per-vertex attributes; zeros on empty pixels."""
    out = np.zeros(tri_id.shape + attr.shape[1:])
    m = tri_id >= 0
    corners = attr[triangles[tri_id[m]]]      # (n, 3, c)
    out[m] = np.einsum("nk,nkc->nc", bary[m], corners)
    return out


def vertex_normals(verts: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (outward for counter-clockwise outward winding)."""
    a, b, c = verts[triangles[:, 0]], verts[triangles[:, 1]], verts[triangles[:, 2]]
    fn = np.cross(b - a, c - a)
    n = np.zeros_like(verts)
    for j in range(3):
        np.add.at(n, triangles[:, j], fn)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
