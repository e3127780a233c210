"""Plain-text record files shared by dataset metadata and exported fits.

A file holds one or more blocks separated by blank lines. Each line is a key
followed by whitespace-separated values. Lines starting with ``#`` are comments.
Float values are written with ``repr`` so they round-trip exactly.

Dataset ``.meta`` blocks use this key order::

    identity expression view width height
    K            fx fy cx cy
    R            r00 r01 r02 r10 r11 r12 r20 r21 r22   (world-to-camera, row-major)
    t            tx ty tz
    beta         b_0 ... b_{d_beta-1}
    psi          p_0 ... p_{d_psi-1}
    landmarks_mu u_0 v_0 u_1 v_1 ...
    landmarks_sigma s_0 s_1 ...

An exported fit has a header block (``beta``, ``head_R``, ``head_t``, ``neck``)
followed by one block per image using the camera and ``psi`` keys above.
"""
from __future__ import annotations

import numpy as np

from .camera import Camera, Intrinsics

INT_KEYS = {"identity", "expression", "view", "width", "height", "image"}


def _fmt(v) -> str:
    return repr(float(v))


def format_block(entries: list) -> str:
    lines = []
    for key, value in entries:
        if key in INT_KEYS:
            lines.append(f"{key} {int(value)}")
        else:
            vals = np.ravel(np.asarray(value, dtype=float))
            lines.append(" ".join([key] + [_fmt(v) for v in vals]))
    return "\n".join(lines) + "\n"


def write_blocks(path, blocks: list, header: str | None = None) -> None:
    text = "\n".join(format_block(b) for b in blocks)
    if header:
        text = f"# {header}\n" + text
    with open(path, "w") as f:
        f.write(text)


def read_blocks(path) -> list:
    blocks, cur = [], {}
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if line.startswith("#"):
                continue
            if not line:
                if cur:
                    blocks.append(cur)
                    cur = {}
                continue
            key, *vals = line.split()
            cur[key] = int(vals[0]) if key in INT_KEYS else np.array([float(v) for v in vals])
    if cur:
        blocks.append(cur)
    return blocks


def camera_entries(cam: Camera) -> list:
    return [("width", cam.K.width), ("height", cam.K.height),
            ("K", [cam.K.fx, cam.K.fy, cam.K.cx, cam.K.cy]), ("R", cam.R), ("t", cam.t)]


def camera_from_block(b: dict) -> Camera:
    fx, fy, cx, cy = b["K"]
    K = Intrinsics(fx, fy, cx, cy, b["width"], b["height"])
    return Camera(K, b["R"].reshape(3, 3), b["t"].copy())
