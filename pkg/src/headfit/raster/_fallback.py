"""Pure-numpy z-buffer, bit-identical to the compiled kernel."""
import numpy as np


def raster_kernel(xy, tz, area, bbox, width, height, nthreads=1):
    face_id = np.full((height, width), -1, dtype=np.int32)
    depth = np.full((height, width), np.inf)
    bary = np.zeros((height, width, 3))
    for f in np.flatnonzero(bbox[:, 2] <= bbox[:, 3]):
        c0, c1, r0, r1 = bbox[f]
        if c0 > c1:
            continue
        px = np.arange(c0, c1 + 1) + 0.5
        py = (np.arange(r0, r1 + 1) + 0.5)[:, None]
        x0, y0, x1, y1, x2, y2 = xy[f]
        a = area[f]
        e0 = (x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)
        e1 = (x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)
        e2 = (x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)
        inside = (e0 <= 0.0) & (e1 <= 0.0) & (e2 <= 0.0)
        if not inside.any():
            continue
        l0, l1, l2 = e0 / a, e1 / a, e2 / a
        z0, z1, z2 = tz[f]
        d = 1.0 / (l0 / z0 + l1 / z1 + l2 / z2)
        block = depth[r0:r1 + 1, c0:c1 + 1]
        win = inside & (d < block)
        if not win.any():
            continue
        block[win] = d[win]
        face_id[r0:r1 + 1, c0:c1 + 1][win] = f
        bb = bary[r0:r1 + 1, c0:c1 + 1]
        bb[win, 0] = (l0 / z0 * d)[win]
        bb[win, 1] = (l1 / z1 * d)[win]
        bb[win, 2] = (l2 / z2 * d)[win]
    return face_id, depth, bary
