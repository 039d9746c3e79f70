"""Time the compiled z-buffer kernel against the numpy fallback.

    python benchmarks/bench_raster.py [--repeats 5] [--sizes 64 128 256] [--levels 2]

Both backends render the toy head at each resolution; the script checks the
buffers are bit-identical before reporting timings.
"""
import argparse
import json
import time

import numpy as np

from headfit import mesh, raster, synth


def head_mesh(levels):
    model = synth.make_toy_model()
    topo = mesh.build_dense_topology(model, levels=levels)
    pos = mesh.apply_barycentric(topo, model.template[model.head_selector])
    normals, _ = mesh.vertex_normals(pos, topo.faces)
    return pos, topo.faces, normals


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", action="store_true", help="print one JSON record per row")
    args = p.parse_args(argv)

    pos, faces, normals = head_mesh(args.levels)
    backends = raster.available_backends()
    if "cython" not in backends:
        print("compiled kernel not built; timing the fallback only")
    rows = []
    for size in args.sizes:
        cam = synth.default_camera(size, size)
        ref = raster.rasterize(pos, faces, normals, cam, backend="python")
        row = {"size": size, "faces": len(faces), "covered": int(ref.coverage.sum())}
        for backend in backends:
            buf = raster.rasterize(pos, faces, normals, cam, backend=backend, threads=args.threads)
            assert np.array_equal(buf.face_id, ref.face_id) and np.array_equal(buf.depth, ref.depth), backend
            row[backend] = best_of(lambda: raster.rasterize(pos, faces, normals, cam, backend=backend,
                                                            threads=args.threads), args.repeats)
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)

    if args.json:
        for row in rows:
            print(json.dumps(row))
        return
    print(f"{'size':>6} {'faces':>7} {'covered':>8} " + " ".join(f"{b + ' ms':>11}" for b in backends)
          + (f" {'speedup':>8}" if "cython" in backends else ""))
    for row in rows:
        line = f"{row['size']:>6} {row['faces']:>7} {row['covered']:>8} "
        line += " ".join(f"{1e3 * row[b]:>11.2f}" for b in backends)
        if "speedup" in row:
            line += f" {row['speedup']:>7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
