"""Smoke test for the octa_py extension.

Uses an installed `octa_py` (e.g. a wheel from `maturin build` in crates/py)
when one is importable; otherwise loads the library built by
`cargo build --release -p octa-py`. Set OCTA_PY_LIB to point at a specific
build of the shared library.
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_extension(tmp):
    lib = os.environ.get("OCTA_PY_LIB")
    if lib is None:
        try:
            import octa_py

            return octa_py
        except ImportError:
            pass
    if lib is None:
        for name in ("libocta_py.so", "libocta_py.dylib", "octa_py.dll"):
            cand = os.path.join(ROOT, "target", "release", name)
            if os.path.exists(cand):
                lib = cand
                break
    if lib is None:
        sys.exit("octa_py library not found; run `cargo build --release -p octa-py`")
    dst = os.path.join(tmp, "octa_py.pyd" if lib.endswith(".dll") else "octa_py.so")
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("octa_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    with tempfile.TemporaryDirectory() as tmp:
        octa = load_extension(tmp)

        line = octa.masf_aline([100.0] * 20)
        assert line[0] == 100.0
        assert all(abs(v - 100.0 * math.sqrt(0.2)) < 1e-9 for v in line[1:])

        cfg = json.dumps({"dims": [16, 32, 32], "n_trees": 4, "n_repeats": 3})
        ph = octa.generate_phantom(seed=7, config=cfg)
        assert ph.merged.dims == [16, 32, 32]
        assert len(ph.scans) == 3
        q = octa.quantify(ph.clean)
        assert q["segment_count"] == ph.segment_count, (q, ph.segment_count)

        filtered = octa.masf(ph.scans[0])
        assert filtered.dims == ph.scans[0].dims
        assert all(f <= s + 1e-4 for f, s in zip(filtered.to_list(), ph.scans[0].to_list()))

        a = ph.merged.plane(8)
        assert octa.ssim(a, a, [32, 32]) == 1.0
        assert octa.gmsd(a, a, [32, 32]) == 0.0
        ref = [float(v) for v in range(64)]
        img = [r + 25.5 for r in ref]
        img[-1] = 255.0
        ref[-1] = 229.5
        assert abs(octa.psnr(img, ref) - 20.0) < 1e-9
        r = octa.compare_volumes(ph.scans[0], ph.merged)
        assert set(r) == {"psnr", "ssim", "gmsd", "volumetric"}

        model = octa.Model("tiny", "a", seed=42)
        assert model.num_params == 139176
        out = model.enhance(ph.scans[0], workers=2)
        # The untrained network is the identity up to [0, 255] rounding.
        assert max(abs(x - y) for x, y in zip(out.to_list(), ph.scans[0].to_list())) < 1e-3
        ckpt = os.path.join(tmp, "model.bin")
        model.save(ckpt)
        again = octa.Model.load(ckpt).enhance(ph.scans[0])
        assert again.to_list() == out.to_list()

        path = os.path.join(tmp, "scan.f32")
        ph.scans[0].save(path)
        assert octa.Volume.load(path).to_list() == ph.scans[0].to_list()

        try:
            octa.Volume([2, 2, 2], [0.0] * 7)
        except ValueError:
            pass
        else:
            raise AssertionError("bad volume accepted")

    print("octa_py smoke test passed")


if __name__ == "__main__":
    main()
