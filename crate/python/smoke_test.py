"""Smoke test for the Python bindings.

Build first with `maturin develop -m crates/py/Cargo.toml` (or
`pip install ./crates/py`), then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import sgsformer as sg


def main():
    degraded, clean, masks = sg.simulate_sample(0, patch=32)
    assert degraded.shape == clean.shape == (3, 32, 32)
    assert degraded.dtype == np.float32
    cover = sum(masks)
    assert np.all(cover == 1.0), "masks must partition the image"

    assert sg.ssim(clean, clean) == 1.0
    err = np.full((3, 8, 8), 0.1, dtype=np.float32)
    assert abs(sg.psnr(np.zeros_like(err), err) - 20.0) < 1e-6
    assert sg.psnr(degraded, clean) == sg.psnr(clean, degraded)

    seg = sg.segment(degraded)
    assert np.array_equal(sg.compose(degraded, seg, 1.0), degraded)

    noiseless = '{"gamma": 0.5, "noise_sigma_read": 0.0, "noise_sigma_shot": 0.0}'
    blurred = sg.degrade(clean, noiseless)
    assert abs(blurred.mean() - 0.5 * clean.mean()) < 1e-5

    keep = sg.topk_keep(np.array([[0.1, 0.5, 0.5, 0.2]], dtype=np.float32), 2)
    assert keep.tolist() == [[False, True, True, False]]

    assert sg.cyclic_lr(0, 1e-5, 1e-4, 500) == 1e-4
    assert sg.cyclic_lr(250, 1e-5, 1e-4, 500) == 1e-5

    model = sg.Model("tiny", zero_init=True)
    out = model.restore(degraded, masks)
    assert np.array_equal(out, degraded), "zero-initialized model is the identity"
    out = model.restore(degraded[:, :20, :23].copy())
    assert out.shape == (3, 20, 23)

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.sgsf"
        model.save(path)
        again = sg.Model.load(path)
        assert again.param_count == model.param_count
        assert np.array_equal(again.restore(degraded, masks), model.restore(degraded, masks))

    n = sg.param_count("paper")
    assert 7_000_000 <= n <= 11_600_000, n

    rows = sg.grad_check("softmax_rows", seeds=1)
    assert rows and all(r[3] for r in rows), rows

    try:
        sg.Model(config_json='{"base_width": 4, "bogus": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    assert math.isfinite(sg.ssim(degraded, clean))
    print(f"ok: {model!r}, paper preset {n} params, degraded psnr {sg.psnr(degraded, clean):.2f} dB")


if __name__ == "__main__":
    main()
