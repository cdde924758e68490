"""Smoke test for the fginpaint Python bindings.

Build and install first:  pip install --no-build-isolation crates/py
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import fginpaint as fg


def main():
    img, fgm = fg.synthetic_face(3, 32)
    assert img.shape == (32, 32, 3) and img.range == "unit"
    assert fgm.shape == (32, 32) and fgm.count_ones() > 0

    arr = np.asarray(img.tolist())
    assert fg.Image(arr.tolist()) == img
    assert np.allclose(np.asarray(img.to_range("symmetric").tolist()), arr * 2 - 1)

    hole = fg.generate_freeform_mask(7, 32, 32)
    assert hole == fg.generate_freeform_mask(7, 32, 32)
    assert 0.0 < hole.ratio() < 1.0
    assert len(fg.generate_mask_set(1, 3, 32, 32)) == 3

    labels = {"background": 0, "skin": 1, "hair": 13}
    m = fg.foreground_from_labels([[0, 1], [13, 0]], labels)
    assert m.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    masked = fg.apply_hole_mask(img, hole)
    assert fg.composite_output(img, img, hole) == img
    assert fg.loss_f(img, img, fgm) == 0.0
    assert fg.loss_cf(masked, masked, fgm) == 0.0
    assert fg.loss_pf(masked, masked, fgm) == 0.0
    assert fg.critic_loss([1.0, 3.0], [0.0]) == -2.0
    assert fg.generator_adv_loss([0.5, 1.5]) == -1.0

    noisy = fg.Image(np.clip(arr + 0.05, 0, 1).tolist())
    assert math.isinf(fg.psnr(img, img))
    assert fg.psnr(img, noisy) > 20
    assert fg.mse(img, noisy, fgm) > 0 and fg.mae(img, noisy) > 0
    assert abs(fg.ssim(img, img) - 1.0) < 1e-12
    faces = [fg.synthetic_face(s, 32)[0] for s in range(4)]
    assert abs(fg.fid(faces, faces)) < 1e-6

    try:
        fg.Image([[[2.0, 0.0, 0.0]]])
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range image accepted")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        fg.write_synthetic_dataset(str(tmp / "data"), 3, 32, 2)
        overrides = {
            "data_root": str(tmp / "data"), "out_dir": str(tmp / "run"), "epochs": "1",
            "image_size": "16", "batch_size": "2", "gen_depth": "3", "gen_base_channels": "4",
            "critic_depth": "2", "critic_base_channels": "4", "feature_net": "compact",
            "test_fraction": "0",
        }
        assert "image_size = 16" in fg.resolve_config(overrides=overrides)
        ckpt = fg.train(overrides=overrides)
        assert Path(ckpt).name == "step_00000002.ckpt"
        out = fg.infer(ckpt, str(tmp / "data/images/face_0000.png"), str(tmp / "data/holes/hole_0000.png"),
                       str(tmp / "out.png"))
        assert out.shape == (32, 32, 3) and (tmp / "out.png").exists()

    print("fginpaint python smoke test: ok")


if __name__ == "__main__":
    main()
