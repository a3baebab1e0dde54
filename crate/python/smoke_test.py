"""Smoke test for the promptseg_py extension.

Build and place the module next to this script first:

    cargo build --release -p promptseg-py --features extension-module
    cp target/release/libpromptseg_py.so python/promptseg_py.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import promptseg_py as ps  # noqa: E402

TINY = {
    "input_size": 64,
    "patch_size": 8,
    "embed_dim": 32,
    "depth": 1,
    "heads": 2,
    "pyramid_dims": [16, 16, 16, 16],
    "decoder_dim": 16,
    "text_dim": 8,
}


def image(h, w):
    return [((c * 31 + r * 7 + x * 3) % 256) / 255.0 for c in range(3) for r in range(h) for x in range(w)]


def main():
    model = ps.Model(json.dumps(TINY))
    assert model.input_size == 64
    assert len(model.fingerprint) == 16
    assert model.num_params() > 0

    h, w = 48, 80
    rgb = image(h, w)
    emb = model.encode(h, w, rgb)
    prompts = json.dumps({"clicks": [{"row": 30, "col": 20, "polarity": "positive"}]})
    cached = model.predict(emb, prompts)
    fresh = model.forward(h, w, rgb, prompts)
    assert cached == fresh, "cached embedding must match a fresh forward pass"
    assert cached.shape == (64, 64)

    rle = cached.to_rle()
    assert ps.Mask.from_rle(rle) == cached

    dense = ps.rasterize(prompts, 64, 64, 3)
    assert len(dense) == 3 * 64 * 64
    assert dense[30 * 64 + 20] == 1.0 and sum(dense) == 29.0

    gt = ps.Mask(4, 4, [r < 2 for r in range(4) for _ in range(4)])
    empty = ps.Mask(4, 4, [False] * 16)
    row, col, polarity = ps.next_click(empty, gt)
    assert polarity == "positive" and row < 2
    assert ps.next_click(gt, gt) is None
    assert gt.iou(gt) == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "m.ckpt")
        model.save(ckpt)
        again = ps.Model.load(ckpt)
        assert again.weights_fingerprint() == model.weights_fingerprint()

        data = os.path.join(tmp, "data")
        ps.synthetic_dataset(data, 2, 64, 64, 1)
        report = json.loads(model.evaluate(data, os.path.join(tmp, "report"), 3))
        assert report["aggregate"]["samples"] == 2
        assert os.path.exists(os.path.join(tmp, "report", "records.csv"))

        try:
            model.predict(emb, json.dumps({"clicks": [{"row": 99, "col": 0, "polarity": "positive"}]}))
        except ValueError as e:
            assert "clicks[0]" in str(e)
        else:
            raise AssertionError("out-of-range click accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
